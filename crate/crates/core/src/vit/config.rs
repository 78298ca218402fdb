use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub use_positional_embedding: bool,
    /// Start the classifier matrix at zero so the initial logits are uniform.
    #[serde(default)]
    pub zero_init_head: bool,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 2,
            mlp_dim: 64,
            num_classes: 2,
            use_positional_embedding: false,
            zero_init_head: false,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.image_h,
            self.image_w,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.num_heads,
            self.num_layers,
            self.mlp_dim,
            self.num_classes,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("ViT dimensions must all be positive"));
        }
        if !self.image_h.is_multiple_of(self.patch_size)
            || !self.image_w.is_multiple_of(self.patch_size)
        {
            return Err(Error::invalid(format!(
                "patch size {} does not divide {}x{}",
                self.patch_size, self.image_h, self.image_w
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn input_len(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}
