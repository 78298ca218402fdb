//! Block-pixel cipher and its inverse.
//!
//! Stage order (scheme version 1): per-block pixel scramble, block shuffle,
//! reassemble, per-pixel negative-positive inversion, per-pixel channel
//! shuffle. Decryption runs the inverse stages in reverse.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{reassemble, split_into_patches, GridSpec, ImageTensor, Patch, PatchGrid};
use crate::keyschedule::{derive_stream, MasterKey, Permutation, StageTag};

pub const SCHEME_VERSION: u32 = 1;

/// Which cipher stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub pixel_scramble: bool,
    pub block_shuffle: bool,
    pub negpos: bool,
    pub channel_shuffle: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        pixel_scramble: true,
        block_shuffle: true,
        negpos: true,
        channel_shuffle: true,
    };
    pub const NONE: Stages = Stages {
        pixel_scramble: false,
        block_shuffle: false,
        negpos: false,
        channel_shuffle: false,
    };

    /// Decodes bits 0..4 as (scramble, shuffle, negpos, channel).
    pub fn from_mask(mask: u8) -> Self {
        Stages {
            pixel_scramble: mask & 1 != 0,
            block_shuffle: mask & 2 != 0,
            negpos: mask & 4 != 0,
            channel_shuffle: mask & 8 != 0,
        }
    }

    pub fn any(&self) -> bool {
        self.pixel_scramble || self.block_shuffle || self.negpos || self.channel_shuffle
    }
}

impl Default for Stages {
    fn default() -> Self {
        Stages::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherConfig {
    pub grid: GridSpec,
    pub stages: Stages,
    pub scheme_version: u32,
}

impl Default for CipherConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            stages: Stages::ALL,
            scheme_version: SCHEME_VERSION,
        }
    }
}

impl CipherConfig {
    pub fn new(grid: GridSpec, stages: Stages) -> Self {
        Self {
            grid,
            stages,
            scheme_version: SCHEME_VERSION,
        }
    }
}

/// Ciphertext pixels plus the public metadata needed to invert them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedImage {
    pub tensor: ImageTensor,
    pub grid: PatchGrid,
    pub stages: Stages,
    pub scheme_version: u32,
    pub key_id: String,
    pub source_digest: Option<String>,
    pub notices: Vec<String>,
}

/// On-disk sidecar (`<stem>.enc.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub scheme_version: u32,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub pixel_scramble: bool,
    pub block_shuffle: bool,
    pub negpos: bool,
    pub channel_shuffle: bool,
    pub key_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_digest: Option<String>,
    #[serde(default)]
    pub notices: Vec<String>,
}

impl EncryptedImage {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            scheme_version: self.scheme_version,
            grid_rows: self.grid.grid_rows,
            grid_cols: self.grid.grid_cols,
            patch_h: self.grid.patch_h,
            patch_w: self.grid.patch_w,
            pixel_scramble: self.stages.pixel_scramble,
            block_shuffle: self.stages.block_shuffle,
            negpos: self.stages.negpos,
            channel_shuffle: self.stages.channel_shuffle,
            key_id: self.key_id.clone(),
            source_digest: self.source_digest.clone(),
            notices: self.notices.clone(),
        }
    }

    pub fn from_parts(tensor: ImageTensor, sidecar: Sidecar) -> Result<Self> {
        if sidecar.scheme_version != SCHEME_VERSION {
            return Err(Error::Format {
                what: "sidecar",
                detail: format!("unsupported scheme_version {}", sidecar.scheme_version),
            });
        }
        let grid = PatchGrid::new(
            sidecar.grid_rows,
            sidecar.grid_cols,
            sidecar.patch_h,
            sidecar.patch_w,
        )?;
        grid.check_image(&tensor)?;
        Ok(Self {
            tensor,
            grid,
            stages: Stages {
                pixel_scramble: sidecar.pixel_scramble,
                block_shuffle: sidecar.block_shuffle,
                negpos: sidecar.negpos,
                channel_shuffle: sidecar.channel_shuffle,
            },
            scheme_version: sidecar.scheme_version,
            key_id: sidecar.key_id,
            source_digest: sidecar.source_digest,
            notices: sidecar.notices,
        })
    }

    /// Paths `<dir>/<stem>.enc.png` and `<dir>/<stem>.enc.json`.
    pub fn paths_for(dir: impl AsRef<Path>, stem: &str) -> (PathBuf, PathBuf) {
        let dir = dir.as_ref();
        (
            dir.join(format!("{stem}.enc.png")),
            dir.join(format!("{stem}.enc.json")),
        )
    }

    /// Sidecar path for a ciphertext PNG path (`x.enc.png` → `x.enc.json`).
    pub fn sidecar_path(png: impl AsRef<Path>) -> PathBuf {
        png.as_ref().with_extension("json")
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let (png, json) = Self::paths_for(dir, stem);
        self.tensor.save(&png)?;
        let text = serde_json::to_string_pretty(&self.sidecar())?;
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        Ok((png, json))
    }

    pub fn read(png: impl AsRef<Path>) -> Result<Self> {
        let png = png.as_ref();
        let tensor = ImageTensor::load(png)?;
        let json = Self::sidecar_path(png);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        Self::from_parts(tensor, serde_json::from_str(&text)?)
    }
}

pub fn scramble_patch(patch: &Patch, perm: &Permutation) -> Result<Patch> {
    let pixels: Vec<&[u8]> = patch.data.chunks_exact(patch.channels).collect();
    let moved = perm.apply(&pixels)?;
    Ok(Patch {
        data: moved.concat(),
        ..patch.clone()
    })
}

pub fn unscramble_patch(patch: &Patch, perm: &Permutation) -> Result<Patch> {
    let pixels: Vec<&[u8]> = patch.data.chunks_exact(patch.channels).collect();
    let moved = perm.apply_inverse(&pixels)?;
    Ok(Patch {
        data: moved.concat(),
        ..patch.clone()
    })
}

/// Output slot `j` holds input patch `perm[j]`.
pub fn shuffle_blocks(patches: &[Patch], perm: &Permutation) -> Result<Vec<Patch>> {
    perm.apply(patches)
}

pub fn unshuffle_blocks(patches: &[Patch], perm: &Permutation) -> Result<Vec<Patch>> {
    perm.apply_inverse(patches)
}

/// Inverts every sample of pixel `i` when `bits[i]` is set. Self-inverse.
pub fn negpos_transform(img: &ImageTensor, bits: &[bool]) -> Result<ImageTensor> {
    if bits.len() != img.pixel_count() {
        return Err(Error::dims(format!(
            "negpos needs {} bits, got {}",
            img.pixel_count(),
            bits.len()
        )));
    }
    let mut out = img.clone();
    for (px, &flip) in out.pixels_mut().zip(bits) {
        if flip {
            px.iter_mut().for_each(|v| *v = 255 - *v);
        }
    }
    Ok(out)
}

/// Output channel `j` of pixel `i` is input channel `perms[i][j]`.
/// Grayscale images pass through unchanged.
pub fn channel_shuffle(img: &ImageTensor, perms: &[Permutation]) -> Result<ImageTensor> {
    permute_channels(img, perms, false)
}

pub fn channel_unshuffle(img: &ImageTensor, perms: &[Permutation]) -> Result<ImageTensor> {
    permute_channels(img, perms, true)
}

fn permute_channels(
    img: &ImageTensor,
    perms: &[Permutation],
    inverse: bool,
) -> Result<ImageTensor> {
    if img.channels() == 1 {
        return Ok(img.clone());
    }
    if perms.len() != img.pixel_count() {
        return Err(Error::dims(format!(
            "channel shuffle needs {} permutations, got {}",
            img.pixel_count(),
            perms.len()
        )));
    }
    let mut out = img.clone();
    for (px, perm) in out.pixels_mut().zip(perms) {
        let src = [px[0], px[1], px[2]];
        let moved = if inverse {
            perm.apply_inverse(&src)?
        } else {
            perm.apply(&src)?
        };
        px.copy_from_slice(&moved);
    }
    Ok(out)
}

struct Keying<'k> {
    key: &'k MasterKey,
    grid: PatchGrid,
}

impl Keying<'_> {
    fn pixel_perm(&self, block: usize) -> Permutation {
        derive_stream(self.key, StageTag::PixelScramble, block as u64)
            .permutation(self.grid.pixels_per_patch())
            .expect("patch has at least one pixel")
    }

    fn block_perm(&self) -> Permutation {
        derive_stream(self.key, StageTag::BlockShuffle, 0)
            .permutation(self.grid.num_patches())
            .expect("grid has at least one patch")
    }

    fn negpos_bits(&self, pixels: usize) -> Vec<bool> {
        derive_stream(self.key, StageTag::NegPos, 0).bits(pixels)
    }

    fn channel_perms(&self, pixels: usize) -> Vec<Permutation> {
        let mut s = derive_stream(self.key, StageTag::ChannelShuffle, 0);
        (0..pixels)
            .map(|_| s.permutation(3).expect("n = 3"))
            .collect()
    }
}

pub fn encrypt(
    img: &ImageTensor,
    key: &MasterKey,
    config: &CipherConfig,
) -> Result<EncryptedImage> {
    if config.scheme_version != SCHEME_VERSION {
        return Err(Error::invalid(format!(
            "unsupported scheme_version {}",
            config.scheme_version
        )));
    }
    let grid = config.grid.resolve(img)?;
    let keying = Keying { key, grid };
    let mut stages = config.stages;
    let mut notices = Vec::new();
    if !stages.any() {
        notices.push("no cipher stages enabled; ciphertext equals plaintext".to_string());
    }
    if stages.channel_shuffle && img.channels() == 1 {
        stages.channel_shuffle = false;
        notices.push("channel shuffle skipped: grayscale input".to_string());
    }

    let mut cur = img.clone();
    if stages.pixel_scramble || stages.block_shuffle {
        let mut patches = split_into_patches(&cur, &grid)?;
        if stages.pixel_scramble {
            patches = patches
                .iter()
                .map(|p| scramble_patch(p, &keying.pixel_perm(p.index)))
                .collect::<Result<_>>()?;
        }
        if stages.block_shuffle {
            patches = shuffle_blocks(&patches, &keying.block_perm())?;
        }
        cur = reassemble(&patches, &grid)?;
    }
    if stages.negpos {
        cur = negpos_transform(&cur, &keying.negpos_bits(cur.pixel_count()))?;
    }
    if stages.channel_shuffle {
        cur = channel_shuffle(&cur, &keying.channel_perms(cur.pixel_count()))?;
    }

    Ok(EncryptedImage {
        tensor: cur,
        grid,
        stages,
        scheme_version: SCHEME_VERSION,
        key_id: key.key_id(),
        source_digest: Some(img.digest()),
        notices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrity {
    Verified,
    Mismatch,
    Unchecked,
}

#[derive(Debug, Clone)]
pub struct Decrypted {
    pub image: ImageTensor,
    pub integrity: Integrity,
}

/// Decrypts after checking the key fingerprint.
pub fn decrypt(enc: &EncryptedImage, key: &MasterKey) -> Result<ImageTensor> {
    decrypt_with(enc, key, false).map(|d| d.image)
}

/// Decrypts, optionally ignoring a fingerprint mismatch (`force`), and
/// reports whether the result matches the recorded plaintext digest.
pub fn decrypt_with(enc: &EncryptedImage, key: &MasterKey, force: bool) -> Result<Decrypted> {
    let found = key.key_id();
    if found != enc.key_id && !force {
        return Err(Error::WrongKey {
            expected: enc.key_id.clone(),
            found,
        });
    }
    let grid = enc.grid;
    grid.check_image(&enc.tensor)?;
    let keying = Keying { key, grid };
    let stages = enc.stages;

    let mut cur = enc.tensor.clone();
    let pixels = cur.pixel_count();
    if stages.channel_shuffle {
        cur = channel_unshuffle(&cur, &keying.channel_perms(pixels))?;
    }
    if stages.negpos {
        cur = negpos_transform(&cur, &keying.negpos_bits(pixels))?;
    }
    if stages.pixel_scramble || stages.block_shuffle {
        let mut patches = split_into_patches(&cur, &grid)?;
        if stages.block_shuffle {
            patches = unshuffle_blocks(&patches, &keying.block_perm())?;
        }
        // Slot k now holds original block k again.
        for (k, p) in patches.iter_mut().enumerate() {
            p.index = k;
        }
        if stages.pixel_scramble {
            patches = patches
                .iter()
                .map(|p| unscramble_patch(p, &keying.pixel_perm(p.index)))
                .collect::<Result<_>>()?;
        }
        cur = reassemble(&patches, &grid)?;
    }

    let integrity = match &enc.source_digest {
        None => Integrity::Unchecked,
        Some(d) if *d == cur.digest() => Integrity::Verified,
        Some(_) => Integrity::Mismatch,
    };
    Ok(Decrypted {
        image: cur,
        integrity,
    })
}
