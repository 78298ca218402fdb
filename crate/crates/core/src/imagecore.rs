//! 8-bit images and their block decomposition.
//!
//! Layout is row-major with interleaved channels. Patches are numbered in
//! row-major grid order starting at 0.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ImageTensor({}x{}x{})",
            self.height, self.width, self.channels
        )
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{}x{}x{} image needs {} samples, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from a per-sample function `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn samples(&self) -> &[u8] {
        &self.data
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let at = (row * self.width + col) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, u8> {
        self.data.chunks_exact(self.channels)
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, u8> {
        self.data.chunks_exact_mut(self.channels)
    }

    /// SHA-256 over the raw row-major bytes, lowercase hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.data))
    }

    /// Largest centered crop whose dimensions are multiples of the grid.
    pub fn center_crop_to_grid(&self, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        let h = self.height / grid_rows * grid_rows;
        let w = self.width / grid_cols * grid_cols;
        if h == 0 || w == 0 {
            return Err(Error::dims(format!(
                "{}x{} image is smaller than a {}x{} grid",
                self.height, self.width, grid_rows, grid_cols
            )));
        }
        let top = (self.height - h) / 2;
        let left = (self.width - w) / 2;
        Self::from_fn(h, w, self.channels, |y, x, c| {
            self.pixel(top + y, left + x)[c]
        })
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        use image::ColorType;
        match img.color() {
            ColorType::L8 | ColorType::La8 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self::new(h as usize, w as usize, 1, g.into_raw())
            }
            ColorType::Rgb8 | ColorType::Rgba8 => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new(h as usize, w as usize, 3, rgb.into_raw())
            }
            other => Err(Error::Format {
                what: "image",
                detail: format!("only 8-bit grayscale or RGB is supported, got {other:?}"),
            }),
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, self.data.clone()).expect("buffer length checked"),
            ),
            _ => DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, self.data.clone()).expect("buffer length checked"),
            ),
        }
    }

    /// Loads a PNG (or PPM/PGM fixture).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    /// Saves in the format implied by the extension (PNG for `.png`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_dynamic().save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}

/// Block layout of an image: `grid_rows x grid_cols` patches of `patch_h x patch_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    pub fn new(grid_rows: usize, grid_cols: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || patch_h == 0 || patch_w == 0 {
            return Err(Error::invalid("grid and patch sizes must be positive"));
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            patch_h,
            patch_w,
        })
    }

    /// Grid of `rows x cols` blocks covering a `height x width` image exactly.
    pub fn for_image(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid must have at least one row and column"));
        }
        if !height.is_multiple_of(rows)
            || !width.is_multiple_of(cols)
            || height < rows
            || width < cols
        {
            return Err(Error::dims(format!(
                "{height}x{width} image is not divisible by a {rows}x{cols} grid"
            )));
        }
        Self::new(rows, cols, height / rows, width / cols)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn image_height(&self) -> usize {
        self.grid_rows * self.patch_h
    }

    pub fn image_width(&self) -> usize {
        self.grid_cols * self.patch_w
    }

    pub fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.height() != self.image_height() || img.width() != self.image_width() {
            return Err(Error::dims(format!(
                "{}x{} image does not match {}x{} grid of {}x{} patches",
                img.height(),
                img.width(),
                self.grid_rows,
                self.grid_cols,
                self.patch_h,
                self.patch_w
            )));
        }
        Ok(())
    }
}

/// Grid shape only (`"8x8"`), resolved against an image with [`GridSpec::resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { rows: 8, cols: 8 }
    }
}

impl GridSpec {
    pub fn resolve(&self, img: &ImageTensor) -> Result<PatchGrid> {
        PatchGrid::for_image(img.height(), img.width(), self.rows, self.cols)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::invalid(format!("grid must look like 8x8, got {s:?}")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::invalid(format!("bad grid dimension {t:?}")))
        };
        Ok(Self {
            rows: parse(r)?,
            cols: parse(c)?,
        })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Patch {
    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn same_shape(&self, other: &Patch) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

pub fn split_into_patches(img: &ImageTensor, grid: &PatchGrid) -> Result<Vec<Patch>> {
    grid.check_image(img)?;
    let ch = img.channels();
    let row_len = grid.patch_w * ch;
    let mut out = Vec::with_capacity(grid.num_patches());
    for gr in 0..grid.grid_rows {
        for gc in 0..grid.grid_cols {
            let mut data = Vec::with_capacity(grid.pixels_per_patch() * ch);
            for y in 0..grid.patch_h {
                let start = ((gr * grid.patch_h + y) * img.width() + gc * grid.patch_w) * ch;
                data.extend_from_slice(&img.samples()[start..start + row_len]);
            }
            out.push(Patch {
                index: gr * grid.grid_cols + gc,
                height: grid.patch_h,
                width: grid.patch_w,
                channels: ch,
                data,
            });
        }
    }
    Ok(out)
}

/// Places `patches[k]` at grid slot `k` (row-major).
pub fn reassemble(patches: &[Patch], grid: &PatchGrid) -> Result<ImageTensor> {
    if patches.len() != grid.num_patches() {
        return Err(Error::dims(format!(
            "grid has {} slots, got {} patches",
            grid.num_patches(),
            patches.len()
        )));
    }
    let ch = patches[0].channels;
    for p in patches {
        if p.height != grid.patch_h || p.width != grid.patch_w || p.channels != ch {
            return Err(Error::dims(format!(
                "patch {} is {}x{}x{}, grid expects {}x{}x{}",
                p.index, p.height, p.width, p.channels, grid.patch_h, grid.patch_w, ch
            )));
        }
    }
    let (h, w) = (grid.image_height(), grid.image_width());
    let mut data = vec![0u8; h * w * ch];
    let row_len = grid.patch_w * ch;
    for (slot, p) in patches.iter().enumerate() {
        let (gr, gc) = (slot / grid.grid_cols, slot % grid.grid_cols);
        for y in 0..grid.patch_h {
            let dst = ((gr * grid.patch_h + y) * w + gc * grid.patch_w) * ch;
            data[dst..dst + row_len].copy_from_slice(&p.data[y * row_len..(y + 1) * row_len]);
        }
    }
    ImageTensor::new(h, w, ch, data)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.random()).unwrap()
    }

    #[test]
    fn split_256_into_64() {
        let img = random_image(256, 256, 3, 1);
        let grid = GridSpec::default().resolve(&img).unwrap();
        let patches = split_into_patches(&img, &grid).unwrap();
        assert_eq!(patches.len(), 64);
        assert!(patches
            .iter()
            .all(|p| p.height == 32 && p.width == 32 && p.data.len() == 32 * 32 * 3));
        assert_eq!(
            patches.iter().map(|p| p.index).collect::<Vec<_>>(),
            (0..64).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_patch_grid_is_identity() {
        let img = random_image(12, 20, 1, 2);
        let grid = PatchGrid::for_image(12, 20, 1, 1).unwrap();
        let patches = split_into_patches(&img, &grid).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].data, img.samples());
        assert_eq!(reassemble(&patches, &grid).unwrap(), img);
    }

    #[test]
    fn rejects_non_divisible() {
        let img = random_image(10, 10, 3, 3);
        assert!(matches!(
            GridSpec { rows: 3, cols: 3 }.resolve(&img),
            Err(Error::DimensionMismatch(_))
        ));
        let grid = PatchGrid::for_image(12, 12, 3, 3).unwrap();
        assert!(split_into_patches(&img, &grid).is_err());
    }

    #[test]
    fn reassemble_rejects_bad_input() {
        let img = random_image(16, 16, 3, 4);
        let grid = PatchGrid::for_image(16, 16, 4, 4).unwrap();
        let mut patches = split_into_patches(&img, &grid).unwrap();
        assert!(reassemble(&patches[..15], &grid).is_err());
        patches[3].data.pop();
        patches[3].width = 3;
        assert!(reassemble(&patches, &grid).is_err());
    }

    #[test]
    fn permuted_blocks_land_in_slots() {
        // Label every block by a constant value equal to its ordinal.
        let grid = PatchGrid::for_image(16, 16, 4, 4).unwrap();
        let img = ImageTensor::from_fn(16, 16, 3, |y, x, _| ((y / 4) * 4 + x / 4) as u8).unwrap();
        let patches = split_into_patches(&img, &grid).unwrap();
        let sigma = [5usize, 0, 15, 3, 2, 9, 1, 4, 14, 6, 7, 8, 10, 11, 13, 12];
        let shuffled: Vec<Patch> = sigma.iter().map(|&s| patches[s].clone()).collect();
        let out = reassemble(&shuffled, &grid).unwrap();
        for (slot, &src) in sigma.iter().enumerate() {
            let (gr, gc) = (slot / 4, slot % 4);
            for y in 0..4 {
                for x in 0..4 {
                    assert!(out
                        .pixel(gr * 4 + y, gc * 4 + x)
                        .iter()
                        .all(|&v| v as usize == src));
                }
            }
        }
    }

    #[test]
    fn grid_spec_parse() {
        assert_eq!(
            "8x8".parse::<GridSpec>().unwrap(),
            GridSpec { rows: 8, cols: 8 }
        );
        assert_eq!(
            "2X3".parse::<GridSpec>().unwrap(),
            GridSpec { rows: 2, cols: 3 }
        );
        assert!("8".parse::<GridSpec>().is_err());
        assert!("0x4".parse::<GridSpec>().is_err());
    }

    #[test]
    fn center_crop() {
        let img = ImageTensor::from_fn(10, 13, 1, |y, x, _| (y * 13 + x) as u8).unwrap();
        let c = img.center_crop_to_grid(4, 4).unwrap();
        assert_eq!((c.height(), c.width()), (8, 12));
        assert_eq!(c.pixel(0, 0), img.pixel(1, 0));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = random_image(9, 7, c, 5);
            let p = dir.path().join(format!("x{c}.png"));
            img.save(&p).unwrap();
            assert_eq!(ImageTensor::load(&p).unwrap(), img);
            let p = dir
                .path()
                .join(format!("x{c}.{}", if c == 1 { "pgm" } else { "ppm" }));
            img.save(&p).unwrap();
            assert_eq!(ImageTensor::load(&p).unwrap(), img);
        }
    }

    proptest! {
        #[test]
        fn split_reassemble_inverse(
            rows in 1usize..6, cols in 1usize..6, ph in 1usize..6, pw in 1usize..6,
            ch in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()
        ) {
            let img = random_image(rows * ph, cols * pw, ch, seed);
            let grid = PatchGrid::for_image(rows * ph, cols * pw, rows, cols).unwrap();
            let patches = split_into_patches(&img, &grid).unwrap();
            let mut before = img.samples().to_vec();
            let mut after: Vec<u8> = patches.iter().flat_map(|p| p.data.iter().copied()).collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
            prop_assert_eq!(reassemble(&patches, &grid).unwrap(), img);
        }
    }
}
