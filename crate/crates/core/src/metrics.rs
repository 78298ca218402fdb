//! Cipher-image security metrics: NPCR, UACI, adjacent-pixel correlation,
//! Shannon entropy and windowed SSIM.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encrypt, CipherConfig};
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::keyschedule::{MasterKey, KEY_LEN};

/// Pair count used by [`SecurityMetrics::between`] for correlations.
pub const DEFAULT_CORR_SAMPLES: usize = 10_000;
pub const DEFAULT_CORR_SEED: u64 = 0x5eed;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Fraction of pixel positions where any channel differs.
pub fn npcr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let changed = a.pixels().zip(b.pixels()).filter(|(p, q)| p != q).count();
    Ok(changed as f64 / a.pixel_count() as f64)
}

/// Mean of `|a - b| / 255` over all samples.
pub fn uaci(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let total: u64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(&x, &y)| u64::from(x.abs_diff(y)))
        .sum();
    Ok(total as f64 / (255.0 * a.samples().len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub coefficient: f64,
    /// Set when either sample series has zero variance; `coefficient` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation of the first channel over `samples` seeded random
/// adjacent pairs (`samples == 0` uses every pair).
pub fn adjacent_correlation(
    img: &ImageTensor,
    direction: Direction,
    samples: usize,
    seed: u64,
) -> Result<Correlation> {
    let (dy, dx) = match direction {
        Direction::Horizontal => (0, 1),
        Direction::Vertical => (1, 0),
    };
    let (rows, cols) = (img.height() - dy, img.width() - dx);
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "{img:?} has fewer than 2 pixels along {direction:?}"
        )));
    }
    let at = |y: usize, x: usize| f64::from(img.pixel(y, x)[0]);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    if samples == 0 {
        for y in 0..rows {
            for x in 0..cols {
                xs.push(at(y, x));
                ys.push(at(y + dy, x + dx));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let (y, x) = (rng.random_range(0..rows), rng.random_range(0..cols));
            xs.push(at(y, x));
            ys.push(at(y + dy, x + dx));
        }
    }
    Ok(pearson(&xs, &ys))
}

fn pearson(xs: &[f64], ys: &[f64]) -> Correlation {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (u, v) = (x - mx, y - my);
        sxy += u * v;
        sxx += u * u;
        syy += v * v;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Correlation {
            coefficient: 0.0,
            degenerate: true,
        };
    }
    Correlation {
        coefficient: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Entropy in bits of the 256-bin histogram over all samples.
pub fn shannon_entropy(img: &ImageTensor) -> f64 {
    let mut hist = [0u64; 256];
    for &v in img.samples() {
        hist[v as usize] += 1;
    }
    let n = img.samples().len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Luma plane (0.299 R + 0.587 G + 0.114 B); grayscale passes through.
pub fn luma(img: &ImageTensor) -> Vec<f64> {
    match img.channels() {
        1 => img.samples().iter().map(|&v| f64::from(v)).collect(),
        _ => img
            .pixels()
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect(),
    }
}

/// Mean SSIM over 8x8 luma windows placed every 4 pixels, with population
/// statistics and the usual 8-bit constants `(0.01·255)²`, `(0.03·255)²`.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (la, lb) = (luma(a), luma(b));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityMetrics {
    pub npcr: f64,
    pub uaci: f64,
    pub corr_h: f64,
    pub corr_v: f64,
    pub entropy: f64,
    pub ssim: f64,
}

impl SecurityMetrics {
    /// Pairwise metrics between `a` and `b`; correlations and entropy are of `b`.
    pub fn between(a: &ImageTensor, b: &ImageTensor) -> Result<Self> {
        Ok(Self {
            npcr: npcr(a, b)?,
            uaci: uaci(a, b)?,
            corr_h: adjacent_correlation(
                b,
                Direction::Horizontal,
                DEFAULT_CORR_SAMPLES,
                DEFAULT_CORR_SEED,
            )?
            .coefficient,
            corr_v: adjacent_correlation(
                b,
                Direction::Vertical,
                DEFAULT_CORR_SAMPLES,
                DEFAULT_CORR_SEED,
            )?
            .coefficient,
            entropy: shannon_entropy(b),
            ssim: ssim(a, b)?,
        })
    }
}

/// How the second key in a sensitivity run differs from the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyBitFlip {
    /// Degenerate control: same key.
    None,
    /// Flip one bit chosen by a seeded draw.
    Seeded(u64),
    Bit(usize),
}

impl KeyBitFlip {
    pub fn apply(self, key: &MasterKey) -> MasterKey {
        match self {
            KeyBitFlip::None => key.clone(),
            KeyBitFlip::Seeded(seed) => {
                key.with_flipped_bit(ChaCha8Rng::seed_from_u64(seed).random_range(0..KEY_LEN * 8))
            }
            KeyBitFlip::Bit(bit) => key.with_flipped_bit(bit),
        }
    }
}

/// Encrypts under `key` and under a one-bit variant, and compares the two
/// ciphertexts.
pub fn key_sensitivity(
    img: &ImageTensor,
    key: &MasterKey,
    config: &CipherConfig,
    flip: KeyBitFlip,
) -> Result<SecurityMetrics> {
    let first = encrypt(img, key, config)?;
    let second = encrypt(img, &flip.apply(key), config)?;
    SecurityMetrics::between(&first.tensor, &second.tensor)
}

/// One CSV row per image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub path_a: String,
    pub path_b: String,
    pub npcr: f64,
    pub uaci: f64,
    pub corr_h: f64,
    pub corr_v: f64,
    pub entropy_a: f64,
    pub entropy_b: f64,
    pub ssim: f64,
}

impl MetricsRow {
    pub fn compute(path_a: &str, a: &ImageTensor, path_b: &str, b: &ImageTensor) -> Result<Self> {
        let m = SecurityMetrics::between(a, b)?;
        Ok(Self {
            path_a: path_a.to_string(),
            path_b: path_b.to_string(),
            npcr: m.npcr,
            uaci: m.uaci,
            corr_h: m.corr_h,
            corr_v: m.corr_v,
            entropy_a: shannon_entropy(a),
            entropy_b: m.entropy,
            ssim: m.ssim,
        })
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}
