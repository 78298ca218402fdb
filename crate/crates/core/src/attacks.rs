//! Ciphertext-only reconstruction attacks.
//!
//! The leading-bit attack targets negative-positive inversion: natural images
//! are mostly below mid-gray, so samples with the top bit set are likely
//! inverted. The minimum-difference attack targets block shuffling as a
//! jigsaw, reassembling blocks greedily by boundary continuity.
//!
//! Neither attack touches key material; the inputs are ciphertext pixels and
//! the public grid from the sidecar.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::EncryptedImage;
use crate::error::{Error, Result};
use crate::imagecore::{reassemble, split_into_patches, ImageTensor, Patch, PatchGrid};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    LeadingBit,
    MinimumDifference,
    /// Leading-bit output fed into minimum-difference.
    Combined,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [
        AttackKind::LeadingBit,
        AttackKind::MinimumDifference,
        AttackKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::LeadingBit => "leading-bit",
            AttackKind::MinimumDifference => "minimum-difference",
            AttackKind::Combined => "combined",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading-bit" | "leadingbit" | "lb" => Ok(AttackKind::LeadingBit),
            "minimum-difference" | "mindiff" | "md" => Ok(AttackKind::MinimumDifference),
            "combined" => Ok(AttackKind::Combined),
            _ => Err(Error::invalid(format!("unknown attack kind {s:?}"))),
        }
    }
}

/// Granularity of the leading-bit canonicalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeadingBitMode {
    /// Flip a whole block when more than half its samples are >= 128.
    #[default]
    BlockMajority,
    /// Flip each pixel that has any channel >= 128.
    PerPixel,
}

impl FromStr for LeadingBitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" | "block-majority" => Ok(LeadingBitMode::BlockMajority),
            "pixel" | "per-pixel" => Ok(LeadingBitMode::PerPixel),
            _ => Err(Error::invalid(format!("unknown leading-bit mode {s:?}"))),
        }
    }
}

impl fmt::Display for LeadingBitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LeadingBitMode::BlockMajority => "block",
            LeadingBitMode::PerPixel => "pixel",
        })
    }
}

fn invert(px: &mut [u8]) {
    px.iter_mut().for_each(|v| *v = 255 - *v);
}

pub fn leading_bit_attack(enc: &EncryptedImage, mode: LeadingBitMode) -> Result<ImageTensor> {
    leading_bit_canonicalize(&enc.tensor, &enc.grid, mode)
}

pub fn leading_bit_canonicalize(
    img: &ImageTensor,
    grid: &PatchGrid,
    mode: LeadingBitMode,
) -> Result<ImageTensor> {
    match mode {
        LeadingBitMode::PerPixel => {
            let mut out = img.clone();
            for px in out.pixels_mut() {
                if px.iter().any(|&v| v >= 128) {
                    invert(px);
                }
            }
            Ok(out)
        }
        LeadingBitMode::BlockMajority => {
            let mut patches = split_into_patches(img, grid)?;
            for p in &mut patches {
                let high = p.data.iter().filter(|&&v| v >= 128).count();
                if 2 * high > p.data.len() {
                    invert(&mut p.data);
                }
            }
            reassemble(&patches, grid)
        }
    }
}

/// Sum of absolute sample differences along the edge where `right` sits to
/// the right of `left`.
fn horizontal_seam(left: &Patch, right: &Patch) -> u64 {
    (0..left.height)
        .map(|y| {
            left.pixel(y, left.width - 1)
                .iter()
                .zip(right.pixel(y, 0))
                .map(|(&a, &b)| u64::from(a.abs_diff(b)))
                .sum::<u64>()
        })
        .sum()
}

/// Edge cost where `below` sits under `above`.
fn vertical_seam(above: &Patch, below: &Patch) -> u64 {
    (0..above.width)
        .map(|x| {
            above
                .pixel(above.height - 1, x)
                .iter()
                .zip(below.pixel(0, x))
                .map(|(&a, &b)| u64::from(a.abs_diff(b)))
                .sum::<u64>()
        })
        .sum()
}

/// Result of the greedy jigsaw: `placement[slot]` is the input block index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JigsawSolution {
    pub placement: Vec<usize>,
    pub total_cost: u64,
}

struct SeamTable {
    n: usize,
    horiz: Vec<u64>,
    vert: Vec<u64>,
}

impl SeamTable {
    fn new(blocks: &[Patch]) -> Self {
        let n = blocks.len();
        let mut horiz = vec![0; n * n];
        let mut vert = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    horiz[a * n + b] = horizontal_seam(&blocks[a], &blocks[b]);
                    vert[a * n + b] = vertical_seam(&blocks[a], &blocks[b]);
                }
            }
        }
        Self { n, horiz, vert }
    }

    fn h(&self, left: usize, right: usize) -> u64 {
        self.horiz[left * self.n + right]
    }

    fn v(&self, above: usize, below: usize) -> u64 {
        self.vert[above * self.n + below]
    }
}

/// Greedy row-major placement seeded with `start` at slot (0, 0). Each next
/// slot takes the unused block with the least seam cost against its placed
/// left and upper neighbours; ties go to the lowest block index.
fn greedy_from(seams: &SeamTable, grid: &PatchGrid, start: usize) -> JigsawSolution {
    let n = seams.n;
    let cols = grid.grid_cols;
    let mut used = vec![false; n];
    let mut placement = Vec::with_capacity(n);
    placement.push(start);
    used[start] = true;
    let mut total = 0;
    for slot in 1..n {
        let (r, c) = (slot / cols, slot % cols);
        let cost = |b: usize| {
            let mut s = 0;
            if c > 0 {
                s += seams.h(placement[slot - 1], b);
            }
            if r > 0 {
                s += seams.v(placement[slot - cols], b);
            }
            s
        };
        let (best, best_cost) = (0..n)
            .filter(|&b| !used[b])
            .map(|b| (b, cost(b)))
            .min_by_key(|&(b, s)| (s, b))
            .expect("an unused block remains");
        used[best] = true;
        placement.push(best);
        total += best_cost;
    }
    JigsawSolution {
        placement,
        total_cost: total,
    }
}

/// Runs the greedy placement from every start block and keeps the cheapest
/// assembly (ties: lowest start index).
pub fn solve_jigsaw(blocks: &[Patch], grid: &PatchGrid) -> Result<JigsawSolution> {
    if blocks.len() != grid.num_patches() {
        return Err(Error::dims(format!(
            "{} blocks for a {}-slot grid",
            blocks.len(),
            grid.num_patches()
        )));
    }
    let seams = SeamTable::new(blocks);
    let best = (0..blocks.len())
        .map(|start| greedy_from(&seams, grid, start))
        .min_by_key(|s| s.total_cost)
        .expect("grid has at least one block");
    Ok(best)
}

pub fn minimum_difference_attack(enc: &EncryptedImage) -> Result<ImageTensor> {
    reassemble_by_min_difference(&enc.tensor, &enc.grid)
}

pub fn reassemble_by_min_difference(img: &ImageTensor, grid: &PatchGrid) -> Result<ImageTensor> {
    let blocks = split_into_patches(img, grid)?;
    let sol = solve_jigsaw(&blocks, grid)?;
    let placed: Vec<Patch> = sol.placement.iter().map(|&b| blocks[b].clone()).collect();
    reassemble(&placed, grid)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOptions {
    pub leading_bit_mode: LeadingBitMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    #[serde(skip)]
    pub reconstructed: ImageTensor,
    pub npcr_vs_plain: Option<f64>,
    pub uaci_vs_plain: Option<f64>,
    pub ssim_vs_plain: Option<f64>,
    pub correlation_vs_plain: Option<f64>,
    pub wall_time: f64,
}

pub fn run_attack(
    enc: &EncryptedImage,
    kind: AttackKind,
    ground_truth: Option<&ImageTensor>,
    options: AttackOptions,
) -> Result<AttackReport> {
    if let Some(truth) = ground_truth {
        if !truth.same_shape(&enc.tensor) {
            return Err(Error::invalid(format!(
                "ground truth {truth:?} does not match ciphertext {:?}",
                enc.tensor
            )));
        }
    }
    let started = Instant::now();
    let reconstructed = match kind {
        AttackKind::LeadingBit => leading_bit_attack(enc, options.leading_bit_mode)?,
        AttackKind::MinimumDifference => minimum_difference_attack(enc)?,
        AttackKind::Combined => {
            let canon = leading_bit_attack(enc, options.leading_bit_mode)?;
            reassemble_by_min_difference(&canon, &enc.grid)?
        }
    };
    let wall_time = started.elapsed().as_secs_f64();

    let mut report = AttackReport {
        kind,
        reconstructed,
        npcr_vs_plain: None,
        uaci_vs_plain: None,
        ssim_vs_plain: None,
        correlation_vs_plain: None,
        wall_time,
    };
    if let Some(truth) = ground_truth {
        let r = &report.reconstructed;
        report.npcr_vs_plain = Some(metrics::npcr(truth, r)?);
        report.uaci_vs_plain = Some(metrics::uaci(truth, r)?);
        report.ssim_vs_plain = metrics::ssim(truth, r).ok();
        report.correlation_vs_plain = Some(sample_correlation(truth, r));
    }
    Ok(report)
}

/// Pearson correlation between corresponding samples of two images
/// (0 when either is constant).
pub fn sample_correlation(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.samples().len() as f64;
    let ma = a.samples().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.samples().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.samples().iter().zip(b.samples()) {
        let (u, v) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += u * v;
        saa += u * u;
        sbb += v * v;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}
