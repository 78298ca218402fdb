//! Multi-client dataset simulation: synthetic data, per-client encrypted
//! shards, manifest merging and stratified train/val splitting.
//!
//! Directory layout: `clients/<client_id>/{plain/, enc/, manifest.json,
//! <key_id>.key}` on the client side and `server/{train.json, val.json}` on
//! the server side. Keys never leave the client directories.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{decrypt, encrypt, CipherConfig, EncryptedImage};
use crate::error::{Error, Result};
use crate::imagecore::{GridSpec, ImageTensor};
use crate::keyschedule::MasterKey;
use crate::scalar::Scalar;
use crate::vit::Dataset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
}

/// Two to four classes of oriented sinusoidal gratings. Each class has its
/// own orientation, spatial frequency and contrast; samples get a small
/// phase jitter plus Gaussian noise. Deterministic per seed, RGB.
pub fn generate_synthetic(
    num_per_class: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if !(2..=4).contains(&classes) {
        return Err(Error::invalid(format!(
            "classes must be 2..=4, got {classes}"
        )));
    }
    let grid = GridSpec::default();
    if size == 0 || !size.is_multiple_of(grid.rows) || !size.is_multiple_of(grid.cols) {
        return Err(Error::invalid(format!(
            "image size {size} must be a positive multiple of the {grid} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.06).expect("valid std");
    let mut out = Vec::with_capacity(num_per_class * classes);
    for i in 0..num_per_class * classes {
        let label = i % classes;
        let theta = std::f64::consts::PI * label as f64 / classes as f64;
        let cycles = 1.5 + 1.5 * label as f64;
        let contrast = 0.12 + 0.1 * label as f64;
        let phase = rng.random_range(-0.3..0.3);
        let (dx, dy) = (theta.cos(), theta.sin());
        let tint = [1.0, 0.9, 0.8];
        let mut next_noise = || noise.sample(&mut rng);
        let image = ImageTensor::from_fn(size, size, 3, |y, x, c| {
            let t = (x as f64 * dx + y as f64 * dy) / size as f64;
            let g = (2.0 * std::f64::consts::PI * cycles * t + phase).sin();
            let v = 0.5 + contrast * tint[c] * g + next_noise();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })?;
        out.push(LabeledImage { image, label });
    }
    Ok(out)
}

/// A natural-looking RGB test image: a smooth illumination gradient, a few
/// dozen soft colored blobs, mild texture and sensor noise. Mean intensity
/// sits below mid-gray, like most photographs.
pub fn natural_image(height: usize, width: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..90.0));
    let grad: [f64; 2] = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)];
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(12..30))
        .map(|_| {
            let center = [
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
            ];
            let radius = rng.random_range(0.05..0.3) * height.min(width) as f64;
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-60.0..120.0));
            (center, radius, color)
        })
        .collect();
    let tex_freq = rng.random_range(0.05..0.25);
    let tex_amp = rng.random_range(2.0..10.0);
    let noise = Normal::new(0.0, 3.0).expect("valid std");
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
            let texture =
                tex_amp * ((x as f64 * tex_freq).sin() * (y as f64 * tex_freq * 0.7).cos());
            for c in 0..3 {
                let mut v = base[c] + grad[0] * fy + grad[1] * fx + texture;
                for (center, radius, color) in &blobs {
                    let d2 = (y as f64 - center[0]).powi(2) + (x as f64 - center[1]).powi(2);
                    v += color[c] * (-d2 / (2.0 * radius * radius)).exp();
                }
                v += noise.sample(&mut rng);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageTensor::new(height, width, 3, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub client_id: String,
    pub key_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Full(DatasetManifest),
    Entries(Vec<ManifestEntry>),
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label >= self.class_names.len() {
                return Err(Error::invalid(format!(
                    "{}: label {} outside {} classes",
                    e.path.display(),
                    e.label,
                    self.class_names.len()
                )));
            }
            if !seen.insert(&e.path) {
                return Err(Error::invalid(format!(
                    "duplicate path {}",
                    e.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads either the full object form or a bare list of entries (class
    /// names then default to `class0..classN`).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = match serde_json::from_str::<ManifestFile>(&text)? {
            ManifestFile::Full(m) => m,
            ManifestFile::Entries(entries) => {
                let n = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
                DatasetManifest {
                    class_names: (0..n).map(|i| format!("class{i}")).collect(),
                    split: None,
                    entries,
                }
            }
        };
        m.validate()?;
        Ok(m)
    }

    /// Entry counts per client id.
    pub fn client_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.client_id.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// One client's local images, all to be encrypted under one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: String,
    pub key_id: String,
    pub class_names: Vec<String>,
    pub images: Vec<(PathBuf, usize)>,
}

/// Writes labeled images as PNGs into `plain_dir` and returns the shard.
pub fn write_plain_shard(
    plain_dir: impl AsRef<Path>,
    client_id: &str,
    key_id: &str,
    class_names: &[String],
    images: &[LabeledImage],
) -> Result<ClientShard> {
    let dir = plain_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut listed = Vec::with_capacity(images.len());
    for (i, item) in images.iter().enumerate() {
        let path = dir.join(format!("{client_id}_{i:05}.png"));
        item.image.save(&path)?;
        listed.push((path, item.label));
    }
    Ok(ClientShard {
        client_id: client_id.to_string(),
        key_id: key_id.to_string(),
        class_names: class_names.to_vec(),
        images: listed,
    })
}

/// Builds a shard from `root/<class_name>/*.png` (classes sorted by name).
pub fn ingest_directory(
    root: impl AsRef<Path>,
    client_id: &str,
    key_id: &str,
) -> Result<ClientShard> {
    let root = root.as_ref();
    let read = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(p, e));
    let mut classes: Vec<PathBuf> = read(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut shard = ClientShard {
        client_id: client_id.to_string(),
        key_id: key_id.to_string(),
        class_names: Vec::new(),
        images: Vec::new(),
    };
    for (label, dir) in classes.iter().enumerate() {
        shard.class_names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        let mut files: Vec<PathBuf> = read(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|x| x.to_str()).is_some_and(|x| {
                    matches!(x.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm")
                })
            })
            .collect();
        files.sort();
        shard.images.extend(files.into_iter().map(|f| (f, label)));
    }
    Ok(shard)
}

/// Per-file failure recorded while processing a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileFailure {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ShardOutcome {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub failures: Vec<FileFailure>,
}

/// Order-preserving map over `items` on up to `jobs` threads.
pub fn parallel_map<I: Sync, O: Send>(
    items: &[I],
    jobs: usize,
    f: impl Fn(&I) -> O + Sync,
) -> Vec<O> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Output stem per image: the file stem, or `<parent>_<stem>` when file stems
/// repeat (class subdirectories often reuse names). `None` if still ambiguous.
fn output_stems(images: &[(PathBuf, usize)]) -> Vec<Option<String>> {
    let stem = |p: &Path| {
        p.file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned()
    };
    let qualified = |p: &Path| {
        let parent = p
            .parent()
            .and_then(Path::file_name)
            .unwrap_or_default()
            .to_string_lossy();
        format!("{parent}_{}", stem(p))
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    for (p, _) in images {
        *counts.entry(stem(p)).or_default() += 1;
    }
    let names: Vec<String> = images
        .iter()
        .map(|(p, _)| {
            if counts[&stem(p)] > 1 {
                qualified(p)
            } else {
                stem(p)
            }
        })
        .collect();
    let mut final_counts: HashMap<&str, usize> = HashMap::new();
    for n in &names {
        *final_counts.entry(n).or_default() += 1;
    }
    names
        .iter()
        .map(|n| (final_counts[n.as_str()] == 1).then(|| n.clone()))
        .collect()
}

/// Encrypts every shard image into `client_dir/enc/` and writes
/// `client_dir/manifest.json`. Per-file errors are collected and the shard
/// continues.
pub fn encrypt_shard(
    shard: &ClientShard,
    key: &MasterKey,
    config: &CipherConfig,
    client_dir: impl AsRef<Path>,
    jobs: usize,
) -> Result<ShardOutcome> {
    if key.key_id() != shard.key_id {
        return Err(Error::WrongKey {
            expected: shard.key_id.clone(),
            found: key.key_id(),
        });
    }
    let client_dir = client_dir.as_ref();
    let enc_dir = client_dir.join("enc");
    fs::create_dir_all(&enc_dir).map_err(|e| Error::io(&enc_dir, e))?;

    let stems = output_stems(&shard.images);
    let work: Vec<_> = shard.images.iter().zip(&stems).collect();
    let results = parallel_map(
        &work,
        jobs,
        |((path, label), stem)| -> Result<ManifestEntry> {
            let stem = stem.as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "{}: output name collides with another shard image",
                    path.display()
                ))
            })?;
            let img = ImageTensor::load(path)?;
            let enc = encrypt(&img, key, config)?;
            let (png, _) = enc.write(&enc_dir, stem)?;
            Ok(ManifestEntry {
                path: png,
                label: *label,
                client_id: shard.client_id.clone(),
                key_id: shard.key_id.clone(),
            })
        },
    );
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for ((path, _), r) in shard.images.iter().zip(results) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => failures.push(FileFailure {
                path: path.clone(),
                error: e.to_string(),
            }),
        }
    }
    let manifest = DatasetManifest {
        class_names: shard.class_names.clone(),
        split: None,
        entries,
    };
    manifest.validate()?;
    let manifest_path = client_dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(ShardOutcome {
        manifest,
        manifest_path,
        failures,
    })
}

/// Decrypts one manifest entry with its client key (audit only).
pub fn decrypt_entry(entry: &ManifestEntry, key: &MasterKey) -> Result<ImageTensor> {
    decrypt(&EncryptedImage::read(&entry.path)?, key)
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    /// `client_id -> (train count, val count)`.
    pub client_counts: BTreeMap<String, (usize, usize)>,
}

/// Merges manifests and splits each class with a seeded shuffle, sending
/// `round(n * val_fraction)` entries of every class to validation.
pub fn merge_and_split(
    manifests: &[DatasetManifest],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitOutcome> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let first = manifests
        .first()
        .ok_or_else(|| Error::invalid("no manifests to merge"))?;
    let class_names = first.class_names.clone();
    if let Some(m) = manifests.iter().find(|m| m.class_names != class_names) {
        return Err(Error::invalid(format!(
            "inconsistent class lists: {:?} vs {:?}",
            class_names, m.class_names
        )));
    }
    let merged = DatasetManifest {
        class_names: class_names.clone(),
        split: None,
        entries: manifests
            .iter()
            .flat_map(|m| m.entries.iter().cloned())
            .collect(),
    };
    merged.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..class_names.len() {
        let mut members: Vec<ManifestEntry> = merged
            .entries
            .iter()
            .filter(|e| e.label == class)
            .cloned()
            .collect();
        members.shuffle(&mut rng);
        let n_val = (members.len() as f64 * val_fraction).round() as usize;
        val.extend(members.drain(..n_val));
        train.extend(members);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);

    let mut client_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in &train {
        client_counts.entry(e.client_id.clone()).or_default().0 += 1;
    }
    for e in &val {
        client_counts.entry(e.client_id.clone()).or_default().1 += 1;
    }
    Ok(SplitOutcome {
        train: DatasetManifest {
            class_names: class_names.clone(),
            split: Some(Split::Train),
            entries: train,
        },
        val: DatasetManifest {
            class_names,
            split: Some(Split::Val),
            entries: val,
        },
        client_counts,
    })
}

/// Loads every manifest image into a dataset, checking a uniform shape.
pub fn load_dataset<T: Scalar>(
    manifest: &DatasetManifest,
    expect: Option<(usize, usize, usize)>,
) -> Result<Dataset<T>> {
    let mut ds = Dataset {
        inputs: Vec::new(),
        labels: Vec::new(),
    };
    for e in &manifest.entries {
        let img = ImageTensor::load(&e.path)?;
        if let Some((h, w, c)) = expect {
            if (img.height(), img.width(), img.channels()) != (h, w, c) {
                return Err(Error::dims(format!(
                    "{}: {}x{}x{}, expected {h}x{w}x{c}",
                    e.path.display(),
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
        }
        ds.push(&img, e.label);
    }
    Ok(ds)
}
