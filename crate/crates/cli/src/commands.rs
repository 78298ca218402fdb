use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use blockpix::attacks::{run_attack, AttackKind, AttackOptions, LeadingBitMode};
use blockpix::codec::{
    decrypt_with, encrypt as encrypt_image, CipherConfig, EncryptedImage, Integrity, Stages,
};
use blockpix::imagecore::{GridSpec, ImageTensor};
use blockpix::keyschedule::MasterKey;
use blockpix::metrics::{key_sensitivity, write_metrics_csv, KeyBitFlip, MetricsRow};
use blockpix::pipeline::{
    encrypt_shard, generate_synthetic, ingest_directory, load_dataset, merge_and_split,
    parallel_map, write_plain_shard, ClientShard, DatasetManifest, LabeledImage,
};
use blockpix::vit::{evaluate, init_params, read_checkpoint, train as train_vit, write_checkpoint};
use blockpix::vit::{Optimizer, TrainConfig, ViTConfig};
use blockpix::Scalar;
use serde_json::json;

use crate::config::Resolver;
use crate::{
    AttackArgs, BuildDatasetArgs, CliError, DecryptArgs, EncryptArgs, EvalArgs, KeygenArgs,
};
use crate::{MetricsArgs, StageFlags, TrainArgs};

type Res = Result<(), CliError>;

fn core_io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(blockpix::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(blockpix::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| core_io(path, e))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

pub(crate) fn stages(r: &mut Resolver, f: &StageFlags) -> Result<Stages, CliError> {
    Ok(Stages {
        pixel_scramble: !r.switch("no-pixel-scramble", f.no_pixel_scramble)?,
        block_shuffle: !r.switch("no-block-shuffle", f.no_block_shuffle)?,
        negpos: !r.switch("no-negpos", f.no_negpos)?,
        channel_shuffle: !r.switch("no-channel-shuffle", f.no_channel_shuffle)?,
    })
}

fn record_inputs(r: &mut Resolver, inputs: &[PathBuf]) {
    let list: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    r.record("inputs", list.join(" "));
}

/// `img.enc.png` -> `img`, `img.png` -> `img`.
fn base_stem(path: &Path) -> String {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    match name.strip_suffix(".enc.png") {
        Some(s) => s.to_string(),
        None => path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned(),
    }
}

fn unique_stems(inputs: &[PathBuf]) -> Result<Vec<String>, CliError> {
    let stems: Vec<String> = inputs.iter().map(|p| base_stem(p)).collect();
    let mut seen = HashSet::new();
    for s in &stems {
        if !seen.insert(s) {
            return Err(CliError::Usage(format!(
                "two inputs share the output stem {s:?}"
            )));
        }
    }
    Ok(stems)
}

/// Prints per-file results and turns any failure into a partial-failure error.
fn summarize(results: Vec<(PathBuf, Result<String, CliError>)>) -> Res {
    let total = results.len();
    let mut failed = 0;
    for (path, r) in results {
        match r {
            Ok(msg) => println!("{msg}"),
            Err(e) => {
                failed += 1;
                let msg = e.to_string();
                if msg.contains(&path.display().to_string()) {
                    eprintln!("error: {msg}");
                } else {
                    eprintln!("error: {}: {msg}", path.display());
                }
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Partial { failed, total });
    }
    Ok(())
}

pub fn keygen(r: &mut Resolver, a: KeygenArgs) -> Res {
    let out = r.value("out", a.out, PathBuf::from("."))?;
    let force = r.switch("force", a.force)?;
    let key = MasterKey::generate()?;
    let (path, dir) = if out.is_dir() {
        (key.write_to_dir(&out, force)?, out.clone())
    } else {
        key.write_file(&out, force)?;
        let dir = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf);
        (out.clone(), dir.unwrap_or_else(|| PathBuf::from(".")))
    };
    r.record("key_id", key.key_id());
    r.finish("keygen", &dir)?;
    println!("{} {}", key.key_id(), path.display());
    Ok(())
}

pub fn encrypt(r: &mut Resolver, a: EncryptArgs) -> Res {
    let key_path: PathBuf = r.required("key", a.key)?;
    let grid = r.value("grid", a.grid, GridSpec::default())?;
    let stages = stages(r, &a.stages)?;
    let center_crop = r.switch("center-crop", a.center_crop)?;
    let jobs = r.value("jobs", a.jobs, default_jobs())?;
    let out = r.value("out", a.out, PathBuf::from("."))?;
    record_inputs(r, &a.inputs);
    let stems = unique_stems(&a.inputs)?;
    let key = MasterKey::read_file(&key_path)?;
    r.finish("encrypt", &out)?;

    let cfg = CipherConfig::new(grid, stages);
    let work: Vec<(PathBuf, String)> = a.inputs.into_iter().zip(stems).collect();
    let results = parallel_map(&work, jobs, |(input, stem)| {
        let run = || -> Result<String, CliError> {
            let mut img = ImageTensor::load(input)?;
            if center_crop {
                img = img.center_crop_to_grid(grid.rows, grid.cols)?;
            }
            let enc = encrypt_image(&img, &key, &cfg)?;
            for n in &enc.notices {
                eprintln!("notice: {}: {n}", input.display());
            }
            let (png, json) = enc.write(&out, stem)?;
            Ok(format!(
                "{} -> {} + {}",
                input.display(),
                png.display(),
                json.display()
            ))
        };
        (input.clone(), run())
    });
    summarize(results)
}

pub fn decrypt(r: &mut Resolver, a: DecryptArgs) -> Res {
    let key_path: PathBuf = r.required("key", a.key)?;
    let force = r.switch("force", a.force)?;
    let jobs = r.value("jobs", a.jobs, default_jobs())?;
    let out = r.value("out", a.out, PathBuf::from("."))?;
    record_inputs(r, &a.inputs);
    let stems = unique_stems(&a.inputs)?;
    let key = MasterKey::read_file(&key_path)?;
    r.finish("decrypt", &out)?;

    let work: Vec<(PathBuf, String)> = a.inputs.into_iter().zip(stems).collect();
    let results = parallel_map(&work, jobs, |(input, stem)| {
        let run = || -> Result<String, CliError> {
            let enc = EncryptedImage::read(input)?;
            let dec = decrypt_with(&enc, &key, force)?;
            if dec.integrity == Integrity::Mismatch {
                if !force {
                    return Err(CliError::Core(blockpix::Error::Format {
                        what: "decryption",
                        detail: "result does not match the recorded plaintext digest (use --force to keep it)".into(),
                    }));
                }
                eprintln!("warning: {}: plaintext digest mismatch", input.display());
            }
            let path = out.join(format!("{stem}.dec.png"));
            dec.image.save(&path)?;
            Ok(format!(
                "{} -> {} ({:?})",
                input.display(),
                path.display(),
                dec.integrity
            ))
        };
        (input.clone(), run())
    });
    summarize(results)
}

fn parse_kinds(s: &str) -> Result<Vec<AttackKind>, CliError> {
    if s == "all" {
        return Ok(AttackKind::ALL.to_vec());
    }
    s.split(',')
        .map(|k| AttackKind::from_str(k.trim()).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

pub fn attack(r: &mut Resolver, a: AttackArgs) -> Res {
    let kind_text: String = r.value("kind", a.kind, "all".to_string())?;
    let kinds = parse_kinds(&kind_text)?;
    let truth_path: Option<PathBuf> = r.optional("truth", a.truth)?;
    let mode = r.value("mode", a.mode, LeadingBitMode::default())?;
    let jobs = r.value("jobs", a.jobs, default_jobs())?;
    let out = r.value("out", a.out, PathBuf::from("."))?;
    record_inputs(r, &a.inputs);
    if truth_path.is_some() && a.inputs.len() != 1 {
        return Err(CliError::Usage(
            "--truth needs exactly one ciphertext input".into(),
        ));
    }
    let stems = unique_stems(&a.inputs)?;
    let truth = truth_path.as_ref().map(ImageTensor::load).transpose()?;
    r.finish("attack", &out)?;

    let opts = AttackOptions {
        leading_bit_mode: mode,
    };
    let work: Vec<(PathBuf, String)> = a.inputs.into_iter().zip(stems).collect();
    let results = parallel_map(&work, jobs, |(input, stem)| {
        let run = || -> Result<String, CliError> {
            let enc = EncryptedImage::read(input)?;
            let mut lines = Vec::new();
            for &kind in &kinds {
                let report = run_attack(&enc, kind, truth.as_ref(), opts)?;
                let png = out.join(format!("{stem}.attack-{kind}.png"));
                let json_path = out.join(format!("{stem}.attack-{kind}.json"));
                report.reconstructed.save(&png)?;
                let mut value = serde_json::to_value(&report).map_err(blockpix::Error::from)?;
                let obj = value
                    .as_object_mut()
                    .expect("report serializes to an object");
                obj.insert("input".into(), json!(input.display().to_string()));
                obj.insert(
                    "truth".into(),
                    json!(truth_path.as_ref().map(|p| p.display().to_string())),
                );
                obj.insert("leading_bit_mode".into(), json!(mode.to_string()));
                obj.insert("reconstruction".into(), json!(png.display().to_string()));
                write_json(&json_path, &value)?;
                let score = report
                    .ssim_vs_plain
                    .map(|s| format!(" ssim {s:.4}"))
                    .unwrap_or_default();
                lines.push(format!(
                    "{} [{kind}] -> {}{score}",
                    input.display(),
                    png.display()
                ));
            }
            Ok(lines.join("\n"))
        };
        (input.clone(), run())
    });
    summarize(results)
}

pub fn metrics(r: &mut Resolver, a: MetricsArgs) -> Res {
    let sens_key: Option<PathBuf> = r.optional("sensitivity-key", a.sensitivity_key)?;
    let out = r.value("out", a.out, PathBuf::from("."))?;
    record_inputs(r, &a.inputs);

    if let Some(key_path) = sens_key {
        let seed = r.value("flip-seed", a.flip_seed, 0u64)?;
        let grid = r.value("grid", a.grid, GridSpec::default())?;
        let key = MasterKey::read_file(&key_path)?;
        r.finish("metrics", &out)?;
        let cfg = CipherConfig::new(grid, Stages::ALL);
        let path = out.join("key_sensitivity.csv");
        let mut w = csv::Writer::from_path(&path).map_err(blockpix::Error::from)?;
        w.write_record(["path", "flip_seed", "npcr", "uaci"])
            .map_err(blockpix::Error::from)?;
        let mut results = Vec::new();
        for input in &a.inputs {
            let res = ImageTensor::load(input)
                .and_then(|img| key_sensitivity(&img, &key, &cfg, KeyBitFlip::Seeded(seed)))
                .map_err(CliError::from)
                .and_then(|m| {
                    w.write_record([
                        input.display().to_string(),
                        seed.to_string(),
                        m.npcr.to_string(),
                        m.uaci.to_string(),
                    ])
                    .map_err(blockpix::Error::from)?;
                    Ok(format!(
                        "{}: npcr {:.4} uaci {:.4}",
                        input.display(),
                        m.npcr,
                        m.uaci
                    ))
                });
            results.push((input.clone(), res));
        }
        w.flush().map_err(|e| core_io(&path, e))?;
        return summarize(results);
    }

    if !a.inputs.len().is_multiple_of(2) {
        return Err(CliError::Usage(
            "metrics expects image pairs: A1 B1 A2 B2 ...".into(),
        ));
    }
    r.finish("metrics", &out)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for pair in a.inputs.chunks(2) {
        let (pa, pb) = (&pair[0], &pair[1]);
        let res = (|| -> Result<String, CliError> {
            let (x, y) = (ImageTensor::load(pa)?, ImageTensor::load(pb)?);
            let row =
                MetricsRow::compute(&pa.display().to_string(), &x, &pb.display().to_string(), &y)?;
            let msg = format!(
                "{} vs {}: npcr {:.4} uaci {:.4} ssim {:.4}",
                pa.display(),
                pb.display(),
                row.npcr,
                row.uaci,
                row.ssim
            );
            rows.push(row);
            Ok(msg)
        })();
        results.push((pa.clone(), res));
    }
    let path = out.join("metrics.csv");
    write_metrics_csv(
        BufWriter::new(File::create(&path).map_err(|e| core_io(&path, e))?),
        &rows,
    )?;
    summarize(results)
}

fn assign_round_robin<T: Clone>(items: &[T], clients: usize) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new(); clients];
    for (i, item) in items.iter().enumerate() {
        out[i % clients].push(item.clone());
    }
    out
}

pub fn build_dataset(r: &mut Resolver, a: BuildDatasetArgs) -> Res {
    let root = r.value("out", a.out, PathBuf::from("dataset"))?;
    let input: Option<PathBuf> = r.optional("input", a.input)?;
    let clients = r.value("clients", a.clients, 2usize)?;
    let shared: Option<PathBuf> = r.optional("key", a.key)?;
    let grid = r.value("grid", a.grid, GridSpec { rows: 4, cols: 4 })?;
    let stages = stages(r, &a.stages)?;
    let val_fraction = r.value("val-fraction", a.val_fraction, 0.2)?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let jobs = r.value("jobs", a.jobs, default_jobs())?;
    let synthetic = if input.is_none() {
        Some((
            r.value("per-class", a.per_class, 250usize)?,
            r.value("classes", a.classes, 2usize)?,
            r.value("size", a.size, 16usize)?,
        ))
    } else {
        None
    };
    if clients == 0 {
        return Err(CliError::Usage("--clients must be at least 1".into()));
    }
    let shared = shared.map(MasterKey::read_file).transpose()?;
    r.finish("build-dataset", &root)?;

    let cfg = CipherConfig::new(grid, stages);
    let mut manifests = Vec::new();
    let mut failures = 0;
    let mut total = 0;
    let (class_names, parts): (Vec<String>, Vec<Vec<(PathBuf, usize)>>) = match (&input, synthetic)
    {
        (Some(dir), _) => {
            let all = ingest_directory(dir, "", "")?;
            (
                all.class_names.clone(),
                assign_round_robin(&all.images, clients),
            )
        }
        (None, Some((per_class, classes, size))) => {
            let data = generate_synthetic(per_class, classes, size, seed)?;
            let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
            let mut parts = Vec::new();
            for (i, part) in assign_round_robin::<LabeledImage>(&data, clients)
                .iter()
                .enumerate()
            {
                let dir = root
                    .join("clients")
                    .join(format!("client{i}"))
                    .join("plain");
                parts
                    .push(write_plain_shard(&dir, &format!("client{i}"), "", &names, part)?.images);
            }
            (names, parts)
        }
        (None, None) => unreachable!("synthetic settings resolved when no input is given"),
    };

    for (i, images) in parts.into_iter().enumerate() {
        let id = format!("client{i}");
        let dir = root.join("clients").join(&id);
        let key = match &shared {
            Some(k) => k.clone(),
            None => MasterKey::generate()?,
        };
        fs::create_dir_all(&dir).map_err(|e| core_io(&dir, e))?;
        key.write_to_dir(&dir, true)?;
        let shard = ClientShard {
            client_id: id.clone(),
            key_id: key.key_id(),
            class_names: class_names.clone(),
            images,
        };
        total += shard.images.len();
        let outcome = encrypt_shard(&shard, &key, &cfg, &dir, jobs)?;
        for f in &outcome.failures {
            eprintln!("error: {}: {}", f.path.display(), f.error);
        }
        failures += outcome.failures.len();
        println!(
            "{id}: {} encrypted under key {}",
            outcome.manifest.entries.len(),
            key.key_id()
        );
        manifests.push(outcome.manifest);
    }

    let split = merge_and_split(&manifests, val_fraction, seed)?;
    let server = root.join("server");
    fs::create_dir_all(&server).map_err(|e| core_io(&server, e))?;
    split.train.write(server.join("train.json"))?;
    split.val.write(server.join("val.json"))?;
    let counts: serde_json::Map<String, serde_json::Value> = split
        .client_counts
        .iter()
        .map(|(k, (t, v))| (k.clone(), json!({ "train": t, "val": v })))
        .collect();
    write_json(
        &server.join("split.json"),
        &json!({
            "class_names": class_names,
            "train": split.train.entries.len(),
            "val": split.val.entries.len(),
            "val_fraction": val_fraction,
            "seed": seed,
            "clients": counts,
        }),
    )?;
    println!(
        "server: {} train / {} val",
        split.train.entries.len(),
        split.val.entries.len()
    );
    if failures > 0 {
        return Err(CliError::Partial {
            failed: failures,
            total,
        });
    }
    Ok(())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, CliError> {
    match s {
        "adam" => Ok(Optimizer::ADAM),
        "sgd" => Ok(Optimizer::SGD_MOMENTUM),
        _ => Err(CliError::Usage(format!(
            "unknown optimizer {s:?} (adam or sgd)"
        ))),
    }
}

fn first_shape(m: &DatasetManifest) -> Result<(usize, usize, usize), CliError> {
    let e = m
        .entries
        .first()
        .ok_or_else(|| CliError::Usage("training manifest is empty".into()))?;
    let img = ImageTensor::load(&e.path)?;
    Ok((img.height(), img.width(), img.channels()))
}

fn run_training<T: Scalar>(
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cfg: &ViTConfig,
    tc: &TrainConfig,
    out: &Path,
) -> Res {
    let shape = Some((cfg.image_h, cfg.image_w, cfg.channels));
    let train_set = load_dataset::<T>(train, shape)?;
    let val_set = val.map(|m| load_dataset::<T>(m, shape)).transpose()?;
    let (params, report) = train_vit(&train_set, val_set.as_ref(), init_params::<T>(cfg), cfg, tc)?;
    write_checkpoint(out.join("model.ckpt"), cfg, &params)?;
    let csv_path = out.join("train_report.csv");
    report.write_csv(BufWriter::new(
        File::create(&csv_path).map_err(|e| core_io(&csv_path, e))?,
    ))?;
    write_json(
        &out.join("train_report.json"),
        &serde_json::to_value(&report).map_err(blockpix::Error::from)?,
    )?;
    for e in &report.epochs {
        let val = e
            .val_acc
            .map(|v| format!(" val_acc {v:.4}"))
            .unwrap_or_default();
        println!(
            "epoch {:>3} loss {:.5} train_acc {:.4}{val}",
            e.epoch, e.train_loss, e.train_acc
        );
    }
    println!("model written to {}", out.join("model.ckpt").display());
    Ok(())
}

pub fn train(r: &mut Resolver, a: TrainArgs) -> Res {
    let train_path: PathBuf = r.required("train", a.train)?;
    let val_path: Option<PathBuf> = r.optional("val", a.val)?;
    let out = r.value("out", a.out, PathBuf::from("model"))?;
    let d = ViTConfig::default();
    let t = TrainConfig::default();
    let patch_size = r.value("patch-size", a.patch_size, d.patch_size)?;
    let embed_dim = r.value("embed-dim", a.embed_dim, d.embed_dim)?;
    let num_heads = r.value("num-heads", a.num_heads, d.num_heads)?;
    let num_layers = r.value("num-layers", a.num_layers, d.num_layers)?;
    let mlp_dim = r.value("mlp-dim", a.mlp_dim, d.mlp_dim)?;
    let pos = r.switch("pos-embed", a.pos_embed)?;
    let zero_head = r.switch("zero-init-head", a.zero_init_head)?;
    let model_seed = r.value("model-seed", a.model_seed, d.seed)?;
    let tc = TrainConfig {
        epochs: r.value("epochs", a.epochs, t.epochs)?,
        batch_size: r.value("batch-size", a.batch_size, t.batch_size)?,
        learning_rate: r.value("lr", a.lr, t.learning_rate)?,
        optimizer: parse_optimizer(&r.value("optimizer", a.optimizer, "adam".to_string())?)?,
        seed: r.value("seed", a.seed, t.seed)?,
    };
    let precision: String = r.value("precision", a.precision, "f64".to_string())?;

    let train_m = DatasetManifest::read(&train_path)?;
    let val_m = val_path.map(DatasetManifest::read).transpose()?;
    if let Some(v) = &val_m {
        if v.class_names != train_m.class_names {
            return Err(CliError::Usage(
                "train and val manifests list different classes".into(),
            ));
        }
    }
    let (h, w, c) = first_shape(&train_m)?;
    let cfg = ViTConfig {
        image_h: h,
        image_w: w,
        channels: c,
        patch_size,
        embed_dim,
        num_heads,
        num_layers,
        mlp_dim,
        num_classes: train_m.class_names.len(),
        use_positional_embedding: pos,
        zero_init_head: zero_head,
        seed: model_seed,
    };
    cfg.validate()?;
    r.finish("train", &out)?;
    match precision.as_str() {
        "f64" => run_training::<f64>(&train_m, val_m.as_ref(), &cfg, &tc, &out),
        "f32" => run_training::<f32>(&train_m, val_m.as_ref(), &cfg, &tc, &out),
        p => Err(CliError::Usage(format!(
            "unknown precision {p:?} (f64 or f32)"
        ))),
    }
}

pub fn eval(r: &mut Resolver, a: EvalArgs) -> Res {
    let model: PathBuf = r.required("model", a.model)?;
    let manifest: PathBuf = r.required("manifest", a.manifest)?;
    let out = r.value("out", a.out, PathBuf::from("."))?;
    r.finish("eval", &out)?;
    let (cfg, params) = read_checkpoint::<f64>(&model)?;
    let m = DatasetManifest::read(&manifest)?;
    if m.class_names.len() != cfg.num_classes {
        return Err(CliError::Usage(format!(
            "manifest has {} classes, model has {}",
            m.class_names.len(),
            cfg.num_classes
        )));
    }
    let ds = load_dataset::<f64>(&m, Some((cfg.image_h, cfg.image_w, cfg.channels)))?;
    let acc = evaluate(&ds, &params, &cfg)?;
    write_json(
        &out.join("eval.json"),
        &json!({
            "model": model.display().to_string(),
            "manifest": manifest.display().to_string(),
            "samples": ds.len(),
            "accuracy": acc,
        }),
    )?;
    println!("accuracy {acc:.4} on {} samples", ds.len());
    Ok(())
}
