use std::path::PathBuf;

use blockpix::attacks::{run_attack, AttackKind, AttackOptions, LeadingBitMode};
use blockpix::codec::{encrypt, CipherConfig, Stages};
use blockpix::imagecore::{GridSpec, ImageTensor};
use blockpix::keyschedule::MasterKey;
use blockpix::metrics::{npcr, ssim, uaci};
use blockpix::pipeline::natural_image;
use serde_json::json;

use crate::commands::write_json;
use crate::config::Resolver;
use crate::{CliError, DemoArgs};

pub const GUTTER: usize = 4;

/// Fixed key used when none is given, so the demo output is reproducible.
/// Never use it for real data.
const DEMO_KEY: [u8; 32] = *b"blockpix-demo-key-not-for-use!!!";

const SAMPLE_SIZE: usize = 256;
const SAMPLE_SEED: u64 = 2;

/// Panels side by side with white gutters between them.
pub fn triptych(panels: &[&ImageTensor]) -> blockpix::Result<ImageTensor> {
    let first = panels[0];
    if panels.iter().any(|p| !p.same_shape(first)) {
        return Err(blockpix::Error::DimensionMismatch(
            "triptych panels differ in shape".into(),
        ));
    }
    let (h, w) = (first.height(), first.width());
    let width = panels.len() * w + (panels.len() - 1) * GUTTER;
    ImageTensor::from_fn(h, width, first.channels(), |y, x, c| {
        let (panel, col) = (x / (w + GUTTER), x % (w + GUTTER));
        if col >= w {
            255
        } else {
            panels[panel].pixel(y, col)[c]
        }
    })
}

pub fn run(r: &mut Resolver, a: DemoArgs) -> Result<(), CliError> {
    let sample: Option<PathBuf> = r.optional("sample", a.sample)?;
    let key_path: Option<PathBuf> = r.optional("key", a.key)?;
    let grid = r.value("grid", a.grid, GridSpec::default())?;
    let mode = r.value("mode", a.mode, LeadingBitMode::default())?;
    let out = r.value("out", a.out, PathBuf::from("demo"))?;
    r.finish("demo", &out)?;

    let original = match &sample {
        Some(p) => ImageTensor::load(p)?,
        None => natural_image(SAMPLE_SIZE, SAMPLE_SIZE, SAMPLE_SEED)?,
    }
    .center_crop_to_grid(grid.rows, grid.cols)?;
    original.save(out.join("original.png"))?;
    let key = match &key_path {
        Some(p) => MasterKey::read_file(p)?,
        None => MasterKey::from_bytes(DEMO_KEY),
    };

    let enc = encrypt(&original, &key, &CipherConfig::new(grid, Stages::ALL))?;
    enc.write(&out, "encrypted")?;
    let scores = |img: &ImageTensor| -> blockpix::Result<serde_json::Value> {
        Ok(json!({
            "npcr": npcr(&original, img)?,
            "uaci": uaci(&original, img)?,
            "ssim": ssim(&original, img).ok(),
        }))
    };

    let mut attacks = serde_json::Map::new();
    let mut combined = None;
    for kind in AttackKind::ALL {
        let report = run_attack(
            &enc,
            kind,
            Some(&original),
            AttackOptions {
                leading_bit_mode: mode,
            },
        )?;
        report
            .reconstructed
            .save(out.join(format!("attack-{kind}.png")))?;
        attacks.insert(kind.to_string(), scores(&report.reconstructed)?);
        if kind == AttackKind::Combined {
            combined = Some(report.reconstructed);
        }
    }
    let post_attack = combined.expect("combined attack is always run");

    let panel = triptych(&[&original, &enc.tensor, &post_attack])?;
    let panel_path = out.join("demo.png");
    panel.save(&panel_path)?;
    write_json(
        &out.join("demo.json"),
        &json!({
            "sample": sample.as_ref().map(|p| p.display().to_string()),
            "key_id": key.key_id(),
            "grid": grid.to_string(),
            "leading_bit_mode": mode.to_string(),
            "panels": ["original", "encrypted", "post-attack (combined)"],
            "width": panel.width(),
            "height": panel.height(),
            "encrypted": scores(&enc.tensor)?,
            "attacks": attacks,
        }),
    )?;
    println!("{}", panel_path.display());
    Ok(())
}
