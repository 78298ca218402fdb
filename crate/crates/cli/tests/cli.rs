use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blockpix::codec::EncryptedImage;
use blockpix::imagecore::ImageTensor;
use blockpix::keyschedule::MasterKey;
use blockpix::pipeline::{natural_image, DatasetManifest};

fn blockpix(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockpix"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, MasterKey) {
    let dir = tempfile::tempdir().unwrap();
    natural_image(64, 64, 1)
        .unwrap()
        .save(dir.path().join("img.png"))
        .unwrap();
    let key = MasterKey::from_bytes([5; 32]);
    key.write_file(dir.path().join("k.key"), false).unwrap();
    (dir, key)
}

#[test]
fn keygen_writes_distinct_hex_keys_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let a = blockpix(dir.path(), &["keygen", "--out", "a.key"]);
    let b = blockpix(dir.path(), &["keygen", "--out", "b.key"]);
    assert_eq!((code(&a), code(&b)), (0, 0));
    let id = |o: &Output| stdout(o).split_whitespace().next().unwrap().to_string();
    assert_ne!(id(&a), id(&b));
    let text = fs::read_to_string(dir.path().join("a.key")).unwrap();
    let hex = text.trim_end();
    assert_eq!(hex.len(), 64);
    assert!(hex
        .chars()
        .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    assert_eq!(MasterKey::from_hex(&text).unwrap().key_id(), id(&a));

    assert_eq!(
        code(&blockpix(dir.path(), &["keygen", "--out", "a.key"])),
        2
    );
    assert_eq!(fs::read_to_string(dir.path().join("a.key")).unwrap(), text);
    assert_eq!(
        code(&blockpix(
            dir.path(),
            &["keygen", "--out", "a.key", "--force"]
        )),
        0
    );
    assert_ne!(fs::read_to_string(dir.path().join("a.key")).unwrap(), text);

    let keys = dir.path().join("keys");
    fs::create_dir(&keys).unwrap();
    let c = blockpix(dir.path(), &["keygen", "--out", "keys"]);
    assert!(keys.join(format!("{}.key", id(&c))).exists());
}

#[test]
fn encrypt_decrypt_round_trip_and_determinism() {
    let (dir, key) = setup();
    let d = dir.path();
    let o = blockpix(
        d,
        &["encrypt", "--key", "k.key", "--grid", "8x8", "img.png"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("img.enc.png").exists() && d.join("img.enc.json").exists());
    let first = fs::read(d.join("img.enc.png")).unwrap();
    let enc = EncryptedImage::read(d.join("img.enc.png")).unwrap();
    assert_eq!(enc.key_id, key.key_id());
    assert_eq!(enc.grid.grid_rows, 8);

    assert_eq!(
        code(&blockpix(d, &["encrypt", "--key", "k.key", "img.png"])),
        0
    );
    assert_eq!(fs::read(d.join("img.enc.png")).unwrap(), first);

    assert_eq!(
        code(&blockpix(
            d,
            &["decrypt", "--key", "k.key", "--out", "dec", "img.enc.png"]
        )),
        0
    );
    assert_eq!(
        ImageTensor::load(d.join("dec/img.dec.png")).unwrap(),
        ImageTensor::load(d.join("img.png")).unwrap()
    );

    MasterKey::from_bytes([6; 32])
        .write_file(d.join("other.key"), false)
        .unwrap();
    assert_eq!(
        code(&blockpix(
            d,
            &[
                "decrypt",
                "--key",
                "other.key",
                "--out",
                "bad",
                "img.enc.png"
            ]
        )),
        1
    );
    assert!(!d.join("bad/img.dec.png").exists());
}

#[test]
fn stage_flags_and_config_precedence() {
    let (dir, _) = setup();
    let d = dir.path();
    fs::write(
        d.join("run.conf"),
        "grid = 4x4\nno-negpos = true\nout = fromconf\n",
    )
    .unwrap();
    assert_eq!(
        code(&blockpix(
            d,
            &["--config", "run.conf", "encrypt", "--key", "k.key", "img.png"]
        )),
        0
    );
    let enc = EncryptedImage::read(d.join("fromconf/img.enc.png")).unwrap();
    assert_eq!(enc.grid.grid_rows, 4);
    assert!(!enc.stages.negpos && enc.stages.block_shuffle);
    let log = fs::read_to_string(d.join("fromconf/encrypt.resolved.conf")).unwrap();
    assert!(log.contains("grid = 4x4") && log.contains("no-negpos = true"));

    let o = blockpix(
        d,
        &[
            "--config", "run.conf", "encrypt", "--key", "k.key", "--grid", "2x2", "--out", "flag",
            "img.png",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        EncryptedImage::read(d.join("flag/img.enc.png"))
            .unwrap()
            .grid
            .grid_rows,
        2
    );

    fs::write(d.join("bad.conf"), "gird = 4x4\n").unwrap();
    assert_eq!(
        code(&blockpix(
            d,
            &["--config", "bad.conf", "encrypt", "--key", "k.key", "img.png"]
        )),
        2
    );
}

#[test]
fn exit_codes() {
    let (dir, _) = setup();
    let d = dir.path();
    assert_eq!(
        code(&blockpix(
            d,
            &["encrypt", "--key", "k.key", "--grid", "nope", "img.png"]
        )),
        2
    );
    assert_eq!(code(&blockpix(d, &["encrypt", "img.png"])), 2);
    assert_eq!(code(&blockpix(d, &["frobnicate"])), 2);
    assert_eq!(
        code(&blockpix(d, &["attack", "--kind", "bogus", "img.png"])),
        2
    );
    let o = blockpix(
        d,
        &[
            "encrypt",
            "--key",
            "k.key",
            "--out",
            "o",
            "img.png",
            "missing.png",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(
        d.join("o/img.enc.png").exists(),
        "batch continues past failures"
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.png"));
    assert_eq!(code(&blockpix(d, &["metrics", "img.png"])), 2);
}

#[test]
fn attack_report_has_all_metrics() {
    let (dir, _) = setup();
    let d = dir.path();
    assert_eq!(
        code(&blockpix(d, &["encrypt", "--key", "k.key", "img.png"])),
        0
    );
    let o = blockpix(
        d,
        &[
            "attack",
            "--kind",
            "combined",
            "--truth",
            "img.png",
            "img.enc.png",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("img.attack-combined.json")).unwrap())
            .unwrap();
    for field in [
        "npcr_vs_plain",
        "uaci_vs_plain",
        "ssim_vs_plain",
        "correlation_vs_plain",
        "wall_time",
    ] {
        assert!(report[field].is_number(), "{field} missing: {report}");
    }
    assert_eq!(report["kind"], "combined");
    assert!(d.join("img.attack-combined.png").exists());

    assert_eq!(
        code(&blockpix(d, &["attack", "--out", "all", "img.enc.png"])),
        0
    );
    for kind in ["leading-bit", "minimum-difference", "combined"] {
        let r: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(d.join(format!("all/img.attack-{kind}.json"))).unwrap(),
        )
        .unwrap();
        assert!(r["ssim_vs_plain"].is_null());
    }
}

#[test]
fn metrics_csv() {
    let (dir, _) = setup();
    let d = dir.path();
    assert_eq!(
        code(&blockpix(d, &["encrypt", "--key", "k.key", "img.png"])),
        0
    );
    assert_eq!(
        code(&blockpix(
            d,
            &[
                "metrics",
                "--out",
                "m",
                "img.png",
                "img.enc.png",
                "img.png",
                "img.png"
            ]
        )),
        0
    );
    let text = fs::read_to_string(d.join("m/metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "path_a,path_b,npcr,uaci,corr_h,corr_v,entropy_a,entropy_b,ssim"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("img.png,img.png,0.0,0.0,"));
    assert!(lines[2].ends_with(",1.0"));

    assert_eq!(
        code(&blockpix(
            d,
            &[
                "metrics",
                "--sensitivity-key",
                "k.key",
                "--out",
                "s",
                "img.png"
            ]
        )),
        0
    );
    let s = fs::read_to_string(d.join("s/key_sensitivity.csv")).unwrap();
    let npcr: f64 = s
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(npcr > 0.95);
}

#[test]
fn demo_triptych() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&blockpix(d, &["demo", "--out", "a"])), 0);
    assert_eq!(code(&blockpix(d, &["demo", "--out", "b"])), 0);
    let png = ImageTensor::load(d.join("a/demo.png")).unwrap();
    let original = ImageTensor::load(d.join("a/original.png")).unwrap();
    assert_eq!(png.width(), 3 * original.width() + 8);
    assert_eq!(png.height(), original.height());
    assert_eq!(png.pixel(0, original.width()), &[255, 255, 255]);
    assert_eq!(
        fs::read(d.join("a/demo.png")).unwrap(),
        fs::read(d.join("b/demo.png")).unwrap()
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("a/demo.json")).unwrap()).unwrap();
    for section in [
        &summary["encrypted"],
        &summary["attacks"]["leading-bit"],
        &summary["attacks"]["minimum-difference"],
        &summary["attacks"]["combined"],
    ] {
        for m in ["npcr", "uaci", "ssim"] {
            assert!(section[m].is_number(), "{m} missing in {section}");
        }
    }

    natural_image(40, 48, 3)
        .unwrap()
        .save(d.join("s.png"))
        .unwrap();
    assert_eq!(
        code(&blockpix(d, &["demo", "--sample", "s.png", "--out", "c"])),
        0
    );
    assert_eq!(
        ImageTensor::load(d.join("c/demo.png")).unwrap().width(),
        3 * 48 + 8
    );
}

fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn writes_stay_inside_the_output_directory() {
    let (dir, _) = setup();
    let d = dir.path();
    let cwd = tempfile::tempdir().unwrap();
    let before: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let out = d.join("out");
    let args = [
        "encrypt",
        "--key",
        d.join("k.key").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        d.join("img.png").to_str().unwrap(),
    ]
    .map(String::from);
    let o = blockpix(
        cwd.path(),
        &args.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(cwd.path()).unwrap().count(), 0);
    let after: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p != &out)
        .collect();
    assert_eq!(before.len(), after.len());
}

#[test]
fn dataset_train_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = blockpix(
        d,
        &[
            "build-dataset",
            "--out",
            "ds",
            "--clients",
            "2",
            "--per-class",
            "20",
            "--seed",
            "3",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let train = DatasetManifest::read(d.join("ds/server/train.json")).unwrap();
    let val = DatasetManifest::read(d.join("ds/server/val.json")).unwrap();
    assert_eq!(train.entries.len() + val.entries.len(), 40);
    let ids: HashSet<_> = train.entries.iter().map(|e| e.key_id.clone()).collect();
    assert_eq!(ids.len(), 2, "each client gets its own key");

    for client in ["client0", "client1"] {
        let root = d.join("ds/clients").join(client);
        assert!(root.join("manifest.json").exists());
        let mut plain = Vec::new();
        let mut enc = Vec::new();
        walk(&root.join("plain"), &mut plain);
        walk(&root.join("enc"), &mut enc);
        let plain_digests: HashSet<String> = plain
            .iter()
            .map(|p| ImageTensor::load(p).unwrap().digest())
            .collect();
        let plain_bytes: HashSet<Vec<u8>> = plain.iter().map(|p| fs::read(p).unwrap()).collect();
        for p in enc
            .iter()
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
        {
            assert!(!plain_digests.contains(&ImageTensor::load(p).unwrap().digest()));
            assert!(!plain_bytes.contains(&fs::read(p).unwrap()));
        }
    }

    let o = blockpix(
        d,
        &[
            "train",
            "--train",
            "ds/server/train.json",
            "--val",
            "ds/server/val.json",
            "--out",
            "model",
            "--epochs",
            "2",
            "--embed-dim",
            "8",
            "--num-heads",
            "2",
            "--mlp-dim",
            "16",
            "--num-layers",
            "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "model.ckpt",
        "train_report.csv",
        "train_report.json",
        "train.resolved.conf",
    ] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }
    assert_eq!(
        code(&blockpix(
            d,
            &[
                "eval",
                "--model",
                "model/model.ckpt",
                "--manifest",
                "ds/server/val.json",
                "--out",
                "model"
            ]
        )),
        0
    );
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("model/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["samples"], val.entries.len());
    assert!(eval["accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn dataset_from_class_directories_with_shared_key() {
    let (dir, key) = setup();
    let d = dir.path();
    for (c, name) in ["a", "b"].iter().enumerate() {
        let sub = d.join("raw").join(name);
        fs::create_dir_all(&sub).unwrap();
        for i in 0..4 {
            natural_image(16, 16, (c * 10 + i) as u64)
                .unwrap()
                .save(sub.join(format!("{i}.png")))
                .unwrap();
        }
    }
    let o = blockpix(
        d,
        &[
            "build-dataset",
            "--input",
            "raw",
            "--key",
            "k.key",
            "--out",
            "ds",
            "--val-fraction",
            "0.5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let val = DatasetManifest::read(d.join("ds/server/val.json")).unwrap();
    assert_eq!(val.class_names, vec!["a", "b"]);
    assert_eq!(val.entries.len(), 4);
    assert!(val.entries.iter().all(|e| e.key_id == key.key_id()));
}
