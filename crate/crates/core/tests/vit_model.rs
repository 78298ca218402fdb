use blockpix::vit::{
    encoder_forward, encoder_forward_traced, evaluate, forward_loss, head_logits, init_params,
    logits, multi_head_attention, patch_embed, train, Batch, Dataset, Optimizer, ParamSet,
    TrainConfig, ViTConfig,
};
use blockpix::{Dataset64, ParamSet64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ViTConfig {
    ViTConfig {
        embed_dim: 16,
        num_heads: 4,
        mlp_dim: 32,
        num_layers: 2,
        seed: 5,
        ..ViTConfig::default()
    }
}

fn random_input(cfg: &ViTConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.input_len()).map(|_| rng.random()).collect()
}

/// Weights large enough that attention is far from uniform.
fn sharp_params(cfg: &ViTConfig) -> ParamSet64 {
    let mut p: ParamSet64 = init_params(cfg);
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 25.0);
    }
    p
}

#[test]
fn token_counts_and_linearity() {
    let cfg = config();
    let mut p: ParamSet64 = init_params(&cfg);
    let x = random_input(&cfg, 1);
    let tokens = patch_embed(&x, &p, &cfg).unwrap();
    assert_eq!(tokens.len(), 17 * cfg.embed_dim);
    assert_eq!(&tokens[..cfg.embed_dim], p.cls_token.as_slice());

    let zero = vec![0.0; cfg.input_len()];
    let zt = patch_embed(&zero, &p, &cfg).unwrap();
    assert!(zt[cfg.embed_dim..].iter().all(|&v| v == 0.0));

    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let dt = patch_embed(&doubled, &p, &cfg).unwrap();
    for (a, b) in tokens[cfg.embed_dim..].iter().zip(&dt[cfg.embed_dim..]) {
        assert!((2.0 * a - b).abs() < 1e-15);
    }

    p.patch_bias = vec![0.5; cfg.embed_dim];
    assert!(patch_embed(&zero, &p, &cfg).unwrap()[cfg.embed_dim..]
        .iter()
        .all(|&v| v == 0.5));
    assert!(patch_embed(&zero[1..], &p, &cfg).is_err());
}

#[test]
fn positional_embedding_is_added() {
    let cfg = ViTConfig {
        use_positional_embedding: true,
        ..config()
    };
    let p: ParamSet64 = init_params(&cfg);
    let zero = vec![0.0; cfg.input_len()];
    let t = patch_embed(&zero, &p, &cfg).unwrap();
    assert_eq!(
        t,
        p.pos_embed
            .as_ref()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < cfg.embed_dim {
                v + p.cls_token[i]
            } else {
                v
            })
            .collect::<Vec<_>>()
    );
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let cfg = config();
    let p = sharp_params(&cfg);
    let layer = &p.layers[0];
    let d = cfg.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (out, maps) = multi_head_attention(&x, layer, &cfg).unwrap();
    // Oracle: v = x Wv + bv, y = v Wo + bo, written out directly.
    let v: Vec<f64> = (0..d)
        .map(|j| layer.bv[j] + (0..d).map(|i| x[i] * layer.wv[i * d + j]).sum::<f64>())
        .collect();
    let y: Vec<f64> = (0..d)
        .map(|j| layer.bo[j] + (0..d).map(|i| v[i] * layer.wo[i * d + j]).sum::<f64>())
        .collect();
    for (a, b) in out.iter().zip(&y) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert!(maps.iter().all(|m| m == &vec![1.0]));
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = config();
    let p = sharp_params(&cfg);
    let tokens = patch_embed(&random_input(&cfg, 4), &p, &cfg).unwrap();
    let (_, maps) = encoder_forward_traced(&tokens, &p, &cfg).unwrap();
    let n = cfg.num_tokens();
    assert_eq!(maps.len(), cfg.num_layers);
    let mut max_entry: f64 = 0.0;
    for layer in &maps {
        assert_eq!(layer.len(), cfg.num_heads);
        for head in layer {
            for row in head.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                max_entry = max_entry.max(row.iter().copied().fold(0.0, f64::max));
            }
        }
    }
    assert!(
        max_entry > 2.0 / n as f64,
        "attention should not be uniform"
    );
}

#[test]
fn class_token_invariant_to_patch_permutation() {
    let cfg = config();
    let p = sharp_params(&cfg);
    let d = cfg.embed_dim;
    let tokens = patch_embed(&random_input(&cfg, 5), &p, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut order: Vec<usize> = (1..cfg.num_tokens()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut permuted = tokens[..d].to_vec();
    for &i in &order {
        permuted.extend_from_slice(&tokens[i * d..(i + 1) * d]);
    }
    let a = encoder_forward(&tokens, &p, &cfg).unwrap();
    let b = encoder_forward(&permuted, &p, &cfg).unwrap();
    for (x, y) in a[..d].iter().zip(&b[..d]) {
        assert!((x - y).abs() <= 1e-9);
    }
    let (la, lb) = (head_logits(&a, &p, &cfg), head_logits(&b, &p, &cfg));
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn loss_reference_points() {
    for classes in [2usize, 3, 4] {
        let cfg = ViTConfig {
            num_classes: classes,
            zero_init_head: true,
            ..config()
        };
        let p: ParamSet64 = init_params(&cfg);
        let batch = Batch {
            inputs: vec![random_input(&cfg, 7), random_input(&cfg, 8)],
            labels: vec![0, classes - 1],
        };
        let (loss, _) = forward_loss(&batch, &p, &cfg).unwrap();
        assert!((loss - (classes as f64).ln()).abs() <= 1e-12);
    }

    let cfg = ViTConfig {
        zero_init_head: true,
        ..config()
    };
    let mut p: ParamSet64 = init_params(&cfg);
    let batch = Batch {
        inputs: vec![random_input(&cfg, 9)],
        labels: vec![1],
    };
    let mut last = f64::INFINITY;
    for mag in [0.5, 1.0, 2.0, 5.0] {
        p.head_bias = vec![-mag, mag];
        let (loss, _) = forward_loss(&batch, &p, &cfg).unwrap();
        assert!(loss < last);
        last = loss;
    }
    p.head_bias = vec![-50.0, 50.0];
    assert!(forward_loss(&batch, &p, &cfg).unwrap().0 < 1e-15);
}

#[test]
fn loss_matches_scalar_recomputation() {
    let cfg = config();
    let p = sharp_params(&cfg);
    let batch = Batch {
        inputs: vec![random_input(&cfg, 10), random_input(&cfg, 11)],
        labels: vec![1, 0],
    };
    let (loss, zs) = forward_loss(&batch, &p, &cfg).unwrap();
    // Naive CE without max subtraction on the returned logits (moderate magnitudes).
    let naive: f64 = zs
        .iter()
        .zip(&batch.labels)
        .map(|(z, &y)| -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln())
        .sum::<f64>()
        / 2.0;
    assert!((loss - naive).abs() < 1e-12, "{loss} vs {naive}");
    assert_eq!(zs[0], logits(&batch.inputs[0], &p, &cfg).unwrap());
}

#[test]
fn batch_validation() {
    let cfg = config();
    let p: ParamSet64 = init_params(&cfg);
    let bad_label = Batch {
        inputs: vec![random_input(&cfg, 1)],
        labels: vec![2],
    };
    assert!(forward_loss(&bad_label, &p, &cfg).is_err());
    let empty: Batch<f64> = Batch {
        inputs: vec![],
        labels: vec![],
    };
    assert!(forward_loss(&empty, &p, &cfg).is_err());
}

fn toy_dataset(cfg: &ViTConfig, n: usize, seed: u64) -> Dataset64 {
    // Class 1 is brighter on average.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        inputs: vec![],
        labels: vec![],
    };
    for i in 0..n {
        let y = i % 2;
        let base = if y == 0 { 0.3 } else { 0.7 };
        ds.inputs.push(
            (0..cfg.input_len())
                .map(|_| base + rng.random_range(-0.2..0.2))
                .collect(),
        );
        ds.labels.push(y);
    }
    ds
}

#[test]
fn evaluate_cases() {
    let cfg = ViTConfig {
        zero_init_head: true,
        ..config()
    };
    let mut p: ParamSet64 = init_params(&cfg);
    let one = Dataset {
        inputs: vec![random_input(&cfg, 1)],
        labels: vec![0],
    };
    // Uniform logits: tie goes to class 0.
    assert_eq!(evaluate(&one, &p, &cfg).unwrap(), 1.0);
    p.head_bias = vec![0.0, 1.0];
    assert_eq!(evaluate(&one, &p, &cfg).unwrap(), 0.0);
    let empty: Dataset64 = Dataset::default();
    assert!(evaluate(&empty, &p, &cfg).is_err());

    let trained_cfg = ViTConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_dim: 16,
        num_layers: 1,
        ..config()
    };
    let train_set = toy_dataset(&trained_cfg, 200, 2);
    let (model, _) = train(
        &train_set,
        None,
        init_params(&trained_cfg),
        &trained_cfg,
        &TrainConfig {
            epochs: 10,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let mut big = toy_dataset(&trained_cfg, 1000, 3);
    let acc = evaluate(&big, &model, &trained_cfg).unwrap();
    assert!(acc > 0.9, "trained accuracy {acc}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    use rand::seq::SliceRandom;
    big.labels.shuffle(&mut rng);
    let acc = evaluate(&big, &model, &trained_cfg).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "shuffled-label accuracy {acc}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = ViTConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_dim: 16,
        num_layers: 1,
        ..config()
    };
    let ds = toy_dataset(&cfg, 40, 5);
    let init: ParamSet64 = init_params(&cfg);
    for opt in [Optimizer::ADAM, Optimizer::SGD_MOMENTUM] {
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            optimizer: opt,
            seed: 1,
        };
        let (after, report) = train(&ds, Some(&ds), init.clone(), &cfg, &tc).unwrap();
        assert_eq!(after, init);
        assert!(report
            .epochs
            .iter()
            .all(|e| e.val_acc == report.initial_val_acc));
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = ViTConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_dim: 16,
        num_layers: 1,
        ..config()
    };
    let ds = toy_dataset(&cfg, 64, 6);
    for opt in [Optimizer::ADAM, Optimizer::SGD_MOMENTUM] {
        let lr = if matches!(opt, Optimizer::Adam { .. }) {
            3e-3
        } else {
            1e-2
        };
        let tc = TrainConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: lr,
            optimizer: opt,
            seed: 2,
        };
        let (p1, mut r1) = train(&ds, Some(&ds), init_params(&cfg), &cfg, &tc).unwrap();
        let (p2, mut r2) = train(&ds, Some(&ds), init_params(&cfg), &cfg, &tc).unwrap();
        assert_eq!(p1, p2);
        r1.wall_time = 0.0;
        r2.wall_time = 0.0;
        assert_eq!(r1, r2);
        let first = r1.epochs.first().unwrap().train_loss;
        let last = r1.epochs.last().unwrap().train_loss;
        assert!(last < first, "{opt:?}: {first} -> {last}");
        for e in &r1.epochs {
            assert!(e.train_loss.is_finite() && e.train_loss >= 0.0);
            assert!((0.0..=1.0).contains(&e.train_acc));
        }
    }
    let mut out = Vec::new();
    let (_, r) = train(
        &ds,
        Some(&ds),
        init_params(&cfg),
        &cfg,
        &TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    r.write_csv(&mut out).unwrap();
    assert!(String::from_utf8(out)
        .unwrap()
        .starts_with("epoch,train_loss,train_acc,val_acc\n1,"));
}

#[test]
fn diverging_training_aborts() {
    let cfg = ViTConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_dim: 16,
        num_layers: 1,
        ..config()
    };
    let ds = toy_dataset(&cfg, 16, 7);
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 4,
        learning_rate: 1e12,
        optimizer: Optimizer::SGD_MOMENTUM,
        seed: 0,
    };
    let err = train(&ds, None, init_params::<f64>(&cfg), &cfg, &tc).unwrap_err();
    assert!(matches!(err, blockpix::Error::NonFinite(_)), "{err}");
}

#[test]
fn f32_model_runs() {
    let cfg = config();
    let p64: ParamSet64 = init_params(&cfg);
    let p32: ParamSet<f32> = p64.cast();
    let x64 = random_input(&cfg, 12);
    let x32: Vec<f32> = x64.iter().map(|&v| v as f32).collect();
    let a = logits(&x64, &p64, &cfg).unwrap();
    let b = logits(&x32, &p32, &cfg).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - f64::from(*v)).abs() < 1e-4);
    }
}
