use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use super::model::{backward, logits, Batch};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::scalar::Scalar;

/// Labeled inputs with samples mapped to `[-1, 1]` by `v / 127.5 - 1`.
/// Centering makes the cipher's negative-positive inversion a sign flip.
#[derive(Debug, Clone, Default)]
pub struct Dataset<T> {
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_images<'a>(items: impl IntoIterator<Item = (&'a ImageTensor, usize)>) -> Self {
        let mut ds = Dataset {
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for (img, label) in items {
            ds.push(img, label);
        }
        ds
    }

    pub fn push(&mut self, img: &ImageTensor, label: usize) {
        self.inputs.push(
            img.samples()
                .iter()
                .map(|&v| T::of(f64::from(v) / 127.5 - 1.0))
                .collect(),
        );
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Batch<T> {
        Batch {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const SGD_MOMENTUM: Optimizer = Optimizer::Sgd { momentum: 0.9 };
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::ADAM
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::ADAM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_acc: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub wall_time: f64,
    pub config: ViTConfig,
    pub train: TrainConfig,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_acc)
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.val_acc)
            .reduce(f64::max)
    }

    /// `epoch,train_loss,train_acc,val_acc` (val_acc empty without a validation set).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "train_acc", "val_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<train report csv>", e))?;
        Ok(())
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax-of-logits accuracy. Errors on an empty dataset.
pub fn evaluate<T: Scalar>(
    dataset: &Dataset<T>,
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for (x, &y) in dataset.inputs.iter().zip(&dataset.labels) {
        if argmax(&logits(x, params, config)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

struct OptimizerState<T> {
    kind: Optimizer,
    lr: T,
    first: Vec<T>,
    second: Vec<T>,
    step: i32,
}

impl<T: Scalar> OptimizerState<T> {
    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr: T::of(lr),
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [T], grads: &[T]) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd { momentum } => {
                let mu = T::of(momentum);
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = mu * *v + g;
                    *p -= self.lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Trains from `init` with seeded per-epoch shuffling. Single-threaded and
/// fully deterministic for fixed seeds.
pub fn train<T: Scalar>(
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    init: ParamSet<T>,
    config: &ViTConfig,
    tc: &TrainConfig,
) -> Result<(ParamSet<T>, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if tc.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if !(tc.learning_rate >= 0.0 && tc.learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "bad learning rate {}",
            tc.learning_rate
        )));
    }
    for ds in std::iter::once(train_set).chain(val_set) {
        ds.batch(&(0..ds.len()).collect::<Vec<_>>()).check(config)?;
    }

    let started = Instant::now();
    let mut params = init;
    let mut flat = params.flatten();
    let mut opt = OptimizerState::new(tc.optimizer, tc.learning_rate, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let initial_val_acc = val_set.map(|v| evaluate(v, &params, config)).transpose()?;
    let mut epochs = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = train_set.batch(chunk);
            let g = backward(&batch, &params, config)?;
            let loss = g.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += g
                .logits
                .iter()
                .zip(&batch.labels)
                .filter(|(z, &y)| argmax(z) == y)
                .count();
            opt.update(&mut flat, &g.grads.flatten());
            params.load_flat(&flat);
            if !params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters after epoch {epoch}, step {step}"
                )));
            }
        }
        let n = train_set.len() as f64;
        let val_acc = val_set.map(|v| evaluate(v, &params, config)).transpose()?;
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        });
    }

    let report = TrainReport {
        initial_val_acc,
        epochs,
        wall_time: started.elapsed().as_secs_f64(),
        config: config.clone(),
        train: tc.clone(),
    };
    Ok((params, report))
}
