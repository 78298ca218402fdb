//! Learnable parameters and their fixed traversal order.
//!
//! The traversal order (used by checkpoints and optimizers) is:
//! `patch.weight, patch.bias, cls_token, [pos_embed]`, then for each layer
//! `ln1.gamma, ln1.beta, attn.{wq,bq,wk,bk,wv,bv,wo,bo}, ln2.gamma, ln2.beta,
//! mlp.{w1,b1,w2,b2}`, then `ln_f.gamma, ln_f.beta, head.weight, head.bias`.
//! Matrices are row-major `input x output`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ViTConfig;
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub patch_weight: Vec<T>,
    pub patch_bias: Vec<T>,
    pub cls_token: Vec<T>,
    pub pos_embed: Option<Vec<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gamma: Vec<T>,
    pub lnf_beta: Vec<T>,
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

/// Truncated normal sampler: N(0, std²) resampled outside ±2 std.
struct TruncNormal {
    rng: ChaCha8Rng,
    std: f64,
}

impl TruncNormal {
    fn draw<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::of(z * self.std);
                }
            })
            .collect()
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Zero-filled parameters with the shapes implied by `config`.
    pub fn zeros(config: &ViTConfig) -> Self {
        let d = config.embed_dim;
        let m = config.mlp_dim;
        let z = |n: usize| vec![T::zero(); n];
        ParamSet {
            patch_weight: z(config.patch_dim() * d),
            patch_bias: z(d),
            cls_token: z(d),
            pos_embed: config
                .use_positional_embedding
                .then(|| z(config.num_tokens() * d)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    ln1_gamma: z(d),
                    ln1_beta: z(d),
                    wq: z(d * d),
                    bq: z(d),
                    wk: z(d * d),
                    bk: z(d),
                    wv: z(d * d),
                    bv: z(d),
                    wo: z(d * d),
                    bo: z(d),
                    ln2_gamma: z(d),
                    ln2_beta: z(d),
                    w1: z(d * m),
                    b1: z(m),
                    w2: z(m * d),
                    b2: z(d),
                })
                .collect(),
            lnf_gamma: z(d),
            lnf_beta: z(d),
            head_weight: z(d * config.num_classes),
            head_bias: z(config.num_classes),
        }
    }

    /// Truncated-normal weights (std 0.02), zero biases and shifts, unit scales.
    pub fn init(config: &ViTConfig) -> Self {
        let d = config.embed_dim;
        let m = config.mlp_dim;
        let mut tn = TruncNormal {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            std: INIT_STD,
        };
        let z = |n: usize| vec![T::zero(); n];
        let one = |n: usize| vec![T::one(); n];
        let patch_weight = tn.draw(config.patch_dim() * d);
        let cls_token = tn.draw(d);
        let pos_embed = config
            .use_positional_embedding
            .then(|| tn.draw(config.num_tokens() * d));
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: one(d),
                ln1_beta: z(d),
                wq: tn.draw(d * d),
                bq: z(d),
                wk: tn.draw(d * d),
                bk: z(d),
                wv: tn.draw(d * d),
                bv: z(d),
                wo: tn.draw(d * d),
                bo: z(d),
                ln2_gamma: one(d),
                ln2_beta: z(d),
                w1: tn.draw(d * m),
                b1: z(m),
                w2: tn.draw(m * d),
                b2: z(d),
            })
            .collect();
        let head_weight = if config.zero_init_head {
            z(d * config.num_classes)
        } else {
            tn.draw(d * config.num_classes)
        };
        ParamSet {
            patch_weight,
            patch_bias: z(d),
            cls_token,
            pos_embed,
            layers,
            lnf_gamma: one(d),
            lnf_beta: z(d),
            head_weight,
            head_bias: z(config.num_classes),
        }
    }

    /// Named tensors in traversal order.
    pub fn tensors(&self) -> Vec<(String, &Vec<T>)> {
        let mut out: Vec<(String, &Vec<T>)> = vec![
            ("patch.weight".into(), &self.patch_weight),
            ("patch.bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
        ];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &Vec<T>); 16] = [
                ("ln1.gamma", &l.ln1_gamma),
                ("ln1.beta", &l.ln1_beta),
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln2.gamma", &l.ln2_gamma),
                ("ln2.beta", &l.ln2_beta),
                ("mlp.w1", &l.w1),
                ("mlp.b1", &l.b1),
                ("mlp.w2", &l.w2),
                ("mlp.b2", &l.b2),
            ];
            out.extend(
                fields
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gamma".into(), &self.lnf_gamma));
        out.push(("ln_f.beta".into(), &self.lnf_beta));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable tensors in the same order as [`ParamSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
        ];
        if let Some(p) = &mut self.pos_embed {
            out.push(p);
        }
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_gamma,
            &mut self.lnf_beta,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Overwrites every value from a flat slice in traversal order.
    pub fn load_flat(&mut self, values: &[T]) -> bool {
        if values.len() != self.num_values() {
            return false;
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        true
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamSet {
            patch_weight: conv(&self.patch_weight),
            patch_bias: conv(&self.patch_bias),
            cls_token: conv(&self.cls_token),
            pos_embed: self.pos_embed.as_ref().map(conv),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: conv(&l.ln1_gamma),
                    ln1_beta: conv(&l.ln1_beta),
                    wq: conv(&l.wq),
                    bq: conv(&l.bq),
                    wk: conv(&l.wk),
                    bk: conv(&l.bk),
                    wv: conv(&l.wv),
                    bv: conv(&l.bv),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ln2_gamma: conv(&l.ln2_gamma),
                    ln2_beta: conv(&l.ln2_beta),
                    w1: conv(&l.w1),
                    b1: conv(&l.b1),
                    w2: conv(&l.w2),
                    b2: conv(&l.b2),
                })
                .collect(),
            lnf_gamma: conv(&self.lnf_gamma),
            lnf_beta: conv(&self.lnf_beta),
            head_weight: conv(&self.head_weight),
            head_bias: conv(&self.head_bias),
        }
    }
}

pub fn init_params<T: Scalar>(config: &ViTConfig) -> ParamSet<T> {
    ParamSet::init(config)
}
