//! Forward and reverse-mode passes of the encoder.
//!
//! Pre-norm blocks: `x += MHSA(LN(x))`, `x += MLP(LN(x))` with GELU, a final
//! layer norm, and a linear head on the class token.

use super::config::ViTConfig;
use super::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear_backward, matmul, softmax_in_place,
    LayerNormCache,
};
use super::params::{LayerParams, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A batch of inputs scaled to `[0, 1]`, each `H x W x C` row-major.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check(&self, config: &ViTConfig) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::dims(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        if self.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            check_input(x, config)?;
            if y >= config.num_classes {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {} classes",
                    config.num_classes
                )));
            }
        }
        Ok(())
    }
}

fn check_input<T>(input: &[T], config: &ViTConfig) -> Result<()> {
    if input.len() != config.input_len() {
        return Err(Error::dims(format!(
            "input has {} samples, config expects {}x{}x{}",
            input.len(),
            config.image_h,
            config.image_w,
            config.channels
        )));
    }
    Ok(())
}

/// Flattens every patch (row-major pixels, interleaved channels) into a
/// `num_patches x patch_dim` matrix.
pub(crate) fn flatten_patches<T: Scalar>(input: &[T], config: &ViTConfig) -> Vec<T> {
    let (p, c, w) = (config.patch_size, config.channels, config.image_w);
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gr in 0..config.grid_rows() {
        for gc in 0..config.grid_cols() {
            for py in 0..p {
                let start = ((gr * p + py) * w + gc * p) * c;
                out.extend_from_slice(&input[start..start + p * c]);
            }
        }
    }
    out
}

/// Token sequence `(num_patches + 1) x embed_dim`: class token first, then
/// projected patches, plus positional embeddings when enabled.
pub fn patch_embed<T: Scalar>(
    input: &[T],
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> Result<Vec<T>> {
    check_input(input, config)?;
    let flat = flatten_patches(input, config);
    Ok(embed_from_flat(&flat, params, config))
}

fn embed_from_flat<T: Scalar>(flat: &[T], params: &ParamSet<T>, config: &ViTConfig) -> Vec<T> {
    let d = config.embed_dim;
    let proj = matmul(
        flat,
        &params.patch_weight,
        Some(&params.patch_bias),
        config.num_patches(),
        config.patch_dim(),
        d,
    );
    let mut tokens = Vec::with_capacity(config.num_tokens() * d);
    tokens.extend_from_slice(&params.cls_token);
    tokens.extend(proj);
    if let Some(pos) = &params.pos_embed {
        tokens.iter_mut().zip(pos).for_each(|(t, &p)| *t += p);
    }
    tokens
}

struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per head, `n x n` row-stochastic weights.
    maps: Vec<Vec<T>>,
    concat: Vec<T>,
}

fn attention_forward<T: Scalar>(
    h: &[T],
    layer: &LayerParams<T>,
    config: &ViTConfig,
    n: usize,
) -> (Vec<T>, AttentionCache<T>) {
    let d = config.embed_dim;
    let (heads, hd) = (config.num_heads, config.head_dim());
    let scale = T::one() / T::of(hd as f64).sqrt();
    let q = matmul(h, &layer.wq, Some(&layer.bq), n, d, d);
    let k = matmul(h, &layer.wk, Some(&layer.bk), n, d, d);
    let v = matmul(h, &layer.wv, Some(&layer.bv), n, d, d);
    let mut concat = vec![T::zero(); n * d];
    let mut maps = Vec::with_capacity(heads);
    for head in 0..heads {
        let off = head * hd;
        let mut a = vec![T::zero(); n * n];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + hd];
            for j in 0..n {
                let kj = &k[j * d + off..j * d + off + hd];
                a[i * n + j] = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
            }
            softmax_in_place(&mut a[i * n..(i + 1) * n]);
        }
        for i in 0..n {
            for j in 0..n {
                let w = a[i * n + j];
                for t in 0..hd {
                    concat[i * d + off + t] += w * v[j * d + off + t];
                }
            }
        }
        maps.push(a);
    }
    let out = matmul(&concat, &layer.wo, Some(&layer.bo), n, d, d);
    (
        out,
        AttentionCache {
            q,
            k,
            v,
            maps,
            concat,
        },
    )
}

/// Multi-head self-attention on an `n x embed_dim` sequence. Returns the
/// projected output and one `n x n` attention map per head.
pub fn multi_head_attention<T: Scalar>(
    x: &[T],
    layer: &LayerParams<T>,
    config: &ViTConfig,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    let d = config.embed_dim;
    if x.is_empty() || !x.len().is_multiple_of(d) {
        return Err(Error::dims(format!(
            "sequence length {} is not a multiple of embed_dim {d}",
            x.len()
        )));
    }
    let (out, cache) = attention_forward(x, layer, config, x.len() / d);
    Ok((out, cache.maps))
}

struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

struct ForwardCache<T> {
    flat: Vec<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LayerNormCache<T>,
    cls_out: Vec<T>,
}

fn encoder_layers<T: Scalar>(
    mut x: Vec<T>,
    params: &ParamSet<T>,
    config: &ViTConfig,
    mut caches: Option<&mut Vec<LayerCache<T>>>,
) -> (Vec<T>, LayerNormCache<T>) {
    let (n, d, m) = (config.num_tokens(), config.embed_dim, config.mlp_dim);
    for layer in &params.layers {
        let (h1, ln1) = layer_norm(&x, &layer.ln1_gamma, &layer.ln1_beta, n, d);
        let (attn_out, attn) = attention_forward(&h1, layer, config, n);
        x.iter_mut().zip(&attn_out).for_each(|(a, &b)| *a += b);
        let (h2, ln2) = layer_norm(&x, &layer.ln2_gamma, &layer.ln2_beta, n, d);
        let pre_act = matmul(&h2, &layer.w1, Some(&layer.b1), n, d, m);
        let act: Vec<T> = pre_act.iter().map(|&u| gelu(u)).collect();
        let mlp_out = matmul(&act, &layer.w2, Some(&layer.b2), n, m, d);
        x.iter_mut().zip(&mlp_out).for_each(|(a, &b)| *a += b);
        if let Some(c) = caches.as_deref_mut() {
            c.push(LayerCache {
                ln1,
                h1,
                attn,
                ln2,
                h2,
                pre_act,
                act,
            });
        }
    }
    let (z, lnf) = layer_norm(&x, &params.lnf_gamma, &params.lnf_beta, n, d);
    (z, lnf)
}

/// Runs every encoder block and the final layer norm over a token sequence.
pub fn encoder_forward<T: Scalar>(
    tokens: &[T],
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> Result<Vec<T>> {
    check_tokens(tokens, config)?;
    Ok(encoder_layers(tokens.to_vec(), params, config, None).0)
}

/// Row-major attention matrices indexed `[layer][head]`.
pub type AttentionMaps<T> = Vec<Vec<Vec<T>>>;

/// Like [`encoder_forward`], also returning the attention matrices.
pub fn encoder_forward_traced<T: Scalar>(
    tokens: &[T],
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> Result<(Vec<T>, AttentionMaps<T>)> {
    check_tokens(tokens, config)?;
    let mut caches = Vec::new();
    let (z, _) = encoder_layers(tokens.to_vec(), params, config, Some(&mut caches));
    Ok((z, caches.into_iter().map(|c| c.attn.maps).collect()))
}

fn check_tokens<T>(tokens: &[T], config: &ViTConfig) -> Result<()> {
    if tokens.len() != config.num_tokens() * config.embed_dim {
        return Err(Error::dims(format!(
            "expected {} x {} tokens, got {} values",
            config.num_tokens(),
            config.embed_dim,
            tokens.len()
        )));
    }
    Ok(())
}

/// Classifier logits from the encoded class token.
pub fn head_logits<T: Scalar>(encoded: &[T], params: &ParamSet<T>, config: &ViTConfig) -> Vec<T> {
    let d = config.embed_dim;
    matmul(
        &encoded[..d],
        &params.head_weight,
        Some(&params.head_bias),
        1,
        d,
        config.num_classes,
    )
}

fn forward_cached<T: Scalar>(
    input: &[T],
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> (Vec<T>, ForwardCache<T>) {
    let flat = flatten_patches(input, config);
    let tokens = embed_from_flat(&flat, params, config);
    let mut layers = Vec::with_capacity(config.num_layers);
    let (z, lnf) = encoder_layers(tokens, params, config, Some(&mut layers));
    let cls_out = z[..config.embed_dim].to_vec();
    let logits = head_logits(&z, params, config);
    (
        logits,
        ForwardCache {
            flat,
            layers,
            lnf,
            cls_out,
        },
    )
}

pub fn logits<T: Scalar>(input: &[T], params: &ParamSet<T>, config: &ViTConfig) -> Result<Vec<T>> {
    let tokens = patch_embed(input, params, config)?;
    let z = encoder_layers(tokens, params, config, None).0;
    Ok(head_logits(&z, params, config))
}

/// `-log softmax(logits)[label]` with max subtraction, and the softmax.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let probs = logits.iter().map(|&z| (z - log_z).exp()).collect();
    (log_z - logits[label], probs)
}

/// Mean cross-entropy over the batch plus per-sample logits.
pub fn forward_loss<T: Scalar>(
    batch: &Batch<T>,
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> Result<(T, Vec<Vec<T>>)> {
    batch.check(config)?;
    let mut total = T::zero();
    let mut all = Vec::with_capacity(batch.len());
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let z = logits(x, params, config)?;
        total += cross_entropy(&z, y).0;
        all.push(z);
    }
    Ok((total / T::of(batch.len() as f64), all))
}

/// Output of [`backward`]: the mean loss, per-sample logits, and exact
/// gradients of the mean loss.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: T,
    pub logits: Vec<Vec<T>>,
    pub grads: ParamSet<T>,
}

pub fn backward<T: Scalar>(
    batch: &Batch<T>,
    params: &ParamSet<T>,
    config: &ViTConfig,
) -> Result<Gradients<T>> {
    batch.check(config)?;
    let mut grads = ParamSet::zeros(config);
    let inv_b = T::one() / T::of(batch.len() as f64);
    let mut total = T::zero();
    let mut all = Vec::with_capacity(batch.len());
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let (z, cache) = forward_cached(x, params, config);
        let (loss, probs) = cross_entropy(&z, y);
        total += loss;
        let mut dlogits: Vec<T> = probs.iter().map(|&p| p * inv_b).collect();
        dlogits[y] -= inv_b;
        sample_backward(&dlogits, &cache, params, config, &mut grads);
        all.push(z);
    }
    Ok(Gradients {
        loss: total * inv_b,
        logits: all,
        grads,
    })
}

fn sample_backward<T: Scalar>(
    dlogits: &[T],
    cache: &ForwardCache<T>,
    params: &ParamSet<T>,
    config: &ViTConfig,
    g: &mut ParamSet<T>,
) {
    let (n, d, m, c) = (
        config.num_tokens(),
        config.embed_dim,
        config.mlp_dim,
        config.num_classes,
    );
    let dcls = linear_backward(
        &cache.cls_out,
        &params.head_weight,
        dlogits,
        &mut g.head_weight,
        Some(&mut g.head_bias),
        1,
        d,
        c,
    );
    let mut dz = vec![T::zero(); n * d];
    dz[..d].copy_from_slice(&dcls);
    let mut dx = layer_norm_backward(
        &dz,
        &cache.lnf,
        &params.lnf_gamma,
        &mut g.lnf_gamma,
        &mut g.lnf_beta,
        n,
        d,
    );

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let gl = &mut g.layers[li];

        // MLP residual.
        let dact = linear_backward(
            &lc.act,
            &layer.w2,
            &dx,
            &mut gl.w2,
            Some(&mut gl.b2),
            n,
            m,
            d,
        );
        let dpre: Vec<T> = dact
            .iter()
            .zip(&lc.pre_act)
            .map(|(&da, &u)| da * gelu_grad(u))
            .collect();
        let dh2 = linear_backward(
            &lc.h2,
            &layer.w1,
            &dpre,
            &mut gl.w1,
            Some(&mut gl.b1),
            n,
            d,
            m,
        );
        let dln2 = layer_norm_backward(
            &dh2,
            &lc.ln2,
            &layer.ln2_gamma,
            &mut gl.ln2_gamma,
            &mut gl.ln2_beta,
            n,
            d,
        );
        dx.iter_mut().zip(&dln2).for_each(|(a, &b)| *a += b);

        // Attention residual.
        let dconcat = linear_backward(
            &lc.attn.concat,
            &layer.wo,
            &dx,
            &mut gl.wo,
            Some(&mut gl.bo),
            n,
            d,
            d,
        );
        let (dq, dk, dv) = attention_backward(&dconcat, &lc.attn, config, n);
        let mut dh1 = linear_backward(
            &lc.h1,
            &layer.wq,
            &dq,
            &mut gl.wq,
            Some(&mut gl.bq),
            n,
            d,
            d,
        );
        let dh1k = linear_backward(
            &lc.h1,
            &layer.wk,
            &dk,
            &mut gl.wk,
            Some(&mut gl.bk),
            n,
            d,
            d,
        );
        let dh1v = linear_backward(
            &lc.h1,
            &layer.wv,
            &dv,
            &mut gl.wv,
            Some(&mut gl.bv),
            n,
            d,
            d,
        );
        for ((a, &b), &c) in dh1.iter_mut().zip(&dh1k).zip(&dh1v) {
            *a += b + c;
        }
        let dln1 = layer_norm_backward(
            &dh1,
            &lc.ln1,
            &layer.ln1_gamma,
            &mut gl.ln1_gamma,
            &mut gl.ln1_beta,
            n,
            d,
        );
        dx.iter_mut().zip(&dln1).for_each(|(a, &b)| *a += b);
    }

    for (a, &b) in g.cls_token.iter_mut().zip(&dx[..d]) {
        *a += b;
    }
    if let Some(gp) = &mut g.pos_embed {
        gp.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b);
    }
    linear_backward(
        &cache.flat,
        &params.patch_weight,
        &dx[d..],
        &mut g.patch_weight,
        Some(&mut g.patch_bias),
        config.num_patches(),
        config.patch_dim(),
        d,
    );
}

fn attention_backward<T: Scalar>(
    dconcat: &[T],
    cache: &AttentionCache<T>,
    config: &ViTConfig,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = config.embed_dim;
    let hd = config.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (
        vec![T::zero(); n * d],
        vec![T::zero(); n * d],
        vec![T::zero(); n * d],
    );
    for (head, a) in cache.maps.iter().enumerate() {
        let off = head * hd;
        let mut da = vec![T::zero(); n * n];
        for i in 0..n {
            let doi = &dconcat[i * d + off..i * d + off + hd];
            for j in 0..n {
                let vj = &cache.v[j * d + off..j * d + off + hd];
                da[i * n + j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                let w = a[i * n + j];
                for t in 0..hd {
                    dv[j * d + off + t] += w * doi[t];
                }
            }
        }
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            let drow = &da[i * n..(i + 1) * n];
            let dot: T = row.iter().zip(drow).map(|(&p, &g)| p * g).sum();
            for j in 0..n {
                let ds = row[j] * (drow[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                for t in 0..hd {
                    dq[i * d + off + t] += ds * cache.k[j * d + off + t];
                    dk[j * d + off + t] += ds * cache.q[i * d + off + t];
                }
            }
        }
    }
    (dq, dk, dv)
}
