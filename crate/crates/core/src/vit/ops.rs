//! Dense row-major kernels used by the forward and backward passes.

use crate::scalar::Scalar;

/// `out[n x m] = a[n x k] * b[k x m] (+ bias[m])`.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    bias: Option<&[T]>,
    n: usize,
    k: usize,
    m: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        if let Some(bias) = bias {
            row.copy_from_slice(bias);
        }
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of `y = x W + b` given `dy`: accumulates into `dw`, `db` and
/// returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    n: usize,
    k: usize,
    m: usize,
) -> Vec<T> {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let xv = x[i * k + p];
            for (g, &d) in dw[p * m..(p + 1) * m].iter_mut().zip(dyr) {
                *g += xv * d;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            for (g, &d) in db.iter_mut().zip(&dy[i * m..(i + 1) * m]) {
                *g += d;
            }
        }
    }
    let mut dx = vec![T::zero(); n * k];
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let wr = &w[p * m..(p + 1) * m];
            dx[i * k + p] = wr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        }
    }
    dx
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-row layer norm cache: normalized rows and reciprocal std.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    d: usize,
) -> (Vec<T>, LayerNormCache<T>) {
    let dn = T::of(d as f64);
    let eps = T::of(LN_EPS);
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    n: usize,
    d: usize,
) -> Vec<T> {
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); n * d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            let g = dyr[j] * gamma[j];
            mean_g += g;
            mean_gx += g * xh[j];
        }
        mean_g /= dn;
        mean_gx /= dn;
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[i * d + j] = cache.rstd[i] * (g - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

/// tanh-form GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    let dt = (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * dt
}

/// In-place max-subtracted softmax over `row`.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(
            matmul(&a, &b, Some(&[1.0, 1.0]), 2, 2, 2),
            vec![20.0, 23.0, 44.0, 51.0]
        );
    }

    #[test]
    fn softmax_is_normalized() {
        let mut r = [1000.0f64, 1001.0, 999.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(r[1] > r[0] && r[0] > r[2]);
    }
}
