//! Batch normalization kernels. Statistics are reduced per channel over
//! (batch, rows, cols); sums run in f64 regardless of graph precision.

use super::{Real, Shape};

/// Epsilon added to the variance before taking the square root.
pub const BN_EPSILON: f64 = 1e-5;

/// Returns (output, mean, biased variance, inv_std) per channel.
pub(crate) fn batchnorm_train_forward<R: Real>(
    x: &[R],
    xs: Shape,
    gamma: &[R],
    beta: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>, Vec<R>) {
    let plane = xs.plane();
    let m = (xs.n * plane) as f64;
    let mut mean = vec![R::zero(); xs.c];
    let mut var = vec![R::zero(); xs.c];
    let mut inv_std = vec![R::zero(); xs.c];
    for c in 0..xs.c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for n in 0..xs.n {
            for &v in &x[(n * xs.c + c) * plane..][..plane] {
                let v = v.to_f64();
                sum += v;
                sum_sq += v * v;
            }
        }
        let mu = sum / m;
        let sigma2 = (sum_sq / m - mu * mu).max(0.0);
        mean[c] = R::from_f64(mu);
        var[c] = R::from_f64(sigma2);
        inv_std[c] = R::from_f64(1.0 / (sigma2 + BN_EPSILON).sqrt());
    }
    let mut out = vec![R::zero(); x.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let src = &x[(n * xs.c + c) * plane..][..plane];
            let dst = &mut out[(n * xs.c + c) * plane..][..plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    (out, mean, var, inv_std)
}

pub(crate) fn batchnorm_infer_forward<R: Real>(
    x: &[R],
    xs: Shape,
    gamma: &[R],
    beta: &[R],
    mean: &[R],
    var: &[R],
) -> Vec<R> {
    let plane = xs.plane();
    let mut out = vec![R::zero(); x.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let is = R::from_f64(1.0 / (var[c].to_f64() + BN_EPSILON).sqrt());
            let (mu, g, b) = (mean[c], gamma[c], beta[c]);
            let src = &x[(n * xs.c + c) * plane..][..plane];
            let dst = &mut out[(n * xs.c + c) * plane..][..plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    out
}

pub(crate) struct BnBackwardStats<R> {
    pub d_gamma: Vec<R>,
    pub d_beta: Vec<R>,
    sum_gy: Vec<f64>,
    sum_gy_xhat: Vec<f64>,
}

/// Per-channel reductions shared by the gamma/beta/input gradients.
pub(crate) fn batchnorm_backward_stats<R: Real>(
    x: &[R],
    xs: Shape,
    g_out: &[R],
    mean: &[R],
    inv_std: &[R],
) -> BnBackwardStats<R> {
    let plane = xs.plane();
    let mut sum_gy = vec![0.0f64; xs.c];
    let mut sum_gy_xhat = vec![0.0f64; xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let (mu, is) = (mean[c].to_f64(), inv_std[c].to_f64());
            let base = (n * xs.c + c) * plane;
            let mut s = 0.0f64;
            let mut sx = 0.0f64;
            for j in 0..plane {
                let g = g_out[base + j].to_f64();
                let xhat = (x[base + j].to_f64() - mu) * is;
                s += g;
                sx += g * xhat;
            }
            sum_gy[c] += s;
            sum_gy_xhat[c] += sx;
        }
    }
    BnBackwardStats {
        d_gamma: sum_gy_xhat.iter().map(|&v| R::from_f64(v)).collect(),
        d_beta: sum_gy.iter().map(|&v| R::from_f64(v)).collect(),
        sum_gy,
        sum_gy_xhat,
    }
}

/// dx for training-mode batch norm:
/// dx = gamma * inv_std / m * (m*gy - sum(gy) - xhat * sum(gy*xhat))
pub(crate) fn batchnorm_backward_input<R: Real>(
    x: &[R],
    xs: Shape,
    g_out: &[R],
    mean: &[R],
    inv_std: &[R],
    gamma: &[R],
    stats: &BnBackwardStats<R>,
    g_x: &mut [R],
) {
    let plane = xs.plane();
    let m = (xs.n * plane) as f64;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let (mu, is) = (mean[c].to_f64(), inv_std[c].to_f64());
            let scale = gamma[c].to_f64() * is / m;
            let (sg, sgx) = (stats.sum_gy[c], stats.sum_gy_xhat[c]);
            let base = (n * xs.c + c) * plane;
            for j in 0..plane {
                let g = g_out[base + j].to_f64();
                let xhat = (x[base + j].to_f64() - mu) * is;
                g_x[base + j] += R::from_f64(scale * (m * g - sg - xhat * sgx));
            }
        }
    }
}

/// Per-channel (d_gamma, d_beta) for inference-mode batch norm.
pub(crate) fn batchnorm_infer_stats<R: Real>(
    x: &[R],
    xs: Shape,
    g_out: &[R],
    mean: &[R],
    var: &[R],
) -> (Vec<R>, Vec<R>) {
    let plane = xs.plane();
    let mut d_gamma = vec![0.0f64; xs.c];
    let mut d_beta = vec![0.0f64; xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let mu = mean[c].to_f64();
            let is = 1.0 / (var[c].to_f64() + BN_EPSILON).sqrt();
            let base = (n * xs.c + c) * plane;
            for j in 0..plane {
                let g = g_out[base + j].to_f64();
                d_beta[c] += g;
                d_gamma[c] += g * (x[base + j].to_f64() - mu) * is;
            }
        }
    }
    (
        d_gamma.iter().map(|&v| R::from_f64(v)).collect(),
        d_beta.iter().map(|&v| R::from_f64(v)).collect(),
    )
}

/// dx for inference-mode batch norm (stats are constants): gamma * inv_std.
pub(crate) fn batchnorm_infer_backward_input<R: Real>(
    xs: Shape,
    g_out: &[R],
    var: &[R],
    gamma: &[R],
    g_x: &mut [R],
) {
    let plane = xs.plane();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let k = R::from_f64(gamma[c].to_f64() / (var[c].to_f64() + BN_EPSILON).sqrt());
            let base = (n * xs.c + c) * plane;
            for j in 0..plane {
                g_x[base + j] += g_out[base + j] * k;
            }
        }
    }
}
