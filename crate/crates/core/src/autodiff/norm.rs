//! Per-channel batch normalization over `[N,C,H,W]`.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Variance epsilon inside the normalizer.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Values saved by the training-mode forward pass for backward.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance per channel.
    pub var: Vec<f64>,
}

pub fn batch_norm_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, BatchNormCache)> {
    let [n, c, h, w] = input.dims4()?;
    check_affine(c, gamma, beta)?;
    let count = n * h * w;
    ensure!(
        count > 1,
        "batch-norm in training mode needs more than one value per channel, got N*H*W = {}",
        count
    );
    let x = input.data();
    let hw = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&t| (t - m) * (t - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Inference-mode normalization with fixed statistics. Returns the output
/// and the per-channel `1/sqrt(var + eps)` used.
pub fn batch_norm_infer_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let [n, c, h, w] = input.dims4()?;
    check_affine(c, gamma, beta)?;
    ensure!(
        running_mean.shape() == [c] && running_var.shape() == [c],
        "batch-norm running statistics must have shape [{}]",
        c
    );
    let inv_std: Vec<f64> = running_var
        .data()
        .iter()
        .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
        .collect();
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                out[i] = x[i] * scale + shift;
            }
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, inv_std))
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    ensure!(
        gamma.shape() == [c] && beta.shape() == [c],
        "batch-norm scale/shift must have shape [{}], got {:?} and {:?}",
        c,
        gamma.shape(),
        beta.shape()
    );
    Ok(())
}

/// Gradients `(d_input, d_gamma, d_beta)` of the training-mode forward.
pub fn batch_norm_train_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = grad_out.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = &cache.normalized;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = k * (m * dy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_batch_normalizes_to_zero() {
        let x = Tensor::full(vec![4, 2, 3, 3], 2.5);
        let (y, _) =
            batch_norm_train_forward(&x, &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2]))
                .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn single_value_channel_rejected_in_training() {
        let x = Tensor::zeros(vec![1, 2, 1, 1]);
        let err =
            batch_norm_train_forward(&x, &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2]));
        assert!(err.is_err());
    }

    #[test]
    fn train_output_has_zero_mean_unit_variance() {
        let x = Tensor::from_fn(vec![3, 2, 2, 2], |i| ((i * 7) % 5) as f64 + 0.1 * i as f64);
        let (y, _) =
            batch_norm_train_forward(&x, &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2]))
                .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
