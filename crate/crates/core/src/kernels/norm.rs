//! Per-channel batch normalization.

use crate::error::{expect_dim, Error, Result};
use crate::tensor::Tensor4;

pub const BN_EPS: f32 = 1e-5;
/// Fraction of the old running statistic kept on each update.
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BnMode<'a> {
    /// Normalize by batch statistics and fold them into the running stats.
    Train {
        running: &'a mut RunningStats,
        momentum: f32,
    },
    /// Normalize by the running stats.
    Infer(&'a RunningStats),
}

/// Saved activations needed by [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor4,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

fn check_params(input: &Tensor4, gamma: &[f32], beta: &[f32], eps: f32) -> Result<()> {
    const OP: &str = "batchnorm";
    let c = input.shape().c;
    expect_dim(OP, "gamma length", c, gamma.len())?;
    expect_dim(OP, "beta length", c, beta.len())?;
    if !(eps > 0.0) {
        return Err(Error::invalid(OP, format!("eps must be positive, got {eps}")));
    }
    let s = input.shape();
    if s.n * s.plane() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Visit every element of channel `c` across the batch.
fn channel_values(x: &Tensor4, c: usize) -> impl Iterator<Item = &f32> + '_ {
    let s = x.shape();
    (0..s.n).flat_map(move |n| {
        let start = s.offset(n, c, 0, 0);
        x.data()[start..start + s.plane()].iter()
    })
}

fn apply_affine(input: &Tensor4, mean: &[f32], inv_std: &[f32], gamma: &[f32], beta: &[f32]) -> (Tensor4, Tensor4) {
    let s = input.shape();
    let mut xhat = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = s.offset(n, c, 0, 0);
            let src = &input.data()[start..start + plane];
            let xh = &mut xhat.data_mut()[start..start + plane];
            for (d, v) in xh.iter_mut().zip(src) {
                *d = (v - mean[c]) * inv_std[c];
            }
            let dst = &mut out.data_mut()[start..start + plane];
            for (d, v) in dst.iter_mut().zip(xhat.data()[start..start + plane].iter()) {
                *d = gamma[c] * v + beta[c];
            }
        }
    }
    (out, xhat)
}

pub fn batchnorm_train(
    input: &Tensor4,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    momentum: f32,
    running: &mut RunningStats,
) -> Result<(Tensor4, BatchNormCache)> {
    check_params(input, gamma, beta, eps)?;
    let s = input.shape();
    expect_dim("batchnorm", "running stats length", s.c, running.mean.len())?;
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0f32; s.c];
    let mut inv_std = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mu = channel_values(input, c).map(|v| *v as f64).sum::<f64>() / count;
        let var = channel_values(input, c).map(|v| (*v as f64 - mu).powi(2)).sum::<f64>() / count;
        mean[c] = mu as f32;
        inv_std[c] = (1.0 / (var + eps as f64).sqrt()) as f32;
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        running.mean[c] = momentum * running.mean[c] + (1.0 - momentum) * mu as f32;
        running.var[c] = momentum * running.var[c] + (1.0 - momentum) * unbiased as f32;
    }
    let (out, xhat) = apply_affine(input, &mean, &inv_std, gamma, beta);
    Ok((out, BatchNormCache { xhat, inv_std }))
}

pub fn batchnorm_infer(input: &Tensor4, gamma: &[f32], beta: &[f32], eps: f32, running: &RunningStats) -> Result<Tensor4> {
    check_params(input, gamma, beta, eps)?;
    expect_dim("batchnorm", "running stats length", input.shape().c, running.mean.len())?;
    let inv_std: Vec<f32> = running
        .var
        .iter()
        .map(|v| (1.0 / (*v as f64 + eps as f64).sqrt()) as f32)
        .collect();
    Ok(apply_affine(input, &running.mean, &inv_std, gamma, beta).0)
}

pub fn batchnorm_forward(input: &Tensor4, gamma: &[f32], beta: &[f32], eps: f32, mode: BnMode<'_>) -> Result<Tensor4> {
    match mode {
        BnMode::Train { running, momentum } => batchnorm_train(input, gamma, beta, eps, momentum, running).map(|r| r.0),
        BnMode::Infer(running) => batchnorm_infer(input, gamma, beta, eps, running),
    }
}

/// Gradient of the train-mode forward pass.
pub fn batchnorm_backward(grad_out: &Tensor4, gamma: &[f32], cache: &BatchNormCache) -> Result<(Tensor4, BatchNormGrads)> {
    let s = cache.xhat.shape();
    expect_dim("batchnorm_backward", "grad length", s.len(), grad_out.len())?;
    let count = (s.n * s.plane()) as f64;
    let plane = s.plane();
    let mut grads = BatchNormGrads {
        gamma: vec![0.0; s.c],
        beta: vec![0.0; s.c],
    };
    let mut grad_in = Tensor4::zeros(s);
    for c in 0..s.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            let start = s.offset(n, c, 0, 0);
            for (dy, xh) in grad_out.data()[start..start + plane].iter().zip(&cache.xhat.data()[start..start + plane]) {
                sum_dy += *dy as f64;
                sum_dy_xhat += (*dy as f64) * (*xh as f64);
            }
        }
        grads.gamma[c] = sum_dy_xhat as f32;
        grads.beta[c] = sum_dy as f32;
        let scale = gamma[c] as f64 * cache.inv_std[c] as f64;
        let (mean_dy, mean_dy_xhat) = (sum_dy / count, sum_dy_xhat / count);
        for n in 0..s.n {
            let start = s.offset(n, c, 0, 0);
            for i in start..start + plane {
                let dy = grad_out.data()[i] as f64;
                let xh = cache.xhat.data()[i] as f64;
                grad_in.data_mut()[i] = (scale * (dy - mean_dy - xh * mean_dy_xhat)) as f32;
            }
        }
    }
    Ok((grad_in, grads))
}
