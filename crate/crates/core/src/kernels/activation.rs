//! ReLU, per-pixel channel softmax and cross-entropy.

use crate::error::{expect_dim, Error, Result};
use crate::tensor::Tensor4;

pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// `input` is the forward input (or output; both share the same sign pattern).
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    expect_dim("relu_backward", "grad length", input.len(), grad_out.len())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

/// Softmax over the channel axis, independently at every pixel.
pub fn softmax_channelwise(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    let src = input.data();
    let dst = out.data_mut();
    let mut buf = vec![0.0f32; s.c];
    for n in 0..s.n {
        let base = n * s.item();
        for p in 0..plane {
            let max = (0..s.c).map(|c| src[base + c * plane + p]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = (src[base + c * plane + p] - max).exp();
                sum += *b as f64;
            }
            for (c, b) in buf.iter().enumerate() {
                dst[base + c * plane + p] = (*b as f64 / sum) as f32;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`softmax_channelwise`].
pub fn softmax_backward(probs: &Tensor4, grad_probs: &Tensor4) -> Result<Tensor4> {
    expect_dim("softmax_backward", "grad length", probs.len(), grad_probs.len())?;
    let s = probs.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    let (p, g) = (probs.data(), grad_probs.data());
    let dst = out.data_mut();
    for n in 0..s.n {
        let base = n * s.item();
        for px in 0..plane {
            let dot: f64 = (0..s.c)
                .map(|c| p[base + c * plane + px] as f64 * g[base + c * plane + px] as f64)
                .sum();
            for c in 0..s.c {
                let i = base + c * plane + px;
                dst[i] = (p[i] as f64 * (g[i] as f64 - dot)) as f32;
            }
        }
    }
    Ok(out)
}

fn check_labels(probs: &Tensor4, labels: &[u8]) -> Result<()> {
    let s = probs.shape();
    expect_dim("cross_entropy", "label count", s.n * s.plane(), labels.len())?;
    if let Some((pixel, &label)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= s.c) {
        return Err(Error::LabelOutOfRange { label, pixel, classes: s.c });
    }
    Ok(())
}

/// Iterate `(label, flat index of the labelled probability)` over counted pixels.
fn labelled<'a>(probs: &Tensor4, labels: &'a [u8], ignore: Option<u8>) -> impl Iterator<Item = (u8, usize)> + 'a {
    let s = probs.shape();
    let plane = s.plane();
    labels.iter().enumerate().filter(move |(_, l)| Some(**l) != ignore).map(move |(i, l)| {
        let (n, p) = (i / plane, i % plane);
        (*l, n * s.item() + *l as usize * plane + p)
    })
}

/// Mean negative log-likelihood of `labels` under `probs`, with its gradient
/// with respect to `probs`. `labels` holds one class per (n, y, x) pixel.
pub fn cross_entropy_loss(probs: &Tensor4, labels: &[u8], ignore_class: Option<u8>) -> Result<(f64, Tensor4)> {
    check_labels(probs, labels)?;
    let count = labelled(probs, labels, ignore_class).count();
    let mut grad = Tensor4::zeros(probs.shape());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0f64;
    for (_, i) in labelled(probs, labels, ignore_class) {
        let p = (probs.data()[i] as f64).max(f64::MIN_POSITIVE);
        loss -= p.ln();
        grad.data_mut()[i] = (-1.0 / (p * count as f64)) as f32;
    }
    Ok((loss / count as f64, grad))
}

/// Fused softmax + cross-entropy over logits. Returns the loss, the
/// probabilities and the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[u8], ignore_class: Option<u8>) -> Result<(f64, Tensor4, Tensor4)> {
    let probs = softmax_channelwise(logits);
    let (loss, grad) = cross_entropy_from_probs(&probs, labels, ignore_class)?;
    Ok((loss, probs, grad))
}

/// Loss and logit gradient `(p − onehot) / count` given softmax outputs.
pub fn cross_entropy_from_probs(probs: &Tensor4, labels: &[u8], ignore_class: Option<u8>) -> Result<(f64, Tensor4)> {
    check_labels(probs, labels)?;
    let s = probs.shape();
    let plane = s.plane();
    let count = labelled(probs, labels, ignore_class).count();
    let mut grad = Tensor4::zeros(s);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0f64;
    for (i, l) in labels.iter().enumerate() {
        if Some(*l) == ignore_class {
            continue;
        }
        let (n, p) = (i / plane, i % plane);
        for c in 0..s.c {
            let j = n * s.item() + c * plane + p;
            let pj = probs.data()[j] as f64;
            let target = if c == *l as usize { 1.0 } else { 0.0 };
            if c == *l as usize {
                loss -= pj.max(f64::MIN_POSITIVE).ln();
            }
            grad.data_mut()[j] = ((pj - target) * scale) as f32;
        }
    }
    Ok((loss * scale, grad))
}
