//! Reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use handseg::network::{multitask_loss, Gradients, Network, NetworkSpec, WidthMultiplier};
use handseg::preprocess::{BBox, RgbdFrame};
use handseg::tensor::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct six-loop cross-correlation with zero padding, f64 accumulation.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, bias: &[f32], stride: usize, pad: usize) -> Tensor4 {
    let (s, k) = (x.shape(), w.shape());
    let oh = (s.h + 2 * pad - k.h) / stride + 1;
    let ow = (s.w + 2 * pad - k.w) / stride + 1;
    let mut out = Tensor4::zeros(Shape4::new(s.n, k.n, oh, ow));
    for n in 0..s.n {
        for co in 0..k.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co] as f64;
                    for ci in 0..s.c {
                        for ky in 0..k.h {
                            for kx in 0..k.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    acc += x.get(n, ci, iy as usize, ix as usize) as f64 * w.get(co, ci, ky, kx) as f64;
                                }
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc as f32);
                }
            }
        }
    }
    out
}

/// Thresholding by literal evaluation over the whole frame: pixels outside
/// the box, or whose depth is not within `t` of the box's most frequent
/// non-zero depth (nearest on ties), become 0.
pub fn eq1_oracle(frame: &RgbdFrame, bbox: &BBox, t: u16) -> Option<Vec<u16>> {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let d = frame.at(x, y);
            if bbox.contains(x, y) && d != 0 {
                *counts.entry(d).or_default() += 1;
            }
        }
    }
    let best = counts.values().copied().max()?;
    let m = *counts.iter().find(|(_, &c)| c == best)?.0;
    let mut out = vec![0u16; frame.width * frame.height];
    for y in 0..frame.height {
        for x in 0..frame.width {
            let d = frame.at(x, y);
            if bbox.contains(x, y) && (d as i64 - m as i64).abs() < t as i64 {
                out[y * frame.width + x] = d;
            }
        }
    }
    Some(out)
}

/// A 16x16 frame drawn from a handful of depth levels, with holes, and a
/// random box inside it.
pub fn random_frame(rng: &mut ChaCha8Rng) -> (RgbdFrame, BBox) {
    let levels: Vec<u16> = (0..6).map(|_| rng.random_range(400..2000)).collect();
    let depth = (0..256)
        .map(|_| if rng.random_bool(0.15) { 0 } else { levels[rng.random_range(0..levels.len())] + rng.random_range(0..3) })
        .collect();
    let (x0, y0) = (rng.random_range(0..16), rng.random_range(0..16));
    let (x1, y1) = (rng.random_range(x0..16), rng.random_range(y0..16));
    (RgbdFrame::new(16, 16, depth).unwrap(), BBox::new(x0, y0, x1, y1).unwrap())
}

/// Number of errors strictly below each threshold, by direct counting.
pub fn count_below(errors: &[f64], thresholds: &[f64]) -> Vec<usize> {
    thresholds.iter().map(|t| errors.iter().filter(|&&e| e < *t).count()).collect()
}

/// Share of frames whose misclassified share of non-background truth is at
/// most each threshold, by direct counting.
pub fn seg_fraction_oracle(pred: &[Vec<u8>], truth: &[Vec<u8>], thresholds: &[f64]) -> Vec<f64> {
    let errors: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let mut wrong = 0;
            let mut total = 0;
            for i in 0..t.len() {
                if t[i] != 0 {
                    total += 1;
                    if p[i] != t[i] {
                        wrong += 1;
                    }
                }
            }
            if total == 0 { 0.0 } else { wrong as f64 / total as f64 }
        })
        .collect();
    thresholds
        .iter()
        .map(|t| errors.iter().filter(|&&e| e <= *t).count() as f64 / errors.len() as f64)
        .collect()
}

/// Width 1/16 on 32x32 with the full stage layout.
pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec::default().with_width(WidthMultiplier::new(1, 16).unwrap()).with_input(32, 32)
}

/// A random batch with random labels for both branches.
pub fn random_batch(spec: &NetworkSpec, batch: usize, seed: u64) -> (Tensor4, Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.input_size;
    let x = Tensor4::random_uniform(Shape4::new(batch, spec.input_channels, h, w), 0.0, 1.0, &mut rng);
    let n = batch * h * w;
    let c = spec.classes_per_decoder as u8;
    let comp = (0..n).map(|_| rng.random_range(0..c)).collect();
    let tips = (0..n).map(|_| rng.random_range(0..c)).collect();
    (x, comp, tips)
}

/// Gradients of the two-branch loss, optionally zeroing one branch's
/// upstream gradient.
pub fn branch_gradients(net: &mut Network, x: &Tensor4, comp: &[u8], tips: &[u8], keep: [bool; 2]) -> Gradients {
    let out = net.forward_train(x).unwrap();
    let mut grad = multitask_loss(&out, comp, tips).unwrap().grad;
    if !keep[0] {
        grad.components.data_mut().fill(0.0);
    }
    if !keep[1] {
        grad.fingertips.data_mut().fill(0.0);
    }
    net.backward(&grad).unwrap()
}

pub fn slices(maps: &[Vec<u8>]) -> Vec<&[u8]> {
    maps.iter().map(Vec::as_slice).collect()
}

/// One random convolution problem: input, weights, bias, stride, padding.
pub struct ConvCase {
    pub x: Tensor4,
    pub w: Tensor4,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

/// n, c ≤ 4; h, w ≤ 12; k in {1, 3, 5} where it fits; stride 1 or 2.
pub fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    let n = rng.random_range(1..=4);
    let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let pad = rng.random_range(0..=2);
    let ks: Vec<usize> = [1usize, 3, 5].into_iter().filter(|&k| k <= h.min(w) + 2 * pad).collect();
    let k = ks[rng.random_range(0..ks.len())];
    ConvCase {
        stride: rng.random_range(1..=2),
        pad,
        x: Tensor4::random_uniform(Shape4::new(n, cin, h, w), -1.0, 1.0, rng),
        w: Tensor4::random_uniform(Shape4::new(cout, cin, k, k), -1.0, 1.0, rng),
        bias: (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Largest elementwise gap between the fast convolution and the naive oracle.
pub fn conv_oracle_gap(c: &ConvCase) -> f32 {
    let want = naive_conv(&c.x, &c.w, &c.bias, c.stride, c.pad);
    let got = handseg::kernels::conv2d_forward(&c.x, &c.w, &c.bias, c.stride, c.pad).unwrap();
    assert_eq!(got.shape(), want.shape());
    got.max_abs_diff(&want)
}
