//! f64 re-implementation of the forward ops, used only as the numeric side
//! of gradient checks. Kept deliberately plain.

use crate::network::{ActivationState, Fnv, NetworkSpec, Part};
use crate::tensor::Shape4;

#[derive(Debug, Clone)]
pub(super) struct T64 {
    pub shape: Shape4,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        T64 { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        T64::new(shape, vec![0.0; shape.len()])
    }
}

pub(super) fn dot(a: &T64, r: &[f32]) -> f64 {
    a.data.iter().zip(r).map(|(x, y)| x * *y as f64).sum()
}

pub(super) fn conv(x: &T64, w: &T64, b: &[f64], stride: usize, pad: usize) -> T64 {
    let (s, ws) = (x.shape, w.shape);
    let k = ws.h;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let p = oh * ow;
    let rows = s.c * k * k;
    let mut out = T64::zeros(Shape4::new(s.n, ws.n, oh, ow));
    let mut col = vec![0.0f64; rows * p];
    for n in 0..s.n {
        let item = &x.data[n * s.item()..(n + 1) * s.item()];
        for ci in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy as usize >= s.h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &item[ci * s.plane() + iy as usize * s.w..][..s.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix as usize >= s.w { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
        let dst = &mut out.data[n * ws.n * p..(n + 1) * ws.n * p];
        for (co, plane) in dst.chunks_mut(p).enumerate() {
            plane.fill(b[co]);
        }
        // SAFETY: all three buffers hold exactly the m×k, k×n and m×n
        // row-major matrices described by the dimensions and strides.
        unsafe {
            matrixmultiply::dgemm(
                ws.n,
                rows,
                p,
                1.0,
                w.data.as_ptr(),
                rows as isize,
                1,
                col.as_ptr(),
                p as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

/// Training-mode batch norm with the same epsilon as the f32 kernel.
pub(super) fn batchnorm(x: &T64, gamma: &[f64], beta: &[f64]) -> T64 {
    let s = x.shape;
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let eps = crate::kernels::BN_EPS as f64;
    let mut out = x.clone();
    for c in 0..s.c {
        let idx = |n: usize| n * s.item() + c * plane;
        let mean = (0..s.n).flat_map(|n| &x.data[idx(n)..idx(n) + plane]).sum::<f64>() / count;
        let var = (0..s.n)
            .flat_map(|n| &x.data[idx(n)..idx(n) + plane])
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / count;
        let inv = 1.0 / (var + eps).sqrt();
        for n in 0..s.n {
            for v in &mut out.data[idx(n)..idx(n) + plane] {
                *v = gamma[c] * (*v - mean) * inv + beta[c];
            }
        }
    }
    out
}

pub(super) fn relu(x: &T64, h: &mut Fnv) -> T64 {
    let (out, mask) = relu_pinned(x, &[]);
    mask.iter().for_each(|b| h.bytes(&[*b as u8]));
    out
}

/// ReLU whose on/off decision is forced at the `(element, on)` pins.
fn relu_pinned(x: &T64, pins: &[(usize, bool)]) -> (T64, Vec<bool>) {
    let mut mask: Vec<bool> = x.data.iter().map(|v| *v > 0.0).collect();
    for &(i, on) in pins {
        mask[i] = on;
    }
    let data = x.data.iter().zip(&mask).map(|(v, on)| if *on { *v } else { 0.0 }).collect();
    (T64::new(x.shape, data), mask)
}

/// 2x2 max pooling; ties keep the smallest offset.
pub(super) fn maxpool(x: &T64, h: &mut Fnv) -> (T64, Vec<u8>) {
    let (out, idx) = maxpool_pinned(x, &[]);
    h.bytes(&idx);
    (out, idx)
}

fn maxpool_pinned(x: &T64, pins: &[(usize, u8)]) -> (T64, Vec<u8>) {
    let s = x.shape;
    let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = T64::zeros(os);
    let mut idx = vec![0u8; os.len()];
    for nc in 0..s.n * s.c {
        for oy in 0..os.h {
            for ox in 0..os.w {
                let at = |o: usize| x.data[nc * s.plane() + (2 * oy + o / 2) * s.w + 2 * ox + o % 2];
                let mut best = 0;
                for o in 1..4 {
                    if at(o) > at(best) {
                        best = o;
                    }
                }
                let i = nc * os.plane() + oy * os.w + ox;
                out.data[i] = at(best);
                idx[i] = best as u8;
            }
        }
    }
    for &(i, o) in pins {
        let (nc, p) = (i / os.plane(), i % os.plane());
        let (oy, ox) = (p / os.w, p % os.w);
        idx[i] = o;
        out.data[i] = x.data[nc * s.plane() + (2 * oy + o as usize / 2) * s.w + 2 * ox + o as usize % 2];
    }
    (out, idx)
}

pub(super) fn unpool(x: &T64, idx: &[u8], out_shape: Shape4) -> T64 {
    let s = x.shape;
    let mut out = T64::zeros(out_shape);
    for nc in 0..s.n * s.c {
        for y in 0..s.h {
            for xx in 0..s.w {
                let i = nc * s.plane() + y * s.w + xx;
                let o = idx[i] as usize;
                out.data[nc * out_shape.plane() + (2 * y + o / 2) * out_shape.w + 2 * xx + o % 2] = x.data[i];
            }
        }
    }
    out
}

pub(super) fn softmax(x: &T64) -> T64 {
    let s = x.shape;
    let plane = s.plane();
    let mut out = x.clone();
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| n * s.item() + c * plane + p;
            let max = (0..s.c).map(|c| x.data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..s.c).map(|c| (x.data[at(c)] - max).exp()).sum();
            for c in 0..s.c {
                out.data[at(c)] = (x.data[at(c)] - max).exp() / sum;
            }
        }
    }
    out
}

/// Mean negative log-likelihood over all pixels.
pub(super) fn cross_entropy(probs: &T64, labels: &[u8]) -> f64 {
    let s = probs.shape;
    let plane = s.plane();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, l)| -probs.data[(i / plane) * s.item() + *l as usize * plane + i % plane].ln())
        .sum();
    total / labels.len() as f64
}

/// Discrete decisions forced onto the shadow network: `(block or stage,
/// element, decision)`. Used where the f32 forward lands on the other side of
/// a kink than f64 does, so both evaluate the same smooth piece.
#[derive(Debug, Clone, Default)]
pub(super) struct Pins {
    pub relus: Vec<(usize, usize, bool)>,
    pub pools: Vec<(usize, usize, u8)>,
}

impl Pins {
    /// Every element where `reference` and `natural` disagree, pinned to `reference`.
    pub fn from_diff(reference: &ActivationState, natural: &ActivationState) -> Self {
        let mut pins = Pins::default();
        for (b, (r, n)) in reference.relus.iter().zip(&natural.relus).enumerate() {
            pins.relus.extend(r.iter().zip(n).enumerate().filter(|(_, (a, b))| a != b).map(|(i, (a, _))| (b, i, *a)));
        }
        for (st, (r, n)) in reference.pools.iter().zip(&natural.pools).enumerate() {
            pins.pools.extend(r.iter().zip(n).enumerate().filter(|(_, (a, b))| a != b).map(|(i, (a, _))| (st, i, *a)));
        }
        pins
    }

    fn relus_of(&self, block: usize) -> Vec<(usize, bool)> {
        self.relus.iter().filter(|p| p.0 == block).map(|p| (p.1, p.2)).collect()
    }

    fn pools_of(&self, stage: usize) -> Vec<(usize, u8)> {
        self.pools.iter().filter(|p| p.0 == stage).map(|p| (p.1, p.2)).collect()
    }
}

/// Summed two-branch loss of the network whose parameters are given in
/// parameter order, with the activation state it passed through.
pub(super) fn network_loss(spec: &NetworkSpec, params: &[Vec<f64>], input: &T64, labels: [&[u8]; 2], pins: &Pins) -> (f64, ActivationState) {
    let mut state = ActivationState::default();
    let mut params = params.iter();
    let mut block = |x: &T64, normalized: bool, out_c: usize, in_c: usize, state: &mut ActivationState| {
        let w = T64::new(Shape4::new(out_c, in_c, 3, 3), params.next().expect("weight").clone());
        let b = params.next().expect("bias");
        let y = conv(x, &w, b, 1, 1);
        if !normalized {
            return y;
        }
        let gamma = params.next().expect("gamma");
        let beta = params.next().expect("beta");
        let (out, mask) = relu_pinned(&batchnorm(&y, gamma, beta), &pins.relus_of(state.relus.len()));
        state.relus.push(mask);
        out
    };
    let plan = spec.layers();
    let mut x = input.clone();
    let mut shapes = Vec::new();
    let mut enc = plan.iter().filter(|l| l.part == Part::Encoder).peekable();
    while let Some(l) = enc.next() {
        x = block(&x, l.normalized, l.out_channels, l.in_channels, &mut state);
        if enc.peek().is_none_or(|next| next.stage != l.stage) {
            shapes.push(x.shape);
            let (pooled, idx) = maxpool_pinned(&x, &pins.pools_of(state.pools.len()));
            state.pools.push(idx);
            x = pooled;
        }
    }
    let mut loss = 0.0;
    for (d, labels) in labels.iter().enumerate() {
        let mut y = x.clone();
        let mut current = None;
        for l in plan.iter().filter(|l| l.part == Part::Decoder(d)) {
            if current != Some(l.stage) {
                y = unpool(&y, &state.pools[l.stage].clone(), shapes[l.stage]);
                current = Some(l.stage);
            }
            y = block(&y, l.normalized, l.out_channels, l.in_channels, &mut state);
        }
        loss += cross_entropy(&softmax(&y), labels);
    }
    (loss, state)
}
