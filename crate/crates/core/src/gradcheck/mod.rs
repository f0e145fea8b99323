//! Central-difference gradient checks for every layer and for a small
//! end-to-end network.
//!
//! Each case defines a scalar objective `L` over named input groups. For
//! layers producing a tensor, `L = Σ out · r` with a fixed random `r`, so the
//! analytic gradient is the layer's f32 backward pass fed with `r`.
//!
//! The numeric side perturbs one element at a time. With
//! [`Precision::Shadow64`] the objective is re-evaluated by an independent
//! f64 implementation of the forward ops at step 1e-6; with
//! [`Precision::F32`] the f32 kernels themselves are re-run at step 1e-3,
//! where rounding noise in the outputs limits the attainable agreement to
//! roughly 1e-2. Coordinates whose perturbation flips a ReLU or a pooling
//! argmax are skipped, since the objective has a kink there.

mod shadow;

use crate::error::{Error, Result};
use crate::kernels::*;
use crate::network::{multitask_loss, Fnv, Network, NetworkSpec, WidthMultiplier};
use crate::tensor::{Shape4, Tensor4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadow::{Pins, T64};

/// Relative error is `|a − n| / max(|a|, |n|, FLOOR_FRACTION · scale)`, with
/// `scale` the largest analytic gradient magnitude in the case. f32 rounding
/// in a backward pass is proportional to the magnitude of the terms summed,
/// not to the result, so entries far below the case scale (or exactly zero,
/// like a conv bias feeding batch norm) are judged against the floor.
pub const FLOOR_FRACTION: f64 = 1e-2;

/// Pass threshold on the worst relative error of a case.
pub const TOLERANCE: f64 = 1e-3;

/// Seeds used by the standard suite.
pub const SEEDS: [u64; 3] = [1, 42, 1234];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Numeric derivative from the f64 shadow forward, step 1e-6.
    #[default]
    Shadow64,
    /// Numeric derivative from the f32 kernels, step 1e-3.
    F32,
}

impl Precision {
    pub fn step(self) -> f64 {
        match self {
            Precision::Shadow64 => 1e-6,
            Precision::F32 => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerCase {
    /// 3x3 convolution with the given stride and padding.
    Conv {
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        pad: usize,
        zero_input: bool,
    },
    /// 1x1 convolution, i.e. a per-pixel fully connected layer.
    Linear { batch: usize, in_features: usize, out_features: usize, size: usize },
    BatchNorm { batch: usize, channels: usize, size: usize },
    Relu { batch: usize, channels: usize, size: usize },
    Softmax { batch: usize, classes: usize, size: usize },
    SoftmaxCrossEntropy { batch: usize, classes: usize, size: usize },
    MaxPool { batch: usize, channels: usize, size: usize },
    MaxUnpool { batch: usize, channels: usize, size: usize },
    /// Conv followed by batch norm and ReLU, as used throughout the network.
    ConvBnRelu { batch: usize, in_channels: usize, out_channels: usize, size: usize },
    /// Full two-branch network with the summed cross-entropy loss; at most
    /// `samples` coordinates are checked per parameter tensor.
    Network { spec: NetworkSpec, batch: usize, samples: usize },
}

impl LayerCase {
    pub fn name(&self) -> String {
        match self {
            LayerCase::Conv { stride, pad, zero_input, .. } => {
                format!("conv3x3_s{stride}_p{pad}{}", if *zero_input { "_zero_input" } else { "" })
            }
            LayerCase::Linear { .. } => "linear".into(),
            LayerCase::BatchNorm { .. } => "batchnorm".into(),
            LayerCase::Relu { .. } => "relu".into(),
            LayerCase::Softmax { .. } => "softmax".into(),
            LayerCase::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy".into(),
            LayerCase::MaxPool { .. } => "maxpool".into(),
            LayerCase::MaxUnpool { .. } => "maxunpool".into(),
            LayerCase::ConvBnRelu { .. } => "conv_bn_relu".into(),
            LayerCase::Network { .. } => "network".into(),
        }
    }
}

/// Width 1/16 on 32x32 input: the smallest network that keeps every stage.
pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec::default()
        .with_width(WidthMultiplier::new(1, 16).expect("valid"))
        .with_input(32, 32)
}

/// The fixed list of cases covering every layer type plus the tiny network.
pub fn standard_cases() -> Vec<LayerCase> {
    vec![
        LayerCase::Linear { batch: 2, in_features: 5, out_features: 4, size: 3 },
        LayerCase::Conv { batch: 2, in_channels: 3, out_channels: 4, size: 6, stride: 1, pad: 1, zero_input: false },
        LayerCase::Conv { batch: 2, in_channels: 2, out_channels: 3, size: 7, stride: 2, pad: 1, zero_input: false },
        LayerCase::Conv { batch: 1, in_channels: 2, out_channels: 2, size: 5, stride: 1, pad: 0, zero_input: false },
        LayerCase::Conv { batch: 1, in_channels: 2, out_channels: 3, size: 5, stride: 1, pad: 1, zero_input: true },
        LayerCase::BatchNorm { batch: 3, channels: 4, size: 4 },
        LayerCase::Relu { batch: 2, channels: 3, size: 4 },
        LayerCase::Softmax { batch: 2, classes: 7, size: 3 },
        LayerCase::SoftmaxCrossEntropy { batch: 2, classes: 7, size: 4 },
        LayerCase::MaxPool { batch: 2, channels: 3, size: 6 },
        LayerCase::MaxUnpool { batch: 2, channels: 3, size: 6 },
        LayerCase::ConvBnRelu { batch: 2, in_channels: 3, out_channels: 4, size: 6 },
        LayerCase::Network { spec: tiny_spec(), batch: 2, samples: 6 },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Largest `|a − n|` divided by the case's gradient scale.
    pub max_scaled_abs_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub case: String,
    pub seed: u64,
    pub precision: Precision,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked() > 0 && self.max_rel_error() <= tolerance
    }
}

/// Objective value plus a hash of its piecewise-linear state.
struct Probe {
    loss: f64,
    signature: u64,
}

trait Objective {
    fn eval(&mut self) -> Result<Probe>;
    fn get(&mut self, group: usize, index: usize) -> f64;
    /// Store `v` at the objective's precision; returns the value stored.
    fn set(&mut self, group: usize, index: usize, v: f64) -> f64;
}

struct Buffers32<F> {
    vars: Vec<Vec<f32>>,
    f: F,
}

impl<F: FnMut(&[Vec<f32>]) -> Result<Probe>> Objective for Buffers32<F> {
    fn eval(&mut self) -> Result<Probe> {
        (self.f)(&self.vars)
    }

    fn get(&mut self, group: usize, index: usize) -> f64 {
        self.vars[group][index] as f64
    }

    fn set(&mut self, group: usize, index: usize, v: f64) -> f64 {
        self.vars[group][index] = v as f32;
        v as f32 as f64
    }
}

struct Buffers64<F> {
    vars: Vec<Vec<f64>>,
    f: F,
}

impl<F: FnMut(&[Vec<f64>]) -> Probe> Objective for Buffers64<F> {
    fn eval(&mut self) -> Result<Probe> {
        Ok((self.f)(&self.vars))
    }

    fn get(&mut self, group: usize, index: usize) -> f64 {
        self.vars[group][index]
    }

    fn set(&mut self, group: usize, index: usize, v: f64) -> f64 {
        self.vars[group][index] = v;
        v
    }
}

/// f32 objective over a live network; group `p` is parameter tensor `p`,
/// the last group is the input.
struct NetworkObjective {
    net: Network,
    input: Tensor4,
    comp: Vec<u8>,
    tips: Vec<u8>,
}

impl NetworkObjective {
    fn slot(&mut self, group: usize) -> &mut [f32] {
        let params = self.net.parameters_mut();
        if group == params.len() {
            drop(params);
            return self.input.data_mut();
        }
        params.into_iter().nth(group).expect("group maps to a parameter").1
    }
}

impl Objective for NetworkObjective {
    fn eval(&mut self) -> Result<Probe> {
        let out = self.net.forward_train(&self.input)?;
        let loss = multitask_loss(&out, &self.comp, &self.tips)?;
        Ok(Probe {
            loss: loss.total,
            signature: self.net.activation_state().expect("forward ran").signature(),
        })
    }

    fn get(&mut self, group: usize, index: usize) -> f64 {
        self.slot(group)[index] as f64
    }

    fn set(&mut self, group: usize, index: usize, v: f64) -> f64 {
        self.slot(group)[index] = v as f32;
        v as f32 as f64
    }
}

struct Group {
    name: String,
    analytic: Vec<f32>,
    coords: Vec<usize>,
}

fn all_coords(groups: Vec<(&str, Vec<f32>)>) -> Vec<Group> {
    groups
        .into_iter()
        .map(|(name, analytic)| Group {
            coords: (0..analytic.len()).collect(),
            name: name.into(),
            analytic,
        })
        .collect()
}

fn run_checks(obj: &mut dyn Objective, groups: &[Group], step: f64) -> Result<Vec<GroupReport>> {
    let base = obj.eval()?;
    let scale = groups
        .iter()
        .flat_map(|g| g.analytic.iter())
        .fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let floor = (FLOOR_FRACTION * scale).max(f64::MIN_POSITIVE);
    let mut reports = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let mut rep = GroupReport {
            name: group.name.clone(),
            max_rel_error: 0.0,
            max_scaled_abs_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for &i in &group.coords {
            let orig = obj.get(gi, i);
            let plus = obj.set(gi, i, orig + step);
            let up = obj.eval()?;
            let minus = obj.set(gi, i, orig - step);
            let down = obj.eval()?;
            obj.set(gi, i, orig);
            if up.signature != base.signature || down.signature != base.signature {
                rep.skipped += 1;
                continue;
            }
            let numeric = (up.loss - down.loss) / (plus - minus);
            let analytic = group.analytic[i] as f64;
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::NonFinite(format!("{} element {i}", group.name)));
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            rep.max_rel_error = rep.max_rel_error.max(rel);
            rep.max_scaled_abs_error = rep.max_scaled_abs_error.max((analytic - numeric).abs() / scale.max(f64::MIN_POSITIVE));
            rep.checked += 1;
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Check `groups` against whichever objective `precision` selects.
fn run_case<F, G>(precision: Precision, vars: Vec<Vec<f32>>, groups: &[Group], f32_obj: F, f64_obj: G) -> Result<Vec<GroupReport>>
where
    F: FnMut(&[Vec<f32>]) -> Result<Probe>,
    G: FnMut(&[Vec<f64>]) -> Probe,
{
    let step = precision.step();
    match precision {
        Precision::F32 => run_checks(&mut Buffers32 { vars, f: f32_obj }, groups, step),
        Precision::Shadow64 => {
            let vars = vars.iter().map(|v| v.iter().map(|x| *x as f64).collect()).collect();
            run_checks(&mut Buffers64 { vars, f: f64_obj }, groups, step)
        }
    }
}

fn dot(a: &Tensor4, r: &Tensor4) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn mask_signature(t: &Tensor4) -> u64 {
    let mut h = Fnv::default();
    t.data().iter().for_each(|v| h.bytes(&[(*v > 0.0) as u8]));
    h.0
}

fn tensor(shape: Shape4, data: &[f32]) -> Tensor4 {
    Tensor4::from_vec(shape, data.to_vec()).expect("buffer sized for shape")
}

fn t64(shape: Shape4, data: &[f64]) -> T64 {
    T64::new(shape, data.to_vec())
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

struct ConvCase {
    batch: usize,
    cin: usize,
    cout: usize,
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
    zero: bool,
}

fn check_conv(rng: &mut ChaCha8Rng, pr: Precision, c: ConvCase) -> Result<Vec<GroupReport>> {
    let (stride, pad) = (c.stride, c.pad);
    let xs = Shape4::new(c.batch, c.cin, c.size, c.size);
    let ws = Shape4::new(c.cout, c.cin, c.k, c.k);
    let x = if c.zero {
        Tensor4::zeros(xs)
    } else {
        Tensor4::random_uniform(xs, -1.0, 1.0, rng)
    };
    let w = Tensor4::random_uniform(ws, -1.0, 1.0, rng);
    let b = uniform_vec(rng, c.cout, -1.0, 1.0);
    let y = conv2d_forward(&x, &w, &b, stride, pad)?;
    let r = Tensor4::random_uniform(y.shape(), -1.0, 1.0, rng);
    let (gx, grads) = conv2d_backward(&x, &w, &r, stride, pad)?;
    let groups = all_coords(vec![("input", gx.into_vec()), ("weight", grads.weight.into_vec()), ("bias", grads.bias)]);
    run_case(
        pr,
        vec![x.into_vec(), w.into_vec(), b],
        &groups,
        |v| {
            let y = conv2d_forward(&tensor(xs, &v[0]), &tensor(ws, &v[1]), &v[2], stride, pad)?;
            Ok(Probe { loss: dot(&y, &r), signature: 0 })
        },
        |v| {
            let y = shadow::conv(&t64(xs, &v[0]), &t64(ws, &v[1]), &v[2], stride, pad);
            Probe { loss: shadow::dot(&y, r.data()), signature: 0 }
        },
    )
}

fn check_batchnorm(rng: &mut ChaCha8Rng, pr: Precision, s: Shape4) -> Result<Vec<GroupReport>> {
    let c = s.c;
    let x = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let gamma = uniform_vec(rng, c, 0.5, 1.0);
    let beta = uniform_vec(rng, c, -1.0, 1.0);
    let mut running = RunningStats::new(c);
    let (y, cache) = batchnorm_train(&x, &gamma, &beta, BN_EPS, BN_MOMENTUM, &mut running)?;
    let r = Tensor4::random_uniform(y.shape(), -1.0, 1.0, rng);
    let (gx, g) = batchnorm_backward(&r, &gamma, &cache)?;
    let groups = all_coords(vec![("input", gx.into_vec()), ("gamma", g.gamma), ("beta", g.beta)]);
    run_case(
        pr,
        vec![x.into_vec(), gamma, beta],
        &groups,
        |v| {
            let mut running = RunningStats::new(c);
            let (y, _) = batchnorm_train(&tensor(s, &v[0]), &v[1], &v[2], BN_EPS, BN_MOMENTUM, &mut running)?;
            Ok(Probe { loss: dot(&y, &r), signature: 0 })
        },
        |v| {
            let y = shadow::batchnorm(&t64(s, &v[0]), &v[1], &v[2]);
            Probe { loss: shadow::dot(&y, r.data()), signature: 0 }
        },
    )
}

fn check_relu(rng: &mut ChaCha8Rng, pr: Precision, s: Shape4) -> Result<Vec<GroupReport>> {
    let x = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let r = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let gx = relu_backward(&x, &r)?;
    let groups = all_coords(vec![("input", gx.into_vec())]);
    run_case(
        pr,
        vec![x.into_vec()],
        &groups,
        |v| {
            let x = tensor(s, &v[0]);
            Ok(Probe {
                loss: dot(&relu_forward(&x), &r),
                signature: mask_signature(&x),
            })
        },
        |v| {
            let mut h = Fnv::default();
            let y = shadow::relu(&t64(s, &v[0]), &mut h);
            Probe {
                loss: shadow::dot(&y, r.data()),
                signature: h.0,
            }
        },
    )
}

fn check_softmax(rng: &mut ChaCha8Rng, pr: Precision, s: Shape4) -> Result<Vec<GroupReport>> {
    let x = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let r = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let gx = softmax_backward(&softmax_channelwise(&x), &r)?;
    let groups = all_coords(vec![("logits", gx.into_vec())]);
    run_case(
        pr,
        vec![x.into_vec()],
        &groups,
        |v| {
            Ok(Probe {
                loss: dot(&softmax_channelwise(&tensor(s, &v[0])), &r),
                signature: 0,
            })
        },
        |v| Probe {
            loss: shadow::dot(&shadow::softmax(&t64(s, &v[0])), r.data()),
            signature: 0,
        },
    )
}

/// Checks both the fused logit gradient and the probability gradient chained
/// through the softmax backward pass; the two groups perturb separate copies
/// of the logits and the objective is the sum of both losses.
fn check_softmax_ce(rng: &mut ChaCha8Rng, pr: Precision, s: Shape4) -> Result<Vec<GroupReport>> {
    let x = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let labels: Vec<u8> = (0..s.n * s.plane()).map(|_| rng.random_range(0..s.c as u8)).collect();
    let (_, probs, fused) = softmax_cross_entropy(&x, &labels, None)?;
    let (_, gp) = cross_entropy_loss(&probs, &labels, None)?;
    let chained = softmax_backward(&probs, &gp)?;
    let groups = all_coords(vec![("logits", fused.into_vec()), ("logits_chained", chained.into_vec())]);
    run_case(
        pr,
        vec![x.data().to_vec(), x.into_vec()],
        &groups,
        |v| {
            let (a, _, _) = softmax_cross_entropy(&tensor(s, &v[0]), &labels, None)?;
            let (b, _) = cross_entropy_loss(&softmax_channelwise(&tensor(s, &v[1])), &labels, None)?;
            Ok(Probe { loss: a + b, signature: 0 })
        },
        |v| Probe {
            loss: shadow::cross_entropy(&shadow::softmax(&t64(s, &v[0])), &labels)
                + shadow::cross_entropy(&shadow::softmax(&t64(s, &v[1])), &labels),
            signature: 0,
        },
    )
}

fn check_maxpool(rng: &mut ChaCha8Rng, pr: Precision, s: Shape4) -> Result<Vec<GroupReport>> {
    let x = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let (y, idx) = maxpool2x2_forward(&x)?;
    let r = Tensor4::random_uniform(y.shape(), -1.0, 1.0, rng);
    let gx = maxpool2x2_backward(&r, &idx)?;
    let groups = all_coords(vec![("input", gx.into_vec())]);
    run_case(
        pr,
        vec![x.into_vec()],
        &groups,
        |v| {
            let (y, idx) = maxpool2x2_forward(&tensor(s, &v[0]))?;
            let mut h = Fnv::default();
            h.bytes(idx.offsets());
            Ok(Probe { loss: dot(&y, &r), signature: h.0 })
        },
        |v| {
            let mut h = Fnv::default();
            let (y, _) = shadow::maxpool(&t64(s, &v[0]), &mut h);
            Probe {
                loss: shadow::dot(&y, r.data()),
                signature: h.0,
            }
        },
    )
}

fn check_maxunpool(rng: &mut ChaCha8Rng, pr: Precision, s: Shape4) -> Result<Vec<GroupReport>> {
    let source = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let (pooled, idx) = maxpool2x2_forward(&source)?;
    let ps = pooled.shape();
    let x = Tensor4::random_uniform(ps, -1.0, 1.0, rng);
    let r = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let gx = maxunpool2x2_backward(&r, &idx)?;
    let groups = all_coords(vec![("input", gx.into_vec())]);
    run_case(
        pr,
        vec![x.into_vec()],
        &groups,
        |v| {
            let y = maxunpool2x2(&tensor(ps, &v[0]), &idx, s)?;
            Ok(Probe { loss: dot(&y, &r), signature: 0 })
        },
        |v| Probe {
            loss: shadow::dot(&shadow::unpool(&t64(ps, &v[0]), idx.offsets(), s), r.data()),
            signature: 0,
        },
    )
}

fn conv_bn_relu(x: &Tensor4, w: &Tensor4, b: &[f32], gamma: &[f32], beta: &[f32]) -> Result<(Tensor4, Tensor4, BatchNormCache)> {
    let y = conv2d_forward(x, w, b, 1, 1)?;
    let mut running = RunningStats::new(b.len());
    let (z, cache) = batchnorm_train(&y, gamma, beta, BN_EPS, BN_MOMENTUM, &mut running)?;
    Ok((relu_forward(&z), z, cache))
}

fn check_conv_bn_relu(rng: &mut ChaCha8Rng, pr: Precision, n: usize, cin: usize, cout: usize, size: usize) -> Result<Vec<GroupReport>> {
    let xs = Shape4::new(n, cin, size, size);
    let ws = Shape4::new(cout, cin, 3, 3);
    let x = Tensor4::random_uniform(xs, -1.0, 1.0, rng);
    let w = Tensor4::random_uniform(ws, -1.0, 1.0, rng);
    let b = uniform_vec(rng, cout, -1.0, 1.0);
    let gamma = uniform_vec(rng, cout, 0.5, 1.0);
    let beta = uniform_vec(rng, cout, -1.0, 1.0);
    let (out, z, cache) = conv_bn_relu(&x, &w, &b, &gamma, &beta)?;
    let r = Tensor4::random_uniform(out.shape(), -1.0, 1.0, rng);
    let gz = relu_backward(&z, &r)?;
    let (gy, gbn) = batchnorm_backward(&gz, &gamma, &cache)?;
    let (gx, gc) = conv2d_backward(&x, &w, &gy, 1, 1)?;
    let groups = all_coords(vec![
        ("input", gx.into_vec()),
        ("weight", gc.weight.into_vec()),
        ("bias", gc.bias),
        ("gamma", gbn.gamma),
        ("beta", gbn.beta),
    ]);
    run_case(
        pr,
        vec![x.into_vec(), w.into_vec(), b, gamma, beta],
        &groups,
        |v| {
            let (out, z, _) = conv_bn_relu(&tensor(xs, &v[0]), &tensor(ws, &v[1]), &v[2], &v[3], &v[4])?;
            Ok(Probe {
                loss: dot(&out, &r),
                signature: mask_signature(&z),
            })
        },
        |v| {
            let y = shadow::conv(&t64(xs, &v[0]), &t64(ws, &v[1]), &v[2], 1, 1);
            let mut h = Fnv::default();
            let out = shadow::relu(&shadow::batchnorm(&y, &v[3], &v[4]), &mut h);
            Probe {
                loss: shadow::dot(&out, r.data()),
                signature: h.0,
            }
        },
    )
}

fn check_network(rng: &mut ChaCha8Rng, pr: Precision, seed: u64, spec: &NetworkSpec, batch: usize, samples: usize) -> Result<Vec<GroupReport>> {
    let (h, w) = spec.input_size;
    let s = Shape4::new(batch, spec.input_channels, h, w);
    let input = Tensor4::random_uniform(s, -1.0, 1.0, rng);
    let classes = spec.classes_per_decoder as u8;
    let comp: Vec<u8> = (0..batch * h * w).map(|_| rng.random_range(0..classes)).collect();
    let tips: Vec<u8> = (0..batch * h * w).map(|_| rng.random_range(0..classes)).collect();
    let mut net = Network::build(spec.clone(), seed)?;
    let out = net.forward_train(&input)?;
    let loss = multitask_loss(&out, &comp, &tips)?;
    let (grads, input_grad) = net.backward_full(&loss.grad)?;

    let mut groups = Vec::new();
    let entries = grads.entries.into_iter().chain([("input".to_string(), input_grad.into_vec())]);
    for (name, analytic) in entries {
        let len = analytic.len();
        let coords = if len <= samples {
            (0..len).collect()
        } else {
            sample(rng, len, samples).into_vec()
        };
        groups.push(Group { name, analytic, coords });
    }
    match pr {
        Precision::F32 => {
            let mut obj = NetworkObjective { net, input, comp, tips };
            run_checks(&mut obj, &groups, pr.step())
        }
        Precision::Shadow64 => {
            let vars: Vec<Vec<f64>> = net
                .parameters()
                .into_iter()
                .map(|(_, p)| p.to_vec())
                .chain([input.into_vec()])
                .map(|v| v.into_iter().map(f64::from).collect())
                .collect();
            let reference = net.activation_state().expect("forward ran");
            let eval = |v: &[Vec<f64>], pins: &Pins| {
                let (params, x) = v.split_at(v.len() - 1);
                shadow::network_loss(spec, params, &t64(s, &x[0]), [&comp, &tips], pins)
            };
            let (_, natural) = eval(&vars, &Pins::default());
            let pins = Pins::from_diff(&reference, &natural);
            let f = |v: &[Vec<f64>]| {
                let (loss, state) = eval(v, &pins);
                Probe {
                    loss,
                    signature: state.signature(),
                }
            };
            run_checks(&mut Buffers64 { vars, f }, &groups, pr.step())
        }
    }
}

/// Run one case at the default precision with all random data drawn from `seed`.
pub fn gradcheck(case: &LayerCase, seed: u64) -> Result<GradReport> {
    gradcheck_with(case, seed, Precision::default())
}

pub fn gradcheck_with(case: &LayerCase, seed: u64, precision: Precision) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rng, pr) = (&mut rng, precision);
    let sq = |n, c, size| Shape4::new(n, c, size, size);
    let groups = match *case {
        LayerCase::Conv { batch, in_channels, out_channels, size, stride, pad, zero_input } => check_conv(
            rng,
            pr,
            ConvCase { batch, cin: in_channels, cout: out_channels, size, k: 3, stride, pad, zero: zero_input },
        )?,
        LayerCase::Linear { batch, in_features, out_features, size } => check_conv(
            rng,
            pr,
            ConvCase { batch, cin: in_features, cout: out_features, size, k: 1, stride: 1, pad: 0, zero: false },
        )?,
        LayerCase::BatchNorm { batch, channels, size } => check_batchnorm(rng, pr, sq(batch, channels, size))?,
        LayerCase::Relu { batch, channels, size } => check_relu(rng, pr, sq(batch, channels, size))?,
        LayerCase::Softmax { batch, classes, size } => check_softmax(rng, pr, sq(batch, classes, size))?,
        LayerCase::SoftmaxCrossEntropy { batch, classes, size } => check_softmax_ce(rng, pr, sq(batch, classes, size))?,
        LayerCase::MaxPool { batch, channels, size } => check_maxpool(rng, pr, sq(batch, channels, size))?,
        LayerCase::MaxUnpool { batch, channels, size } => check_maxunpool(rng, pr, sq(batch, channels, size))?,
        LayerCase::ConvBnRelu { batch, in_channels, out_channels, size } => {
            check_conv_bn_relu(rng, pr, batch, in_channels, out_channels, size)?
        }
        LayerCase::Network { ref spec, batch, samples } => check_network(rng, pr, seed, spec, batch, samples)?,
    };
    Ok(GradReport {
        case: case.name(),
        seed,
        precision,
        groups,
    })
}
