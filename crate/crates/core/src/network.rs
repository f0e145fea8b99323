//! Multi-task SegNet: one VGG-style encoder whose feature maps and pooling
//! indices feed two structurally identical, independently parameterized
//! decoders (hand components and fingertips).

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{expect_dim, Error, Result};
use crate::kernels::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, conv2d_backward, conv2d_forward, cross_entropy_from_probs,
    maxpool2x2_backward, maxpool2x2_forward, maxunpool2x2, maxunpool2x2_backward, relu_backward, relu_forward,
    softmax_channelwise, BatchNormCache, PoolIndices, RunningStats, BN_EPS, BN_MOMENTUM,
};
use crate::tensor::{Shape4, Tensor4};

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

/// VGG-16 convolutional layout: (convs per stage, channel width).
pub const VGG16_STAGES: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

/// Positive rational scaling applied to every channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

impl WidthMultiplier {
    pub const ONE: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidSpec(format!("width multiplier {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(WidthMultiplier { num: num / g, den: den / g })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    /// `ceil(width · num / den)`, at least 1.
    pub fn apply(&self, width: usize) -> usize {
        let scaled = (width as u64 * self.num as u64).div_ceil(self.den as u64);
        (scaled as usize).max(1)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    /// Accepts `p/q`, an integer, or a finite decimal such as `0.25`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("cannot parse width multiplier {s:?}"));
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            return WidthMultiplier::new(p.trim().parse().map_err(|_| bad())?, q.trim().parse().map_err(|_| bad())?);
        }
        match s.split_once('.') {
            None => WidthMultiplier::new(s.parse().map_err(|_| bad())?, 1),
            Some((int, frac)) => {
                if frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let den = 10u32.pow(frac.len() as u32);
                let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
                let frac: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
                WidthMultiplier::new(int * den + frac, den)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub convs: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_size: (usize, usize),
    pub input_channels: usize,
    /// Unscaled stage layout; `width_multiplier` is applied on top.
    pub encoder_stages: Vec<StageSpec>,
    pub decoder_count: usize,
    pub classes_per_decoder: usize,
    pub width_multiplier: WidthMultiplier,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_size: (96, 96),
            input_channels: 1,
            encoder_stages: VGG16_STAGES
                .iter()
                .map(|&(convs, width)| StageSpec { convs, width })
                .collect(),
            decoder_count: 2,
            classes_per_decoder: 7,
            width_multiplier: WidthMultiplier::ONE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder(usize),
}

/// One conv layer of the assembled network, with its trailing normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub part: Part,
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Conv followed by batch norm and ReLU; false only for each decoder's classifier.
    pub normalized: bool,
}

impl LayerPlan {
    pub fn weight_count(&self) -> usize {
        KERNEL * KERNEL * self.in_channels * self.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels + if self.normalized { 2 * self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub encoder: usize,
    /// Parameters of one decoder.
    pub decoder: usize,
    pub total_shared: usize,
    pub total_independent: usize,
    pub savings: usize,
}

impl NetworkSpec {
    pub fn with_width(mut self, multiplier: WidthMultiplier) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    /// Width 1/4, 32×32 input and the first four stages: small enough to
    /// train on one CPU core in minutes.
    pub fn desk_scale() -> Self {
        NetworkSpec::default()
            .with_width(WidthMultiplier::new(1, 4).expect("valid"))
            .with_input(32, 32)
            .with_stages(4)
    }

    /// Keep only the first `stages` encoder stages.
    pub fn with_stages(mut self, stages: usize) -> Self {
        self.encoder_stages.truncate(stages);
        self
    }

    pub fn conv_count(&self) -> usize {
        self.encoder_stages.iter().map(|s| s.convs).sum()
    }

    pub fn scaled_widths(&self) -> Vec<usize> {
        self.encoder_stages
            .iter()
            .map(|s| self.width_multiplier.apply(s.width))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.encoder_stages.is_empty() {
            return bad("at least one encoder stage is required".into());
        }
        if let Some(i) = self.encoder_stages.iter().position(|s| s.convs == 0 || s.width == 0) {
            return bad(format!("encoder stage {i} needs at least one conv of positive width"));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.decoder_count == 0 {
            return bad("decoder_count must be positive".into());
        }
        if self.classes_per_decoder < 2 || self.classes_per_decoder > 256 {
            return bad(format!("classes_per_decoder must be in 2..=256, got {}", self.classes_per_decoder));
        }
        let divisor = 1usize << self.encoder_stages.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
            return bad(format!("input size {h}x{w} is not divisible by {divisor}"));
        }
        Ok(())
    }

    /// Every conv layer in parameter order: encoder, then each decoder.
    pub fn layers(&self) -> Vec<LayerPlan> {
        let widths = self.scaled_widths();
        let mut plan = Vec::new();
        for (s, stage) in self.encoder_stages.iter().enumerate() {
            for j in 0..stage.convs {
                let in_c = match (s, j) {
                    (0, 0) => self.input_channels,
                    (_, 0) => widths[s - 1],
                    _ => widths[s],
                };
                plan.push(LayerPlan {
                    name: format!("encoder.stage{s}.conv{j}"),
                    part: Part::Encoder,
                    stage: s,
                    in_channels: in_c,
                    out_channels: widths[s],
                    normalized: true,
                });
            }
        }
        for d in 0..self.decoder_count {
            for (s, stage) in self.encoder_stages.iter().enumerate().rev() {
                for j in 0..stage.convs {
                    let last = j + 1 == stage.convs;
                    let out_c = match (last, s) {
                        (false, _) => widths[s],
                        (true, 0) => self.classes_per_decoder,
                        (true, _) => widths[s - 1],
                    };
                    plan.push(LayerPlan {
                        name: format!("decoder{d}.stage{s}.conv{j}"),
                        part: Part::Decoder(d),
                        stage: s,
                        in_channels: widths[s],
                        out_channels: out_c,
                        normalized: !(last && s == 0),
                    });
                }
            }
        }
        plan
    }

    pub fn count_params(&self) -> ParamCount {
        let layers = self.layers();
        let encoder = layers.iter().filter(|l| l.part == Part::Encoder).map(LayerPlan::param_count).sum();
        let decoder = layers
            .iter()
            .filter(|l| l.part == Part::Decoder(0))
            .map(LayerPlan::param_count)
            .sum();
        let total_shared = encoder + self.decoder_count * decoder;
        let total_independent = self.decoder_count * (encoder + decoder);
        ParamCount {
            encoder,
            decoder,
            total_shared,
            total_independent,
            savings: total_independent - total_shared,
        }
    }
}

/// Convenience wrapper for [`NetworkSpec::count_params`].
pub fn count_params(spec: &NetworkSpec) -> ParamCount {
    spec.count_params()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running: RunningStats,
}

/// 3x3 conv, optionally followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor4,
    pub bias: Vec<f32>,
    pub bn: Option<BatchNormLayer>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor4,
    bn: Option<BatchNormCache>,
    output: Tensor4,
}

struct BlockGrads {
    weight: Tensor4,
    bias: Vec<f32>,
    bn: Option<(Vec<f32>, Vec<f32>)>,
}

impl ConvBlock {
    fn init(plan: &LayerPlan, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (plan.in_channels * KERNEL * KERNEL) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        let shape = Shape4::new(plan.out_channels, plan.in_channels, KERNEL, KERNEL);
        let data = (0..shape.len()).map(|_| normal.sample(rng)).collect();
        let c = plan.out_channels;
        ConvBlock {
            weight: Tensor4::from_vec(shape, data).expect("shape matches"),
            bias: vec![0.0; c],
            bn: plan.normalized.then(|| BatchNormLayer {
                gamma: vec![1.0; c],
                beta: vec![0.0; c],
                running: RunningStats::new(c),
            }),
        }
    }

    fn forward_infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv2d_forward(x, &self.weight, &self.bias, 1, PAD)?;
        match &self.bn {
            None => Ok(y),
            Some(bn) => Ok(relu_forward(&batchnorm_infer(&y, &bn.gamma, &bn.beta, BN_EPS, &bn.running)?)),
        }
    }

    fn forward_train(&mut self, x: Tensor4) -> Result<(Tensor4, BlockCache)> {
        let y = conv2d_forward(&x, &self.weight, &self.bias, 1, PAD)?;
        let (out, bn_cache) = match &mut self.bn {
            None => (y, None),
            Some(bn) => {
                let (z, cache) = batchnorm_train(&y, &bn.gamma, &bn.beta, BN_EPS, BN_MOMENTUM, &mut bn.running)?;
                (relu_forward(&z), Some(cache))
            }
        };
        let cache = BlockCache {
            input: x,
            bn: bn_cache,
            output: out.clone(),
        };
        Ok((out, cache))
    }

    fn backward(&self, cache: &BlockCache, grad_out: &Tensor4) -> Result<(Tensor4, BlockGrads)> {
        let (g, bn) = match (&self.bn, &cache.bn) {
            (Some(layer), Some(bn_cache)) => {
                let g = relu_backward(&cache.output, grad_out)?;
                let (g, grads) = batchnorm_backward(&g, &layer.gamma, bn_cache)?;
                (g, Some((grads.gamma, grads.beta)))
            }
            _ => (grad_out.clone(), None),
        };
        let (grad_in, conv) = conv2d_backward(&cache.input, &self.weight, &g, 1, PAD)?;
        Ok((
            grad_in,
            BlockGrads {
                weight: conv.weight,
                bias: conv.bias,
                bn,
            },
        ))
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f32])) {
        f(format!("{prefix}.weight"), self.weight.data());
        f(format!("{prefix}.bias"), &self.bias);
        if let Some(bn) = &self.bn {
            f(format!("{prefix}.bn.gamma"), &bn.gamma);
            f(format!("{prefix}.bn.beta"), &bn.beta);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut [f32])) {
        f(format!("{prefix}.weight"), self.weight.data_mut());
        f(format!("{prefix}.bias"), &mut self.bias);
        if let Some(bn) = &mut self.bn {
            f(format!("{prefix}.bn.gamma"), &mut bn.gamma);
            f(format!("{prefix}.bn.beta"), &mut bn.beta);
        }
    }

    fn visit_state_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut [f32])) {
        let ConvBlock { weight, bias, bn } = self;
        f(format!("{prefix}.weight"), weight.data_mut());
        f(format!("{prefix}.bias"), bias);
        if let Some(BatchNormLayer { gamma, beta, running }) = bn {
            f(format!("{prefix}.bn.gamma"), gamma);
            f(format!("{prefix}.bn.beta"), beta);
            f(format!("{prefix}.bn.running_mean"), &mut running.mean);
            f(format!("{prefix}.bn.running_var"), &mut running.var);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f32])) {
        if let Some(bn) = &self.bn {
            f(format!("{prefix}.bn.running_mean"), &bn.running.mean);
            f(format!("{prefix}.bn.running_var"), &bn.running.var);
        }
    }
}

/// Per-pixel class probabilities of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    pub components: Tensor4,
    pub fingertips: Tensor4,
}

/// Upstream gradients with respect to each branch's pre-softmax logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGrad {
    pub components: Tensor4,
    pub fingertips: Tensor4,
}

/// Named gradient buffers in the same order as [`Network::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(String, Vec<f32>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a [f32])> + 'a {
        self.entries
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn slices(&self) -> Vec<&[f32]> {
        self.entries.iter().map(|(_, g)| g.as_slice()).collect()
    }
}

struct ForwardCache {
    encoder: Vec<Vec<BlockCache>>,
    pools: Vec<PoolIndices>,
    /// [decoder][stage, deepest first][block]
    decoders: Vec<Vec<Vec<BlockCache>>>,
}

pub struct Network {
    spec: NetworkSpec,
    encoder: Vec<Vec<ConvBlock>>,
    /// [decoder][stage, deepest first][block]
    decoders: Vec<Vec<Vec<ConvBlock>>>,
    encoder_passes: AtomicU64,
    cache: Option<ForwardCache>,
}

impl Clone for Network {
    /// Clones parameters and statistics; the forward cache is not carried over.
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            encoder_passes: AtomicU64::new(self.encoder_passes()),
            cache: None,
        }
    }
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("params", &self.count_parameters())
            .finish()
    }
}

impl Network {
    /// He-initialized network; identical seeds give bit-identical parameters.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.decoder_count != 2 {
            return Err(Error::InvalidSpec(format!(
                "the assembled network has exactly two decoders, spec asks for {}",
                spec.decoder_count
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = spec.layers();
        let mut layers = plan.iter();
        let encoder = spec
            .encoder_stages
            .iter()
            .map(|st| {
                (0..st.convs)
                    .map(|_| ConvBlock::init(layers.next().expect("planned"), &mut rng))
                    .collect()
            })
            .collect();
        let decoders = (0..spec.decoder_count)
            .map(|_| {
                spec.encoder_stages
                    .iter()
                    .rev()
                    .map(|st| {
                        (0..st.convs)
                            .map(|_| ConvBlock::init(layers.next().expect("planned"), &mut rng))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Network {
            spec,
            encoder,
            decoders,
            encoder_passes: AtomicU64::new(0),
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Number of encoder evaluations since construction.
    pub fn encoder_passes(&self) -> u64 {
        self.encoder_passes.load(Ordering::Relaxed)
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        const OP: &str = "Network::forward";
        let s = input.shape();
        expect_dim(OP, "input channels", self.spec.input_channels, s.c)?;
        expect_dim(OP, "input height", self.spec.input_size.0, s.h)?;
        expect_dim(OP, "input width", self.spec.input_size.1, s.w)?;
        if s.n == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    fn decoder_prefix(d: usize, stage: usize, j: usize) -> String {
        format!("decoder{d}.stage{stage}.conv{j}")
    }

    fn stage_count(&self) -> usize {
        self.encoder.len()
    }

    fn decoder_stage_index(&self, position: usize) -> usize {
        self.stage_count() - 1 - position
    }

    /// Inference-mode forward pass; batch norm uses running statistics.
    pub fn forward(&self, input: &Tensor4) -> Result<DualOutput> {
        let logits = self.forward_logits(input)?;
        Ok(DualOutput {
            components: softmax_channelwise(&logits[0]),
            fingertips: softmax_channelwise(&logits[1]),
        })
    }

    /// Inference-mode logits of every decoder.
    pub fn forward_logits(&self, input: &Tensor4) -> Result<Vec<Tensor4>> {
        self.check_input(input)?;
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut x = input.clone();
        let mut pools = Vec::with_capacity(self.stage_count());
        for stage in &self.encoder {
            for block in stage {
                x = block.forward_infer(&x)?;
            }
            let (pooled, idx) = maxpool2x2_forward(&x)?;
            pools.push(idx);
            x = pooled;
        }
        self.decoders
            .iter()
            .map(|decoder| {
                let mut y = x.clone();
                for (pos, stage) in decoder.iter().enumerate() {
                    let idx = &pools[self.decoder_stage_index(pos)];
                    y = maxunpool2x2(&y, idx, idx.input_shape())?;
                    for block in stage {
                        y = block.forward_infer(&y)?;
                    }
                }
                Ok(y)
            })
            .collect()
    }

    /// Training-mode forward pass; caches activations for [`Network::backward`]
    /// and updates batch-norm running statistics.
    pub fn forward_train(&mut self, input: &Tensor4) -> Result<DualOutput> {
        self.check_input(input)?;
        self.cache = None;
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut x = input.clone();
        let mut enc_cache = Vec::with_capacity(self.stage_count());
        let mut pools = Vec::with_capacity(self.stage_count());
        for stage in &mut self.encoder {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (y, c) = block.forward_train(x)?;
                caches.push(c);
                x = y;
            }
            let (pooled, idx) = maxpool2x2_forward(&x)?;
            enc_cache.push(caches);
            pools.push(idx);
            x = pooled;
        }
        let stages = self.encoder.len();
        let mut logits = Vec::with_capacity(self.decoders.len());
        let mut dec_caches = Vec::with_capacity(self.decoders.len());
        for decoder in &mut self.decoders {
            let mut y = x.clone();
            let mut stage_caches = Vec::with_capacity(decoder.len());
            for (pos, stage) in decoder.iter_mut().enumerate() {
                let idx = &pools[stages - 1 - pos];
                y = maxunpool2x2(&y, idx, idx.input_shape())?;
                let mut caches = Vec::with_capacity(stage.len());
                for block in stage.iter_mut() {
                    let (z, c) = block.forward_train(y)?;
                    caches.push(c);
                    y = z;
                }
                stage_caches.push(caches);
            }
            logits.push(y);
            dec_caches.push(stage_caches);
        }
        self.cache = Some(ForwardCache {
            encoder: enc_cache,
            pools,
            decoders: dec_caches,
        });
        Ok(DualOutput {
            components: softmax_channelwise(&logits[0]),
            fingertips: softmax_channelwise(&logits[1]),
        })
    }

    /// Backpropagate logit gradients of both branches through the cached
    /// forward pass. The shared encoder receives the sum of both branch
    /// contributions.
    pub fn backward(&self, grad: &DualGrad) -> Result<Gradients> {
        self.backward_full(grad).map(|(g, _)| g)
    }

    /// [`Network::backward`] that also returns the gradient with respect to
    /// the network input.
    pub fn backward_full(&self, grad: &DualGrad) -> Result<(Gradients, Tensor4)> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForward)?;
        let upstream = [&grad.components, &grad.fingertips];
        if self.decoders.len() != upstream.len() {
            return Err(Error::invalid(
                "Network::backward",
                format!("expected {} decoder gradients, got 2", self.decoders.len()),
            ));
        }
        let stages = self.stage_count();
        let mut decoder_grads: Vec<Vec<(String, BlockGrads)>> = Vec::new();
        let mut bottleneck: Option<Tensor4> = None;
        for (d, decoder) in self.decoders.iter().enumerate() {
            let mut g = upstream[d].clone();
            let last = cache.decoders[d].last().and_then(|s| s.last()).expect("non-empty decoder");
            let s = last.output.shape();
            let gs = g.shape();
            for (dim, a, b) in [("grad batch", s.n, gs.n), ("grad channels", s.c, gs.c), ("grad height", s.h, gs.h), ("grad width", s.w, gs.w)] {
                expect_dim("Network::backward", dim, a, b)?;
            }
            let mut grads = Vec::new();
            for (pos, stage) in decoder.iter().enumerate().rev() {
                let stage_idx = stages - 1 - pos;
                for (j, block) in stage.iter().enumerate().rev() {
                    let (gi, bg) = block.backward(&cache.decoders[d][pos][j], &g)?;
                    grads.push((Self::decoder_prefix(d, stage_idx, j), bg));
                    g = gi;
                }
                g = maxunpool2x2_backward(&g, &cache.pools[stage_idx])?;
            }
            grads.reverse();
            decoder_grads.push(grads);
            bottleneck = Some(match bottleneck {
                None => g,
                Some(mut acc) => {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    acc
                }
            });
        }

        let mut g = bottleneck.expect("at least one decoder");
        let mut encoder_grads = Vec::new();
        for (s, stage) in self.encoder.iter().enumerate().rev() {
            g = maxpool2x2_backward(&g, &cache.pools[s])?;
            for (j, block) in stage.iter().enumerate().rev() {
                let (gi, bg) = block.backward(&cache.encoder[s][j], &g)?;
                encoder_grads.push((format!("encoder.stage{s}.conv{j}"), bg));
                g = gi;
            }
        }
        encoder_grads.reverse();

        let mut entries = Vec::new();
        for (prefix, bg) in encoder_grads.into_iter().chain(decoder_grads.into_iter().flatten()) {
            entries.push((format!("{prefix}.weight"), bg.weight.into_vec()));
            entries.push((format!("{prefix}.bias"), bg.bias));
            if let Some((gamma, beta)) = bg.bn {
                entries.push((format!("{prefix}.bn.gamma"), gamma));
                entries.push((format!("{prefix}.bn.beta"), beta));
            }
        }
        Ok((Gradients { entries }, g))
    }

    /// Pooling argmaxes (per stage) and ReLU on/off bits (per normalized
    /// block, parameter order) of the last training forward pass. Two passes
    /// with equal state lie on the same smooth piece of the network.
    pub fn activation_state(&self) -> Option<ActivationState> {
        let cache = self.cache.as_ref()?;
        let pools = cache.pools.iter().map(|p| p.offsets().to_vec()).collect();
        let blocks = cache.encoder.iter().flatten().chain(cache.decoders.iter().flatten().flatten());
        let relus = blocks
            .filter(|b| b.bn.is_some())
            .map(|b| b.output.data().iter().map(|v| *v > 0.0).collect())
            .collect();
        Some(ActivationState { pools, relus })
    }

    fn visit_blocks<'a>(&'a self, f: &mut dyn FnMut(String, &'a ConvBlock)) {
        for (s, stage) in self.encoder.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                f(format!("encoder.stage{s}.conv{j}"), block);
            }
        }
        let stages = self.stage_count();
        for (d, decoder) in self.decoders.iter().enumerate() {
            for (pos, stage) in decoder.iter().enumerate() {
                for (j, block) in stage.iter().enumerate() {
                    f(Self::decoder_prefix(d, stages - 1 - pos, j), block);
                }
            }
        }
    }

    fn visit_blocks_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut ConvBlock)) {
        let stages = self.encoder.len();
        for (s, stage) in self.encoder.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                f(format!("encoder.stage{s}.conv{j}"), block);
            }
        }
        for (d, decoder) in self.decoders.iter_mut().enumerate() {
            for (pos, stage) in decoder.iter_mut().enumerate() {
                for (j, block) in stage.iter_mut().enumerate() {
                    f(Self::decoder_prefix(d, stages - 1 - pos, j), block);
                }
            }
        }
    }

    /// Trainable parameters in canonical order: encoder, decoder0, decoder1.
    pub fn parameters(&self) -> Vec<(String, &[f32])> {
        let mut out = Vec::new();
        self.visit_blocks(&mut |prefix, block| block.visit_params(&prefix, &mut |n, p| out.push((n, p))));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out = Vec::new();
        self.visit_blocks_mut(&mut |prefix, block| block.visit_params_mut(&prefix, &mut |n, p| out.push((n, p))));
        out
    }

    /// Parameters reachable on the path of decoder `d`: the shared encoder followed by that decoder.
    pub fn branch_parameters(&self, d: usize) -> Vec<(String, &[f32])> {
        let decoder = format!("decoder{d}.");
        self.parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder.") || n.starts_with(&decoder))
            .collect()
    }

    /// Parameters followed by batch-norm running statistics, as stored in checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out = Vec::new();
        self.visit_blocks(&mut |prefix, block| {
            block.visit_params(&prefix, &mut |n, p| out.push((n, p)));
            block.visit_buffers(&prefix, &mut |n, p| out.push((n, p)));
        });
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out = Vec::new();
        self.visit_blocks_mut(&mut |prefix, block| block.visit_state_mut(&prefix, &mut |n, p| out.push((n, p))));
        out
    }

    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationState {
    pub pools: Vec<Vec<u8>>,
    pub relus: Vec<Vec<bool>>,
}

impl ActivationState {
    pub fn signature(&self) -> u64 {
        let mut h = Fnv::default();
        self.pools.iter().for_each(|p| h.bytes(p));
        for mask in &self.relus {
            mask.iter().for_each(|b| h.bytes(&[*b as u8]));
        }
        h.0
    }
}

pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Per-branch and combined loss with the logit gradients for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct MultiTaskLoss {
    pub components: f64,
    pub fingertips: f64,
    pub total: f64,
    pub grad: DualGrad,
}

/// Equal-weight sum of the two branches' mean pixel cross-entropies.
pub fn multitask_loss(out: &DualOutput, component_labels: &[u8], fingertip_labels: &[u8]) -> Result<MultiTaskLoss> {
    let (lc, gc) = cross_entropy_from_probs(&out.components, component_labels, None)?;
    let (lf, gf) = cross_entropy_from_probs(&out.fingertips, fingertip_labels, None)?;
    Ok(MultiTaskLoss {
        components: lc,
        fingertips: lf,
        total: lc + lf,
        grad: DualGrad {
            components: gc,
            fingertips: gf,
        },
    })
}

/// Per-pixel argmax class of a probability tensor, (n, h, w) flattened.
pub fn argmax_classes(probs: &Tensor4) -> Vec<u8> {
    let s = probs.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let item = probs.item(n);
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if item[c * plane + p] > item[best * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
