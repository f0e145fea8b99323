//! Mini-batch training with Adam and the plateau schedule.
//!
//! Step `s` of a run always sees the same batch: the epoch and batch position
//! follow from `s`, each epoch's order is a seeded shuffle, and each sample's
//! augmentation is keyed on `(seed, epoch, index)`. Together with the
//! optimizer and schedule state kept in checkpoints this makes resumed runs
//! bit-identical to uninterrupted ones.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::network::{multitask_loss, Network};
use crate::optim::{adam_step, AdamConfig, AdamState, PlateauSchedule};
use crate::preprocess::{self, AugmentParams, AugmentRanges, BBox, Sample, ThresholdParams};
use crate::synth::{self, ManifestRow, Split, SynthConfig};
use crate::tensor::{Shape4, Tensor4};
use crate::{detect, seeding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Epochs(u64),
    Steps(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_min: f64,
    pub lr_decay: f64,
    /// Steps per loss-averaging window of the schedule.
    pub plateau_window: u32,
    /// Windows without improvement before the rate decays.
    pub plateau_patience: u32,
    pub adam: AdamConfig,
    pub budget: Budget,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentRanges>,
    /// Steps between the snapshots returned on divergence.
    pub snapshot_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_start: 1e-3,
            lr_min: 1e-5,
            lr_decay: 0.5,
            plateau_window: 50,
            plateau_patience: 5,
            adam: AdamConfig::default(),
            budget: Budget::Epochs(120),
            seed: 0,
            augment: Some(AugmentRanges::default()),
            snapshot_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.snapshot_every == 0 {
            return Err(Error::InvalidArgument {
                op: "TrainConfig",
                msg: "batch_size and snapshot_every must be positive".into(),
            });
        }
        self.schedule().map(|_| ())
    }

    fn schedule(&self) -> Result<PlateauSchedule> {
        PlateauSchedule::new(self.lr_start, self.lr_min, self.lr_decay, self.plateau_window, self.plateau_patience)
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        match self.budget {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => e * samples.div_ceil(self.batch_size) as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_components: f64,
    pub loss_fingertips: f64,
    pub loss_total: f64,
}

pub struct Trainer {
    net: Network,
    adam: AdamState,
    schedule: PlateauSchedule,
    config: TrainConfig,
    step: u64,
    history: Vec<StepRecord>,
    last_good: Checkpoint,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(net.parameters().iter().map(|(_, p)| p.len()));
        let schedule = config.schedule()?;
        let mut t = Trainer {
            last_good: Checkpoint::from_network(&net),
            net,
            adam,
            schedule,
            config,
            step: 0,
            history: Vec::new(),
        };
        t.last_good = t.checkpoint();
        Ok(t)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(ckpt.to_network()?, config)?;
        if let Some(adam) = &ckpt.optimizer {
            if adam.lengths() != t.adam.lengths() {
                return Err(Error::SpecMismatch("optimizer state does not match the network parameters".into()));
            }
            t.adam = adam.clone();
        }
        if let Some(s) = ckpt.meta.schedule {
            t.schedule.state = s;
        }
        t.step = ckpt.meta.iteration;
        t.last_good = ckpt.clone();
        Ok(t)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_network(&self.net);
        c.optimizer = Some(self.adam.clone());
        c.meta = TrainingMeta {
            iteration: self.step,
            seed: self.config.seed,
            schedule: Some(self.schedule.state),
        };
        c
    }

    /// Dataset indices of the batch taken at `step`.
    pub fn batch_indices(&self, step: u64, samples: usize) -> Vec<usize> {
        let per_epoch = samples.div_ceil(self.config.batch_size) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut seeding::stream(self.config.seed, &[0x73687566, epoch]));
        let start = k * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(samples)].to_vec()
    }

    fn batch(&self, step: u64, data: &[Sample]) -> Result<(Tensor4, Vec<u8>, Vec<u8>)> {
        let per_epoch = data.len().div_ceil(self.config.batch_size) as u64;
        let epoch = step / per_epoch;
        let size = data[0].size;
        let idx = self.batch_indices(step, data.len());
        let (mut input, mut comp, mut tips) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &idx {
            let sample = match &self.config.augment {
                Some(r) => {
                    let p = AugmentParams::for_index(seeding::derive(self.config.seed, &[epoch]), i as u64, size, r);
                    preprocess::augment(&data[i], &p).sample
                }
                None => data[i].clone(),
            };
            input.extend_from_slice(&sample.input);
            comp.extend_from_slice(&sample.components);
            tips.extend_from_slice(&sample.fingertips);
        }
        Ok((Tensor4::from_vec(Shape4::new(idx.len(), 1, size, size), input)?, comp, tips))
    }

    /// One optimisation step on the batch scheduled for the current step.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument {
                op: "train_step",
                msg: "empty training set".into(),
            });
        }
        let (input, comp, tips) = self.batch(self.step, data)?;
        let out = self.net.forward_train(&input)?;
        let loss = multitask_loss(&out, &comp, &tips)?;
        if !loss.total.is_finite() {
            return Err(self.diverged());
        }
        let grads = self.net.backward(&loss.grad)?;
        let lr = self.schedule.lr();
        {
            let mut params = self.net.parameters_mut();
            let mut slots: Vec<&mut [f32]> = params.iter_mut().map(|(_, p)| &mut **p).collect();
            match adam_step(&mut slots, &grads.slices(), &mut self.adam, lr, &self.config.adam) {
                Err(Error::NonFinite(_)) => return Err(self.diverged()),
                other => other?,
            }
        }
        self.schedule.observe(loss.total);
        let rec = StepRecord {
            step: self.step,
            lr,
            loss_components: loss.components,
            loss_fingertips: loss.fingertips,
            loss_total: loss.total,
        };
        self.history.push(rec);
        self.step += 1;
        if self.step % self.config.snapshot_every == 0 {
            self.last_good = self.checkpoint();
        }
        Ok(rec)
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            step: self.step,
            last_good: Box::new(self.last_good.clone()),
        }
    }

    /// Trains until the configured budget is spent, calling `on_step` after
    /// every step.
    pub fn run(&mut self, data: &[Sample], mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let total = self.config.total_steps(data.len());
        while self.step < total {
            let rec = self.train_step(data)?;
            on_step(&rec);
        }
        Ok(())
    }
}

pub const LOSS_CSV_HEADER: &str = "step,lr,loss_components,loss_fingertips,loss_total";

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in history {
        writeln!(s, "{},{},{},{},{}", r.step, r.lr, r.loss_components, r.loss_fingertips, r.loss_total).expect("writing to a String");
    }
    s
}

pub fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    crate::checkpoint::write_atomic(path, loss_csv(history).as_bytes())
}

/// Network-ready samples of one split of a dataset directory. Boxes come from
/// the directory's detections file when it lists the frame, otherwise from
/// the labels.
pub fn load_samples(dir: &Path, split: Split, params: &ThresholdParams, size: usize) -> Result<Vec<Sample>> {
    let det_path = dir.join(synth::DETECTIONS_FILE);
    load_samples_with(dir, split, det_path.exists().then_some(det_path.as_path()), params, size)
}

/// As `load_samples`, with boxes from `detections` instead of the dataset's own file.
pub fn load_samples_with(dir: &Path, split: Split, detections: Option<&Path>, params: &ThresholdParams, size: usize) -> Result<Vec<Sample>> {
    let rows = synth::read_manifest(&dir.join(split.manifest_name()))?;
    let detections = match detections {
        Some(p) => detect::load_detections(p, None)?,
        None => Default::default(),
    };
    rows.iter()
        .map(|row: &ManifestRow| {
            let (frame, labels) = synth::load_row(dir, row)?;
            let bbox = match detections.get(&row.id).and_then(|d| d.best()) {
                Some(b) => b,
                None => labels.hand_bbox(4).unwrap_or(frame.full_box()),
            };
            bbox.check(frame.width, frame.height)?;
            preprocess::prepare_sample(&frame, &labels, &bbox, params, size)
        })
        .collect()
}

/// Samples for scenes `range` of the synthetic stream keyed by `seed`,
/// generated in memory with true boxes.
pub fn synthetic_samples(cfg: &SynthConfig, seed: u64, range: std::ops::Range<u64>, params: &ThresholdParams, size: usize) -> Result<Vec<Sample>> {
    range
        .map(|i| {
            let (frame, labels) = synth::scene(cfg, seed, i)?;
            let bbox: BBox = labels.hand_bbox(cfg.bbox_margin).unwrap_or(frame.full_box());
            preprocess::prepare_sample(&frame, &labels, &bbox, params, size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkSpec, WidthMultiplier};

    fn tiny_net(seed: u64) -> Network {
        let spec = NetworkSpec::default().with_width(WidthMultiplier::new(1, 16).unwrap()).with_input(16, 16).with_stages(2);
        Network::build(spec, seed).unwrap()
    }

    fn data(n: u64) -> Vec<Sample> {
        let cfg = SynthConfig::default();
        synthetic_samples(&cfg, 3, 0..n, &ThresholdParams::default(), 16).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            budget: Budget::Steps(6),
            seed: 11,
            snapshot_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = Trainer::new(tiny_net(1), TrainConfig { batch_size: 3, ..config() }).unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|s| t.batch_indices(s, 10)).collect();
        assert_eq!(seen.len(), 10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0, 10), t.batch_indices(4, 10));
    }

    #[test]
    fn same_seed_same_history() {
        let d = data(5);
        let run = || {
            let mut t = Trainer::new(tiny_net(1), config()).unwrap();
            t.run(&d, |_| {}).unwrap();
            t.history().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, run());
        assert!(a.iter().all(|r| (1e-5..=1e-3).contains(&r.lr)));
    }

    #[test]
    fn resume_is_bit_identical() {
        let d = data(5);
        let mut full = Trainer::new(tiny_net(2), config()).unwrap();
        full.run(&d, |_| {}).unwrap();
        let mut first = Trainer::new(tiny_net(2), TrainConfig { budget: Budget::Steps(3), ..config() }).unwrap();
        first.run(&d, |_| {}).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut second = Trainer::resume(&ckpt, config()).unwrap();
        second.run(&d, |_| {}).unwrap();
        assert_eq!(&full.history()[3..], second.history());
        assert_eq!(full.checkpoint(), second.checkpoint());
    }

    #[test]
    fn divergence_returns_last_snapshot() {
        let d = data(4);
        let mut t = Trainer::new(tiny_net(3), config()).unwrap();
        t.train_step(&d).unwrap();
        t.train_step(&d).unwrap();
        let snap = t.checkpoint();
        t.train_step(&d).unwrap();
        for (_, p) in t.net.parameters_mut() {
            p.fill(f32::NAN);
        }
        match t.train_step(&d) {
            Err(Error::Diverged { step, last_good }) => {
                assert_eq!(step, 3);
                assert_eq!(*last_good, snap);
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn loss_csv_layout() {
        let r = StepRecord {
            step: 0,
            lr: 1e-3,
            loss_components: 1.5,
            loss_fingertips: 0.25,
            loss_total: 1.75,
        };
        assert_eq!(loss_csv(&[r]), "step,lr,loss_components,loss_fingertips,loss_total\n0,0.001,1.5,0.25,1.75\n");
    }
}
