//! Flat `key = value` pipeline configuration. Later sources override earlier
//! ones: defaults, then the file, then command-line flags.

use std::path::{Path, PathBuf};

use handseg::network::{NetworkSpec, WidthMultiplier};
use handseg::preprocess::ThresholdParams;
use handseg::synth::SynthConfig;
use handseg::train::{Budget, TrainConfig};
use handseg::eval::{default_precision_thresholds, default_seg_thresholds};

use crate::CliError;

pub const KEYS: &[&str] = &[
    "dataset",
    "detections",
    "checkpoint",
    "out",
    "seed",
    "width_mult",
    "input_size",
    "stages",
    "threshold_t",
    "mode_bin_width",
    "batch_size",
    "lr_start",
    "lr_min",
    "lr_decay",
    "plateau_window",
    "plateau_patience",
    "steps",
    "epochs",
    "augment",
    "snapshot_every",
    "precision_thresholds",
    "seg_thresholds",
    "unit_scale",
    "scenes",
    "frame_width",
    "frame_height",
    "noise_sigma",
    "occlusion_probability",
    "split",
    "bbox_margin",
    "bench_frames",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub spec: NetworkSpec,
    /// Set when any network key was given, so loaded checkpoints are checked against `spec`.
    pub spec_overridden: bool,
    pub threshold: ThresholdParams,
    pub train: TrainConfig,
    steps: Option<u64>,
    epochs: Option<u64>,
    pub precision_thresholds: Vec<f64>,
    pub seg_thresholds: Vec<f64>,
    pub unit_scale: f64,
    pub scenes: usize,
    pub synth: SynthConfig,
    pub bench_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: None,
            detections: None,
            checkpoint: None,
            out: None,
            seed: None,
            spec: NetworkSpec::default(),
            spec_overridden: false,
            threshold: ThresholdParams::default(),
            train: TrainConfig::default(),
            steps: None,
            epochs: None,
            precision_thresholds: default_precision_thresholds(),
            seg_thresholds: default_seg_thresholds(),
            unit_scale: 1.0,
            scenes: 100,
            synth: SynthConfig::default(),
            bench_frames: 20,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| usage(format!("{key}: cannot parse {value:?}")))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_, _>>()?;
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(usage(format!("{key}: expected a comma-separated list of finite numbers")));
    }
    Ok(v)
}

/// `a/b` or a terminating decimal such as `0.25`.
pub fn parse_width_mult(value: &str) -> Result<WidthMultiplier, CliError> {
    let bad = || usage(format!("width_mult: {value:?} is not a fraction like 1/4 or 0.25"));
    let (n, d) = match value.split_once('/') {
        Some((a, b)) => (a.trim().parse::<u32>().map_err(|_| bad())?, b.trim().parse::<u32>().map_err(|_| bad())?),
        None => {
            let (whole, frac) = value.trim().split_once('.').unwrap_or((value.trim(), ""));
            if frac.len() > 6 || !frac.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let digits = format!("{whole}{frac}");
            (digits.parse::<u32>().map_err(|_| bad())?, 10u32.pow(frac.len() as u32))
        }
    };
    WidthMultiplier::new(n, d).map_err(|e| usage(e.to_string()))
}

fn boolean(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(usage(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = Some(value.into()),
            "detections" => self.detections = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "seed" => self.seed = Some(num(key, value)?),
            "width_mult" => {
                self.spec.width_multiplier = parse_width_mult(value)?;
                self.spec_overridden = true;
            }
            "input_size" => {
                let s: usize = num(key, value)?;
                self.spec.input_size = (s, s);
                self.spec_overridden = true;
            }
            "stages" => {
                let s: usize = num(key, value)?;
                if s == 0 || s > handseg::network::VGG16_STAGES.len() {
                    return Err(usage(format!("stages: {s} is outside 1..=5")));
                }
                self.spec = NetworkSpec { width_multiplier: self.spec.width_multiplier, input_size: self.spec.input_size, ..NetworkSpec::default() }.with_stages(s);
                self.spec_overridden = true;
            }
            "threshold_t" => self.threshold.t = num(key, value)?,
            "mode_bin_width" => self.threshold.mode_bin_width = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr_start" => self.train.lr_start = num(key, value)?,
            "lr_min" => self.train.lr_min = num(key, value)?,
            "lr_decay" => self.train.lr_decay = num(key, value)?,
            "plateau_window" => self.train.plateau_window = num(key, value)?,
            "plateau_patience" => self.train.plateau_patience = num(key, value)?,
            "steps" => self.steps = Some(num(key, value)?),
            "epochs" => self.epochs = Some(num(key, value)?),
            "augment" => self.train.augment = boolean(key, value)?.then(Default::default),
            "snapshot_every" => self.train.snapshot_every = num(key, value)?,
            "precision_thresholds" => self.precision_thresholds = list(key, value)?,
            "seg_thresholds" => self.seg_thresholds = list(key, value)?,
            "unit_scale" => self.unit_scale = num(key, value)?,
            "scenes" => self.scenes = num(key, value)?,
            "frame_width" => self.synth.width = num(key, value)?,
            "frame_height" => self.synth.height = num(key, value)?,
            "noise_sigma" => self.synth.noise_sigma = num(key, value)?,
            "occlusion_probability" => self.synth.occlusion_probability = num(key, value)?,
            "split" => {
                let (a, b) = value.split_once(':').ok_or_else(|| usage(format!("split: expected train:test shares, got {value:?}")))?;
                self.synth.split = (num(key, a)?, num(key, b)?);
            }
            "bbox_margin" => self.synth.bbox_margin = num(key, value)?,
            "bench_frames" => self.bench_frames = num(key, value)?,
            _ => return Err(usage(format!("unknown config key {key:?}; known keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments are skipped; unknown and repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| usage(format!("{}:{}: {msg}", path.display(), i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected key = value".into()))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(format!("{key} set twice")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// The training config with the seed and step or epoch budget applied.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut t = self.train.clone();
        t.seed = self.require_seed()?;
        t.budget = match (self.steps, self.epochs) {
            (Some(_), Some(_)) => return Err(usage("set steps or epochs, not both")),
            (Some(s), None) => Budget::Steps(s),
            (None, Some(e)) => Budget::Epochs(e),
            (None, None) => self.train.budget,
        };
        t.validate().map_err(|e| usage(e.to_string()))?;
        Ok(t)
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| usage("this command needs a seed (--seed or seed = ...)"))
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| usage(format!("missing {key} (--{key} or {key} = ...)")))
    }

    /// A path that must already exist.
    pub fn input<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        let p = self.require(value, key)?;
        if !p.exists() {
            return Err(CliError::Data(format!("{key} {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.spec.validate().map_err(|e| usage(e.to_string()))?;
        self.threshold.validate().map_err(|e| usage(e.to_string()))?;
        if !(self.unit_scale.is_finite() && self.unit_scale > 0.0) {
            return Err(usage("unit_scale must be positive"));
        }
        Ok(())
    }
}
