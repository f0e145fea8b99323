//! Fingertip precision and segmentation error curves, and their CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::network::{argmax_classes, Network};
use crate::preprocess::Sample;
use crate::synth::{CLASSES, FINGERS};
use crate::tensor::{Shape4, Tensor4};
use crate::{labeling, Error, Result};

pub const MIN_BLOB: usize = 3;

/// Centre of each fingertip class (2..=6) in an argmax class map: the
/// centroid of the class's largest connected region, if that region has at
/// least `min_blob` pixels.
pub fn tip_centers(classes: &[u8], width: usize, height: usize, min_blob: usize) -> [Option<[f32; 2]>; 5] {
    let mut out = [None; 5];
    for (f, tip) in out.iter_mut().enumerate() {
        let mask: Vec<bool> = classes.iter().map(|&c| c == f as u8 + 2).collect();
        *tip = labeling::largest(&mask, width, height)
            .filter(|c| c.area >= min_blob.max(1))
            .map(|c| [c.centroid[0] as f32, c.centroid[1] as f32]);
    }
    out
}

/// Tip centres of item `n` of a 7-channel fingertip probability map.
pub fn extract_tip_centers(probs: &Tensor4, n: usize, min_blob: usize) -> Result<[Option<[f32; 2]>; 5]> {
    let s = probs.shape();
    if s.c != CLASSES {
        return Err(Error::ShapeMismatch {
            op: "extract_tip_centers",
            dim: "channels",
            expected: CLASSES,
            actual: s.c,
        });
    }
    let item = Tensor4::from_vec(Shape4::new(1, s.c, s.h, s.w), probs.item(n).to_vec())?;
    Ok(tip_centers(&argmax_classes(&item), s.w, s.h, min_blob))
}

/// Per-finger distance in units of `unit_scale` per pixel. Absent truth gives
/// `None`; present truth with no prediction gives `+inf`.
pub fn fingertip_error(pred: &[Option<[f32; 2]>; 5], truth: &[Option<[f32; 2]>; 5], unit_scale: f64) -> [Option<f64>; 5] {
    let mut out = [None; 5];
    for f in 0..5 {
        out[f] = match (pred[f], truth[f]) {
            (_, None) => None,
            (None, Some(_)) => Some(f64::INFINITY),
            (Some(p), Some(t)) => Some((p[0] as f64 - t[0] as f64).hypot(p[1] as f64 - t[1] as f64) * unit_scale),
        };
    }
    out
}

fn check_thresholds(op: &'static str, thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.iter().any(|t| t.is_nan()) || thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument {
            op,
            msg: "thresholds must be a non-empty ascending list".into(),
        });
    }
    Ok(())
}

/// Share of errors strictly below each threshold, plus the raw counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub normalized: Vec<f64>,
    pub raw: Vec<usize>,
    pub count: usize,
}

pub fn precision_curve(errors: &[f64], thresholds: &[f64]) -> Result<Curve> {
    check_thresholds("precision_curve", thresholds)?;
    if errors.is_empty() {
        return Err(Error::InvalidArgument {
            op: "precision_curve",
            msg: "empty error set".into(),
        });
    }
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(Error::InvalidArgument {
            op: "precision_curve",
            msg: "errors must be non-negative".into(),
        });
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let raw: Vec<usize> = thresholds.iter().map(|t| sorted.partition_point(|e| e < t)).collect();
    Ok(Curve {
        thresholds: thresholds.to_vec(),
        normalized: raw.iter().map(|&r| r as f64 / errors.len() as f64).collect(),
        raw,
        count: errors.len(),
    })
}

/// Overall and per-finger precision over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionCurve {
    pub overall: Curve,
    /// `None` for a finger with no ground-truth tips.
    pub per_finger: [Option<Curve>; 5],
    /// Thumb precision at an error threshold of 1.0.
    pub thumb_at_one: Option<f64>,
    pub images: usize,
}

impl PrecisionCurve {
    pub fn table(&self) -> PrecisionTable {
        let n = self.overall.thresholds.len();
        PrecisionTable {
            thresholds: self.overall.thresholds.clone(),
            overall: self.overall.normalized.clone(),
            per_finger: std::array::from_fn(|f| self.per_finger[f].as_ref().map_or(vec![f64::NAN; n], |c| c.normalized.clone())),
        }
    }
}

pub fn fingertip_precision(per_image: &[[Option<f64>; 5]], thresholds: &[f64]) -> Result<PrecisionCurve> {
    let all: Vec<f64> = per_image.iter().flatten().flatten().copied().collect();
    let overall = precision_curve(&all, thresholds)?;
    let mut per_finger: [Option<Curve>; 5] = Default::default();
    for (f, slot) in per_finger.iter_mut().enumerate() {
        let errs: Vec<f64> = per_image.iter().filter_map(|e| e[f]).collect();
        if !errs.is_empty() {
            *slot = Some(precision_curve(&errs, thresholds)?);
        }
    }
    let thumb: Vec<f64> = per_image.iter().filter_map(|e| e[0]).collect();
    let thumb_at_one = (!thumb.is_empty()).then(|| thumb.iter().filter(|&&e| e < 1.0).count() as f64 / thumb.len() as f64);
    Ok(PrecisionCurve {
        overall,
        per_finger,
        thumb_at_one,
        images: per_image.len(),
    })
}

/// Misclassified share of the non-background ground-truth pixels; 0 for a
/// frame without any.
pub fn frame_error(pred: &[u8], truth: &[u8]) -> f64 {
    let (wrong, total) = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != 0)
        .fold((0usize, 0usize), |(w, n), (p, t)| (w + (p != t) as usize, n + 1));
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

/// Share of frames whose error is at most each threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SegErrorCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub frame_errors: Vec<f64>,
}

pub fn seg_error_curve(pred: &[&[u8]], truth: &[&[u8]], thresholds: &[f64]) -> Result<SegErrorCurve> {
    check_thresholds("seg_error_curve", thresholds)?;
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "seg_error_curve",
            dim: "frame count",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument {
            op: "seg_error_curve",
            msg: "no frames".into(),
        });
    }
    let mut frame_errors = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "seg_error_curve",
                dim: "pixels",
                expected: t.len(),
                actual: p.len(),
            });
        }
        frame_errors.push(frame_error(p, t));
    }
    let mut sorted = frame_errors.clone();
    sorted.sort_by(f64::total_cmp);
    let fractions = thresholds.iter().map(|t| sorted.partition_point(|e| e <= t) as f64 / sorted.len() as f64).collect();
    Ok(SegErrorCurve {
        thresholds: thresholds.to_vec(),
        fractions,
        frame_errors,
    })
}

/// Everything [`emit_report`] writes.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub precision: Option<PrecisionCurve>,
    /// Named segmentation curves, one file each.
    pub segmentation: Vec<(String, SegErrorCurve)>,
}

pub const SEGMENTATION_HEADER: &str = "# per-frame error: misclassified share of non-background ground-truth pixels";

pub fn precision_csv(curve: &PrecisionCurve) -> String {
    let t = curve.table();
    let mut s = String::from("threshold,overall,");
    s.push_str(&FINGERS.join(","));
    s.push('\n');
    for (i, th) in t.thresholds.iter().enumerate() {
        write!(s, "{th},{}", t.overall[i]).expect("writing to a String");
        for f in &t.per_finger {
            write!(s, ",{}", f[i]).expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn segmentation_csv(curve: &SegErrorCurve) -> String {
    let mut s = format!("{SEGMENTATION_HEADER}\nthreshold,fraction\n");
    for (t, f) in curve.thresholds.iter().zip(&curve.fractions) {
        writeln!(s, "{t},{f}").expect("writing to a String");
    }
    s
}

pub fn summary_csv(curve: &PrecisionCurve) -> String {
    let at_one = curve.thumb_at_one.map_or("NaN".to_string(), |v| v.to_string());
    format!(
        "metric,value\nthumb_precision_at_1.0,{at_one}\nimages,{}\ntips,{}\n",
        curve.images, curve.overall.count
    )
}

/// Writes `precision.csv`, `summary.csv` and one `segmentation_<name>.csv`
/// per curve into `dir`. Fails before writing anything if there is nothing
/// to report.
pub fn emit_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    if report.precision.is_none() && report.segmentation.is_empty() {
        return Err(Error::InvalidArgument {
            op: "emit_report",
            msg: "no curves to report".into(),
        });
    }
    let mut files = Vec::new();
    if let Some(p) = &report.precision {
        files.push((dir.join("precision.csv"), precision_csv(p)));
        files.push((dir.join("summary.csv"), summary_csv(p)));
    }
    for (name, curve) in &report.segmentation {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::InvalidArgument {
                op: "emit_report",
                msg: format!("curve name {name:?} is not a plain identifier"),
            });
        }
        files.push((dir.join(format!("segmentation_{name}.csv")), segmentation_csv(curve)));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (path, text) in &files {
        crate::checkpoint::write_atomic(path, text.as_bytes())?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// The values of a precision CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionTable {
    pub thresholds: Vec<f64>,
    pub overall: Vec<f64>,
    pub per_finger: [Vec<f64>; 5],
}

fn csv_rows(text: &str, header: &str) -> std::result::Result<Vec<Vec<f64>>, (usize, String)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h == header => {}
        Some((i, h)) => return Err((i + 1, format!("expected header {header:?}, found {h:?}"))),
        None => return Err((1, "missing header".into())),
    }
    let width = header.split(',').count();
    lines
        .map(|(i, l)| {
            let row: std::result::Result<Vec<f64>, _> = l.split(',').map(str::parse).collect();
            match row {
                Ok(r) if r.len() == width => Ok(r),
                _ => Err((i + 1, format!("expected {width} numbers"))),
            }
        })
        .collect()
}

pub fn parse_precision_csv(text: &str, path: &Path) -> Result<PrecisionTable> {
    let header = format!("threshold,overall,{}", FINGERS.join(","));
    let rows = csv_rows(text, &header).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })?;
    Ok(PrecisionTable {
        thresholds: rows.iter().map(|r| r[0]).collect(),
        overall: rows.iter().map(|r| r[1]).collect(),
        per_finger: std::array::from_fn(|f| rows.iter().map(|r| r[2 + f]).collect()),
    })
}

/// `(thresholds, fractions)` of a segmentation CSV.
pub fn parse_segmentation_csv(text: &str, path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = csv_rows(text, "threshold,fraction").map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })?;
    Ok((rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect()))
}

pub fn default_precision_thresholds() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.25).collect()
}

pub fn default_seg_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Network predictions and scores over a set of samples.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub components: Vec<Vec<u8>>,
    pub fingertips: Vec<Vec<u8>>,
    pub tips: Vec<[Option<[f32; 2]>; 5]>,
    /// Pooled accuracy over non-background ground-truth pixels, per branch.
    pub accuracy: [f64; 2],
    pub report: Report,
}

/// Runs inference over `samples` in batches and scores both branches.
pub fn evaluate(net: &Network, samples: &[Sample], precision_thresholds: &[f64], seg_thresholds: &[f64], unit_scale: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            msg: "no samples".into(),
        });
    }
    let size = samples[0].size;
    let (mut components, mut fingertips, mut tips) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in samples.chunks(16) {
        let mut data = Vec::with_capacity(chunk.len() * size * size);
        chunk.iter().for_each(|s| data.extend_from_slice(&s.input));
        let out = net.forward(&Tensor4::from_vec(Shape4::new(chunk.len(), 1, size, size), data)?)?;
        let comp = argmax_classes(&out.components);
        let tipmap = argmax_classes(&out.fingertips);
        for i in 0..chunk.len() {
            let plane = size * size;
            components.push(comp[i * plane..(i + 1) * plane].to_vec());
            let t = tipmap[i * plane..(i + 1) * plane].to_vec();
            tips.push(tip_centers(&t, size, size, MIN_BLOB));
            fingertips.push(t);
        }
    }
    let pooled = |pred: &[Vec<u8>], truth: &dyn Fn(&Sample) -> &[u8]| {
        let (mut right, mut total) = (0usize, 0usize);
        for (p, s) in pred.iter().zip(samples) {
            for (a, &b) in p.iter().zip(truth(s)) {
                if b != 0 {
                    total += 1;
                    right += (*a == b) as usize;
                }
            }
        }
        if total == 0 {
            f64::NAN
        } else {
            right as f64 / total as f64
        }
    };
    let accuracy = [pooled(&components, &|s| &s.components), pooled(&fingertips, &|s| &s.fingertips)];
    let errors: Vec<[Option<f64>; 5]> = tips.iter().zip(samples).map(|(p, s)| fingertip_error(p, &s.tips, unit_scale)).collect();
    let precision = if errors.iter().flatten().any(Option::is_some) { Some(fingertip_precision(&errors, precision_thresholds)?) } else { None };
    let truth_c: Vec<&[u8]> = samples.iter().map(|s| s.components.as_slice()).collect();
    let truth_f: Vec<&[u8]> = samples.iter().map(|s| s.fingertips.as_slice()).collect();
    let segmentation = vec![
        ("components".to_string(), seg_error_curve(&slices(&components), &truth_c, seg_thresholds)?),
        ("fingertips".to_string(), seg_error_curve(&slices(&fingertips), &truth_f, seg_thresholds)?),
    ];
    Ok(Evaluation {
        components,
        fingertips,
        tips,
        accuracy,
        report: Report { precision, segmentation },
    })
}

fn slices(maps: &[Vec<u8>]) -> Vec<&[u8]> {
    maps.iter().map(Vec::as_slice).collect()
}
