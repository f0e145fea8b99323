use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use handseg::checkpoint::Checkpoint;
use handseg::eval;
use handseg::gradcheck;
use handseg::network::{self, WidthMultiplier};
use handseg::pipeline;
use handseg::preprocess::{self, BBox, RgbdFrame, ThresholdParams};
use handseg::synth::{self, Split, SynthConfig};
use handseg::train::{self, Budget, TrainConfig, Trainer};
use handseg::{Shape4, Tensor4};

type Tips = Vec<Option<(f32, f32)>>;

fn err(e: handseg::Error) -> PyErr {
    use handseg::Error as E;
    match e {
        E::NonFinite(_) | E::Diverged { .. } => PyArithmeticError::new_err(e.to_string()),
        E::Io { .. } | E::Checkpoint { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tips(t: &[Option<[f32; 2]>; 5]) -> Tips {
    t.iter().map(|p| p.map(|[x, y]| (x, y))).collect()
}

fn bbox(b: (usize, usize, usize, usize)) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn frame(depth: Vec<u16>, width: usize, height: usize) -> PyResult<RgbdFrame> {
    RgbdFrame::new(width, height, depth).map_err(err)
}

/// Layer layout of a network: input size, encoder stages and channel width.
#[pyclass(name = "NetworkSpec", from_py_object)]
#[derive(Clone)]
struct PySpec(network::NetworkSpec);

#[pymethods]
impl PySpec {
    #[new]
    #[pyo3(signature = (width_num = 1, width_den = 1, input_size = 96, stages = 5))]
    fn new(width_num: u32, width_den: u32, input_size: usize, stages: usize) -> PyResult<Self> {
        let spec = network::NetworkSpec::default()
            .with_width(WidthMultiplier::new(width_num, width_den).map_err(err)?)
            .with_input(input_size, input_size)
            .with_stages(stages);
        spec.validate().map_err(err)?;
        Ok(PySpec(spec))
    }

    #[staticmethod]
    fn desk_scale() -> Self {
        PySpec(network::NetworkSpec::desk_scale())
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.input_size.1
    }

    /// Per-layer `(name, in_channels, out_channels, params)`.
    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        self.0.layers().into_iter().map(|l| (l.name.clone(), l.in_channels, l.out_channels, l.param_count())).collect()
    }

    fn count_params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.0.count_params();
        let d = PyDict::new(py);
        d.set_item("encoder", c.encoder)?;
        d.set_item("decoder", c.decoder)?;
        d.set_item("total_shared", c.total_shared)?;
        d.set_item("total_independent", c.total_independent)?;
        d.set_item("savings", c.savings)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let w = self.0.width_multiplier;
        format!("NetworkSpec(width={}/{}, input={}, stages={})", w.num(), w.den(), self.0.input_size.1, self.0.encoder_stages.len())
    }
}

/// Shared-encoder network with a component decoder and a fingertip decoder.
#[pyclass(name = "Network")]
struct PyNetwork(network::Network);

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &PySpec, seed: u64) -> PyResult<Self> {
        network::Network::build(spec.0.clone(), seed).map(PyNetwork).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        network::Network::load_checkpoint(&path).map(PyNetwork).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_checkpoint(&path).map_err(err)
    }

    #[getter]
    fn spec(&self) -> PySpec {
        PySpec(self.0.spec().clone())
    }

    fn count_parameters(&self) -> usize {
        self.0.count_parameters()
    }

    /// Class maps of both decoders for `n` inputs of `size`×`size` values each.
    fn predict(&self, input: Vec<f32>, n: usize) -> PyResult<(Vec<u8>, Vec<u8>)> {
        let (h, w) = self.0.spec().input_size;
        let x = Tensor4::from_vec(Shape4::new(n, 1, h, w), input).map_err(err)?;
        let out = self.0.forward(&x).map_err(err)?;
        Ok((network::argmax_classes(&out.components), network::argmax_classes(&out.fingertips)))
    }

    /// Segments one frame. Without `bbox` the nearest depth region is used.
    /// Returns a dict of frame-resolution `components`, `fingertips`, the
    /// `bbox` used and the five `tips` (None when absent).
    #[pyo3(signature = (depth, width, height, bbox = None, t = 300))]
    fn infer<'py>(&self, py: Python<'py>, depth: Vec<u16>, width: usize, height: usize, bbox: Option<(usize, usize, usize, usize)>, t: u16) -> PyResult<Bound<'py, PyDict>> {
        let f = frame(depth, width, height)?;
        let b = match bbox {
            Some(b) => self::bbox(b)?,
            None => pipeline::nearest_region(&f).map_err(err)?,
        };
        let params = ThresholdParams { t, ..ThresholdParams::default() };
        let p = pipeline::infer_frame(&self.0, &f, &b, &params).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("components", p.components)?;
        d.set_item("fingertips", p.fingertips)?;
        d.set_item("bbox", (b.x0, b.y0, b.x1, b.y1))?;
        d.set_item("tips", self::tips(&p.tips))?;
        Ok(d)
    }

    /// Pooled non-background accuracy of both branches on a dataset split.
    #[pyo3(signature = (dataset, split = "test"))]
    fn accuracy(&self, dataset: PathBuf, split: &str) -> PyResult<(f64, f64)> {
        let samples = train::load_samples(&dataset, parse_split(split)?, &ThresholdParams::default(), self.0.spec().input_size.1).map_err(err)?;
        let ev = eval::evaluate(&self.0, &samples, &eval::default_precision_thresholds(), &eval::default_seg_thresholds(), 1.0).map_err(err)?;
        Ok((ev.accuracy[0], ev.accuracy[1]))
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {s:?}"))),
    }
}

/// Trains `network` in place on a dataset's training split; returns the
/// total loss of every step.
#[pyfunction]
#[pyo3(signature = (network, dataset, steps, seed, batch_size = 8, lr = 1e-3, augment = true))]
fn train_network(network: &mut PyNetwork, dataset: PathBuf, steps: u64, seed: u64, batch_size: usize, lr: f64, augment: bool) -> PyResult<Vec<f64>> {
    let cfg = TrainConfig {
        batch_size,
        lr_start: lr,
        budget: Budget::Steps(steps),
        seed,
        augment: augment.then(Default::default),
        ..TrainConfig::default()
    };
    let size = network.0.spec().input_size.1;
    let data = train::load_samples(&dataset, Split::Train, &ThresholdParams::default(), size).map_err(err)?;
    let mut t = Trainer::new(Checkpoint::from_network(&network.0).to_network().map_err(err)?, cfg).map_err(err)?;
    t.run(&data, |_| {}).map_err(err)?;
    let losses = t.history().iter().map(|r| r.loss_total).collect();
    network.0 = t.into_network();
    Ok(losses)
}

/// Scene `index` of the synthetic stream keyed by `seed`: depth, both
/// label maps and tip points.
#[pyfunction]
#[pyo3(signature = (seed, index, width = 160, height = 120, noise_sigma = 2.0))]
fn synth_scene<'py>(py: Python<'py>, seed: u64, index: u64, width: usize, height: usize, noise_sigma: f32) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SynthConfig { width, height, noise_sigma, ..SynthConfig::default() };
    let (f, labels) = synth::scene(&cfg, seed, index).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("width", f.width)?;
    d.set_item("height", f.height)?;
    d.set_item("depth", f.depth)?;
    d.set_item("bbox", labels.hand_bbox(cfg.bbox_margin).map(|b| (b.x0, b.y0, b.x1, b.y1)))?;
    d.set_item("components", labels.components)?;
    d.set_item("fingertips", labels.fingertips)?;
    d.set_item("tips", tips(&labels.tips))?;
    Ok(d)
}

/// Writes `count` scenes under `directory`; returns the train and test sizes.
#[pyfunction]
fn make_dataset(directory: PathBuf, count: usize, seed: u64) -> PyResult<(usize, usize)> {
    let (a, b) = synth::make_dataset(&directory, count, seed, &SynthConfig::default()).map_err(err)?;
    Ok((a.len(), b.len()))
}

#[pyfunction]
#[pyo3(signature = (depth, width, height, bbox, mode_bin_width = 1))]
fn depth_mode(depth: Vec<u16>, width: usize, height: usize, bbox: (usize, usize, usize, usize), mode_bin_width: u16) -> PyResult<u16> {
    let params = ThresholdParams { mode_bin_width, ..ThresholdParams::default() };
    preprocess::depth_mode(&frame(depth, width, height)?, &self::bbox(bbox)?, &params).map_err(err)
}

/// Crop of `bbox` keeping only depths within `t` of the mode; returns the
/// mode and the crop in row order.
#[pyfunction]
#[pyo3(signature = (depth, width, height, bbox, t = 300))]
fn threshold_hand(depth: Vec<u16>, width: usize, height: usize, bbox: (usize, usize, usize, usize), t: u16) -> PyResult<(u16, Vec<u16>)> {
    let params = ThresholdParams { t, ..ThresholdParams::default() };
    let crop = preprocess::threshold_hand(&frame(depth, width, height)?, &self::bbox(bbox)?, &params).map_err(err)?;
    Ok((crop.mode, crop.depth))
}

/// Nearest-region boxes as `(x0, y0, x1, y1)`, nearest first.
#[pyfunction]
#[pyo3(signature = (depth, width, height, min_area = 50, depth_band = 300))]
fn propose_regions(depth: Vec<u16>, width: usize, height: usize, min_area: usize, depth_band: u16) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let boxes = handseg::detect::propose_regions(&frame(depth, width, height)?, min_area, depth_band).map_err(err)?;
    Ok(boxes.into_iter().map(|b| (b.x0, b.y0, b.x1, b.y1)).collect())
}

/// Share of errors strictly below each threshold.
#[pyfunction]
fn precision_curve(errors: Vec<f64>, thresholds: Vec<f64>) -> PyResult<Vec<f64>> {
    eval::precision_curve(&errors, &thresholds).map(|c| c.normalized).map_err(err)
}

/// Share of frames whose misclassified share of hand pixels is at most each threshold.
#[pyfunction]
fn seg_error_curve(pred: Vec<Vec<u8>>, truth: Vec<Vec<u8>>, thresholds: Vec<f64>) -> PyResult<Vec<f64>> {
    let p: Vec<&[u8]> = pred.iter().map(Vec::as_slice).collect();
    let t: Vec<&[u8]> = truth.iter().map(Vec::as_slice).collect();
    eval::seg_error_curve(&p, &t, &thresholds).map(|c| c.fractions).map_err(err)
}

#[pyfunction]
fn tip_centers(classes: Vec<u8>, width: usize, height: usize) -> PyResult<Tips> {
    if classes.len() != width * height {
        return Err(PyValueError::new_err(format!("{} labels for a {width}x{height} map", classes.len())));
    }
    Ok(tips(&eval::tip_centers(&classes, width, height, eval::MIN_BLOB)))
}

#[pyfunction]
fn gradcheck_cases() -> Vec<String> {
    gradcheck::standard_cases().iter().map(|c| c.name()).collect()
}

/// Finite-difference check of the `index`-th standard case; returns the
/// largest relative error.
#[pyfunction]
fn gradcheck_case(index: usize, seed: u64) -> PyResult<f64> {
    let cases = gradcheck::standard_cases();
    let case = cases.get(index).ok_or_else(|| PyValueError::new_err(format!("no case {index}; there are {}", cases.len())))?;
    gradcheck::gradcheck(case, seed).map(|r| r.max_rel_error()).map_err(err)
}

#[pymodule]
#[pyo3(name = "handseg")]
fn handseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(train_network, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(depth_mode, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_hand, m)?)?;
    m.add_function(wrap_pyfunction!(propose_regions, m)?)?;
    m.add_function(wrap_pyfunction!(precision_curve, m)?)?;
    m.add_function(wrap_pyfunction!(seg_error_curve, m)?)?;
    m.add_function(wrap_pyfunction!(tip_centers, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_cases, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_case, m)?)?;
    m.add("GRADCHECK_TOLERANCE", gradcheck::TOLERANCE)?;
    Ok(())
}
