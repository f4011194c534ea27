//! Python bindings for the sfseg segmentation core.
//!
//! Volumes cross the boundary as flat row-major lists plus a
//! `(frames, height, width)` shape; `numpy.asarray(v.tolist()).reshape(v.shape)`
//! recovers an array.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sfseg::learn::{self, LossConfig, OptimizerConfig, TrainConfig, TrainingInstance};
use sfseg::metrics::{self, IouReport};
use sfseg::oracle;
use sfseg::synth::{self, NoiseKind, SynthShape, SynthSpec};
use sfseg::volume::{load_vvf, save_vvf};
use sfseg::{
    ChannelStack, ChannelWeights, FlowField, GaussianKernelSpec, KernelKind, SfsegError, Shape,
    VideoVolume,
};

fn err(e: SfsegError) -> PyErr {
    match e {
        SfsegError::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_numeric() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// A dense `(frames, height, width)` volume of floats.
#[pyclass(name = "Volume", module = "sfseg_py", frozen, from_py_object)]
#[derive(Clone)]
struct Volume(VideoVolume);

#[pymethods]
impl Volume {
    #[new]
    fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        VideoVolume::from_dims(frames, height, width, data).map(Volume).map_err(err)
    }

    #[staticmethod]
    fn zeros(frames: usize, height: usize, width: usize) -> PyResult<Self> {
        let shape = Shape::new(frames, height, width).map_err(err)?;
        Ok(Volume(VideoVolume::zeros(shape)))
    }

    /// Reads a single-channel VVF file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let stack = load_vvf(&path).map_err(err)?;
        if stack.len() != 1 {
            return Err(PyValueError::new_err(format!(
                "{} holds {} channels, expected 1",
                path.display(),
                stack.len()
            )));
        }
        Ok(Volume(stack.into_channels().remove(0)))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_vvf(&ChannelStack::single(self.0.clone()), path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.frames(), self.0.height(), self.0.width())
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<f64>> {
        if t >= self.0.frames() {
            return Err(PyIndexError::new_err(format!("frame {t} of {}", self.0.frames())));
        }
        Ok(self.0.frame(t).to_vec())
    }

    fn get(&self, t: usize, y: usize, x: usize) -> PyResult<f64> {
        if t >= self.0.frames() || y >= self.0.height() || x >= self.0.width() {
            return Err(PyIndexError::new_err(format!(
                "({t}, {y}, {x}) outside {}",
                self.0.shape()
            )));
        }
        Ok(self.0.get(t, y, x))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &Volume) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Volume({})", self.0.shape())
    }
}

/// Per-voxel displacement field: `dx` and `dy` volumes.
#[pyclass(name = "Flow", module = "sfseg_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Flow(FlowField);

#[pymethods]
impl Flow {
    #[new]
    fn new(dx: &Volume, dy: &Volume) -> PyResult<Self> {
        FlowField::new(dx.0.clone(), dy.0.clone()).map(Flow).map_err(err)
    }

    #[staticmethod]
    fn zeros(frames: usize, height: usize, width: usize) -> PyResult<Self> {
        let shape = Shape::new(frames, height, width).map_err(err)?;
        Ok(Flow(FlowField::zeros(shape)))
    }

    /// Reads a two-channel (dx, dy) VVF file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let stack = load_vvf(path).map_err(err)?;
        FlowField::from_stack(stack).map(Flow).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_vvf(&self.0.to_stack(), path).map_err(err)
    }

    #[getter]
    fn dx(&self) -> Volume {
        Volume(self.0.dx().clone())
    }

    #[getter]
    fn dy(&self) -> Volume {
        Volume(self.0.dy().clone())
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s.frames, s.height, s.width)
    }
}

/// Parameters of the refinement loop. Validated when used.
#[pyclass(name = "SpectralConfig", module = "sfseg_py", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PySpectralConfig {
    alpha: f64,
    p: f64,
    n_iter: usize,
    n_cont: usize,
    window: usize,
    kernel_radii: (usize, usize, usize),
    kernel_sigmas: (f64, f64, f64),
    steepness: f64,
    steepness_growth: f64,
    strict_bounds: bool,
}

#[pymethods]
impl PySpectralConfig {
    #[new]
    #[pyo3(signature = (
        alpha = 1.0, p = 0.1, n_iter = 5, n_cont = 3, window = 6,
        kernel_radii = (1, 3, 3), kernel_sigmas = (1.0, 2.0, 2.0),
        steepness = 4.0, steepness_growth = 2.0, strict_bounds = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: f64,
        p: f64,
        n_iter: usize,
        n_cont: usize,
        window: usize,
        kernel_radii: (usize, usize, usize),
        kernel_sigmas: (f64, f64, f64),
        steepness: f64,
        steepness_growth: f64,
        strict_bounds: bool,
    ) -> Self {
        PySpectralConfig {
            alpha,
            p,
            n_iter,
            n_cont,
            window,
            kernel_radii,
            kernel_sigmas,
            steepness,
            steepness_growth,
            strict_bounds,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "SpectralConfig(alpha={}, p={}, n_iter={}, n_cont={}, window={}, kernel_radii={:?}, \
             kernel_sigmas={:?}, steepness={}, steepness_growth={}, strict_bounds={})",
            self.alpha,
            self.p,
            self.n_iter,
            self.n_cont,
            self.window,
            self.kernel_radii,
            self.kernel_sigmas,
            self.steepness,
            self.steepness_growth,
            self.strict_bounds
        )
    }
}

impl PySpectralConfig {
    fn to_core(&self) -> PyResult<sfseg::SpectralConfig> {
        let (rt, ry, rx) = self.kernel_radii;
        let (st, sy, sx) = self.kernel_sigmas;
        let cfg = sfseg::SpectralConfig {
            alpha: self.alpha,
            p: self.p,
            n_iter: self.n_iter,
            n_cont: self.n_cont,
            window_radius_t: self.window,
            kernel: GaussianKernelSpec::new([rt, ry, rx], [st, sy, sx]).map_err(err)?,
            binarize_steepness_start: self.steepness,
            binarize_steepness_growth: self.steepness_growth,
            strict_paper_bounds: self.strict_bounds,
        };
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }
}

fn config(cfg: Option<&PySpectralConfig>) -> PyResult<sfseg::SpectralConfig> {
    cfg.map_or_else(|| Ok(sfseg::SpectralConfig::default()), |c| c.to_core())
}

fn kernel(radii: (usize, usize, usize), sigmas: (f64, f64, f64)) -> PyResult<GaussianKernelSpec> {
    GaussianKernelSpec::new([radii.0, radii.1, radii.2], [sigmas.0, sigmas.1, sigmas.2]).map_err(err)
}

/// Per-frame scores and their mean.
#[pyclass(name = "FrameScores", module = "sfseg_py", frozen, get_all)]
struct FrameScores {
    frames: Vec<usize>,
    per_frame: Vec<f64>,
    mean: f64,
}

#[pymethods]
impl FrameScores {
    fn __repr__(&self) -> String {
        format!("FrameScores(mean={:.6}, frames={})", self.mean, self.frames.len())
    }
}

impl From<IouReport> for FrameScores {
    fn from(r: IouReport) -> Self {
        FrameScores {
            frames: r.frames,
            per_frame: r.per_frame,
            mean: r.mean,
        }
    }
}

/// One unnormalized power-iteration step computed by 3D filtering.
#[pyfunction]
#[pyo3(signature = (x, s, f, config = None))]
fn power_iteration_step(x: &Volume, s: &Volume, f: &Volume, config: Option<&PySpectralConfig>) -> PyResult<Volume> {
    let cfg = self::config(config)?;
    sfseg::power_iteration_step(&x.0, &s.0, &f.0, &cfg)
        .map(Volume)
        .map_err(err)
}

/// Full-video refinement. The pairwise map `f` defaults to `s`.
#[pyfunction]
#[pyo3(signature = (s, f = None, config = None, x0 = None))]
fn segment_offline(
    py: Python<'_>,
    s: &Volume,
    f: Option<&Volume>,
    config: Option<&PySpectralConfig>,
    x0: Option<&Volume>,
) -> PyResult<Volume> {
    let cfg = self::config(config)?;
    let f = f.unwrap_or(s);
    py.detach(|| sfseg::segment_offline(&s.0, &f.0, &cfg, x0.map(|v| &v.0)))
        .map(Volume)
        .map_err(err)
}

/// Refinement over sliding sub-windows of `sub_window` frames.
#[pyfunction]
#[pyo3(signature = (s, f = None, config = None, sub_window = 5, stride = 1))]
fn segment_online(
    py: Python<'_>,
    s: &Volume,
    f: Option<&Volume>,
    config: Option<&PySpectralConfig>,
    sub_window: usize,
    stride: usize,
) -> PyResult<Volume> {
    let cfg = self::config(config)?;
    let f = f.unwrap_or(s);
    py.detach(|| sfseg::segment_online(&s.0, &f.0, &cfg, sub_window, stride))
        .map(Volume)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (v, radii = (1, 3, 3), sigmas = (1.0, 2.0, 2.0)))]
fn convolve_separable(v: &Volume, radii: (usize, usize, usize), sigmas: (f64, f64, f64)) -> PyResult<Volume> {
    Ok(Volume(sfseg::convolve_separable(&v.0, &kernel(radii, sigmas)?)))
}

/// Sigmoid-weighted combination of channels into one map.
#[pyfunction]
fn combine_channels(channels: Vec<Volume>, weights: Vec<f64>, bias: f64) -> PyResult<Volume> {
    let stack = ChannelStack::new(channels.into_iter().map(|v| v.0).collect()).map_err(err)?;
    let cw = ChannelWeights::new(weights, bias).map_err(err)?;
    sfseg::combine_channels(&stack, &cw).map(Volume).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = 0.5))]
fn iou(pred: &Volume, gt: &Volume, threshold: f64) -> PyResult<FrameScores> {
    metrics::iou(&pred.0, &gt.0, threshold).map(Into::into).map_err(err)
}

/// Temporal consistency over the interior frames.
#[pyfunction]
#[pyo3(signature = (pred, gt, flow_dir, flow_rev, threshold = 0.5))]
fn tcont(pred: &Volume, gt: &Volume, flow_dir: &Flow, flow_rev: &Flow, threshold: f64) -> PyResult<FrameScores> {
    metrics::tcont(&pred.0, &gt.0, &flow_dir.0, &flow_rev.0, threshold)
        .map(Into::into)
        .map_err(err)
}

/// A moving rectangle (`size` = (height, width)) or disk with its exact flows.
/// Returns `(mask, flow_dir, flow_rev)`.
#[pyfunction]
#[pyo3(signature = (
    frames = 11, height = 32, width = 32, shape = "rect", size = (8, 10), radius = 5,
    start = None, velocity = (0, 1), seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn synth_video(
    frames: usize,
    height: usize,
    width: usize,
    shape: &str,
    size: (usize, usize),
    radius: usize,
    start: Option<(i64, i64)>,
    velocity: (i64, i64),
    seed: u64,
) -> PyResult<(Volume, Flow, Flow)> {
    let shape = match shape {
        "rect" | "rectangle" => SynthShape::Rectangle {
            height: size.0,
            width: size.1,
        },
        "disk" => SynthShape::Disk { radius },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown shape {other:?} (expected rect or disk)"
            )))
        }
    };
    let video = synth::generate(&SynthSpec {
        frames,
        height,
        width,
        shape,
        start,
        velocity,
        seed,
    })
    .map_err(err)?;
    Ok((Volume(video.mask), Flow(video.flow_dir), Flow(video.flow_rev)))
}

/// Corrupts `v` with `uniform`, `sp` (salt and pepper) or `bwr` (black and
/// white rectangles) noise at the default strengths.
#[pyfunction]
fn add_noise(v: &Volume, kind: &str, seed: u64) -> PyResult<Volume> {
    let kind: NoiseKind = kind.parse().map_err(err)?;
    kind.apply(&v.0, seed).map(Volume).map_err(err)
}

/// Leading eigenvector of the explicit affinity matrix (small inputs only).
/// Returns `(vector, eigenvalue)`.
#[pyfunction]
#[pyo3(signature = (
    s, f = None, alpha = 1.0, p = 0.1, kind = "taylor",
    radii = (1, 3, 3), sigmas = (1.0, 2.0, 2.0), tol = 1e-10, max_iter = 100_000
))]
#[allow(clippy::too_many_arguments)]
fn oracle_eigenvector(
    py: Python<'_>,
    s: &Volume,
    f: Option<&Volume>,
    alpha: f64,
    p: f64,
    kind: &str,
    radii: (usize, usize, usize),
    sigmas: (f64, f64, f64),
    tol: f64,
    max_iter: usize,
) -> PyResult<(Volume, f64)> {
    let kind: KernelKind = kind.parse().map_err(err)?;
    let spec = kernel(radii, sigmas)?;
    let f = f.unwrap_or(s);
    let eig = py
        .detach(|| {
            let g = oracle::build_matrix(&s.0, &f.0, &spec, alpha, p, kind)?;
            oracle::leading_eigenvector(&g, tol, max_iter)
        })
        .map_err(err)?;
    let v = VideoVolume::new(s.0.shape(), eig.vector).map_err(err)?;
    Ok((Volume(v), eig.value))
}

/// Angle in degrees between two volumes seen as vectors.
#[pyfunction]
fn angle_degrees(a: &Volume, b: &Volume) -> PyResult<f64> {
    sfseg::angle_degrees(a.0.data(), b.0.data()).map_err(err)
}

/// Outcome of [`train`]: learned channel weights and the loss history.
#[pyclass(name = "TrainResult", module = "sfseg_py", frozen, get_all)]
struct TrainResult {
    weights: Vec<f64>,
    bias: f64,
    best_epoch: usize,
    /// `(epoch, loss, learning_rate)` per record.
    history: Vec<(usize, f64, f64)>,
}

/// Learns sigmoid channel weights on `(channels, gt)` pairs by minimizing the
/// Focal-Dice loss of the refined output. The same weights feed the unary and
/// pairwise maps.
#[pyfunction]
#[pyo3(signature = (
    instances, config = None, epochs = 100, lr = 1e-2, fd_step = 1e-3,
    clip_frames = None, gamma = 0.75, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    instances: Vec<(Vec<Volume>, Volume)>,
    config: Option<&PySpectralConfig>,
    epochs: usize,
    lr: f64,
    fd_step: f64,
    clip_frames: Option<usize>,
    gamma: f64,
    seed: u64,
) -> PyResult<TrainResult> {
    let spectral = self::config(config)?;
    let batch = instances
        .into_iter()
        .map(|(channels, gt)| {
            let stack = ChannelStack::new(channels.into_iter().map(|v| v.0).collect())?;
            TrainingInstance::new(stack, gt.0)
        })
        .collect::<sfseg::Result<Vec<_>>>()
        .map_err(err)?;
    let loss = LossConfig {
        gamma,
        ..LossConfig::default()
    };
    let cfg = TrainConfig {
        epochs,
        fd_step,
        optimizer: OptimizerConfig {
            lr,
            ..OptimizerConfig::default()
        },
        clip_frames,
        seed,
        ..TrainConfig::default()
    };
    let out = py
        .detach(|| learn::train(&batch, &spectral, &loss, &cfg))
        .map_err(err)?;
    Ok(TrainResult {
        weights: out.weights.unary.w.clone(),
        bias: out.weights.unary.b,
        best_epoch: out.best_epoch,
        history: out.history.iter().map(|r| (r.epoch, r.loss, r.lr)).collect(),
    })
}

#[pymodule]
fn sfseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<Flow>()?;
    m.add_class::<PySpectralConfig>()?;
    m.add_class::<FrameScores>()?;
    m.add_class::<TrainResult>()?;
    m.add_function(wrap_pyfunction!(power_iteration_step, m)?)?;
    m.add_function(wrap_pyfunction!(segment_offline, m)?)?;
    m.add_function(wrap_pyfunction!(segment_online, m)?)?;
    m.add_function(wrap_pyfunction!(convolve_separable, m)?)?;
    m.add_function(wrap_pyfunction!(combine_channels, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(tcont, m)?)?;
    m.add_function(wrap_pyfunction!(synth_video, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_eigenvector, m)?)?;
    m.add_function(wrap_pyfunction!(angle_degrees, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
