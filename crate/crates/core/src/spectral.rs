//! Power iteration on the space-time pixel graph, run as 3D filtering.
//!
//! With the first-order affinity `s_i^p s_j^p [1 - alpha (f_i - f_j)^2] G_ij`,
//! one multiplication by the adjacency matrix expands into three Gaussian
//! convolutions of voxel-wise products, so the matrix is never built:
//!
//! ```text
//! X' = S^p * [ (1/alpha - F^2) * G(S^p X) - G(F^2 S^p X) + 2 F * G(F S^p X) ]
//! ```
//!
//! `X'` equals `M x / alpha`; the constant drops out after normalization.

use log::{info, warn};
use rayon::prelude::*;

use crate::error::{Result, SfsegError};
use crate::gaussian3d::{GaussianKernelSpec, SeparableKernel, PAR_MIN_VOXELS};
use crate::volume::{ChannelStack, Shape, VideoVolume};

/// Parameters of the spectral refinement loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    /// Feature contrast weight; keep `<= 1` for features in `[0, 1]`.
    pub alpha: f64,
    /// Exponent applied to the unary map.
    pub p: f64,
    /// Total sweeps.
    pub n_iter: usize,
    /// Sweeps before soft-binarization starts.
    pub n_cont: usize,
    /// Half-width of the temporal window around each updated frame.
    pub window_radius_t: usize,
    pub kernel: GaussianKernelSpec,
    pub binarize_steepness_start: f64,
    pub binarize_steepness_growth: f64,
    /// Leave the first and last `window_radius_t` frames untouched, as in the
    /// textbook loop bounds.
    pub strict_paper_bounds: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            alpha: 1.0,
            p: 0.1,
            n_iter: 5,
            n_cont: 3,
            window_radius_t: 6,
            kernel: GaussianKernelSpec::default(),
            binarize_steepness_start: 4.0,
            binarize_steepness_growth: 2.0,
            strict_paper_bounds: false,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SfsegError::Parameter(m));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.p >= 0.0) || !self.p.is_finite() {
            return bad(format!("p must be non-negative, got {}", self.p));
        }
        if self.n_cont > self.n_iter {
            return bad(format!(
                "continuous sweeps ({}) exceed total sweeps ({})",
                self.n_cont, self.n_iter
            ));
        }
        if !(self.binarize_steepness_start > 0.0) || !self.binarize_steepness_start.is_finite() {
            return bad(format!(
                "binarization steepness must be positive, got {}",
                self.binarize_steepness_start
            ));
        }
        if !(self.binarize_steepness_growth > 0.0) || !self.binarize_steepness_growth.is_finite() {
            return bad(format!(
                "binarization growth must be positive, got {}",
                self.binarize_steepness_growth
            ));
        }
        Ok(())
    }

    /// Steepness used after sweep `sweep` (1-based), if that sweep binarizes.
    pub fn steepness_at(&self, sweep: usize) -> Option<f64> {
        (sweep > self.n_cont).then(|| {
            self.binarize_steepness_start
                * self
                    .binarize_steepness_growth
                    .powi((sweep - self.n_cont - 1) as i32)
        })
    }
}

/// Weights of the sigmoid channel combiner.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ChannelWeights {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(SfsegError::Validation("channel weights are empty".into()));
        }
        if w.iter().chain(std::iter::once(&b)).any(|v| !v.is_finite()) {
            return Err(SfsegError::Validation("channel weights must be finite".into()));
        }
        Ok(ChannelWeights { w, b })
    }

    /// `w_i = 1/n`, `b = 0`: the plain average of the channels.
    pub fn uniform(n: usize) -> Self {
        ChannelWeights {
            w: vec![1.0 / n as f64; n],
            b: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Increasing logistic function, evaluated without overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Voxel-wise `sigmoid(sum_i w_i * channel_i + b)`.
pub fn combine_channels(stack: &ChannelStack, cw: &ChannelWeights) -> Result<VideoVolume> {
    if cw.len() != stack.len() {
        return Err(SfsegError::Shape(format!(
            "{} weights for {} channels",
            cw.len(),
            stack.len()
        )));
    }
    let shape = stack.shape();
    let mut acc = vec![cw.b; shape.voxels()];
    for (c, &w) in stack.channels().iter().zip(&cw.w) {
        for (a, &v) in acc.iter_mut().zip(c.data()) {
            *a += w * v;
        }
    }
    for a in acc.iter_mut() {
        *a = sigmoid(*a);
    }
    VideoVolume::new(shape, acc)
}

/// One un-normalized multiplication by the implicit adjacency matrix.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub volume: VideoVolume,
    /// Voxels whose value came out clearly negative and was clamped to zero.
    pub clamped: usize,
}

/// Precomputed voxel-wise maps for repeated power-iteration steps on a fixed
/// `(S, F)` pair.
#[derive(Debug, Clone)]
pub struct SpectralOperator {
    shape: Shape,
    sp: Vec<f64>,
    f: Vec<f64>,
    f2: Vec<f64>,
    /// `1/alpha - F^2`
    bracket: Vec<f64>,
    kernel: SeparableKernel,
}

impl SpectralOperator {
    pub fn new(s: &VideoVolume, f: &VideoVolume, cfg: &SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        s.ensure_same_shape(f, "unary vs pairwise map")?;
        s.ensure_range(0.0, 1.0, "unary map")?;
        let outside = f.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        if cfg.alpha > 1.0 || outside > 0 {
            warn!(
                "alpha = {} with {outside} pairwise values outside [0, 1]: affinities may go \
                 negative and affected voxels are clamped to zero",
                cfg.alpha
            );
        }
        let inv_alpha = 1.0 / cfg.alpha;
        let sp: Vec<f64> = s.data().iter().map(|&v| v.powf(cfg.p)).collect();
        let fv = f.data().to_vec();
        let f2: Vec<f64> = fv.iter().map(|&v| v * v).collect();
        let bracket = f2.iter().map(|&v| inv_alpha - v).collect();
        Ok(SpectralOperator {
            shape: s.shape(),
            sp,
            f: fv,
            f2,
            bracket,
            kernel: cfg.kernel.build(),
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Applies the operator to the whole volume.
    pub fn apply(&self, x: &VideoVolume) -> Result<StepOutput> {
        if x.shape() != self.shape {
            return Err(SfsegError::Shape(format!(
                "iterate is {} but the feature maps are {}",
                x.shape(),
                self.shape
            )));
        }
        let (data, clamped) = self.apply_frames(x.data(), 0, self.shape.frames)?;
        Ok(StepOutput {
            volume: VideoVolume::from_parts_unchecked(self.shape, data),
            clamped,
        })
    }

    /// Applies the operator to frames `lo..hi` treated as a standalone video
    /// (zero padding at the window ends). `x` covers the full volume.
    pub fn apply_frames(&self, x: &[f64], lo: usize, hi: usize) -> Result<(Vec<f64>, usize)> {
        let fl = self.shape.frame_len();
        let range = lo * fl..hi * fl;
        let shape = Shape {
            frames: hi - lo,
            ..self.shape
        };
        let n = shape.voxels();
        let (sp, f, f2, br) = (
            &self.sp[range.clone()],
            &self.f[range.clone()],
            &self.f2[range.clone()],
            &self.bracket[range.clone()],
        );
        let x = &x[range];

        // three interleaved lanes: S^p x, F^2 S^p x, F S^p x
        let mut lanes = vec![0.0; 3 * n];
        fill_frames(3 * fl, n, &mut lanes, |o, chunk| {
            for (i, l) in chunk.chunks_exact_mut(3).enumerate() {
                let j = o + i;
                let v = sp[j] * x[j];
                l[0] = v;
                l[1] = f2[j] * v;
                l[2] = f[j] * v;
            }
        });
        let mut g = vec![0.0; 3 * n];
        let mut scratch = vec![0.0; 3 * n];
        self.kernel.convolve_lanes(shape, 3, &lanes, &mut g, &mut scratch);
        drop(scratch);
        let mut a = vec![0.0; n];

        // the result overwrites `a`
        let frames = shape.frames;
        let mut counts = vec![0usize; frames];
        let combine = |o: usize, out: &mut [f64]| -> usize {
            let mut clamped = 0;
            for i in 0..out.len() {
                let j = o + i;
                let (ga, gb, gc) = (g[3 * j], g[3 * j + 1], g[3 * j + 2]);
                let t1 = br[j] * ga;
                let t3 = 2.0 * f[j] * gc;
                let v = sp[j] * (t1 - gb + t3);
                if v < 0.0 {
                    let scale = sp[j] * (t1.abs() + gb.abs() + t3.abs());
                    if v < -1e-12 * scale {
                        clamped += 1;
                    }
                    out[i] = 0.0;
                } else {
                    out[i] = v;
                }
            }
            clamped
        };
        if n >= PAR_MIN_VOXELS {
            a.par_chunks_mut(fl)
                .zip(counts.par_iter_mut())
                .enumerate()
                .for_each(|(t, (out, cnt))| *cnt = combine(t * fl, out));
        } else {
            for (t, (out, cnt)) in a.chunks_mut(fl).zip(counts.iter_mut()).enumerate() {
                *cnt = combine(t * fl, out);
            }
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            let (t, y, xx) = shape.coords(i);
            return Err(SfsegError::Numeric(format!(
                "non-finite value {} at frame {}, row {y}, column {xx} during power iteration",
                a[i],
                t + lo
            )));
        }
        Ok((a, counts.iter().sum()))
    }
}

/// Fills `buf` one frame (`chunk` values) at a time, in parallel for large
/// volumes. The closure gets the first voxel index of its frame.
fn fill_frames<F>(chunk: usize, n: usize, buf: &mut [f64], fill: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let per_voxel = buf.len() / n;
    let first = |t: usize| t * chunk / per_voxel;
    if n >= PAR_MIN_VOXELS {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(t, c)| fill(first(t), c));
    } else {
        fill(0, buf);
    }
}

/// One power-iteration step, not normalized.
pub fn power_iteration_step(
    x: &VideoVolume,
    s: &VideoVolume,
    f: &VideoVolume,
    cfg: &SpectralConfig,
) -> Result<VideoVolume> {
    Ok(SpectralOperator::new(s, f, cfg)?.apply(x)?.volume)
}

/// Euclidean norm with per-frame partial sums combined in frame order.
pub fn l2_norm(x: &VideoVolume) -> f64 {
    let fl = x.shape().frame_len();
    let partial: Vec<f64> = if x.len() >= PAR_MIN_VOXELS {
        x.data()
            .par_chunks(fl)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect()
    } else {
        x.data()
            .chunks(fl)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect()
    };
    partial.iter().sum::<f64>().sqrt()
}

/// Scales `x` to unit Euclidean norm.
pub fn normalize_l2(x: &VideoVolume) -> Result<VideoVolume> {
    let norm = l2_norm(x);
    if norm == 0.0 {
        return Err(SfsegError::Degenerate(
            "iterate collapsed to zero; the unary map may be empty".into(),
        ));
    }
    if !norm.is_finite() {
        return Err(SfsegError::Numeric(format!("iterate norm is {norm}")));
    }
    Ok(VideoVolume::from_parts_unchecked(
        x.shape(),
        x.data().iter().map(|v| v / norm).collect(),
    ))
}

/// Mean of the strictly positive values, or 0 when there are none.
pub fn positive_mean(x: &VideoVolume) -> f64 {
    let (sum, count) = x
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Voxel-wise `sigmoid(steepness * (x - theta))` with `theta` the mean of the
/// positive values of `x`.
pub fn soft_binarize(x: &VideoVolume, steepness: f64) -> Result<VideoVolume> {
    if !(steepness > 0.0) {
        return Err(SfsegError::Parameter(format!(
            "steepness must be positive, got {steepness}"
        )));
    }
    let theta = positive_mean(x);
    Ok(VideoVolume::from_parts_unchecked(
        x.shape(),
        x.data()
            .iter()
            .map(|&v| {
                if v == theta {
                    0.5
                } else {
                    sigmoid(steepness * (v - theta))
                }
            })
            .collect(),
    ))
}

/// Soft-binarization step of the refinement loop: `sigmoid(steepness * (x/m - 1))`
/// with `m` the mean over all voxels, zeros included.
///
/// Measuring the centre on the whole volume keeps voxels that `S^p` pins at
/// zero from pulling it up onto the object, and dividing by it makes the
/// steepness independent of the iterate's scale.
pub fn binarize_sweep(x: &VideoVolume, steepness: f64) -> Result<VideoVolume> {
    if !(steepness > 0.0) {
        return Err(SfsegError::Parameter(format!(
            "steepness must be positive, got {steepness}"
        )));
    }
    let mean = x.data().iter().sum::<f64>() / x.len() as f64;
    if !(mean > 0.0) {
        return Err(SfsegError::Degenerate(
            "iterate has no positive mass to binarize around".into(),
        ));
    }
    Ok(VideoVolume::from_parts_unchecked(
        x.shape(),
        x.data()
            .iter()
            .map(|&v| sigmoid(steepness * (v / mean - 1.0)))
            .collect(),
    ))
}

/// Divides by the maximum so the largest value is 1; all-nonpositive input is
/// returned unchanged.
pub fn rescale_to_unit_max(x: &VideoVolume) -> VideoVolume {
    let max = x.max();
    if max > 0.0 {
        VideoVolume::from_parts_unchecked(x.shape(), x.data().iter().map(|v| v / max).collect())
    } else {
        x.clone()
    }
}

/// Binary mask of voxels `>= threshold`.
pub fn hard_threshold(x: &VideoVolume, threshold: f64) -> VideoVolume {
    VideoVolume::from_parts_unchecked(
        x.shape(),
        x.data()
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Diagnostics of a full refinement run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub sweeps: usize,
    pub clamped_voxels: usize,
}

/// Full refinement loop over the whole video.
///
/// Each sweep updates every frame from its temporal window, normalizes the
/// whole volume, and after `n_cont` sweeps soft-binarizes it with
/// [`binarize_sweep`]. The iterate starts from `x0`, or from `S` when absent.
pub fn segment_offline(
    s: &VideoVolume,
    f: &VideoVolume,
    cfg: &SpectralConfig,
    x0: Option<&VideoVolume>,
) -> Result<VideoVolume> {
    segment_offline_observed(s, f, cfg, x0, &mut |_, _| {}).map(|(x, _)| x)
}

/// [`segment_offline`] that hands every post-sweep iterate to `observer`.
pub fn segment_offline_observed(
    s: &VideoVolume,
    f: &VideoVolume,
    cfg: &SpectralConfig,
    x0: Option<&VideoVolume>,
    observer: &mut dyn FnMut(usize, &VideoVolume),
) -> Result<(VideoVolume, SweepReport)> {
    let op = SpectralOperator::new(s, f, cfg)?;
    let mut x = match x0 {
        Some(x0) => {
            x0.ensure_same_shape(s, "initial iterate vs unary map")?;
            x0.ensure_range(0.0, f64::INFINITY, "initial iterate")?;
            x0.clone()
        }
        None => s.clone(),
    };
    let shape = s.shape();
    let nf = shape.frames;
    let fl = shape.frame_len();
    let t = cfg.window_radius_t;
    let updated = if cfg.strict_paper_bounds {
        let lo = t.min(nf);
        lo..nf.saturating_sub(t).max(lo)
    } else {
        0..nf
    };
    if updated.is_empty() {
        warn!("strict frame bounds with window radius {t} leave no frame of {nf} to update");
    }
    // a window at least as wide as the kernel sees every neighbour of its
    // centre frame, so one full-volume step gives identical values
    let full_volume = t >= cfg.kernel.radius_t();
    let mut report = SweepReport::default();

    for sweep in 1..=cfg.n_iter {
        let mut next = x.data().to_vec();
        if full_volume {
            let (data, clamped) = op.apply_frames(x.data(), 0, nf)?;
            report.clamped_voxels += clamped;
            let r = updated.start * fl..updated.end * fl;
            next[r.clone()].copy_from_slice(&data[r]);
        } else {
            let frames: Vec<(usize, Vec<f64>, usize)> = updated
                .clone()
                .into_par_iter()
                .map(|i| {
                    let lo = i.saturating_sub(t);
                    let hi = (i + t + 1).min(nf);
                    let (data, clamped) = op.apply_frames(x.data(), lo, hi)?;
                    let k = i - lo;
                    Ok((i, data[k * fl..(k + 1) * fl].to_vec(), clamped))
                })
                .collect::<Result<_>>()?;
            for (i, frame, clamped) in frames {
                next[i * fl..(i + 1) * fl].copy_from_slice(&frame);
                report.clamped_voxels += clamped;
            }
        }
        x = normalize_l2(&VideoVolume::from_parts_unchecked(shape, next))?;
        if let Some(steepness) = cfg.steepness_at(sweep) {
            x = binarize_sweep(&x, steepness)?;
        }
        report.sweeps = sweep;
        observer(sweep, &x);
    }
    if report.clamped_voxels > 0 {
        warn!("{} voxel updates clamped at zero", report.clamped_voxels);
    }
    Ok((x, report))
}

/// Refinement over sliding sub-windows of `sub_window` frames.
///
/// Each window runs the offline loop, warm-started from the previous window's
/// result on the overlapping frames and from `S` elsewhere. A frame's output is
/// taken from the last window that covers it. The final window is aligned to
/// the end of the video when the stride does not land there.
pub fn segment_online(
    s: &VideoVolume,
    f: &VideoVolume,
    cfg: &SpectralConfig,
    sub_window: usize,
    stride: usize,
) -> Result<VideoVolume> {
    cfg.validate()?;
    s.ensure_same_shape(f, "unary vs pairwise map")?;
    if sub_window < 2 * cfg.window_radius_t + 1 {
        return Err(SfsegError::Parameter(format!(
            "sub-window of {sub_window} frames is narrower than the temporal window (2*{}+1)",
            cfg.window_radius_t
        )));
    }
    if stride == 0 || stride > sub_window {
        return Err(SfsegError::Parameter(format!(
            "stride must be in 1..={sub_window}, got {stride}"
        )));
    }
    let nf = s.frames();
    if sub_window > nf {
        info!("sub-window {sub_window} exceeds the {nf}-frame video; running offline instead");
        return segment_offline(s, f, cfg, None);
    }
    let fl = s.shape().frame_len();
    let last = nf - sub_window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("at least one window") != last {
        starts.push(last);
    }

    let mut result = vec![0.0; s.len()];
    let mut covered = 0usize;
    for start in starts {
        let end = start + sub_window;
        let s_w = s.slice_frames(start, end)?;
        let f_w = f.slice_frames(start, end)?;
        let mut x0 = s_w.data().to_vec();
        let overlap = covered.saturating_sub(start).min(sub_window);
        x0[..overlap * fl].copy_from_slice(&result[start * fl..(start + overlap) * fl]);
        let x0 = VideoVolume::from_parts_unchecked(s_w.shape(), x0);
        let out = segment_offline(&s_w, &f_w, cfg, Some(&x0))?;
        result[start * fl..end * fl].copy_from_slice(out.data());
        covered = end;
    }
    Ok(VideoVolume::from_parts_unchecked(s.shape(), result))
}
