//! Synthetic moving-shape videos and seeded noise injectors.
//!
//! All randomness comes from [`SplitMix`]: the SplitMix64 generator (state
//! initialised to the seed, Vigna's constants), with uniform doubles taken
//! from the top 53 bits of each output. The same seed produces the same bytes
//! on every platform.

use std::fmt;
use std::str::FromStr;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Result, SfsegError};
use crate::volume::{ChannelStack, FlowField, Shape, VideoVolume};

/// Portable seeded generator.
#[derive(Debug, Clone)]
pub struct SplitMix(SplitMix64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthShape {
    Rectangle { height: usize, width: usize },
    Disk { radius: usize },
}

impl SynthShape {
    /// Offsets of the bounding box (rows, cols) relative to the anchor.
    fn extent(&self) -> ((i64, i64), (i64, i64)) {
        match *self {
            SynthShape::Rectangle { height, width } => {
                ((0, height as i64 - 1), (0, width as i64 - 1))
            }
            SynthShape::Disk { radius } => {
                let r = radius as i64;
                ((-r, r), (-r, r))
            }
        }
    }

    fn contains(&self, anchor: (i64, i64), y: i64, x: i64) -> bool {
        let (dy, dx) = (y - anchor.0, x - anchor.1);
        match *self {
            SynthShape::Rectangle { height, width } => {
                (0..height as i64).contains(&dy) && (0..width as i64).contains(&dx)
            }
            SynthShape::Disk { radius } => dy * dy + dx * dx <= (radius * radius) as i64,
        }
    }
}

/// A single shape translating at constant integer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: SynthShape,
    /// Anchor (row, col) in frame 0: the top-left corner of a rectangle or the
    /// centre of a disk. Drawn from `seed` when absent.
    pub start: Option<(i64, i64)>,
    /// Pixels per frame as (rows, cols).
    pub velocity: (i64, i64),
    pub seed: u64,
}

/// Clean mask plus the flows that transport it exactly.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub mask: VideoVolume,
    pub flow_dir: FlowField,
    pub flow_rev: FlowField,
}

impl SynthSpec {
    /// Range of anchors along one axis that keep the shape inside for all frames.
    fn anchor_range(&self, lo_off: i64, hi_off: i64, v: i64, size: usize) -> (i64, i64) {
        let travel = v * (self.frames as i64 - 1);
        let lo = -lo_off - travel.min(0);
        let hi = size as i64 - 1 - hi_off - travel.max(0);
        (lo, hi)
    }

    fn resolve_start(&self) -> Result<(i64, i64)> {
        let ((ry0, ry1), (rx0, rx1)) = self.shape.extent();
        let (ylo, yhi) = self.anchor_range(ry0, ry1, self.velocity.0, self.height);
        let (xlo, xhi) = self.anchor_range(rx0, rx1, self.velocity.1, self.width);
        let start = match self.start {
            Some(s) => s,
            None => {
                if ylo > yhi || xlo > xhi {
                    return Err(SfsegError::Parameter(
                        "shape cannot stay inside the frame at this velocity".into(),
                    ));
                }
                let mut rng = SplitMix::new(self.seed);
                let y = ylo + rng.below((yhi - ylo + 1) as usize) as i64;
                let x = xlo + rng.below((xhi - xlo + 1) as usize) as i64;
                (y, x)
            }
        };
        if !(ylo..=yhi).contains(&start.0) || !(xlo..=xhi).contains(&start.1) {
            return Err(SfsegError::Parameter(format!(
                "shape starting at {start:?} with velocity {:?} exits the {}x{} frame",
                self.velocity, self.height, self.width
            )));
        }
        Ok(start)
    }

    fn anchor(&self, start: (i64, i64), t: usize) -> (i64, i64) {
        (
            start.0 + self.velocity.0 * t as i64,
            start.1 + self.velocity.1 * t as i64,
        )
    }
}

/// Renders the mask video and its direct/reverse flows.
///
/// `flow_dir[i]` is `-velocity` on the union of the shape in frames `i` and
/// `i + 1` (zero elsewhere and on the last frame), so warping frame `i` with it
/// reproduces frame `i + 1`. `flow_rev[i]` is `+velocity` on the union with
/// frame `i - 1` and reproduces frame `i - 1`.
pub fn generate(spec: &SynthSpec) -> Result<SynthVideo> {
    let shape = Shape::new(spec.frames, spec.height, spec.width)?;
    if let SynthShape::Rectangle { height: 0, .. } | SynthShape::Rectangle { width: 0, .. } =
        spec.shape
    {
        return Err(SfsegError::Parameter("rectangle must be at least 1x1".into()));
    }
    let start = spec.resolve_start()?;
    let inside = |t: usize, y: usize, x: usize| {
        spec.shape
            .contains(spec.anchor(start, t), y as i64, x as i64)
    };
    let mask = VideoVolume::from_fn(shape, |t, y, x| if inside(t, y, x) { 1.0 } else { 0.0 })?;
    let (vy, vx) = (spec.velocity.0 as f64, spec.velocity.1 as f64);
    let nf = spec.frames;
    let dir_on = |t: usize, y: usize, x: usize| t + 1 < nf && (inside(t, y, x) || inside(t + 1, y, x));
    let rev_on = |t: usize, y: usize, x: usize| t > 0 && (inside(t, y, x) || inside(t - 1, y, x));
    let field = |on: &dyn Fn(usize, usize, usize) -> bool, v: f64| {
        VideoVolume::from_fn(shape, |t, y, x| if on(t, y, x) { v } else { 0.0 })
    };
    let flow_dir = FlowField::new(field(&dir_on, -vx)?, field(&dir_on, -vy)?)?;
    let flow_rev = FlowField::new(field(&rev_on, vx)?, field(&rev_on, vy)?)?;
    Ok(SynthVideo {
        mask,
        flow_dir,
        flow_rev,
    })
}

/// Adds `U[0, amplitude]` to every voxel, then divides by the maximum.
pub fn add_uniform_noise(v: &VideoVolume, amplitude: f64, seed: u64) -> Result<VideoVolume> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(SfsegError::Parameter(format!(
            "noise amplitude must be non-negative, got {amplitude}"
        )));
    }
    let mut rng = SplitMix::new(seed);
    let noisy: Vec<f64> = v
        .data()
        .iter()
        .map(|&x| x + amplitude * rng.next_f64())
        .collect();
    let max = noisy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let out = if max > 0.0 {
        noisy.into_iter().map(|x| x / max).collect()
    } else {
        noisy
    };
    VideoVolume::new(v.shape(), out)
}

/// Replaces each voxel, with probability `prob`, by 0 or 1 (fair coin).
pub fn add_salt_pepper(v: &VideoVolume, prob: f64, seed: u64) -> Result<VideoVolume> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(SfsegError::Parameter(format!(
            "replacement probability must be in [0, 1], got {prob}"
        )));
    }
    let mut rng = SplitMix::new(seed);
    let out = v
        .data()
        .iter()
        .map(|&x| {
            let hit = rng.next_f64() < prob;
            let bit = rng.coin();
            if hit {
                if bit {
                    1.0
                } else {
                    0.0
                }
            } else {
                x
            }
        })
        .collect();
    VideoVolume::new(v.shape(), out)
}

/// Paints one axis-aligned rectangle per frame, filled with 0 or 1.
///
/// The area is a uniform fraction of the frame in `[min_frac, max_frac]`. The
/// rectangle stays `margin` pixels away from the border, with the margin
/// clamped to a quarter of each frame side for small frames.
pub fn add_bw_rectangles(
    v: &VideoVolume,
    min_frac: f64,
    max_frac: f64,
    margin: usize,
    seed: u64,
) -> Result<VideoVolume> {
    if !(0.0..=1.0).contains(&min_frac) || !(min_frac..=1.0).contains(&max_frac) {
        return Err(SfsegError::Parameter(format!(
            "need 0 <= min_frac <= max_frac <= 1, got {min_frac}..{max_frac}"
        )));
    }
    let (h, w) = (v.height(), v.width());
    let m = margin.min(h / 4).min(w / 4);
    let (avail_h, avail_w) = (h - 2 * m, w - 2 * m);
    let mut rng = SplitMix::new(seed);
    let mut data = v.data().to_vec();
    for t in 0..v.frames() {
        let frac = min_frac + (max_frac - min_frac) * rng.next_f64();
        let area = ((frac * (h * w) as f64).round() as usize).min(avail_h * avail_w);
        let r1 = rng.next_f64();
        let r2 = rng.next_f64();
        let r3 = rng.next_f64();
        let fill = if rng.coin() { 1.0 } else { 0.0 };
        if area == 0 {
            continue;
        }
        let lo = area.div_ceil(avail_w).max(1);
        let hi = avail_h.min(area).max(lo);
        let rh = (lo + ((r1 * (hi - lo + 1) as f64) as usize).min(hi - lo)).min(avail_h);
        let rw = ((area as f64 / rh as f64).round() as usize).clamp(1, avail_w);
        let y0 = m + ((r2 * (avail_h - rh + 1) as f64) as usize).min(avail_h - rh);
        let x0 = m + ((r3 * (avail_w - rw + 1) as f64) as usize).min(avail_w - rw);
        let base = t * h * w;
        for y in y0..y0 + rh {
            data[base + y * w + x0..base + y * w + x0 + rw].fill(fill);
        }
    }
    VideoVolume::new(v.shape(), data)
}

/// The three corruption families, at their default strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    /// `U[0, 0.1]` then max-rescale.
    Uniform,
    /// 20% of voxels replaced by 0 or 1.
    SaltPepper,
    /// One black or white rectangle per frame covering 2-5% of it.
    Rectangles,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Uniform, NoiseKind::SaltPepper, NoiseKind::Rectangles];

    pub fn apply(self, v: &VideoVolume, seed: u64) -> Result<VideoVolume> {
        match self {
            NoiseKind::Uniform => add_uniform_noise(v, 0.1, seed),
            NoiseKind::SaltPepper => add_salt_pepper(v, 0.2, seed),
            NoiseKind::Rectangles => add_bw_rectangles(v, 0.02, 0.05, 100, seed),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::SaltPepper => "sp",
            NoiseKind::Rectangles => "bwr",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = SfsegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "u" => Ok(NoiseKind::Uniform),
            "sp" | "salt-pepper" | "saltpepper" => Ok(NoiseKind::SaltPepper),
            "bwr" | "rectangles" => Ok(NoiseKind::Rectangles),
            other => Err(SfsegError::Parameter(format!(
                "unknown noise kind {other:?} (expected uniform, sp or bwr)"
            ))),
        }
    }
}

/// `n_clean` copies of `clean` followed by `n_noise` channels of i.i.d.
/// `U[0, 1]` noise.
pub fn ensemble_channels(
    clean: &VideoVolume,
    n_clean: usize,
    n_noise: usize,
    seed: u64,
) -> Result<ChannelStack> {
    let mut rng = SplitMix::new(seed);
    let mut channels = vec![clean.clone(); n_clean];
    for _ in 0..n_noise {
        channels.push(VideoVolume::from_fn(clean.shape(), |_, _, _| rng.next_f64())?);
    }
    ChannelStack::new(channels)
}
