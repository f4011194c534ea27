//! Separable 3D Gaussian filtering over (frame, row, column).
//!
//! The space-time neighbourhood weights of the pixel graph are the product of
//! three normalized 1D Gaussians, so one 3D convolution runs as three 1D
//! passes. Outside the volume everything reads as zero.

use rayon::prelude::*;

use crate::error::{Result, SfsegError};
use crate::volume::{Shape, VideoVolume};

/// Volumes below this voxel count are filtered on the calling thread.
pub(crate) const PAR_MIN_VOXELS: usize = 1 << 15;

/// Radii and standard deviations of the separable 3D kernel.
///
/// The kernel extent along each axis is `2 * radius + 1`. A distance penalty
/// `beta * d^2` corresponds to `sigma = 1 / sqrt(2 * beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernelSpec {
    radius_t: usize,
    radius_y: usize,
    radius_x: usize,
    sigma_t: f64,
    sigma_y: f64,
    sigma_x: f64,
}

impl Default for GaussianKernelSpec {
    /// 3x7x7 support with sigmas (1, 2, 2).
    fn default() -> Self {
        GaussianKernelSpec {
            radius_t: 1,
            radius_y: 3,
            radius_x: 3,
            sigma_t: 1.0,
            sigma_y: 2.0,
            sigma_x: 2.0,
        }
    }
}

impl GaussianKernelSpec {
    /// `radii` and `sigmas` are ordered (t, y, x).
    pub fn new(radii: [usize; 3], sigmas: [f64; 3]) -> Result<Self> {
        for (axis, s) in ["t", "y", "x"].iter().zip(sigmas) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(SfsegError::Parameter(format!(
                    "sigma_{axis} must be positive and finite, got {s}"
                )));
            }
        }
        Ok(GaussianKernelSpec {
            radius_t: radii[0],
            radius_y: radii[1],
            radius_x: radii[2],
            sigma_t: sigmas[0],
            sigma_y: sigmas[1],
            sigma_x: sigmas[2],
        })
    }

    pub fn radii(&self) -> [usize; 3] {
        [self.radius_t, self.radius_y, self.radius_x]
    }

    pub fn sigmas(&self) -> [f64; 3] {
        [self.sigma_t, self.sigma_y, self.sigma_x]
    }

    pub fn radius_t(&self) -> usize {
        self.radius_t
    }

    /// Number of taps of the full 3D kernel.
    pub fn support(&self) -> usize {
        (2 * self.radius_t + 1) * (2 * self.radius_y + 1) * (2 * self.radius_x + 1)
    }

    pub fn build(&self) -> SeparableKernel {
        SeparableKernel {
            t: build_kernel_1d(self.radius_t, self.sigma_t).expect("validated sigma"),
            y: build_kernel_1d(self.radius_y, self.sigma_y).expect("validated sigma"),
            x: build_kernel_1d(self.radius_x, self.sigma_x).expect("validated sigma"),
        }
    }
}

/// Normalized samples of `exp(-d^2 / (2 sigma^2))` for `d` in `-radius..=radius`.
pub fn build_kernel_1d(radius: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SfsegError::Parameter(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let r = radius as f64;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Precomputed 1D weights for the three axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl SeparableKernel {
    pub fn radii(&self) -> [usize; 3] {
        [self.t.len() / 2, self.y.len() / 2, self.x.len() / 2]
    }

    /// Weight of the 3D kernel at offset `(dt, dy, dx)`, zero outside the support.
    pub fn weight(&self, dt: isize, dy: isize, dx: isize) -> f64 {
        let tap = |w: &[f64], d: isize| {
            let r = (w.len() / 2) as isize;
            if d.abs() > r {
                0.0
            } else {
                w[(d + r) as usize]
            }
        };
        tap(&self.t, dt) * tap(&self.y, dy) * tap(&self.x, dx)
    }

    /// Filters `input` (laid out as `shape`) into `out`, using `scratch` as a
    /// second buffer. All three slices have `shape.voxels()` elements.
    ///
    /// Every output voxel is accumulated in the same tap order no matter how
    /// the work is split across threads.
    pub fn convolve(&self, shape: Shape, input: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        self.convolve_lanes(shape, 1, input, out, scratch);
    }

    /// Like [`convolve`](Self::convolve) for `lanes` interleaved volumes: voxel
    /// `i` of lane `l` sits at `i * lanes + l`. Each lane comes out bitwise
    /// equal to filtering it on its own.
    pub fn convolve_lanes(
        &self,
        shape: Shape,
        lanes: usize,
        input: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        assert!(lanes > 0);
        let n = shape.voxels() * lanes;
        assert!(input.len() == n && out.len() == n && scratch.len() == n);
        let frame_len = shape.frame_len() * lanes;
        let (h, w) = (shape.height, shape.width * lanes);
        let parallel = shape.voxels() >= PAR_MIN_VOXELS && shape.frames > 1;

        // columns: input -> out
        let row_pass = |src: &[f64], dst: &mut [f64]| {
            for (s, d) in src.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
                convolve_line(&self.x, lanes, s, d);
            }
        };
        // rows: out -> scratch
        let col_pass = |src: &[f64], dst: &mut [f64]| {
            for (yo, d) in dst.chunks_exact_mut(w).enumerate() {
                accumulate_planes(&self.y, src, w, h, yo, d);
            }
        };
        // frames: scratch -> out
        let frames = shape.frames;
        let frame_pass = |to: usize, d: &mut [f64], src: &[f64]| {
            accumulate_planes(&self.t, src, frame_len, frames, to, d);
        };

        if parallel {
            input
                .par_chunks(frame_len)
                .zip(out.par_chunks_mut(frame_len))
                .for_each(|(s, d)| row_pass(s, d));
            out.par_chunks(frame_len)
                .zip(scratch.par_chunks_mut(frame_len))
                .for_each(|(s, d)| col_pass(s, d));
            let src: &[f64] = scratch;
            out.par_chunks_mut(frame_len)
                .enumerate()
                .for_each(|(to, d)| frame_pass(to, d, src));
        } else {
            for (s, d) in input.chunks(frame_len).zip(out.chunks_mut(frame_len)) {
                row_pass(s, d);
            }
            for (s, d) in out.chunks(frame_len).zip(scratch.chunks_mut(frame_len)) {
                col_pass(s, d);
            }
            let src: &[f64] = scratch;
            for (to, d) in out.chunks_mut(frame_len).enumerate() {
                frame_pass(to, d, src);
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Writes into `dst` the weighted sum of the planes of `src` (each `plane`
/// long, `count` of them) around plane `o`. Mirror taps share a weight, so each
/// pair is added before scaling.
#[inline]
fn accumulate_planes(w: &[f64], src: &[f64], plane: usize, count: usize, o: usize, dst: &mut [f64]) {
    let r = w.len() / 2;
    let at = |i: usize| &src[i * plane..(i + 1) * plane];
    for (d, &v) in dst.iter_mut().zip(at(o)) {
        *d = w[r] * v;
    }
    for k in 1..=r {
        let wk = w[r + k];
        let lo = o.checked_sub(k);
        let hi = (o + k < count).then_some(o + k);
        match (lo, hi) {
            (Some(a), Some(b)) => {
                for ((d, &u), &v) in dst.iter_mut().zip(at(a)).zip(at(b)) {
                    *d += wk * (u + v);
                }
            }
            (Some(a), None) | (None, Some(a)) => axpy(wk, at(a), dst),
            (None, None) => {}
        }
    }
}

/// 1D zero-padded convolution of one contiguous line of `lanes`-interleaved
/// samples, mirror taps folded as in [`accumulate_planes`].
#[inline]
fn convolve_line(w: &[f64], lanes: usize, src: &[f64], dst: &mut [f64]) {
    let len = src.len();
    let r = w.len() / 2;
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = w[r] * v;
    }
    for k in 1..=r {
        let wk = w[r + k];
        let off = k * lanes;
        if off >= len {
            break;
        }
        if 2 * off <= len {
            let (head, rest) = dst.split_at_mut(off);
            let (mid, tail) = rest.split_at_mut(len - 2 * off);
            for ((d, &u), &v) in mid.iter_mut().zip(&src[..len - 2 * off]).zip(&src[2 * off..]) {
                *d += wk * (u + v);
            }
            axpy(wk, &src[off..2 * off], head);
            axpy(wk, &src[len - 2 * off..len - off], tail);
        } else {
            // no output has both neighbours
            for i in 0..len {
                if i + off < len {
                    dst[i] += wk * src[i + off];
                } else if i >= off {
                    dst[i] += wk * src[i - off];
                }
            }
        }
    }
}

/// Zero-padded 3D Gaussian filtering as three 1D passes.
pub fn convolve_separable(vol: &VideoVolume, spec: &GaussianKernelSpec) -> VideoVolume {
    let kernel = spec.build();
    let n = vol.len();
    let mut out = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    kernel.convolve(vol.shape(), vol.data(), &mut out, &mut scratch);
    VideoVolume::from_parts_unchecked(vol.shape(), out)
}

/// Zero-padded 3D Gaussian filtering by explicit summation over every tap.
///
/// Costs `support()` multiply-adds per voxel; the reference for
/// [`convolve_separable`].
pub fn convolve_direct(vol: &VideoVolume, spec: &GaussianKernelSpec) -> VideoVolume {
    let kernel = spec.build();
    let shape = vol.shape();
    let [rt, ry, rx] = spec.radii().map(|r| r as isize);
    let (nf, h, w) = (
        shape.frames as isize,
        shape.height as isize,
        shape.width as isize,
    );
    let mut out = vec![0.0; vol.len()];
    for t in 0..nf {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dt in -rt..=rt {
                    let ts = t + dt;
                    if ts < 0 || ts >= nf {
                        continue;
                    }
                    for dy in -ry..=ry {
                        let ys = y + dy;
                        if ys < 0 || ys >= h {
                            continue;
                        }
                        for dx in -rx..=rx {
                            let xs = x + dx;
                            if xs < 0 || xs >= w {
                                continue;
                            }
                            acc += kernel.weight(dt, dy, dx)
                                * vol.get(ts as usize, ys as usize, xs as usize);
                        }
                    }
                }
                out[shape.index(t as usize, y as usize, x as usize)] = acc;
            }
        }
    }
    VideoVolume::from_parts_unchecked(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(frames: usize, h: usize, w: usize, data: Vec<f64>) -> VideoVolume {
        VideoVolume::from_dims(frames, h, w, data).unwrap()
    }

    fn max_abs_diff(a: &VideoVolume, b: &VideoVolume) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_tap() {
        assert_eq!(build_kernel_1d(0, 0.3).unwrap(), vec![1.0]);
        assert_eq!(build_kernel_1d(0, 50.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn radius_one_sigma_one() {
        // exp(-1/2) / (1 + 2 exp(-1/2)) and 1 / (1 + 2 exp(-1/2))
        let e = (-0.5f64).exp();
        let side = e / (1.0 + 2.0 * e);
        let mid = 1.0 / (1.0 + 2.0 * e);
        let k = build_kernel_1d(1, 1.0).unwrap();
        assert!((k[0] - 0.27406).abs() < 1e-4 && (k[1] - 0.45186).abs() < 1e-4);
        assert!((k[0] - side).abs() < 1e-15 && (k[1] - mid).abs() < 1e-15);
        assert_eq!(k[0], k[2]);
    }

    #[test]
    fn wide_sigma_is_nearly_flat() {
        let k = build_kernel_1d(2, 10.0).unwrap();
        let max = k.iter().cloned().fold(0.0, f64::max);
        let min = k.iter().cloned().fold(1.0, f64::min);
        assert!(max / min < 1.05);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_sigma() {
        assert!(matches!(build_kernel_1d(1, 0.0), Err(SfsegError::Parameter(_))));
        assert!(build_kernel_1d(1, -1.0).is_err());
        assert!(GaussianKernelSpec::new([1, 1, 1], [1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let spec = GaussianKernelSpec::new([1, 2, 2], [0.8, 1.3, 1.7]).unwrap();
        let shape = Shape::new(5, 7, 7).unwrap();
        let mut data = vec![0.0; shape.voxels()];
        data[shape.index(2, 3, 3)] = 1.0;
        let v = VideoVolume::new(shape, data).unwrap();
        let kernel = spec.build();
        for out in [convolve_separable(&v, &spec), convolve_direct(&v, &spec)] {
            for t in 0..5 {
                for y in 0..7 {
                    for x in 0..7 {
                        let expect =
                            kernel.weight(t as isize - 2, y as isize - 3, x as isize - 3);
                        assert!((out.get(t, y, x) - expect).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn zeros_stay_zero() {
        let v = VideoVolume::zeros(Shape::new(3, 4, 5).unwrap());
        let spec = GaussianKernelSpec::default();
        assert!(convolve_separable(&v, &spec).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn interior_mass_is_preserved() {
        let spec = GaussianKernelSpec::new([1, 2, 1], [1.0, 1.5, 0.7]).unwrap();
        let v = VideoVolume::filled(Shape::new(4, 7, 6).unwrap(), 1.0).unwrap();
        let out = convolve_separable(&v, &spec);
        for t in 1..3 {
            for y in 2..5 {
                for x in 1..5 {
                    assert!((out.get(t, y, x) - 1.0).abs() < 1e-9);
                }
            }
        }
        // border shell loses mass
        assert!(out.get(0, 0, 0) < 1.0);
    }

    #[test]
    fn large_volume_parallel_path_matches_direct() {
        let shape = Shape::new(8, 64, 72).unwrap();
        assert!(shape.voxels() >= PAR_MIN_VOXELS);
        let v = VideoVolume::from_fn(shape, |t, y, x| {
            (((t * 31 + y * 17 + x * 7) % 23) as f64) / 22.0
        })
        .unwrap();
        let spec = GaussianKernelSpec::new([1, 2, 2], [1.0, 1.5, 1.5]).unwrap();
        assert!(max_abs_diff(&convolve_separable(&v, &spec), &convolve_direct(&v, &spec)) < 1e-6);
    }

    fn arb_case() -> impl Strategy<Value = (VideoVolume, GaussianKernelSpec)> {
        (1usize..5, 1usize..8, 1usize..8, [0usize..4, 0usize..4, 0usize..4], [0.3f64..4.0, 0.3f64..4.0, 0.3f64..4.0])
            .prop_flat_map(|(f, h, w, radii, sigmas)| {
                proptest::collection::vec(0.0f64..=1.0, f * h * w).prop_map(move |data| {
                    (vol(f, h, w, data), GaussianKernelSpec::new(radii, sigmas).unwrap())
                })
            })
    }

    proptest! {
        #[test]
        fn separable_matches_direct((v, spec) in arb_case()) {
            let d = max_abs_diff(&convolve_separable(&v, &spec), &convolve_direct(&v, &spec));
            prop_assert!(d <= 1e-6, "diff {d}");
        }

        #[test]
        fn linear((v, spec) in arb_case(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let u = v.map(|x| 1.0 - x * x).unwrap();
            let combo = VideoVolume::new(
                v.shape(),
                v.data().iter().zip(u.data()).map(|(p, q)| a * p + b * q).collect(),
            ).unwrap();
            let lhs = convolve_separable(&combo, &spec);
            let cv = convolve_separable(&v, &spec);
            let cu = convolve_separable(&u, &spec);
            for i in 0..lhs.len() {
                let rhs = a * cv.data()[i] + b * cu.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-9);
            }
        }

        #[test]
        fn mirror_commutes((v, spec) in arb_case()) {
            let s = v.shape();
            let mirror = |src: &VideoVolume| VideoVolume::from_fn(s, |t, y, x| src.get(t, y, s.width - 1 - x)).unwrap();
            let a = convolve_separable(&mirror(&v), &spec);
            let b = mirror(&convolve_separable(&v, &spec));
            prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
            let flip_t = |src: &VideoVolume| crate::volume::reverse_frames(src);
            let a = convolve_separable(&flip_t(&v), &spec);
            let b = flip_t(&convolve_separable(&v, &spec));
            prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
        }
    }
}
