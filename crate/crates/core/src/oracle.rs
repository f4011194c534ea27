//! Explicit adjacency matrices for small videos.
//!
//! Builds the space-time affinity matrix entry by entry, under either the
//! exponential feature kernel or its first-order expansion, and finds its
//! leading eigenvector by plain power iteration. This is the reference the
//! filtering path in [`crate::spectral`] is checked against.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, SfsegError};
use crate::gaussian3d::GaussianKernelSpec;
use crate::spectral::{normalize_l2, SpectralConfig, SpectralOperator};
use crate::synth::SplitMix;
use crate::volume::{Shape, VideoVolume};

/// Largest graph [`build_matrix`] accepts by default.
pub const DEFAULT_NODE_CAP: usize = 50_000;

/// Pairwise feature kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `exp(-alpha (f_i - f_j)^2)`
    Exponential,
    /// `max(0, 1 - alpha (f_i - f_j)^2)`
    Taylor,
}

impl KernelKind {
    #[inline]
    pub fn affinity(self, alpha: f64, fi: f64, fj: f64) -> f64 {
        let d2 = (fi - fj) * (fi - fj);
        match self {
            KernelKind::Exponential => (-alpha * d2).exp(),
            KernelKind::Taylor => (1.0 - alpha * d2).max(0.0),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Exponential => "exponential",
            KernelKind::Taylor => "taylor",
        })
    }
}

impl FromStr for KernelKind {
    type Err = SfsegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(KernelKind::Exponential),
            "taylor" => Ok(KernelKind::Taylor),
            other => Err(SfsegError::Parameter(format!(
                "unknown kernel kind {other:?} (expected exponential or taylor)"
            ))),
        }
    }
}

/// Sparse symmetric non-negative affinity matrix in CSR form.
#[derive(Debug, Clone)]
pub struct ExplicitGraph {
    n_nodes: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    kind: KernelKind,
    radii: [usize; 3],
}

pub fn build_matrix(
    s: &VideoVolume,
    f: &VideoVolume,
    kernel: &GaussianKernelSpec,
    alpha: f64,
    p: f64,
    kind: KernelKind,
) -> Result<ExplicitGraph> {
    build_matrix_capped(s, f, kernel, alpha, p, kind, DEFAULT_NODE_CAP)
}

/// `M[i, j] = s_i^p s_j^p k(f_i, f_j) G[offset]` over the kernel box around
/// every voxel, self-loops included.
pub fn build_matrix_capped(
    s: &VideoVolume,
    f: &VideoVolume,
    kernel: &GaussianKernelSpec,
    alpha: f64,
    p: f64,
    kind: KernelKind,
    cap: usize,
) -> Result<ExplicitGraph> {
    s.ensure_same_shape(f, "unary vs pairwise map")?;
    s.ensure_range(0.0, f64::INFINITY, "unary map")?;
    if !(alpha > 0.0) || !(p >= 0.0) {
        return Err(SfsegError::Parameter(format!(
            "need alpha > 0 and p >= 0, got alpha = {alpha}, p = {p}"
        )));
    }
    let shape = s.shape();
    let n = shape.voxels();
    if n > cap {
        return Err(SfsegError::Size(format!(
            "{n} nodes exceed the explicit-matrix cap of {cap}; use the filtering path for \
             videos this large"
        )));
    }
    let weights = kernel.build();
    let [rt, ry, rx] = kernel.radii().map(|r| r as isize);
    let sp: Vec<f64> = s.data().iter().map(|v| v.powf(p)).collect();
    let fv = f.data();
    let (nf, h, w) = (
        shape.frames as isize,
        shape.height as isize,
        shape.width as isize,
    );

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(n * kernel.support().min(n));
    let mut vals = Vec::with_capacity(n * kernel.support().min(n));
    row_ptr.push(0);
    for i in 0..n {
        let (t, y, x) = shape.coords(i);
        let (t, y, x) = (t as isize, y as isize, x as isize);
        for dt in -rt..=rt {
            let tj = t + dt;
            if tj < 0 || tj >= nf {
                continue;
            }
            for dy in -ry..=ry {
                let yj = y + dy;
                if yj < 0 || yj >= h {
                    continue;
                }
                for dx in -rx..=rx {
                    let xj = x + dx;
                    if xj < 0 || xj >= w {
                        continue;
                    }
                    let j = shape.index(tj as usize, yj as usize, xj as usize);
                    let g = weights.weight(dt, dy, dx);
                    let value = sp[i] * sp[j] * kind.affinity(alpha, fv[i], fv[j]) * g;
                    cols.push(j as u32);
                    vals.push(value);
                }
            }
        }
        row_ptr.push(cols.len());
    }
    Ok(ExplicitGraph {
        n_nodes: n,
        row_ptr,
        cols,
        vals,
        kind,
        radii: kernel.radii(),
    })
}

impl ExplicitGraph {
    /// Wraps a dense row-major matrix; it must be square, symmetric and
    /// non-negative. Zero entries are dropped.
    pub fn from_dense(n: usize, dense: &[f64], kind: KernelKind) -> Result<Self> {
        if dense.len() != n * n {
            return Err(SfsegError::Shape(format!(
                "{} entries for a {n}x{n} matrix",
                dense.len()
            )));
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = dense[i * n + j];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(SfsegError::Validation(format!(
                        "entry ({i}, {j}) = {v} is not a finite non-negative affinity"
                    )));
                }
                if v != dense[j * n + i] {
                    return Err(SfsegError::Validation(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
                if v != 0.0 {
                    cols.push(j as u32);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(ExplicitGraph {
            n_nodes: n,
            row_ptr,
            cols,
            vals,
            kind,
            radii: [0; 3],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Neighbourhood radii (t, y, x) the matrix was built with.
    pub fn radii(&self) -> [usize; 3] {
        self.radii
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.vals[r])
            .map(|(&j, &v)| (j as usize, v))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n_nodes).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    /// `M x`, rows computed independently.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_nodes);
        let row = |i: usize| {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            acc
        };
        if self.n_nodes >= crate::gaussian3d::PAR_MIN_VOXELS {
            (0..self.n_nodes).into_par_iter().map(row).collect()
        } else {
            (0..self.n_nodes).map(row).collect()
        }
    }

    /// `x^T M x / x^T x`.
    pub fn rayleigh_quotient(&self, x: &[f64]) -> f64 {
        let mx = self.matvec(x);
        dot(x, &mx) / dot(x, x)
    }
}

/// Leading eigenpair with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct Eigenpair {
    /// Unit-norm, non-negative.
    pub vector: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Power iteration from the normalized all-ones vector until
/// `||M v - lambda v|| <= tol * lambda`.
///
/// When the leading eigenvalue is tied, the direction reached from the
/// all-ones start is returned.
pub fn leading_eigenvector(g: &ExplicitGraph, tol: f64, max_iter: usize) -> Result<Eigenpair> {
    let start = vec![1.0; g.n_nodes()];
    leading_eigenvector_from(g, &start, tol, max_iter)
}

pub fn leading_eigenvector_from(
    g: &ExplicitGraph,
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Eigenpair> {
    if start.len() != g.n_nodes() {
        return Err(SfsegError::Shape(format!(
            "start vector has {} entries for {} nodes",
            start.len(),
            g.n_nodes()
        )));
    }
    if !(tol > 0.0) {
        return Err(SfsegError::Parameter(format!("tolerance must be positive, got {tol}")));
    }
    let mut x = unit(start)?;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let y = g.matvec(&x);
        let lambda = dot(&x, &y);
        residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - lambda * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if lambda > 0.0 && residual <= tol * lambda {
            return Ok(Eigenpair {
                vector: x,
                value: lambda,
                iterations: it,
                residual,
            });
        }
        x = unit(&y).map_err(|_| {
            SfsegError::Degenerate("matrix maps the iterate to zero".into())
        })?;
    }
    Err(SfsegError::Convergence {
        iterations: max_iter,
        residual,
    })
}

/// Angle between two vectors in degrees, in `[0, 180]`.
pub fn angle_degrees(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SfsegError::Shape(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (dot(u, u).sqrt(), dot(v, v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(SfsegError::Parameter("angle with a zero vector is undefined".into()));
    }
    // atan2 form stays accurate near 0 and 180 degrees, where acos does not
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a / nu, b / nv);
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

/// A non-negative unit vector at `angle_deg` from the unit vector `v`, found
/// by rotating `v` in the plane it spans with the basis vector of its
/// smallest entry.
pub fn rotate_away(v: &[f64], angle_deg: f64) -> Result<Vec<f64>> {
    let v = unit(v)?;
    let (k, &vk) = v
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let reachable = vk.clamp(-1.0, 1.0).acos().to_degrees();
    if !(0.0..=reachable).contains(&angle_deg) || vk < 0.0 {
        return Err(SfsegError::Parameter(format!(
            "cannot rotate a non-negative start by {angle_deg} degrees (at most {reachable:.3})"
        )));
    }
    let mut u: Vec<f64> = v.iter().map(|&vi| -vk * vi).collect();
    u[k] += 1.0;
    let nu = dot(&u, &u).sqrt();
    let theta = angle_deg.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    Ok(v
        .iter()
        .zip(&u)
        .map(|(&vi, &ui)| (c * vi + s * ui / nu).max(0.0))
        .collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(SfsegError::Parameter("vector has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// One line of the runtime comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n_nodes: usize,
    pub filter_sec_per_iter: f64,
    pub matrix_sec_per_iter: f64,
}

/// Median per-iteration runtimes of the filtering path and of the
/// explicit-matrix path (matrix construction amortized over `iters`).
pub fn bench_compare(
    sizes: &[Shape],
    kernel: &GaussianKernelSpec,
    reps: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps == 0 || iters == 0 {
        return Err(SfsegError::Parameter(format!(
            "reps and iters must be positive, got reps = {reps}, iters = {iters}"
        )));
    }
    let cfg = SpectralConfig {
        kernel: *kernel,
        ..SpectralConfig::default()
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for (k, &shape) in sizes.iter().enumerate() {
        if shape.voxels() > DEFAULT_NODE_CAP {
            return Err(SfsegError::Size(format!(
                "{shape} has {} nodes, above the explicit-matrix cap of {DEFAULT_NODE_CAP}",
                shape.voxels()
            )));
        }
        let mut rng = SplitMix::new(seed.wrapping_add(k as u64));
        let s = VideoVolume::from_fn(shape, |_, _, _| rng.next_f64())?;
        let f = VideoVolume::from_fn(shape, |_, _, _| rng.next_f64())?;

        let mut filter_times = Vec::with_capacity(reps);
        let mut matrix_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let clock = Instant::now();
            let op = SpectralOperator::new(&s, &f, &cfg)?;
            let mut x = s.clone();
            for _ in 0..iters {
                x = normalize_l2(&op.apply(&x)?.volume)?;
            }
            std::hint::black_box(&x);
            filter_times.push(clock.elapsed().as_secs_f64() / iters as f64);

            let clock = Instant::now();
            let g = build_matrix(&s, &f, kernel, cfg.alpha, cfg.p, KernelKind::Taylor)?;
            let mut x = s.data().to_vec();
            for _ in 0..iters {
                x = unit(&g.matvec(&x))?;
            }
            std::hint::black_box(&x);
            matrix_times.push(clock.elapsed().as_secs_f64() / iters as f64);
        }
        rows.push(BenchRow {
            n_nodes: shape.voxels(),
            filter_sec_per_iter: median(&mut filter_times),
            matrix_sec_per_iter: median(&mut matrix_times),
        });
    }
    Ok(rows)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n_nodes,filter_sec_per_iter,matrix_sec_per_iter\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9}\n",
            r.n_nodes, r.filter_sec_per_iter, r.matrix_sec_per_iter
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(shape: Shape, rng: &mut SplitMix, lo: f64, hi: f64) -> VideoVolume {
        VideoVolume::from_fn(shape, |_, _, _| lo + (hi - lo) * rng.next_f64()).unwrap()
    }

    fn kernel(radii: [usize; 3]) -> GaussianKernelSpec {
        GaussianKernelSpec::new(radii, [1.0, 1.5, 1.5]).unwrap()
    }

    #[test]
    fn single_node_self_loop() {
        let v = VideoVolume::from_dims(1, 1, 1, vec![1.0]).unwrap();
        let f = VideoVolume::from_dims(1, 1, 1, vec![0.37]).unwrap();
        let g = build_matrix(&v, &f, &kernel([0, 0, 0]), 1.0, 0.1, KernelKind::Exponential).unwrap();
        assert_eq!(g.n_nodes(), 1);
        assert_eq!(g.get(0, 0), 1.0);
    }

    #[test]
    fn two_neighbours_are_symmetric() {
        let s = VideoVolume::filled(Shape::new(1, 1, 2).unwrap(), 1.0).unwrap();
        let f = VideoVolume::filled(s.shape(), 0.5).unwrap();
        for kind in [KernelKind::Taylor, KernelKind::Exponential] {
            let g = build_matrix(&s, &f, &kernel([0, 0, 1]), 1.0, 0.1, kind).unwrap();
            assert!(g.get(0, 1) > 0.0);
            assert_eq!(g.get(0, 1), g.get(1, 0));
            assert!(g.is_symmetric());
        }
    }

    #[test]
    fn taylor_remainder_bound() {
        let mut rng = SplitMix::new(17);
        let shape = Shape::new(2, 3, 3).unwrap();
        let s = random_volume(shape, &mut rng, 0.0, 1.0);
        let f = random_volume(shape, &mut rng, 0.0, 1.0);
        let k = kernel([1, 1, 1]);
        let weights = k.build();
        for alpha in [1.0, 0.7] {
            let t = build_matrix(&s, &f, &k, alpha, 0.3, KernelKind::Taylor).unwrap();
            let e = build_matrix(&s, &f, &k, alpha, 0.3, KernelKind::Exponential).unwrap();
            for i in 0..t.n_nodes() {
                for (j, tv) in t.row(i) {
                    let ev = e.get(i, j);
                    let (ti, yi, xi) = shape.coords(i);
                    let (tj, yj, xj) = shape.coords(j);
                    let g = weights.weight(
                        tj as isize - ti as isize,
                        yj as isize - yi as isize,
                        xj as isize - xi as isize,
                    );
                    let unary = (s.data()[i] * s.data()[j]).powf(0.3);
                    let d = f.data()[i] - f.data()[j];
                    let bound = alpha * alpha * d.powi(4) / 2.0 * unary * g;
                    assert!(ev >= tv);
                    assert!(ev - tv <= bound + 1e-15, "({i},{j}): {} > {bound}", ev - tv);
                }
            }
        }
    }

    #[test]
    fn structure_invariants() {
        let mut rng = SplitMix::new(2);
        let shape = Shape::new(3, 5, 4).unwrap();
        let s = random_volume(shape, &mut rng, 0.0, 1.0);
        let f = random_volume(shape, &mut rng, 0.0, 1.0);
        let k = kernel([1, 2, 1]);
        let g = build_matrix(&s, &f, &k, 1.0, 0.2, KernelKind::Taylor).unwrap();
        assert!(g.is_symmetric());
        for i in 0..g.n_nodes() {
            assert!(g.degree(i) <= k.support());
            assert!(g.row(i).all(|(_, v)| v >= 0.0));
        }
        // the interior voxel sees the whole box
        assert_eq!(g.degree(shape.index(1, 2, 1)), 3 * 5 * 3);
    }

    #[test]
    fn cap_exceeded() {
        let s = VideoVolume::filled(Shape::new(2, 10, 10).unwrap(), 1.0).unwrap();
        let err = build_matrix_capped(&s, &s, &kernel([1, 1, 1]), 1.0, 0.1, KernelKind::Taylor, 150)
            .unwrap_err();
        assert!(matches!(err, SfsegError::Size(_)));
        assert!(err.to_string().contains("150"));
    }

    #[test]
    fn diagonal_matrix_ties_to_all_ones() {
        let n = 4;
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            dense[i * n + i] = 2.5;
        }
        let g = ExplicitGraph::from_dense(n, &dense, KernelKind::Taylor).unwrap();
        let e = leading_eigenvector(&g, 1e-12, 10).unwrap();
        assert_eq!(e.value, 2.5);
        assert!(e.vector.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn swap_matrix() {
        let g = ExplicitGraph::from_dense(2, &[0.0, 1.0, 1.0, 0.0], KernelKind::Taylor).unwrap();
        let e = leading_eigenvector(&g, 1e-12, 10).unwrap();
        assert!((e.value - 1.0).abs() < 1e-15);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!(e.vector.iter().all(|&v| (v - r).abs() < 1e-15));
    }

    #[test]
    fn dense_validation() {
        assert!(ExplicitGraph::from_dense(2, &[0.0, 1.0, 2.0, 0.0], KernelKind::Taylor).is_err());
        assert!(ExplicitGraph::from_dense(2, &[0.0, -1.0, -1.0, 0.0], KernelKind::Taylor).is_err());
        assert!(ExplicitGraph::from_dense(2, &[0.0; 3], KernelKind::Taylor).is_err());
    }

    #[test]
    fn convergence_failure_reports_residual() {
        let g = ExplicitGraph::from_dense(2, &[2.0, 1.0, 1.0, 1.0], KernelKind::Taylor).unwrap();
        match leading_eigenvector_from(&g, &[1.0, 0.0], 1e-14, 2) {
            Err(SfsegError::Convergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn angles() {
        assert_eq!(angle_degrees(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!((angle_degrees(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 90.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((angle_degrees(&[1.0, 0.0], &[r, r]).unwrap() - 45.0).abs() < 1e-12);
        assert!((angle_degrees(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 180.0).abs() < 1e-12);
        assert!(angle_degrees(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn rotation_hits_requested_angle() {
        let v = [0.5, 0.7, 0.1, 0.5];
        for angle in [0.0, 10.0, 70.0] {
            let x = rotate_away(&v, angle).unwrap();
            assert!(x.iter().all(|&e| e >= 0.0));
            assert!((angle_degrees(&x, &v).unwrap() - angle).abs() < 1e-9);
        }
        assert!(rotate_away(&v, 89.9).is_err());
    }

    fn connected_instance(seed: u64, shape: Shape, contrast: f64) -> (VideoVolume, VideoVolume) {
        let mut rng = SplitMix::new(seed);
        let s = random_volume(shape, &mut rng, 0.2, 1.0);
        let f = random_volume(shape, &mut rng, 0.5, 0.5 + contrast);
        (s, f)
    }

    #[test]
    fn eigenvector_independent_of_start() {
        let (s, f) = connected_instance(9, Shape::new(2, 4, 4).unwrap(), 1.0 - 0.5);
        let g = build_matrix(&s, &f, &kernel([1, 1, 1]), 1.0, 0.5, KernelKind::Taylor).unwrap();
        let reference = leading_eigenvector(&g, 1e-14, 1_000_000).unwrap();
        let mut rng = SplitMix::new(77);
        for _ in 0..5 {
            let start: Vec<f64> = (0..g.n_nodes()).map(|_| rng.next_f64()).collect();
            let e = leading_eigenvector_from(&g, &start, 1e-14, 1_000_000).unwrap();
            assert!(angle_degrees(&e.vector, &reference.vector).unwrap() < 1e-6);
            assert!((e.value - reference.value).abs() < 1e-12);
        }
        assert!(reference.vector.iter().all(|&v| v >= 0.0));
        assert!(reference.value >= g.rayleigh_quotient(s.data()));
    }

    #[test]
    fn exponential_and_taylor_eigenvectors_close() {
        let (s, f) = connected_instance(12, Shape::new(3, 5, 5).unwrap(), 0.3);
        let k = kernel([1, 2, 2]);
        let t = build_matrix(&s, &f, &k, 1.0, 0.5, KernelKind::Taylor).unwrap();
        let e = build_matrix(&s, &f, &k, 1.0, 0.5, KernelKind::Exponential).unwrap();
        let vt = leading_eigenvector(&t, 1e-12, 1_000_000).unwrap();
        let ve = leading_eigenvector(&e, 1e-12, 1_000_000).unwrap();
        assert!(angle_degrees(&vt.vector, &ve.vector).unwrap() <= 5.0);
    }

    #[test]
    fn bench_validation_and_csv() {
        let k = kernel([1, 1, 1]);
        let sizes = [Shape::new(2, 4, 4).unwrap()];
        assert!(matches!(bench_compare(&sizes, &k, 0, 5, 1), Err(SfsegError::Parameter(_))));
        let rows = bench_compare(&sizes, &k, 1, 2, 1).unwrap();
        assert_eq!(rows[0].n_nodes, 32);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("n_nodes,filter_sec_per_iter,matrix_sec_per_iter\n32,"));
    }
}
