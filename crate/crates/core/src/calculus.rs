//! Riemannian calculus on the mass simplex equipped with the metric tensor
//! `L(x)^+`: quadratic forms, the convolutional-kernel gradient norm, the
//! modified and full Laplace-Beltrami operators, Christoffel symbols, the
//! Riemannian Hessian, and the Riemannian volume.
//!
//! Per-channel quantities are evaluated independently and summed, so
//! multi-channel images behave as a product manifold.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{ImageMassVector, LaplacianState, WeightedPixelGraph, DEFAULT_DENSE_CAP};

/// Relative cutoff below which an eigenvalue counts as the constant mode.
const ZERO_EIG_REL: f64 = 1e-10;

/// Convergence tolerance for the iterative solver above the dense cap.
const CG_TOL: f64 = 1e-10;

/// Sum-zero perturbation per channel: noise samples and attack directions.
#[derive(Debug, Clone)]
pub struct TangentVector {
    values: Vec<f64>,
    channels: usize,
    tolerance: f64,
}

impl TangentVector {
    /// Default sum-zero tolerance for `n` pixels.
    pub fn default_tolerance(pixels: usize) -> f64 {
        1e-9 * pixels as f64
    }

    pub fn new(values: Vec<f64>, channels: usize) -> Result<Self> {
        let n = per_channel_len(&values, channels)?;
        Self::with_tolerance(values, channels, Self::default_tolerance(n))
    }

    pub fn with_tolerance(values: Vec<f64>, channels: usize, tolerance: f64) -> Result<Self> {
        let n = per_channel_len(&values, channels)?;
        for c in 0..channels {
            let sum: f64 = values[c * n..(c + 1) * n].iter().sum();
            if sum.abs() > tolerance {
                return Err(Error::invalid(format!(
                    "tangent vector channel {c} sums to {sum}, beyond tolerance {tolerance}"
                )));
            }
        }
        Ok(Self {
            values,
            channels,
            tolerance,
        })
    }

    /// Projects arbitrary values onto the tangent space by subtracting the
    /// per-channel mean. Returns the projection and whether anything moved.
    pub fn project(values: Vec<f64>, channels: usize) -> Result<(Self, bool)> {
        let n = per_channel_len(&values, channels)?;
        let mut v = values;
        let mut moved = false;
        for c in 0..channels {
            let slice = &mut v[c * n..(c + 1) * n];
            let mean: f64 = slice.iter().sum::<f64>() / n as f64;
            if mean.abs() > Self::default_tolerance(n) {
                moved = true;
            }
            for e in slice.iter_mut() {
                *e -= mean;
            }
        }
        let tol = Self::default_tolerance(n);
        Ok((
            Self {
                values: v,
                channels,
                tolerance: tol,
            },
            moved,
        ))
    }

    pub fn zeros(pixels: usize, channels: usize) -> Self {
        Self {
            values: vec![0.0; pixels * channels],
            channels,
            tolerance: Self::default_tolerance(pixels),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// Ordinary input gradient of a function on images; no sum constraint.
#[derive(Debug, Clone)]
pub struct GradientVector {
    values: Vec<f64>,
    channels: usize,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, channels: usize) -> Result<Self> {
        per_channel_len(&values, channels)?;
        Ok(Self { values, channels })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }
}

fn per_channel_len(values: &[f64], channels: usize) -> Result<usize> {
    if channels == 0 || values.len() % channels != 0 {
        return Err(Error::shape(
            format!("length divisible by {channels} channels"),
            format!("{}", values.len()),
        ));
    }
    Ok(values.len() / channels)
}

fn check_field_shape(l: &LaplacianState, pixels: usize, channels: usize) -> Result<()> {
    if pixels != l.vertex_count() || channels != l.channels() {
        return Err(Error::shape(
            format!("{} pixels x {} channels", l.vertex_count(), l.channels()),
            format!("{pixels} pixels x {channels} channels"),
        ));
    }
    Ok(())
}

/// `u^T L(x) v` evaluated as the edge sum
/// `sum_e lambda_e (u_i - u_j)(v_i - v_j)`, summed over channels.
pub fn quadratic_form(l: &LaplacianState, u: &GradientVector, v: &GradientVector) -> Result<f64> {
    check_field_shape(l, u.pixels(), u.channels())?;
    check_field_shape(l, v.pixels(), v.channels())?;
    let edges = l.graph().edges();
    let mut total = 0.0;
    for c in 0..l.channels() {
        let lam = l.lambda(c);
        let (uc, vc) = (u.channel(c), v.channel(c));
        for (e, &(i, j)) in edges.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            total += lam[e] * (uc[i] - uc[j]) * (vc[i] - vc[j]);
        }
    }
    Ok(total)
}

/// Per-offset stencil pair: a difference stencil (entries +1/-1 at the offset
/// endpoints) and an averaging stencil applied to the volume-scaled image.
/// One pair per neighbor relation of the graph.
#[derive(Debug, Clone)]
pub struct NeighborKernelSet {
    height: usize,
    width: usize,
    offsets: Vec<(i32, i32)>,
    /// Edge weight shared by all edges of one offset (0 when the grid is too
    /// small for the offset to produce any edge).
    offset_weights: Vec<f64>,
    volume: Vec<f64>,
}

impl NeighborKernelSet {
    pub fn for_graph(graph: &WeightedPixelGraph) -> Result<Self> {
        let w = graph.width();
        let mut weight_of = std::collections::HashMap::new();
        for (e, &(lo, hi)) in graph.edges().iter().enumerate() {
            let dy = (hi as usize / w) as i32 - (lo as usize / w) as i32;
            let dx = (hi as usize % w) as i32 - (lo as usize % w) as i32;
            let entry = weight_of.entry((dy, dx)).or_insert(graph.weights()[e]);
            if (*entry - graph.weights()[e]).abs() > 0.0 {
                return Err(Error::Internal(format!(
                    "edge weights not translation invariant for offset ({dy},{dx})"
                )));
            }
        }
        let offsets = graph.neighbor_relations().to_vec();
        let offset_weights = offsets
            .iter()
            .map(|o| weight_of.get(o).copied().unwrap_or(0.0))
            .collect();
        Ok(Self {
            height: graph.height(),
            width: graph.width(),
            offsets,
            offset_weights,
            volume: graph.volume().to_vec(),
        })
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    /// Applies the difference stencil of offset `k` to a per-pixel field:
    /// `out[p] = field[p] - field[p + O_k]`, zero where the offset leaves the
    /// grid.
    pub fn difference(&self, k: usize, field: &[f64]) -> Vec<f64> {
        self.stencil(k, field, |a, b| a - b)
    }

    /// Applies the averaging stencil of offset `k`:
    /// `out[p] = field[p] + field[p + O_k]` (the 1/(2d) factor is expected to
    /// be folded into `field` beforehand), zero where the offset leaves the
    /// grid.
    pub fn average(&self, k: usize, field: &[f64]) -> Vec<f64> {
        self.stencil(k, field, |a, b| a + b)
    }

    fn stencil(&self, k: usize, field: &[f64], combine: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (dy, dx) = self.offsets[k];
        let (h, w) = (self.height as i64, self.width as i64);
        let mut out = vec![0.0; field.len()];
        for y in 0..h {
            let (qy, lo_x, hi_x) = (y + dy as i64, 0.max(-(dx as i64)), w.min(w - dx as i64));
            if qy < 0 || qy >= h {
                continue;
            }
            for x in lo_x..hi_x {
                let p = (y * w + x) as usize;
                let q = (qy * w + x + dx as i64) as usize;
                out[p] = combine(field[p], field[q]);
            }
        }
        out
    }
}

/// Wasserstein gradient norm squared via the per-offset kernel path: for each
/// neighbor relation, square the difference-stencil response of the gradient,
/// multiply entrywise with the averaging-stencil response of the
/// volume-scaled image, and sum over pixels, offsets and channels.
///
/// Equals `quadratic_form(L(x), g, g)` for the same image and floor.
pub fn wasserstein_grad_norm_conv(
    kernels: &NeighborKernelSet,
    x: &ImageMassVector,
    g: &GradientVector,
    floor: f64,
) -> Result<f64> {
    if kernels.height != x.height() || kernels.width != x.width() {
        return Err(Error::Internal(format!(
            "kernel set built for {}x{}, image is {}x{}",
            kernels.height,
            kernels.width,
            x.height(),
            x.width()
        )));
    }
    if g.pixels() != x.pixels() || g.channels() != x.channels() {
        return Err(Error::shape(
            format!("{} pixels x {} channels", x.pixels(), x.channels()),
            format!("{} pixels x {} channels", g.pixels(), g.channels()),
        ));
    }
    let n = x.pixels();
    let mut total = 0.0;
    let mut scaled = vec![0.0; n];
    for c in 0..x.channels() {
        let xc = x.channel(c);
        for i in 0..n {
            scaled[i] = (xc[i] + floor) / (2.0 * kernels.volume[i]);
        }
        let gc = g.channel(c);
        for k in 0..kernels.offsets.len() {
            let wk = kernels.offset_weights[k];
            if wk == 0.0 {
                continue;
            }
            let diff = kernels.difference(k, gc);
            let avg = kernels.average(k, &scaled);
            let mut acc = 0.0;
            for (d, a) in diff.iter().zip(&avg) {
                acc += d * d * a;
            }
            total += wk * acc;
        }
    }
    Ok(total)
}

/// `sum_e lambda_e * hess_quad(e_i - e_j)`, the trace `tr(L(x) Hess f)`
/// assembled from directional second derivatives. The oracle receives a full
/// input-space direction (channel-major) and returns `dir^T Hess f dir`.
pub fn modified_laplacian(
    l: &LaplacianState,
    hess_quad: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let n = l.vertex_count();
    let mut total = 0.0;
    let mut dir = vec![0.0; n * l.channels()];
    for c in 0..l.channels() {
        let lam = l.lambda(c);
        for (e, &(i, j)) in l.graph().edges().iter().enumerate() {
            if lam[e] == 0.0 {
                continue;
            }
            let (pi, pj) = (c * n + i as usize, c * n + j as usize);
            dir[pi] = 1.0;
            dir[pj] = -1.0;
            let q = hess_quad(&dir)?;
            dir[pi] = 0.0;
            dir[pj] = 0.0;
            total += lam[e] * q;
        }
    }
    Ok(total)
}

/// Eigendecomposition of one channel's dense Laplacian with the constant mode
/// identified. Errors when more than one eigenvalue is numerically zero.
struct MetricEigen {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    zero_tol: f64,
}

fn metric_eigen(l: &LaplacianState, channel: usize) -> Result<MetricEigen> {
    let dense = l.to_dense(channel)?;
    let eig = dense.symmetric_eigen();
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::DegenerateMetric(
            "Laplacian is identically zero".into(),
        ));
    }
    let zero_tol = max * ZERO_EIG_REL * (l.vertex_count() as f64).max(1.0);
    let zeros = values.iter().filter(|v| v.abs() <= zero_tol).count();
    if zeros > 1 {
        return Err(Error::DegenerateMetric(format!(
            "{zeros} near-zero eigenvalues; metric singular beyond the constant mode"
        )));
    }
    if let Some(v) = values.iter().find(|v| **v < -zero_tol) {
        return Err(Error::DegenerateMetric(format!(
            "negative eigenvalue {v} in Laplacian"
        )));
    }
    Ok(MetricEigen {
        values,
        vectors: eig.eigenvectors,
        zero_tol,
    })
}

/// Solves `L(x) phi = rhs` on the sum-zero subspace (`phi` is the
/// pseudo-inverse image of `rhs`). Uses a dense factorization up to the
/// dense cap and conjugate gradients in operator form above it.
pub(crate) fn pinv_solve(l: &LaplacianState, channel: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = l.vertex_count();
    if rhs.len() != n {
        return Err(Error::shape(format!("{n} entries"), format!("{}", rhs.len())));
    }
    if n <= DEFAULT_DENSE_CAP {
        let mut dense = l.to_dense(channel)?;
        // L + c/n 11^T is positive definite on a connected graph and agrees
        // with L^+ on sum-zero right-hand sides.
        let shift = dense.trace() / (n * n) as f64;
        if shift <= 0.0 {
            return Err(Error::DegenerateMetric("zero Laplacian".into()));
        }
        for i in 0..n {
            for j in 0..n {
                dense[(i, j)] += shift;
            }
        }
        let chol = dense
            .cholesky()
            .ok_or_else(|| Error::DegenerateMetric("Laplacian not positive on tangent space".into()))?;
        let phi = chol.solve(&DVector::from_column_slice(rhs));
        // Remove the constant component so the representative is sum-zero.
        let mean = phi.sum() / n as f64;
        Ok(phi.iter().map(|v| v - mean).collect())
    } else {
        cg_solve(l, channel, rhs)
    }
}

fn cg_solve(l: &LaplacianState, channel: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    let project = |v: &mut [f64]| {
        let mean: f64 = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|e| *e -= mean);
    };
    let mut r = rhs.to_vec();
    project(&mut r);
    let rhs_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..20 * n {
        let mut lp = l.apply(channel, &p);
        project(&mut lp);
        let plp: f64 = p.iter().zip(&lp).map(|(a, b)| a * b).sum();
        if plp <= 0.0 {
            return Err(Error::DegenerateMetric(
                "conjugate gradient hit a non-positive curvature direction".into(),
            ));
        }
        let alpha = rr / plp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * lp[i];
        }
        project(&mut r);
        let rr_next: f64 = r.iter().map(|v| v * v).sum();
        if rr_next.sqrt() <= CG_TOL * rhs_norm {
            return Ok(x);
        }
        let beta = rr_next / rr;
        rr = rr_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::Internal(
        "conjugate gradient failed to converge".into(),
    ))
}

/// Squared metric norm `xi^T L(x)^+ xi`, summed over channels.
pub fn metric_norm_sq(l: &LaplacianState, xi: &TangentVector) -> Result<f64> {
    check_field_shape(l, xi.pixels(), xi.channels())?;
    let mut total = 0.0;
    for c in 0..l.channels() {
        let phi = pinv_solve(l, c, xi.channel(c))?;
        total += xi.channel(c).iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Evaluates `L(m) v` where the Laplacian is built at an arbitrary (possibly
/// signed) vertex vector `m`; `L` is linear in its argument.
fn laplacian_at_apply(graph: &WeightedPixelGraph, m: &[f64], v: &[f64]) -> Vec<f64> {
    let volume = graph.volume();
    let mut out = vec![0.0; v.len()];
    for (e, &(i, j)) in graph.edges().iter().enumerate() {
        let (i, j) = (i as usize, j as usize);
        let lam = graph.weights()[e] * (m[i] / volume[i] + m[j] / volume[j]) / 2.0;
        let d = lam * (v[i] - v[j]);
        out[i] += d;
        out[j] -= d;
    }
    out
}

/// Christoffel symbol of the metric:
/// `-1/2 [L(s1) L(x)^+ s2 + L(s2) L(x)^+ s1]
///  + 1/2 L(x) (grad_G L(x)^+ s1 o grad_G L(x)^+ s2)`
/// where the o-product averages edgewise gradient products over each node's
/// neighborhood with weight `1/(2 d_i)`. The result is tangent.
pub fn christoffel(
    l: &LaplacianState,
    s1: &TangentVector,
    s2: &TangentVector,
) -> Result<TangentVector> {
    check_field_shape(l, s1.pixels(), s1.channels())?;
    check_field_shape(l, s2.pixels(), s2.channels())?;
    let graph = l.graph();
    let n = l.vertex_count();
    let volume = graph.volume();
    let mut out = Vec::with_capacity(n * l.channels());
    for c in 0..l.channels() {
        let phi1 = pinv_solve(l, c, s1.channel(c))?;
        let phi2 = pinv_solve(l, c, s2.channel(c))?;

        let a = laplacian_at_apply(graph, s1.channel(c), &phi2);
        let b = laplacian_at_apply(graph, s2.channel(c), &phi1);

        // (grad_G phi1 o grad_G phi2)_i
        //   = 1/(2 d_i) sum_{j in N(i)} w_ij (phi1_i - phi1_j)(phi2_i - phi2_j)
        let mut prod = vec![0.0; n];
        for (e, &(i, j)) in graph.edges().iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let t = graph.weights()[e] * (phi1[i] - phi1[j]) * (phi2[i] - phi2[j]);
            prod[i] += t;
            prod[j] += t;
        }
        for i in 0..n {
            prod[i] /= 2.0 * volume[i];
        }
        let correction = l.apply(c, &prod);

        for i in 0..n {
            out.push(-0.5 * (a[i] + b[i]) + 0.5 * correction[i]);
        }
    }
    TangentVector::with_tolerance(
        out,
        l.channels(),
        TangentVector::default_tolerance(n).max(1e-9),
    )
}

/// Riemannian Hessian quadratic form
/// `s1^T Hess F s2 + sum_i Gamma(s1, s2)_i dF/dx_i`,
/// with one Euclidean Hessian block per channel.
pub fn riemannian_hessian(
    l: &LaplacianState,
    euclid_hess: &[DMatrix<f64>],
    grad: &GradientVector,
    s1: &TangentVector,
    s2: &TangentVector,
) -> Result<f64> {
    check_field_shape(l, grad.pixels(), grad.channels())?;
    if euclid_hess.len() != l.channels() {
        return Err(Error::shape(
            format!("{} Hessian blocks", l.channels()),
            format!("{}", euclid_hess.len()),
        ));
    }
    let n = l.vertex_count();
    let gamma = christoffel(l, s1, s2)?;
    let mut total = 0.0;
    for c in 0..l.channels() {
        let h = &euclid_hess[c];
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::shape(
                format!("{n}x{n} Hessian"),
                format!("{}x{}", h.nrows(), h.ncols()),
            ));
        }
        let (a, b) = (s1.channel(c), s2.channel(c));
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += h[(i, j)] * b[j];
            }
            total += a[i] * row;
        }
        total += gamma
            .channel(c)
            .iter()
            .zip(grad.channel(c))
            .map(|(g, d)| g * d)
            .sum::<f64>();
    }
    Ok(total)
}

/// Gradient of `log det` over the non-singular eigenvalues of one channel's
/// Laplacian, by Jacobi's formula with the dense pseudo-inverse:
/// `v_k = sum_{e=(i,j) with k in e} w_e / (2 d_k) (P_ii - 2 P_ij + P_jj)`.
pub fn grad_log_det(l: &LaplacianState, channel: usize) -> Result<Vec<f64>> {
    let n = l.vertex_count();
    let eig = metric_eigen(l, channel)?;
    // Dense pseudo-inverse over the positive eigenspace.
    let mut pinv: DMatrix<f64> = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.values.iter().enumerate() {
        if lambda <= eig.zero_tol {
            continue;
        }
        let v = eig.vectors.column(k);
        for i in 0..n {
            for j in 0..n {
                pinv[(i, j)] += v[i] * v[j] / lambda;
            }
        }
    }
    let graph = l.graph();
    let volume = graph.volume();
    let mut out = vec![0.0; n];
    for (e, &(i, j)) in graph.edges().iter().enumerate() {
        let (i, j) = (i as usize, j as usize);
        let quad = pinv[(i, i)] - 2.0 * pinv[(i, j)] + pinv[(j, j)];
        let w = graph.weights()[e];
        out[i] += w / (2.0 * volume[i]) * quad;
        out[j] += w / (2.0 * volume[j]) * quad;
    }
    Ok(out)
}

/// Full Laplace-Beltrami operator
/// `tr(L(x) Hess f) + grad f^T L(x) grad log det(L(x))^{-1/2}`,
/// summed over channels with one Hessian block per channel.
pub fn laplace_beltrami_full(
    l: &LaplacianState,
    hessians: &[DMatrix<f64>],
    grad: &GradientVector,
) -> Result<f64> {
    check_field_shape(l, grad.pixels(), grad.channels())?;
    if hessians.len() != l.channels() {
        return Err(Error::shape(
            format!("{} Hessian blocks", l.channels()),
            format!("{}", hessians.len()),
        ));
    }
    let n = l.vertex_count();
    let mut total = 0.0;
    for c in 0..l.channels() {
        let h = &hessians[c];
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::shape(
                format!("{n}x{n} Hessian"),
                format!("{}x{}", h.nrows(), h.ncols()),
            ));
        }
        let lam = l.lambda(c);
        let mut trace = 0.0;
        for (e, &(i, j)) in l.graph().edges().iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            trace += lam[e] * (h[(i, i)] - 2.0 * h[(i, j)] + h[(j, j)]);
        }
        // grad log det(L)^{-1/2} = -1/2 grad log det(L).
        let v = grad_log_det(l, c)?;
        let half_v: Vec<f64> = v.iter().map(|t| -0.5 * t).collect();
        let lv = l.apply(c, &half_v);
        let volume_term: f64 = grad.channel(c).iter().zip(&lv).map(|(g, t)| g * t).sum();
        total += trace + volume_term;
    }
    Ok(total)
}

/// Riemannian volume `prod_i lambda_i(x)^{-1/2}` over the positive
/// eigenvalues, multiplied across channels.
pub fn riemannian_volume(l: &LaplacianState) -> Result<f64> {
    let mut vol = 1.0;
    for c in 0..l.channels() {
        let eig = metric_eigen(l, c)?;
        for &lambda in &eig.values {
            if lambda > eig.zero_tol {
                vol *= lambda.powf(-0.5);
            }
        }
    }
    Ok(vol)
}

/// Reconstructs a dense Hessian from a directional quadratic-form oracle by
/// polarization: `H_ij = (q(e_i + e_j) - q(e_i) - q(e_j)) / 2`.
pub fn hessian_from_quad_oracle(
    dim: usize,
    quad: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<DMatrix<f64>> {
    let mut diag = vec![0.0; dim];
    let mut dir = vec![0.0; dim];
    for i in 0..dim {
        dir[i] = 1.0;
        diag[i] = quad(&dir)?;
        dir[i] = 0.0;
    }
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = diag[i];
        for j in (i + 1)..dim {
            dir[i] = 1.0;
            dir[j] = 1.0;
            let q = quad(&dir)?;
            dir[i] = 0.0;
            dir[j] = 0.0;
            let hij = (q - diag[i] - diag[j]) / 2.0;
            h[(i, j)] = hij;
            h[(j, i)] = hij;
        }
    }
    Ok(h)
}
