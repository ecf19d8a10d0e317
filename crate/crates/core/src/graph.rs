//! Weighted pixel graphs and the input-dependent weighted Laplacian.
//!
//! Pixels of a `height x width` grid are the vertices; two pixels are joined
//! by an edge when their Euclidean distance is at most `radius`. Every edge
//! carries a positive weight, vertices carry a normalized volume form, and an
//! image induces the edge-weight vector `lambda` of the Laplacian `L(x)`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest vertex count for which dense `n x n` materializations are allowed.
/// Above the cap only operator-form (edge-sum) evaluation is available.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// How edge weights are assigned when building a grid graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    /// Every edge weight is 1.
    Constant,
    /// Edge weight is the reciprocal of the Euclidean pixel distance.
    InverseDistance,
}

/// Static skeleton of the geometry: vertex grid, local edges, weights and
/// the normalized volume form.
#[derive(Debug, Clone)]
pub struct WeightedPixelGraph {
    height: usize,
    width: usize,
    radius: usize,
    /// Unordered edges stored as `(lo, hi)` pixel-index pairs with `lo < hi`.
    edges: Vec<(u32, u32)>,
    /// Positive weight per edge, parallel to `edges`.
    weights: Vec<f64>,
    /// Normalized per-vertex volume form `d_i`; sums to 1.
    volume: Vec<f64>,
    /// Distinct offset tuples `(dy, dx)` in canonical orientation
    /// (`dy > 0`, or `dy == 0 && dx > 0`). Each edge is one offset applied
    /// to one base pixel.
    neighbor_relations: Vec<(i32, i32)>,
}

impl WeightedPixelGraph {
    /// Builds the grid graph with all pixel pairs within Euclidean distance
    /// `radius` connected. Weights follow `rule`, the volume form is
    /// `d_i = sum_j w_ij / sum_ij w_ij`.
    pub fn grid(height: usize, width: usize, radius: usize, rule: WeightRule) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("graph dimensions must be at least 1x1"));
        }
        if radius == 0 {
            return Err(Error::invalid("neighborhood radius must be at least 1"));
        }

        let r = radius as i64;
        let mut neighbor_relations = Vec::new();
        for dy in 0..=r {
            for dx in -r..=r {
                let canonical = dy > 0 || (dy == 0 && dx > 0);
                if canonical && dy * dy + dx * dx <= r * r {
                    neighbor_relations.push((dy as i32, dx as i32));
                }
            }
        }
        neighbor_relations.sort_unstable();

        let n = height * width;
        let mut edges = Vec::new();
        let mut weights = Vec::new();
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let p = (y * width as i64 + x) as u32;
                for &(dy, dx) in &neighbor_relations {
                    let (qy, qx) = (y + dy as i64, x + dx as i64);
                    if qy < 0 || qy >= height as i64 || qx < 0 || qx >= width as i64 {
                        continue;
                    }
                    let q = (qy * width as i64 + qx) as u32;
                    // Canonical offsets always point to a strictly larger index.
                    debug_assert!(q > p);
                    edges.push((p, q));
                    weights.push(match rule {
                        WeightRule::Constant => 1.0,
                        WeightRule::InverseDistance => {
                            1.0 / ((dy as f64).hypot(dx as f64))
                        }
                    });
                }
            }
        }

        let mut degree = vec![0.0f64; n];
        for (e, &(i, j)) in edges.iter().enumerate() {
            degree[i as usize] += weights[e];
            degree[j as usize] += weights[e];
        }
        let total: f64 = kahan_sum(degree.iter().copied());
        if total <= 0.0 {
            return Err(Error::invalid(
                "graph has no edges; volume form undefined (radius too small for grid?)",
            ));
        }
        let volume: Vec<f64> = degree.iter().map(|&d| d / total).collect();

        Ok(Self {
            height,
            width,
            radius,
            edges,
            weights,
            volume,
            neighbor_relations,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Number of vertices (pixels).
    pub fn vertex_count(&self) -> usize {
        self.height * self.width
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Normalized volume form `d_i`.
    pub fn volume(&self) -> &[f64] {
        &self.volume
    }

    pub fn neighbor_relations(&self) -> &[(i32, i32)] {
        &self.neighbor_relations
    }
}

/// Numerically careful sum for the volume normalization.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Non-negative mass per pixel per channel; the point at which the metric is
/// evaluated. Values are stored channel-major: `values[c * n + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMassVector {
    values: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImageMassVector {
    pub fn new(values: Vec<f64>, height: usize, width: usize, channels: usize) -> Result<Self> {
        let n = height * width;
        if channels == 0 || values.len() != n * channels {
            return Err(Error::shape(
                format!("{n} x {channels} values"),
                format!("{} values", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "image mass entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            values,
            height,
            width,
            channels,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel slice for one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    /// Total mass per channel. Not required to be 1.
    pub fn mass(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum())
            .collect()
    }

    fn check_graph(&self, graph: &WeightedPixelGraph) -> Result<()> {
        if self.height != graph.height() || self.width != graph.width() {
            return Err(Error::shape(
                format!("{}x{} image", graph.height(), graph.width()),
                format!("{}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

/// The input-dependent operator `L(x)`: per-edge weights
/// `lambda_(i,j) = w_ij ((x_i + floor)/d_i + (x_j + floor)/d_j) / 2`,
/// one block per channel, plus a reference to the underlying graph.
///
/// `lambda` here includes the edge weight `w_ij`; the incidence factorization
/// `L = D^T Lambda D` uses `lambda / w` since `D` already carries `sqrt(w)`.
#[derive(Debug, Clone)]
pub struct LaplacianState {
    graph: Arc<WeightedPixelGraph>,
    /// Channel-major per-edge weights: `lambda[c * |E| + e]`.
    lambda: Vec<f64>,
    floor: f64,
    channels: usize,
}

impl LaplacianState {
    /// Evaluates `L(x)` at the image `x` with mass floor `floor`.
    pub fn build(graph: Arc<WeightedPixelGraph>, x: &ImageMassVector, floor: f64) -> Result<Self> {
        x.check_graph(&graph)?;
        if floor < 0.0 || !floor.is_finite() {
            return Err(Error::invalid("mass floor must be finite and >= 0"));
        }
        let volume = graph.volume();
        let m = graph.edges().len();
        let mut lambda = Vec::with_capacity(m * x.channels());
        for c in 0..x.channels() {
            let xc = x.channel(c);
            for (e, &(i, j)) in graph.edges().iter().enumerate() {
                let (i, j) = (i as usize, j as usize);
                let li = (xc[i] + floor) / volume[i];
                let lj = (xc[j] + floor) / volume[j];
                lambda.push(graph.weights()[e] * (li + lj) / 2.0);
            }
        }
        Ok(Self {
            graph,
            lambda,
            floor,
            channels: x.channels(),
        })
    }

    pub fn graph(&self) -> &Arc<WeightedPixelGraph> {
        &self.graph
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vertex_count(&self) -> usize {
        self.graph.vertex_count()
    }

    /// Per-edge weights for one channel (weight `w_ij` folded in).
    pub fn lambda(&self, channel: usize) -> &[f64] {
        let m = self.graph.edges().len();
        &self.lambda[channel * m..(channel + 1) * m]
    }

    /// Operator application `L(x) v` for one channel via edge sums.
    pub fn apply(&self, channel: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        let lam = self.lambda(channel);
        for (e, &(i, j)) in self.graph.edges().iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let d = lam[e] * (v[i] - v[j]);
            out[i] += d;
            out[j] -= d;
        }
        out
    }

    /// Dense `n x n` matrix for one channel, available for
    /// `n <= DEFAULT_DENSE_CAP`.
    pub fn to_dense(&self, channel: usize) -> Result<DMatrix<f64>> {
        self.to_dense_capped(channel, DEFAULT_DENSE_CAP)
    }

    pub fn to_dense_capped(&self, channel: usize, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.vertex_count();
        if n > cap {
            return Err(Error::invalid(format!(
                "dense materialization refused: n = {n} exceeds cap {cap}"
            )));
        }
        let mut m = DMatrix::zeros(n, n);
        let lam = self.lambda(channel);
        for (e, &(i, j)) in self.graph.edges().iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            m[(i, i)] += lam[e];
            m[(j, j)] += lam[e];
            m[(i, j)] -= lam[e];
            m[(j, i)] -= lam[e];
        }
        Ok(m)
    }
}

/// The discrete gradient operator `D` of the graph: one row per edge with
/// `+sqrt(w)` at the higher-index endpoint and `-sqrt(w)` at the lower.
/// Satisfies `D^T diag(lambda/w) D = L(x)` and `D 1 = 0`.
#[derive(Debug, Clone)]
pub struct IncidenceOperator {
    graph: Arc<WeightedPixelGraph>,
}

impl IncidenceOperator {
    pub fn new(graph: Arc<WeightedPixelGraph>) -> Self {
        Self { graph }
    }

    pub fn rows(&self) -> usize {
        self.graph.edges().len()
    }

    pub fn cols(&self) -> usize {
        self.graph.vertex_count()
    }

    /// `D v`: per-edge signed differences scaled by `sqrt(w)`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.graph
            .edges()
            .iter()
            .zip(self.graph.weights())
            .map(|(&(lo, hi), &w)| w.sqrt() * (v[hi as usize] - v[lo as usize]))
            .collect()
    }

    /// `D^T u` for a per-edge vector `u`.
    pub fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for (e, &(lo, hi)) in self.graph.edges().iter().enumerate() {
            let s = self.graph.weights()[e].sqrt() * u[e];
            out[hi as usize] += s;
            out[lo as usize] -= s;
        }
        out
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.cols();
        if n > DEFAULT_DENSE_CAP {
            return Err(Error::invalid(format!(
                "dense incidence refused: n = {n} exceeds cap {DEFAULT_DENSE_CAP}"
            )));
        }
        let mut m = DMatrix::zeros(self.rows(), n);
        for (e, &(lo, hi)) in self.graph.edges().iter().enumerate() {
            let s = self.graph.weights()[e].sqrt();
            m[(e, hi as usize)] = s;
            m[(e, lo as usize)] = -s;
        }
        Ok(m)
    }
}
