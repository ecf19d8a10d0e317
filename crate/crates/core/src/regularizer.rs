//! Tikhonov penalties from second-order expansion of noise-perturbed losses:
//! the gradient-norm and Laplacian terms with their loss coefficients, the
//! first-order penalty for non-zero-mean perturbations, the loss-gradient
//! training objective, and a Monte-Carlo verifier of the expansion.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::calculus::{
    self, GradientVector, NeighborKernelSet, TangentVector,
};
use crate::error::{Error, Result};
use crate::graph::{ImageMassVector, LaplacianState, WeightedPixelGraph};
use crate::model::{clamp_prob, LossKind};
use crate::noise::{self, NoiseConfig};

/// Which geometry the penalty uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Wasserstein,
    Euclidean,
}

/// Penalize the gradient of the loss (the trained objective) or of the
/// discriminative function with second-order loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTarget {
    LossGradient,
    FunctionGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianVariant {
    /// `tr(L(x) Hess f)` (Lebesgue reference measure).
    Modified,
    /// Trace plus the volume-form correction.
    Full,
}

/// Penalty configuration; `strength` multiplies the whole report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub metric: MetricKind,
    pub strength: f64,
    pub loss: LossKind,
    pub penalty_target: PenaltyTarget,
    pub include_laplacian: bool,
    pub laplacian_variant: LaplacianVariant,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Wasserstein,
            strength: 0.0,
            loss: LossKind::CrossEntropy,
            penalty_target: PenaltyTarget::LossGradient,
            include_laplacian: false,
            laplacian_variant: LaplacianVariant::Modified,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::invalid("regularizer strength must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Runtime metric: either the flat identity metric or the Wasserstein
/// Laplacian at a concrete input.
pub enum MetricOperator<'a> {
    Euclidean,
    Wasserstein(&'a LaplacianState),
}

impl MetricOperator<'_> {
    /// Gradient-norm quadratic form of this metric's inverse tensor.
    pub fn quad(&self, u: &GradientVector, v: &GradientVector) -> Result<f64> {
        match self {
            MetricOperator::Euclidean => {
                if u.values().len() != v.values().len() {
                    return Err(Error::shape(
                        format!("{} entries", u.values().len()),
                        format!("{}", v.values().len()),
                    ));
                }
                Ok(u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum())
            }
            MetricOperator::Wasserstein(l) => calculus::quadratic_form(l, u, v),
        }
    }
}

/// Directional-second-derivative oracle: receives a full input-space
/// direction and returns `dir^T Hess f dir`.
pub type HessQuad<'a> = &'a mut dyn FnMut(&[f64]) -> Result<f64>;

/// Laplacian-term request attached to a penalty evaluation.
pub struct LaplacianTerm<'a> {
    pub variant: LaplacianVariant,
    pub hess_quad: HessQuad<'a>,
}

/// Decomposed penalty values for one example:
/// `total = grad_term + laplacian_term` (or just the gradient term when the
/// Laplacian part is not requested).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerReport {
    /// `l'' * ||grad f||^2` in the requested metric.
    pub grad_term: f64,
    /// `l' * Laplacian(f)`; zero when not requested.
    pub laplacian_term: f64,
    pub total: f64,
}

impl RegularizerReport {
    fn new(grad_term: f64, laplacian_term: f64) -> Self {
        Self {
            grad_term,
            laplacian_term,
            total: grad_term + laplacian_term,
        }
    }

    /// Scales every component, e.g. by the configured strength.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grad_term: self.grad_term * factor,
            laplacian_term: self.laplacian_term * factor,
            total: self.total * factor,
        }
    }

    /// Per-batch aggregation: the mean over a per-example breakdown,
    /// matching the expectation form of the penalty.
    pub fn mean_of(reports: &[RegularizerReport]) -> RegularizerReport {
        let n = reports.len().max(1) as f64;
        RegularizerReport {
            grad_term: reports.iter().map(|r| r.grad_term).sum::<f64>() / n,
            laplacian_term: reports.iter().map(|r| r.laplacian_term).sum::<f64>() / n,
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        }
    }
}

/// First and second derivatives of the scalar loss in its first argument.
pub fn loss_derivatives(loss: LossKind, f: f64, y: f64) -> (f64, f64) {
    match loss {
        LossKind::Square => (2.0 * (f - y), 2.0),
        LossKind::CrossEntropy => {
            let p = clamp_prob(f);
            (
                -y / p + (1.0 - y) / (1.0 - p),
                y / (p * p) + (1.0 - y) / ((1.0 - p) * (1.0 - p)),
            )
        }
    }
}

/// Third derivative of the scalar loss in its first argument; needed when
/// penalty coefficients themselves depend on the parameters.
pub fn loss_third_derivative(loss: LossKind, f: f64, y: f64) -> f64 {
    match loss {
        LossKind::Square => 0.0,
        LossKind::CrossEntropy => {
            let p = clamp_prob(f);
            -2.0 * y / (p * p * p) + 2.0 * (1.0 - y) / ((1.0 - p) * (1.0 - p) * (1.0 - p))
        }
    }
}

pub fn loss_value(loss: LossKind, f: f64, y: f64) -> f64 {
    match loss {
        LossKind::Square => (f - y) * (f - y),
        LossKind::CrossEntropy => {
            let p = clamp_prob(f);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        }
    }
}

fn laplacian_of(
    metric: &MetricOperator,
    grad_f: &GradientVector,
    term: &mut LaplacianTerm,
) -> Result<f64> {
    match metric {
        MetricOperator::Euclidean => {
            // Flat metric: both variants reduce to the plain Hessian trace.
            let dim = grad_f.values().len();
            let mut dir = vec![0.0; dim];
            let mut trace = 0.0;
            for i in 0..dim {
                dir[i] = 1.0;
                trace += (term.hess_quad)(&dir)?;
                dir[i] = 0.0;
            }
            Ok(trace)
        }
        MetricOperator::Wasserstein(l) => match term.variant {
            LaplacianVariant::Modified => calculus::modified_laplacian(l, term.hess_quad),
            LaplacianVariant::Full => {
                let n = l.vertex_count();
                let mut blocks = Vec::with_capacity(l.channels());
                for c in 0..l.channels() {
                    let dim = n * l.channels();
                    let mut block_quad = |d: &[f64]| {
                        let mut full = vec![0.0; dim];
                        full[c * n..(c + 1) * n].copy_from_slice(d);
                        (term.hess_quad)(&full)
                    };
                    blocks.push(calculus::hessian_from_quad_oracle(n, &mut block_quad)?);
                }
                calculus::laplace_beltrami_full(l, &blocks, grad_f)
            }
        },
    }
}

fn penalty_with_coefficients(
    lpp: f64,
    lp: f64,
    metric: &MetricOperator,
    grad_f: &GradientVector,
    laplacian: Option<&mut LaplacianTerm>,
) -> Result<RegularizerReport> {
    let grad_term = lpp * metric.quad(grad_f, grad_f)?;
    let laplacian_term = match laplacian {
        Some(term) => lp * laplacian_of(metric, grad_f, term)?,
        None => 0.0,
    };
    Ok(RegularizerReport::new(grad_term, laplacian_term))
}

/// Square-error penalty: `l'' = 2`, `l' = 2 (f - y)`.
pub fn penalty_square_loss(
    f_val: f64,
    y: f64,
    metric: &MetricOperator,
    grad_f: &GradientVector,
    laplacian: Option<&mut LaplacianTerm>,
) -> Result<RegularizerReport> {
    let (lp, lpp) = loss_derivatives(LossKind::Square, f_val, y);
    penalty_with_coefficients(lpp, lp, metric, grad_f, laplacian)
}

/// Cross-entropy penalty: `l'' = y/f^2 + (1-y)/(1-f)^2`,
/// `l' = -y/f + (1-y)/(1-f)`. `f_val` must lie strictly inside (0, 1);
/// the coefficients are evaluated on the clamped probability.
pub fn penalty_cross_entropy(
    f_val: f64,
    y: f64,
    metric: &MetricOperator,
    grad_f: &GradientVector,
    laplacian: Option<&mut LaplacianTerm>,
) -> Result<RegularizerReport> {
    if !(0.0 < f_val && f_val < 1.0) {
        return Err(Error::invalid(format!(
            "cross-entropy penalty needs f in (0,1), got {f_val}"
        )));
    }
    let (lp, lpp) = loss_derivatives(LossKind::CrossEntropy, f_val, y);
    penalty_with_coefficients(lpp, lp, metric, grad_f, laplacian)
}

/// First-order penalty for non-zero-mean perturbations:
/// `l'(f, y) * <E[xi], grad f>`.
pub fn penalty_nonzero_mean(
    f_val: f64,
    y: f64,
    mean_xi: &TangentVector,
    grad_f: &GradientVector,
    loss: LossKind,
) -> Result<f64> {
    if mean_xi.values().len() != grad_f.values().len() {
        return Err(Error::shape(
            format!("{} entries", grad_f.values().len()),
            format!("{}", mean_xi.values().len()),
        ));
    }
    let (lp, _) = loss_derivatives(loss, f_val, y);
    let inner: f64 = mean_xi
        .values()
        .iter()
        .zip(grad_f.values())
        .map(|(a, b)| a * b)
        .sum();
    Ok(lp * inner)
}

/// The trained objective: `loss + strength * <grad loss, G^{-1} grad loss>`
/// with `G^{-1} = L(x)` for the Wasserstein metric and `G = I` for the
/// Euclidean one.
pub fn penalized_objective(
    loss_val: f64,
    metric: &MetricOperator,
    grad_loss: &GradientVector,
    strength: f64,
) -> Result<f64> {
    if !strength.is_finite() || strength < 0.0 {
        return Err(Error::invalid("strength must be finite and >= 0"));
    }
    if strength == 0.0 {
        return Ok(loss_val);
    }
    Ok(loss_val + strength * metric.quad(grad_loss, grad_loss)?)
}

/// A scalar discriminative function with enough structure for the
/// second-order expansion check.
pub trait ScalarModel {
    fn value(&self, x: &[f64]) -> f64;
    fn input_gradient(&self, x: &[f64]) -> Vec<f64>;
    /// `dir^T Hess f dir` at `x`.
    fn hess_quad(&self, x: &[f64], dir: &[f64]) -> Result<f64>;
}

/// `f(x) = w^T x + b`; the exact case of the expansion.
#[derive(Debug, Clone)]
pub struct LinearScalarModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ScalarModel for LinearScalarModel {
    fn value(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    fn input_gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.w.clone()
    }

    fn hess_quad(&self, _x: &[f64], _dir: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Scalar-output perceptron adapter (first head output).
pub struct MlpScalarModel<'a> {
    pub params: &'a crate::model::ModelParams,
}

impl ScalarModel for MlpScalarModel<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.params.forward(x).expect("shape checked by caller")[0]
    }

    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.params
            .input_gradient(x, &[0.0], LossKind::Square, crate::model::Target::Output(0))
            .expect("shape checked by caller")
    }

    fn hess_quad(&self, x: &[f64], dir: &[f64]) -> Result<f64> {
        self.params.input_dir_second_derivative(
            x,
            &[0.0],
            dir,
            LossKind::Square,
            crate::model::Target::Output(0),
            crate::model::SecondDerivMethod::Exact,
        )
    }
}

/// Outcome of the Monte-Carlo expansion check at one noise level.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionReport {
    pub eta: f64,
    pub draws: usize,
    /// MC mean of `l(f(x + xi), y) - l(f(x), y)`.
    pub empirical_delta: f64,
    /// `eta^2 / 2 (l'' grad f^T L grad f + l' tr(L Hess f))`.
    pub predicted_delta: f64,
    /// `empirical / predicted`, absent when the prediction is numerically 0.
    pub ratio: Option<f64>,
    /// Standard error of the Monte-Carlo mean.
    pub stderr: f64,
}

/// Runs the second-order expansion check: draws Wasserstein-Gaussian noise at
/// `x`, averages the loss change, and compares with the additive-coordinate
/// prediction built from the modified Laplacian.
pub fn verify_expansion_mc(
    model: &dyn ScalarModel,
    graph: &Arc<WeightedPixelGraph>,
    x: &ImageMassVector,
    y: f64,
    cfg: &NoiseConfig,
    draws: usize,
    loss: LossKind,
) -> Result<ExpansionReport> {
    if draws == 0 {
        return Err(Error::invalid("draw count must be at least 1"));
    }
    let l = LaplacianState::build(graph.clone(), x, cfg.floor)?;
    let flat = x.values();
    let f0 = model.value(flat);
    let l0 = loss_value(loss, f0, y);
    let (lp, lpp) = loss_derivatives(loss, f0, y);

    let grad = GradientVector::new(model.input_gradient(flat), x.channels())?;
    let quad = calculus::quadratic_form(&l, &grad, &grad)?;
    let mut oracle = |dir: &[f64]| model.hess_quad(flat, dir);
    let trace = calculus::modified_laplacian(&l, &mut oracle)?;
    let predicted = 0.5 * cfg.eta * cfg.eta * (lpp * quad + lp * trace);

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut perturbed = vec![0.0; flat.len()];
    for k in 0..draws {
        let xi = noise::sample_one(&l, cfg.eta, &mut rng);
        for (i, (xv, dv)) in flat.iter().zip(xi.values()).enumerate() {
            perturbed[i] = xv + dv;
        }
        let delta = loss_value(loss, model.value(&perturbed), y) - l0;
        let d1 = delta - mean;
        mean += d1 / (k + 1) as f64;
        m2 += d1 * (delta - mean);
    }
    let variance = if draws > 1 { m2 / (draws - 1) as f64 } else { 0.0 };
    let stderr = (variance / draws as f64).sqrt();

    let ratio = if predicted.abs() > 1e-300 && predicted.abs() > 1e-6 * stderr.max(f64::MIN_POSITIVE) {
        Some(mean / predicted)
    } else {
        None
    };
    Ok(ExpansionReport {
        eta: cfg.eta,
        draws,
        empirical_delta: mean,
        predicted_delta: predicted,
        ratio,
        stderr,
    })
}

/// Convenience for tests and the harness: the kernels matching a graph.
pub fn kernels_for(graph: &WeightedPixelGraph) -> Result<NeighborKernelSet> {
    NeighborKernelSet::for_graph(graph)
}
