//! FGSM and iterated-FGSM adversarial perturbations with an L-infinity
//! budget, plus measurement and rescaling of perturbations under the
//! quadratic transport-ball constraint `xi^T L(x)^+ xi <= eps`.

use serde::{Deserialize, Serialize};

use crate::calculus::{self, TangentVector};
use crate::error::{Error, Result};
use crate::graph::{ImageMassVector, LaplacianState};
use crate::model::{LossKind, ModelParams, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormDomain {
    Linf,
    WassersteinQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget.
    pub epsilon: f64,
    /// Per-step size (iterated attack only).
    pub alpha: f64,
    /// Iteration count (iterated attack only).
    pub steps: usize,
    pub norm_domain: NormDomain,
    /// Valid pixel range the perturbed image is clamped to.
    pub clamp: (f64, f64),
}

impl AttackConfig {
    /// One-step sign attack at budget `epsilon`, clamped to [0, 1].
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            norm_domain: NormDomain::Linf,
            clamp: (0.0, 1.0),
        }
    }

    /// Iterated attack; the standard setting is `alpha = 2/255`, 20 steps,
    /// `epsilon = 8/255`.
    pub fn ifgsm(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Ifgsm,
            epsilon,
            alpha,
            steps,
            norm_domain: NormDomain::Linf,
            clamp: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::invalid("attack epsilon must be finite and >= 0"));
        }
        if self.kind == AttackKind::Ifgsm && (self.alpha <= 0.0 || self.steps == 0) {
            return Err(Error::invalid(
                "iterated attack needs alpha > 0 and steps >= 1",
            ));
        }
        if self.clamp.0 > self.clamp.1 {
            return Err(Error::invalid("clamp range is empty"));
        }
        Ok(())
    }
}

/// Sign with the convention `sign(0) = 0` (no perturbation in flat
/// coordinates).
fn attack_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-step sign attack `x' = clamp(x + eps * sign(grad_x loss))`.
pub fn fgsm(
    model: &ModelParams,
    x: &ImageMassVector,
    y: &[f64],
    loss: LossKind,
    cfg: &AttackConfig,
) -> Result<ImageMassVector> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Fgsm {
        return Err(Error::invalid("config kind is not fgsm"));
    }
    let grad = model.input_gradient(x.values(), y, loss, Target::Loss)?;
    let values: Vec<f64> = x
        .values()
        .iter()
        .zip(&grad)
        .map(|(v, g)| (v + cfg.epsilon * attack_sign(*g)).clamp(cfg.clamp.0, cfg.clamp.1))
        .collect();
    ImageMassVector::new(values, x.height(), x.width(), x.channels())
}

/// Iterated sign attack with per-step clamping and projection onto the
/// L-infinity ball of radius `epsilon` around `x`.
pub fn ifgsm(
    model: &ModelParams,
    x: &ImageMassVector,
    y: &[f64],
    loss: LossKind,
    cfg: &AttackConfig,
) -> Result<ImageMassVector> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Ifgsm {
        return Err(Error::invalid("config kind is not ifgsm"));
    }
    let mut current: Vec<f64> = x.values().to_vec();
    for _ in 0..cfg.steps {
        let grad = model.input_gradient(&current, y, loss, Target::Loss)?;
        for ((v, g), orig) in current.iter_mut().zip(&grad).zip(x.values()) {
            let stepped = (*v + cfg.alpha * attack_sign(*g)).clamp(cfg.clamp.0, cfg.clamp.1);
            *v = stepped.clamp(orig - cfg.epsilon, orig + cfg.epsilon);
        }
    }
    ImageMassVector::new(current, x.height(), x.width(), x.channels())
}

/// Geometry needed to impose the quadratic transport-ball budget.
pub struct MetricBallContext<'a> {
    pub graph: &'a std::sync::Arc<crate::graph::WeightedPixelGraph>,
    pub floor: f64,
}

/// Dispatches on the configured attack kind. Requires `norm_domain = linf`;
/// use [`attack_with_context`] for the transport-ball budget.
pub fn attack(
    model: &ModelParams,
    x: &ImageMassVector,
    y: &[f64],
    loss: LossKind,
    cfg: &AttackConfig,
) -> Result<ImageMassVector> {
    if cfg.norm_domain == NormDomain::WassersteinQuadratic {
        return Err(Error::invalid(
            "quadratic transport budget needs graph context; use attack_with_context",
        ));
    }
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, y, loss, cfg),
        AttackKind::Ifgsm => ifgsm(model, x, y, loss, cfg),
    }
}

/// Attack under either budget. For the quadratic transport ball the sign
/// attack generates the direction, which is then projected to the tangent
/// space and rescaled so that `xi^T L(x)^+ xi <= epsilon` (measure +
/// rescale; no inner projected-descent loop).
pub fn attack_with_context(
    model: &ModelParams,
    x: &ImageMassVector,
    y: &[f64],
    loss: LossKind,
    cfg: &AttackConfig,
    ctx: Option<&MetricBallContext>,
) -> Result<ImageMassVector> {
    let stepped = match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, y, loss, cfg)?,
        AttackKind::Ifgsm => ifgsm(model, x, y, loss, cfg)?,
    };
    match cfg.norm_domain {
        NormDomain::Linf => Ok(stepped),
        NormDomain::WassersteinQuadratic => {
            let ctx = ctx.ok_or_else(|| {
                Error::invalid("quadratic transport budget needs graph context")
            })?;
            let l = LaplacianState::build(ctx.graph.clone(), x, ctx.floor)?;
            let raw: Vec<f64> = stepped
                .values()
                .iter()
                .zip(x.values())
                .map(|(a, o)| a - o)
                .collect();
            let (xi, _) = TangentVector::project(raw, x.channels())?;
            let (scaled, _) = rescale_to_budget(&l, &xi, cfg.epsilon)?;
            let values: Vec<f64> = x
                .values()
                .iter()
                .zip(scaled.values())
                .map(|(o, d)| (o + d).clamp(cfg.clamp.0, cfg.clamp.1))
                .collect();
            ImageMassVector::new(values, x.height(), x.width(), x.channels())
        }
    }
}

/// Size of a perturbation under the transport-ball constraint.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationSize {
    /// `xi^T L(x)^+ xi`.
    pub size: f64,
    /// Whether the raw perturbation had to be projected to the tangent space
    /// (per-channel mean subtraction) first.
    pub projected: bool,
}

/// Measures `xi^T L(x)^+ xi`. Non-tangent input is projected onto the
/// tangent space first and flagged.
pub fn wasserstein_perturbation_size(
    l: &LaplacianState,
    xi_values: &[f64],
    channels: usize,
) -> Result<PerturbationSize> {
    let (xi, projected) = TangentVector::project(xi_values.to_vec(), channels)?;
    let size = calculus::metric_norm_sq(l, &xi)?;
    Ok(PerturbationSize { size, projected })
}

/// Scales `xi` by `sqrt(eps / size)` when its quadratic size exceeds the
/// budget, so the result satisfies `size <= eps` (up to rounding).
pub fn rescale_to_budget(
    l: &LaplacianState,
    xi: &TangentVector,
    epsilon: f64,
) -> Result<(TangentVector, f64)> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::invalid("budget must be finite and >= 0"));
    }
    let size = calculus::metric_norm_sq(l, xi)?;
    if size <= epsilon {
        return Ok((xi.clone(), size));
    }
    let mut scaled = xi.clone();
    scaled.scale((epsilon / size).sqrt());
    let new_size = calculus::metric_norm_sq(l, &scaled)?;
    Ok((scaled, new_size))
}
