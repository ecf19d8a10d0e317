//! Small twice-differentiable classifier: a multilayer perceptron with
//! softplus hidden activations and a sigmoid, softmax or identity output
//! head. Exposes forward values, exact reverse-mode parameter and input
//! gradients, and input directional second derivatives (exact
//! forward-over-reverse, or central finite differences of the input
//! gradient).
//!
//! All computation is in double precision and strictly sequential, so equal
//! parameters and inputs give bitwise equal outputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probability clamp for cross-entropy coefficients.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Elementwise logistic outputs (scalar binary classifier for one output).
    Sigmoid,
    /// Softmax over the output vector.
    Softmax,
    /// Raw linear outputs; only meaningful with the square loss.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Square,
    CrossEntropy,
}

/// What to differentiate with respect to the input: the training loss, or a
/// single head output (the discriminative function itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Loss,
    Output(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondDerivMethod {
    /// Central finite differences of the input gradient with step
    /// `1e-4 * (1 + |x|_inf)`.
    FiniteDifference,
    /// Exact forward-over-reverse propagation.
    Exact,
}

/// Weights and biases of the perceptron. `weights[l]` maps layer `l` to
/// layer `l+1`; hidden layers use softplus, the final layer feeds the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    head: Head,
}

/// Per-parameter gradient (or gradient-like) accumulator shaped like a model.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o * scale;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o * scale;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }
}

/// Result of one combined gradient / tangent pass along a fixed input
/// direction `u`.
pub struct RopResult {
    /// Value of the differentiated target at `x`.
    pub value: f64,
    /// `grad_x target`.
    pub input_grad: Vec<f64>,
    /// `Hess_x(target) u` (tangent of the input gradient).
    pub input_grad_tangent: Vec<f64>,
    /// `grad_theta target`.
    pub param_grads: ParamGrads,
    /// `grad_theta (u^T grad_x target)` (tangent of the parameter gradient).
    pub param_grads_tangent: ParamGrads,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_prob(f: f64) -> f64 {
    f.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

struct Trace {
    /// Activations; `a[0]` is the input, `a[l+1] = softplus(z[l])` for
    /// hidden layers.
    a: Vec<DVector<f64>>,
    /// Preactivations per layer.
    z: Vec<DVector<f64>>,
}

impl ModelParams {
    /// Scaled uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, seeded.
    pub fn init(input_dim: usize, hidden: &[usize], outputs: usize, head: Head, seed: u64) -> Result<Self> {
        if input_dim == 0 || outputs == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-bound..bound)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            head,
        })
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        head: Head,
    ) -> Result<Self> {
        if sizes.len() < 2 || weights.len() != sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::invalid("inconsistent layer chain"));
        }
        for l in 0..weights.len() {
            if weights[l].nrows() != sizes[l + 1]
                || weights[l].ncols() != sizes[l]
                || biases[l].len() != sizes[l + 1]
            {
                return Err(Error::invalid(format!("layer {l} shape inconsistent")));
            }
            if weights[l].iter().any(|v| !v.is_finite())
                || biases[l].iter().any(|v| !v.is_finite())
            {
                return Err(Error::invalid(format!("layer {l} has non-finite entries")));
            }
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            head,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    /// SGD-style in-place update: `theta -= lr * step`.
    pub fn step(&mut self, lr: f64, step: &ParamGrads) {
        for (w, s) in self.weights.iter_mut().zip(&step.weights) {
            *w -= s * lr;
        }
        for (b, s) in self.biases.iter_mut().zip(&step.biases) {
            *b -= s * lr;
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                format!("input of {}", self.input_dim()),
                format!("{}", x.len()),
            ));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let layers = self.weights.len();
        let mut a = Vec::with_capacity(layers + 1);
        let mut z = Vec::with_capacity(layers);
        a.push(DVector::from_column_slice(x));
        for l in 0..layers {
            let zl = &self.weights[l] * a.last().unwrap() + &self.biases[l];
            if l + 1 < layers {
                a.push(zl.map(softplus));
            }
            z.push(zl);
        }
        Trace { a, z }
    }

    fn head_probs(&self, z_last: &DVector<f64>) -> DVector<f64> {
        match self.head {
            Head::Sigmoid => z_last.map(sigmoid),
            Head::Identity => z_last.clone(),
            Head::Softmax => {
                let m = z_last.max();
                let e = z_last.map(|v| (v - m).exp());
                let total = e.sum();
                e / total
            }
        }
    }

    /// Head outputs (probabilities for sigmoid/softmax).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        Ok(self.head_probs(trace.z.last().unwrap()).iter().copied().collect())
    }

    /// Predicted class: argmax output, or threshold 0.5 for a single output.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let f = self.forward(x)?;
        if f.len() == 1 {
            return Ok(usize::from(f[0] >= 0.5));
        }
        Ok(f.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap())
    }

    /// Loss value; multi-output losses average per-output terms (`1/k`).
    pub fn loss(&self, x: &[f64], y: &[f64], loss: LossKind) -> Result<f64> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let f = self.head_probs(trace.z.last().unwrap());
        self.loss_of_probs(&f, y, loss)
    }

    fn loss_of_probs(&self, f: &DVector<f64>, y: &[f64], loss: LossKind) -> Result<f64> {
        if y.len() != f.len() {
            return Err(Error::shape(format!("{} targets", f.len()), format!("{}", y.len())));
        }
        let k = f.len() as f64;
        let total: f64 = match loss {
            LossKind::Square => f.iter().zip(y).map(|(fc, yc)| (fc - yc) * (fc - yc)).sum(),
            LossKind::CrossEntropy => {
                if self.head == Head::Identity {
                    return Err(Error::invalid(
                        "cross-entropy needs probability outputs; identity head unsupported",
                    ));
                }
                f.iter()
                    .zip(y)
                    .map(|(fc, yc)| {
                        let p = clamp_prob(*fc);
                        -yc * p.ln() - (1.0 - yc) * (1.0 - p).ln()
                    })
                    .sum()
            }
        };
        Ok(total / k)
    }

    /// First and second per-output loss derivatives `dl/df_c`, `d2l/df_c^2`
    /// for the averaged loss; `Target::Output(c)` differentiates `f_c` itself.
    fn target_gf_hf(
        &self,
        f: &DVector<f64>,
        y: &[f64],
        loss: LossKind,
        target: Target,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let k = f.len();
        match target {
            Target::Output(c) => {
                if c >= k {
                    return Err(Error::invalid(format!("output index {c} out of {k}")));
                }
                let mut gf = DVector::zeros(k);
                gf[c] = 1.0;
                Ok((gf, DVector::zeros(k)))
            }
            Target::Loss => {
                if y.len() != k {
                    return Err(Error::shape(format!("{k} targets"), format!("{}", y.len())));
                }
                let inv_k = 1.0 / k as f64;
                let mut gf = DVector::zeros(k);
                let mut hf = DVector::zeros(k);
                for c in 0..k {
                    match loss {
                        LossKind::Square => {
                            gf[c] = 2.0 * (f[c] - y[c]) * inv_k;
                            hf[c] = 2.0 * inv_k;
                        }
                        LossKind::CrossEntropy => {
                            let p = clamp_prob(f[c]);
                            gf[c] = (-y[c] / p + (1.0 - y[c]) / (1.0 - p)) * inv_k;
                            hf[c] = (y[c] / (p * p) + (1.0 - y[c]) / ((1.0 - p) * (1.0 - p))) * inv_k;
                        }
                    }
                }
                Ok((gf, hf))
            }
        }
    }

    /// `J v` where `J = df/dz` is the head Jacobian.
    fn head_jacobian_vec(&self, f: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        match self.head {
            Head::Identity => v.clone(),
            Head::Sigmoid => {
                DVector::from_fn(f.len(), |i, _| f[i] * (1.0 - f[i]) * v[i])
            }
            Head::Softmax => {
                let fv = f.dot(v);
                DVector::from_fn(f.len(), |i, _| f[i] * (v[i] - fv))
            }
        }
    }

    /// `d target/dz` at the head: `J^T gf` (for symmetric heads `J^T = J`).
    fn head_grad_z(&self, f: &DVector<f64>, gf: &DVector<f64>) -> DVector<f64> {
        // Both elementwise-sigmoid and softmax Jacobians are symmetric.
        self.head_jacobian_vec(f, gf)
    }

    /// `(d^2 target/dz^2) v` at the head, combining the loss curvature
    /// `J^T (hf . Jv)` with the head curvature `sum_c gf_c Hess(f_c) v`.
    fn head_hess_z_vec(
        &self,
        f: &DVector<f64>,
        gf: &DVector<f64>,
        hf: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        match self.head {
            Head::Identity => DVector::from_fn(f.len(), |i, _| hf[i] * v[i]),
            Head::Sigmoid => DVector::from_fn(f.len(), |i, _| {
                let fp = f[i] * (1.0 - f[i]);
                let fpp = fp * (1.0 - 2.0 * f[i]);
                hf[i] * fp * fp * v[i] + gf[i] * fpp * v[i]
            }),
            Head::Softmax => {
                let jv = self.head_jacobian_vec(f, v);
                let hjv = DVector::from_fn(f.len(), |i, _| hf[i] * jv[i]);
                let mut out = self.head_jacobian_vec(f, &hjv);
                let gf_jv = gf.dot(&jv);
                let gf_f = gf.dot(f);
                for a in 0..f.len() {
                    out[a] += gf[a] * jv[a] - f[a] * gf_jv - gf_f * jv[a];
                }
                out
            }
        }
    }

    /// Shared reverse pass from a head seed; returns (input grad, param grads).
    fn backward(&self, trace: &Trace, seed: DVector<f64>) -> (Vec<f64>, ParamGrads) {
        let layers = self.weights.len();
        let mut grads = ParamGrads::zeros_like(self);
        let mut delta = seed;
        for l in (0..layers).rev() {
            grads.weights[l] = &delta * trace.a[l].transpose();
            grads.biases[l] = delta.clone();
            let pre = self.weights[l].transpose() * &delta;
            if l > 0 {
                delta = DVector::from_fn(pre.len(), |i, _| pre[i] * sigmoid(trace.z[l - 1][i]));
            } else {
                delta = pre;
            }
        }
        (delta.iter().copied().collect(), grads)
    }

    /// Exact gradient of the target with respect to the input.
    pub fn input_gradient(&self, x: &[f64], y: &[f64], loss: LossKind, target: Target) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let f = self.head_probs(trace.z.last().unwrap());
        let (gf, _) = self.target_gf_hf(&f, y, loss, target)?;
        let seed = self.head_grad_z(&f, &gf);
        Ok(self.backward(&trace, seed).0)
    }

    /// Loss value, head outputs and exact parameter gradient of the loss.
    pub fn param_gradient(
        &self,
        x: &[f64],
        y: &[f64],
        loss: LossKind,
    ) -> Result<(f64, Vec<f64>, ParamGrads)> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let f = self.head_probs(trace.z.last().unwrap());
        let value = self.loss_of_probs(&f, y, loss)?;
        let (gf, _) = self.target_gf_hf(&f, y, loss, Target::Loss)?;
        let seed = self.head_grad_z(&f, &gf);
        let (_, grads) = self.backward(&trace, seed);
        Ok((value, f.iter().copied().collect(), grads))
    }

    /// Exact parameter gradient of a single head output `f_c`.
    pub fn output_param_gradient(&self, x: &[f64], c: usize) -> Result<ParamGrads> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let f = self.head_probs(trace.z.last().unwrap());
        let (gf, _) = self.target_gf_hf(&f, &[], LossKind::Square, Target::Output(c))?;
        let seed = self.head_grad_z(&f, &gf);
        Ok(self.backward(&trace, seed).1)
    }

    /// Combined exact pass: target value, input gradient, parameter gradient,
    /// and the tangents of both gradients along a fixed input direction `u`
    /// (forward-over-reverse). `param_grads_tangent` is the exact
    /// `grad_theta (u^T grad_x target)` with `u` held fixed.
    pub fn grad_and_rop(
        &self,
        x: &[f64],
        y: &[f64],
        u: &[f64],
        loss: LossKind,
        target: Target,
    ) -> Result<RopResult> {
        self.check_input(x)?;
        if u.len() != x.len() {
            return Err(Error::shape(format!("direction of {}", x.len()), format!("{}", u.len())));
        }
        let layers = self.weights.len();
        let trace = self.trace(x);
        let f = self.head_probs(trace.z.last().unwrap());
        let value = match target {
            Target::Loss => self.loss_of_probs(&f, y, loss)?,
            Target::Output(c) => f[c],
        };
        let (gf, hf) = self.target_gf_hf(&f, y, loss, target)?;

        // Forward tangents along u.
        let mut da = Vec::with_capacity(layers + 1);
        let mut dz = Vec::with_capacity(layers);
        da.push(DVector::from_column_slice(u));
        for l in 0..layers {
            let dzl = &self.weights[l] * da.last().unwrap();
            if l + 1 < layers {
                let zl = &trace.z[l];
                da.push(DVector::from_fn(dzl.len(), |i, _| sigmoid(zl[i]) * dzl[i]));
            }
            dz.push(dzl);
        }

        // Reverse pass with tangents.
        let mut delta = self.head_grad_z(&f, &gf);
        let mut ddelta = self.head_hess_z_vec(&f, &gf, &hf, dz.last().unwrap());
        let mut grads = ParamGrads::zeros_like(self);
        let mut dgrads = ParamGrads::zeros_like(self);
        for l in (0..layers).rev() {
            grads.weights[l] = &delta * trace.a[l].transpose();
            grads.biases[l] = delta.clone();
            dgrads.weights[l] = &ddelta * trace.a[l].transpose() + &delta * da[l].transpose();
            dgrads.biases[l] = ddelta.clone();
            let pre = self.weights[l].transpose() * &delta;
            let dpre = self.weights[l].transpose() * &ddelta;
            if l > 0 {
                let zl = &trace.z[l - 1];
                let dzl = &dz[l - 1];
                let mut next_delta = DVector::zeros(pre.len());
                let mut next_ddelta = DVector::zeros(pre.len());
                for i in 0..pre.len() {
                    let s = sigmoid(zl[i]);
                    let ds = s * (1.0 - s) * dzl[i];
                    next_delta[i] = pre[i] * s;
                    next_ddelta[i] = dpre[i] * s + pre[i] * ds;
                }
                delta = next_delta;
                ddelta = next_ddelta;
            } else {
                delta = pre;
                ddelta = dpre;
            }
        }
        Ok(RopResult {
            value,
            input_grad: delta.iter().copied().collect(),
            input_grad_tangent: ddelta.iter().copied().collect(),
            param_grads: grads,
            param_grads_tangent: dgrads,
        })
    }

    /// `dir^T Hess(target) dir` with respect to the input.
    pub fn input_dir_second_derivative(
        &self,
        x: &[f64],
        y: &[f64],
        dir: &[f64],
        loss: LossKind,
        target: Target,
        method: SecondDerivMethod,
    ) -> Result<f64> {
        self.check_input(x)?;
        let dir_norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dir_norm == 0.0 {
            return Err(Error::invalid("direction must be nonzero"));
        }
        match method {
            SecondDerivMethod::Exact => {
                let rop = self.grad_and_rop(x, y, dir, loss, target)?;
                Ok(dir.iter().zip(&rop.input_grad_tangent).map(|(d, t)| d * t).sum())
            }
            SecondDerivMethod::FiniteDifference => {
                let x_inf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let h = 1e-4 * (1.0 + x_inf);
                if h * dir_norm == 0.0 || !(h * dir_norm).is_finite() {
                    return Err(Error::invalid("finite-difference step underflow"));
                }
                let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
                let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
                let gp = self.input_gradient(&plus, y, loss, target)?;
                let gm = self.input_gradient(&minus, y, loss, target)?;
                Ok(dir
                    .iter()
                    .zip(gp.iter().zip(&gm))
                    .map(|(d, (p, m))| d * (p - m))
                    .sum::<f64>()
                    / (2.0 * h))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn onehot(c: usize, k: usize) -> Vec<f64> {
        let mut y = vec![0.0; k];
        y[c] = 1.0;
        y
    }

    fn perturb_param(p: &ModelParams, layer: usize, r: usize, c: Option<usize>, h: f64) -> ModelParams {
        let mut q = p.clone();
        match c {
            Some(c) => q.weights[layer][(r, c)] += h,
            None => q.biases[layer][r] += h,
        }
        q
    }

    #[test]
    fn zero_weights_softmax_is_uniform() {
        let mut m = ModelParams::init(4, &[3], 5, Head::Softmax, 0).unwrap();
        for w in &mut m.weights {
            w.fill(0.0);
        }
        let f = m.forward(&[0.3, 0.1, 0.9, 0.5]).unwrap();
        for v in f {
            assert_relative_eq!(v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_linear_sigmoid_is_half() {
        let mut m = ModelParams::init(3, &[], 1, Head::Sigmoid, 0).unwrap();
        m.weights[0].fill(0.0);
        let f = m.forward(&[0.2, 0.4, 0.6]).unwrap();
        assert_eq!(f, vec![0.5]);
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let m = ModelParams::init(6, &[8, 8], 4, Head::Softmax, 17).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64) * 0.13 - 0.3).collect();
        let f = m.forward(&x).unwrap();
        let total: f64 = f.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(f.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (head, loss, outputs) in [
            (Head::Softmax, LossKind::CrossEntropy, 3),
            (Head::Softmax, LossKind::Square, 3),
            (Head::Sigmoid, LossKind::CrossEntropy, 1),
            (Head::Sigmoid, LossKind::Square, 1),
            (Head::Identity, LossKind::Square, 2),
        ] {
            let m = ModelParams::init(5, &[7], outputs, head, 3).unwrap();
            let x: Vec<f64> = (0..5).map(|i| 0.1 + 0.15 * i as f64).collect();
            let y = onehot(0, outputs);
            let g = m.input_gradient(&x, &y, loss, Target::Loss).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (m.loss(&xp, &y, loss).unwrap() - m.loss(&xm, &y, loss).unwrap()) / (2.0 * h);
                assert_relative_eq!(g[i], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let m = ModelParams::init(4, &[5], 3, Head::Softmax, 7).unwrap();
        let x = [0.4, 0.1, 0.8, 0.2];
        let y = onehot(2, 3);
        let loss = LossKind::CrossEntropy;
        let (_, _, grads) = m.param_gradient(&x, &y, loss).unwrap();
        let h = 1e-6;
        for layer in 0..2 {
            for r in 0..m.weights[layer].nrows() {
                for c in 0..m.weights[layer].ncols() {
                    let lp = perturb_param(&m, layer, r, Some(c), h).loss(&x, &y, loss).unwrap();
                    let lm = perturb_param(&m, layer, r, Some(c), -h).loss(&x, &y, loss).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    assert_relative_eq!(grads.weights[layer][(r, c)], fd, max_relative = 1e-4, epsilon = 1e-9);
                }
                let lp = perturb_param(&m, layer, r, None, h).loss(&x, &y, loss).unwrap();
                let lm = perturb_param(&m, layer, r, None, -h).loss(&x, &y, loss).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert_relative_eq!(grads.biases[layer][r], fd, max_relative = 1e-4, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn loss_gradient_is_lprime_times_function_gradient() {
        // Chain rule for a scalar head: grad loss = l'(f, y) grad f.
        let m = ModelParams::init(4, &[6], 1, Head::Sigmoid, 21).unwrap();
        let x = [0.3, 0.6, 0.1, 0.7];
        let y = [1.0];
        let f = m.forward(&x).unwrap()[0];
        let g_loss = m.input_gradient(&x, &y, LossKind::Square, Target::Loss).unwrap();
        let g_f = m.input_gradient(&x, &y, LossKind::Square, Target::Output(0)).unwrap();
        let lprime = 2.0 * (f - 1.0);
        for (gl, gf) in g_loss.iter().zip(&g_f) {
            assert_relative_eq!(*gl, lprime * gf, max_relative = 1e-10);
        }
    }

    #[test]
    fn constant_model_zero_gradient() {
        let mut m = ModelParams::init(3, &[4], 2, Head::Softmax, 2).unwrap();
        m.weights[0].fill(0.0);
        let g = m
            .input_gradient(&[0.5, 0.2, 0.9], &onehot(1, 2), LossKind::CrossEntropy, Target::Loss)
            .unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rop_input_tangent_matches_fd_of_gradient() {
        let m = ModelParams::init(4, &[6, 5], 3, Head::Softmax, 9).unwrap();
        let x = [0.4, 0.1, 0.8, 0.2];
        let y = onehot(1, 3);
        let u = [0.3, -0.7, 0.2, 0.5];
        let loss = LossKind::CrossEntropy;
        let rop = m.grad_and_rop(&x, &y, &u, loss, Target::Loss).unwrap();
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&u).map(|(a, d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(&u).map(|(a, d)| a - h * d).collect();
        let gp = m.input_gradient(&xp, &y, loss, Target::Loss).unwrap();
        let gm = m.input_gradient(&xm, &y, loss, Target::Loss).unwrap();
        for i in 0..4 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert_relative_eq!(rop.input_grad_tangent[i], fd, max_relative = 1e-4, epsilon = 1e-8);
        }
    }

    #[test]
    fn rop_param_tangent_matches_fd_of_param_gradient() {
        let m = ModelParams::init(3, &[4], 2, Head::Softmax, 13).unwrap();
        let x = [0.4, 0.1, 0.8];
        let y = onehot(0, 2);
        let u = [0.2, -0.5, 0.3];
        let loss = LossKind::CrossEntropy;
        let rop = m.grad_and_rop(&x, &y, &u, loss, Target::Loss).unwrap();
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&u).map(|(a, d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(&u).map(|(a, d)| a - h * d).collect();
        let (_, _, gp) = m.param_gradient(&xp, &y, loss).unwrap();
        let (_, _, gm) = m.param_gradient(&xm, &y, loss).unwrap();
        for layer in 0..2 {
            for r in 0..gp.weights[layer].nrows() {
                for c in 0..gp.weights[layer].ncols() {
                    let fd = (gp.weights[layer][(r, c)] - gm.weights[layer][(r, c)]) / (2.0 * h);
                    assert_relative_eq!(
                        rop.param_grads_tangent.weights[layer][(r, c)],
                        fd,
                        max_relative = 1e-4,
                        epsilon = 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn second_derivative_linear_target_is_zero() {
        let m = ModelParams::init(3, &[], 2, Head::Identity, 4).unwrap();
        let q = m
            .input_dir_second_derivative(
                &[0.3, 0.5, 0.2],
                &[0.0, 1.0],
                &[1.0, -1.0, 0.5],
                LossKind::Square,
                Target::Output(0),
                SecondDerivMethod::FiniteDifference,
            )
            .unwrap();
        assert!(q.abs() < 1e-6);
    }

    #[test]
    fn second_derivative_symmetric_in_direction() {
        let m = ModelParams::init(4, &[5], 1, Head::Sigmoid, 6).unwrap();
        let x = [0.2, 0.7, 0.1, 0.5];
        let dir = [0.4, -0.2, 0.9, 0.3];
        let neg: Vec<f64> = dir.iter().map(|d| -d).collect();
        for method in [SecondDerivMethod::FiniteDifference, SecondDerivMethod::Exact] {
            let a = m
                .input_dir_second_derivative(&x, &[1.0], &dir, LossKind::Square, Target::Loss, method)
                .unwrap();
            let b = m
                .input_dir_second_derivative(&x, &[1.0], &neg, LossKind::Square, Target::Loss, method)
                .unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_and_fd_second_derivatives_agree() {
        let m = ModelParams::init(5, &[6], 3, Head::Softmax, 11).unwrap();
        let x = [0.3, 0.8, 0.2, 0.5, 0.1];
        let y = onehot(2, 3);
        let dir = [1.0, -1.0, 0.0, 0.5, -0.25];
        let exact = m
            .input_dir_second_derivative(&x, &y, &dir, LossKind::CrossEntropy, Target::Loss, SecondDerivMethod::Exact)
            .unwrap();
        let fd = m
            .input_dir_second_derivative(
                &x,
                &y,
                &dir,
                LossKind::CrossEntropy,
                Target::Loss,
                SecondDerivMethod::FiniteDifference,
            )
            .unwrap();
        assert_relative_eq!(exact, fd, max_relative = 1e-5, epsilon = 1e-8);
    }

    #[test]
    fn deterministic_forward() {
        let m = ModelParams::init(8, &[16, 16], 10, Head::Softmax, 99).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).fract()).collect();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_direction_rejected() {
        let m = ModelParams::init(3, &[4], 1, Head::Sigmoid, 5).unwrap();
        assert!(m
            .input_dir_second_derivative(
                &[0.1, 0.2, 0.3],
                &[1.0],
                &[0.0, 0.0, 0.0],
                LossKind::Square,
                Target::Loss,
                SecondDerivMethod::FiniteDifference,
            )
            .is_err());
    }
}
