//! Evaluators and metrics emission: natural and robust test error, label
//! flips under translations, the expansion-verification driver, and the
//! stable CSV schemas.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ImageMassVector, WeightedPixelGraph};
use crate::model::{Head, LossKind, ModelParams};
use crate::noise::NoiseConfig;
use crate::regularizer::{
    verify_expansion_mc, ExpansionReport, LinearScalarModel, MlpScalarModel, ScalarModel,
};

/// One row of the training metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean raw penalty (the quantity multiplied by the strength), zero for
    /// objectives without a penalty.
    pub penalty_value: f64,
    pub natural_test_error_pct: f64,
    pub robust_test_error_pct: Option<f64>,
    /// Seconds; excluded from reproducibility comparisons.
    pub wall_time: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,train_loss,penalty_value,natural_test_error_pct,robust_test_error_pct,wall_time";

impl MetricsRow {
    pub fn to_csv_row(&self) -> String {
        let robust = self
            .robust_test_error_pct
            .map(|v| v.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.penalty_value,
            self.natural_test_error_pct,
            robust,
            self.wall_time
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

/// Classification error percentage on clean examples.
pub fn natural_error_pct(model: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let mut wrong = 0usize;
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        if model.predict(image.values())? != label {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / dataset.len() as f64)
}

/// Error percentage after attacking each test example with the model's own
/// gradients (white box).
pub fn evaluate_robust(
    model: &ModelParams,
    dataset: &Dataset,
    attack_cfg: &AttackConfig,
    loss: LossKind,
) -> Result<f64> {
    evaluate_robust_with_metric(model, dataset, attack_cfg, loss, None)
}

/// As [`evaluate_robust`], with the graph context required by the quadratic
/// transport-ball budget.
pub fn evaluate_robust_with_metric(
    model: &ModelParams,
    dataset: &Dataset,
    attack_cfg: &AttackConfig,
    loss: LossKind,
    ctx: Option<&attacks::MetricBallContext>,
) -> Result<f64> {
    attack_cfg.validate()?;
    let classes = model.outputs();
    let mut wrong = 0usize;
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        let y = onehot(label, classes);
        let adv = attacks::attack_with_context(model, image, &y, loss, attack_cfg, ctx)?;
        if model.predict(adv.values())? != label {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / dataset.len() as f64)
}

fn onehot(c: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; k];
    if c < k {
        y[c] = 1.0;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationDirection {
    Horizontal,
    Vertical,
}

/// Shifts an image by `shift` pixels along the direction, padding with zeros.
pub fn translate_image(
    image: &ImageMassVector,
    shift: i64,
    direction: TranslationDirection,
) -> ImageMassVector {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        let src = image.channel(ch);
        let base = ch * h * w;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = match direction {
                    TranslationDirection::Horizontal => (y, x - shift),
                    TranslationDirection::Vertical => (y - shift, x),
                };
                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    out[base + (y * w as i64 + x) as usize] = src[(sy * w as i64 + sx) as usize];
                }
            }
        }
    }
    ImageMassVector::new(out, h, w, c).expect("translation preserves shape and nonnegativity")
}

/// Number of adjacent prediction changes along a sequence.
pub fn count_label_flips(predictions: &[usize]) -> usize {
    predictions.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Mean number of label flips over sequences of translated copies
/// (`-max_shift ..= max_shift`, zero padding) of up to `sample_count` test
/// images drawn with a seeded shuffle.
pub fn evaluate_translation_flips(
    model: &ModelParams,
    dataset: &Dataset,
    direction: TranslationDirection,
    max_shift: usize,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    let limit = match direction {
        TranslationDirection::Horizontal => dataset.width,
        TranslationDirection::Vertical => dataset.height,
    };
    if max_shift >= limit {
        return Err(Error::invalid(format!(
            "max shift {max_shift} must be smaller than the image extent {limit}"
        )));
    }
    if sample_count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(sample_count.min(dataset.len()));

    let mut total_flips = 0usize;
    for &idx in &indices {
        let image = &dataset.images[idx];
        let mut preds = Vec::with_capacity(2 * max_shift + 1);
        for shift in -(max_shift as i64)..=(max_shift as i64) {
            let shifted = translate_image(image, shift, direction);
            preds.push(model.predict(shifted.values())?);
        }
        total_flips += count_label_flips(&preds);
    }
    Ok(total_flips as f64 / indices.len() as f64)
}

/// Model used by the expansion verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VerifyModelSpec {
    Linear { seed: u64 },
    Mlp { hidden: Vec<usize>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub etas: Vec<f64>,
    pub draws: usize,
    pub model: VerifyModelSpec,
    /// Seed for the random strictly-positive example image.
    pub example_seed: u64,
    pub noise_seed: u64,
    pub loss: LossKind,
    /// Regression/classification target for the scalar loss.
    pub target_y: f64,
    pub floor: f64,
}

/// Drives the Monte-Carlo expansion check over an eta grid; one report row
/// per eta value.
pub fn run_verify_expansion(
    graph: &Arc<WeightedPixelGraph>,
    cfg: &VerifyConfig,
) -> Result<Vec<ExpansionReport>> {
    if cfg.etas.is_empty() {
        return Err(Error::Config("verify needs at least one eta".into()));
    }
    let n = graph.vertex_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.example_seed);
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let x = ImageMassVector::new(values, graph.height(), graph.width(), 1)?;

    let eta_rows = |model: &dyn ScalarModel| -> Result<Vec<ExpansionReport>> {
        let mut rows = Vec::with_capacity(cfg.etas.len());
        for &eta in &cfg.etas {
            let noise = NoiseConfig::with_floor(eta, cfg.noise_seed, cfg.floor)?;
            rows.push(verify_expansion_mc(
                model, graph, &x, cfg.target_y, &noise, cfg.draws, cfg.loss,
            )?);
        }
        Ok(rows)
    };

    match &cfg.model {
        VerifyModelSpec::Linear { seed } => {
            let mut wrng = ChaCha8Rng::seed_from_u64(*seed);
            let scale = (1.0 / n as f64).sqrt();
            let model = LinearScalarModel {
                w: (0..n).map(|_| wrng.random_range(-scale..scale)).collect(),
                b: 0.1,
            };
            eta_rows(&model)
        }
        VerifyModelSpec::Mlp { hidden, seed } => {
            let params = ModelParams::init(n, hidden, 1, Head::Sigmoid, *seed)?;
            eta_rows(&MlpScalarModel { params: &params })
        }
    }
}

pub const EXPANSION_CSV_HEADER: &str = "eta,empirical_delta,predicted_delta,ratio,stderr";

pub fn expansion_to_csv(rows: &[ExpansionReport]) -> String {
    let mut out = String::from(EXPANSION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let ratio = r.ratio.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.eta, r.empirical_delta, r.predicted_delta, ratio, r.stderr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_digits;

    #[test]
    fn flip_counting() {
        assert_eq!(count_label_flips(&[1, 0, 1, 0, 1]), 4);
        assert_eq!(count_label_flips(&[3, 3, 3]), 0);
        assert_eq!(count_label_flips(&[2]), 0);
    }

    #[test]
    fn constant_model_never_flips_and_robust_error_is_class_frequency() {
        let ds = synth_digits(100, 5).unwrap();
        // Bias strongly toward class 3 regardless of input.
        let mut m = ModelParams::init(64, &[], 10, Head::Softmax, 0).unwrap();
        let mut w = m.weights()[0].clone();
        w.fill(0.0);
        let mut b = m.biases()[0].clone();
        b.fill(0.0);
        b[3] = 10.0;
        m = ModelParams::from_parts(vec![64, 10], vec![w], vec![b], Head::Softmax).unwrap();
        let flips = evaluate_translation_flips(&m, &ds, TranslationDirection::Horizontal, 4, 50, 1).unwrap();
        assert_eq!(flips, 0.0);
        let natural = natural_error_pct(&m, &ds).unwrap();
        let robust = evaluate_robust(&m, &ds, &AttackConfig::fgsm(0.1), LossKind::CrossEntropy).unwrap();
        assert_eq!(natural, robust);
        let class3 = ds.labels.iter().filter(|&&l| l == 3).count();
        let expect = 100.0 * (1.0 - class3 as f64 / ds.len() as f64);
        assert!((natural - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_epsilon_robust_matches_natural() {
        let ds = synth_digits(60, 9).unwrap();
        let m = ModelParams::init(64, &[16], 10, Head::Softmax, 4).unwrap();
        let natural = natural_error_pct(&m, &ds).unwrap();
        let robust = evaluate_robust(&m, &ds, &AttackConfig::fgsm(0.0), LossKind::CrossEntropy).unwrap();
        assert_eq!(natural, robust);
    }

    #[test]
    fn translation_is_zero_padded_shift() {
        let img = ImageMassVector::new(
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            3,
            3,
            1,
        )
        .unwrap();
        let right = translate_image(&img, 1, TranslationDirection::Horizontal);
        assert_eq!(right.values(), &[0.0, 0.1, 0.2, 0.0, 0.4, 0.5, 0.0, 0.7, 0.8]);
        let up = translate_image(&img, -1, TranslationDirection::Vertical);
        assert_eq!(up.values(), &[0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_shift_must_fit() {
        let ds = synth_digits(10, 2).unwrap();
        let m = ModelParams::init(64, &[], 10, Head::Softmax, 0).unwrap();
        assert!(
            evaluate_translation_flips(&m, &ds, TranslationDirection::Horizontal, 8, 5, 0).is_err()
        );
    }

    #[test]
    fn metrics_csv_schema_stable() {
        let rows = vec![MetricsRow {
            epoch: 1,
            train_loss: 0.5,
            penalty_value: 0.0,
            natural_test_error_pct: 12.5,
            robust_test_error_pct: None,
            wall_time: 0.25,
        }];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.5,0,12.5,,0.25");
    }
}
