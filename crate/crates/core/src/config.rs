//! Run configuration: one structured TOML file plus flag overrides
//! (flags win). The effective configuration is hashed into checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind, NormDomain};
use crate::error::{Error, Result};
use crate::eval::{VerifyConfig, VerifyModelSpec};
use crate::graph::{WeightRule, WeightedPixelGraph};
use crate::model::{Head, LossKind};
use crate::noise::NoiseConfig;
use crate::regularizer::{LaplacianVariant, MetricKind, PenaltyTarget, RegularizerConfig};
use crate::trainer::{Objective, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub weight_rule: String,
    pub mass_floor: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            radius: 2,
            weight_rule: "constant".into(),
            mass_floor: 1e-6,
        }
    }
}

impl GraphSection {
    pub fn weight_rule(&self) -> Result<WeightRule> {
        match self.weight_rule.as_str() {
            "constant" => Ok(WeightRule::Constant),
            "inverse_distance" => Ok(WeightRule::InverseDistance),
            other => Err(Error::Config(format!("unknown weight rule '{other}'"))),
        }
    }

    pub fn build(&self) -> Result<WeightedPixelGraph> {
        WeightedPixelGraph::grid(self.height, self.width, self.radius, self.weight_rule()?)
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synth`, `idx` or `csv`.
    pub source: String,
    pub n_train: usize,
    pub n_test: usize,
    pub synth_seed: u64,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub train_csv: String,
    pub test_csv: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synth".into(),
            n_train: 2000,
            n_test: 1000,
            synth_seed: 20_240_801,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            train_csv: String::new(),
            test_csv: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub head: Head,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            head: Head::Softmax,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 40,
            lr: 0.2,
            lr_decay: vec![(25, 0.1), (35, 0.1)],
            momentum: 0.9,
            weight_decay: 1e-4,
            objective: Objective::Plain,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub eta: f64,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { eta: 0.01, seed: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub norm_domain: NormDomain,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 20,
            norm_domain: NormDomain::Linf,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }
}

impl AttackSection {
    pub fn to_attack_config(&self) -> AttackConfig {
        AttackConfig {
            kind: self.kind,
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            norm_domain: self.norm_domain,
            clamp: (self.clamp_min, self.clamp_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub translation_max_shift: usize,
    pub translation_samples: usize,
    pub translation_seed: u64,
    pub robust_during_training: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            translation_max_shift: 4,
            translation_samples: 1000,
            translation_seed: 17,
            robust_during_training: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub etas: Vec<f64>,
    pub draws: usize,
    /// `linear` or `mlp`.
    pub model: String,
    pub model_seed: u64,
    pub hidden: Vec<usize>,
    pub example_seed: u64,
    pub noise_seed: u64,
    pub loss: LossKind,
    pub target_y: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            etas: vec![0.04, 0.02, 0.01],
            draws: 100_000,
            model: "linear".into(),
            model_seed: 5,
            hidden: vec![16],
            example_seed: 9,
            noise_seed: 13,
            loss: LossKind::Square,
            target_y: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graph: GraphSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub regularizer: RegularizerConfig,
    pub noise: NoiseSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
    pub output: OutputSection,
}

/// Flag overrides; every set field wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub metric: Option<String>,
    pub strength: Option<f64>,
    pub radius: Option<usize>,
    pub attack: Option<String>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        Self::from_str(&text)
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(seed) = ov.seed {
            self.train.seed = seed;
        }
        if let Some(out) = &ov.out {
            self.output.dir = out.clone();
        }
        if let Some(metric) = &ov.metric {
            let kind = match metric.as_str() {
                "euclid" | "euclidean" => MetricKind::Euclidean,
                "wass" | "wasserstein" => MetricKind::Wasserstein,
                other => return Err(Error::Config(format!("unknown metric '{other}'"))),
            };
            self.regularizer.metric = kind;
            // Keep a penalty objective aligned with the requested metric.
            if matches!(self.train.objective, Objective::EuclidPenalty | Objective::WassPenalty) {
                self.train.objective = match kind {
                    MetricKind::Euclidean => Objective::EuclidPenalty,
                    MetricKind::Wasserstein => Objective::WassPenalty,
                };
            }
        }
        if let Some(strength) = ov.strength {
            self.regularizer.strength = strength;
        }
        if let Some(radius) = ov.radius {
            self.graph.radius = radius;
        }
        if let Some(kind) = &ov.attack {
            self.attack.kind = match kind.as_str() {
                "fgsm" => AttackKind::Fgsm,
                "ifgsm" => AttackKind::Ifgsm,
                other => return Err(Error::Config(format!("unknown attack '{other}'"))),
            };
        }
        if let Some(epsilon) = ov.epsilon {
            self.attack.epsilon = epsilon;
        }
        if let Some(alpha) = ov.alpha {
            self.attack.alpha = alpha;
        }
        if let Some(steps) = ov.steps {
            self.attack.steps = steps;
        }
        Ok(())
    }

    /// Assembled trainer configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            lr: self.train.lr,
            lr_decay: self.train.lr_decay.clone(),
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            objective: self.train.objective,
            regularizer: self.regularizer,
            noise: NoiseConfig::with_floor(self.noise.eta, self.noise.seed, self.graph.mass_floor)
                .map_err(|e| Error::Config(e.to_string()))?,
            seed: self.train.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn verify_config(&self) -> Result<VerifyConfig> {
        let model = match self.verify.model.as_str() {
            "linear" => VerifyModelSpec::Linear {
                seed: self.verify.model_seed,
            },
            "mlp" => VerifyModelSpec::Mlp {
                hidden: self.verify.hidden.clone(),
                seed: self.verify.model_seed,
            },
            other => return Err(Error::Config(format!("unknown verify model '{other}'"))),
        };
        Ok(VerifyConfig {
            etas: self.verify.etas.clone(),
            draws: self.verify.draws,
            model,
            example_seed: self.verify.example_seed,
            noise_seed: self.verify.noise_seed,
            loss: self.verify.loss,
            target_y: self.verify.target_y,
            floor: self.graph.mass_floor,
        })
    }

    /// Hash of the effective (post-override) configuration, recorded in
    /// checkpoints so loads can warn on mismatch. The output location does
    /// not affect the experiment and is excluded.
    pub fn effective_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputSection::default();
        let canon = toml::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Default regularizer section written into example configs.
pub fn default_regularizer() -> RegularizerConfig {
    RegularizerConfig {
        metric: MetricKind::Wasserstein,
        strength: 0.0,
        loss: LossKind::CrossEntropy,
        penalty_target: PenaltyTarget::LossGradient,
        include_laplacian: false,
        laplacian_variant: LaplacianVariant::Modified,
    }
}
