//! Run configuration: TOML with fixed schema, defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dcrf::learning::{BackwardOptions, TrainConfig};
use dcrf::{
    AnyUnary, Compatibility, ConvNetUnary, FeatureKind, FilterMode, KernelEntry, KernelSpec,
    LinearUnary, LossMode, MfConfig, OptimConfig, PairwiseModel, SigmaGrad, UpdateMode,
};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryKind {
    Linear,
    Convnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKindConfig {
    Spatial,
    Bilateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatConfig {
    Potts,
    /// Learnable symmetric matrix initialized to the identity.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterModeConfig {
    Brute,
    Lattice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaGradConfig {
    Brute,
    FiniteDiff,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConfig {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKindConfig,
    /// One bandwidth per feature dimension: `[x, y]` or `[x, y, r, g, b]`.
    pub sigma: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfConfig {
    pub enabled: bool,
    pub kernels: Vec<KernelConfig>,
    pub compatibility: CompatConfig,
    pub iterations: usize,
    pub filter_mode: FilterModeConfig,
    pub sigma_grad: SigmaGradConfig,
    /// Relative step for finite-difference bandwidth gradients.
    pub fd_step: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            enabled: true,
            kernels: vec![
                KernelConfig {
                    kind: KernelKindConfig::Spatial,
                    sigma: vec![3.0, 3.0],
                    weight: 0.1,
                },
                KernelConfig {
                    kind: KernelKindConfig::Bilateral,
                    sigma: vec![20.0, 20.0, 30.0, 30.0, 30.0],
                    weight: 0.002,
                },
            ],
            compatibility: CompatConfig::Potts,
            iterations: 5,
            filter_mode: FilterModeConfig::Lattice,
            sigma_grad: SigmaGradConfig::Frozen,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_top: f64,
    pub lr_body: f64,
    pub lr_crf: f64,
    /// Apply weight decay to CRF parameters too.
    pub decay_crf: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = OptimConfig::default();
        OptimizerConfig {
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            lr_top: d.lr_top,
            lr_body: d.lr_body,
            lr_crf: d.lr_crf,
            decay_crf: d.decay_crf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub labels: usize,
    /// Optional display names, one per label.
    pub class_names: Vec<String>,
    pub unary: UnaryKind,
    pub loss: LossConfig,
    pub crf: CrfConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            labels: 4,
            class_names: Vec::new(),
            unary: UnaryKind::Convnet,
            loss: LossConfig::Mean,
            crf: CrfConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.labels < 2 || self.labels > 255 {
            return bad(format!("labels must be in [2, 255], got {}", self.labels));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.labels {
            return bad(format!(
                "class_names lists {} names for {} labels",
                self.class_names.len(),
                self.labels
            ));
        }
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be at least 1".into());
        }
        if !(self.crf.fd_step > 0.0 && self.crf.fd_step.is_finite()) {
            return bad(format!("crf.fd_step must be positive, got {}", self.crf.fd_step));
        }
        self.optim_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.build_model().map(|_| ())
    }

    pub fn class_name(&self, label: usize) -> String {
        self.class_names
            .get(label)
            .cloned()
            .unwrap_or_else(|| format!("label_{label}"))
    }

    pub fn optim_config(&self) -> OptimConfig {
        let o = &self.optimizer;
        OptimConfig {
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            lr_top: o.lr_top,
            lr_body: o.lr_body,
            lr_crf: o.lr_crf,
            decay_crf: o.decay_crf,
        }
    }

    pub fn filter_mode(&self) -> FilterMode {
        match self.crf.filter_mode {
            FilterModeConfig::Brute => FilterMode::Brute,
            FilterModeConfig::Lattice => FilterMode::Lattice,
        }
    }

    /// Freshly initialized unary provider.
    pub fn build_unary(&self) -> AnyUnary {
        let seed = self.training.seed;
        match self.unary {
            UnaryKind::Linear => AnyUnary::Linear(LinearUnary::new(self.labels, seed)),
            UnaryKind::Convnet => AnyUnary::ConvNet(ConvNetUnary::new(self.labels, seed)),
        }
    }

    /// CRF at its configured initial values.
    pub fn build_model(&self) -> Result<PairwiseModel, CliError> {
        let mut kernels = Vec::with_capacity(self.crf.kernels.len());
        for (m, k) in self.crf.kernels.iter().enumerate() {
            let kind = match k.kind {
                KernelKindConfig::Spatial => FeatureKind::Spatial,
                KernelKindConfig::Bilateral => FeatureKind::Bilateral,
            };
            let spec = KernelSpec::new(kind, k.sigma.clone())
                .map_err(|e| CliError::Config(format!("crf.kernels[{m}]: {e}")))?;
            if !k.weight.is_finite() {
                return Err(CliError::Config(format!("crf.kernels[{m}].weight is not finite")));
            }
            kernels.push(KernelEntry { spec, weight: k.weight });
        }
        let compat = match self.crf.compatibility {
            CompatConfig::Potts => Compatibility::Potts,
            CompatConfig::Full => Compatibility::scaled_identity(self.labels, 1.0),
        };
        PairwiseModel::new(kernels, compat).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Settings for `train_step`; `crf_enabled` is decided by the stage.
    pub fn train_config(&self, crf_enabled: bool) -> TrainConfig {
        TrainConfig {
            mf: MfConfig {
                iterations: self.crf.iterations,
                update_mode: UpdateMode::Parallel,
                filter_mode: self.filter_mode(),
            },
            crf_enabled: crf_enabled && self.crf.enabled,
            backward: BackwardOptions {
                loss: match self.loss {
                    LossConfig::Mean => LossMode::Mean,
                    LossConfig::Sum => LossMode::Sum,
                },
                sigma_grad: match self.crf.sigma_grad {
                    SigmaGradConfig::Brute => SigmaGrad::Brute,
                    SigmaGradConfig::FiniteDiff => SigmaGrad::FiniteDiff,
                    SigmaGradConfig::Frozen => SigmaGrad::Frozen,
                },
                fd_step: self.crf.fd_step,
            },
        }
    }
}
