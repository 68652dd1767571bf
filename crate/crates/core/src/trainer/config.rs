use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::hash::fnv1a64;
use crate::model::{Architecture, Encoder, Pooling, Readout, Weighting};

/// How the meta-gradient treats the inner update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Gradient of the validation loss at the adapted parameters.
    FirstOrder,
    /// Differentiates through the inner update as well.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingName {
    Mean,
    Max,
}

/// Model and training protocol combinations that can be run and compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    RawFeaturesOnly,
    FeOnly,
    FeFr,
    GcnTrainOnly,
    GcnJointTrainVal,
    GilTrainOnly,
    Conv1,
    Conv2,
    Conv3,
    MeanPool,
    MaxPool,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Full,
        Variant::RawFeaturesOnly,
        Variant::FeOnly,
        Variant::FeFr,
        Variant::GcnTrainOnly,
        Variant::GcnJointTrainVal,
        Variant::GilTrainOnly,
        Variant::Conv1,
        Variant::Conv2,
        Variant::Conv3,
        Variant::MeanPool,
        Variant::MaxPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RawFeaturesOnly => "raw_features_only",
            Variant::FeOnly => "fe_only",
            Variant::FeFr => "fe_fr",
            Variant::GcnTrainOnly => "gcn_train_only",
            Variant::GcnJointTrainVal => "gcn_joint_train_val",
            Variant::GilTrainOnly => "gil_train_only",
            Variant::Conv1 => "conv1",
            Variant::Conv2 => "conv2",
            Variant::Conv3 => "conv3",
            Variant::MeanPool => "mean_pool",
            Variant::MaxPool => "max_pool",
        }
    }

    /// Whether parameters are trained with the meta objective after
    /// pretraining (otherwise the same schedule continues on the training
    /// loss alone).
    pub fn meta_trained(self) -> bool {
        !matches!(
            self,
            Variant::FeOnly | Variant::GcnTrainOnly | Variant::GcnJointTrainVal | Variant::GilTrainOnly
        )
    }

    /// Whether validation labels join the supervised set.
    pub fn trains_on_val(self) -> bool {
        self == Variant::GcnJointTrainVal
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                TrainError::Config(format!(
                    "unknown variant '{s}'; expected one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Every hyperparameter and switch of a run. Serialized as flat TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub lr_pretrain: f64,
    pub decay: f64,
    /// Pretraining iterations between learning-rate decays.
    pub decay_every: usize,
    pub momentum: f64,
    pub pretrain_iters: usize,
    pub meta_iters: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub meta_grad_mode: MetaGradMode,
    pub dropout: f64,
    /// Chebyshev order `K` (number of polynomial terms).
    pub cheb_order: usize,
    pub widths: Vec<usize>,
    pub pooling: PoolingName,
    pub phi_w_hidden: usize,
    pub d_p_override: Option<usize>,
    /// BFS sources sampled when estimating `d_p` on large graphs.
    pub dp_sample_size: usize,
    pub lambda_max: f64,
    pub estimate_lambda_max: bool,
    pub row_normalize: bool,
    /// Meta iterations between validation evaluations.
    pub eval_every: usize,
    /// Queries scored per evaluation chunk.
    pub eval_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            seed: 0,
            lr_pretrain: 0.05,
            decay: 0.95,
            decay_every: 50,
            momentum: 0.9,
            pretrain_iters: 200,
            meta_iters: 1200,
            alpha: 0.001,
            beta: 0.001,
            batch_size: 100,
            inner_steps: 1,
            meta_grad_mode: MetaGradMode::FirstOrder,
            dropout: 0.5,
            cheb_order: 2,
            widths: vec![128, 256],
            pooling: PoolingName::Mean,
            phi_w_hidden: 16,
            d_p_override: None,
            dp_sample_size: 100,
            lambda_max: 2.0,
            estimate_lambda_max: false,
            row_normalize: true,
            eval_every: 50,
            eval_chunk: 256,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are TOML-representable")
    }

    /// FNV-1a of the serialized config, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("decay", self.decay),
            ("lambda_max", self.lambda_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("momentum", self.momentum)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(1..=5).contains(&self.inner_steps) {
            return bad(format!("inner_steps must be 1..=5, got {}", self.inner_steps));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("cheb_order", self.cheb_order),
            ("decay_every", self.decay_every),
            ("phi_w_hidden", self.phi_w_hidden),
            ("dp_sample_size", self.dp_sample_size),
            ("eval_every", self.eval_every),
            ("eval_chunk", self.eval_chunk),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive sizes".into());
        }
        if self.d_p_override == Some(0) {
            return bad("d_p_override must be at least 1".into());
        }
        Ok(())
    }

    /// Network layout for this config's variant.
    pub fn architecture(&self, feature_dim: usize, num_classes: usize, steps: usize) -> Architecture {
        let pooling = match (self.variant, self.pooling) {
            (Variant::MaxPool, _) => Pooling::Max,
            (Variant::MeanPool, _) => Pooling::Mean,
            (_, PoolingName::Mean) => Pooling::Mean,
            (_, PoolingName::Max) => Pooling::Max,
        };
        let depth = match self.variant {
            Variant::Conv1 => Some(1),
            Variant::Conv2 => Some(2),
            Variant::Conv3 => Some(3),
            _ => None,
        };
        let widths = match depth {
            None => self.widths.clone(),
            Some(d) => {
                let last = *self.widths.last().expect("validated non-empty");
                (0..d).map(|i| self.widths.get(i).copied().unwrap_or(last)).collect()
            }
        };
        let encoder = match self.variant {
            Variant::RawFeaturesOnly => Encoder::Raw,
            _ => Encoder::Chebyshev {
                widths,
                order: self.cheb_order,
                pooling,
            },
        };
        let readout = match self.variant {
            Variant::RawFeaturesOnly | Variant::FeFr => Readout::Relation(Weighting::Uniform),
            Variant::FeOnly | Variant::GcnTrainOnly | Variant::GcnJointTrainVal => Readout::Linear,
            _ => Readout::Relation(Weighting::Reachability),
        };
        Architecture {
            feature_dim,
            num_classes,
            encoder,
            readout,
            steps,
            phi_w_hidden: self.phi_w_hidden,
            dropout: self.dropout,
        }
    }
}
