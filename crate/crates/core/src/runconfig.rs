//! Run schema: model preset, the four ablation axes, training, data and
//! evaluation settings. [`RunConfig::resolve`] folds it into the concrete
//! configs every command consumes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionVariant, FusionKind, LocalVariant, ModelConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::Protocol;
use crate::model::StopGradient;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Paper,
    Toy,
    Explicit(ModelConfig),
}

impl ModelPreset {
    pub fn config(&self) -> ModelConfig {
        match self {
            ModelPreset::Paper => ModelConfig::paper(),
            ModelPreset::Toy => ModelConfig::toy(),
            ModelPreset::Explicit(c) => c.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variants {
    pub local: LocalVariant,
    pub attention: AttentionVariant,
    pub fusion: FusionKind,
    pub stop_gradient: StopGradient,
}

impl Default for Variants {
    fn default() -> Self {
        Variants {
            local: LocalVariant::Full,
            attention: AttentionVariant::OWin,
            fusion: FusionKind::CrossAttention,
            stop_gradient: StopGradient::Both,
        }
    }
}

impl Variants {
    /// Every combination of the four axes, local-major.
    pub fn matrix() -> Vec<Variants> {
        let mut out = Vec::with_capacity(144);
        for local in LocalVariant::ALL {
            for attention in AttentionVariant::ALL {
                for fusion in FusionKind::ALL {
                    for stop_gradient in StopGradient::ALL {
                        out.push(Variants {
                            local,
                            attention,
                            fusion,
                            stop_gradient,
                        });
                    }
                }
            }
        }
        out
    }

    /// Row key built from the ablation table labels.
    pub fn label(&self) -> String {
        let mut s = String::new();
        for part in [
            self.local.label(),
            self.attention.label(),
            self.fusion.label(),
            self.stop_gradient.label(),
        ] {
            if !s.is_empty() {
                s.push_str(" | ");
            }
            s.push_str(part);
        }
        s
    }
}

/// Held-out retrieval split drawn from the synthetic generator: per class,
/// sample indices after the training images form the gallery and then the
/// queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gallery_per_class: usize,
    pub queries_per_class: usize,
    pub k: usize,
    pub mp_ks: Vec<usize>,
    pub protocol: Protocol,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gallery_per_class: 5,
            queries_per_class: 5,
            k: 5,
            mp_ks: vec![1, 5],
            protocol: Protocol::Medium,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_preset")]
    pub model: ModelPreset,
    #[serde(default)]
    pub variants: Variants,
    #[serde(default = "TrainConfig::toy")]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Seeds parameter init and minibatch order.
    #[serde(default)]
    pub seed: u64,
}

fn default_preset() -> ModelPreset {
    ModelPreset::Toy
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: default_preset(),
            variants: Variants::default(),
            train: TrainConfig::toy(),
            data: SyntheticSpec::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

/// Fully concrete settings for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub variants: Variants,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let mut model = self.model.config();
        let base_window = model.local.window_size;
        model.apply_variants(self.variants.local, self.variants.attention, base_window);
        model.fusion.kind = self.variants.fusion;
        let mut train = self.train.clone();
        train.stop_gradient = self.variants.stop_gradient;
        train.seed = self.seed;
        let resolved = ResolvedConfig {
            variants: self.variants,
            model,
            train,
            data: self.data.clone(),
            eval: self.eval.clone(),
            seed: self.seed,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.model.backbone.image_size {
            return Err(Error::Config(alloc::format!(
                "data image_size {} differs from model image_size {}",
                self.data.image_size,
                self.model.backbone.image_size
            )));
        }
        if self.data.n_classes != self.model.n_classes {
            return Err(Error::Config(alloc::format!(
                "data has {} classes, model head has {}",
                self.data.n_classes,
                self.model.n_classes
            )));
        }
        let e = &self.eval;
        if e.k == 0 || e.mp_ks.contains(&0) || e.batch_size == 0 {
            return Err(Error::Config("eval k values and batch size must be positive".into()));
        }
        if e.gallery_per_class == 0 || e.queries_per_class == 0 {
            return Err(Error::Config("eval needs gallery and query images".into()));
        }
        Ok(())
    }
}
