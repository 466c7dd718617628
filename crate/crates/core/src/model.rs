//! Full descriptor model: backbone, local branch, fusion and the two
//! classification heads used during training.

use core::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneOutput};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionModule;
use crate::graph::{Graph, NodeId};
use crate::local::{LocalBranch, LocalOutput};
use crate::nn::{Linear, INIT_STD};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Where gradients are cut between the two losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopGradient {
    /// Detach at `f2` (local loss) and at `f_l` (global loss).
    Both,
    /// Only the local branch input `f2` is detached.
    CeAtF2,
    /// Only the fusion input `f_l` is detached.
    ArcfaceAtFl,
    None,
}

impl StopGradient {
    pub const ALL: [StopGradient; 4] = [Self::None, Self::CeAtF2, Self::ArcfaceAtFl, Self::Both];

    pub fn detach_f2(self) -> bool {
        matches!(self, Self::Both | Self::CeAtF2)
    }

    pub fn detach_fl(self) -> bool {
        matches!(self, Self::Both | Self::ArcfaceAtFl)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "W/o Stop Back-Prop",
            Self::CeAtF2 => "Stop CE at f2",
            Self::ArcfaceAtFl => "Stop ArcFace at fl",
            Self::Both => "Stop Both",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    pub local: Option<LocalOutput>,
    /// Final descriptor `[B, C]`.
    pub f: NodeId,
}

pub struct DalgModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub local: Option<LocalBranch>,
    pub fusion: FusionModule,
    /// ArcFace class centres `[C, n_classes]`.
    pub arc_weights: ParamId,
    /// Auxiliary classifier on `f_l'`.
    pub local_classifier: Option<Linear>,
    forward_images: AtomicU64,
}

impl DalgModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng, &cfg.backbone)?;
        let (local, local_classifier) = if cfg.local.enabled {
            let l = LocalBranch::new(&mut store, &mut rng, &cfg.local)?;
            let head = Linear::new(
                &mut store,
                &mut rng,
                "local.classifier",
                cfg.local.out_dim,
                cfg.n_classes,
                true,
            )?;
            (Some(l), Some(head))
        } else {
            (None, None)
        };
        let fusion = FusionModule::new(&mut store, &mut rng, &cfg.fusion)?;
        let arc_weights = store.init(
            "head.arcface.w",
            &[cfg.descriptor_dim(), cfg.n_classes],
            Init::TruncNormal(INIT_STD),
            true,
            &mut rng,
        )?;
        Ok(DalgModel {
            cfg: cfg.clone(),
            store,
            backbone,
            local,
            fusion,
            arc_weights,
            local_classifier,
            forward_images: AtomicU64::new(0),
        })
    }

    /// Images pushed through [`DalgModel::forward`] since construction.
    pub fn forward_count(&self) -> u64 {
        self.forward_images.load(Ordering::Relaxed)
    }

    pub fn forward(&self, g: &mut Graph<'_>, images: NodeId, stop: StopGradient) -> Result<ModelOutput> {
        let b = g.shape(images).first().copied().unwrap_or(0);
        let bb = self.backbone.forward(g, images)?;
        let local = match &self.local {
            Some(lb) => {
                let f2 = if stop.detach_f2() { g.stop_gradient(bb.f2)? } else { bb.f2 };
                Some(lb.forward(g, f2)?)
            }
            None => None,
        };
        let fusion_input = match local {
            Some(lo) if stop.detach_fl() => {
                let f_l = g.stop_gradient(lo.f_l)?;
                let f_lp = g.stop_gradient(lo.f_l_prime)?;
                Some((f_l, f_lp))
            }
            Some(lo) => Some((lo.f_l, lo.f_l_prime)),
            None => None,
        };
        let f = self.fusion.fuse(g, bb.f_g, fusion_input)?;
        self.forward_images.fetch_add(b as u64, Ordering::Relaxed);
        Ok(ModelOutput {
            backbone: bb,
            local,
            f,
        })
    }

    /// Descriptors `[B, C]` for a batch `[B, S, S, channels]`; one forward pass.
    pub fn describe(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(images.clone())?;
        let out = self.forward(&mut g, x, StopGradient::None)?;
        Ok(g.value(out.f).clone())
    }

    /// Spatial attention map `[B, H, W]` for a batch, if the branch exists.
    pub fn attention_map(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(images.clone())?;
        let out = self.forward(&mut g, x, StopGradient::None)?;
        let lo = out
            .local
            .ok_or_else(|| Error::Invalid("model has no local branch".into()))?;
        Ok(g.value(lo.s_a).clone())
    }

    /// Parameters whose names start with `prefix`.
    pub fn params_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.store
            .iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }
}
