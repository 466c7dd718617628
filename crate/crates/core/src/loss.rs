//! ArcFace and softmax cross-entropy losses, and the two-branch training
//! objective.

use serde::{Deserialize, Serialize};

use crate::config::ArcFaceConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{DalgModel, ModelOutput, StopGradient};

/// Cosines between normalised descriptors `f [B, C]` and normalised class
/// centre columns of `weights [C, n]`.
pub fn class_cosines(g: &mut Graph<'_>, f: NodeId, weights: NodeId) -> Result<NodeId> {
    let fhat = g.l2_normalize(f)?;
    let wt = g.transpose(weights)?;
    let wt = g.l2_normalize(wt)?;
    let w = g.transpose(wt)?;
    g.matmul(fhat, w)
}

/// ArcFace logits: `scale * cos(theta_y + margin)` for the labelled class,
/// `scale * cos(theta_j)` elsewhere.
pub fn arcface_logits(
    g: &mut Graph<'_>,
    f: NodeId,
    weights: NodeId,
    labels: &[usize],
    cfg: &ArcFaceConfig,
) -> Result<NodeId> {
    let cos = class_cosines(g, f, weights)?;
    g.arc_margin(cos, labels, cfg.margin, cfg.scale)
}

pub fn softmax_cross_entropy(g: &mut Graph<'_>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub global: f64,
    pub local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            global: 1.0,
            local: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DalgLoss {
    pub output: ModelOutput,
    /// ArcFace loss on the fused descriptor.
    pub global: NodeId,
    /// Cross-entropy on `f_l'`; absent without a local branch.
    pub local: Option<NodeId>,
    pub total: NodeId,
    /// Unmargined class cosines `[B, n]`, for accuracy.
    pub cosines: NodeId,
}

/// One forward pass and both losses, with gradients cut per `stop`.
pub fn dalg_loss(
    model: &DalgModel,
    g: &mut Graph<'_>,
    images: NodeId,
    labels: &[usize],
    stop: StopGradient,
    weights: LossWeights,
) -> Result<DalgLoss> {
    let n = model.cfg.n_classes;
    if let Some(&l) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label: l, classes: n });
    }
    let output = model.forward(g, images, stop)?;
    let w = g.param(model.arc_weights)?;
    let cosines = class_cosines(g, output.f, w)?;
    let arc = &model.cfg.arcface;
    let logits = g.arc_margin(cosines, labels, arc.margin, arc.scale)?;
    let global = g.cross_entropy(logits, labels)?;
    let local = match (output.local, &model.local_classifier) {
        (Some(lo), Some(head)) => {
            let logits = head.forward(g, lo.f_l_prime)?;
            Some(g.cross_entropy(logits, labels)?)
        }
        _ => None,
    };
    let gw = g.scale(global, weights.global)?;
    let total = match local {
        Some(l) => {
            let lw = g.scale(l, weights.local)?;
            g.add(gw, lw)?
        }
        None => gw,
    };
    Ok(DalgLoss {
        output,
        global,
        local,
        total,
        cosines,
    })
}
