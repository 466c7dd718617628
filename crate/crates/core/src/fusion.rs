//! Global/local fusion: stacked cross-attention functions and the two
//! hand-designed alternatives (addition and orthogonal projection).

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::attention::{ffn, multi_head_attention, AttnShape, FfnParams, MhsaParams};
use crate::config::{FusionConfig, FusionKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, RowMap};
use crate::nn::{LayerNorm, Linear};
use crate::param::ParamStore;

/// One cross-attention function: `FFN(MCA(g, l) || g) + g`.
#[derive(Clone, Debug)]
pub struct CrossAttnStage {
    /// Per-head query/key/value projections packed column-wise, plus the
    /// `C x C` output projection.
    pub attn: MhsaParams,
    /// `2C -> hidden -> C`.
    pub ffn: FfnParams,
    pub pre_norm: Option<(LayerNorm, LayerNorm)>,
}

impl CrossAttnStage {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &FusionConfig) -> Result<Self> {
        let c = cfg.dim;
        let pre_norm = if cfg.pre_norm {
            Some((
                LayerNorm::new(store, rng, &format!("{name}.norm_q"), c)?,
                LayerNorm::new(store, rng, &format!("{name}.norm_kv"), c)?,
            ))
        } else {
            None
        };
        Ok(CrossAttnStage {
            attn: MhsaParams::new(store, rng, &format!("{name}.attn"), c, cfg.n_heads)?,
            ffn: FfnParams::new(store, rng, &format!("{name}.ffn"), 2 * c, cfg.ffn_hidden, c)?,
            pre_norm,
        })
    }
}

/// `fg_prev [B, C]` attends over `fl [B*HW, C]` (each item's `hw` rows).
pub fn cross_attention_stage(
    g: &mut Graph<'_>,
    fg_prev: NodeId,
    fl: NodeId,
    hw: usize,
    p: &CrossAttnStage,
) -> Result<NodeId> {
    let sg = g.shape(fg_prev).to_vec();
    if hw == 0 {
        return Err(Error::Empty("cross_attention_stage"));
    }
    if sg.len() != 2 || sg[1] != p.attn.dim {
        return Err(Error::shape("cross_attention_stage", &sg, &[p.attn.dim]));
    }
    let b = sg[0];
    let (q_in, kv_in) = match &p.pre_norm {
        Some((nq, nkv)) => (nq.forward(g, fg_prev)?, nkv.forward(g, fl)?),
        None => (fg_prev, fl),
    };
    let shape = AttnShape {
        groups: b,
        n_query: 1,
        n_key: hw,
    };
    let mca = multi_head_attention(g, q_in, kv_in, shape, &p.attn, None)?;
    let cat = g.concat(&[mca, fg_prev], 1)?;
    let y = ffn(g, cat, &p.ffn)?;
    g.add(fg_prev, y)
}

/// Repeats each row of `x [B, D]` `times` times.
fn repeat_rows(g: &mut Graph<'_>, x: NodeId, times: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let src: Vec<Option<usize>> = (0..s[0] * times).map(|r| Some(r / times)).collect();
    g.map_rows(x, RowMap::gather(s[0], s[1], &src), &[s[0] * times, s[1]])
}

fn local_tokens(g: &mut Graph<'_>, f_l: NodeId, c: usize) -> Result<(NodeId, usize, usize)> {
    let s = g.shape(f_l).to_vec();
    if s.len() != 4 || s[3] != c {
        return Err(Error::shape("fuse", &s, &[c]));
    }
    let hw = s[1] * s[2];
    Ok((g.reshape(f_l, &[s[0] * hw, c])?, s[0], hw))
}

/// `f = l2_normalize(f_g + f_l')`.
pub fn fuse_add(g: &mut Graph<'_>, f_g: NodeId, f_l_prime: NodeId, normalize: bool) -> Result<NodeId> {
    let s = g.add(f_g, f_l_prime)?;
    if normalize {
        g.l2_normalize(s)
    } else {
        Ok(s)
    }
}

/// Per-position component of `f_l` orthogonal to `f_g`, mean-pooled,
/// concatenated with `f_g` and projected back to `C`.
pub fn fuse_orthogonal(
    g: &mut Graph<'_>,
    f_g: NodeId,
    f_l: NodeId,
    proj: &Linear,
    normalize: bool,
) -> Result<NodeId> {
    let c = proj.d_out;
    let (tokens, b, hw) = local_tokens(g, f_l, c)?;
    if g.value(f_g).data().chunks(c).any(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(Error::ZeroNorm("fuse_orthogonal"));
    }
    let orth = orthogonal_component(g, f_g, tokens, hw)?;
    let orth = g.reshape(orth, &[b, hw, c])?;
    let pooled = g.mean(orth, &[1])?;
    let cat = g.concat(&[f_g, pooled], 1)?;
    let y = proj.forward(g, cat)?;
    if normalize {
        g.l2_normalize(y)
    } else {
        Ok(y)
    }
}

/// `f_l - (<f_l, f_g> / |f_g|^2) f_g` for every row of `tokens [B*hw, C]`.
pub fn orthogonal_component(g: &mut Graph<'_>, f_g: NodeId, tokens: NodeId, hw: usize) -> Result<NodeId> {
    let fg_rep = repeat_rows(g, f_g, hw)?;
    let prod = g.mul(tokens, fg_rep)?;
    let dots = g.mean(prod, &[1])?;
    let sq = g.mul(f_g, f_g)?;
    let norm2 = g.mean(sq, &[1])?;
    // both means carry the same 1/C factor, which cancels in the ratio
    let nb = g.shape(norm2)[0];
    let norm2 = g.reshape(norm2, &[nb, 1])?;
    let norm2 = repeat_rows(g, norm2, hw)?;
    let rows = g.shape(norm2)[0];
    let norm2 = g.reshape(norm2, &[rows])?;
    let coef = g.div(dots, norm2)?;
    let proj = g.mul_rows(fg_rep, coef)?;
    g.sub(tokens, proj)
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub cfg: FusionConfig,
    pub stages: Vec<CrossAttnStage>,
    pub orth_proj: Option<Linear>,
}

impl FusionModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut orth_proj = None;
        match cfg.kind {
            FusionKind::CrossAttention => {
                for m in 0..cfg.stages {
                    stages.push(CrossAttnStage::new(store, rng, &format!("fusion.stage{m}"), cfg)?);
                }
            }
            FusionKind::Orthogonal => {
                orth_proj = Some(Linear::new(store, rng, "fusion.orth_proj", 2 * cfg.dim, cfg.dim, true)?);
            }
            FusionKind::Add => {}
        }
        Ok(FusionModule {
            cfg: cfg.clone(),
            stages,
            orth_proj,
        })
    }

    /// Applies the first `m` cross-attention stages without normalising.
    pub fn cross_stack(&self, g: &mut Graph<'_>, f_g: NodeId, f_l: NodeId, m: usize) -> Result<NodeId> {
        let (tokens, _, hw) = local_tokens(g, f_l, self.cfg.dim)?;
        let mut x = f_g;
        for stage in self.stages.iter().take(m) {
            x = cross_attention_stage(g, x, tokens, hw, stage)?;
        }
        Ok(x)
    }

    /// Final descriptor from `f_g [B, C]` and, when the local branch is
    /// active, `f_l [B, H, W, C]` with its pooled vector `f_l' [B, C]`.
    pub fn fuse(&self, g: &mut Graph<'_>, f_g: NodeId, local: Option<(NodeId, NodeId)>) -> Result<NodeId> {
        let normalize = self.cfg.normalize_output;
        let Some((f_l, f_l_prime)) = local else {
            return if normalize { g.l2_normalize(f_g) } else { Ok(f_g) };
        };
        match self.cfg.kind {
            FusionKind::CrossAttention => {
                let x = self.cross_stack(g, f_g, f_l, self.stages.len())?;
                if normalize {
                    g.l2_normalize(x)
                } else {
                    Ok(x)
                }
            }
            FusionKind::Add => fuse_add(g, f_g, f_l_prime, normalize),
            FusionKind::Orthogonal => {
                let proj = self.orth_proj.as_ref().expect("orthogonal projection");
                fuse_orthogonal(g, f_g, f_l, proj, normalize)
            }
        }
    }
}
