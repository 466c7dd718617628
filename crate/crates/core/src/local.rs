//! Local branch: overlapped window attention over `f2`, window merge,
//! spatial attention and modulation.
//!
//! ```text
//! f2 [B,2H,2W,C/2] -> windows -> n_blocks x (Win-MSA + FFN) -> overlap-average
//!    -> space-to-depth [B,H,W,2C] -> 1x1 proj -> f_R [B,H,W,C]
//! s_a = softplus(conv2(relu(conv1(f_R))))     f_l = f_R * s_a
//! ```

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::attention::{transformer_block, window_merge_average, window_partition, TransformerBlock, WindowLayout};
use crate::backbone::space_to_depth;
use crate::config::LocalBranchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{flatten_map, Linear};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Two 1x1 convolutions (`C -> C`, `C -> 1`) with ReLU between.
#[derive(Clone, Debug)]
pub struct SpatialAttnParams {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl SpatialAttnParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(SpatialAttnParams {
            conv1: Linear::new(store, rng, &format!("{name}.conv1"), dim, dim, true)?,
            conv2: Linear::new(store, rng, &format!("{name}.conv2"), dim, 1, true)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LocalOutput {
    pub f_r: NodeId,
    /// Strictly positive map `[B, H, W]`.
    pub s_a: NodeId,
    /// `[B, H, W, C]`.
    pub f_l: NodeId,
    /// Spatial mean of `f_l`: `[B, C]`.
    pub f_l_prime: NodeId,
}

#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub cfg: LocalBranchConfig,
    pub blocks: Vec<TransformerBlock>,
    pub merge_proj: Linear,
    pub spatial: SpatialAttnParams,
}

/// `s_a = softplus(conv2(relu(conv1(f_R))))` over `[B, H, W, C]`.
pub fn spatial_attention(g: &mut Graph<'_>, f_r: NodeId, p: &SpatialAttnParams) -> Result<NodeId> {
    let s = g.shape(f_r).to_vec();
    if s.len() != 4 || s[3] != p.conv1.d_in {
        return Err(Error::shape("spatial_attention", &s, &[p.conv1.d_in]));
    }
    let x = flatten_map(g, f_r)?;
    let h = p.conv1.forward(g, x)?;
    let h = g.relu(h)?;
    let a = p.conv2.forward(g, h)?;
    let a = g.softplus(a)?;
    g.reshape(a, &s[..3])
}

/// Scales each spatial position of `f_R [B,H,W,C]` by `s_a [B,H,W]`.
pub fn modulate(g: &mut Graph<'_>, f_r: NodeId, s_a: NodeId) -> Result<NodeId> {
    let (sr, ss) = (g.shape(f_r).to_vec(), g.shape(s_a).to_vec());
    if sr.len() != 4 || ss.as_slice() != &sr[..3] {
        return Err(Error::shape("modulate", &sr, &ss));
    }
    let x = flatten_map(g, f_r)?;
    let s = g.reshape(s_a, &[sr[0] * sr[1] * sr[2]])?;
    let y = g.mul_rows(x, s)?;
    g.reshape(y, &sr)
}

impl LocalBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &LocalBranchConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.window_channel_dim;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let name = format!("local.block{i}");
            let mut blk = TransformerBlock::new(store, rng, &name, d, cfg.n_heads, cfg.ffn_hidden)?;
            if cfg.rel_pos_bias {
                blk.attn = blk
                    .attn
                    .with_relative_bias(store, rng, &format!("{name}.attn"), cfg.window_size)?;
            }
            blocks.push(blk);
        }
        Ok(LocalBranch {
            cfg: cfg.clone(),
            blocks,
            merge_proj: Linear::new(store, rng, "local.merge.proj", 4 * d, cfg.out_dim, true)?,
            spatial: SpatialAttnParams::new(store, rng, "local.spatial", cfg.out_dim)?,
        })
    }

    pub fn layout(&self, batch: usize, height: usize, width: usize) -> Result<WindowLayout> {
        WindowLayout::new(batch, height, width, self.cfg.window_size, self.cfg.window_stride)
    }

    /// Runs the block stack independently inside every window.
    pub fn window_attention_stack(
        &self,
        g: &mut Graph<'_>,
        windows: NodeId,
        layout: &WindowLayout,
    ) -> Result<NodeId> {
        let mask = layout.key_mask();
        let mut x = windows;
        for blk in &self.blocks {
            x = transformer_block(g, x, layout.n_windows(), layout.tokens_per_window(), blk, mask.as_deref())?;
        }
        Ok(x)
    }

    /// Overlap-averaged reassembly, space-to-depth and projection to `C`.
    pub fn window_merge(&self, g: &mut Graph<'_>, windows: NodeId, layout: &WindowLayout) -> Result<NodeId> {
        let map = window_merge_average(g, windows, layout)?;
        self.project_merged(g, map)
    }

    fn project_merged(&self, g: &mut Graph<'_>, map: NodeId) -> Result<NodeId> {
        let s2d = space_to_depth(g, map, 2)?;
        let s = g.shape(s2d).to_vec();
        let flat = flatten_map(g, s2d)?;
        let y = self.merge_proj.forward(g, flat)?;
        g.reshape(y, &[s[0], s[1], s[2], self.cfg.out_dim])
    }

    pub fn forward(&self, g: &mut Graph<'_>, f2: NodeId) -> Result<LocalOutput> {
        let s = g.shape(f2).to_vec();
        if s.len() != 4 || s[3] != self.cfg.window_channel_dim {
            return Err(Error::shape("local_forward", &s, &[self.cfg.window_channel_dim]));
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Invalid(format!("local branch needs even f2 extents, got {s:?}")));
        }
        let f_r = if self.cfg.use_win_msa {
            let layout = self.layout(s[0], s[1], s[2])?;
            let windows = window_partition(g, f2, &layout)?;
            let windows = self.window_attention_stack(g, windows, &layout)?;
            self.window_merge(g, windows, &layout)?
        } else {
            self.project_merged(g, f2)?
        };
        let (b, h, w) = (s[0], s[1] / 2, s[2] / 2);
        let s_a = if self.cfg.use_spatial {
            spatial_attention(g, f_r, &self.spatial)?
        } else {
            g.constant(Tensor::full(&[b, h, w], 1.0))?
        };
        let f_l = modulate(g, f_r, s_a)?;
        let f_l_prime = g.mean(f_l, &[1, 2])?;
        Ok(LocalOutput {
            f_r,
            s_a,
            f_l,
            f_l_prime,
        })
    }
}
