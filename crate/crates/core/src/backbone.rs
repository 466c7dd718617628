//! Hierarchical shifted-window transformer backbone.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cyclic_shift, mhsa, window_merge_average, window_partition, TransformerBlock, WindowLayout,
};
use crate::config::{BackboneConfig, F2_STAGE};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, RowMap};
use crate::nn::{flatten_map, LayerNorm, Linear};
use crate::param::ParamStore;

/// Rearranges `[B, H, W, C]` into `[B, H/k, W/k, k*k*C]`; each output
/// vector concatenates its `k x k` block in row-major order.
pub fn space_to_depth(g: &mut Graph<'_>, x: NodeId, k: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
        return Err(Error::shape("space_to_depth", &s, &[k, k]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / k, w / k);
    let mut src = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..ho {
            for xo in 0..wo {
                for dy in 0..k {
                    for dx in 0..k {
                        src.push(Some((bi * h + y * k + dy) * w + xo * k + dx));
                    }
                }
            }
        }
    }
    g.map_rows(x, RowMap::gather(b * h * w, c, &src), &[b, ho, wo, k * k * c])
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        patch: usize,
        in_ch: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(PatchEmbed {
            proj: Linear::new(store, rng, &format!("{name}.proj"), patch * patch * in_ch, dim, true)?,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), dim)?,
            patch,
        })
    }

    /// Linear projection of flattened non-overlapping patches, before the norm.
    pub fn project(&self, g: &mut Graph<'_>, images: NodeId) -> Result<NodeId> {
        let s = g.shape(images).to_vec();
        let p = self.patch;
        if s.len() != 4 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::shape("patch_embed", &s, &[p, p]));
        }
        let patches = space_to_depth(g, images, p)?;
        let (b, gh, gw) = (s[0], s[1] / p, s[2] / p);
        let flat = flatten_map(g, patches)?;
        let tokens = self.proj.forward(g, flat)?;
        g.reshape(tokens, &[b, gh, gw, self.proj.d_out])
    }

    pub fn forward(&self, g: &mut Graph<'_>, images: NodeId) -> Result<NodeId> {
        let t = self.project(g, images)?;
        self.norm.forward(g, t)
    }
}

/// 2x2 neighbourhood concatenation followed by a linear map `4c -> 2c`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(PatchMerge {
            reduction: Linear::new(store, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, grid: NodeId) -> Result<NodeId> {
        let s = g.shape(grid).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Invalid(format!("patch_merge needs even extents, got {s:?}")));
        }
        let merged = space_to_depth(g, grid, 2)?;
        let flat = flatten_map(g, merged)?;
        let y = self.reduction.forward(g, flat)?;
        g.reshape(y, &[s[0], s[1] / 2, s[2] / 2, self.reduction.d_out])
    }
}

/// Attention mask for shifted windows: tokens attend only to tokens that
/// came from the same side of the wrap-around boundaries.
pub fn shifted_window_mask(layout: &WindowLayout, shift: usize) -> Vec<bool> {
    let (h, w, win) = (layout.height, layout.width, layout.window);
    let region = |v: usize, extent: usize| {
        if v < extent - win {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let n = layout.tokens_per_window();
    let mut m = Vec::with_capacity(layout.n_windows() * n * n);
    for wi in 0..layout.n_windows() {
        let (y0, x0, _, _) = layout.window_rect(wi % layout.windows_per_image());
        let labels: Vec<(usize, usize)> = (0..n)
            .map(|t| (region(y0 + t / win, h), region(x0 + t % win, w)))
            .collect();
        for q in 0..n {
            for k in 0..n {
                m.push(labels[q] == labels[k]);
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<TransformerBlock>,
    pub dim: usize,
    pub window: usize,
    pub shift: usize,
}

impl Stage {
    /// Runs the blocks, alternating plain and shifted windows.
    pub fn forward(&self, g: &mut Graph<'_>, grid: NodeId) -> Result<NodeId> {
        let s = g.shape(grid).to_vec();
        if s.len() != 4 || s[3] != self.dim {
            return Err(Error::shape("stage", &s, &[self.dim]));
        }
        let (b, h, w) = (s[0], s[1], s[2]);
        let layout = WindowLayout::new(b, h, w, self.window, self.window)?;
        let n = layout.tokens_per_window();
        let mut x = flatten_map(g, grid)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let shift = if i % 2 == 1 { self.shift } else { 0 };
            let y = blk.norm1.forward(g, x)?;
            let mut y = g.reshape(y, &[b, h, w, self.dim])?;
            if shift > 0 {
                y = cyclic_shift(g, y, -(shift as isize), -(shift as isize))?;
            }
            let windows = window_partition(g, y, &layout)?;
            let mask = (shift > 0).then(|| shifted_window_mask(&layout, shift));
            let attended = mhsa(g, windows, layout.n_windows(), n, &blk.attn, mask.as_deref())?;
            let mut y = window_merge_average(g, attended, &layout)?;
            if shift > 0 {
                y = cyclic_shift(g, y, shift as isize, shift as isize)?;
            }
            let y = flatten_map(g, y)?;
            let x1 = g.add(x, y)?;
            x = blk.mlp_residual(g, x1)?;
        }
        g.reshape(x, &s)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// Output of stage [`F2_STAGE`]: `[B, 2H, 2W, C/2]`.
    pub f2: NodeId,
    /// Last stage map `[B, H, W, C]`.
    pub f4: NodeId,
    /// Spatial mean of `f4`: `[B, C]`.
    pub f_g: NodeId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub merges: Vec<PatchMerge>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = PatchEmbed::new(
            store,
            rng,
            "backbone.patch_embed",
            cfg.patch_size,
            cfg.in_channels,
            cfg.dims[0],
        )?;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..4 {
            let dim = cfg.dims[s];
            let window = cfg.stage_window(s);
            let mut blocks = Vec::new();
            for bi in 0..cfg.depths[s] {
                let name = format!("backbone.stage{s}.block{bi}");
                let mut blk =
                    TransformerBlock::new(store, rng, &name, dim, cfg.heads[s], dim * cfg.mlp_ratio)?;
                if cfg.rel_pos_bias {
                    blk.attn = blk.attn.with_relative_bias(store, rng, &format!("{name}.attn"), window)?;
                }
                blocks.push(blk);
            }
            stages.push(Stage {
                blocks,
                dim,
                window,
                shift: cfg.stage_shift(s),
            });
            if s < 3 {
                merges.push(PatchMerge::new(store, rng, &format!("backbone.merge{s}"), dim)?);
            }
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            patch_embed,
            stages,
            merges,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, images: NodeId) -> Result<BackboneOutput> {
        let s = g.shape(images);
        let c = &self.cfg;
        if s.len() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != c.in_channels {
            return Err(Error::shape(
                "backbone input",
                s,
                &[c.image_size, c.image_size, c.in_channels],
            ));
        }
        let mut x = self.patch_embed.forward(g, images)?;
        let mut f2 = None;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(g, x)?;
            if i == F2_STAGE {
                f2 = Some(x);
            }
            if let Some(m) = self.merges.get(i) {
                x = m.forward(g, x)?;
            }
        }
        let f_g = g.mean(x, &[1, 2])?;
        Ok(BackboneOutput {
            f2: f2.expect("four stages"),
            f4: x,
            f_g,
        })
    }
}
