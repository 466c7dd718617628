//! Model hyperparameters, presets and the ablation variant axes.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the hierarchical stage whose output feeds the local branch.
/// Its width is half the descriptor width and its grid twice the last
/// stage's grid.
pub const F2_STAGE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub depths: [usize; 4],
    pub dims: [usize; 4],
    pub heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
}

impl BackboneConfig {
    pub fn grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    /// Window side used by `stage`; clipped to the grid like the reference
    /// hierarchical design.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window_size.min(self.grid(stage))
    }

    /// Shift applied on odd blocks; zero when one window spans the grid.
    pub fn stage_shift(&self, stage: usize) -> usize {
        if self.grid(stage) > self.window_size {
            self.window_size / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        let g0 = self.image_size / self.patch_size;
        if g0 % 8 != 0 {
            return err(format!("patch grid {g0} must be divisible by 8 for three 2x2 merges"));
        }
        if self.in_channels == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return err("in_channels, window_size and mlp_ratio must be positive".into());
        }
        for s in 0..4 {
            if s > 0 && self.dims[s] != 2 * self.dims[s - 1] {
                return err(format!("stage widths must double, got {:?}", self.dims));
            }
            if self.heads[s] == 0 || self.dims[s] % self.heads[s] != 0 {
                return err(format!(
                    "stage {s} width {} not divisible by {} heads",
                    self.dims[s], self.heads[s]
                ));
            }
            if self.grid(s) % self.stage_window(s) != 0 {
                return err(format!(
                    "stage {s} grid {} not divisible by window {}",
                    self.grid(s),
                    self.stage_window(s)
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalBranchConfig {
    pub enabled: bool,
    pub use_win_msa: bool,
    pub use_spatial: bool,
    pub window_size: usize,
    pub window_stride: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Width of the windowed tokens (half the descriptor width).
    pub window_channel_dim: usize,
    pub out_dim: usize,
    pub ffn_hidden: usize,
    /// Learned relative position bias inside local windows.
    pub rel_pos_bias: bool,
}

impl LocalBranchConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("local branch: {m}")));
        if self.window_channel_dim * 2 != self.out_dim {
            return err(format!(
                "window channel dim {} must be half of output dim {}",
                self.window_channel_dim, self.out_dim
            ));
        }
        if self.window_size == 0 || self.window_stride == 0 || self.window_stride > self.window_size {
            return err(format!(
                "need 1 <= stride <= window, got window {} stride {}",
                self.window_size, self.window_stride
            ));
        }
        if self.n_heads == 0 || self.window_channel_dim % self.n_heads != 0 {
            return err(format!(
                "width {} not divisible by {} heads",
                self.window_channel_dim, self.n_heads
            ));
        }
        if self.ffn_hidden == 0 {
            return err("ffn hidden width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    #[serde(rename = "cross", alias = "cross-attention")]
    CrossAttention,
    Add,
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Number of stacked cross-attention functions.
    pub stages: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub normalize_output: bool,
    pub pre_norm: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("fusion: at least one stage required".into()));
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "fusion: width {} not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("fusion: ffn hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcFaceConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..core::f64::consts::FRAC_PI_2).contains(&self.margin) || !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "arcface: need 0 <= margin < pi/2 and scale > 0, got m={} s={}",
                self.margin, self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub local: LocalBranchConfig,
    pub fusion: FusionConfig,
    pub arcface: ArcFaceConfig,
    pub n_classes: usize,
}

impl ModelConfig {
    /// Swin-T sized configuration with the reported head counts and widths.
    pub fn paper() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: 224,
                in_channels: 3,
                patch_size: 4,
                depths: [2, 2, 6, 2],
                dims: [96, 192, 384, 768],
                heads: [3, 6, 12, 24],
                window_size: 7,
                mlp_ratio: 4,
                rel_pos_bias: false,
            },
            local: LocalBranchConfig {
                enabled: true,
                use_win_msa: true,
                use_spatial: true,
                window_size: 7,
                window_stride: 3,
                n_blocks: 4,
                n_heads: 6,
                window_channel_dim: 384,
                out_dim: 768,
                ffn_hidden: 1536,
                rel_pos_bias: false,
            },
            fusion: FusionConfig {
                kind: FusionKind::CrossAttention,
                stages: 2,
                n_heads: 12,
                dim: 768,
                ffn_hidden: 1536,
                normalize_output: true,
                pre_norm: false,
            },
            arcface: ArcFaceConfig {
                margin: 0.25,
                scale: 30.0,
            },
            n_classes: 81_313,
        }
    }

    /// Desk-scale configuration used by the tests and the synthetic benchmark.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: 32,
                in_channels: 3,
                patch_size: 2,
                depths: [1, 1, 2, 1],
                dims: [16, 32, 64, 128],
                heads: [1, 2, 4, 8],
                window_size: 4,
                mlp_ratio: 4,
                rel_pos_bias: false,
            },
            local: LocalBranchConfig {
                enabled: true,
                use_win_msa: true,
                use_spatial: true,
                window_size: 2,
                window_stride: 1,
                n_blocks: 4,
                n_heads: 2,
                window_channel_dim: 64,
                out_dim: 128,
                ffn_hidden: 256,
                rel_pos_bias: false,
            },
            fusion: FusionConfig {
                kind: FusionKind::CrossAttention,
                stages: 2,
                n_heads: 2,
                dim: 128,
                ffn_hidden: 256,
                normalize_output: true,
                pre_norm: false,
            },
            arcface: ArcFaceConfig {
                margin: 0.25,
                scale: 30.0,
            },
            n_classes: 8,
        }
    }

    /// Descriptor width `C`.
    pub fn descriptor_dim(&self) -> usize {
        self.backbone.dims[3]
    }

    /// Spatial side of `f2`.
    pub fn f2_grid(&self) -> usize {
        self.backbone.grid(F2_STAGE)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.local.validate()?;
        self.fusion.validate()?;
        self.arcface.validate()?;
        let c = self.descriptor_dim();
        if self.backbone.dims[F2_STAGE] * 2 != c {
            return Err(Error::Config(format!(
                "f2 width {} must be half the descriptor width {c}",
                self.backbone.dims[F2_STAGE]
            )));
        }
        if self.local.window_channel_dim != self.backbone.dims[F2_STAGE] || self.local.out_dim != c {
            return Err(Error::Config(format!(
                "local branch widths {}/{} must match backbone {}/{c}",
                self.local.window_channel_dim,
                self.local.out_dim,
                self.backbone.dims[F2_STAGE]
            )));
        }
        if self.fusion.dim != c {
            return Err(Error::Config(format!("fusion width {} must equal {c}", self.fusion.dim)));
        }
        if self.local.window_size > self.f2_grid() {
            return Err(Error::Config(format!(
                "local window {} larger than the {}x{} f2 map",
                self.local.window_size,
                self.f2_grid(),
                self.f2_grid()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Local-branch ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalVariant {
    Full,
    NoLocal,
    NoWinmsa,
    NoSpatial,
}

/// Attention used inside the local branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    /// One window spanning the whole map.
    Msa,
    /// Non-overlapping windows (stride = window).
    NWin,
    /// Overlapping windows (stride = floor(window / 2)).
    OWin,
}

impl LocalVariant {
    pub const ALL: [LocalVariant; 4] = [Self::Full, Self::NoLocal, Self::NoWinmsa, Self::NoSpatial];

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "Full Model (DALG)",
            Self::NoLocal => "w/o Local Branch",
            Self::NoWinmsa => "w/o Win-MSA",
            Self::NoSpatial => "w/o Spatial",
        }
    }
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [Self::Msa, Self::NWin, Self::OWin];

    pub fn label(self) -> &'static str {
        match self {
            Self::Msa => "MSA",
            Self::NWin => "N-Win-MSA",
            Self::OWin => "O-Win-MSA",
        }
    }
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [Self::Add, Self::Orthogonal, Self::CrossAttention];

    pub fn label(self) -> &'static str {
        match self {
            Self::Add => "ADD",
            Self::Orthogonal => "Orthogonal",
            Self::CrossAttention => "Cross-Attention",
        }
    }
}

impl ModelConfig {
    /// Applies the local-branch and attention axes. `base_window` is the
    /// window side used by the windowed variants.
    pub fn apply_variants(&mut self, local: LocalVariant, attention: AttentionVariant, base_window: usize) {
        let l = &mut self.local;
        l.enabled = local != LocalVariant::NoLocal;
        l.use_win_msa = local != LocalVariant::NoWinmsa;
        l.use_spatial = local != LocalVariant::NoSpatial;
        match attention {
            AttentionVariant::Msa => {
                let g = self.backbone.grid(F2_STAGE);
                l.window_size = g;
                l.window_stride = g;
            }
            AttentionVariant::NWin => {
                l.window_size = base_window;
                l.window_stride = base_window;
            }
            AttentionVariant::OWin => {
                l.window_size = base_window;
                l.window_stride = (base_window / 2).max(1);
            }
        }
    }
}
