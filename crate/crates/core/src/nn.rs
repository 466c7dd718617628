//! Small parameterised layers shared by every model component.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Init, ParamId, ParamStore};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Affine map on the last axis of a rank-2 input: `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.init(&format!("{name}.w"), &[d_in, d_out], Init::TruncNormal(INIT_STD), true, rng)?;
        let b = if bias {
            Some(store.init(&format!("{name}.b"), &[d_out], Init::Zeros, false, rng)?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.bias_add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Result<Self> {
        let gain = store.init(&format!("{name}.gain"), &[dim], Init::Ones, false, rng)?;
        let bias = store.init(&format!("{name}.bias"), &[dim], Init::Zeros, false, rng)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Views a `[B, H, W, C]` map as `[B*H*W, C]` tokens.
pub fn flatten_map(g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("flatten_map", &s, &[4]));
    }
    g.reshape(x, &[s[0] * s[1] * s[2], s[3]])
}
