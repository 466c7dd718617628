//! Multi-head attention, feed-forward blocks and spatial window layouts.
//!
//! Token sets are carried as rank-2 tensors `[groups * tokens, C]`; a group
//! is one window (or one image) and attention never crosses groups.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, RowMap};
use crate::nn::{LayerNorm, Linear, INIT_STD};
use crate::param::{Init, ParamId, ParamStore};

/// Packed projections of multi-head attention. Head `i` uses columns
/// `i*d_h..(i+1)*d_h` of `w_q`, `w_k` and `w_v`.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
    pub dim: usize,
    /// Relative position bias table `[(2w-1)^2, heads]` for `w x w` windows.
    pub rel_bias: Option<(ParamId, usize)>,
}

impl MhsaParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by {n_heads} heads"
            )));
        }
        let mut proj = |suffix: &str| {
            store.init(&format!("{name}.{suffix}"), &[dim, dim], Init::TruncNormal(INIT_STD), true, rng)
        };
        Ok(MhsaParams {
            w_q: proj("w_q")?,
            w_k: proj("w_k")?,
            w_v: proj("w_v")?,
            w_o: proj("w_o")?,
            n_heads,
            dim,
            rel_bias: None,
        })
    }

    /// Adds a learned relative position bias for square windows of side `window`.
    pub fn with_relative_bias(
        mut self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        window: usize,
    ) -> Result<Self> {
        let span = 2 * window - 1;
        let table = store.init(
            &format!("{name}.rel_bias"),
            &[span * span, self.n_heads],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        self.rel_bias = Some((table, window));
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }
}

/// Shape of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub groups: usize,
    pub n_query: usize,
    pub n_key: usize,
}

fn split_heads(g: &mut Graph<'_>, x: NodeId, groups: usize, n: usize, heads: usize, dh: usize) -> Result<NodeId> {
    if heads == 1 {
        return g.reshape(x, &[groups, n, dh]);
    }
    // row (grp, tok, head) -> row (grp, head, tok)
    let mut src = Vec::with_capacity(groups * heads * n);
    for grp in 0..groups {
        for h in 0..heads {
            for t in 0..n {
                src.push(Some((grp * n + t) * heads + h));
            }
        }
    }
    let map = RowMap::gather(groups * n * heads, dh, &src);
    g.map_rows(x, map, &[groups * heads, n, dh])
}

fn merge_heads(g: &mut Graph<'_>, x: NodeId, groups: usize, n: usize, heads: usize, dh: usize) -> Result<NodeId> {
    if heads == 1 {
        return g.reshape(x, &[groups * n, dh]);
    }
    let mut src = Vec::with_capacity(groups * heads * n);
    for grp in 0..groups {
        for t in 0..n {
            for h in 0..heads {
                src.push(Some((grp * heads + h) * n + t));
            }
        }
    }
    let map = RowMap::gather(groups * n * heads, dh, &src);
    g.map_rows(x, map, &[groups * n, heads * dh])
}

fn relative_bias(g: &mut Graph<'_>, table: ParamId, window: usize, heads: usize, groups: usize) -> Result<NodeId> {
    let n = window * window;
    let span = 2 * window - 1;
    let t = g.param(table)?;
    // [h, n, n] from table[(dy * span + dx), h]
    let mut src = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let (yi, xi) = (i / window, i % window);
                let (yj, xj) = (j / window, j % window);
                let dy = yi + window - 1 - yj;
                let dx = xi + window - 1 - xj;
                src.push(Some((dy * span + dx) * heads + h));
            }
        }
    }
    let per_head = g.map_rows(t, RowMap::gather(span * span * heads, 1, &src), &[heads, n * n])?;
    let rep: Vec<Option<usize>> = (0..groups * heads).map(|r| Some(r % heads)).collect();
    g.map_rows(per_head, RowMap::gather(heads, n * n, &rep), &[groups * heads, n, n])
}

/// Multi-head attention of `queries [G*Nq, C]` over `keys_values [G*Nk, C]`.
/// `mask[G, Nq, Nk]` marks keys each query may attend to.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    queries: NodeId,
    keys_values: NodeId,
    shape: AttnShape,
    p: &MhsaParams,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let AttnShape {
        groups,
        n_query,
        n_key,
    } = shape;
    let (c, h) = (p.dim, p.n_heads);
    let dh = p.head_dim();
    let sq = g.shape(queries);
    if sq != [groups * n_query, c] {
        return Err(Error::shape("attention queries", sq, &[groups * n_query, c]));
    }
    let sk = g.shape(keys_values);
    if sk != [groups * n_key, c] {
        return Err(Error::shape("attention keys", sk, &[groups * n_key, c]));
    }
    if let Some(m) = mask {
        if m.len() != groups * n_query * n_key {
            return Err(Error::shape("attention mask", &[m.len()], &[groups, n_query, n_key]));
        }
    }
    let (wq, wk, wv, wo) = (g.param(p.w_q)?, g.param(p.w_k)?, g.param(p.w_v)?, g.param(p.w_o)?);
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys_values, wk)?;
    let v = g.matmul(keys_values, wv)?;
    let q = split_heads(g, q, groups, n_query, h, dh)?;
    let k = split_heads(g, k, groups, n_key, h, dh)?;
    let v = split_heads(g, v, groups, n_key, h, dh)?;
    let scores = g.batch_matmul(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
    if let Some((table, window)) = p.rel_bias {
        if n_query == window * window && n_key == n_query {
            let bias = relative_bias(g, table, window, h, groups)?;
            scores = g.add(scores, bias)?;
        }
    }
    let expanded;
    let head_mask = match mask {
        Some(m) if h > 1 => {
            let block = n_query * n_key;
            let mut e = Vec::with_capacity(m.len() * h);
            for grp in 0..groups {
                for _ in 0..h {
                    e.extend_from_slice(&m[grp * block..(grp + 1) * block]);
                }
            }
            expanded = e;
            Some(expanded.as_slice())
        }
        other => other,
    };
    let attn = g.masked_softmax(scores, head_mask)?;
    let out = g.batch_matmul(attn, v, false)?;
    let out = merge_heads(g, out, groups, n_query, h, dh)?;
    g.matmul(out, wo)
}

/// Self-attention within each group of `n` tokens.
pub fn mhsa(
    g: &mut Graph<'_>,
    tokens: NodeId,
    groups: usize,
    n: usize,
    p: &MhsaParams,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let shape = AttnShape {
        groups,
        n_query: n,
        n_key: n,
    };
    multi_head_attention(g, tokens, tokens, shape, p, mask)
}

/// Two affine layers with GELU between them.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FfnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: hidden width must be positive")));
        }
        Ok(FfnParams {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }
}

pub fn ffn(g: &mut Graph<'_>, x: NodeId, p: &FfnParams) -> Result<NodeId> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != p.fc1.d_in {
        return Err(Error::shape("ffn", s, &[p.fc1.d_in]));
    }
    let h = p.fc1.forward(g, x)?;
    let h = g.gelu(h)?;
    p.fc2.forward(g, h)
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `+ ffn(ln(.))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MhsaParams,
    pub norm2: LayerNorm,
    pub ffn: FfnParams,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), dim)?,
            attn: MhsaParams::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), dim)?,
            ffn: FfnParams::new(store, rng, &format!("{name}.ffn"), dim, hidden, dim)?,
        })
    }

    /// Second half of the block: `x + ffn(ln2(x))`.
    pub fn mlp_residual(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let y = self.norm2.forward(g, x)?;
        let y = ffn(g, y, &self.ffn)?;
        g.add(x, y)
    }
}

pub fn transformer_block(
    g: &mut Graph<'_>,
    tokens: NodeId,
    groups: usize,
    n: usize,
    p: &TransformerBlock,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let y = p.norm1.forward(g, tokens)?;
    let y = mhsa(g, y, groups, n, &p.attn, mask)?;
    let x = g.add(tokens, y)?;
    p.mlp_residual(g, x)
}

/// Placement of square windows over a batch of `height x width` maps.
///
/// Anchors sit at `0, stride, 2*stride, ...` along each axis; when the last
/// window would run past the map the map is zero-padded on the bottom/right
/// and the padded cells are masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub n_y: usize,
    pub n_x: usize,
}

fn anchor_count(extent: usize, window: usize, stride: usize) -> usize {
    (extent - window).div_ceil(stride) + 1
}

impl WindowLayout {
    pub fn new(batch: usize, height: usize, width: usize, window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::Invalid(format!(
                "window partition needs 1 <= stride <= window, got window {window}, stride {stride}"
            )));
        }
        if window > height || window > width {
            return Err(Error::Invalid(format!(
                "window {window} larger than the {height}x{width} map"
            )));
        }
        Ok(WindowLayout {
            batch,
            height,
            width,
            window,
            stride,
            n_y: anchor_count(height, window, stride),
            n_x: anchor_count(width, window, stride),
        })
    }

    pub fn windows_per_image(&self) -> usize {
        self.n_y * self.n_x
    }

    pub fn n_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn padded_height(&self) -> usize {
        (self.n_y - 1) * self.stride + self.window
    }

    pub fn padded_width(&self) -> usize {
        (self.n_x - 1) * self.stride + self.window
    }

    pub fn has_padding(&self) -> bool {
        self.padded_height() != self.height || self.padded_width() != self.width
    }

    /// Source rectangle `(y0, x0, y1, x1)` (exclusive ends, clipped to the
    /// map) of window `w` within its image.
    pub fn window_rect(&self, w: usize) -> (usize, usize, usize, usize) {
        let (wy, wx) = (w / self.n_x, w % self.n_x);
        let (y0, x0) = (wy * self.stride, wx * self.stride);
        (
            y0,
            x0,
            (y0 + self.window).min(self.height),
            (x0 + self.window).min(self.width),
        )
    }

    /// Map cell (flat row in `[B*H*W]`) feeding token row `r` in
    /// `[n_windows * window^2]`, or `None` for padding.
    pub fn source(&self, r: usize) -> Option<usize> {
        let n = self.tokens_per_window();
        let (win, tok) = (r / n, r % n);
        let (b, w) = (win / self.windows_per_image(), win % self.windows_per_image());
        let (wy, wx) = (w / self.n_x, w % self.n_x);
        let y = wy * self.stride + tok / self.window;
        let x = wx * self.stride + tok % self.window;
        (y < self.height && x < self.width).then(|| (b * self.height + y) * self.width + x)
    }

    pub fn partition_map(&self, channels: usize) -> RowMap {
        let rows = self.n_windows() * self.tokens_per_window();
        let src: Vec<Option<usize>> = (0..rows).map(|r| self.source(r)).collect();
        RowMap::gather(self.batch * self.height * self.width, channels, &src)
    }

    /// Number of windows covering each cell of one image.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.height * self.width];
        let per_image = self.windows_per_image() * self.tokens_per_window();
        for r in 0..per_image {
            if let Some(c) = self.source(r) {
                cov[c] += 1;
            }
        }
        cov
    }

    /// Scatters window tokens back onto the map, averaging each cell over
    /// the windows covering it. Padding tokens are dropped.
    pub fn merge_map(&self, channels: usize) -> Result<RowMap> {
        let cells = self.batch * self.height * self.width;
        let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cells];
        let rows = self.n_windows() * self.tokens_per_window();
        for r in 0..rows {
            if let Some(c) = self.source(r) {
                lists[c].push((r, 0.0));
            }
        }
        for l in &mut lists {
            if l.is_empty() {
                return Err(Error::Invalid("window merge: uncovered cell".into()));
            }
            let w = 1.0 / l.len() as f64;
            l.iter_mut().for_each(|e| e.1 = w);
        }
        Ok(RowMap::weighted(rows, channels, &lists))
    }

    /// `[n_windows, N, N]` mask excluding padding keys, or `None` without padding.
    pub fn key_mask(&self) -> Option<Vec<bool>> {
        if !self.has_padding() {
            return None;
        }
        let n = self.tokens_per_window();
        let mut m = Vec::with_capacity(self.n_windows() * n * n);
        for w in 0..self.n_windows() {
            let valid: Vec<bool> = (0..n).map(|t| self.source(w * n + t).is_some()).collect();
            for _ in 0..n {
                m.extend_from_slice(&valid);
            }
        }
        Some(m)
    }
}

/// Splits a `[B, H, W, C]` map into window token sets `[n_windows * W_s^2, C]`.
pub fn window_partition(g: &mut Graph<'_>, fmap: NodeId, layout: &WindowLayout) -> Result<NodeId> {
    let s = g.shape(fmap).to_vec();
    if s.len() != 4 || s[0] != layout.batch || s[1] != layout.height || s[2] != layout.width {
        return Err(Error::shape(
            "window_partition",
            &s,
            &[layout.batch, layout.height, layout.width],
        ));
    }
    let c = s[3];
    let map = layout.partition_map(c);
    g.map_rows(fmap, map, &[layout.n_windows() * layout.tokens_per_window(), c])
}

/// Reassembles window tokens into `[B, H, W, C]`, averaging overlaps.
pub fn window_merge_average(g: &mut Graph<'_>, windows: NodeId, layout: &WindowLayout) -> Result<NodeId> {
    let s = g.shape(windows).to_vec();
    let rows = layout.n_windows() * layout.tokens_per_window();
    if s.len() != 2 || s[0] != rows {
        return Err(Error::shape("window_merge", &s, &[rows]));
    }
    let c = s[1];
    let map = layout.merge_map(c)?;
    g.map_rows(windows, map, &[layout.batch, layout.height, layout.width, c])
}

/// Source cell of output cell `(y, x)` after a toroidal roll by `(dy, dx)`:
/// `out[(y + dy) mod H][(x + dx) mod W] = in[y][x]`.
pub fn roll_source(y: usize, x: usize, h: usize, w: usize, dy: isize, dx: isize) -> (usize, usize) {
    let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
    (sy, sx)
}

/// Toroidal roll of the spatial axes of `[B, H, W, C]`.
pub fn cyclic_shift(g: &mut Graph<'_>, fmap: NodeId, dy: isize, dx: isize) -> Result<NodeId> {
    let s = g.shape(fmap).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("cyclic_shift", &s, &[4]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut src = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = roll_source(y, x, h, w, dy, dx);
                src.push(Some((bi * h + sy) * w + sx));
            }
        }
    }
    g.map_rows(fmap, RowMap::gather(b * h * w, c, &src), &s)
}
