//! 3D backbones (conv UNet and shifted-window attention) and heads.
//!
//! Modules hold only parameter ids; the tensors live in a [`ParamStore`] so
//! an EMA teacher can run the same modules over a cloned store.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use lsmfm_tensor::ops::shape::{tokens_to_volume_index, volume_to_tokens_index};
use lsmfm_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    ConvUnet,
    Swin,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_unet" | "unet" | "conv" => Ok(Family::ConvUnet),
            "swin" => Ok(Family::Swin),
            _ => Err(Error::Config(format!("unknown backbone family `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub family: Family,
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 levels.
    pub depth: usize,
    /// Attention window edge in tokens (swin only).
    pub window: usize,
    pub feature_dim: usize,
    /// Input patch edge in voxels.
    pub edge: usize,
    /// Channels per attention head (swin only).
    pub head_dim: usize,
    /// Start the bottleneck projection at zero.
    pub zero_init_tail: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::large(Family::ConvUnet)
    }
}

impl BackboneConfig {
    pub fn large(family: Family) -> Self {
        Self {
            family,
            in_channels: 1,
            base_width: 16,
            depth: 4,
            window: 6,
            feature_dim: 128,
            edge: 96,
            head_dim: 16,
            zero_init_tail: false,
        }
    }

    pub fn micro(family: Family) -> Self {
        Self {
            family,
            in_channels: 1,
            base_width: 4,
            depth: 3,
            window: 4,
            feature_dim: 32,
            edge: 32,
            head_dim: 8,
            zero_init_tail: false,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    pub fn grid(&self) -> usize {
        self.edge / self.stride()
    }

    pub fn tokens(&self) -> usize {
        self.grid().pow(3)
    }

    /// Encoder width at level `i` (level 0 is full resolution).
    pub fn width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_width == 0 || self.feature_dim == 0 {
            return bad("in_channels, base_width and feature_dim must be positive".into());
        }
        if self.depth == 0 || self.depth > 6 {
            return bad(format!("depth {} outside 1..=6", self.depth));
        }
        if !self.edge.is_multiple_of(self.stride()) || self.edge == 0 {
            return bad(format!("edge {} not divisible by 2^depth = {}", self.edge, self.stride()));
        }
        if self.family == Family::Swin {
            if self.window == 0 || self.head_dim == 0 {
                return bad("swin needs window >= 1 and head_dim >= 1".into());
            }
            for level in 1..=self.depth {
                let g = self.edge >> level;
                let w = self.window.min(g);
                if !g.is_multiple_of(w) {
                    return bad(format!("window {} does not tile the {g}³ token grid", self.window));
                }
            }
        }
        Ok(())
    }
}

/// Parameter initializer writing into one store.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> ParamId {
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, ci: usize, co: usize, k: usize, stride: usize, zero: bool) -> Self {
        let fan_in = ci * k * k * k;
        let shape = [co, ci, k, k, k];
        let w = if zero {
            init.zeros(format!("{name}.w"), &shape)
        } else {
            init.uniform(format!("{name}.w"), &shape, (3.0 / fan_in as f32).sqrt())
        };
        let b = init.zeros(format!("{name}.b"), &[co]);
        Self {
            w,
            b,
            stride,
            pad: if k == 3 { 1 } else { 0 },
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

fn groups_for(c: usize) -> usize {
    (1..=4).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, channels: usize) -> Self {
        Self {
            gamma: init.ones(format!("{name}.gamma"), &[channels]),
            beta: init.zeros(format!("{name}.beta"), &[channels]),
            channels,
            groups: groups_for(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let spatial: usize = shape[2..].iter().product();
        let n = g.normalize_rows(x, self.channels / self.groups * spatial, 1e-5);
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        g.channel_affine(n, Some(gm), Some(bt), self.channels, spatial)
    }
}

/// conv3 -> group norm -> SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, ci: usize, co: usize, stride: usize) -> Self {
        Self {
            conv: Conv::new(init, &format!("{name}.conv"), ci, co, 3, stride, false),
            norm: GroupNorm::new(init, &format!("{name}.norm"), co),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, s, x);
        let y = self.norm.forward(g, s, y);
        g.silu(y)
    }
}

/// Kernel-2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Up {
    pub w: ParamId,
    pub b: ParamId,
}

impl Up {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, ci: usize, co: usize) -> Self {
        Self {
            w: init.uniform(format!("{name}.w"), &[ci, co, 2, 2, 2], (3.0 / ci as f32).sqrt()),
            b: init.zeros(format!("{name}.b"), &[co]),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv_transpose3d_k2s2(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, i: usize, o: usize, bias: bool, zero: bool) -> Self {
        let w = if zero {
            init.zeros(format!("{name}.w"), &[i, o])
        } else {
            init.uniform(format!("{name}.w"), &[i, o], (3.0 / i as f32).sqrt())
        };
        Self {
            w,
            b: bias.then(|| init.zeros(format!("{name}.b"), &[o])),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.opt_param(s, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.ones(format!("{name}.gamma"), &[dim]),
            beta: init.zeros(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let n = g.normalize_rows(x, self.dim, 1e-5);
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        g.channel_affine(n, Some(gm), Some(bt), self.dim, 1)
    }
}

/// Token features `[batch * grid³, dim]`, rows ordered by `(n, z, y, x)`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub tokens: Var,
    pub batch: usize,
    pub grid: usize,
    pub dim: usize,
    /// Voxels per token edge.
    pub stride: usize,
}

impl FeatureMap {
    pub fn tokens_per_sample(&self) -> usize {
        self.grid.pow(3)
    }

    pub fn token_index(&self, z: usize, y: usize, x: usize) -> usize {
        token_index(self.grid, z, y, x)
    }

    pub fn token_coord(&self, i: usize) -> (usize, usize, usize) {
        token_coord(self.grid, i)
    }

    /// `[batch, dim, grid, grid, grid]`.
    pub fn to_volume(&self, g: &mut Graph) -> Var {
        let t = self.tokens_per_sample();
        let idx = tokens_to_volume_index(self.batch, self.dim, t);
        g.gather(self.tokens, Arc::new(idx), &[self.batch, self.dim, self.grid, self.grid, self.grid])
    }

    /// Per-sample mean over tokens, `[batch, dim]`.
    pub fn pooled(&self, g: &mut Graph) -> Var {
        let t = self.tokens_per_sample();
        let r = g.reshape(self.tokens, &[self.batch, t, self.dim]);
        let tr = g.transpose_last2(r);
        let m = g.mean_rows(tr, t);
        g.reshape(m, &[self.batch, self.dim])
    }
}

pub fn token_index(grid: usize, z: usize, y: usize, x: usize) -> usize {
    (z * grid + y) * grid + x
}

pub fn token_coord(grid: usize, i: usize) -> (usize, usize, usize) {
    (i / (grid * grid), (i / grid) % grid, i % grid)
}

fn volume_to_tokens(g: &mut Graph, v: Var) -> (Var, usize, usize) {
    let s = g.shape(v).to_vec();
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let idx = volume_to_tokens_index(n, c, spatial);
    (g.gather(v, Arc::new(idx), &[n * spatial, c]), n, c)
}

fn tokens_to_volume(g: &mut Graph, t: Var, n: usize, c: usize, grid: usize) -> Var {
    let idx = tokens_to_volume_index(n, c, grid.pow(3));
    g.gather(t, Arc::new(idx), &[n, c, grid, grid, grid])
}

pub struct EncoderOutput {
    /// Multi-scale volumes for the decoder; `skips[i]` has width `width(i)`
    /// at resolution `edge / 2^i`.
    pub skips: Vec<Var>,
    pub features: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct ConvEncoder {
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    bottom: ConvBlock,
    tail: Conv,
}

impl ConvEncoder {
    fn new<R: Rng>(init: &mut Init<R>, cfg: &BackboneConfig) -> Self {
        let p = |n: &str| format!("encoder.{n}");
        let stem = ConvBlock::new(init, &p("stem"), cfg.in_channels, cfg.width(0), 1);
        let downs = (1..cfg.depth)
            .map(|i| ConvBlock::new(init, &p(&format!("down{i}")), cfg.width(i - 1), cfg.width(i), 2))
            .collect();
        let bottom = ConvBlock::new(init, &p("bottom"), cfg.width(cfg.depth - 1), cfg.width(cfg.depth), 2);
        let tail = Conv::new(init, &p("tail"), cfg.width(cfg.depth), cfg.feature_dim, 1, 1, cfg.zero_init_tail);
        Self {
            stem,
            downs,
            bottom,
            tail,
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, cfg: &BackboneConfig) -> EncoderOutput {
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = self.stem.forward(g, s, x);
        skips.push(h);
        for d in &self.downs {
            h = d.forward(g, s, h);
            skips.push(h);
        }
        let b = self.bottom.forward(g, s, h);
        let f = self.tail.forward(g, s, b);
        let (tokens, n, _) = volume_to_tokens(g, f);
        EncoderOutput {
            skips,
            features: FeatureMap {
                tokens,
                batch: n,
                grid: cfg.grid(),
                dim: cfg.feature_dim,
                stride: cfg.stride(),
            },
        }
    }
}

#[derive(Clone, Debug)]
struct SwinBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    heads: usize,
    shift: bool,
}

/// Index maps for one (batch, grid, window, shift) attention layout.
struct WindowPlan {
    q: Arc<Vec<u32>>,
    k: Arc<Vec<u32>>,
    v: Arc<Vec<u32>>,
    merge: Arc<Vec<u32>>,
    mask: Option<Tensor>,
    windows: usize,
    win_tokens: usize,
}

fn window_plan(n: usize, grid: usize, win: usize, shift: usize, dim: usize, heads: usize) -> WindowPlan {
    let per = grid / win;
    let wt = win * win * win;
    let windows = n * per * per * per;
    let dh = dim / heads;
    // rows[(b, t)] = original token row for window-ordered slot t of window b
    let mut rows = vec![0usize; windows * wt];
    let mut region = vec![0u8; windows * wt];
    let reg = |q: usize| -> u8 {
        if shift == 0 || q < grid - win {
            0
        } else if q < grid - shift {
            1
        } else {
            2
        }
    };
    for b in 0..n {
        for wz in 0..per {
            for wy in 0..per {
                for wx in 0..per {
                    let w = ((b * per + wz) * per + wy) * per + wx;
                    for iz in 0..win {
                        for iy in 0..win {
                            for ix in 0..win {
                                let t = (iz * win + iy) * win + ix;
                                let q = [wz * win + iz, wy * win + iy, wx * win + ix];
                                let p = [(q[0] + shift) % grid, (q[1] + shift) % grid, (q[2] + shift) % grid];
                                rows[w * wt + t] = b * grid.pow(3) + token_index(grid, p[0], p[1], p[2]);
                                region[w * wt + t] = reg(q[0]) * 9 + reg(q[1]) * 3 + reg(q[2]);
                            }
                        }
                    }
                }
            }
        }
    }
    let gather_part = |part: usize| -> Arc<Vec<u32>> {
        let mut idx = Vec::with_capacity(windows * heads * wt * dh);
        for w in 0..windows {
            for h in 0..heads {
                for t in 0..wt {
                    let base = rows[w * wt + t] * 3 * dim + part * dim + h * dh;
                    idx.extend((base..base + dh).map(|i| i as u32));
                }
            }
        }
        Arc::new(idx)
    };
    let mut merge = vec![0u32; windows * wt * dim];
    for w in 0..windows {
        for t in 0..wt {
            let r = rows[w * wt + t];
            for h in 0..heads {
                for d in 0..dh {
                    merge[r * dim + h * dh + d] = (((w * heads + h) * wt + t) * dh + d) as u32;
                }
            }
        }
    }
    let mask = (shift > 0).then(|| {
        let mut m = vec![0f32; windows * heads * wt * wt];
        for w in 0..windows {
            for h in 0..heads {
                for i in 0..wt {
                    for j in 0..wt {
                        if region[w * wt + i] != region[w * wt + j] {
                            m[((w * heads + h) * wt + i) * wt + j] = -100.0;
                        }
                    }
                }
            }
        }
        Tensor::new(&[windows * heads, wt, wt], m)
    });
    WindowPlan {
        q: gather_part(0),
        k: gather_part(1),
        v: gather_part(2),
        merge: Arc::new(merge),
        mask,
        windows,
        win_tokens: wt,
    }
}

impl SwinBlock {
    fn new<R: Rng>(init: &mut Init<R>, name: &str, dim: usize, heads: usize, shift: bool) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim, true, false),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim, true, false),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, 2 * dim, true, false),
            fc2: Linear::new(init, &format!("{name}.fc2"), 2 * dim, dim, true, false),
            dim,
            heads,
            shift,
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, n: usize, grid: usize, window: usize) -> Var {
        let win = window.min(grid);
        let shift = if self.shift && grid > win { win / 2 } else { 0 };
        let plan = window_plan(n, grid, win, shift, self.dim, self.heads);
        let dh = self.dim / self.heads;
        let bh = plan.windows * self.heads;
        let wt = plan.win_tokens;
        let h = self.norm1.forward(g, s, x);
        let qkv = self.qkv.forward(g, s, h);
        let q = g.gather(qkv, plan.q.clone(), &[bh, wt, dh]);
        let q = g.scale(q, 1.0 / (dh as f32).sqrt());
        let k = g.gather(qkv, plan.k.clone(), &[bh, wt, dh]);
        let v = g.gather(qkv, plan.v.clone(), &[bh, wt, dh]);
        let mut scores = g.bmm(q, k, false, true);
        if let Some(m) = plan.mask {
            let mc = g.constant(m);
            scores = g.add(scores, mc);
        }
        let attn = g.softmax_rows(scores, wt);
        let o = g.bmm(attn, v, false, false);
        let merged = g.gather(o, plan.merge.clone(), &[n * grid.pow(3), self.dim]);
        let o = self.proj.forward(g, s, merged);
        let x = g.add(x, o);
        let h = self.norm2.forward(g, s, x);
        let h = self.fc1.forward(g, s, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, s, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct SwinStage {
    merge: Option<(LayerNorm, Linear)>,
    blocks: Vec<SwinBlock>,
}

fn merge_index(n: usize, grid: usize, c: usize) -> Vec<u32> {
    let h = grid / 2;
    let mut idx = Vec::with_capacity(n * grid.pow(3) * c);
    for b in 0..n {
        for z in 0..h {
            for y in 0..h {
                for x in 0..h {
                    for k in 0..8 {
                        let (dz, dy, dx) = (k >> 2, (k >> 1) & 1, k & 1);
                        let r = b * grid.pow(3) + token_index(grid, 2 * z + dz, 2 * y + dy, 2 * x + dx);
                        idx.extend((r * c..(r + 1) * c).map(|i| i as u32));
                    }
                }
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct SwinEncoder {
    skip0: ConvBlock,
    embed: Conv,
    embed_norm: LayerNorm,
    stages: Vec<SwinStage>,
    out_norm: LayerNorm,
    tail: Linear,
}

impl SwinEncoder {
    fn new<R: Rng>(init: &mut Init<R>, cfg: &BackboneConfig) -> Self {
        let p = |n: &str| format!("encoder.{n}");
        let skip0 = ConvBlock::new(init, &p("skip0"), cfg.in_channels, cfg.width(0), 1);
        let embed = Conv::new(init, &p("embed"), cfg.in_channels, cfg.width(1), 2, 2, false);
        let embed_norm = LayerNorm::new(init, &p("embed_norm"), cfg.width(1));
        let mut stages = Vec::new();
        for level in 1..=cfg.depth {
            let dim = cfg.width(level);
            let merge = (level > 1).then(|| {
                let prev = cfg.width(level - 1);
                (
                    LayerNorm::new(init, &p(&format!("stage{level}.merge_norm")), 8 * prev),
                    Linear::new(init, &p(&format!("stage{level}.merge")), 8 * prev, dim, false, false),
                )
            });
            let heads = (dim / cfg.head_dim).max(1);
            let blocks = (0..2)
                .map(|b| SwinBlock::new(init, &p(&format!("stage{level}.block{b}")), dim, heads, b == 1))
                .collect();
            stages.push(SwinStage { merge, blocks });
        }
        let last = cfg.width(cfg.depth);
        Self {
            skip0,
            embed,
            embed_norm,
            stages,
            out_norm: LayerNorm::new(init, &p("out_norm"), last),
            tail: Linear::new(init, &p("tail"), last, cfg.feature_dim, true, cfg.zero_init_tail),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, cfg: &BackboneConfig) -> EncoderOutput {
        let mut skips = vec![self.skip0.forward(g, s, x)];
        let e = self.embed.forward(g, s, x);
        let (t, n, _) = volume_to_tokens(g, e);
        let mut t = self.embed_norm.forward(g, s, t);
        for (i, stage) in self.stages.iter().enumerate() {
            let level = i + 1;
            let grid = cfg.edge >> level;
            if let Some((norm, lin)) = &stage.merge {
                let prev = cfg.width(level - 1);
                let idx = merge_index(n, grid * 2, prev);
                let m = g.gather(t, Arc::new(idx), &[n * grid.pow(3), 8 * prev]);
                let m = norm.forward(g, s, m);
                t = lin.forward(g, s, m);
            }
            for b in &stage.blocks {
                t = b.forward(g, s, t, n, grid, cfg.window);
            }
            if level < cfg.depth {
                skips.push(tokens_to_volume(g, t, n, cfg.width(level), grid));
            }
        }
        let t = self.out_norm.forward(g, s, t);
        let tokens = self.tail.forward(g, s, t);
        EncoderOutput {
            skips,
            features: FeatureMap {
                tokens,
                batch: n,
                grid: cfg.grid(),
                dim: cfg.feature_dim,
                stride: cfg.stride(),
            },
        }
    }
}

#[derive(Clone, Debug)]
enum EncoderKind {
    Conv(ConvEncoder),
    Swin(SwinEncoder),
}

/// A backbone whose parameters live under `encoder.` in its own store.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: BackboneConfig,
    kind: EncoderKind,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, rng);
        let kind = match cfg.family {
            Family::ConvUnet => EncoderKind::Conv(ConvEncoder::new(&mut init, cfg)),
            Family::Swin => EncoderKind::Swin(SwinEncoder::new(&mut init, cfg)),
        };
        Ok(Self { cfg: cfg.clone(), kind })
    }

    pub fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = g.shape(x);
        let e = self.cfg.edge;
        if s.len() != 5 || s[1] != self.cfg.in_channels || s[2..] != [e, e, e] {
            return Err(Error::InvalidInput(format!(
                "encoder expects [N, {}, {e}, {e}, {e}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        Ok(s[0])
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<EncoderOutput> {
        self.check_input(g, x)?;
        Ok(match &self.kind {
            EncoderKind::Conv(e) => e.forward(g, s, x, &self.cfg),
            EncoderKind::Swin(e) => e.forward(g, s, x, &self.cfg),
        })
    }

    /// Names of weights whose second axis is the input channel count.
    pub fn input_weight_names(&self) -> Vec<&'static str> {
        match self.kind {
            EncoderKind::Conv(_) => vec!["encoder.stem.conv.w"],
            EncoderKind::Swin(_) => vec!["encoder.skip0.conv.w", "encoder.embed.w"],
        }
    }
}

/// Rewrites first-layer weights of `src` (trained with `from` input channels)
/// for `to` channels: average over the source channels, then replicate and
/// divide by `to`, so a replicated single-channel input keeps its response.
pub fn adapt_input_channels(store: &mut ParamStore, names: &[&str], to: usize) -> Result<Vec<String>> {
    let mut changed = Vec::new();
    for &name in names {
        let id = store
            .find(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))?;
        let w = store.get(id);
        let s = w.shape().to_vec();
        let from = s[1];
        if from == to {
            continue;
        }
        let k: usize = s[2..].iter().product();
        let mut out = vec![0f32; s[0] * to * k];
        for o in 0..s[0] {
            for j in 0..k {
                let mean: f32 = (0..from).map(|c| w.data()[(o * from + c) * k + j]).sum::<f32>() / from as f32;
                for c in 0..to {
                    out[(o * to + c) * k + j] = mean * from as f32 / to as f32;
                }
            }
        }
        let mut ns = s.clone();
        ns[1] = to;
        store.replace(id, Tensor::new(&ns, out));
        changed.push(name.to_string());
    }
    Ok(changed)
}

/// UNet decoder over encoder skips; parameters under `prefix`.
#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<Up>,
    blocks: Vec<ConvBlock>,
}

impl Decoder {
    pub fn new<R: Rng>(init: &mut Init<R>, prefix: &str, cfg: &BackboneConfig) -> Self {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for level in (0..cfg.depth).rev() {
            let ci = if level == cfg.depth - 1 { cfg.feature_dim } else { cfg.width(level + 1) };
            let c = cfg.width(level);
            ups.push(Up::new(init, &format!("{prefix}.up{level}"), ci, c));
            blocks.push(ConvBlock::new(init, &format!("{prefix}.block{level}"), 2 * c, c, 1));
        }
        Self { ups, blocks }
    }

    /// `[N, width(0), edge³]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, enc: &EncoderOutput) -> Var {
        let mut h = enc.features.to_volume(g);
        let depth = enc.skips.len();
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let level = depth - 1 - i;
            let u = up.forward(g, s, h);
            let cat = g.concat(&[u, enc.skips[level]], 1);
            h = block.forward(g, s, cat);
        }
        h
    }
}

/// Transposed-conv chain from bottleneck tokens back to voxel space.
#[derive(Clone, Debug)]
pub struct LightDecoder {
    ups: Vec<Up>,
    out: Conv,
}

impl LightDecoder {
    pub fn new<R: Rng>(init: &mut Init<R>, prefix: &str, cfg: &BackboneConfig, out_channels: usize, zero_out: bool) -> Self {
        let mut ups = Vec::new();
        let mut c = cfg.feature_dim;
        for i in 0..cfg.depth {
            let next = (c / 2).max(4);
            ups.push(Up::new(init, &format!("{prefix}.up{i}"), c, next));
            c = next;
        }
        Self {
            ups,
            out: Conv::new(init, &format!("{prefix}.out"), c, out_channels, 1, 1, zero_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, f: &FeatureMap) -> Var {
        let mut h = f.to_volume(g);
        for up in &self.ups {
            h = up.forward(g, s, h);
            h = g.silu(h);
        }
        self.out.forward(g, s, h)
    }
}

/// Pool, MLP, L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new<R: Rng>(init: &mut Init<R>, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{prefix}.fc1"), in_dim, in_dim, true, false),
            fc2: Linear::new(init, &format!("{prefix}.fc2"), in_dim, out_dim, true, false),
            out_dim,
        }
    }

    /// Unnormalized MLP output of a `[B, in]` descriptor.
    pub fn mlp(&self, g: &mut Graph, s: &ParamStore, pooled: Var) -> Var {
        let h = self.fc1.forward(g, s, pooled);
        let h = g.gelu(h);
        self.fc2.forward(g, s, h)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, f: &FeatureMap) -> Var {
        let p = f.pooled(g);
        let z = self.mlp(g, s, p);
        g.l2_normalize_rows(z, self.out_dim, 1e-12)
    }
}

/// Linear map followed by L2 normalization (text side of the shared space).
#[derive(Clone, Debug)]
pub struct TextProjection {
    lin: Linear,
    pub out_dim: usize,
}

impl TextProjection {
    pub fn new<R: Rng>(init: &mut Init<R>, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            lin: Linear::new(init, &format!("{prefix}.lin"), in_dim, out_dim, true, false),
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let z = self.lin.forward(g, s, x);
        g.l2_normalize_rows(z, self.out_dim, 1e-12)
    }
}

/// Global average pool then one linear layer to class logits.
#[derive(Clone, Debug)]
pub struct ClsHead {
    lin: Linear,
    pub classes: usize,
}

impl ClsHead {
    pub fn new<R: Rng>(init: &mut Init<R>, prefix: &str, in_dim: usize, classes: usize) -> Self {
        Self {
            lin: Linear::new(init, &format!("{prefix}.lin"), in_dim, classes, true, false),
            classes,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, f: &FeatureMap) -> Var {
        let p = f.pooled(g);
        self.lin.forward(g, s, p)
    }
}

/// UNet decoder plus a 1x1 output conv; used for segmentation logits and
/// deblurring residuals.
#[derive(Clone, Debug)]
pub struct DenseHead {
    decoder: Decoder,
    out: Conv,
}

impl DenseHead {
    pub fn new<R: Rng>(init: &mut Init<R>, prefix: &str, cfg: &BackboneConfig, out_channels: usize, zero_out: bool) -> Self {
        Self {
            decoder: Decoder::new(init, &format!("{prefix}.decoder"), cfg),
            out: Conv::new(init, &format!("{prefix}.out"), cfg.width(0), out_channels, 1, 1, zero_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, enc: &EncoderOutput) -> Var {
        let h = self.decoder.forward(g, s, enc);
        self.out.forward(g, s, h)
    }
}

/// Stacks records' images into an `[N, C, D, H, W]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a crate::volume_io::Volume>) -> Result<Tensor> {
    let mut shape: Option<[usize; 4]> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for v in images {
        match shape {
            None => shape = Some(v.shape()),
            Some(s) if s != v.shape() => {
                return Err(Error::InvalidInput(format!("batch mixes shapes {s:?} and {:?}", v.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(v.data());
        n += 1;
    }
    let s = shape.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    Ok(Tensor::new(&[n, s[0], s[1], s[2], s[3]], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &BackboneConfig) -> (Encoder, ParamStore) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (Encoder::new(cfg, &mut s, &mut rng).unwrap(), s)
    }

    #[test]
    fn large_arithmetic() {
        let c = BackboneConfig::large(Family::ConvUnet);
        assert_eq!((c.stride(), c.tokens()), (16, 216));
        BackboneConfig::large(Family::Swin).validate().unwrap();
        let mut bad = c.clone();
        bad.edge = 100;
        assert!(bad.validate().is_err());
        let mut s = ParamStore::new();
        assert!(Encoder::new(&bad, &mut s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn shapes_for_both_families() {
        for fam in [Family::ConvUnet, Family::Swin] {
            let cfg = BackboneConfig::micro(fam);
            let (enc, s) = build(&cfg);
            let mut g = Graph::new();
            let x = g.constant(Tensor::uniform(&[2, 1, 32, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
            let out = enc.forward(&mut g, &s, x).unwrap();
            assert_eq!(g.shape(out.features.tokens), &[2 * 64, 32]);
            assert_eq!(out.skips.len(), cfg.depth);
            for (i, &sk) in out.skips.iter().enumerate() {
                let e = 32 >> i;
                assert_eq!(g.shape(sk), &[2, cfg.width(i), e, e, e]);
            }
        }
    }

    #[test]
    fn parameter_counts_within_factor_two() {
        let (_, a) = build(&BackboneConfig::micro(Family::ConvUnet));
        let (_, b) = build(&BackboneConfig::micro(Family::Swin));
        let (na, nb) = (a.num_scalars() as f64, b.num_scalars() as f64);
        assert!(na / nb <= 2.0 && nb / na <= 2.0, "conv {na} swin {nb}");
    }

    #[test]
    fn zero_tail_gives_zero_features_and_decoder_zero_volume() {
        let mut cfg = BackboneConfig::micro(Family::ConvUnet);
        cfg.zero_init_tail = true;
        let (enc, mut s) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = LightDecoder::new(&mut Init::new(&mut s, &mut rng), "rec", &cfg, 1, true);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 32, 32]));
        let out = enc.forward(&mut g, &s, x).unwrap();
        assert!(g.value(out.features.tokens).data().iter().all(|&v| v == 0.0));
        let r = dec.forward(&mut g, &s, &out.features);
        assert_eq!(g.shape(r), &[1, 1, 32, 32, 32]);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_order_permutes_outputs() {
        for fam in [Family::ConvUnet, Family::Swin] {
            let cfg = BackboneConfig::micro(fam);
            let (enc, s) = build(&cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let a = Tensor::uniform(&[1, 1, 32, 32, 32], 1.0, &mut rng);
            let b = Tensor::uniform(&[1, 1, 32, 32, 32], 1.0, &mut rng);
            let run = |first: &Tensor, second: &Tensor| {
                let mut d = first.data().to_vec();
                d.extend_from_slice(second.data());
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(&[2, 1, 32, 32, 32], d));
                let o = enc.forward(&mut g, &s, x).unwrap();
                g.value(o.features.tokens).data().to_vec()
            };
            let ab = run(&a, &b);
            let ba = run(&b, &a);
            let half = ab.len() / 2;
            assert_eq!(&ab[..half], &ba[half..]);
            assert_eq!(&ab[half..], &ba[..half]);
        }
    }

    #[test]
    fn projection_of_constant_map_matches_pooling_oracle() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ProjectionHead::new(&mut Init::new(&mut s, &mut rng), "proj", 4, 3);
        let mut g = Graph::new();
        let row = [0.5f32, -1.0, 2.0, 0.25];
        let tokens = g.constant(Tensor::new(&[8, 4], row.repeat(8)));
        let f = FeatureMap {
            tokens,
            batch: 1,
            grid: 2,
            dim: 4,
            stride: 16,
        };
        let p = head.forward(&mut g, &s, &f);
        let out = g.value(p).data().to_vec();
        let mut g2 = Graph::new();
        let pooled = g2.constant(Tensor::new(&[1, 4], row.to_vec()));
        let z = head.mlp(&mut g2, &s, pooled);
        let z = g2.value(z).data().to_vec();
        let n = z.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, b) in out.iter().zip(&z) {
            assert!((a - b / n).abs() < 1e-6);
        }
        let norm: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn window_plan_is_a_permutation() {
        for shift in [0, 2] {
            let p = window_plan(2, 8, 4, shift, 8, 2);
            let mut m: Vec<u32> = p.merge.to_vec();
            m.sort_unstable();
            assert!(m.iter().enumerate().all(|(i, &v)| i as u32 == v));
            assert_eq!(p.mask.is_some(), shift > 0);
        }
    }

    #[test]
    fn input_channel_adaptation_preserves_replicated_response() {
        let cfg = BackboneConfig::micro(Family::ConvUnet);
        let (enc, mut s) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x1 = Tensor::uniform(&[1, 1, 32, 32, 32], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x1.clone());
        let t = enc.forward(&mut g, &s, xv).unwrap().features.tokens;
        let want = g.value(t).clone();
        adapt_input_channels(&mut s, &enc.input_weight_names(), 2).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.in_channels = 2;
        let enc2 = Encoder {
            cfg: cfg2,
            kind: enc.kind.clone(),
        };
        let mut d = x1.data().to_vec();
        d.extend_from_slice(x1.data());
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[1, 2, 32, 32, 32], d));
        let t = enc2.forward(&mut g, &s, xv).unwrap().features.tokens;
        let got = g.value(t).clone();
        assert!(got.max_abs_diff(&want) < 1e-4);
    }
}
