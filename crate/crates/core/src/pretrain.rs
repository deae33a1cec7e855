//! Masked student-teacher pretraining with optional image-text alignment.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lsmfm_tensor::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::nets::{batch_tensor, BackboneConfig, Encoder, FeatureMap, Init, LightDecoder, ProjectionHead, TextProjection};
use crate::text::{ExternalEmbeddings, HashedNgrams, TextBackbone, TextEncoder, TextEncoderKind};
use crate::volume_io::{PatchRecord, Volume};

pub const CLIP_TEMPERATURE_RANGE: (f32, f32) = (0.01, 1.0);

/// Cubic blocks of a patch chosen for zeroing, as sorted linear indices into
/// the `(edge / block_edge)^3` block grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub edge: usize,
    pub block_edge: usize,
    pub ratio: f64,
    pub blocks: Vec<usize>,
}

impl MaskSpec {
    pub fn per_axis(&self) -> usize {
        self.edge / self.block_edge
    }

    pub fn total_blocks(&self) -> usize {
        self.per_axis().pow(3)
    }

    pub fn block_coord(&self, b: usize) -> [usize; 3] {
        let n = self.per_axis();
        [b / (n * n), (b / n) % n, b % n]
    }

    /// Per-voxel membership (`[edge^3]`, 1 inside masked blocks).
    pub fn voxel_mask(&self) -> Vec<bool> {
        let e = self.edge;
        let mut out = vec![false; e * e * e];
        for &b in &self.blocks {
            let [bz, by, bx] = self.block_coord(b).map(|c| c * self.block_edge);
            for z in bz..bz + self.block_edge {
                for y in by..by + self.block_edge {
                    let row = (z * e + y) * e;
                    out[row + bx..row + bx + self.block_edge].fill(true);
                }
            }
        }
        out
    }

    pub fn masked_voxels(&self) -> usize {
        self.blocks.len() * self.block_edge.pow(3)
    }
}

pub fn generate_mask<R: Rng>(edge: usize, block_edge: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if block_edge == 0 || edge == 0 || !edge.is_multiple_of(block_edge) {
        return Err(invalid(format!("block edge {block_edge} does not divide patch edge {edge}")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let total = (edge / block_edge).pow(3);
    let count = (ratio * total as f64).round() as usize;
    let mut blocks = rand::seq::index::sample(rng, total, count).into_vec();
    blocks.sort_unstable();
    Ok(MaskSpec {
        edge,
        block_edge,
        ratio,
        blocks,
    })
}

/// Zeroes masked blocks in every channel.
pub fn apply_mask(image: &Volume, m: &MaskSpec) -> Result<Volume> {
    if image.spatial() != [m.edge; 3] {
        return Err(invalid(format!("mask for edge {} applied to {:?}", m.edge, image.spatial())));
    }
    let mut out = image.clone();
    let vm = m.voxel_mask();
    for c in 0..out.channels() {
        for (v, &hit) in out.channel_mut(c).iter_mut().zip(&vm) {
            if hit {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Tokens (of edge `stride`) with at least half their voxels masked.
pub fn masked_token_indices(m: &MaskSpec, stride: usize) -> Vec<usize> {
    let grid = m.edge / stride;
    let mut overlap = vec![0usize; grid.pow(3)];
    let span = |b: usize| {
        let lo = b * m.block_edge;
        let hi = lo + m.block_edge;
        (lo / stride..=(hi - 1) / stride).map(move |t| {
            let (tlo, thi) = (t * stride, (t + 1) * stride);
            (t, hi.min(thi) - lo.max(tlo))
        })
    };
    for &b in &m.blocks {
        let [bz, by, bx] = m.block_coord(b);
        for (tz, oz) in span(bz) {
            for (ty, oy) in span(by) {
                for (tx, ox) in span(bx) {
                    overlap[(tz * grid + ty) * grid + tx] += oz * oy * ox;
                }
            }
        }
    }
    let vol = stride.pow(3);
    (0..overlap.len()).filter(|&t| 2 * overlap[t] >= vol).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_dist: f64,
    pub lambda_rec: f64,
    pub lambda_align: f64,
    pub lambda_clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dist: 1.0,
            lambda_rec: 1.0,
            lambda_align: 1.0,
            lambda_clip: 1.0,
        }
    }
}

impl LossWeights {
    pub fn image_only() -> Self {
        Self {
            lambda_align: 0.0,
            lambda_clip: 0.0,
            ..Self::default()
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_dist, self.lambda_rec, self.lambda_align, self.lambda_clip]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in ["lambda_dist", "lambda_rec", "lambda_align", "lambda_clip"]
            .iter()
            .zip(self.as_array())
        {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} = {w} must be a finite non-negative number")));
            }
        }
        Ok(())
    }

    pub fn is_image_only(&self) -> bool {
        self.lambda_align == 0.0 && self.lambda_clip == 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_dist: f64,
    pub l_rec: f64,
    pub l_align: f64,
    pub l_clip: f64,
    pub l_total: f64,
    pub masked_token_count: usize,
}

impl LossReport {
    pub fn parts(&self) -> [f64; 4] {
        [self.l_dist, self.l_rec, self.l_align, self.l_clip]
    }

    fn accumulate(&mut self, o: &LossReport, w: f64) {
        self.l_dist += w * o.l_dist;
        self.l_rec += w * o.l_rec;
        self.l_align += w * o.l_align;
        self.l_clip += w * o.l_clip;
        self.l_total += w * o.l_total;
        self.masked_token_count += o.masked_token_count;
    }
}

/// `Σ λ_i · l_i` in a fixed order.
pub fn total_loss(parts: [f64; 4], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(parts.iter().zip(w.as_array()).map(|(p, w)| w * p).sum())
}

/// Graph form of [`total_loss`] over `(dist, rec, align, clip)` nodes.
/// Absent terms contribute nothing; present zero-weight terms backpropagate zeros.
pub fn total_loss_graph(g: &mut Graph, parts: [Option<Var>; 4], w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let terms: Vec<(Var, f64)> = parts
        .iter()
        .zip(w.as_array())
        .filter_map(|(p, w)| p.map(|v| (v, w)))
        .collect();
    Ok(g.weighted_sum(&terms))
}

/// Mean over `masked` rows of KL(softmax(teacher/τ_t) ‖ softmax(student/τ_s)).
/// `teacher` is `[rows, dim]` and constant.
pub fn loss_dist(g: &mut Graph, student: &FeatureMap, teacher: &Tensor, masked: &[usize], tau_s: f32, tau_t: f32) -> Result<Var> {
    if !(tau_s > 0.0 && tau_t > 0.0) {
        return Err(invalid("distillation temperatures must be positive"));
    }
    let d = student.dim;
    if teacher.shape() != g.shape(student.tokens) {
        return Err(invalid(format!(
            "teacher tokens {:?} differ from student {:?}",
            teacher.shape(),
            g.shape(student.tokens)
        )));
    }
    if masked.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let m = masked.len();
    let mut p = Vec::with_capacity(m * d);
    let mut plogp = 0f64;
    for &r in masked {
        let row = &teacher.data()[r * d..(r + 1) * d];
        let z: Vec<f64> = row.iter().map(|&v| v as f64 / tau_t as f64).collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in z {
            let lp = v - lse;
            let pv = lp.exp();
            plogp += pv * lp;
            p.push(pv as f32);
        }
    }
    let rows = g.gather_rows(student.tokens, masked, d);
    let scaled = g.scale(rows, 1.0 / tau_s);
    let logq = g.log_softmax_rows(scaled, d);
    let pc = g.constant(Tensor::new(&[m, d], p));
    let cross = g.mul(pc, logq);
    let s = g.sum(cross);
    let neg = g.scale(s, -1.0 / m as f32);
    Ok(g.add_scalar(neg, (plogp / m as f64) as f32))
}

/// Mean absolute error over voxels where `weight` is 1.
pub fn loss_rec(g: &mut Graph, recon: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
    if g.shape(recon) != target.shape() || target.shape() != weight.shape() {
        return Err(invalid(format!(
            "reconstruction {:?}, target {:?} and weight {:?} must match",
            g.shape(recon),
            target.shape(),
            weight.shape()
        )));
    }
    let count = weight.data().iter().filter(|&&w| w != 0.0).count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = g.constant(target.clone());
    let w = g.constant(weight.clone());
    let diff = g.sub(recon, t);
    let a = g.abs(diff);
    let masked = g.mul(a, w);
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / count as f32))
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(invalid(format!("{what} embeddings must be [B, D], got {s:?}")));
    }
    let (b, d) = (s[0], s[1]);
    for (i, row) in g.value(v).data().chunks(d).enumerate() {
        let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(invalid(format!("{what} embedding {i} has norm {n}")));
        }
    }
    Ok((b, d))
}

/// Mean of `1 - cos(img_i, txt_i)` over the batch.
pub fn loss_align(g: &mut Graph, img: Var, txt: Var) -> Result<Var> {
    let (b, d) = check_unit_rows(g, img, "image")?;
    if check_unit_rows(g, txt, "text")? != (b, d) {
        return Err(invalid("image and text batches differ in shape"));
    }
    let prod = g.mul(img, txt);
    let cos = g.sum_rows(prod, d);
    let mean = g.mean(cos);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Symmetric cross-entropy of `img · txtᵀ / τ` against the identity pairing.
pub fn loss_clip(g: &mut Graph, img: Var, txt: Var, temperature: Var) -> Result<Var> {
    let (b, d) = check_unit_rows(g, img, "image")?;
    if check_unit_rows(g, txt, "text")? != (b, d) {
        return Err(invalid("image and text batches differ in shape"));
    }
    if b < 2 {
        return Err(invalid("contrastive loss needs a batch of at least 2"));
    }
    let t = g.scalar(temperature);
    if !(t > 0.0) {
        return Err(invalid(format!("temperature {t} must be positive")));
    }
    let i3 = g.reshape(img, &[1, b, d]);
    let t3 = g.reshape(txt, &[1, b, d]);
    let sim = g.bmm(i3, t3, false, true);
    let sim = g.reshape(sim, &[b, b]);
    let tc = g.clamp(temperature, CLIP_TEMPERATURE_RANGE.0, CLIP_TEMPERATURE_RANGE.1);
    let inv = g.recip(tc);
    let logits = g.mul_scalar_var(sim, inv);
    let diag = Arc::new((0..b).map(|i| (i * b + i) as u32).collect::<Vec<_>>());
    let rows = g.log_softmax_rows(logits, b);
    let rd = g.gather(rows, diag.clone(), &[b]);
    let rm = g.mean(rd);
    let lt = g.transpose_last2(logits);
    let cols = g.log_softmax_rows(lt, b);
    let cd = g.gather(cols, diag, &[b]);
    let cm = g.mean(cd);
    Ok(g.weighted_sum(&[(rm, -0.5), (cm, -0.5)]))
}

/// `teacher ← m · teacher + (1 − m) · student`, outside any graph.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(invalid(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(invalid("teacher and student parameter layouts differ"));
    }
    let m = momentum as f64;
    for id in student.ids().collect::<Vec<_>>() {
        let s = student.get(id).data();
        for (t, &sv) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = (m * *t as f64 + (1.0 - m) * sv as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub overtrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub mask_ratio: f64,
    pub block_edges: Vec<usize>,
    pub tau_student: f32,
    pub tau_teacher: f32,
    pub ema_momentum: f32,
    pub weights: LossWeights,
    pub image_only: bool,
    pub shared_dim: usize,
    pub text_dim: usize,
    pub text_encoder: TextEncoderKind,
    pub text_embeddings: Option<PathBuf>,
    pub text_warmup_fraction: f64,
    pub clip_temperature: f32,
    pub val_fraction: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::micro(crate::nets::Family::ConvUnet),
            epochs: 20,
            overtrain_epochs: 0,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            mask_ratio: 0.6,
            block_edges: vec![4, 8],
            tau_student: 0.1,
            tau_teacher: 0.04,
            ema_momentum: 0.996,
            weights: LossWeights::default(),
            image_only: false,
            shared_dim: 128,
            text_dim: 256,
            text_encoder: TextEncoderKind::Fallback,
            text_embeddings: None,
            text_warmup_fraction: 0.1,
            clip_temperature: 0.07,
            val_fraction: 0.1,
            augment: AugmentConfig::pretrain(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return cfg("batch_size must be positive".into());
        }
        if self.block_edges.is_empty() || self.block_edges.iter().any(|&b| b == 0 || !self.backbone.edge.is_multiple_of(b)) {
            return cfg(format!("block edges {:?} must divide edge {}", self.block_edges, self.backbone.edge));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return cfg(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return cfg(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return cfg("distillation temperatures must be positive".into());
        }
        let (lo, hi) = CLIP_TEMPERATURE_RANGE;
        if !(lo..=hi).contains(&self.clip_temperature) {
            return cfg(format!("clip_temperature must lie in [{lo}, {hi}]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return cfg(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.text_warmup_fraction) {
            return cfg("text_warmup_fraction outside [0, 1]".into());
        }
        if self.text_encoder == TextEncoderKind::External && self.text_embeddings.is_none() {
            return cfg("external text encoder needs text_embeddings".into());
        }
        Ok(())
    }

    pub fn text_mode(&self) -> bool {
        !self.image_only
    }

    /// Epochs during which the text tail stays frozen.
    pub fn text_warmup_epochs(&self) -> usize {
        (self.text_warmup_fraction * self.epochs as f64).ceil() as usize
    }
}

/// Student encoder, EMA teacher, pretraining heads and text tail, each in
/// its own parameter store.
pub struct PretrainModel {
    pub cfg: PretrainConfig,
    pub encoder: Encoder,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub heads: ParamStore,
    pub text_store: ParamStore,
    pub decoder: LightDecoder,
    pub image_proj: ProjectionHead,
    pub text_proj: TextProjection,
    pub temperature: ParamId,
    pub text: TextEncoder,
    pub optim: AdamW,
}

pub struct StepOutput {
    pub report: LossReport,
    pub student_grads: Vec<Option<Tensor>>,
}

impl PretrainModel {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut student = ParamStore::new();
        let encoder = Encoder::new(&cfg.backbone, &mut student, &mut rng)?;
        let mut heads = ParamStore::new();
        let (decoder, image_proj, text_proj) = {
            let mut init = Init::new(&mut heads, &mut rng);
            let f = cfg.backbone.feature_dim;
            (
                LightDecoder::new(&mut init, "decoder", &cfg.backbone, cfg.backbone.in_channels, false),
                ProjectionHead::new(&mut init, "image_proj", f, cfg.shared_dim),
                TextProjection::new(&mut init, "text_proj", cfg.text_dim, cfg.shared_dim),
            )
        };
        let temperature = heads.add("clip.temperature", Tensor::scalar(cfg.clip_temperature));
        let mut text_store = ParamStore::new();
        let backbone: Arc<dyn TextBackbone> = match cfg.text_encoder {
            TextEncoderKind::Fallback => Arc::new(HashedNgrams::new(
                HashedNgrams::DEFAULT_BUCKETS,
                cfg.text_dim,
                HashedNgrams::DEFAULT_SEED,
            )),
            TextEncoderKind::External => {
                let path = cfg.text_embeddings.as_deref().expect("validated");
                Arc::new(ExternalEmbeddings::load(path)?)
            }
        };
        let text = TextEncoder::new(backbone, cfg.text_dim, &mut text_store);
        let mut teacher = student.clone();
        teacher.set_all_frozen(true);
        let mut optim = AdamW::new(AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        optim.add_group("student", &student);
        optim.add_group("heads", &heads);
        optim.add_group("text", &text_store);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            student,
            teacher,
            heads,
            text_store,
            decoder,
            image_proj,
            text_proj,
            temperature,
            text,
            optim,
        })
    }

    fn tokens_per_sample(&self) -> usize {
        self.cfg.backbone.tokens()
    }

    /// Teacher features of the unmasked batch, computed in a separate graph.
    pub fn teacher_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.encoder.forward(&mut g, &self.teacher, xv)?;
        Ok(g.value(out.features.tokens).clone())
    }

    /// Builds the four losses for one batch; `masks` has one entry per sample.
    pub fn losses(
        &self,
        g: &mut Graph,
        images: &[&Volume],
        captions: Option<&[&str]>,
        masks: &[MaskSpec],
    ) -> Result<([Option<Var>; 4], usize)> {
        let n = images.len();
        if n == 0 || masks.len() != n {
            return Err(invalid("batch and mask counts differ or batch is empty"));
        }
        let x = batch_tensor(images.iter().copied())?;
        let masked_imgs: Vec<Volume> = images
            .iter()
            .zip(masks)
            .map(|(v, m)| apply_mask(v, m))
            .collect::<Result<_>>()?;
        let xm = batch_tensor(masked_imgs.iter())?;
        let teacher = self.teacher_tokens(&x)?;

        let t = self.tokens_per_sample();
        let stride = self.cfg.backbone.stride();
        let mut rows = Vec::new();
        let mut weight = Vec::with_capacity(x.len());
        let c = self.cfg.backbone.in_channels;
        for (b, m) in masks.iter().enumerate() {
            rows.extend(masked_token_indices(m, stride).into_iter().map(|i| b * t + i));
            let vm = m.voxel_mask();
            for _ in 0..c {
                weight.extend(vm.iter().map(|&h| h as u8 as f32));
            }
        }
        let weight = Tensor::new(x.shape(), weight);

        let xv = g.constant(xm);
        let out = self.encoder.forward(g, &self.student, xv)?;
        let f = &out.features;
        let dist = loss_dist(g, f, &teacher, &rows, self.cfg.tau_student, self.cfg.tau_teacher)?;
        let recon = self.decoder.forward(g, &self.heads, f);
        let rec = loss_rec(g, recon, &x, &weight)?;
        let (align, clip) = match captions {
            Some(caps) => {
                if caps.len() != n {
                    return Err(invalid("caption count differs from batch"));
                }
                let img = self.image_proj.forward(g, &self.heads, f);
                let tf = self.text.forward(g, &self.text_store, caps)?;
                let txt = self.text_proj.forward(g, &self.heads, tf);
                let tau = g.param(&self.heads, self.temperature);
                (Some(loss_align(g, img, txt)?), Some(loss_clip(g, img, txt, tau)?))
            }
            None => (None, None),
        };
        Ok(([Some(dist), Some(rec), align, clip], rows.len()))
    }

    fn report(g: &Graph, parts: &[Option<Var>; 4], total: Var, masked: usize) -> LossReport {
        let v = |p: Option<Var>| p.map_or(0.0, |v| g.scalar(v));
        LossReport {
            l_dist: v(parts[0]),
            l_rec: v(parts[1]),
            l_align: v(parts[2]),
            l_clip: v(parts[3]),
            l_total: g.scalar(total),
            masked_token_count: masked,
        }
    }

    /// One optimization step followed by the EMA update.
    pub fn train_step(
        &mut self,
        images: &[&Volume],
        captions: Option<&[&str]>,
        masks: &[MaskSpec],
        lr: f32,
    ) -> Result<StepOutput> {
        let mut g = Graph::new();
        let (parts, masked) = self.losses(&mut g, images, captions, masks)?;
        let total = total_loss_graph(&mut g, parts, &self.cfg.weights)?;
        let report = Self::report(&g, &parts, total, masked);
        if !report.l_total.is_finite() {
            return Err(invalid(format!("non-finite pretraining loss {report:?}")));
        }
        g.backward(total);
        let sg = g.param_grads(&self.student);
        let hg = g.param_grads(&self.heads);
        let tg = g.param_grads(&self.text_store);
        self.optim.step("student", &mut self.student, &sg, lr);
        self.optim.step("heads", &mut self.heads, &hg, lr);
        self.optim.step("text", &mut self.text_store, &tg, lr);
        let (lo, hi) = CLIP_TEMPERATURE_RANGE;
        let tau = self.heads.get_mut(self.temperature);
        tau.data_mut()[0] = tau.data()[0].clamp(lo, hi);
        ema_update(&mut self.teacher, &self.student, self.cfg.ema_momentum)?;
        Ok(StepOutput {
            report,
            student_grads: sg,
        })
    }

    pub fn eval_batch(&self, images: &[&Volume], captions: Option<&[&str]>, masks: &[MaskSpec]) -> Result<LossReport> {
        let mut g = Graph::new();
        let (parts, masked) = self.losses(&mut g, images, captions, masks)?;
        let total = total_loss_graph(&mut g, parts, &self.cfg.weights)?;
        Ok(Self::report(&g, &parts, total, masked))
    }

    /// Normalized image projections of unmasked inputs, `[N, shared_dim]`.
    pub fn image_embeddings(&self, images: &[&Volume]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(images.iter().copied())?);
        let out = self.encoder.forward(&mut g, &self.student, x)?;
        let p = self.image_proj.forward(&mut g, &self.heads, &out.features);
        Ok(g.value(p).clone())
    }

    pub fn to_checkpoint(&self, epoch: usize, history: &[EpochLog]) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("pretrain", config_hash(&self.cfg), epoch);
        c.manifest.meta = serde_json::to_value(&self.cfg)?;
        c.manifest.history = history.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?;
        c.add_store("student", &self.student);
        c.add_store("teacher", &self.teacher);
        c.add_store("heads", &self.heads);
        c.add_store("text", &self.text_store);
        c.add_tensors("optim", self.optim.state());
        Ok(c)
    }

    /// Rebuilds a model from a pretraining checkpoint, including optimizer state.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.manifest.kind != "pretrain" {
            return Err(invalid(format!("checkpoint kind `{}` is not pretrain", c.manifest.kind)));
        }
        let cfg: PretrainConfig = serde_json::from_value(c.manifest.meta.clone())?;
        let mut m = Self::new(&cfg)?;
        c.load_into("student", &mut m.student, "")?;
        c.load_into("teacher", &mut m.teacher, "")?;
        c.load_into("heads", &mut m.heads, "")?;
        c.load_into("text", &mut m.text_store, "")?;
        m.optim.load_state(&c.section("optim").into_iter().collect());
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub overtrain: bool,
    pub train: LossReport,
    pub val: LossReport,
    /// Mean over embedding dimensions of the across-sample std of image projections.
    pub proj_std: f64,
    pub text_trainable: bool,
}

pub struct PretrainOutput {
    pub model: PretrainModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_path: Option<PathBuf>,
    pub last_path: Option<PathBuf>,
}

/// Splits multichannel records into single-channel ones sharing the caption.
pub fn split_channels(records: &[PatchRecord]) -> Vec<PatchRecord> {
    let mut out = Vec::new();
    for r in records {
        if r.image.channels() == 1 {
            out.push(r.clone());
            continue;
        }
        for c in 0..r.image.channels() {
            let mut p = r.clone();
            p.image = r.image.select_channel(c);
            p.source_id = format!("{}#c{c}", r.source_id);
            out.push(p);
        }
    }
    out
}

/// Deterministic train/validation partition of `n` items.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1e_7000));
    if n < 2 || val_fraction <= 0.0 {
        return (idx.clone(), idx);
    }
    let nv = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx[..nv].to_vec();
    (idx[nv..].to_vec(), val)
}

/// Groups indices into batches, folding a trailing singleton into the previous batch.
pub fn make_batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn batch_std(emb: &Tensor) -> f64 {
    let (n, d) = (emb.shape()[0], emb.shape()[1]);
    if n < 2 {
        return 0.0;
    }
    let x = emb.data();
    let mut acc = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j] as f64).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        acc += var.sqrt();
    }
    acc / d as f64
}

pub const PROBE_SIZE: usize = 8;

/// Runs pretraining; writes `pretrain_best.ckpt` and `pretrain_last.ckpt`
/// into `out_dir` when one is given.
pub fn pretrain_loop(records: &[PatchRecord], cfg: &PretrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutput> {
    cfg.validate()?;
    let data = split_channels(records);
    if data.is_empty() {
        return Err(invalid("pretraining dataset is empty"));
    }
    let edge = cfg.backbone.edge;
    for r in &data {
        if r.image.spatial() != [edge; 3] {
            return Err(invalid(format!("{}: patch {:?} differs from edge {edge}", r.source_id, r.image.spatial())));
        }
        if cfg.text_mode() && r.caption.is_none() {
            return Err(invalid(format!("{}: caption missing in text mode", r.source_id)));
        }
    }
    let mut model = PretrainModel::new(cfg)?;
    let (train, val) = train_val_split(data.len(), cfg.val_fraction, cfg.seed);
    if cfg.text_mode() && train.len() < 2 {
        return Err(invalid("text mode needs at least two training patches"));
    }
    let mut probe = val.clone();
    probe.extend(train.iter().copied().filter(|i| !val.contains(i)).take(PROBE_SIZE.saturating_sub(val.len())));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let val_masks: Vec<MaskSpec> = {
        let mut vr = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba1_1d00);
        val.iter()
            .map(|_| {
                let be = cfg.block_edges[vr.gen_range(0..cfg.block_edges.len())];
                generate_mask(edge, be, cfg.mask_ratio, &mut vr)
            })
            .collect::<Result<_>>()?
    };

    let warm = cfg.text_warmup_epochs();
    let total_epochs = cfg.epochs + cfg.overtrain_epochs;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    let (mut best_path, mut last_path) = (None, None);
    for epoch in 1..=total_epochs {
        let text_trainable = cfg.text_mode() && epoch > warm;
        TextEncoder::set_trainable(&mut model.text_store, text_trainable);
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut train_rep = LossReport::default();
        let batches = make_batches(&order, cfg.batch_size);
        for b in &batches {
            let aug: Vec<PatchRecord> = b.iter().map(|&i| augment(&data[i], &cfg.augment, &mut rng)).collect();
            let be = cfg.block_edges[rng.gen_range(0..cfg.block_edges.len())];
            let masks: Vec<MaskSpec> = aug
                .iter()
                .map(|_| generate_mask(edge, be, cfg.mask_ratio, &mut rng))
                .collect::<Result<_>>()?;
            let imgs: Vec<&Volume> = aug.iter().map(|r| &r.image).collect();
            let caps: Option<Vec<&str>> = cfg
                .text_mode()
                .then(|| aug.iter().map(|r| r.caption.as_deref().expect("checked")).collect());
            let out = model.train_step(&imgs, caps.as_deref(), &masks, cfg.lr)?;
            train_rep.accumulate(&out.report, 1.0 / batches.len() as f64);
        }
        let mut val_rep = LossReport::default();
        let vb = make_batches(&(0..val.len()).collect::<Vec<_>>(), cfg.batch_size);
        for b in &vb {
            let imgs: Vec<&Volume> = b.iter().map(|&k| &data[val[k]].image).collect();
            let caps: Option<Vec<&str>> = (cfg.text_mode() && b.len() >= 2)
                .then(|| b.iter().map(|&k| data[val[k]].caption.as_deref().expect("checked")).collect());
            let masks: Vec<MaskSpec> = b.iter().map(|&k| val_masks[k].clone()).collect();
            let rep = model.eval_batch(&imgs, caps.as_deref(), &masks)?;
            val_rep.accumulate(&rep, 1.0 / vb.len() as f64);
        }
        let probe_imgs: Vec<&Volume> = probe.iter().map(|&i| &data[i].image).collect();
        let proj_std = batch_std(&model.image_embeddings(&probe_imgs)?);
        let log = EpochLog {
            epoch,
            overtrain: epoch > cfg.epochs,
            train: train_rep,
            val: val_rep,
            proj_std,
            text_trainable,
        };
        log::info!(
            "pretrain epoch {epoch}/{total_epochs}: train {:.5} val {:.5} (dist {:.4} rec {:.4} align {:.4} clip {:.4}) proj_std {:.4}",
            train_rep.l_total,
            val_rep.l_total,
            val_rep.l_dist,
            val_rep.l_rec,
            val_rep.l_align,
            val_rep.l_clip,
            proj_std
        );
        history.push(log);
        if let Some(dir) = out_dir {
            if val_rep.l_total < best.0 {
                let p = dir.join("pretrain_best.ckpt");
                model.to_checkpoint(epoch, &history)?.write(&p)?;
                best_path = Some(p);
            }
            if epoch == cfg.epochs && cfg.overtrain_epochs > 0 {
                model.to_checkpoint(epoch, &history)?.write(&dir.join("pretrain_converged.ckpt"))?;
            }
        }
        if val_rep.l_total < best.0 {
            best = (val_rep.l_total, epoch);
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("pretrain_last.ckpt");
        model.to_checkpoint(total_epochs, &history)?.write(&p)?;
        last_path = Some(p);
    }
    Ok(PretrainOutput {
        model,
        history,
        best_epoch: best.1,
        best_path,
        last_path,
    })
}
