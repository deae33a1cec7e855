//! Segmentation, classification and deblurring adapters on top of a
//! pretrained (or randomly initialized) encoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lsmfm_tensor::{gaussian_kernel, AdamW, AdamWConfig, Border, Graph, ParamStore, Tensor, Unary, Var};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::metrics::{self, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::nets::{adapt_input_channels, batch_tensor, BackboneConfig, ClsHead, DenseHead, Encoder, Family, Init};
use crate::pretrain::{make_batches, PretrainConfig};
use crate::volume_io::{Mask, PatchRecord, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSchedule {
    pub max_epochs: usize,
    /// Fraction of `max_epochs` with the encoder frozen (rounded up).
    pub warmup_fraction: f64,
    pub encoder_lr_scale: f32,
    pub head_lr: f32,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            warmup_fraction: 0.1,
            encoder_lr_scale: 0.1,
            head_lr: 1e-3,
            patience: 20,
            batch_size: 2,
            weight_decay: 0.01,
        }
    }
}

impl FinetuneSchedule {
    pub fn warmup_epochs(&self) -> usize {
        (self.warmup_fraction * self.max_epochs as f64).ceil() as usize
    }

    pub fn encoder_lr(&self) -> f32 {
        self.encoder_lr_scale * self.head_lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(self.encoder_lr_scale > 0.0 && self.encoder_lr_scale <= 1.0) {
            return Err(Error::Config("encoder_lr_scale must lie in (0, 1]".into()));
        }
        if !(self.head_lr > 0.0) {
            return Err(Error::Config("head_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeblurLossWeights {
    pub w_l1: f64,
    pub w_ssim: f64,
    pub w_edge: f64,
    pub w_hf: f64,
}

impl Default for DeblurLossWeights {
    fn default() -> Self {
        Self {
            w_l1: 1.0,
            w_ssim: 1.0,
            w_edge: 1.0,
            w_hf: 1.0,
        }
    }
}

impl DeblurLossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.w_l1, self.w_ssim, self.w_edge, self.w_hf]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("deblur loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub backbone: BackboneConfig,
    pub schedule: FinetuneSchedule,
    pub augment: AugmentConfig,
    pub threshold: f32,
    pub focal_gamma: f32,
    pub dice_smooth: f32,
    pub deblur_weights: DeblurLossWeights,
    pub hf_sigma: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::micro(Family::ConvUnet),
            schedule: FinetuneSchedule::default(),
            augment: AugmentConfig::finetune(),
            threshold: 0.5,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            deblur_weights: DeblurLossWeights::default(),
            hf_sigma: 2.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        self.deblur_weights.validate()?;
        if !(self.hf_sigma > 0.0) {
            return Err(Error::Config("hf_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segment,
    Classify { classes: Vec<String> },
    Deblur,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Segment => "segment",
            Task::Classify { .. } => "classify",
            Task::Deblur => "deblur",
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Dense(DenseHead),
    Cls(ClsHead),
}

/// Encoder plus task head, each in its own store.
pub struct TaskModel {
    pub task: Task,
    pub cfg: FinetuneConfig,
    pub encoder: Encoder,
    pub enc_store: ParamStore,
    pub head_store: ParamStore,
    head: Head,
    pub optim: AdamW,
    /// Parameters rewritten for a different input channel count.
    pub adapted: Vec<String>,
    pub pretrained: bool,
}

fn arch_matches(a: &BackboneConfig, b: &BackboneConfig) -> bool {
    (a.family, a.base_width, a.depth, a.window, a.feature_dim, a.edge, a.head_dim, a.zero_init_tail)
        == (b.family, b.base_width, b.depth, b.window, b.feature_dim, b.edge, b.head_dim, b.zero_init_tail)
}

/// Copies the student encoder of a pretraining checkpoint into `store`,
/// adapting first-layer weights when the channel count differs.
pub fn load_pretrained_encoder(ckpt: &Checkpoint, cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Vec<String>> {
    if ckpt.manifest.kind != "pretrain" {
        return Err(invalid(format!("expected a pretraining checkpoint, got `{}`", ckpt.manifest.kind)));
    }
    let pcfg: PretrainConfig = serde_json::from_value(ckpt.manifest.meta.clone())?;
    if !arch_matches(&pcfg.backbone, cfg) {
        return Err(invalid(format!(
            "checkpoint backbone {:?} does not match requested {:?}",
            pcfg.backbone, cfg
        )));
    }
    if pcfg.backbone.in_channels == cfg.in_channels {
        ckpt.load_into("student", store, "encoder.")?;
        return Ok(Vec::new());
    }
    let mut tmp = ParamStore::new();
    let enc = Encoder::new(&pcfg.backbone, &mut tmp, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_into("student", &mut tmp, "encoder.")?;
    let changed = adapt_input_channels(&mut tmp, &enc.input_weight_names(), cfg.in_channels)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = tmp
            .find(&name)
            .ok_or_else(|| invalid(format!("adapted encoder lacks {name}")))?;
        store.set(id, tmp.get(src).clone());
    }
    log::warn!(
        "input channels adapted from {} to {} for {:?}",
        pcfg.backbone.in_channels,
        cfg.in_channels,
        changed
    );
    Ok(changed)
}

impl TaskModel {
    /// `init = None` trains from scratch; otherwise the encoder is loaded
    /// from a pretraining checkpoint. Both paths consume the same RNG draws.
    pub fn new(task: Task, cfg: &FinetuneConfig, in_channels: usize, init: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.backbone.in_channels = in_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut enc_store = ParamStore::new();
        let encoder = Encoder::new(&cfg.backbone, &mut enc_store, &mut rng)?;
        let mut head_store = ParamStore::new();
        let head = {
            let mut ini = Init::new(&mut head_store, &mut rng);
            match &task {
                Task::Segment => Head::Dense(DenseHead::new(&mut ini, "seg", &cfg.backbone, 1, false)),
                Task::Deblur => Head::Dense(DenseHead::new(&mut ini, "deblur", &cfg.backbone, in_channels, true)),
                Task::Classify { classes } => {
                    if classes.len() < 2 {
                        return Err(invalid("classification needs at least two classes"));
                    }
                    Head::Cls(ClsHead::new(&mut ini, "cls", cfg.backbone.feature_dim, classes.len()))
                }
            }
        };
        let adapted = match init {
            Some(c) => load_pretrained_encoder(c, &cfg.backbone, &mut enc_store)?,
            None => Vec::new(),
        };
        log::info!(
            "{} model: init={} backbone={:?}",
            task.name(),
            if init.is_some() { "pretrained" } else { "scratch" },
            cfg.backbone
        );
        let mut optim = AdamW::new(AdamWConfig {
            weight_decay: cfg.schedule.weight_decay,
            ..AdamWConfig::default()
        });
        optim.add_group("encoder", &enc_store);
        optim.add_group("head", &head_store);
        Ok(Self {
            task,
            cfg,
            encoder,
            enc_store,
            head_store,
            head,
            optim,
            adapted,
            pretrained: init.is_some(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.cfg.backbone.in_channels
    }

    /// Segmentation logits `[N,1,D,H,W]`, deblur residual `[N,C,D,H,W]` or class logits `[N,K]`.
    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Var> {
        let xv = g.constant(x);
        let out = self.encoder.forward(g, &self.enc_store, xv)?;
        Ok(match &self.head {
            Head::Dense(h) => {
                let y = h.forward(g, &self.head_store, &out);
                let e = self.cfg.backbone.edge;
                let c = g.shape(y)[1];
                g.reshape(y, &[out.features.batch, c, e, e, e])
            }
            Head::Cls(h) => h.forward(g, &self.head_store, &out.features),
        })
    }

    /// Restored `[N,C,D,H,W]` node: `clamp(blurred + residual, 0, 1)`.
    pub fn restore_graph(&self, g: &mut Graph, blurred: &Tensor) -> Result<Var> {
        let r = self.forward(g, blurred.clone())?;
        let b = g.constant(blurred.clone());
        let s = g.add(b, r);
        Ok(g.unary(s, Unary::Clamp(0.0, 1.0)))
    }

    fn check_images(&self, images: &[&Volume]) -> Result<()> {
        let e = self.cfg.backbone.edge;
        for v in images {
            if v.shape() != [self.in_channels(), e, e, e] {
                return Err(invalid(format!(
                    "model expects [{}, {e}, {e}, {e}] inputs, got {:?}",
                    self.in_channels(),
                    v.shape()
                )));
            }
        }
        Ok(())
    }

    /// Foreground probabilities per patch.
    pub fn predict_probs(&self, images: &[&Volume]) -> Result<Vec<Vec<f32>>> {
        self.check_images(images)?;
        images
            .iter()
            .map(|v| {
                let mut g = Graph::new();
                let y = self.forward(&mut g, batch_tensor([*v])?)?;
                let p = g.sigmoid(y);
                Ok(g.value(p).data().to_vec())
            })
            .collect()
    }

    pub fn predict_masks(&self, images: &[&Volume]) -> Result<Vec<Mask>> {
        let e = self.cfg.backbone.edge;
        self.predict_probs(images)?
            .into_iter()
            .map(|p| Mask::from_threshold([e; 3], &p, self.cfg.threshold))
            .collect()
    }

    pub fn predict_classes(&self, images: &[&Volume]) -> Result<Vec<usize>> {
        self.check_images(images)?;
        images
            .iter()
            .map(|v| {
                let mut g = Graph::new();
                let y = self.forward(&mut g, batch_tensor([*v])?)?;
                let d = g.value(y).data();
                let mut best = 0;
                for (i, &z) in d.iter().enumerate() {
                    if z > d[best] {
                        best = i;
                    }
                }
                Ok(best)
            })
            .collect()
    }

    pub fn restore(&self, blurred: &[&Volume]) -> Result<Vec<Volume>> {
        self.check_images(blurred)?;
        blurred
            .iter()
            .map(|v| {
                let mut g = Graph::new();
                let y = self.restore_graph(&mut g, &batch_tensor([*v])?)?;
                Volume::new(v.shape(), g.value(y).data().to_vec(), v.spacing(), v.channel_names().to_vec())
            })
            .collect()
    }

    pub fn to_checkpoint(&self, epoch: usize, history: &[FinetuneEpoch]) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.task.name(), config_hash(&self.cfg), epoch);
        c.manifest.meta = serde_json::json!({
            "task": self.task,
            "config": self.cfg,
            "pretrained": self.pretrained,
            "adapted": self.adapted,
        });
        c.manifest.history = history.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?;
        c.add_store("encoder", &self.enc_store);
        c.add_store("head", &self.head_store);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = &c.manifest.meta;
        let task: Task = serde_json::from_value(meta["task"].clone())?;
        let cfg: FinetuneConfig = serde_json::from_value(meta["config"].clone())?;
        let mut m = Self::new(task, &cfg, cfg.backbone.in_channels, None)?;
        c.load_into("encoder", &mut m.enc_store, "")?;
        c.load_into("head", &mut m.head_store, "")?;
        m.pretrained = meta["pretrained"].as_bool().unwrap_or(false);
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub encoder_frozen: bool,
}

pub struct FinetuneOutput {
    pub model: TaskModel,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Shared loop: freeze warmup, AdamW on both groups, early stopping with
/// best-state restore. `higher` selects the direction of `validate`.
fn run_schedule<L, V>(mut model: TaskModel, n_train: usize, higher: bool, mut batch_loss: L, mut validate: V) -> Result<FinetuneOutput>
where
    L: FnMut(&TaskModel, &mut Graph, &[usize], &mut ChaCha8Rng) -> Result<Var>,
    V: FnMut(&TaskModel) -> Result<f64>,
{
    let sched = model.cfg.schedule.clone();
    let warm = sched.warmup_epochs();
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed.wrapping_add(17));
    let mut history = Vec::new();
    let better = |a: f64, b: f64| if higher { a > b } else { a < b };
    let mut best = (if higher { f64::NEG_INFINITY } else { f64::INFINITY }, 0usize);
    let mut best_state = (model.enc_store.clone(), model.head_store.clone());
    let mut since = 0;
    let order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=sched.max_epochs {
        let frozen = epoch <= warm;
        model.enc_store.set_all_frozen(frozen);
        let mut o = order.clone();
        o.shuffle(&mut rng);
        let batches = make_batches(&o, sched.batch_size);
        let mut loss_sum = 0.0;
        for b in &batches {
            let mut g = Graph::new();
            let loss = batch_loss(&model, &mut g, b, &mut rng)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(invalid(format!("non-finite {} loss at epoch {epoch}", model.task.name())));
            }
            loss_sum += lv;
            g.backward(loss);
            let eg = g.param_grads(&model.enc_store);
            let hg = g.param_grads(&model.head_store);
            let TaskModel {
                optim,
                enc_store,
                head_store,
                ..
            } = &mut model;
            optim.step("encoder", enc_store, &eg, sched.encoder_lr());
            optim.step("head", head_store, &hg, sched.head_lr);
        }
        let metric = validate(&model)?;
        history.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_metric: metric,
            encoder_frozen: frozen,
        });
        log::debug!("{} epoch {epoch}: loss {:.5} val {metric:.5}", model.task.name(), loss_sum / batches.len() as f64);
        if better(metric, best.0) || best.1 == 0 {
            best = (metric, epoch);
            best_state = (model.enc_store.clone(), model.head_store.clone());
            since = 0;
        } else if epoch > warm {
            since += 1;
            if since >= sched.patience {
                break;
            }
        }
    }
    model.enc_store.set_all_frozen(false);
    model.enc_store.copy_matching_from(&best_state.0);
    model.head_store.copy_matching_from(&best_state.1);
    Ok(FinetuneOutput {
        model,
        history,
        best_epoch: best.1,
        best_metric: best.0,
    })
}

fn mask_tensor(records: &[&PatchRecord]) -> Result<Tensor> {
    let e = records[0].image.spatial();
    let mut data = Vec::new();
    for r in records {
        let m = r
            .mask
            .as_ref()
            .ok_or_else(|| invalid(format!("{}: segmentation patch without mask", r.source_id)))?;
        data.extend(m.to_f32());
    }
    Ok(Tensor::new(&[records.len(), 1, e[0], e[1], e[2]], data))
}

fn augmented(records: &[&PatchRecord], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<PatchRecord> {
    records.iter().map(|r| augment(r, cfg, rng)).collect()
}

/// Dice-Focal (conv) or Dice-CE (swin) on `[N,1,...]` logits.
pub fn segmentation_loss(g: &mut Graph, logits: Var, target: Arc<Tensor>, cfg: &FinetuneConfig) -> Var {
    let row = target.len() / target.shape()[0];
    let p = g.sigmoid(logits);
    let dice = g.soft_dice_loss(p, target.clone(), row, cfg.dice_smooth);
    let other = match cfg.backbone.family {
        Family::ConvUnet => g.focal_with_logits_mean(logits, target, cfg.focal_gamma),
        Family::Swin => g.bce_with_logits_mean(logits, target),
    };
    g.weighted_sum(&[(dice, 1.0), (other, 1.0)])
}

/// Mean per-patch Dice of thresholded predictions.
pub fn mean_dice(model: &TaskModel, records: &[PatchRecord]) -> Result<f64> {
    let imgs: Vec<&Volume> = records.iter().map(|r| &r.image).collect();
    let preds = model.predict_masks(&imgs)?;
    let mut s = 0.0;
    for (p, r) in preds.iter().zip(records) {
        let gt = r.mask.as_ref().ok_or_else(|| invalid("validation patch without mask"))?;
        s += metrics::dice(p, gt)?;
    }
    Ok(s / records.len() as f64)
}

pub fn finetune_segmentation(
    train: &[PatchRecord],
    val: &[PatchRecord],
    cfg: &FinetuneConfig,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutput> {
    if train.is_empty() {
        return Err(invalid("segmentation training set is empty"));
    }
    for r in train.iter().chain(val) {
        if r.mask.is_none() {
            return Err(invalid(format!("{}: segmentation patch without mask", r.source_id)));
        }
    }
    let val = if val.is_empty() { train } else { val };
    let model = TaskModel::new(Task::Segment, cfg, train[0].image.channels(), init)?;
    run_schedule(
        model,
        train.len(),
        true,
        |m, g, b, rng| {
            let refs: Vec<&PatchRecord> = b.iter().map(|&i| &train[i]).collect();
            let aug = augmented(&refs, &m.cfg.augment, rng);
            let ar: Vec<&PatchRecord> = aug.iter().collect();
            let x = batch_tensor(aug.iter().map(|r| &r.image))?;
            let y = Arc::new(mask_tensor(&ar)?);
            let logits = m.forward(g, x)?;
            Ok(segmentation_loss(g, logits, y, &m.cfg))
        },
        |m| mean_dice(m, val),
    )
}

/// Inverse-frequency weights scaled so they sum to the class count.
pub fn class_weights(counts: &[usize], classes: &[String]) -> Result<Vec<f64>> {
    if classes.len() < 2 || counts.len() != classes.len() {
        return Err(invalid("classification needs at least two classes"));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(classes[k].clone()));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let s: f64 = inv.iter().sum();
    let k = classes.len() as f64;
    Ok(inv.iter().map(|w| w * k / s).collect())
}

/// `Σ w_y · (−log p_y) / Σ w_y` over the batch.
pub fn weighted_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
    let k = weights.len();
    let n = targets.len();
    let lp = g.log_softmax_rows(logits, k);
    let idx: Vec<u32> = targets.iter().enumerate().map(|(i, &t)| (i * k + t) as u32).collect();
    let picked = g.gather(lp, Arc::new(idx), &[n]);
    let wsum: f64 = targets.iter().map(|&t| weights[t]).sum();
    let w = g.constant(Tensor::new(&[n], targets.iter().map(|&t| (weights[t] / wsum) as f32).collect()));
    let prod = g.mul(picked, w);
    let s = g.sum(prod);
    g.scale(s, -1.0)
}

pub fn class_index(classes: &[String], label: Option<&str>) -> Result<usize> {
    let l = label.ok_or_else(|| invalid("classification patch without label"))?;
    classes
        .iter()
        .position(|c| c == l)
        .ok_or_else(|| invalid(format!("label `{l}` not in class list")))
}

pub fn finetune_classification(
    train: &[PatchRecord],
    val: &[PatchRecord],
    classes: &[String],
    cfg: &FinetuneConfig,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutput> {
    if train.is_empty() {
        return Err(invalid("classification training set is empty"));
    }
    let ty: Vec<usize> = train
        .iter()
        .map(|r| class_index(classes, r.label.as_deref()))
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; classes.len()];
    for &t in &ty {
        counts[t] += 1;
    }
    let weights = class_weights(&counts, classes)?;
    let val = if val.is_empty() { train } else { val };
    let vy: Vec<usize> = val
        .iter()
        .map(|r| class_index(classes, r.label.as_deref()))
        .collect::<Result<_>>()?;
    let task = Task::Classify {
        classes: classes.to_vec(),
    };
    let model = TaskModel::new(task, cfg, train[0].image.channels(), init)?;
    run_schedule(
        model,
        train.len(),
        true,
        |m, g, b, rng| {
            let refs: Vec<&PatchRecord> = b.iter().map(|&i| &train[i]).collect();
            let aug = augmented(&refs, &m.cfg.augment, rng);
            let x = batch_tensor(aug.iter().map(|r| &r.image))?;
            let logits = m.forward(g, x)?;
            let t: Vec<usize> = b.iter().map(|&i| ty[i]).collect();
            Ok(weighted_cross_entropy(g, logits, &t, &weights))
        },
        |m| {
            let imgs: Vec<&Volume> = val.iter().map(|r| &r.image).collect();
            metrics::accuracy(&m.predict_classes(&imgs)?, &vy)
        },
    )
}

/// Individual deblurring terms `(l1, 1 − ssim, edge, hf)` and their weighted sum.
pub struct DeblurTerms {
    pub l1: Var,
    pub ssim: Var,
    pub edge: Var,
    pub hf: Var,
    pub total: Var,
}

fn box_mean(g: &mut Graph, x: Var, window: usize) -> Var {
    let k = vec![1.0 / window as f32; window];
    g.filter3(x, &k, Border::Valid)
}

/// `1 − SSIM` with the same window and constants as the evaluation metric.
pub fn ssim_loss(g: &mut Graph, out: Var, target: Var) -> Var {
    let (c1, c2) = ((SSIM_K1 * SSIM_K1) as f32, (SSIM_K2 * SSIM_K2) as f32);
    let w = SSIM_WINDOW;
    let xx = g.mul(out, out);
    let yy = g.mul(target, target);
    let xy = g.mul(out, target);
    let mx = box_mean(g, out, w);
    let my = box_mean(g, target, w);
    let sxx = box_mean(g, xx, w);
    let syy = box_mean(g, yy, w);
    let sxy = box_mean(g, xy, w);
    let mxmy = g.mul(mx, my);
    let mx2 = g.mul(mx, mx);
    let my2 = g.mul(my, my);
    let vx = g.sub(sxx, mx2);
    let vy = g.sub(syy, my2);
    let cov = g.sub(sxy, mxmy);
    let a = g.scale(mxmy, 2.0);
    let a = g.add_scalar(a, c1);
    let b = g.scale(cov, 2.0);
    let b = g.add_scalar(b, c2);
    let c = g.add(mx2, my2);
    let c = g.add_scalar(c, c1);
    let d = g.add(vx, vy);
    let d = g.add_scalar(d, c2);
    let num = g.mul(a, b);
    let den = g.mul(c, d);
    let map = g.div(num, den);
    let m = g.mean(map);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

pub const EDGE_EPS: f32 = 1e-6;
pub const CENTRAL_DIFF: [f32; 3] = [-0.5, 0.0, 0.5];

/// `|∇x|` from central differences (replicated borders).
pub fn gradient_magnitude(g: &mut Graph, x: Var) -> Var {
    let mut acc = None;
    for axis in 0..3 {
        let d = g.filter_axis(x, axis, &CENTRAL_DIFF, Border::Replicate);
        let d2 = g.square(d);
        acc = Some(match acc {
            None => d2,
            Some(a) => g.add(a, d2),
        });
    }
    g.unary(acc.expect("three axes"), Unary::SqrtEps(EDGE_EPS))
}

/// `x − Gaussian(σ) * x` (replicated borders).
pub fn high_pass(g: &mut Graph, x: Var, sigma: f32) -> Var {
    let k = gaussian_kernel(sigma);
    let s = g.filter3(x, &k, Border::Replicate);
    g.sub(x, s)
}

fn l1_mean(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

pub fn deblur_terms(g: &mut Graph, out: Var, sharp: &Tensor, w: &DeblurLossWeights, hf_sigma: f32) -> Result<DeblurTerms> {
    w.validate()?;
    if g.shape(out) != sharp.shape() {
        return Err(invalid("restored and sharp shapes differ"));
    }
    let t = g.constant(sharp.clone());
    let l1 = l1_mean(g, out, t);
    let ssim = ssim_loss(g, out, t);
    let go = gradient_magnitude(g, out);
    let gt = gradient_magnitude(g, t);
    let edge = l1_mean(g, go, gt);
    let ho = high_pass(g, out, hf_sigma);
    let ht = high_pass(g, t, hf_sigma);
    let hf = l1_mean(g, ho, ht);
    let [a, b, c, d] = w.as_array();
    let total = g.weighted_sum(&[(l1, a), (ssim, b), (edge, c), (hf, d)]);
    Ok(DeblurTerms { l1, ssim, edge, hf, total })
}

/// Records must come in `(blurred, sharp)` pairs of equal shape.
pub fn check_pairs(pairs: &[(PatchRecord, PatchRecord)]) -> Result<()> {
    for (b, s) in pairs {
        if b.image.shape() != s.image.shape() {
            return Err(invalid(format!("{}: unpaired blur record (shape mismatch)", b.source_id)));
        }
    }
    Ok(())
}

fn stack_pair(b: &PatchRecord, s: &PatchRecord) -> Result<PatchRecord> {
    let c = b.image.channels();
    let mut data = b.image.data().to_vec();
    data.extend_from_slice(s.image.data());
    let sp = b.image.spatial();
    let mut names = b.image.channel_names().to_vec();
    names.extend(s.image.channel_names().iter().map(|n| format!("{n}_sharp")));
    let img = Volume::new([2 * c, sp[0], sp[1], sp[2]], data, b.image.spacing(), names)?;
    Ok(PatchRecord::new(img, b.source_id.clone(), b.seed))
}

fn unstack(v: &Volume, c: usize) -> (Vec<f32>, Vec<f32>) {
    let n = c * v.voxels_per_channel();
    (v.data()[..n].to_vec(), v.data()[n..].to_vec())
}

/// Intensity-free augmentation applied identically to both halves of a pair.
pub fn pair_augment(cfg: &AugmentConfig) -> AugmentConfig {
    AugmentConfig {
        noise_prob: 0.0,
        smooth_prob: 0.0,
        scale_prob: 0.0,
        shift_prob: 0.0,
        ..cfg.clone()
    }
}

/// Mean deblurring loss over `pairs` (no gradient).
pub fn deblur_val_loss(model: &TaskModel, pairs: &[(PatchRecord, PatchRecord)]) -> Result<f64> {
    let mut s = 0.0;
    for (b, sh) in pairs {
        let mut g = Graph::new();
        let out = model.restore_graph(&mut g, &batch_tensor([&b.image])?)?;
        let t = deblur_terms(&mut g, out, &batch_tensor([&sh.image])?, &model.cfg.deblur_weights, model.cfg.hf_sigma)?;
        s += g.scalar(t.total);
    }
    Ok(s / pairs.len() as f64)
}

pub fn finetune_deblur(
    train: &[(PatchRecord, PatchRecord)],
    val: &[(PatchRecord, PatchRecord)],
    cfg: &FinetuneConfig,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutput> {
    if train.is_empty() {
        return Err(invalid("deblurring training set is empty"));
    }
    check_pairs(train)?;
    check_pairs(val)?;
    let val = if val.is_empty() { train } else { val };
    let c = train[0].0.image.channels();
    let model = TaskModel::new(Task::Deblur, cfg, c, init)?;
    let stacked: Vec<PatchRecord> = train.iter().map(|(b, s)| stack_pair(b, s)).collect::<Result<_>>()?;
    let aug_cfg = pair_augment(&cfg.augment);
    run_schedule(
        model,
        train.len(),
        false,
        |m, g, b, rng| {
            let refs: Vec<&PatchRecord> = b.iter().map(|&i| &stacked[i]).collect();
            let aug = augmented(&refs, &aug_cfg, rng);
            let e = m.cfg.backbone.edge;
            let (mut xb, mut xs) = (Vec::new(), Vec::new());
            for r in &aug {
                let (bl, sh) = unstack(&r.image, c);
                xb.extend(bl);
                xs.extend(sh);
            }
            let shape = [aug.len(), c, e, e, e];
            let out = m.restore_graph(g, &Tensor::new(&shape, xb))?;
            let t = deblur_terms(g, out, &Tensor::new(&shape, xs), &m.cfg.deblur_weights, m.cfg.hf_sigma)?;
            Ok(t.total)
        },
        |m| deblur_val_loss(m, val),
    )
}

/// Per-class training counts, useful for logging splits.
pub fn label_counts(records: &[PatchRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(l) = &r.label {
            *out.entry(l.clone()).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn class_weight_closed_form() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let w = class_weights(&[10, 30, 60], &names).unwrap();
        let want = [2.0, 2.0 / 3.0, 1.0 / 3.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert_eq!(class_weights(&[5, 5, 5], &names).unwrap(), vec![1.0; 3]);
        match class_weights(&[5, 0, 5], &names) {
            Err(Error::MissingClass(c)) => assert_eq!(c, "b"),
            other => panic!("{other:?}"),
        }
        assert!(class_weights(&[5], &names[..1]).is_err());
    }

    fn rand_vol(n: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, 1, n, n, n], (0..n * n * n).map(|_| r.gen::<f32>()).collect())
    }

    fn at(x: &[f32], n: usize, z: isize, y: isize, xx: isize) -> f64 {
        let c = |v: isize| v.clamp(0, n as isize - 1) as usize;
        x[(c(z) * n + c(y)) * n + c(xx)] as f64
    }

    #[test]
    fn deblur_terms_match_elementwise_oracles() {
        let n = 8;
        let a = rand_vol(n, 1);
        let b = rand_vol(n, 2);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let t = deblur_terms(&mut g, av, &b, &DeblurLossWeights::default(), 2.0).unwrap();
        let (x, y) = (a.data(), b.data());
        let l1: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64;
        assert!((g.scalar(t.l1) - l1).abs() < 1e-6);
        let ssim = metrics::ssim3d(x, y, [n; 3], SSIM_WINDOW, SSIM_K1, SSIM_K2).unwrap();
        assert!((g.scalar(t.ssim) - (1.0 - ssim)).abs() < 1e-4, "{} vs {}", g.scalar(t.ssim), 1.0 - ssim);
        let gm = |v: &[f32], z: usize, yy: usize, xx: usize| {
            let (z, yy, xx) = (z as isize, yy as isize, xx as isize);
            let dz = (at(v, n, z + 1, yy, xx) - at(v, n, z - 1, yy, xx)) / 2.0;
            let dy = (at(v, n, z, yy + 1, xx) - at(v, n, z, yy - 1, xx)) / 2.0;
            let dx = (at(v, n, z, yy, xx + 1) - at(v, n, z, yy, xx - 1)) / 2.0;
            (dz * dz + dy * dy + dx * dx + EDGE_EPS as f64).sqrt()
        };
        let mut edge = 0.0;
        for z in 0..n {
            for yy in 0..n {
                for xx in 0..n {
                    edge += (gm(x, z, yy, xx) - gm(y, z, yy, xx)).abs();
                }
            }
        }
        edge /= (n * n * n) as f64;
        assert!((g.scalar(t.edge) - edge).abs() < 1e-5);
        let k = gaussian_kernel(2.0);
        let r = k.len() as isize / 2;
        let hp = |v: &[f32], z: usize, yy: usize, xx: usize| {
            let mut s = 0.0;
            for (i, &ki) in k.iter().enumerate() {
                for (j, &kj) in k.iter().enumerate() {
                    for (l, &kl) in k.iter().enumerate() {
                        let (dz, dy, dx) = (i as isize - r, j as isize - r, l as isize - r);
                        s += (ki * kj * kl) as f64 * at(v, n, z as isize + dz, yy as isize + dy, xx as isize + dx);
                    }
                }
            }
            at(v, n, z as isize, yy as isize, xx as isize) - s
        };
        let mut hf = 0.0;
        for z in 0..n {
            for yy in 0..n {
                for xx in 0..n {
                    hf += (hp(x, z, yy, xx) - hp(y, z, yy, xx)).abs();
                }
            }
        }
        hf /= (n * n * n) as f64;
        assert!((g.scalar(t.hf) - hf).abs() < 1e-5);
        let sum = g.scalar(t.l1) + g.scalar(t.ssim) + g.scalar(t.edge) + g.scalar(t.hf);
        assert!((g.scalar(t.total) - sum).abs() <= 1e-6 * sum);

        let same = g.constant(b.clone());
        let z = deblur_terms(&mut g, same, &b, &DeblurLossWeights::default(), 2.0).unwrap();
        for v in [z.l1, z.ssim, z.edge, z.hf] {
            assert!(g.scalar(v).abs() < 1e-6, "{}", g.scalar(v));
        }
    }

    fn pair(seed: u64) -> (PatchRecord, PatchRecord) {
        use crate::synth::{generate_phantom, make_blur_pair, BlurSpec, Kind, PhantomSpec};
        let p = generate_phantom(&PhantomSpec::new(Kind::Nuclei, 1, seed), 32).unwrap();
        make_blur_pair(&p, &BlurSpec::default()).unwrap()
    }

    #[test]
    fn zero_residual_restores_blurred_and_warmup_freezes_encoder() {
        let cfg = FinetuneConfig {
            schedule: FinetuneSchedule {
                max_epochs: 2,
                warmup_fraction: 0.5,
                patience: 5,
                ..FinetuneSchedule::default()
            },
            ..FinetuneConfig::default()
        };
        let pairs = vec![pair(1), pair(2)];
        let m = TaskModel::new(Task::Deblur, &cfg, 1, None).unwrap();
        let out = m.restore(&[&pairs[0].0.image]).unwrap();
        assert!(out[0].data() == pairs[0].0.image.data());

        let enc0 = m.enc_store.clone();
        drop(m);
        let one = FinetuneConfig {
            schedule: FinetuneSchedule {
                max_epochs: 1,
                warmup_fraction: 1.0,
                ..cfg.schedule.clone()
            },
            ..cfg.clone()
        };
        let r = finetune_deblur(&pairs, &[], &one, None).unwrap();
        assert!(r.model.enc_store.bit_eq(&enc0));
        assert!(r.history[0].encoder_frozen);
        let r2 = finetune_deblur(&pairs, &[], &cfg, None).unwrap();
        assert_eq!(r2.history.len(), 2);
        assert!(!r2.history[1].encoder_frozen);
    }

    #[test]
    fn missing_mask_is_rejected() {
        let p = pair(3).1;
        let mut q = p.clone();
        q.mask = None;
        assert!(finetune_segmentation(&[q], &[], &FinetuneConfig::default(), None).is_err());
    }
}
