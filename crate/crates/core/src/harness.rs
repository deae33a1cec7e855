//! Cross-validated finetuning matrix, PCA baseline and report files.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, io_err, Error, Result};
use crate::finetune::{
    class_index, finetune_classification, finetune_deblur, finetune_segmentation, FinetuneConfig, FinetuneOutput,
};
use crate::metrics::{self, ClsScore};
use crate::synth::{class_labels, generate_phantom, make_blur_pair, BlurSpec, Kind, PhantomSpec, PROFILES};
use crate::text::fnv1a;
use crate::volume_io::{write_container, PatchRecord, Volume};

/// Seed-pinned synthetic corpus: `per_kind` phantoms of each kind with
/// profiles cycling through `0..PROFILES`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub edge: usize,
    pub per_kind: usize,
    pub kinds: Vec<Kind>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            edge: 32,
            per_kind: 44,
            kinds: Kind::ALL.to_vec(),
            seed: 20_240_601,
        }
    }
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::with_capacity(spec.kinds.len() * spec.per_kind);
    for (k, &kind) in spec.kinds.iter().enumerate() {
        for i in 0..spec.per_kind {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((k * 100_000 + i) as u64);
            let profile = (i % PROFILES as usize) as u8;
            out.push(generate_phantom(&PhantomSpec::new(kind, profile, seed), spec.edge)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentTask {
    #[default]
    Segment,
    Classify,
    Deblur,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Scratch,
    ImageOnlyCkpt,
    ImageTextCkpt,
    OvertrainedCkpt,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Scratch => "scratch",
            InitKind::ImageOnlyCkpt => "image_only",
            InitKind::ImageTextCkpt => "image_text",
            InitKind::OvertrainedCkpt => "overtrained",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub kind: InitKind,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl InitSpec {
    pub fn scratch() -> Self {
        Self::default()
    }

    pub fn from_checkpoint(kind: InitKind, path: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            checkpoint: Some(path.into()),
        }
    }
}

/// Which cells a matrix run covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixSpec {
    pub task: ExperimentTask,
    /// Kind names; ignored for classification, which uses every class label.
    pub datatypes: Vec<String>,
    /// Patches per datatype (segmentation, deblurring) or in total (classification).
    pub train_sizes: Vec<usize>,
    pub folds: usize,
    pub heldout_per_datatype: usize,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    pub inits: Vec<InitSpec>,
    pub pca_components: usize,
    /// Add a PCA + logistic regression row per classification cell.
    pub include_pca: bool,
    pub save_artifacts: bool,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            task: ExperimentTask::Segment,
            datatypes: vec!["nuclei".into()],
            train_sizes: vec![5, 10, 15],
            folds: 3,
            heldout_per_datatype: 2,
            train_fraction: 0.8,
            seeds: vec![0],
            inits: vec![InitSpec::scratch()],
            pca_components: 16,
            include_pca: true,
            save_artifacts: true,
        }
    }
}

impl MatrixSpec {
    pub fn default_train_sizes(task: ExperimentTask) -> Vec<usize> {
        match task {
            ExperimentTask::Classify => vec![56, 80, 105],
            _ => vec![5, 10, 15],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.into()));
        if self.folds < 2 {
            return cfg("folds must be at least 2");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return cfg("train_fraction must lie in (0, 1)");
        }
        if self.train_sizes.is_empty() || self.train_sizes.iter().any(|&n| n < 2) {
            return cfg("train sizes must be at least 2");
        }
        if self.inits.is_empty() || self.seeds.is_empty() {
            return cfg("matrix needs at least one init and one seed");
        }
        if self.task != ExperimentTask::Classify && self.datatypes.is_empty() {
            return cfg("matrix needs at least one datatype");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub matrix: MatrixSpec,
    pub corpus: CorpusSpec,
    pub blur: BlurSpec,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub folds: Vec<Fold>,
    pub test: Vec<usize>,
}

fn group_seed(seed: u64, group: &str, salt: u64) -> u64 {
    seed ^ fnv1a(group.as_bytes()) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Per group: a fixed held-out test set, then for each fold an independent
/// draw of `size` patches from the rest, split `⌊fraction·size⌋` / remainder.
/// `groups` maps a group name to its record indices and requested size.
pub fn make_splits(
    groups: &BTreeMap<String, (Vec<usize>, usize)>,
    folds: usize,
    heldout: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Splits> {
    let mut out = Splits {
        folds: vec![
            Fold {
                train: Vec::new(),
                val: Vec::new(),
            };
            folds
        ],
        test: Vec::new(),
    };
    for (name, (members, size)) in groups {
        if members.len() < heldout + size {
            return Err(Error::Insufficient {
                datatype: name.clone(),
                msg: format!("{} patches, need {heldout} held out + {size}", members.len()),
            });
        }
        let mut idx = members.clone();
        idx.sort_unstable();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(group_seed(seed, name, 0)));
        out.test.extend_from_slice(&idx[..heldout]);
        let pool = &idx[heldout..];
        let ntr = ((train_fraction * *size as f64).floor() as usize).clamp(1, size.saturating_sub(1).max(1));
        for (f, fold) in out.folds.iter_mut().enumerate() {
            let mut p = pool.to_vec();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(group_seed(seed, name, f as u64 + 1)));
            fold.train.extend_from_slice(&p[..ntr]);
            fold.val.extend_from_slice(&p[ntr..*size]);
        }
    }
    Ok(out)
}

/// Spreads `total` over `k` classes, earlier classes taking the remainder.
pub fn per_class_sizes(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

/// Mean over channels, as a single-channel volume.
pub fn channel_mean(v: &Volume) -> Volume {
    if v.channels() == 1 {
        return v.clone();
    }
    let n = v.voxels_per_channel();
    let c = v.channels() as f32;
    let data: Vec<f32> = (0..n)
        .map(|i| (0..v.channels()).map(|ch| v.channel(ch)[i]).sum::<f32>() / c)
        .collect();
    Volume::new([1, v.spatial()[0], v.spatial()[1], v.spatial()[2]], data, v.spacing(), vec!["mean".into()])
        .expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub datatype: String,
    pub regime: String,
    pub train_size: usize,
    pub fold: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub status: CellStatus,
    pub run: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub datatype: String,
    pub regime: String,
    pub train_size: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub task: ExperimentTask,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Mean and population std over folds and seeds per (method, datatype, regime, metric).
    pub fn summary(&self) -> Vec<SummaryRow> {
        type Key = (String, String, usize, String);
        let mut groups: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
        let mut failed: BTreeMap<(String, String, usize), usize> = BTreeMap::new();
        for r in &self.rows {
            if matches!(r.status, CellStatus::Failed { .. }) {
                *failed.entry((r.method.clone(), r.datatype.clone(), r.train_size)).or_default() += 1;
                continue;
            }
            for (m, &v) in &r.metrics {
                groups
                    .entry((r.method.clone(), r.datatype.clone(), r.train_size, m.clone()))
                    .or_default()
                    .0
                    .push(v);
            }
        }
        groups
            .into_iter()
            .map(|((method, datatype, train_size, metric), (vals, _))| {
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let f = failed.get(&(method.clone(), datatype.clone(), train_size)).copied().unwrap_or(0);
                SummaryRow {
                    regime: regime_name(train_size),
                    method,
                    datatype,
                    train_size,
                    metric,
                    mean,
                    std: var.sqrt(),
                    n,
                    failed: f,
                }
            })
            .collect()
    }

    pub fn mean(&self, method: &str, datatype: &str, train_size: usize, metric: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.method == method && s.datatype == datatype && s.train_size == train_size && s.metric == metric)
            .map(|s| s.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn regime_name(train_size: usize) -> String {
    format!("{train_size}-shot")
}

fn short_hash(v: &serde_json::Value) -> String {
    let d = Sha256::digest(serde_json::to_vec(v).expect("json"));
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s).map_err(io_err(path))
}

struct Cell<'a> {
    init: &'a InitSpec,
    ckpt: Option<&'a Checkpoint>,
    datatype: String,
    size: usize,
    fold: usize,
    seed: u64,
}

/// Finite metric values only; PSNR of identical volumes is dropped.
fn finite(m: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    m.into_iter().filter(|(_, v)| v.is_finite()).collect()
}

fn seg_metrics(out: &FinetuneOutput, test: &[PatchRecord]) -> Result<(BTreeMap<String, f64>, Vec<PatchRecord>)> {
    let imgs: Vec<&Volume> = test.iter().map(|r| &r.image).collect();
    let preds = out.model.predict_masks(&imgs)?;
    let (mut td, mut id) = (0.0, 0.0);
    let mut saved = Vec::new();
    for (p, r) in preds.iter().zip(test) {
        let gt = r.mask.as_ref().ok_or_else(|| invalid("test patch without mask"))?;
        td += metrics::dice(p, gt)?;
        id += metrics::instance_dice(p, gt)?;
        let mut rec = PatchRecord::new(Volume::new([1, gt.shape()[0], gt.shape()[1], gt.shape()[2]], p.to_f32(), r.image.spacing(), vec!["prediction".into()])?, r.source_id.clone(), r.seed);
        rec.mask = Some(p.clone());
        rec.label = r.label.clone();
        saved.push(rec);
    }
    let n = test.len() as f64;
    let m = BTreeMap::from([("total_dice".to_string(), td / n), ("instance_dice".to_string(), id / n)]);
    Ok((m, saved))
}

/// PCA on average-pooled intensities, then multinomial logistic regression.
pub fn pca_baseline(train: &[PatchRecord], test: &[PatchRecord], classes: &[String], components: usize) -> Result<ClsScore> {
    if train.is_empty() || test.is_empty() {
        return Err(invalid("pca baseline needs train and test patches"));
    }
    let feats = |rs: &[PatchRecord]| -> Result<Vec<Vec<f64>>> { rs.iter().map(|r| pooled_features(&r.image, 8)).collect() };
    let xtr = feats(train)?;
    let xte = feats(test)?;
    let ytr: Vec<usize> = train.iter().map(|r| class_index(classes, r.label.as_deref())).collect::<Result<_>>()?;
    let yte: Vec<usize> = test.iter().map(|r| class_index(classes, r.label.as_deref())).collect::<Result<_>>()?;
    let (n, p) = (xtr.len(), xtr[0].len());
    let mut d = components.min(p);
    if n <= d {
        log::warn!("pca: {n} training samples, reducing components from {d} to {}", n.saturating_sub(1).max(1));
        d = n.saturating_sub(1).max(1);
    }
    let mean: Vec<f64> = (0..p).map(|j| xtr.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, p, |i, j| xtr[i][j] - mean[j]);
    let svd = x.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| invalid("svd failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let comps: Vec<usize> = order.into_iter().take(d).collect();
    let project = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                comps
                    .iter()
                    .map(|&c| (0..p).map(|j| (r[j] - mean[j]) * vt[(c, j)]).sum())
                    .collect()
            })
            .collect()
    };
    let ztr = project(&xtr);
    let zte = project(&xte);
    let sd: Vec<f64> = (0..d)
        .map(|j| (ztr.iter().map(|r| r[j] * r[j]).sum::<f64>() / n as f64).sqrt().max(1e-12))
        .collect();
    let scale = |z: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        z.into_iter().map(|r| r.iter().zip(&sd).map(|(v, s)| v / s).collect()).collect()
    };
    let (ztr, zte) = (scale(ztr), scale(zte));
    let w = fit_softmax(&ztr, &ytr, classes.len(), 500, 0.5, 1e-3);
    let preds: Vec<usize> = zte.iter().map(|z| argmax(&softmax_scores(&w, z))).collect();
    metrics::cls_score(&preds, &yte, classes.len())
}

fn pooled_features(v: &Volume, cells: usize) -> Result<Vec<f64>> {
    let v = channel_mean(v);
    let s = v.spatial();
    if s.iter().any(|&e| e % cells != 0) {
        return Err(invalid(format!("patch {s:?} not divisible into {cells}^3 cells")));
    }
    let f = [s[0] / cells, s[1] / cells, s[2] / cells];
    let mut out = vec![0f64; cells.pow(3)];
    let d = v.channel(0);
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                let c = ((z / f[0]) * cells + y / f[1]) * cells + x / f[2];
                out[c] += d[(z * s[1] + y) * s[2] + x] as f64;
            }
        }
    }
    let k = (f[0] * f[1] * f[2]) as f64;
    Ok(out.into_iter().map(|v| v / k).collect())
}

fn softmax_scores(w: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w
        .iter()
        .map(|wk| wk[0] + wk[1..].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-batch gradient descent on L2-regularized softmax regression.
fn fit_softmax(z: &[Vec<f64>], y: &[usize], k: usize, iters: usize, lr: f64, l2: f64) -> Vec<Vec<f64>> {
    let d = z[0].len();
    let n = z.len() as f64;
    let mut w = vec![vec![0f64; d + 1]; k];
    for _ in 0..iters {
        let mut grad = vec![vec![0f64; d + 1]; k];
        for (zi, &yi) in z.iter().zip(y) {
            let p = softmax_scores(&w, zi);
            for c in 0..k {
                let e = p[c] - f64::from(c == yi);
                grad[c][0] += e;
                for j in 0..d {
                    grad[c][j + 1] += e * zi[j];
                }
            }
        }
        for c in 0..k {
            for j in 0..=d {
                let reg = if j == 0 { 0.0 } else { l2 * w[c][j] };
                w[c][j] -= lr * (grad[c][j] / n + reg);
            }
        }
    }
    w
}

fn select(records: &[PatchRecord], idx: &[usize]) -> Vec<PatchRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Group definitions `(name -> (record indices, requested size))` for one size.
fn groups_for(cfg: &ExperimentConfig, records: &[PatchRecord], size: usize) -> Result<BTreeMap<String, (Vec<usize>, usize)>> {
    let mut g = BTreeMap::new();
    match cfg.matrix.task {
        ExperimentTask::Classify => {
            let classes = class_labels();
            for (c, n) in classes.iter().zip(per_class_sizes(size, classes.len())) {
                let members: Vec<usize> = (0..records.len())
                    .filter(|&i| records[i].label.as_deref() == Some(c.as_str()))
                    .collect();
                g.insert(c.clone(), (members, n));
            }
        }
        _ => {
            for dt in &cfg.matrix.datatypes {
                let members: Vec<usize> = (0..records.len())
                    .filter(|&i| records[i].datatype() == Some(dt.as_str()))
                    .collect();
                g.insert(dt.clone(), (members, size));
            }
        }
    }
    Ok(g)
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    records: &[PatchRecord],
    fold: &Fold,
    test: &[usize],
    dir: Option<&Path>,
) -> Result<BTreeMap<String, f64>> {
    let mut ft = cfg.finetune.clone();
    ft.seed = cell.seed.wrapping_mul(1_000_033).wrapping_add(cell.fold as u64);
    let (train, val, test) = (select(records, &fold.train), select(records, &fold.val), select(records, test));
    let save = |name: &str, out: &FinetuneOutput| -> Result<()> {
        if let Some(d) = dir {
            out.model.to_checkpoint(out.best_epoch, &out.history)?.write(&d.join(name))?;
        }
        Ok(())
    };
    let metrics = match cfg.matrix.task {
        ExperimentTask::Segment => {
            let out = finetune_segmentation(&train, &val, &ft, cell.ckpt)?;
            let (m, preds) = seg_metrics(&out, &test)?;
            save("model.ckpt", &out)?;
            if let Some(d) = dir {
                for (i, p) in preds.iter().enumerate() {
                    write_container(p, &d.join(format!("pred_{i:02}.lsmraw")))?;
                }
            }
            m
        }
        ExperimentTask::Classify => {
            let classes = class_labels();
            let mono = |rs: Vec<PatchRecord>| -> Vec<PatchRecord> {
                rs.into_iter()
                    .map(|mut r| {
                        r.image = channel_mean(&r.image);
                        r
                    })
                    .collect()
            };
            let (train, val, test) = (mono(train), mono(val), mono(test));
            let out = finetune_classification(&train, &val, &classes, &ft, cell.ckpt)?;
            let imgs: Vec<&Volume> = test.iter().map(|r| &r.image).collect();
            let preds = out.model.predict_classes(&imgs)?;
            let gts: Vec<usize> = test.iter().map(|r| class_index(&classes, r.label.as_deref())).collect::<Result<_>>()?;
            let s = metrics::cls_score(&preds, &gts, classes.len())?;
            save("model.ckpt", &out)?;
            if let Some(d) = dir {
                let rows: Vec<_> = test
                    .iter()
                    .zip(&preds)
                    .map(|(r, &p)| serde_json::json!({"source_id": r.source_id, "label": r.label, "predicted": classes[p]}))
                    .collect();
                write_json(&d.join("predictions.json"), &rows)?;
            }
            BTreeMap::from([("accuracy".to_string(), s.accuracy), ("macro_f1".to_string(), s.macro_f1)])
        }
        ExperimentTask::Deblur => {
            let pairs = |rs: &[PatchRecord]| -> Result<Vec<(PatchRecord, PatchRecord)>> {
                rs.iter().map(|r| make_blur_pair(r, &cfg.blur)).collect()
            };
            let (tp, vp, sp) = (pairs(&train)?, pairs(&val)?, pairs(&test)?);
            let out = finetune_deblur(&tp, &vp, &ft, cell.ckpt)?;
            let blurred: Vec<&Volume> = sp.iter().map(|p| &p.0.image).collect();
            let restored = out.model.restore(&blurred)?;
            let (mut ssim, mut psnr, mut ssim0, mut psnr0) = (0.0, 0.0, 0.0, 0.0);
            for (r, (b, s)) in restored.iter().zip(&sp) {
                let c = s.image.channels();
                let sh = s.image.spatial();
                let a = metrics::restore_score(r.data(), s.image.data(), c, sh)?;
                let z = metrics::restore_score(b.image.data(), s.image.data(), c, sh)?;
                ssim += a.ssim;
                psnr += a.psnr_db;
                ssim0 += z.ssim;
                psnr0 += z.psnr_db;
            }
            save("model.ckpt", &out)?;
            if let Some(d) = dir {
                for (i, (r, (b, _))) in restored.iter().zip(&sp).enumerate() {
                    let mut rec = b.clone();
                    rec.image = r.clone();
                    write_container(&rec, &d.join(format!("restored_{i:02}.lsmraw")))?;
                }
            }
            let n = sp.len() as f64;
            BTreeMap::from([
                ("ssim".to_string(), ssim / n),
                ("psnr".to_string(), psnr / n),
                ("ssim_blurred".to_string(), ssim0 / n),
                ("psnr_blurred".to_string(), psnr0 / n),
            ])
        }
    };
    Ok(finite(metrics))
}

/// Runs every (init, datatype, train size, fold, seed) cell; failures are
/// recorded in the table and do not stop the matrix. Per-cell artifacts go
/// to `out_dir/<hash>/` when `out_dir` is given.
pub fn run_matrix(cfg: &ExperimentConfig, records: &[PatchRecord], out_dir: Option<&Path>) -> Result<ResultTable> {
    cfg.matrix.validate()?;
    let mut ckpts = Vec::new();
    for init in &cfg.matrix.inits {
        ckpts.push(match (&init.kind, &init.checkpoint) {
            (InitKind::Scratch, _) => None,
            (_, Some(p)) => Some(Checkpoint::read(p)?),
            (k, None) => return Err(Error::Config(format!("init `{}` needs a checkpoint path", k.name()))),
        });
    }
    let datatypes: Vec<String> = match cfg.matrix.task {
        ExperimentTask::Classify => vec!["all".into()],
        _ => cfg.matrix.datatypes.clone(),
    };
    let mut table = ResultTable {
        task: cfg.matrix.task,
        rows: Vec::new(),
    };
    for &seed in &cfg.matrix.seeds {
        for &size in &cfg.matrix.train_sizes {
            for dt in &datatypes {
                let mut sub = cfg.clone();
                if cfg.matrix.task != ExperimentTask::Classify {
                    sub.matrix.datatypes = vec![dt.clone()];
                }
                let splits = groups_for(&sub, records, size)
                    .and_then(|g| make_splits(&g, cfg.matrix.folds, cfg.matrix.heldout_per_datatype, cfg.matrix.train_fraction, seed));
                for (init, ckpt) in cfg.matrix.inits.iter().zip(&ckpts) {
                    for fold in 0..cfg.matrix.folds {
                        let cell = Cell {
                            init,
                            ckpt: ckpt.as_ref(),
                            datatype: dt.clone(),
                            size,
                            fold,
                            seed,
                        };
                        table.rows.push(execute(cfg, &cell, records, splits.as_ref(), out_dir));
                    }
                }
                if cfg.matrix.task == ExperimentTask::Classify && cfg.matrix.include_pca {
                    for fold in 0..cfg.matrix.folds {
                        table.rows.push(pca_row(cfg, records, splits.as_ref(), size, fold, seed));
                    }
                }
            }
        }
    }
    Ok(table)
}

fn execute(cfg: &ExperimentConfig, cell: &Cell, records: &[PatchRecord], splits: std::result::Result<&Splits, &Error>, out_dir: Option<&Path>) -> ResultRow {
    let key = serde_json::json!({
        "task": cfg.matrix.task,
        "init": cell.init,
        "init_hash": cell.ckpt.map(|c| c.manifest.config_hash.clone()),
        "datatype": cell.datatype,
        "train_size": cell.size,
        "fold": cell.fold,
        "seed": cell.seed,
        "finetune": cfg.finetune,
        "corpus": cfg.corpus,
        "blur": cfg.blur,
    });
    let run = short_hash(&key);
    let mut row = ResultRow {
        method: cell.init.kind.name().into(),
        datatype: cell.datatype.clone(),
        regime: regime_name(cell.size),
        train_size: cell.size,
        fold: cell.fold,
        seed: cell.seed,
        metrics: BTreeMap::new(),
        status: CellStatus::Ok,
        run: run.clone(),
    };
    let splits = match splits {
        Ok(s) => s,
        Err(e) => {
            row.status = CellStatus::Failed { error: e.to_string() };
            return row;
        }
    };
    let result = (|| -> Result<BTreeMap<String, f64>> {
        let dir = match out_dir.filter(|_| cfg.matrix.save_artifacts) {
            Some(d) => {
                let d = d.join(&run);
                fs::create_dir_all(&d).map_err(io_err(&d))?;
                write_json(&d.join("config.json"), &key)?;
                Some(d)
            }
            None => None,
        };
        let fold = &splits.folds[cell.fold];
        let m = catch_unwind(AssertUnwindSafe(|| run_cell(cfg, cell, records, fold, &splits.test, dir.as_deref())))
            .map_err(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                invalid(format!("cell panicked: {msg}"))
            })??;
        if let Some(d) = &dir {
            write_json(&d.join("metrics.json"), &m)?;
        }
        Ok(m)
    })();
    match result {
        Ok(m) => row.metrics = m,
        Err(e) => {
            log::error!("cell {} {} {} fold {} failed: {e}", row.method, row.datatype, row.regime, row.fold);
            row.status = CellStatus::Failed { error: e.to_string() };
        }
    }
    row
}

fn pca_row(cfg: &ExperimentConfig, records: &[PatchRecord], splits: std::result::Result<&Splits, &Error>, size: usize, fold: usize, seed: u64) -> ResultRow {
    let mut row = ResultRow {
        method: "pca".into(),
        datatype: "all".into(),
        regime: regime_name(size),
        train_size: size,
        fold,
        seed,
        metrics: BTreeMap::new(),
        status: CellStatus::Ok,
        run: String::new(),
    };
    let r = match splits {
        Ok(s) => pca_baseline(
            &select(records, &s.folds[fold].train),
            &select(records, &s.test),
            &class_labels(),
            cfg.matrix.pca_components,
        ),
        Err(e) => {
            row.status = CellStatus::Failed { error: e.to_string() };
            return row;
        }
    };
    match r {
        Ok(s) => row.metrics = BTreeMap::from([("accuracy".to_string(), s.accuracy), ("macro_f1".to_string(), s.macro_f1)]),
        Err(e) => row.status = CellStatus::Failed { error: e.to_string() },
    }
    row
}

/// Writes `results.json`, `results.md` and one `scaling_<metric>.svg` per metric.
pub fn emit_report(table: &ResultTable, outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    let summary = table.summary();
    let mut files = Vec::new();
    let json = outdir.join("results.json");
    write_json(&json, &serde_json::json!({"table": table, "summary": summary}))?;
    files.push(json);
    let md = outdir.join("results.md");
    fs::write(&md, markdown(table, &summary)).map_err(io_err(&md))?;
    files.push(md);
    let metrics: Vec<String> = {
        let mut m: Vec<String> = summary.iter().map(|s| s.metric.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    for metric in metrics {
        let p = outdir.join(format!("scaling_{metric}.svg"));
        plot_scaling(&summary, &metric, &p)?;
        files.push(p);
    }
    Ok(files)
}

/// Reads the table back from a `results.json` written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<ResultTable> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    let v: serde_json::Value = serde_json::from_str(&s)?;
    Ok(serde_json::from_value(v["table"].clone())?)
}

fn markdown(table: &ResultTable, summary: &[SummaryRow]) -> String {
    let mut s = format!("# Results ({:?})\n\n", table.task);
    if summary.is_empty() {
        s.push_str("No completed cells.\n");
    }
    let mut regimes: Vec<(usize, String)> = summary.iter().map(|r| (r.train_size, r.regime.clone())).collect();
    regimes.sort();
    regimes.dedup();
    let mut metrics: Vec<&str> = summary.iter().map(|r| r.metric.as_str()).collect();
    metrics.sort();
    metrics.dedup();
    for m in metrics {
        s.push_str(&format!("## {m}\n\n| method | datatype |"));
        for (_, r) in &regimes {
            s.push_str(&format!(" {r} |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(regimes.len()));
        s.push('\n');
        let mut keys: Vec<(&str, &str)> = summary
            .iter()
            .filter(|r| r.metric == m)
            .map(|r| (r.method.as_str(), r.datatype.as_str()))
            .collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        for (method, dt) in keys {
            s.push_str(&format!("| {method} | {dt} |"));
            for (n, _) in &regimes {
                match summary
                    .iter()
                    .find(|r| r.metric == m && r.method == method && r.datatype == dt && r.train_size == *n)
                {
                    Some(r) => s.push_str(&format!(" {:.4} ± {:.4} |", r.mean, r.std)),
                    None => s.push_str(" – |"),
                }
            }
            s.push('\n');
        }
        s.push('\n');
    }
    let failed: Vec<&ResultRow> = table
        .rows
        .iter()
        .filter(|r| matches!(r.status, CellStatus::Failed { .. }))
        .collect();
    if !failed.is_empty() {
        s.push_str("## Failed cells\n\n");
        for r in failed {
            if let CellStatus::Failed { error } = &r.status {
                s.push_str(&format!("- {} {} {} fold {} seed {}: {error}\n", r.method, r.datatype, r.regime, r.fold, r.seed));
            }
        }
    }
    s
}

fn plot_scaling(summary: &[SummaryRow], metric: &str, path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.metric == metric).collect();
    let xs: Vec<usize> = rows.iter().map(|r| r.train_size).collect();
    let (xmin, xmax) = (*xs.iter().min().unwrap_or(&0), *xs.iter().max().unwrap_or(&1));
    let (mut ymin, mut ymax) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.mean - r.std), b.max(r.mean + r.std)));
    if !(ymax > ymin) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let pad = 0.05 * (ymax - ymin);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(metric, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(xmin as f64 - 0.5..xmax as f64 + 0.5, ymin - pad..ymax + pad)?;
        chart.configure_mesh().x_desc("train size").y_desc(metric).draw()?;
        let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        for r in &rows {
            series
                .entry((r.method.clone(), r.datatype.clone()))
                .or_default()
                .push((r.train_size as f64, r.mean));
        }
        for (i, ((method, dt), mut pts)) in series.into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                .label(format!("{method} / {dt}"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| invalid(format!("{}: plot failed: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic_and_disjointness() {
        let g = BTreeMap::from([("a".to_string(), ((0..17).collect::<Vec<_>>(), 15))]);
        let s = make_splits(&g, 1, 2, 0.8, 9).unwrap();
        assert_eq!(s.folds[0].train.len(), 12);
        assert_eq!(s.folds[0].val.len(), 3);
        assert_eq!(s, make_splits(&g, 1, 2, 0.8, 9).unwrap());
        for t in &s.test {
            assert!(!s.folds[0].train.contains(t) && !s.folds[0].val.contains(t));
        }
        match make_splits(&g, 1, 3, 0.8, 9) {
            Err(Error::Insufficient { datatype, .. }) => assert_eq!(datatype, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn per_class_sizes_sum() {
        assert_eq!(per_class_sizes(56, 12).iter().sum::<usize>(), 56);
        assert_eq!(per_class_sizes(56, 12)[0], 5);
        assert_eq!(per_class_sizes(56, 12)[11], 4);
    }

    fn blob_record(label: &str, bright: bool, seed: u64) -> PatchRecord {
        let v = Volume::from_fn(1, [16; 3], |_, z, y, x| {
            let base = if bright == (z < 8) { 0.8 } else { 0.2 };
            let h = fnv1a(&[seed as u8, z as u8, y as u8, x as u8]);
            base + 0.05 * ((h % 1000) as f32 / 1000.0 - 0.5)
        });
        let mut p = PatchRecord::new(v, format!("t{seed}"), seed);
        p.label = Some(label.into());
        p
    }

    #[test]
    fn pca_separable_and_report_round_trip() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let train: Vec<PatchRecord> = (0..10).map(|i| blob_record(&classes[i % 2], i % 2 == 0, i as u64)).collect();
        let test: Vec<PatchRecord> = (10..16).map(|i| blob_record(&classes[i % 2], i % 2 == 0, i as u64)).collect();
        let s = pca_baseline(&train, &test, &classes, 4).unwrap();
        assert_eq!(s.accuracy, 1.0);

        let dir = tempfile::tempdir().unwrap();
        let empty = ResultTable::default();
        let files = emit_report(&empty, dir.path()).unwrap();
        assert_eq!(read_report(&files[0]).unwrap(), empty);

        let mut t = ResultTable::default();
        for (m, v) in [("scratch", 0.4), ("image_text", 0.6)] {
            for (size, f) in [(5, 0), (5, 1), (10, 0)] {
                t.rows.push(ResultRow {
                    method: m.into(),
                    datatype: "nuclei".into(),
                    regime: regime_name(size),
                    train_size: size,
                    fold: f,
                    seed: 0,
                    metrics: BTreeMap::from([("total_dice".to_string(), v + 0.1 * f as f64 + 1e-17)]),
                    status: CellStatus::Ok,
                    run: String::new(),
                });
            }
        }
        t.rows.push(ResultRow {
            status: CellStatus::Failed { error: "boom".into() },
            metrics: BTreeMap::new(),
            ..t.rows[0].clone()
        });
        let files = emit_report(&t, dir.path()).unwrap();
        assert_eq!(read_report(&files[0]).unwrap(), t);
        let svg = dir.path().join("scaling_total_dice.svg");
        assert!(fs::metadata(&svg).unwrap().len() > 0);
        assert!((t.mean("scratch", "nuclei", 5, "total_dice").unwrap() - 0.45).abs() < 1e-12);
    }
}
