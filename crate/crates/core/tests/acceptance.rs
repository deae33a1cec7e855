//! End-to-end acceptance checks. Each check prints one PASS/FAIL line.
//! Pass check numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 5 7`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use lsmfm::checkpoint::Checkpoint;
use lsmfm::finetune::{deblur_terms, gradient_magnitude, high_pass, DeblurLossWeights, DeblurTerms, FinetuneConfig};
use lsmfm::nets::batch_tensor;
use lsmfm::harness::{build_corpus, run_matrix, CorpusSpec, ExperimentConfig, ExperimentTask, InitKind, InitSpec, MatrixSpec};
use lsmfm::metrics;
use lsmfm::pretrain::{
    apply_mask, generate_mask, loss_clip, masked_token_indices, pretrain_loop, total_loss, LossWeights, MaskSpec,
    PretrainConfig, PretrainModel,
};
use lsmfm::synth::{generate_phantom, gaussian_blur, Kind, PhantomSpec};
use lsmfm::tensor::gradcheck::Probe;
use lsmfm::tensor::{Graph, ParamStore, Tensor};
use lsmfm::volume_io::{read_container, write_container, Mask, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 -------------------------------------------------------------------------

fn additivity() -> Result<String, String> {
    let mut r = rng(1);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let w = LossWeights {
            lambda_dist: r.gen_range(0.0..10.0),
            lambda_rec: r.gen_range(0.0..10.0),
            lambda_align: r.gen_range(0.0..10.0),
            lambda_clip: r.gen_range(0.0..10.0),
        };
        let parts: [f64; 4] = std::array::from_fn(|_| r.gen_range(0.0..20.0));
        let got = total_loss(parts, &w).map_err(e2s)?;
        let oracle = w.lambda_dist * parts[0] + w.lambda_rec * parts[1] + w.lambda_align * parts[2] + w.lambda_clip * parts[3];
        let rel = (got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("1000 draws, max relative error {worst:.1e}"))
}

// 2 -------------------------------------------------------------------------
//
// Finite differences of an f32 loss resolve a derivative only down to
// roughly 1e-7 |L| / h. Coordinates are drawn from those whose analytic derivative
// is at least RESOLVABLE times the term's largest component; the remaining
// coordinates are probed with an absolute bound at that resolution. Terms
// built on |.| are differenced on their local linear branch: the sign of
// every |.| argument is frozen at the unperturbed point.

const COORDS: usize = 20;
const SMALL_COORDS: usize = 5;
const REL_TOL: f64 = 1e-3;
const RESOLVABLE: f64 = 1e-2;
const PARAM_H0: f32 = 4e-2;
// Per deblur term; the gradient magnitude is smoothed at sqrt(1e-6) = 1e-3,
// so steps for the edge term start below that scale.
const INPUT_H0: [f32; 4] = [2e-2, 2e-2, 2e-3, 2e-2];

/// Ridders' extrapolation of central differences with shrinking steps,
/// returning the tableau entry with the smallest internal error estimate.
fn ridders(mut f: impl FnMut(f32) -> f64, x0: f32, h0: f32) -> f64 {
    const SHRINK: f64 = 1.4;
    const TABLE: usize = 16;
    const SAFE: f64 = 2.0;
    let mut central = |h: f64| {
        let (xp, xm) = (x0 + h as f32, x0 - h as f32);
        (f(xp) - f(xm)) / (xp as f64 - xm as f64)
    };
    let mut a = [[0f64; TABLE]; TABLE];
    let mut h = h0 as f64;
    a[0][0] = central(h);
    let (mut best, mut err) = (a[0][0], f64::INFINITY);
    for i in 1..TABLE {
        h /= SHRINK;
        a[0][i] = central(h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    best
}

struct TermCheck {
    worst_rel: f64,
    worst_small: f64,
    floor: f64,
}

fn judge(name: &str, big: &[Probe], small: &[Probe], floor: f64) -> Result<TermCheck, String> {
    let worst = big.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).ok_or(format!("{name}: no coordinates"))?;
    ensure(big.len() == COORDS, || format!("{name}: only {} resolvable coordinates", big.len()))?;
    ensure(worst.rel_err() < REL_TOL, || {
        format!(
            "{name}: {} analytic {:.6e} numeric {:.6e} rel {:.2e}",
            worst.label,
            worst.analytic,
            worst.numeric,
            worst.rel_err()
        )
    })?;
    let mut worst_small = 0f64;
    for p in small {
        worst_small = worst_small.max(p.abs_err());
        ensure(p.abs_err() <= floor, || {
            format!("{name}: {} analytic {:.3e} numeric {:.3e} exceeds floor {floor:.1e}", p.label, p.analytic, p.numeric)
        })?;
    }
    Ok(TermCheck {
        worst_rel: worst.rel_err(),
        worst_small,
        floor,
    })
}

/// Splits coordinates into resolvable ones (spread over tensors, `COORDS`
/// of them) and a few small ones.
fn pick_coords(
    grads: &[Vec<f32>],
    floor: f64,
    r: &mut ChaCha8Rng,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut big: Vec<Vec<usize>> = Vec::new();
    let mut tensor_of: Vec<usize> = Vec::new();
    let mut small = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let b: Vec<usize> = (0..g.len()).filter(|&i| (g[i] as f64).abs() >= floor).collect();
        small.extend((0..g.len()).filter(|&i| (g[i] as f64).abs() < floor).map(|i| (t, i)));
        if !b.is_empty() {
            big.push(b);
            tensor_of.push(t);
        }
    }
    let mut order: Vec<usize> = (0..big.len()).collect();
    order.shuffle(r);
    let mut chosen = Vec::new();
    let mut seen = HashSet::new();
    let total: usize = big.iter().map(Vec::len).sum();
    while chosen.len() < COORDS.min(total) {
        let k = order[chosen.len() % order.len()];
        let i = *big[k].choose(r).expect("nonempty");
        if seen.insert((tensor_of[k], i)) {
            chosen.push((tensor_of[k], i));
        }
    }
    let small = small.choose_multiple(r, SMALL_COORDS).copied().collect();
    (chosen, small)
}

/// Centre 16³ crop of a 32³ phantom.
fn phantom16(kind: Kind, profile: u8, seed: u64) -> Result<lsmfm::volume_io::PatchRecord, String> {
    let mut p = generate_phantom(&PhantomSpec::new(kind, profile, seed), 32).map_err(e2s)?;
    p.image = p.image.crop([8; 3], [16; 3]).map_err(e2s)?;
    p.mask = p.mask.map(|m| m.crop([8; 3], [16; 3])).transpose().map_err(e2s)?;
    Ok(p)
}

struct PretrainProbe {
    model: PretrainModel,
    imgs: Vec<Volume>,
    caps: Vec<String>,
    masks: Vec<MaskSpec>,
}

impl PretrainProbe {
    fn new() -> Result<Self, String> {
        let mut cfg = PretrainConfig::default();
        cfg.backbone.edge = 16;
        cfg.backbone.depth = 2;
        cfg.shared_dim = 16;
        cfg.text_dim = 32;
        cfg.seed = 11;
        let model = PretrainModel::new(&cfg).map_err(e2s)?;
        let mut r = rng(12);
        let (mut imgs, mut caps, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for (i, kind) in [Kind::Nuclei, Kind::Plaques, Kind::Vessels].into_iter().enumerate() {
            let p = phantom16(kind, i as u8, 500 + i as u64)?;
            imgs.push(p.image.select_channel(0));
            caps.push(p.caption.clone().expect("phantom caption"));
            masks.push(generate_mask(16, 4, 0.6, &mut r).map_err(e2s)?);
        }
        Ok(Self { model, imgs, caps, masks })
    }

    fn term(&self, g: &mut Graph, k: usize) -> lsmfm::tensor::Var {
        let iv: Vec<&Volume> = self.imgs.iter().collect();
        let cv: Vec<&str> = self.caps.iter().map(String::as_str).collect();
        let (parts, _) = self.model.losses(g, &iv, Some(&cv), &self.masks).expect("losses");
        parts[k].expect("term present")
    }

    /// Reconstruction residual `recon - x` and the masked-voxel weights.
    fn rec_residual(&self) -> (Vec<f32>, Vec<f32>) {
        let x = batch_tensor(self.imgs.iter()).expect("batch");
        let masked: Vec<Volume> = self.imgs.iter().zip(&self.masks).map(|(v, m)| apply_mask(v, m).expect("mask")).collect();
        let mut g = Graph::new();
        let xm = g.constant(batch_tensor(masked.iter()).expect("batch"));
        let out = self.model.encoder.forward(&mut g, &self.model.student, xm).expect("forward");
        let recon = self.model.decoder.forward(&mut g, &self.model.heads, &out.features);
        let r: Vec<f32> = g.value(recon).data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let w: Vec<f32> = self.masks.iter().flat_map(|m| m.voxel_mask()).map(|h| h as u8 as f32).collect();
        (r, w)
    }

    /// Value of term `k`; `signs` selects the frozen-sign branch of the reconstruction term.
    fn value(&self, k: usize, signs: Option<&[f32]>) -> f64 {
        match signs {
            Some(s) => {
                let (r, w) = self.rec_residual();
                let count = w.iter().filter(|&&v| v != 0.0).count() as f64;
                r.iter().zip(&w).zip(s).map(|((r, w), s)| (*r as f64) * (*w as f64) * (*s as f64)).sum::<f64>() / count
            }
            None => {
                let mut g = Graph::new();
                let v = self.term(&mut g, k);
                g.scalar(v)
            }
        }
    }

    fn store(&mut self, s: usize) -> &mut ParamStore {
        match s {
            0 => &mut self.model.student,
            1 => &mut self.model.heads,
            _ => &mut self.model.text_store,
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gradcheck_pretrain() -> Result<Vec<String>, String> {
    let mut pp = PretrainProbe::new()?;
    let names = ["l_dist", "l_rec", "l_align", "l_clip"];
    let mut lines = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mut g = Graph::new();
        let term = pp.term(&mut g, k);
        g.backward(term);
        // flatten the three stores into one list of tensors
        let mut slots: Vec<(usize, lsmfm::tensor::ParamId)> = Vec::new();
        let mut grads: Vec<Vec<f32>> = Vec::new();
        for s in 0..3 {
            let store = pp.store(s);
            let ids: Vec<_> = store.ids().collect();
            for (id, gr) in ids.into_iter().zip(g.param_grads(store)) {
                if let Some(t) = gr {
                    slots.push((s, id));
                    grads.push(t.data().to_vec());
                }
            }
        }
        let gmax = grads.iter().flatten().fold(0f64, |m, &v| m.max((v as f64).abs()));
        let floor = RESOLVABLE * gmax;
        let (big, small) = pick_coords(&grads, floor, &mut rng(100 + k as u64));
        let signs: Option<Vec<f32>> = (k == 1).then(|| pp.rec_residual().0.into_iter().map(sign).collect());
        let mut probe = |coords: &[(usize, usize)]| -> Vec<Probe> {
            coords
                .iter()
                .map(|&(t, i)| {
                    let (s, id) = slots[t];
                    let x0 = pp.store(s).get(id).data()[i];
                    let numeric = ridders(
                        |x| {
                            pp.store(s).get_mut(id).data_mut()[i] = x;
                            pp.value(k, signs.as_deref())
                        },
                        x0,
                        PARAM_H0,
                    );
                    pp.store(s).get_mut(id).data_mut()[i] = x0;
                    Probe {
                        label: format!("{}[{i}]", pp.store(s).name(id)),
                        analytic: grads[t][i] as f64,
                        numeric,
                    }
                })
                .collect()
        };
        let (pb, ps) = (probe(&big), probe(&small));
        let c = judge(name, &pb, &ps, floor)?;
        lines.push(format!("{name} {:.1e} (small {:.1e} <= {:.1e})", c.worst_rel, c.worst_small, c.floor));
    }
    Ok(lines)
}

fn gradcheck_deblur() -> Result<Vec<String>, String> {
    let sharp = phantom16(Kind::Vessels, 1, 77)?.image;
    let mut blurred = gaussian_blur(&sharp, [2.0, 1.0, 1.0]);
    let mut r = rng(21);
    for v in blurred.data_mut() {
        *v = (*v + r.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    let shape = [1, sharp.channels(), 16, 16, 16];
    let target = Tensor::new(&shape, sharp.data().to_vec());
    let mut x = Tensor::new(&shape, blurred.data().to_vec());
    let w = DeblurLossWeights::default();
    let hf_sigma = FinetuneConfig::default().hf_sigma;
    let names = ["l1", "ssim", "edge", "hf"];
    let pick = |t: &DeblurTerms, k: usize| [t.l1, t.ssim, t.edge, t.hf][k];
    // argument of |.| for the l1, edge and hf terms
    let argument = |x: &Tensor, k: usize| -> Vec<f32> {
        let mut g = Graph::new();
        let (xv, tv) = (g.constant(x.clone()), g.constant(target.clone()));
        let (a, b) = match k {
            0 => (xv, tv),
            2 => (gradient_magnitude(&mut g, xv), gradient_magnitude(&mut g, tv)),
            _ => (high_pass(&mut g, xv, hf_sigma), high_pass(&mut g, tv, hf_sigma)),
        };
        g.value(a).data().iter().zip(g.value(b).data()).map(|(p, q)| p - q).collect()
    };
    let mut lines = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let t = deblur_terms(&mut g, xv, &target, &w, hf_sigma).map_err(e2s)?;
        g.backward(pick(&t, k));
        let analytic = g.grad(xv).expect("gradient reached restored volume").data().to_vec();
        let floor = RESOLVABLE * analytic.iter().fold(0f64, |m, &v| m.max((v as f64).abs()));
        let (big, small) = pick_coords(std::slice::from_ref(&analytic), floor, &mut rng(200 + k as u64));
        let signs: Option<Vec<f32>> = (k != 1).then(|| argument(&x, k).into_iter().map(sign).collect());
        let mut probe = |coords: &[(usize, usize)]| -> Vec<Probe> {
            coords
                .iter()
                .map(|&(_, i)| {
                    let x0 = x.data()[i];
                    let numeric = ridders(
                        |v| {
                            x.data_mut()[i] = v;
                            match &signs {
                                Some(s) => {
                                    let a = argument(&x, k);
                                    a.iter().zip(s).map(|(a, s)| (*a as f64) * (*s as f64)).sum::<f64>() / a.len() as f64
                                }
                                None => {
                                    let mut g = Graph::new();
                                    let xv = g.constant(x.clone());
                                    let t = deblur_terms(&mut g, xv, &target, &w, hf_sigma).expect("terms");
                                    g.scalar(pick(&t, k))
                                }
                            }
                        },
                        x0,
                        INPUT_H0[k],
                    );
                    x.data_mut()[i] = x0;
                    Probe {
                        label: format!("x[{i}]"),
                        analytic: analytic[i] as f64,
                        numeric,
                    }
                })
                .collect()
        };
        let (pb, ps) = (probe(&big), probe(&small));
        let c = judge(name, &pb, &ps, floor)?;
        lines.push(format!("{name} {:.1e}", c.worst_rel));
    }
    Ok(lines)
}

fn gradients() -> Result<String, String> {
    let mut lines = gradcheck_pretrain()?;
    lines.extend(gradcheck_deblur()?);
    Ok(format!("{COORDS} coordinates per term, max rel: {}", lines.join(", ")))
}

// 3 -------------------------------------------------------------------------

fn ema_contract() -> Result<String, String> {
    let mut cfg = PretrainConfig::default();
    cfg.backbone.edge = 16;
    cfg.backbone.depth = 2;
    cfg.seed = 3;
    let m = cfg.ema_momentum as f64;
    let mut model = PretrainModel::new(&cfg).map_err(e2s)?;
    ensure(!model.optim.manages(&model.teacher), || "optimizer manages the teacher store".into())?;
    ensure(model.teacher.ids().all(|id| model.teacher.is_frozen(id)), || "teacher parameter not frozen".into())?;
    let mut r = rng(4);
    let recs: Vec<_> = (0..2)
        .map(|i| phantom16(Kind::Nuclei, i, 40 + i as u64))
        .collect::<Result<_, _>>()?;
    let imgs: Vec<&Volume> = recs.iter().map(|p| &p.image).collect();
    let caps: Vec<&str> = recs.iter().map(|p| p.caption.as_deref().expect("caption")).collect();
    let mut worst = 0f64;
    for step in 0..10 {
        let prev = model.teacher.clone();
        let masks: Vec<MaskSpec> = (0..2).map(|_| generate_mask(16, 4, 0.6, &mut r)).collect::<Result<_, _>>().map_err(e2s)?;
        let before: Vec<Tensor> = model.student.ids().map(|id| model.student.get(id).clone()).collect();
        model.train_step(&imgs, Some(&caps), &masks, 1e-2).map_err(e2s)?;
        let mut moved = false;
        for (j, id) in model.teacher.ids().enumerate() {
            let (t, p, s) = (model.teacher.get(id).data(), prev.get(id).data(), model.student.get(id).data());
            moved |= before[j].data() != s;
            for i in 0..t.len() {
                let oracle = m * p[i] as f64 + (1.0 - m) * s[i] as f64;
                worst = worst.max((t[i] as f64 - oracle).abs());
            }
        }
        ensure(moved, || format!("student unchanged at step {step}"))?;
        ensure(!model.optim.manages(&model.teacher), || "optimizer acquired the teacher".into())?;
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("10 steps, max |teacher - oracle| {worst:.1e}, optimizer holds no teacher parameters"))
}

// 4 -------------------------------------------------------------------------

fn token_oracle(m: &MaskSpec, stride: usize) -> Vec<usize> {
    let vm = m.voxel_mask();
    let e = m.edge;
    let grid = e / stride;
    let mut out = Vec::new();
    for tz in 0..grid {
        for ty in 0..grid {
            for tx in 0..grid {
                let mut count = 0;
                for z in tz * stride..(tz + 1) * stride {
                    for y in ty * stride..(ty + 1) * stride {
                        for x in tx * stride..(tx + 1) * stride {
                            count += vm[(z * e + y) * e + x] as usize;
                        }
                    }
                }
                if 2 * count >= stride.pow(3) {
                    out.push((tz * grid + ty) * grid + tx);
                }
            }
        }
    }
    out
}

fn masking() -> Result<String, String> {
    let mut r = rng(5);
    let m = generate_mask(96, 8, 0.5, &mut r).map_err(e2s)?;
    ensure(m.blocks.len() == 864, || format!("{} blocks, expected 864", m.blocks.len()))?;
    let img = Volume::from_fn(2, [96; 3], |c, z, y, x| ((c * 7 + z * 3 + y * 5 + x) % 17) as f32 / 16.0 + 0.01);
    let masked = apply_mask(&img, &m).map_err(e2s)?;
    let vm = m.voxel_mask();
    for c in 0..2 {
        for (i, (&a, &b)) in img.channel(c).iter().zip(masked.channel(c)).enumerate() {
            if !vm[i] && a.to_bits() != b.to_bits() {
                return Err(format!("unmasked voxel {i} of channel {c} changed"));
            }
            if vm[i] && a == b {
                return Err(format!("masked voxel {i} of channel {c} kept its value"));
            }
        }
    }
    let configs = [(16, 4, 4), (16, 8, 4), (32, 4, 8), (32, 8, 4), (24, 4, 8), (32, 16, 8)];
    for t in 0..100 {
        let (edge, block, stride) = configs[t % configs.len()];
        if edge % stride != 0 {
            continue;
        }
        let ratio = r.gen_range(0.0..=1.0);
        let m = generate_mask(edge, block, ratio, &mut r).map_err(e2s)?;
        let want = ((ratio * m.total_blocks() as f64).round()) as usize;
        ensure(m.blocks.len() == want, || format!("ratio {ratio}: {} blocks, expected {want}", m.blocks.len()))?;
        let got = masked_token_indices(&m, stride);
        let oracle = token_oracle(&m, stride);
        ensure(got == oracle, || format!("case {t} (edge {edge}, block {block}, stride {stride}): tokens differ"))?;
    }
    Ok("864 blocks at 96/8/0.5, apply_mask touches masked voxels only, 100 token sets match the overlap oracle".into())
}

// 5 -------------------------------------------------------------------------

fn clip_closed_form() -> Result<String, String> {
    let mut worst = 0f64;
    let mut r = rng(6);
    for b in [2usize, 4, 8, 16] {
        let d = 12;
        let mut v: Vec<f32> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let rows: Vec<f32> = (0..b).flat_map(|_| v.clone()).collect();
        let mut g = Graph::new();
        let img = g.constant(Tensor::new(&[b, d], rows.clone()));
        let txt = g.constant(Tensor::new(&[b, d], rows));
        let tau = g.constant(Tensor::scalar(0.07));
        let l = loss_clip(&mut g, img, txt, tau).map_err(e2s)?;
        let err = (g.scalar(l) - (b as f64).ln()).abs();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("B = {b}: loss {} vs ln B {}", g.scalar(l), (b as f64).ln()))?;
    }
    Ok(format!("B in {{2, 4, 8, 16}}, max |loss - ln B| {worst:.1e}"))
}

// 6 -------------------------------------------------------------------------

fn small_corpus(per_kind: usize, seed: u64) -> Vec<lsmfm::volume_io::PatchRecord> {
    build_corpus(&CorpusSpec {
        per_kind,
        seed,
        ..CorpusSpec::default()
    })
    .expect("corpus")
}

fn image_only_equivalence() -> Result<String, String> {
    let data = small_corpus(2, 61);
    let mut a = PretrainConfig::default();
    a.epochs = 5;
    a.seed = 62;
    a.image_only = true;
    let mut b = a.clone();
    b.image_only = false;
    b.weights.lambda_align = 0.0;
    b.weights.lambda_clip = 0.0;
    let ra = pretrain_loop(&data, &a, None).map_err(e2s)?;
    let rb = pretrain_loop(&data, &b, None).map_err(e2s)?;
    ensure(ra.history.len() == 5 && rb.history.len() == 5, || "expected 5 epochs each".into())?;
    let mut worst = 0f64;
    for (x, y) in ra.history.iter().zip(&rb.history) {
        for (p, q) in [
            (x.train.l_dist, y.train.l_dist),
            (x.train.l_rec, y.train.l_rec),
            (x.val.l_dist, y.val.l_dist),
            (x.val.l_rec, y.val.l_rec),
        ] {
            worst = worst.max((p - q).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max trajectory difference {worst:e}"))?;
    ensure(rb.history.iter().any(|h| h.train.l_align != 0.0), || "text run computed no alignment term".into())?;
    Ok(format!("5 epochs, max |l_dist/l_rec difference| {worst:.1e}"))
}

// 7 -------------------------------------------------------------------------

fn random_mask(r: &mut ChaCha8Rng, shape: [usize; 3], density: f64) -> Mask {
    Mask::new(shape, (0..shape.iter().product()).map(|_| r.gen_bool(density) as u8).collect()).expect("mask")
}

/// Components by union-find over face, edge and corner neighbours.
fn components_oracle(m: &Mask) -> Vec<BTreeSet<usize>> {
    let [d, h, w] = m.shape();
    let mut parent: Vec<usize> = (0..m.len()).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get(z, y, x) {
                    continue;
                }
                for z2 in z.saturating_sub(1)..(z + 2).min(d) {
                    for y2 in y.saturating_sub(1)..(y + 2).min(h) {
                        for x2 in x.saturating_sub(1)..(x + 2).min(w) {
                            if m.get(z2, y2, x2) {
                                let (a, b) = (find(&mut parent, idx(z, y, x)), find(&mut parent, idx(z2, y2, x2)));
                                parent[a] = b;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for i in 0..m.len() {
        if m.data()[i] != 0 {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().insert(i);
        }
    }
    groups.into_values().collect()
}

fn set_dice(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

/// Best total Dice over every injective pairing, by exhaustive search.
fn best_assignment(d: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
    if row == d.len() {
        return 0.0;
    }
    let mut best = best_assignment(d, row + 1, used);
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            best = best.max(d[row][j] + best_assignment(d, row + 1, used));
            used[j] = false;
        }
    }
    best
}

fn instance_oracle(pred: &Mask, gt: &Mask) -> f64 {
    let (g, p) = (components_oracle(gt), components_oracle(pred));
    let n = g.len().max(p.len());
    if n == 0 {
        return 1.0;
    }
    let d: Vec<Vec<f64>> = g.iter().map(|a| p.iter().map(|b| set_dice(a, b)).collect()).collect();
    best_assignment(&d, 0, &mut vec![false; p.len()]) / n as f64
}

fn ssim_oracle(a: &[f32], b: &[f32], s: [usize; 3], win: usize) -> f64 {
    let (c1, c2) = ((metrics::SSIM_K1).powi(2), (metrics::SSIM_K2).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for z in 0..=s[0] - win {
        for y in 0..=s[1] - win {
            for x in 0..=s[2] - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dz in 0..win {
                    for dy in 0..win {
                        for dx in 0..win {
                            let i = ((z + dz) * s[1] + y + dy) * s[2] + x + dx;
                            xs.push(a[i] as f64);
                            ys.push(b[i] as f64);
                        }
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cov = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn metric_oracles() -> Result<String, String> {
    let mut r = rng(7);
    for case in 0..100 {
        let shape = [r.gen_range(2..7), r.gen_range(2..7), r.gen_range(2..7)];
        let (dp, dg) = (r.gen_range(0.0..0.4), r.gen_range(0.0..0.4));
        let (pred, gt) = (random_mask(&mut r, shape, dp), random_mask(&mut r, shape, dg));

        let inter = pred.data().iter().zip(gt.data()).filter(|(a, b)| **a == 1 && **b == 1).count();
        let (np, ng) = (pred.count(), gt.count());
        let dice_o = if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 };
        let dice = metrics::dice(&pred, &gt).map_err(e2s)?;
        ensure(dice == dice_o, || format!("case {case}: dice {dice} vs {dice_o}"))?;

        let (_, ncomp) = metrics::label_components(&gt);
        let oracle_comps = components_oracle(&gt).len();
        ensure(ncomp == oracle_comps, || format!("case {case}: {ncomp} components vs {oracle_comps}"))?;
        if components_oracle(&pred).len().max(oracle_comps) <= 7 {
            let inst = metrics::instance_dice(&pred, &gt).map_err(e2s)?;
            let o = instance_oracle(&pred, &gt);
            ensure((inst - o).abs() <= 1e-12, || format!("case {case}: instance dice {inst} vs {o}"))?;
        }

        let k = r.gen_range(2..6);
        let n = r.gen_range(1..30);
        let preds: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let gts: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let f1_o = (0..k)
            .map(|c| {
                let tp = preds.iter().zip(&gts).filter(|(p, g)| **p == c && **g == c).count();
                let fp = preds.iter().zip(&gts).filter(|(p, g)| **p == c && **g != c).count();
                let fneg = preds.iter().zip(&gts).filter(|(p, g)| **p != c && **g == c).count();
                let (prec, rec) = (
                    if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
                    if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 },
                );
                if prec + rec == 0.0 {
                    0.0
                } else {
                    2.0 * prec * rec / (prec + rec)
                }
            })
            .sum::<f64>()
            / k as f64;
        let f1 = metrics::macro_f1(&preds, &gts, k).map_err(e2s)?;
        ensure((f1 - f1_o).abs() <= 1e-12, || format!("case {case}: macro F1 {f1} vs {f1_o}"))?;

        let vs = [r.gen_range(3..9), r.gen_range(3..9), r.gen_range(3..9)];
        let win = r.gen_range(1..=vs.iter().copied().min().unwrap().min(5));
        let nv: usize = vs.iter().product();
        let a: Vec<f32> = (0..nv).map(|_| r.gen::<f32>()).collect();
        let b: Vec<f32> = a.iter().map(|v| (v + r.gen_range(-0.3..0.3)).clamp(0.0, 1.0)).collect();
        let s = metrics::ssim3d(&a, &b, vs, win, metrics::SSIM_K1, metrics::SSIM_K2).map_err(e2s)?;
        let so = ssim_oracle(&a, &b, vs, win);
        ensure((s - so).abs() <= 1e-9, || format!("case {case}: ssim {s} vs {so}"))?;

        let mse = a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / nv as f64;
        let po = 10.0 * (1.0 / mse).log10();
        let p = metrics::psnr(&a, &b).map_err(e2s)?;
        ensure((p - po).abs() <= 1e-9, || format!("case {case}: psnr {p} vs {po}"))?;
    }
    Ok("100 cases each for dice, instance dice, macro F1, SSIM and PSNR".into())
}

// 8 -------------------------------------------------------------------------

/// Measured once on this corpus and configuration.
const REFERENCE_GAP: f64 = 0.010_422_976_8;
const GAP_TOL: f64 = 0.05;

fn transfer() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let pre = small_corpus(8, 777);
    let pc = PretrainConfig::default();
    let out = pretrain_loop(&pre, &pc, Some(dir.path())).map_err(e2s)?;
    let ckpt = out.best_path.ok_or("no best checkpoint")?;
    let seg = build_corpus(&CorpusSpec {
        per_kind: 8,
        kinds: vec![Kind::Nuclei],
        ..CorpusSpec::default()
    })
    .map_err(e2s)?;
    let cfg = ExperimentConfig {
        matrix: MatrixSpec {
            train_sizes: vec![5],
            inits: vec![InitSpec::scratch(), InitSpec::from_checkpoint(InitKind::ImageTextCkpt, ckpt)],
            save_artifacts: false,
            ..MatrixSpec::default()
        },
        corpus: CorpusSpec::default(),
        blur: Default::default(),
        finetune: FinetuneConfig::default(),
    };
    let table = run_matrix(&cfg, &seg, None).map_err(e2s)?;
    let failed = table.rows.iter().filter(|r| r.status != lsmfm::harness::CellStatus::Ok).count();
    ensure(failed == 0 && table.rows.len() == 6, || format!("{failed} of {} cells failed", table.rows.len()))?;
    let mean = |m: &str| table.mean(m, "nuclei", 5, "total_dice").ok_or(format!("no {m} mean"));
    let (s, p) = (mean("scratch")?, mean("image_text")?);
    let gap = p - s;
    ensure((gap - REFERENCE_GAP).abs() <= GAP_TOL, || {
        format!("gap {gap:.4} (pretrained {p:.4}, scratch {s:.4}) vs reference {REFERENCE_GAP:.4}")
    })?;
    Ok(format!("pretrained {p:.4} scratch {s:.4} gap {gap:+.4} (reference {REFERENCE_GAP:+.4} ± {GAP_TOL})"))
}

// 9 -------------------------------------------------------------------------

fn deblur_gain() -> Result<String, String> {
    let corpus = build_corpus(&CorpusSpec {
        per_kind: 7,
        kinds: vec![Kind::Nuclei],
        ..CorpusSpec::default()
    })
    .map_err(e2s)?;
    let cfg = ExperimentConfig {
        matrix: MatrixSpec {
            task: ExperimentTask::Deblur,
            train_sizes: vec![5],
            folds: 2,
            save_artifacts: false,
            ..MatrixSpec::default()
        },
        corpus: CorpusSpec::default(),
        blur: Default::default(),
        finetune: FinetuneConfig::default(),
    };
    let table = run_matrix(&cfg, &corpus, None).map_err(e2s)?;
    let mut gains = Vec::new();
    for row in &table.rows {
        ensure(row.status == lsmfm::harness::CellStatus::Ok, || format!("fold {} failed: {:?}", row.fold, row.status))?;
        gains.push(row.metrics["ssim"] - row.metrics["ssim_blurred"]);
    }
    let worst = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(worst >= 0.02, || format!("SSIM gains {gains:?}"))?;
    Ok(format!("SSIM gain per fold {:?}", gains.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>()))
}

// 10 ------------------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let corpus = build_corpus(&CorpusSpec {
        per_kind: 4,
        kinds: vec![Kind::Nuclei],
        ..CorpusSpec::default()
    })
    .map_err(e2s)?;
    let mut ft = FinetuneConfig::default();
    ft.schedule.max_epochs = 3;
    let cfg = ExperimentConfig {
        matrix: MatrixSpec {
            train_sizes: vec![2],
            folds: 2,
            ..MatrixSpec::default()
        },
        corpus: CorpusSpec::default(),
        blur: Default::default(),
        finetune: ft,
    };
    let (d1, d2) = (tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?);
    let j1 = run_matrix(&cfg, &corpus, Some(d1.path())).map_err(e2s)?.to_json().map_err(e2s)?;
    let j2 = run_matrix(&cfg, &corpus, Some(d2.path())).map_err(e2s)?.to_json().map_err(e2s)?;
    ensure(j1 == j2, || "ResultTable JSON differs between identical runs".into())?;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut rec = generate_phantom(&PhantomSpec::new(Kind::Vessels, 2, 9), 40).map_err(e2s)?;
    rec.image.data_mut()[0] = f32::from_bits(0x3e80_0001);
    let path = dir.path().join("v.lsmraw");
    write_container(&rec, &path).map_err(e2s)?;
    let back = read_container(&path).map_err(e2s)?;
    let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&back.image) == bits(&rec.image) && back == rec, || "container round trip differs".into())?;

    let model = PretrainModel::new(&PretrainConfig::default()).map_err(e2s)?;
    let ck = model.to_checkpoint(3, &[]).map_err(e2s)?;
    let cpath = dir.path().join("m.ckpt");
    ck.write(&cpath).map_err(e2s)?;
    let bytes = std::fs::read(&cpath).map_err(e2s)?;
    let ck2 = Checkpoint::read(&cpath).map_err(e2s)?;
    ensure(ck2.to_bytes().map_err(e2s)? == bytes, || "checkpoint re-serialization differs".into())?;
    ensure(ck.bit_eq(&ck2), || "checkpoint tensors differ".into())?;
    let m2 = PretrainModel::from_checkpoint(&ck2).map_err(e2s)?;
    ensure(m2.to_checkpoint(3, &[]).map_err(e2s)?.to_bytes().map_err(e2s)? == bytes, || "model rebuilt from checkpoint differs".into())?;
    Ok(format!("{} byte ResultTable JSON identical, container and checkpoint round trips bit-exact", j1.len()))
}

// 11 ------------------------------------------------------------------------

fn collapse_sentinel() -> Result<String, String> {
    let data = small_corpus(3, 111);
    let mut cfg = PretrainConfig::default();
    cfg.epochs = 50;
    cfg.seed = 112;
    let out = pretrain_loop(&data, &cfg, None).map_err(e2s)?;
    ensure(out.history.len() == 50, || format!("{} epochs logged", out.history.len()))?;
    let min = out.history.iter().map(|h| h.proj_std).fold(f64::INFINITY, f64::min);
    let bad: Vec<usize> = out.history.iter().filter(|h| !(h.proj_std > 1e-3)).map(|h| h.epoch).collect();
    ensure(bad.is_empty(), || format!("projection std <= 1e-3 at epochs {bad:?}"))?;
    Ok(format!("50 epochs, minimum projection std {min:.2e}"))
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("loss additivity", additivity),
        ("gradient suite", gradients),
        ("EMA contract", ema_contract),
        ("masking contract", masking),
        ("contrastive closed form", clip_closed_form),
        ("image-only equivalence", image_only_equivalence),
        ("metric oracles", metric_oracles),
        ("segmentation transfer gap", transfer),
        ("deblurring SSIM gain", deblur_gain),
        ("determinism and persistence", determinism),
        ("collapse sentinel", collapse_sentinel),
    ];
    let only: HashSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {n:>2} {name} [{secs:.1}s]: {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name} [{secs:.1}s]: {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
