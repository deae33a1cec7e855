//! Segmentation, classification and restoration scores.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume_io::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub total_dice: f64,
    pub instance_dice: f64,
    pub n_instances_gt: usize,
    pub n_instances_pred: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsScore {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreScore {
    pub ssim: f64,
    /// `f64::INFINITY` for identical inputs.
    pub psnr_db: f64,
}

/// How predicted and ground-truth components are paired in [`instance_dice`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Repeatedly take the highest-Dice pair among unmatched components.
    Greedy,
    /// Maximum total Dice assignment.
    #[default]
    Optimal,
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        total += (p + g) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice on `{0,1}`-valued float arrays; any other value is rejected.
pub fn dice_values(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let to_mask = |v: &[f32]| -> Result<Mask> {
        let bytes = v
            .iter()
            .map(|&x| match x {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                _ => Err(invalid(format!("non-binary value {x}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new([1, 1, bytes.len().max(1)], bytes)
    };
    if pred.len() != gt.len() {
        return Err(invalid("length mismatch"));
    }
    dice(&to_mask(pred)?, &to_mask(gt)?)
}

const NEIGHBORS: usize = 26;

fn offsets() -> [(isize, isize, isize); NEIGHBORS] {
    let mut out = [(0, 0, 0); NEIGHBORS];
    let mut k = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dz, dy, dx) != (0, 0, 0) {
                    out[k] = (dz, dy, dx);
                    k += 1;
                }
            }
        }
    }
    out
}

/// 26-connected labeling. Labels start at 1 in raster order of each
/// component's first voxel; background is 0.
pub fn label_components(m: &Mask) -> (Vec<u32>, usize) {
    let [d, h, w] = m.shape();
    let mut labels = vec![0u32; m.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let offs = offsets();
    for start in 0..m.len() {
        if m.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
            for &(dz, dy, dx) in &offs {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (nz as usize * h + ny as usize) * w + nx as usize;
                if m.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next as usize)
}

/// Voxel count of each component, indexed by `label - 1`.
pub fn component_sizes(labels: &[u32], n: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; n];
    for &l in labels {
        if l > 0 {
            sizes[l as usize - 1] += 1;
        }
    }
    sizes
}

/// Pairwise Dice of overlapping (gt, pred) components, keyed by 0-based ids.
fn overlap_dice(gl: &[u32], ng: usize, pl: &[u32], np: usize) -> BTreeMap<(usize, usize), f64> {
    let gs = component_sizes(gl, ng);
    let ps = component_sizes(pl, np);
    let mut inter: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&g, &p) in gl.iter().zip(pl) {
        if g > 0 && p > 0 {
            *inter.entry((g as usize - 1, p as usize - 1)).or_default() += 1;
        }
    }
    inter
        .into_iter()
        .map(|((g, p), i)| ((g, p), 2.0 * i as f64 / (gs[g] + ps[p]) as f64))
        .collect()
}

fn greedy_total(pairs: &BTreeMap<(usize, usize), f64>, ng: usize, np: usize) -> f64 {
    let mut list: Vec<((usize, usize), f64)> = pairs.iter().map(|(&k, &v)| (k, v)).collect();
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (mut used_g, mut used_p) = (vec![false; ng], vec![false; np]);
    let mut total = 0.0;
    for ((g, p), d) in list {
        if !used_g[g] && !used_p[p] {
            used_g[g] = true;
            used_p[p] = true;
            total += d;
        }
    }
    total
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Splits the overlap graph into connected groups and solves each exactly.
fn optimal_total(pairs: &BTreeMap<(usize, usize), f64>, ng: usize, np: usize) -> f64 {
    // union-find over gt ids [0, ng) and pred ids [ng, ng + np)
    let mut parent: Vec<usize> = (0..ng + np).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(g, p) in pairs.keys() {
        let (a, b) = (find(&mut parent, g), find(&mut parent, ng + p));
        if a != b {
            parent[a] = b;
        }
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &(g, p) in pairs.keys() {
        let r = find(&mut parent, g);
        let e = groups.entry(r).or_default();
        if !e.0.contains(&g) {
            e.0.push(g);
        }
        if !e.1.contains(&p) {
            e.1.push(p);
        }
    }
    let mut total = 0.0;
    for (_, (gs, ps)) in groups {
        let (rows, cols, flip) = if gs.len() <= ps.len() { (&gs, &ps, false) } else { (&ps, &gs, true) };
        let cost: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| {
                cols.iter()
                    .map(|&c| {
                        let key = if flip { (c, r) } else { (r, c) };
                        -pairs.get(&key).copied().unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();
        let assign = hungarian(&cost);
        total -= assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    }
    total
}

/// Mean Dice of matched instance pairs, averaged over `max(n_gt, n_pred)`.
/// Two masks without any instance score 1.
pub fn instance_dice_with(pred: &Mask, gt: &Mask, matching: Matching) -> Result<SegScore> {
    same_shape(pred, gt)?;
    let (gl, ng) = label_components(gt);
    let (pl, np) = label_components(pred);
    let pairs = overlap_dice(&gl, ng, &pl, np);
    let denom = ng.max(np);
    let inst = if denom == 0 {
        1.0
    } else {
        let total = match matching {
            Matching::Greedy => greedy_total(&pairs, ng, np),
            Matching::Optimal => optimal_total(&pairs, ng, np),
        };
        total / denom as f64
    };
    Ok(SegScore {
        total_dice: dice(pred, gt)?,
        instance_dice: inst,
        n_instances_gt: ng,
        n_instances_pred: np,
    })
}

pub fn instance_dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    instance_dice_with(pred, gt, Matching::default()).map(|s| s.instance_dice)
}

pub fn accuracy(preds: &[usize], gts: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(invalid(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    Ok(preds.iter().zip(gts).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over classes `0..k`; a class absent from
/// both predictions and labels contributes 0.
pub fn macro_f1(preds: &[usize], gts: &[usize], k: usize) -> Result<f64> {
    accuracy(preds, gts)?;
    if k == 0 || preds.iter().chain(gts).any(|&c| c >= k) {
        return Err(invalid(format!("labels must lie in 0..{k}")));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fne = vec![0usize; k];
    for (&p, &g) in preds.iter().zip(gts) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fne[g] += 1;
        }
    }
    let sum: f64 = (0..k)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fne[c];
            if den == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / den as f64
            }
        })
        .sum();
    Ok(sum / k as f64)
}

pub fn cls_score(preds: &[usize], gts: &[usize], k: usize) -> Result<ClsScore> {
    Ok(ClsScore {
        accuracy: accuracy(preds, gts)?,
        macro_f1: macro_f1(preds, gts, k)?,
    })
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Sliding sums of width `win` along one axis of a `[d, h, w]` f64 array.
fn box_sum_axis(src: &[f64], shape: [usize; 3], axis: usize, win: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - win;
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let mut out = vec![0.0; out_shape.iter().product()];
    let [od, oh, ow] = out_shape;
    let mut o = 0;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let base = (z * shape[1] + y) * shape[2] + x;
                let mut s = 0.0;
                for k in 0..win {
                    s += src[base + k * stride];
                }
                out[o] = s;
                o += 1;
            }
        }
    }
    (out, out_shape)
}

fn box_sum3(src: Vec<f64>, shape: [usize; 3], win: usize) -> Vec<f64> {
    let (a, s) = box_sum_axis(&src, shape, 0, win);
    let (b, s) = box_sum_axis(&a, s, 1, win);
    box_sum_axis(&b, s, 2, win).0
}

/// Mean SSIM over all valid positions of a uniform `window³` window, with
/// population (co)variances and unit dynamic range.
pub fn ssim3d(a: &[f32], b: &[f32], shape: [usize; 3], window: usize, k1: f64, k2: f64) -> Result<f64> {
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n {
        return Err(invalid(format!("ssim inputs of {} and {} values for {shape:?}", a.len(), b.len())));
    }
    if window == 0 || shape.iter().any(|&s| s < window) {
        return Err(invalid(format!("ssim window {window} larger than volume {shape:?}")));
    }
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let sa = box_sum3(af.clone(), shape, window);
    let sb = box_sum3(bf.clone(), shape, window);
    let saa = box_sum3(af.iter().map(|v| v * v).collect(), shape, window);
    let sbb = box_sum3(bf.iter().map(|v| v * v).collect(), shape, window);
    let sab = box_sum3(af.iter().zip(&bf).map(|(x, y)| x * y).collect(), shape, window);
    let count = (window * window * window) as f64;
    let (c1, c2) = ((k1 * 1.0).powi(2), (k2 * 1.0).powi(2));
    let mut total = 0.0;
    for i in 0..sa.len() {
        let (ma, mb) = (sa[i] / count, sb[i] / count);
        let va = saa[i] / count - ma * ma;
        let vb = sbb[i] / count - mb * mb;
        let cov = sab[i] / count - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / sa.len() as f64)
}

/// `-10 log10(MSE)` for unit dynamic range; identical inputs give `+inf`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid("psnr inputs must be nonempty and equally long"));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// SSIM (default constants) and PSNR of a multi-channel pair, averaged over channels.
pub fn restore_score(restored: &[f32], sharp: &[f32], channels: usize, shape: [usize; 3]) -> Result<RestoreScore> {
    let n: usize = shape.iter().product();
    if restored.len() != channels * n || sharp.len() != channels * n {
        return Err(invalid("restore_score shape mismatch"));
    }
    let mut ssim = 0.0;
    for c in 0..channels {
        let r = c * n..(c + 1) * n;
        ssim += ssim3d(&restored[r.clone()], &sharp[r], shape, SSIM_WINDOW, SSIM_K1, SSIM_K2)?;
    }
    Ok(RestoreScore {
        ssim: ssim / channels as f64,
        psnr_db: psnr(restored, sharp)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(shape: [usize; 3], on: &[usize]) -> Mask {
        let mut m = Mask::zeros(shape);
        for &i in on {
            m.data_mut()[i] = 1;
        }
        m
    }

    #[test]
    fn dice_closed_forms() {
        let a = bits([1, 1, 200], &(0..100).collect::<Vec<_>>());
        let b = bits([1, 1, 200], &(50..150).collect::<Vec<_>>());
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = bits([1, 1, 200], &(150..200).collect::<Vec<_>>());
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = Mask::zeros([1, 1, 200]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice_values(&[0.0, 0.5], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn instance_dice_averaging_rule() {
        let gt = Mask::from_fn([8, 8, 8], |z, y, x| (z < 2 && y < 2 && x < 2) || (z > 5 && y > 5 && x > 5));
        let pred = Mask::from_fn([8, 8, 8], |z, y, x| z < 2 && y < 2 && x < 2);
        let s = instance_dice_with(&pred, &gt, Matching::Greedy).unwrap();
        assert_eq!((s.n_instances_gt, s.n_instances_pred), (2, 1));
        assert_eq!(s.instance_dice, 0.5);
        assert_eq!(instance_dice(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn optimal_beats_greedy_on_crossed_overlaps() {
        // gt A overlaps pred X strongly and pred Y weakly; gt B overlaps only X.
        let gt = Mask::from_fn([1, 3, 20], |_, y, x| (y == 0 && x < 10) || (y == 2 && x < 4));
        let pred = Mask::from_fn([1, 3, 20], |_, y, x| (y == 1 && x < 10) || (y == 0 && (9..14).contains(&x)));
        let opt = instance_dice_with(&pred, &gt, Matching::Optimal).unwrap().instance_dice;
        let gr = instance_dice_with(&pred, &gt, Matching::Greedy).unwrap().instance_dice;
        assert!(opt >= gr);
    }

    #[test]
    fn hungarian_small() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn classification_scores() {
        let gts = [0, 0, 1, 1, 2, 2];
        let preds = [0; 6];
        assert!((accuracy(&preds, &gts).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // class 0: tp 2, fp 4, fn 0 -> F1 = 4/8
        assert!((macro_f1(&preds, &gts, 3).unwrap() - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[0], &[0], 1).unwrap(), 1.0);
        assert_eq!(macro_f1(&gts, &gts, 3).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn psnr_and_ssim_closed_forms() {
        let a = vec![0.0f32; 100];
        let b = vec![0.1f32; 100];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let s = [8, 8, 8];
        let v: Vec<f32> = (0..512).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        assert!((ssim3d(&v, &v, s, 7, 0.01, 0.03).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim3d(&v, &v, [8, 8, 8], 9, 0.01, 0.03).is_err());
    }
}
