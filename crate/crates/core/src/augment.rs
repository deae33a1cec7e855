//! Random geometric and intensity augmentation of patch records.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::synth::gaussian_blur;
use crate::volume_io::{Mask, PatchRecord, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    /// Flip probability per axis (z, y, x).
    pub flip_prob: [f64; 3],
    pub rot90_prob: f64,
    pub affine_prob: f64,
    pub affine_max_rot_deg: f64,
    pub affine_scale: (f64, f64),
    pub noise_prob: f64,
    pub noise_sigma: (f64, f64),
    pub smooth_prob: f64,
    pub smooth_sigma: (f64, f64),
    pub scale_prob: f64,
    pub scale_range: (f64, f64),
    pub shift_prob: f64,
    pub shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl AugmentConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: AugmentMode::Pretrain,
            flip_prob: [0.5; 3],
            rot90_prob: 0.5,
            affine_prob: 0.3,
            affine_max_rot_deg: 15.0,
            affine_scale: (0.9, 1.1),
            noise_prob: 0.3,
            noise_sigma: (0.0, 0.05),
            smooth_prob: 0.2,
            smooth_sigma: (0.5, 1.0),
            scale_prob: 0.3,
            scale_range: (0.9, 1.1),
            shift_prob: 0.3,
            shift_range: (-0.1, 0.1),
        }
    }

    pub fn finetune() -> Self {
        Self {
            mode: AugmentMode::Finetune,
            ..Self::pretrain()
        }
    }

    /// Every operation off.
    pub fn disabled() -> Self {
        Self {
            mode: AugmentMode::Pretrain,
            flip_prob: [0.0; 3],
            rot90_prob: 0.0,
            affine_prob: 0.0,
            noise_prob: 0.0,
            smooth_prob: 0.0,
            scale_prob: 0.0,
            shift_prob: 0.0,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        let probs = [
            self.flip_prob[0],
            self.flip_prob[1],
            self.flip_prob[2],
            self.rot90_prob,
            self.affine_prob,
            self.noise_prob,
            self.smooth_prob,
            self.scale_prob,
            self.shift_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(crate::error::Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [self.affine_scale, self.noise_sigma, self.smooth_sigma, self.scale_range, self.shift_range];
        if ranges.iter().any(|(a, b)| !(a <= b)) || self.noise_sigma.0 < 0.0 || self.smooth_sigma.0 <= 0.0 {
            return Err(crate::error::Error::Config("augmentation ranges must be ordered (lo <= hi)".into()));
        }
        Ok(())
    }

    fn intensity_enabled(&self) -> bool {
        self.mode == AugmentMode::Pretrain
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Applies `f(src_index)` remapping to every channel of `v` and to `mask`.
fn remap(v: &mut Volume, mask: &mut Option<Mask>, map: &dyn Fn(usize, usize, usize) -> (usize, usize, usize)) {
    let [c, d, h, w] = v.shape();
    let n = d * h * w;
    let mut out = vec![0f32; v.data().len()];
    let mut mout = mask.as_ref().map(|_| vec![0u8; n]);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = map(z, y, x);
                let di = (z * h + y) * w + x;
                let si = (sz * h + sy) * w + sx;
                for ch in 0..c {
                    out[ch * n + di] = v.data()[ch * n + si];
                }
                if let (Some(mo), Some(m)) = (mout.as_mut(), mask.as_ref()) {
                    mo[di] = m.data()[si];
                }
            }
        }
    }
    v.data_mut().copy_from_slice(&out);
    if let (Some(mo), Some(m)) = (mout, mask.as_mut()) {
        m.data_mut().copy_from_slice(&mo);
    }
}

pub fn flip(v: &mut Volume, mask: &mut Option<Mask>, axis: usize) {
    let [d, h, w] = v.spatial();
    remap(v, mask, &move |z, y, x| match axis {
        0 => (d - 1 - z, y, x),
        1 => (z, h - 1 - y, x),
        _ => (z, y, w - 1 - x),
    });
}

/// Rotates by `k` quarter turns in the plane of spatial axes `(a, b)`;
/// the two axes must have equal length.
pub fn rot90(v: &mut Volume, mask: &mut Option<Mask>, plane: (usize, usize), k: usize) {
    let s = v.spatial();
    let (a, b) = plane;
    assert_eq!(s[a], s[b], "rot90 needs a square plane");
    let n = s[a];
    for _ in 0..k % 4 {
        remap(v, mask, &move |z, y, x| {
            let mut p = [z, y, x];
            // dst[i][j] = src[j][n-1-i]
            let (i, j) = (p[a], p[b]);
            p[a] = j;
            p[b] = n - 1 - i;
            (p[0], p[1], p[2])
        });
    }
}

fn rotation(axis: usize, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Rotation about the volume center followed by isotropic scaling. Image
/// values are trilinear, mask values nearest; outside samples are 0.
pub fn affine(v: &mut Volume, mask: &mut Option<Mask>, axis: usize, angle_rad: f64, scale: f64) {
    let [c, d, h, w] = v.shape();
    let r = rotation(axis, angle_rad);
    let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let n = d * h * w;
    let src = v.data().to_vec();
    let msrc = mask.as_ref().map(|m| m.data().to_vec());
    let dims = [d, h, w];
    let out = v.data_mut();
    let mut mout = msrc.as_ref().map(|_| vec![0u8; n]);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 - center[0], y as f64 - center[1], x as f64 - center[2]];
                // inverse map: R^T p / s
                let mut q = [0.0; 3];
                for i in 0..3 {
                    q[i] = (r[0][i] * p[0] + r[1][i] * p[1] + r[2][i] * p[2]) / scale + center[i];
                }
                let di = (z * h + y) * w + x;
                if let (Some(mo), Some(ms)) = (mout.as_mut(), msrc.as_ref()) {
                    let nn: Vec<isize> = q.iter().map(|v| v.round() as isize).collect();
                    if (0..3).all(|k| nn[k] >= 0 && nn[k] < dims[k] as isize) {
                        mo[di] = ms[(nn[0] as usize * h + nn[1] as usize) * w + nn[2] as usize];
                    }
                }
                let f: Vec<f64> = q.iter().map(|v| v.floor()).collect();
                let t: Vec<f64> = (0..3).map(|k| q[k] - f[k]).collect();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for corner in 0..8 {
                        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                        let idx: Vec<isize> = (0..3).map(|k| f[k] as isize + off[k] as isize).collect();
                        if (0..3).any(|k| idx[k] < 0 || idx[k] >= dims[k] as isize) {
                            continue;
                        }
                        let wgt: f64 = (0..3).map(|k| if off[k] == 1 { t[k] } else { 1.0 - t[k] }).product();
                        let si = (idx[0] as usize * h + idx[1] as usize) * w + idx[2] as usize;
                        acc += wgt * src[ch * n + si] as f64;
                    }
                    out[ch * n + di] = acc as f32;
                }
            }
        }
    }
    if let (Some(mo), Some(m)) = (mout, mask.as_mut()) {
        m.data_mut().copy_from_slice(&mo);
    }
}

/// Geometric ops, then intensity ops, then clamping to `[0, 1]`.
pub fn augment<R: Rng>(p: &PatchRecord, cfg: &AugmentConfig, rng: &mut R) -> PatchRecord {
    let mut out = p.clone();
    let mut touched = false;
    for axis in 0..3 {
        if cfg.flip_prob[axis] > 0.0 && rng.gen_bool(cfg.flip_prob[axis]) {
            flip(&mut out.image, &mut out.mask, axis);
            touched = true;
        }
    }
    if cfg.rot90_prob > 0.0 && rng.gen_bool(cfg.rot90_prob) {
        let planes = [(0, 1), (0, 2), (1, 2)];
        let plane = planes[rng.gen_range(0..3)];
        let k = rng.gen_range(1..4);
        let s = out.image.spatial();
        if s[plane.0] == s[plane.1] {
            rot90(&mut out.image, &mut out.mask, plane, k);
            touched = true;
        }
    }
    if cfg.affine_prob > 0.0 && rng.gen_bool(cfg.affine_prob) {
        let axis = rng.gen_range(0..3);
        let max = cfg.affine_max_rot_deg.to_radians();
        let angle = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
        let scale = sample_range(rng, cfg.affine_scale);
        affine(&mut out.image, &mut out.mask, axis, angle, scale);
        touched = true;
    }
    if cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob) {
        let sigma = sample_range(rng, cfg.noise_sigma);
        if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma as f32).expect("finite sigma");
            for v in out.image.data_mut() {
                *v += dist.sample(rng);
            }
            touched = true;
        }
    }
    if cfg.intensity_enabled() {
        if cfg.smooth_prob > 0.0 && rng.gen_bool(cfg.smooth_prob) {
            let s = sample_range(rng, cfg.smooth_sigma) as f32;
            out.image = gaussian_blur(&out.image, [s; 3]);
            touched = true;
        }
        if cfg.scale_prob > 0.0 && rng.gen_bool(cfg.scale_prob) {
            let f = sample_range(rng, cfg.scale_range) as f32;
            out.image.data_mut().iter_mut().for_each(|v| *v *= f);
            touched = true;
        }
        if cfg.shift_prob > 0.0 && rng.gen_bool(cfg.shift_prob) {
            let o = sample_range(rng, cfg.shift_range) as f32;
            out.image.data_mut().iter_mut().for_each(|v| *v += o);
            touched = true;
        }
    }
    if touched {
        out.image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    out
}
