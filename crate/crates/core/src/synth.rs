//! Synthetic light-sheet phantoms: dense nuclei, sparse plaques and
//! dual-channel vessel trees, plus blurred pairs and patch sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use lsmfm_tensor::{filter_axis, gaussian_kernel, Border};

use crate::error::{invalid, Result};
use crate::text::caption_for;
use crate::volume_io::{foreground_fraction, Mask, PatchRecord, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Nuclei,
    Plaques,
    Vessels,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Nuclei, Kind::Plaques, Kind::Vessels];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Nuclei => "nuclei",
            Kind::Plaques => "plaques",
            Kind::Vessels => "vessels",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Kind::Vessels => 2,
            _ => 1,
        }
    }

    /// Admissible objects per 96³ (root trees for vessels).
    pub fn density_range(self) -> (u32, u32) {
        match self {
            Kind::Nuclei => (150, 300),
            Kind::Plaques => (5, 20),
            Kind::Vessels => (2, 4),
        }
    }

    /// Default density of `profile`.
    pub fn default_density(self, profile: u8) -> u32 {
        let (lo, hi) = self.density_range();
        lo + (hi - lo) * (3 - profile.min(3) as u32) / 3
    }
}

impl std::str::FromStr for Kind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nuclei" => Ok(Kind::Nuclei),
            "plaques" => Ok(Kind::Plaques),
            "vessels" => Ok(Kind::Vessels),
            _ => Err(invalid(format!("unknown kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const PROFILES: u8 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: Kind,
    pub channels: usize,
    pub density: u32,
    /// Appearance regime in `0..PROFILES`.
    pub profile: u8,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: Kind, profile: u8, seed: u64) -> Self {
        Self {
            kind,
            channels: kind.channels(),
            density: kind.default_density(profile),
            profile,
            noise_sigma: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != self.kind.channels() {
            return Err(invalid(format!("{} need {} channel(s)", self.kind, self.kind.channels())));
        }
        let (lo, hi) = self.kind.density_range();
        if !(lo..=hi).contains(&self.density) {
            return Err(invalid(format!("{} density {} outside {lo}..={hi}", self.kind, self.density)));
        }
        if self.profile >= PROFILES {
            return Err(invalid(format!("profile {} >= {PROFILES}", self.profile)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    /// Class label, e.g. `nuclei-2`.
    pub fn label(&self) -> String {
        class_label(self.kind, self.profile)
    }
}

pub fn class_label(kind: Kind, profile: u8) -> String {
    format!("{}-{}", kind.name(), profile)
}

/// All class labels in a fixed order.
pub fn class_labels() -> Vec<String> {
    Kind::ALL
        .iter()
        .flat_map(|&k| (0..PROFILES).map(move |p| class_label(k, p)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurSpec {
    /// Gaussian standard deviation along (z, y, x) in voxels.
    pub sigma: [f32; 3],
    pub renoise_sigma: f32,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            sigma: [3.0, 1.5, 1.5],
            renoise_sigma: 0.0,
        }
    }
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0 && s <= 8.0)) {
            return Err(invalid(format!("blur sigma {:?} outside (0, 8]", self.sigma)));
        }
        if !(self.renoise_sigma >= 0.0) {
            return Err(invalid("renoise_sigma must be >= 0"));
        }
        Ok(())
    }
}

struct Canvas {
    edge: usize,
    image: Vec<Vec<f32>>,
    mask: Vec<u8>,
}

impl Canvas {
    fn new(edge: usize, channels: usize) -> Self {
        let n = edge * edge * edge;
        Self {
            edge,
            image: vec![vec![0.0; n]; channels],
            mask: vec![0; n],
        }
    }

    fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.edge + y) * self.edge + x
    }

    fn bounds(&self, c: f32, r: f32) -> std::ops::Range<usize> {
        let lo = (c - r).floor().max(0.0) as usize;
        let hi = ((c + r).ceil() as isize + 1).clamp(0, self.edge as isize) as usize;
        lo..hi.max(lo)
    }
}

/// Axis-aligned soft ellipsoid. With `halo` the intensity extends past the
/// mask as a Gaussian fringe.
fn paint_ellipsoid(cv: &mut Canvas, center: [f32; 3], radii: [f32; 3], gain: f32, halo: bool) {
    let reach = if halo { 2.0 } else { 1.0 };
    let (zr, yr, xr) = (
        cv.bounds(center[0], radii[0] * reach),
        cv.bounds(center[1], radii[1] * reach),
        cv.bounds(center[2], radii[2] * reach),
    );
    for z in zr {
        for y in yr.clone() {
            for x in xr.clone() {
                let d = [z as f32 - center[0], y as f32 - center[1], x as f32 - center[2]];
                let rho2: f32 = (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum();
                let v = if halo {
                    gain * (-rho2).exp()
                } else if rho2 <= 1.0 {
                    gain * (1.0 - 0.5 * rho2)
                } else {
                    0.0
                };
                let i = cv.idx(z, y, x);
                if rho2 <= 1.0 {
                    cv.mask[i] = 1;
                }
                if v > cv.image[0][i] {
                    cv.image[0][i] = v;
                }
            }
        }
    }
}

fn segment_distance(p: [f32; 3], a: [f32; 3], b: [f32; 3]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f32 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum::<f32>().sqrt()
}

/// Capsule of radius `r` between `a` and `b`, painted into both channels.
fn paint_capsule(cv: &mut Canvas, a: [f32; 3], b: [f32; 3], r: f32, gains: [f32; 2]) {
    let lo = |k: usize| a[k].min(b[k]);
    let hi = |k: usize| a[k].max(b[k]);
    let rng_axis = |k: usize| {
        let c = 0.5 * (lo(k) + hi(k));
        cv.bounds(c, 0.5 * (hi(k) - lo(k)) + r)
    };
    let (zr, yr, xr) = (rng_axis(0), rng_axis(1), rng_axis(2));
    for z in zr {
        for y in yr.clone() {
            for x in xr.clone() {
                let d = segment_distance([z as f32, y as f32, x as f32], a, b);
                if d > r {
                    continue;
                }
                let t = d / r;
                let i = cv.idx(z, y, x);
                cv.mask[i] = 1;
                let v0 = gains[0] * (1.0 - 0.5 * t * t);
                let v1 = gains[1] * (1.0 - t * t).sqrt().max(0.15);
                cv.image[0][i] = cv.image[0][i].max(v0);
                cv.image[1][i] = cv.image[1][i].max(v1);
            }
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> [f32; 3] {
    loop {
        let v = [rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn clamp_point(p: [f32; 3], r: f32, edge: usize) -> [f32; 3] {
    let hi = edge as f32 - 1.0 - r;
    [p[0].clamp(r, hi), p[1].clamp(r, hi), p[2].clamp(r, hi)]
}

fn scaled_count(density: u32, edge: usize, min: usize) -> usize {
    let scale = (edge as f64 / 96.0).powi(3);
    ((density as f64 * scale).round() as usize).max(min)
}

fn draw_nuclei<R: Rng>(cv: &mut Canvas, spec: &PhantomSpec, rng: &mut R) {
    let edge = cv.edge as f32;
    let n = scaled_count(spec.density, cv.edge, 4);
    let (rmin, rmax, stretch): (f32, f32, f32) = match spec.profile {
        0 => (2.0, 3.0, 1.0),
        1 => (3.5, 5.0, 1.0),
        2 => (2.0, 3.5, 1.8),
        _ => (2.5, 4.5, 1.0),
    };
    for _ in 0..n {
        let c = [rng.gen_range(0.0..edge), rng.gen_range(0.0..edge), rng.gen_range(0.0..edge)];
        let mut r = [rng.gen_range(rmin..=rmax), rng.gen_range(rmin..=rmax), rng.gen_range(rmin..=rmax)];
        if stretch > 1.0 {
            let a = rng.gen_range(0..3);
            r[a] = (r[a] * stretch).min(5.0 * stretch);
        }
        let gain = rng.gen_range(0.6..1.0);
        paint_ellipsoid(cv, c, r, gain, false);
    }
    if spec.profile == 3 {
        // speckled chromatin texture
        for v in cv.image[0].iter_mut() {
            if *v > 0.0 {
                *v *= rng.gen_range(0.6f32..1.0);
            }
        }
    }
}

fn draw_plaques<R: Rng>(cv: &mut Canvas, spec: &PhantomSpec, rng: &mut R) {
    let edge = cv.edge as f32;
    let n = scaled_count(spec.density, cv.edge, 2);
    let (rmin, rmax, halo) = match spec.profile {
        0 => (1.0, 2.0, false),
        1 => (2.0, 3.0, false),
        2 => (1.0, 2.5, true),
        _ => (1.5, 3.0, true),
    };
    for _ in 0..n {
        let c = [
            rng.gen_range(3.0..edge - 3.0),
            rng.gen_range(3.0..edge - 3.0),
            rng.gen_range(3.0..edge - 3.0),
        ];
        let r = rng.gen_range(rmin..=rmax);
        let gain = rng.gen_range(0.85..1.0);
        paint_ellipsoid(cv, c, [r, r, r], gain, halo);
    }
}

fn draw_vessels<R: Rng>(cv: &mut Canvas, spec: &PhantomSpec, rng: &mut R) {
    let e = cv.edge as f32;
    let (trunk_r, levels, gains) = match spec.profile {
        0 => (3.0f32, 2usize, [1.0f32, 0.6f32]),
        1 => (4.0, 2, [0.9, 0.8]),
        2 => (2.5, 3, [1.0, 0.5]),
        _ => (3.5, 3, [0.8, 0.9]),
    };
    let axis = rng.gen_range(0..3);
    let mut a = [0.0f32; 3];
    let mut b = [0.0f32; 3];
    for k in 0..3 {
        if k == axis {
            a[k] = 0.0;
            b[k] = e - 1.0;
        } else {
            a[k] = rng.gen_range(0.3 * e..0.7 * e);
            b[k] = rng.gen_range(0.3 * e..0.7 * e);
        }
    }
    let (a, b) = (clamp_point(a, trunk_r, cv.edge), clamp_point(b, trunk_r, cv.edge));
    paint_capsule(cv, a, b, trunk_r, gains);
    let roots = spec.density as usize;
    for _ in 0..roots {
        let t = rng.gen_range(0.1f32..0.9);
        let start = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])];
        let mut frontier = vec![(start, random_unit(rng), trunk_r - 1.0, 0.35 * e)];
        for _level in 0..levels {
            let mut next = Vec::new();
            for (p, dir, r, len) in frontier {
                let r = r.max(1.0);
                let end = clamp_point([p[0] + dir[0] * len, p[1] + dir[1] * len, p[2] + dir[2] * len], r, cv.edge);
                paint_capsule(cv, p, end, r, gains);
                for _ in 0..2 {
                    let jitter = random_unit(rng);
                    let nd = [dir[0] + 0.9 * jitter[0], dir[1] + 0.9 * jitter[1], dir[2] + 0.9 * jitter[2]];
                    let n = nd.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
                    next.push((end, [nd[0] / n, nd[1] / n, nd[2] / n], r - 1.0, len * 0.7));
                }
            }
            frontier = next;
        }
    }
}

/// Deterministic phantom for `(spec, edge)`.
pub fn generate_phantom(spec: &PhantomSpec, edge: usize) -> Result<PatchRecord> {
    spec.validate()?;
    if edge < 32 {
        return Err(invalid(format!("phantom edge {edge} < 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f00d_u64.rotate_left(8 * spec.profile as u32 + 1));
    let mut cv = Canvas::new(edge, spec.channels);
    match spec.kind {
        Kind::Nuclei => draw_nuclei(&mut cv, spec, &mut rng),
        Kind::Plaques => draw_plaques(&mut cv, spec, &mut rng),
        Kind::Vessels => draw_vessels(&mut cv, spec, &mut rng),
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma).expect("finite sigma");
        for ch in cv.image.iter_mut() {
            for v in ch.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let data: Vec<f32> = cv.image.into_iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
    let names = match spec.kind {
        Kind::Vessels => vec!["vessel_a".to_string(), "vessel_b".to_string()],
        k => vec![k.name().to_string()],
    };
    let image = Volume::new([spec.channels, edge, edge, edge], data, [1.0; 3], names)?;
    let variant = (spec.seed % crate::text::TEMPLATE_VARIANTS as u64) as usize;
    Ok(PatchRecord {
        image,
        mask: Some(Mask::new([edge; 3], cv.mask)?),
        caption: Some(caption_for(spec, variant)?.text),
        label: Some(spec.label()),
        source_id: format!("synth:{}:{}:{}", spec.kind, spec.profile, spec.seed),
        seed: spec.seed,
    })
}

/// Separable Gaussian blur of every channel with replicated borders.
pub fn gaussian_blur(v: &Volume, sigma: [f32; 3]) -> Volume {
    let s = v.spatial();
    let shape = [v.channels(), s[0], s[1], s[2]];
    let mut data = v.data().to_vec();
    for (axis, &sg) in sigma.iter().enumerate() {
        let k = gaussian_kernel(sg);
        data = filter_axis(&data, &shape, axis, &k, Border::Replicate).0;
    }
    Volume::new(v.shape(), data, v.spacing(), v.channel_names().to_vec()).expect("same shape")
}

/// `(blurred, sharp)`; the blurred record is renoised with its own seed.
pub fn make_blur_pair(p: &PatchRecord, b: &BlurSpec) -> Result<(PatchRecord, PatchRecord)> {
    b.validate()?;
    let (lo, hi) = p.image.min_max();
    if lo < 0.0 || hi > 1.0 {
        return Err(invalid("blur input must lie in [0, 1]"));
    }
    let mut blurred = gaussian_blur(&p.image, b.sigma);
    if b.renoise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xb1u64);
        let noise = Normal::new(0.0f32, b.renoise_sigma).expect("finite sigma");
        for v in blurred.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in blurred.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut out = p.clone();
    out.image = blurred;
    out.source_id = format!("{}:blur", p.source_id);
    Ok((out, p.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchBox {
    pub origin: [usize; 3],
    pub edge: usize,
}

impl PatchBox {
    pub fn intersects(&self, o: &PatchBox) -> bool {
        (0..3).all(|a| self.origin[a] < o.origin[a] + o.edge && o.origin[a] < self.origin[a] + self.edge)
    }
}

/// Normalized-intensity threshold for foreground on unannotated volumes.
pub const FOREGROUND_THRESHOLD: f32 = 0.1;

/// Up to `n` pairwise-disjoint `edge³` patches with foreground fraction at
/// least `min_fg`. Foreground is the mask fraction when `mask` is given.
/// Candidates lie on a randomly offset grid of pitch `edge`; at most `50 n`
/// candidates are tried.
pub fn sample_patches<R: Rng>(
    v: &Volume,
    mask: Option<&Mask>,
    n: usize,
    edge: usize,
    min_fg: f64,
    rng: &mut R,
) -> Result<Vec<(PatchBox, PatchRecord)>> {
    let s = v.spatial();
    if edge == 0 || s.iter().any(|&d| d < edge) {
        return Err(invalid(format!("patch edge {edge} larger than volume {s:?}")));
    }
    if let Some(m) = mask {
        if m.shape() != s {
            return Err(invalid("mask shape differs from volume"));
        }
    }
    let mut cells = Vec::new();
    let offset: Vec<usize> = s.iter().map(|&d| rng.gen_range(0..=d % edge)).collect();
    let counts: Vec<usize> = s.iter().map(|&d| d / edge).collect();
    for z in 0..counts[0] {
        for y in 0..counts[1] {
            for x in 0..counts[2] {
                cells.push([offset[0] + z * edge, offset[1] + y * edge, offset[2] + x * edge]);
            }
        }
    }
    cells.shuffle(rng);
    let mut out: Vec<(PatchBox, PatchRecord)> = Vec::new();
    for origin in cells.into_iter().take(50 * n) {
        if out.len() == n {
            break;
        }
        let size = [edge; 3];
        let image = v.crop(origin, size)?;
        let m = mask.map(|m| m.crop(origin, size)).transpose()?;
        let fg = match &m {
            Some(m) => m.fraction(),
            None => foreground_fraction(&image, FOREGROUND_THRESHOLD),
        };
        if fg < min_fg {
            continue;
        }
        let bx = PatchBox { origin, edge };
        if out.iter().any(|(b, _)| b.intersects(&bx)) {
            continue;
        }
        let mut rec = PatchRecord::new(image, format!("crop:{}:{}:{}", origin[0], origin[1], origin[2]), 0);
        rec.mask = m;
        out.push((bx, rec));
    }
    Ok(out)
}
