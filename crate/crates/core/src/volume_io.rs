//! Volumes, patch records, intensity normalization and the raw container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};

/// A `(C, D, H, W)` grid of intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    data: Vec<f32>,
    spacing: [f32; 3],
    channel_names: Vec<String>,
}

impl Volume {
    pub fn new(shape: [usize; 4], data: Vec<f32>, spacing: [f32; 3], channel_names: Vec<String>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("volume dimensions must be >= 1, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(invalid(format!("{} values for shape {shape:?}", data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        if channel_names.len() != shape[0] {
            return Err(invalid(format!("{} channel names for {} channels", channel_names.len(), shape[0])));
        }
        Ok(Self {
            shape,
            data,
            spacing,
            channel_names,
        })
    }

    /// Zero volume with unit spacing and channels named `ch0..`.
    pub fn zeros(channels: usize, spatial: [usize; 3]) -> Self {
        let shape = [channels, spatial[0], spatial[1], spatial[2]];
        Self::new(
            shape,
            vec![0.0; shape.iter().product()],
            [1.0; 3],
            (0..channels).map(|c| format!("ch{c}")).collect(),
        )
        .expect("valid zero volume")
    }

    pub fn from_fn(channels: usize, spatial: [usize; 3], f: impl Fn(usize, usize, usize, usize) -> f32) -> Self {
        let mut v = Self::zeros(channels, spatial);
        let [_, d, h, w] = v.shape;
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        v.data[((c * d + z) * h + y) * w + x] = f(c, z, y, x);
                    }
                }
            }
        }
        v
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }
    pub fn voxels_per_channel(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }
    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn with_meta(mut self, spacing: [f32; 3], channel_names: Vec<String>) -> Result<Self> {
        let data = std::mem::take(&mut self.data);
        Self::new(self.shape, data, spacing, channel_names)
    }

    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.shape[1] + z) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels_per_channel();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel volume holding channel `c`.
    pub fn select_channel(&self, c: usize) -> Volume {
        let s = self.spatial();
        Volume::new(
            [1, s[0], s[1], s[2]],
            self.channel(c).to_vec(),
            self.spacing,
            vec![self.channel_names[c].clone()],
        )
        .expect("channel slice")
    }

    /// Sub-box starting at `origin` with edge lengths `size`, all channels.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        let s = self.spatial();
        for a in 0..3 {
            if origin[a] + size[a] > s[a] || size[a] == 0 {
                return Err(invalid(format!("crop {origin:?}+{size:?} outside {s:?}")));
            }
        }
        let mut out = Vec::with_capacity(self.channels() * size.iter().product::<usize>());
        for c in 0..self.channels() {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = self.index(c, origin[0] + z, origin[1] + y, origin[2]);
                    out.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        Volume::new(
            [self.channels(), size[0], size[1], size[2]],
            out,
            self.spacing,
            self.channel_names.clone(),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Binary `(D, H, W)` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(invalid(format!("{} mask values for shape {shape:?}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(shape);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    m.data[(z * shape[1] + y) * shape[2] + x] = f(z, y, x) as u8;
                }
            }
        }
        m
    }

    /// Thresholds values strictly above `t`.
    pub fn from_threshold(shape: [usize; 3], values: &[f32], t: f32) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| (v > t) as u8).collect())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x] != 0
    }
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Mask> {
        let s = self.shape;
        for a in 0..3 {
            if origin[a] + size[a] > s[a] || size[a] == 0 {
                return Err(invalid(format!("crop {origin:?}+{size:?} outside {s:?}")));
            }
        }
        let mut out = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = ((origin[0] + z) * s[1] + origin[1] + y) * s[2] + origin[2];
                out.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Mask::new(size, out)
    }
}

/// One training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image: Volume,
    pub mask: Option<Mask>,
    pub caption: Option<String>,
    /// Class identifier of the form `<datatype>` or `<datatype>-<profile>`.
    pub label: Option<String>,
    pub source_id: String,
    pub seed: u64,
}

impl PatchRecord {
    pub fn new(image: Volume, source_id: impl Into<String>, seed: u64) -> Self {
        Self {
            image,
            mask: None,
            caption: None,
            label: None,
            source_id: source_id.into(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.mask {
            if m.shape() != self.image.spatial() {
                return Err(invalid(format!(
                    "mask shape {:?} differs from image {:?}",
                    m.shape(),
                    self.image.spatial()
                )));
            }
        }
        if matches!(&self.caption, Some(c) if c.trim().is_empty()) {
            return Err(invalid("caption present but empty"));
        }
        Ok(())
    }

    /// Datatype part of the label (text before the first `-`).
    pub fn datatype(&self) -> Option<&str> {
        self.label.as_deref().map(datatype_of)
    }
}

pub fn datatype_of(label: &str) -> &str {
    label.split('-').next().unwrap_or(label)
}

/// The percentile of sorted data by linear interpolation between closest ranks.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Per-channel `clamp((x - q_low) / (q_high - q_low), 0, 1)`.
pub fn normalize_percentile(v: &Volume, p_low: f64, p_high: f64) -> Result<Volume> {
    if !(0.0 <= p_low && p_low < p_high && p_high <= 100.0) {
        return Err(invalid(format!("percentiles must satisfy 0 <= {p_low} < {p_high} <= 100")));
    }
    if v.data.is_empty() {
        return Err(invalid("empty volume"));
    }
    let mut out = v.clone();
    for c in 0..v.channels() {
        let src = v.channel(c);
        if src.iter().any(|x| !x.is_finite()) {
            return Err(invalid(format!("non-finite intensity in channel {c}")));
        }
        let mut sorted = src.to_vec();
        sorted.sort_by(f32::total_cmp);
        let lo = percentile_sorted(&sorted, p_low);
        let hi = percentile_sorted(&sorted, p_high);
        let dst = out.channel_mut(c);
        if hi == lo {
            dst.fill(0.0);
            continue;
        }
        let inv = 1.0 / (hi - lo);
        for (o, &x) in dst.iter_mut().zip(src) {
            *o = ((x as f64 - lo) * inv).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Fraction of values, over all channels, strictly above `threshold`.
pub fn foreground_fraction(v: &Volume, threshold: f32) -> f64 {
    v.data.iter().filter(|&&x| x > threshold).count() as f64 / v.data.len() as f64
}

pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    shape: [usize; 4],
    dtype: String,
    spacing_um: [f32; 3],
    channels: Vec<String>,
    caption: Option<String>,
    label: Option<String>,
    seed: u64,
    source_id: String,
    /// When true, a mask of `D*H*W` values follows the image in the payload.
    #[serde(default)]
    mask: bool,
}

/// Payload and header paths for a container base path.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("lsmraw") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut raw = base.clone().into_os_string();
    raw.push(".lsmraw");
    let mut json = base.into_os_string();
    json.push(".json");
    (raw.into(), json.into())
}

pub fn write_container(p: &PatchRecord, path: &Path) -> Result<()> {
    p.validate()?;
    let (raw_path, json_path) = container_paths(path);
    let header = Header {
        shape: p.image.shape(),
        dtype: DTYPE.into(),
        spacing_um: p.image.spacing(),
        channels: p.image.channel_names().to_vec(),
        caption: p.caption.clone(),
        label: p.label.clone(),
        seed: p.seed,
        source_id: p.source_id.clone(),
        mask: p.mask.is_some(),
    };
    let mut bytes = Vec::with_capacity(4 * (p.image.data().len() + p.mask.as_ref().map_or(0, Mask::len)));
    for v in p.image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = &p.mask {
        for &v in m.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = raw_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))?;
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok(())
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

pub fn read_container(path: &Path) -> Result<PatchRecord> {
    let (raw_path, json_path) = container_paths(path);
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: byte_offset(&text, e.line(), e.column()),
        msg: format!("{}: {e}", json_path.display()),
    })?;
    if header.dtype != DTYPE {
        return Err(Error::Format {
            offset: text.find("dtype").unwrap_or(0) as u64,
            msg: format!("unsupported dtype {}", header.dtype),
        });
    }
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let n_img: usize = header.shape.iter().product();
    let n_mask = if header.mask { header.shape[1..].iter().product() } else { 0 };
    let expected = 4 * (n_img + n_mask);
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            msg: format!(
                "{}: payload holds {} bytes, header {:?} implies {expected}",
                raw_path.display(),
                bytes.len(),
                header.shape
            ),
        });
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let image = Volume::new(header.shape, floats[..n_img].to_vec(), header.spacing_um, header.channels)
        .map_err(|e| Error::Format {
            offset: 0,
            msg: e.to_string(),
        })?;
    let mask = if header.mask {
        let mut m = Vec::with_capacity(n_mask);
        for (i, &v) in floats[n_img..].iter().enumerate() {
            m.push(match v {
                0.0 => 0,
                1.0 => 1,
                _ => {
                    return Err(Error::Format {
                        offset: (4 * (n_img + i)) as u64,
                        msg: format!("mask value {v} is not binary"),
                    })
                }
            });
        }
        Some(Mask::new(image.spatial(), m)?)
    } else {
        None
    };
    let record = PatchRecord {
        image,
        mask,
        caption: header.caption,
        label: header.label,
        source_id: header.source_id,
        seed: header.seed,
    };
    record.validate().map_err(|e| Error::Format {
        offset: 0,
        msg: e.to_string(),
    })?;
    Ok(record)
}

/// Reads every container (by `.json` header) in `dir`, sorted by file name.
pub fn read_dir(dir: &Path) -> Result<Vec<(String, PatchRecord)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.with_extension("lsmraw").exists())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            read_container(&p).map(|r| (stem, r))
        })
        .collect()
}
