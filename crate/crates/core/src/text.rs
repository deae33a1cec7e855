//! Captions for synthetic patches and text embedding backbones.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use lsmfm_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{invalid, io_err, Result};
use crate::synth::{Kind, PhantomSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSlots {
    pub stain_target: String,
    pub modality: String,
    pub specimen: String,
    pub morphology: String,
    pub spatial_organization: String,
    pub pathology: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub slots: CaptionSlots,
}

pub const TEMPLATE_VARIANTS: usize = 4;

fn slots(spec: &PhantomSpec) -> CaptionSlots {
    let s = |x: &str| x.to_string();
    let modality = s("light sheet fluorescence microscopy");
    let specimen = s("cleared mouse brain tissue");
    match spec.kind {
        Kind::Nuclei => CaptionSlots {
            stain_target: s("cell nuclei"),
            modality,
            specimen,
            morphology: s(match spec.profile {
                0 => "small round",
                1 => "large round",
                2 => "elongated ellipsoidal",
                _ => "speckled textured",
            }),
            spatial_organization: s("densely packed throughout the volume"),
            pathology: s("no pathology"),
        },
        Kind::Plaques => CaptionSlots {
            stain_target: s("amyloid plaques"),
            modality,
            specimen,
            morphology: s(match spec.profile {
                0 => "tiny punctate",
                1 => "compact bright",
                2 => "diffuse haloed",
                _ => "large haloed",
            }),
            spatial_organization: s("sparsely scattered"),
            pathology: s("amyloid deposition"),
        },
        Kind::Vessels => CaptionSlots {
            stain_target: s("blood vessels"),
            modality,
            specimen,
            morphology: s(match spec.profile {
                0 => "thin tubular",
                1 => "wide tubular",
                2 => "finely branching tubular",
                _ => "branching tubular",
            }),
            spatial_organization: s("a connected branching network"),
            pathology: s("no pathology"),
        },
    }
}

fn render(kind: Kind, variant: usize, c: &CaptionSlots) -> String {
    let CaptionSlots {
        stain_target: t,
        modality: m,
        specimen: sp,
        morphology: mo,
        spatial_organization: so,
        pathology: pa,
    } = c;
    match (kind, variant) {
        (Kind::Vessels, 0) => format!(
            "A dual-channel {m} patch of {sp} showing {t}. Both channels capture {mo} structures forming {so}. The sample shows {pa}."
        ),
        (Kind::Vessels, 1) => format!(
            "This volume images {t} in {sp} with {m} in two channels. The vessels appear as {mo} segments arranged as {so}."
        ),
        (Kind::Vessels, 2) => format!(
            "{t} stained in two channels and imaged by {m}. Each channel shows {mo} morphology. The structures form {so}. There is {pa}."
        ),
        (Kind::Vessels, _) => format!(
            "Two channels of {m} reveal {t} within {sp}. The {mo} vessels are organized as {so}."
        ),
        (_, 0) => format!(
            "A {m} patch of {sp} stained for {t}. The objects are {mo} and appear {so}. The sample shows {pa}."
        ),
        (_, 1) => format!(
            "This volume shows {t} in {sp} acquired with {m}. Structures look {mo} and are {so}."
        ),
        (_, 2) => format!(
            "{t} imaged by {m}. Their morphology is {mo}. They are {so}. There is {pa}."
        ),
        (_, _) => format!(
            "Imaging {sp} with {m} reveals {t}. These {mo} structures are {so}."
        ),
    }
}

/// Deterministic caption; all variants of a spec share slots.
pub fn caption_for(spec: &PhantomSpec, variant: usize) -> Result<Caption> {
    if variant >= TEMPLATE_VARIANTS {
        return Err(invalid(format!("caption variant {variant} >= {TEMPLATE_VARIANTS}")));
    }
    let slots = slots(spec);
    let mut text = render(spec.kind, variant, &slots);
    if let Some(first) = text.get(..1) {
        let up = first.to_uppercase();
        text.replace_range(..1, &up);
    }
    Ok(Caption { text, slots })
}

pub fn sentence_count(text: &str) -> usize {
    text.split(['.', '!', '?']).filter(|s| !s.trim().is_empty()).count()
}

/// Fixed (non-trainable) text features.
pub trait TextBackbone: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, text: &str) -> Result<Vec<f32>>;
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Signed hashed counts of word unigrams (`1:w`) and bigrams (`2:a b`).
pub fn ngram_bag(text: &str, buckets: usize) -> Vec<f32> {
    let w = words(text);
    let mut bag = vec![0f32; buckets];
    let mut add = |key: String| {
        let h = fnv1a(key.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        bag[(h % buckets as u64) as usize] += sign;
    };
    for t in &w {
        add(format!("1:{t}"));
    }
    for p in w.windows(2) {
        add(format!("2:{} {}", p[0], p[1]));
    }
    bag
}

/// Hashed n-gram bag times a fixed Gaussian projection.
pub struct HashedNgrams {
    buckets: usize,
    dim: usize,
    projection: Vec<f32>,
}

impl HashedNgrams {
    pub const DEFAULT_BUCKETS: usize = 1024;
    pub const DEFAULT_SEED: u64 = 0x7e47_e4c0;

    pub fn new(buckets: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f32).sqrt();
        let projection = (0..buckets * dim)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        Self {
            buckets,
            dim,
            projection,
        }
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    /// Row-major `[buckets, dim]`.
    pub fn projection(&self) -> &[f32] {
        &self.projection
    }
}

impl TextBackbone for HashedNgrams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, text: &str) -> Result<Vec<f32>> {
        if words(text).is_empty() {
            return Err(invalid("empty text"));
        }
        let bag = ngram_bag(text, self.buckets);
        let mut out = vec![0f32; self.dim];
        for (b, &c) in bag.iter().enumerate() {
            if c != 0.0 {
                let row = &self.projection[b * self.dim..(b + 1) * self.dim];
                for (o, &p) in out.iter_mut().zip(row) {
                    *o += c * p;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct EmbeddingFile {
    dim: usize,
    embeddings: HashMap<String, Vec<f32>>,
}

/// Embeddings precomputed by an external encoder, looked up by exact text.
/// File layout: `{"dim": d, "embeddings": {"<caption>": [..d floats..]}}`.
pub struct ExternalEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl ExternalEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let f: EmbeddingFile = serde_json::from_str(&text)?;
        if let Some((k, _)) = f.embeddings.iter().find(|(_, v)| v.len() != f.dim) {
            return Err(invalid(format!("embedding for `{k}` does not have dim {}", f.dim)));
        }
        Ok(Self {
            dim: f.dim,
            table: f.embeddings,
        })
    }
}

impl TextBackbone for ExternalEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(invalid("empty text"));
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| invalid(format!("no external embedding for caption `{text}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEncoderKind {
    #[default]
    Fallback,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
}

/// Backbone features followed by a trainable linear tail and L2 normalization.
#[derive(Clone)]
pub struct TextEncoder {
    backbone: Arc<dyn TextBackbone>,
    dim: usize,
    tail_w: ParamId,
    tail_b: ParamId,
}

pub const TEXT_TAIL_PREFIX: &str = "text_tail.";

impl TextEncoder {
    /// Registers the tail (identity weight, zero bias) in `store`.
    pub fn new(backbone: Arc<dyn TextBackbone>, dim: usize, store: &mut ParamStore) -> Self {
        let b = backbone.dim();
        let mut w = Tensor::zeros(&[b, dim]);
        for i in 0..b.min(dim) {
            w.data_mut()[i * dim + i] = 1.0;
        }
        let tail_w = store.add(format!("{TEXT_TAIL_PREFIX}w"), w);
        let tail_b = store.add(format!("{TEXT_TAIL_PREFIX}b"), Tensor::zeros(&[dim]));
        Self {
            backbone,
            dim,
            tail_w,
            tail_b,
        }
    }

    pub fn fallback(dim: usize, store: &mut ParamStore) -> Self {
        let bb = HashedNgrams::new(HashedNgrams::DEFAULT_BUCKETS, dim, HashedNgrams::DEFAULT_SEED);
        Self::new(Arc::new(bb), dim, store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set_trainable(store: &mut ParamStore, trainable: bool) {
        store.set_frozen_prefix(TEXT_TAIL_PREFIX, !trainable);
    }

    pub fn backbone_features(&self, texts: &[&str]) -> Result<Tensor> {
        let b = self.backbone.dim();
        let mut data = Vec::with_capacity(texts.len() * b);
        for t in texts {
            data.extend(self.backbone.features(t)?);
        }
        Ok(Tensor::new(&[texts.len(), b], data))
    }

    /// `[B, dim]` unit rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, texts: &[&str]) -> Result<Var> {
        let feats = g.constant(self.backbone_features(texts)?);
        let w = g.param(store, self.tail_w);
        let b = g.param(store, self.tail_b);
        let y = g.linear(feats, w, Some(b));
        Ok(g.l2_normalize_rows(y, self.dim, 1e-12))
    }

    pub fn encode(&self, store: &ParamStore, caption: &str) -> Result<TextEmbedding> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &[caption])?;
        Ok(TextEmbedding {
            vector: g.value(v).data().to_vec(),
        })
    }
}

pub fn encode_text(c: &Caption, encoder: &TextEncoder, store: &ParamStore) -> Result<TextEmbedding> {
    encoder.encode(store, &c.text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: Kind) -> PhantomSpec {
        PhantomSpec::new(kind, 1, 0)
    }

    #[test]
    fn captions_are_deterministic_and_share_slots() {
        let a = caption_for(&spec(Kind::Nuclei), 0).unwrap();
        assert_eq!(a, caption_for(&spec(Kind::Nuclei), 0).unwrap());
        let b = caption_for(&spec(Kind::Nuclei), 1).unwrap();
        assert_eq!(a.slots, b.slots);
        assert_ne!(a.text, b.text);
        assert!(caption_for(&spec(Kind::Nuclei), TEMPLATE_VARIANTS).is_err());
    }

    #[test]
    fn sentence_counts_and_vessel_wording() {
        for kind in Kind::ALL {
            for p in 0..4 {
                for v in 0..TEMPLATE_VARIANTS {
                    let c = caption_for(&PhantomSpec::new(kind, p, 0), v).unwrap();
                    let n = sentence_count(&c.text);
                    assert!((2..=4).contains(&n), "{n} sentences: {}", c.text);
                    if kind == Kind::Vessels {
                        let t = c.text.to_lowercase();
                        assert!(t.contains("two channels") || t.contains("dual-channel"), "{t}");
                        assert!(t.contains("tubular"), "{t}");
                    }
                }
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let mut store = ParamStore::new();
        let enc = TextEncoder::fallback(256, &mut store);
        let c = caption_for(&spec(Kind::Plaques), 2).unwrap();
        let a = encode_text(&c, &enc, &store).unwrap();
        let b = encode_text(&c, &enc, &store).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(enc.encode(&store, "  ").is_err());
    }

    #[test]
    fn one_word_change_matches_hand_computed_cosine() {
        let mut store = ParamStore::new();
        let bb = HashedNgrams::new(64, 16, 3);
        let proj = bb.projection().to_vec();
        let enc = TextEncoder::new(Arc::new(bb), 16, &mut store);
        let (s1, s2) = ("bright round nuclei", "bright round plaques");
        let hand = |s: &str| {
            let w: Vec<&str> = s.split(' ').collect();
            let mut keys: Vec<String> = w.iter().map(|t| format!("1:{t}")).collect();
            keys.extend(w.windows(2).map(|p| format!("2:{} {}", p[0], p[1])));
            let mut v = [0f64; 16];
            for k in keys {
                let mut h: u64 = 0xcbf29ce484222325;
                for b in k.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                let row = (h % 64) as usize;
                for d in 0..16 {
                    v[d] += sign * proj[row * 16 + d] as f64;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (h1, h2) = (hand(s1), hand(s2));
        let want: f64 = h1.iter().zip(&h2).map(|(a, b)| a * b).sum();
        let e1 = enc.encode(&store, s1).unwrap().vector;
        let e2 = enc.encode(&store, s2).unwrap().vector;
        let got: f64 = e1.iter().zip(&e2).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!(got < 1.0 - 1e-3);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn frozen_tail_gets_no_gradient() {
        let mut store = ParamStore::new();
        let enc = TextEncoder::fallback(32, &mut store);
        let texts = ["vessels in two channels", "dense nuclei"];
        for trainable in [false, true] {
            TextEncoder::set_trainable(&mut store, trainable);
            let mut g = Graph::new();
            let e = enc.forward(&mut g, &store, &texts).unwrap();
            let r = g.constant(Tensor::new(&[2, 32], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()));
            let p = g.mul(e, r);
            let l = g.sum(p);
            g.backward(l);
            let grads = g.param_grads(&store);
            let nonzero = grads.iter().flatten().any(|t| t.data().iter().any(|&v| v != 0.0));
            assert_eq!(nonzero, trainable);
        }
    }
}
