//! Per-aspect feature encoders.
//!
//! Raw interpretable speech features come grouped by aspect (articulation,
//! glottal, phonation, prosody by default). Each aspect has its own
//! three-layer encoder (linear, LayerNorm, dropout, repeated) that maps its
//! feature vector to one D-dimensional token. Encoders share nothing, so a
//! token row depends only on its own aspect's inputs and parameters.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Default aspect order used everywhere a dataset does not specify one.
pub const DEFAULT_ASPECTS: [&str; 4] = ["articulation", "glottal", "phonation", "prosody"];

// ── Feature containers ──────────────────────────────────────────────────

/// One aspect's raw feature values for a single utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectFeatures {
    pub name: String,
    pub values: Vec<f64>,
}

/// K named groups of raw interpretable features for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectFeatureSet {
    pub aspects: Vec<AspectFeatures>,
}

impl AspectFeatureSet {
    pub fn new(aspects: Vec<AspectFeatures>) -> Result<Self> {
        if aspects.is_empty() {
            return Err(Error::Data("feature set needs at least one aspect".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &aspects {
            if a.values.is_empty() {
                return Err(Error::Data(format!("aspect {} has no features", a.name)));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Data(format!("duplicate aspect name {}", a.name)));
            }
        }
        Ok(AspectFeatureSet { aspects })
    }

    /// Number of aspects K.
    pub fn k(&self) -> usize {
        self.aspects.len()
    }

    /// Total feature count F across aspects.
    pub fn total_features(&self) -> usize {
        self.aspects.iter().map(|a| a.values.len()).sum()
    }

    pub fn feature_counts(&self) -> Vec<usize> {
        self.aspects.iter().map(|a| a.values.len()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.aspects.iter().map(|a| a.name.clone()).collect()
    }

    /// Features of all aspects concatenated in aspect order.
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_features());
        for a in &self.aspects {
            out.extend_from_slice(&a.values);
        }
        out
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for a in &self.aspects {
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite feature value in aspect {}",
                    a.name
                )));
            }
        }
        Ok(())
    }
}

/// Encoded tokens, one row per aspect.
#[derive(Debug, Clone)]
pub struct AspectTokenMatrix {
    /// `[K, D]` token matrix.
    pub tokens: Tensor,
    pub aspect_names: Vec<String>,
}

// ── Encoder parameters ──────────────────────────────────────────────────

/// Hidden and output widths of every aspect encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub h1: usize,
    pub h2: usize,
    pub d: usize,
    pub dropout: f64,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            h1: 128,
            h2: 512,
            d: 1024,
            dropout: 0.1,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One linear + LayerNorm stage.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl EncoderLayer {
    fn init(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        EncoderLayer {
            w: Tensor::uniform(&[d_in, d_out], -bound, bound, rng),
            b: Tensor::uniform(&[d_out], -bound, bound, rng),
            gamma: Tensor::filled(&[d_out], 1.0),
            beta: Tensor::zeros(&[d_out]),
        }
    }
}

/// Parameters of one aspect's encoder: three linear layers, each followed
/// by LayerNorm and dropout. Aspects never share parameters.
#[derive(Debug, Clone)]
pub struct AspectEncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub dropout: f64,
}

impl AspectEncoderParams {
    /// Stage widths for an aspect with `f_k` input features.
    pub fn layer_dims(f_k: usize, dims: &EncoderDims) -> [(usize, usize); 3] {
        [(f_k, dims.h1), (dims.h1, dims.h2), (dims.h2, dims.d)]
    }

    pub fn init(f_k: usize, dims: &EncoderDims, rng: &mut SeededRng) -> Self {
        let layers = Self::layer_dims(f_k, dims)
            .iter()
            .map(|&(i, o)| EncoderLayer::init(i, o, rng))
            .collect();
        AspectEncoderParams {
            layers,
            dropout: dims.dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.dim(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("three layers").w.dim(1)
    }
}

/// Tape-node handles for one encoder layer (used when the encoder is part
/// of a larger differentiable graph).
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Builds the encoder chain on a tape: (linear, LayerNorm, dropout) x 3.
pub fn encode_aspect_graph(
    tape: &mut Tape,
    x: NodeId,
    layers: &[EncoderLayerNodes],
    dropout: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<NodeId> {
    let mut h = x;
    for l in layers {
        h = tape.linear(h, l.w, l.b)?;
        h = tape.layer_norm(h, l.gamma, l.beta, LAYER_NORM_EPS)?;
        h = tape.dropout(h, dropout, rng, training)?;
    }
    Ok(h)
}

/// Encodes one aspect's feature vector into a D-dimensional token.
pub fn encode_aspect(
    features: &[f64],
    params: &AspectEncoderParams,
    rng: &mut SeededRng,
    training: bool,
) -> Result<Tensor> {
    if features.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} features, got {}",
            params.input_dim(),
            features.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[features.len()], features.to_vec())?);
    let layer_nodes: Vec<EncoderLayerNodes> = params
        .layers
        .iter()
        .map(|l| EncoderLayerNodes {
            w: tape.leaf(l.w.clone()),
            b: tape.leaf(l.b.clone()),
            gamma: tape.leaf(l.gamma.clone()),
            beta: tape.leaf(l.beta.clone()),
        })
        .collect();
    let out = encode_aspect_graph(&mut tape, x, &layer_nodes, params.dropout, rng, training)?;
    Ok(tape.value(out).clone())
}

/// Encodes every aspect and stacks the tokens in aspect order.
pub fn encode_all(
    fs: &AspectFeatureSet,
    params: &[AspectEncoderParams],
    rng: &mut SeededRng,
    training: bool,
) -> Result<AspectTokenMatrix> {
    if fs.k() != params.len() {
        return Err(Error::Config(format!(
            "{} aspect groups but {} encoder parameter sets",
            fs.k(),
            params.len()
        )));
    }
    let mut rows = Vec::with_capacity(fs.k());
    for (a, p) in fs.aspects.iter().zip(params) {
        let token = encode_aspect(&a.values, p, rng, training)?;
        rows.push(token.into_data());
    }
    Ok(AspectTokenMatrix {
        tokens: Tensor::from_rows(&rows)?,
        aspect_names: fs.names(),
    })
}

// ── Feature normalization ───────────────────────────────────────────────

/// Per-feature mean/std for one aspect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-scoring statistics, tagged with the speakers they were computed from
/// so evaluation code can assert that no test speaker leaked in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub aspects: Vec<AspectStats>,
    pub source_speakers: BTreeSet<String>,
}

const STD_FLOOR: f64 = 1e-12;

/// Computes per-feature statistics over `(speaker, features)` pairs.
/// Uses the population standard deviation.
pub fn compute_feature_stats<'a>(
    samples: impl IntoIterator<Item = (&'a str, &'a AspectFeatureSet)>,
) -> Result<FeatureStats> {
    let mut iter = samples.into_iter();
    let (first_speaker, first) = iter
        .next()
        .ok_or_else(|| Error::Data("cannot compute stats from zero samples".into()))?;
    let mut speakers = BTreeSet::new();
    speakers.insert(first_speaker.to_string());
    let mut sums: Vec<Vec<f64>> = first
        .aspects
        .iter()
        .map(|a| a.values.clone())
        .collect();
    let mut sq_sums: Vec<Vec<f64>> = first
        .aspects
        .iter()
        .map(|a| a.values.iter().map(|v| v * v).collect())
        .collect();
    let names = first.names();
    let counts = first.feature_counts();
    let mut n = 1usize;
    for (speaker, fs) in iter {
        if fs.names() != names || fs.feature_counts() != counts {
            return Err(Error::Data(
                "inconsistent aspect layout across samples".into(),
            ));
        }
        speakers.insert(speaker.to_string());
        for (k, a) in fs.aspects.iter().enumerate() {
            for (j, v) in a.values.iter().enumerate() {
                sums[k][j] += v;
                sq_sums[k][j] += v * v;
            }
        }
        n += 1;
    }
    let nf = n as f64;
    let aspects = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mean: Vec<f64> = sums[k].iter().map(|s| s / nf).collect();
            let std: Vec<f64> = sq_sums[k]
                .iter()
                .zip(&mean)
                .map(|(sq, m)| (sq / nf - m * m).max(0.0).sqrt())
                .collect();
            AspectStats {
                name: name.clone(),
                mean,
                std,
            }
        })
        .collect();
    Ok(FeatureStats {
        aspects,
        source_speakers: speakers,
    })
}

/// Z-scores a feature set with training-fold statistics. Features whose
/// training std is below `1e-12` map to 0.
pub fn normalize_features(fs: &AspectFeatureSet, stats: &FeatureStats) -> Result<AspectFeatureSet> {
    if fs.k() != stats.aspects.len() {
        return Err(Error::Shape(format!(
            "{} aspects but stats for {}",
            fs.k(),
            stats.aspects.len()
        )));
    }
    let mut out = Vec::with_capacity(fs.k());
    for (a, s) in fs.aspects.iter().zip(&stats.aspects) {
        if a.name != s.name || a.values.len() != s.mean.len() {
            return Err(Error::Shape(format!(
                "stats mismatch for aspect {} ({} features vs {})",
                a.name,
                a.values.len(),
                s.mean.len()
            )));
        }
        let values = a
            .values
            .iter()
            .zip(s.mean.iter().zip(&s.std))
            .map(|(v, (m, sd))| if *sd < STD_FLOOR { 0.0 } else { (v - m) / sd })
            .collect();
        out.push(AspectFeatures {
            name: a.name.clone(),
            values,
        });
    }
    AspectFeatureSet::new(out)
}

// ── Feature manifest (external interface) ───────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectManifestEntry {
    pub name: String,
    pub feature_names: Vec<String>,
}

/// On-disk description of the feature layout and encoder widths for a
/// dataset. Serialized as JSON next to the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub aspects: Vec<AspectManifestEntry>,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H1")]
    pub h1: usize,
    #[serde(rename = "H2")]
    pub h2: usize,
    pub dropout: f64,
}

impl FeatureManifest {
    pub fn validate(&self) -> Result<()> {
        if self.aspects.is_empty() {
            return Err(Error::Config("manifest has no aspects".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &self.aspects {
            if a.feature_names.is_empty() {
                return Err(Error::Config(format!(
                    "aspect {} lists no features",
                    a.name
                )));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate aspect {}", a.name)));
            }
        }
        if self.d == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn feature_counts(&self) -> Vec<usize> {
        self.aspects.iter().map(|a| a.feature_names.len()).collect()
    }

    pub fn aspect_names(&self) -> Vec<String> {
        self.aspects.iter().map(|a| a.name.clone()).collect()
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            h1: self.h1,
            h2: self.h2,
            d: self.d,
            dropout: self.dropout,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: FeatureManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_dims() -> EncoderDims {
        EncoderDims {
            h1: 3,
            h2: 4,
            d: 5,
            dropout: 0.1,
        }
    }

    fn feature_set(k: usize, f_k: usize, rng: &mut SeededRng) -> AspectFeatureSet {
        let aspects = (0..k)
            .map(|i| AspectFeatures {
                name: format!("aspect{i}"),
                values: (0..f_k).map(|_| rng.normal()).collect(),
            })
            .collect();
        AspectFeatureSet::new(aspects).unwrap()
    }

    #[test]
    fn zero_weights_and_beta_give_zero_token() {
        let mut rng = SeededRng::new(1);
        let mut params = AspectEncoderParams::init(2, &tiny_dims(), &mut rng);
        for l in &mut params.layers {
            l.w = Tensor::zeros(l.w.shape());
            l.b = Tensor::zeros(l.b.shape());
            l.beta = Tensor::zeros(l.beta.shape());
        }
        let token = encode_aspect(&[0.4, -1.2], &params, &mut rng, false).unwrap();
        assert!(token.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = SeededRng::new(2);
        let params = AspectEncoderParams::init(3, &tiny_dims(), &mut rng);
        let x = [0.1, 0.2, 0.3];
        let a = encode_aspect(&x, &params, &mut rng, false).unwrap();
        let b = encode_aspect(&x, &params, &mut rng, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn matches_hand_composed_primitive_chain() {
        let mut rng = SeededRng::new(3);
        let params = AspectEncoderParams::init(2, &tiny_dims(), &mut rng);
        let x = [0.7, -0.4];
        let token = encode_aspect(&x, &params, &mut rng, false).unwrap();

        // Independent composition straight from tape primitives.
        let mut tape = Tape::new();
        let mut h = tape.leaf(Tensor::from_vec(&[2], x.to_vec()).unwrap());
        for l in &params.layers {
            let w = tape.leaf(l.w.clone());
            let b = tape.leaf(l.b.clone());
            let g = tape.leaf(l.gamma.clone());
            let be = tape.leaf(l.beta.clone());
            h = tape.linear(h, w, b).unwrap();
            h = tape.layer_norm(h, g, be, LAYER_NORM_EPS).unwrap();
        }
        assert_eq!(token.data(), tape.value(h).data());
        assert_eq!(token.shape(), &[5]);
    }

    #[test]
    fn encode_all_single_aspect_equals_encode_aspect() {
        let mut rng = SeededRng::new(4);
        let params = vec![AspectEncoderParams::init(3, &tiny_dims(), &mut rng)];
        let fs = feature_set(1, 3, &mut rng);
        let matrix = encode_all(&fs, &params, &mut rng.clone(), false).unwrap();
        let token = encode_aspect(&fs.aspects[0].values, &params[0], &mut rng, false).unwrap();
        assert_eq!(matrix.tokens.shape(), &[1, 5]);
        assert_eq!(matrix.tokens.row(0), token.data());
    }

    #[test]
    fn permuting_aspects_and_params_permutes_rows() {
        let mut rng = SeededRng::new(5);
        let params: Vec<AspectEncoderParams> = (0..3)
            .map(|_| AspectEncoderParams::init(2, &tiny_dims(), &mut rng))
            .collect();
        let fs = feature_set(3, 2, &mut rng);
        let base = encode_all(&fs, &params, &mut rng.clone(), false).unwrap();

        let perm = [2usize, 0, 1];
        let fs_p = AspectFeatureSet::new(perm.iter().map(|&i| fs.aspects[i].clone()).collect())
            .unwrap();
        let params_p: Vec<AspectEncoderParams> =
            perm.iter().map(|&i| params[i].clone()).collect();
        let permuted = encode_all(&fs_p, &params_p, &mut rng.clone(), false).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.tokens.row(row), base.tokens.row(src));
        }
    }

    #[test]
    fn perturbing_one_aspect_changes_only_its_row() {
        let mut rng = SeededRng::new(6);
        let params: Vec<AspectEncoderParams> = (0..4)
            .map(|_| AspectEncoderParams::init(3, &tiny_dims(), &mut rng))
            .collect();
        let fs = feature_set(4, 3, &mut rng);
        let base = encode_all(&fs, &params, &mut rng.clone(), false).unwrap();
        for j in 0..4 {
            let mut fs2 = fs.clone();
            fs2.aspects[j].values[1] += 0.5;
            let out = encode_all(&fs2, &params, &mut rng.clone(), false).unwrap();
            for k in 0..4 {
                if k == j {
                    assert_ne!(out.tokens.row(k), base.tokens.row(k));
                } else {
                    assert_eq!(out.tokens.row(k), base.tokens.row(k));
                }
            }
        }
    }

    #[test]
    fn encode_errors_on_bad_input() {
        let mut rng = SeededRng::new(7);
        let params = AspectEncoderParams::init(3, &tiny_dims(), &mut rng);
        assert!(encode_aspect(&[1.0, 2.0], &params, &mut rng, false).is_err());
        assert!(encode_aspect(&[1.0, f64::NAN, 0.0], &params, &mut rng, false).is_err());
        let fs = feature_set(2, 3, &mut rng);
        let one = vec![AspectEncoderParams::init(3, &tiny_dims(), &mut rng)];
        assert!(encode_all(&fs, &one, &mut rng, false).is_err());
    }

    #[test]
    fn normalize_features_examples() {
        // Three samples of a single 1-feature aspect: values 1, 2, 3.
        // Population std is sqrt(2/3); z-scores are -1.224744871391589,
        // 0, +1.224744871391589.
        let sets: Vec<AspectFeatureSet> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| {
                AspectFeatureSet::new(vec![AspectFeatures {
                    name: "a".into(),
                    values: vec![v, 7.0],
                }])
                .unwrap()
            })
            .collect();
        let stats =
            compute_feature_stats(sets.iter().map(|fs| ("spk", fs))).unwrap();
        assert_abs_diff_eq!(stats.aspects[0].mean[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            stats.aspects[0].std[0],
            0.816496580927726,
            epsilon = 1e-12
        );
        let z = normalize_features(&sets[0], &stats).unwrap();
        assert_abs_diff_eq!(z.aspects[0].values[0], -1.224744871391589, epsilon = 1e-12);
        // Constant feature column maps to zero.
        assert_eq!(z.aspects[0].values[1], 0.0);
        // A feature equal to its mean maps to zero.
        let z2 = normalize_features(&sets[1], &stats).unwrap();
        assert_eq!(z2.aspects[0].values[0], 0.0);
    }

    #[test]
    fn normalize_rejects_mismatched_stats() {
        let fs = AspectFeatureSet::new(vec![AspectFeatures {
            name: "a".into(),
            values: vec![1.0, 2.0],
        }])
        .unwrap();
        let stats = FeatureStats {
            aspects: vec![AspectStats {
                name: "a".into(),
                mean: vec![0.0],
                std: vec![1.0],
            }],
            source_speakers: BTreeSet::new(),
        };
        assert!(normalize_features(&fs, &stats).is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let manifest = FeatureManifest {
            aspects: vec![
                AspectManifestEntry {
                    name: "articulation".into(),
                    feature_names: vec!["f1".into(), "f2".into()],
                },
                AspectManifestEntry {
                    name: "prosody".into(),
                    feature_names: vec!["f3".into()],
                },
            ],
            d: 8,
            h1: 4,
            h2: 6,
            dropout: 0.1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.json");
        manifest.save(&path).unwrap();
        let loaded = FeatureManifest::load(&path).unwrap();
        assert_eq!(loaded.feature_counts(), vec![2, 1]);
        assert_eq!(loaded.d, 8);

        let mut bad = manifest.clone();
        bad.aspects[1].name = "articulation".into();
        assert!(bad.validate().is_err());
        let mut bad = manifest;
        bad.aspects[0].feature_names.clear();
        assert!(bad.validate().is_err());
    }
}
