//! The assembled classifier: encoders (M4), variant-dispatched attention,
//! mean pooling, and a two-class linear head.
//!
//! Pooling follows the variant's output geometry. M4 produces `[T, D]` and
//! pools over time into a D-vector. M1-M3 produce a feature-indexed matrix
//! (`[F, T]` embedding head, `[F, D]` temporal head) and pool the second
//! axis away into an F-vector. The linear head's input width follows suit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_graph, AttentionNodes, AttentionVariant, ScoreMatrix, VariantTag,
};
use crate::encoder::{
    encode_aspect_graph, AspectFeatureSet, EncoderDims, EncoderLayerNodes, FeatureManifest,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::SeededRng;
use crate::tape::{Gradients, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 2;

/// One aspect's name and feature count, in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSpec {
    pub name: String,
    pub features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: AttentionVariant,
    /// SSL embedding dimension; must match the encoder output width.
    pub d: usize,
    pub encoder: EncoderDims,
    pub aspects: Vec<AspectSpec>,
    /// Optional cap on accepted sequence lengths.
    pub t_max: Option<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_manifest(
        variant: AttentionVariant,
        manifest: &FeatureManifest,
        seed: u64,
    ) -> Result<Self> {
        manifest.validate()?;
        let cfg = ModelConfig {
            variant,
            d: manifest.d,
            encoder: manifest.dims(),
            aspects: manifest
                .aspects
                .iter()
                .map(|a| AspectSpec {
                    name: a.name.clone(),
                    features: a.feature_names.len(),
                })
                .collect(),
            t_max: None,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.aspects.is_empty() || self.aspects.iter().any(|a| a.features == 0) {
            return Err(Error::Config("every aspect needs at least one feature".into()));
        }
        if self.encoder.d != self.d {
            return Err(Error::Config(format!(
                "encoder output width {} must equal the SSL dimension {}",
                self.encoder.d, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of aspects K.
    pub fn k(&self) -> usize {
        self.aspects.len()
    }

    /// Total informed feature count F.
    pub fn total_features(&self) -> usize {
        self.aspects.iter().map(|a| a.features).sum()
    }

    /// Width of the pooled representation feeding the linear head.
    pub fn pooled_dim(&self) -> usize {
        match self.variant.tag {
            VariantTag::M4 => self.d,
            _ => self.total_features(),
        }
    }

    /// Stable hash of the serialized config; stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct PredictionOutput {
    /// Two raw logits (PD is class 1).
    pub logits: Tensor,
    /// Softmax of the logits; sums to 1.
    pub probabilities: Tensor,
    /// Attention weights of the variant's head.
    pub scores: ScoreMatrix,
    /// Pooled representation fed to the linear head.
    pub pooled: Tensor,
}

impl PredictionOutput {
    /// Probability of the positive (PD) class.
    pub fn p_positive(&self) -> f64 {
        self.probabilities.data()[1]
    }
}

/// One labeled utterance ready for training or scoring.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub ssl: Tensor,
    pub features: AspectFeatureSet,
    /// 0 = HC, 1 = PD.
    pub label: u8,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Builds a model with seeded uniform init (bounds +/- 1/sqrt(fan_in)).
    pub fn init(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = SeededRng::with_stream(cfg.seed, 0xA11C);
        let mut params = ParamSet::new();
        if cfg.variant.tag == VariantTag::M4 {
            for aspect in &cfg.aspects {
                let dims =
                    crate::encoder::AspectEncoderParams::layer_dims(aspect.features, &cfg.encoder);
                for (li, &(d_in, d_out)) in dims.iter().enumerate() {
                    let bound = 1.0 / (d_in as f64).sqrt();
                    let prefix = format!("enc.{}.l{}", aspect.name, li);
                    params.insert(
                        format!("{prefix}.w"),
                        Tensor::uniform(&[d_in, d_out], -bound, bound, &mut rng),
                    )?;
                    params.insert(
                        format!("{prefix}.b"),
                        Tensor::uniform(&[d_out], -bound, bound, &mut rng),
                    )?;
                    params.insert(format!("{prefix}.gamma"), Tensor::filled(&[d_out], 1.0))?;
                    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[d_out]))?;
                }
            }
        }
        let bound = 1.0 / (cfg.d as f64).sqrt();
        params.insert(
            "attn.w_q",
            Tensor::uniform(&[cfg.d, cfg.d], -bound, bound, &mut rng),
        )?;
        match cfg.variant.tag {
            VariantTag::M1 | VariantTag::M2 => params.insert(
                "attn.w_v",
                Tensor::uniform(&[cfg.d, cfg.d], -bound, bound, &mut rng),
            )?,
            VariantTag::M4 => params.insert(
                "attn.w_k",
                Tensor::uniform(&[cfg.d, cfg.d], -bound, bound, &mut rng),
            )?,
            VariantTag::M3 => {}
        }
        let p = cfg.pooled_dim();
        let cls_bound = 1.0 / (p as f64).sqrt();
        params.insert(
            "cls.w",
            Tensor::uniform(&[p, N_CLASSES], -cls_bound, cls_bound, &mut rng),
        )?;
        params.insert(
            "cls.b",
            Tensor::uniform(&[N_CLASSES], -cls_bound, cls_bound, &mut rng),
        )?;
        Ok(Model { cfg, params })
    }

    fn check_inputs(&self, ssl: &Tensor, features: &AspectFeatureSet) -> Result<()> {
        if ssl.rank() != 2 || ssl.dim(1) != self.cfg.d {
            return Err(Error::Shape(format!(
                "ssl input must be [T, {}], got {:?}",
                self.cfg.d,
                ssl.shape()
            )));
        }
        if let Some(t_max) = self.cfg.t_max {
            if ssl.dim(0) > t_max {
                return Err(Error::Shape(format!(
                    "sequence length {} exceeds t_max {t_max}",
                    ssl.dim(0)
                )));
            }
        }
        if !ssl.is_finite() {
            return Err(Error::Numeric("non-finite ssl input".into()));
        }
        features.ensure_finite()?;
        let expected: Vec<(String, usize)> = self
            .cfg
            .aspects
            .iter()
            .map(|a| (a.name.clone(), a.features))
            .collect();
        let got: Vec<(String, usize)> = features
            .aspects
            .iter()
            .map(|a| (a.name.clone(), a.values.len()))
            .collect();
        if expected != got {
            return Err(Error::Shape(format!(
                "feature layout {got:?} does not match model config {expected:?}"
            )));
        }
        Ok(())
    }

    /// Inserts every parameter as a tape leaf, in parameter order.
    fn param_leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn node(&self, leaves: &[NodeId], name: &str) -> NodeId {
        leaves[self.params.index_of(name).expect("parameter exists")]
    }

    fn forward_graph(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        ssl: &Tensor,
        features: &AspectFeatureSet,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let ssl_node = tape.leaf(ssl.clone());
        let context = if self.cfg.variant.tag == VariantTag::M4 {
            let mut tokens = Vec::with_capacity(self.cfg.k());
            for aspect in &features.aspects {
                let x = tape.leaf(Tensor::from_vec(
                    &[aspect.values.len()],
                    aspect.values.clone(),
                )?);
                let layers: Vec<EncoderLayerNodes> = (0..3)
                    .map(|li| {
                        let prefix = format!("enc.{}.l{}", aspect.name, li);
                        EncoderLayerNodes {
                            w: self.node(leaves, &format!("{prefix}.w")),
                            b: self.node(leaves, &format!("{prefix}.b")),
                            gamma: self.node(leaves, &format!("{prefix}.gamma")),
                            beta: self.node(leaves, &format!("{prefix}.beta")),
                        }
                    })
                    .collect();
                tokens.push(encode_aspect_graph(
                    tape,
                    x,
                    &layers,
                    self.cfg.encoder.dropout,
                    rng,
                    training,
                )?);
            }
            tape.stack_rows(&tokens)?
        } else {
            tape.leaf(Tensor::from_vec(
                &[self.cfg.total_features()],
                features.concat(),
            )?)
        };
        let nodes = AttentionNodes {
            w_q: self.node(leaves, "attn.w_q"),
            w_k: self
                .params
                .index_of("attn.w_k")
                .map(|_| self.node(leaves, "attn.w_k")),
            w_v: self
                .params
                .index_of("attn.w_v")
                .map(|_| self.node(leaves, "attn.w_v")),
        };
        let (z, w) = attention_graph(tape, self.cfg.variant, ssl_node, context, &nodes)?;
        let pool_axis = match self.cfg.variant.tag {
            VariantTag::M4 => 0,
            _ => 1,
        };
        let pooled = tape.mean_pool(z, pool_axis)?;
        let logits = tape.linear(
            pooled,
            self.node(leaves, "cls.w"),
            self.node(leaves, "cls.b"),
        )?;
        Ok((logits, w, pooled))
    }

    /// Full forward pass for one utterance.
    pub fn forward(
        &self,
        ssl: &Tensor,
        features: &AspectFeatureSet,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<PredictionOutput> {
        self.check_inputs(ssl, features)?;
        let mut tape = Tape::new();
        let leaves = self.param_leaves(&mut tape);
        let (logits, w, pooled) =
            self.forward_graph(&mut tape, &leaves, ssl, features, rng, training)?;
        let probs = tape.softmax(logits, 0)?;
        Ok(PredictionOutput {
            logits: tape.value(logits).clone(),
            probabilities: tape.value(probs).clone(),
            scores: ScoreMatrix {
                weights: tape.value(w).clone(),
                axis_normalized: 1,
            },
            pooled: tape.value(pooled).clone(),
        })
    }

    /// Mean cross-entropy over a batch plus parameter gradients.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainSample],
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = Gradients::zeros_like(&self.params);
        let mut loss_sum = 0.0;
        for sample in batch {
            self.check_inputs(&sample.ssl, &sample.features)?;
            let mut tape = Tape::new();
            let leaves = self.param_leaves(&mut tape);
            let (logits, _, _) =
                self.forward_graph(&mut tape, &leaves, &sample.ssl, &sample.features, rng, training)?;
            let loss = tape.cross_entropy(logits, &[sample.label as usize])?;
            let loss_val = tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss; parameter norms: {}",
                    self.param_norms()
                )));
            }
            tape.backward(loss)?;
            let sample_grads = Gradients(
                leaves
                    .iter()
                    .zip(self.params.iter())
                    .map(|(id, (_, t))| {
                        tape.grad(*id)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; t.numel()])
                    })
                    .collect(),
            );
            total.add_scaled(&sample_grads, scale);
            loss_sum += loss_val;
        }
        Ok((loss_sum * scale, total))
    }

    /// One optimizer step on the mean batch loss. Returns that loss.
    pub fn backward_step(
        &mut self,
        batch: &[TrainSample],
        optimizer: &mut Adam,
        rng: &mut SeededRng,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch, rng, true)?;
        optimizer.step(&mut self.params, &grads);
        Ok(loss)
    }

    fn param_norms(&self) -> String {
        self.params
            .iter()
            .map(|(n, t)| {
                let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                format!("{n}={norm:.3e}")
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    /// Writes a versioned binary checkpoint: magic, version, config
    /// fingerprint, then each parameter as name, shape, little-endian f64
    /// payload.
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.cfg.fingerprint().to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`Model::save_params`] into a model
    /// with the given config. The config fingerprint must match.
    pub fn load_params(cfg: ModelConfig, path: &Path) -> Result<Model> {
        cfg.validate()?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(path, "not a model checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let fingerprint = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        if fingerprint != cfg.fingerprint() {
            return Err(Error::Config(
                "checkpoint was written for a different model config".into(),
            ));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let mut template = Model::init(cfg)?;
        if count != template.params.len() {
            return Err(Error::parse(
                path,
                format!(
                    "checkpoint has {count} parameters, config expects {}",
                    template.params.len()
                ),
            ));
        }
        for i in 0..count {
            let name_len =
                u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::parse(path, "parameter name is not utf-8"))?;
            if template.params.name_at(i) != name {
                return Err(Error::parse(
                    path,
                    format!(
                        "parameter {i} is {name:?}, expected {:?}",
                        template.params.name_at(i)
                    ),
                ));
            }
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize);
            }
            if shape != template.params.tensor_at(i).shape() {
                return Err(Error::parse(
                    path,
                    format!("shape mismatch for {name}: {shape:?}"),
                ));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
            }
            *template.params.tensor_at_mut(i) = Tensor::from_vec(&shape, data)?.with_grad();
        }
        if cur.pos != bytes.len() {
            return Err(Error::parse(
                path,
                format!("trailing bytes after offset {}", cur.pos),
            ));
        }
        Ok(template)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASPDCKP\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.path,
                format!(
                    "truncated at byte {} (wanted {n} more, {} available)",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
