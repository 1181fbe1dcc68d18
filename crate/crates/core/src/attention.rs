//! The four cross-attention variants of the ablation ladder.
//!
//! - **M1**: base two-head formulation. Scores are softmaxed along the
//!   feature axis F and transposed afterwards, which breaks the
//!   probability reading of the rows and couples the output scale to D
//!   (embedding head) or to the sequence length T (temporal head). The
//!   behavior is preserved deliberately so the ablation and the
//!   flaw-witness tests can measure it. Deprecated for real use.
//! - **M2**: same scores, but transposed before the softmax, which then
//!   runs along D (embedding head) or T (temporal head); every row of the
//!   weight matrix is a probability distribution again.
//! - **M3**: M2 with the value matrix replaced by the tiled raw informed
//!   features instead of projected SSL frames.
//! - **M4**: single-head aspect attention. Encoded aspect tokens provide
//!   Key and Value; the value projection is pinned to the identity so each
//!   aspect's contribution to the output is its own attention weight times
//!   its own token. Output rows are convex combinations of the K tokens.
//!
//! Score scaling always divides by the square root of the Q/K contraction
//! dimension: D for M4 and the temporal head, the runtime T for the
//! embedding head.

use serde::{Deserialize, Serialize};

use crate::encoder::AspectTokenMatrix;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── Variant descriptors ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantTag {
    M1,
    M2,
    M3,
    M4,
}

impl VariantTag {
    pub const ALL: [VariantTag; 4] = [VariantTag::M1, VariantTag::M2, VariantTag::M3, VariantTag::M4];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantTag::M1 => "m1",
            VariantTag::M2 => "m2",
            VariantTag::M3 => "m3",
            VariantTag::M4 => "m4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(VariantTag::M1),
            "m2" => Ok(VariantTag::M2),
            "m3" => Ok(VariantTag::M3),
            "m4" => Ok(VariantTag::M4),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionHead {
    Embedding,
    Temporal,
    /// Attention over aspect tokens; only valid for M4.
    Aspect,
}

impl AttentionHead {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionHead::Embedding => "embedding",
            AttentionHead::Temporal => "temporal",
            AttentionHead::Aspect => "aspect",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding" => Ok(AttentionHead::Embedding),
            "temporal" => Ok(AttentionHead::Temporal),
            "aspect" => Ok(AttentionHead::Aspect),
            other => Err(Error::Config(format!("unknown attention head {other:?}"))),
        }
    }
}

/// Which ablation rung and which head a model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionVariant {
    pub tag: VariantTag,
    pub head: AttentionHead,
}

impl AttentionVariant {
    pub fn new(tag: VariantTag, head: AttentionHead) -> Result<Self> {
        match (tag, head) {
            (VariantTag::M4, AttentionHead::Aspect) => Ok(AttentionVariant { tag, head }),
            (VariantTag::M4, _) => Err(Error::Config(
                "m4 has exactly one head (aspect)".into(),
            )),
            (_, AttentionHead::Aspect) => Err(Error::Config(format!(
                "aspect head is only valid for m4, not {}",
                tag.as_str()
            ))),
            _ => Ok(AttentionVariant { tag, head }),
        }
    }

    pub fn m4() -> Self {
        AttentionVariant {
            tag: VariantTag::M4,
            head: AttentionHead::Aspect,
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.tag.as_str(), self.head.as_str())
    }
}

// ── Parameters and scores ───────────────────────────────────────────────

/// Projection matrices of one attention block.
///
/// `w_k` is `None` (identity) for M1-M3 and learnable for M4. `w_v` is
/// learnable for M1/M2 and `None` (identity, no gradient) for M3/M4.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Option<Tensor>,
    pub w_v: Option<Tensor>,
    /// Configured key dimensionality (D). Heads whose contraction
    /// dimension is the runtime sequence length use that length instead.
    pub d_k: usize,
}

impl AttentionParams {
    pub fn init(variant: AttentionVariant, d: usize, rng: &mut crate::rng::SeededRng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let proj = |rng: &mut crate::rng::SeededRng| Tensor::uniform(&[d, d], -bound, bound, rng);
        match variant.tag {
            VariantTag::M1 | VariantTag::M2 => AttentionParams {
                w_q: proj(rng),
                w_k: None,
                w_v: Some(proj(rng)),
                d_k: d,
            },
            VariantTag::M3 => AttentionParams {
                w_q: proj(rng),
                w_k: None,
                w_v: None,
                d_k: d,
            },
            VariantTag::M4 => AttentionParams {
                w_q: proj(rng),
                w_k: Some(proj(rng)),
                w_v: None,
                d_k: d,
            },
        }
    }
}

/// Attention weights together with the axis the softmax ran along.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub weights: Tensor,
    pub axis_normalized: usize,
}

impl ScoreMatrix {
    /// Sums along the normalized axis; for `axis_normalized == 1` these
    /// are the row sums.
    pub fn normalized_sums(&self) -> Vec<f64> {
        let (r, c) = (self.weights.dim(0), self.weights.dim(1));
        if self.axis_normalized == 1 {
            (0..r).map(|i| self.weights.row(i).iter().sum()).collect()
        } else {
            (0..c)
                .map(|j| (0..r).map(|i| self.weights.at(i, j)).sum())
                .collect()
        }
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.axis_normalized == 1
            && self
                .normalized_sums()
                .iter()
                .all(|s| (s - 1.0).abs() <= tol)
    }
}

// ── Graph builders ──────────────────────────────────────────────────────

/// Tape handles for the attention projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub w_k: Option<NodeId>,
    pub w_v: Option<NodeId>,
}

fn tile_rows(values: &[f64], times: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(values.len() * times);
    for _ in 0..times {
        data.extend_from_slice(values);
    }
    Tensor::from_vec(&[times, values.len()], data)
}

/// Builds the variant-dispatched attention subgraph.
///
/// `context` is the rank-1 informed feature vector for M1-M3 and the
/// `[K, D]` token matrix node for M4. Returns `(z, w)` node ids where `w`
/// is the softmax output (the explanation scores).
pub fn attention_graph(
    tape: &mut Tape,
    variant: AttentionVariant,
    ssl: NodeId,
    context: NodeId,
    nodes: &AttentionNodes,
) -> Result<(NodeId, NodeId)> {
    let ssl_shape = tape.value(ssl).shape().to_vec();
    if ssl_shape.len() != 2 {
        return Err(Error::Shape(format!(
            "ssl input must be [T, D], got {ssl_shape:?}"
        )));
    }
    let (t_len, d) = (ssl_shape[0], ssl_shape[1]);
    let wq_shape = tape.value(nodes.w_q).shape().to_vec();
    if wq_shape != [d, d] {
        return Err(Error::Shape(format!(
            "w_q must be [{d}, {d}], got {wq_shape:?}"
        )));
    }

    match variant.tag {
        VariantTag::M4 => {
            let tokens = context;
            let tok_shape = tape.value(tokens).shape().to_vec();
            if tok_shape.len() != 2 || tok_shape[1] != d {
                return Err(Error::Shape(format!(
                    "token matrix must be [K, {d}], got {tok_shape:?}"
                )));
            }
            let w_k = nodes
                .w_k
                .ok_or_else(|| Error::Config("m4 needs a learnable w_k".into()))?;
            let q = tape.matmul(ssl, nodes.w_q)?;
            let keys = tape.matmul(tokens, w_k)?;
            let keys_t = tape.transpose(keys)?;
            let scores = tape.matmul(q, keys_t)?;
            let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let w = tape.softmax(scaled, 1)?;
            // w_v is the identity by construction: values are the tokens.
            let z = tape.matmul(w, tokens)?;
            Ok((z, w))
        }
        tag => {
            let informed = context;
            let inf_shape = tape.value(informed).shape().to_vec();
            if inf_shape.len() != 1 {
                return Err(Error::Shape(format!(
                    "informed features must be rank 1, got {inf_shape:?}"
                )));
            }
            let informed_values = tape.value(informed).data().to_vec();
            let q = tape.matmul(ssl, nodes.w_q)?;

            // Raw scores, pre-softmax: D x F for the embedding head
            // (contraction over T), T x F for the temporal head
            // (contraction over D).
            let (scores, contraction) = match variant.head {
                AttentionHead::Embedding => {
                    let q_e = tape.transpose(q)?;
                    let k_rep = tape.leaf(tile_rows(&informed_values, t_len)?);
                    (tape.matmul(q_e, k_rep)?, t_len)
                }
                AttentionHead::Temporal => {
                    let k_rep = tape.leaf(tile_rows(&informed_values, d)?);
                    (tape.matmul(q, k_rep)?, d)
                }
                AttentionHead::Aspect => unreachable!("validated by AttentionVariant"),
            };
            let scaled = tape.scale(scores, 1.0 / (contraction as f64).sqrt())?;

            let value_node = |tape: &mut Tape| -> Result<NodeId> {
                let w_v = nodes
                    .w_v
                    .ok_or_else(|| Error::Config("m1/m2 need a learnable w_v".into()))?;
                let v = tape.matmul(ssl, w_v)?;
                match variant.head {
                    AttentionHead::Embedding => tape.transpose(v),
                    _ => Ok(v),
                }
            };

            match tag {
                VariantTag::M1 => {
                    // Base formulation: softmax along F, transpose after.
                    let w = tape.softmax(scaled, 1)?;
                    let w_t = tape.transpose(w)?;
                    let v = value_node(tape)?;
                    let z = tape.matmul(w_t, v)?;
                    Ok((z, w))
                }
                VariantTag::M2 | VariantTag::M3 => {
                    // Fixed ordering: transpose first, then softmax along
                    // D (embedding) or T (temporal).
                    let s_t = tape.transpose(scaled)?;
                    let w = tape.softmax(s_t, 1)?;
                    let z = if tag == VariantTag::M2 {
                        let v = value_node(tape)?;
                        tape.matmul(w, v)?
                    } else {
                        // M3: values are the tiled raw informed features.
                        let rep = match variant.head {
                            AttentionHead::Embedding => d,
                            _ => t_len,
                        };
                        let v_rep = tape.leaf(tile_rows(&informed_values, rep)?);
                        tape.matmul(w, v_rep)?
                    };
                    Ok((z, w))
                }
                VariantTag::M4 => unreachable!("handled above"),
            }
        }
    }
}

// ── Value-level operations ──────────────────────────────────────────────

/// Plain scaled dot-product attention:
/// `W = softmax(Q K^T / sqrt(d_k))` row-wise, `Z = W V`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    d_k: usize,
) -> Result<(Tensor, ScoreMatrix)> {
    if d_k == 0 {
        return Err(Error::Config("d_k must be positive".into()));
    }
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::Shape("attention inputs must be rank 2".into()));
    }
    if q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) {
        return Err(Error::Shape(format!(
            "incompatible attention shapes {:?} / {:?} / {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut tape = Tape::new();
    let qn = tape.leaf(q.clone());
    let kn = tape.leaf(k.clone());
    let vn = tape.leaf(v.clone());
    let kt = tape.transpose(kn)?;
    let s = tape.matmul(qn, kt)?;
    let scaled = tape.scale(s, 1.0 / (d_k as f64).sqrt())?;
    let w = tape.softmax(scaled, 1)?;
    let z = tape.matmul(w, vn)?;
    Ok((
        tape.value(z).clone(),
        ScoreMatrix {
            weights: tape.value(w).clone(),
            axis_normalized: 1,
        },
    ))
}

fn run_variant(
    variant: AttentionVariant,
    ssl: &Tensor,
    context: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, ScoreMatrix)> {
    let mut tape = Tape::new();
    let ssl_n = tape.leaf(ssl.clone());
    let ctx_n = tape.leaf(context.clone());
    let nodes = AttentionNodes {
        w_q: tape.leaf(params.w_q.clone()),
        w_k: params.w_k.as_ref().map(|t| tape.leaf(t.clone())),
        w_v: params.w_v.as_ref().map(|t| tape.leaf(t.clone())),
    };
    let (z, w) = attention_graph(&mut tape, variant, ssl_n, ctx_n, &nodes)?;
    Ok((
        tape.value(z).clone(),
        ScoreMatrix {
            weights: tape.value(w).clone(),
            axis_normalized: 1,
        },
    ))
}

/// Base-method embedding head (deprecated; flaw preserved for ablation).
pub fn m1_embedding_attention(
    ssl: &Tensor,
    informed: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, ScoreMatrix)> {
    run_variant(
        AttentionVariant::new(VariantTag::M1, AttentionHead::Embedding)?,
        ssl,
        informed,
        params,
    )
}

/// Base-method temporal head (deprecated; flaw preserved for ablation).
pub fn m1_temporal_attention(
    ssl: &Tensor,
    informed: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, ScoreMatrix)> {
    run_variant(
        AttentionVariant::new(VariantTag::M1, AttentionHead::Temporal)?,
        ssl,
        informed,
        params,
    )
}

/// M2: transpose before softmax; rows of the returned weights sum to 1.
pub fn m2_fixed_attention(
    ssl: &Tensor,
    informed: &Tensor,
    params: &AttentionParams,
    head: AttentionHead,
) -> Result<(Tensor, ScoreMatrix)> {
    run_variant(
        AttentionVariant::new(VariantTag::M2, head)?,
        ssl,
        informed,
        params,
    )
}

/// M3: M2 scores with tiled raw informed features as the values.
pub fn m3_interpretable_value_attention(
    ssl: &Tensor,
    informed: &Tensor,
    params: &AttentionParams,
    head: AttentionHead,
) -> Result<(Tensor, ScoreMatrix)> {
    run_variant(
        AttentionVariant::new(VariantTag::M3, head)?,
        ssl,
        informed,
        params,
    )
}

/// M4: aspect tokens as Key and Value with an identity value projection.
/// Every output row is a convex combination of the K token rows and the
/// `[T, K]` score rows sum to 1.
///
/// ```
/// use aspectpd::attention::{reca_attention, AttentionParams, AttentionVariant};
/// use aspectpd::encoder::AspectTokenMatrix;
/// use aspectpd::rng::SeededRng;
/// use aspectpd::tensor::Tensor;
///
/// let mut rng = SeededRng::new(7);
/// let ssl = Tensor::normal(&[5, 8], 1.0, &mut rng);          // T x D
/// let tokens = AspectTokenMatrix {
///     tokens: Tensor::normal(&[4, 8], 1.0, &mut rng),         // K x D
///     aspect_names: vec!["articulation".into(), "glottal".into(),
///                        "phonation".into(), "prosody".into()],
/// };
/// let params = AttentionParams::init(AttentionVariant::m4(), 8, &mut rng);
/// let (z, scores) = reca_attention(&ssl, &tokens, &params).unwrap();
/// assert_eq!(z.shape(), &[5, 8]);
/// assert!(scores.is_row_stochastic(1e-9));
/// ```
pub fn reca_attention(
    ssl: &Tensor,
    tokens: &AspectTokenMatrix,
    params: &AttentionParams,
) -> Result<(Tensor, ScoreMatrix)> {
    run_variant(AttentionVariant::m4(), ssl, &tokens.tokens, params)
}

/// Splits an M4 output into per-aspect contributions
/// `c_k[t, :] = W[t, k] * token_k`; the contributions sum back to Z.
pub fn contribution_decomposition(
    scores: &ScoreMatrix,
    tokens: &AspectTokenMatrix,
) -> Result<Vec<Tensor>> {
    let w = &scores.weights;
    if w.rank() != 2 || tokens.tokens.rank() != 2 || w.dim(1) != tokens.tokens.dim(0) {
        return Err(Error::Shape(format!(
            "scores {:?} do not align with tokens {:?}",
            w.shape(),
            tokens.tokens.shape()
        )));
    }
    let (t_len, k_len) = (w.dim(0), w.dim(1));
    let d = tokens.tokens.dim(1);
    let mut out = Vec::with_capacity(k_len);
    for k in 0..k_len {
        let token = tokens.tokens.row(k);
        let mut data = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            let wtk = w.at(t, k);
            data.extend(token.iter().map(|v| wtk * v));
        }
        out.push(Tensor::from_vec(&[t_len, d], data)?);
    }
    Ok(out)
}
