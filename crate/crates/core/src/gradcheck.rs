//! Ready-made gradient checks for every primitive and every full model
//! variant, shared by the test suites and the `gradcheck` CLI command.
//!
//! Each primitive check builds a small graph around the operation, reduces
//! the output to a scalar through a fixed random linear functional, and
//! compares the tape's gradients with central finite differences.

use crate::attention::AttentionVariant;
use crate::encoder::{AspectFeatures, AspectFeatureSet, EncoderDims};
use crate::error::{Error, Result};
use crate::model::{AspectSpec, Model, ModelConfig, TrainSample};
use crate::rng::{mix_seed, SeededRng};
use crate::tape::{grad_check, GradCheckReport, Gradients, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;

pub const PRIMITIVES: [&str; 13] = [
    "matmul",
    "transpose",
    "softmax_axis0",
    "softmax_axis1",
    "layer_norm",
    "dropout",
    "linear",
    "mean_pool_axis0",
    "mean_pool_axis1",
    "cross_entropy",
    "scale",
    "stack_rows",
    "encoder_chain",
];

/// Reduces an arbitrary node to a scalar with fixed random weights so
/// every output coordinate influences the check.
fn reduce_to_scalar(tape: &mut Tape, node: NodeId, rng: &mut SeededRng) -> Result<NodeId> {
    let t = tape.value(node);
    let n = t.numel();
    let (rows, flat) = match t.rank() {
        1 => (1, n),
        2 => (t.dim(0), t.dim(1)),
        _ => return Err(Error::Shape("reduce expects rank 1 or 2".into())),
    };
    let w = tape.leaf(Tensor::uniform(&[flat, 1], -1.0, 1.0, rng));
    let b = tape.leaf(Tensor::zeros(&[1]));
    let col = tape.linear(node, w, b)?;
    if rows == 1 {
        return Ok(col);
    }
    let u = tape.leaf(Tensor::uniform(&[1, rows], -1.0, 1.0, rng));
    // [1, 1] result; backward accepts any single-element node.
    tape.matmul(u, col)
}

fn params_from(shapes: &[(&str, &[usize])], rng: &mut SeededRng) -> ParamSet {
    let mut params = ParamSet::new();
    for (name, shape) in shapes {
        params
            .insert(*name, Tensor::uniform(shape, -1.0, 1.0, rng))
            .expect("unique names");
    }
    params
}

/// Gradient check for one named primitive at the given seed.
pub fn check_primitive(name: &str, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut init_rng = SeededRng::with_stream(seed, 0x6C01);
    let reduce_seed = mix_seed(seed, 0x6C02);
    match name {
        "matmul" => {
            let params = params_from(&[("a", &[3, 4]), ("b", &[4, 2])], &mut init_rng);
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let a = tape.leaf(p.get("a").unwrap().clone());
                let b = tape.leaf(p.get("b").unwrap().clone());
                let z = tape.matmul(a, b)?;
                finish(tape, z, &[a, b], p, reduce_seed)
            })
        }
        "transpose" => {
            let params = params_from(&[("x", &[3, 4])], &mut init_rng);
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let z = tape.transpose(x)?;
                finish(tape, z, &[x], p, reduce_seed)
            })
        }
        "softmax_axis0" | "softmax_axis1" => {
            let axis = usize::from(name.ends_with('1'));
            let params = params_from(&[("x", &[3, 4])], &mut init_rng);
            grad_check(&params, h, tol, move |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let z = tape.softmax(x, axis)?;
                finish(tape, z, &[x], p, reduce_seed)
            })
        }
        "layer_norm" => {
            let params = params_from(
                &[("x", &[4, 6]), ("gamma", &[6]), ("beta", &[6])],
                &mut init_rng,
            );
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let g = tape.leaf(p.get("gamma").unwrap().clone());
                let b = tape.leaf(p.get("beta").unwrap().clone());
                let z = tape.layer_norm(x, g, b, 1e-5)?;
                finish(tape, z, &[x, g, b], p, reduce_seed)
            })
        }
        "dropout" => {
            let params = params_from(&[("x", &[4, 4])], &mut init_rng);
            let mask_seed = mix_seed(seed, 0x6C03);
            grad_check(&params, h, tol, move |p| {
                // The mask is redrawn identically on every call, which
                // keeps the function deterministic as required.
                let mut mask_rng = SeededRng::with_stream(mask_seed, 0);
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let z = tape.dropout(x, 0.3, &mut mask_rng, true)?;
                finish(tape, z, &[x], p, reduce_seed)
            })
        }
        "linear" => {
            let params = params_from(
                &[("x", &[3, 4]), ("w", &[4, 2]), ("b", &[2])],
                &mut init_rng,
            );
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let w = tape.leaf(p.get("w").unwrap().clone());
                let b = tape.leaf(p.get("b").unwrap().clone());
                let z = tape.linear(x, w, b)?;
                finish(tape, z, &[x, w, b], p, reduce_seed)
            })
        }
        "mean_pool_axis0" | "mean_pool_axis1" => {
            let axis = usize::from(name.ends_with('1'));
            let params = params_from(&[("x", &[4, 3])], &mut init_rng);
            grad_check(&params, h, tol, move |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let z = tape.mean_pool(x, axis)?;
                finish(tape, z, &[x], p, reduce_seed)
            })
        }
        "cross_entropy" => {
            let params = params_from(&[("logits", &[3, 3])], &mut init_rng);
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("logits").unwrap().clone());
                let loss = tape.cross_entropy(x, &[0, 2, 1])?;
                tape.backward(loss)?;
                let grads = Gradients(vec![tape.grad(x).unwrap().to_vec()]);
                Ok((tape.value(loss).data()[0], grads))
            })
        }
        "scale" => {
            let params = params_from(&[("x", &[3, 3])], &mut init_rng);
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let z = tape.scale(x, 1.7)?;
                finish(tape, z, &[x], p, reduce_seed)
            })
        }
        "stack_rows" => {
            let params = params_from(
                &[("r0", &[4]), ("r1", &[4]), ("r2", &[4])],
                &mut init_rng,
            );
            grad_check(&params, h, tol, |p| {
                let mut tape = Tape::new();
                let rows: Vec<NodeId> = ["r0", "r1", "r2"]
                    .iter()
                    .map(|n| tape.leaf(p.get(n).unwrap().clone()))
                    .collect();
                let z = tape.stack_rows(&rows)?;
                finish(tape, z, &rows, p, reduce_seed)
            })
        }
        "encoder_chain" => {
            let dims = EncoderDims {
                h1: 3,
                h2: 4,
                d: 5,
                dropout: 0.0,
            };
            let mut params = ParamSet::new();
            for (li, (d_in, d_out)) in
                crate::encoder::AspectEncoderParams::layer_dims(2, &dims)
                    .iter()
                    .enumerate()
            {
                params
                    .insert(
                        format!("l{li}.w"),
                        Tensor::uniform(&[*d_in, *d_out], -0.7, 0.7, &mut init_rng),
                    )
                    .expect("unique");
                params
                    .insert(
                        format!("l{li}.b"),
                        Tensor::uniform(&[*d_out], -0.5, 0.5, &mut init_rng),
                    )
                    .expect("unique");
                params
                    .insert(
                        format!("l{li}.gamma"),
                        Tensor::uniform(&[*d_out], 0.5, 1.5, &mut init_rng),
                    )
                    .expect("unique");
                params
                    .insert(
                        format!("l{li}.beta"),
                        Tensor::uniform(&[*d_out], -0.5, 0.5, &mut init_rng),
                    )
                    .expect("unique");
            }
            let input: Vec<f64> = (0..2).map(|_| init_rng.normal()).collect();
            grad_check(&params, h, tol, move |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::from_vec(&[2], input.clone())?);
                let mut ids = Vec::new();
                let layers: Vec<crate::encoder::EncoderLayerNodes> = (0..3)
                    .map(|li| {
                        let grab = |suffix: &str, tape: &mut Tape, ids: &mut Vec<NodeId>| {
                            let id =
                                tape.leaf(p.get(&format!("l{li}.{suffix}")).unwrap().clone());
                            ids.push(id);
                            id
                        };
                        crate::encoder::EncoderLayerNodes {
                            w: grab("w", &mut tape, &mut ids),
                            b: grab("b", &mut tape, &mut ids),
                            gamma: grab("gamma", &mut tape, &mut ids),
                            beta: grab("beta", &mut tape, &mut ids),
                        }
                    })
                    .collect();
                let mut rng = SeededRng::new(0);
                let z = crate::encoder::encode_aspect_graph(
                    &mut tape, x, &layers, 0.0, &mut rng, false,
                )?;
                finish(tape, z, &ids, p, reduce_seed)
            })
        }
        other => Err(Error::Config(format!("unknown primitive {other:?}"))),
    }
}

/// Backward through `scalar(reduce(z))`, returning loss and the gradients
/// of `leaves` in parameter order.
fn finish(
    mut tape: Tape,
    z: NodeId,
    leaves: &[NodeId],
    params: &ParamSet,
    reduce_seed: u64,
) -> Result<(f64, Gradients)> {
    let mut rng = SeededRng::with_stream(reduce_seed, 0);
    let s = reduce_to_scalar(&mut tape, z, &mut rng)?;
    tape.backward(s)?;
    let grads = Gradients(
        leaves
            .iter()
            .enumerate()
            .map(|(i, id)| {
                tape.grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; params.tensor_at(i).numel()])
            })
            .collect(),
    );
    Ok((tape.value(s).data()[0], grads))
}

/// Tiny configuration used for full-model checks (T <= 4, D <= 8, K = 4).
pub fn tiny_model_config(variant: AttentionVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        d: 6,
        encoder: EncoderDims {
            h1: 4,
            h2: 5,
            d: 6,
            dropout: 0.0,
        },
        aspects: (0..4)
            .map(|i| AspectSpec {
                name: format!("aspect{i}"),
                features: 2,
            })
            .collect(),
        t_max: None,
        seed,
    }
}

/// Full forward-plus-loss gradient check for one variant at tiny dims,
/// dropout off.
pub fn check_variant(variant: AttentionVariant, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = tiny_model_config(variant, mix_seed(seed, 0x6C04));
    let model = Model::init(cfg.clone())?;
    let mut data_rng = SeededRng::with_stream(seed, 0x6C05);
    let ssl = Tensor::normal(&[3, cfg.d], 1.0, &mut data_rng);
    let features = AspectFeatureSet::new(
        cfg.aspects
            .iter()
            .map(|a| AspectFeatures {
                name: a.name.clone(),
                values: (0..a.features).map(|_| data_rng.normal()).collect(),
            })
            .collect(),
    )?;
    let batch = vec![TrainSample {
        ssl,
        features,
        label: 1,
    }];
    grad_check(&model.params, h, tol, move |p| {
        let probe = Model {
            cfg: cfg.clone(),
            params: p.clone(),
        };
        let mut rng = SeededRng::new(0);
        probe.loss_and_grads(&batch, &mut rng, false)
    })
}
