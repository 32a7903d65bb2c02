//! Central finite-difference checks of tape gradients.
//!
//! Each check builds `loss = Σ f(inputs) ⊙ R` for a fixed random weight
//! tensor `R`, so every output entry contributes with a distinct weight, then
//! compares the analytic input gradients against
//! `(loss(x + h·e_i) − loss(x − h·e_i)) / 2h`.
//!
//! The error of one input is the norm-wise relative error
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.

use rand::Rng as _;

use super::rng::SeedTree;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

/// Differentiable function of tape inputs, as checked by [`gradcheck`].
pub type OpFn = dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync;

fn weighted_loss(inputs: &[Tensor<f64>], weights: &Tensor<f64>, f: &OpFn) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let y = f(&mut tape, &ids)?;
    let w = tape.constant(weights.reshape(tape.shape(y))?);
    let prod = tape.mul(y, w)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, ids.iter().map(|&i| grads.wrt(i)).collect()))
}

fn output_len(inputs: &[Tensor<f64>], f: &OpFn) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let y = f(&mut tape, &ids)?;
    Ok(tape.shape(y).to_vec())
}

/// Largest relative error over the inputs of `f` at the point `inputs`.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &OpFn, h: f64, seeds: &SeedTree) -> Result<f64> {
    let out_shape = output_len(inputs, f)?;
    let weights = Tensor::randn(&out_shape, 1.0, &mut seeds.child("weights").rng());
    let (_, analytic) = weighted_loss(inputs, &weights, f)?;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = x.to_vec();
                data[i] += delta;
                let mut shifted = inputs.to_vec();
                shifted[k] = Tensor::new(x.shape().to_vec(), data)?;
                Ok(weighted_loss(&shifted, &weights, f)?.0)
            };
            *slot = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        let a = analytic[k].data();
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 0.0 {
            worst = worst.max(diff / denom);
        }
    }
    Ok(worst)
}

/// A named tape operation with a random-input generator.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&SeedTree) -> Vec<Tensor<f64>>,
    pub f: Box<OpFn>,
}

fn dims(seeds: &SeedTree, label: &str) -> (usize, usize) {
    let mut rng = seeds.child(label).rng();
    (rng.random_range(1..=4), rng.random_range(2..=5))
}

fn randn(seeds: &SeedTree, label: &str, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut seeds.child(label).rng())
}

/// Entries pushed at least 0.05 away from zero, keeping ReLU off its kink.
fn off_kink(seeds: &SeedTree, shape: &[usize]) -> Tensor<f64> {
    randn(seeds, "x", shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn pair(seeds: &SeedTree) -> Vec<Tensor<f64>> {
    let (r, c) = dims(seeds, "dims");
    vec![randn(seeds, "a", &[r, c]), randn(seeds, "b", &[r, c])]
}

fn single(seeds: &SeedTree) -> Vec<Tensor<f64>> {
    let (r, c) = dims(seeds, "dims");
    vec![randn(seeds, "a", &[r, c])]
}

fn norm_inputs(seeds: &SeedTree) -> Vec<Tensor<f64>> {
    let (r, c) = dims(seeds, "dims");
    vec![
        randn(seeds, "x", &[r, c]),
        randn(seeds, "g", &[c]),
        randn(seeds, "b", &[c]),
    ]
}

/// Every differentiable tape operation.
pub fn op_catalogue() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            inputs: pair,
            f: Box::new(|t, x| t.add(x[0], x[1])),
        },
        OpCase {
            name: "sub",
            inputs: pair,
            f: Box::new(|t, x| t.sub(x[0], x[1])),
        },
        OpCase {
            name: "mul",
            inputs: pair,
            f: Box::new(|t, x| t.mul(x[0], x[1])),
        },
        OpCase {
            name: "scale",
            inputs: single,
            f: Box::new(|t, x| Ok(t.scale(x[0], -1.7))),
        },
        OpCase {
            name: "add_row",
            inputs: |s| {
                let (r, c) = dims(s, "dims");
                vec![randn(s, "x", &[r, c]), randn(s, "row", &[c])]
            },
            f: Box::new(|t, x| t.add_row(x[0], x[1])),
        },
        OpCase {
            name: "sum_n",
            inputs: |s| {
                let (r, c) = dims(s, "dims");
                vec![
                    randn(s, "a", &[r, c]),
                    randn(s, "b", &[r, c]),
                    randn(s, "c", &[r, c]),
                ]
            },
            f: Box::new(|t, x| t.sum_n(x)),
        },
        OpCase {
            name: "matmul",
            inputs: |s| {
                let (m, k) = dims(s, "dims");
                let n = dims(s, "n").1;
                vec![randn(s, "a", &[m, k]), randn(s, "b", &[k, n])]
            },
            f: Box::new(|t, x| t.matmul(x[0], x[1])),
        },
        OpCase {
            name: "matmul_t",
            inputs: |s| {
                let (m, k) = dims(s, "dims");
                let n = dims(s, "n").1;
                vec![randn(s, "a", &[m, k]), randn(s, "b", &[n, k])]
            },
            f: Box::new(|t, x| t.matmul_t(x[0], x[1])),
        },
        OpCase {
            name: "softmax",
            inputs: single,
            f: Box::new(|t, x| t.softmax(x[0])),
        },
        OpCase {
            name: "causal_softmax",
            inputs: |s| {
                let n = dims(s, "dims").1;
                vec![randn(s, "a", &[n, n])]
            },
            f: Box::new(|t, x| t.causal_softmax(x[0])),
        },
        OpCase {
            name: "layer_norm",
            inputs: norm_inputs,
            f: Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
        },
        OpCase {
            name: "rms_norm",
            inputs: |s| norm_inputs(s)[..2].to_vec(),
            f: Box::new(|t, x| t.rms_norm(x[0], x[1], 1e-5)),
        },
        OpCase {
            name: "gelu",
            inputs: single,
            f: Box::new(|t, x| Ok(t.gelu(x[0]))),
        },
        OpCase {
            name: "relu",
            inputs: |s| {
                let (r, c) = dims(s, "dims");
                vec![off_kink(s, &[r, c])]
            },
            f: Box::new(|t, x| Ok(t.relu(x[0]))),
        },
        OpCase {
            name: "embedding",
            inputs: |s| {
                let (r, c) = dims(s, "dims");
                vec![randn(s, "table", &[r + 2, c])]
            },
            f: Box::new(|t, x| {
                let rows = t.shape(x[0])[0];
                let ids: Vec<usize> = (0..4).map(|i| (i * 7 + 1) % rows).collect();
                t.embedding(x[0], &ids)
            }),
        },
        OpCase {
            name: "slice_cols",
            inputs: single,
            f: Box::new(|t, x| {
                let c = t.shape(x[0])[1];
                t.slice_cols(x[0], c / 2, c)
            }),
        },
        OpCase {
            name: "slice_rows",
            inputs: single,
            f: Box::new(|t, x| {
                let r = t.shape(x[0])[0];
                t.slice_rows(x[0], r / 2, r)
            }),
        },
        OpCase {
            name: "concat_cols",
            inputs: |s| {
                let (r, c) = dims(s, "dims");
                vec![randn(s, "a", &[r, c]), randn(s, "b", &[r, c + 1])]
            },
            f: Box::new(|t, x| t.concat_cols(x)),
        },
        OpCase {
            name: "sum",
            inputs: single,
            f: Box::new(|t, x| Ok(t.sum(x[0]))),
        },
        OpCase {
            name: "index2",
            inputs: single,
            f: Box::new(|t, x| {
                let s = t.shape(x[0]).to_vec();
                t.index2(x[0], s[0] - 1, s[1] / 2)
            }),
        },
        OpCase {
            name: "cross_entropy",
            inputs: single,
            f: Box::new(|t, x| {
                let s = t.shape(x[0]).to_vec();
                let targets: Vec<usize> = (0..s[0]).map(|i| (3 * i + 1) % s[1]).collect();
                t.cross_entropy(x[0], &targets)
            }),
        },
    ]
}

/// Outcome of checking one op over many seeded trials.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Runs every op in the catalogue for `trials` seeded random inputs.
pub fn check_all_ops(trials: usize, seed: u64, h: f64) -> Result<Vec<OpReport>> {
    let root = SeedTree::new(seed);
    op_catalogue()
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for i in 0..trials {
                let s = root.child(case.name).index(i as u64);
                let inputs = (case.inputs)(&s);
                worst = worst.max(gradcheck(&inputs, case.f.as_ref(), h, &s)?);
            }
            Ok(OpReport {
                name: case.name,
                trials,
                max_rel_err: worst,
            })
        })
        .collect()
}
