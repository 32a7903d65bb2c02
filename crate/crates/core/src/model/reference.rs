//! Loop-based monolithic forward pass used to cross-check the taped,
//! component-decomposed implementation.
//!
//! Heads are computed jointly: their outputs are concatenated and projected
//! with the full output matrix in one product, the way a conventional
//! transformer is written. Removing a component here means deleting its
//! contribution from that product (heads) or from the residual update (MLPs),
//! with no hooks involved.

use super::checkpoint::Weights;
use super::component::{ComponentId, ComponentSet};
use super::config::{ModelConfig, Nonlinearity, Norm};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

type Mat<S> = Vec<Vec<S>>;

fn mat<S: Scalar>(t: &Tensor<S>) -> Mat<S> {
    let (r, _) = t.dims2().expect("matrix parameter");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn mm<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut acc = S::zero();
                    for (p, &v) in row.iter().enumerate() {
                        acc += v * b[p][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn normalize<S: Scalar>(x: &Mat<S>, kind: Norm, gain: &[S], bias: &[S]) -> Mat<S> {
    let eps = S::from_f64_lossy(1e-5);
    x.iter()
        .map(|row| {
            let n = S::from_usize(row.len()).unwrap();
            match kind {
                Norm::None => row.clone(),
                Norm::LayerNorm => {
                    let mean = row.iter().fold(S::zero(), |a, &b| a + b) / n;
                    let var = row.iter().fold(S::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
                    let sd = (var + eps).sqrt();
                    row.iter()
                        .zip(gain.iter().zip(bias))
                        .map(|(&v, (&g, &b))| (v - mean) / sd * g + b)
                        .collect()
                }
                Norm::RmsNorm => {
                    let ms = row.iter().fold(S::zero(), |a, &b| a + b * b) / n;
                    let r = (ms + eps).sqrt();
                    row.iter().zip(gain).map(|(&v, &g)| v / r * g).collect()
                }
            }
        })
        .collect()
}

fn activate<S: Scalar>(v: S, kind: Nonlinearity) -> S {
    match kind {
        Nonlinearity::Identity => v,
        Nonlinearity::Relu => {
            if v > S::zero() {
                v
            } else {
                S::zero()
            }
        }
        Nonlinearity::Gelu => {
            let inner = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt())
                * (v + S::from_f64_lossy(0.044715) * v.powi(3));
            S::from_f64_lossy(0.5) * v * (S::one() + inner.tanh())
        }
    }
}

/// Logits `[seq][vocab]` of a conventional forward pass with the components
/// in `removed` deleted from the graph.
pub fn reference_logits<S: Scalar>(
    config: &ModelConfig,
    weights: &Weights<S>,
    tokens: &[usize],
    removed: &ComponentSet,
) -> Result<Mat<S>> {
    if tokens.iter().any(|&t| t >= config.vocab_size) || tokens.len() > config.max_seq_len {
        return Err(Error::Input("tokens out of range".into()));
    }
    let d = config.d_model;
    let dh = config.d_head;
    let seq = tokens.len();
    let mut x: Mat<S> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|j| weights.tok_emb.at(t, j) + weights.pos_emb.at(pos, j))
                .collect()
        })
        .collect();

    for (l, lw) in weights.layers.iter().enumerate() {
        let h = normalize(&x, config.norm, lw.ln1_gain.data(), lw.ln1_bias.data());
        let q = mm(&h, &mat(&lw.w_q));
        let k = mm(&h, &mat(&lw.w_k));
        let v = mm(&h, &mat(&lw.w_v));
        let mut z = vec![vec![S::zero(); config.n_heads * dh]; seq];
        for head in 0..config.n_heads {
            if removed.contains(&ComponentId::head(l, head)) {
                continue;
            }
            let off = head * dh;
            let scale = S::from_usize(dh).unwrap().sqrt();
            for i in 0..seq {
                let scores: Vec<S> = (0..=i)
                    .map(|j| (0..dh).fold(S::zero(), |a, c| a + q[i][off + c] * k[j][off + c]) / scale)
                    .collect();
                let max = scores.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let exps: Vec<S> = scores.iter().map(|&s| (s - max).exp()).collect();
                let total = exps.iter().fold(S::zero(), |a, &b| a + b);
                for c in 0..dh {
                    z[i][off + c] = (0..=i).fold(S::zero(), |a, j| a + exps[j] / total * v[j][off + c]);
                }
            }
        }
        let attn_out = mm(&z, &mat(&lw.w_o));
        for (xr, ar) in x.iter_mut().zip(&attn_out) {
            for (a, &b) in xr.iter_mut().zip(ar) {
                *a += b;
            }
        }

        if !removed.contains(&ComponentId::mlp(l)) {
            let h2 = normalize(&x, config.norm, lw.ln2_gain.data(), lw.ln2_bias.data());
            let mut hidden = mm(&h2, &mat(&lw.w_in));
            for row in hidden.iter_mut() {
                for (v, &b) in row.iter_mut().zip(lw.b_in.data()) {
                    *v = activate(*v + b, config.nonlinearity);
                }
            }
            let out = mm(&hidden, &mat(&lw.w_out));
            for (xr, or) in x.iter_mut().zip(&out) {
                for ((a, &b), &bias) in xr.iter_mut().zip(or).zip(lw.b_out.data()) {
                    *a += b + bias;
                }
            }
        }
    }

    let hf = normalize(&x, config.norm, weights.lnf_gain.data(), weights.lnf_bias.data());
    Ok(mm(&hf, &mat(&weights.w_unembed)))
}
