//! Component-decomposed forward pass.
//!
//! Every attention head and every MLP writes an additive `[seq, d_model]`
//! tensor into the residual stream. Heads write after their slice of the
//! output projection, so the residual before the final norm is exactly the
//! token+position embedding plus the sum of all component writes.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::checkpoint::{Checkpoint, Weights};
use super::component::{all_components, ComponentId, ComponentSet};
use super::config::{ModelConfig, Nonlinearity, Norm};
use crate::error::{Error, Result};
use crate::numeric::{NodeId, Scalar, Tape, Tensor};
use crate::tasks::MetricSpec;

const NORM_EPS: f64 = 1e-5;

/// Replacement applied to one component's residual write.
#[derive(Clone, Debug, PartialEq)]
pub enum Override<S> {
    /// do(c ← 0): the write is dropped at every position.
    Zero,
    /// The write is replaced by a fixed tensor (activation patching).
    Replace(Tensor<S>),
}

/// Per-component overrides for one forward pass.
#[derive(Clone, Debug)]
pub struct Interventions<S> {
    slots: Vec<Option<Override<S>>>,
    n_heads: usize,
}

impl<S: Scalar> Interventions<S> {
    pub fn none(config: &ModelConfig) -> Self {
        Self {
            slots: vec![None; config.n_components()],
            n_heads: config.n_heads,
        }
    }

    pub fn zeroing(config: &ModelConfig, set: &ComponentSet) -> Result<Self> {
        let mut out = Self::none(config);
        for &c in set {
            out.set(config, c, Override::Zero)?;
        }
        Ok(out)
    }

    pub fn set(&mut self, config: &ModelConfig, c: ComponentId, o: Override<S>) -> Result<()> {
        let i = c.index(config)?;
        self.slots[i] = Some(o);
        Ok(())
    }

    fn get(&self, i: usize) -> Option<&Override<S>> {
        self.slots[i].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    fn n_heads(&self) -> usize {
        self.n_heads
    }
}

/// One tensor per component, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentRecord<S> {
    components: Vec<ComponentId>,
    tensors: Vec<Tensor<S>>,
    n_heads: usize,
}

/// Residual writes `a_u(x)` of every component, each `[seq, d_model]`.
pub type ActivationRecord<S> = ComponentRecord<S>;
/// `∂metric/∂a_u` for every component, each `[seq, d_model]`.
pub type GradientRecord<S> = ComponentRecord<S>;

impl<S: Scalar> ComponentRecord<S> {
    fn slot(&self, c: ComponentId) -> Option<usize> {
        let i = match c {
            ComponentId::Mlp { layer } => layer * (self.n_heads + 1),
            ComponentId::AttnHead { layer, head } if head < self.n_heads => {
                layer * (self.n_heads + 1) + 1 + head
            }
            ComponentId::AttnHead { .. } => return None,
        };
        (i < self.tensors.len()).then_some(i)
    }

    pub fn get(&self, c: ComponentId) -> Option<&Tensor<S>> {
        self.slot(c).map(|i| &self.tensors[i])
    }

    pub fn components(&self) -> &[ComponentId] {
        &self.components
    }

    pub fn iter(&self) -> impl Iterator<Item = (ComponentId, &Tensor<S>)> {
        self.components.iter().copied().zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    /// `[seq, vocab]`.
    pub logits: Tensor<S>,
    pub acts: ActivationRecord<S>,
    /// Token plus positional embedding, `[seq, d_model]`.
    pub embedding: Tensor<S>,
    /// Residual stream before the final norm, `[seq, d_model]`.
    pub residual: Tensor<S>,
}

/// How leaves are recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TraceMode {
    /// Nothing is differentiated.
    Inference,
    /// Component writes are differentiated; weights are constants.
    Attribution,
    /// Weights are differentiated.
    Training,
}

pub(crate) struct Trace<S> {
    pub tape: Tape<S>,
    pub logits: NodeId,
    pub embedding: NodeId,
    pub residual: NodeId,
    /// Write node per component; `None` when zero-ablated.
    pub writes: Vec<Option<NodeId>>,
    /// Parameter leaves in [`Weights::tensors`] order.
    pub params: Vec<NodeId>,
}

pub(crate) fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn norm<S: Scalar>(tape: &mut Tape<S>, kind: Norm, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
    let eps = S::from_f64_lossy(NORM_EPS);
    match kind {
        Norm::LayerNorm => tape.layer_norm(x, gain, bias, eps),
        Norm::RmsNorm => tape.rms_norm(x, gain, eps),
        Norm::None => Ok(x),
    }
}

/// Records the full forward computation on a fresh tape.
pub(crate) fn trace<S: Scalar>(
    config: &ModelConfig,
    weights: &Weights<S>,
    tokens: &[usize],
    interventions: &Interventions<S>,
    mode: TraceMode,
) -> Result<Trace<S>> {
    validate_tokens(config, tokens)?;
    if interventions.slots.len() != config.n_components() || interventions.n_heads() != config.n_heads {
        return Err(Error::Input("interventions built for a different model".into()));
    }
    let seq = tokens.len();
    let mut tape = Tape::new();
    let params: Vec<NodeId> = weights
        .tensors()
        .into_iter()
        .map(|t| match mode {
            TraceMode::Training => tape.var(t.clone()),
            _ => tape.constant(t.clone()),
        })
        .collect();
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("param count");

    let tok_emb = next();
    let pos_emb = next();
    let x = tape.embedding(tok_emb, tokens)?;
    let pos = tape.slice_rows(pos_emb, 0, seq)?;
    let embedding = tape.add(x, pos)?;
    let mut resid = embedding;

    let dh = config.d_head;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut writes = Vec::with_capacity(config.n_components());
    let mut slot = 0;

    let emit = |tape: &mut Tape<S>, slot: usize, computed: NodeId| -> Result<Option<NodeId>> {
        let node = match interventions.get(slot) {
            Some(Override::Zero) => return Ok(None),
            Some(Override::Replace(t)) => {
                if t.shape() != tape.shape(computed) {
                    return Err(Error::Shape {
                        op: "patch",
                        lhs: tape.shape(computed).to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                tape.constant(t.clone())
            }
            None => computed,
        };
        if mode == TraceMode::Attribution {
            tape.watch(node);
        }
        Ok(Some(node))
    };

    for _layer in 0..config.n_layers {
        let (ln1_g, ln1_b, w_q, w_k, w_v, w_o) = (next(), next(), next(), next(), next(), next());
        let (ln2_g, ln2_b, w_in, b_in, w_out, b_out) = (next(), next(), next(), next(), next(), next());

        // MLP slot precedes heads in canonical order but runs after them.
        let mlp_slot = slot;
        slot += 1;

        let h = norm(&mut tape, config.norm, resid, ln1_g, ln1_b)?;
        let q = tape.matmul(h, w_q)?;
        let k = tape.matmul(h, w_k)?;
        let v = tape.matmul(h, w_v)?;
        let mut head_writes = Vec::with_capacity(config.n_heads);
        let mut parts = vec![resid];
        for head in 0..config.n_heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let pattern = tape.causal_softmax(scores)?;
            let z = tape.matmul(pattern, vh)?;
            let wo = tape.slice_rows(w_o, lo, hi)?;
            let out = tape.matmul(z, wo)?;
            let w = emit(&mut tape, slot, out)?;
            slot += 1;
            if let Some(w) = w {
                parts.push(w);
            }
            head_writes.push(w);
        }
        if parts.len() > 1 {
            resid = tape.sum_n(&parts)?;
        }

        let h2 = norm(&mut tape, config.norm, resid, ln2_g, ln2_b)?;
        let pre = tape.matmul(h2, w_in)?;
        let pre = tape.add_row(pre, b_in)?;
        let act = match config.nonlinearity {
            Nonlinearity::Gelu => tape.gelu(pre),
            Nonlinearity::Relu => tape.relu(pre),
            Nonlinearity::Identity => pre,
        };
        let out = tape.matmul(act, w_out)?;
        let out = tape.add_row(out, b_out)?;
        let mlp_write = emit(&mut tape, mlp_slot, out)?;
        if let Some(w) = mlp_write {
            resid = tape.add(resid, w)?;
        }
        writes.push(mlp_write);
        writes.extend(head_writes);
    }

    let (lnf_g, lnf_b, w_u) = (next(), next(), next());
    let hf = norm(&mut tape, config.norm, resid, lnf_g, lnf_b)?;
    let logits = tape.matmul(hf, w_u)?;

    Ok(Trace {
        tape,
        logits,
        embedding,
        residual: resid,
        writes,
        params,
    })
}

/// Forward and backward pass counters, safe to share across workers.
#[derive(Debug, Default)]
pub struct PassCounters {
    forward: AtomicUsize,
    backward: AtomicUsize,
}

impl PassCounters {
    pub fn forwards(&self) -> usize {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn backwards(&self) -> usize {
        self.backward.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }

    fn count_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    fn count_backward(&self) {
        self.backward.fetch_add(1, Ordering::Relaxed);
    }
}

/// An immutable checkpoint plus pass instrumentation.
///
/// All methods take `&self` and may be called from many threads at once.
#[derive(Debug)]
pub struct Model<S> {
    ckpt: Checkpoint<S>,
    passes: PassCounters,
}

impl<S: Scalar> Model<S> {
    pub fn new(ckpt: Checkpoint<S>) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            ckpt,
            passes: PassCounters::default(),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint<S> {
        &self.ckpt
    }

    pub fn config(&self) -> &ModelConfig {
        &self.ckpt.config
    }

    pub fn passes(&self) -> &PassCounters {
        &self.passes
    }

    pub fn components(&self) -> Vec<ComponentId> {
        all_components(&self.ckpt.config)
    }

    fn record(&self, writes: Vec<Tensor<S>>) -> ComponentRecord<S> {
        ComponentRecord {
            components: self.components(),
            tensors: writes,
            n_heads: self.ckpt.config.n_heads,
        }
    }

    fn zero_write(&self, seq: usize) -> Tensor<S> {
        Tensor::zeros(&[seq, self.ckpt.config.d_model])
    }

    /// Forward pass with arbitrary per-component overrides. Ablated
    /// components are recorded with an all-zero write.
    pub fn forward_with(
        &self,
        tokens: &[usize],
        interventions: &Interventions<S>,
    ) -> Result<ForwardOutput<S>> {
        let trace = trace(
            &self.ckpt.config,
            &self.ckpt.weights,
            tokens,
            interventions,
            TraceMode::Inference,
        )?;
        self.passes.count_forward();
        let writes = trace
            .writes
            .iter()
            .map(|w| match w {
                Some(id) => trace.tape.value(*id).clone(),
                None => self.zero_write(tokens.len()),
            })
            .collect();
        Ok(ForwardOutput {
            logits: trace.tape.value(trace.logits).clone(),
            acts: self.record(writes),
            embedding: trace.tape.value(trace.embedding).clone(),
            residual: trace.tape.value(trace.residual).clone(),
        })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput<S>> {
        self.forward_with(tokens, &Interventions::none(&self.ckpt.config))
    }

    /// Logits with every component in `set` clamped to zero at all positions.
    pub fn forward_ablated(&self, tokens: &[usize], set: &ComponentSet) -> Result<Tensor<S>> {
        let iv = Interventions::zeroing(&self.ckpt.config, set)?;
        Ok(self.forward_with(tokens, &iv)?.logits)
    }

    /// Metric value on `tokens` and its gradient with respect to every
    /// component write. One forward and one backward pass.
    pub fn backward_metric(&self, tokens: &[usize], metric: &MetricSpec) -> Result<(S, GradientRecord<S>)> {
        let (value, grads, _) = self.backward_metric_traced(tokens, metric)?;
        Ok((value, grads))
    }

    /// As [`Model::backward_metric`], also returning the clean activations
    /// recorded during the same forward pass.
    pub fn backward_metric_traced(
        &self,
        tokens: &[usize],
        metric: &MetricSpec,
    ) -> Result<(S, GradientRecord<S>, ActivationRecord<S>)> {
        metric.validate(self.ckpt.config.vocab_size, tokens.len())?;
        let mut trace = trace(
            &self.ckpt.config,
            &self.ckpt.weights,
            tokens,
            &Interventions::none(&self.ckpt.config),
            TraceMode::Attribution,
        )?;
        self.passes.count_forward();
        let pos = metric.position;
        let ans = trace.tape.index2(trace.logits, pos, metric.answer)?;
        let foil = trace.tape.index2(trace.logits, pos, metric.foil)?;
        let m = trace.tape.sub(ans, foil)?;
        let value = trace.tape.value(m).item()?;
        let grads = trace.tape.backward(m)?;
        self.passes.count_backward();
        let ids: Vec<NodeId> = trace
            .writes
            .iter()
            .map(|w| w.expect("no overrides in attribution trace"))
            .collect();
        let g = ids.iter().map(|&id| grads.wrt(id)).collect();
        let a = ids.iter().map(|&id| trace.tape.value(id).clone()).collect();
        Ok((value, self.record(g), self.record(a)))
    }
}
