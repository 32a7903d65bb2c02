//! Joint next-token training on a task mixture.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{param_layout, Checkpoint, Weights};
use super::config::ModelConfig;
use super::forward::{trace, Interventions, TraceMode};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, SeedTree, Tensor};
use crate::tasks::{generate, TaskExample, TaskId};

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Prompt pairs per step; both sides of each pair are trained on.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Steps at which checkpoints are kept; 0 is the initialisation.
    pub checkpoints: Vec<u64>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoints: vec![0, 250, 500, 1000, 1500],
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("training.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input("training.learning_rate must be positive".into()));
        }
        if let Some(&s) = self.checkpoints.iter().find(|&&s| s > self.steps) {
            return Err(Error::Input(format!(
                "training.checkpoints: step {s} exceeds training.steps ({})",
                self.steps
            )));
        }
        if self.checkpoints.is_empty() {
            return Err(Error::Input("training.checkpoints must not be empty".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Tasks trained on, with pairs that must never be used for training.
#[derive(Clone, Debug, Default)]
pub struct TaskMixture {
    pub tasks: Vec<TaskId>,
    /// `(clean, corrupt)` keys of held-out pairs.
    pub excluded: HashSet<(Vec<usize>, Vec<usize>)>,
}

impl TaskMixture {
    pub fn new(tasks: Vec<TaskId>) -> Self {
        Self {
            tasks,
            excluded: HashSet::new(),
        }
    }

    pub fn exclude<'a>(&mut self, examples: impl IntoIterator<Item = &'a TaskExample>) {
        self.excluded
            .extend(examples.into_iter().map(TaskExample::pair_key));
    }

    /// `batch_size` pairs spread round-robin over the tasks.
    fn sample(&self, batch_size: usize, seeds: &SeedTree) -> Vec<TaskExample> {
        let mut out = Vec::with_capacity(batch_size);
        for (ti, &task) in self.tasks.iter().enumerate() {
            let want = batch_size / self.tasks.len() + usize::from(ti < batch_size % self.tasks.len());
            let mut rng = seeds.child(task.name()).rng();
            let mut got = 0;
            while got < want {
                for ex in generate(task, want - got, &mut rng) {
                    if got < want && !self.excluded.contains(&ex.pair_key()) {
                        out.push(ex);
                        got += 1;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingRun<S> {
    pub checkpoints: Vec<Checkpoint<S>>,
    pub curve: Vec<CurvePoint>,
}

/// Fixed reduction width so gradient sums do not depend on the thread count.
const GRAD_CHUNKS: usize = 8;

fn sequence_grads<S: Scalar>(
    config: &ModelConfig,
    weights: &Weights<S>,
    tokens: &[usize],
    target: usize,
) -> Result<(S, Vec<Vec<S>>)> {
    let none = Interventions::none(config);
    let mut tr = trace(config, weights, tokens, &none, TraceMode::Training)?;
    let last = tokens.len() - 1;
    let final_logits = tr.tape.slice_rows(tr.logits, last, last + 1)?;
    let loss = tr.tape.cross_entropy(final_logits, &[target])?;
    let value = tr.tape.value(loss).item()?;
    let grads = tr.tape.backward(loss)?;
    let g = tr.params.iter().map(|&p| grads.wrt(p).to_vec()).collect();
    Ok((value, g))
}

fn add_into<S: Scalar>(acc: &mut [Vec<S>], other: Vec<Vec<S>>) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}

struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    decay: Vec<bool>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    fn new(config: &ModelConfig, weights: &Weights<S>) -> Self {
        let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
        let decay = param_layout(config)
            .iter()
            .map(|(name, shape)| shape.len() == 2 && !name.ends_with("emb"))
            .collect();
        Self {
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            decay,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Vec<S>], grads: &[Vec<S>], hp: &TrainConfig, lr: f64) {
        self.t += 1;
        let b1 = S::from_f64_lossy(hp.beta1);
        let b2 = S::from_f64_lossy(hp.beta2);
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let eps = S::from_f64_lossy(hp.adam_eps);
        let lr = S::from_f64_lossy(lr);
        let wd = S::from_f64_lossy(hp.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                if self.decay[i] {
                    let shrink = lr * wd * p[j];
                    p[j] -= shrink;
                }
                p[j] -= lr * update;
            }
        }
    }
}

/// Trains from a fresh initialisation and returns the scheduled checkpoints.
///
/// Loss is next-token cross-entropy at the final prompt position, on both the
/// clean prompt (target `answer`) and the corrupt prompt (target `foil`).
pub fn train<S: Scalar>(
    config: ModelConfig,
    mixture: &TaskMixture,
    hp: &TrainConfig,
    seed: u64,
) -> Result<TrainingRun<S>> {
    hp.validate()?;
    if mixture.tasks.is_empty() {
        return Err(Error::Input("task mixture is empty".into()));
    }
    let init = Checkpoint::<S>::init(config.clone(), seed)?;
    let mut schedule: Vec<u64> = hp.checkpoints.clone();
    schedule.sort_unstable();
    schedule.dedup();

    let mut checkpoints = Vec::new();
    if schedule.first() == Some(&0) {
        checkpoints.push(init.clone());
    }
    let last_step = schedule.last().copied().unwrap_or(0);
    let mut curve = Vec::new();
    if last_step == 0 {
        return Ok(TrainingRun { checkpoints, curve });
    }

    let shapes: Vec<Vec<usize>> = init
        .weights
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut params: Vec<Vec<S>> = init.weights.tensors().iter().map(|t| t.to_vec()).collect();
    let mut adam = Adam::new(&config, &init.weights);
    let data_seeds = SeedTree::new(seed).child("train-data");
    let mut tokens_seen = 0u64;
    let mut window = (0.0, 0usize);

    for step in 0..last_step {
        let weights = Weights::from_tensors(
            &config,
            params
                .iter()
                .zip(&shapes)
                .map(|(p, s)| Tensor::new(s.clone(), p.clone()))
                .collect::<Result<_>>()?,
        )?;
        let batch = mixture.sample(hp.batch_size, &data_seeds.index(step));
        let seqs: Vec<(&[usize], usize)> = batch
            .iter()
            .flat_map(|ex| [(ex.clean.as_slice(), ex.answer), (ex.corrupt.as_slice(), ex.foil)])
            .collect();
        let chunk = seqs.len().div_ceil(GRAD_CHUNKS);
        let partials: Vec<Result<(S, Vec<Vec<S>>)>> = seqs
            .par_chunks(chunk)
            .map(|part| {
                let mut loss = S::zero();
                let mut acc: Option<Vec<Vec<S>>> = None;
                for &(tokens, target) in part {
                    let (l, g) = sequence_grads(&config, &weights, tokens, target)?;
                    loss += l;
                    match acc.as_mut() {
                        Some(a) => add_into(a, g),
                        None => acc = Some(g),
                    }
                }
                Ok((loss, acc.unwrap_or_default()))
            })
            .collect();
        let mut loss = S::zero();
        let mut grads: Option<Vec<Vec<S>>> = None;
        for p in partials {
            let (l, g) = p?;
            loss += l;
            match grads.as_mut() {
                Some(a) => add_into(a, g),
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let n = S::from_usize(seqs.len()).unwrap();
        let loss = (loss / n).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut norm2 = S::zero();
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v /= n;
                norm2 += *v * *v;
            }
        }
        let norm = norm2.sqrt().to_f64_lossy();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        if hp.grad_clip > 0.0 && norm > hp.grad_clip {
            let s = S::from_f64_lossy(hp.grad_clip / norm);
            for v in grads.iter_mut().flatten() {
                *v *= s;
            }
        }
        adam.step(&mut params, &grads, hp, hp.lr_at(step));
        tokens_seen += seqs.iter().map(|(t, _)| t.len() as u64).sum::<u64>();

        window.0 += loss;
        window.1 += 1;
        let done = step + 1;
        if done % hp.log_every.max(1) == 0 || done == last_step {
            curve.push(CurvePoint {
                step: done,
                tokens_seen,
                loss: window.0 / window.1 as f64,
            });
            window = (0.0, 0);
        }
        if schedule.binary_search(&done).is_ok() {
            let weights = Weights::from_tensors(
                &config,
                params
                    .iter()
                    .zip(&shapes)
                    .map(|(p, s)| Tensor::new(s.clone(), p.clone()))
                    .collect::<Result<_>>()?,
            )?;
            checkpoints.push(Checkpoint {
                config: config.clone(),
                weights,
                step: done,
                tokens_seen,
                seed,
                provenance: Default::default(),
            });
        }
    }
    Ok(TrainingRun { checkpoints, curve })
}
