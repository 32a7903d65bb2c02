//! Edge attribution patching (EAP) scores, the exact activation-patching
//! oracle, and top-K circuit extraction.
//!
//! Scores are first-order estimates of how much the logit difference moves
//! when a component's write is swapped for its corrupt-run value:
//!
//! ```text
//! ê_u = Σ_pos ⟨a_u(x') − a_u(x), ∂L(x)/∂a_u⟩
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComponentId, ComponentSet, Interventions, Model, Override};
use crate::numeric::Scalar;
use crate::tasks::{logit_diff, MetricSpec, TaskExample, TaskId};

/// Per-component attribution scores for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub task: TaskId,
    pub example: usize,
    scores: BTreeMap<ComponentId, f64>,
}

impl ScoreMap {
    pub fn new(task: TaskId, example: usize, scores: BTreeMap<ComponentId, f64>) -> Result<Self> {
        if let Some((c, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite score {v} for {c}")));
        }
        Ok(Self {
            task,
            example,
            scores,
        })
    }

    pub fn get(&self, c: ComponentId) -> Option<f64> {
        self.scores.get(&c).copied()
    }

    /// Scores in canonical component order.
    pub fn iter(&self) -> impl Iterator<Item = (ComponentId, f64)> + '_ {
        self.scores.iter().map(|(&c, &v)| (c, v))
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            task: self.task,
            example: self.example,
            scores: self.scores.iter().map(|(&k, &v)| (k, v * c)).collect(),
        }
    }
}

fn check_pair(ex: &TaskExample) -> Result<()> {
    if ex.clean.len() != ex.corrupt.len() {
        return Err(Error::Input(format!(
            "clean and corrupt lengths differ ({} vs {})",
            ex.clean.len(),
            ex.corrupt.len()
        )));
    }
    Ok(())
}

/// EAP scores for every component, with the metric taken on the clean side.
///
/// Costs exactly two forward passes and one backward pass.
pub fn eap_scores<S: Scalar>(model: &Model<S>, ex: &TaskExample, example: usize) -> Result<ScoreMap> {
    check_pair(ex)?;
    let metric = MetricSpec::for_example(ex);
    let (_, grads, clean) = model.backward_metric_traced(&ex.clean, &metric)?;
    let corrupt = model.forward(&ex.corrupt)?;
    let mut scores = BTreeMap::new();
    for (c, g) in grads.iter() {
        let a0 = clean.get(c).expect("same key set");
        let a1 = corrupt.acts.get(c).expect("same key set");
        let delta = a1.sub(a0)?;
        scores.insert(c, delta.dot(g)?.to_f64_lossy());
    }
    ScoreMap::new(ex.task, example, scores)
}

/// Change in the clean-run metric when `component`'s write is replaced by
/// its corrupt-run write.
pub fn exact_patch_effect<S: Scalar>(
    model: &Model<S>,
    ex: &TaskExample,
    component: ComponentId,
) -> Result<f64> {
    check_pair(ex)?;
    let metric = MetricSpec::for_example(ex);
    metric.validate(model.config().vocab_size, ex.clean.len())?;
    let clean = model.forward(&ex.clean)?;
    let corrupt = model.forward(&ex.corrupt)?;
    patch_one(
        model,
        ex,
        &metric,
        logit_diff(&clean.logits, &metric),
        &corrupt.acts,
        component,
    )
}

fn patch_one<S: Scalar>(
    model: &Model<S>,
    ex: &TaskExample,
    metric: &MetricSpec,
    base: S,
    corrupt: &crate::model::ActivationRecord<S>,
    component: ComponentId,
) -> Result<f64> {
    let write = corrupt
        .get(component)
        .ok_or_else(|| Error::Input(format!("unknown component {component}")))?;
    let mut iv = Interventions::none(model.config());
    iv.set(model.config(), component, Override::Replace(write.clone()))?;
    let patched = model.forward_with(&ex.clean, &iv)?;
    Ok((logit_diff(&patched.logits, metric) - base).to_f64_lossy())
}

/// Exact patching effects for every component: two shared forwards plus
/// one forward per component.
pub fn exact_patch_effects<S: Scalar>(
    model: &Model<S>,
    ex: &TaskExample,
    example: usize,
) -> Result<ScoreMap> {
    check_pair(ex)?;
    let metric = MetricSpec::for_example(ex);
    metric.validate(model.config().vocab_size, ex.clean.len())?;
    let clean = model.forward(&ex.clean)?;
    let corrupt = model.forward(&ex.corrupt)?;
    let base = logit_diff(&clean.logits, &metric);
    let mut scores = BTreeMap::new();
    for c in model.components() {
        scores.insert(c, patch_one(model, ex, &metric, base, &corrupt.acts, c)?);
    }
    ScoreMap::new(ex.task, example, scores)
}

/// EAP scores for a batch; example ids are positions in `examples`.
///
/// Examples are scored in parallel and collected in input order, so the
/// result does not depend on the worker count.
pub fn eap_batch<S: Scalar>(model: &Model<S>, examples: &[TaskExample]) -> Result<Vec<ScoreMap>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| eap_scores(model, ex, i))
        .collect()
}

/// `max(1, round_half_up(k · n))`.
pub fn topk_count(k: f64, n: usize) -> usize {
    ((k * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// A top-K component set for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub checkpoint: String,
    pub task: TaskId,
    pub example: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub members: ComponentSet,
    /// Attribution score of each member.
    pub scores: BTreeMap<ComponentId, f64>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl Circuit {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Components with the largest `|score|`, ties broken by canonical order.
pub fn extract_circuit(scores: &ScoreMap, k: f64, checkpoint: &str) -> Result<Circuit> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Input(format!("K must lie in (0, 1], got {k}")));
    }
    let count = topk_count(k, scores.len());
    let mut ranked: Vec<(ComponentId, f64)> = scores.iter().collect();
    // Stable sort keeps canonical order among equal magnitudes.
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    ranked.truncate(count);
    Ok(Circuit {
        checkpoint: checkpoint.to_string(),
        task: scores.task,
        example: scores.example,
        k,
        members: ranked.iter().map(|&(c, _)| c).collect(),
        scores: ranked.into_iter().collect(),
        provenance: BTreeMap::new(),
    })
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(ComponentId, f64)]) -> ScoreMap {
        ScoreMap::new(TaskId::Addition, 0, pairs.iter().copied().collect()).unwrap()
    }

    #[test]
    fn topk_rounds_half_up_with_floor_of_one() {
        assert_eq!(topk_count(0.10, 36), 4);
        assert_eq!(topk_count(0.01, 36), 1);
        assert_eq!(topk_count(0.20, 36), 7);
        assert_eq!(topk_count(0.25, 10), 3);
        assert_eq!(topk_count(1.0, 36), 36);
    }

    #[test]
    fn largest_magnitudes_win() {
        let s = map(&[
            (ComponentId::mlp(0), 0.9),
            (ComponentId::mlp(1), -0.5),
            (ComponentId::mlp(2), 0.1),
        ]);
        let c = extract_circuit(&s, 0.6, "step-000000").unwrap();
        let want: ComponentSet = [ComponentId::mlp(0), ComponentId::mlp(1)].into();
        assert_eq!(c.members, want);
        assert_eq!(c.scores[&ComponentId::mlp(1)], -0.5);
    }

    #[test]
    fn ties_follow_canonical_order() {
        let s = map(&[
            (ComponentId::head(0, 1), 1.0),
            (ComponentId::mlp(1), 1.0),
            (ComponentId::head(0, 0), 1.0),
            (ComponentId::mlp(0), 1.0),
        ]);
        let c = extract_circuit(&s, 0.5, "x").unwrap();
        let want: ComponentSet = [ComponentId::mlp(0), ComponentId::head(0, 0)].into();
        assert_eq!(c.members, want);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let s = map(&[(ComponentId::mlp(0), 1.0)]);
        assert!(extract_circuit(&s, 0.0, "x").is_err());
        assert!(extract_circuit(&s, 1.5, "x").is_err());
    }

    #[test]
    fn circuit_json_keeps_field_order() {
        let s = map(&[(ComponentId::mlp(0), 0.25), (ComponentId::head(1, 2), -1.0)]);
        let c = extract_circuit(&s, 1.0, "step-000010").unwrap();
        let json = c.to_json().unwrap();
        let keys = [
            "\"checkpoint\"",
            "\"task\"",
            "\"example\"",
            "\"K\"",
            "\"members\"",
            "\"scores\"",
            "\"provenance\"",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{json}");
        assert_eq!(Circuit::from_json(&json).unwrap(), c);
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 400.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = b.iter().map(|v| -v).collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&a, &[1.0; 4]), None);
    }
}
