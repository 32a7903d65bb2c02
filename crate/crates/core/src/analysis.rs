//! Within-task consistency metrics and cross-task specificity analysis.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::Circuit;
use crate::error::{Error, Result};
use crate::intervention::{
    accuracy, necessity_value, sample_capacity_control, AblationSpec, AblationTag, NecessityFlag,
    NecessityReport,
};
use crate::model::{ComponentId, ComponentKind, ComponentSet, Model};
use crate::numeric::{Scalar, SeedTree};
use crate::tasks::{TaskExample, TaskId};

/// Per-example circuits of one task at one checkpoint and K.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitCollection {
    pub task: TaskId,
    pub checkpoint: String,
    pub k: f64,
    pub circuits: Vec<Circuit>,
}

impl CircuitCollection {
    pub fn new(circuits: Vec<Circuit>) -> Result<Self> {
        let first = circuits
            .first()
            .ok_or_else(|| Error::Input("circuit collection is empty".into()))?;
        let (task, checkpoint, k) = (first.task, first.checkpoint.clone(), first.k);
        let mut seen = std::collections::BTreeSet::new();
        for c in &circuits {
            if c.task != task || c.checkpoint != checkpoint || c.k != k {
                return Err(Error::Input(format!(
                    "circuit for example {} ({}, {}, K={}) does not match collection ({task}, {checkpoint}, K={k})",
                    c.example, c.task, c.checkpoint, c.k
                )));
            }
            if !seen.insert(c.example) {
                return Err(Error::Input(format!("duplicate example id {}", c.example)));
            }
        }
        Ok(Self {
            task,
            checkpoint,
            k,
            circuits,
        })
    }

    pub fn sets(&self) -> Vec<&ComponentSet> {
        self.circuits.iter().map(|c| &c.members).collect()
    }

    pub fn len(&self) -> usize {
        self.circuits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.circuits.is_empty()
    }
}

/// Components present in at least a fraction `p` of `sets`.
pub fn shared_set(sets: &[&ComponentSet], p: f64) -> ComponentSet {
    let mut counts: BTreeMap<_, usize> = BTreeMap::new();
    for s in sets {
        for &c in s.iter() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let n = sets.len() as f64;
    counts
        .into_iter()
        .filter(|&(_, k)| k as f64 / n >= p)
        .map(|(c, _)| c)
        .collect()
}

/// Mean fraction of each circuit covered by the shared set at `p`.
pub fn reuse_at(sets: &[&ComponentSet], p: f64) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Contract("reuse over no circuits".into()));
    }
    if sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("reuse over an empty circuit".into()));
    }
    let shared = shared_set(sets, p);
    let total: f64 = sets
        .iter()
        .map(|s| s.intersection(&shared).count() as f64 / s.len() as f64)
        .sum();
    Ok(total / sets.len() as f64)
}

/// `(mlp_fraction, attn_fraction)` of a circuit; `(0, 0)` when empty.
pub fn composition(set: &ComponentSet) -> (f64, f64) {
    if set.is_empty() {
        return (0.0, 0.0);
    }
    let mlps = set.iter().filter(|c| c.kind() == ComponentKind::Mlp).count() as f64;
    let n = set.len() as f64;
    (mlps / n, (n - mlps) / n)
}

/// Cumulative fraction of members in layers `0..=l`, for each `l`.
pub fn layer_cdf(set: &ComponentSet, n_layers: usize) -> Vec<f64> {
    let mut hist = vec![0usize; n_layers];
    for c in set {
        if c.layer() < n_layers {
            hist[c.layer()] += 1;
        }
    }
    let n = set.len() as f64;
    let mut acc = 0;
    hist.iter()
        .map(|&h| {
            acc += h;
            if set.is_empty() {
                0.0
            } else {
                acc as f64 / n
            }
        })
        .collect()
}

/// `|A ∩ B| / |A ∪ B|`, with `jaccard(∅, ∅) = 1`.
pub fn jaccard(a: &ComponentSet, b: &ComponentSet) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Expected Jaccard overlap of two independent uniform K-fraction subsets,
/// `K / (2 − K)`.
pub fn chance_jaccard(k: f64) -> f64 {
    k / (2.0 - k)
}

/// Exact expected Jaccard overlap of two independent uniform subsets of
/// fixed size `m` drawn from `n` components (hypergeometric intersection).
pub fn chance_jaccard_fixed(n: usize, m: usize) -> f64 {
    if m == 0 || m > n {
        return if m == 0 { 1.0 } else { f64::NAN };
    }
    let ln_choose =
        |a: usize, b: usize| -> f64 { (1..=b).map(|i| ((a - b + i) as f64).ln() - (i as f64).ln()).sum() };
    let total = ln_choose(n, m);
    (m.saturating_mul(2).saturating_sub(n)..=m)
        .map(|x| {
            let p = (ln_choose(m, x) + ln_choose(n - m, m - x) - total).exp();
            p * x as f64 / (2 * m - x) as f64
        })
        .sum()
}

/// Monte Carlo mean Jaccard of pairs of independent random subsets that
/// include each component with probability `k`. Pairs where both subsets
/// are empty carry no overlap information and are redrawn.
pub fn monte_carlo_chance_jaccard<R: Rng + ?Sized>(
    components: &[ComponentId],
    k: f64,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let draw = |rng: &mut R| -> ComponentSet {
        components
            .iter()
            .copied()
            .filter(|_| rng.random_bool(k))
            .collect()
    };
    let mut total = 0.0;
    let mut done = 0;
    while done < trials {
        let (a, b) = (draw(rng), draw(rng));
        if a.is_empty() && b.is_empty() {
            continue;
        }
        total += jaccard(&a, &b);
        done += 1;
    }
    total / trials.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub tasks: Vec<TaskId>,
    pub k: f64,
    pub values: Vec<Vec<f64>>,
    /// Entries where both sets were empty and the value is the 1.0 convention.
    pub both_empty: Vec<Vec<bool>>,
}

pub fn overlap_matrix(sets: &[(TaskId, ComponentSet)], k: f64) -> OverlapMatrix {
    let values = sets
        .iter()
        .map(|(_, a)| sets.iter().map(|(_, b)| jaccard(a, b)).collect())
        .collect();
    let both_empty = sets
        .iter()
        .map(|(_, a)| sets.iter().map(|(_, b)| a.is_empty() && b.is_empty()).collect())
        .collect();
    OverlapMatrix {
        tasks: sets.iter().map(|(t, _)| *t).collect(),
        k,
        values,
        both_empty,
    }
}

/// Accuracy under ablation, memoised per `(task, set)` so identical
/// interventions are evaluated once and always agree.
pub struct Evaluator<'a, S> {
    model: &'a Model<S>,
    evalsets: &'a BTreeMap<TaskId, Vec<TaskExample>>,
    cache: HashMap<(TaskId, ComponentSet), f64>,
}

impl<'a, S: Scalar> Evaluator<'a, S> {
    pub fn new(model: &'a Model<S>, evalsets: &'a BTreeMap<TaskId, Vec<TaskExample>>) -> Self {
        Self {
            model,
            evalsets,
            cache: HashMap::new(),
        }
    }

    pub fn model(&self) -> &'a Model<S> {
        self.model
    }

    pub fn accuracy(&mut self, task: TaskId, set: &ComponentSet) -> Result<f64> {
        if let Some(&v) = self.cache.get(&(task, set.clone())) {
            return Ok(v);
        }
        let evalset = self
            .evalsets
            .get(&task)
            .ok_or_else(|| Error::Input(format!("no evaluation set for task {task}")))?;
        let v = accuracy(
            self.model,
            &AblationSpec::new(set.clone(), AblationTag::Custom),
            evalset,
        )?;
        self.cache.insert((task, set.clone()), v);
        Ok(v)
    }

    /// `acc(∅) − acc(set)` on `task`.
    pub fn drop(&mut self, task: TaskId, set: &ComponentSet) -> Result<f64> {
        Ok(self.accuracy(task, &ComponentSet::new())? - self.accuracy(task, set)?)
    }

    /// Memoized [`crate::intervention::necessity`] with the same control
    /// draws. An infeasible control yields an undefined value flagged
    /// `control_infeasible` instead of an error.
    pub fn necessity(
        &mut self,
        task: TaskId,
        k: f64,
        p: f64,
        shared: &ComponentSet,
        seed: u64,
        n_controls: usize,
    ) -> Result<NecessityReport> {
        let baseline = self.accuracy(task, &ComponentSet::new())?;
        let ablated = self.accuracy(task, shared)?;
        let all = self.model.components();
        let tree = SeedTree::new(seed);
        let mut controls = Vec::new();
        let mut infeasible = false;
        if !shared.is_empty() {
            for i in 0..n_controls {
                match sample_capacity_control(shared, &all, &mut tree.index(i as u64).rng()) {
                    Ok(set) => controls.push(self.accuracy(task, &set)?),
                    Err(Error::ControlInfeasible { .. }) => {
                        infeasible = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let (mut value, control_acc, control_spread, mut flags) =
            necessity_value(baseline, &controls, ablated, shared.is_empty());
        if infeasible {
            value = None;
            flags.push(NecessityFlag::ControlInfeasible);
        }
        Ok(NecessityReport {
            task,
            k,
            p,
            baseline,
            control_acc: if infeasible { f64::NAN } else { control_acc },
            control_spread: if infeasible { f64::NAN } else { control_spread },
            ablated_acc: ablated,
            necessity: value,
            flags,
            seed,
            shared_size: shared.len(),
        })
    }
}

/// `delta[a][b] = acc_a(∅) − acc_a(S^b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropMatrix {
    pub tasks: Vec<TaskId>,
    pub baseline: Vec<f64>,
    pub delta: Vec<Vec<f64>>,
}

/// Own-circuit drop and mean other-circuit drop for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnOther {
    pub task: TaskId,
    pub own: f64,
    /// `None` when there is no other task.
    pub other: Option<f64>,
}

impl DropMatrix {
    pub fn own_other(&self) -> Vec<OwnOther> {
        let n = self.tasks.len();
        (0..n)
            .map(|a| {
                let others: Vec<f64> = (0..n).filter(|&b| b != a).map(|b| self.delta[a][b]).collect();
                OwnOther {
                    task: self.tasks[a],
                    own: self.delta[a][a],
                    other: (!others.is_empty()).then(|| others.iter().sum::<f64>() / others.len() as f64),
                }
            })
            .collect()
    }
}

pub fn drop_matrix<S: Scalar>(
    eval: &mut Evaluator<'_, S>,
    shared: &[(TaskId, ComponentSet)],
) -> Result<DropMatrix> {
    let mut baseline = Vec::new();
    let mut delta = Vec::new();
    for (a, _) in shared {
        baseline.push(eval.accuracy(*a, &ComponentSet::new())?);
        let row = shared
            .iter()
            .map(|(_, set)| eval.drop(*a, set))
            .collect::<Result<Vec<_>>>()?;
        delta.push(row);
    }
    Ok(DropMatrix {
        tasks: shared.iter().map(|(t, _)| *t).collect(),
        baseline,
        delta,
    })
}

/// Three-way partition of `A ∪ B`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub shared: ComponentSet,
    pub a_only: ComponentSet,
    pub b_only: ComponentSet,
}

impl Decomposition {
    /// `(shared, specific, complement)` sizes.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.shared.len(), self.a_only.len(), self.b_only.len())
    }

    pub fn part(&self, part: Part) -> &ComponentSet {
        match part {
            Part::Shared => &self.shared,
            Part::AOnly => &self.a_only,
            Part::BOnly => &self.b_only,
            Part::Control => panic!("the control is not a stored part"),
        }
    }
}

pub fn decompose(a: &ComponentSet, b: &ComponentSet) -> Decomposition {
    Decomposition {
        shared: a.intersection(b).copied().collect(),
        a_only: a.difference(b).copied().collect(),
        b_only: b.difference(a).copied().collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Shared,
    AOnly,
    BOnly,
    /// Random set matching the A-only part's size and kind counts.
    Control,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Shared, Part::AOnly, Part::BOnly, Part::Control];

    pub fn name(&self) -> &'static str {
        match self {
            Part::Shared => "shared",
            Part::AOnly => "a_only",
            Part::BOnly => "b_only",
            Part::Control => "control",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveRow {
    pub a: TaskId,
    pub b: TaskId,
    pub part: Part,
    pub size: usize,
    /// Accuracy drop on task `a`.
    pub target_drop: f64,
    /// Mean accuracy drop over every task other than `a`; `None` if there is none.
    pub other_drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub rows: Vec<SelectiveRow>,
    /// Per part, `(target_drop, other_drop)` averaged over ordered pairs.
    pub summary: Vec<(Part, f64, Option<f64>)>,
}

/// Ablates each part of the `(a, b)` decomposition plus a kind-matched
/// control for the A-only part, for every ordered pair of distinct tasks.
///
/// The control for pair `(a, b)` draws from `SeedTree(seed).child(a).child(b)`.
pub fn selective_ablation<S: Scalar>(
    eval: &mut Evaluator<'_, S>,
    circuits: &[(TaskId, ComponentSet)],
    seed: u64,
) -> Result<SelectiveReport> {
    let all = eval.model().components();
    let tasks: Vec<TaskId> = circuits.iter().map(|(t, _)| *t).collect();
    let mut rows = Vec::new();
    for (a, ca) in circuits {
        for (b, cb) in circuits {
            if a == b {
                continue;
            }
            let d = decompose(ca, cb);
            let mut rng = SeedTree::new(seed).child(a.name()).child(b.name()).rng();
            let control = sample_capacity_control(&d.a_only, &all, &mut rng)?;
            for part in Part::ALL {
                let set = match part {
                    Part::Control => &control,
                    p => d.part(p),
                };
                let target_drop = eval.drop(*a, set)?;
                let others: Vec<TaskId> = tasks.iter().copied().filter(|t| t != a).collect();
                let mut sum = 0.0;
                for &t in &others {
                    sum += eval.drop(t, set)?;
                }
                rows.push(SelectiveRow {
                    a: *a,
                    b: *b,
                    part,
                    size: set.len(),
                    target_drop,
                    other_drop: (!others.is_empty()).then(|| sum / others.len() as f64),
                });
            }
        }
    }
    let summary = Part::ALL
        .iter()
        .filter_map(|&part| {
            let sel: Vec<&SelectiveRow> = rows.iter().filter(|r| r.part == part).collect();
            if sel.is_empty() {
                return None;
            }
            let n = sel.len() as f64;
            let target = sel.iter().map(|r| r.target_drop).sum::<f64>() / n;
            let other = sel
                .iter()
                .map(|r| r.other_drop)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n);
            Some((part, target, other))
        })
        .collect();
    Ok(SelectiveReport { rows, summary })
}
