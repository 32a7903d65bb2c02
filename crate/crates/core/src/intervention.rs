//! Zero-ablation evaluation: ZAP decoding, accuracy under ablation,
//! capacity-conserved controls and necessity.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{kind_counts, validate_set, ComponentId, ComponentKind, ComponentSet, Model};
use crate::numeric::{Scalar, SeedTree};
use crate::tasks::{TaskExample, TaskId};

/// Where an ablation set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTag {
    SharedSet,
    Control,
    DecompositionPart,
    Custom,
}

/// A component set clamped to zero at every position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub set: ComponentSet,
    pub tag: AblationTag,
}

impl AblationSpec {
    pub fn new(set: ComponentSet, tag: AblationTag) -> Self {
        Self { set, tag }
    }

    pub fn empty() -> Self {
        Self::new(ComponentSet::new(), AblationTag::Custom)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Zero-ablated prediction: the top final-position token with `spec` clamped.
pub fn zap<S: Scalar>(model: &Model<S>, spec: &AblationSpec, tokens: &[usize]) -> Result<usize> {
    let logits = model.forward_ablated(tokens, &spec.set)?;
    Ok(argmax(logits.row(tokens.len() - 1)))
}

/// Fraction of `evalset` whose clean prompt is answered correctly under `spec`.
pub fn accuracy<S: Scalar>(model: &Model<S>, spec: &AblationSpec, evalset: &[TaskExample]) -> Result<f64> {
    if evalset.is_empty() {
        return Err(Error::Input("accuracy over an empty evaluation set".into()));
    }
    validate_set(model.config(), &spec.set)?;
    let hits: Vec<bool> = evalset
        .par_iter()
        .map(|ex| zap(model, spec, &ex.clean).map(|t| t == ex.answer))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Uniform random subset of `all \ target` with the same number of heads and
/// of MLPs as `target`.
pub fn sample_capacity_control<R: Rng + ?Sized>(
    target: &ComponentSet,
    all: &[ComponentId],
    rng: &mut R,
) -> Result<ComponentSet> {
    let (heads, mlps) = kind_counts(target);
    let pool = |kind: ComponentKind| -> Vec<ComponentId> {
        all.iter()
            .copied()
            .filter(|c| c.kind() == kind && !target.contains(c))
            .collect()
    };
    let free_heads = pool(ComponentKind::AttnHead);
    let free_mlps = pool(ComponentKind::Mlp);
    if heads > free_heads.len() || mlps > free_mlps.len() {
        return Err(Error::ControlInfeasible {
            heads,
            mlps,
            heads_available: free_heads.len(),
            mlps_available: free_mlps.len(),
        });
    }
    let mut out = ComponentSet::new();
    out.extend(
        sample(rng, free_mlps.len(), mlps)
            .into_iter()
            .map(|i| free_mlps[i]),
    );
    out.extend(
        sample(rng, free_heads.len(), heads)
            .into_iter()
            .map(|i| free_heads[i]),
    );
    Ok(out)
}

/// Why a necessity value is absent or degenerate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NecessityFlag {
    /// Baseline accuracy is zero; the ratio is undefined.
    ZeroBaseline,
    /// The shared set is empty; necessity is reported as 0.00.
    EmptyCircuit,
    /// Too few components remain outside the shared set for a
    /// capacity-matched control; the ratio is undefined.
    ControlInfeasible,
}

impl fmt::Display for NecessityFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NecessityFlag::ZeroBaseline => "zero_baseline",
            NecessityFlag::EmptyCircuit => "empty_circuit",
            NecessityFlag::ControlInfeasible => "control_infeasible",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NecessityReport {
    pub task: TaskId,
    pub k: f64,
    pub p: f64,
    pub baseline: f64,
    /// Mean accuracy over the control draws.
    pub control_acc: f64,
    /// Population standard deviation of the control accuracies.
    pub control_spread: f64,
    pub ablated_acc: f64,
    pub necessity: Option<f64>,
    pub flags: Vec<NecessityFlag>,
    pub seed: u64,
    pub shared_size: usize,
}

pub const NECESSITY_HEADER: [&str; 9] = [
    "task",
    "K",
    "P",
    "baseline",
    "control_acc",
    "ablated_acc",
    "necessity",
    "flags",
    "seed",
];

/// `--` for a zero baseline, `n/a` when no capacity-matched control exists,
/// `0.00` for an empty shared set, otherwise four decimals.
pub fn format_necessity(value: Option<f64>, flags: &[NecessityFlag]) -> String {
    if flags.contains(&NecessityFlag::ZeroBaseline) {
        return "--".into();
    }
    if flags.contains(&NecessityFlag::ControlInfeasible) {
        return "n/a".into();
    }
    match value {
        None => "--".into(),
        Some(_) if flags.contains(&NecessityFlag::EmptyCircuit) => "0.00".into(),
        Some(v) => format!("{v:.4}"),
    }
}

/// Four decimals, or `--` for a value that could not be measured.
pub fn fixed4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "--".into()
    }
}

impl NecessityReport {
    pub fn necessity_cell(&self) -> String {
        format_necessity(self.necessity, &self.flags)
    }

    pub fn flags_cell(&self) -> String {
        self.flags
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Cells in [`NECESSITY_HEADER`] order.
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.task.to_string(),
            format!("{}", self.k),
            format!("{}", self.p),
            fixed4(self.baseline),
            fixed4(self.control_acc),
            fixed4(self.ablated_acc),
            self.necessity_cell(),
            self.flags_cell(),
            self.seed.to_string(),
        ]
    }
}

/// Necessity from already-measured accuracies.
///
/// `(mean(controls) − ablated) / baseline`, undefined when the baseline is
/// zero and 0.00 when the shared set is empty.
pub fn necessity_value(
    baseline: f64,
    controls: &[f64],
    ablated: f64,
    shared_empty: bool,
) -> (Option<f64>, f64, f64, Vec<NecessityFlag>) {
    let n = controls.len().max(1) as f64;
    let mean = if controls.is_empty() {
        baseline
    } else {
        controls.iter().sum::<f64>() / n
    };
    let spread = (controls.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n).sqrt();
    let mut flags = Vec::new();
    if shared_empty {
        flags.push(NecessityFlag::EmptyCircuit);
    }
    let value = if baseline == 0.0 {
        flags.insert(0, NecessityFlag::ZeroBaseline);
        None
    } else if shared_empty {
        Some(0.0)
    } else {
        Some((mean - ablated) / baseline)
    };
    (value, mean, spread, flags)
}

/// Necessity of `shared` on `evalset`, averaging `n_controls` capacity-matched
/// control draws. Draw `i` uses the stream `SeedTree(seed).index(i)`.
#[allow(clippy::too_many_arguments)]
pub fn necessity<S: Scalar>(
    model: &Model<S>,
    task: TaskId,
    k: f64,
    p: f64,
    shared: &ComponentSet,
    evalset: &[TaskExample],
    seed: u64,
    n_controls: usize,
) -> Result<NecessityReport> {
    let baseline = accuracy(model, &AblationSpec::empty(), evalset)?;
    let ablated = accuracy(
        model,
        &AblationSpec::new(shared.clone(), AblationTag::SharedSet),
        evalset,
    )?;
    let mut controls = Vec::new();
    if !shared.is_empty() {
        let all = model.components();
        let tree = SeedTree::new(seed);
        for i in 0..n_controls {
            let set = sample_capacity_control(shared, &all, &mut tree.index(i as u64).rng())?;
            controls.push(accuracy(
                model,
                &AblationSpec::new(set, AblationTag::Control),
                evalset,
            )?);
        }
    }
    let (value, control_acc, control_spread, flags) =
        necessity_value(baseline, &controls, ablated, shared.is_empty());
    Ok(NecessityReport {
        task,
        k,
        p,
        baseline,
        control_acc,
        control_spread,
        ablated_acc: ablated,
        necessity: value,
        flags,
        seed,
        shared_size: shared.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{all_components, ModelConfig};
    use rand::SeedableRng;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.3, 0.7]), 1);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn worked_necessity() {
        let (v, mean, _, flags) = necessity_value(0.9, &[0.8], 0.3, false);
        assert!((v.unwrap() - 0.5555555555555556).abs() < 1e-12);
        assert_eq!(mean, 0.8);
        assert!(flags.is_empty());
    }

    #[test]
    fn dash_and_empty_conventions() {
        let (v, _, _, flags) = necessity_value(0.0, &[0.0], 0.0, false);
        assert_eq!(format_necessity(v, &flags), "--");
        let (v, _, _, flags) = necessity_value(0.8, &[], 0.8, true);
        assert_eq!(format_necessity(v, &flags), "0.00");
        assert_eq!(flags, vec![NecessityFlag::EmptyCircuit]);
        let (v, _, _, flags) = necessity_value(0.8, &[0.8], 0.8, false);
        assert_eq!(format_necessity(v, &flags), "0.0000");
    }

    #[test]
    fn empty_target_gives_empty_control() {
        let cfg = ModelConfig::desk(82, 27);
        let all = all_components(&cfg);
        let mut rng = crate::numeric::Rng::seed_from_u64(0);
        assert!(sample_capacity_control(&ComponentSet::new(), &all, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn all_mlps_is_infeasible() {
        let cfg = ModelConfig::desk(82, 27);
        let all = all_components(&cfg);
        let target: ComponentSet = (0..cfg.n_layers).map(ComponentId::mlp).collect();
        let mut rng = crate::numeric::Rng::seed_from_u64(0);
        let err = sample_capacity_control(&target, &all, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            Error::ControlInfeasible {
                mlps: 4,
                mlps_available: 0,
                ..
            }
        ));
    }
}
