use circuit_reuse::attribution::{
    eap_batch, eap_scores, exact_patch_effect, exact_patch_effects, extract_circuit, topk_count, ScoreMap,
};
use circuit_reuse::model::{
    Checkpoint, ComponentId, Interventions, Model, ModelConfig, Nonlinearity, Norm, Override, Weights,
};
use circuit_reuse::numeric::{SeedTree, Tensor};
use circuit_reuse::tasks::{generate, logit_diff, MetricSpec, TaskExample, TaskId, Vocab, MAX_PROMPT_LEN};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn desk_random(seed: u64, std: f64) -> Model<f64> {
    let config = ModelConfig::desk(Vocab::builtin().len(), MAX_PROMPT_LEN);
    let mut ckpt = Checkpoint::<f64>::init(config.clone(), seed).unwrap();
    ckpt.weights = Weights::random(&config, &SeedTree::new(seed), std);
    Model::new(ckpt).unwrap()
}

fn linearized(seed: u64) -> Model<f64> {
    let mut config = ModelConfig::desk(Vocab::builtin().len(), MAX_PROMPT_LEN);
    config.norm = Norm::None;
    config.nonlinearity = Nonlinearity::Identity;
    let mut ckpt = Checkpoint::<f64>::init(config.clone(), seed).unwrap();
    ckpt.weights = Weights::random(&config, &SeedTree::new(seed), 0.08).map(&config, |name, t| {
        if name.ends_with("w_q") || name.ends_with("w_k") {
            Tensor::zeros(t.shape())
        } else {
            t.clone()
        }
    });
    Model::new(ckpt).unwrap()
}

fn examples(task: TaskId, n: usize, seed: u64) -> Vec<TaskExample> {
    generate(task, n, &mut SeedTree::new(seed).rng())
}

#[test]
fn identical_inputs_score_zero() {
    let model = desk_random(1, 0.2);
    let mut ex = examples(TaskId::Ioi, 1, 1).remove(0);
    ex.corrupt = ex.clean.clone();
    let s = eap_scores(&model, &ex, 0).unwrap();
    assert_eq!(s.len(), 36);
    assert!(s.iter().all(|(_, v)| v == 0.0));
    for c in model.components().into_iter().take(5) {
        assert_eq!(exact_patch_effect(&model, &ex, c).unwrap(), 0.0);
    }
}

#[test]
fn length_mismatch_is_an_input_error() {
    let model = desk_random(1, 0.2);
    let mut ex = examples(TaskId::Addition, 1, 2).remove(0);
    ex.corrupt.push(1);
    assert!(matches!(
        eap_scores(&model, &ex, 0),
        Err(circuit_reuse::Error::Input(_))
    ));
    assert!(matches!(
        exact_patch_effect(&model, &ex, ComponentId::mlp(0)),
        Err(circuit_reuse::Error::Input(_))
    ));
}

#[test]
fn eap_is_exact_on_a_linearized_model() {
    let model = linearized(5);
    for task in TaskId::ALL {
        for (i, ex) in examples(task, 3, 7).iter().enumerate() {
            let eap = eap_scores(&model, ex, i).unwrap();
            let exact = exact_patch_effects(&model, ex, i).unwrap();
            let peak = eap.iter().fold(0.0f64, |m, (_, v)| m.max(v.abs()));
            assert!(peak > 1e-3 && peak < 1e3, "{task}: peak score {peak}");
            for (c, v) in eap.iter() {
                let w = exact.get(c).unwrap();
                assert!((v - w).abs() <= 1e-10, "{task} {c}: {v} vs {w}");
                assert!(v.is_finite());
            }
        }
    }
}

#[test]
fn two_forwards_and_one_backward_per_example() {
    let model = desk_random(2, 0.2);
    let batch = examples(TaskId::CopyMcqa, 6, 3);
    model.passes().reset();
    eap_scores(&model, &batch[0], 0).unwrap();
    assert_eq!((model.passes().forwards(), model.passes().backwards()), (2, 1));
    model.passes().reset();
    eap_batch(&model, &batch).unwrap();
    assert_eq!((model.passes().forwards(), model.passes().backwards()), (12, 6));
}

#[test]
fn batch_scores_equal_single_scores() {
    let model = desk_random(3, 0.2);
    let batch = examples(TaskId::Boolean, 5, 4);
    let together = eap_batch(&model, &batch).unwrap();
    for (i, ex) in batch.iter().enumerate() {
        assert_eq!(together[i], eap_scores(&model, ex, i).unwrap());
    }
}

#[test]
fn patching_every_component_reproduces_the_corrupt_run() {
    let model = desk_random(4, 0.2);
    let ex = examples(TaskId::Ioi, 1, 5).remove(0);
    let corrupt = model.forward(&ex.corrupt).unwrap();
    let mut iv = Interventions::none(model.config());
    for (c, w) in corrupt.acts.iter() {
        iv.set(model.config(), c, Override::Replace(w.clone())).unwrap();
    }
    let patched = model.forward_with(&ex.clean, &iv).unwrap();
    // only the embedding rows that differ between clean and corrupt survive
    let diff = patched.residual.sub(&corrupt.residual).unwrap();
    let emb = model
        .forward(&ex.clean)
        .unwrap()
        .embedding
        .sub(&corrupt.embedding)
        .unwrap();
    assert!(diff.max_abs_diff(&emb).unwrap() <= 1e-12);
    let mut iv = Interventions::none(model.config());
    let clean = model.forward(&ex.clean).unwrap();
    for (c, w) in clean.acts.iter() {
        iv.set(model.config(), c, Override::Replace(w.clone())).unwrap();
    }
    let again = model.forward_with(&ex.clean, &iv).unwrap();
    let m = MetricSpec::for_example(&ex);
    assert_eq!(logit_diff(&again.logits, &m), logit_diff(&clean.logits, &m));
}

#[test]
fn scaling_the_metric_scales_scores() {
    let model = desk_random(6, 0.2);
    let config = model.config().clone();
    let ex = examples(TaskId::Addition, 1, 8).remove(0);
    let base = eap_scores(&model, &ex, 0).unwrap();
    let c = -2.5;
    let mut ckpt = model.checkpoint().clone();
    ckpt.weights = ckpt.weights.map(&config, |name, t| {
        if name == "w_unembed" {
            t.scale(c)
        } else {
            t.clone()
        }
    });
    let scaled = eap_scores(&Model::new(ckpt).unwrap(), &ex, 0).unwrap();
    for (comp, v) in base.iter() {
        let w = scaled.get(comp).unwrap();
        assert!((w - c * v).abs() <= 1e-9 * (1.0 + v.abs()), "{comp}");
    }
    for k in [0.01, 0.1, 0.3] {
        assert_eq!(
            extract_circuit(&base, k, "x").unwrap().members,
            extract_circuit(&scaled, k, "x").unwrap().members
        );
    }
}

#[test]
fn one_dimensional_worked_case() {
    // (3 − 1) × 0.5
    let delta = Tensor::<f64>::from_rows(&[&[3.0]])
        .unwrap()
        .sub(&Tensor::from_rows(&[&[1.0]]).unwrap())
        .unwrap();
    assert_eq!(delta.dot(&Tensor::from_rows(&[&[0.5]]).unwrap()).unwrap(), 1.0);
}

fn sort_prefix_oracle(scores: &[(ComponentId, f64)], count: usize) -> Vec<ComponentId> {
    let mut all: Vec<(ComponentId, f64)> = scores.to_vec();
    all.sort_by_key(|e| e.0);
    // selection sort by magnitude keeping the earliest canonical entry on ties
    let mut out = Vec::new();
    for _ in 0..count {
        let mut best: Option<usize> = None;
        for (i, (_, v)) in all.iter().enumerate() {
            if best.is_none_or(|b| v.abs() > all[b].1.abs()) {
                best = Some(i);
            }
        }
        out.push(all.remove(best.unwrap()).0);
    }
    out.sort();
    out
}

proptest! {
    #[test]
    fn extraction_matches_full_sort_oracle(
        raw in proptest::collection::vec(-3i32..=3, 36),
        k in 0.005f64..=1.0,
    ) {
        let config = ModelConfig::desk(82, 27);
        let comps = circuit_reuse::model::all_components(&config);
        let pairs: Vec<(ComponentId, f64)> = comps.iter().zip(&raw).map(|(&c, &v)| (c, v as f64 * 0.25)).collect();
        let map = ScoreMap::new(TaskId::Ioi, 0, pairs.iter().copied().collect::<BTreeMap<_, _>>()).unwrap();
        let circuit = extract_circuit(&map, k, "x").unwrap();
        let count = topk_count(k, 36);
        prop_assert_eq!(circuit.members.len(), count);
        prop_assert_eq!(circuit.members.iter().copied().collect::<Vec<_>>(), sort_prefix_oracle(&pairs, count));
    }
}
