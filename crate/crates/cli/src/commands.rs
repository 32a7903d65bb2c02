//! The pipeline commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use circuit_reuse::analysis::{
    chance_jaccard, composition, decompose, drop_matrix, layer_cdf, overlap_matrix, reuse_at,
    selective_ablation, shared_set, CircuitCollection, Evaluator,
};
use circuit_reuse::attribution::{eap_batch, extract_circuit, Circuit, ScoreMap};
use circuit_reuse::intervention::{fixed4, NecessityReport, NECESSITY_HEADER};
use circuit_reuse::model::{train, ComponentSet, TaskMixture};
use circuit_reuse::numeric::SeedTree;
use circuit_reuse::tasks::{build_splits, write_jsonl, TaskExample, TaskId, TaskSplits, Vocab};
use circuit_reuse::{Checkpoint, Model};

use crate::config::RunConfig;
use crate::output::{
    create_dir, io_err, k_label, list_files, read_csv, sha256_hex, write_bytes, write_csv, write_json,
    Layout, Provenance,
};
use crate::CliError;

/// A validated configuration bound to its output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub prov: Provenance,
    pub layout: Layout,
}

fn ckpt_id(step: u64) -> String {
    format!("step-{step:06}")
}

fn join_set(set: &ComponentSet) -> String {
    set.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "--".into(), |x| format!("{x}"))
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        config.validate()?;
        let prov = Provenance::new(config.hash(), config.seed);
        let layout = Layout::new(config.out.clone());
        Ok(Self { config, prov, layout })
    }

    fn tasks(&self) -> &[TaskId] {
        &self.config.tasks.names
    }

    fn ks(&self) -> &[f64] {
        &self.config.analysis.k_sweep
    }

    /// Train and evaluation splits; a pure function of the seed and sizes.
    pub fn splits(&self) -> Vec<TaskSplits> {
        let seeds = SeedTree::new(self.config.seed).child("data");
        self.tasks()
            .iter()
            .map(|&t| build_splits(t, self.config.tasks.n_train, self.config.tasks.n_eval, &seeds))
            .collect()
    }

    fn evalsets(splits: &[TaskSplits]) -> BTreeMap<TaskId, Vec<TaskExample>> {
        splits.iter().map(|s| (s.task, s.eval.clone())).collect()
    }

    pub fn load_model(&self, step: u64) -> Result<Model, CliError> {
        let path = self.layout.checkpoint(step);
        if !path.exists() {
            return Err(CliError::Config(format!(
                "checkpoint {} not found; run `train` first",
                path.display()
            )));
        }
        let ckpt = Checkpoint::load(&path).map_err(|e| io_err(&path, e))?;
        Ok(Model::new(ckpt)?)
    }

    /// Seed of the control draws for `(task, K)`. It does not depend on P,
    /// so equal shared sets at different P get identical controls.
    pub fn control_seed(&self, task: TaskId, k: f64) -> u64 {
        SeedTree::new(self.config.seed)
            .child("necessity")
            .child(task.name())
            .child(&k_label(k))
            .seed()
    }

    fn selective_seed(&self, k: f64) -> u64 {
        SeedTree::new(self.config.seed)
            .child("selective")
            .child(&k_label(k))
            .seed()
    }

    fn circuits_from_scores(
        &self,
        scores: &[ScoreMap],
        k: f64,
        ckpt: &str,
    ) -> Result<Vec<Circuit>, CliError> {
        scores
            .iter()
            .map(|s| {
                let mut c = extract_circuit(s, k, ckpt)?;
                c.provenance = self.prov.map();
                Ok(c)
            })
            .collect()
    }

    fn load_collections(&self, ckpt: &str) -> Result<Vec<CircuitCollection>, CliError> {
        let root = self.layout.circuits(ckpt);
        if !root.is_dir() {
            return Err(CliError::Config(format!(
                "no circuits under {}; run `extract` first",
                root.display()
            )));
        }
        let mut out = Vec::new();
        for &task in self.tasks() {
            for &k in self.ks() {
                let dir = self.layout.circuit_dir(ckpt, task, k);
                let files = if dir.is_dir() {
                    list_files(&dir)?
                } else {
                    Vec::new()
                };
                let mut circuits = files
                    .iter()
                    .filter(|f| f.extension().is_some_and(|e| e == "json"))
                    .map(|f| {
                        let path = dir.join(f);
                        Circuit::load(&path).map_err(|e| io_err(&path, e))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if circuits.is_empty() {
                    return Err(CliError::Config(format!(
                        "circuit directory {} is empty",
                        dir.display()
                    )));
                }
                circuits.sort_by_key(|c| c.example);
                out.push(CircuitCollection::new(circuits)?);
            }
        }
        Ok(out)
    }
}

/// Reuse at every P of one collection of per-example sets.
fn reuse_rows(
    task: TaskId,
    k: f64,
    sets: &[&ComponentSet],
    ps: &[f64],
) -> Result<Vec<Vec<String>>, CliError> {
    ps.iter()
        .map(|&p| {
            let shared = shared_set(sets, p);
            let reuse = reuse_at(sets, p)?;
            Ok(vec![
                task.to_string(),
                format!("{k}"),
                format!("{p}"),
                sets.len().to_string(),
                shared.len().to_string(),
                format!("{reuse}"),
                format!("{:.1}", 100.0 * reuse),
                join_set(&shared),
            ])
        })
        .collect()
}

const REUSE_HEADER: [&str; 8] = [
    "task",
    "K",
    "P",
    "n_circuits",
    "shared_size",
    "reuse",
    "reuse_pct",
    "shared",
];

// ---------------------------------------------------------------- train

pub fn cmd_train(run: &Run) -> Result<(), CliError> {
    let cfg = &run.config;
    let splits = run.splits();
    let vocab = Vocab::builtin();
    write_bytes(&run.layout.vocab(), Vocab::file_contents().as_bytes())?;
    let mut mixture = TaskMixture::new(run.tasks().to_vec());
    for s in &splits {
        for (name, data) in [("train", &s.train), ("eval", &s.eval)] {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, data, vocab)?;
            write_bytes(&run.layout.split(s.task, name), &buf)?;
        }
        mixture.exclude(s.eval.iter());
    }

    let result = train::<f64>(cfg.model_config(), &mixture, &cfg.training, cfg.seed)?;
    for mut ckpt in result.checkpoints {
        ckpt.provenance = run.prov.map();
        let path = run.layout.checkpoint(ckpt.step);
        write_bytes(&path, &ckpt.to_bytes())?;
        println!("wrote {}", path.display());
    }
    let rows: Vec<Vec<String>> = result
        .curve
        .iter()
        .map(|c| {
            vec![
                c.step.to_string(),
                c.tokens_seen.to_string(),
                format!("{}", c.loss),
            ]
        })
        .collect();
    write_csv(
        &run.layout.training_curve(),
        &run.prov,
        &["step", "tokens_seen", "loss"],
        &rows,
    )?;
    if let Some(last) = result.curve.last() {
        println!("final loss {:.4} at step {}", last.loss, last.step);
    }
    Ok(())
}

// -------------------------------------------------------------- extract

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    provenance: Provenance,
    checkpoint: String,
    files: Vec<ManifestEntry>,
}

pub fn cmd_extract(run: &Run) -> Result<(), CliError> {
    let step = run.config.analysis_step();
    let model = run.load_model(step)?;
    let ckpt = ckpt_id(step);
    let root = run.layout.circuits(&ckpt);
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| io_err(&root, e))?;
    }
    let mut files = Vec::new();
    for split in run.splits() {
        let scores = eap_batch(&model, &split.train)?;
        for &k in run.ks() {
            let dir = run.layout.circuit_dir(&ckpt, split.task, k);
            create_dir(&dir)?;
            for c in run.circuits_from_scores(&scores, k, &ckpt)? {
                let path = dir.join(format!("ex-{:05}.json", c.example));
                let text = c.to_json()?;
                write_bytes(&path, text.as_bytes())?;
                files.push(ManifestEntry {
                    path: path
                        .strip_prefix(&root)
                        .expect("under root")
                        .display()
                        .to_string(),
                    sha256: sha256_hex(text.as_bytes()),
                });
            }
        }
        println!(
            "extracted {} circuits for {}",
            split.train.len() * run.ks().len(),
            split.task
        );
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        provenance: run.prov.clone(),
        checkpoint: ckpt.clone(),
        files,
    };
    write_json(&run.layout.manifest(&ckpt), &manifest)
}

// -------------------------------------------------------------- analyze

fn necessity_reports(
    run: &Run,
    eval: &mut Evaluator<'_, f64>,
    collections: &[(TaskId, f64, Vec<&ComponentSet>)],
) -> Result<Vec<NecessityReport>, CliError> {
    let p = run.config.analysis.necessity_p;
    collections
        .iter()
        .map(|(task, k, sets)| {
            let shared = shared_set(sets, p);
            let seed = run.control_seed(*task, *k);
            Ok(eval.necessity(*task, *k, p, &shared, seed, run.config.analysis.n_controls)?)
        })
        .collect()
}

pub fn cmd_analyze(run: &Run) -> Result<(), CliError> {
    let step = run.config.analysis_step();
    let ckpt = ckpt_id(step);
    let collections = run.load_collections(&ckpt)?;
    let model = run.load_model(step)?;
    let n_layers = model.config().n_layers;
    let dir = run.layout.reports(&ckpt);

    let mut reuse = Vec::new();
    let mut comp = Vec::new();
    let mut cdf = Vec::new();
    for coll in &collections {
        let sets = coll.sets();
        reuse.extend(reuse_rows(
            coll.task,
            coll.k,
            &sets,
            &run.config.analysis.p_sweep,
        )?);
        let n = sets.len() as f64;
        let (mut mlp, mut attn) = (0.0, 0.0);
        let mut layers = vec![0.0; n_layers];
        for s in &sets {
            let (m, a) = composition(s);
            mlp += m;
            attn += a;
            for (acc, v) in layers.iter_mut().zip(layer_cdf(s, n_layers)) {
                *acc += v;
            }
        }
        comp.push(vec![
            coll.task.to_string(),
            format!("{}", coll.k),
            sets.len().to_string(),
            format!("{}", mlp / n),
            format!("{}", attn / n),
        ]);
        for (l, v) in layers.iter().enumerate() {
            cdf.push(vec![
                coll.task.to_string(),
                format!("{}", coll.k),
                l.to_string(),
                format!("{}", v / n),
            ]);
        }
    }
    write_csv(&dir.join("reuse.csv"), &run.prov, &REUSE_HEADER, &reuse)?;
    write_csv(
        &dir.join("composition.csv"),
        &run.prov,
        &["task", "K", "n_circuits", "mlp_fraction", "attn_fraction"],
        &comp,
    )?;
    write_csv(
        &dir.join("layer_cdf.csv"),
        &run.prov,
        &["task", "K", "layer", "cdf"],
        &cdf,
    )?;

    let splits = run.splits();
    let evalsets = Run::evalsets(&splits);
    let mut eval = Evaluator::new(&model, &evalsets);
    let keyed: Vec<(TaskId, f64, Vec<&ComponentSet>)> =
        collections.iter().map(|c| (c.task, c.k, c.sets())).collect();
    let reports = necessity_reports(run, &mut eval, &keyed)?;
    let rows: Vec<Vec<String>> = reports.iter().map(NecessityReport::csv_row).collect();
    write_csv(&dir.join("necessity.csv"), &run.prov, &NECESSITY_HEADER, &rows)?;
    for r in &reports {
        println!(
            "{:<10} K={:<5} shared={:>2} baseline={} necessity={} {}",
            r.task.name(),
            r.k,
            r.shared_size,
            fixed4(r.baseline),
            r.necessity_cell(),
            r.flags_cell()
        );
    }
    Ok(())
}

// ------------------------------------------------------------ crosstask

pub fn cmd_crosstask(run: &Run) -> Result<(), CliError> {
    if run.tasks().len() < 2 {
        return Err(CliError::Config(format!(
            "crosstask needs at least 2 tasks, tasks.names lists {}",
            run.tasks().len()
        )));
    }
    let step = run.config.analysis_step();
    let ckpt = ckpt_id(step);
    let collections = run.load_collections(&ckpt)?;
    let model = run.load_model(step)?;
    let splits = run.splits();
    let evalsets = Run::evalsets(&splits);
    let mut eval = Evaluator::new(&model, &evalsets);
    let a = &run.config.analysis;
    let p = a.crosstask_p;

    let (mut overlap, mut decomp, mut drops, mut own_other, mut selective, mut summary) = (
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
    );
    for &k in run.ks() {
        let shared: Vec<(TaskId, ComponentSet)> = collections
            .iter()
            .filter(|c| c.k == k)
            .map(|c| (c.task, shared_set(&c.sets(), p)))
            .collect();
        let m = overlap_matrix(&shared, k);
        for (i, (ta, sa)) in shared.iter().enumerate() {
            for (j, (tb, sb)) in shared.iter().enumerate() {
                overlap.push(vec![
                    format!("{k}"),
                    format!("{p}"),
                    ta.to_string(),
                    tb.to_string(),
                    format!("{}", m.values[i][j]),
                    m.both_empty[i][j].to_string(),
                    format!("{}", chance_jaccard(k)),
                ]);
                if i != j {
                    let (s, ao, bo) = decompose(sa, sb).sizes();
                    decomp.push(vec![
                        format!("{k}"),
                        format!("{p}"),
                        ta.to_string(),
                        tb.to_string(),
                        s.to_string(),
                        ao.to_string(),
                        bo.to_string(),
                        format!("{s}/{ao}/{bo}"),
                    ]);
                }
            }
        }
        if !a.crosstask_k.contains(&k) {
            continue;
        }
        let dm = drop_matrix(&mut eval, &shared)?;
        for (i, ta) in dm.tasks.iter().enumerate() {
            for (j, tb) in dm.tasks.iter().enumerate() {
                drops.push(vec![
                    format!("{k}"),
                    format!("{p}"),
                    ta.to_string(),
                    tb.to_string(),
                    shared[j].1.len().to_string(),
                    format!("{}", dm.baseline[i]),
                    format!("{}", dm.delta[i][j]),
                ]);
            }
        }
        for o in dm.own_other() {
            own_other.push(vec![
                format!("{k}"),
                format!("{p}"),
                o.task.to_string(),
                format!("{}", o.own),
                opt_cell(o.other),
            ]);
        }
        let report = selective_ablation(&mut eval, &shared, run.selective_seed(k))?;
        for r in &report.rows {
            selective.push(vec![
                format!("{k}"),
                format!("{p}"),
                r.a.to_string(),
                r.b.to_string(),
                r.part.name().into(),
                r.size.to_string(),
                format!("{}", r.target_drop),
                opt_cell(r.other_drop),
            ]);
        }
        for (part, target, other) in &report.summary {
            summary.push(vec![
                format!("{k}"),
                format!("{p}"),
                part.name().into(),
                format!("{target}"),
                opt_cell(*other),
            ]);
        }
    }

    let dir = run.layout.crosstask(&ckpt);
    let prov = &run.prov;
    write_csv(
        &dir.join("overlap.csv"),
        prov,
        &["K", "P", "task_a", "task_b", "jaccard", "both_empty", "chance"],
        &overlap,
    )?;
    write_csv(
        &dir.join("decomposition.csv"),
        prov,
        &[
            "K", "P", "task_a", "task_b", "shared", "a_only", "b_only", "sizes",
        ],
        &decomp,
    )?;
    write_csv(
        &dir.join("drop_matrix.csv"),
        prov,
        &[
            "K",
            "P",
            "eval_task",
            "circuit_task",
            "circuit_size",
            "baseline",
            "drop",
        ],
        &drops,
    )?;
    write_csv(
        &dir.join("own_other.csv"),
        prov,
        &["K", "P", "task", "own", "other"],
        &own_other,
    )?;
    write_csv(
        &dir.join("selective.csv"),
        prov,
        &[
            "K",
            "P",
            "task_a",
            "task_b",
            "part",
            "size",
            "target_drop",
            "other_drop",
        ],
        &selective,
    )?;
    write_csv(
        &dir.join("selective_summary.csv"),
        prov,
        &["K", "P", "part", "target_drop", "other_drop"],
        &summary,
    )?;
    for row in &own_other {
        println!("K={} {:<10} own={} other={}", row[0], row[2], row[3], row[4]);
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

const SWEEP_HEADER: [&str; 14] = [
    "checkpoint",
    "step",
    "tokens_seen",
    "task",
    "K",
    "P",
    "reuse",
    "shared_size",
    "baseline",
    "control_acc",
    "ablated_acc",
    "necessity",
    "flags",
    "seed",
];

pub fn cmd_sweep(run: &Run) -> Result<(), CliError> {
    let mut steps = run.config.training.checkpoints.clone();
    steps.sort_unstable();
    steps.dedup();
    if steps.is_empty() {
        return Err(CliError::Config(
            "training.checkpoints is empty; nothing to sweep".into(),
        ));
    }
    let splits = run.splits();
    let evalsets = Run::evalsets(&splits);
    let p = run.config.analysis.necessity_p;
    let mut rows = Vec::new();
    for step in steps {
        let model = run.load_model(step)?;
        let ckpt = ckpt_id(step);
        let mut eval = Evaluator::new(&model, &evalsets);
        for split in &splits {
            let scores = eap_batch(&model, &split.train)?;
            for &k in run.ks() {
                let circuits = run.circuits_from_scores(&scores, k, &ckpt)?;
                let sets: Vec<&ComponentSet> = circuits.iter().map(|c| &c.members).collect();
                let reuse = reuse_at(&sets, p)?;
                let r = necessity_reports(run, &mut eval, &[(split.task, k, sets)])?.remove(0);
                rows.push(vec![
                    ckpt.clone(),
                    step.to_string(),
                    model.checkpoint().tokens_seen.to_string(),
                    split.task.to_string(),
                    format!("{k}"),
                    format!("{p}"),
                    format!("{reuse}"),
                    r.shared_size.to_string(),
                    fixed4(r.baseline),
                    fixed4(r.control_acc),
                    fixed4(r.ablated_acc),
                    r.necessity_cell(),
                    r.flags_cell(),
                    r.seed.to_string(),
                ]);
            }
        }
        println!("swept {ckpt}");
    }
    write_csv(&run.layout.sweep(), &run.prov, &SWEEP_HEADER, &rows)
}

// --------------------------------------------------------------- report

#[derive(Serialize)]
struct Summary<'a> {
    provenance: &'a Provenance,
    /// The configuration without its output directory.
    config: serde_json::Value,
    checkpoint: String,
    final_loss: Option<f64>,
    /// Reuse and necessity at the necessity P, one entry per (task, K).
    within_task: Vec<BTreeMap<String, String>>,
    own_other: Vec<BTreeMap<String, String>>,
    selective_summary: Vec<BTreeMap<String, String>>,
    sweep_rows: usize,
}

fn optional_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, CliError> {
    if path.exists() {
        read_csv(path)
    } else {
        Ok(Vec::new())
    }
}

fn config_echo(config: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(config).expect("config serialises");
    if let Some(m) = v.as_object_mut() {
        m.remove("out");
    }
    v
}

pub fn cmd_report(run: &Run) -> Result<(), CliError> {
    let ckpt = ckpt_id(run.config.analysis_step());
    let dir = run.layout.reports(&ckpt);
    let reuse_path = dir.join("reuse.csv");
    let nec_path = dir.join("necessity.csv");
    if !reuse_path.exists() || !nec_path.exists() {
        return Err(CliError::Config(format!(
            "no reports under {}; run `analyze` first",
            dir.display()
        )));
    }
    let p = format!("{}", run.config.analysis.necessity_p);
    let reuse = read_csv(&reuse_path)?;
    let necessity = read_csv(&nec_path)?;
    let mut within = Vec::new();
    for n in &necessity {
        let r = reuse
            .iter()
            .find(|r| r["task"] == n["task"] && r["K"] == n["K"] && r["P"] == p)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "reuse.csv lacks a row for {} K={} P={p}",
                    n["task"], n["K"]
                ))
            })?;
        let mut row = n.clone();
        row.insert("reuse".into(), r["reuse"].clone());
        row.insert("shared_size".into(), r["shared_size"].clone());
        within.push(row);
    }
    let final_loss = optional_csv(&run.layout.training_curve())?
        .last()
        .and_then(|r| r["loss"].parse().ok());
    let cross = run.layout.crosstask(&ckpt);
    let summary = Summary {
        provenance: &run.prov,
        config: config_echo(&run.config),
        checkpoint: ckpt,
        final_loss,
        within_task: within,
        own_other: optional_csv(&cross.join("own_other.csv"))?,
        selective_summary: optional_csv(&cross.join("selective_summary.csv"))?,
        sweep_rows: optional_csv(&run.layout.sweep())?.len(),
    };
    write_json(&run.layout.summary(), &summary)?;
    println!(
        "{:<10} {:>5} {:>8} {:>8} {:>10}",
        "task", "K", "reuse", "baseline", "necessity"
    );
    for w in &summary.within_task {
        let reuse: f64 = w["reuse"].parse().unwrap_or(f64::NAN);
        println!(
            "{:<10} {:>5} {:>8.3} {:>8} {:>10}",
            w["task"], w["K"], reuse, w["baseline"], w["necessity"]
        );
    }
    println!("wrote {}", run.layout.summary().display());
    Ok(())
}

/// The full pipeline in order.
pub fn pipeline(run: &Run) -> Result<(), CliError> {
    cmd_train(run)?;
    cmd_extract(run)?;
    cmd_analyze(run)?;
    if run.tasks().len() >= 2 {
        cmd_crosstask(run)?;
    }
    cmd_sweep(run)?;
    cmd_report(run)
}
