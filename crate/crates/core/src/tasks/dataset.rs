use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::generators::{generate, TaskExample, TaskId};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numeric::SeedTree;

/// Train and held-out evaluation examples for one task. No `(clean, corrupt)`
/// pair occurs in both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub task: TaskId,
    pub train: Vec<TaskExample>,
    pub eval: Vec<TaskExample>,
}

/// Deterministic splits for `task` under `seeds`. Evaluation examples whose
/// pair also occurs in the train split are redrawn.
pub fn build_splits(task: TaskId, n_train: usize, n_eval: usize, seeds: &SeedTree) -> TaskSplits {
    let node = seeds.child(task.name());
    let train = generate(task, n_train, &mut node.child("train").rng());
    let train_keys: HashSet<_> = train.iter().map(TaskExample::pair_key).collect();
    let mut rng = node.child("eval").rng();
    let mut eval = Vec::with_capacity(n_eval);
    while eval.len() < n_eval {
        let want = n_eval - eval.len();
        for ex in generate(task, want.max(8), &mut rng) {
            if eval.len() < n_eval && !train_keys.contains(&ex.pair_key()) {
                eval.push(ex);
            }
        }
    }
    TaskSplits { task, train, eval }
}

/// One line of a dataset export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task: TaskId,
    pub clean: String,
    pub corrupt: String,
    pub answer: String,
    pub foil: String,
}

impl ExampleRecord {
    pub fn from_example(ex: &TaskExample, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            task: ex.task,
            clean: vocab.decode(&ex.clean)?,
            corrupt: vocab.decode(&ex.corrupt)?,
            answer: vocab.token(ex.answer)?.to_owned(),
            foil: vocab.token(ex.foil)?.to_owned(),
        })
    }

    pub fn to_example(&self, vocab: &Vocab) -> Result<TaskExample> {
        let ex = TaskExample {
            task: self.task,
            clean: vocab.encode(&self.clean)?,
            corrupt: vocab.encode(&self.corrupt)?,
            answer: vocab.id(&self.answer)?,
            foil: vocab.id(&self.foil)?,
        };
        if ex.clean.len() != ex.corrupt.len() || ex.clean == ex.corrupt || ex.answer == ex.foil {
            return Err(Error::Format(format!("invalid example record {self:?}")));
        }
        Ok(ex)
    }
}

/// Writes examples as JSON lines.
pub fn write_jsonl<W: Write>(mut w: W, examples: &[TaskExample], vocab: &Vocab) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from_example(ex, vocab)?)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line)?;
        out.push(rec.to_example(vocab)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_sized() {
        for task in TaskId::ALL {
            let s = build_splits(task, 1000, 500, &SeedTree::new(3));
            assert_eq!(s.train.len(), 1000);
            assert_eq!(s.eval.len(), 500);
            let train: HashSet<_> = s.train.iter().map(TaskExample::pair_key).collect();
            assert!(s.eval.iter().all(|e| !train.contains(&e.pair_key())));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let v = Vocab::builtin();
        let s = build_splits(TaskId::CopyMcqa, 5, 1, &SeedTree::new(1));
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &s.train, v).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("{\"task\":\"copy_mcqa\",\"clean\":"));
        let back = read_jsonl(buf.as_slice(), v).unwrap();
        assert_eq!(back, s.train);
    }
}
