//! Synthetic tasks, the shared vocabulary and the logit-difference metric.

mod dataset;
mod generators;
mod metric;
mod vocab;

pub use dataset::{build_splits, read_jsonl, write_jsonl, ExampleRecord, TaskSplits};
pub use generators::{
    gen_addition, gen_boolean, gen_copy_mcqa, gen_ioi, generate, ioi_names, BoolExpr, BoolOp, TaskExample,
    TaskId, MAX_PROMPT_LEN,
};
pub use metric::{logit_diff, MetricSpec};
pub use vocab::{Vocab, VOCAB_VERSION};
