//! Clean/corrupt prompt pairs for the four synthetic tasks.
//!
//! Templates (version `v1`, word-level, every prompt starts with `<bos>`):
//!
//! | task        | clean prompt                                                    | answer |
//! |-------------|-----------------------------------------------------------------|--------|
//! | `addition`  | `A + B =`                                                       | `A+B`  |
//! | `boolean`   | `[not] L op [not] L ... =` with 2–4 literals, `op ∈ {and, or}`  | value  |
//! | `ioi`       | `N1 and N2 went to the PLACE . N1 gave the OBJECT to`           | `N2`   |
//! | `copy_mcqa` | `the O is C . what color is the O ? A c B c C c D c answer :`      | label  |
//!
//! Corruptions: addition pairs each problem with another problem from the same
//! batch that has a different sum; boolean flips one literal, keeping only
//! flips that change the value; IOI replaces the second `N1` by `N2`; MCQA
//! permutes the options so the correct label moves.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Addition,
    Boolean,
    Ioi,
    CopyMcqa,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Addition, TaskId::Boolean, TaskId::Ioi, TaskId::CopyMcqa];

    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Addition => "addition",
            TaskId::Boolean => "boolean",
            TaskId::Ioi => "ioi",
            TaskId::CopyMcqa => "copy_mcqa",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown task {s:?}")))
    }
}

/// One clean/corrupt prompt pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskExample {
    pub task: TaskId,
    pub clean: Vec<usize>,
    pub corrupt: Vec<usize>,
    /// Correct next token for `clean`.
    pub answer: usize,
    /// Correct next token for `corrupt`; the contrast token on the clean side.
    pub foil: usize,
}

impl TaskExample {
    fn checked(task: TaskId, clean: Vec<usize>, corrupt: Vec<usize>, answer: usize, foil: usize) -> Self {
        debug_assert_eq!(clean.len(), corrupt.len());
        debug_assert_ne!(clean, corrupt);
        debug_assert_ne!(answer, foil);
        Self {
            task,
            clean,
            corrupt,
            answer,
            foil,
        }
    }

    /// Key identifying the pair for split disjointness.
    pub fn pair_key(&self) -> (Vec<usize>, Vec<usize>) {
        (self.clean.clone(), self.corrupt.clone())
    }
}

fn encode(words: &[&str]) -> Vec<usize> {
    let v = Vocab::builtin();
    std::iter::once("<bos>")
        .chain(words.iter().copied())
        .map(|w| v.must(w))
        .collect()
}

const NAMES: [&str; 12] = [
    "Alice", "Bob", "Carol", "Dave", "Eve", "Frank", "Grace", "Heidi", "Ivan", "Judy", "Mallory", "Oscar",
];
const PLACES: [&str; 6] = ["store", "park", "school", "beach", "market", "library"];
const OBJECTS: [&str; 6] = ["book", "ball", "ring", "key", "drink", "letter"];
const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown",
];
const THINGS: [&str; 8] = ["cup", "box", "hat", "car", "pen", "bag", "lamp", "shoe"];
const LABELS: [&str; 4] = ["A", "B", "C", "D"];
const DIGITS: [&str; 19] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15", "16", "17", "18",
];

/// Names available to the IOI generator.
pub fn ioi_names() -> &'static [&'static str] {
    &NAMES
}

fn addition_prompt(a: usize, b: usize) -> Vec<usize> {
    encode(&[DIGITS[a], "+", DIGITS[b], "="])
}

/// Single-digit addition. Each problem's corruption is another problem of
/// the same batch with a different sum.
pub fn gen_addition<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<TaskExample> {
    let mut pool: Vec<(usize, usize)> = (0..n.max(1))
        .map(|_| (rng.random_range(0..10), rng.random_range(0..10)))
        .collect();
    let v = Vocab::builtin();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = pool[i];
        let partner = loop {
            let mut found = None;
            for _ in 0..64 {
                if pool.len() < 2 {
                    break;
                }
                let j = rng.random_range(0..pool.len() - 1);
                let j = if j >= i { j + 1 } else { j };
                if pool[j].0 + pool[j].1 != a + b {
                    found = Some(pool[j]);
                    break;
                }
            }
            match found {
                Some(p) => break p,
                None => pool.push((rng.random_range(0..10), rng.random_range(0..10))),
            }
        };
        out.push(TaskExample::checked(
            TaskId::Addition,
            addition_prompt(a, b),
            addition_prompt(partner.0, partner.1),
            v.must(DIGITS[a + b]),
            v.must(DIGITS[partner.0 + partner.1]),
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoolOp {
    And,
    Or,
}

/// Flat boolean expression `[not] l0 op0 [not] l1 op1 ...` with the usual
/// precedence `not > and > or`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolExpr {
    pub literals: Vec<bool>,
    pub negated: Vec<bool>,
    pub ops: Vec<BoolOp>,
}

impl BoolExpr {
    pub fn eval(&self) -> bool {
        let mut any = false;
        let mut conj = true;
        for (i, (&lit, &neg)) in self.literals.iter().zip(&self.negated).enumerate() {
            conj &= lit != neg;
            if i == self.ops.len() || self.ops[i] == BoolOp::Or {
                any |= conj;
                conj = true;
            }
        }
        any
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = Vec::new();
        for (i, (&lit, &neg)) in self.literals.iter().zip(&self.negated).enumerate() {
            if neg {
                w.push("not");
            }
            w.push(if lit { "true" } else { "false" });
            if let Some(op) = self.ops.get(i) {
                w.push(match op {
                    BoolOp::And => "and",
                    BoolOp::Or => "or",
                });
            }
        }
        w
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(2..=4);
        Self {
            literals: (0..n).map(|_| rng.random_bool(0.5)).collect(),
            negated: (0..n).map(|_| rng.random_bool(0.3)).collect(),
            ops: (0..n - 1)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        BoolOp::And
                    } else {
                        BoolOp::Or
                    }
                })
                .collect(),
        }
    }
}

fn bool_word(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// Boolean expressions over 2–4 literals; the corruption flips one literal
/// and only value-changing flips are kept.
pub fn gen_boolean<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<TaskExample> {
    let v = Vocab::builtin();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let expr = BoolExpr::random(rng);
        let flip = rng.random_range(0..expr.literals.len());
        let mut flipped = expr.clone();
        flipped.literals[flip] = !flipped.literals[flip];
        let (a, b) = (expr.eval(), flipped.eval());
        if a == b {
            continue;
        }
        let mut cw = expr.words();
        cw.push("=");
        let mut fw = flipped.words();
        fw.push("=");
        out.push(TaskExample::checked(
            TaskId::Boolean,
            encode(&cw),
            encode(&fw),
            v.must(bool_word(a)),
            v.must(bool_word(b)),
        ));
    }
    out
}

fn ioi_prompt(n1: &str, n2: &str, place: &str, s2: &str, object: &str) -> Vec<usize> {
    encode(&[
        n1, "and", n2, "went", "to", "the", place, ".", s2, "gave", "the", object, "to",
    ])
}

/// Indirect-object identification; the corruption swaps the second subject
/// mention to the indirect object so the answer becomes the first name.
pub fn gen_ioi<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<TaskExample> {
    let v = Vocab::builtin();
    (0..n)
        .map(|_| {
            let i = rng.random_range(0..NAMES.len());
            let j = (i + rng.random_range(1..NAMES.len())) % NAMES.len();
            let (subject, io) = (NAMES[i], NAMES[j]);
            let place = PLACES[rng.random_range(0..PLACES.len())];
            let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
            TaskExample::checked(
                TaskId::Ioi,
                ioi_prompt(subject, io, place, subject, object),
                ioi_prompt(subject, io, place, io, object),
                v.must(io),
                v.must(subject),
            )
        })
        .collect()
}

fn mcqa_prompt(thing: &str, color: &str, options: &[&str; 4]) -> Vec<usize> {
    let mut w = vec![
        "the", thing, "is", color, ".", "what", "color", "is", "the", thing, "?",
    ];
    for (label, option) in LABELS.iter().zip(options) {
        w.push(label);
        w.push(option);
    }
    w.extend(["answer", ":"]);
    encode(&w)
}

/// An object with its colour, a question about it, and four labelled colour
/// options. The corruption permutes the options so the correct label changes.
pub fn gen_copy_mcqa<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<TaskExample> {
    let v = Vocab::builtin();
    (0..n)
        .map(|_| {
            let thing = *THINGS.choose(rng).unwrap();
            let mut options: [&str; 4] = COLORS
                .choose_multiple(rng, 4)
                .copied()
                .collect::<Vec<_>>()
                .try_into()
                .unwrap();
            let correct = options[0];
            options.shuffle(rng);
            let slot = options.iter().position(|&c| c == correct).unwrap();
            let mut permuted = options;
            let moved = loop {
                permuted.shuffle(rng);
                let s = permuted.iter().position(|&c| c == correct).unwrap();
                if s != slot {
                    break s;
                }
            };
            TaskExample::checked(
                TaskId::CopyMcqa,
                mcqa_prompt(thing, correct, &options),
                mcqa_prompt(thing, correct, &permuted),
                v.must(LABELS[slot]),
                v.must(LABELS[moved]),
            )
        })
        .collect()
}

/// Dispatches to the generator for `task`.
pub fn generate<R: Rng + ?Sized>(task: TaskId, n: usize, rng: &mut R) -> Vec<TaskExample> {
    match task {
        TaskId::Addition => gen_addition(n, rng),
        TaskId::Boolean => gen_boolean(n, rng),
        TaskId::Ioi => gen_ioi(n, rng),
        TaskId::CopyMcqa => gen_copy_mcqa(n, rng),
    }
}

/// Longest prompt any generator can emit, in tokens.
pub const MAX_PROMPT_LEN: usize = 22;
