//! Synthetic classification tasks and their metrics.
//!
//! Token ids: `0` = CLS (prepended to every example), `1` = SEP, `2..6` =
//! the brackets `( ) [ ]`, and `6..vocab` = content tokens for the pair task.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::Rng;
use crate::model::{argmax_cols, Model};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const OPEN_ROUND: u32 = 2;
pub const CLOSE_ROUND: u32 = 3;
pub const OPEN_SQUARE: u32 = 4;
pub const CLOSE_SQUARE: u32 = 5;
pub const FIRST_CONTENT: u32 = 6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Bracket-validity acceptability, imbalanced binary.
    Bracket,
    /// Paraphrase-style pairs; `seq_len` is the length of each segment.
    Pair,
}

fn default_train() -> usize {
    4000
}

fn default_eval() -> usize {
    500
}

fn default_imbalance() -> f64 {
    0.68
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Share of positive examples (bracket task only).
    #[serde(default = "default_imbalance")]
    pub imbalance: f64,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_eval")]
    pub n_val: usize,
    #[serde(default = "default_eval")]
    pub n_test: usize,
}

impl TaskConfig {
    pub fn bracket(seq_len: usize, imbalance: f64) -> Self {
        Self {
            kind: TaskKind::Bracket,
            seq_len,
            imbalance,
            n_train: default_train(),
            n_val: default_eval(),
            n_test: default_eval(),
        }
    }

    pub fn pair(seq_len: usize) -> Self {
        Self {
            kind: TaskKind::Pair,
            seq_len,
            imbalance: default_imbalance(),
            n_train: default_train(),
            n_val: default_eval(),
            n_test: default_eval(),
        }
    }

    /// Longest example this task produces, CLS included.
    pub fn max_len(&self) -> usize {
        match self.kind {
            TaskKind::Bracket => self.seq_len + 1,
            TaskKind::Pair => 2 * self.seq_len + 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Bracket => {
                if self.seq_len == 0 || !self.seq_len.is_multiple_of(2) {
                    return Err(config_err(format!(
                        "bracket seq_len must be even and positive, got {}",
                        self.seq_len
                    )));
                }
                if !(self.imbalance > 0.0 && self.imbalance < 1.0) {
                    return Err(config_err(format!("imbalance must be in (0, 1), got {}", self.imbalance)));
                }
            }
            TaskKind::Pair => {
                if self.seq_len == 0 {
                    return Err(config_err("pair seq_len must be positive"));
                }
            }
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(config_err("every split needs at least one example"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Stack check used by the generator.
pub fn brackets_balanced(tokens: &[u32]) -> bool {
    let mut stack = Vec::new();
    for &t in tokens {
        match t {
            OPEN_ROUND | OPEN_SQUARE => stack.push(t),
            CLOSE_ROUND => {
                if stack.pop() != Some(OPEN_ROUND) {
                    return false;
                }
            }
            CLOSE_SQUARE => {
                if stack.pop() != Some(OPEN_SQUARE) {
                    return false;
                }
            }
            _ => return false,
        }
    }
    stack.is_empty()
}

fn random_balanced(len: usize, rng: &mut Rng) -> Vec<u32> {
    let mut out = Vec::with_capacity(len);
    let mut stack = Vec::new();
    let mut opens_left = len / 2;
    while out.len() < len {
        let can_open = opens_left > 0;
        let can_close = !stack.is_empty();
        if can_open && (!can_close || rng.uniform() < 0.5) {
            let t = if rng.uniform() < 0.5 { OPEN_ROUND } else { OPEN_SQUARE };
            stack.push(t);
            out.push(t);
            opens_left -= 1;
        } else {
            let open = stack.pop().expect("close only when stack is non-empty");
            out.push(open + 1);
        }
    }
    out
}

/// One swap of two differing symbols, or a deletion refilled with a random
/// bracket at the end so the length is kept. Retries until the result is
/// unbalanced.
fn corrupt(valid: &[u32], rng: &mut Rng) -> Vec<u32> {
    loop {
        let mut s = valid.to_vec();
        if rng.uniform() < 0.5 {
            let i = rng.below(s.len());
            let j = rng.below(s.len());
            if s[i] == s[j] {
                continue;
            }
            s.swap(i, j);
        } else {
            s.remove(rng.below(s.len()));
            s.push(OPEN_ROUND + rng.below(4) as u32);
        }
        if !brackets_balanced(&s) {
            return s;
        }
    }
}

fn with_cls(body: &[u32]) -> Vec<u32> {
    let mut t = Vec::with_capacity(body.len() + 1);
    t.push(CLS);
    t.extend_from_slice(body);
    t
}

fn push_unique(seen: &mut HashSet<Vec<u32>>, out: &mut Vec<Example>, tokens: Vec<u32>, label: usize) -> bool {
    if seen.insert(tokens.clone()) {
        out.push(Example { tokens, label });
        true
    } else {
        false
    }
}

const MAX_ATTEMPTS_PER_EXAMPLE: usize = 1000;

/// `n` distinct bracket examples, `round(n · imbalance)` of them balanced.
pub fn gen_bracket_task(n: usize, seq_len: usize, imbalance: f64, rng: &mut Rng) -> Result<Vec<Example>> {
    TaskConfig {
        n_train: n.max(1),
        n_val: 1,
        n_test: 1,
        ..TaskConfig::bracket(seq_len, imbalance)
    }
    .validate()?;
    let n_pos = (n as f64 * imbalance).round() as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > MAX_ATTEMPTS_PER_EXAMPLE * n.max(1) {
            return Err(config_err(format!(
                "cannot draw {n} distinct bracket strings of length {seq_len}"
            )));
        }
        let valid = random_balanced(seq_len, rng);
        if out.len() < n_pos {
            push_unique(&mut seen, &mut out, with_cls(&valid), 1);
        } else {
            push_unique(&mut seen, &mut out, with_cls(&corrupt(&valid, rng)), 0);
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// `n` distinct `CLS s SEP s'` pairs, label 1 iff `s'` is a permutation of
/// `s`. Negatives replace one token of the shuffled copy with an id absent
/// from `s`.
pub fn gen_pair_task(n: usize, seq_len: usize, vocab_size: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    if seq_len == 0 {
        return Err(config_err("pair seq_len must be positive"));
    }
    let n_content = (vocab_size as u32).saturating_sub(FIRST_CONTENT) as usize;
    if n_content <= seq_len {
        return Err(config_err(format!(
            "pair task needs more than {seq_len} content ids, vocab provides {n_content}"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > MAX_ATTEMPTS_PER_EXAMPLE * n.max(1) {
            return Err(config_err("cannot draw enough distinct pairs"));
        }
        let s: Vec<u32> = (0..seq_len)
            .map(|_| FIRST_CONTENT + rng.below(n_content) as u32)
            .collect();
        let mut other = s.clone();
        rng.shuffle(&mut other);
        let label = usize::from(out.len() % 2 == 0);
        if label == 0 {
            let fresh: Vec<u32> = (FIRST_CONTENT..vocab_size as u32).filter(|t| !s.contains(t)).collect();
            let pos = rng.below(seq_len);
            other[pos] = fresh[rng.below(fresh.len())];
        }
        let mut tokens = Vec::with_capacity(2 * seq_len + 2);
        tokens.push(CLS);
        tokens.extend_from_slice(&s);
        tokens.push(SEP);
        tokens.extend_from_slice(&other);
        push_unique(&mut seen, &mut out, tokens, label);
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Generates one pool of distinct examples and partitions it into
/// train/val/test, so the splits never share a sequence.
pub fn gen_splits(task: &TaskConfig, vocab_size: usize, rng: &mut Rng) -> Result<Splits> {
    task.validate()?;
    let total = task.n_train + task.n_val + task.n_test;
    let mut pool = match task.kind {
        TaskKind::Bracket => gen_bracket_task(total, task.seq_len, task.imbalance, rng)?,
        TaskKind::Pair => gen_pair_task(total, task.seq_len, vocab_size, rng)?,
    };
    let test = pool.split_off(task.n_train + task.n_val);
    let val = pool.split_off(task.n_train);
    Ok(Splits { train: pool, val, test })
}

pub fn write_jsonl<W: Write>(w: &mut W, data: &[Example]) -> Result<()> {
    for ex in data {
        serde_json::to_writer(&mut *w, ex).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Binary counts with class 1 as positive.
    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == 1, l == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Matthews correlation coefficient; zero when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    // paired so that swapping (tp, fp) with (tn, fn) is bit-exact
    let denom = ((tp + fp) * (tn + fn_)) * ((tp + fn_) * (tn + fp));
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mcc: f64,
    pub n: usize,
}

/// Eval-mode predictions for every example.
pub fn predict(model: &Model, data: &[Example], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        preds.extend(argmax_cols(&model.logits(&batch)?));
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, data: &[Example], batch_size: usize) -> Result<Metrics> {
    let preds = predict(model, data, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    Ok(Metrics {
        accuracy: accuracy(&preds, &labels)?,
        mcc: mcc(&ConfusionCounts::from_predictions(&preds, &labels)?),
        n: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn br(s: &str) -> Vec<u32> {
        s.chars()
            .map(|c| match c {
                '(' => OPEN_ROUND,
                ')' => CLOSE_ROUND,
                '[' => OPEN_SQUARE,
                ']' => CLOSE_SQUARE,
                _ => panic!("bad char"),
            })
            .collect()
    }

    #[test]
    fn bracket_validity_cases() {
        assert!(brackets_balanced(&br("(()())")));
        assert!(!brackets_balanced(&br("((][))")));
        assert!(!brackets_balanced(&br("([)]")));
        assert!(!brackets_balanced(&br("((")));
    }

    #[test]
    fn bracket_generation() {
        let data = gen_bracket_task(500, 16, 0.68, &mut Rng::new(3)).unwrap();
        assert_eq!(data.len(), 500);
        assert_eq!(data.iter().filter(|e| e.label == 1).count(), 340);
        for e in &data {
            assert_eq!(e.tokens.len(), 17);
            assert_eq!(e.tokens[0], CLS);
            assert_eq!(brackets_balanced(&e.tokens[1..]), e.label == 1);
        }
        assert_eq!(data, gen_bracket_task(500, 16, 0.68, &mut Rng::new(3)).unwrap());
        assert!(gen_bracket_task(10, 15, 0.5, &mut Rng::new(0)).is_err());
        assert!(gen_bracket_task(10, 16, 1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pair_generation() {
        let data = gen_pair_task(200, 6, 32, &mut Rng::new(1)).unwrap();
        for e in &data {
            assert_eq!(e.tokens.len(), 14);
            assert_eq!(e.tokens[7], SEP);
        }
        assert_eq!(data.iter().filter(|e| e.label == 1).count(), 100);
        assert!(gen_pair_task(10, 30, 32, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let mut task = TaskConfig::bracket(12, 0.68);
        task.n_train = 300;
        task.n_val = 50;
        task.n_test = 50;
        let s = gen_splits(&task, 32, &mut Rng::new(5)).unwrap();
        let train: HashSet<_> = s.train.iter().map(|e| &e.tokens).collect();
        assert!(s.val.iter().chain(&s.test).all(|e| !train.contains(&e.tokens)));
        let val: HashSet<_> = s.val.iter().map(|e| &e.tokens).collect();
        assert!(s.test.iter().all(|e| !val.contains(&e.tokens)));
    }

    #[test]
    fn mcc_cases() {
        let perfect = ConfusionCounts { tp: 10, tn: 5, fp: 0, fn_: 0 };
        assert_eq!(mcc(&perfect), 1.0);
        let none = ConfusionCounts { tp: 25, tn: 25, fp: 25, fn_: 25 };
        assert_eq!(mcc(&none), 0.0);
        let all_pos = ConfusionCounts { tp: 10, tn: 0, fp: 5, fn_: 0 };
        assert_eq!(mcc(&all_pos), 0.0);
        let inverted = ConfusionCounts { tp: 0, tn: 0, fp: 3, fn_: 7 };
        assert_eq!(mcc(&inverted), -1.0);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0], &[1, 0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[1, 0]).is_err());
        assert!(ConfusionCounts::from_predictions(&[1], &[]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let data = gen_bracket_task(20, 8, 0.5, &mut Rng::new(2)).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), data);
        assert!(read_jsonl(&b"{\"tokens\": 3}\n"[..]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mcc_bounded_and_symmetric(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
                let c = ConfusionCounts { tp, tn, fp, fn_ };
                let m = mcc(&c);
                prop_assert!((-1.0..=1.0).contains(&m));
                let swapped = ConfusionCounts { tp: tn, tn: tp, fp: fn_, fn_: fp };
                prop_assert_eq!(m, mcc(&swapped));
            }
        }
    }
}
