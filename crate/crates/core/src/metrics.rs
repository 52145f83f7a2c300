//! Token-overlap metrics, the unaffected rule, sparsity and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::FunctionLabel;
use crate::probe::{elbow_select, ImportanceMatrix};

/// BLEU above this marks an output as unaffected.
pub const BLEU_UNAFFECTED: f64 = 0.8;
/// ROUGE-L above this marks an output as unaffected.
pub const ROUGE_UNAFFECTED: f64 = 0.6;

fn ngram_counts<T: Hash + Eq>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for w in xs.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Unsmoothed BLEU with `n` truncated to the candidate length.
pub fn bleu<T: Hash + Eq>(candidate: &[T], reference: &[T], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference".into()));
    }
    if candidate.is_empty() || max_n == 0 {
        return Ok(0.0);
    }
    let top = max_n.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=top {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total = candidate.len() + 1 - n;
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(*refc.get(g).unwrap_or(&0))).sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0).exp();
    Ok(bp * (log_sum / top as f64).exp())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference".into()));
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// True when the intervened output still resembles the baseline.
pub fn unaffected<T: Hash + Eq>(intervened: &[T], baseline: &[T]) -> Result<bool> {
    Ok(bleu(intervened, baseline, 4)? > BLEU_UNAFFECTED || rouge_l(intervened, baseline)? > ROUGE_UNAFFECTED)
}

/// Per function, the fraction of heads whose importance exceeds `threshold`.
pub fn sparsity_stat(imp: &ImportanceMatrix, threshold: f64) -> Result<Vec<f64>> {
    if !(threshold >= 0.0) {
        return Err(Error::Precondition("threshold must be >= 0".into()));
    }
    let n = imp.heads() as f64;
    Ok((0..imp.classes())
        .map(|c| imp.row(c).iter().filter(|&&v| v > threshold).count() as f64 / n)
        .collect())
}

/// Same statistic with a per-row threshold of `rel * max(row)`.
pub fn sparsity_relative(imp: &ImportanceMatrix, rel: f64) -> Vec<f64> {
    let n = imp.heads() as f64;
    (0..imp.classes())
        .map(|c| {
            let row = imp.row(c);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().filter(|&&v| v > rel * mx).count() as f64 / n
        })
        .collect()
}

/// Elbow-selected head count after minus before, per function.
pub fn head_count_delta(
    before: &ImportanceMatrix,
    after: &ImportanceMatrix,
    functions: &[FunctionLabel],
) -> Result<BTreeMap<FunctionLabel, i64>> {
    if before.classes() != after.classes() || before.heads() != after.heads() {
        return Err(Error::Dimension("importance matrices differ in extent".into()));
    }
    let mut out = BTreeMap::new();
    for &f in functions {
        let b = elbow_select(before.row(f.index()))?.len() as i64;
        let a = elbow_select(after.row(f.index()))?.len() as i64;
        out.insert(f, a - b);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FunctionScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub plan_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
}

/// Exact-match accuracy per function and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_function: BTreeMap<String, FunctionScore>,
    pub n: usize,
    pub correct: usize,
    pub overall: f64,
    /// Fraction of outputs judged affected relative to a baseline run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affected_rate: Option<f64>,
    pub meta: RunMeta,
}

/// Outcome of one evaluated subquestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub example_id: u64,
    pub step: usize,
    pub functions: Vec<FunctionLabel>,
    pub generated: Vec<String>,
    pub correct: bool,
}

/// Accuracy on subquestions labelled `f` but not `excluded`; `None` when there are none.
///
/// Used for selectivity checks: a step labelled with both the ablated
/// function and `f` depends on the ablated heads by construction.
pub fn accuracy_excluding(outcomes: &[Outcome], f: FunctionLabel, excluded: FunctionLabel) -> Option<f64> {
    let scoped: Vec<&Outcome> =
        outcomes.iter().filter(|o| o.functions.contains(&f) && !o.functions.contains(&excluded)).collect();
    if scoped.is_empty() {
        return None;
    }
    Some(scoped.iter().filter(|o| o.correct).count() as f64 / scoped.len() as f64)
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[Outcome], meta: RunMeta) -> EvalReport {
        let mut per: BTreeMap<String, FunctionScore> = BTreeMap::new();
        for f in FunctionLabel::ALL {
            per.insert(f.name().to_string(), FunctionScore::default());
        }
        let mut correct = 0;
        for o in outcomes {
            correct += o.correct as usize;
            for f in &o.functions {
                let e = per.get_mut(f.name()).expect("label");
                e.n += 1;
                e.correct += o.correct as usize;
            }
        }
        for v in per.values_mut() {
            v.accuracy = if v.n == 0 { 0.0 } else { v.correct as f64 / v.n as f64 };
        }
        let n = outcomes.len();
        EvalReport {
            per_function: per,
            n,
            correct,
            overall: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            affected_rate: None,
            meta,
        }
    }

    /// Sets the affected rate by pairing outcomes with a baseline run.
    pub fn with_affected(mut self, outcomes: &[Outcome], baseline: &[Outcome]) -> Result<EvalReport> {
        if outcomes.len() != baseline.len() {
            return Err(Error::Dimension("outcome lists differ in length".into()));
        }
        if outcomes.is_empty() {
            self.affected_rate = Some(0.0);
            return Ok(self);
        }
        let mut affected = 0;
        for (o, b) in outcomes.iter().zip(baseline) {
            if b.generated.is_empty() || !unaffected(&o.generated, &b.generated)? {
                affected += 1;
            }
        }
        self.affected_rate = Some(affected as f64 / outcomes.len() as f64);
        Ok(self)
    }

    pub fn accuracy(&self, f: FunctionLabel) -> f64 {
        self.per_function.get(f.name()).map(|s| s.accuracy).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
