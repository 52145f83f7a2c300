//! Ablation and steering plans, random-head controls and plan evaluation.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{render_example, MainQa};
use crate::error::{Error, Result};
use crate::function::{labels_of, FunctionLabel};
use crate::hashing::hash_json;
use crate::metrics::{EvalReport, Outcome, RunMeta};
use crate::model::{Hook, HookSet, Model};
use crate::par;
use crate::trace::{Captured, MAX_NEW_TOKENS};

/// Mask scale used by default.
pub const DEFAULT_EPSILON: f64 = 0.001;
/// Steering strength used by default.
pub const DEFAULT_ALPHA: f64 = 0.1;

pub type Head = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub heads: Vec<Head>,
    pub epsilon: f64,
}

impl AblationPlan {
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

fn check_head(model: &Model, (layer, head): Head) -> Result<()> {
    let c = &model.config;
    if layer >= c.num_layers || head >= c.heads_per_layer {
        return Err(Error::InvalidHead { layer, head });
    }
    Ok(())
}

/// Scale `ε` on every listed head.
pub fn ablation_hooks(model: &Model, plan: &AblationPlan) -> Result<HookSet> {
    if !(plan.epsilon > 0.0 && plan.epsilon <= 1.0) {
        return Err(Error::Precondition(format!("epsilon {} outside (0, 1]", plan.epsilon)));
    }
    let mut hooks = HookSet::new();
    for &h in &plan.heads {
        check_head(model, h)?;
        hooks.insert(h.0, h.1, Hook::scale(plan.epsilon));
    }
    Ok(hooks)
}

/// `count` heads drawn uniformly without replacement from those not in
/// `exclude`, returned in (layer, head) order.
pub fn random_heads(layers: usize, heads: usize, count: usize, seed: u64, exclude: &[Head]) -> Result<Vec<Head>> {
    let mut pool: Vec<Head> = (0..layers)
        .flat_map(|l| (0..heads).map(move |m| (l, m)))
        .filter(|h| !exclude.contains(h))
        .collect();
    if count > pool.len() {
        return Err(Error::CountTooLarge { requested: count, available: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = pool.partial_shuffle(&mut rng, count);
    let mut out = picked.to_vec();
    out.sort_unstable();
    Ok(out)
}

fn mean(xs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; xs[0].len()];
    for x in xs {
        for (a, v) in m.iter_mut().zip(x) {
            *a += v;
        }
    }
    let n = xs.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Mean of the correct activations minus mean of the incorrect ones.
pub fn steering_direction(correct: &[Vec<f64>], incorrect: &[Vec<f64>]) -> Result<Vec<f64>> {
    if correct.is_empty() {
        return Err(Error::InsufficientData { side: "correct" });
    }
    if incorrect.is_empty() {
        return Err(Error::InsufficientData { side: "incorrect" });
    }
    let d = correct[0].len();
    if correct.iter().chain(incorrect).any(|x| x.len() != d) {
        return Err(Error::Dimension("activation vectors differ in length".into()));
    }
    Ok(mean(correct).iter().zip(mean(incorrect)).map(|(a, b)| a - b).collect())
}

/// Population std of the projections onto `dir / |dir|`; 0 for a zero direction.
pub fn sigma_along(acts: &[Vec<f64>], dir: &[f64]) -> Result<f64> {
    if acts.is_empty() {
        return Err(Error::Empty("activations".into()));
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("zero steering direction; sigma set to 0");
        return Ok(0.0);
    }
    let proj: Vec<f64> = acts.iter().map(|a| a.iter().zip(dir).map(|(x, d)| x * d).sum::<f64>() / norm).collect();
    let mu = proj.iter().sum::<f64>() / proj.len() as f64;
    let var = proj.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / proj.len() as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringDirection {
    pub layer: usize,
    pub head: usize,
    pub dir: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub function: FunctionLabel,
    pub directions: Vec<SteeringDirection>,
    pub alpha: f64,
}

impl SteeringPlan {
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn with_alpha(&self, alpha: f64) -> SteeringPlan {
        SteeringPlan { alpha, ..self.clone() }
    }
}

/// Shift `α·σ·dir` on every head of the plan, at every position.
pub fn steering_hooks(model: &Model, plan: &SteeringPlan) -> Result<HookSet> {
    let mut hooks = HookSet::new();
    for s in &plan.directions {
        check_head(model, (s.layer, s.head))?;
        if s.dir.len() != model.config.embed_dim || !(s.sigma >= 0.0) {
            return Err(Error::Dimension(format!("direction for ({}, {}) is malformed", s.layer, s.head)));
        }
        let k = plan.alpha * s.sigma;
        hooks.insert(s.layer, s.head, Hook::shift(s.dir.iter().map(|v| k * v).collect()));
    }
    Ok(hooks)
}

/// A head counts as engaged on a sample when its own activation norm is at
/// least this fraction of its largest norm over the function's samples.
pub const ENGAGED_FRACTION: f64 = 0.1;

/// Directions for `heads`, from captured subquestions carrying `function`:
/// correct-minus-incorrect mean of each head's own activation feature over
/// the samples on which the head is engaged. Heads lacking a correct or an
/// incorrect engaged sample are skipped with a warning.
pub fn build_steering_plan(
    captured: &[Captured],
    d: usize,
    heads_per_layer: usize,
    function: FunctionLabel,
    heads: &[Head],
    alpha: f64,
) -> Result<SteeringPlan> {
    let scoped: Vec<&Captured> = captured.iter().filter(|c| c.sample.labels & function.bit() != 0).collect();
    if scoped.is_empty() {
        return Err(Error::InsufficientData { side: "correct" });
    }
    let mut directions = Vec::with_capacity(heads.len());
    for &(l, m) in heads {
        let acts: Vec<(bool, Vec<f64>)> = scoped
            .iter()
            .map(|c| (c.correct, c.sample.own(heads_per_layer, d, l, m).iter().map(|&v| v as f64).collect()))
            .collect();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let top = acts.iter().map(|(_, x)| norm(x)).fold(0.0, f64::max);
        let engaged: Vec<&(bool, Vec<f64>)> =
            acts.iter().filter(|(_, x)| top > 0.0 && norm(x) >= ENGAGED_FRACTION * top).collect();
        let good: Vec<Vec<f64>> = engaged.iter().filter(|a| a.0).map(|a| a.1.clone()).collect();
        let bad: Vec<Vec<f64>> = engaged.iter().filter(|a| !a.0).map(|a| a.1.clone()).collect();
        let dir = match steering_direction(&good, &bad) {
            Ok(dir) => dir,
            Err(Error::InsufficientData { side }) => {
                log::warn!("head ({l}, {m}) has no engaged {side} samples for {}; skipped", function.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        let all: Vec<Vec<f64>> = good.into_iter().chain(bad).collect();
        let sigma = sigma_along(&all, &dir)?;
        directions.push(SteeringDirection { layer: l, head: m, dir, sigma });
    }
    Ok(SteeringPlan { function, directions, alpha })
}

/// Greedy generation for every subquestion of `corpus`, in (example, step) order.
pub fn evaluate_outcomes(model: &Model, corpus: &[MainQa], hooks: &HookSet) -> Result<Vec<Outcome>> {
    let jobs: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(i, m)| (0..m.subqafs.len()).map(move |k| (i, k)))
        .collect();
    par::map(&jobs, |&(i, k)| -> Result<Outcome> {
        let main = &corpus[i];
        let sub = &main.subqafs[k];
        let out = model.generate(&render_example(main, k)?, hooks, MAX_NEW_TOKENS)?;
        Ok(Outcome {
            example_id: main.id,
            step: sub.step,
            functions: sub.functions.clone(),
            correct: out == sub.gold_generation(),
            generated: out.iter().map(|t| t.to_string()).collect(),
        })
    })
    .into_iter()
    .collect()
}

/// Per-function exact-match report, with the affected rate when a baseline is given.
pub fn evaluate_with_plan(
    model: &Model,
    corpus: &[MainQa],
    hooks: &HookSet,
    baseline: Option<&[Outcome]>,
    meta: RunMeta,
) -> Result<(EvalReport, Vec<Outcome>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let outcomes = evaluate_outcomes(model, corpus, hooks)?;
    let mut report = EvalReport::from_outcomes(&outcomes, meta);
    if let Some(b) = baseline {
        report = report.with_affected(&outcomes, b)?;
    }
    Ok((report, outcomes))
}

/// One row of a masked-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub cognitive: f64,
    /// Mean over seeds.
    pub random: f64,
}

/// Accuracy on `function` after masking the top `k` heads of `ranking`
/// versus `k` random heads drawn outside `exclude`, for each `k` in `ks`.
/// When fewer than `k` heads lie outside `exclude` the draw uses all heads.
#[allow(clippy::too_many_arguments)]
pub fn masked_ratio_sweep(
    model: &Model,
    corpus: &[MainQa],
    function: FunctionLabel,
    ranking: &[Head],
    exclude: &[Head],
    ks: &[usize],
    epsilon: f64,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let c = &model.config;
    let acc = |heads: Vec<Head>| -> Result<f64> {
        let hooks = ablation_hooks(model, &AblationPlan { heads, epsilon })?;
        Ok(EvalReport::from_outcomes(&evaluate_outcomes(model, corpus, &hooks)?, RunMeta::default()).accuracy(function))
    };
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k > ranking.len() {
            return Err(Error::CountTooLarge { requested: k, available: ranking.len() });
        }
        let cognitive = acc(ranking[..k].to_vec())?;
        let mut random = 0.0;
        for &s in seeds {
            let ex = if k + exclude.len() <= c.num_heads() { exclude } else { &[] };
            random += acc(random_heads(c.num_layers, c.heads_per_layer, k, s, ex)?)?;
        }
        rows.push(SweepRow { k, cognitive, random: random / seeds.len().max(1) as f64 });
    }
    Ok(rows)
}

/// Functions whose subquestions appear in `outcomes`.
pub fn functions_present(outcomes: &[Outcome]) -> Vec<FunctionLabel> {
    let mask = outcomes.iter().fold(0u8, |m, o| o.functions.iter().fold(m, |m, f| m | f.bit()));
    labels_of(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_examples() {
        let d = steering_direction(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(d, vec![1.0, 0.0]);
        assert!(matches!(steering_direction(&[vec![1.0]], &[]), Err(Error::InsufficientData { side: "incorrect" })));
        assert!(matches!(steering_direction(&[], &[vec![1.0]]), Err(Error::InsufficientData { side: "correct" })));
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_along(&[vec![-1.0, 5.0], vec![1.0, 5.0]], &[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(sigma_along(&[vec![3.0], vec![3.0]], &[1.0]).unwrap(), 0.0);
        assert_eq!(sigma_along(&[vec![3.0], vec![4.0]], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn random_heads_bounds() {
        assert!(random_heads(4, 8, 0, 1, &[]).unwrap().is_empty());
        assert_eq!(random_heads(4, 8, 32, 1, &[]).unwrap().len(), 32);
        assert!(matches!(random_heads(4, 8, 31, 1, &[(0, 0), (0, 1)]), Err(Error::CountTooLarge { .. })));
        assert_eq!(random_heads(4, 8, 5, 9, &[]).unwrap(), random_heads(4, 8, 5, 9, &[]).unwrap());
    }
}
