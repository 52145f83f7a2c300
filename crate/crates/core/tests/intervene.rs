use headprobe::corpus::{generate_corpus, split, CorpusConfig, MainQa};
use headprobe::intervene::*;
use headprobe::metrics::{EvalReport, RunMeta};
use headprobe::model::{build_model, default_registry, detune, HookSet, Model, ModelConfig, DEFAULT_DETUNE};
use headprobe::trace::{capture_corpus, TokenSelect};
use headprobe::{Error, FunctionLabel};
use proptest::prelude::*;

fn planted() -> Model {
    build_model(ModelConfig::default(), &default_registry()).unwrap()
}

fn corpus(n: usize) -> Vec<MainQa> {
    generate_corpus(&CorpusConfig { main_questions: n, seed: 2, ..Default::default() }).unwrap()
}

fn report(model: &Model, c: &[MainQa], hooks: &HookSet) -> EvalReport {
    evaluate_with_plan(model, c, hooks, None, RunMeta::default()).unwrap().0
}

fn inert_heads(model: &Model) -> Vec<Head> {
    let planted: Vec<Head> = model.planted.iter().map(|s| (s.layer, s.head)).collect();
    (0..4).flat_map(|l| (0..8).map(move |m| (l, m))).filter(|h| !planted.contains(h)).collect()
}

#[test]
fn random_heads_golden() {
    assert_eq!(random_heads(4, 8, 4, 3, &[]).unwrap(), vec![(0, 7), (1, 1), (2, 2), (3, 5)]);
    let all = random_heads(4, 8, 32, 0, &[]).unwrap();
    assert_eq!(all, (0..4).flat_map(|l| (0..8).map(move |m| (l, m))).collect::<Vec<_>>());
    let ex = [(0, 7), (1, 1)];
    assert!(random_heads(4, 8, 30, 5, &ex).unwrap().iter().all(|h| !ex.contains(h)));
}

#[test]
fn direction_and_sigma_examples() {
    let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    assert_eq!(steering_direction(&a, &a).unwrap(), vec![0.0, 0.0]);
    assert_eq!(steering_direction(&[vec![5.0, -1.0]], &[vec![2.0, 1.0]]).unwrap(), vec![3.0, -2.0]);
    assert!(matches!(steering_direction(&[vec![1.0]], &[vec![1.0, 2.0]]), Err(Error::Dimension(_))));
    assert_eq!(sigma_along(&[vec![0.0, -1.0], vec![0.0, 1.0]], &[0.0, 3.0]).unwrap(), 1.0);
}

#[test]
fn identity_plans_are_bit_identical() {
    let model = planted();
    let (_, test) = split(&corpus(150));
    let base = evaluate_outcomes(&model, &test, &HookSet::new()).unwrap();
    let heads = model.heads_for(FunctionLabel::SpatialPerception);
    let one = ablation_hooks(&model, &AblationPlan { heads: heads.clone(), epsilon: 1.0 }).unwrap();
    assert_eq!(evaluate_outcomes(&model, &test, &one).unwrap(), base);
    let none = ablation_hooks(&model, &AblationPlan { heads: vec![], epsilon: 0.001 }).unwrap();
    assert_eq!(evaluate_outcomes(&model, &test, &none).unwrap(), base);
    let plan = SteeringPlan {
        function: FunctionLabel::SpatialPerception,
        directions: heads.iter().map(|&(l, m)| SteeringDirection { layer: l, head: m, dir: vec![1.0; 256], sigma: 2.0 }).collect(),
        alpha: 0.0,
    };
    let st = steering_hooks(&model, &plan).unwrap();
    assert_eq!(evaluate_outcomes(&model, &test, &st).unwrap(), base);
    let (r, _) = evaluate_with_plan(&model, &test, &HookSet::new(), Some(&base), RunMeta::default()).unwrap();
    assert_eq!(r.affected_rate, Some(0.0));
}

#[test]
fn zero_direction_is_neutral() {
    let model = planted();
    let (_, test) = split(&corpus(80));
    let plan = SteeringPlan {
        function: FunctionLabel::SpatialPerception,
        directions: vec![SteeringDirection { layer: 0, head: 2, dir: vec![0.0; 256], sigma: 0.0 }],
        alpha: 0.5,
    };
    let hooks = steering_hooks(&model, &plan).unwrap();
    assert_eq!(evaluate_outcomes(&model, &test, &hooks).unwrap(), evaluate_outcomes(&model, &test, &HookSet::new()).unwrap());
}

#[test]
fn masking_every_planted_head_breaks_everything() {
    let model = planted();
    let (_, test) = split(&corpus(150));
    let heads: Vec<Head> = model.planted.iter().map(|s| (s.layer, s.head)).collect();
    let hooks = ablation_hooks(&model, &AblationPlan { heads, epsilon: 0.001 }).unwrap();
    assert!(report(&model, &test, &hooks).overall < 0.05);
}

#[test]
fn masking_inert_heads_changes_nothing() {
    let model = planted();
    let (_, test) = split(&corpus(150));
    let heads = inert_heads(&model)[..10].to_vec();
    let hooks = ablation_hooks(&model, &AblationPlan { heads, epsilon: 0.001 }).unwrap();
    assert_eq!(report(&model, &test, &hooks).overall, 1.0);
}

#[test]
fn spatial_mask_spares_low_level() {
    let model = planted();
    let (_, test) = split(&corpus(300));
    let heads = model.heads_for(FunctionLabel::SpatialPerception);
    let hooks = ablation_hooks(&model, &AblationPlan { heads, epsilon: 0.001 }).unwrap();
    let r = report(&model, &test, &hooks);
    assert_eq!(r.accuracy(FunctionLabel::SpatialPerception), 0.0);
    assert_eq!(r.accuracy(FunctionLabel::LowLevelVisual), 1.0);
}

#[test]
fn ablation_is_monotone_in_epsilon() {
    let model = planted();
    let c = corpus(80);
    assert!(c.iter().map(|m| m.subqafs.len()).sum::<usize>() >= 200);
    for f in [FunctionLabel::SpatialPerception, FunctionLabel::HighLevelVisual, FunctionLabel::MathReasoning] {
        let heads = model.heads_for(f);
        let mut prev = -1.0;
        for eps in [0.001, 0.01, 0.03, 0.1, 0.2, 0.4, 0.7, 1.0] {
            let hooks = ablation_hooks(&model, &AblationPlan { heads: heads.clone(), epsilon: eps }).unwrap();
            let acc = report(&model, &c, &hooks).overall;
            assert!(acc + 0.02 >= prev, "{f} eps {eps}: {acc} < {prev}");
            prev = acc;
        }
    }
}

#[test]
fn bad_plans_are_rejected() {
    let model = planted();
    for eps in [0.0, 1.5, f64::NAN] {
        assert!(matches!(ablation_hooks(&model, &AblationPlan { heads: vec![], epsilon: eps }), Err(Error::Precondition(_))));
    }
    assert!(matches!(
        ablation_hooks(&model, &AblationPlan { heads: vec![(4, 0)], epsilon: 0.5 }),
        Err(Error::InvalidHead { layer: 4, head: 0 })
    ));
    let plan = SteeringPlan {
        function: FunctionLabel::SpatialPerception,
        directions: vec![SteeringDirection { layer: 0, head: 2, dir: vec![1.0; 3], sigma: 1.0 }],
        alpha: 0.1,
    };
    assert!(matches!(steering_hooks(&model, &plan), Err(Error::Dimension(_))));
    assert!(matches!(evaluate_with_plan(&model, &[], &HookSet::new(), None, RunMeta::default()), Err(Error::Empty(_))));
}

#[test]
fn steering_helps_the_detuned_model() {
    let model = build_model(ModelConfig::default(), &detune(&default_registry(), DEFAULT_DETUNE)).unwrap();
    let c = corpus(400);
    let (train, test) = split(&c);
    let s = FunctionLabel::SpatialPerception;
    let base = report(&model, &test, &HookSet::new()).accuracy(s);
    assert!(base > 0.0 && base < 1.0, "{base}");
    let caps = capture_corpus(&model, &train, &HookSet::new(), TokenSelect::TopK(3)).unwrap();
    let plan = build_steering_plan(&caps, 256, 8, s, &model.heads_for(s), DEFAULT_ALPHA).unwrap();
    assert!(!plan.directions.is_empty());
    let up = report(&model, &test, &steering_hooks(&model, &plan).unwrap()).accuracy(s);
    let down = report(&model, &test, &steering_hooks(&model, &plan.with_alpha(-0.1)).unwrap()).accuracy(s);
    assert!(up > base, "{base} -> {up}");
    assert!(down <= base, "{base} -> {down}");
}

#[test]
fn sweep_endpoints() {
    let model = planted();
    let (_, test) = split(&corpus(100));
    let s = FunctionLabel::SpatialPerception;
    let mut ranking = model.heads_for(s);
    ranking.extend(inert_heads(&model));
    for h in model.planted.iter().map(|p| (p.layer, p.head)) {
        if !ranking.contains(&h) {
            ranking.push(h);
        }
    }
    assert_eq!(ranking.len(), 32);
    let rows = masked_ratio_sweep(&model, &test, s, &ranking, &ranking[..3], &[0, 3, 32], 0.001, &[0, 1]).unwrap();
    assert_eq!((rows[0].cognitive, rows[0].random), (1.0, 1.0));
    assert_eq!(rows[1].cognitive, 0.0);
    assert_eq!(rows[2].cognitive, rows[2].random);
    assert!(matches!(
        masked_ratio_sweep(&model, &test, s, &ranking[..2], &[], &[3], 0.001, &[0]),
        Err(Error::CountTooLarge { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn random_heads_are_distinct_and_deterministic(count in 0usize..=28, seed in any::<u64>(), ex in prop::collection::vec((0usize..4, 0usize..8), 0..4)) {
        let a = random_heads(4, 8, count, seed, &ex).unwrap();
        prop_assert_eq!(&a, &random_heads(4, 8, count, seed, &ex).unwrap());
        let set: std::collections::BTreeSet<_> = a.iter().collect();
        prop_assert_eq!(set.len(), count);
        prop_assert!(a.iter().all(|h| !ex.contains(h)));
    }

    #[test]
    fn direction_is_difference_of_means(
        a in prop::collection::vec(prop::collection::vec(-5f64..5.0, 3), 1..6),
        b in prop::collection::vec(prop::collection::vec(-5f64..5.0, 3), 1..6),
    ) {
        let d = steering_direction(&a, &b).unwrap();
        for i in 0..3 {
            let ma = a.iter().map(|x| x[i]).sum::<f64>() / a.len() as f64;
            let mb = b.iter().map(|x| x[i]).sum::<f64>() / b.len() as f64;
            prop_assert!((d[i] - (ma - mb)).abs() < 1e-12);
        }
        prop_assert!(sigma_along(&a, &d).unwrap() >= 0.0);
    }
}
