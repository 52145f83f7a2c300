use headprobe::corpus::{generate_corpus, generate_scene, render_example, CorpusConfig, SceneConfig};
use headprobe::model::*;
use headprobe::vocab::{CellContent, Color, Intent, Payload, Query, Token};
use headprobe::{Error, FunctionLabel};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn planted() -> Model {
    build_model(ModelConfig::default(), &default_registry()).unwrap()
}

fn prompt_for(seed: u64) -> Vec<Token> {
    let corpus = generate_corpus(&CorpusConfig { main_questions: 1, seed, ..Default::default() }).unwrap();
    let m = &corpus[0];
    render_example(m, m.subqafs.len() - 1).unwrap()
}

fn color_prompt(scene: &headprobe::corpus::Scene, r: usize, c: usize) -> Vec<Token> {
    let mut out = vec![Token::Bos];
    for row in 0..scene.grid_size {
        for col in 0..scene.grid_size {
            let content = match scene.at(row, col) {
                None => CellContent::Empty,
                Some(o) => CellContent::Object { kind: Some(o.kind), color: o.color, size: o.size, orient: o.orient },
            };
            out.push(Token::Cell { row: row as u8, col: col as u8, content });
        }
    }
    out.push(Token::Query(Query::new(Intent::ColorAt).loc(r, c)));
    out
}

#[test]
fn single_token_returns_its_value() {
    let q = array![[3.0, -1.0]];
    let k = array![[0.5, 2.0]];
    let v = array![[7.0, 8.0, 9.0]];
    let out = attention_head_output(&q, &k, &v, &causal_mask(1)).unwrap();
    assert_eq!(out, v);
}

#[test]
fn causal_uniform_scores() {
    let z = Array2::zeros((2, 2));
    let v = array![[1.0, 0.0], [0.0, 1.0]];
    let out = attention_head_output(&z, &z, &v, &causal_mask(2)).unwrap();
    assert_eq!(out, array![[1.0, 0.0], [0.5, 0.5]]);
}

#[test]
fn softmax_of_ln2_scores() {
    // q·k / sqrt(1) gives scores (ln 2, 0) for the single query row.
    let q = array![[1.0], [1.0]];
    let k = array![[2f64.ln()], [0.0]];
    let v = array![[1.0, 0.0], [0.0, 1.0]];
    let out = attention_head_output(&q, &k, &v, &Array2::zeros((2, 2))).unwrap();
    assert!((out[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
    assert!((out[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn attention_rejects_bad_shapes_and_nan() {
    let z = Array2::zeros((2, 2));
    assert!(matches!(attention_head_output(&z, &z, &z, &causal_mask(3)), Err(Error::Dimension(_))));
    let mut q = Array2::zeros((2, 2));
    q[[0, 0]] = f64::NAN;
    assert!(matches!(attention_head_output(&q, &z, &z, &causal_mask(2)), Err(Error::Numeric(_))));
}

#[test]
fn empty_registry_answers_null() {
    let model = build_model(ModelConfig::default(), &[]).unwrap();
    assert!(model.heads.iter().all(|h| h.is_inert()));
    let out = model.generate(&prompt_for(3), &HookSet::new(), 4).unwrap();
    assert_eq!(out[0], Token::Null);
}

#[test]
fn low_level_head_alone_reads_colors() {
    let low: Vec<PlantedHeadSpec> =
        default_registry().into_iter().filter(|s| s.function_tag == FunctionLabel::LowLevelVisual).collect();
    let model = build_model(ModelConfig::default(), &low).unwrap();
    for seed in 0..20 {
        let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
        for o in &scene.objects {
            let out = model.generate(&color_prompt(&scene, o.row, o.col), &HookSet::new(), 2).unwrap();
            assert_eq!(out[0], Token::Payload(Payload::Color(o.color)), "seed {seed}");
        }
    }
}

#[test]
fn masking_the_color_head_changes_the_answer() {
    let model = planted();
    let hooks = HookSet::new().with(0, 0, Hook::scale(0.001));
    for seed in 0..20 {
        let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
        let o = scene.objects.iter().find(|o| o.color == Color::Red).or(scene.objects.first()).unwrap();
        let p = color_prompt(&scene, o.row, o.col);
        assert_eq!(model.generate(&p, &HookSet::new(), 2).unwrap()[0], Token::Payload(Payload::Color(o.color)));
        assert_ne!(model.generate(&p, &hooks, 2).unwrap()[0], Token::Payload(Payload::Color(o.color)));
    }
}

#[test]
fn generation_stops_at_max_new_and_rejects_zero() {
    let model = planted();
    let p = prompt_for(1);
    assert_eq!(model.generate(&p, &HookSet::new(), 1).unwrap().len(), 1);
    assert!(matches!(model.generate(&p, &HookSet::new(), 0), Err(Error::Precondition(_))));
}

#[test]
fn generation_is_deterministic() {
    let model = planted();
    let p = prompt_for(11);
    let a = model.forward(&p, &HookSet::new()).unwrap();
    let b = model.forward(&p, &HookSet::new()).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.head_contribs, b.head_contribs);
}

#[test]
fn scale_hook_scales_contribution_exactly() {
    let model = planted();
    let p = prompt_for(5);
    let base = model.forward(&p, &HookSet::new()).unwrap();
    let hooked = model.forward(&p, &HookSet::new().with(0, 2, Hook::scale(0.001))).unwrap();
    for pos in 0..p.len() {
        let (a, b) = (base.contrib(pos, 0, 2), hooked.contrib(pos, 0, 2));
        for (x, y) in a.iter().zip(b) {
            assert!((x * 0.001 - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
}

#[test]
fn build_rejects_bad_specs() {
    let mut reg = default_registry();
    reg.push(reg[0].clone());
    assert!(matches!(build_model(ModelConfig::default(), &reg), Err(Error::DuplicateHead { .. })));
    let mut reg = default_registry();
    reg[0].layer = 9;
    assert!(build_model(ModelConfig::default(), &reg).is_err());
    let mut reg = default_registry();
    reg[0].copy_source = vec!["nope".into()];
    reg[0].copy_dest = vec!["s_color".into()];
    assert!(build_model(ModelConfig::default(), &reg).is_err());
    let cfg = ModelConfig { embed_dim: 100, ..Default::default() };
    assert!(matches!(build_model(cfg, &[]), Err(Error::Config(_))));
}

#[test]
fn overlong_sequence_is_rejected() {
    let model = planted();
    let p = vec![Token::Bos; model.config.max_seq_len + 1];
    assert!(matches!(model.forward(&p, &HookSet::new()), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn detune_touches_only_spatial_gains() {
    let reg = default_registry();
    for (a, b) in reg.iter().zip(detune(&reg, 0.5)) {
        let want = if a.function_tag == FunctionLabel::SpatialPerception { a.gain * 0.5 } else { a.gain };
        assert_eq!(b.gain, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..10_000) {
        let model = planted();
        let p = prompt_for(seed);
        let t = model.forward(&p, &HookSet::new()).unwrap();
        for l in 0..t.layers {
            for m in 0..t.heads {
                for i in 0..t.seq_len {
                    let s: f64 = (0..=i).map(|j| t.attention(l, m, i, j)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6, "L{l}H{m} pos {i}: {s}");
                }
            }
        }
    }

    #[test]
    fn identity_hooks_change_nothing(seed in 0u64..10_000) {
        let model = planted();
        let p = prompt_for(seed);
        let mut ident = HookSet::new();
        for l in 0..4 {
            for m in 0..8 {
                ident.insert(l, m, Hook { scale: 1.0, shift: vec![0.0; model.d()] });
            }
        }
        let a = model.forward(&p, &HookSet::new()).unwrap();
        let b = model.forward(&p, &ident).unwrap();
        prop_assert_eq!(a.logits, b.logits);
        prop_assert_eq!(a.head_contribs, b.head_contribs);
        prop_assert_eq!(a.residual_pre_ffn, b.residual_pre_ffn);
    }

    #[test]
    fn shift_hook_adds_exactly_to_its_layer(seed in 0u64..10_000, layer in 0usize..4, head in 0usize..8, mag in -2.0f64..2.0) {
        let model = planted();
        let p = prompt_for(seed);
        let d = model.d();
        let v: Vec<f64> = (0..d).map(|i| mag * ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect();
        let a = model.forward(&p, &HookSet::new()).unwrap();
        let b = model.forward(&p, &HookSet::new().with(layer, head, Hook::shift(v.clone()))).unwrap();
        for pos in 0..p.len() {
            for (i, (x, y)) in a.residual(layer, pos).iter().zip(b.residual(layer, pos)).enumerate() {
                prop_assert!((y - x - v[i]).abs() < 1e-9, "pos {} ch {}: {} vs {}", pos, i, y - x, v[i]);
            }
        }
    }
}
