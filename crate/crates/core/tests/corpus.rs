use std::collections::HashSet;

use headprobe::corpus::*;
use headprobe::model::{build_model, default_registry, ModelConfig};
use headprobe::vocab::{Color, Kind, Orient, Payload, Size, Token, Vocab};
use headprobe::{Error, FunctionLabel};
use proptest::prelude::*;

fn small(n: usize, seed: u64) -> Vec<MainQa> {
    generate_corpus(&CorpusConfig { main_questions: n, seed, ..Default::default() }).unwrap()
}

fn obj(kind: Kind, color: Color, row: usize, col: usize) -> SceneObject {
    SceneObject { kind, color, size: Size::Small, orient: Orient::Up, row, col }
}

#[test]
fn seed7_scene_matches_golden() {
    let s = generate_scene(7, &SceneConfig { grid_size: 4, objects: 5, facts: 2 }).unwrap();
    let golden: Scene = serde_json::from_str(include_str!("fixtures/scene_seed7_n4_o5.json")).unwrap();
    assert_eq!(s, golden);
}

#[test]
fn scenes_are_deterministic_and_fill_the_grid() {
    let cfg = SceneConfig::default();
    assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
    let full = generate_scene(1, &SceneConfig { objects: 16, ..cfg.clone() }).unwrap();
    let cells: HashSet<_> = full.objects.iter().map(|o| o.loc()).collect();
    assert_eq!(cells.len(), 16);
    assert!(matches!(
        generate_scene(1, &SceneConfig { objects: 17, ..cfg }),
        Err(Error::Capacity { objects: 17, cells: 16 })
    ));
}

#[test]
fn facing_template_has_table_labels() {
    use FunctionLabel::*;
    let scene = Scene {
        grid_size: 4,
        objects: vec![obj(Kind::Dog, Color::Red, 0, 0), obj(Kind::Horse, Color::Blue, 0, 3)],
        facts: vec![],
    };
    let m = compose_qa(&scene, "facing", 1).unwrap();
    let labels: Vec<Vec<FunctionLabel>> = m.subqafs.iter().map(|s| s.functions.clone()).collect();
    assert_eq!(
        labels,
        vec![
            vec![HighLevelVisual],
            vec![SpatialPerception, HighLevelVisual],
            vec![SpatialPerception, HighLevelVisual],
            vec![RelationalReasoning],
            vec![DecisionMaking],
        ]
    );
}

#[test]
fn counting_three_reds() {
    let scene = Scene {
        grid_size: 4,
        objects: vec![
            obj(Kind::Dog, Color::Red, 0, 1),
            obj(Kind::Cat, Color::Red, 2, 2),
            obj(Kind::Bus, Color::Red, 3, 0),
        ],
        facts: vec![],
    };
    let m = compose_qa(&scene, "counting", 9).unwrap();
    let math = m.subqafs.iter().find(|s| s.has(FunctionLabel::MathReasoning)).unwrap();
    assert_eq!(math.answer, vec![Token::Payload(Payload::Count(3))]);
}

#[test]
fn facing_needs_two_objects() {
    let scene = Scene { grid_size: 4, objects: vec![obj(Kind::Dog, Color::Red, 1, 1)], facts: vec![] };
    assert!(matches!(compose_qa(&scene, "facing", 0), Err(Error::Inapplicable { .. })));
}

#[test]
fn render_layout() {
    let scene = generate_scene(7, &SceneConfig::default()).unwrap();
    let m = compose_qa(&scene, "facing", 7).unwrap();
    let p0 = render_example(&m, 0).unwrap();
    assert!(!p0.iter().any(|t| matches!(t, Token::StepMarker(_) | Token::Context { .. })));
    let p2 = render_example(&m, 2).unwrap();
    let markers: Vec<u8> = p2.iter().filter_map(|t| if let Token::StepMarker(s) = t { Some(*s) } else { None }).collect();
    assert_eq!(markers, vec![1, 2]);
    for (i, t) in p2.iter().enumerate() {
        if let Token::Context { step, .. } = t {
            assert_eq!(p2[i - 1], Token::StepMarker(*step));
        }
    }
    assert_eq!(render_example(&m, 1).unwrap().len(), 39);
    assert!(matches!(render_example(&m, 5), Err(Error::StepOutOfRange { .. })));
}

#[test]
fn augment_modes() {
    let m = &small(1, 4)[0];
    let k = m.subqafs.len() - 1;
    assert_eq!(render_example(&augment_spatial_cues(m, Augment::None), k).unwrap(), render_example(m, k).unwrap());

    let model = build_model(ModelConfig::default(), &default_registry()).unwrap();
    let obj_channels = model.layout.get("obj").unwrap().range();
    let masked = render_example(&augment_spatial_cues(m, Augment::Mask), k).unwrap();
    let mut cells = 0;
    for t in masked.iter().filter(|t| matches!(t, Token::Cell { .. })) {
        let e = model.embed(t);
        assert!(e[obj_channels.clone()].iter().all(|v| *v == 0.0));
        cells += 1;
    }
    assert_eq!(cells, 16);

    let boxed = render_example(&augment_spatial_cues(m, Augment::Bbox), k).unwrap();
    let n_boxes = boxed.iter().filter(|t| matches!(t, Token::BBox { .. })).count();
    let expect: usize = m.named.iter().map(|kd| m.scene.objects.iter().filter(|o| o.kind == *kd).count()).sum();
    assert_eq!(n_boxes, expect);

    let both = augment_spatial_cues(m, Augment::BboxMask);
    assert_eq!(both.subqafs, m.subqafs);
    for a in [Augment::None, Augment::Bbox, Augment::Mask, Augment::BboxMask] {
        assert_eq!(Augment::parse(a.name()), Some(a));
    }
}

#[test]
fn empty_corpus_round_trip() {
    let mut buf = Vec::new();
    write_corpus_to(&mut buf, &[]).unwrap();
    assert!(buf.is_empty());
    assert!(read_corpus_from(&buf[..]).unwrap().is_empty());
}

#[test]
fn default_size_round_trips() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!(corpus.len(), DEFAULT_MAIN_QUESTIONS);
    assert_eq!(DEFAULT_MAIN_QUESTIONS, 1142);
    assert_eq!(REFERENCE_SUBQUESTIONS, 3759);
    let mut buf = Vec::new();
    write_corpus_to(&mut buf, &corpus).unwrap();
    let back = read_corpus_from(&buf[..]).unwrap();
    assert_eq!(back.len(), 1142);
    assert_eq!(subquestion_count(&back), subquestion_count(&corpus));
    assert_eq!(back, corpus);
}

#[test]
fn malformed_line_reports_its_number() {
    let mut buf = Vec::new();
    write_corpus_to(&mut buf, &small(2, 0)).unwrap();
    buf.extend_from_slice(b"{not json}\n");
    match read_corpus_from(&buf[..]) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_label_covers_five_percent() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let total = subquestion_count(&corpus) as f64;
    for (i, c) in label_counts(&corpus).iter().enumerate() {
        assert!(*c as f64 / total >= 0.05, "{} at {:.3}", FunctionLabel::from_index(i).unwrap(), *c as f64 / total);
    }
}

#[test]
fn gold_answers_match_oracle_over_1000_seeds() {
    let corpus = generate_corpus(&CorpusConfig { main_questions: 1000, seed: 17, ..Default::default() }).unwrap();
    for m in &corpus {
        let mut prior = Vec::new();
        for s in &m.subqafs {
            let Token::Payload(gold) = s.answer[0] else { panic!("non-payload answer") };
            assert_eq!(evaluate_query(&m.scene, &s.query, &prior), Some(gold), "{} step {}", m.template_id, s.step);
            prior.push(gold);
        }
    }
}

#[test]
fn vocab_strings_are_injective() {
    let v = Vocab::new(4, 8);
    let strings = v.strings();
    assert_eq!(strings.iter().collect::<HashSet<_>>().len(), v.len());
    for (i, t) in v.tokens().iter().enumerate() {
        let back: Token = t.to_string().parse().unwrap();
        assert_eq!(back, *t);
        assert_eq!(v.id(t), Some(i as u32));
    }
}

#[test]
fn rendered_tokens_are_in_vocab() {
    let v = Vocab::new(4, 8);
    for m in small(200, 3) {
        for a in [Augment::None, Augment::BboxMask] {
            let m = augment_spatial_cues(&m, a);
            for k in 0..m.subqafs.len() {
                for t in render_example(&m, k).unwrap() {
                    assert!(v.contains(&t), "{t}");
                }
            }
        }
    }
}

#[test]
fn split_is_roughly_80_20() {
    let corpus = small(1000, 0);
    let (train, test) = split(&corpus);
    assert_eq!(train.len() + test.len(), 1000);
    assert!((750..=850).contains(&train.len()), "{}", train.len());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn corpus_round_trips(seed in any::<u64>(), n in 0usize..12) {
        let corpus = small(n, seed);
        let mut buf = Vec::new();
        write_corpus_to(&mut buf, &corpus).unwrap();
        prop_assert_eq!(read_corpus_from(&buf[..]).unwrap(), corpus);
    }

    #[test]
    fn subquestion_counts_in_range(seed in any::<u64>()) {
        for m in small(6, seed) {
            prop_assert!((3..=6).contains(&m.subqafs.len()));
            prop_assert!(m.subqafs.iter().all(|s| !s.functions.is_empty()));
        }
    }
}
