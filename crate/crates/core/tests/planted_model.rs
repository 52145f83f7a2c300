use headprobe::corpus::{evaluate_query, generate_corpus, render_example, CorpusConfig};
use headprobe::model::{build_model, default_registry, HookSet, ModelConfig};
use headprobe::vocab::{Payload, Token};

#[test]
fn gold_answers_agree_with_oracle() {
    let corpus = generate_corpus(&CorpusConfig { main_questions: 400, ..Default::default() }).unwrap();
    for m in &corpus {
        let mut prior = Vec::new();
        for s in &m.subqafs {
            let Token::Payload(gold) = s.answer[0] else { panic!() };
            assert_eq!(evaluate_query(&m.scene, &s.query, &prior), Some(gold), "{} step {}", m.template_id, s.step);
            prior.push(gold);
        }
    }
}

#[test]
fn planted_model_answers_every_subquestion() {
    let model = build_model(ModelConfig::default(), &default_registry()).unwrap();
    let corpus = generate_corpus(&CorpusConfig { main_questions: 300, ..Default::default() }).unwrap();
    let hooks = HookSet::new();
    let mut wrong = Vec::new();
    let mut total = 0;
    for m in &corpus {
        for (k, s) in m.subqafs.iter().enumerate() {
            let prompt = render_example(m, k).unwrap();
            let out = model.generate(&prompt, &hooks, 4).unwrap();
            total += 1;
            if out != s.gold_generation() {
                wrong.push(format!("{} {} {:?} -> {:?}", m.template_id, s.query, s.answer, out));
            }
        }
    }
    let _ = Payload::Yes;
    assert!(wrong.is_empty(), "{}/{} wrong:\n{}", wrong.len(), total, wrong.iter().take(30).cloned().collect::<Vec<_>>().join("\n"));
}
