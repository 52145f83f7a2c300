//! Greedy generation over a batch of rendered prompts: `par::map` against a
//! plain iterator. Under `--no-default-features` both arms are sequential.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use headprobe::corpus::{generate_corpus, render_example, CorpusConfig};
use headprobe::model::{build_model, default_registry, HookSet, ModelConfig};
use headprobe::par;
use headprobe::trace::MAX_NEW_TOKENS;

fn bench(c: &mut Criterion) {
    let model = build_model(ModelConfig::default(), &default_registry()).unwrap();
    let corpus = generate_corpus(&CorpusConfig { main_questions: 40, ..Default::default() }).unwrap();
    let prompts: Vec<_> = corpus
        .iter()
        .flat_map(|m| (0..m.subqafs.len()).map(move |k| render_example(m, k).unwrap()))
        .collect();
    let hooks = HookSet::new();
    let run = |p: &Vec<_>| model.generate(p, &hooks, MAX_NEW_TOKENS).unwrap();

    let mut g = c.benchmark_group(format!("generate_{}_prompts", prompts.len()));
    g.sample_size(10);
    g.bench_function(if par::PARALLEL { "par_map" } else { "par_map_fallback" }, |b| {
        b.iter(|| black_box(par::map(&prompts, run)))
    });
    g.bench_function("sequential", |b| b.iter(|| black_box(prompts.iter().map(run).collect::<Vec<_>>())));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
