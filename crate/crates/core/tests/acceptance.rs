//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Takes several minutes: three full probe
//! trainings on a 1000-question corpus.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use headprobe::cli::{self, HeadSource, Mode, RunManifest};
use headprobe::config::RunConfig;
use headprobe::corpus::{split, Augment, MainQa};
use headprobe::intervene::*;
use headprobe::metrics::{accuracy_excluding, bleu, rouge_l, unaffected, EvalReport, Outcome, RunMeta};
use headprobe::model::{HookSet, Model, DEFAULT_DETUNE};
use headprobe::probe::{grad_check, random_pair};
use headprobe::trace::{capture_corpus, TokenSelect};
use headprobe::FunctionLabel;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn accuracy(o: &[Outcome], f: FunctionLabel) -> f64 {
    EvalReport::from_outcomes(o, RunMeta::default()).accuracy(f)
}

fn hooks(model: &Model, heads: &[Head], epsilon: f64) -> HookSet {
    ablation_hooks(model, &AblationPlan { heads: heads.to_vec(), epsilon }).unwrap()
}

fn c1_gradients() -> Line {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (probe, x) = random_pair(4, 8, 256, seed).unwrap();
        worst = worst.max(grad_check(&probe, &x, 1e-4, 20, seed).unwrap());
    }
    Line { id: 1, pass: worst <= 1e-4, detail: format!("max relative error {worst:.2e} over 100 pairs") }
}

struct Trained {
    model: Model,
    test: Vec<MainQa>,
    train: Vec<MainQa>,
    selected: BTreeMap<FunctionLabel, Vec<Head>>,
    importance: PathBuf,
    accuracy: f64,
    sparsity: BTreeMap<String, f64>,
}

fn train_default(cfg: &RunConfig, corpus: &Path, out: &Path) -> Trained {
    let p = cli::pipeline(cfg, corpus, out).unwrap();
    let (mains, _) = cli::load_corpus(corpus).unwrap();
    let (train, test) = split(&mains);
    Trained {
        model: cfg.build_model().unwrap(),
        test,
        train,
        selected: FunctionLabel::ALL.iter().map(|&f| (f, p.importance.selected(f).unwrap())).collect(),
        importance: out.join("importance.csv"),
        accuracy: p.summary.test_subset_accuracy,
        sparsity: p.summary.sparsity,
    }
}

fn c2_probe(t: &Trained) -> Line {
    Line { id: 2, pass: t.accuracy >= 0.95, detail: format!("test subset accuracy {:.2}%", pct(t.accuracy)) }
}

fn c3_recovery(t: &Trained) -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for (f, sel) in &t.selected {
        let planted = t.model.heads_for(*f);
        let ok = planted.iter().all(|h| sel.contains(h)) && sel.len() <= 2 * planted.len();
        pass &= ok;
        parts.push(format!("{}:{}/{}", &f.name()[..4], sel.len(), planted.len()));
    }
    Line { id: 3, pass, detail: format!("selected/planted {}", parts.join(" ")) }
}

fn c4_sparsity(t: &Trained) -> Line {
    let worst = t.sparsity.values().cloned().fold(0.0, f64::max);
    Line { id: 4, pass: worst < 0.4, detail: format!("max fraction above threshold {worst:.3}") }
}

fn c5_ablation(t: &Trained) -> Line {
    let m = &t.model;
    let base = evaluate_outcomes(m, &t.test, &HookSet::new()).unwrap();
    let mut pass = true;
    let mut worst_margin = f64::INFINITY;
    let mut worst_other = 0.0f64;
    for f in FunctionLabel::ALL {
        let sel = &t.selected[&f];
        let masked = evaluate_outcomes(m, &t.test, &hooks(m, sel, 0.001)).unwrap();
        let drop = pct(accuracy(&base, f) - accuracy(&masked, f));
        for seed in 0..5 {
            let rh = random_heads(4, 8, sel.len(), seed, sel).unwrap();
            let rnd = evaluate_outcomes(m, &t.test, &hooks(m, &rh, 0.001)).unwrap();
            let margin = drop - pct(accuracy(&base, f) - accuracy(&rnd, f));
            worst_margin = worst_margin.min(margin);
            pass &= margin >= 50.0;
        }
        for g in FunctionLabel::ALL.into_iter().filter(|g| *g != f) {
            if let (Some(a), Some(b)) = (accuracy_excluding(&base, g, f), accuracy_excluding(&masked, g, f)) {
                worst_other = worst_other.max(pct((a - b).abs()));
            }
        }
    }
    pass &= worst_other <= 5.0;
    Line { id: 5, pass, detail: format!("min margin over random {worst_margin:.1} pts, max off-target move {worst_other:.1} pts") }
}

fn c6_identity(t: &Trained) -> Line {
    let m = &t.model;
    let base = evaluate_outcomes(m, &t.test, &HookSet::new()).unwrap();
    let mut pass = true;
    for f in FunctionLabel::ALL {
        pass &= evaluate_outcomes(m, &t.test, &hooks(m, &t.selected[&f], 1.0)).unwrap() == base;
    }
    let caps = capture_corpus(m, &t.train[..200], &HookSet::new(), TokenSelect::TopK(3)).unwrap();
    let s = FunctionLabel::SpatialPerception;
    let plan = build_steering_plan(&caps, 256, 8, s, &t.selected[&s], 0.0).unwrap();
    pass &= evaluate_outcomes(m, &t.test, &steering_hooks(m, &plan).unwrap()).unwrap() == base;
    Line { id: 6, pass, detail: format!("{} test subquestions, 8 unit-ε plans and one α=0 plan", base.len()) }
}

fn c7_steering(cfg: &RunConfig, corpus: &Path, out: &Path) -> Line {
    let s = FunctionLabel::SpatialPerception;
    let run = |alpha: f64, dir: &str| {
        let mut c = cfg.clone();
        c.intervention.alpha = alpha;
        cli::steer(&c, corpus, &out.join(dir), s, &HeadSource::Planted).unwrap().1
    };
    let up = run(0.1, "up");
    let down = run(-0.1, "down");
    let base = pct(up.baseline.accuracy(s));
    let (u, d) = (pct(up.report.accuracy(s)), pct(down.report.accuracy(s)));
    let pass = (40.0..=70.0).contains(&base) && u - base >= 5.0 && d <= base;
    Line { id: 7, pass, detail: format!("detuned S {base:.1} -> α=0.1 {u:.1}, α=-0.1 {d:.1}") }
}

fn c8_sha(cfg: &RunConfig, corpus: &Path, out: &Path) -> Line {
    let (_, r) = cli::sha(cfg, corpus, out, Augment::BboxMask).unwrap();
    let ds = r.head_count_delta[&FunctionLabel::SpatialPerception];
    let dr = r.head_count_delta[&FunctionLabel::RelationalReasoning];
    let (so, sa) = (r.original.accuracy["SpatialPerception"], r.augmented.accuracy["SpatialPerception"]);
    let pass = ds >= 0 && dr >= 0 && sa >= so;
    Line { id: 8, pass, detail: format!("delta S {ds} R {dr}; S accuracy {:.1} -> {:.1}", pct(so), pct(sa)) }
}

fn c9_metrics() -> Line {
    let w = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let mut pass = true;
    pass &= (bleu(&w("the cat sat"), &w("the cat sat down"), 4).unwrap() - (-1.0f64 / 3.0).exp()).abs() < 1e-15;
    pass &= bleu(&w("a b c d"), &w("a b c d"), 4).unwrap() == 1.0;
    pass &= bleu(&w("x x"), &w("x"), 1).unwrap() == 0.5;
    pass &= rouge_l(&w("a b c"), &w("a x c")).unwrap() == 2.0 / 3.0;
    pass &= rouge_l(&w("a b c x y"), &w("a b c z v")).unwrap() == 0.6;
    pass &= !unaffected(&w("a b c x y"), &w("a b c z v")).unwrap();
    pass &= unaffected(&w("x y y x x y y y"), &w("x x y y y x x")).unwrap();
    pass &= !unaffected(&w("red"), &w("blue")).unwrap();
    Line { id: 9, pass, detail: "BLEU, ROUGE-L and unaffected-rule fixtures".into() }
}

fn c10_sweep(t: &Trained, cfg: &RunConfig, corpus: &Path, out: &Path) -> Line {
    let s = FunctionLabel::SpatialPerception;
    let planted = t.model.heads_for(s).len();
    let ks: Vec<usize> = (0..=8).collect();
    let (_, rows) = cli::sweep_ratio(cfg, corpus, &t.importance, out, s, &ks).unwrap();
    let base = rows[0].cognitive;
    let mut pass = rows.windows(2).all(|w| w[1].cognitive <= w[0].cognitive + 0.02);
    pass &= rows[planted].cognitive < 0.5;
    pass &= rows[..=planted].iter().all(|r| (r.random - base).abs() <= 0.05);
    let curve: Vec<String> = rows.iter().map(|r| format!("{:.0}/{:.0}", pct(r.cognitive), pct(r.random))).collect();
    Line { id: 10, pass, detail: format!("K=0..8 cognitive/random {}", curve.join(" ")) }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn same_bytes(name: &Path, a: &[u8], b: &[u8]) -> bool {
    // Run manifests carry wall-clock time; everything else must match exactly.
    if name.to_string_lossy().ends_with("manifest.json") {
        if let (Ok(x), Ok(y)) = (serde_json::from_slice::<RunManifest>(a), serde_json::from_slice::<RunManifest>(b)) {
            return x.without_clock() == y.without_clock();
        }
    }
    a == b
}

fn c11_determinism(root: &Path) -> Line {
    let mut cfg = RunConfig::default();
    cfg.corpus.main_questions = 150;
    cfg.probe.epochs = 5;
    let run = root.join("run");
    let mut snaps = Vec::new();
    for _ in 0..2 {
        if run.exists() {
            std::fs::remove_dir_all(&run).unwrap();
        }
        std::fs::create_dir_all(&run).unwrap();
        let corpus = run.join("corpus.jsonl");
        cli::gen_corpus(&cfg, &corpus).unwrap();
        cli::pipeline(&cfg, &corpus, &run.join("pipeline")).unwrap();
        let src = HeadSource::Elbow(run.join("pipeline/importance.csv"));
        cli::intervene(&cfg, &corpus, &run.join("ablate"), Mode::Ablate, FunctionLabel::SpatialPerception, &src, 0).unwrap();
        cli::intervene(&cfg, &corpus, &run.join("random"), Mode::Random, FunctionLabel::SpatialPerception, &src, 3).unwrap();
        snaps.push(files(&run));
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k).is_none_or(|w| !same_bytes(k, v, w)))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let pass = a.len() == b.len() && differing.is_empty();
    Line { id: 11, pass, detail: format!("{} files compared, differing {:?}", a.len(), differing) }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut lines = vec![c1_gradients()];

    let mut cfg = RunConfig::default();
    cfg.corpus.main_questions = 1000;
    let corpus = root.join("corpus.jsonl");
    cli::gen_corpus(&cfg, &corpus).unwrap();
    let t = train_default(&cfg, &corpus, &root.join("pipeline"));
    lines.push(c2_probe(&t));
    lines.push(c3_recovery(&t));
    lines.push(c4_sparsity(&t));
    lines.push(c5_ablation(&t));
    lines.push(c6_identity(&t));

    let mut detuned = cfg.clone();
    detuned.heads.spatial_detune = DEFAULT_DETUNE;
    lines.push(c7_steering(&detuned, &corpus, &root.join("steer")));
    lines.push(c8_sha(&detuned, &corpus, &root.join("sha")));
    lines.push(c9_metrics());
    lines.push(c10_sweep(&t, &cfg, &corpus, &root.join("sweep")));
    lines.push(c11_determinism(&root.join("determinism")));

    for l in &lines {
        println!("{} criterion {:2}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
