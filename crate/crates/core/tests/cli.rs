use std::path::{Path, PathBuf};
use std::process::Command;

use headprobe::cli::{self, HeadSource, HeatmapFormat, Mode, RunManifest};
use headprobe::config::RunConfig;
use headprobe::probe::ImportanceMatrix;
use headprobe::FunctionLabel;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.main_questions = 60;
    cfg.probe.epochs = 3;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_headprobe"))
}

#[test]
fn gen_corpus_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let ma = cli::gen_corpus(&cfg, &a).unwrap();
    let mb = cli::gen_corpus(&cfg, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ma.corpus_hash, mb.corpus_hash);
    assert_eq!(ma.args["mains"], "60");
    assert!(dir.path().join("a.jsonl.manifest.json").exists());
}

#[test]
fn small_pipeline_matches_frozen_importance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let corpus = dir.path().join("c.jsonl");
    cli::gen_corpus(&cfg, &corpus).unwrap();
    let p = cli::pipeline(&cfg, &corpus, &dir.path().join("run")).unwrap();
    let golden = ImportanceMatrix::from_csv(&std::fs::read_to_string(fixture("importance_n60_e3.csv")).unwrap()).unwrap();
    for f in FunctionLabel::ALL {
        for (a, b) in p.importance.row(f.index()).iter().zip(golden.row(f.index())) {
            assert!((a - b).abs() <= 1e-9, "{f}: {a} vs {b}");
        }
    }
    for name in ["importance.csv", "summary.json", "history.json", "probe.hsp", "manifest.json"] {
        assert!(dir.path().join("run").join(name).exists(), "{name}");
    }
}

#[test]
fn heatmap_csv_is_identity_and_svg_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("importance_n60_e3.csv");
    let csv = dir.path().join("out.csv");
    cli::heatmap(&src, HeatmapFormat::Csv, &csv).unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&src).unwrap());
    let svg = dir.path().join("out.svg");
    cli::heatmap(&src, HeatmapFormat::Svg, &svg).unwrap();
    assert_eq!(std::fs::read_to_string(&svg).unwrap(), std::fs::read_to_string(fixture("importance_n60_e3.svg")).unwrap());
}

#[test]
fn all_zero_heatmap_legend() {
    let dir = tempfile::tempdir().unwrap();
    let zero = ImportanceMatrix::new(4, 8, vec![vec![0.0; 32]; 8]).unwrap();
    let src = dir.path().join("zero.csv");
    std::fs::write(&src, zero.to_csv()).unwrap();
    let svg = dir.path().join("zero.svg");
    cli::heatmap(&src, HeatmapFormat::Svg, &svg).unwrap();
    assert!(std::fs::read_to_string(&svg).unwrap().contains("min 0 max 0"));
}

#[test]
fn unit_epsilon_intervention_equals_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.intervention.epsilon = 1.0;
    let corpus = dir.path().join("c.jsonl");
    cli::gen_corpus(&cfg, &corpus).unwrap();
    let f = FunctionLabel::SpatialPerception;
    let (_, r) = cli::intervene(&cfg, &corpus, &dir.path().join("i"), Mode::Ablate, f, &HeadSource::Planted, 0).unwrap();
    assert_eq!(r.report.per_function, r.baseline.per_function);
    assert_eq!(r.report.affected_rate, Some(0.0));
}

#[test]
fn random_mode_is_reproducible_and_avoids_chosen_heads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let corpus = dir.path().join("c.jsonl");
    cli::gen_corpus(&cfg, &corpus).unwrap();
    let f = FunctionLabel::SpatialPerception;
    let src = HeadSource::Explicit(vec![(0, 2), (0, 3), (0, 4)]);
    let (ma, a) = cli::intervene(&cfg, &corpus, &dir.path().join("a"), Mode::Random, f, &src, 9).unwrap();
    let (mb, b) = cli::intervene(&cfg, &corpus, &dir.path().join("b"), Mode::Random, f, &src, 9).unwrap();
    assert_eq!(a.heads, b.heads);
    assert_eq!(a.heads.len(), 3);
    assert!(a.heads.iter().all(|h| ![(0, 2), (0, 3), (0, 4)].contains(h)));
    assert_eq!(a.report, b.report);
    assert_eq!(ma.seeds["random_heads"], 9);
    assert_eq!(ma.artifacts, mb.artifacts);
}

#[test]
fn manifest_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.probe.seed = 31;
    let corpus = dir.path().join("c.jsonl");
    cli::gen_corpus(&cfg, &corpus).unwrap();
    let first = cli::pipeline(&cfg, &corpus, &dir.path().join("first")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("first/manifest.json")).unwrap();
    let m: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.config, cfg);
    let again = cli::pipeline(&m.config, &corpus, &dir.path().join("again")).unwrap();
    assert_eq!(first.manifest.without_clock(), again.manifest.without_clock());
    assert_eq!(first.summary, again.summary);
}

#[test]
fn binary_help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
}

#[test]
fn binary_missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["pipeline", "--corpus"])
        .arg(dir.path().join("nope.jsonl"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn binary_bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"intervention": {"epsilon": 2.0}}"#).unwrap();
    let out = bin()
        .args(["gen-corpus", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("c.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
    let out = bin().args(["heatmap", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn binary_gen_corpus_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.jsonl");
    let out = bin().args(["gen-corpus", "--mains", "5", "--seed", "3", "--out"]).arg(&c).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&c).unwrap().lines().count(), 5);
    let svg = dir.path().join("h.svg");
    let out = bin().args(["heatmap", "--importance"]).arg(fixture("importance_n60_e3.csv")).arg("--out").arg(&svg).output().unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn report_lists_selected_heads() {
    let text = cli::report(Some(&fixture("importance_n60_e3.csv")), &[], 0.001).unwrap();
    assert!(text.contains("SpatialPerception"));
    assert!(text.contains("L0H2"));
}
