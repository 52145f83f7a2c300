//! Commands behind the `headprobe` binary. Each writes its artifacts into an
//! output location together with a manifest that lists them by content hash.

pub mod heatmap;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{augment_spatial_cues, generate_corpus, read_corpus_from, split, write_corpus_to, Augment, MainQa};
use crate::error::{Error, Result};
use crate::function::FunctionLabel;
use crate::hashing::sha256_hex;
use crate::intervene::{
    ablation_hooks, build_steering_plan, evaluate_with_plan, masked_ratio_sweep, random_heads, steering_hooks,
    AblationPlan, Head, SweepRow,
};
use crate::metrics::{head_count_delta, sparsity_relative, EvalReport, RunMeta};
use crate::model::{HookSet, Model};
use crate::probe::{importance_matrix, subset_accuracy, train_probe, ImportanceMatrix, TrainHistory};
use crate::trace::{build_probe_dataset, capture_corpus, model_hash, TokenSelect};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub corpus_hash: Option<String>,
    pub model_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Command arguments beyond the config, as given.
    pub args: BTreeMap<String, String>,
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// The manifest minus its wall-clock field, for comparing runs.
    pub fn without_clock(&self) -> RunManifest {
        RunManifest { wall_clock_secs: 0.0, ..self.clone() }
    }
}

/// Writes artifacts under one directory and builds the manifest.
struct Recorder {
    dir: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl Recorder {
    fn new(command: &str, dir: &Path, cfg: &RunConfig) -> Result<Recorder> {
        std::fs::create_dir_all(dir)?;
        let mut seeds = BTreeMap::new();
        seeds.insert("corpus".to_string(), cfg.corpus.seed);
        seeds.insert("probe".to_string(), cfg.probe.seed);
        Ok(Recorder {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                version: VERSION.into(),
                config_hash: cfg.hash(),
                corpus_hash: None,
                model_hash: None,
                seeds,
                args: BTreeMap::new(),
                config: cfg.clone(),
                artifacts: Vec::new(),
                wall_clock_secs: 0.0,
            },
        })
    }

    fn arg(&mut self, k: &str, v: impl ToString) {
        self.manifest.args.insert(k.into(), v.to_string());
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)?;
        self.manifest.artifacts.push(Artifact { path: name.into(), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<PathBuf> {
        self.write(name, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
    }

    /// Records a file some other routine already wrote into the directory.
    fn existing(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.manifest.artifacts.push(Artifact { path: name.into(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn finish(mut self, manifest_name: &str) -> Result<RunManifest> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = self.dir.join(manifest_name);
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(self.manifest)
    }
}

/// Reads a corpus file and returns it with the hash of its bytes.
pub fn load_corpus(path: &Path) -> Result<(Vec<MainQa>, String)> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("corpus {}: {e}", path.display())))
    })?;
    Ok((read_corpus_from(&bytes[..])?, sha256_hex(&bytes)))
}

fn prepare(rec: &mut Recorder, cfg: &RunConfig, corpus: &Path) -> Result<(Vec<MainQa>, Model)> {
    let (mains, hash) = load_corpus(corpus)?;
    let model = cfg.build_model()?;
    rec.manifest.corpus_hash = Some(hash);
    rec.manifest.model_hash = Some(model_hash(&model));
    rec.arg("corpus", corpus.display());
    Ok((mains, model))
}

fn test_split(mains: &[MainQa]) -> Result<Vec<MainQa>> {
    let (_, test) = split(mains);
    if test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    Ok(test)
}

/// Generates the corpus into `out`; the manifest goes to `<out>.manifest.json`.
pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = out
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} is not a file path", out.display())))?
        .to_string_lossy()
        .to_string();
    let mut rec = Recorder::new("gen-corpus", dir, cfg)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let mut bytes = Vec::new();
    write_corpus_to(&mut bytes, &corpus)?;
    rec.write(&name, &bytes)?;
    rec.manifest.corpus_hash = Some(sha256_hex(&bytes));
    rec.arg("mains", corpus.len());
    rec.arg("subquestions", crate::corpus::subquestion_count(&corpus));
    rec.finish(&format!("{name}.manifest.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub token_select: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub final_loss: f64,
    pub test_subset_accuracy: f64,
    pub selected: BTreeMap<String, Vec<Head>>,
    pub sparsity: BTreeMap<String, f64>,
}

pub struct PipelineOutput {
    pub manifest: RunManifest,
    pub summary: PipelineSummary,
    pub importance: ImportanceMatrix,
    pub history: TrainHistory,
}

/// Capture, probe training on the train split, and attribution on the test split.
pub fn pipeline(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<PipelineOutput> {
    let mut rec = Recorder::new("pipeline", out, cfg)?;
    let (mains, model) = prepare(&mut rec, cfg, corpus)?;
    let (train, test) = split(&mains);
    let select = cfg.capture.token_select;
    let tr = build_probe_dataset(&train, &model, select, Some(&out.join("train.hsc")))?;
    let te = build_probe_dataset(&test, &model, select, Some(&out.join("test.hsc")))?;
    for name in ["train.hsc", "train.hsc.manifest.json", "test.hsc", "test.hsc.manifest.json"] {
        rec.existing(name)?;
    }
    let (probe, history) = train_probe(&tr, &cfg.probe)?;
    let mut buf = Vec::new();
    probe.write_to(&mut buf)?;
    rec.write("probe.hsp", &buf)?;
    rec.json("history.json", &history)?;
    let importance = importance_matrix(&probe, &te)?;
    rec.write("importance.csv", importance.to_csv().as_bytes())?;
    let sparsity = sparsity_relative(&importance, cfg.intervention.sparsity_threshold);
    let mut summary = PipelineSummary {
        token_select: select.label(),
        train_samples: tr.len(),
        test_samples: te.len(),
        final_loss: history.loss.last().copied().unwrap_or(f64::NAN),
        test_subset_accuracy: subset_accuracy(&probe, &te)?,
        selected: BTreeMap::new(),
        sparsity: BTreeMap::new(),
    };
    for f in FunctionLabel::ALL {
        summary.selected.insert(f.name().into(), importance.selected(f)?);
        summary.sparsity.insert(f.name().into(), sparsity[f.index()]);
    }
    rec.json("summary.json", &summary)?;
    Ok(PipelineOutput { manifest: rec.finish("manifest.json")?, summary, importance, history })
}

pub fn read_importance(path: &Path) -> Result<ImportanceMatrix> {
    ImportanceMatrix::from_csv(&std::fs::read_to_string(path)?)
}

/// Where the intervened heads come from.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSource {
    /// Elbow selection from an importance CSV.
    Elbow(PathBuf),
    /// The heads the model was built with for the function.
    Planted,
    Explicit(Vec<Head>),
}

/// `"0:2,1:0"` as heads.
pub fn parse_heads(s: &str) -> Result<Vec<Head>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let (l, m) = t.trim().split_once(':').ok_or_else(|| Error::Config(format!("head `{t}` is not layer:head")))?;
            let p = |x: &str| x.parse::<usize>().map_err(|_| Error::Config(format!("head `{t}` is not layer:head")));
            Ok((p(l)?, p(m)?))
        })
        .collect()
}

fn resolve_heads(source: &HeadSource, model: &Model, function: FunctionLabel) -> Result<Vec<Head>> {
    match source {
        HeadSource::Elbow(p) => read_importance(p)?.selected(function),
        HeadSource::Planted => Ok(model.heads_for(function)),
        HeadSource::Explicit(h) => Ok(h.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Scale the chosen heads by ε.
    Ablate,
    /// Scale as many heads drawn at random outside the chosen ones.
    Random,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterventionResult {
    pub heads: Vec<Head>,
    pub baseline: EvalReport,
    pub report: EvalReport,
}

/// Masks heads and evaluates the test split against the unhooked baseline.
pub fn intervene(
    cfg: &RunConfig,
    corpus: &Path,
    out: &Path,
    mode: Mode,
    function: FunctionLabel,
    source: &HeadSource,
    seed: u64,
) -> Result<(RunManifest, InterventionResult)> {
    let mut rec = Recorder::new("intervene", out, cfg)?;
    let (mains, model) = prepare(&mut rec, cfg, corpus)?;
    let test = test_split(&mains)?;
    let chosen = resolve_heads(source, &model, function)?;
    let c = &model.config;
    let heads = match mode {
        Mode::Ablate => chosen,
        Mode::Random => {
            rec.manifest.seeds.insert("random_heads".into(), seed);
            random_heads(c.num_layers, c.heads_per_layer, chosen.len(), seed, &chosen)?
        }
    };
    rec.arg("mode", format!("{mode:?}").to_lowercase());
    rec.arg("function", function.name());
    rec.arg("heads", format!("{source:?}"));
    let plan = AblationPlan { heads: heads.clone(), epsilon: cfg.intervention.epsilon };
    let hooks = ablation_hooks(&model, &plan)?;
    let meta = |h: String| RunMeta { plan_hash: h, corpus_hash: rec_hash(&rec), seed };
    let (baseline, base_out) = evaluate_with_plan(&model, &test, &HookSet::new(), None, meta(String::new()))?;
    let (report, _) = evaluate_with_plan(&model, &test, &hooks, Some(&base_out), meta(plan.hash()))?;
    rec.json("plan.json", &plan)?;
    rec.json("baseline.json", &baseline)?;
    rec.json("report.json", &report)?;
    Ok((rec.finish("manifest.json")?, InterventionResult { heads, baseline, report }))
}

fn rec_hash(rec: &Recorder) -> String {
    rec.manifest.corpus_hash.clone().unwrap_or_default()
}

/// Builds a steering plan from train-split captures and evaluates the test split.
pub fn steer(
    cfg: &RunConfig,
    corpus: &Path,
    out: &Path,
    function: FunctionLabel,
    source: &HeadSource,
) -> Result<(RunManifest, InterventionResult)> {
    let mut rec = Recorder::new("steer", out, cfg)?;
    let (mains, model) = prepare(&mut rec, cfg, corpus)?;
    let (train, _) = split(&mains);
    let test = test_split(&mains)?;
    let heads = resolve_heads(source, &model, function)?;
    rec.arg("function", function.name());
    rec.arg("heads", format!("{source:?}"));
    let c = &model.config;
    let captured = capture_corpus(&model, &train, &HookSet::new(), cfg.capture.token_select)?;
    let plan = build_steering_plan(&captured, c.embed_dim, c.heads_per_layer, function, &heads, cfg.intervention.alpha)?;
    let hooks = steering_hooks(&model, &plan)?;
    let corpus_hash = rec_hash(&rec);
    let meta = |h: String| RunMeta { plan_hash: h, corpus_hash: corpus_hash.clone(), seed: 0 };
    let (baseline, base_out) = evaluate_with_plan(&model, &test, &HookSet::new(), None, meta(String::new()))?;
    let (report, _) = evaluate_with_plan(&model, &test, &hooks, Some(&base_out), meta(plan.hash()))?;
    rec.json("plan.json", &plan)?;
    rec.json("baseline.json", &baseline)?;
    rec.json("report.json", &report)?;
    let steered = plan.directions.iter().map(|d| (d.layer, d.head)).collect();
    Ok((rec.finish("manifest.json")?, InterventionResult { heads: steered, baseline, report }))
}

/// Accuracy on `function` versus the number of masked heads; CSV columns
/// `k,cognitive,random`.
pub fn sweep_ratio(
    cfg: &RunConfig,
    corpus: &Path,
    importance: &Path,
    out: &Path,
    function: FunctionLabel,
    ks: &[usize],
) -> Result<(RunManifest, Vec<SweepRow>)> {
    let mut rec = Recorder::new("sweep-ratio", out, cfg)?;
    let (mains, model) = prepare(&mut rec, cfg, corpus)?;
    let test = test_split(&mains)?;
    let imp = read_importance(importance)?;
    let ranking: Vec<Head> = imp.ranking(function).into_iter().map(|j| imp.coord(j)).collect();
    let exclude = imp.selected(function)?;
    rec.arg("importance", importance.display());
    rec.arg("function", function.name());
    rec.arg("ks", format!("{ks:?}"));
    let iv = &cfg.intervention;
    let rows = masked_ratio_sweep(&model, &test, function, &ranking, &exclude, ks, iv.epsilon, &iv.random_seeds)?;
    let mut csv = String::from("k,cognitive,random\n");
    for r in &rows {
        writeln!(csv, "{},{:.6},{:.6}", r.k, r.cognitive, r.random).unwrap();
    }
    rec.write("sweep.csv", csv.as_bytes())?;
    Ok((rec.finish("manifest.json")?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosRow {
    pub select: String,
    pub train_samples: usize,
    pub test_subset_accuracy: f64,
    pub mean_sparsity: f64,
    /// Functions whose elbow set contains all of their planted heads.
    pub functions_recovered: usize,
}

/// Trains one probe per token-selection strategy; CSV table of the outcomes.
pub fn sweep_token_pos(
    cfg: &RunConfig,
    corpus: &Path,
    out: &Path,
    selects: &[TokenSelect],
) -> Result<(RunManifest, Vec<TokenPosRow>)> {
    let mut rec = Recorder::new("sweep-token-pos", out, cfg)?;
    let (mains, model) = prepare(&mut rec, cfg, corpus)?;
    let (train, test) = split(&mains);
    rec.arg("selects", selects.iter().map(|s| s.label()).collect::<Vec<_>>().join(","));
    let mut rows = Vec::new();
    for &select in selects {
        let tr = build_probe_dataset(&train, &model, select, None)?;
        let te = build_probe_dataset(&test, &model, select, None)?;
        let (probe, _) = train_probe(&tr, &cfg.probe)?;
        let imp = importance_matrix(&probe, &te)?;
        let sp = sparsity_relative(&imp, cfg.intervention.sparsity_threshold);
        let mut recovered = 0;
        for f in FunctionLabel::ALL {
            let sel = imp.selected(f)?;
            recovered += model.heads_for(f).iter().all(|h| sel.contains(h)) as usize;
        }
        rows.push(TokenPosRow {
            select: select.label(),
            train_samples: tr.len(),
            test_subset_accuracy: subset_accuracy(&probe, &te)?,
            mean_sparsity: sp.iter().sum::<f64>() / sp.len() as f64,
            functions_recovered: recovered,
        });
    }
    let mut csv = String::from("select,train_samples,test_subset_accuracy,mean_sparsity,functions_recovered\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{}",
            r.select, r.train_samples, r.test_subset_accuracy, r.mean_sparsity, r.functions_recovered
        )
        .unwrap();
    }
    rec.write("token_positions.csv", csv.as_bytes())?;
    Ok((rec.finish("manifest.json")?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShaArm {
    pub augment: String,
    pub accuracy: BTreeMap<String, f64>,
    pub selected: BTreeMap<String, Vec<Head>>,
    pub test_subset_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShaResult {
    pub original: ShaArm,
    pub augmented: ShaArm,
    pub head_count_delta: BTreeMap<FunctionLabel, i64>,
}

/// Runs probing and evaluation on the original inputs and on `mode`-augmented ones.
pub fn sha(cfg: &RunConfig, corpus: &Path, out: &Path, mode: Augment) -> Result<(RunManifest, ShaResult)> {
    let mut rec = Recorder::new("sha", out, cfg)?;
    let (mains, model) = prepare(&mut rec, cfg, corpus)?;
    rec.arg("augment", mode.name());
    let arm = |aug: Augment, rec: &mut Recorder| -> Result<(ShaArm, ImportanceMatrix)> {
        let data: Vec<MainQa> = mains.iter().map(|m| augment_spatial_cues(m, aug)).collect();
        let (train, test) = split(&data);
        let select = cfg.capture.token_select;
        let tr = build_probe_dataset(&train, &model, select, None)?;
        let te = build_probe_dataset(&test, &model, select, None)?;
        let (probe, _) = train_probe(&tr, &cfg.probe)?;
        let imp = importance_matrix(&probe, &te)?;
        rec.write(&format!("importance_{}.csv", aug.name().replace('+', "_")), imp.to_csv().as_bytes())?;
        let (report, _) = evaluate_with_plan(&model, &test, &HookSet::new(), None, RunMeta::default())?;
        let mut a = ShaArm {
            augment: aug.name().into(),
            accuracy: BTreeMap::new(),
            selected: BTreeMap::new(),
            test_subset_accuracy: subset_accuracy(&probe, &te)?,
        };
        for f in FunctionLabel::ALL {
            a.accuracy.insert(f.name().into(), report.accuracy(f));
            a.selected.insert(f.name().into(), imp.selected(f)?);
        }
        Ok((a, imp))
    };
    let (original, before) = arm(Augment::None, &mut rec)?;
    let (augmented, after) = arm(mode, &mut rec)?;
    let fs = [FunctionLabel::SpatialPerception, FunctionLabel::RelationalReasoning];
    let result = ShaResult { original, augmented, head_count_delta: head_count_delta(&before, &after, &fs)? };
    rec.json("sha.json", &result)?;
    Ok((rec.finish("manifest.json")?, result))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Svg,
}

/// csv copies the matrix file verbatim after checking it parses.
pub fn heatmap(importance: &Path, format: HeatmapFormat, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(importance)?;
    let imp = ImportanceMatrix::from_csv(&text)?;
    match format {
        HeatmapFormat::Csv => std::fs::write(out, text)?,
        HeatmapFormat::Svg => std::fs::write(out, heatmap::render_svg(&imp))?,
    }
    Ok(())
}

/// Markdown summary of an importance matrix and any evaluation reports.
pub fn report(importance: Option<&Path>, evals: &[PathBuf], threshold: f64) -> Result<String> {
    let mut s = String::new();
    if let Some(p) = importance {
        let imp = read_importance(p)?;
        let sp = sparsity_relative(&imp, threshold);
        writeln!(s, "## Heads ({})\n", p.display()).unwrap();
        writeln!(s, "| function | selected | sparsity |\n|---|---|---|").unwrap();
        for f in FunctionLabel::ALL {
            if f.index() >= imp.classes() {
                break;
            }
            let sel: Vec<String> = imp.selected(f)?.iter().map(|(l, m)| format!("L{l}H{m}")).collect();
            writeln!(s, "| {} | {} | {:.3} |", f.name(), sel.join(" "), sp[f.index()]).unwrap();
        }
        s.push('\n');
    }
    for p in evals {
        let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        writeln!(s, "## Accuracy ({})\n", p.display()).unwrap();
        writeln!(s, "| function | n | accuracy |\n|---|---|---|").unwrap();
        for (name, score) in &r.per_function {
            if score.n > 0 {
                writeln!(s, "| {name} | {} | {:.1} |", score.n, 100.0 * score.accuracy).unwrap();
            }
        }
        writeln!(s, "| overall | {} | {:.1} |", r.n, 100.0 * r.overall).unwrap();
        if let Some(a) = r.affected_rate {
            writeln!(s, "\naffected rate {:.3}", a).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}
