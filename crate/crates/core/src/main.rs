use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use headprobe::cli::{self, HeadSource, HeatmapFormat, Mode};
use headprobe::config::RunConfig;
use headprobe::corpus::Augment;
use headprobe::trace::TokenSelect;
use headprobe::{Error, FunctionLabel, Result};

#[derive(Parser)]
#[command(name = "headprobe", version, about = "Probe, rank and intervene on attention heads of a planted-head transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mask scale for ablation.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Steering strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// Capture the top-k answer tokens (overrides the config's token selection).
    #[arg(long)]
    topk: Option<usize>,
    /// Relative sparsity threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(e) = self.epsilon {
            cfg.intervention.epsilon = e;
        }
        if let Some(a) = self.alpha {
            cfg.intervention.alpha = a;
        }
        if let Some(k) = self.topk {
            cfg.capture.token_select = TokenSelect::TopK(k);
        }
        if let Some(t) = self.threshold {
            cfg.intervention.sparsity_threshold = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ablate,
    Steer,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Elbow,
    Planted,
    Explicit,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Svg,
}

#[derive(Args)]
struct HeadArgs {
    /// Function whose heads are targeted, e.g. SpatialPerception.
    #[arg(long, default_value = "SpatialPerception")]
    function: String,
    #[arg(long, value_enum, default_value = "elbow")]
    heads: SourceArg,
    /// Importance CSV for `--heads elbow`.
    #[arg(long)]
    importance: Option<PathBuf>,
    /// Heads for `--heads explicit`, as `layer:head,...`.
    #[arg(long)]
    list: Option<String>,
}

impl HeadArgs {
    fn resolve(&self) -> Result<(FunctionLabel, HeadSource)> {
        let f = FunctionLabel::parse(&self.function)
            .ok_or_else(|| Error::Config(format!("unknown function `{}`", self.function)))?;
        let src = match self.heads {
            SourceArg::Elbow => HeadSource::Elbow(
                self.importance.clone().ok_or_else(|| Error::Config("--heads elbow needs --importance".into()))?,
            ),
            SourceArg::Planted => HeadSource::Planted,
            SourceArg::Explicit => HeadSource::Explicit(cli::parse_heads(
                self.list.as_deref().ok_or_else(|| Error::Config("--heads explicit needs --list".into()))?,
            )?),
        };
        Ok((f, src))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus file.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of main questions.
        #[arg(long)]
        mains: Option<usize>,
    },
    /// Capture, train the probe and write the importance CSV.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probe seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mask heads (or steer them) and evaluate against the baseline.
    Intervene {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ablate")]
        mode: ModeArg,
        #[command(flatten)]
        heads: HeadArgs,
        /// Seed for random heads.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Steer heads along correct-minus-incorrect activation directions.
    Steer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        heads: HeadArgs,
    },
    /// Accuracy versus number of masked heads, cognitive against random.
    SweepRatio {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        importance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "SpatialPerception")]
        function: String,
        /// Comma-separated K values.
        #[arg(long, default_value = "0,1,2,3,4,5,6,7,8")]
        ks: String,
    },
    /// Compare token-selection strategies for the probe features.
    SweepTokenPos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "first,last,full,top3")]
        selects: String,
    },
    /// Probe on original and cue-augmented inputs and compare head counts.
    Sha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// bbox, mask or bbox+mask.
        #[arg(long, default_value = "bbox+mask")]
        augment: String,
    },
    /// Render an importance CSV as csv or svg.
    Heatmap {
        #[arg(long)]
        importance: PathBuf,
        #[arg(long, value_enum, default_value = "svg")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown summary of an importance CSV and evaluation reports.
    Report {
        #[arg(long)]
        importance: Option<PathBuf>,
        /// Evaluation report JSON files.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.001)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| f(t.trim()).ok_or_else(|| Error::Config(format!("bad {what} `{t}`"))))
        .collect()
}

fn function(s: &str) -> Result<FunctionLabel> {
    FunctionLabel::parse(s).ok_or_else(|| Error::Config(format!("unknown function `{s}`")))
}

fn print_report(r: &cli::InterventionResult) {
    println!("heads {:?}", r.heads);
    for (name, s) in &r.report.per_function {
        if s.n > 0 {
            println!("{name:20} {:6.1} -> {:6.1}", 100.0 * r.baseline.accuracy(function(name).unwrap()), 100.0 * s.accuracy);
        }
    }
    if let Some(a) = r.report.affected_rate {
        println!("affected rate {a:.3}");
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus { common, out, seed, mains } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            if let Some(n) = mains {
                cfg.corpus.main_questions = n;
            }
            let m = cli::gen_corpus(&cfg, &out)?;
            println!("wrote {} ({} mains, {} subquestions)", out.display(), m.args["mains"], m.args["subquestions"]);
        }
        Command::Pipeline { common, corpus, out, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.probe.seed = s;
            }
            let p = cli::pipeline(&cfg, &corpus, &out)?;
            println!("test subset accuracy {:.4}", p.summary.test_subset_accuracy);
            for (f, heads) in &p.summary.selected {
                println!("{f:20} {heads:?}");
            }
        }
        Command::Intervene { common, corpus, out, mode, heads, seed } => {
            let cfg = common.load()?;
            let (f, src) = heads.resolve()?;
            let (_, r) = match mode {
                ModeArg::Ablate => cli::intervene(&cfg, &corpus, &out, Mode::Ablate, f, &src, seed)?,
                ModeArg::Random => cli::intervene(&cfg, &corpus, &out, Mode::Random, f, &src, seed)?,
                ModeArg::Steer => cli::steer(&cfg, &corpus, &out, f, &src)?,
            };
            print_report(&r);
        }
        Command::Steer { common, corpus, out, heads } => {
            let cfg = common.load()?;
            let (f, src) = heads.resolve()?;
            let (_, r) = cli::steer(&cfg, &corpus, &out, f, &src)?;
            print_report(&r);
        }
        Command::SweepRatio { common, corpus, importance, out, function: f, ks } => {
            let cfg = common.load()?;
            let ks = parse_list(&ks, "K", |t| t.parse().ok())?;
            let (_, rows) = cli::sweep_ratio(&cfg, &corpus, &importance, &out, function(&f)?, &ks)?;
            println!("k  cognitive  random");
            for r in rows {
                println!("{:<2} {:9.1} {:7.1}", r.k, 100.0 * r.cognitive, 100.0 * r.random);
            }
        }
        Command::SweepTokenPos { common, corpus, out, selects } => {
            let cfg = common.load()?;
            let selects = parse_list(&selects, "token selection", TokenSelect::parse)?;
            let (_, rows) = cli::sweep_token_pos(&cfg, &corpus, &out, &selects)?;
            for r in rows {
                println!(
                    "{:6} acc {:.4} sparsity {:.3} recovered {}/8",
                    r.select, r.test_subset_accuracy, r.mean_sparsity, r.functions_recovered
                );
            }
        }
        Command::Sha { common, corpus, out, augment } => {
            let cfg = common.load()?;
            let mode = Augment::parse(&augment).ok_or_else(|| Error::Config(format!("bad augment `{augment}`")))?;
            let (_, r) = cli::sha(&cfg, &corpus, &out, mode)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Heatmap { importance, format, out } => {
            let fmt = match format {
                FormatArg::Csv => HeatmapFormat::Csv,
                FormatArg::Svg => HeatmapFormat::Svg,
            };
            cli::heatmap(&importance, fmt, &out)?;
        }
        Command::Report { importance, evals, threshold, out } => {
            let text = cli::report(importance.as_deref(), &evals, threshold)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
