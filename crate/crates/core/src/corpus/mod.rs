//! Synthetic grid-world scenes and function-labelled question decompositions.

mod oracle;
mod render;
mod templates;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::function::FunctionLabel;
use crate::vocab::{Color, Food, Kind, Orient, Query, Size, Token};

pub use oracle::evaluate_query;
pub use render::render_example;
pub use templates::{compose_qa, TEMPLATES};

/// Record format version written to every corpus line.
pub const SCHEMA_VERSION: u32 = 1;
/// Default number of main questions.
pub const DEFAULT_MAIN_QUESTIONS: usize = 1142;
/// Reference subquestion count of the original benchmark.
pub const REFERENCE_SUBQUESTIONS: usize = 3759;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: Kind,
    pub color: Color,
    pub size: Size,
    pub orient: Orient,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn loc(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: usize,
    /// Sorted by (row, col).
    pub objects: Vec<SceneObject>,
    pub facts: Vec<(Kind, Food)>,
}

impl Scene {
    pub fn at(&self, r: usize, c: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.row == r && o.col == c)
    }

    /// The object of kind `k` if exactly one exists.
    pub fn unique_kind(&self, k: Kind) -> Option<&SceneObject> {
        let mut it = self.objects.iter().filter(|o| o.kind == k);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }

    pub fn unique_color(&self, c: Color) -> Option<&SceneObject> {
        let mut it = self.objects.iter().filter(|o| o.color == c);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }

    pub fn unique_kinds(&self) -> Vec<Kind> {
        Kind::ALL.iter().copied().filter(|&k| self.unique_kind(k).is_some()).collect()
    }

    pub fn unique_colors(&self) -> Vec<Color> {
        Color::ALL.iter().copied().filter(|&c| self.unique_color(c).is_some()).collect()
    }

    pub fn fact(&self, k: Kind) -> Option<Food> {
        self.facts.iter().find(|(fk, _)| *fk == k).map(|(_, f)| *f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid_size: usize,
    pub objects: usize,
    pub facts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { grid_size: 4, objects: 5, facts: 2 }
    }
}

/// Deterministic scene: distinct cells, uniformly drawn attributes, facts
/// preferring kinds present in the scene.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    let n = cfg.grid_size;
    if cfg.objects > n * n {
        return Err(Error::Capacity { objects: cfg.objects, cells: n * n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    cells.shuffle(&mut rng);
    let mut objects: Vec<SceneObject> = cells[..cfg.objects]
        .iter()
        .map(|&(row, col)| SceneObject {
            kind: Kind::ALL[rng.random_range(0..Kind::COUNT)],
            color: Color::ALL[rng.random_range(0..Color::COUNT)],
            size: Size::ALL[rng.random_range(0..Size::COUNT)],
            orient: Orient::ALL[rng.random_range(0..Orient::COUNT)],
            row,
            col,
        })
        .collect();
    objects.sort_by_key(|o| (o.row, o.col));
    let mut present: Vec<Kind> = Kind::ALL.iter().copied().filter(|k| objects.iter().any(|o| o.kind == *k)).collect();
    let mut absent: Vec<Kind> = Kind::ALL.iter().copied().filter(|k| !present.contains(k)).collect();
    present.shuffle(&mut rng);
    absent.shuffle(&mut rng);
    let facts = present
        .into_iter()
        .chain(absent)
        .take(cfg.facts.min(Kind::COUNT))
        .map(|k| (k, Food::ALL[rng.random_range(0..Food::COUNT)]))
        .collect();
    Ok(Scene { grid_size: n, objects, facts })
}

/// Input augmentation mode for spatial cues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    #[default]
    None,
    Bbox,
    Mask,
    BboxMask,
}

impl Augment {
    pub fn bbox(self) -> bool {
        matches!(self, Augment::Bbox | Augment::BboxMask)
    }

    pub fn mask(self) -> bool {
        matches!(self, Augment::Mask | Augment::BboxMask)
    }

    pub fn name(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Bbox => "bbox",
            Augment::Mask => "mask",
            Augment::BboxMask => "bbox+mask",
        }
    }

    pub fn parse(s: &str) -> Option<Augment> {
        match s {
            "none" => Some(Augment::None),
            "bbox" => Some(Augment::Bbox),
            "mask" => Some(Augment::Mask),
            "bbox+mask" | "bbox_mask" => Some(Augment::BboxMask),
            _ => None,
        }
    }
}

fn ser_query<S: Serializer>(q: &Query, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(q)
}

fn de_query<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Query, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

/// One reasoning step: question, gold answer and function labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQaf {
    pub step: usize,
    pub question: Vec<Token>,
    /// Structured query carried by the answer-start marker.
    #[serde(serialize_with = "ser_query", deserialize_with = "de_query")]
    pub query: Query,
    pub answer: Vec<Token>,
    pub functions: Vec<FunctionLabel>,
}

impl SubQaf {
    pub fn has(&self, f: FunctionLabel) -> bool {
        self.functions.contains(&f)
    }

    /// Gold generation including the end-of-answer token.
    pub fn gold_generation(&self) -> Vec<Token> {
        let mut g = self.answer.clone();
        g.push(Token::Eoa);
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainQa {
    pub schema_version: u32,
    pub id: u64,
    pub seed: u64,
    pub scene: Scene,
    pub template_id: String,
    pub main_q: Vec<Token>,
    pub main_a: Vec<Token>,
    /// Kinds named in the main question (targets of location markers).
    pub named: Vec<Kind>,
    pub subqafs: Vec<SubQaf>,
    /// Per subquestion: generated-answer positions, most important first.
    pub importance: Vec<Vec<usize>>,
    #[serde(default)]
    pub augment: Augment,
}

/// Returns a copy rendered with the given spatial-cue mode; answers are unchanged.
pub fn augment_spatial_cues(main: &MainQa, mode: Augment) -> MainQa {
    let mut m = main.clone();
    m.augment = mode;
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub main_questions: usize,
    pub scene: SceneConfig,
    /// Relative weights over [`TEMPLATES`], same order.
    pub template_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            main_questions: DEFAULT_MAIN_QUESTIONS,
            scene: SceneConfig::default(),
            template_weights: templates::DEFAULT_WEIGHTS.to_vec(),
            seed: 0,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `cfg.main_questions` mains; inapplicable draws are retried with
/// the next derived seed.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<MainQa>> {
    if cfg.template_weights.len() != TEMPLATES.len() || cfg.template_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config(format!(
            "corpus.template_weights must hold {} nonnegative values",
            TEMPLATES.len()
        )));
    }
    let total: f64 = cfg.template_weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("corpus.template_weights sum to zero".into()));
    }
    let mut out = Vec::with_capacity(cfg.main_questions);
    for i in 0..cfg.main_questions {
        let mut attempt = 0u64;
        loop {
            let seed = splitmix64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64) ^ (attempt << 40));
            let scene = generate_scene(seed, &cfg.scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
            let mut pick = rng.random::<f64>() * total;
            let mut t = TEMPLATES.len() - 1;
            for (j, w) in cfg.template_weights.iter().enumerate() {
                if pick < *w {
                    t = j;
                    break;
                }
                pick -= w;
            }
            match compose_qa(&scene, TEMPLATES[t], seed) {
                Ok(mut m) => {
                    m.id = i as u64;
                    out.push(m);
                    break;
                }
                Err(Error::Inapplicable { .. }) => attempt += 1,
                Err(e) => return Err(e),
            }
            if attempt > 10_000 {
                return Err(Error::Config("no applicable template found".into()));
            }
        }
    }
    Ok(out)
}

/// True for the 80% training side of the seed-based split.
pub fn is_train(main: &MainQa) -> bool {
    splitmix64(main.seed ^ 0xA5A5_A5A5) % 1000 < 800
}

pub fn split(corpus: &[MainQa]) -> (Vec<MainQa>, Vec<MainQa>) {
    corpus.iter().cloned().partition(is_train)
}

pub fn write_corpus_to<W: Write>(mut w: W, corpus: &[MainQa]) -> Result<()> {
    for m in corpus {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_corpus(path: &Path, corpus: &[MainQa]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus_to(f, corpus)
}

pub fn read_corpus_from<R: BufRead>(r: R) -> Result<Vec<MainQa>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MainQa = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("unsupported schema_version {}", m.schema_version),
            });
        }
        out.push(m);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<MainQa>> {
    read_corpus_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Count of subquestions carrying each label.
pub fn label_counts(corpus: &[MainQa]) -> [usize; FunctionLabel::COUNT] {
    let mut c = [0; FunctionLabel::COUNT];
    for m in corpus {
        for s in &m.subqafs {
            for f in &s.functions {
                c[f.index()] += 1;
            }
        }
    }
    c
}

pub fn subquestion_count(corpus: &[MainQa]) -> usize {
    corpus.iter().map(|m| m.subqafs.len()).sum()
}
