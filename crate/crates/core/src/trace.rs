//! Activation capture over corpus examples and probe dataset assembly.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{render_example, MainQa};
use crate::error::{Error, Result};
use crate::function::mask_of;
use crate::hashing::hash_json;
use crate::model::{HookSet, Model};
use crate::par;
use crate::vocab::Token;

/// Default number of generated tokens averaged per sample.
pub const DEFAULT_TOPK: usize = 3;
/// Generation budget per subquestion.
pub const MAX_NEW_TOKENS: usize = 4;

/// Per-head contributions at every generated position of one subquestion.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub example_id: u64,
    pub step: usize,
    pub generated: Vec<Token>,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    /// `[position][layer][head][d]`.
    pub activations: Vec<f64>,
    pub correct: bool,
}

impl ActivationRecord {
    pub fn num_generated(&self) -> usize {
        self.generated.len()
    }

    pub fn head(&self, pos: usize, layer: usize, head: usize) -> &[f64] {
        let off = ((pos * self.layers + layer) * self.heads + head) * self.d;
        &self.activations[off..off + self.d]
    }
}

/// Greedy generation with per-head capture; correctness is exact match with `gold`.
pub fn run_and_capture(
    model: &Model,
    prompt: &[Token],
    gold: &[Token],
    hooks: &HookSet,
    max_new: usize,
) -> Result<ActivationRecord> {
    let (generated, caps) = model.generate_capture(prompt, hooks, max_new, true)?;
    let c = &model.config;
    Ok(ActivationRecord {
        example_id: 0,
        step: 0,
        correct: generated == gold,
        generated,
        layers: c.num_layers,
        heads: c.heads_per_layer,
        d: c.embed_dim,
        activations: caps.concat(),
    })
}

/// Which generated positions feed a sample's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSelect {
    TopK(usize),
    First,
    Last,
    Full,
}

impl TokenSelect {
    pub fn parse(s: &str) -> Option<TokenSelect> {
        match s {
            "first" => Some(TokenSelect::First),
            "last" => Some(TokenSelect::Last),
            "full" => Some(TokenSelect::Full),
            _ => s.strip_prefix("top").unwrap_or(s).parse().ok().map(TokenSelect::TopK),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TokenSelect::TopK(k) => format!("top{k}"),
            TokenSelect::First => "first".into(),
            TokenSelect::Last => "last".into(),
            TokenSelect::Full => "full".into(),
        }
    }

    pub fn indices(&self, record: &ActivationRecord, ranking: &[usize]) -> Result<Vec<usize>> {
        let n = record.num_generated();
        if n == 0 {
            return Err(Error::EmptyAnswer);
        }
        Ok(match self {
            TokenSelect::TopK(k) => select_topk_tokens(record, ranking, *k)?,
            TokenSelect::First => vec![0],
            TokenSelect::Last => vec![n - 1],
            TokenSelect::Full => (0..n).collect(),
        })
    }
}

/// The first `min(k, n)` positions of `ranking` that exist in the record.
/// Positions missing from the ranking follow in ascending order.
pub fn select_topk_tokens(record: &ActivationRecord, ranking: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Precondition("k must be >= 1".into()));
    }
    let n = record.num_generated();
    if n == 0 {
        return Err(Error::EmptyAnswer);
    }
    let mut out: Vec<usize> = Vec::with_capacity(k.min(n));
    for i in ranking.iter().copied().chain(0..n) {
        if out.len() == k.min(n) {
            break;
        }
        if i < n && !out.contains(&i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Per-head mean over the selected positions, `[layer][head][d]`.
pub fn head_feature(record: &ActivationRecord, idx: &[usize]) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::Empty("token index set".into()));
    }
    let n = record.num_generated();
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidIndex { index: bad, len: n });
    }
    let block = record.layers * record.heads * record.d;
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    let mut out = vec![0.0; block];
    for &i in &sorted {
        for (o, v) in out.iter_mut().zip(&record.activations[i * block..(i + 1) * block]) {
            *o += v;
        }
    }
    let k = sorted.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// `[own ; mean over the layer's heads]` per head, giving `2d` per head.
pub fn augment_with_layer_summary(features: &[f64], layers: usize, heads: usize, d: usize) -> Result<Vec<f64>> {
    if features.len() != layers * heads * d {
        return Err(Error::Dimension(format!("expected {} features, got {}", layers * heads * d, features.len())));
    }
    let mut out = Vec::with_capacity(features.len() * 2);
    for l in 0..layers {
        let layer = &features[l * heads * d..(l + 1) * heads * d];
        let mut mean = vec![0.0; d];
        for m in 0..heads {
            for (a, v) in mean.iter_mut().zip(&layer[m * d..(m + 1) * d]) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= heads as f64);
        for m in 0..heads {
            out.extend_from_slice(&layer[m * d..(m + 1) * d]);
            out.extend_from_slice(&mean);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub example_id: u64,
    pub step: u32,
    /// Function label bitmask.
    pub labels: u8,
    /// `[layer][head][2d]`.
    pub features: Vec<f32>,
}

impl ProbeSample {
    /// The own (first) half of head `(layer, head)`.
    pub fn own(&self, heads: usize, d: usize, layer: usize, head: usize) -> &[f32] {
        let j = layer * heads + head;
        &self.features[j * 2 * d..j * 2 * d + d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub samples: Vec<ProbeSample>,
}

impl ProbeDataset {
    pub fn empty(layers: usize, heads: usize, d: usize) -> ProbeDataset {
        ProbeDataset { layers, heads, d, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Own half of head `(layer, head)` for sample `i`, widened to f64.
    pub fn head_vec(&self, i: usize, layer: usize, head: usize) -> Vec<f64> {
        self.samples[i].own(self.heads, self.d, layer, head).iter().map(|&v| v as f64).collect()
    }
}

/// One captured subquestion: features for both correct and incorrect generations.
#[derive(Debug, Clone, PartialEq)]
pub struct Captured {
    pub template_id: String,
    pub correct: bool,
    pub generated: Vec<Token>,
    pub sample: ProbeSample,
}

/// Captures every subquestion of `corpus` under `hooks`, in (example id, step) order.
pub fn capture_corpus(model: &Model, corpus: &[MainQa], hooks: &HookSet, select: TokenSelect) -> Result<Vec<Captured>> {
    let c = &model.config;
    let (l, m, d) = (c.num_layers, c.heads_per_layer, c.embed_dim);
    let jobs: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(i, main)| (0..main.subqafs.len()).map(move |k| (i, k)))
        .collect();
    let mut out = par::map(&jobs, |&(i, k)| -> Result<Captured> {
        let main = &corpus[i];
        let sub = &main.subqafs[k];
        let prompt = render_example(main, k)?;
        let mut rec = run_and_capture(model, &prompt, &sub.gold_generation(), hooks, MAX_NEW_TOKENS)?;
        rec.example_id = main.id;
        rec.step = sub.step;
        let ranking = main.importance.get(k).cloned().unwrap_or_default();
        let idx = select.indices(&rec, &ranking)?;
        let feat = augment_with_layer_summary(&head_feature(&rec, &idx)?, l, m, d)?;
        Ok(Captured {
            template_id: main.template_id.clone(),
            correct: rec.correct,
            generated: rec.generated,
            sample: ProbeSample {
                example_id: main.id,
                step: sub.step as u32,
                labels: mask_of(&sub.functions),
                features: feat.iter().map(|&v| v as f32).collect(),
            },
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|c| (c.sample.example_id, c.sample.step));
    Ok(out)
}

/// Keeps correct generations only.
pub fn dataset_from_captures(model: &Model, captured: &[Captured]) -> Result<ProbeDataset> {
    let c = &model.config;
    let samples: Vec<ProbeSample> = captured.iter().filter(|x| x.correct).map(|x| x.sample.clone()).collect();
    if samples.is_empty() {
        let templates: BTreeSet<String> = captured.iter().map(|x| x.template_id.clone()).collect();
        return Err(Error::EmptyDataset { templates: templates.into_iter().collect() });
    }
    Ok(ProbeDataset { layers: c.num_layers, heads: c.heads_per_layer, d: c.embed_dim, samples })
}

/// Sidecar describing what a cache was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format: String,
    pub model_hash: String,
    pub corpus_hash: String,
    pub token_select: String,
    pub samples: usize,
}

pub fn manifest_path(cache: &Path) -> PathBuf {
    let mut p = cache.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

/// Hash of the model's config and planted heads.
pub fn model_hash(model: &Model) -> String {
    hash_json(&(&model.config, &model.planted))
}

/// Captures (or loads from `cache` when its manifest matches) and returns
/// the correct-only dataset.
pub fn build_probe_dataset(
    corpus: &[MainQa],
    model: &Model,
    select: TokenSelect,
    cache: Option<&Path>,
) -> Result<ProbeDataset> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let manifest = CacheManifest {
        format: "HSC1".into(),
        model_hash: model_hash(model),
        corpus_hash: hash_json(corpus),
        token_select: select.label(),
        samples: 0,
    };
    if let Some(path) = cache {
        let mp = manifest_path(path);
        if path.exists() && mp.exists() {
            let old: CacheManifest = serde_json::from_slice(&std::fs::read(&mp)?)?;
            if (CacheManifest { samples: 0, ..old.clone() }) == manifest {
                let ds = read_cache(path)?;
                if ds.samples.len() == old.samples {
                    return Ok(ds);
                }
            }
        }
    }
    let captured = capture_corpus(model, corpus, &HookSet::new(), select)?;
    let ds = dataset_from_captures(model, &captured)?;
    if let Some(path) = cache {
        write_cache(path, &ds)?;
        let m = CacheManifest { samples: ds.samples.len(), ..manifest };
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&m)? + "\n")?;
    }
    Ok(ds)
}

const HSC1_HEADER: usize = 4 + 4 * 4 + 8;

fn sample_bytes(layers: usize, heads: usize, d: usize) -> usize {
    8 + 4 + 1 + layers * heads * 2 * d * 4
}

pub fn write_cache_to<W: Write>(mut w: W, ds: &ProbeDataset) -> Result<()> {
    w.write_all(b"HSC1")?;
    for v in [1u32, ds.layers as u32, ds.heads as u32, ds.d as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    let want = ds.layers * ds.heads * 2 * ds.d;
    for s in &ds.samples {
        if s.features.len() != want {
            return Err(Error::Dimension(format!("sample has {} features, expected {want}", s.features.len())));
        }
        w.write_all(&s.example_id.to_le_bytes())?;
        w.write_all(&s.step.to_le_bytes())?;
        w.write_all(&[s.labels])?;
        let mut buf = Vec::with_capacity(want * 4);
        for f in &s.features {
            buf.extend_from_slice(&f.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_cache_from<R: Read>(mut r: R) -> Result<ProbeDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |m: String| Error::CorruptCache(m);
    if buf.len() < HSC1_HEADER || &buf[..4] != b"HSC1" {
        return Err(bad("missing HSC1 header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    if u32_at(4) != 1 {
        return Err(bad(format!("unsupported version {}", u32_at(4))));
    }
    let (layers, heads, d) = (u32_at(8), u32_at(12), u32_at(16));
    let count = u64::from_le_bytes(buf[20..28].try_into().unwrap()) as usize;
    let per = sample_bytes(layers, heads, d);
    let expected = count.checked_mul(per).and_then(|x| x.checked_add(HSC1_HEADER));
    if expected != Some(buf.len()) {
        return Err(bad(format!(
            "length {} does not match header ({count} samples of {per} bytes)",
            buf.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for chunk in buf[HSC1_HEADER..].chunks_exact(per) {
        samples.push(ProbeSample {
            example_id: u64::from_le_bytes(chunk[0..8].try_into().unwrap()),
            step: u32::from_le_bytes(chunk[8..12].try_into().unwrap()),
            labels: chunk[12],
            features: chunk[13..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        });
    }
    Ok(ProbeDataset { layers, heads, d, samples })
}

pub fn write_cache(path: &Path, ds: &ProbeDataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cache_to(&mut f, ds)?;
    f.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<ProbeDataset> {
    read_cache_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize) -> ActivationRecord {
        ActivationRecord {
            example_id: 0,
            step: 1,
            generated: vec![Token::Eoa; n],
            layers: 1,
            heads: 2,
            d: 2,
            activations: (0..n * 4).map(|v| v as f64).collect(),
            correct: true,
        }
    }

    #[test]
    fn topk_follows_ranking() {
        let r = record(5);
        assert_eq!(select_topk_tokens(&r, &[2, 0, 4, 1, 3], 2).unwrap(), vec![2, 0]);
        assert_eq!(select_topk_tokens(&r, &[], 9).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(select_topk_tokens(&record(0), &[], 3), Err(Error::EmptyAnswer)));
    }

    #[test]
    fn mean_of_two_positions() {
        let r = record(2);
        let f = head_feature(&r, &[1, 0]).unwrap();
        assert_eq!(f, vec![2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(head_feature(&r, &[2]), Err(Error::InvalidIndex { .. })));
    }

    #[test]
    fn layer_summary_of_single_nonzero_head() {
        let out = augment_with_layer_summary(&[4.0, 8.0, 0.0, 0.0], 1, 2, 2).unwrap();
        assert_eq!(out, vec![4.0, 8.0, 2.0, 4.0, 0.0, 0.0, 2.0, 4.0]);
    }

    #[test]
    fn truncated_cache_is_detected() {
        let ds = ProbeDataset {
            layers: 1,
            heads: 1,
            d: 1,
            samples: vec![ProbeSample { example_id: 3, step: 2, labels: 5, features: vec![1.0, -2.5] }],
        };
        let mut buf = Vec::new();
        write_cache_to(&mut buf, &ds).unwrap();
        assert_eq!(read_cache_from(&buf[..]).unwrap(), ds);
        buf.pop();
        assert!(matches!(read_cache_from(&buf[..]), Err(Error::CorruptCache(_))));
    }
}
