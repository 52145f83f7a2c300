//! Multi-label function probe over per-head features, its training loop,
//! gradient×activation head importance and elbow selection.
//!
//! Each head feature is `[own ; layer mean]` of length `2d`. A shared linear
//! projection maps every head to 64 dims, the concatenation feeds a 512-unit
//! ReLU layer with dropout, and a linear map produces one logit per function.
//!
//! The forward pass is exact but sparse: zero halves are skipped and heads of
//! a layer that share one layer-mean half are evaluated through the summed
//! weight block of that layer.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::function::FunctionLabel;
use crate::par;
use crate::trace::{ProbeDataset, ProbeSample};

pub const PROJ_DIM: usize = 64;
pub const HIDDEN: usize = 512;
pub const CLASSES: usize = FunctionLabel::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 100,
            dropout: 0.3,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("probe.learning_rate and probe.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("probe.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    /// Training-set subset accuracy after each epoch.
    pub accuracy: Vec<f64>,
}

/// Probe weights in one flat buffer: `P (2d×64)`, `b_P`, `W1 (64·L·M × 512)`,
/// `b1`, `W2 (512 × C)`, `b2`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    p: usize,
    bp: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

fn offsets(slots: usize, d: usize) -> Offsets {
    let p = 0;
    let bp = p + 2 * d * PROJ_DIM;
    let w1 = bp + PROJ_DIM;
    let b1 = w1 + PROJ_DIM * slots * HIDDEN;
    let w2 = b1 + HIDDEN;
    let b2 = w2 + HIDDEN * CLASSES;
    Offsets { p, bp, w1, b1, w2, b2, total: b2 + CLASSES }
}

/// Fresh probe: uniform weights in `±1/sqrt(fan_in)`, zero biases.
pub fn init_probe(layers: usize, heads: usize, d: usize, seed: u64) -> Result<ProbeModel> {
    if layers == 0 || heads == 0 || d == 0 {
        return Err(Error::Dimension("probe dimensions must be positive".into()));
    }
    let o = offsets(layers * heads, d);
    let mut params = vec![0.0; o.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
        let a = 1.0 / (fan_in as f64).sqrt();
        for v in &mut params[range] {
            *v = rng.random_range(-a..a);
        }
    };
    fill(o.p..o.bp, 2 * d);
    fill(o.w1..o.b1, PROJ_DIM * layers * heads);
    fill(o.w2..o.b2, HIDDEN);
    Ok(ProbeModel { layers, heads, d, seed, config_hash: [0; 32], params })
}

type Sparse = Vec<(usize, f64)>;

fn sparse(xs: impl Iterator<Item = f64>) -> Sparse {
    xs.enumerate().filter(|(_, v)| *v != 0.0).collect()
}

/// Sample features in the sparse form used by the forward pass.
#[derive(Debug, Clone)]
struct Compiled {
    /// Heads with a nonzero own half and/or an unshared nonzero layer half.
    terms: Vec<(usize, Sparse, Sparse)>,
    /// Per layer: the layer half shared by all its heads, when nonzero.
    shared: Vec<Option<Sparse>>,
}

fn compile(features: &[f64], layers: usize, heads: usize, d: usize) -> Compiled {
    let w = 2 * d;
    let mut terms = Vec::new();
    let mut shared = Vec::with_capacity(layers);
    for l in 0..layers {
        let half = |m: usize| &features[(l * heads + m) * w + d..(l * heads + m + 1) * w];
        let first = half(0);
        let same = (1..heads).all(|m| half(m) == first);
        let zero = first.iter().all(|v| *v == 0.0);
        shared.push(if same && !zero { Some(sparse(first.iter().copied())) } else { None });
        for m in 0..heads {
            let j = l * heads + m;
            let own = sparse(features[j * w..j * w + d].iter().copied());
            let lay = if same { Vec::new() } else { sparse(half(m).iter().copied()) };
            if !own.is_empty() || !lay.is_empty() {
                terms.push((j, own, lay));
            }
        }
    }
    Compiled { terms, shared }
}

fn to_f64(s: &ProbeSample) -> Vec<f64> {
    s.features.iter().map(|&v| v as f64).collect()
}

/// Per-batch derived weights.
struct BatchCache {
    /// Per layer `Σ_{j∈l} W1_j` (64 × 512), only where some sample shares it.
    layer_sum: Vec<Vec<f64>>,
    /// `Σ_j W1_j` (64 × 512).
    all_sum: Vec<f64>,
    /// `b1 + all_sumᵀ b_P`.
    a0: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
struct Pass {
    e: Vec<(usize, [f64; PROJ_DIM])>,
    u: Vec<(usize, [f64; PROJ_DIM])>,
    a: Vec<f64>,
    y: [f64; CLASSES],
}

#[inline]
fn axpy(acc: &mut [f64], x: f64, row: &[f64]) {
    for (a, r) in acc.iter_mut().zip(row) {
        *a += x * r;
    }
}

/// Dot product with eight interleaved partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

impl ProbeModel {
    fn o(&self) -> Offsets {
        offsets(self.slots(), self.d)
    }

    pub fn slots(&self) -> usize {
        self.layers * self.heads
    }

    pub fn feature_len(&self) -> usize {
        self.slots() * 2 * self.d
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_len() {
            return Err(Error::Dimension(format!(
                "sample has {} features, probe expects {}",
                features.len(),
                self.feature_len()
            )));
        }
        Ok(())
    }

    fn w1_block(&self, j: usize) -> &[f64] {
        let o = self.o();
        let start = o.w1 + j * PROJ_DIM * HIDDEN;
        &self.params[start..start + PROJ_DIM * HIDDEN]
    }

    fn p_row(&self, i: usize) -> &[f64] {
        let o = self.o();
        &self.params[o.p + i * PROJ_DIM..o.p + (i + 1) * PROJ_DIM]
    }

    fn batch_cache(&self, need_layers: &[bool]) -> BatchCache {
        let block = PROJ_DIM * HIDDEN;
        let mut layer_sum = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let mut s = vec![0.0; block];
            for m in 0..self.heads {
                add(&mut s, self.w1_block(l * self.heads + m));
            }
            layer_sum.push(s);
        }
        let mut cache = self.cache_from_sums(layer_sum);
        for (l, need) in need_layers.iter().enumerate() {
            if !need {
                cache.layer_sum[l] = Vec::new();
            }
        }
        cache
    }

    fn cache_from_sums(&self, layer_sum: Vec<Vec<f64>>) -> BatchCache {
        let o = self.o();
        let mut all_sum = vec![0.0; PROJ_DIM * HIDDEN];
        for s in &layer_sum {
            add(&mut all_sum, s);
        }
        let mut a0 = self.params[o.b1..o.b1 + HIDDEN].to_vec();
        let bp = &self.params[o.bp..o.bp + PROJ_DIM];
        for k in 0..PROJ_DIM {
            axpy(&mut a0, bp[k], &all_sum[k * HIDDEN..(k + 1) * HIDDEN]);
        }
        BatchCache { layer_sum, all_sum, a0 }
    }

    fn project(&self, own: &Sparse, lay: &Sparse) -> [f64; PROJ_DIM] {
        let mut z = [0.0; PROJ_DIM];
        for &(i, v) in own {
            axpy(&mut z, v, self.p_row(i));
        }
        for &(i, v) in lay {
            axpy(&mut z, v, self.p_row(self.d + i));
        }
        z
    }

    fn forward_compiled(&self, c: &Compiled, cache: &BatchCache, keep: Option<&[f64]>) -> Pass {
        let mut a = cache.a0.clone();
        let mut e = Vec::with_capacity(c.terms.len());
        for (j, own, lay) in &c.terms {
            let z = self.project(own, lay);
            add(&mut a, &lift(self.w1_block(*j), &z));
            e.push((*j, z));
        }
        let mut u = Vec::new();
        for (l, s) in c.shared.iter().enumerate() {
            if let Some(s) = s {
                let z = self.project(&Vec::new(), s);
                add(&mut a, &lift(&cache.layer_sum[l], &z));
                u.push((l, z));
            }
        }
        let (_, y) = self.output(&a, keep);
        Pass { e, u, a, y }
    }

    fn cache_for(&self, compiled: &[&Compiled]) -> BatchCache {
        let mut need = vec![false; self.layers];
        for c in compiled {
            for (l, s) in c.shared.iter().enumerate() {
                need[l] |= s.is_some();
            }
        }
        self.batch_cache(&need)
    }

    /// Pre-sigmoid class logits with dropout disabled.
    pub fn logits(&self, features: &[f64]) -> Result<[f64; CLASSES]> {
        self.check(features)?;
        let c = compile(features, self.layers, self.heads, self.d);
        let cache = self.cache_for(&[&c]);
        Ok(self.forward_compiled(&c, &cache, None).y)
    }

    /// Per-class sigmoid scores.
    pub fn predict(&self, features: &[f64]) -> Result<[f64; CLASSES]> {
        let y = self.logits(features)?;
        Ok(y.map(sigmoid))
    }

    /// Predicted label bitmask (score > 0.5).
    pub fn predict_mask(&self, features: &[f64]) -> Result<u8> {
        Ok(mask_of_scores(&self.predict(features)?))
    }

    /// Analytic gradient of logit `class` with respect to the raw features.
    pub fn feature_gradient(&self, features: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check(features)?;
        let c = compile(features, self.layers, self.heads, self.d);
        let cache = self.cache_for(&[&c]);
        let pass = self.forward_compiled(&c, &cache, None);
        let g = self.hidden_grad(&pass, class);
        let w = 2 * self.d;
        let mut out = vec![0.0; self.feature_len()];
        for j in 0..self.slots() {
            let blk = self.w1_block(j);
            let mut dz = [0.0; PROJ_DIM];
            for k in 0..PROJ_DIM {
                dz[k] = dot(&blk[k * HIDDEN..(k + 1) * HIDDEN], &g);
            }
            for i in 0..w {
                out[j * w + i] = dot(self.p_row(i), &dz);
            }
        }
        Ok(out)
    }

    /// `∂y_c/∂a`: ReLU mask times the class column of `W2`.
    fn hidden_grad(&self, pass: &Pass, class: usize) -> Vec<f64> {
        let o = self.o();
        (0..HIDDEN)
            .map(|i| if pass.a[i] > 0.0 { self.params[o.w2 + i * CLASSES + class] } else { 0.0 })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"HSP1")?;
        for v in [1u32, self.layers as u32, self.heads as u32, self.d as u32, PROJ_DIM as u32, HIDDEN as u32, CLASSES as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<ProbeModel> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::CorruptCache(m.to_string());
        if buf.len() < 4 + 7 * 4 + 8 + 32 + 8 || &buf[..4] != b"HSP1" {
            return Err(bad("missing HSP1 header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
        let hdr: Vec<usize> = (0..7).map(|i| u32_at(4 + 4 * i)).collect();
        if hdr[0] != 1 {
            return Err(bad("unsupported probe version"));
        }
        if hdr[4] != PROJ_DIM || hdr[5] != HIDDEN || hdr[6] != CLASSES {
            return Err(bad("probe layer sizes differ from this build"));
        }
        let (layers, heads, d) = (hdr[1], hdr[2], hdr[3]);
        let mut pos = 4 + 28;
        let seed = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
        pos += 8;
        let config_hash: [u8; 32] = buf[pos..pos + 32].try_into().unwrap();
        pos += 32;
        let n = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if n != offsets(layers * heads, d).total || buf.len() != pos + 8 * n {
            return Err(bad("probe blob length does not match its header"));
        }
        let params = buf[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ProbeModel { layers, heads, d, seed, config_hash, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProbeModel> {
        ProbeModel::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mask_of_scores(s: &[f64; CLASSES]) -> u8 {
    s.iter().enumerate().filter(|(_, v)| **v > 0.5).fold(0u8, |m, (i, _)| m | (1 << i))
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn bce(y: &[f64; CLASSES], labels: u8) -> f64 {
    (0..CLASSES)
        .map(|c| {
            let t = ((labels >> c) & 1) as f64;
            softplus(y[c]) - t * y[c]
        })
        .sum::<f64>()
        / CLASSES as f64
}

fn check_dataset(probe: &ProbeModel, data: &ProbeDataset) -> Result<()> {
    if data.layers != probe.layers || data.heads != probe.heads || data.d != probe.d {
        return Err(Error::Dimension(format!(
            "dataset extents ({}, {}, {}) differ from probe ({}, {}, {})",
            data.layers, data.heads, data.d, probe.layers, probe.heads, probe.d
        )));
    }
    Ok(())
}

/// Dataset features with each distinct per-head vector stored once.
struct Interned {
    /// Per head slot: distinct (own, unshared layer half) pairs.
    head_vecs: Vec<Vec<(Sparse, Sparse)>>,
    /// Per layer: distinct shared layer halves.
    layer_vecs: Vec<Vec<Sparse>>,
    /// Per sample: (slot, id) and (layer, id) references.
    terms: Vec<Vec<(usize, usize)>>,
    shared: Vec<Vec<(usize, usize)>>,
}

type Key = Vec<(usize, u64)>;

fn key(s: &Sparse) -> Key {
    s.iter().map(|&(i, v)| (i, v.to_bits())).collect()
}

fn intern(compiled: Vec<Compiled>, layers: usize, slots: usize) -> Interned {
    let mut head_ids: Vec<HashMap<(Key, Key), usize>> = vec![HashMap::new(); slots];
    let mut layer_ids: Vec<HashMap<Key, usize>> = vec![HashMap::new(); layers];
    let mut it = Interned {
        head_vecs: vec![Vec::new(); slots],
        layer_vecs: vec![Vec::new(); layers],
        terms: Vec::with_capacity(compiled.len()),
        shared: Vec::with_capacity(compiled.len()),
    };
    for c in compiled {
        let mut terms = Vec::with_capacity(c.terms.len());
        for (j, own, lay) in c.terms {
            let k = (key(&own), key(&lay));
            let vecs = &mut it.head_vecs[j];
            let id = *head_ids[j].entry(k).or_insert_with(|| {
                vecs.push((own, lay));
                vecs.len() - 1
            });
            terms.push((j, id));
        }
        let mut shared = Vec::new();
        for (l, s) in c.shared.into_iter().enumerate() {
            if let Some(s) = s {
                let vecs = &mut it.layer_vecs[l];
                let id = *layer_ids[l].entry(key(&s)).or_insert_with(|| {
                    vecs.push(s);
                    vecs.len() - 1
                });
                shared.push((l, id));
            }
        }
        it.terms.push(terms);
        it.shared.push(shared);
    }
    it
}

/// Samples of a batch sharing one distinct vector of a slot or layer.
struct Group {
    id: usize,
    members: Vec<usize>,
    z: [f64; PROJ_DIM],
}

/// Pre-activations of a set of samples, evaluated once per distinct head vector.
struct GroupedPass {
    a: Vec<Vec<f64>>,
    /// Per head slot with any term.
    heads: Vec<(usize, Vec<Group>)>,
    /// Per layer with a shared half.
    layers: Vec<(usize, Vec<Group>)>,
}

fn collect_groups(map: BTreeMap<(usize, usize), Vec<usize>>, mut project: impl FnMut(usize, usize) -> [f64; PROJ_DIM]) -> Vec<(usize, Vec<Group>)> {
    let mut out: Vec<(usize, Vec<Group>)> = Vec::new();
    for ((j, id), members) in map {
        let g = Group { id, members, z: project(j, id) };
        match out.last_mut() {
            Some((last, gs)) if *last == j => gs.push(g),
            _ => out.push((j, vec![g])),
        }
    }
    out
}

impl ProbeModel {
    fn grouped_pre(&self, it: &Interned, idx: &[usize], cache: &BatchCache) -> GroupedPass {
        let mut hg: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut lg: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (pos, &i) in idx.iter().enumerate() {
            for &t in &it.terms[i] {
                hg.entry(t).or_default().push(pos);
            }
            for &t in &it.shared[i] {
                lg.entry(t).or_default().push(pos);
            }
        }
        let heads = collect_groups(hg, |j, id| {
            let (own, lay) = &it.head_vecs[j][id];
            self.project(own, lay)
        });
        let layers = collect_groups(lg, |l, id| self.project(&Vec::new(), &it.layer_vecs[l][id]));
        // Per sample the additions run in slot order, then layer order,
        // matching the single-sample forward.
        let mut a = vec![cache.a0.clone(); idx.len()];
        for (j, groups) in &heads {
            for (g, r) in groups.iter().zip(lift_many(self.w1_block(*j), groups)) {
                for &p in &g.members {
                    add(&mut a[p], &r);
                }
            }
        }
        for (l, groups) in &layers {
            for (g, r) in groups.iter().zip(lift_many(&cache.layer_sum[*l], groups)) {
                for &p in &g.members {
                    add(&mut a[p], &r);
                }
            }
        }
        GroupedPass { a, heads, layers }
    }

    fn output(&self, a: &[f64], keep: Option<&[f64]>) -> (Vec<f64>, [f64; CLASSES]) {
        let o = self.o();
        let mut h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        if let Some(keep) = keep {
            for (hv, k) in h.iter_mut().zip(keep) {
                *hv *= k;
            }
        }
        let mut y = [0.0; CLASSES];
        y.copy_from_slice(&self.params[o.b2..o.b2 + CLASSES]);
        let w2 = &self.params[o.w2..o.b2];
        for (hi, hv) in h.iter().enumerate() {
            if *hv != 0.0 {
                axpy(&mut y, *hv, &w2[hi * CLASSES..(hi + 1) * CLASSES]);
            }
        }
        (h, y)
    }
}

/// `Wᵀz` for a 64 × 512 block.
fn lift(block: &[f64], z: &[f64; PROJ_DIM]) -> Vec<f64> {
    let mut r = vec![0.0; HIDDEN];
    for k in 0..PROJ_DIM {
        if z[k] != 0.0 {
            axpy(&mut r, z[k], &block[k * HIDDEN..(k + 1) * HIDDEN]);
        }
    }
    r
}

/// [`lift`] for several projections, reading each block row once.
fn lift_many(block: &[f64], groups: &[Group]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; HIDDEN]; groups.len()];
    for k in 0..PROJ_DIM {
        let row = &block[k * HIDDEN..(k + 1) * HIDDEN];
        for (r, g) in out.iter_mut().zip(groups) {
            if g.z[k] != 0.0 {
                axpy(r, g.z[k], row);
            }
        }
    }
    out
}

/// For each group, `G += z ⊗ δ` and `W·δ`, reading each block row once.
fn backprop_many(w: &[f64], g: &mut [f64], groups: &[Group], deltas: &[Vec<f64>]) -> Vec<[f64; PROJ_DIM]> {
    let mut out = vec![[0.0; PROJ_DIM]; groups.len()];
    for k in 0..PROJ_DIM {
        let row = k * HIDDEN..(k + 1) * HIDDEN;
        let wr = &w[row.clone()];
        let gr = &mut g[row];
        for ((o, grp), delta) in out.iter_mut().zip(groups).zip(deltas) {
            o[k] = dot(wr, delta);
            if grp.z[k] != 0.0 {
                axpy(gr, grp.z[k], delta);
            }
        }
    }
    out
}

/// `W·δ` for a 64 × 512 block.
fn lower(block: &[f64], delta: &[f64]) -> [f64; PROJ_DIM] {
    let mut out = [0.0; PROJ_DIM];
    for k in 0..PROJ_DIM {
        out[k] = dot(&block[k * HIDDEN..(k + 1) * HIDDEN], delta);
    }
    out
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn outer_add(acc: &mut [f64], z: &[f64; PROJ_DIM], delta: &[f64]) {
    for k in 0..PROJ_DIM {
        if z[k] != 0.0 {
            axpy(&mut acc[k * HIDDEN..(k + 1) * HIDDEN], z[k], delta);
        }
    }
}

fn sum_rows(rows: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; HIDDEN];
    for &p in members {
        add(&mut s, &rows[p]);
    }
    s
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Mini-batch Adam on mean binary cross-entropy. Returns the trained probe
/// and per-epoch history.
pub fn train_probe(data: &ProbeDataset, config: &TrainConfig) -> Result<(ProbeModel, TrainHistory)> {
    let probe = init_probe(data.layers, data.heads, data.d, config.seed)?;
    train_from(probe, data, config)
}

/// Continues training from `probe`.
pub fn train_from(
    mut probe: ProbeModel,
    data: &ProbeDataset,
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory)> {
    config.validate()?;
    check_dataset(&probe, data)?;
    probe.config_hash = config.hash();
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((probe, history));
    }
    if data.samples.is_empty() {
        return Err(Error::EmptyDataset { templates: Vec::new() });
    }
    let it = intern_dataset(data);
    let o = probe.o();
    let n_params = probe.params.len();
    let mut adam = Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD0D0_5EED);
    let keep_p = 1.0 - config.dropout;
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    // Dense gradient outside W1; W1 gradients live in per-block buffers.
    let mut grad = vec![0.0; n_params];
    let block = PROJ_DIM * HIDDEN;
    let mut cache = probe.batch_cache(&vec![true; probe.layers]);
    // Moment owner per slot that carries no term in any sample: the first
    // such slot of its layer.
    let moment_owner: Vec<Option<usize>> = (0..probe.slots())
        .map(|j| {
            let l = j / probe.heads;
            let free = |s: usize| it.head_vecs[s].is_empty();
            if free(j) {
                (l * probe.heads..(l + 1) * probe.heads).find(|&s| free(s))
            } else {
                None
            }
        })
        .collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let masks: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| {
                    (0..HIDDEN)
                        .map(|_| {
                            if config.dropout == 0.0 || rng.random::<f64>() < keep_p {
                                1.0 / keep_p
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let pass = probe.grouped_pre(&it, batch, &cache);
            grad[..o.w1].iter_mut().for_each(|g| *g = 0.0);
            grad[o.b1..].iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (batch.len() * CLASSES) as f64;

            let mut das = Vec::with_capacity(batch.len());
            for (pos, &si) in batch.iter().enumerate() {
                let labels = data.samples[si].labels;
                let (h, y) = probe.output(&pass.a[pos], Some(&masks[pos]));
                let l = bce(&y, labels);
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                loss_sum += l;
                let mut dy = [0.0; CLASSES];
                for k in 0..CLASSES {
                    let t = ((labels >> k) & 1) as f64;
                    dy[k] = (sigmoid(y[k]) - t) * scale;
                    grad[o.b2 + k] += dy[k];
                }
                let mut da = vec![0.0; HIDDEN];
                let w2 = &probe.params[o.w2..o.b2];
                let gw2 = &mut grad[o.w2..o.b2];
                for i in 0..HIDDEN {
                    if h[i] != 0.0 {
                        axpy(&mut gw2[i * CLASSES..(i + 1) * CLASSES], h[i], &dy);
                    }
                    if pass.a[pos][i] > 0.0 {
                        da[i] = dot(&w2[i * CLASSES..(i + 1) * CLASSES], &dy) * masks[pos][i];
                    }
                }
                add(&mut grad[o.b1..o.b1 + HIDDEN], &da);
                das.push(da);
            }

            let mut block_grad: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (j, groups) in &pass.heads {
                let deltas: Vec<Vec<f64>> = groups.iter().map(|g| sum_rows(&das, &g.members)).collect();
                let start = o.w1 + j * block;
                let gb = block_grad.entry(*j).or_insert_with(|| vec![0.0; block]);
                let dzs = backprop_many(&probe.params[start..start + block], gb, groups, &deltas);
                for (g, dz) in groups.iter().zip(&dzs) {
                    let (own, lay) = &it.head_vecs[*j][g.id];
                    for &(i, v) in own {
                        axpy(&mut grad[o.p + i * PROJ_DIM..o.p + (i + 1) * PROJ_DIM], v, dz);
                    }
                    for &(i, v) in lay {
                        let r = o.p + (probe.d + i) * PROJ_DIM;
                        axpy(&mut grad[r..r + PROJ_DIM], v, dz);
                    }
                }
            }
            // Rank-one terms shared by every block of a layer, plus the
            // projection bias reaching every slot.
            let all_members: Vec<usize> = (0..batch.len()).collect();
            let da_sum = sum_rows(&das, &all_members);
            let dbp = lower(&cache.all_sum, &da_sum);
            add(&mut grad[o.bp..o.bp + PROJ_DIM], &dbp);
            let mut bp = [0.0; PROJ_DIM];
            bp.copy_from_slice(&probe.params[o.bp..o.bp + PROJ_DIM]);
            let mut layer_grad: Vec<Vec<f64>> = vec![vec![0.0; block]; probe.layers];
            for lg in layer_grad.iter_mut() {
                outer_add(lg, &bp, &da_sum);
            }
            for (l, groups) in &pass.layers {
                let deltas: Vec<Vec<f64>> = groups.iter().map(|g| sum_rows(&das, &g.members)).collect();
                let dus = backprop_many(&cache.layer_sum[*l], &mut layer_grad[*l], groups, &deltas);
                for (g, du) in groups.iter().zip(&dus) {
                    for &(i, v) in &it.layer_vecs[*l][g.id] {
                        let r = o.p + (probe.d + i) * PROJ_DIM;
                        axpy(&mut grad[r..r + PROJ_DIM], v, du);
                    }
                }
            }
            adam.t += 1;
            let hp = AdamStep::new(config, adam.t);
            let (layers, heads) = (probe.layers, probe.heads);
            let (head, rest) = probe.params.split_at_mut(o.w1);
            let (w1, tail) = rest.split_at_mut(o.b1 - o.w1);
            hp.apply(head, &grad[..o.w1], &mut adam.m[..o.w1], &mut adam.v[..o.w1]);
            hp.apply(tail, &grad[o.b1..], &mut adam.m[o.b1..], &mut adam.v[o.b1..]);
            let mut sums = vec![vec![0.0; block]; layers];
            let mut shared_delta: Vec<Option<Vec<f64>>> = vec![None; layers];
            for j in 0..layers * heads {
                let l = j / heads;
                let r = o.w1 + j * block..o.w1 + (j + 1) * block;
                let w = &mut w1[j * block..(j + 1) * block];
                if let Some(rep) = moment_owner[j] {
                    // Slots that never carry a term see the identical gradient,
                    // so they share one set of moments and one update.
                    if shared_delta[l].is_none() {
                        let rr = o.w1 + rep * block..o.w1 + (rep + 1) * block;
                        let mut d = vec![0.0; block];
                        hp.delta(&layer_grad[l], &mut adam.m[rr.clone()], &mut adam.v[rr], &mut d);
                        shared_delta[l] = Some(d);
                    }
                    for (p, d) in w.iter_mut().zip(shared_delta[l].as_ref().unwrap()) {
                        *p -= d;
                    }
                } else {
                    let (m, v) = (&mut adam.m[r.clone()], &mut adam.v[r]);
                    match block_grad.get(&j) {
                        Some(g) => hp.apply_sum(w, &layer_grad[l], g, m, v),
                        None => hp.apply(w, &layer_grad[l], m, v),
                    }
                }
                add(&mut sums[l], w);
            }
            cache = probe.cache_from_sums(sums);
        }
        let mean_loss = loss_sum / data.samples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.loss.push(mean_loss);
        history.accuracy.push(accuracy_interned(&probe, &it, data));
        log::debug!("epoch {epoch}: loss {mean_loss:.6}");
    }
    Ok((probe, history))
}

fn intern_dataset(data: &ProbeDataset) -> Interned {
    let compiled: Vec<Compiled> = par::map(&data.samples, |s| compile(&to_f64(s), data.layers, data.heads, data.d));
    intern(compiled, data.layers, data.layers * data.heads)
}

fn masks_interned(probe: &ProbeModel, it: &Interned, n: usize) -> Vec<u8> {
    let idx: Vec<usize> = (0..n).collect();
    let cache = probe.batch_cache(&vec![true; probe.layers]);
    let pass = probe.grouped_pre(it, &idx, &cache);
    pass.a.iter().map(|a| mask_of_scores(&probe.output(a, None).1.map(sigmoid))).collect()
}

fn accuracy_interned(probe: &ProbeModel, it: &Interned, data: &ProbeDataset) -> f64 {
    let pred = masks_interned(probe, it, data.samples.len());
    let hits = pred.iter().zip(&data.samples).filter(|(p, s)| **p == s.labels).count();
    hits as f64 / data.samples.len() as f64
}

/// Bias-corrected Adam constants for one step.
struct AdamStep {
    b1: f64,
    b2: f64,
    step: f64,
    inv_b2t: f64,
    eps: f64,
}

impl AdamStep {
    fn new(c: &TrainConfig, t: i32) -> AdamStep {
        AdamStep {
            b1: c.beta1,
            b2: c.beta2,
            step: c.learning_rate / (1.0 - c.beta1.powi(t)),
            inv_b2t: 1.0 / (1.0 - c.beta2.powi(t)),
            eps: c.adam_eps,
        }
    }

    #[inline]
    fn one(&self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = self.b1 * *m + (1.0 - self.b1) * g;
        *v = self.b2 * *v + (1.0 - self.b2) * g * g;
        *p -= self.step * *m / ((*v * self.inv_b2t).sqrt() + self.eps);
    }

    fn apply(&self, params: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]) {
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            self.one(p, *g, m, v);
        }
    }

    /// Updates the moments and writes the step to subtract into `out`.
    fn delta(&self, grad: &[f64], m: &mut [f64], v: &mut [f64], out: &mut [f64]) {
        for (((o, g), m), v) in out.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            *o = self.step * *m / ((*v * self.inv_b2t).sqrt() + self.eps);
        }
    }

    /// Same with the gradient given as `a + b`.
    fn apply_sum(&self, params: &mut [f64], a: &[f64], b: &[f64], m: &mut [f64], v: &mut [f64]) {
        for ((((p, x), y), m), v) in params.iter_mut().zip(a).zip(b).zip(m.iter_mut()).zip(v.iter_mut()) {
            self.one(p, x + y, m, v);
        }
    }
}

/// Predicted label masks for every sample.
pub fn predict_all(probe: &ProbeModel, data: &ProbeDataset) -> Result<Vec<u8>> {
    check_dataset(probe, data)?;
    let it = intern_dataset(data);
    Ok(masks_interned(probe, &it, data.samples.len()))
}

/// Fraction of samples whose predicted label set equals the true set.
pub fn subset_accuracy(probe: &ProbeModel, data: &ProbeDataset) -> Result<f64> {
    if data.samples.is_empty() {
        return Ok(0.0);
    }
    let pred = predict_all(probe, data)?;
    let hits = pred.iter().zip(&data.samples).filter(|(p, s)| **p == s.labels).count();
    Ok(hits as f64 / data.samples.len() as f64)
}

/// `C × (L·M)` head importance; column `l·M + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub layers: usize,
    pub heads: usize,
    pub values: Vec<Vec<f64>>,
}

impl ImportanceMatrix {
    pub fn new(layers: usize, heads: usize, values: Vec<Vec<f64>>) -> Result<ImportanceMatrix> {
        if values.iter().any(|r| r.len() != layers * heads) {
            return Err(Error::Dimension("importance rows must have L·M entries".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite importance".into()));
        }
        Ok(ImportanceMatrix { layers, heads, values })
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c]
    }

    pub fn get(&self, c: usize, layer: usize, head: usize) -> f64 {
        self.values[c][layer * self.heads + head]
    }

    pub fn coord(&self, column: usize) -> (usize, usize) {
        (column / self.heads, column % self.heads)
    }

    /// Heads chosen by [`elbow_select`] for function `f`, as (layer, head).
    pub fn selected(&self, f: FunctionLabel) -> Result<Vec<(usize, usize)>> {
        Ok(elbow_select(self.row(f.index()))?.into_iter().map(|j| self.coord(j)).collect())
    }

    /// Column indices of `f`'s row in descending importance (ties by index).
    pub fn ranking(&self, f: FunctionLabel) -> Vec<usize> {
        descending(self.row(f.index()))
    }

    /// One function's row as `L` lines of `M` comma-separated values.
    pub fn grid_csv(&self, c: usize) -> String {
        let mut s = String::new();
        for l in 0..self.layers {
            let row: Vec<String> = (0..self.heads).map(|m| format!("{:.12e}", self.get(c, l, m))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// All functions: header `function,layer,h0..h{M-1}` then one line per (function, layer).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("function,layer");
        for m in 0..self.heads {
            s.push_str(&format!(",h{m}"));
        }
        s.push('\n');
        for c in 0..self.classes() {
            let name = FunctionLabel::from_index(c).map(|f| f.name()).unwrap_or("class");
            for l in 0..self.layers {
                s.push_str(&format!("{name},{l}"));
                for m in 0..self.heads {
                    s.push_str(&format!(",{:.12e}", self.get(c, l, m)));
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<ImportanceMatrix> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty csv".into() })?;
        let heads = header.split(',').count().saturating_sub(2);
        if heads == 0 || !header.starts_with("function,layer") {
            return Err(Error::Parse { line: 1, msg: "expected header `function,layer,h0,...`".into() });
        }
        let mut rows: Vec<(String, usize, Vec<f64>)> = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != heads + 2 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected {} fields", heads + 2) });
            }
            let layer = f[1].parse().map_err(|_| Error::Parse { line: i + 1, msg: "bad layer".into() })?;
            let vals = f[2..]
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            rows.push((f[0].to_string(), layer, vals));
        }
        let mut names: Vec<String> = Vec::new();
        for (n, _, _) in &rows {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
        let layers = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut values = vec![vec![0.0; layers * heads]; names.len()];
        for (n, l, v) in rows {
            let c = names.iter().position(|x| *x == n).unwrap();
            values[c][l * heads..(l + 1) * heads].copy_from_slice(&v);
        }
        ImportanceMatrix::new(layers, heads, values)
    }
}

/// `I[c][j] = mean over samples labelled c of Σ_i (∂y_c/∂x_{j,i}) · x_{j,i}`;
/// rows of classes with no samples are zero.
///
/// Because the projection is linear this equals `(z_j − b_P) · W1_j g_c`,
/// where `g_c` is the ReLU-masked class column of `W2`.
pub fn importance_matrix(probe: &ProbeModel, data: &ProbeDataset) -> Result<ImportanceMatrix> {
    check_dataset(probe, data)?;
    if data.samples.is_empty() {
        return Err(Error::EmptyDataset { templates: Vec::new() });
    }
    let slots = probe.slots();
    let per_sample: Vec<Vec<f64>> = par::map(&data.samples, |s| {
        let c = compile(&to_f64(s), probe.layers, probe.heads, probe.d);
        let cache = probe.cache_for(&[&c]);
        let pass = probe.forward_compiled(&c, &cache, None);
        let mut zs: Vec<Option<[f64; PROJ_DIM]>> = vec![None; slots];
        for (j, z) in &pass.e {
            zs[*j] = Some(*z);
        }
        for (l, u) in &pass.u {
            for m in 0..probe.heads {
                let j = l * probe.heads + m;
                let mut z = zs[j].unwrap_or([0.0; PROJ_DIM]);
                for k in 0..PROJ_DIM {
                    z[k] += u[k];
                }
                zs[j] = Some(z);
            }
        }
        let gs: Vec<Vec<f64>> = (0..CLASSES).map(|c| probe.hidden_grad(&pass, c)).collect();
        let mut out = vec![0.0; CLASSES * slots];
        for (j, z) in zs.iter().enumerate() {
            let Some(z) = z else { continue };
            let blk = probe.w1_block(j);
            let mut r = vec![0.0; HIDDEN];
            for k in 0..PROJ_DIM {
                if z[k] != 0.0 {
                    axpy(&mut r, z[k], &blk[k * HIDDEN..(k + 1) * HIDDEN]);
                }
            }
            for (c, g) in gs.iter().enumerate() {
                out[c * slots + j] = dot(&r, g);
            }
        }
        out
    });
    let mut sum = vec![0.0; CLASSES * slots];
    let mut count = [0usize; CLASSES];
    for (s, row) in data.samples.iter().zip(&per_sample) {
        for c in 0..CLASSES {
            if s.labels & (1 << c) == 0 {
                continue;
            }
            count[c] += 1;
            for (a, v) in sum[c * slots..(c + 1) * slots].iter_mut().zip(&row[c * slots..(c + 1) * slots]) {
                *a += v;
            }
        }
    }
    let values = (0..CLASSES)
        .map(|c| {
            let n = count[c].max(1) as f64;
            sum[c * slots..(c + 1) * slots].iter().map(|v| v / n).collect()
        })
        .collect();
    ImportanceMatrix::new(probe.layers, probe.heads, values)
}

fn descending(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Heads ranked before the point of the descending curve farthest from the
/// chord joining its endpoints (both axes scaled to [0, 1]).
pub fn elbow_select(row: &[f64]) -> Result<Vec<usize>> {
    if row.is_empty() {
        return Err(Error::Empty("importance row".into()));
    }
    let order = descending(row);
    let n = row.len();
    if n <= 2 {
        return Ok(vec![order[0]]);
    }
    let hi = row[order[0]];
    let lo = row[order[n - 1]];
    let span = hi - lo;
    if !(span > 0.0) {
        return Ok(vec![order[0]]);
    }
    let mut best = (0.0f64, 0usize);
    for (i, &j) in order.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = (row[j] - lo) / span;
        let dist = (x + y - 1.0).abs() / std::f64::consts::SQRT_2;
        if dist > best.0 {
            best = (dist, i);
        }
    }
    if best.0 <= 1e-9 || best.1 == 0 {
        return Ok(vec![order[0]]);
    }
    Ok(order[..best.1].to_vec())
}

/// Max relative error between analytic and central-difference gradients of
/// every class logit over `coords` random feature coordinates. Coordinates
/// whose perturbation crosses a ReLU kink are skipped.
pub fn grad_check(probe: &ProbeModel, features: &[f64], h: f64, coords: usize, seed: u64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Precondition("step h must be > 0".into()));
    }
    probe.check(features)?;
    let grads: Vec<Vec<f64>> = (0..CLASSES).map(|c| probe.feature_gradient(features, c)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let active = |x: &[f64]| -> Vec<bool> {
        let c = compile(x, probe.layers, probe.heads, probe.d);
        let cache = probe.cache_for(&[&c]);
        probe.forward_compiled(&c, &cache, None).a.iter().map(|v| *v > 0.0).collect()
    };
    let base = active(features);
    let mut x = features.to_vec();
    for _ in 0..coords {
        let i = rng.random_range(0..x.len());
        let orig = x[i];
        x[i] = orig + h;
        let plus_mask = active(&x);
        let yp = probe.logits(&x)?;
        x[i] = orig - h;
        let minus_mask = active(&x);
        let ym = probe.logits(&x)?;
        x[i] = orig;
        if plus_mask != base || minus_mask != base {
            continue;
        }
        for c in 0..CLASSES {
            let num = (yp[c] - ym[c]) / (2.0 * h);
            let ana = grads[c][i];
            let err = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Convenience: fresh probe and a random dense sample for gradient checks.
pub fn random_pair(layers: usize, heads: usize, d: usize, seed: u64) -> Result<(ProbeModel, Vec<f64>)> {
    let probe = init_probe(layers, heads, d, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51));
    let x = (0..layers * heads * 2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok((probe, x))
}

