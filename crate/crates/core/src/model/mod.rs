//! Decoder-only transformer with hand-planted attention heads.
//!
//! Weights are constructed from [`PlantedHeadSpec`]s rather than learned. Each
//! head's residual-stream contribution (after its `W_o` slice) is a hook site.

pub mod ffn;
pub mod hooks;
pub mod layout;
pub mod spec;

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::FunctionLabel;
use crate::vocab::{CellContent, Kind, Payload, Token, Vocab};

pub use hooks::{Hook, HookSet};
pub use layout::{ChannelLayout, Group, TOKEN_TYPES};
pub use spec::{default_registry, KeyType, PlantedHeadSpec, DEFAULT_GAIN};

use ffn::Readout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub grid_size: usize,
    pub max_steps: usize,
    pub max_seq_len: usize,
    /// Amplitude of every copy path through `W_o`.
    pub value_gain: f64,
    /// Logit scale of the unembedding.
    pub readout_gain: f64,
    /// Layer after whose attention the readout rule runs.
    pub readout_layer: usize,
    /// Evidence level (in readout units) below which `<null>` wins.
    pub null_level: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            heads_per_layer: 8,
            embed_dim: 256,
            head_dim: 32,
            grid_size: 4,
            max_steps: 6,
            max_seq_len: 192,
            value_gain: 128.0,
            readout_gain: 10.0,
            readout_layer: 1,
            null_level: 0.75,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout::standard(self.grid_size, self.max_steps)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.grid_size, self.max_steps)
    }

    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_layers == 0 || self.heads_per_layer == 0 || self.head_dim == 0 {
            return bad("num_layers, heads_per_layer and head_dim must be positive");
        }
        if self.embed_dim != self.heads_per_layer * self.head_dim {
            return bad("embed_dim must equal heads_per_layer * head_dim");
        }
        if self.grid_size == 0 || self.max_steps == 0 || self.max_steps > 8 {
            return bad("grid_size must be positive and max_steps in 1..=8");
        }
        if self.readout_layer >= self.num_layers {
            return bad("readout_layer must be < num_layers");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if !(self.value_gain > 0.0) || !(self.readout_gain > 0.0) {
            return bad("value_gain and readout_gain must be positive");
        }
        if !(self.null_level > 0.0 && self.null_level < 1.0) {
            return bad("null_level must lie in (0, 1)");
        }
        self.layout().validate(self.embed_dim)
    }
}

/// Dense weights of one head plus their nonzero entries.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// This head's `d_h × d` slice of the layer's output map.
    pub w_o: Array2<f64>,
    q_terms: Vec<(usize, usize, f64)>,
    k_terms: Vec<(usize, usize, f64)>,
    v_terms: Vec<(usize, usize, f64)>,
    o_terms: Vec<Vec<(usize, f64)>>,
    inert: bool,
}

fn nonzeros(w: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for ((r, c), &v) in w.indexed_iter() {
        if v != 0.0 {
            out.push((r, c, v));
        }
    }
    out
}

impl HeadWeights {
    fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>, w_o: Array2<f64>) -> HeadWeights {
        let dh = w_o.nrows();
        let mut o_terms = vec![Vec::new(); dh];
        for (r, c, v) in nonzeros(&w_o) {
            o_terms[r].push((c, v));
        }
        let inert = w_v.iter().all(|&v| v == 0.0);
        HeadWeights {
            q_terms: nonzeros(&w_q),
            k_terms: nonzeros(&w_k),
            v_terms: nonzeros(&w_v),
            o_terms,
            inert,
            w_q,
            w_k,
            w_v,
            w_o,
        }
    }

    pub fn is_inert(&self) -> bool {
        self.inert
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ChannelLayout,
    pub vocab: Arc<Vocab>,
    /// Indexed by `layer * M + head`.
    pub heads: Vec<HeadWeights>,
    pub planted: Vec<PlantedHeadSpec>,
    readout: Readout,
    /// Nonzero unembedding columns: (vocab id, [(channel, weight)]).
    unembed: Vec<(u32, Vec<(usize, f64)>)>,
    /// Lowest vocab id whose unembedding column is entirely zero.
    first_zero_column: Option<u32>,
}

/// Softmax(QKᵀ/√d_h + M)V for one head. `mask` holds 0 or `f64::NEG_INFINITY`.
pub fn attention_head_output(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || mask.dim() != (n, n) || q.ncols() != k.ncols() {
        return Err(Error::Dimension(format!(
            "q {:?}, k {:?}, v {:?}, mask {:?}",
            q.dim(),
            k.dim(),
            v.dim(),
            mask.dim()
        )));
    }
    if q.iter().chain(k.iter()).chain(v.iter()).any(|x| x.is_nan()) || mask.iter().any(|x| x.is_nan())
    {
        return Err(Error::Numeric("NaN in attention inputs".into()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Array2::zeros((n, v.ncols()));
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..q.ncols() {
                s += q[[i, t]] * k[[j, t]];
            }
            w[j] = s * scale + mask[[i, j]];
            mx = mx.max(w[j]);
        }
        let mut z = 0.0;
        for wj in w.iter_mut() {
            *wj = if *wj == f64::NEG_INFINITY { 0.0 } else { (*wj - mx).exp() };
            z += *wj;
        }
        for j in 0..n {
            let p = w[j] / z;
            if p != 0.0 {
                for t in 0..v.ncols() {
                    out[[i, t]] += p * v[[j, t]];
                }
            }
        }
    }
    Ok(out)
}

/// Causal additive mask.
pub fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { f64::NEG_INFINITY })
}

fn group_sum_indices(layout: &ChannelLayout, name: &str) -> Result<Vec<usize>> {
    Ok(layout.get(name)?.range().collect())
}

/// Constructs a model whose heads implement the given routing specs.
pub fn build_model(config: ModelConfig, specs: &[PlantedHeadSpec]) -> Result<Model> {
    config.validate()?;
    let layout = config.layout();
    let d = config.embed_dim;
    let dh = config.head_dim;
    let m_heads = config.heads_per_layer;
    let k_gain = config.value_gain;

    let mut seen = std::collections::HashSet::new();
    for s in specs {
        if s.layer >= config.num_layers || s.head >= m_heads {
            return Err(Error::InvalidHead { layer: s.layer, head: s.head });
        }
        if !seen.insert((s.layer, s.head)) {
            return Err(Error::DuplicateHead { layer: s.layer, head: s.head });
        }
    }

    let zero = || Array2::<f64>::zeros((d, dh));
    let mut heads: Vec<HeadWeights> = (0..config.num_heads())
        .map(|_| HeadWeights::new(zero(), zero(), zero(), Array2::zeros((dh, d))))
        .collect();

    let bias = layout.at("bias");
    let bos = layout.type_channel("bos")?;
    let ans_start = layout.type_channel("ans_start")?;
    let intent0 = layout.at("intent");

    for s in specs {
        if !(s.gain >= 0.0) || !s.gain.is_finite() {
            return Err(Error::InvalidSpec(format!("{}: gain must be finite and >= 0", s.name)));
        }
        if s.query_selector.len() != s.key_selector.len()
            || s.query_selector.len() != s.match_weights.len()
        {
            return Err(Error::InvalidSpec(format!("{}: selector lengths differ", s.name)));
        }
        if s.copy_source.len() != s.copy_dest.len() {
            return Err(Error::InvalidSpec(format!("{}: copy lengths differ", s.name)));
        }
        let mut w_q = zero();
        let mut w_k = zero();
        let mut w_v = zero();
        let mut w_o = Array2::<f64>::zeros((dh, d));
        let g = s.gain;
        let mut t = 0usize;
        let mut next = |what: &str| -> Result<usize> {
            if t >= dh {
                return Err(Error::InvalidSpec(format!("{}: {what} exceeds head_dim", s.name)));
            }
            t += 1;
            Ok(t - 1)
        };

        for kt in &s.key_types {
            let ch = layout.type_channel(&kt.token_type)?;
            let dim = next("key types")?;
            if !(kt.weight > 0.0) || !kt.weight.is_finite() {
                return Err(Error::InvalidSpec(format!("{}: key type weight must be finite and > 0", s.name)));
            }
            match &kt.gate {
                None => w_q[[bias, dim]] = g * kt.weight,
                Some(gname) => {
                    for c in group_sum_indices(&layout, gname)? {
                        w_q[[c, dim]] = g * kt.weight;
                    }
                }
            }
            w_k[[ch, dim]] = 1.0;
        }

        let mut obj_pairs = 0usize;
        for ((qs, ks), &w) in s.query_selector.iter().zip(&s.key_selector).zip(&s.match_weights) {
            let qg = layout.get(qs)?.clone();
            let kg = layout.get(ks)?.clone();
            if qg.len != kg.len {
                return Err(Error::InvalidSpec(format!("{}: {qs} and {ks} differ in width", s.name)));
            }
            for c in 0..qg.len {
                let dim = next("match channels")?;
                w_q[[qg.start + c, dim]] = g * w;
                w_k[[kg.start + c, dim]] = 1.0;
            }
            if ks == "obj" && s.category_weight > 0.0 {
                obj_pairs += 1;
                let cat = layout.at("cat");
                for ci in 0..Kind::CATEGORIES {
                    let dim = next("category channels")?;
                    for kind in Kind::ALL.iter().filter(|k| k.category() == ci) {
                        w_q[[qg.start + kind.index(), dim]] = g * s.category_weight;
                    }
                    w_k[[cat + ci, dim]] = 1.0;
                }
            }
        }

        // Sink on <bos>: above every candidate unless one of this head's
        // intents is present, then below every type-gated candidate.
        let top_type = s.key_types.iter().map(|k| k.weight).fold(1.0, f64::max);
        let top: f64 = top_type + s.match_weights.iter().sum::<f64>()
            + s.category_weight * obj_pairs as f64
            + 0.5;
        let dim = next("sink")?;
        w_q[[bias, dim]] = g * top;
        for i in &s.intents {
            w_q[[intent0 + i.index(), dim]] = g * (0.5 - top);
        }
        w_k[[bos, dim]] = 1.0;

        if let Some(dest) = &s.absent_dest {
            let dg = layout.get(dest)?;
            if !dg.is_scratch() || dg.len != 1 {
                return Err(Error::InvalidSpec(format!("{}: absent_dest must be a 1-wide scratch group", s.name)));
            }
            let level = 1.0 + 0.5 * s.match_weights.iter().cloned().fold(f64::INFINITY, f64::min);
            let dim = next("absent sink")?;
            for i in &s.intents {
                w_q[[intent0 + i.index(), dim]] = g * level;
            }
            w_k[[ans_start, dim]] = 1.0;
        }

        let mut vdim = 0usize;
        let mut vnext = |what: &str| -> Result<usize> {
            if vdim >= dh {
                return Err(Error::InvalidSpec(format!("{}: {what} exceeds head_dim", s.name)));
            }
            vdim += 1;
            Ok(vdim - 1)
        };
        for (src, dst) in s.copy_source.iter().zip(&s.copy_dest) {
            let sg = layout.get(src)?.clone();
            let dg = layout.get(dst)?.clone();
            if !dg.is_scratch() {
                return Err(Error::InvalidSpec(format!("{}: copy_dest `{dst}` is not scratch", s.name)));
            }
            if dg.len == sg.len {
                for c in 0..sg.len {
                    let v = vnext("copy")?;
                    w_v[[sg.start + c, v]] = 1.0;
                    w_o[[v, dg.start + c]] = k_gain;
                }
            } else if dg.len == 1 {
                let v = vnext("copy")?;
                for c in 0..sg.len {
                    w_v[[sg.start + c, v]] = 1.0;
                }
                w_o[[v, dg.start]] = k_gain;
            } else {
                return Err(Error::InvalidSpec(format!("{}: cannot copy {src} into {dst}", s.name)));
            }
        }
        if let Some(dest) = &s.absent_dest {
            let v = vnext("absent copy")?;
            w_v[[ans_start, v]] = 1.0;
            w_o[[v, layout.at(dest)]] = k_gain;
        }
        if s.gain == 0.0 {
            w_q.fill(0.0);
            w_k.fill(0.0);
            w_v.fill(0.0);
            w_o.fill(0.0);
        }
        heads[s.layer * m_heads + s.head] = HeadWeights::new(w_q, w_k, w_v, w_o);
    }

    let vocab = Arc::new(config.vocab());
    let unembed = unembedding_columns(&layout, &vocab, &config);
    let nz: std::collections::HashSet<u32> = unembed.iter().map(|(id, _)| *id).collect();
    let first_zero_column = (0..vocab.len() as u32).find(|i| !nz.contains(i));
    let readout = Readout::new(&layout, config.grid_size, config.value_gain);
    Ok(Model {
        config,
        layout,
        vocab,
        heads,
        planted: specs.to_vec(),
        readout,
        unembed,
        first_zero_column,
    })
}

fn unembedding_columns(layout: &ChannelLayout, vocab: &Vocab, config: &ModelConfig) -> Vec<(u32, Vec<(usize, f64)>)> {
    let n = config.grid_size;
    let gain = config.readout_gain;
    let a = |s: &str| layout.at(s);
    let mut cols = Vec::new();
    for (id, t) in vocab.tokens().iter().enumerate() {
        let ch = match t {
            Token::Null => {
                cols.push((id as u32, vec![(a("bias"), config.null_level * gain)]));
                continue;
            }
            Token::Eoa => a("o_eoa"),
            Token::Payload(p) => match p {
                Payload::Yes => a("o_yesno"),
                Payload::No => a("o_yesno") + 1,
                Payload::True => a("o_truefalse"),
                Payload::False => a("o_truefalse") + 1,
                Payload::Color(c) => a("o_color") + c.index(),
                Payload::Size(z) => a("o_size") + z.index(),
                Payload::Orient(o) => a("o_orient") + o.index(),
                Payload::Dir(d) => a("o_dir") + d.index(),
                Payload::Loc(r, c) => a("o_loc") + *r as usize * n + *c as usize,
                Payload::Count(k) => a("o_count") + *k as usize,
                Payload::Food(f) => a("o_food") + f.index(),
            },
            _ => continue,
        };
        cols.push((id as u32, vec![(ch, gain)]));
    }
    cols
}

/// What to keep while running a sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub logits: bool,
    pub contribs: bool,
    pub maps: bool,
    pub residual: bool,
}

impl ForwardOptions {
    pub fn all() -> Self {
        ForwardOptions { logits: true, contribs: true, maps: true, residual: true }
    }
}

/// Everything recorded by [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    /// `seq_len × |vocab|`, row-major; empty when not requested.
    pub logits: Vec<f64>,
    /// `[pos][layer][head][d]`, post-hook; empty when not requested.
    pub head_contribs: Vec<f64>,
    /// Per `layer * M + head`, a `seq_len × seq_len` row-major matrix.
    pub attention_maps: Vec<Vec<f64>>,
    /// `[layer][pos][d]`: residual after attention, before the layer's FFN.
    pub residual_pre_ffn: Vec<f64>,
}

impl ForwardTrace {
    /// Contribution of head `(layer, head)` at `pos`.
    pub fn contrib(&self, pos: usize, layer: usize, head: usize) -> &[f64] {
        let off = ((pos * self.layers + layer) * self.heads + head) * self.d;
        &self.head_contribs[off..off + self.d]
    }

    /// Attention weight of `pos` on `key` for head `(layer, head)`.
    pub fn attention(&self, layer: usize, head: usize, pos: usize, key: usize) -> f64 {
        self.attention_maps[layer * self.heads + head][pos * self.seq_len + key]
    }

    /// Pre-FFN residual of `layer` at `pos`.
    pub fn residual(&self, layer: usize, pos: usize) -> &[f64] {
        let off = (layer * self.seq_len + pos) * self.d;
        &self.residual_pre_ffn[off..off + self.d]
    }

    pub fn logits_at(&self, pos: usize) -> &[f64] {
        let v = self.logits.len() / self.seq_len.max(1);
        &self.logits[pos * v..(pos + 1) * v]
    }
}

/// Incremental evaluation state: positions are appended one at a time, so a
/// full forward and step-wise generation perform identical arithmetic.
pub struct Session<'a> {
    model: &'a Model,
    hooks: &'a HookSet,
    len: usize,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    x: Vec<f64>,
    scratch_w: Vec<f64>,
}

/// Per-position records returned by [`Session::push`].
#[derive(Debug, Default)]
pub struct PositionRecord {
    /// `[layer][head][d]` when requested.
    pub contribs: Vec<f64>,
    /// Per head, attention weights over positions `0..=pos`.
    pub maps: Vec<Vec<f64>>,
    /// `[layer][d]` pre-FFN residual.
    pub residual: Vec<f64>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Model, hooks: &'a HookSet) -> Result<Session<'a>> {
        let c = &model.config;
        hooks.validate(c.num_layers, c.heads_per_layer, c.embed_dim)?;
        Ok(Session {
            model,
            hooks,
            len: 0,
            keys: vec![Vec::new(); c.num_heads()],
            vals: vec![Vec::new(); c.num_heads()],
            x: vec![0.0; c.embed_dim],
            scratch_w: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and runs it through every layer.
    pub fn push(&mut self, token: &Token, opts: ForwardOptions) -> Result<PositionRecord> {
        let m = self.model;
        let c = &m.config;
        if !m.vocab.contains(token) {
            return Err(Error::UnknownToken(token.to_string()));
        }
        if self.len + 1 > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.len + 1, max: c.max_seq_len });
        }
        let d = c.embed_dim;
        let dh = c.head_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;
        let mut rec = PositionRecord::default();
        if opts.contribs {
            rec.contribs = vec![0.0; c.num_heads() * d];
        }
        let mut x = m.embed(token);
        let mut q = vec![0.0; dh];
        let mut kv = vec![0.0; dh];
        let mut vv = vec![0.0; dh];
        let mut out = vec![0.0; dh];
        let mut contrib = vec![0.0; d];
        let mut delta = vec![0.0; d];
        for l in 0..c.num_layers {
            delta.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..c.heads_per_layer {
                let idx = l * c.heads_per_layer + h;
                let hw = &m.heads[idx];
                let hook = self.hooks.get(l, h);
                contrib.iter_mut().for_each(|v| *v = 0.0);
                if hw.inert {
                    if opts.maps {
                        rec.maps.push(vec![1.0 / (pos + 1) as f64; pos + 1]);
                    }
                } else {
                    q.iter_mut().for_each(|v| *v = 0.0);
                    kv.iter_mut().for_each(|v| *v = 0.0);
                    vv.iter_mut().for_each(|v| *v = 0.0);
                    for &(ch, t, w) in &hw.q_terms {
                        q[t] += x[ch] * w;
                    }
                    for &(ch, t, w) in &hw.k_terms {
                        kv[t] += x[ch] * w;
                    }
                    for &(ch, t, w) in &hw.v_terms {
                        vv[t] += x[ch] * w;
                    }
                    self.keys[idx].extend_from_slice(&kv);
                    self.vals[idx].extend_from_slice(&vv);
                    let nzq: Vec<usize> = (0..dh).filter(|&t| q[t] != 0.0).collect();
                    let keys = &self.keys[idx];
                    let w = &mut self.scratch_w;
                    w.clear();
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=pos {
                        let kr = &keys[j * dh..(j + 1) * dh];
                        let mut s = 0.0;
                        for &t in &nzq {
                            s += q[t] * kr[t];
                        }
                        let s = s * scale;
                        mx = mx.max(s);
                        w.push(s);
                    }
                    let mut z = 0.0;
                    for wj in w.iter_mut() {
                        *wj = (*wj - mx).exp();
                        z += *wj;
                    }
                    out.iter_mut().for_each(|v| *v = 0.0);
                    let vals = &self.vals[idx];
                    for (j, wj) in w.iter_mut().enumerate() {
                        *wj /= z;
                        let p = *wj;
                        if p != 0.0 {
                            let vr = &vals[j * dh..(j + 1) * dh];
                            for t in 0..dh {
                                out[t] += p * vr[t];
                            }
                        }
                    }
                    if opts.maps {
                        rec.maps.push(w.clone());
                    }
                    for (t, terms) in hw.o_terms.iter().enumerate() {
                        let o = out[t];
                        if o != 0.0 {
                            for &(ch, wo) in terms {
                                contrib[ch] += o * wo;
                            }
                        }
                    }
                }
                if let Some(hk) = hook {
                    hk.apply(&mut contrib);
                }
                if opts.contribs {
                    rec.contribs[idx * d..(idx + 1) * d].copy_from_slice(&contrib);
                }
                if !hw.inert || hook.is_some() {
                    for (dv, cv) in delta.iter_mut().zip(&contrib) {
                        *dv += cv;
                    }
                }
            }
            for (xv, dv) in x.iter_mut().zip(&delta) {
                *xv += dv;
            }
            if opts.residual {
                rec.residual.extend_from_slice(&x);
            }
            if l == c.readout_layer {
                m.readout.apply(&mut x);
            }
        }
        self.x = x;
        self.len += 1;
        Ok(rec)
    }

    /// Final residual of the last pushed position.
    pub fn last_residual(&self) -> &[f64] {
        &self.x
    }

    /// Dense logits of the last position.
    pub fn logits(&self) -> Vec<f64> {
        self.model.logits_of(&self.x)
    }

    /// Greedy choice at the last position; ties go to the lowest vocab id.
    pub fn argmax(&self) -> u32 {
        self.model.argmax_of(&self.x)
    }
}

impl Model {
    pub fn d(&self) -> usize {
        self.config.embed_dim
    }

    /// Embedding row of a structured token.
    pub fn embed(&self, t: &Token) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; self.config.embed_dim];
        let n2 = (self.config.grid_size * self.config.grid_size) as f64;
        if !matches!(t, Token::Bos) {
            x[l.at("bias")] = 1.0;
        }
        let ty = |name: &str| l.type_channel(name).expect("token type");
        let payload = |x: &mut Vec<f64>, p: &Payload| match p {
            Payload::Yes => x[l.at("yesno")] = 1.0,
            Payload::No => x[l.at("yesno") + 1] = 1.0,
            Payload::True | Payload::False => {}
            Payload::Color(c) => x[l.at("color") + c.index()] = 1.0,
            Payload::Size(z) => x[l.at("size") + z.index()] = 1.0,
            Payload::Orient(o) => x[l.at("orient") + o.index()] = 1.0,
            Payload::Dir(d) => x[l.at("dir") + d.index()] = 1.0,
            Payload::Loc(r, c) => {
                x[l.at("row") + *r as usize] = 1.0;
                x[l.at("col") + *c as usize] = 1.0;
            }
            Payload::Count(k) => x[l.at("count")] = *k as f64 / n2,
            Payload::Food(f) => x[l.at("food") + f.index()] = 1.0,
        };
        match t {
            Token::Bos => x[ty("bos")] = 1.0,
            Token::Null | Token::Eoa | Token::Payload(_) => x[ty("answer")] = 1.0,
            Token::Kind(_) | Token::Word(_) => x[ty("word")] = 1.0,
            Token::StepMarker(j) => {
                x[ty("step_marker")] = 1.0;
                x[l.at("step") + *j as usize - 1] = 1.0;
            }
            Token::Context { step, payload: p } => {
                x[ty("ctx_answer")] = 1.0;
                x[l.at("step") + *step as usize - 1] = 1.0;
                payload(&mut x, p);
            }
            Token::Fact { kind, food } => {
                x[ty("fact")] = 1.0;
                x[l.at("obj") + kind.index()] = 1.0;
                x[l.at("food") + food.index()] = 1.0;
            }
            Token::Cell { row, col, content } => {
                x[ty("cell")] = 1.0;
                x[l.at("row") + *row as usize] = 1.0;
                x[l.at("col") + *col as usize] = 1.0;
                if let CellContent::Object { kind, color, size, orient } = content {
                    if let Some(k) = kind {
                        x[l.at("obj") + k.index()] = 1.0;
                        x[l.at("cat") + k.category()] = 1.0;
                    }
                    x[l.at("color") + color.index()] = 1.0;
                    x[l.at("size") + size.index()] = 1.0;
                    x[l.at("orient") + orient.index()] = 1.0;
                }
            }
            Token::BBox { kind, row, col } => {
                x[ty("bbox")] = 1.0;
                x[l.at("obj") + kind.index()] = 1.0;
                x[l.at("cat") + kind.category()] = 1.0;
                x[l.at("row") + *row as usize] = 1.0;
                x[l.at("col") + *col as usize] = 1.0;
            }
            Token::Query(q) => {
                x[ty("ans_start")] = 1.0;
                x[l.at("intent") + q.intent.index()] = 1.0;
                let a = &q.args;
                if let Some(k) = a.obj {
                    x[l.at("q_obj") + k.index()] = 1.0;
                }
                if let Some(k) = a.obj2 {
                    x[l.at("q_obj2") + k.index()] = 1.0;
                }
                if let Some(c) = a.color {
                    x[l.at("q_color") + c.index()] = 1.0;
                }
                if let Some(c) = a.color2 {
                    x[l.at("q_color2") + c.index()] = 1.0;
                }
                if let Some((r, c)) = a.loc {
                    x[l.at("q_row") + r as usize] = 1.0;
                    x[l.at("q_col") + c as usize] = 1.0;
                }
                if let Some(z) = a.size {
                    x[l.at("q_size") + z.index()] = 1.0;
                }
                if let Some(d) = a.dir {
                    x[l.at("q_dir") + d.index()] = 1.0;
                }
                if let Some(k) = a.count {
                    x[l.at("q_count")] = k as f64 / n2;
                }
                for j in q.step_list() {
                    x[l.at("q_step") + j - 1] = 1.0;
                }
            }
        }
        x
    }

    /// Dense unembedding matrix (`d × |vocab|`).
    pub fn unembedding(&self) -> Array2<f64> {
        let mut u = Array2::zeros((self.config.embed_dim, self.vocab.len()));
        for (id, col) in &self.unembed {
            for &(ch, w) in col {
                u[[ch, *id as usize]] = w;
            }
        }
        u
    }

    pub fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab.len()];
        for (id, col) in &self.unembed {
            let mut s = 0.0;
            for &(ch, w) in col {
                s += x[ch] * w;
            }
            out[*id as usize] = s;
        }
        out
    }

    /// Same result as argmax over [`Model::logits_of`], lowest id on ties.
    pub fn argmax_of(&self, x: &[f64]) -> u32 {
        let mut best: Option<(f64, u32)> = self.first_zero_column.map(|id| (0.0, id));
        for (id, col) in &self.unembed {
            let mut s = 0.0;
            for &(ch, w) in col {
                s += x[ch] * w;
            }
            best = match best {
                None => Some((s, *id)),
                Some((bv, bi)) if s > bv || (s == bv && *id < bi) => Some((s, *id)),
                b => b,
            };
        }
        best.map(|b| b.1).unwrap_or(0)
    }

    pub fn session<'a>(&'a self, hooks: &'a HookSet) -> Result<Session<'a>> {
        Session::new(self, hooks)
    }

    pub fn forward(&self, tokens: &[Token], hooks: &HookSet) -> Result<ForwardTrace> {
        self.forward_with(tokens, hooks, ForwardOptions::all())
    }

    pub fn forward_with(
        &self,
        tokens: &[Token],
        hooks: &HookSet,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        if tokens.len() > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: c.max_seq_len });
        }
        let n = tokens.len();
        let d = c.embed_dim;
        let mut s = self.session(hooks)?;
        let mut trace = ForwardTrace {
            seq_len: n,
            layers: c.num_layers,
            heads: c.heads_per_layer,
            d,
            logits: Vec::new(),
            head_contribs: Vec::new(),
            attention_maps: if opts.maps { vec![vec![0.0; n * n]; c.num_heads()] } else { Vec::new() },
            residual_pre_ffn: if opts.residual { vec![0.0; c.num_layers * n * d] } else { Vec::new() },
        };
        for (i, t) in tokens.iter().enumerate() {
            let rec = s.push(t, opts)?;
            if opts.logits {
                trace.logits.extend(s.logits());
            }
            if opts.contribs {
                trace.head_contribs.extend_from_slice(&rec.contribs);
            }
            if opts.maps {
                for (h, row) in rec.maps.iter().enumerate() {
                    trace.attention_maps[h][i * n..i * n + row.len()].copy_from_slice(row);
                }
            }
            if opts.residual {
                for l in 0..c.num_layers {
                    let off = (l * n + i) * d;
                    trace.residual_pre_ffn[off..off + d].copy_from_slice(&rec.residual[l * d..(l + 1) * d]);
                }
            }
        }
        Ok(trace)
    }

    /// Greedy decoding; stops after emitting `<eoa>` or `max_new` tokens.
    pub fn generate(&self, prompt: &[Token], hooks: &HookSet, max_new: usize) -> Result<Vec<Token>> {
        Ok(self.generate_capture(prompt, hooks, max_new, false)?.0)
    }

    /// Greedy decoding that also returns, per generated token, the
    /// `[layer][head][d]` contributions at the position whose logits chose it.
    pub fn generate_capture(
        &self,
        prompt: &[Token],
        hooks: &HookSet,
        max_new: usize,
        capture: bool,
    ) -> Result<(Vec<Token>, Vec<Vec<f64>>)> {
        if max_new == 0 {
            return Err(Error::Precondition("max_new must be >= 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        let mut s = self.session(hooks)?;
        let last = prompt.len() - 1;
        let mut rec = PositionRecord::default();
        for (i, t) in prompt.iter().enumerate() {
            let opts = ForwardOptions { contribs: capture && i == last, ..Default::default() };
            rec = s.push(t, opts)?;
        }
        let mut out = Vec::new();
        let mut caps = Vec::new();
        loop {
            let tok = self.vocab.token(s.argmax());
            out.push(tok);
            if capture {
                caps.push(std::mem::take(&mut rec.contribs));
            }
            if tok == Token::Eoa || out.len() >= max_new {
                break;
            }
            rec = s.push(&tok, ForwardOptions { contribs: capture, ..Default::default() })?;
        }
        Ok((out, caps))
    }

    /// Planted heads tagged with `f`.
    pub fn heads_for(&self, f: FunctionLabel) -> Vec<(usize, usize)> {
        self.planted.iter().filter(|s| s.function_tag == f).map(|s| (s.layer, s.head)).collect()
    }
}

/// Detune factor giving a partially working spatial pathway with the default registry.
pub const DEFAULT_DETUNE: f64 = 0.0153;

/// Copy of `specs` with every spatial head's gain multiplied by `factor`.
pub fn detune(specs: &[PlantedHeadSpec], factor: f64) -> Vec<PlantedHeadSpec> {
    specs
        .iter()
        .cloned()
        .map(|mut s| {
            if s.function_tag == FunctionLabel::SpatialPerception {
                s.gain *= factor;
            }
            s
        })
        .collect()
}
