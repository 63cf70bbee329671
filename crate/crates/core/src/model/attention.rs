use serde::{Deserialize, Serialize};

use super::cache::{CacheSpan, KvView, SegmentKv};
use super::weights::{HeadWeights, LayerWeights, ModelWeights};
use super::{dot, HiddenState, BOS};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::masks::MaskKind;
use crate::pe::{alibi_slopes, rope_frequency, rope_score_unchecked, Weave, DEFAULT_THETA_BASE};

/// Base positional score applied to the (woven) distance `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PeKind {
    /// `qᵀk`
    NoPe,
    /// `qᵀ R(d·θ) k`
    Rope { theta_base: f64 },
    /// `qᵀk - d · slope_m` with geometric per-head slopes.
    Alibi,
    /// `qᵀk - d`, the unit-slope relative bias of the threshold constructions.
    Linear,
}

impl Default for PeKind {
    fn default() -> Self {
        PeKind::Rope {
            theta_base: DEFAULT_THETA_BASE,
        }
    }
}

impl PeKind {
    fn slopes(&self, num_heads: usize) -> Vec<f64> {
        match self {
            PeKind::Alibi => alibi_slopes(num_heads),
            PeKind::Linear => vec![1.0; num_heads],
            PeKind::NoPe | PeKind::Rope { .. } => vec![0.0; num_heads],
        }
    }
}

/// Woven distance between a query at absolute index `t` and a key at `i`.
pub trait PositionMap: Sync {
    fn distance(&self, t: usize, i: usize) -> f64;
}

impl PositionMap for Weave {
    #[inline]
    fn distance(&self, t: usize, i: usize) -> f64 {
        Weave::distance(self, t, i)
    }
}

/// Local coordinates of a middle chunk that sees the first chunk plus
/// itself: first-chunk keys keep `0..F`, chunk tokens become `F, F+1, …`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLocal {
    pub first_len: usize,
    pub chunk_start: usize,
}

impl ChunkLocal {
    #[inline]
    fn coord(&self, j: usize) -> usize {
        if j < self.first_len {
            j
        } else {
            j - self.chunk_start + self.first_len
        }
    }
}

impl PositionMap for ChunkLocal {
    #[inline]
    fn distance(&self, t: usize, i: usize) -> f64 {
        (self.coord(t) - self.coord(i)) as f64
    }
}

/// Coordinates anchored at `anchor`: token `j` sits at
/// `anchor - weave(anchor - j)`, so the anchor query sees every key at
/// exactly `weave(anchor - i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchored {
    pub anchor: usize,
    pub weave: Weave,
}

impl PositionMap for Anchored {
    #[inline]
    fn distance(&self, t: usize, i: usize) -> f64 {
        self.weave.apply(self.anchor - i) - self.weave.apply(self.anchor - t)
    }
}

/// Everything a forward pass needs besides the weights.
#[derive(Clone, Copy)]
pub struct Attention<'a> {
    pub pe: PeKind,
    pub mask: MaskKind,
    pub positions: &'a dyn PositionMap,
    pub exec: Parallelism,
}

impl<'a> Attention<'a> {
    pub fn new(pe: PeKind, positions: &'a dyn PositionMap) -> Self {
        Attention {
            pe,
            mask: MaskKind::Causal,
            positions,
            exec: Parallelism::default(),
        }
    }

    pub fn with_mask(mut self, mask: MaskKind) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_exec(mut self, exec: Parallelism) -> Self {
        self.exec = exec;
        self
    }
}

impl std::fmt::Debug for Attention<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Attention")
            .field("pe", &self.pe)
            .field("mask", &self.mask)
            .field("exec", &self.exec)
            .finish_non_exhaustive()
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Precomputed `(sin, cos)` for integer distances, falling back to direct
/// evaluation for fractional or out-of-range distances.
struct RopeTable {
    theta_base: f64,
    half: usize,
    max_d: usize,
    sincos: Vec<(f64, f64)>,
}

impl RopeTable {
    fn new(theta_base: f64, dim: usize, max_d: usize) -> Self {
        let half = dim / 2;
        let mut sincos = Vec::with_capacity((max_d + 1) * half);
        for d in 0..=max_d {
            for j in 0..half {
                sincos.push((d as f64 * rope_frequency(j, dim, theta_base)).sin_cos());
            }
        }
        RopeTable {
            theta_base,
            half,
            max_d,
            sincos,
        }
    }

    #[inline]
    fn score(&self, q: &[f64], k: &[f64], d: f64) -> f64 {
        let di = d as usize;
        if d.fract() != 0.0 || d < 0.0 || di > self.max_d || q.len() != 2 * self.half {
            return rope_score_unchecked(q, k, d, self.theta_base);
        }
        let row = &self.sincos[di * self.half..(di + 1) * self.half];
        let mut acc = 0.0;
        for (j, &(sin, cos)) in row.iter().enumerate() {
            let (k0, k1) = (k[2 * j], k[2 * j + 1]);
            acc += q[2 * j] * (cos * k0 - sin * k1) + q[2 * j + 1] * (sin * k0 + cos * k1);
        }
        acc
    }
}

struct ScoreFn<'a> {
    pe: PeKind,
    slope: f64,
    table: Option<&'a RopeTable>,
}

impl ScoreFn<'_> {
    #[inline]
    fn score(&self, q: &[f64], k: &[f64], d: f64) -> f64 {
        match self.pe {
            PeKind::NoPe => dot(q, k),
            PeKind::Rope { theta_base } => match self.table {
                Some(table) => table.score(q, k, d),
                None => rope_score_unchecked(q, k, d, theta_base),
            },
            PeKind::Alibi | PeKind::Linear => dot(q, k) - d * self.slope,
        }
    }
}

/// Keys visible to a segment: cached context followed by the segment itself.
struct KeySet<'a> {
    dim: usize,
    ctx: Option<KvView<'a>>,
    keys: &'a [f64],
    values: &'a [f64],
    start: usize,
}

impl KeySet<'_> {
    fn ctx_len(&self) -> usize {
        self.ctx.map_or(0, |c| c.len())
    }

    #[inline]
    fn entry(&self, n: usize) -> (usize, &[f64], &[f64]) {
        let c = self.ctx_len();
        if n < c {
            let ctx = self.ctx.as_ref().expect("context present");
            (ctx.indices[n], ctx.key(n), ctx.value(n))
        } else {
            let j = n - c;
            (
                self.start + j,
                &self.keys[j * self.dim..(j + 1) * self.dim],
                &self.values[j * self.dim..(j + 1) * self.dim],
            )
        }
    }
}

struct HeadPass {
    /// `W_O Σ α̂ v` per segment row.
    outputs: Vec<Vec<f64>>,
    first_weight: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    cells: u64,
}

fn project(m: &super::Matrix, x: &HiddenState) -> Vec<f64> {
    x.columns().flat_map(|c| m.matvec(c)).collect()
}

#[allow(clippy::too_many_arguments)]
fn head_pass(
    head: &HeadWeights,
    x: &HiddenState,
    start: usize,
    ctx: Option<KvView<'_>>,
    score: &ScoreFn<'_>,
    attn: &Attention<'_>,
    keep_rows: bool,
) -> Result<HeadPass> {
    let h = head.head_dim();
    if let Some(c) = &ctx {
        if c.dim != h {
            return Err(Error::DimensionMismatch(format!(
                "cached keys have dim {}, head has {h}",
                c.dim
            )));
        }
    }
    let queries = project(&head.w_q, x);
    let keys = project(&head.w_k, x);
    let values = project(&head.w_v, x);
    let set = KeySet {
        dim: h,
        ctx,
        keys: &keys,
        values: &values,
        start,
    };
    let ctx_len = set.ctx_len();

    let rows = attn.exec.map_range(x.len(), |r| {
        let t = start + r;
        let q = &queries[r * h..(r + 1) * h];
        let mut visible = Vec::with_capacity(ctx_len + r + 1);
        let mut scores = Vec::with_capacity(ctx_len + r + 1);
        for n in 0..ctx_len + r + 1 {
            let (i, k, _) = set.entry(n);
            if attn.mask.allowed(t, i) {
                visible.push(n);
                scores.push(score.score(q, k, attn.positions.distance(t, i)));
            }
        }
        let weights = softmax(&scores);
        let mut mixed = vec![0.0; h];
        let mut first = 0.0;
        for (&n, &w) in visible.iter().zip(&weights) {
            let (i, _, v) = set.entry(n);
            if i == BOS {
                first = w;
            }
            for (m, &vv) in mixed.iter_mut().zip(v) {
                *m += w * vv;
            }
        }
        (head.w_o.matvec(&mixed), first, visible.len() as u64)
    });

    let mut outputs = Vec::with_capacity(rows.len());
    let mut first_weight = Vec::with_capacity(rows.len());
    let mut cells = 0;
    for (o, f, c) in rows {
        outputs.push(o);
        first_weight.push(f);
        cells += c;
    }
    let (keys, values) = if keep_rows { (keys, values) } else { (Vec::new(), Vec::new()) };
    Ok(HeadPass {
        outputs,
        first_weight,
        keys,
        values,
        cells,
    })
}

fn rope_table_for(pe: &PeKind, dims: impl Iterator<Item = usize>, max_d: usize) -> Vec<(usize, RopeTable)> {
    let PeKind::Rope { theta_base } = *pe else {
        return Vec::new();
    };
    let mut out: Vec<(usize, RopeTable)> = Vec::new();
    for dim in dims {
        if dim % 2 == 0 && !out.iter().any(|(d, _)| *d == dim) {
            out.push((dim, RopeTable::new(theta_base, dim, max_d)));
        }
    }
    out
}

struct LayerPass {
    out: HiddenState,
    attention: HiddenState,
    first_weight: Vec<Vec<f64>>,
    kv: Vec<(Vec<f64>, Vec<f64>)>,
    cells: u64,
}

#[allow(clippy::too_many_arguments)]
fn layer_pass(
    layer: &LayerWeights,
    layer_norm: super::LayerNorm,
    x: &HiddenState,
    start: usize,
    ctx: Option<(CacheSpan<'_>, usize)>,
    attn: &Attention<'_>,
    tables: &[(usize, RopeTable)],
    keep_kv: bool,
) -> Result<LayerPass> {
    let d = x.dim();
    let slopes = attn.pe.slopes(layer.heads.len());
    for head in &layer.heads {
        if matches!(attn.pe, PeKind::Rope { .. }) && head.head_dim() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "rotary heads need an even dimension, got {}",
                head.head_dim()
            )));
        }
    }
    let passes = attn.exec.map_range(layer.heads.len(), |m| {
        let head = &layer.heads[m];
        let table = tables.iter().find(|(dim, _)| *dim == head.head_dim()).map(|(_, t)| t);
        let score = ScoreFn {
            pe: attn.pe,
            slope: slopes[m],
            table,
        };
        let view = ctx.map(|(span, l)| span.view(l, m));
        head_pass(head, x, start, view, &score, attn, keep_kv)
    });
    let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;

    let n = x.len();
    let mut attention = HiddenState::new(d);
    let mut out = HiddenState::new(d);
    for r in 0..n {
        let mut a = vec![0.0; d];
        for p in &passes {
            for (acc, v) in a.iter_mut().zip(&p.outputs[r]) {
                *acc += v;
            }
        }
        let residual: Vec<f64> = a.iter().zip(x.column(r)).map(|(a, h)| a + h).collect();
        let ff = layer.ff.apply(&layer_norm.apply(&residual))?;
        let col: Vec<f64> = ff.iter().zip(&residual).map(|(f, r)| f + r).collect();
        attention.push_column(&a);
        out.push_column(&col);
    }
    let cells = passes.first().map_or(0, |p| p.cells);
    let mut first_weight = Vec::with_capacity(passes.len());
    let mut kv = Vec::with_capacity(passes.len());
    for p in passes {
        first_weight.push(p.first_weight);
        kv.push((p.keys, p.values));
    }
    Ok(LayerPass {
        out,
        attention,
        first_weight,
        kv,
        cells,
    })
}

fn embed_tokens(tokens: &[usize], weights: &ModelWeights) -> Result<HiddenState> {
    let mut h = HiddenState::new(weights.d);
    for &tok in tokens {
        h.push_column(&weights.embedding_of(tok)?);
    }
    Ok(h)
}

/// `H⁰ = W_E X` for `<bos>` followed by `tokens`.
pub fn embed(tokens: &[usize], weights: &ModelWeights) -> Result<HiddenState> {
    let mut h = embed_tokens(&[BOS], weights)?;
    h.extend(&embed_tokens(tokens, weights)?);
    Ok(h)
}

/// A contiguous run of tokens processed in one pass, optionally attending
/// to cached context.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub tokens: &'a [usize],
    /// Absolute index of `tokens[0]`.
    pub start: usize,
    pub context: Option<CacheSpan<'a>>,
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// `[0]` is the embedding, `[l]` the output of layer `l`.
    pub hidden: Vec<HiddenState>,
    /// Summed head outputs `a_t` per layer.
    pub attention: Vec<HiddenState>,
    /// Softmax weight on `<bos>`, `[layer][head][row]`.
    pub bos_weight: Vec<Vec<Vec<f64>>>,
    pub kv: SegmentKv,
    /// Attention scores computed by one head of one layer.
    pub cells: u64,
}

pub(crate) fn run_segment(
    weights: &ModelWeights,
    segment: Segment<'_>,
    attn: &Attention<'_>,
    keep_kv: bool,
) -> Result<SegmentOutput> {
    let x0 = embed_tokens(segment.tokens, weights)?;
    let end = segment.start + segment.tokens.len();
    let lowest = segment
        .context
        .and_then(|c| c.cache.indices().first().copied())
        .map_or(segment.start, |i| i.min(segment.start));
    let tables = rope_table_for(
        &attn.pe,
        weights.layers.iter().flat_map(|l| l.heads.iter().map(HeadWeights::head_dim)),
        end.saturating_sub(lowest),
    );

    let mut hidden = vec![x0];
    let mut attention = Vec::with_capacity(weights.num_layers());
    let mut bos_weight = Vec::with_capacity(weights.num_layers());
    let mut kv_layers = Vec::with_capacity(weights.num_layers());
    let mut cells = 0;
    for (l, layer) in weights.layers.iter().enumerate() {
        let ctx = segment.context.map(|c| (c, l));
        let pass = layer_pass(
            layer,
            weights.layer_norm,
            hidden.last().expect("embedding present"),
            segment.start,
            ctx,
            attn,
            &tables,
            keep_kv,
        )?;
        if l == 0 {
            cells = pass.cells;
        }
        hidden.push(pass.out);
        attention.push(pass.attention);
        bos_weight.push(pass.first_weight);
        kv_layers.push(pass.kv);
    }
    Ok(SegmentOutput {
        hidden,
        attention,
        bos_weight,
        kv: SegmentKv {
            indices: (segment.start..end).collect(),
            layers: kv_layers,
        },
        cells,
    })
}

/// Per-position head outputs `o_t = W_O Σ α̂_i v_i` over a full sequence.
pub fn attention_head(
    h_prev: &HiddenState,
    head: &HeadWeights,
    head_index: usize,
    num_heads: usize,
    attn: &Attention<'_>,
) -> Result<Vec<Vec<f64>>> {
    let slope = attn.pe.slopes(num_heads)[head_index];
    let tables = rope_table_for(&attn.pe, std::iter::once(head.head_dim()), h_prev.len());
    let score = ScoreFn {
        pe: attn.pe,
        slope,
        table: tables.first().map(|(_, t)| t),
    };
    Ok(head_pass(head, h_prev, 0, None, &score, attn, false)?.outputs)
}

/// Raw attention scores `α` of query `t` against every visible key, as
/// `(key index, score)` pairs.
pub fn head_scores(
    h_prev: &HiddenState,
    head: &HeadWeights,
    slope: f64,
    attn: &Attention<'_>,
    t: usize,
) -> Vec<(usize, f64)> {
    let score = ScoreFn {
        pe: attn.pe,
        slope,
        table: None,
    };
    let q = head.w_q.matvec(h_prev.column(t));
    (0..=t)
        .filter(|&i| attn.mask.allowed(t, i))
        .map(|i| {
            let k = head.w_k.matvec(h_prev.column(i));
            (i, score.score(&q, &k, attn.positions.distance(t, i)))
        })
        .collect()
}

pub fn transformer_layer(
    h_prev: &HiddenState,
    layer: &LayerWeights,
    layer_norm: super::LayerNorm,
    attn: &Attention<'_>,
) -> Result<HiddenState> {
    let tables = rope_table_for(&attn.pe, layer.heads.iter().map(HeadWeights::head_dim), h_prev.len());
    Ok(layer_pass(layer, layer_norm, h_prev, 0, None, attn, &tables, false)?.out)
}

/// Full trace of a single-pass forward over `<bos>` + tokens.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden: Vec<HiddenState>,
    pub attention: Vec<HiddenState>,
    pub bos_weight: Vec<Vec<Vec<f64>>>,
    pub cells: u64,
}

impl ForwardTrace {
    pub fn logits(&self, weights: &ModelWeights) -> Vec<f64> {
        let last = self.hidden.last().expect("at least the embedding");
        weights.logits(last.column(last.len() - 1))
    }
}

pub fn forward_trace(tokens: &[usize], weights: &ModelWeights, attn: &Attention<'_>) -> Result<ForwardTrace> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    weights.validate()?;
    let mut seq = Vec::with_capacity(tokens.len() + 1);
    seq.push(BOS);
    seq.extend_from_slice(tokens);
    let out = run_segment(
        weights,
        Segment {
            tokens: &seq,
            start: 0,
            context: None,
        },
        attn,
        false,
    )?;
    Ok(ForwardTrace {
        hidden: out.hidden,
        attention: out.attention,
        bos_weight: out.bos_weight,
        cells: out.cells,
    })
}

/// Hidden states of every layer (`[0]` = embedding) for `<bos>` + tokens.
pub fn forward(tokens: &[usize], weights: &ModelWeights, attn: &Attention<'_>) -> Result<Vec<HiddenState>> {
    Ok(forward_trace(tokens, weights, attn)?.hidden)
}
