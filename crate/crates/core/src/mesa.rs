//! Chunked prefill with a woven last chunk, then woven decoding.
//!
//! The first chunk runs alone. Every middle chunk attends to the first
//! chunk plus itself in local coordinates, so no raw distance exceeds the
//! training window and the middle chunks are independent of one another.
//! The last chunk attends to the whole cache with distances woven relative
//! to the final token, and each decode step re-anchors at the new token.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::model::{
    argmax, run_segment, Anchored, Attention, CacheSpan, ChunkLocal, KvCache, ModelWeights, PeKind, PositionMap,
    Segment, SegmentOutput, BOS,
};
use crate::pe::{Scheme, Weave, WeaveParams};
use crate::splitter::{dynamic_split_with, ChunkPlan, SplitParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MesaConfig {
    pub weave: WeaveParams,
    pub split: SplitParams,
    #[serde(rename = "T")]
    pub t_train: usize,
    pub pe: PeKind,
    #[serde(default)]
    pub exec: Parallelism,
}

impl Default for MesaConfig {
    fn default() -> Self {
        MesaConfig {
            weave: WeaveParams::stair(512, 50),
            split: SplitParams::default(),
            t_train: 4096,
            pe: PeKind::default(),
            exec: Parallelism::default(),
        }
    }
}

impl MesaConfig {
    pub fn validate(&self) -> Result<Weave> {
        let weave = self.weave.weave()?;
        if self.weave.scheme == Scheme::StairPE && self.weave.n as usize >= self.t_train {
            return Err(Error::param(
                "N",
                format!("weave point {} must lie inside the training window {}", self.weave.n, self.t_train),
            ));
        }
        if self.split.first + 1 > self.t_train {
            return Err(Error::param("F", "first chunk must fit inside the training window"));
        }
        Ok(weave)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefillMode {
    /// The input fits the training window: one pass with plain distances.
    Vanilla,
    /// Too short to split: one pass with distances woven at the last token.
    Woven,
    /// First, middle and last chunks.
    Chunked,
}

/// Wall-clock time spent per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub first: Duration,
    pub middle: Duration,
    pub last: Duration,
    pub decode: Duration,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    pub logits: Vec<f64>,
    pub cache: KvCache,
    pub mode: PrefillMode,
    pub plan: Option<ChunkPlan>,
    /// Attention scores computed by one head of one layer.
    pub cells: u64,
    pub timings: StageTimings,
    /// Output of the segment holding the final token.
    pub last: SegmentOutput,
}

fn final_logits(weights: &ModelWeights, out: &SegmentOutput) -> Vec<f64> {
    let h = out.hidden.last().expect("embedding present");
    weights.logits(h.column(h.len() - 1))
}

fn run(
    weights: &ModelWeights,
    cfg: &MesaConfig,
    positions: &dyn PositionMap,
    tokens: &[usize],
    start: usize,
    context: Option<CacheSpan<'_>>,
) -> Result<SegmentOutput> {
    let attn = Attention::new(cfg.pe, positions).with_exec(cfg.exec);
    run_segment(
        weights,
        Segment {
            tokens,
            start,
            context,
        },
        &attn,
        true,
    )
}

/// Processes `<bos>` + `tokens` and returns the last position's logits plus
/// a cache covering every position.
pub fn prefill(tokens: &[usize], weights: &ModelWeights, cfg: &MesaConfig) -> Result<Prefill> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    weights.validate()?;
    let weave = cfg.validate()?;
    let mut seq = Vec::with_capacity(tokens.len() + 1);
    seq.push(BOS);
    seq.extend_from_slice(tokens);
    let total = seq.len();
    let anchored = Anchored {
        anchor: total - 1,
        weave,
    };
    let mut cache = KvCache::for_model(weights);
    let mut timings = StageTimings::default();

    if total <= cfg.t_train {
        let clock = Instant::now();
        let out = run(weights, cfg, &Weave::Identity, &seq, 0, None)?;
        timings.last = clock.elapsed();
        cache.append_segment(&out.kv)?;
        return Ok(Prefill {
            logits: final_logits(weights, &out),
            cache,
            mode: PrefillMode::Vanilla,
            plan: None,
            cells: out.cells,
            timings,
            last: out,
        });
    }

    let plan = match dynamic_split_with(total, cfg.t_train, &cfg.split) {
        Ok(plan) => plan,
        Err(Error::InputTooShort { .. }) => {
            let clock = Instant::now();
            let out = run(weights, cfg, &anchored, &seq, 0, None)?;
            timings.last = clock.elapsed();
            cache.append_segment(&out.kv)?;
            return Ok(Prefill {
                logits: final_logits(weights, &out),
                cache,
                mode: PrefillMode::Woven,
                plan: None,
                cells: out.cells,
                timings,
                last: out,
            });
        }
        Err(e) => return Err(e),
    };

    let clock = Instant::now();
    let first_span = plan.first_span();
    let first = run(weights, cfg, &Weave::Identity, &seq[first_span.clone()], 0, None)?;
    cache.append_segment(&first.kv)?;
    let mut cells = first.cells;
    timings.first = clock.elapsed();

    let clock = Instant::now();
    let spans: Vec<_> = plan.middle_spans().collect();
    let context = CacheSpan {
        cache: &cache,
        span: (0, first_span.end),
    };
    let middles = cfg.exec.map_slice(&spans, |span| {
        let local = ChunkLocal {
            first_len: first_span.end,
            chunk_start: span.start,
        };
        run(weights, cfg, &local, &seq[span.clone()], span.start, Some(context))
    });
    let middles = middles.into_iter().collect::<Result<Vec<_>>>()?;
    for out in &middles {
        cache.append_segment(&out.kv)?;
        cells += out.cells;
    }
    timings.middle = clock.elapsed();

    let clock = Instant::now();
    let last_range = plan.last_range();
    let context = CacheSpan {
        cache: &cache,
        span: (0, last_range.start),
    };
    let last = run(weights, cfg, &anchored, &seq[last_range.clone()], last_range.start, Some(context))?;
    cache.append_segment(&last.kv)?;
    cells += last.cells;
    timings.last = clock.elapsed();

    Ok(Prefill {
        logits: final_logits(weights, &last),
        cache,
        mode: PrefillMode::Chunked,
        plan: Some(plan),
        cells,
        timings,
        last,
    })
}

/// Feeds one token against the full cache with distances woven at the new
/// position. Returns its logits and the number of keys attended.
pub fn decode_step(
    cache: &mut KvCache,
    next_token: usize,
    weights: &ModelWeights,
    cfg: &MesaConfig,
) -> Result<(Vec<f64>, u64)> {
    let weave = cfg.validate()?;
    let p = cache.next_index();
    let anchored = Anchored { anchor: p, weave };
    let out = run(
        weights,
        cfg,
        &anchored,
        &[next_token],
        p,
        Some(CacheSpan {
            cache,
            span: (0, p),
        }),
    )?;
    cache.append_segment(&out.kv)?;
    Ok((final_logits(weights, &out), out.cells))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: PrefillMode,
    pub plan: Option<ChunkPlan>,
    /// Positions processed by prefill, `<bos>` included.
    pub input_tokens: usize,
    pub generated: Vec<usize>,
    pub prefill_cells: u64,
    pub decode_cells: u64,
    pub cache_tokens: usize,
    pub kv_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub report: RunReport,
    pub timings: StageTimings,
}

/// Greedy generation: prefill, then decode until `stop` or `max_new` tokens.
pub fn generate(
    tokens: &[usize],
    weights: &ModelWeights,
    cfg: &MesaConfig,
    max_new: usize,
    stop: Option<usize>,
) -> Result<Generation> {
    let pre = prefill(tokens, weights, cfg)?;
    let mut timings = pre.timings;
    let mut cache = pre.cache;
    let mut generated = Vec::with_capacity(max_new);
    let mut decode_cells = 0;
    let mut logits = pre.logits;
    let clock = Instant::now();
    while generated.len() < max_new {
        let next = argmax(&logits);
        generated.push(next);
        if Some(next) == stop || generated.len() == max_new {
            break;
        }
        let (l, cells) = decode_step(&mut cache, next, weights, cfg)?;
        logits = l;
        decode_cells += cells;
    }
    timings.decode = clock.elapsed();
    Ok(Generation {
        report: RunReport {
            mode: pre.mode,
            plan: pre.plan,
            input_tokens: tokens.len() + 1,
            generated,
            prefill_cells: pre.cells,
            decode_cells,
            cache_tokens: cache.len(),
            kv_bytes: cache.bytes(),
        },
        timings,
    })
}

/// Which `(query, key)` scores the chunked prefill computes.
pub fn score_pattern(plan: &ChunkPlan) -> Vec<Vec<bool>> {
    let first = plan.first_length;
    let last_start = plan.last_span.0;
    (0..plan.total)
        .map(|t| {
            (0..plan.total)
                .map(|i| {
                    if i > t {
                        false
                    } else if t < first || t >= last_start {
                        true
                    } else {
                        let chunk = plan.middle_chunk_of(t).expect("t lies in a middle chunk");
                        i < first || i >= chunk.start
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_trace, ModelConfig};
    use crate::splitter::dynamic_split;

    fn toy() -> MesaConfig {
        MesaConfig {
            weave: WeaveParams::stair(4, 2),
            split: SplitParams {
                first: 3,
                last_min: 4,
                m_max: 1,
            },
            t_train: 6,
            ..Default::default()
        }
    }

    #[test]
    fn short_input_matches_vanilla() {
        let w = ModelWeights::random(&ModelConfig::default(), 1).unwrap();
        let cfg = MesaConfig {
            t_train: 16,
            weave: WeaveParams::stair(8, 2),
            split: SplitParams {
                first: 4,
                last_min: 8,
                m_max: 2,
            },
            ..Default::default()
        };
        let tokens = [5, 9, 13, 2, 40];
        let pre = prefill(&tokens, &w, &cfg).unwrap();
        let vanilla = forward_trace(&tokens, &w, &Attention::new(cfg.pe, &Weave::Identity)).unwrap();
        assert_eq!(pre.mode, PrefillMode::Vanilla);
        assert_eq!(pre.logits, vanilla.logits(&w));
        assert_eq!(pre.cache.indices(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn thirteen_token_pattern() {
        let plan = dynamic_split(13, 6, 3, 4, 1).unwrap();
        let pattern = score_pattern(&plan);
        let row = |t: usize| -> String { pattern[t].iter().map(|&b| if b { '#' } else { '.' }).collect() };
        assert_eq!(row(2), "###..........");
        assert_eq!(row(5), "######.......");
        assert_eq!(row(7), "###...##.....");
        assert_eq!(row(12), "#############");
        let cells: usize = pattern.iter().flatten().filter(|&&b| b).count();

        let w = ModelWeights::random(&ModelConfig::default(), 2).unwrap();
        let tokens: Vec<usize> = (1..13).collect();
        let pre = prefill(&tokens, &w, &toy()).unwrap();
        assert_eq!(pre.mode, PrefillMode::Chunked);
        assert_eq!(pre.cells, cells as u64);
        assert_eq!(pre.cache.indices(), (0..13).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn decode_extends_cache() {
        let w = ModelWeights::random(&ModelConfig::default(), 4).unwrap();
        let tokens: Vec<usize> = (1..20).collect();
        let cfg = toy();
        let mut pre = prefill(&tokens, &w, &cfg).unwrap();
        let (_, cells) = decode_step(&mut pre.cache, 7, &w, &cfg).unwrap();
        assert_eq!(cells, 21);
        assert_eq!(pre.cache.len(), 21);
    }

    #[test]
    fn generate_is_deterministic() {
        let w = ModelWeights::random(&ModelConfig::default(), 6).unwrap();
        let tokens: Vec<usize> = (1..30).collect();
        let a = generate(&tokens, &w, &toy(), 5, None).unwrap();
        let b = generate(&tokens, &w, &toy(), 5, None).unwrap();
        assert_eq!(a.report.generated, b.report.generated);
        assert_eq!(a.report.generated.len(), 5);
        assert_eq!(a.report.cache_tokens, 30 + 4);
    }

    #[test]
    fn rejects_weave_outside_window() {
        let cfg = MesaConfig {
            t_train: 256,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
