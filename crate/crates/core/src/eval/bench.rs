use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cells::{CellParams, Method};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::masks::MaskKind;
use crate::mesa::{decode_step, prefill, MesaConfig};
use crate::model::{argmax, run_segment, Attention, CacheSpan, KvCache, ModelConfig, ModelWeights, Segment, BOS};
use crate::pe::Weave;

/// Peak-allocation probe supplied by the binary (the library installs no
/// global allocator).
pub trait MemoryProbe: Sync {
    fn reset(&self);
    fn peak_bytes(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub model: ModelConfig,
    pub seed: u64,
    pub mesa: MesaConfig,
    pub decode_tokens: usize,
    pub repeats: usize,
    pub exec: Parallelism,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            model: ModelConfig::default(),
            seed: 0,
            mesa: MesaConfig::default(),
            decode_tokens: 4,
            repeats: 1,
            exec: Parallelism::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    pub repeat: usize,
    pub prefill_ms: f64,
    pub decode_ms: f64,
    /// Prefill scores computed by one head of one layer.
    pub cells: u64,
    pub kv_bytes: usize,
    pub peak_bytes: Option<usize>,
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(1..vocab)).collect()
}

fn mask_for(method: Method, params: &CellParams) -> Result<MaskKind> {
    match method {
        Method::Vanilla => Ok(MaskKind::Causal),
        Method::Lambda => Ok(params.lambda_mask()),
        Method::Sink => Ok(params.sink_mask()),
        other => Err(Error::param("method", format!("`{other}` has no single-pass benchmark"))),
    }
}

struct Timed {
    prefill_ms: f64,
    decode_ms: f64,
    cells: u64,
    kv_bytes: usize,
}

fn masked_run(weights: &ModelWeights, tokens: &[usize], mask: MaskKind, opts: &BenchOptions) -> Result<Timed> {
    let attn = Attention::new(opts.mesa.pe, &Weave::Identity)
        .with_mask(mask)
        .with_exec(opts.exec);
    let mut seq = vec![BOS];
    seq.extend_from_slice(tokens);
    let clock = Instant::now();
    let out = run_segment(
        weights,
        Segment {
            tokens: &seq,
            start: 0,
            context: None,
        },
        &attn,
        true,
    )?;
    let mut cache = KvCache::for_model(weights);
    cache.append_segment(&out.kv)?;
    let prefill_ms = clock.elapsed().as_secs_f64() * 1e3;
    let h = out.hidden.last().expect("embedding present");
    let mut next = argmax(&weights.logits(h.column(h.len() - 1)));

    let clock = Instant::now();
    for _ in 0..opts.decode_tokens {
        let p = cache.next_index();
        let step = run_segment(
            weights,
            Segment {
                tokens: &[next],
                start: p,
                context: Some(CacheSpan {
                    cache: &cache,
                    span: (0, p),
                }),
            },
            &attn,
            true,
        )?;
        cache.append_segment(&step.kv)?;
        let h = step.hidden.last().expect("embedding present");
        next = argmax(&weights.logits(h.column(0)));
    }
    Ok(Timed {
        prefill_ms,
        decode_ms: clock.elapsed().as_secs_f64() * 1e3,
        cells: out.cells,
        kv_bytes: cache.bytes(),
    })
}

fn mesa_run(weights: &ModelWeights, tokens: &[usize], opts: &BenchOptions) -> Result<Timed> {
    let cfg = MesaConfig {
        exec: opts.exec,
        ..opts.mesa
    };
    let clock = Instant::now();
    let pre = prefill(tokens, weights, &cfg)?;
    let prefill_ms = clock.elapsed().as_secs_f64() * 1e3;
    let mut cache = pre.cache;
    let mut next = argmax(&pre.logits);
    let clock = Instant::now();
    for _ in 0..opts.decode_tokens {
        let (logits, _) = decode_step(&mut cache, next, weights, &cfg)?;
        next = argmax(&logits);
    }
    Ok(Timed {
        prefill_ms,
        decode_ms: clock.elapsed().as_secs_f64() * 1e3,
        cells: pre.cells,
        kv_bytes: cache.bytes(),
    })
}

/// Times prefill plus `decode_tokens` greedy steps on a random-weight model
/// for every input length in `n_list` (counted without `<bos>`).
pub fn bench_run(
    method: Method,
    n_list: &[usize],
    opts: &BenchOptions,
    probe: Option<&dyn MemoryProbe>,
) -> Result<Vec<BenchRow>> {
    let weights = ModelWeights::random(&opts.model, opts.seed)?;
    let params = CellParams::new(opts.mesa.t_train, opts.mesa.split);
    let mut rows = Vec::with_capacity(n_list.len() * opts.repeats);
    for &n in n_list {
        let tokens = random_tokens(n, opts.model.vocab, opts.seed ^ n as u64);
        for repeat in 0..opts.repeats.max(1) {
            if let Some(p) = probe {
                p.reset();
            }
            let timed = match method {
                Method::Mesa => mesa_run(&weights, &tokens, opts)?,
                other => masked_run(&weights, &tokens, mask_for(other, &params)?, opts)?,
            };
            rows.push(BenchRow {
                method,
                n,
                repeat,
                prefill_ms: timed.prefill_ms,
                decode_ms: timed.decode_ms,
                cells: timed.cells,
                kv_bytes: timed.kv_bytes,
                peak_bytes: probe.map(|p| p.peak_bytes()),
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method", "n", "repeat", "prefill_ms", "decode_ms", "cells", "kv_bytes", "peak_bytes",
    ])?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.n.to_string(),
            r.repeat.to_string(),
            format!("{:.3}", r.prefill_ms),
            format!("{:.3}", r.decode_ms),
            r.cells.to_string(),
            r.kv_bytes.to_string(),
            r.peak_bytes.map_or_else(String::new, |b| b.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::cells::count_cells;
    use crate::pe::WeaveParams;
    use crate::splitter::SplitParams;

    fn small() -> BenchOptions {
        BenchOptions {
            model: ModelConfig {
                d: 8,
                head_dim: 4,
                num_layers: 1,
                vocab: 16,
                ..Default::default()
            },
            mesa: MesaConfig {
                weave: WeaveParams::stair(8, 2),
                split: SplitParams {
                    first: 4,
                    last_min: 8,
                    m_max: 3,
                },
                t_train: 16,
                ..Default::default()
            },
            decode_tokens: 2,
            ..Default::default()
        }
    }

    #[test]
    fn cells_match_closed_form() {
        let opts = small();
        let params = CellParams::new(16, opts.mesa.split);
        for method in [Method::Vanilla, Method::Mesa, Method::Lambda, Method::Sink] {
            let rows = bench_run(method, &[15, 63], &opts, None).unwrap();
            for r in rows {
                assert_eq!(r.cells, count_cells(method, r.n + 1, &params).unwrap(), "{method} n={}", r.n);
            }
        }
    }

    #[test]
    fn rejects_dual() {
        assert!(bench_run(Method::ReropeDual, &[8], &small(), None).is_err());
    }
}
