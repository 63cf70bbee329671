//! Attention masks and bias matrices for the causal baseline and the
//! comparison methods (LM-Infinite Λ-mask, Streaming-LLM sink mask, MPT's
//! approximate ALiBi bias).
//!
//! Masks are stored as a rule, not a dense matrix. Each row is the union of
//! at most two half-open key intervals, which keeps cell counts exact and
//! O(n) at any length.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length-independent masking rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskKind {
    Causal,
    /// Global branch on the first `global` keys plus a local band of width `local`.
    Lambda { global: usize, local: usize },
    /// `sinks` initial tokens plus a rolling window of the `recent` latest tokens.
    Sink { sinks: usize, recent: usize },
}

impl MaskKind {
    #[inline]
    pub fn allowed(&self, t: usize, i: usize) -> bool {
        if i > t {
            return false;
        }
        match *self {
            MaskKind::Causal => true,
            MaskKind::Lambda {
                global: head,
                local: band,
            }
            | MaskKind::Sink {
                sinks: head,
                recent: band,
            } => i < head || t - i < band,
        }
    }

    /// Allowed keys of row `t` as at most two disjoint ascending intervals.
    pub fn row_ranges(&self, t: usize) -> (Range<usize>, Range<usize>) {
        match *self {
            MaskKind::Causal => (0..t + 1, 0..0),
            MaskKind::Lambda {
                global: head,
                local: band,
            }
            | MaskKind::Sink {
                sinks: head,
                recent: band,
            } => {
                let head_end = head.min(t + 1);
                let band_start = (t + 1).saturating_sub(band).max(head_end);
                (0..head_end, band_start..t + 1)
            }
        }
    }

    pub fn row_count(&self, t: usize) -> usize {
        let (a, b) = self.row_ranges(t);
        a.len() + b.len()
    }

    /// Exact number of allowed cells in an `n × n` mask.
    pub fn cell_count(&self, n: usize) -> u64 {
        match *self {
            MaskKind::Causal => {
                let n = n as u64;
                n * (n + 1) / 2
            }
            _ => (0..n).map(|t| self.row_count(t) as u64).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub n: usize,
    pub kind: MaskKind,
}

impl AttentionMask {
    pub fn allowed(&self, t: usize, i: usize) -> bool {
        t < self.n && self.kind.allowed(t, i)
    }

    pub fn cell_count(&self) -> u64 {
        self.kind.cell_count(self.n)
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.n)
            .map(|t| (0..self.n).map(|i| self.allowed(t, i)).collect())
            .collect()
    }

    /// Dense 0/1 CSV, intended for small `n` only.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in self.to_dense() {
            writer.write_record(row.iter().map(|&a| if a { "1" } else { "0" }))?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn check_len(n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::param("n", "mask length must be >= 1"));
    }
    Ok(())
}

pub fn causal_mask(n: usize) -> Result<AttentionMask> {
    check_len(n)?;
    Ok(AttentionMask {
        n,
        kind: MaskKind::Causal,
    })
}

pub fn lambda_mask(n: usize, n_global: usize, n_local: usize) -> Result<AttentionMask> {
    check_len(n)?;
    if n_global < 1 || n_local < 1 {
        return Err(Error::param("n_global/n_local", "branch sizes must be >= 1"));
    }
    Ok(AttentionMask {
        n,
        kind: MaskKind::Lambda {
            global: n_global,
            local: n_local,
        },
    })
}

pub fn sink_mask(n: usize, x_sinks: usize, y_recent: usize) -> Result<AttentionMask> {
    check_len(n)?;
    if x_sinks < 1 || y_recent < 1 {
        return Err(Error::param("x/y", "sink and window sizes must be >= 1"));
    }
    Ok(AttentionMask {
        n,
        kind: MaskKind::Sink {
            sinks: x_sinks,
            recent: y_recent,
        },
    })
}

/// MPT-style ALiBi bias: every row is anchored at the final column,
/// `bias(t, i) = i - (n - 1)` for `i <= t`. Multiply by a head slope to use.
pub fn approx_alibi_bias(n: usize) -> Result<Vec<Vec<f64>>> {
    check_len(n)?;
    let last = (n - 1) as f64;
    Ok((0..n)
        .map(|t| (0..=t).map(|i| i as f64 - last).collect())
        .collect())
}

/// Exact (unit-slope) ALiBi bias `-(t - i)`.
pub fn exact_alibi_bias(n: usize) -> Result<Vec<Vec<f64>>> {
    check_len(n)?;
    Ok((0..n)
        .map(|t| (0..=t).map(|i| -((t - i) as f64)).collect())
        .collect())
}
