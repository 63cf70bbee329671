use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::splitter::{dynamic_split_with, ChunkPlan, SplitParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Mesa,
    Lambda,
    Sink,
    /// Two full attention matrices (plain and capped distances).
    ReropeDual,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Vanilla, Method::Mesa, Method::Lambda, Method::Sink, Method::ReropeDual];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Mesa => "mesa",
            Method::Lambda => "lambda",
            Method::Sink => "sink",
            Method::ReropeDual => "rerope_dual",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::param("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellParams {
    #[serde(rename = "T")]
    pub t_train: usize,
    pub split: SplitParams,
    pub lambda_global: usize,
    pub sink_tokens: usize,
}

impl CellParams {
    /// Global branch of 100 and a local branch of `T`; 4 sinks and a window
    /// of `T - 4`.
    pub fn new(t_train: usize, split: SplitParams) -> Self {
        CellParams {
            t_train,
            split,
            lambda_global: 100,
            sink_tokens: 4,
        }
    }

    pub fn lambda_mask(&self) -> MaskKind {
        MaskKind::Lambda {
            global: self.lambda_global,
            local: self.t_train,
        }
    }

    pub fn sink_mask(&self) -> MaskKind {
        MaskKind::Sink {
            sinks: self.sink_tokens,
            recent: self.t_train.saturating_sub(self.sink_tokens),
        }
    }
}

fn causal(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Cells of a chunked prefill: first chunk alone, each middle chunk against
/// the first chunk plus itself, the last chunk against everything.
pub fn mesa_cells(plan: &ChunkPlan) -> u64 {
    let f = plan.first_length as u64;
    let middle: u64 = plan
        .middle_spans()
        .map(|s| {
            let c = s.len() as u64;
            causal(c) + c * f
        })
        .sum();
    let (start, end) = (plan.last_span.0 as u64, plan.last_span.1 as u64);
    // Σ_{t=start}^{end-1} (t + 1)
    let last = causal(end) - causal(start);
    causal(f) + middle + last
}

/// Exact number of attention scores computed over `n` positions.
pub fn count_cells(method: Method, n: usize, params: &CellParams) -> Result<u64> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(match method {
        Method::Vanilla => causal(n as u64),
        Method::ReropeDual => 2 * causal(n as u64),
        Method::Lambda => params.lambda_mask().cell_count(n),
        Method::Sink => params.sink_mask().cell_count(n),
        Method::Mesa => {
            if n <= params.t_train {
                causal(n as u64)
            } else {
                match dynamic_split_with(n, params.t_train, &params.split) {
                    Ok(plan) => mesa_cells(&plan),
                    Err(Error::InputTooShort { .. }) => causal(n as u64),
                    Err(e) => return Err(e),
                }
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRow {
    pub method: Method,
    pub n: usize,
    pub cells: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCountReport {
    pub params: CellParams,
    pub rows: Vec<CellRow>,
}

impl CellCountReport {
    pub fn build(methods: &[Method], ns: &[usize], params: &CellParams) -> Result<Self> {
        let mut rows = Vec::with_capacity(methods.len() * ns.len());
        for &method in methods {
            for &n in ns {
                rows.push(CellRow {
                    method,
                    n,
                    cells: count_cells(method, n, params)?,
                });
            }
        }
        Ok(CellCountReport { params: *params, rows })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "n", "cells"])?;
        for r in &self.rows {
            w.write_record([r.method.name().to_string(), r.n.to_string(), r.cells.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `cells(2n) / cells(n)`
pub fn growth_ratio(method: Method, n: usize, params: &CellParams) -> Result<f64> {
    Ok(count_cells(method, 2 * n, params)? as f64 / count_cells(method, n, params)? as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitter::dynamic_split;

    fn defaults() -> CellParams {
        CellParams::new(4096, SplitParams::default())
    }

    #[test]
    fn vanilla_and_dual() {
        assert_eq!(count_cells(Method::Vanilla, 10, &defaults()).unwrap(), 55);
        assert_eq!(count_cells(Method::ReropeDual, 10, &defaults()).unwrap(), 110);
        assert!(count_cells(Method::Vanilla, 0, &defaults()).is_err());
    }

    #[test]
    fn mesa_nine_thousand() {
        let plan = dynamic_split(9000, 4096, 100, 512, 200).unwrap();
        let (f, c) = (100u64, 2796u64);
        let expected = f * (f + 1) / 2 + 3 * (c * (c + 1) / 2 + c * f) + (1..=512u64).map(|j| 8488 + j).sum::<u64>();
        assert_eq!(mesa_cells(&plan), expected);
        assert_eq!(count_cells(Method::Mesa, 9000, &defaults()).unwrap(), expected);
    }

    #[test]
    fn masks_cap_rows() {
        let p = CellParams::new(8, SplitParams::default());
        // rows t < 8 are fully causal (36 cells), later rows see 4 sinks plus 4 recent keys
        let sink = count_cells(Method::Sink, 12, &p).unwrap();
        assert_eq!(sink, 36 + 4 * 8);
        assert_eq!(count_cells(Method::Lambda, 12, &p).unwrap(), 78);
    }

    #[test]
    fn parse_methods() {
        assert_eq!("rerope-dual".parse::<Method>().unwrap(), Method::ReropeDual);
        assert!("nope".parse::<Method>().is_err());
    }
}
