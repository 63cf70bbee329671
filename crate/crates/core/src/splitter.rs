//! DynamicSplit: partitions an input of `I` tokens into a first chunk of
//! `F` tokens, equal-width middle chunks of `C` tokens and a last chunk of at
//! least `L` tokens, so that a middle chunk plus the first chunk never
//! exceeds the training window `T`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split constants. Defaults: `F = 100`, `L = 512`, `M_max = 200`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    #[serde(rename = "F")]
    pub first: usize,
    #[serde(rename = "L")]
    pub last_min: usize,
    #[serde(rename = "M_max")]
    pub m_max: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            first: 100,
            last_min: 512,
            m_max: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    #[serde(rename = "I")]
    pub total: usize,
    #[serde(rename = "T")]
    pub t_train: usize,
    #[serde(rename = "F")]
    pub first_length: usize,
    #[serde(rename = "C")]
    pub chunk_width: usize,
    #[serde(rename = "L")]
    pub last_min: usize,
    /// `floor((I - L - F) / (T - F))`
    #[serde(rename = "N")]
    pub quotient: usize,
    /// `(I - L - F) mod (T - F)`
    #[serde(rename = "M")]
    pub remainder: usize,
    #[serde(rename = "M_max")]
    pub m_max: usize,
    pub num_middle: usize,
    /// Leading middle chunks that are one token wider than `C`.
    pub wide_chunks: usize,
    pub last_span: (usize, usize),
}

impl ChunkPlan {
    pub fn first_span(&self) -> Range<usize> {
        0..self.first_length
    }

    pub fn middle_spans(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_middle).map(move |k| {
            let start = self.first_length + k * self.chunk_width + k.min(self.wide_chunks);
            let width = self.chunk_width + usize::from(k < self.wide_chunks);
            start..start + width
        })
    }

    /// Span of the middle chunk holding token `t`, if any.
    pub fn middle_chunk_of(&self, t: usize) -> Option<Range<usize>> {
        self.middle_spans().find(|s| s.contains(&t))
    }

    pub fn last_range(&self) -> Range<usize> {
        self.last_span.0..self.last_span.1
    }

    pub fn last_len(&self) -> usize {
        self.last_span.1 - self.last_span.0
    }
}

/// Runs DynamicSplit.
///
/// When `M < M_max` the middle width is `T - F` and the `M` leftover tokens
/// join the last chunk; otherwise the `I - L - F` tokens are spread over
/// `N + 1` chunks of width `C` or `C + 1`, the wider ones first, and the last
/// chunk keeps exactly `L` tokens.
pub fn dynamic_split(
    input: usize,
    t_train: usize,
    first: usize,
    last_min: usize,
    m_max: usize,
) -> Result<ChunkPlan> {
    if first < 1 {
        return Err(Error::param("F", "first chunk must hold at least one token"));
    }
    if t_train <= first {
        return Err(Error::param(
            "T",
            format!("training length {t_train} must exceed F = {first}"),
        ));
    }
    let minimum = last_min + first;
    if input <= minimum {
        return Err(Error::InputTooShort { input, minimum });
    }

    let body = input - minimum;
    let window = t_train - first;
    let quotient = body / window;
    let remainder = body % window;
    let (chunk_width, num_middle, wide_chunks) = if remainder < m_max {
        (window, quotient, 0)
    } else {
        (body / (quotient + 1), quotient + 1, body % (quotient + 1))
    };
    let last_start = first + num_middle * chunk_width + wide_chunks;

    Ok(ChunkPlan {
        total: input,
        t_train,
        first_length: first,
        chunk_width,
        last_min,
        quotient,
        remainder,
        m_max,
        num_middle,
        wide_chunks,
        last_span: (last_start, input),
    })
}

pub fn dynamic_split_with(input: usize, t_train: usize, params: &SplitParams) -> Result<ChunkPlan> {
    dynamic_split(input, t_train, params.first, params.last_min, params.m_max)
}

/// Ordered, contiguous, half-open spans covering `[0, I)`.
pub fn chunk_spans(plan: &ChunkPlan) -> Vec<(usize, usize)> {
    std::iter::once(plan.first_span())
        .chain(plan.middle_spans())
        .chain(std::iter::once(plan.last_range()))
        .map(|r| (r.start, r.end))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_thousand() {
        let plan = dynamic_split(9000, 4096, 100, 512, 200).unwrap();
        assert_eq!((plan.quotient, plan.remainder), (2, 396));
        assert_eq!(plan.chunk_width, 2796);
        assert_eq!(plan.num_middle, 3);
        assert_eq!(
            chunk_spans(&plan),
            vec![(0, 100), (100, 2896), (2896, 5692), (5692, 8488), (8488, 9000)]
        );
    }

    #[test]
    fn five_thousand() {
        let plan = dynamic_split(5000, 4096, 100, 512, 200).unwrap();
        assert_eq!((plan.quotient, plan.remainder), (1, 392));
        assert_eq!(plan.chunk_width, 2194);
        assert_eq!(100 + 2 * 2194 + plan.last_len(), 5000);
        assert_eq!(plan.last_len(), 512);
    }

    #[test]
    fn small_remainder_goes_to_last_chunk() {
        let plan = dynamic_split(4704, 4096, 100, 512, 200).unwrap();
        assert_eq!((plan.quotient, plan.remainder), (1, 96));
        assert_eq!(plan.chunk_width, 3996);
        assert_eq!(plan.num_middle, 1);
        assert_eq!(plan.last_len(), 608);
    }

    #[test]
    fn no_middle_chunks() {
        let plan = dynamic_split(700, 4096, 100, 512, 200).unwrap();
        assert_eq!(plan.num_middle, 0);
        assert_eq!(chunk_spans(&plan), vec![(0, 100), (100, 700)]);
    }

    #[test]
    fn thirteen_token_layout() {
        // F = 3, two middle chunks of 3, last chunk of 4
        let plan = dynamic_split(13, 6, 3, 4, 1).unwrap();
        assert_eq!(chunk_spans(&plan), vec![(0, 3), (3, 6), (6, 9), (9, 13)]);
    }

    #[test]
    fn flooring_remainder_widens_leading_chunks() {
        // body = 8390 over three chunks: 2797, 2797, 2796
        let plan = dynamic_split(9002, 4096, 100, 512, 200).unwrap();
        assert_eq!((plan.chunk_width, plan.wide_chunks), (2796, 2));
        assert_eq!(
            chunk_spans(&plan),
            vec![(0, 100), (100, 2897), (2897, 5694), (5694, 8490), (8490, 9002)]
        );
        assert_eq!(plan.middle_chunk_of(2897), Some(2897..5694));
        assert_eq!(plan.middle_chunk_of(50), None);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(matches!(
            dynamic_split(612, 4096, 100, 512, 200),
            Err(Error::InputTooShort { input: 612, minimum: 612 })
        ));
        assert!(dynamic_split(9000, 100, 100, 512, 200).is_err());
        assert!(dynamic_split(9000, 50, 100, 512, 200).is_err());
    }

    #[test]
    fn plan_serializes_with_symbol_names() {
        let plan = dynamic_split(9000, 4096, 100, 512, 200).unwrap();
        let v = serde_json::to_value(&plan).unwrap();
        for key in ["F", "C", "L", "I", "T", "N", "M"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["C"], 2796);
    }
}
