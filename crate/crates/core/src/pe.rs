//! Positional-encoding score functions and weave functions.
//!
//! A weave function remaps the raw relative distance `t - i` between a query
//! at position `t` and a key at position `i` before the positional score is
//! applied. Every weave here returns an `f64` so integer-valued schemes and
//! the fractional Leaky-ReRoPE share one signature.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RoPE angle base.
pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

fn check_distance(d: i64) -> Result<u64> {
    u64::try_from(d).map_err(|_| Error::NegativeDistance(d))
}

fn stair(d: u64, n: u64, e: u64) -> u64 {
    if d <= n {
        d
    } else {
        n + (d - n).div_ceil(e)
    }
}

/// Stair PE: `d` up to `n`, then one extra unit every `e` raw steps.
pub fn weave_stair(d: i64, n: u64, e: u64) -> Result<f64> {
    let d = check_distance(d)?;
    if e == 0 {
        return Err(Error::param("E", "extrapolated width must be >= 1"));
    }
    Ok(stair(d, n, e) as f64)
}

/// ReRoPE: distances saturate at `n`.
pub fn weave_rerope(d: i64, n: u64) -> Result<f64> {
    Ok(check_distance(d)?.min(n) as f64)
}

/// Leaky-ReRoPE: distances beyond `n` grow by `k_inv` per raw step.
pub fn weave_leaky(d: i64, n: u64, k_inv: f64) -> Result<f64> {
    let d = check_distance(d)?;
    if !(k_inv > 0.0 && k_inv.is_finite()) {
        return Err(Error::param("k_inv", format!("must be positive, got {k_inv}")));
    }
    Ok(leaky(d, n, k_inv))
}

fn leaky(d: u64, n: u64, k_inv: f64) -> f64 {
    if d <= n {
        d as f64
    } else {
        n as f64 + (d - n) as f64 * k_inv
    }
}

/// Leak increment `1/k = (T - w) / (I - w)` for a model trained on `t_train`
/// tokens, an input of `input` tokens and extrapolated position `w`.
pub fn leaky_k_inv(t_train: usize, input: usize, w: usize) -> Result<f64> {
    if input <= w {
        return Err(Error::param("I", format!("input length {input} must exceed w = {w}")));
    }
    if t_train <= w {
        return Err(Error::param("T", format!("training length {t_train} must exceed w = {w}")));
    }
    Ok((t_train - w) as f64 / (input - w) as f64)
}

fn check_order(t: usize, i: usize) -> Result<()> {
    if i > t {
        return Err(Error::NegativeDistance(t as i64 - i as i64));
    }
    Ok(())
}

/// Self-Extend relative position between query `t` and key `i`, neighbour
/// window `w`, group size `g`: raw distance inside the window, grouped
/// (floored) coordinates outside of it.
pub fn self_extend_map(t: usize, i: usize, w: usize, g: usize) -> Result<f64> {
    check_order(t, i)?;
    if g == 0 {
        return Err(Error::param("G", "group size must be >= 1"));
    }
    let d = t - i;
    if d < w {
        return Ok(d as f64);
    }
    Ok((t / g + w - w / g - i / g) as f64)
}

/// Self-Extend in its distance-only form with every floor replaced by a
/// ceiling: `w + ceil(d / g) - ceil(w / g)` outside the window.
pub fn self_extend_map_ceil(t: usize, i: usize, w: usize, g: usize) -> Result<f64> {
    check_order(t, i)?;
    if g == 0 {
        return Err(Error::param("G", "group size must be >= 1"));
    }
    let d = t - i;
    if d < w {
        return Ok(d as f64);
    }
    Ok((w + d.div_ceil(g) - w.div_ceil(g)) as f64)
}

/// Whether Self-Extend (ceiling-adjusted) and Stair PE with `N = w`, `E = g`
/// coincide at this query/key pair.
pub fn stair_selfextend_equivalent(t: usize, i: usize, w: usize, g: usize) -> bool {
    g > 0 && t >= i && t % g >= i % g && w.is_multiple_of(g)
}

/// Per-pair RoPE angle for pair `j` of a `dim`-dimensional head.
pub fn rope_frequency(j: usize, dim: usize, theta_base: f64) -> f64 {
    theta_base.powf(-2.0 * j as f64 / dim as f64)
}

fn check_even(dim: usize) -> Result<()> {
    if !dim.is_multiple_of(2) {
        return Err(Error::DimensionMismatch(format!(
            "rotary embedding needs an even dimension, got {dim}"
        )));
    }
    Ok(())
}

/// `qᵀ R(d·θ) k`, where `R` rotates each consecutive pair counter-clockwise
/// by `d·θ_j` and `θ_j = base^(-2j/dim)`. Fractional `d` is allowed.
pub fn rope_score(q: &[f64], k: &[f64], d: f64, theta_base: f64) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} dims, key has {}",
            q.len(),
            k.len()
        )));
    }
    check_even(q.len())?;
    Ok(rope_score_unchecked(q, k, d, theta_base))
}

pub(crate) fn rope_score_unchecked(q: &[f64], k: &[f64], d: f64, theta_base: f64) -> f64 {
    let dim = q.len();
    let mut acc = 0.0;
    for j in 0..dim / 2 {
        let (sin, cos) = (d * rope_frequency(j, dim, theta_base)).sin_cos();
        let (k0, k1) = (k[2 * j], k[2 * j + 1]);
        acc += q[2 * j] * (cos * k0 - sin * k1) + q[2 * j + 1] * (sin * k0 + cos * k1);
    }
    acc
}

/// Rotates `v` into absolute position `pos`, such that
/// `rotate(q, t) · rotate(k, i) == rope_score(q, k, t - i)`.
pub fn apply_rotary(v: &[f64], pos: f64, theta_base: f64) -> Result<Vec<f64>> {
    check_even(v.len())?;
    let dim = v.len();
    let mut out = vec![0.0; dim];
    for j in 0..dim / 2 {
        let (sin, cos) = (-pos * rope_frequency(j, dim, theta_base)).sin_cos();
        out[2 * j] = cos * v[2 * j] - sin * v[2 * j + 1];
        out[2 * j + 1] = sin * v[2 * j] + cos * v[2 * j + 1];
    }
    Ok(out)
}

/// Geometric ALiBi slopes, head `m` gets `2^(-8(m+1)/num_heads)`.
pub fn alibi_slopes(num_heads: usize) -> Vec<f64> {
    (0..num_heads)
        .map(|m| (-8.0 * (m + 1) as f64 / num_heads as f64).exp2())
        .collect()
}

pub fn alibi_score(qk_dot: f64, d: f64, slope: f64) -> f64 {
    qk_dot - d * slope
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "nope")]
    NoPE,
    #[serde(rename = "rope")]
    RoPE,
    #[serde(rename = "alibi")]
    ALiBi,
    #[serde(rename = "approx-alibi")]
    ApproxALiBi,
    #[serde(rename = "rerope")]
    ReRoPE,
    #[serde(rename = "leaky-rerope")]
    LeakyReRoPE,
    #[serde(rename = "stair")]
    StairPE,
    #[serde(rename = "self-extend")]
    SelfExtend,
}

impl Scheme {
    pub const ALL: [Scheme; 8] = [
        Scheme::NoPE,
        Scheme::RoPE,
        Scheme::ALiBi,
        Scheme::ApproxALiBi,
        Scheme::ReRoPE,
        Scheme::LeakyReRoPE,
        Scheme::StairPE,
        Scheme::SelfExtend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::NoPE => "nope",
            Scheme::RoPE => "rope",
            Scheme::ALiBi => "alibi",
            Scheme::ApproxALiBi => "approx-alibi",
            Scheme::ReRoPE => "rerope",
            Scheme::LeakyReRoPE => "leaky-rerope",
            Scheme::StairPE => "stair",
            Scheme::SelfExtend => "self-extend",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let key = match lower.as_str() {
            "stairpe" | "stair-pe" => "stair",
            "leaky" | "leakyrerope" => "leaky-rerope",
            "selfextend" => "self-extend",
            "approxalibi" | "mpt-alibi" => "approx-alibi",
            other => other,
        };
        Scheme::ALL
            .into_iter()
            .find(|s| s.name() == key)
            .ok_or_else(|| Error::param("scheme", format!("unknown scheme `{s}`")))
    }
}

/// Scheme plus every parameter any scheme might need. Fields a scheme does
/// not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeaveParams {
    pub scheme: Scheme,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "E")]
    pub e: u64,
    pub k_inv: f64,
    #[serde(rename = "W")]
    pub w_group: usize,
    #[serde(rename = "G")]
    pub g_group: usize,
    pub theta_base: f64,
    pub num_heads: usize,
}

impl Default for WeaveParams {
    fn default() -> Self {
        WeaveParams {
            scheme: Scheme::StairPE,
            n: 512,
            e: 50,
            k_inv: 1.0,
            w_group: 512,
            g_group: 50,
            theta_base: DEFAULT_THETA_BASE,
            num_heads: 8,
        }
    }
}

impl WeaveParams {
    pub fn new(scheme: Scheme) -> Self {
        WeaveParams {
            scheme,
            ..Default::default()
        }
    }

    pub fn stair(n: u64, e: u64) -> Self {
        WeaveParams {
            scheme: Scheme::StairPE,
            n,
            e,
            ..Default::default()
        }
    }

    pub fn rerope(n: u64) -> Self {
        WeaveParams {
            scheme: Scheme::ReRoPE,
            n,
            ..Default::default()
        }
    }

    pub fn leaky(n: u64, k_inv: f64) -> Self {
        WeaveParams {
            scheme: Scheme::LeakyReRoPE,
            n,
            k_inv,
            ..Default::default()
        }
    }

    pub fn self_extend(w: usize, g: usize) -> Self {
        WeaveParams {
            scheme: Scheme::SelfExtend,
            w_group: w,
            g_group: g,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::param("N", "must be >= 1"));
        }
        if self.e < 1 {
            return Err(Error::param("E", "must be >= 1"));
        }
        if !(self.k_inv > 0.0 && self.k_inv.is_finite()) {
            return Err(Error::param("k_inv", "must be positive"));
        }
        if self.g_group < 1 {
            return Err(Error::param("G", "must be >= 1"));
        }
        if self.w_group < 1 {
            return Err(Error::param("W", "must be >= 1"));
        }
        if !(self.theta_base > 0.0 && self.theta_base.is_finite()) {
            return Err(Error::param("theta_base", "must be positive"));
        }
        if self.num_heads < 1 {
            return Err(Error::param("num_heads", "must be >= 1"));
        }
        Ok(())
    }

    /// The distance-remapping part of the scheme.
    pub fn weave(&self) -> Result<Weave> {
        self.validate()?;
        Ok(match self.scheme {
            Scheme::NoPE | Scheme::RoPE | Scheme::ALiBi | Scheme::ApproxALiBi => Weave::Identity,
            Scheme::ReRoPE => Weave::ReRope { n: self.n },
            Scheme::LeakyReRoPE => Weave::Leaky {
                n: self.n,
                k_inv: self.k_inv,
            },
            Scheme::StairPE => Weave::Stair {
                n: self.n,
                e: self.e,
            },
            Scheme::SelfExtend => Weave::SelfExtend {
                w: self.w_group,
                g: self.g_group,
            },
        })
    }
}

/// Validated weave function, cheap to evaluate in inner loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Weave {
    Identity,
    ReRope { n: u64 },
    Leaky { n: u64, k_inv: f64 },
    Stair { n: u64, e: u64 },
    SelfExtend { w: usize, g: usize },
}

impl Weave {
    /// Woven distance between query `t` and key `i` (`i <= t`).
    #[inline]
    pub fn distance(&self, t: usize, i: usize) -> f64 {
        debug_assert!(i <= t, "key {i} after query {t}");
        let d = (t - i) as u64;
        match *self {
            Weave::Identity => d as f64,
            Weave::ReRope { n } => d.min(n) as f64,
            Weave::Leaky { n, k_inv } => leaky(d, n, k_inv),
            Weave::Stair { n, e } => stair(d, n, e) as f64,
            Weave::SelfExtend { w, g } => {
                if (d as usize) < w {
                    d as f64
                } else {
                    (t / g + w - w / g - i / g) as f64
                }
            }
        }
    }

    /// Same as [`Weave::distance`] for schemes that depend on `t - i` only.
    /// Self-Extend is evaluated with the key at position 0.
    #[inline]
    pub fn apply(&self, d: usize) -> f64 {
        self.distance(d, 0)
    }
}

/// Lower-triangular matrix of woven distances; row `t` holds keys `0..=t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionMatrix {
    pub n: usize,
    pub params: WeaveParams,
    pub rows: Vec<Vec<f64>>,
}

impl PositionMatrix {
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|row| row.get(i)).copied()
    }

    pub fn max_entry(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// Row-major CSV, cells above the diagonal left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in &self.rows {
            let mut record: Vec<String> = row.iter().map(|v| format_number(*v)).collect();
            record.resize(self.n, String::new());
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Pretty JSON document carrying the scheme metadata and the rows.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Integers print without a fractional part; everything else uses the
/// shortest round-tripping representation.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Builds the `n × n` woven-distance matrix of a scheme. Un-woven schemes
/// (NoPE, RoPE, ALiBi, MPT ALiBi) produce plain `t - i`.
pub fn position_matrix(params: &WeaveParams, n: usize) -> Result<PositionMatrix> {
    if n < 1 {
        return Err(Error::param("n", "sequence length must be >= 1"));
    }
    let weave = params.weave()?;
    let rows = (0..n)
        .map(|t| (0..=t).map(|i| weave.distance(t, i)).collect())
        .collect();
    Ok(PositionMatrix {
        n,
        params: *params,
        rows,
    })
}

/// Rotation angle helper for tests and docs: `d · θ` such that the first
/// pair of a 2-d head rotates by a quarter turn.
pub fn quarter_turn_distance(theta_base: f64) -> f64 {
    (PI / 2.0) / rope_frequency(0, 2, theta_base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stair_examples() {
        assert_eq!(weave_stair(4, 4, 2).unwrap(), 4.0);
        assert_eq!(weave_stair(7, 4, 2).unwrap(), 6.0);
        assert_eq!(weave_stair(9, 4, 2).unwrap(), 7.0);
        assert_eq!(weave_stair(600, 512, 50).unwrap(), 514.0);
        assert!(matches!(weave_stair(-1, 4, 2), Err(Error::NegativeDistance(-1))));
        assert!(weave_stair(3, 4, 0).is_err());
    }

    #[test]
    fn rerope_examples() {
        assert_eq!(weave_rerope(2, 4).unwrap(), 2.0);
        assert_eq!(weave_rerope(9, 4).unwrap(), 4.0);
        assert_eq!(weave_rerope(0, 4).unwrap(), 0.0);
        assert!(weave_rerope(-3, 4).is_err());
    }

    #[test]
    fn leaky_examples() {
        let k_inv = leaky_k_inv(6, 10, 4).unwrap();
        assert!((k_inv - 1.0 / 3.0).abs() < 1e-15);
        assert!((weave_leaky(9, 4, k_inv).unwrap() - (4.0 + 5.0 / 3.0)).abs() < 1e-12);
        assert_eq!(weave_leaky(4, 4, 1.0 / 3.0).unwrap(), 4.0);
        assert_eq!(weave_leaky(5, 4, 0.5).unwrap(), 4.5);
        assert!(weave_leaky(5, 4, 0.0).is_err());
    }

    #[test]
    fn leaky_increment() {
        let v = leaky_k_inv(4096, 8192, 512).unwrap();
        assert!((v - 3584.0 / 7680.0).abs() < 1e-15);
        assert!(leaky_k_inv(513, 512, 512).is_err());
        assert_eq!(leaky_k_inv(513, 513, 512).unwrap(), 1.0);
        assert!(leaky_k_inv(512, 9000, 512).is_err());
    }

    #[test]
    fn self_extend_examples() {
        assert_eq!(self_extend_map(10, 5, 4, 2).unwrap(), 5.0);
        assert_eq!(self_extend_map(7, 7, 4, 2).unwrap(), 0.0);
        assert_eq!(self_extend_map(9, 1, 4, 2).unwrap(), 6.0);
        assert!(self_extend_map(1, 2, 4, 2).is_err());
    }

    #[test]
    fn equivalence_condition_examples() {
        assert!(!stair_selfextend_equivalent(10, 5, 4, 2));
        assert!(stair_selfextend_equivalent(8, 2, 4, 2));
        assert!(stair_selfextend_equivalent(6, 6, 4, 2));
        assert!(!stair_selfextend_equivalent(6, 6, 5, 2));
        // the appendix counterexample: 10 // 2 - 5 // 2 != (10 - 5) // 2
        assert_ne!(10 / 2 - 5 / 2, (10 - 5) / 2);
    }

    #[test]
    fn rope_zero_distance_is_dot() {
        let q = [0.3, -1.2, 2.5, 0.7];
        let k = [1.1, 0.4, -0.6, 2.0];
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((rope_score(&q, &k, 0.0, DEFAULT_THETA_BASE).unwrap() - dot).abs() < 1e-15);
    }

    #[test]
    fn rope_quarter_turn() {
        let d = quarter_turn_distance(DEFAULT_THETA_BASE);
        let s = rope_score(&[1.0, 0.0], &[1.0, 0.0], d, DEFAULT_THETA_BASE).unwrap();
        assert!(s.abs() < 1e-15);
        // counter-clockwise: R·(0,1) = (-1,0)
        let s = rope_score(&[1.0, 0.0], &[0.0, 1.0], d, DEFAULT_THETA_BASE).unwrap();
        assert!((s + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_odd_or_mismatched() {
        assert!(rope_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 1.0, 10.0).is_err());
        assert!(rope_score(&[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], 1.0, 10.0).is_err());
    }

    #[test]
    fn rotary_is_relative() {
        let q = [0.5, -0.25, 1.5, 2.0];
        let k = [-1.0, 0.75, 0.1, 0.3];
        for (t, i, shift) in [(9.0, 4.0, 0.0), (9.0, 4.0, 37.0), (100.0, 3.0, 1000.0)] {
            let a = apply_rotary(&q, t + shift, DEFAULT_THETA_BASE).unwrap();
            let b = apply_rotary(&k, i + shift, DEFAULT_THETA_BASE).unwrap();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let direct = rope_score(&q, &k, t - i, DEFAULT_THETA_BASE).unwrap();
            assert!((dot - direct).abs() < 1e-9, "{dot} vs {direct}");
        }
    }

    #[test]
    fn alibi_examples() {
        let slopes = alibi_slopes(8);
        let expected: Vec<f64> = (1..=8).map(|k| 1.0 / f64::from(1u32 << k)).collect();
        assert_eq!(slopes, expected);
        assert_eq!(alibi_slopes(1), vec![2f64.powi(-8)]);
        assert_eq!(alibi_slopes(16)[15], 2f64.powi(-8));
        assert_eq!(alibi_score(0.0, 3.0, 0.5), -1.5);
        assert_eq!(alibi_score(0.42, 0.0, 0.3), 0.42);
        assert_eq!(alibi_score(1.0, 4.0, 0.25), 0.0);
    }

    #[test]
    fn matrix_last_rows() {
        let m = position_matrix(&WeaveParams::stair(4, 2), 10).unwrap();
        assert_eq!(m.rows[9], vec![7.0, 6.0, 6.0, 5.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let m = position_matrix(&WeaveParams::rerope(4), 10).unwrap();
        assert_eq!(m.rows[9], vec![4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        for scheme in Scheme::ALL {
            let m = position_matrix(&WeaveParams::new(scheme), 1).unwrap();
            assert_eq!(m.rows, vec![vec![0.0]]);
        }
        assert!(position_matrix(&WeaveParams::new(Scheme::RoPE), 0).is_err());
    }

    #[test]
    fn csv_leaves_upper_triangle_empty() {
        let m = position_matrix(&WeaveParams::stair(4, 2), 3).unwrap();
        assert_eq!(m.to_csv_string().unwrap(), "0,,\n1,0,\n2,1,0\n");
        let leaky = position_matrix(&WeaveParams::leaky(1, 0.5), 3).unwrap();
        assert_eq!(leaky.to_csv_string().unwrap(), "0,,\n1,0,\n1.5,1,0\n");
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("stair".parse::<Scheme>().unwrap(), Scheme::StairPE);
        assert_eq!("Leaky-ReRoPE".parse::<Scheme>().unwrap(), Scheme::LeakyReRoPE);
        assert!("ntk".parse::<Scheme>().is_err());
    }
}
