//! Explicit weight constructions for the hidden-state threshold theorems
//! and the scans that check them against their closed forms.
//!
//! All constructions use the first three hidden dimensions: dim 1 is a
//! constant 1, dim 2 flags `<bos>`, and dim 3 is the observed dimension.
//! Positions `t` are 1-based and count `<bos>`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    run_segment, softmax, Attention, FeedForward, HeadWeights, LayerNorm, LayerWeights, Matrix, ModelWeights,
    PeKind, Segment, BOS,
};
use crate::pe::Weave;

/// Largest position whose `<bos>` weight `e^{-(t-1)}` stays a normal double.
pub const MAX_POSITION: usize = 700;

/// Tolerance for the observed-vs-closed-form comparison and verdicts.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    /// Effective window length.
    #[serde(rename = "M")]
    pub m: usize,
    /// Threshold on the observed dimension.
    #[serde(rename = "H")]
    pub threshold: f64,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "E")]
    pub e: u64,
    pub d: usize,
    pub h: usize,
    pub t_max: usize,
    /// Constant query-key offset of the second layer.
    pub tau: f64,
    pub vocab: usize,
    /// Seed of the free embedding rows `e_{4..d}`.
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            m: 8,
            threshold: 0.0,
            n: 2,
            e: 2,
            d: 3,
            h: 3,
            t_max: MAX_POSITION,
            tau: 0.0,
            vocab: 8,
            seed: 0,
        }
    }
}

impl TheoryConfig {
    pub fn new(m: usize, threshold: f64) -> Self {
        TheoryConfig {
            m,
            threshold,
            ..Default::default()
        }
    }

    pub fn with_weave(mut self, n: u64, e: u64) -> Self {
        self.n = n;
        self.e = e;
        self
    }

    pub fn with_t_max(mut self, t_max: usize) -> Self {
        self.t_max = t_max;
        self
    }

    /// `min(700, floor(M · e^N / 2))`, the scan range of the weave rescue.
    pub fn scan_limit(&self) -> usize {
        scan_limit(self.m, self.n)
    }
}

pub fn scan_limit(m: usize, n: u64) -> usize {
    let bound = m as f64 * (n as f64).exp() / 2.0;
    if bound >= MAX_POSITION as f64 {
        MAX_POSITION
    } else {
        bound.floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    /// One NoPE layer.
    Theorem1,
    /// Two layers with a unit linear relative bias.
    Theorem2,
    /// Theorem 2's weights with distances capped at `N`.
    Theorem3,
    /// Theorem 2's weights with Stair-woven distances.
    Corollary,
}

impl Construction {
    pub const ALL: [Construction; 4] = [
        Construction::Theorem1,
        Construction::Theorem2,
        Construction::Theorem3,
        Construction::Corollary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Construction::Theorem1 => "theorem1",
            Construction::Theorem2 => "theorem2",
            Construction::Theorem3 => "theorem3",
            Construction::Corollary => "corollary",
        }
    }

    pub fn pe(self) -> PeKind {
        match self {
            Construction::Theorem1 => PeKind::NoPe,
            _ => PeKind::Linear,
        }
    }

    pub fn weave(self, cfg: &TheoryConfig) -> Weave {
        match self {
            Construction::Theorem1 | Construction::Theorem2 => Weave::Identity,
            Construction::Theorem3 => Weave::ReRope { n: cfg.n },
            Construction::Corollary => Weave::Stair { n: cfg.n, e: cfg.e },
        }
    }

    /// Layer whose head output carries the threshold value.
    pub fn observed_layer(self) -> usize {
        match self {
            Construction::Theorem1 => 0,
            _ => 1,
        }
    }

    pub fn build(self, cfg: &TheoryConfig) -> Result<ModelWeights> {
        match self {
            Construction::Theorem1 => build_theorem1(cfg),
            Construction::Theorem2 => build_theorem2(cfg),
            Construction::Theorem3 => build_theorem3(cfg),
            Construction::Corollary => build_corollary(cfg),
        }
    }
}

impl fmt::Display for Construction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Construction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "theorem1" => Ok(Construction::Theorem1),
            "2" | "theorem2" => Ok(Construction::Theorem2),
            "3" | "theorem3" => Ok(Construction::Theorem3),
            "c" | "4" | "corollary" => Ok(Construction::Corollary),
            other => Err(Error::param("theorem", format!("unknown construction `{other}`"))),
        }
    }
}

/// `S(t) = Σ_{j=0}^{t-1} e^{-j}`
pub fn sum_exp(t: usize) -> f64 {
    (0..t).map(|j| (-(j as f64)).exp()).sum()
}

/// `g(t) = e^{-(t-1)} / S(t)`, the `<bos>` weight of the position-extracting layer.
pub fn position_weight(t: usize) -> f64 {
    (-((t - 1) as f64)).exp() / sum_exp(t)
}

fn ln_position_weight(t: usize) -> f64 {
    // ln S(t) = ln(1 - e^{-t}) - ln(1 - e^{-1})
    let ln_s = (-(-(t as f64)).exp()).ln_1p() - (-(-1f64).exp()).ln_1p();
    -((t - 1) as f64) - ln_s
}

/// Lower cell boundaries in log space: `b_t` is the geometric midpoint of
/// `g(t)` and `g(t+1)`.
fn boundaries() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (1..=MAX_POSITION)
            .map(|t| 0.5 * (ln_position_weight(t) + ln_position_weight(t + 1)))
            .collect()
    })
}

/// Recovers the integer `t` from `x ≈ g(t)` by nearest-breakpoint lookup in
/// log space.
pub fn position_inversion(x: f64, t_max: usize) -> Result<usize> {
    if t_max == 0 || t_max > MAX_POSITION {
        return Err(Error::param("T_max", format!("must lie in 1..={MAX_POSITION}, got {t_max}")));
    }
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::NotInvertible { value: x, t_max });
    }
    let lx = x.ln();
    let table = &boundaries()[..t_max];
    let t = table.partition_point(|&b| lx < b) + 1;
    if t > t_max {
        return Err(Error::NotInvertible { value: x, t_max });
    }
    Ok(t)
}

fn check_common(cfg: &TheoryConfig, min_h: usize) -> Result<()> {
    if cfg.d < 3 {
        return Err(Error::param("d", format!("constructions use three dimensions, got {}", cfg.d)));
    }
    if cfg.h < min_h {
        return Err(Error::param("h", format!("needs at least {min_h}, got {}", cfg.h)));
    }
    if cfg.m == 0 {
        return Err(Error::param("M", "must be positive"));
    }
    if cfg.vocab < 2 {
        return Err(Error::param("vocab", "must contain <bos> and one more token"));
    }
    if !cfg.threshold.is_finite() || !cfg.tau.is_finite() {
        return Err(Error::param("H/tau", "must be finite"));
    }
    Ok(())
}

fn check_weave(cfg: &TheoryConfig) -> Result<()> {
    if cfg.n == 0 {
        return Err(Error::param("N", "must be >= 1"));
    }
    if cfg.n as usize >= cfg.m {
        return Err(Error::param("N", format!("N = {} must be below M = {}", cfg.n, cfg.m)));
    }
    if cfg.e == 0 {
        return Err(Error::param("E", "must be >= 1"));
    }
    Ok(())
}

fn embedding(cfg: &TheoryConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Matrix::from_fn(cfg.d, cfg.vocab, |r, c| match r {
        0 => 1.0,
        1 => f64::from(u8::from(c == BOS)),
        2 => 0.0,
        _ => normal.sample(&mut rng),
    })
}

/// `W_V` and `W_O` of the threshold head: `o[3] = M·α̂_1 - (1 - H)`.
fn threshold_head(cfg: &TheoryConfig) -> HeadWeights {
    let mut head = HeadWeights::zeros(cfg.d, cfg.h);
    head.w_v.set(0, 1, cfg.m as f64);
    head.w_v.set(1, 0, 1.0 - cfg.threshold);
    head.w_o.set(2, 0, 1.0);
    head.w_o.set(2, 1, -1.0);
    head
}

/// Single NoPE layer whose head sees identical keys, so `α̂ = 1/t` and
/// `o_t[3] = M/t - 1 + H`.
pub fn build_theorem1(cfg: &TheoryConfig) -> Result<ModelWeights> {
    check_common(cfg, 2)?;
    let mut head = threshold_head(cfg);
    for r in 0..cfg.h {
        head.w_k.set(r, 0, 1.0);
    }
    Ok(ModelWeights {
        d: cfg.d,
        vocab: cfg.vocab,
        embedding: embedding(cfg),
        layers: vec![LayerWeights {
            heads: vec![head],
            ff: FeedForward::Zero,
        }],
        layer_norm: LayerNorm::Identity,
    })
}

/// Layer 1 writes `g(t)` to dim 3 and its feed-forward turns it into `t`.
/// Layer 2 scores `p(t) - p(i) + τ` so the positional bias cancels.
pub fn build_theorem2(cfg: &TheoryConfig) -> Result<ModelWeights> {
    check_common(cfg, 3)?;
    if cfg.t_max == 0 || cfg.t_max > MAX_POSITION {
        return Err(Error::param(
            "T_max",
            format!("must lie in 1..={MAX_POSITION}, got {}", cfg.t_max),
        ));
    }

    let mut extract = HeadWeights::zeros(cfg.d, cfg.h);
    extract.w_v.set(0, 1, 1.0);
    extract.w_o.set(2, 0, 1.0);
    extract.w_o.set(2, 1, -1.0);

    let mut threshold = threshold_head(cfg);
    threshold.w_q.set(0, 2, 1.0);
    threshold.w_k.set(0, 0, 1.0);
    threshold.w_q.set(1, 0, 1.0);
    threshold.w_k.set(1, 2, -1.0);
    threshold.w_q.set(2, 0, cfg.tau);
    threshold.w_k.set(2, 0, 1.0);

    Ok(ModelWeights {
        d: cfg.d,
        vocab: cfg.vocab,
        embedding: embedding(cfg),
        layers: vec![
            LayerWeights {
                heads: vec![extract],
                ff: FeedForward::PositionRecovery {
                    dim: 2,
                    t_max: cfg.t_max,
                },
            },
            LayerWeights {
                heads: vec![threshold],
                ff: FeedForward::Zero,
            },
        ],
        layer_norm: LayerNorm::Identity,
    })
}

/// Same matrices as Theorem 2; the cap at `N` is applied at score time.
pub fn build_theorem3(cfg: &TheoryConfig) -> Result<ModelWeights> {
    check_weave(cfg)?;
    build_theorem2(cfg)
}

/// Same matrices as Theorem 2; Stair weaving is applied at score time.
pub fn build_corollary(cfg: &TheoryConfig) -> Result<ModelWeights> {
    check_weave(cfg)?;
    build_theorem2(cfg)
}

/// Two-layer ReLU network realising the position lookup for `t ≤ t_max`
/// (`t_max ≤ 64`). Dim 1 serves as the bias input.
pub fn relu_position_net(d: usize, t_max: usize) -> Result<FeedForward> {
    if d < 3 {
        return Err(Error::param("d", "needs three dimensions"));
    }
    if !(1..=64).contains(&t_max) {
        return Err(Error::param("T_max", "ReLU lookup supports 1..=64"));
    }
    let steps = t_max - 1;
    let width = 2 * steps + 2;
    let mut w1 = Matrix::zeros(d, width);
    let mut w2 = Matrix::zeros(d, width);
    for k in 1..=steps {
        let boundary = boundaries()[k - 1].exp();
        let eps = 0.5 * (boundary - position_weight(k + 1));
        let (u, v) = (2 * (k - 1), 2 * (k - 1) + 1);
        w1.set(0, u, boundary / eps);
        w1.set(2, u, -1.0 / eps);
        w1.set(0, v, boundary / eps - 1.0);
        w1.set(2, v, -1.0 / eps);
        w2.set(2, u, 1.0);
        w2.set(2, v, -1.0);
    }
    w1.set(0, width - 2, 1.0);
    w2.set(2, width - 2, 1.0);
    w1.set(2, width - 1, 1.0);
    w2.set(2, width - 1, -1.0);
    Ok(FeedForward::Mlp {
        w1,
        w2,
        activation: crate::model::Activation::Relu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Success,
    Boundary,
    Failure,
}

impl Verdict {
    pub fn of(observed: f64, threshold: f64) -> Self {
        if (observed - threshold).abs() <= ORACLE_TOLERANCE {
            Verdict::Boundary
        } else if observed > threshold {
            Verdict::Success
        } else {
            Verdict::Failure
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Success => "success",
            Verdict::Boundary => "boundary",
            Verdict::Failure => "failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub t: usize,
    pub observed: f64,
    pub predicted: f64,
    /// Softmax weight on `<bos>` in the observed head.
    pub alpha_bos: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub construction: Construction,
    pub config: TheoryConfig,
    pub rows: Vec<ThresholdRow>,
    /// First `t` with `o_t ≤ H` (within tolerance).
    pub crossing: Option<usize>,
    /// `<bos>` weight of the position-extracting layer, empty for Theorem 1.
    pub layer1_bos_weight: Vec<f64>,
    /// Dim 3 after the first layer, empty for Theorem 1.
    pub recovered_positions: Vec<f64>,
}

impl ThresholdReport {
    pub fn row(&self, t: usize) -> &ThresholdRow {
        &self.rows[t - 1]
    }

    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.observed - r.predicted).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "observed", "predicted", "alpha_bos", "verdict"])?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                format!("{:.12}", r.observed),
                format!("{:.12}", r.predicted),
                format!("{:.12}", r.alpha_bos),
                r.verdict.name().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Tokens fed after `<bos>` in scans: ids `1..V` in rotation.
pub fn scan_tokens(len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|j| 1 + j % (vocab - 1)).collect()
}

/// Recovered positions `p(1..=t_max)` computed from the layer-1 softmax
/// formula directly, without running the model.
pub fn closed_form_positions(weave: &Weave, t_max: usize) -> Result<Vec<f64>> {
    (1..=t_max)
        .map(|t| {
            let alpha: Vec<f64> = (1..=t).map(|i| -weave.distance(t, i)).collect();
            position_inversion(softmax(&alpha)[0], t_max).map(|p| p as f64)
        })
        .collect()
}

/// Closed-form `α̂_1` of the threshold head at position `t`.
pub fn predicted_alpha_bos(
    construction: Construction,
    cfg: &TheoryConfig,
    positions: &[f64],
    t: usize,
) -> f64 {
    match construction {
        Construction::Theorem1 | Construction::Theorem2 => 1.0 / t as f64,
        Construction::Theorem3 | Construction::Corollary => {
            let weave = construction.weave(cfg);
            let alpha: Vec<f64> = (1..=t)
                .map(|i| positions[t - 1] - positions[i - 1] - weave.distance(t, i) + cfg.tau)
                .collect();
            softmax(&alpha)[0]
        }
    }
}

/// Layer-2 attention scores `α` of the threshold head at position `t`,
/// computed on the model's own first-layer output.
pub fn layer2_scores(weights: &ModelWeights, construction: Construction, cfg: &TheoryConfig, t: usize) -> Result<Vec<f64>> {
    let weave = construction.weave(cfg);
    let attn = Attention::new(construction.pe(), &weave);
    let tokens = std::iter::once(BOS)
        .chain(scan_tokens(t - 1, weights.vocab))
        .collect::<Vec<_>>();
    let out = run_segment(
        weights,
        Segment {
            tokens: &tokens,
            start: 0,
            context: None,
        },
        &attn,
        false,
    )?;
    let layer = construction.observed_layer();
    let head = &weights.layers[layer].heads[0];
    Ok(crate::model::head_scores(&out.hidden[layer], head, 1.0, &attn, t - 1)
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Runs the model over `<bos>` plus `cfg.t_max - 1` tokens and reports the
/// observed dim-3 head output for every `t` against its closed form.
pub fn threshold_scan(weights: &ModelWeights, construction: Construction, cfg: &TheoryConfig) -> Result<ThresholdReport> {
    if cfg.t_max == 0 || cfg.t_max > MAX_POSITION {
        return Err(Error::param("T_max", format!("must lie in 1..={MAX_POSITION}, got {}", cfg.t_max)));
    }
    weights.validate()?;
    let layer = construction.observed_layer();
    if weights.num_layers() <= layer {
        return Err(Error::DimensionMismatch(format!(
            "{construction} observes layer {} but the model has {}",
            layer + 1,
            weights.num_layers()
        )));
    }
    let weave = construction.weave(cfg);
    let attn = Attention::new(construction.pe(), &weave);
    let tokens: Vec<usize> = std::iter::once(BOS)
        .chain(scan_tokens(cfg.t_max - 1, weights.vocab))
        .collect();
    let out = run_segment(
        weights,
        Segment {
            tokens: &tokens,
            start: 0,
            context: None,
        },
        &attn,
        false,
    )?;

    let positions = match construction {
        Construction::Theorem3 | Construction::Corollary => closed_form_positions(&weave, cfg.t_max)?,
        _ => Vec::new(),
    };
    let m = cfg.m as f64;
    let rows: Vec<ThresholdRow> = (1..=cfg.t_max)
        .map(|t| {
            let observed = out.attention[layer].get(2, t - 1);
            let alpha_bos = out.bos_weight[layer][0][t - 1];
            let predicted = m * predicted_alpha_bos(construction, cfg, &positions, t) - 1.0 + cfg.threshold;
            ThresholdRow {
                t,
                observed,
                predicted,
                alpha_bos,
                verdict: Verdict::of(observed, cfg.threshold),
            }
        })
        .collect();
    let crossing = rows
        .iter()
        .find(|r| r.observed <= cfg.threshold + ORACLE_TOLERANCE)
        .map(|r| r.t);
    let (layer1_bos_weight, recovered_positions) = if layer == 1 {
        (out.bos_weight[0][0].clone(), out.hidden[1].row(2))
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ThresholdReport {
        construction,
        config: *cfg,
        rows,
        crossing,
        layer1_bos_weight,
        recovered_positions,
    })
}
