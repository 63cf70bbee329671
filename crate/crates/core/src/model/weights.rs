use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Matrix, BOS};
use crate::error::{Error, Result};
use crate::theory::position_inversion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerNorm {
    #[default]
    Identity,
    /// Zero-mean, unit-variance normalization without learned gain or bias.
    Standard,
}

impl LayerNorm {
    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        match self {
            LayerNorm::Identity => x.to_vec(),
            LayerNorm::Standard => {
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                x.iter().map(|v| (v - mean) * inv).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
            }
        }
    }
}

/// Feed-forward sub-layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeedForward {
    /// Contributes nothing; the layer is attention plus residual.
    Zero,
    /// `W_2 σ(W_1ᵀ x)` with `W_1, W_2 ∈ R^{d × k·d}`.
    Mlp {
        w1: Matrix,
        w2: Matrix,
        activation: Activation,
    },
    /// Piecewise position recovery on one dimension: reads the softmax
    /// weight `x` there and writes `t(x) - x`, so that after the residual
    /// the dimension holds the integer position `t(x)`.
    PositionRecovery { dim: usize, t_max: usize },
}

impl FeedForward {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeedForward::Zero => Ok(vec![0.0; x.len()]),
            FeedForward::Mlp { w1, w2, activation } => {
                let hidden: Vec<f64> = w1.t_matvec(x).into_iter().map(|v| activation.apply(v)).collect();
                Ok(w2.matvec(&hidden))
            }
            FeedForward::PositionRecovery { dim, t_max } => {
                let mut out = vec![0.0; x.len()];
                let v = x[*dim];
                out[*dim] = position_inversion(v, *t_max)? as f64 - v;
                Ok(out)
            }
        }
    }
}

/// One attention head: `W_Q, W_K, W_V ∈ R^{h × d}`, `W_O ∈ R^{d × h}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl HeadWeights {
    pub fn zeros(d: usize, h: usize) -> Self {
        HeadWeights {
            w_q: Matrix::zeros(h, d),
            w_k: Matrix::zeros(h, d),
            w_v: Matrix::zeros(h, d),
            w_o: Matrix::zeros(d, h),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.rows()
    }

    fn validate(&self, d: usize) -> Result<()> {
        let h = self.w_q.rows();
        for (name, m, want) in [
            ("W_Q", &self.w_q, (h, d)),
            ("W_K", &self.w_k, (h, d)),
            ("W_V", &self.w_v, (h, d)),
            ("W_O", &self.w_o, (d, h)),
        ] {
            if m.shape() != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub d: usize,
    pub vocab: usize,
    /// `W_E ∈ R^{d × V}`; column `v` embeds token `v`. Also used (transposed)
    /// as the output projection.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    #[serde(default)]
    pub layer_norm: LayerNorm,
}

/// Shape and seed of a randomly initialised model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub vocab: usize,
    /// Feed-forward width multiplier `k`.
    pub ff_mult: usize,
    pub layer_norm: LayerNorm,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            num_heads: 2,
            head_dim: 8,
            num_layers: 2,
            vocab: 64,
            ff_mult: 4,
            layer_norm: LayerNorm::Standard,
            activation: Activation::Relu,
        }
    }
}

impl ModelWeights {
    /// Gaussian initialisation, `N(0, 1/d)` for projections and `N(0, 1)`
    /// for the embedding. Deterministic in `seed`.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.vocab < 2 {
            return Err(Error::param("vocab", "must contain <bos> and one more token"));
        }
        if cfg.d == 0 || cfg.head_dim == 0 || cfg.num_heads == 0 {
            return Err(Error::param("d/h/heads", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let scaled = Normal::new(0.0, 1.0 / (cfg.d as f64).sqrt()).expect("valid normal");
        let mut sample = |rows, cols, dist: &Normal<f64>| Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng));

        let embedding = sample(cfg.d, cfg.vocab, &unit);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let heads = (0..cfg.num_heads)
                .map(|_| HeadWeights {
                    w_q: sample(cfg.head_dim, cfg.d, &scaled),
                    w_k: sample(cfg.head_dim, cfg.d, &scaled),
                    w_v: sample(cfg.head_dim, cfg.d, &scaled),
                    w_o: sample(cfg.d, cfg.head_dim, &scaled),
                })
                .collect();
            let ff = if cfg.ff_mult == 0 {
                FeedForward::Zero
            } else {
                FeedForward::Mlp {
                    w1: sample(cfg.d, cfg.ff_mult * cfg.d, &scaled),
                    w2: sample(cfg.d, cfg.ff_mult * cfg.d, &scaled),
                    activation: cfg.activation,
                }
            };
            layers.push(LayerWeights { heads, ff });
        }
        Ok(ModelWeights {
            d: cfg.d,
            vocab: cfg.vocab,
            embedding,
            layers,
            layer_norm: cfg.layer_norm,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::param("vocab", "must contain <bos> and one more token"));
        }
        if self.embedding.shape() != (self.d, self.vocab) {
            return Err(Error::DimensionMismatch(format!(
                "W_E is {:?}, expected ({}, {})",
                self.embedding.shape(),
                self.d,
                self.vocab
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.is_empty() {
                return Err(Error::DimensionMismatch(format!("layer {l} has no heads")));
            }
            for head in &layer.heads {
                head.validate(self.d)?;
            }
            match &layer.ff {
                FeedForward::Mlp { w1, w2, .. } => {
                    if w1.rows() != self.d || w2.rows() != self.d || w1.cols() != w2.cols() {
                        return Err(Error::DimensionMismatch(format!(
                            "layer {l} feed-forward shapes {:?} / {:?}",
                            w1.shape(),
                            w2.shape()
                        )));
                    }
                }
                FeedForward::PositionRecovery { dim, .. } if *dim >= self.d => {
                    return Err(Error::DimensionMismatch(format!(
                        "layer {l} recovers into dim {dim} of {}",
                        self.d
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn embedding_of(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab {
            return Err(Error::UnknownToken {
                id: token,
                vocab: self.vocab,
            });
        }
        Ok(self.embedding.column(token))
    }

    pub fn bos(&self) -> usize {
        BOS
    }

    /// Next-token logits from a final hidden column (tied output projection).
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.embedding.t_matvec(hidden)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: ModelWeights = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
