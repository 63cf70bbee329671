//! Optional TOML config. Keys use the same names as the long flags, so a
//! file reads like a saved command line:
//!
//! ```toml
//! scheme = "stair"
//! N = 512
//! E = 50
//! F = 100
//! L = 512
//! M_max = 200
//! T = 4096
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use crate::{ExecMode, Format, UsageError};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scheme: Option<String>,
    pub pe: Option<String>,
    pub n: Option<usize>,
    #[serde(rename = "N")]
    pub big_n: Option<u64>,
    #[serde(rename = "E")]
    pub e: Option<u64>,
    pub k_inv: Option<f64>,
    #[serde(rename = "W")]
    pub w: Option<usize>,
    #[serde(rename = "G")]
    pub g: Option<usize>,
    pub theta_base: Option<f64>,
    #[serde(rename = "F")]
    pub f: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[serde(rename = "M_max")]
    pub m_max: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "I")]
    pub i: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "H")]
    pub h_threshold: Option<f64>,
    pub theorem: Option<String>,
    pub t_max: Option<usize>,
    pub tau: Option<f64>,
    pub d: Option<usize>,
    pub h: Option<usize>,
    pub head_dim: Option<usize>,
    pub layers: Option<usize>,
    pub vocab: Option<usize>,
    pub max_new: Option<usize>,
    pub exec: Option<ExecMode>,
    pub format: Option<Format>,
    pub weights: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub targets: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub digits: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub lengths: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub decode_tokens: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError::new("config", format!("{}: {}", path.display(), e.message())).into())
    }
}

/// Flag (or its environment variable), then config file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_keys_parse() {
        let cfg: FileConfig = toml::from_str("N = 4\nE = 2\nM_max = 3\nT = 64\nscheme = \"stair\"").unwrap();
        assert_eq!((cfg.big_n, cfg.e, cfg.m_max, cfg.t), (Some(4), Some(2), Some(3), Some(64)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("NN = 4").is_err());
        assert!(toml::from_str::<FileConfig>("exec = \"gpu\"").is_err());
    }

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }
}
