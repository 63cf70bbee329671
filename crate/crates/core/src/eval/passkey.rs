use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WhitespaceTokenizer;

pub const TASK_DESCRIPT: &str = "There is an important info hidden inside a lot of irrelevant text. \
Find it and memorize it. I will quiz you about the important information there.";

pub const DEFAULT_CONTENT: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.";

pub const KEY_CONTENT: &str = "The pass key is {KEY}. Remember it. {KEY} is the pass key.";

/// Allowed gap between a sample's word count and its target.
pub const LENGTH_TOLERANCE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeySample {
    pub text: String,
    pub key: String,
    pub target_length: usize,
    /// Word index at which the key sentence starts.
    pub key_position: usize,
    pub token_count: usize,
}

fn filler_sentences() -> Vec<&'static str> {
    DEFAULT_CONTENT
        .split_inclusive('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn key_content(key: &str) -> String {
    KEY_CONTENT.replace("{KEY}", key)
}

/// Builds one sample of about `target_length` whitespace tokens: the task
/// description, filler sentences, and the key sentence at
/// `position_fraction` of the filler.
pub fn gen_passkey(target_length: usize, key: &str, position_fraction: f64, seed: u64) -> Result<PasskeySample> {
    if key.is_empty() || !key.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::param("key", format!("must be a digit string, got `{key}`")));
    }
    if !(0.0..=1.0).contains(&position_fraction) {
        return Err(Error::param("position_fraction", format!("must lie in [0, 1], got {position_fraction}")));
    }
    let keyed = key_content(key);
    let mandatory = WhitespaceTokenizer::count(TASK_DESCRIPT) + WhitespaceTokenizer::count(&keyed);
    if target_length < mandatory {
        return Err(Error::param(
            "target_length",
            format!("{target_length} is shorter than the {mandatory} mandatory tokens"),
        ));
    }

    let sentences = filler_sentences();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0..sentences.len());
    let budget = target_length - mandatory;
    let mut filler: Vec<&str> = Vec::new();
    let mut words = 0;
    for s in sentences.iter().cycle().skip(phase) {
        let n = WhitespaceTokenizer::count(s);
        if words + n > budget {
            break;
        }
        filler.push(s);
        words += n;
    }

    let insert_at = (position_fraction * filler.len() as f64).round() as usize;
    let mut parts: Vec<&str> = Vec::with_capacity(filler.len() + 2);
    parts.push(TASK_DESCRIPT);
    parts.extend(&filler[..insert_at]);
    let key_position = parts.iter().map(|p| WhitespaceTokenizer::count(p)).sum();
    parts.push(&keyed);
    parts.extend(&filler[insert_at..]);
    let text = parts.join(" ");
    let token_count = WhitespaceTokenizer::count(&text);
    Ok(PasskeySample {
        text,
        key: key.to_string(),
        target_length,
        key_position,
        token_count,
    })
}

/// Random digit key of length `digits`.
pub fn random_key(rng: &mut impl Rng, digits: usize) -> String {
    (0..digits.max(1))
        .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
        .collect()
}

/// True iff `key` occurs in `generated` as a whole word.
pub fn score_retrieval(generated: &str, key: &str) -> bool {
    if key.is_empty() {
        return false;
    }
    let pattern = format!(r"\b{}\b", regex::escape(key));
    Regex::new(&pattern).expect("escaped key is a valid pattern").is_match(generated)
}

/// Occurrences of `key` as a whole word.
pub fn count_key(text: &str, key: &str) -> usize {
    let pattern = format!(r"\b{}\b", regex::escape(key));
    Regex::new(&pattern).expect("escaped key is a valid pattern").find_iter(text).count()
}

/// `samples_per_length` samples for each target, keys of `digits` digits and
/// uniformly random insertion points, all derived from `seed`.
pub fn gen_corpus(targets: &[usize], samples_per_length: usize, digits: usize, seed: u64) -> Result<Vec<PasskeySample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(targets.len() * samples_per_length);
    for &target in targets {
        for _ in 0..samples_per_length {
            let key = random_key(&mut rng, digits);
            let fraction: f64 = rng.random();
            let sample_seed: u64 = rng.random();
            out.push(gen_passkey(target, &key, fraction, sample_seed)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(samples: &[PasskeySample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PasskeySample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
