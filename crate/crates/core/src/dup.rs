//! The duplication task: sequences `0 w 0 w` where `w` is a word of i.i.d.
//! symbols from `1..=symbol_max`. Only the second copy is predictable, so
//! the target mask covers the second separator and the second word.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DupConfig {
    /// Symbols are drawn from `1..=symbol_max`; `0` is the separator.
    pub symbol_max: usize,
    pub w_len: usize,
    pub seed: u64,
}

impl Default for DupConfig {
    fn default() -> Self {
        DupConfig {
            symbol_max: 127,
            w_len: 31,
            seed: 0,
        }
    }
}

impl DupConfig {
    /// Length-1024 sequences.
    pub fn paper() -> Self {
        DupConfig {
            w_len: 511,
            ..Default::default()
        }
    }

    pub fn seq_len(&self) -> usize {
        2 * (self.w_len + 1)
    }

    pub fn vocab_size(&self) -> usize {
        self.symbol_max + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbol_max == 0 {
            return Err(Error::config("dup.symbol_max", "must be at least 1"));
        }
        if self.w_len == 0 {
            return Err(Error::config("dup.w_len", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// `batch` sequences of `seq_len` tokens, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DupBatch {
    pub tokens: Vec<usize>,
    /// Marks target positions that count towards loss and accuracy.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl DupBatch {
    pub fn example(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// One example per line, tokens separated by spaces.
    pub fn dump(&self, out: &mut impl Write) -> std::io::Result<()> {
        for i in 0..self.batch {
            let line: Vec<String> = self.example(i).iter().map(usize::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// `[0, w, 0, w]`
pub fn example_from_word(w: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(2 * w.len() + 2);
    for _ in 0..2 {
        t.push(0);
        t.extend_from_slice(w);
    }
    t
}

/// Target positions `w_len + 1 ..= 2 w_len + 1`: the second separator and
/// the second word.
pub fn target_mask(w_len: usize) -> Vec<bool> {
    (0..2 * (w_len + 1)).map(|t| t > w_len).collect()
}

/// Deterministic in `(seed, split, step, example index)`.
pub fn gen_batch(cfg: &DupConfig, batch: usize, step: u64, split: Split) -> Result<DupBatch> {
    cfg.validate()?;
    if batch == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let domain = match split {
        Split::Train => Domain::TrainData,
        Split::Eval => Domain::EvalData,
    };
    let mask_one = target_mask(cfg.w_len);
    let mut tokens = Vec::with_capacity(batch * cfg.seq_len());
    let mut mask = Vec::with_capacity(batch * cfg.seq_len());
    for i in 0..batch {
        let mut rng = stream(cfg.seed, domain, &[step, i as u64]);
        let w: Vec<usize> = (0..cfg.w_len).map(|_| rng.random_range(1..=cfg.symbol_max)).collect();
        tokens.extend(example_from_word(&w));
        mask.extend_from_slice(&mask_one);
    }
    Ok(DupBatch {
        tokens,
        mask,
        batch,
        seq_len: cfg.seq_len(),
    })
}

/// Predicts every token by copying from `w_len + 1` positions earlier;
/// positions in the first half, which have no source, are predicted as 0.
pub fn copy_oracle(tokens: &[usize], w_len: usize) -> Result<Vec<usize>> {
    let l = 2 * (w_len + 1);
    if tokens.len() != l {
        return Err(Error::Malformed(format!("expected {l} tokens, got {}", tokens.len())));
    }
    if tokens[0] != 0 || tokens[w_len + 1] != 0 {
        return Err(Error::Malformed("separators must be 0".into()));
    }
    if tokens.iter().enumerate().any(|(i, &t)| t == 0 && i != 0 && i != w_len + 1) {
        return Err(Error::Malformed("symbol 0 inside a word".into()));
    }
    Ok((0..l).map(|t| if t > w_len { tokens[t - (w_len + 1)] } else { 0 }).collect())
}

/// Oracle accuracy over the positions marked in `mask`.
pub fn oracle_accuracy(batch: &DupBatch, mask: &[bool], w_len: usize) -> Result<f64> {
    let mut hit = 0usize;
    let mut n = 0usize;
    for i in 0..batch.batch {
        let ex = batch.example(i);
        let pred = copy_oracle(ex, w_len)?;
        let m = &mask[i * batch.seq_len..(i + 1) * batch.seq_len];
        for t in 0..batch.seq_len {
            if m[t] {
                n += 1;
                hit += usize::from(pred[t] == ex[t]);
            }
        }
    }
    if n == 0 {
        return Err(Error::NoPredictablePositions);
    }
    Ok(hit as f64 / n as f64)
}
