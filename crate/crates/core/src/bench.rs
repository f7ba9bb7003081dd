//! Attention timing at a fixed token budget, and activation-memory reports
//! for the backprop strategies.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::multihead::normalize_rows;
use crate::attention::{dense_attention, multi_round_lsh_attention, streaming_attention_with, AttentionKind, AttentionPlan, AttnOpts};
use crate::error::{Error, Result};
use crate::feedforward::FF_PROBE;
use crate::lsh::{sample_rotation, LshConfig};
use crate::meter::{meter_scope, take_probe};
use crate::model::{Backprop, Model, ModelConfig, RunOpts};
use crate::reversible::ChunkSpec;
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKind {
    /// Scores materialized as an `l x l` matrix per sequence.
    Dense,
    /// One query row at a time.
    Streaming,
    /// Shared-QK LSH attention, including hashing and sorting.
    Lsh,
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchKind::Dense => "dense",
            BenchKind::Streaming => "streaming",
            BenchKind::Lsh => "lsh",
        })
    }
}

impl FromStr for BenchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dense" => Ok(BenchKind::Dense),
            "streaming" => Ok(BenchKind::Streaming),
            "lsh" => Ok(BenchKind::Lsh),
            other => Err(Error::config("kinds", format!("unknown attention kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub kinds: Vec<BenchKind>,
    /// Ascending sequence lengths; each must divide `budget`.
    pub lengths: Vec<usize>,
    /// Tokens per call: `batch = budget / length`.
    pub budget: usize,
    pub reps: usize,
    pub warmup: usize,
    pub d_k: usize,
    /// LSH chunk length.
    pub chunk_len: usize,
    /// LSH bucket count; `None` scales it with length as `2 l / chunk_len`.
    pub n_buckets: Option<usize>,
    pub n_rounds: usize,
    /// Report `oom` instead of running a dense call whose score matrix
    /// would exceed this many bytes.
    pub max_score_bytes: Option<usize>,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            kinds: vec![BenchKind::Dense, BenchKind::Streaming, BenchKind::Lsh],
            lengths: vec![1024, 2048, 4096, 8192],
            budget: 1 << 17,
            reps: 5,
            warmup: 1,
            d_k: 16,
            chunk_len: 64,
            n_buckets: None,
            n_rounds: 1,
            max_score_bytes: None,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::config("kinds", "at least one kind is required"));
        }
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lengths", "must be a non-empty ascending list"));
        }
        if let Some(&l) = self.lengths.iter().find(|&&l| l == 0 || !self.budget.is_multiple_of(l) || self.budget < l) {
            return Err(Error::config("budget", format!("{} tokens do not split into sequences of length {l}", self.budget)));
        }
        if self.reps < 1 {
            return Err(Error::config("reps", "must be at least 1"));
        }
        if self.d_k == 0 || self.chunk_len == 0 || self.n_rounds == 0 {
            return Err(Error::config("d_k", "d_k, chunk_len and n_rounds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub length: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    /// `ok` or `oom`.
    pub status: String,
}

pub const BENCH_CSV_HEADER: &str = "kind,length,batch,mean_ms,std_ms,median_ms,status";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3},{:.3},{}",
            self.kind, self.length, self.batch, self.mean_ms, self.std_ms, self.median_ms, self.status
        )
    }
}

fn summarize(kind: BenchKind, length: usize, batch: usize, mut times: Vec<f64>) -> BenchRow {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    BenchRow {
        kind,
        length,
        batch,
        mean_ms: mean,
        std_ms: var.sqrt(),
        median_ms: median,
        status: "ok".into(),
    }
}

/// Shared-QK attention over `[budget / l, l, d_k]` inputs, timed per kind
/// and length. The timed region is the attention call (plus hashing for
/// LSH); inputs are prepared beforehand.
pub fn bench_attn(spec: &BenchSpec, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let opts = AttnOpts {
        scale: true,
        causal: true,
        self_mask: true,
    };
    let mut rows = Vec::new();
    for &l in &spec.lengths {
        let batch = spec.budget / l;
        let mut rng = stream(spec.seed, Domain::Test, &[l as u64]);
        let q: Tensor<f32> = Tensor::from_fn(&[batch, l, spec.d_k], |_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        let k = normalize_rows(&q);
        let v: Tensor<f32> = Tensor::from_fn(&[batch, l, spec.d_k], |_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        let lsh = LshConfig {
            n_buckets: spec.n_buckets.unwrap_or((2 * l / spec.chunk_len).max(2) & !1),
            n_rounds: spec.n_rounds,
            chunk_len: Some(spec.chunk_len),
            seed: spec.seed,
            ..Default::default()
        };
        let rotations: Vec<Tensor<f32>> = (0..spec.n_rounds)
            .map(|r| sample_rotation(spec.d_k, lsh.n_buckets, lsh.rotation_seed(Domain::Test, 0, 0, 0, r)))
            .collect::<Result<_>>()?;
        for &kind in &spec.kinds {
            if kind == BenchKind::Dense {
                let bytes = l * l * std::mem::size_of::<f32>();
                let capped = spec.max_score_bytes.is_some_and(|cap| bytes > cap);
                if capped || Tensor::<f32>::try_zeros(&[l, l]).is_none() {
                    let row = BenchRow {
                        kind,
                        length: l,
                        batch,
                        mean_ms: f64::NAN,
                        std_ms: f64::NAN,
                        median_ms: f64::NAN,
                        status: "oom".into(),
                    };
                    on_row(&row);
                    rows.push(row);
                    continue;
                }
            }
            let run = || -> Result<Tensor<f32>> {
                match kind {
                    BenchKind::Dense => dense_attention(&q, &k, &v, &opts),
                    BenchKind::Streaming => streaming_attention_with(&q, &k, &v, &opts),
                    BenchKind::Lsh => {
                        let plans = (0..batch)
                            .map(|b| {
                                let keys = &k.data()[b * l * spec.d_k..(b + 1) * l * spec.d_k];
                                AttentionPlan::from_rotations(keys, spec.d_k, &rotations, spec.chunk_len, true, true)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        multi_round_lsh_attention(&q, &k, &v, &plans, &opts)
                    }
                }
            };
            for _ in 0..spec.warmup {
                std::hint::black_box(run()?);
            }
            let mut times = Vec::with_capacity(spec.reps);
            for _ in 0..spec.reps {
                let t = Instant::now();
                std::hint::black_box(run()?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let row = summarize(kind, l, batch, times);
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemSpec {
    pub layers: Vec<usize>,
    pub modes: Vec<Backprop>,
    /// Feed-forward chunk counts (reversible mode only; the stored baseline
    /// always keeps whole-sequence activations).
    pub chunks: Vec<usize>,
    /// Base model; `n_layers`, `backprop` and `ff_chunks` are overridden.
    pub model: ModelConfig,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for MemSpec {
    fn default() -> Self {
        MemSpec {
            layers: vec![1, 2, 4, 8],
            modes: vec![Backprop::Reversible, Backprop::Stored],
            chunks: vec![1, 4],
            model: ModelConfig {
                vocab_size: 16,
                d_model: 16,
                d_ff: 64,
                n_heads: 4,
                max_len: 256,
                attention: AttentionKind::FullSharedQk,
                ..Default::default()
            },
            batch: 1,
            seq_len: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRow {
    pub n_layers: usize,
    pub mode: Backprop,
    pub chunks: usize,
    /// Peak live floats during one forward + backward step, excluding
    /// parameters and gradient buffers.
    pub peak_floats: usize,
    /// Peak live floats inside the feed-forward sublayer.
    pub ff_peak_floats: usize,
}

pub const MEM_CSV_HEADER: &str = "n_layers,mode,chunks,peak_floats,ff_peak_floats";

impl MemRow {
    pub fn csv(&self) -> String {
        let mode = match self.mode {
            Backprop::Reversible => "reversible",
            Backprop::Stored => "stored",
        };
        format!("{},{},{},{},{}", self.n_layers, mode, self.chunks, self.peak_floats, self.ff_peak_floats)
    }
}

/// Meters one training step per configuration.
pub fn mem_report(spec: &MemSpec) -> Result<Vec<MemRow>> {
    if spec.layers.is_empty() || spec.layers.contains(&0) {
        return Err(Error::config("layers", "must be a non-empty list of positive counts"));
    }
    if spec.batch == 0 || spec.seq_len == 0 {
        return Err(Error::config("seq_len", "batch and seq_len must be positive"));
    }
    let (b, l) = (spec.batch, spec.seq_len);
    let v = spec.model.vocab_size;
    let tokens: Vec<usize> = (0..b * l).map(|i| (i * 7 + 1) % v).collect();
    let mask = vec![true; b * l];
    let mut rows = Vec::new();
    for &mode in &spec.modes {
        let chunks: &[usize] = if mode == Backprop::Reversible { &spec.chunks } else { &[1] };
        for &c in chunks {
            for &n in &spec.layers {
                let cfg = ModelConfig {
                    n_layers: n,
                    backprop: mode,
                    ff_chunks: ChunkSpec::new(c)?,
                    ..spec.model.clone()
                };
                let model = Model::<f32>::init(cfg, spec.seed)?;
                let mut grads = model.zeros_like();
                let opts = RunOpts::train(&model.config, 0);
                take_probe(FF_PROBE);
                let (res, peak) = meter_scope(|| model.loss_and_grad(&tokens, &mask, b, l, &opts, &mut grads));
                res?;
                rows.push(MemRow {
                    n_layers: n,
                    mode,
                    chunks: c,
                    peak_floats: peak,
                    ff_peak_floats: take_probe(FF_PROBE),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = BenchSpec {
            lengths: vec![64, 128],
            budget: 256,
            ..Default::default()
        };
        s.validate().unwrap();
        s.budget = 200;
        assert!(matches!(s.validate(), Err(Error::Config { field, .. }) if field == "budget"));
        s.budget = 256;
        s.lengths = vec![128, 64];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rows_per_kind_and_oom_status() {
        let s = BenchSpec {
            lengths: vec![64, 128, 256],
            budget: 512,
            reps: 2,
            warmup: 0,
            chunk_len: 16,
            max_score_bytes: Some(128 * 128 * 4),
            ..Default::default()
        };
        let rows = bench_attn(&s, |_| {}).unwrap();
        assert_eq!(rows.len(), 9);
        for k in [BenchKind::Dense, BenchKind::Streaming, BenchKind::Lsh] {
            assert_eq!(rows.iter().filter(|r| r.kind == k).count(), 3);
        }
        let oom: Vec<_> = rows.iter().filter(|r| r.status == "oom").collect();
        assert_eq!(oom.len(), 1);
        assert_eq!((oom[0].kind, oom[0].length), (BenchKind::Dense, 256));
        assert_eq!(rows[0].batch, 8);
        assert!(rows[0].csv().starts_with("dense,64,8,"));
    }

    #[test]
    fn summary_statistics() {
        let r = summarize(BenchKind::Lsh, 1, 1, vec![3.0, 1.0, 2.0, 6.0]);
        assert_eq!(r.mean_ms, 3.0);
        assert_eq!(r.median_ms, 2.5);
        assert!((r.std_ms - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
