//! Training loop on the duplication task and the train/eval hash-count
//! accuracy matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionSetting};
use crate::checkpoint::Checkpoint;
use crate::dup::{gen_batch, DupConfig, Split};
use crate::error::{Error, Result};
use crate::lsh::LshConfig;
use crate::model::{Model, ModelConfig, RunOpts};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Scalar;

/// Attention used when evaluating a trained model: dense, or LSH with the
/// given number of hash rounds. Written `full` and `lsh-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalSetting {
    Full,
    Lsh(usize),
}

impl fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalSetting::Full => write!(f, "full"),
            EvalSetting::Lsh(n) => write!(f, "lsh-{n}"),
        }
    }
}

impl FromStr for EvalSetting {
    type Err = Error;

    /// Accepts `full`, `lsh-<n>` and a bare round count `<n>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(EvalSetting::Full);
        }
        let n = s.strip_prefix("lsh-").unwrap_or(s);
        match n.parse::<usize>() {
            Ok(n) if n > 0 => Ok(EvalSetting::Lsh(n)),
            _ => Err(Error::config("eval_settings", format!("`{s}` is not `full`, `lsh-<n>` or a positive hash count"))),
        }
    }
}

impl TryFrom<String> for EvalSetting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EvalSetting> for String {
    fn from(s: EvalSetting) -> String {
        s.to_string()
    }
}

impl EvalSetting {
    /// The setting a model was trained with.
    pub fn of_model(cfg: &ModelConfig) -> Self {
        match cfg.attention {
            AttentionKind::Lsh => EvalSetting::Lsh(cfg.lsh.n_rounds),
            _ => EvalSetting::Full,
        }
    }

    /// Attention setting for evaluating a model built from `cfg`. LSH needs a
    /// shared-QK model; `full` on a shared-QK model is dense shared-QK.
    pub fn attention(self, cfg: &ModelConfig) -> Result<AttentionSetting> {
        let mut s = cfg.attention_setting();
        match self {
            EvalSetting::Full => {
                s.kind = if cfg.attention.shared_qk() {
                    AttentionKind::FullSharedQk
                } else {
                    AttentionKind::Full
                };
            }
            EvalSetting::Lsh(n) => {
                if !cfg.attention.shared_qk() {
                    return Err(Error::config("eval_settings", "LSH evaluation needs a shared-QK model"));
                }
                s.kind = AttentionKind::Lsh;
                s.lsh = LshConfig {
                    n_rounds: n,
                    ..cfg.lsh.clone()
                };
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub setting: EvalSetting,
    /// Stop once held-out accuracy under `setting` reaches this.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dup: DupConfig,
    pub optim: AdamConfig,
    pub steps: u64,
    pub batch_size: usize,
    /// Run held-out evaluation every this many steps (and after the last).
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub eval_settings: Vec<EvalSetting>,
    /// Emit a training record every this many steps.
    pub log_interval: u64,
    pub early_stop: Option<EarlyStop>,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            dup: DupConfig::default(),
            optim: AdamConfig::default(),
            steps: 20_000,
            batch_size: 32,
            eval_interval: 500,
            eval_batches: 20,
            eval_batch_size: 32,
            eval_settings: vec![EvalSetting::Full, EvalSetting::Lsh(1), EvalSetting::Lsh(2), EvalSetting::Lsh(4), EvalSetting::Lsh(8)],
            log_interval: 50,
            early_stop: None,
            seed: 0,
        }
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "desk-dup-full",
    "desk-dup-lsh1",
    "desk-dup-lsh2",
    "desk-dup-lsh4",
    "paper-dup-full",
    "paper-dup-lsh1",
    "paper-dup-lsh2",
    "paper-dup-lsh4",
];

/// Named configurations. `desk-*` train a width-64 model on length-64
/// sequences; `paper-*` use width 256, length 1024 and 150K steps.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let (scale, setting) = name
        .strip_prefix("desk-dup-")
        .map(|s| ("desk", s))
        .or_else(|| name.strip_prefix("paper-dup-").map(|s| ("paper", s)))
        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`; known: {}", PRESETS.join(", "))))?;
    let mut cfg = TrainConfig::default();
    if scale == "paper" {
        cfg.model = ModelConfig::paper_dup();
        cfg.dup = DupConfig::paper();
        cfg.steps = 150_000;
        cfg.eval_interval = 5_000;
        cfg.batch_size = 8;
        cfg.eval_batch_size = 8;
    }
    match setting {
        "full" => cfg.model.attention = AttentionKind::FullSharedQk,
        "lsh1" | "lsh2" | "lsh4" => {
            cfg.model.attention = AttentionKind::Lsh;
            cfg.model.lsh.n_rounds = setting[3..].parse().expect("digit");
        }
        _ => return Err(Error::config("preset", format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")))),
    }
    cfg.early_stop = Some(EarlyStop {
        setting: EvalSetting::of_model(&cfg.model),
        accuracy: 0.995,
    });
    Ok(cfg)
}

impl TrainConfig {
    /// Points every seed (initialization, data, rotations) at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dup.seed = seed;
        self.model.lsh.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dup.validate()?;
        self.optim.validate()?;
        for (field, v) in [
            ("steps", self.steps as usize),
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval as usize),
            ("eval_batches", self.eval_batches),
            ("eval_batch_size", self.eval_batch_size),
            ("log_interval", self.log_interval as usize),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.model.vocab_size < self.dup.vocab_size() {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} cannot hold symbols up to {}", self.model.vocab_size, self.dup.symbol_max),
            ));
        }
        if self.model.max_len < self.dup.seq_len() {
            return Err(Error::config(
                "model.max_len",
                format!("{} is shorter than the task length {}", self.model.max_len, self.dup.seq_len()),
            ));
        }
        for s in self.eval_settings.iter().chain(self.early_stop.as_ref().map(|e| &e.setting)) {
            s.attention(&self.model)?;
        }
        Ok(())
    }
}

/// One line of the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// `train` or `eval`.
    pub split: String,
    pub setting: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    /// Held-out records from the final evaluation.
    pub final_eval: Vec<MetricRecord>,
    pub stopped_early: bool,
}

/// Mean held-out loss and accuracy over `n_batches` evaluation batches.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    dup: &DupConfig,
    setting: EvalSetting,
    n_batches: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let att = setting.attention(&model.config)?;
    let l = dup.seq_len();
    let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
    for i in 0..n_batches {
        let batch = gen_batch(dup, batch_size, i as u64, Split::Eval)?;
        let out = model.evaluate(&batch.tokens, &batch.mask, batch_size, l, &RunOpts::eval(att.clone(), i as u64))?;
        loss += out.loss * out.count as f64;
        correct += out.correct;
        count += out.count;
    }
    Ok((loss / count as f64, correct as f64 / count as f64))
}

/// Fresh training state for `cfg`.
pub fn init_checkpoint<S: Scalar>(cfg: &TrainConfig) -> Result<Checkpoint<S>> {
    cfg.validate()?;
    let model = Model::<S>::init(cfg.model.clone(), cfg.seed)?;
    let optimizer = Adam::new(cfg.optim.clone(), model.named_tensors().into_iter().map(|(_, t)| t));
    Ok(Checkpoint {
        model,
        optimizer,
        step: 0,
        seed: cfg.seed,
        extra: serde_json::to_value(cfg)?,
    })
}

/// Trains from `state` (or from scratch) up to `cfg.steps`, passing every
/// metric record to `sink`.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    state: Option<Checkpoint<S>>,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let mut ckpt = match state {
        Some(c) => c,
        None => init_checkpoint(cfg)?,
    };
    if ckpt.model.config != cfg.model {
        return Err(Error::config("model", "checkpoint was trained with a different model configuration"));
    }
    let trained = EvalSetting::of_model(&cfg.model).to_string();
    let l = cfg.dup.seq_len();
    let mut grads = ckpt.model.zeros_like();
    let mut last_train: Option<MetricRecord> = None;
    let mut final_eval = Vec::new();
    let mut stopped_early = false;

    while ckpt.step < cfg.steps {
        let step = ckpt.step;
        for g in grads.tensors_mut() {
            g.fill(S::zero());
        }
        let batch = gen_batch(&cfg.dup, cfg.batch_size, step, Split::Train)?;
        let out = ckpt
            .model
            .loss_and_grad(&batch.tokens, &batch.mask, cfg.batch_size, l, &RunOpts::train(&cfg.model, step), &mut grads)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_finite: last_train.as_ref().map(|r| serde_json::to_string(r).unwrap_or_default()),
            });
        }
        let g: Vec<_> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        ckpt.optimizer.step(ckpt.model.tensors_mut(), g)?;
        ckpt.step += 1;

        let rec = MetricRecord {
            step,
            split: "train".into(),
            setting: trained.clone(),
            loss: out.loss,
            accuracy: out.accuracy(),
        };
        let done = ckpt.step == cfg.steps;
        if step % cfg.log_interval == 0 || done {
            sink(&rec)?;
        }
        last_train = Some(rec);

        if ckpt.step % cfg.eval_interval == 0 || done {
            final_eval.clear();
            for &s in &cfg.eval_settings {
                let (loss, accuracy) = evaluate(&ckpt.model, &cfg.dup, s, cfg.eval_batches, cfg.eval_batch_size)?;
                let r = MetricRecord {
                    step,
                    split: "eval".into(),
                    setting: s.to_string(),
                    loss,
                    accuracy,
                };
                sink(&r)?;
                final_eval.push(r);
            }
            if let Some(es) = &cfg.early_stop {
                let acc = match final_eval.iter().find(|r| r.setting == es.setting.to_string()) {
                    Some(r) => r.accuracy,
                    None => evaluate(&ckpt.model, &cfg.dup, es.setting, cfg.eval_batches, cfg.eval_batch_size)?.1,
                };
                if acc >= es.accuracy {
                    stopped_early = !done;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_eval,
        stopped_early,
    })
}

/// One cell of the accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub trained_setting: String,
    pub eval_setting: String,
    pub accuracy: f64,
}

/// Evaluates each model under each setting on held-out batches of `dup`.
pub fn eval_matrix<S: Scalar>(
    models: &[&Model<S>],
    settings: &[EvalSetting],
    dup: &DupConfig,
    n_batches: usize,
    batch_size: usize,
) -> Result<Vec<MatrixCell>> {
    let mut out = Vec::new();
    for m in models {
        let trained = EvalSetting::of_model(&m.config).to_string();
        for &s in settings {
            let (_, accuracy) = evaluate(*m, dup, s, n_batches, batch_size)?;
            out.push(MatrixCell {
                trained_setting: trained.clone(),
                eval_setting: s.to_string(),
                accuracy,
            });
        }
    }
    Ok(out)
}

pub fn matrix_csv(cells: &[MatrixCell]) -> String {
    let mut s = String::from("trained_setting,eval_setting,accuracy\n");
    for c in cells {
        s.push_str(&format!("{},{},{:.6}\n", c.trained_setting, c.eval_setting, c.accuracy));
    }
    s
}
