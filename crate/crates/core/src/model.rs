//! The language model: token and position embeddings, a stack of reversible
//! blocks, and a normalized output projection scored with the chunked loss.
//!
//! The embedded input is copied into both residual streams and the stack
//! output is their mean. Row `p` of the output predicts token `p + 1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionPlan, AttentionSetting, PlanSource};
use crate::error::{Error, Result};
use crate::feedforward::{Activation, LayerNorm};
use crate::lsh::LshConfig;
use crate::reversible::{
    chunked_logprob_loss, rev_backward, rev_forward, stored_backward, stored_forward, BlockRun, ChunkSpec, LogitHead, LossOutput,
    RevBlock, StatePair,
};
use crate::rng::{stream, Domain};
use crate::tensor::{kernels, Scalar, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    /// Learned absolute position embeddings.
    #[default]
    Learned,
    None,
}

/// How gradients are obtained through the block stack.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backprop {
    /// Reconstruct block inputs from outputs; activations are not stored.
    #[default]
    Reversible,
    /// Keep every block's intermediates from the forward pass.
    Stored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub attention: AttentionKind,
    pub lsh: LshConfig,
    pub positional: Positional,
    pub activation: Activation,
    /// Dense kinds only: evaluate attention one query at a time.
    pub streaming: bool,
    /// Scale attention logits by `1/sqrt(d_k)`.
    pub scale_logits: bool,
    pub backprop: Backprop,
    pub ff_chunks: ChunkSpec,
    pub loss_chunks: ChunkSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 128,
            d_model: 64,
            d_ff: 64,
            n_heads: 4,
            n_layers: 1,
            max_len: 64,
            attention: AttentionKind::Lsh,
            lsh: LshConfig::default(),
            positional: Positional::Learned,
            activation: Activation::Gelu,
            streaming: false,
            scale_logits: true,
            backprop: Backprop::Reversible,
            ff_chunks: ChunkSpec::WHOLE,
            loss_chunks: ChunkSpec::WHOLE,
        }
    }
}

impl ModelConfig {
    /// Duplication-task model at full size: 1 layer, width 256, length 1024.
    pub fn paper_dup() -> Self {
        ModelConfig {
            d_model: 256,
            d_ff: 256,
            max_len: 1024,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size, 2),
            ("model.d_model", self.d_model, 1),
            ("model.d_ff", self.d_ff, 1),
            ("model.n_heads", self.n_heads, 1),
            ("model.n_layers", self.n_layers, 1),
            ("model.max_len", self.max_len, 1),
            ("model.ff_chunks", self.ff_chunks.c, 1),
            ("model.loss_chunks", self.loss_chunks.c, 1),
        ];
        for (field, v, min) in positive {
            if v < min {
                return Err(Error::config(field, format!("must be at least {min}, got {v}")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible into {} heads", self.d_model, self.n_heads),
            ));
        }
        self.lsh.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("model.{field}"), reason),
            e => e,
        })
    }

    /// The attention setting the model trains with.
    pub fn attention_setting(&self) -> AttentionSetting {
        AttentionSetting {
            kind: self.attention,
            lsh: self.lsh.clone(),
            streaming: self.streaming,
            scale: self.scale_logits,
        }
    }
}

/// Final layer norm and vocabulary projection.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead<S: Scalar> {
    pub norm: LayerNorm<S>,
    /// `[d_model, vocab]`
    pub w_out: Tensor<S>,
    pub b_out: Tensor<S>,
}

impl<S: Scalar> OutputHead<S> {
    fn zeros_like(&self) -> Self {
        OutputHead {
            norm: self.norm.zeros_like(),
            w_out: Tensor::zeros_like(&self.w_out),
            b_out: Tensor::zeros_like(&self.b_out),
        }
    }
}

impl<S: Scalar> LogitHead<S> for OutputHead<S> {
    type Grads = OutputHead<S>;

    fn vocab(&self) -> usize {
        self.w_out.shape()[1]
    }

    fn width(&self) -> usize {
        self.w_out.shape()[0]
    }

    fn logits_rows(&self, h: &[S], out: &mut [S]) {
        let (d, v) = (self.width(), self.vocab());
        let rows = h.len() / d;
        let mut normed = Tensor::zeros(&[rows, d]);
        self.norm.forward_rows(h, normed.data_mut());
        for r in out.chunks_exact_mut(v) {
            r.copy_from_slice(self.b_out.data());
        }
        kernels::gemm_nn(normed.data(), self.w_out.data(), out, rows, d, v);
    }

    fn logits_backward_rows(&self, h: &[S], dlogits: &[S], dh: &mut [S], grads: &mut OutputHead<S>) {
        let (d, v) = (self.width(), self.vocab());
        let rows = h.len() / d;
        let mut normed = Tensor::zeros(&[rows, d]);
        self.norm.forward_rows(h, normed.data_mut());
        kernels::gemm_tn(normed.data(), dlogits, grads.w_out.data_mut(), rows, d, v);
        kernels::col_sum(dlogits, grads.b_out.data_mut(), rows, v);
        let mut dnormed = normed;
        dnormed.fill(S::zero());
        kernels::gemm_nt(dlogits, self.w_out.data(), dnormed.data_mut(), rows, v, d);
        self.norm.backward_rows(h, dnormed.data(), dh, &mut grads.norm);
    }
}

/// Attention setting plus the rotation stream coordinates of one pass.
#[derive(Debug, Clone)]
pub struct RunOpts {
    pub setting: AttentionSetting,
    pub domain: Domain,
    pub step: u64,
}

impl RunOpts {
    pub fn train(config: &ModelConfig, step: u64) -> Self {
        RunOpts {
            setting: config.attention_setting(),
            domain: Domain::TrainRotation,
            step,
        }
    }

    pub fn eval(setting: AttentionSetting, step: u64) -> Self {
        RunOpts {
            setting,
            domain: Domain::EvalRotation,
            step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub tok_emb: Tensor<S>,
    /// `[max_len, d_model]`
    pub pos_emb: Option<Tensor<S>>,
    pub blocks: Vec<RevBlock<S>>,
    pub head: OutputHead<S>,
}

fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        S::lit(v * std)
    })
}

/// Next-token targets and their mask for a `[b, l]` batch: row `p` predicts
/// `tokens[p + 1]` and counts when `target_mask[p + 1]` is set.
pub fn shift_targets(tokens: &[usize], target_mask: &[bool], b: usize, l: usize) -> (Vec<usize>, Vec<bool>) {
    let mut targets = vec![0; b * l];
    let mut mask = vec![false; b * l];
    for bi in 0..b {
        for p in 0..l - 1 {
            targets[bi * l + p] = tokens[bi * l + p + 1];
            mask[bi * l + p] = target_mask[bi * l + p + 1];
        }
    }
    (targets, mask)
}

/// Fraction of masked target positions whose preceding logits row has its
/// argmax at the target token. `logits` is `[b, l, vocab]`; `mask` marks
/// target positions.
pub fn predict_accuracy<S: Scalar>(logits: &Tensor<S>, tokens: &[usize], mask: &[bool]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 3 || tokens.len() != s[0] * s[1] || mask.len() != tokens.len() {
        return Err(Error::Shape {
            op: "predict_accuracy",
            lhs: s.to_vec(),
            rhs: vec![tokens.len(), mask.len()],
        });
    }
    let (b, l) = (s[0], s[1]);
    let (targets, m) = shift_targets(tokens, mask, b, l);
    let mut hit = 0;
    let mut n = 0;
    for r in 0..b * l {
        if !m[r] {
            continue;
        }
        let row = logits.row(r);
        let best = row.iter().enumerate().fold(0, |bi, (j, &x)| if x > row[bi] { j } else { bi });
        hit += usize::from(best == targets[r]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoPredictablePositions);
    }
    Ok(hit as f64 / n as f64)
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Domain::Init, &[]);
        let (v, d) = (config.vocab_size, config.d_model);
        let tok_emb = normal(&[v, d], 1.0, &mut rng);
        let pos_emb = (config.positional == Positional::Learned).then(|| normal(&[config.max_len, d], 1.0, &mut rng));
        let blocks = (0..config.n_layers)
            .map(|_| RevBlock::init(d, config.d_ff, config.n_heads, config.attention.shared_qk(), config.activation, &mut rng))
            .collect::<Result<_>>()?;
        let head = OutputHead {
            norm: LayerNorm::new(d),
            w_out: normal(&[d, v], 1.0 / (d as f64).sqrt(), &mut rng),
            b_out: Tensor::zeros(&[v]),
        };
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            blocks,
            head,
        })
    }

    /// All-zero tensors of the same structure; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config.clone(),
            tok_emb: Tensor::zeros_like(&self.tok_emb),
            pos_emb: self.pos_emb.as_ref().map(Tensor::zeros_like),
            blocks: self.blocks.iter().map(RevBlock::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = vec![("tok_emb".to_string(), &self.tok_emb)];
        if let Some(p) = &self.pos_emb {
            v.push(("pos_emb".to_string(), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named_tensors().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        v.extend([
            ("head.ln.gamma".to_string(), &self.head.norm.gamma),
            ("head.ln.beta".to_string(), &self.head.norm.beta),
            ("head.w_out".to_string(), &self.head.w_out),
            ("head.b_out".to_string(), &self.head.b_out),
        ]);
        v
    }

    /// Same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            v.push(p);
        }
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.head.norm.gamma,
            &mut self.head.norm.beta,
            &mut self.head.w_out,
            &mut self.head.b_out,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_batch(&self, tokens: &[usize], b: usize, l: usize, opts: &RunOpts) -> Result<()> {
        if b == 0 || l == 0 || tokens.len() != b * l {
            return Err(Error::Shape {
                op: "model input",
                lhs: vec![b, l],
                rhs: vec![tokens.len()],
            });
        }
        if self.pos_emb.is_some() && l > self.config.max_len {
            return Err(Error::config("model.max_len", format!("sequence length {l} exceeds {}", self.config.max_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::config("tokens", format!("token {t} is outside the vocabulary")));
        }
        if opts.setting.kind.shared_qk() != self.config.attention.shared_qk() {
            return Err(Error::config(
                "attention.kind",
                format!("cannot run a {:?} model with {:?} attention", self.config.attention, opts.setting.kind),
            ));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize], b: usize, l: usize) -> Tensor<S> {
        let d = self.config.d_model;
        let mut x = Tensor::zeros(&[b, l, d]);
        for (r, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(r);
            row.copy_from_slice(self.tok_emb.row(t));
            if let Some(p) = &self.pos_emb {
                kernels::axpy(S::one(), p.row(r % l), row);
            }
        }
        x
    }

    fn source(opts: &RunOpts, layer: usize) -> PlanSource<'static> {
        PlanSource::Sample {
            domain: opts.domain,
            step: opts.step,
            layer,
        }
    }

    /// Mean of the two streams after the block stack, `[b, l, d_model]`.
    pub fn hidden(&self, tokens: &[usize], b: usize, l: usize, opts: &RunOpts) -> Result<Tensor<S>> {
        self.check_batch(tokens, b, l, opts)?;
        let run = BlockRun {
            setting: &opts.setting,
            ff_chunks: self.config.ff_chunks,
        };
        let e = self.embed(tokens, b, l);
        let mut pair = StatePair::new(e.clone(), e)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            pair = rev_forward(blk, pair, run, Self::source(opts, i))?.0;
        }
        Ok(merge(pair))
    }

    /// Full `[b, l, vocab]` logits.
    pub fn logits(&self, tokens: &[usize], b: usize, l: usize, opts: &RunOpts) -> Result<Tensor<S>> {
        let h = self.hidden(tokens, b, l, opts)?;
        let mut out = Tensor::zeros(&[b, l, self.config.vocab_size]);
        self.head.logits_rows(h.data(), out.data_mut());
        Ok(out)
    }

    /// Masked next-token loss and accuracy without gradients.
    pub fn evaluate(&self, tokens: &[usize], target_mask: &[bool], b: usize, l: usize, opts: &RunOpts) -> Result<LossOutput<S>> {
        let h = self.hidden(tokens, b, l, opts)?;
        let (targets, mask) = shift_targets(tokens, target_mask, b, l);
        chunked_logprob_loss(&self.head, &h, &targets, &mask, self.config.loss_chunks, None)
    }

    /// Masked next-token loss, accumulating its gradient into `grads`.
    pub fn loss_and_grad(
        &self,
        tokens: &[usize],
        target_mask: &[bool],
        b: usize,
        l: usize,
        opts: &RunOpts,
        grads: &mut Model<S>,
    ) -> Result<LossOutput<S>> {
        self.check_batch(tokens, b, l, opts)?;
        if target_mask.len() != b * l {
            return Err(Error::Shape {
                op: "target mask",
                lhs: vec![b, l],
                rhs: vec![target_mask.len()],
            });
        }
        let run = BlockRun {
            setting: &opts.setting,
            ff_chunks: self.config.ff_chunks,
        };
        let (targets, mask) = shift_targets(tokens, target_mask, b, l);
        let e = self.embed(tokens, b, l);
        let mut pair = StatePair::new(e.clone(), e)?;
        let mut plans: Vec<Option<Vec<AttentionPlan>>> = Vec::with_capacity(self.blocks.len());

        let (out, de) = match self.config.backprop {
            Backprop::Reversible => {
                for (i, blk) in self.blocks.iter().enumerate() {
                    let (next, p) = rev_forward(blk, pair, run, Self::source(opts, i))?;
                    pair = next;
                    plans.push(p);
                }
                let (out, dpair) = self.head_loss(&pair, &targets, &mask, &mut grads.head)?;
                let mut dpair = dpair;
                for (i, blk) in self.blocks.iter().enumerate().rev() {
                    let (x, dx) = rev_backward(blk, pair, dpair, run, plans[i].as_deref(), &mut grads.blocks[i])?;
                    pair = x;
                    dpair = dx;
                }
                drop(pair);
                (out, dpair)
            }
            Backprop::Stored => {
                let mut caches = Vec::with_capacity(self.blocks.len());
                for (i, blk) in self.blocks.iter().enumerate() {
                    let (next, p, c) = stored_forward(blk, pair, run, Self::source(opts, i))?;
                    pair = next;
                    plans.push(p);
                    caches.push(c);
                }
                let (out, mut dpair) = self.head_loss(&pair, &targets, &mask, &mut grads.head)?;
                drop(pair);
                for (i, blk) in self.blocks.iter().enumerate().rev() {
                    let c = caches.pop().expect("one cache per block");
                    dpair = stored_backward(blk, c, dpair, run, plans[i].as_deref(), &mut grads.blocks[i])?;
                }
                (out, dpair)
            }
        };

        let d = self.config.d_model;
        for r in 0..b * l {
            let (g1, g2) = (de.x1.row(r), de.x2.row(r));
            let tok = grads.tok_emb.row_mut(tokens[r]);
            for c in 0..d {
                tok[c] += g1[c] + g2[c];
            }
            if let Some(p) = &mut grads.pos_emb {
                let pos = p.row_mut(r % l);
                for c in 0..d {
                    pos[c] += g1[c] + g2[c];
                }
            }
        }
        Ok(out)
    }

    /// Loss on the merged stack output and its gradient split over the pair.
    fn head_loss(
        &self,
        pair: &StatePair<S>,
        targets: &[usize],
        mask: &[bool],
        grads: &mut OutputHead<S>,
    ) -> Result<(LossOutput<S>, StatePair<S>)> {
        let mut h = pair.x1.clone();
        h.add_assign(&pair.x2);
        h.scale_assign(S::lit(0.5));
        let mut out = chunked_logprob_loss(&self.head, &h, targets, mask, self.config.loss_chunks, Some(grads))?;
        drop(h);
        let mut dh = out.dh.take().expect("gradient requested");
        dh.scale_assign(S::lit(0.5));
        let dpair = StatePair::new(dh.clone(), dh)?;
        Ok((out, dpair))
    }
}

fn merge<S: Scalar>(pair: StatePair<S>) -> Tensor<S> {
    let StatePair { mut x1, x2 } = pair;
    x1.add_assign(&x2);
    x1.scale_assign(S::lit(0.5));
    x1
}
