//! Reversible residual blocks and the chunked position-wise computations
//! that keep their memory flat.
//!
//! A block maps `(x1, x2)` to `(y1, y2)` with `y1 = x1 + F(x2)` and
//! `y2 = x2 + G(y1)`, where `F` is pre-normalized attention and `G` the
//! pre-normalized feed-forward network. Inputs are recovered from outputs
//! with `x2 = y2 - G(y1)` and `x1 = y1 - F(x2)`, so backprop through a stack
//! only ever holds one pair of activations.
//!
//! LSH hashes are integers and are not reconstructed: the plans produced by
//! the forward pass are passed back into reverse and backward so that
//! recomputed attention uses exactly the forward buckets.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::multihead::{mha_backward, mha_forward, MhaCache};
use crate::attention::{AttentionKind, AttentionParams, AttentionPlan, AttentionSetting, PlanSource};
use crate::error::{Error, Result};
use crate::feedforward::{Activation, FeedForward, FfCache, LayerNorm};
use crate::rng::Domain;
use crate::tensor::{kernels, Scalar, Tensor};

/// Pre-normalized attention sublayer `F(x) = Attention(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSublayer<S: Scalar> {
    pub norm: LayerNorm<S>,
    pub attn: AttentionParams<S>,
}

impl<S: Scalar> AttentionSublayer<S> {
    pub fn zeros_like(&self) -> Self {
        AttentionSublayer {
            norm: self.norm.zeros_like(),
            attn: self.attn.zeros_like(),
        }
    }

    fn forward(&self, x: &Tensor<S>, setting: &AttentionSetting, source: PlanSource<'_>) -> Result<(Tensor<S>, Option<Vec<AttentionPlan>>)> {
        let a = self.norm.forward(x);
        let (out, plans, _) = mha_forward(&a, &self.attn, setting, source, false)?;
        Ok((out, plans))
    }

    /// Adds `dF/dx · dout` into `dx`.
    fn backward(
        &self,
        x: &Tensor<S>,
        dout: &Tensor<S>,
        setting: &AttentionSetting,
        plans: Option<&[AttentionPlan]>,
        dx: &mut Tensor<S>,
        grads: &mut AttentionSublayer<S>,
    ) -> Result<()> {
        let a = self.norm.forward(x);
        let da = mha_backward(&a, dout, &self.attn, setting, plans, None, &mut grads.attn)?;
        drop(a);
        self.norm.backward_rows(x.data(), da.data(), dx.data_mut(), &mut grads.norm);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevBlock<S: Scalar> {
    /// Attention branch.
    pub f: AttentionSublayer<S>,
    /// Feed-forward branch.
    pub g: FeedForward<S>,
}

impl<S: Scalar> RevBlock<S> {
    pub fn init(d_model: usize, d_ff: usize, n_heads: usize, shared_qk: bool, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        Ok(RevBlock {
            f: AttentionSublayer {
                norm: LayerNorm::new(d_model),
                attn: AttentionParams::init(d_model, n_heads, shared_qk, rng)?,
            },
            g: FeedForward::init(d_model, d_ff, activation, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.g.d_model()
    }

    pub fn zeros_like(&self) -> Self {
        RevBlock {
            f: self.f.zeros_like(),
            g: self.g.zeros_like(),
        }
    }

    /// Zeroes both output projections so the block computes the identity.
    pub fn zero_outputs(&mut self) {
        self.f.attn.w_o.fill(S::zero());
        self.f.attn.b_o.fill(S::zero());
        self.g.w2.fill(S::zero());
        self.g.b2.fill(S::zero());
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = vec![
            ("attn.ln.gamma".to_string(), &self.f.norm.gamma),
            ("attn.ln.beta".to_string(), &self.f.norm.beta),
        ];
        v.extend(self.f.attn.named_tensors().into_iter().map(|(n, t)| (format!("attn.{n}"), t)));
        v.extend(self.g.named_tensors().into_iter().map(|(n, t)| (format!("ff.{n}"), t)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.f.norm.gamma, &mut self.f.norm.beta];
        v.extend(self.f.attn.tensors_mut());
        v.extend(self.g.tensors_mut());
        v
    }
}

/// The two residual streams, each `[b, l, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePair<S: Scalar> {
    pub x1: Tensor<S>,
    pub x2: Tensor<S>,
}

impl<S: Scalar> StatePair<S> {
    pub fn new(x1: Tensor<S>, x2: Tensor<S>) -> Result<Self> {
        if x1.shape() != x2.shape() || x1.shape().len() != 3 {
            return Err(Error::Shape {
                op: "StatePair",
                lhs: x1.shape().to_vec(),
                rhs: x2.shape().to_vec(),
            });
        }
        Ok(StatePair { x1, x2 })
    }

    pub fn max_abs_diff(&self, other: &StatePair<S>) -> f64 {
        self.x1.max_abs_diff(&other.x1).max(self.x2.max_abs_diff(&other.x2))
    }
}

/// Number of chunks the length axis is split into for position-wise work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkSpec {
    pub c: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        ChunkSpec::WHOLE
    }
}

impl ChunkSpec {
    pub const WHOLE: ChunkSpec = ChunkSpec { c: 1 };

    pub fn new(c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::config("chunks", "must be at least 1"));
        }
        Ok(ChunkSpec { c })
    }

    /// Chunk count actually used for length `l`; `c > l` is clamped.
    pub fn effective(self, l: usize) -> usize {
        if self.c > l {
            warn!("{} chunks requested for length {l}; using {l}", self.c);
            l
        } else {
            self.c.max(1)
        }
    }

    /// `(first_row, rows)` pieces over a `[b, l]` row layout. Each batch
    /// element is split into chunks of `ceil(l / c)` positions; the last
    /// chunk may be shorter.
    pub fn pieces(self, b: usize, l: usize) -> Vec<(usize, usize)> {
        let size = l.div_ceil(self.effective(l));
        let mut out = Vec::new();
        for bi in 0..b {
            let mut start = 0;
            while start < l {
                let n = size.min(l - start);
                out.push((bi * l + start, n));
                start += n;
            }
        }
        out
    }
}

/// Execution knobs shared by the block operations.
#[derive(Debug, Clone, Copy)]
pub struct BlockRun<'a> {
    pub setting: &'a AttentionSetting,
    pub ff_chunks: ChunkSpec,
}

fn dims<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn check_pair<S: Scalar>(block: &RevBlock<S>, pair: &StatePair<S>) -> Result<()> {
    let s = pair.x1.shape();
    if s.len() != 3 || pair.x2.shape() != s || s[2] != block.d_model() {
        return Err(Error::Shape {
            op: "reversible block",
            lhs: s.to_vec(),
            rhs: pair.x2.shape().to_vec(),
        });
    }
    Ok(())
}

fn replay<'a>(setting: &AttentionSetting, plans: Option<&'a [AttentionPlan]>) -> Result<PlanSource<'a>> {
    match (setting.kind, plans) {
        (AttentionKind::Lsh, Some(p)) => Ok(PlanSource::Given(p)),
        (AttentionKind::Lsh, None) => Err(Error::config("plans", "LSH blocks need the plans from the forward pass")),
        _ => Ok(PlanSource::Sample {
            domain: Domain::Test,
            step: 0,
            layer: 0,
        }),
    }
}

/// `out += FF(x)`, evaluated piecewise.
fn ff_add<S: Scalar>(g: &FeedForward<S>, x: &Tensor<S>, out: &mut Tensor<S>, chunks: ChunkSpec) {
    let (b, l, d) = dims(x);
    for (start, n) in chunks.pieces(b, l) {
        g.forward_rows(&x.data()[start * d..(start + n) * d], &mut out.data_mut()[start * d..(start + n) * d], None);
    }
}

/// `dx += dFF/dx · dy`, evaluated piecewise with parameter gradients
/// accumulated in piece order.
fn ff_backward<S: Scalar>(g: &FeedForward<S>, x: &Tensor<S>, dy: &Tensor<S>, dx: &mut Tensor<S>, grads: &mut FeedForward<S>, chunks: ChunkSpec) {
    let (b, l, d) = dims(x);
    for (start, n) in chunks.pieces(b, l) {
        let r = start * d..(start + n) * d;
        g.backward_rows(&x.data()[r.clone()], &dy.data()[r.clone()], &mut dx.data_mut()[r], grads, None);
    }
}

/// `X2 + FF(Y1)` computed one chunk of positions at a time.
pub fn chunked_ff<S: Scalar>(g: &FeedForward<S>, y1: &Tensor<S>, x2: &Tensor<S>, spec: ChunkSpec) -> Result<Tensor<S>> {
    if y1.shape() != x2.shape() || y1.shape().len() != 3 || y1.shape()[2] != g.d_model() {
        return Err(Error::Shape {
            op: "chunked_ff",
            lhs: y1.shape().to_vec(),
            rhs: x2.shape().to_vec(),
        });
    }
    let mut out = x2.clone();
    ff_add(g, y1, &mut out, spec);
    Ok(out)
}

/// `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`. Returns the LSH plans used, if any.
pub fn rev_forward<S: Scalar>(
    block: &RevBlock<S>,
    pair: StatePair<S>,
    run: BlockRun<'_>,
    source: PlanSource<'_>,
) -> Result<(StatePair<S>, Option<Vec<AttentionPlan>>)> {
    check_pair(block, &pair)?;
    let StatePair { x1: mut y1, x2: mut y2 } = pair;
    let (f, plans) = block.f.forward(&y2, run.setting, source)?;
    y1.add_assign(&f);
    drop(f);
    ff_add(&block.g, &y1, &mut y2, run.ff_chunks);
    Ok((StatePair { x1: y1, x2: y2 }, plans))
}

/// Recovers `(x1, x2)` from `(y1, y2)`.
pub fn rev_reverse<S: Scalar>(
    block: &RevBlock<S>,
    pair: StatePair<S>,
    run: BlockRun<'_>,
    plans: Option<&[AttentionPlan]>,
) -> Result<StatePair<S>> {
    check_pair(block, &pair)?;
    let source = replay(run.setting, plans)?;
    let StatePair { mut x1, mut x2 } = pair;
    let mut g = Tensor::zeros_like(&x1);
    ff_add(&block.g, &x1, &mut g, run.ff_chunks);
    x2.sub_assign(&g);
    drop(g);
    let (f, _) = block.f.forward(&x2, run.setting, source)?;
    x1.sub_assign(&f);
    Ok(StatePair { x1, x2 })
}

/// Backward through one block from its outputs alone. Reconstructs the
/// inputs, accumulates parameter gradients into `grads` and returns the
/// reconstructed inputs together with their gradients.
pub fn rev_backward<S: Scalar>(
    block: &RevBlock<S>,
    y: StatePair<S>,
    dy: StatePair<S>,
    run: BlockRun<'_>,
    plans: Option<&[AttentionPlan]>,
    grads: &mut RevBlock<S>,
) -> Result<(StatePair<S>, StatePair<S>)> {
    check_pair(block, &y)?;
    check_pair(block, &dy)?;
    let source = replay(run.setting, plans)?;
    let StatePair { x1: y1, mut x2 } = y;
    let StatePair { x1: mut dy1, x2: mut dy2 } = dy;

    let mut g = Tensor::zeros_like(&y1);
    ff_add(&block.g, &y1, &mut g, run.ff_chunks);
    x2.sub_assign(&g);
    drop(g);
    ff_backward(&block.g, &y1, &dy2, &mut dy1, &mut grads.g, run.ff_chunks);

    let mut x1 = y1;
    let (f, _) = block.f.forward(&x2, run.setting, source)?;
    x1.sub_assign(&f);
    drop(f);
    block.f.backward(&x2, &dy1, run.setting, plans, &mut dy2, &mut grads.f)?;
    Ok((StatePair { x1, x2 }, StatePair { x1: dy1, x2: dy2 }))
}

/// Activations saved by [`stored_forward`].
pub struct BlockCache<S: Scalar> {
    x2: Tensor<S>,
    normed: Tensor<S>,
    attn: MhaCache<S>,
    y1: Tensor<S>,
    ff: FfCache<S>,
}

/// Conventional forward that keeps every intermediate needed by
/// [`stored_backward`]; the baseline the reversible path is measured against.
pub fn stored_forward<S: Scalar>(
    block: &RevBlock<S>,
    pair: StatePair<S>,
    run: BlockRun<'_>,
    source: PlanSource<'_>,
) -> Result<(StatePair<S>, Option<Vec<AttentionPlan>>, BlockCache<S>)> {
    check_pair(block, &pair)?;
    let StatePair { x1: mut y1, x2 } = pair;
    let normed = block.f.norm.forward(&x2);
    let (f, plans, attn) = mha_forward(&normed, &block.f.attn, run.setting, source, true)?;
    y1.add_assign(&f);
    drop(f);
    let mut y2 = x2.clone();
    let ff = block.g.forward_cached(&y1, &mut y2);
    let cache = BlockCache {
        x2,
        normed,
        attn: attn.expect("cache requested"),
        y1: y1.clone(),
        ff,
    };
    Ok((StatePair { x1: y1, x2: y2 }, plans, cache))
}

/// Backward using the activations saved by [`stored_forward`].
pub fn stored_backward<S: Scalar>(
    block: &RevBlock<S>,
    cache: BlockCache<S>,
    dy: StatePair<S>,
    run: BlockRun<'_>,
    plans: Option<&[AttentionPlan]>,
    grads: &mut RevBlock<S>,
) -> Result<StatePair<S>> {
    check_pair(block, &dy)?;
    let BlockCache { x2, normed, attn, y1, ff } = cache;
    let StatePair { x1: mut dy1, x2: mut dy2 } = dy;
    block.g.backward_cached(&y1, &dy2, &mut dy1, &mut grads.g, ff);
    drop(y1);
    let da = mha_backward(&normed, &dy1, &block.f.attn, run.setting, plans, Some(attn), &mut grads.f.attn)?;
    drop(normed);
    block.f.norm.backward_rows(x2.data(), da.data(), dy2.data_mut(), &mut grads.f.norm);
    Ok(StatePair { x1: dy1, x2: dy2 })
}

/// Maps hidden rows to vocabulary logits; the loss is evaluated one piece of
/// rows at a time through this interface.
pub trait LogitHead<S: Scalar> {
    type Grads;
    fn vocab(&self) -> usize;
    /// Width of an input row.
    fn width(&self) -> usize;
    /// Overwrites `out` (`rows * vocab`) with the logits of the rows in `h`.
    fn logits_rows(&self, h: &[S], out: &mut [S]);
    /// Adds `dh` for the rows in `h` and accumulates parameter gradients.
    fn logits_backward_rows(&self, h: &[S], dlogits: &[S], dh: &mut [S], grads: &mut Self::Grads);
}

/// Inputs are already logits.
#[derive(Debug, Clone, Copy)]
pub struct IdentityHead {
    pub vocab: usize,
}

impl<S: Scalar> LogitHead<S> for IdentityHead {
    type Grads = ();
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn width(&self) -> usize {
        self.vocab
    }
    fn logits_rows(&self, h: &[S], out: &mut [S]) {
        out.copy_from_slice(h);
    }
    fn logits_backward_rows(&self, _: &[S], dlogits: &[S], dh: &mut [S], _: &mut ()) {
        kernels::axpy(S::one(), dlogits, dh);
    }
}

/// Result of a masked cross-entropy evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput<S: Scalar> {
    /// Mean negative log-likelihood over masked rows.
    pub loss: f64,
    /// Masked rows whose argmax logit is the target.
    pub correct: usize,
    /// Number of masked rows.
    pub count: usize,
    /// Gradient of `loss` with respect to the head input, when requested.
    pub dh: Option<Tensor<S>>,
}

impl<S: Scalar> LossOutput<S> {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Mean masked cross-entropy of `head(h)` against `targets`, with logits
/// materialized for one piece of rows at a time. Row `r` of `h` (flattened
/// over `[b, l]`) is scored against `targets[r]` when `mask[r]` is set.
/// Passing `grads` also computes `dh` and accumulates head gradients.
pub fn chunked_logprob_loss<S: Scalar, H: LogitHead<S>>(
    head: &H,
    h: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
    spec: ChunkSpec,
    mut grads: Option<&mut H::Grads>,
) -> Result<LossOutput<S>> {
    let s = h.shape();
    let v = head.vocab();
    if s.len() != 3 || s[2] != head.width() {
        return Err(Error::Shape {
            op: "chunked_logprob_loss",
            lhs: s.to_vec(),
            rhs: vec![head.width()],
        });
    }
    if v < 2 {
        return Err(Error::config("vocab_size", "must be at least 2"));
    }
    let (b, l, w) = (s[0], s[1], s[2]);
    if targets.len() != b * l || mask.len() != b * l {
        return Err(Error::Shape {
            op: "chunked_logprob_loss targets",
            lhs: vec![b, l],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::NoPredictablePositions);
    }
    if let Some(r) = (0..b * l).find(|&r| mask[r] && targets[r] >= v) {
        return Err(Error::config("targets", format!("target {} at row {r} is outside the vocabulary", targets[r])));
    }
    let inv_count = S::lit(1.0 / count as f64);
    let mut dh = grads.is_some().then(|| Tensor::zeros(s));
    let mut total = 0.0f64;
    let mut correct = 0;
    for (start, n) in spec.pieces(b, l) {
        if !mask[start..start + n].iter().any(|&m| m) {
            continue;
        }
        let mut logits = Tensor::zeros(&[n, v]);
        let rows = &h.data()[start * w..(start + n) * w];
        head.logits_rows(rows, logits.data_mut());
        for i in 0..n {
            let row = logits.row_mut(i);
            let r = start + i;
            if !mask[r] {
                row.fill(S::zero());
                continue;
            }
            let t = targets[r];
            let z = kernels::logsumexp(row);
            total += (z - row[t]).as_f64();
            let best = row.iter().enumerate().fold(0, |bi, (j, &x)| if x > row[bi] { j } else { bi });
            if best == t {
                correct += 1;
            }
            if dh.is_some() {
                for x in row.iter_mut() {
                    *x = (*x - z).exp() * inv_count;
                }
                row[t] -= inv_count;
            }
        }
        if let (Some(dh), Some(g)) = (&mut dh, grads.as_deref_mut()) {
            head.logits_backward_rows(rows, logits.data(), &mut dh.data_mut()[start * w..(start + n) * w], g);
        }
    }
    Ok(LossOutput {
        loss: total / count as f64,
        correct,
        count,
        dh,
    })
}
