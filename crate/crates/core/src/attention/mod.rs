//! Attention variants, each with a forward pass and an analytic backward.
//!
//! * [`dense_attention`]: materializes the `[l, l]` score matrix per head.
//! * [`streaming_attention`]: the memory-efficient form that walks one query
//!   at a time and only ever holds a length-`l` score row. Same arithmetic
//!   per query as the dense path, so outputs are bit-identical.
//! * [`lsh`]: bucketed attention over sorted chunks, one or many hash rounds.
//! * [`multihead`]: projections, head split/merge, shared-QK handling.
//!
//! The kernels work on a single `[l, d]` head at a time. Public functions
//! accept any batch prefix `[.., l, d]` and loop over it.

pub mod lsh;
pub mod multihead;

pub use lsh::{
    lsh_attention_backward, lsh_attention_round, multi_round_lsh_attention, AttentionPlan, MaskCase,
};
pub use multihead::{
    multi_head_attention, shared_qk_prepare, AttentionKind, AttentionParams, AttentionSetting, PlanSource,
};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Logit penalty for a position attending to itself under shared-QK.
/// Large but finite, so a position with no other target still gets
/// weight 1 on itself.
pub const SELF_MASK_PENALTY: f64 = 1e5;

/// Flags shared by every attention kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnOpts {
    /// Multiply logits by `1/sqrt(d_k)`.
    pub scale: bool,
    /// Only allow `j <= i`.
    pub causal: bool,
    /// Penalize `j == i` by [`SELF_MASK_PENALTY`].
    pub self_mask: bool,
}

impl AttnOpts {
    pub const CAUSAL: AttnOpts = AttnOpts {
        scale: true,
        causal: true,
        self_mask: false,
    };

    pub(crate) fn scale_for<S: Scalar>(&self, d_k: usize) -> S {
        if self.scale {
            S::one() / S::lit(d_k as f64).sqrt()
        } else {
            S::one()
        }
    }
}

/// Shape triple `(batches, l, d_k, d_v)` for `[.., l, d]` inputs.
pub(crate) fn check_qkv<S: Scalar>(
    op: &'static str,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<(usize, usize, usize, usize)> {
    let err = |a: &Tensor<S>, b: &Tensor<S>| Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() < 2 || qs != ks {
        return Err(err(q, k));
    }
    let r = qs.len();
    if vs.len() != r || vs[..r - 1] != qs[..r - 1] {
        return Err(err(q, v));
    }
    let l = qs[r - 2];
    Ok((q.len() / (l * qs[r - 1]), l, qs[r - 1], vs[r - 1]))
}

/// Fills `buf[..n]` with the logits of query `i` and returns `n`, the number
/// of keys it may see (`i + 1` when causal).
#[inline]
pub(crate) fn row_logits<S: Scalar>(q_i: &[S], k: &[S], i: usize, l: usize, dk: usize, scale: S, opts: &AttnOpts, buf: &mut [S]) -> usize {
    let n = if opts.causal { i + 1 } else { l };
    for (j, b) in buf[..n].iter_mut().enumerate() {
        *b = kernels::dot(q_i, &k[j * dk..(j + 1) * dk]) * scale;
    }
    if opts.self_mask && i < n {
        buf[i] -= S::lit(SELF_MASK_PENALTY);
    }
    n
}

/// Turns logits into probabilities in place; returns the log partition.
#[inline]
pub(crate) fn softmax_in_place<S: Scalar>(buf: &mut [S]) -> S {
    let z = kernels::logsumexp(buf);
    for b in buf.iter_mut() {
        *b = (*b - z).exp();
    }
    z
}

/// `out = Σ_j p_j v_j`, summed in increasing `j`.
#[inline]
pub(crate) fn weighted_sum<S: Scalar>(p: &[S], v: &[S], dv: usize, out: &mut [S]) {
    out.iter_mut().for_each(|o| *o = S::zero());
    for (j, &pj) in p.iter().enumerate() {
        kernels::axpy(pj, &v[j * dv..(j + 1) * dv], out);
    }
}

/// One head of dense attention. Writes the `[l, l]` probability matrix into
/// `probs` (masked entries are zero), the outputs into `out` and the log
/// partitions into `z`.
pub(crate) fn dense_head<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    l: usize,
    dk: usize,
    dv: usize,
    opts: &AttnOpts,
    probs: &mut [S],
    out: &mut [S],
    z: &mut [S],
) {
    let scale = opts.scale_for::<S>(dk);
    for i in 0..l {
        let row = &mut probs[i * l..(i + 1) * l];
        let n = row_logits(&q[i * dk..(i + 1) * dk], k, i, l, dk, scale, opts, row);
        row[n..].iter_mut().for_each(|p| *p = S::zero());
        z[i] = softmax_in_place(&mut row[..n]);
    }
    for i in 0..l {
        let n = if opts.causal { i + 1 } else { l };
        weighted_sum(&probs[i * l..i * l + n], v, dv, &mut out[i * dv..(i + 1) * dv]);
    }
}

/// One head of streaming attention: only a single score row is live.
pub(crate) fn streaming_head<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    l: usize,
    dk: usize,
    dv: usize,
    opts: &AttnOpts,
    out: &mut [S],
    z: &mut [S],
) {
    let scale = opts.scale_for::<S>(dk);
    let mut row = Tensor::<S>::zeros(&[l]);
    let buf = row.data_mut();
    for i in 0..l {
        let n = row_logits(&q[i * dk..(i + 1) * dk], k, i, l, dk, scale, opts, buf);
        z[i] = softmax_in_place(&mut buf[..n]);
        weighted_sum(&buf[..n], v, dv, &mut out[i * dv..(i + 1) * dv]);
    }
}

/// Backward of one dense/streaming head. Probabilities are recomputed one
/// row at a time unless `cached` holds the `[l, l]` matrix from the forward
/// pass. Gradients are accumulated into `dq`, `dk`, `dv`.
pub(crate) fn dense_head_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    dout: &[S],
    l: usize,
    dk_dim: usize,
    dv_dim: usize,
    opts: &AttnOpts,
    cached: Option<&[S]>,
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let scale = opts.scale_for::<S>(dk_dim);
    let mut row_t = Tensor::<S>::zeros(&[l]);
    let mut ds_t = Tensor::<S>::zeros(&[l]);
    for i in 0..l {
        let q_i = &q[i * dk_dim..(i + 1) * dk_dim];
        let do_i = &dout[i * dv_dim..(i + 1) * dv_dim];
        let n = if opts.causal { i + 1 } else { l };
        let p: &[S] = match cached {
            Some(c) => &c[i * l..i * l + n],
            None => {
                let buf = row_t.data_mut();
                row_logits(q_i, k, i, l, dk_dim, scale, opts, buf);
                softmax_in_place(&mut buf[..n]);
                &row_t.data()[..n]
            }
        };
        let ds = &mut ds_t.data_mut()[..n];
        let mut total = S::zero();
        for j in 0..n {
            let dp = kernels::dot(do_i, &v[j * dv_dim..(j + 1) * dv_dim]);
            ds[j] = dp;
            total += p[j] * dp;
        }
        let dq_i = &mut dq[i * dk_dim..(i + 1) * dk_dim];
        for j in 0..n {
            let pj = p[j];
            if pj == S::zero() {
                continue;
            }
            let g = pj * (ds[j] - total) * scale;
            kernels::axpy(g, &k[j * dk_dim..(j + 1) * dk_dim], dq_i);
            kernels::axpy(g, q_i, &mut dk[j * dk_dim..(j + 1) * dk_dim]);
            kernels::axpy(pj, do_i, &mut dv[j * dv_dim..(j + 1) * dv_dim]);
        }
    }
}

/// Dense softmax attention over `[.., l, d]` inputs with the given masking
/// flags.
pub fn dense_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, opts: &AttnOpts) -> Result<Tensor<S>> {
    let (batches, l, dk, dv) = check_qkv("dense_attention", q, k, v)?;
    let mut out = Tensor::zeros(v.shape());
    let mut probs = Tensor::<S>::zeros(&[l, l]);
    let mut z = vec![S::zero(); l];
    for b in 0..batches {
        dense_head(
            &q.data()[b * l * dk..(b + 1) * l * dk],
            &k.data()[b * l * dk..(b + 1) * l * dk],
            &v.data()[b * l * dv..(b + 1) * l * dv],
            l,
            dk,
            dv,
            opts,
            probs.data_mut(),
            &mut out.data_mut()[b * l * dv..(b + 1) * l * dv],
            &mut z,
        );
    }
    Ok(out)
}

/// Causal scaled dot-product attention, `softmax(QKᵀ/√d_k)V` with `j <= i`.
/// `scale = false` drops the `1/√d_k` factor.
pub fn dense_causal_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, scale: bool) -> Result<Tensor<S>> {
    dense_attention(
        q,
        k,
        v,
        &AttnOpts {
            scale,
            ..AttnOpts::CAUSAL
        },
    )
}

/// Memory-efficient attention with the given flags: one query at a time.
pub fn streaming_attention_with<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, opts: &AttnOpts) -> Result<Tensor<S>> {
    let (batches, l, dk, dv) = check_qkv("streaming_attention", q, k, v)?;
    let mut out = Tensor::zeros(v.shape());
    let mut z = vec![S::zero(); l];
    for b in 0..batches {
        streaming_head(
            &q.data()[b * l * dk..(b + 1) * l * dk],
            &k.data()[b * l * dk..(b + 1) * l * dk],
            &v.data()[b * l * dv..(b + 1) * l * dv],
            l,
            dk,
            dv,
            opts,
            &mut out.data_mut()[b * l * dv..(b + 1) * l * dv],
            &mut z,
        );
    }
    Ok(out)
}

/// Causal, scaled streaming attention; numerically identical to
/// [`dense_causal_attention`] with `scale = true`.
pub fn streaming_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    streaming_attention_with(q, k, v, &AttnOpts::CAUSAL)
}

/// Gradients `(dQ, dK, dV)` of dense (or streaming) attention.
pub fn dense_attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    dout: &Tensor<S>,
    opts: &AttnOpts,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (batches, l, dk, dv) = check_qkv("dense_attention_backward", q, k, v)?;
    if dout.shape() != v.shape() {
        return Err(Error::Shape {
            op: "dense_attention_backward",
            lhs: dout.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut dq = Tensor::zeros(q.shape());
    let mut dk_t = Tensor::zeros(k.shape());
    let mut dv_t = Tensor::zeros(v.shape());
    for b in 0..batches {
        let (qa, qb) = (b * l * dk, (b + 1) * l * dk);
        let (va, vb) = (b * l * dv, (b + 1) * l * dv);
        dense_head_backward(
            &q.data()[qa..qb],
            &k.data()[qa..qb],
            &v.data()[va..vb],
            &dout.data()[va..vb],
            l,
            dk,
            dv,
            opts,
            None,
            &mut dq.data_mut()[qa..qb],
            &mut dk_t.data_mut()[qa..qb],
            &mut dv_t.data_mut()[va..vb],
        );
    }
    Ok((dq, dk_t, dv_t))
}
