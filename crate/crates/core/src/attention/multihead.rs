//! Multi-head attention: projections, per-head dispatch to the dense,
//! streaming or LSH kernels, and the output projection.
//!
//! Projection matrices hold all heads side by side: `w_q` is
//! `[d_model, n_heads * d_k]` and head `h` owns columns `h*d_k..(h+1)*d_k`.
//! In shared-QK mode there is no `w_k`; keys are the row-normalized queries.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{sample_rotation, LshConfig};
use crate::rng::Domain;
use crate::tensor::{kernels, Scalar, Tensor};

use super::lsh::{lsh_head, lsh_head_backward, AttentionPlan};
use super::{dense_head, dense_head_backward, streaming_head, AttnOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Separate Q and K projections, dense causal attention.
    Full,
    /// Shared Q/K projection with normalized keys and the self penalty,
    /// dense causal attention.
    FullSharedQk,
    /// Shared-QK LSH attention.
    Lsh,
}

impl AttentionKind {
    pub fn shared_qk(self) -> bool {
        !matches!(self, AttentionKind::Full)
    }
}

/// How attention is evaluated inside a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSetting {
    pub kind: AttentionKind,
    pub lsh: LshConfig,
    /// Use the one-query-at-a-time kernel for the dense kinds.
    pub streaming: bool,
    /// Scale logits by `1/sqrt(d_k)`.
    pub scale: bool,
}

impl AttentionSetting {
    pub fn new(kind: AttentionKind) -> Self {
        AttentionSetting {
            kind,
            lsh: LshConfig::default(),
            streaming: false,
            scale: true,
        }
    }

    pub fn opts(&self) -> AttnOpts {
        AttnOpts {
            scale: self.scale,
            causal: true,
            self_mask: self.kind.shared_qk(),
        }
    }
}

/// Where LSH plans come from.
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    /// Sample fresh rotations for `(step, layer)` and hash.
    Sample { domain: Domain, step: u64, layer: usize },
    /// Reuse plans from an earlier forward pass, indexed `[batch * n_heads + head]`.
    Given(&'a [AttentionPlan]),
}

/// Projection weights of one multi-head attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S: Scalar> {
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// `[d_model, n_heads * d_k]`; the shared Q/K projection in shared-QK mode.
    pub w_q: Tensor<S>,
    /// `[d_model, n_heads * d_k]`; absent in shared-QK mode.
    pub w_k: Option<Tensor<S>>,
    /// `[d_model, n_heads * d_v]`
    pub w_v: Tensor<S>,
    /// `[n_heads * d_v, d_model]`
    pub w_o: Tensor<S>,
    /// `[d_model]`
    pub b_o: Tensor<S>,
}

fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        S::lit(v * std)
    })
}

impl<S: Scalar> AttentionParams<S> {
    pub fn init(d_model: usize, n_heads: usize, shared_qk: bool, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::config("n_heads", format!("d_model {d_model} is not divisible into {n_heads} heads")));
        }
        let d = d_model / n_heads;
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(AttentionParams {
            n_heads,
            d_k: d,
            d_v: d,
            w_q: normal(&[d_model, d_model], std, rng),
            w_k: (!shared_qk).then(|| normal(&[d_model, d_model], std, rng)),
            w_v: normal(&[d_model, d_model], std, rng),
            w_o: normal(&[d_model, d_model], std, rng),
            b_o: Tensor::zeros(&[d_model]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            n_heads: self.n_heads,
            d_k: self.d_k,
            d_v: self.d_v,
            w_q: Tensor::zeros_like(&self.w_q),
            w_k: self.w_k.as_ref().map(Tensor::zeros_like),
            w_v: Tensor::zeros_like(&self.w_v),
            w_o: Tensor::zeros_like(&self.w_o),
            b_o: Tensor::zeros_like(&self.b_o),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut v = vec![("w_q", &self.w_q)];
        if let Some(k) = &self.w_k {
            v.push(("w_k", k));
        }
        v.extend([("w_v", &self.w_v), ("w_o", &self.w_o), ("b_o", &self.b_o)]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.w_q];
        if let Some(k) = &mut self.w_k {
            v.push(k);
        }
        v.extend([&mut self.w_v, &mut self.w_o, &mut self.b_o]);
        v
    }
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub fn normalize_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = kernels::dot(row, row).sqrt();
        if n > S::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Adds the gradient through `k = q / |q|` into `dq`.
fn normalize_rows_backward<S: Scalar>(q: &[S], k: &[S], dk: &[S], dq: &mut [S], d: usize) {
    for r in 0..q.len() / d {
        let qr = &q[r * d..(r + 1) * d];
        let n = kernels::dot(qr, qr).sqrt();
        if n == S::zero() {
            continue;
        }
        let kr = &k[r * d..(r + 1) * d];
        let dkr = &dk[r * d..(r + 1) * d];
        let proj = kernels::dot(kr, dkr);
        for c in 0..d {
            dq[r * d + c] += (dkr[c] - kr[c] * proj) / n;
        }
    }
}

fn check_input<S: Scalar>(a: &Tensor<S>, p: &AttentionParams<S>) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 3 || s[2] != p.d_model() {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: s.to_vec(),
            rhs: p.w_q.shape().to_vec(),
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// `x[rows, in] · w[in, out]`
fn project<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    kernels::gemm_nn(x.data(), w.data(), out.data_mut(), m, k, n);
    out
}

/// Copies head `h` of batch element `b` out of a `[batch * l, n_heads * d]`
/// matrix into a contiguous `[l, d]` tensor.
fn extract_head<S: Scalar>(all: &Tensor<S>, b: usize, h: usize, l: usize, d: usize) -> Tensor<S> {
    let width = all.cols();
    let mut out = Tensor::zeros(&[l, d]);
    for i in 0..l {
        let src = &all.data()[(b * l + i) * width + h * d..(b * l + i) * width + (h + 1) * d];
        out.row_mut(i).copy_from_slice(src);
    }
    out
}

fn add_head<S: Scalar>(all: &mut Tensor<S>, src: &Tensor<S>, b: usize, h: usize, l: usize, d: usize) {
    let width = all.cols();
    for i in 0..l {
        let dst = &mut all.data_mut()[(b * l + i) * width + h * d..(b * l + i) * width + (h + 1) * d];
        for (x, &y) in dst.iter_mut().zip(src.row(i)) {
            *x += y;
        }
    }
}

fn put_head<S: Scalar>(all: &mut Tensor<S>, src: &Tensor<S>, b: usize, h: usize, l: usize, d: usize) {
    let width = all.cols();
    for i in 0..l {
        all.data_mut()[(b * l + i) * width + h * d..(b * l + i) * width + (h + 1) * d].copy_from_slice(src.row(i));
    }
}

fn sample_plans<S: Scalar>(
    q_all: &Tensor<S>,
    p: &AttentionParams<S>,
    setting: &AttentionSetting,
    batch: usize,
    l: usize,
    domain: Domain,
    step: u64,
    layer: usize,
) -> Result<Vec<AttentionPlan>> {
    let cfg = &setting.lsh;
    cfg.validate()?;
    let m = cfg.chunk_len_for(l);
    let rotations: Vec<Vec<Tensor<S>>> = (0..p.n_heads)
        .map(|h| {
            (0..cfg.n_rounds)
                .map(|r| sample_rotation(p.d_k, cfg.n_buckets, cfg.rotation_seed(domain, step, layer, h, r)))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut plans = Vec::with_capacity(batch * p.n_heads);
    for b in 0..batch {
        for (h, rots) in rotations.iter().enumerate() {
            let qh = extract_head(q_all, b, h, l, p.d_k);
            plans.push(AttentionPlan::from_rotations(qh.data(), p.d_k, rots, m, true, cfg.bucket_strict)?);
        }
    }
    Ok(plans)
}

/// Saved forward state for stored-activation backprop.
pub(crate) struct MhaCache<S: Scalar> {
    q_all: Tensor<S>,
    k_all: Option<Tensor<S>>,
    v_all: Tensor<S>,
    concat: Tensor<S>,
    /// `[batch * n_heads, l, l]` probabilities for the dense kernels.
    probs: Option<Tensor<S>>,
}

/// Forward pass. Returns the `[b, l, d_model]` output and, for LSH, the plans
/// that were used (to be handed back to the backward pass).
pub(crate) fn mha_forward<S: Scalar>(
    a: &Tensor<S>,
    p: &AttentionParams<S>,
    setting: &AttentionSetting,
    source: PlanSource<'_>,
    keep_cache: bool,
) -> Result<(Tensor<S>, Option<Vec<AttentionPlan>>, Option<MhaCache<S>>)> {
    let (batch, l, d_model) = check_input(a, p)?;
    if setting.kind.shared_qk() != p.w_k.is_none() {
        return Err(Error::config(
            "attention.kind",
            format!("{:?} does not match the parameters (shared-QK = {})", setting.kind, p.w_k.is_none()),
        ));
    }
    let (nh, dk, dv) = (p.n_heads, p.d_k, p.d_v);
    let opts = setting.opts();
    let q_all = project(a, &p.w_q);
    let k_sep = p.w_k.as_ref().map(|w| project(a, w));
    let v_all = project(a, &p.w_v);
    let mut concat = Tensor::zeros(&[batch * l, nh * dv]);

    let plans = match (setting.kind, source) {
        (AttentionKind::Lsh, PlanSource::Given(ps)) => {
            if ps.len() != batch * nh || ps.iter().any(|pl| pl.len() != l) {
                return Err(Error::config("plans", "plan count or length does not match the input"));
            }
            None
        }
        (AttentionKind::Lsh, PlanSource::Sample { domain, step, layer }) => {
            Some(sample_plans(&q_all, p, setting, batch, l, domain, step, layer)?)
        }
        _ => None,
    };
    let plan_at = |idx: usize| -> &AttentionPlan {
        match (&plans, source) {
            (Some(v), _) => &v[idx],
            (None, PlanSource::Given(ps)) => &ps[idx],
            _ => unreachable!("LSH attention without plans"),
        }
    };

    let dense = !matches!(setting.kind, AttentionKind::Lsh);
    let mut probs = (keep_cache && dense && !setting.streaming).then(|| Tensor::<S>::zeros(&[batch * nh, l, l]));
    let mut scratch = (dense && !setting.streaming && probs.is_none()).then(|| Tensor::<S>::zeros(&[l, l]));
    let mut z = vec![S::zero(); l];
    let mut k_cache = (keep_cache && k_sep.is_none()).then(|| Tensor::<S>::zeros(&[batch * l, nh * dk]));
    for b in 0..batch {
        for h in 0..nh {
            let qh = extract_head(&q_all, b, h, l, dk);
            let kh = match &k_sep {
                Some(k) => extract_head(k, b, h, l, dk),
                None => normalize_rows(&qh),
            };
            if let Some(kc) = &mut k_cache {
                put_head(kc, &kh, b, h, l, dk);
            }
            let vh = extract_head(&v_all, b, h, l, dv);
            let mut oh = Tensor::zeros(&[l, dv]);
            if !dense {
                lsh_head(qh.data(), kh.data(), vh.data(), dk, dv, plan_at(b * nh + h), &opts, oh.data_mut(), &mut z);
            } else if setting.streaming {
                streaming_head(qh.data(), kh.data(), vh.data(), l, dk, dv, &opts, oh.data_mut(), &mut z);
            } else {
                let pr = match (&mut probs, &mut scratch) {
                    (Some(p), _) => &mut p.data_mut()[(b * nh + h) * l * l..(b * nh + h + 1) * l * l],
                    (None, Some(s)) => s.data_mut(),
                    _ => unreachable!(),
                };
                dense_head(qh.data(), kh.data(), vh.data(), l, dk, dv, &opts, pr, oh.data_mut(), &mut z);
            }
            put_head(&mut concat, &oh, b, h, l, dv);
        }
    }
    drop(scratch);

    let mut out = project(&concat, &p.w_o);
    for r in 0..out.rows() {
        kernels::axpy(S::one(), p.b_o.data(), out.row_mut(r));
    }
    let out = out.reshape(&[batch, l, d_model])?;
    let cache = keep_cache.then(|| MhaCache {
        q_all,
        k_all: k_sep.or(k_cache),
        v_all,
        concat,
        probs,
    });
    Ok((out, plans, cache))
}

/// Backward pass; accumulates parameter gradients into `grads` and returns
/// `dA`. Without a cache, projections and attention are recomputed from `a`.
pub(crate) fn mha_backward<S: Scalar>(
    a: &Tensor<S>,
    dout: &Tensor<S>,
    p: &AttentionParams<S>,
    setting: &AttentionSetting,
    plans: Option<&[AttentionPlan]>,
    cache: Option<MhaCache<S>>,
    grads: &mut AttentionParams<S>,
) -> Result<Tensor<S>> {
    let (batch, l, d_model) = check_input(a, p)?;
    let (nh, dk, dv) = (p.n_heads, p.d_k, p.d_v);
    let rows = batch * l;
    let opts = setting.opts();
    let dense = !matches!(setting.kind, AttentionKind::Lsh);
    let plans = if dense {
        None
    } else {
        let ps = plans.ok_or_else(|| Error::config("plans", "LSH backward needs the forward plans"))?;
        if ps.len() != batch * nh {
            return Err(Error::config("plans", "plan count does not match the input"));
        }
        Some(ps)
    };

    let (q_all, k_all, v_all, mut concat, probs, recompute) = match cache {
        Some(c) => (c.q_all, c.k_all, c.v_all, c.concat, c.probs, false),
        None => (
            project(a, &p.w_q),
            p.w_k.as_ref().map(|w| project(a, w)),
            project(a, &p.w_v),
            Tensor::zeros(&[rows, nh * dv]),
            None,
            true,
        ),
    };
    let shared = p.w_k.is_none();

    let mut d_concat = Tensor::zeros(&[rows, nh * dv]);
    kernels::gemm_nt(dout.data(), p.w_o.data(), d_concat.data_mut(), rows, d_model, nh * dv);

    let mut dq_all = Tensor::zeros(&[rows, nh * dk]);
    let mut dk_all = (!shared).then(|| Tensor::zeros(&[rows, nh * dk]));
    let mut dv_all = Tensor::zeros(&[rows, nh * dv]);
    let mut z = vec![S::zero(); l];
    let mut scratch = (recompute && dense && !setting.streaming).then(|| Tensor::<S>::zeros(&[l, l]));
    for b in 0..batch {
        for h in 0..nh {
            let qh = extract_head(&q_all, b, h, l, dk);
            let kh = match (&k_all, shared) {
                (Some(k), _) => extract_head(k, b, h, l, dk),
                (None, true) => normalize_rows(&qh),
                (None, false) => unreachable!(),
            };
            let vh = extract_head(&v_all, b, h, l, dv);
            let doh = extract_head(&d_concat, b, h, l, dv);
            if recompute {
                let mut oh = Tensor::zeros(&[l, dv]);
                match (plans, &mut scratch) {
                    (Some(ps), _) => lsh_head(qh.data(), kh.data(), vh.data(), dk, dv, &ps[b * nh + h], &opts, oh.data_mut(), &mut z),
                    (None, Some(s)) => dense_head(qh.data(), kh.data(), vh.data(), l, dk, dv, &opts, s.data_mut(), oh.data_mut(), &mut z),
                    (None, None) => streaming_head(qh.data(), kh.data(), vh.data(), l, dk, dv, &opts, oh.data_mut(), &mut z),
                }
                put_head(&mut concat, &oh, b, h, l, dv);
            }
            let mut dqh = Tensor::zeros(&[l, dk]);
            let mut dkh = Tensor::zeros(&[l, dk]);
            let mut dvh = Tensor::zeros(&[l, dv]);
            match plans {
                Some(ps) => lsh_head_backward(
                    qh.data(),
                    kh.data(),
                    vh.data(),
                    doh.data(),
                    dk,
                    dv,
                    &ps[b * nh + h],
                    &opts,
                    dqh.data_mut(),
                    dkh.data_mut(),
                    dvh.data_mut(),
                ),
                None => {
                    let cached = probs
                        .as_ref()
                        .map(|pr| &pr.data()[(b * nh + h) * l * l..(b * nh + h + 1) * l * l]);
                    dense_head_backward(
                        qh.data(),
                        kh.data(),
                        vh.data(),
                        doh.data(),
                        l,
                        dk,
                        dv,
                        &opts,
                        cached,
                        dqh.data_mut(),
                        dkh.data_mut(),
                        dvh.data_mut(),
                    )
                }
            }
            if shared {
                normalize_rows_backward(qh.data(), kh.data(), dkh.data(), dqh.data_mut(), dk);
            } else if let Some(dka) = &mut dk_all {
                add_head(dka, &dkh, b, h, l, dk);
            }
            add_head(&mut dq_all, &dqh, b, h, l, dk);
            add_head(&mut dv_all, &dvh, b, h, l, dv);
        }
    }
    drop(scratch);
    drop(probs);
    drop(d_concat);

    kernels::gemm_tn(concat.data(), dout.data(), grads.w_o.data_mut(), rows, nh * dv, d_model);
    kernels::col_sum(dout.data(), grads.b_o.data_mut(), rows, d_model);
    drop(concat);

    let mut da = Tensor::zeros(&[batch, l, d_model]);
    kernels::gemm_tn(a.data(), dq_all.data(), grads.w_q.data_mut(), rows, d_model, nh * dk);
    kernels::gemm_nt(dq_all.data(), p.w_q.data(), da.data_mut(), rows, nh * dk, d_model);
    if let (Some(dka), Some(wk), Some(gk)) = (&dk_all, &p.w_k, &mut grads.w_k) {
        kernels::gemm_tn(a.data(), dka.data(), gk.data_mut(), rows, d_model, nh * dk);
        kernels::gemm_nt(dka.data(), wk.data(), da.data_mut(), rows, nh * dk, d_model);
    }
    kernels::gemm_tn(a.data(), dv_all.data(), grads.w_v.data_mut(), rows, d_model, nh * dv);
    kernels::gemm_nt(dv_all.data(), p.w_v.data(), da.data_mut(), rows, nh * dv, d_model);
    Ok(da)
}

/// Multi-head attention over `a: [b, l, d_model]`.
pub fn multi_head_attention<S: Scalar>(
    a: &Tensor<S>,
    params: &AttentionParams<S>,
    setting: &AttentionSetting,
    source: PlanSource<'_>,
) -> Result<Tensor<S>> {
    Ok(mha_forward(a, params, setting, source, false)?.0)
}

/// Shared-QK projections: `Q = A·W_QK`, `K = Q / |Q|` row-wise, `V = A·W_V`,
/// each returned as `[b, n_heads, l, d]`.
pub fn shared_qk_prepare<S: Scalar>(a: &Tensor<S>, params: &AttentionParams<S>) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (batch, l, _) = check_input(a, params)?;
    if params.w_k.is_some() {
        return Err(Error::config("attention.kind", "parameters have a separate key projection"));
    }
    let (nh, dk, dv) = (params.n_heads, params.d_k, params.d_v);
    let q_all = project(a, &params.w_q);
    let v_all = project(a, &params.w_v);
    let mut q = Tensor::zeros(&[batch, nh, l, dk]);
    let mut k = Tensor::zeros(&[batch, nh, l, dk]);
    let mut v = Tensor::zeros(&[batch, nh, l, dv]);
    for b in 0..batch {
        for h in 0..nh {
            let qh = extract_head(&q_all, b, h, l, dk);
            let kh = normalize_rows(&qh);
            let vh = extract_head(&v_all, b, h, l, dv);
            let (qo, vo) = ((b * nh + h) * l * dk, (b * nh + h) * l * dv);
            q.data_mut()[qo..qo + l * dk].copy_from_slice(qh.data());
            k.data_mut()[qo..qo + l * dk].copy_from_slice(kh.data());
            v.data_mut()[vo..vo + l * dv].copy_from_slice(vh.data());
        }
    }
    Ok((q, k, v))
}
