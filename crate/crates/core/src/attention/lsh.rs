//! Bucketed (LSH) attention.
//!
//! For each hash round, positions are stably sorted by bucket and the sorted
//! order is cut into chunks of `m` slots. A query attends to keys in its own
//! chunk and the chunk before it, restricted to keys of the same bucket (in
//! strict mode), to `j <= i` when causal, and with its own position penalized
//! by [`SELF_MASK_PENALTY`].
//!
//! With several rounds, the query's attention set is the union of the
//! per-round sets. A pair `(i, j)` that survives in `N_ij` rounds would be
//! counted `N_ij` times, so each occurrence has `ln N_ij` subtracted from its
//! logit. The per-round results `(o_r, z_r)` then combine exactly as
//! `o = Σ_r exp(z_r - z) o_r` with `z = logsumexp_r z_r`.
//!
//! Bucket assignments are treated as constants: gradients flow through the
//! logits and values only.

use crate::error::{Error, Result};
use crate::lsh::{build_round, chunk_neighborhood, hash_row, RoundHash};
use crate::tensor::{kernels, Scalar, Tensor};

use super::{check_qkv, AttnOpts, SELF_MASK_PENALTY};

/// What gets subtracted from a logit inside one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskCase {
    /// Pair not in this round's attention set.
    Forbidden,
    /// `i == j`.
    SelfPair,
    /// Pair present in `n >= 1` rounds.
    Counted(usize),
}

impl MaskCase {
    pub fn penalty(self) -> f64 {
        match self {
            MaskCase::Forbidden => f64::INFINITY,
            MaskCase::SelfPair => SELF_MASK_PENALTY,
            MaskCase::Counted(n) => {
                debug_assert!(n >= 1);
                (n as f64).ln()
            }
        }
    }
}

/// The materialized batching layout for one sequence (one head, one batch
/// element): the hash rounds plus the chunk geometry and mask flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPlan {
    pub rounds: Vec<RoundHash>,
    pub chunk_len: usize,
    pub causal: bool,
    pub bucket_strict: bool,
}

impl AttentionPlan {
    pub fn new(rounds: Vec<RoundHash>, chunk_len: usize, causal: bool, bucket_strict: bool) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::config("n_rounds", "a plan needs at least one round"));
        }
        if chunk_len == 0 {
            return Err(Error::config("chunk_len", "must be at least 1"));
        }
        let l = rounds[0].len();
        if l == 0 || rounds.iter().any(|r| r.len() != l) {
            return Err(Error::config("rounds", "all rounds must cover the same non-empty length"));
        }
        Ok(AttentionPlan {
            rounds,
            chunk_len,
            causal,
            bucket_strict,
        })
    }

    /// Hashes the rows of `keys` (`[l, d_k]`) with each rotation.
    pub fn from_rotations<S: Scalar>(
        keys: &[S],
        d_k: usize,
        rotations: &[Tensor<S>],
        chunk_len: usize,
        causal: bool,
        bucket_strict: bool,
    ) -> Result<Self> {
        let l = keys.len() / d_k;
        let rounds = rotations
            .iter()
            .map(|r| {
                let mut proj = vec![S::zero(); r.cols()];
                build_round((0..l).map(|i| hash_row(&keys[i * d_k..(i + 1) * d_k], r, &mut proj)).collect())
            })
            .collect();
        Self::new(rounds, chunk_len, causal, bucket_strict)
    }

    pub fn len(&self) -> usize {
        self.rounds[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_chunks(&self) -> usize {
        self.len().div_ceil(self.chunk_len)
    }

    /// Whether key `j` is in query `i`'s attention set for round `r`.
    #[inline]
    pub fn member(&self, r: usize, i: usize, j: usize) -> bool {
        let round = &self.rounds[r];
        (!self.causal || j <= i)
            && (!self.bucket_strict || round.bucket_ids[i] == round.bucket_ids[j])
            && chunk_neighborhood(round.slot(i), round.slot(j), self.chunk_len)
    }

    /// Number of rounds whose attention set for `i` contains `j`.
    pub fn count(&self, i: usize, j: usize) -> usize {
        (0..self.rounds.len()).filter(|&r| self.member(r, i, j)).count()
    }

    /// Mask case of pair `(i, j)` in round `r`, with the self penalty
    /// applied when `self_mask` is set.
    pub fn mask_case(&self, r: usize, i: usize, j: usize, self_mask: bool) -> MaskCase {
        if !self.member(r, i, j) {
            MaskCase::Forbidden
        } else if i == j && self_mask {
            MaskCase::SelfPair
        } else if self.rounds.len() == 1 {
            MaskCase::Counted(1)
        } else {
            MaskCase::Counted(self.count(i, j))
        }
    }

    /// Range of sorted slots visible from slot `t`.
    #[inline]
    fn window(&self, t: usize) -> std::ops::Range<usize> {
        let c = t / self.chunk_len;
        let lo = c.saturating_sub(1) * self.chunk_len;
        let hi = ((c + 1) * self.chunk_len).min(self.len());
        lo..hi
    }

    /// Visits every surviving pair of round `r` in sorted-slot order:
    /// `f(i, keys, slots, penalties)` where `keys`, `slots` and `penalties`
    /// list the keys `j` visible to query `i`, their sorted slots, and what
    /// to subtract from each logit.
    fn for_each_query<S: Scalar>(&self, r: usize, self_mask: bool, mut f: impl FnMut(usize, &[usize], &[usize], &[S])) {
        let round = &self.rounds[r];
        let mut keys = Vec::with_capacity(2 * self.chunk_len);
        let mut slots = Vec::with_capacity(2 * self.chunk_len);
        let mut pen = Vec::with_capacity(2 * self.chunk_len);
        let order = round.sort_perm.indices();
        let sorted_buckets: Vec<usize> = order.iter().map(|&j| round.bucket_ids[j]).collect();
        for t in 0..self.len() {
            let i = order[t];
            keys.clear();
            slots.clear();
            pen.clear();
            for tj in self.window(t) {
                let j = order[tj];
                if self.causal && j > i {
                    continue;
                }
                if self.bucket_strict && sorted_buckets[t] != sorted_buckets[tj] {
                    continue;
                }
                let case = if i == j && self_mask {
                    MaskCase::SelfPair
                } else if self.rounds.len() == 1 {
                    MaskCase::Counted(1)
                } else {
                    MaskCase::Counted(self.count(i, j))
                };
                keys.push(j);
                slots.push(tj);
                pen.push(S::lit(case.penalty()));
            }
            f(i, &keys, &slots, &pen);
        }
    }
}

/// Output and log partition of one round for one head. `o` is `[l, dv]`,
/// `z` is `[l]`, both in original position order.
fn round_head<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    dk: usize,
    dv: usize,
    plan: &AttentionPlan,
    r: usize,
    scale: S,
    self_mask: bool,
    o: &mut [S],
    z: &mut [S],
) {
    let m = plan.chunk_len;
    let mut logit_t = Tensor::<S>::zeros(&[2 * m]);
    let logits = logit_t.data_mut();
    // Keys and values in sorted order, so each window reads contiguous rows.
    let round = &plan.rounds[r];
    let l = plan.len();
    let mut ks = Tensor::<S>::zeros(&[l, dk]);
    let mut vs = Tensor::<S>::zeros(&[l, dv]);
    for t in 0..l {
        let j = round.position(t);
        ks.data_mut()[t * dk..(t + 1) * dk].copy_from_slice(&k[j * dk..(j + 1) * dk]);
        vs.data_mut()[t * dv..(t + 1) * dv].copy_from_slice(&v[j * dv..(j + 1) * dv]);
    }
    let (ks, vs) = (ks.data(), vs.data());
    plan.for_each_query::<S>(r, self_mask, |i, _, slots, pen| {
        let q_i = &q[i * dk..(i + 1) * dk];
        for (s, (&tj, &p)) in slots.iter().zip(pen).enumerate() {
            logits[s] = kernels::dot(q_i, &ks[tj * dk..(tj + 1) * dk]) * scale - p;
        }
        let n = slots.len();
        let zi = kernels::logsumexp(&logits[..n]);
        z[i] = zi;
        let o_i = &mut o[i * dv..(i + 1) * dv];
        o_i.iter_mut().for_each(|x| *x = S::zero());
        for (s, &tj) in slots.iter().enumerate() {
            kernels::axpy((logits[s] - zi).exp(), &vs[tj * dv..(tj + 1) * dv], o_i);
        }
    });
}

/// Multi-round forward for one head: combined output and log partition.
pub(crate) fn lsh_head<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    dk: usize,
    dv: usize,
    plan: &AttentionPlan,
    opts: &AttnOpts,
    out: &mut [S],
    z: &mut [S],
) {
    let l = plan.len();
    let scale = opts.scale_for::<S>(dk);
    let n_r = plan.rounds.len();
    if n_r == 1 {
        round_head(q, k, v, dk, dv, plan, 0, scale, opts.self_mask, out, z);
        return;
    }
    let mut o_r = Tensor::<S>::zeros(&[n_r, l, dv]);
    let mut z_r = Tensor::<S>::zeros(&[n_r, l]);
    for r in 0..n_r {
        round_head(
            q,
            k,
            v,
            dk,
            dv,
            plan,
            r,
            scale,
            opts.self_mask,
            &mut o_r.data_mut()[r * l * dv..(r + 1) * l * dv],
            &mut z_r.data_mut()[r * l..(r + 1) * l],
        );
    }
    combine_rounds(o_r.data(), z_r.data(), n_r, l, dv, out, z);
}

/// `z_i = logsumexp_r z_r[i]`, `o_i = Σ_r exp(z_r[i] - z_i) o_r[i]`.
fn combine_rounds<S: Scalar>(o_r: &[S], z_r: &[S], n_r: usize, l: usize, dv: usize, out: &mut [S], z: &mut [S]) {
    let mut zs = vec![S::zero(); n_r];
    for i in 0..l {
        for (r, zr) in zs.iter_mut().enumerate() {
            *zr = z_r[r * l + i];
        }
        let zi = kernels::logsumexp(&zs);
        z[i] = zi;
        let o_i = &mut out[i * dv..(i + 1) * dv];
        o_i.iter_mut().for_each(|x| *x = S::zero());
        for r in 0..n_r {
            let w = (zs[r] - zi).exp();
            kernels::axpy(w, &o_r[(r * l + i) * dv..(r * l + i + 1) * dv], o_i);
        }
    }
}

/// Backward of [`lsh_head`], accumulating into `dq`, `dk`, `dv`.
pub(crate) fn lsh_head_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    dout: &[S],
    dk_dim: usize,
    dv_dim: usize,
    plan: &AttentionPlan,
    opts: &AttnOpts,
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let l = plan.len();
    let scale = opts.scale_for::<S>(dk_dim);
    let mut o_t = Tensor::<S>::zeros(&[l, dv_dim]);
    let mut z = vec![S::zero(); l];
    lsh_head(q, k, v, dk_dim, dv_dim, plan, opts, o_t.data_mut(), &mut z);
    let o = o_t.data();
    let delta: Vec<S> = (0..l)
        .map(|i| kernels::dot(&dout[i * dv_dim..(i + 1) * dv_dim], &o[i * dv_dim..(i + 1) * dv_dim]))
        .collect();
    for r in 0..plan.rounds.len() {
        plan.for_each_query::<S>(r, opts.self_mask, |i, keys, _, pen| {
            let q_i = &q[i * dk_dim..(i + 1) * dk_dim];
            let do_i = &dout[i * dv_dim..(i + 1) * dv_dim];
            for (&j, &p) in keys.iter().zip(pen) {
                let k_j = &k[j * dk_dim..(j + 1) * dk_dim];
                let w = (kernels::dot(q_i, k_j) * scale - p - z[i]).exp();
                if w == S::zero() {
                    continue;
                }
                let dp = kernels::dot(do_i, &v[j * dv_dim..(j + 1) * dv_dim]);
                let g = w * (dp - delta[i]) * scale;
                kernels::axpy(g, k_j, &mut dq[i * dk_dim..(i + 1) * dk_dim]);
                kernels::axpy(g, q_i, &mut dk[j * dk_dim..(j + 1) * dk_dim]);
                kernels::axpy(w, do_i, &mut dv[j * dv_dim..(j + 1) * dv_dim]);
            }
        });
    }
}

fn check_plans<S: Scalar>(op: &'static str, q: &Tensor<S>, plans: &[AttentionPlan], batches: usize, l: usize) -> Result<()> {
    if plans.len() != batches || plans.iter().any(|p| p.len() != l) {
        return Err(Error::Shape {
            op,
            lhs: q.shape().to_vec(),
            rhs: vec![plans.len(), plans.first().map_or(0, |p| p.len())],
        });
    }
    Ok(())
}

/// Single-round LSH attention for `[l, d]` inputs. Returns the per-position
/// output and log partition `z`, both in original order.
pub fn lsh_attention_round<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    round: &RoundHash,
    chunk_len: usize,
    causal: bool,
    bucket_strict: bool,
    opts: &AttnOpts,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (batches, l, dk, dv) = check_qkv("lsh_attention_round", q, k, v)?;
    let plan = AttentionPlan::new(vec![round.clone()], chunk_len, causal, bucket_strict)?;
    check_plans("lsh_attention_round", q, std::slice::from_ref(&plan), batches, l)?;
    let mut o = Tensor::zeros(v.shape());
    let mut z = Tensor::zeros(&[l]);
    round_head(
        q.data(),
        k.data(),
        v.data(),
        dk,
        dv,
        &plan,
        0,
        opts.scale_for::<S>(dk),
        opts.self_mask,
        o.data_mut(),
        z.data_mut(),
    );
    Ok((o, z))
}

/// Multi-round LSH attention over `[b, l, d]` inputs, one plan per batch
/// element. The `causal` flag of `opts` is ignored in favour of each plan's.
pub fn multi_round_lsh_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    plans: &[AttentionPlan],
    opts: &AttnOpts,
) -> Result<Tensor<S>> {
    let (batches, l, dk, dv) = check_qkv("multi_round_lsh_attention", q, k, v)?;
    check_plans("multi_round_lsh_attention", q, plans, batches, l)?;
    let mut out = Tensor::zeros(v.shape());
    let mut z = vec![S::zero(); l];
    for (b, plan) in plans.iter().enumerate() {
        let (qa, qb) = (b * l * dk, (b + 1) * l * dk);
        let (va, vb) = (b * l * dv, (b + 1) * l * dv);
        lsh_head(
            &q.data()[qa..qb],
            &k.data()[qa..qb],
            &v.data()[va..vb],
            dk,
            dv,
            plan,
            opts,
            &mut out.data_mut()[va..vb],
            &mut z,
        );
    }
    Ok(out)
}

/// Gradients `(dQ, dK, dV)` of [`multi_round_lsh_attention`] with the plans
/// held fixed.
pub fn lsh_attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    dout: &Tensor<S>,
    plans: &[AttentionPlan],
    opts: &AttnOpts,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (batches, l, dk, dv) = check_qkv("lsh_attention_backward", q, k, v)?;
    check_plans("lsh_attention_backward", q, plans, batches, l)?;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk_t = Tensor::zeros(k.shape());
    let mut dv_t = Tensor::zeros(v.shape());
    for (b, plan) in plans.iter().enumerate() {
        let (qa, qb) = (b * l * dk, (b + 1) * l * dk);
        let (va, vb) = (b * l * dv, (b + 1) * l * dv);
        lsh_head_backward(
            &q.data()[qa..qb],
            &k.data()[qa..qb],
            &v.data()[va..vb],
            &dout.data()[va..vb],
            dk,
            dv,
            plan,
            opts,
            &mut dq.data_mut()[qa..qb],
            &mut dk_t.data_mut()[qa..qb],
            &mut dv_t.data_mut()[va..vb],
        );
    }
    Ok((dq, dk_t, dv_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::tests::rand_tensor;
    use crate::attention::{dense_attention, multihead::normalize_rows};
    use crate::lsh::sample_rotation;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    const SHARED: AttnOpts = AttnOpts {
        scale: true,
        causal: true,
        self_mask: true,
    };

    /// Shared-QK inputs: keys are the row-normalized queries.
    fn shared_qk(l: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let q = rand_tensor(&[1, l, d], seed);
        let k = normalize_rows(&q);
        let v = rand_tensor(&[1, l, d], seed + 1);
        (q, k, v)
    }

    fn random_plan(l: usize, nb: usize, n_rounds: usize, m: usize, seed: u64) -> AttentionPlan {
        let mut rng = stream(seed, Domain::Test, &[]);
        let rounds = (0..n_rounds)
            .map(|_| build_round((0..l).map(|_| rng.random_range(0..nb)).collect()))
            .collect();
        AttentionPlan::new(rounds, m, true, true).unwrap()
    }

    #[test]
    fn one_bucket_wide_chunk_equals_dense_self_excluded() {
        let l = 12;
        let (q, k, v) = shared_qk(l, 4, 5);
        let round = build_round(vec![0; l]);
        let (o, _) = lsh_attention_round(&q, &k, &v, &round, l, true, true, &SHARED).unwrap();
        let dense = dense_attention(&q, &k, &v, &SHARED).unwrap();
        assert!(o.max_abs_diff(&dense) < 1e-5);
    }

    #[test]
    fn first_token_attends_to_itself() {
        let (q, k, v) = shared_qk(1, 3, 9);
        let (o, _) = lsh_attention_round(&q, &k, &v, &build_round(vec![0]), 1, true, true, &SHARED).unwrap();
        assert_eq!(o, v);
    }

    #[test]
    fn disjoint_buckets_are_block_diagonal() {
        let l = 10;
        let (q, k, v) = shared_qk(l, 4, 13);
        let ids: Vec<usize> = (0..l).map(|i| usize::from(i % 2 == 1)).collect();
        let (o, _) = lsh_attention_round(&q, &k, &v, &build_round(ids), l, true, true, &SHARED).unwrap();
        for parity in 0..2 {
            let pos: Vec<usize> = (0..l).filter(|i| i % 2 == parity).collect();
            let pick = |t: &Tensor<f64>| {
                let d = t.cols();
                Tensor::from_fn(&[1, pos.len(), d], |x| t.data()[pos[x / d] * d + x % d])
            };
            let want = dense_attention(&pick(&q), &pick(&k), &pick(&v), &SHARED).unwrap();
            assert!(pick(&o).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn one_round_plan_matches_round_function() {
        let l = 16;
        let (q, k, v) = shared_qk(l, 4, 17);
        let plan = random_plan(l, 4, 1, 8, 3);
        let (o, _) = lsh_attention_round(&q, &k, &v, &plan.rounds[0], 8, true, true, &SHARED).unwrap();
        let multi = multi_round_lsh_attention(&q, &k, &v, std::slice::from_ref(&plan), &SHARED).unwrap();
        assert_eq!(o, multi);
    }

    #[test]
    fn repeated_identical_rounds_collapse_to_one() {
        let l = 16;
        let (q, k, v) = shared_qk(l, 4, 19);
        let one = random_plan(l, 4, 1, 8, 5);
        let four = AttentionPlan::new(vec![one.rounds[0].clone(); 4], 8, true, true).unwrap();
        let a = multi_round_lsh_attention(&q, &k, &v, &[one], &SHARED).unwrap();
        let b = multi_round_lsh_attention(&q, &k, &v, &[four], &SHARED).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn round_combination_equals_flat_softmax_over_all_rounds() {
        // z taken over every surviving (round, j) logit at once must agree
        // with combining per-round partitions.
        let l = 16;
        let (q, k, v) = shared_qk(l, 4, 23);
        let plan = random_plan(l, 4, 3, 4, 7);
        let out = multi_round_lsh_attention(&q, &k, &v, std::slice::from_ref(&plan), &SHARED).unwrap();
        let scale = 0.5;
        for i in 0..l {
            let mut entries = Vec::new();
            for r in 0..3 {
                for j in 0..l {
                    let case = plan.mask_case(r, i, j, true);
                    if case != MaskCase::Forbidden {
                        let dot: f64 = (0..4).map(|c| q.data()[i * 4 + c] * k.data()[j * 4 + c]).sum();
                        entries.push((j, dot * scale - case.penalty()));
                    }
                }
            }
            let logits: Vec<f64> = entries.iter().map(|e| e.1).collect();
            let z = kernels::logsumexp(&logits);
            for c in 0..4 {
                let o: f64 = entries.iter().map(|&(j, lg)| (lg - z).exp() * v.data()[j * 4 + c]).sum();
                assert!((o - out.data()[i * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_sum_to_one_and_self_is_excluded() {
        let l = 24;
        let (q, k, _) = shared_qk(l, 4, 29);
        // one-hot values expose the attention weights directly
        let v = Tensor::<f64>::eye(l).reshape(&[1, l, l]).unwrap();
        let plan = random_plan(l, 4, 2, 6, 11);
        let out = multi_round_lsh_attention(&q, &k, &v, std::slice::from_ref(&plan), &SHARED).unwrap();
        for i in 0..l {
            let row = &out.data()[i * l..(i + 1) * l];
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
            let others = (0..plan.rounds.len()).any(|r| (0..l).any(|j| j != i && plan.member(r, i, j)));
            if others {
                assert!(row[i] <= 1e-30, "position {i} self weight {}", row[i]);
            } else {
                // logits sit near -1e5, so rounding is relative to that magnitude
                assert!((row[i] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frozen_plan_is_causal() {
        let l = 16;
        let (q, k, v) = shared_qk(l, 4, 31);
        let plan = random_plan(l, 4, 2, 8, 13);
        let base = multi_round_lsh_attention(&q, &k, &v, std::slice::from_ref(&plan), &SHARED).unwrap();
        for j in 1..l {
            let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
            for c in 0..4 {
                q2.data_mut()[j * 4 + c] += 0.3;
                k2.data_mut()[j * 4 + c] *= -1.0;
                v2.data_mut()[j * 4 + c] += 2.0;
            }
            let out = multi_round_lsh_attention(&q2, &k2, &v2, std::slice::from_ref(&plan), &SHARED).unwrap();
            for i in 0..j {
                for c in 0..4 {
                    assert!((out.data()[i * 4 + c] - base.data()[i * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_frozen_hashes() {
        let (l, d) = (16, 4);
        let q = rand_tensor(&[1, l, d], 41);
        let k = rand_tensor(&[1, l, d], 42);
        let v = rand_tensor(&[1, l, d], 43);
        let w = rand_tensor(&[1, l, d], 44);
        let rots: Vec<Tensor<f64>> = (0..2).map(|r| sample_rotation(d, 4, 100 + r).unwrap()).collect();
        let plan = AttentionPlan::from_rotations(k.data(), d, &rots, 8, true, true).unwrap();
        let plans = [plan];
        let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let o = multi_round_lsh_attention(q, k, v, &plans, &SHARED).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (dq, dk, dv) = lsh_attention_backward(&q, &k, &v, &w, &plans, &SHARED).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            let mut num = Vec::new();
            for idx in 0..l * d {
                let mut ins = [q.clone(), k.clone(), v.clone()];
                ins[which].data_mut()[idx] += h;
                let fp = loss(&ins[0], &ins[1], &ins[2]);
                ins[which].data_mut()[idx] -= 2.0 * h;
                let fm = loss(&ins[0], &ins[1], &ins[2]);
                num.push((fp - fm) / (2.0 * h));
            }
            let diff = num.iter().zip(grad.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = grad.sum_sq().sqrt().max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
            assert!(diff / norm < 1e-5, "input {which}: {}", diff / norm);
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let (q, k, v) = shared_qk(8, 4, 3);
        let plan = random_plan(8, 2, 2, 4, 1);
        let (dq, dk, dv) = lsh_attention_backward(&q, &k, &v, &Tensor::zeros(&[1, 8, 4]), &[plan], &SHARED).unwrap();
        assert!(dq.data().iter().chain(dk.data()).chain(dv.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn mask_case_penalties() {
        assert_eq!(MaskCase::Forbidden.penalty(), f64::INFINITY);
        assert_eq!(MaskCase::SelfPair.penalty(), 1e5);
        assert_eq!(MaskCase::Counted(1).penalty(), 0.0);
        assert!((MaskCase::Counted(3).penalty() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn plan_rejects_mismatched_rounds() {
        assert!(AttentionPlan::new(vec![], 2, true, true).is_err());
        assert!(AttentionPlan::new(vec![build_round(vec![0; 3]), build_round(vec![0; 4])], 2, true, true).is_err());
        assert!(AttentionPlan::new(vec![build_round(vec![0; 3])], 0, true, true).is_err());
    }
}
