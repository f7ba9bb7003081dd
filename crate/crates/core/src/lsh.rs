//! Angular locality-sensitive hashing by random rotation, and the bucket
//! sort that turns hash values into an attention batching layout.
//!
//! A vector `x` is hashed to `argmax([xR; -xR])` where `R` is a
//! `[d_k, n_buckets / 2]` matrix of i.i.d. standard normals. Positions are
//! then stably sorted by bucket, so within a bucket they stay in sequence
//! order, and the sorted sequence is cut into chunks of `m` slots.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{splitmix64, stream_id, Domain};
use crate::tensor::{kernels, stable_sort_perm, Permutation, Scalar, Tensor};

/// Hashing and chunking knobs for LSH attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LshConfig {
    /// Number of buckets per hash; must be even.
    pub n_buckets: usize,
    /// Number of independent hash rounds whose attention sets are unioned.
    pub n_rounds: usize,
    /// Chunk length `m` in sorted order. `None` means `2 l / n_buckets`.
    pub chunk_len: Option<usize>,
    /// Seed for the rotation stream.
    pub seed: u64,
    /// Reuse the step-0 rotations on every step (deterministic tests).
    pub freeze_rotations: bool,
    /// Mask chunk-local pairs whose buckets differ. When false only the
    /// chunk geometry restricts attention.
    pub bucket_strict: bool,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            n_buckets: 8,
            n_rounds: 1,
            chunk_len: None,
            seed: 0,
            freeze_rotations: false,
            bucket_strict: true,
        }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_buckets == 0 || !self.n_buckets.is_multiple_of(2) {
            return Err(Error::config("lsh.n_buckets", format!("must be a positive even number, got {}", self.n_buckets)));
        }
        if self.n_rounds == 0 {
            return Err(Error::config("lsh.n_rounds", "must be at least 1"));
        }
        if self.chunk_len == Some(0) {
            return Err(Error::config("lsh.chunk_len", "must be at least 1"));
        }
        Ok(())
    }

    /// Chunk length for a sequence of length `l`.
    pub fn chunk_len_for(&self, l: usize) -> usize {
        self.chunk_len.unwrap_or((2 * l / self.n_buckets).max(1))
    }

    /// Seed of the rotation used at `(step, layer, head, round)`.
    pub fn rotation_seed(&self, domain: Domain, step: u64, layer: usize, head: usize, round: usize) -> u64 {
        let step = if self.freeze_rotations { 0 } else { step };
        splitmix64(self.seed ^ stream_id(domain, &[step, layer as u64, head as u64, round as u64]))
    }
}

/// Samples the `[d_k, n_buckets / 2]` rotation matrix. Entries are drawn in
/// f64 from ChaCha8 seeded with `seed` and then cast, so f32 and f64 runs
/// hash identically up to rounding.
pub fn sample_rotation<S: Scalar>(d_k: usize, n_buckets: usize, seed: u64) -> Result<Tensor<S>> {
    if n_buckets == 0 || !n_buckets.is_multiple_of(2) {
        return Err(Error::config("n_buckets", format!("must be a positive even number, got {n_buckets}")));
    }
    if d_k == 0 {
        return Err(Error::config("d_k", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = n_buckets / 2;
    Ok(Tensor::from_fn(&[d_k, cols], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        S::lit(v)
    }))
}

/// Hash of one vector. `proj` is scratch of length `n_buckets / 2`.
/// Ties go to the lowest index, so the zero vector lands in bucket 0.
#[inline]
pub(crate) fn hash_row<S: Scalar>(x: &[S], rotation: &Tensor<S>, proj: &mut [S]) -> usize {
    let cols = rotation.cols();
    proj.iter_mut().for_each(|p| *p = S::zero());
    kernels::gemm_nn(x, rotation.data(), proj, 1, x.len(), cols);
    // argmax of [p; -p]: ties go to the earlier index, so the positive half
    // wins unless its negation is strictly larger.
    let (mut hi, mut lo) = (0, 0);
    for (c, &p) in proj.iter().enumerate().skip(1) {
        if p > proj[hi] {
            hi = c;
        }
        if p < proj[lo] {
            lo = c;
        }
    }
    if -proj[lo] > proj[hi] {
        cols + lo
    } else {
        hi
    }
}

/// Buckets for every row of `x` (`[.., l, d_k]`), flattened in row order.
pub fn hash_vectors<S: Scalar>(x: &Tensor<S>, rotation: &Tensor<S>) -> Result<Vec<usize>> {
    if rotation.shape().len() != 2 || x.cols() != rotation.shape()[0] {
        return Err(Error::Shape {
            op: "hash_vectors",
            lhs: x.shape().to_vec(),
            rhs: rotation.shape().to_vec(),
        });
    }
    let mut proj = vec![S::zero(); rotation.cols()];
    Ok((0..x.rows()).map(|r| hash_row(x.row(r), rotation, &mut proj)).collect())
}

/// One hash round over a length-`l` sequence: the bucket of every position
/// and the stable bucket sort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundHash {
    pub bucket_ids: Vec<usize>,
    /// `sort_perm[t]` is the position placed at sorted slot `t`.
    pub sort_perm: Permutation,
    /// `inverse_perm[i]` is the sorted slot of position `i` (the `s_i` of the
    /// chunk rule).
    pub inverse_perm: Permutation,
}

impl RoundHash {
    pub fn len(&self) -> usize {
        self.bucket_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bucket_ids.is_empty()
    }

    /// Sorted slot of position `i`.
    #[inline]
    pub fn slot(&self, i: usize) -> usize {
        self.inverse_perm.indices()[i]
    }

    /// Position at sorted slot `t`.
    #[inline]
    pub fn position(&self, t: usize) -> usize {
        self.sort_perm.indices()[t]
    }

    pub fn max_bucket_occupancy(&self) -> usize {
        let n = self.bucket_ids.iter().copied().max().map_or(0, |b| b + 1);
        let mut counts = vec![0usize; n];
        for &b in &self.bucket_ids {
            counts[b] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }
}

pub fn build_round(bucket_ids: Vec<usize>) -> RoundHash {
    let sort_perm = stable_sort_perm(&bucket_ids);
    let inverse_perm = sort_perm.inverse();
    RoundHash {
        bucket_ids,
        sort_perm,
        inverse_perm,
    }
}

/// True when sorted slot `sj` lies in the same chunk of length `m` as `si`
/// or in the chunk immediately before it.
#[inline]
pub fn chunk_neighborhood(si: usize, sj: usize, m: usize) -> bool {
    let (ci, cj) = (si / m, sj / m);
    cj <= ci && cj + 1 >= ci
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn hash1(x: &[f64], r: &Tensor<f64>) -> usize {
        hash_vectors(&Tensor::from_vec(&[1, x.len()], x.to_vec()).unwrap(), r).unwrap()[0]
    }

    #[test]
    fn rotation_is_seed_deterministic() {
        let a = sample_rotation::<f32>(4, 8, 11).unwrap();
        let b = sample_rotation::<f32>(4, 8, 11).unwrap();
        let c = sample_rotation::<f32>(4, 8, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), &[4, 4]);
    }

    #[test]
    fn odd_bucket_count_rejected() {
        assert!(matches!(sample_rotation::<f32>(4, 7, 0), Err(Error::Config { .. })));
        assert!(LshConfig { n_buckets: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn sign_symmetry_of_buckets() {
        let r = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(hash1(&[1.0, 0.0], &r), 0);
        assert_eq!(hash1(&[-1.0, 0.0], &r), 1);
        assert_eq!(hash1(&[0.0, 0.0], &r), 0);
    }

    #[test]
    fn hash_matches_brute_force_signed_projections() {
        let mut rng = stream(3, Domain::Test, &[0]);
        let r = sample_rotation::<f64>(6, 4, 5).unwrap();
        for _ in 0..200 {
            let x = unit(&mut rng, 6);
            let mut best = (f64::NEG_INFINITY, 0);
            for b in 0..4 {
                let col = b % 2;
                let sign = if b < 2 { 1.0 } else { -1.0 };
                let p: f64 = (0..6).map(|k| x[k] * r.data()[k * 2 + col]).sum::<f64>() * sign;
                if p > best.0 {
                    best = (p, b);
                }
            }
            assert_eq!(hash1(&x, &r), best.1);
        }
    }

    #[test]
    fn build_round_examples() {
        assert!(build_round(vec![3, 3, 3]).sort_perm.is_identity());
        assert_eq!(build_round(vec![1, 0]).sort_perm.indices(), &[1, 0]);
        let r = build_round(vec![2, 0, 2, 1]);
        assert_eq!(r.sort_perm.indices(), &[1, 3, 0, 2]);
        assert!(r.sort_perm.then(&r.inverse_perm).is_identity());
        assert_eq!(r.slot(0), 2);
    }

    #[test]
    fn chunk_neighborhood_examples() {
        assert!(chunk_neighborhood(5, 5, 4));
        assert!(chunk_neighborhood(4, 3, 4));
        assert!(!chunk_neighborhood(0, 5, 4));
        assert!(!chunk_neighborhood(8, 3, 4));
    }

    #[test]
    fn default_chunk_len_is_two_l_over_buckets() {
        let c = LshConfig { n_buckets: 8, ..Default::default() };
        assert_eq!(c.chunk_len_for(64), 16);
        assert_eq!(c.chunk_len_for(2), 1);
    }

    #[test]
    fn nearby_vectors_collide_more_often() {
        for &nb in &[4usize, 16, 64] {
            let d = 16;
            let trials = 10_000;
            let mut rng = stream(9, Domain::Test, &[nb as u64]);
            let (mut near, mut far) = (0, 0);
            for t in 0..trials {
                let r = sample_rotation::<f64>(d, nb, 1000 + t).unwrap();
                let u = unit(&mut rng, d);
                let noise = unit(&mut rng, d);
                let v: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| a + 0.1 * b).collect();
                let w = unit(&mut rng, d);
                let hu = hash1(&u, &r);
                near += (hu == hash1(&v, &r)) as usize;
                far += (hu == hash1(&w, &r)) as usize;
            }
            assert!(near > far, "n_buckets={nb}: near {near} far {far}");
        }
    }

    #[test]
    fn buckets_are_uniform_over_fresh_rotations() {
        let nb = 8;
        let samples = 10_000usize;
        let mut rng = stream(21, Domain::Test, &[]);
        let mut counts = vec![0usize; nb];
        for s in 0..samples {
            let r = sample_rotation::<f64>(8, nb, s as u64).unwrap();
            counts[hash1(&unit(&mut rng, 8), &r)] += 1;
        }
        let p = 1.0 / nb as f64;
        let sigma = (samples as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - samples as f64 * p).abs() <= 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn small_buckets_fit_inside_chunk_reach() {
        let mut rng = stream(4, Domain::Test, &[1]);
        for _ in 0..200 {
            let l = 32;
            let ids: Vec<usize> = (0..l).map(|_| rng.random_range(0..8)).collect();
            let round = build_round(ids);
            let m = round.max_bucket_occupancy() + 1;
            for i in 0..l {
                for j in 0..l {
                    if round.bucket_ids[i] == round.bucket_ids[j] {
                        let (si, sj) = (round.slot(i), round.slot(j));
                        assert!(chunk_neighborhood(si, sj, m) || chunk_neighborhood(sj, si, m));
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn positive_scaling_preserves_hash(x in prop::collection::vec(-5.0f64..5.0, 6), c in 1e-3f64..1e3, seed in 0u64..100) {
                let r = sample_rotation::<f64>(6, 8, seed).unwrap();
                let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
                prop_assert_eq!(hash1(&x, &r), hash1(&scaled, &r));
            }

            #[test]
            fn bucket_ids_in_range(x in prop::collection::vec(-5.0f32..5.0, 4 * 10), seed in 0u64..100) {
                let r = sample_rotation::<f32>(4, 6, seed).unwrap();
                let ids = hash_vectors(&Tensor::from_vec(&[10, 4], x).unwrap(), &r).unwrap();
                prop_assert!(ids.iter().all(|&b| b < 6));
            }
        }
    }
}
