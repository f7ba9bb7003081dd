//! Position-wise sublayers: layer normalization and the two-layer
//! feed-forward network. Both act on rows independently, so any row range
//! can be evaluated on its own and gives bit-identical results.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::meter;
use crate::tensor::{kernels, layer_norm_row, layer_norm_row_backward, Scalar, Tensor, LAYER_NORM_EPS};

/// Label under which the feed-forward hidden activations are metered.
pub const FF_PROBE: &str = "ff_hidden";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// tanh approximation
    #[default]
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Gelu => {
                let t = (S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x)).tanh();
                S::lit(0.5) * x * (S::one() + t)
            }
        }
    }

    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Gelu => {
                let t = (S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x)).tanh();
                let dt = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
                S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dt
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[d], S::one()),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Tensor::zeros_like(&self.gamma),
            beta: Tensor::zeros_like(&self.beta),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `rows` rows of `x` into `out`.
    pub fn forward_rows(&self, x: &[S], out: &mut [S]) {
        let d = self.dim();
        let eps = S::lit(LAYER_NORM_EPS);
        for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            layer_norm_row(xr, self.gamma.data(), self.beta.data(), eps, or);
        }
    }

    /// Adds `d LN(x) / dx · dy` into `dx` and accumulates parameter grads.
    pub fn backward_rows(&self, x: &[S], dy: &[S], dx: &mut [S], grads: &mut LayerNorm<S>) {
        let d = self.dim();
        let eps = S::lit(LAYER_NORM_EPS);
        let mut row = vec![S::zero(); d];
        for ((xr, dyr), dxr) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
            layer_norm_row_backward(
                xr,
                self.gamma.data(),
                eps,
                dyr,
                &mut row,
                grads.gamma.data_mut(),
                grads.beta.data_mut(),
            );
            for (a, &b) in dxr.iter_mut().zip(&row) {
                *a += b;
            }
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut out = Tensor::zeros(x.shape());
        self.forward_rows(x.data(), out.data_mut());
        out
    }
}

/// `FF(x) = act(LN(x)·W1 + b1)·W2 + b2`
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<S: Scalar> {
    pub norm: LayerNorm<S>,
    /// `[d_model, d_ff]`
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    /// `[d_ff, d_model]`
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub activation: Activation,
}

/// Saved internals of a feed-forward evaluation: the normalized input and
/// the pre-activation, both covering all rows.
pub(crate) struct FfCache<S: Scalar> {
    normed: Tensor<S>,
    pre: Tensor<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn init(d_model: usize, d_ff: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let mut normal = |shape: &[usize], fan_in: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let v: f64 = StandardNormal.sample(rng);
                S::lit(v * std)
            })
        };
        FeedForward {
            norm: LayerNorm::new(d_model),
            w1: normal(&[d_model, d_ff], d_model),
            b1: Tensor::zeros(&[d_ff]),
            w2: normal(&[d_ff, d_model], d_ff),
            b2: Tensor::zeros(&[d_model]),
            activation,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        FeedForward {
            norm: self.norm.zeros_like(),
            w1: Tensor::zeros_like(&self.w1),
            b1: Tensor::zeros_like(&self.b1),
            w2: Tensor::zeros_like(&self.w2),
            b2: Tensor::zeros_like(&self.b2),
            activation: self.activation,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("ln.gamma", &self.norm.gamma),
            ("ln.beta", &self.norm.beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Adds `FF(x)` for the rows in `x` into `out`. When `keep` is given the
    /// normalized input and pre-activation are copied into it.
    pub(crate) fn forward_rows(&self, x: &[S], out: &mut [S], keep: Option<(&mut [S], &mut [S])>) {
        let (d, f) = (self.d_model(), self.d_ff());
        let rows = x.len() / d;
        meter::probe(FF_PROBE, || {
            let mut normed = Tensor::zeros(&[rows, d]);
            self.norm.forward_rows(x, normed.data_mut());
            let mut hidden = Tensor::zeros(&[rows, f]);
            for r in 0..rows {
                hidden.row_mut(r).copy_from_slice(self.b1.data());
            }
            kernels::gemm_nn(normed.data(), self.w1.data(), hidden.data_mut(), rows, d, f);
            if let Some((kn, kp)) = keep {
                kn.copy_from_slice(normed.data());
                kp.copy_from_slice(hidden.data());
            }
            let act = self.activation;
            hidden.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            for r in 0..rows {
                let o = &mut out[r * d..(r + 1) * d];
                kernels::axpy(S::one(), self.b2.data(), o);
            }
            kernels::gemm_nn(hidden.data(), self.w2.data(), out, rows, f, d);
        })
    }

    /// Adds `dFF/dx · dy` for the rows in `x` into `dx` and accumulates
    /// parameter gradients. Internals are recomputed unless `cached` holds
    /// the normalized input and pre-activation for these rows.
    pub(crate) fn backward_rows(&self, x: &[S], dy: &[S], dx: &mut [S], grads: &mut FeedForward<S>, cached: Option<(&[S], &[S])>) {
        let (d, f) = (self.d_model(), self.d_ff());
        let rows = x.len() / d;
        meter::probe(FF_PROBE, || {
            let (normed, pre) = match cached {
                Some((n, p)) => (Tensor::from_vec(&[rows, d], n.to_vec()).unwrap(), Tensor::from_vec(&[rows, f], p.to_vec()).unwrap()),
                None => {
                    let mut normed = Tensor::zeros(&[rows, d]);
                    self.norm.forward_rows(x, normed.data_mut());
                    let mut pre = Tensor::zeros(&[rows, f]);
                    for r in 0..rows {
                        pre.row_mut(r).copy_from_slice(self.b1.data());
                    }
                    kernels::gemm_nn(normed.data(), self.w1.data(), pre.data_mut(), rows, d, f);
                    (normed, pre)
                }
            };
            let act = self.activation;
            let hidden = Tensor::from_fn(&[rows, f], |i| act.apply(pre.data()[i]));
            kernels::gemm_tn(hidden.data(), dy, grads.w2.data_mut(), rows, f, d);
            kernels::col_sum(dy, grads.b2.data_mut(), rows, d);
            drop(hidden);
            let mut dpre = Tensor::zeros(&[rows, f]);
            kernels::gemm_nt(dy, self.w2.data(), dpre.data_mut(), rows, d, f);
            for (g, &u) in dpre.data_mut().iter_mut().zip(pre.data()) {
                *g *= act.derivative(u);
            }
            drop(pre);
            kernels::gemm_tn(normed.data(), dpre.data(), grads.w1.data_mut(), rows, d, f);
            kernels::col_sum(dpre.data(), grads.b1.data_mut(), rows, f);
            drop(normed);
            let mut dnormed = Tensor::zeros(&[rows, d]);
            kernels::gemm_nt(dpre.data(), self.w1.data(), dnormed.data_mut(), rows, f, d);
            drop(dpre);
            self.norm.backward_rows(x, dnormed.data(), dx, &mut grads.norm);
        })
    }

    /// Unchunked evaluation over every row of `x`, saving internals.
    pub(crate) fn forward_cached(&self, x: &Tensor<S>, out: &mut Tensor<S>) -> FfCache<S> {
        let rows = x.len() / self.d_model();
        let mut normed = Tensor::zeros(&[rows, self.d_model()]);
        let mut pre = Tensor::zeros(&[rows, self.d_ff()]);
        self.forward_rows(x.data(), out.data_mut(), Some((normed.data_mut(), pre.data_mut())));
        FfCache { normed, pre }
    }

    pub(crate) fn backward_cached(&self, x: &Tensor<S>, dy: &Tensor<S>, dx: &mut Tensor<S>, grads: &mut FeedForward<S>, cache: FfCache<S>) {
        self.backward_rows(
            x.data(),
            dy.data(),
            dx.data_mut(),
            grads,
            Some((cache.normed.data(), cache.pre.data())),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Relu, Activation::Gelu] {
            for &x in &[-2.3f64, -0.4, 0.3, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
    }

    fn ff(seed: u64) -> FeedForward<f64> {
        let mut rng = stream(seed, Domain::Test, &[]);
        let mut p = FeedForward::init(6, 10, Activation::Gelu, &mut rng);
        p.b1 = Tensor::from_fn(&[10], |i| 0.1 * i as f64 - 0.4);
        p.b2 = Tensor::from_fn(&[6], |i| 0.05 * i as f64);
        p.norm.gamma = Tensor::from_fn(&[6], |i| 1.0 + 0.1 * i as f64);
        p
    }

    #[test]
    fn row_ranges_are_independent() {
        let p = ff(1);
        let x = crate::attention::tests::rand_tensor(&[5, 6], 2);
        let mut whole = Tensor::zeros(&[5, 6]);
        p.forward_rows(x.data(), whole.data_mut(), None);
        let mut split = Tensor::zeros(&[5, 6]);
        p.forward_rows(&x.data()[..12], &mut split.data_mut()[..12], None);
        p.forward_rows(&x.data()[12..], &mut split.data_mut()[12..], None);
        assert_eq!(whole, split);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = ff(3);
        let x = crate::attention::tests::rand_tensor(&[4, 6], 4);
        let w = crate::attention::tests::rand_tensor(&[4, 6], 5);
        let loss = |p: &FeedForward<f64>, x: &Tensor<f64>| {
            let mut out = Tensor::zeros(&[4, 6]);
            p.forward_rows(x.data(), out.data_mut(), None);
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = p.zeros_like();
        let mut dx = Tensor::zeros(&[4, 6]);
        p.backward_rows(x.data(), w.data(), dx.data_mut(), &mut grads, None);
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}]");
        }
        for (ti, (name, t)) in p.named_tensors().into_iter().enumerate() {
            for i in 0..t.len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.tensors_mut()[ti].data_mut()[i] += h;
                pm.tensors_mut()[ti].data_mut()[i] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                let an = grads.named_tensors()[ti].1.data()[i];
                assert!((fd - an).abs() < 1e-6, "{name}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn cached_backward_equals_recomputed() {
        let p = ff(6);
        let x = crate::attention::tests::rand_tensor(&[3, 6], 7);
        let dy = crate::attention::tests::rand_tensor(&[3, 6], 8);
        let mut out = Tensor::zeros(&[3, 6]);
        let cache = p.forward_cached(&x, &mut out);
        let (mut g1, mut g2) = (p.zeros_like(), p.zeros_like());
        let (mut d1, mut d2) = (Tensor::zeros(&[3, 6]), Tensor::zeros(&[3, 6]));
        p.backward_cached(&x, &dy, &mut d1, &mut g1, cache);
        p.backward_rows(x.data(), dy.data(), d2.data_mut(), &mut g2, None);
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }
}
