//! Minimal fully-connected network with hand-derived backpropagation.
//!
//! The architecture is fixed by a dimension list; ReLU between layers,
//! linear output. No autodiff: the backward pass is written out so that
//! finite differences can verify every gradient the trainer uses.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::Srng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// Row-major (out x in) weight matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer activations captured during a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// activations[0] is the input; activations[l] the post-ReLU output
    /// of layer l (linear for the last layer).
    pub activations: Vec<Vec<f64>>,
}

/// Parameter gradients, same shapes as [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-style initialization scaled by fan-in.
    pub fn init(dims: &[usize], rng: &mut Srng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = math::sqrt(2.0 / fan_in as f64);
            weights.push((0..fan_in * fan_out).map(|_| rng.normal() * scale).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = self.forward_cached(x);
        cache.activations.pop().expect("non-empty")
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        assert_eq!(x.len(), self.in_dim());
        let mut activations = Vec::with_capacity(self.layer_count() + 1);
        activations.push(x.to_vec());
        for l in 0..self.layer_count() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let prev = &activations[l];
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = out[o];
                for i in 0..n_in {
                    acc += row[i] * prev[i];
                }
                out[o] = if l + 1 < self.layer_count() { acc.max(0.0) } else { acc };
            }
            activations.push(out);
        }
        MlpCache { activations }
    }

    /// Backpropagate `grad_out` through the cached pass, accumulating
    /// parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.out_dim());
        let mut delta = grad_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            // ReLU mask applies to hidden layers only
            if l + 1 < self.layer_count() {
                let act = &cache.activations[l + 1];
                for o in 0..n_out {
                    if act[o] <= 0.0 {
                        delta[o] = 0.0;
                    }
                }
            }
            let prev = &cache.activations[l];
            let gw = &mut grads.weights[l];
            for o in 0..n_out {
                grads.biases[l][o] += delta[o];
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row[i] += delta[o] * prev[i];
                }
            }
            let w = &self.weights[l];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    next[i] += delta[o] * row[i];
                }
            }
            delta = next;
        }
        delta
    }

    /// Plain SGD update: p -= lr * g.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) {
        for l in 0..self.layer_count() {
            for (p, g) in self.weights[l].iter_mut().zip(&grads.weights[l]) {
                *p -= lr * g;
            }
            for (p, g) in self.biases[l].iter_mut().zip(&grads.biases[l]) {
                *p -= lr * g;
            }
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.layer_count() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in 0..self.layer_count() {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        assert_eq!(k, flat.len());
    }
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq_loss(net: &Mlp, x: &[f64], target: &[f64]) -> f64 {
        let y = net.forward(x);
        y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    #[test]
    fn forward_identity_layer() {
        let mut net = Mlp::init(&[2, 2], &mut Srng::seed_from_u64(0));
        net.weights[0] = vec![1.0, 0.0, 0.0, 1.0];
        net.biases[0] = vec![0.5, -0.5];
        let y = net.forward(&[1.0, 2.0]);
        assert_eq!(y, vec![1.5, 1.5]);
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut rng = Srng::seed_from_u64(42);
        let mut net = Mlp::init(&[4, 6, 3], &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let target: Vec<f64> = (0..3).map(|_| rng.normal()).collect();

        let cache = net.forward_cached(&x);
        let y = cache.activations.last().unwrap().clone();
        let grad_out: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut grads = MlpGrads::zeros_like(&net);
        let grad_in = net.backward(&cache, &grad_out, &mut grads);

        let flat = net.flat_params();
        let mut analytic = Vec::new();
        for l in 0..net.layer_count() {
            analytic.extend_from_slice(&grads.weights[l]);
            analytic.extend_from_slice(&grads.biases[l]);
        }
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += h;
            net.set_flat_params(&plus);
            let lp = sq_loss(&net, &x, &target);
            let mut minus = flat.clone();
            minus[k] -= h;
            net.set_flat_params(&minus);
            let lm = sq_loss(&net, &x, &target);
            net.set_flat_params(&flat);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(
                (fd - analytic[k]).abs() / denom < 1e-4,
                "param {k}: fd {fd} vs analytic {}",
                analytic[k]
            );
        }

        // input gradient too
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let lp = sq_loss(&net, &xp, &target);
            let mut xm = x.clone();
            xm[i] -= h;
            let lm = sq_loss(&net, &xm, &target);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad_in[i].abs()).max(1e-6);
            assert!((fd - grad_in[i]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn sgd_reduces_loss() {
        let mut rng = Srng::seed_from_u64(7);
        let mut net = Mlp::init(&[3, 8, 2], &mut rng);
        let x = [0.3, -0.4, 0.9];
        let target = [1.0, -1.0];
        let initial = sq_loss(&net, &x, &target);
        for _ in 0..200 {
            let cache = net.forward_cached(&x);
            let y = cache.activations.last().unwrap();
            let grad_out: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            let mut grads = MlpGrads::zeros_like(&net);
            net.backward(&cache, &grad_out, &mut grads);
            net.sgd_step(&grads, 0.05);
        }
        let fin = sq_loss(&net, &x, &target);
        assert!(fin < initial * 0.01, "loss {initial} -> {fin}");
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = Srng::seed_from_u64(1);
        let net = Mlp::init(&[5, 4, 3], &mut rng);
        let mut copy = net.clone();
        let flat = net.flat_params();
        copy.set_flat_params(&flat);
        assert_eq!(net, copy);
    }
}
