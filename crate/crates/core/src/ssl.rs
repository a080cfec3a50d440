//! Desk-scale self-supervised training: encoder stack f/g/h, the three
//! objectives (NT-Xent, SimSiam, triplet) with hand-derived gradients,
//! and the two positive-sampling regimes (standard self-augmentation vs
//! polygon-matched views).
//!
//! Gradients are written out analytically and every loss is held to a
//! central finite-difference check in the tests; the SimSiam z-inputs
//! are stop-gradient by contract, so their gradients are exactly zero.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::miner::{self, BoxKey, PairManifest};
use crate::mlp::{Mlp, MlpGrads};
use crate::rng::Srng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SslError {
    ZeroVector,
    BatchTooSmall,
    UnknownQuery,
    DivergenceDetected,
    EmptyDataset,
}

impl core::fmt::Display for SslError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let msg = match self {
            SslError::ZeroVector => "cosine similarity of a zero vector",
            SslError::BatchTooSmall => "contrastive batch needs at least two pairs",
            SslError::UnknownQuery => "query has no raw feature vector",
            SslError::DivergenceDetected => "loss became non-finite",
            SslError::EmptyDataset => "training dataset is empty",
        };
        write!(f, "{msg}")
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    math::sqrt(dot(u, u))
}

/// Norm floor used inside the batch losses so a momentarily dead ReLU
/// stack cannot abort training; the standalone similarity keeps the
/// strict zero-vector error.
const EPS_NORM: f64 = 1e-12;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SslError> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(SslError::ZeroVector);
    }
    Ok(dot(u, v) / (nu * nv))
}

/// d cos(u, v) / du, given precomputed norms and the cosine value.
fn cosine_grad_u(u: &[f64], v: &[f64], nu: f64, nv: f64, c: f64) -> Vec<f64> {
    let inv = 1.0 / (nu * nv);
    let self_scale = c / (nu * nu);
    u.iter().zip(v).map(|(ui, vi)| vi * inv - ui * self_scale).collect()
}

/// Pairwise cosine similarity matrix.
fn sim_matrix(embeddings: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>), SslError> {
    let n = embeddings.len();
    let norms: Vec<f64> = embeddings.iter().map(|z| norm(z).max(EPS_NORM)).collect();
    let mut sims = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sims[i][j] = dot(&embeddings[i], &embeddings[j]) / (norms[i] * norms[j]);
            }
        }
    }
    Ok((norms, sims))
}

/// NT-Xent on a similarity matrix: mean over anchors of
/// -log(exp(s_ip / tau) / sum_{n != i} exp(s_in / tau)).
///
/// `pairing[i]` is the index of anchor i's positive. With `eq1_literal`
/// the denominator uses exp(-s / tau) instead; that variant exists only
/// for comparison runs and carries no correctness claim.
pub fn nt_xent_from_sims(
    sims: &[Vec<f64>],
    pairing: &[usize],
    tau: f64,
    eq1_literal: bool,
) -> (f64, Vec<Vec<f64>>) {
    let n = sims.len();
    let mut loss = 0.0;
    let mut grad_s = vec![vec![0.0; n]; n];
    let sign = if eq1_literal { -1.0 } else { 1.0 };
    for i in 0..n {
        let p = pairing[i];
        // log-sum-exp over n != i of sign * s_in / tau
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                max = max.max(sign * sims[i][j] / tau);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += math::exp(sign * sims[i][j] / tau - max);
            }
        }
        let lse = max + math::ln(denom);
        loss += -sims[i][p] / tau + lse;
        grad_s[i][p] += -1.0 / tau;
        for j in 0..n {
            if j != i {
                let softmax = math::exp(sign * sims[i][j] / tau - max) / denom;
                grad_s[i][j] += sign * softmax / tau;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for row in &mut grad_s {
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    (loss * scale, grad_s)
}

/// NT-Xent loss over 2N embeddings plus gradients with respect to each
/// embedding. `pairing` must be an involution without fixed points.
pub fn nt_xent_loss(
    embeddings: &[Vec<f64>],
    pairing: &[usize],
    tau: f64,
    eq1_literal: bool,
) -> Result<(f64, Vec<Vec<f64>>), SslError> {
    let n = embeddings.len();
    if n < 4 {
        return Err(SslError::BatchTooSmall);
    }
    assert_eq!(pairing.len(), n);
    let (norms, sims) = sim_matrix(embeddings)?;
    let (loss, grad_s) = nt_xent_from_sims(&sims, pairing, tau, eq1_literal);
    let dim = embeddings[0].len();
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = grad_s[i][j];
            if g == 0.0 {
                continue;
            }
            let gi = cosine_grad_u(&embeddings[i], &embeddings[j], norms[i], norms[j], sims[i][j]);
            let gj = cosine_grad_u(&embeddings[j], &embeddings[i], norms[j], norms[i], sims[i][j]);
            for d in 0..dim {
                grads[i][d] += g * gi[d];
                grads[j][d] += g * gj[d];
            }
        }
    }
    Ok((loss, grads))
}

/// Gradients of the SimSiam objective. The z-entries are exactly zero:
/// the projector outputs are constants under the stop-gradient contract.
#[derive(Clone, Debug)]
pub struct SimsiamGrads {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

/// Symmetric negative-cosine SimSiam loss:
/// 0.5 * (-cos(p1, stopgrad z2)) + 0.5 * (-cos(p2, stopgrad z1)).
pub fn simsiam_loss(
    p1: &[f64],
    p2: &[f64],
    z1: &[f64],
    z2: &[f64],
) -> Result<(f64, SimsiamGrads), SslError> {
    let np1 = norm(p1).max(EPS_NORM);
    let np2 = norm(p2).max(EPS_NORM);
    let nz1 = norm(z1).max(EPS_NORM);
    let nz2 = norm(z2).max(EPS_NORM);
    let c12 = dot(p1, z2) / (np1 * nz2);
    let c21 = dot(p2, z1) / (np2 * nz1);
    let loss = -0.5 * (c12 + c21);
    let mut g1 = cosine_grad_u(p1, z2, np1, nz2, c12);
    let mut g2 = cosine_grad_u(p2, z1, np2, nz1, c21);
    for g in g1.iter_mut() {
        *g *= -0.5;
    }
    for g in g2.iter_mut() {
        *g *= -0.5;
    }
    Ok((
        loss,
        SimsiamGrads {
            p1: g1,
            p2: g2,
            z1: vec![0.0; z1.len()],
            z2: vec![0.0; z2.len()],
        },
    ))
}

/// Squared-Euclidean margin triplet:
/// max(0, |a - p|^2 - |a - n|^2 + margin).
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let d2 = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let raw = d2(anchor, positive) - d2(anchor, negative) + margin;
    let dim = anchor.len();
    if raw <= 0.0 {
        return (0.0, vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    }
    let mut ga = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    for d in 0..dim {
        ga[d] = 2.0 * (negative[d] - positive[d]);
        gp[d] = -2.0 * (anchor[d] - positive[d]);
        gn[d] = 2.0 * (anchor[d] - negative[d]);
    }
    (raw, ga, gp, gn)
}

/// Feature-space analogue of crop/flip/color augmentation: per-channel
/// multiplicative jitter, additive Gaussian noise, coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub jitter_scale: f64,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            jitter_scale: 0.1,
            noise_sigma: 0.05,
            dropout_rate: 0.05,
        }
    }
}

impl AugmentationPolicy {
    pub fn apply(&self, x: &[f64], rng: &mut Srng) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let jitter = 1.0 + self.jitter_scale * rng.uniform_in(-1.0, 1.0);
                let noisy = v * jitter + self.noise_sigma * rng.normal();
                if rng.uniform() < self.dropout_rate {
                    0.0
                } else {
                    noisy
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Simclr,
    Simsiam,
    Triplet,
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            Method::Simclr => "simclr",
            Method::Simsiam => "simsiam",
            Method::Triplet => "triplet",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Standard,
    Polygon,
}

impl core::fmt::Display for Regime {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            Regime::Standard => "standard",
            Regime::Polygon => "polygon",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub positives: Regime,
    pub temperature: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Reproduce the printed denominator sign of the contrastive loss;
    /// comparison only, no correctness claim.
    pub eq1_literal: bool,
    /// Encoder feature width (output of f).
    pub feature_dim: usize,
    /// Projector output width (z used by the losses).
    pub embed_dim: usize,
}

impl TrainConfig {
    /// Desk-scale defaults; full-scale settings (200 epochs, batch 256,
    /// temperature 0.5) remain valid values.
    pub fn desk_scale(method: Method, positives: Regime, input_dim_unused: usize) -> Self {
        let _ = input_dim_unused;
        TrainConfig {
            method,
            positives,
            temperature: 0.5,
            margin: 1.0,
            batch_size: 64,
            epochs: 20,
            learning_rate: 0.05,
            seed: 0,
            augmentation: AugmentationPolicy::default(),
            eq1_literal: false,
            feature_dim: 32,
            embed_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.temperature > 0.0) {
            return Err("temperature must be > 0");
        }
        if self.margin < 0.0 {
            return Err("margin must be >= 0");
        }
        if self.batch_size < 2 {
            return Err("batch_size must be >= 2");
        }
        Ok(())
    }
}

/// Feature extractor f, projector g, predictor h (SimSiam only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub f: Mlp,
    pub g: Mlp,
    pub h: Mlp,
}

impl EncoderStack {
    pub fn init(input_dim: usize, cfg: &TrainConfig, rng: &mut Srng) -> Self {
        EncoderStack {
            f: Mlp::init(&[input_dim, cfg.feature_dim, cfg.feature_dim], rng),
            g: Mlp::init(&[cfg.feature_dim, 16, cfg.embed_dim], rng),
            h: Mlp::init(&[cfg.embed_dim, cfg.embed_dim, cfg.embed_dim], rng),
        }
    }

    /// Frozen feature for linear probing.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.f.forward(x)
    }

    /// Projected embedding z = g(f(x)).
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.g.forward(&self.f.forward(x))
    }
}

/// Raw per-box feature vectors keyed by (image_id, box_id).
pub type FeatureMap = BTreeMap<BoxKey, Vec<f64>>;

/// Build the two views for a query under the chosen regime.
///
/// Polygon regime draws a matched candidate uniformly; an absent or
/// empty candidate list falls back to standard self-augmentation so
/// training never starves.
pub fn make_pair(
    query: &BoxKey,
    regime: Regime,
    manifest: &PairManifest,
    features: &FeatureMap,
    policy: &AugmentationPolicy,
    rng: &mut Srng,
) -> Result<(Vec<f64>, Vec<f64>), SslError> {
    let x = features.get(query).ok_or(SslError::UnknownQuery)?;
    let partner: Option<&Vec<f64>> = match regime {
        Regime::Standard => None,
        Regime::Polygon => match miner::sample_positive(manifest, query, rng) {
            Ok(Some(key)) => features.get(&key),
            _ => None,
        },
    };
    let view_a = policy.apply(x, rng);
    let view_b = policy.apply(partner.unwrap_or(x), rng);
    Ok((view_a, view_b))
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub encoder: EncoderStack,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
}

struct ViewCaches {
    f: Vec<crate::mlp::MlpCache>,
    g: Vec<crate::mlp::MlpCache>,
    h: Vec<crate::mlp::MlpCache>,
    z: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
}

/// Train the encoder stack with plain SGD. Deterministic given the
/// config seed; batch assembly and the update loop share one RNG stream.
pub fn train(
    features: &FeatureMap,
    manifest: &PairManifest,
    cfg: &TrainConfig,
) -> Result<TrainResult, SslError> {
    if features.is_empty() {
        return Err(SslError::EmptyDataset);
    }
    cfg.validate().map_err(|_| SslError::BatchTooSmall)?;
    let input_dim = features.values().next().unwrap().len();
    let mut rng = Srng::seed_from_u64(cfg.seed);
    let mut enc = EncoderStack::init(input_dim, cfg, &mut rng);
    let keys: Vec<BoxKey> = features.keys().cloned().collect();

    let mut gf = MlpGrads::zeros_like(&enc.f);
    let mut gg = MlpGrads::zeros_like(&enc.g);
    let mut gh = MlpGrads::zeros_like(&enc.h);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            // assemble views
            let mut views: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                views.push(make_pair(
                    &keys[i],
                    cfg.positives,
                    manifest,
                    features,
                    &cfg.augmentation,
                    &mut rng,
                )?);
            }
            let loss = train_batch(&mut enc, &views, cfg, &mut rng, &mut gf, &mut gg, &mut gh)?;
            if !loss.is_finite() {
                return Err(SslError::DivergenceDetected);
            }
            epoch_loss += loss;
            epoch_batches += 1;
        }
        loss_curve.push(epoch_loss / epoch_batches.max(1) as f64);
    }
    Ok(TrainResult {
        encoder: enc,
        loss_curve,
    })
}

fn forward_views(
    enc: &EncoderStack,
    views: &[(Vec<f64>, Vec<f64>)],
    with_predictor: bool,
) -> ViewCaches {
    let n = views.len() * 2;
    let mut caches = ViewCaches {
        f: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        h: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
    };
    for (a, b) in views {
        for x in [a, b] {
            let fc = enc.f.forward_cached(x);
            let feat = fc.activations.last().unwrap().clone();
            let gc = enc.g.forward_cached(&feat);
            let z = gc.activations.last().unwrap().clone();
            if with_predictor {
                let hc = enc.h.forward_cached(&z);
                caches.p.push(hc.activations.last().unwrap().clone());
                caches.h.push(hc);
            }
            caches.f.push(fc);
            caches.g.push(gc);
            caches.z.push(z);
        }
    }
    caches
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    enc: &mut EncoderStack,
    views: &[(Vec<f64>, Vec<f64>)],
    cfg: &TrainConfig,
    rng: &mut Srng,
    gf: &mut MlpGrads,
    gg: &mut MlpGrads,
    gh: &mut MlpGrads,
) -> Result<f64, SslError> {
    gf.zero();
    gg.zero();
    gh.zero();
    let b = views.len();
    let with_predictor = cfg.method == Method::Simsiam;
    let caches = forward_views(enc, views, with_predictor);
    let n = 2 * b;

    // gradient with respect to each of the 2B projected embeddings
    let mut grad_z: Vec<Vec<f64>> = vec![vec![0.0; cfg.embed_dim]; n];
    // SimSiam routes its gradient through the predictor first
    let mut grad_p: Vec<Vec<f64>> = Vec::new();

    let loss = match cfg.method {
        Method::Simclr => {
            let mut pairing = vec![0usize; n];
            for i in 0..b {
                pairing[2 * i] = 2 * i + 1;
                pairing[2 * i + 1] = 2 * i;
            }
            let (loss, grads) =
                nt_xent_loss(&caches.z, &pairing, cfg.temperature, cfg.eq1_literal)?;
            grad_z = grads;
            loss
        }
        Method::Simsiam => {
            grad_p = vec![vec![0.0; cfg.embed_dim]; n];
            let mut total = 0.0;
            for i in 0..b {
                let (ia, ib) = (2 * i, 2 * i + 1);
                let (loss, g) =
                    simsiam_loss(&caches.p[ia], &caches.p[ib], &caches.z[ia], &caches.z[ib])?;
                total += loss;
                for d in 0..cfg.embed_dim {
                    grad_p[ia][d] += g.p1[d] / b as f64;
                    grad_p[ib][d] += g.p2[d] / b as f64;
                    // stop-gradient: z receives nothing from the loss side
                    grad_z[ia][d] += g.z1[d];
                    grad_z[ib][d] += g.z2[d];
                }
            }
            total / b as f64
        }
        Method::Triplet => {
            if b < 2 {
                return Err(SslError::BatchTooSmall);
            }
            let mut total = 0.0;
            for i in 0..b {
                // random in-batch negative: another query's second view
                let j = loop {
                    let j = rng.index(b);
                    if j != i {
                        break j;
                    }
                };
                let (ia, ib, jn) = (2 * i, 2 * i + 1, 2 * j + 1);
                let (loss, ga, gp, gn) =
                    triplet_loss(&caches.z[ia], &caches.z[ib], &caches.z[jn], cfg.margin);
                total += loss;
                for d in 0..cfg.embed_dim {
                    grad_z[ia][d] += ga[d] / b as f64;
                    grad_z[ib][d] += gp[d] / b as f64;
                    grad_z[jn][d] += gn[d] / b as f64;
                }
            }
            total / b as f64
        }
    };

    // backprop each view: (predictor) -> projector -> extractor
    for v in 0..n {
        let mut gz = grad_z[v].clone();
        if with_predictor {
            let gz_from_h = enc.h.backward(&caches.h[v], &grad_p[v], gh);
            for d in 0..cfg.embed_dim {
                gz[d] += gz_from_h[d];
            }
        }
        let gfeat = enc.g.backward(&caches.g[v], &gz, gg);
        enc.f.backward(&caches.f[v], &gfeat, gf);
    }
    if !(gf.is_finite() && gg.is_finite() && gh.is_finite()) {
        return Err(SslError::DivergenceDetected);
    }
    enc.f.sgd_step(gf, cfg.learning_rate);
    enc.g.sgd_step(gg, cfg.learning_rate);
    if with_predictor {
        enc.h.sgd_step(gh, cfg.learning_rate);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miner::Candidate;
    use alloc::format;
    use alloc::string::ToString;

    fn unit(dim: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn cosine_trivial_cases() {
        let u = vec![1.0, 2.0, 3.0];
        let negu: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&u, &negu).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(),
            SslError::ZeroVector
        );
    }

    #[test]
    fn nt_xent_closed_form_points() {
        // pairs (0,1) and (2,3); within-pair sim 1, across-pair sim 0:
        // every anchor sees exp(1)/(exp(1) + 2)
        let z = vec![unit(4, 0), unit(4, 0), unit(4, 1), unit(4, 1)];
        let pairing = vec![1, 0, 3, 2];
        let (loss, _) = nt_xent_loss(&z, &pairing, 1.0, false).unwrap();
        let e = math::exp(1.0);
        let expected = -math::ln(e / (e + 2.0));
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs {expected}");
        assert!((expected - 0.55144).abs() < 1e-5);

        // all embeddings identical: loss = ln(2N - 1) = ln 3 for N = 2
        let z = vec![unit(4, 0); 4];
        let (loss, _) = nt_xent_loss(&z, &pairing, 1.0, false).unwrap();
        assert!((loss - math::ln(3.0)).abs() < 1e-9);
        assert!((math::ln(3.0) - 1.09861).abs() < 1e-5);
    }

    #[test]
    fn nt_xent_batch_too_small() {
        let z = vec![unit(4, 0), unit(4, 1)];
        assert_eq!(
            nt_xent_loss(&z, &[1, 0], 1.0, false).unwrap_err(),
            SslError::BatchTooSmall
        );
    }

    #[test]
    fn nt_xent_temperature_scaling() {
        // loss at (sims, tau) equals loss at (sims / tau, 1)
        let sims = vec![
            vec![0.0, 0.8, -0.2, 0.1],
            vec![0.8, 0.0, 0.3, -0.5],
            vec![-0.2, 0.3, 0.0, 0.6],
            vec![0.1, -0.5, 0.6, 0.0],
        ];
        let pairing = vec![1, 0, 3, 2];
        let tau = 0.37;
        let (a, _) = nt_xent_from_sims(&sims, &pairing, tau, false);
        let scaled: Vec<Vec<f64>> = sims
            .iter()
            .map(|row| row.iter().map(|s| s / tau).collect())
            .collect();
        let (b, _) = nt_xent_from_sims(&scaled, &pairing, 1.0, false);
        assert!((a - b).abs() < 1e-12);
    }

    fn random_embeddings(rng: &mut Srng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect()
    }

    fn fd_check<F: Fn(&[Vec<f64>]) -> f64>(
        loss_fn: F,
        z: &[Vec<f64>],
        analytic: &[Vec<f64>],
        tol: f64,
    ) {
        let h = 1e-5;
        for i in 0..z.len() {
            for d in 0..z[i].len() {
                let mut zp = z.to_vec();
                zp[i][d] += h;
                let mut zm = z.to_vec();
                zm[i][d] -= h;
                let fd = (loss_fn(&zp) - loss_fn(&zm)) / (2.0 * h);
                let a = analytic[i][d];
                let denom = fd.abs().max(a.abs()).max(1e-4);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "embedding {i} dim {d}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn nt_xent_gradient_finite_differences() {
        let mut rng = Srng::seed_from_u64(100);
        let pairing = vec![1, 0, 3, 2, 5, 4];
        for trial in 0..100 {
            let z = random_embeddings(&mut rng, 6, 5);
            let tau = 0.5;
            let literal = trial % 4 == 3;
            let (_, grads) = nt_xent_loss(&z, &pairing, tau, literal).unwrap();
            fd_check(
                |zz| nt_xent_loss(zz, &pairing, tau, literal).unwrap().0,
                &z,
                &grads,
                1e-4,
            );
        }
    }

    #[test]
    fn nt_xent_rotation_invariance() {
        let mut rng = Srng::seed_from_u64(55);
        let pairing = vec![1, 0, 3, 2];
        let z = random_embeddings(&mut rng, 4, 6);
        let (base, _) = nt_xent_loss(&z, &pairing, 0.5, false).unwrap();
        // random orthogonal map from composed Givens rotations
        let dim = 6;
        let mut rotated = z.clone();
        for _ in 0..20 {
            let i = rng.index(dim);
            let j = loop {
                let j = rng.index(dim);
                if j != i {
                    break j;
                }
            };
            let a = rng.uniform_in(-math::PI, math::PI);
            let (s, c) = (math::sin(a), math::cos(a));
            for v in &mut rotated {
                let (vi, vj) = (v[i], v[j]);
                v[i] = c * vi - s * vj;
                v[j] = s * vi + c * vj;
            }
        }
        let (rot, _) = nt_xent_loss(&rotated, &pairing, 0.5, false).unwrap();
        assert!((base - rot).abs() < 1e-9, "{base} vs {rot}");
    }

    #[test]
    fn simsiam_trivial_values() {
        let v = vec![0.6, -0.8, 0.0];
        let (loss, _) = simsiam_loss(&v, &v, &v, &v).unwrap();
        assert!((loss + 1.0).abs() < 1e-12);
        let p = vec![1.0, 0.0];
        let z = vec![0.0, 1.0];
        let (loss, _) = simsiam_loss(&p, &p, &z, &z).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn simsiam_gradients() {
        let mut rng = Srng::seed_from_u64(200);
        for _ in 0..100 {
            let vs = random_embeddings(&mut rng, 4, 5);
            let (p1, p2, z1, z2) = (&vs[0], &vs[1], &vs[2], &vs[3]);
            let (_, g) = simsiam_loss(p1, p2, z1, z2).unwrap();
            // detached inputs: exactly zero
            assert!(g.z1.iter().all(|&x| x == 0.0));
            assert!(g.z2.iter().all(|&x| x == 0.0));
            // p-inputs: finite differences (z held constant, as detached)
            let analytic = vec![g.p1.clone(), g.p2.clone()];
            fd_check(
                |ps| simsiam_loss(&ps[0], &ps[1], z1, z2).unwrap().0,
                &[p1.clone(), p2.clone()],
                &analytic,
                1e-4,
            );
        }
    }

    #[test]
    fn triplet_trivial_values() {
        // satisfied margin
        let a = vec![0.0, 0.0];
        let p = vec![0.0, 0.0];
        let n = vec![2.0f64.sqrt(), 0.0]; // d2 = 2
        assert_eq!(triplet_loss(&a, &p, &n, 1.0).0, 0.0);
        // tie: d(a,p)^2 = d(a,n)^2
        let n2 = vec![0.0, 0.0];
        assert_eq!(triplet_loss(&a, &p, &n2, 1.0).0, 1.0);
    }

    #[test]
    fn triplet_gradients() {
        let mut rng = Srng::seed_from_u64(300);
        let mut active_checked = 0;
        for _ in 0..100 {
            let vs = random_embeddings(&mut rng, 3, 5);
            let margin = 1.0;
            let (loss, ga, gp, gn) = triplet_loss(&vs[0], &vs[1], &vs[2], margin);
            if loss <= 1e-6 {
                continue; // kink or inactive region, gradient trivially zero
            }
            active_checked += 1;
            let analytic = vec![ga, gp, gn];
            fd_check(
                |xs| triplet_loss(&xs[0], &xs[1], &xs[2], margin).0,
                &vs,
                &analytic,
                1e-4,
            );
        }
        assert!(active_checked > 20, "too few active triplets: {active_checked}");
    }

    #[test]
    fn triplet_zero_when_margin_satisfied() {
        let mut rng = Srng::seed_from_u64(301);
        for _ in 0..100 {
            let a = random_embeddings(&mut rng, 1, 4).remove(0);
            let p = a.clone();
            let far: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
            assert_eq!(triplet_loss(&a, &p, &far, 1.0).0, 0.0);
        }
    }

    fn toy_features(n: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut rng = Srng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                (
                    (format!("img{i}"), 0u32),
                    (0..dim).map(|_| rng.normal()).collect(),
                )
            })
            .collect()
    }

    fn manifest_with(query: BoxKey, cands: &[BoxKey]) -> PairManifest {
        let mut m = PairManifest::default();
        m.entries.insert(
            query,
            cands
                .iter()
                .map(|(img, bx)| Candidate {
                    image_id: img.clone(),
                    box_id: *bx,
                    overlap_m2: 0.1,
                    iou: 0.5,
                })
                .collect(),
        );
        m
    }

    #[test]
    fn make_pair_fallback_and_candidate_use() {
        let features = toy_features(4, 6, 9);
        let policy = AugmentationPolicy {
            jitter_scale: 0.0,
            noise_sigma: 0.0,
            dropout_rate: 0.0,
        };
        let q = ("img0".to_string(), 0u32);
        let mut rng = Srng::seed_from_u64(0);
        // empty candidate list: both views from the query
        let m = manifest_with(q.clone(), &[]);
        let (a, b) = make_pair(&q, Regime::Polygon, &m, &features, &policy, &mut rng).unwrap();
        assert_eq!(a, features[&q]);
        assert_eq!(b, features[&q]);
        // one candidate: second view always from the candidate
        let c = ("img1".to_string(), 0u32);
        let m = manifest_with(q.clone(), core::slice::from_ref(&c));
        for _ in 0..10 {
            let (_, b) = make_pair(&q, Regime::Polygon, &m, &features, &policy, &mut rng).unwrap();
            assert_eq!(b, features[&c]);
        }
        // unknown feature key
        let missing = ("ghost".to_string(), 0u32);
        assert_eq!(
            make_pair(&missing, Regime::Standard, &m, &features, &policy, &mut rng).unwrap_err(),
            SslError::UnknownQuery
        );
    }

    #[test]
    fn make_pair_uniform_over_candidates() {
        let features = toy_features(4, 6, 10);
        let policy = AugmentationPolicy {
            jitter_scale: 0.0,
            noise_sigma: 0.0,
            dropout_rate: 0.0,
        };
        let q = ("img0".to_string(), 0u32);
        let cands: Vec<BoxKey> = (1..4).map(|i| (format!("img{i}"), 0u32)).collect();
        let m = manifest_with(q.clone(), &cands);
        let mut rng = Srng::seed_from_u64(77);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (_, b) = make_pair(&q, Regime::Polygon, &m, &features, &policy, &mut rng).unwrap();
            let idx = cands.iter().position(|k| features[k] == b).unwrap();
            counts[idx] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = math::sqrt(n as f64 * p * (1.0 - p));
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn train_zero_lr_leaves_parameters() {
        let features = toy_features(16, 6, 3);
        let manifest = PairManifest::default();
        let mut cfg = TrainConfig::desk_scale(Method::Simclr, Regime::Standard, 6);
        cfg.epochs = 1;
        cfg.batch_size = 8;
        cfg.learning_rate = 0.0;
        cfg.seed = 5;
        let result = train(&features, &manifest, &cfg).unwrap();
        // identical init from the same seed
        let mut rng = Srng::seed_from_u64(cfg.seed);
        let init = EncoderStack::init(6, &cfg, &mut rng);
        assert_eq!(result.encoder, init);
    }

    #[test]
    fn train_deterministic() {
        let features = toy_features(32, 6, 4);
        let manifest = PairManifest::default();
        for method in [Method::Simclr, Method::Simsiam, Method::Triplet] {
            let mut cfg = TrainConfig::desk_scale(method, Regime::Standard, 6);
            cfg.epochs = 2;
            cfg.batch_size = 8;
            cfg.seed = 11;
            let a = train(&features, &manifest, &cfg).unwrap();
            let b = train(&features, &manifest, &cfg).unwrap();
            assert_eq!(a.encoder, b.encoder, "{method}");
            assert_eq!(a.loss_curve, b.loss_curve);
        }
    }

    #[test]
    fn train_loss_decreases() {
        let features = toy_features(64, 6, 8);
        let manifest = PairManifest::default();
        let mut cfg = TrainConfig::desk_scale(Method::Simclr, Regime::Standard, 6);
        cfg.epochs = 15;
        cfg.batch_size = 16;
        cfg.learning_rate = 0.1;
        let result = train(&features, &manifest, &cfg).unwrap();
        let first = result.loss_curve[0];
        let last = *result.loss_curve.last().unwrap();
        assert!(last < first, "loss did not trend down: {first} -> {last}");
    }
}
