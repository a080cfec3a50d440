//! Linear-probe evaluation of frozen features: stratified label
//! fractions, multinomial logistic probe trained by gradient descent,
//! Top-1 and Balanced Top-1 accuracy.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::mlp::{Mlp, MlpGrads};
use crate::rng::Srng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalError {
    EmptyClass,
    LengthMismatch,
    DivergenceDetected,
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let msg = match self {
            EvalError::EmptyClass => "a class has no samples",
            EvalError::LengthMismatch => "predictions and labels differ in length",
            EvalError::DivergenceDetected => "probe loss became non-finite",
        };
        write!(f, "{msg}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub label_fractions: Vec<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            label_fractions: vec![0.01, 0.10, 1.00],
            epochs: 300,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

/// Per-class stratified subset: round(fraction * count) with a minimum
/// of one sample per class; deterministic given the seed.
pub fn stratified_subset(labels: &[u8], fraction: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction in (0, 1]");
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(EvalError::EmptyClass);
    }
    let mut rng = Srng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for (_, mut idx) in by_class {
        let take = (math::round(fraction * idx.len() as f64) as usize).max(1);
        rng.shuffle(&mut idx);
        idx.truncate(take.min(idx.len()));
        picked.extend(idx);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Multinomial logistic classifier over frozen features. The probe is a
/// single linear layer; the encoder is never touched.
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[u8],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<Mlp, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch);
    }
    if features.is_empty() {
        return Err(EvalError::EmptyClass);
    }
    let dim = features[0].len();
    let mut rng = Srng::seed_from_u64(cfg.seed);
    let mut probe = Mlp::init(&[dim, num_classes], &mut rng);
    let mut grads = MlpGrads::zeros_like(&probe);
    let n = features.len();
    for _ in 0..cfg.epochs {
        grads.zero();
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let cache = probe.forward_cached(x);
            let logits = cache.activations.last().unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
            let z: f64 = exps.iter().sum();
            loss += -(logits[y as usize] - max - math::ln(z));
            let grad_out: Vec<f64> = exps
                .iter()
                .enumerate()
                .map(|(c, &e)| (e / z - if c == y as usize { 1.0 } else { 0.0 }) / n as f64)
                .collect();
            probe.backward(&cache, &grad_out, &mut grads);
        }
        if !loss.is_finite() {
            return Err(EvalError::DivergenceDetected);
        }
        probe.sgd_step(&grads, cfg.learning_rate);
    }
    Ok(probe)
}

pub fn predict(probe: &Mlp, features: &[Vec<f64>]) -> Vec<u8> {
    features
        .iter()
        .map(|x| {
            let logits = probe.forward(x);
            let mut best = 0usize;
            for (c, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent correct overall.
    pub top1: f64,
    /// Unweighted mean of per-class recalls, percent.
    pub balanced_top1: f64,
    /// recall[c] is None when class c has no test samples.
    pub per_class_recall: Vec<Option<f64>>,
    /// confusion[true][pred], counts.
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_metrics(
    predictions: &[u8],
    labels: &[u8],
    num_classes: usize,
) -> Result<Metrics, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch);
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y as usize][p as usize] += 1;
    }
    let total = labels.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut recalls = Vec::with_capacity(num_classes);
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let row: usize = confusion[c].iter().sum();
        if row == 0 {
            recalls.push(None);
        } else {
            let r = confusion[c][c] as f64 / row as f64;
            recalls.push(Some(r));
            recall_sum += r;
            present += 1;
        }
    }
    Ok(Metrics {
        top1: 100.0 * correct as f64 / total.max(1) as f64,
        balanced_top1: 100.0 * recall_sum / present.max(1) as f64,
        per_class_recall: recalls,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_full_fraction_is_everything() {
        let labels = vec![0u8, 0, 1, 1, 1, 2];
        let idx = stratified_subset(&labels, 1.0, 0).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn stratified_minimum_one_per_class() {
        // 10 samples of class 0 at 1%: round(0.1) = 0, floor-of-one keeps 1
        let labels = vec![0u8; 10];
        let idx = stratified_subset(&labels, 0.01, 3).unwrap();
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn stratified_counts_match_rounding() {
        let mut labels = Vec::new();
        for c in 0..12u8 {
            for _ in 0..(5 + 20 * c as usize) {
                labels.push(c);
            }
        }
        let idx = stratified_subset(&labels, 0.1, 9).unwrap();
        let mut counts = [0usize; 12];
        for &i in &idx {
            counts[labels[i] as usize] += 1;
        }
        for c in 0..12usize {
            let n_c = 5 + 20 * c;
            let expected = (math::round(0.1 * n_c as f64) as usize).max(1);
            assert_eq!(counts[c], expected, "class {c}");
        }
        // deterministic
        assert_eq!(idx, stratified_subset(&labels, 0.1, 9).unwrap());
    }

    #[test]
    fn separable_two_class_probe() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut rng = Srng::seed_from_u64(2);
        for i in 0..40 {
            let c = (i % 2) as u8;
            let center = if c == 0 { -2.0 } else { 2.0 };
            features.push(vec![center + 0.2 * rng.normal(), 0.1 * rng.normal()]);
            labels.push(c);
        }
        let cfg = ProbeConfig { epochs: 200, learning_rate: 1.0, ..ProbeConfig::default() };
        let probe = train_probe(&features, &labels, 2, &cfg).unwrap();
        let preds = predict(&probe, &features);
        let m = compute_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(m.top1, 100.0);
    }

    #[test]
    fn shuffled_labels_hit_chance_level() {
        let mut rng = Srng::seed_from_u64(6);
        let n = 2400;
        let train_feats: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
        let train_labels: Vec<u8> = (0..n).map(|_| rng.index(12) as u8).collect();
        let cfg = ProbeConfig { epochs: 50, learning_rate: 0.5, ..ProbeConfig::default() };
        let probe = train_probe(&train_feats, &train_labels, 12, &cfg).unwrap();
        let test_feats: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
        let test_labels: Vec<u8> = (0..n).map(|_| rng.index(12) as u8).collect();
        let preds = predict(&probe, &test_feats);
        let m = compute_metrics(&preds, &test_labels, 12).unwrap();
        let chance = 100.0 / 12.0;
        assert!((m.top1 - chance).abs() < 3.0, "top1 {} vs chance {chance}", m.top1);
    }

    #[test]
    fn zero_learning_rate_keeps_probe() {
        let features = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let labels = vec![0u8, 1];
        let cfg = ProbeConfig { epochs: 10, learning_rate: 0.0, seed: 4, ..ProbeConfig::default() };
        let probe = train_probe(&features, &labels, 2, &cfg).unwrap();
        let init = Mlp::init(&[2, 2], &mut Srng::seed_from_u64(4));
        assert_eq!(probe, init);
    }

    #[test]
    fn metrics_closed_forms() {
        // all correct
        let m = compute_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.top1, 100.0);
        assert_eq!(m.balanced_top1, 100.0);
        // class A (90) all correct, class B (10) all wrong
        let mut preds = vec![0u8; 90];
        preds.extend(vec![0u8; 10]);
        let mut labels = vec![0u8; 90];
        labels.extend(vec![1u8; 10]);
        let m = compute_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(m.top1, 90.0);
        assert_eq!(m.balanced_top1, 50.0);
    }

    #[test]
    fn balanced_equals_recomputed_mean_of_diagonal() {
        let mut rng = Srng::seed_from_u64(13);
        let n = 5000;
        let labels: Vec<u8> = (0..n).map(|_| rng.index(12) as u8).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.index(12) as u8).collect();
        let m = compute_metrics(&preds, &labels, 12).unwrap();
        // independent recomputation from the confusion matrix
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..12 {
            let row: usize = m.confusion[c].iter().sum();
            if row > 0 {
                sum += m.confusion[c][c] as f64 / row as f64;
                present += 1;
            }
        }
        let expected = 100.0 * sum / present as f64;
        assert!((m.balanced_top1 - expected).abs() < 1e-12);
        // bounds against per-class recalls
        let recalls: Vec<f64> = m.per_class_recall.iter().flatten().cloned().collect();
        let max = recalls.iter().cloned().fold(0.0, f64::max);
        let min = recalls.iter().cloned().fold(1.0, f64::min);
        assert!(m.balanced_top1 <= 100.0 * max + 1e-9);
        assert!(m.balanced_top1 >= 100.0 * min - 1e-9);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert_eq!(
            compute_metrics(&[0], &[0, 1], 2).unwrap_err(),
            EvalError::LengthMismatch
        );
    }
}
