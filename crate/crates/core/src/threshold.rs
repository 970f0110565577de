//! Match-threshold selection.
//!
//! A hit requires the best normalized loss to clear a threshold. Three
//! policies exist: force-offload (learning phase), static per-level
//! per-bucket constants (fitted on the warm-up set or supplied in config),
//! and a small key-length-to-threshold MLP trained offline.

use rand::Rng;

use crate::autodiff::{add, backward, matvec, mean, mul, relu, sub, Adam, Tensor};
use crate::rng::{derive_seed, rng_from};
use crate::tensorfile::{TensorContainer, TensorFileError};

pub const MLP_HIDDEN: usize = 64;
/// Key lengths are scaled by this before entering the MLP.
const LENGTH_SCALE: f64 = 32.0;

/// Two-layer perceptron mapping a key length to a loss threshold.
/// With hidden size 64: 1*64 + 64 + 64*1 + 1 = 193 parameters.
pub struct ThresholdMlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    pub hidden: usize,
}

impl ThresholdMlp {
    pub fn seeded(seed: u64, hidden: usize) -> Self {
        let mut rng = rng_from(derive_seed(seed, "threshold-mlp"));
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        ThresholdMlp {
            w1: Tensor::leaf(vec![hidden, 1], draw(hidden, 1), true),
            b1: Tensor::leaf(vec![hidden], draw(hidden, 1), true),
            w2: Tensor::leaf(vec![1, hidden], draw(hidden, hidden), true),
            b2: Tensor::leaf(vec![1], draw(1, hidden), true),
            hidden,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn forward(&self, x: f64) -> Tensor {
        let input = Tensor::vector(vec![x / LENGTH_SCALE], false);
        let hidden = relu(&add(&matvec(&self.w1, &input), &self.b1));
        add(&matvec(&self.w2, &hidden), &self.b2)
    }

    /// Predicted threshold, clipped to be nonnegative.
    pub fn predict(&self, key_len: usize) -> f64 {
        self.forward(key_len as f64).scalar_value().max(0.0)
    }

    /// Regression fit of (key length, target threshold) pairs.
    pub fn fit(&mut self, samples: &[(usize, f64)], epochs: usize, lr: f64) {
        let params = self.params();
        let mut opt = Adam::new(&params, lr);
        for _ in 0..epochs {
            for p in &params {
                p.zero_grad();
            }
            let mut residuals = Vec::with_capacity(samples.len());
            for &(len, target) in samples {
                let out = self.forward(len as f64);
                let diff = sub(&out, &Tensor::vector(vec![target], false));
                residuals.push(mul(&diff, &diff));
            }
            let mut total = residuals[0].clone();
            for r in &residuals[1..] {
                total = add(&total, r);
            }
            let loss = mean(&total);
            backward(&loss).unwrap();
            opt.step(&params);
        }
    }

    pub fn mse(&self, samples: &[(usize, f64)]) -> f64 {
        samples
            .iter()
            .map(|&(len, target)| {
                let d = self.predict(len) - target;
                d * d
            })
            .sum::<f64>()
            / samples.len() as f64
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let put = |c: &mut TensorContainer, name: &str, t: &Tensor| {
            c.insert(
                name,
                t.shape().to_vec(),
                t.values().iter().map(|&x| x as f32).collect(),
            );
        };
        put(&mut c, "w1", &self.w1);
        put(&mut c, "b1", &self.b1);
        put(&mut c, "w2", &self.w2);
        put(&mut c, "b2", &self.b2);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, TensorFileError> {
        let grab = |name: &str| -> Result<Tensor, TensorFileError> {
            let t = c.get(name)?;
            Ok(Tensor::leaf(
                t.shape.clone(),
                t.data.iter().map(|&x| x as f64).collect(),
                true,
            ))
        };
        let w1 = grab("w1")?;
        let hidden = w1.shape()[0];
        Ok(ThresholdMlp {
            w1,
            b1: grab("b1")?,
            w2: grab("w2")?,
            b2: grab("b2")?,
            hidden,
        })
    }
}

/// The largest threshold that admits every positive while rejecting every
/// negative; when the classes overlap, the cut maximizing
/// (admitted positives - admitted negatives), preferring the smallest such
/// cut. Used both for static per-bucket constants and for MLP targets.
pub fn fit_threshold(positives: &[f64], negatives: &[f64]) -> f64 {
    let pos: Vec<f64> = positives
        .iter()
        .cloned()
        .filter(|x| x.is_finite())
        .collect();
    let neg: Vec<f64> = negatives
        .iter()
        .cloned()
        .filter(|x| x.is_finite())
        .collect();
    if pos.is_empty() {
        return 0.0;
    }
    let max_pos = pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if neg.is_empty() {
        return max_pos * 1.5 + 1e-6;
    }
    let min_neg = neg.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_pos < min_neg {
        return (max_pos + min_neg) / 2.0;
    }
    // overlapping classes: scan candidate cuts
    let mut candidates: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let score = |cut: f64| -> i64 {
        let tp = pos.iter().filter(|&&x| x <= cut).count() as i64;
        let fp = neg.iter().filter(|&&x| x <= cut).count() as i64;
        tp - fp
    };
    let mut best_cut = candidates[0];
    let mut best_score = score(best_cut);
    for &c in &candidates[1..] {
        let s = score(c);
        if s > best_score {
            best_score = s;
            best_cut = c;
        }
    }
    best_cut
}

/// Per-level, per-bucket static thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

impl ThresholdTable {
    pub fn uniform(buckets: usize, l1: f64, l2: f64) -> Self {
        ThresholdTable {
            l1: vec![l1; buckets],
            l2: vec![l2; buckets],
        }
    }
}

/// Active thresholding behavior of a device.
pub enum ThresholdPolicy {
    /// Never hit; every input goes to the cloud (learning phase).
    ForceOffload,
    Static(ThresholdTable),
    Mlp {
        l1: ThresholdMlp,
        l2: ThresholdMlp,
    },
}

impl ThresholdPolicy {
    pub fn l1_threshold(&self, bucket: usize, key_len: usize) -> f64 {
        match self {
            ThresholdPolicy::ForceOffload => f64::NEG_INFINITY,
            ThresholdPolicy::Static(t) => t.l1[bucket.min(t.l1.len() - 1)],
            ThresholdPolicy::Mlp { l1, .. } => l1.predict(key_len),
        }
    }

    pub fn l2_threshold(&self, bucket: usize, key_len: usize) -> f64 {
        match self {
            ThresholdPolicy::ForceOffload => f64::NEG_INFINITY,
            ThresholdPolicy::Static(t) => t.l2[bucket.min(t.l2.len() - 1)],
            ThresholdPolicy::Mlp { l2, .. } => l2.predict(key_len),
        }
    }
}
