//! Synthetic datasets with known ground truth.
//!
//! These are used by the test suites and the demo pipeline: a labeled dataset
//! whose label information lives in a known handful of neurons, and groups of
//! "models" that share a known set of correlated neurons.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::store::{ActivationDataset, LabeledDataset};

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub dim: usize,
    pub classes: usize,
    pub planted: usize,
    pub train_tokens: usize,
    pub test_tokens: usize,
    /// Distance between adjacent class means on a planted neuron, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub sentence_len: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            dim: 100,
            classes: 5,
            planted: 10,
            train_tokens: 5000,
            test_tokens: 1000,
            separation: 2.0,
            sigma: 1.0,
            sentence_len: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Indices of the informative neurons, ascending.
    pub planted: Vec<usize>,
}

/// Class-conditional Gaussian activations on `planted` neurons, pure noise
/// elsewhere.
///
/// Planted neuron `k` puts the mean of class `c` at level `(c + k) mod classes`
/// of an evenly spaced, zero-centred ladder, so every class sees every level
/// equally often across neurons and adjacent levels are `separation * sigma`
/// apart.
pub fn planted(spec: &PlantedSpec) -> PlantedData {
    assert!(spec.planted <= spec.dim && spec.classes >= 2 && spec.sentence_len > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planted: Vec<usize> = sample(&mut rng, spec.dim, spec.planted).into_vec();
    planted.sort_unstable();
    let centre = (spec.classes as f64 - 1.0) / 2.0;
    let mut means = Array2::<f64>::zeros((spec.classes, spec.dim));
    for (k, &neuron) in planted.iter().enumerate() {
        for c in 0..spec.classes {
            let level = ((c + k) % spec.classes) as f64 - centre;
            means[[c, neuron]] = level * spec.separation * spec.sigma;
        }
    }
    let vocab: Vec<String> = (0..spec.classes).map(|c| format!("C{c}")).collect();
    let mut make = |tokens: usize| {
        let mut sentences = Vec::new();
        let mut blocks = Vec::new();
        let mut labels = Vec::new();
        let mut remaining = tokens;
        while remaining > 0 {
            let n = remaining.min(spec.sentence_len);
            remaining -= n;
            let ls: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
            let block = Array2::from_shape_fn((n, spec.dim), |(t, j)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                means[[ls[t], j]] + spec.sigma * noise
            });
            sentences.push(ls.iter().map(|&c| format!("w{c}")).collect());
            blocks.push(block);
            labels.push(ls);
        }
        let base = ActivationDataset::new(sentences, blocks, BTreeMap::new())
            .expect("generated dataset is well formed");
        LabeledDataset::new(base, labels, vocab.clone()).expect("labels are in range")
    };
    let train = make(spec.train_tokens);
    let test = make(spec.test_tokens);
    PlantedData {
        train,
        test,
        planted,
    }
}

/// Two classes in two neurons, split by the line `z0 + z1 = 0` with a margin of
/// at least 1.
pub fn separable_two_class(tokens: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..tokens).map(|i| i % 2).collect();
    let block = Array2::from_shape_fn((tokens, 2), |(t, _)| {
        let centre = if labels[t] == 0 { -1.0 } else { 1.0 };
        centre + rng.random_range(-0.5..0.5)
    });
    let sentence = labels.iter().map(|&l| format!("x{l}")).collect();
    let base = ActivationDataset::new(vec![sentence], vec![block], BTreeMap::new())
        .expect("generated dataset is well formed");
    LabeledDataset::new(base, vec![labels], vec!["neg".into(), "pos".into()])
        .expect("labels are in range")
}

#[derive(Debug, Clone)]
pub struct SharedSignalModels {
    /// One `tokens × dim` activation matrix per model.
    pub models: Vec<Array2<f64>>,
    /// For each model, the neuron indices carrying the shared signals, in
    /// signal order.
    pub shared: Vec<Vec<usize>>,
}

/// `n_models` activation matrices in which `n_shared` neurons per model follow
/// common corpus signals plus Gaussian noise of scale `noise`; every other
/// neuron is independent standard noise.
pub fn shared_signal_models(
    n_models: usize,
    dim: usize,
    tokens: usize,
    n_shared: usize,
    noise: f64,
    seed: u64,
) -> SharedSignalModels {
    assert!(n_shared <= dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signals: Vec<Array1<f64>> = (0..n_shared)
        .map(|_| Array1::from_shape_fn(tokens, |_| StandardNormal.sample(&mut rng)))
        .collect();
    let mut models = Vec::with_capacity(n_models);
    let mut shared = Vec::with_capacity(n_models);
    for _ in 0..n_models {
        let idx: Vec<usize> = sample(&mut rng, dim, n_shared).into_vec();
        let mut m = Array2::from_shape_fn((tokens, dim), |_| StandardNormal.sample(&mut rng));
        for (s, &j) in idx.iter().enumerate() {
            for t in 0..tokens {
                let e: f64 = StandardNormal.sample(&mut rng);
                m[[t, j]] = signals[s][t] + noise * e;
            }
        }
        models.push(m);
        shared.push(idx);
    }
    SharedSignalModels { models, shared }
}
