//! Unsupervised neuron rankings.
//!
//! The cross-model score of a neuron is its best Pearson correlation with any
//! neuron of any other model trained for the same task, measured over a shared
//! evaluation corpus. The single-model baselines rank by variance and by mean
//! absolute distance from the neuron's mean.

use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ranking::{NeuronRanking, RankingMethod};

/// Whether scores use `|ρ|` or the signed coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum CorrelationMode {
    #[default]
    Absolute,
    Signed,
}

/// A trace centred on its mean, with its sum of squared deviations.
struct Centered {
    values: Array1<f64>,
    ss: f64,
}

impl Centered {
    fn new(x: ArrayView1<'_, f64>) -> Self {
        let mean = x.sum() / x.len() as f64;
        let values = x.mapv(|v| v - mean);
        let ss = values.iter().map(|v| v * v).sum();
        Self { values, ss }
    }

    fn correlation(&self, other: &Centered) -> f64 {
        if self.ss == 0.0 || other.ss == 0.0 {
            return 0.0;
        }
        let sxy: f64 = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum();
        (sxy / (self.ss * other.ss).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Pearson correlation of two equally long traces. A constant trace
/// correlates with nothing, so the result is 0 when either variance is 0.
pub fn pearson(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "traces have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two values"));
    }
    Ok(Centered::new(x).correlation(&Centered::new(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestMatch {
    pub model: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossModelScores {
    pub target: usize,
    pub mode: CorrelationMode,
    pub scores: Vec<f64>,
    pub best: Vec<BestMatch>,
}

impl CrossModelScores {
    /// Neurons by descending score, lower index first on ties.
    pub fn ranking(&self) -> NeuronRanking {
        let order = argsort_desc(&self.scores);
        NeuronRanking::new(order, RankingMethod::Crossmodel)
            .expect("argsort yields a permutation")
            .with_param("target", self.target)
            .with_param(
                "correlation",
                match self.mode {
                    CorrelationMode::Absolute => "absolute",
                    CorrelationMode::Signed => "signed",
                },
            )
    }

    /// Lines of `neuron_index score best_model best_neuron`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (j, (s, b)) in self.scores.iter().zip(&self.best).enumerate() {
            out.push_str(&format!("{j} {s} {} {}\n", b.model, b.neuron));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Indices sorted by value, descending; ties keep the lower index first.
pub(crate) fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Scores every neuron of `models[target]` against all neurons of the other
/// models. Each matrix is `tokens × neurons` over the same corpus.
///
/// The sweep is split across threads by target neuron; every pair is
/// accumulated in a fixed order, so the result does not depend on the number
/// of threads.
pub fn cross_model_scores(
    models: &[ArrayView2<'_, f64>],
    target: usize,
    mode: CorrelationMode,
) -> Result<CrossModelScores> {
    if models.len() < 2 {
        return Err(Error::invalid("cross-model scores need at least two models"));
    }
    if target >= models.len() {
        return Err(Error::invalid(format!(
            "target model {target} out of range for {} models",
            models.len()
        )));
    }
    let t = models[target].nrows();
    if let Some(m) = models.iter().find(|m| m.nrows() != t) {
        return Err(Error::Shape(format!(
            "models cover different corpora ({} vs {} tokens)",
            t,
            m.nrows()
        )));
    }
    if t < 2 {
        return Err(Error::invalid("correlation needs at least two tokens"));
    }
    let centered: Vec<Vec<Centered>> = models
        .par_iter()
        .map(|m| m.columns().into_iter().map(Centered::new).collect())
        .collect();
    let mine = &centered[target];
    let results: Vec<(f64, BestMatch)> = mine
        .par_iter()
        .map(|trace| {
            let mut best = f64::NEG_INFINITY;
            let mut at = BestMatch {
                model: usize::MAX,
                neuron: usize::MAX,
            };
            for (mi, other) in centered.iter().enumerate() {
                if mi == target {
                    continue;
                }
                for (nj, o) in other.iter().enumerate() {
                    let rho = trace.correlation(o);
                    let s = match mode {
                        CorrelationMode::Absolute => rho.abs(),
                        CorrelationMode::Signed => rho,
                    };
                    if s > best {
                        best = s;
                        at = BestMatch {
                            model: mi,
                            neuron: nj,
                        };
                    }
                }
            }
            (best, at)
        })
        .collect();
    if results.iter().any(|(_, b)| b.model == usize::MAX) {
        return Err(Error::invalid("other models have no neurons"));
    }
    let (scores, best) = results.into_iter().unzip();
    Ok(CrossModelScores {
        target,
        mode,
        scores,
        best,
    })
}

/// Population variance of every neuron (column).
pub fn neuron_variances(acts: ArrayView2<'_, f64>) -> Vec<f64> {
    acts.columns()
        .into_iter()
        .map(|c| Centered::new(c).ss / c.len() as f64)
        .collect()
}

/// Mean absolute deviation from the mean of every neuron (column).
pub fn neuron_mean_distances(acts: ArrayView2<'_, f64>) -> Vec<f64> {
    acts.columns()
        .into_iter()
        .map(|c| {
            let mean = c.sum() / c.len() as f64;
            c.iter().map(|v| (v - mean).abs()).sum::<f64>() / c.len() as f64
        })
        .collect()
}

/// Neurons by population variance, high to low.
pub fn rank_by_variance(acts: ArrayView2<'_, f64>) -> Result<NeuronRanking> {
    if acts.nrows() < 2 {
        return Err(Error::invalid("variance ranking needs at least two tokens"));
    }
    NeuronRanking::new(argsort_desc(&neuron_variances(acts)), RankingMethod::Variance)
}

/// Neurons by mean distance from their mean, high to low.
pub fn rank_by_mean_distance(acts: ArrayView2<'_, f64>) -> Result<NeuronRanking> {
    if acts.nrows() < 1 {
        return Err(Error::invalid("mean-distance ranking needs at least one token"));
    }
    NeuronRanking::new(
        argsort_desc(&neuron_mean_distances(acts)),
        RankingMethod::MeanDistance,
    )
}
