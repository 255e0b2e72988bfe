//! Ranking validation by ablation: masking probe inputs, retraining probes on
//! neuron subsets, and clamping hidden units of a language model.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{evaluate, train_probe, ProbeConfig, ProbeModel};
use crate::ranking::NeuronRanking;
use crate::store::LabeledDataset;
pub use crate::toylm::ablate_model;
use crate::toylm::{Corpus, ToyLm};

/// Number of neurons that make up `percent` % of `dim`, never less than one.
pub fn percent_count(percent: f64, dim: usize) -> usize {
    ((percent * dim as f64 / 100.0).floor() as usize).clamp(1, dim.max(1))
}

fn keep_flags(dim: usize, keep: &[usize]) -> Result<Vec<bool>> {
    let mut flags = vec![false; dim];
    for &j in keep {
        if j >= dim {
            return Err(Error::invalid(format!(
                "neuron {j} out of range for dimension {dim}"
            )));
        }
        flags[j] = true;
    }
    Ok(flags)
}

/// Copy of `data` with every activation outside `keep` set to zero.
pub fn mask_dataset(data: &LabeledDataset, keep: &[usize]) -> Result<LabeledDataset> {
    let flags = keep_flags(data.dim(), keep)?;
    let base = data.base().map_blocks(|block| {
        for mut row in block.rows_mut() {
            for (v, &k) in row.iter_mut().zip(&flags) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    });
    Ok(data.with_base(base))
}

/// Accuracy of an already trained probe when the test inputs are masked.
pub fn evaluate_masked(model: &ProbeModel, test: &LabeledDataset, keep: &[usize]) -> Result<f64> {
    evaluate(model, &mask_dataset(test, keep)?)
}

/// Trains a fresh probe on the masked training set and scores it on the
/// equally masked test set.
pub fn retrain_subset(
    train: &LabeledDataset,
    test: &LabeledDataset,
    keep: &[usize],
    lambda1: f64,
    lambda2: f64,
    config: &ProbeConfig,
) -> Result<f64> {
    if keep.is_empty() {
        return Err(Error::invalid("retraining needs at least one kept neuron"));
    }
    let (model, _) = train_probe(&mask_dataset(train, keep)?, lambda1, lambda2, config)?;
    evaluate(&model, &mask_dataset(test, keep)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    TopFirst,
    BottomFirst,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TopFirst => "top",
            Direction::BottomFirst => "bottom",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" | "top-first" => Ok(Direction::TopFirst),
            "bottom" | "bottom-first" => Ok(Direction::BottomFirst),
            _ => Err(Error::invalid(format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Accuracy,
    Perplexity,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Perplexity => "perplexity",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "perplexity" => Ok(MetricKind::Perplexity),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

/// Something that can be scored with a set of neurons removed.
pub trait AblationEvaluator: Sync {
    fn dim(&self) -> usize;
    fn metric_kind(&self) -> MetricKind;
    /// Metric with the neurons in `ablated` zeroed.
    fn evaluate(&self, ablated: &[usize]) -> Result<f64>;
}

/// A trained probe scored on a test set with some inputs masked out.
pub struct MaskedProbeEvaluator<'a> {
    pub model: &'a ProbeModel,
    pub test: &'a LabeledDataset,
}

impl AblationEvaluator for MaskedProbeEvaluator<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn metric_kind(&self) -> MetricKind {
        MetricKind::Accuracy
    }

    fn evaluate(&self, ablated: &[usize]) -> Result<f64> {
        let flags = keep_flags(self.dim(), ablated)?;
        let keep: Vec<usize> = (0..self.dim()).filter(|&j| !flags[j]).collect();
        evaluate_masked(self.model, self.test, &keep)
    }
}

/// A language model scored by perplexity with hidden units clamped to zero.
pub struct ToyLmEvaluator<'a> {
    pub lm: &'a ToyLm,
    pub corpus: &'a Corpus,
}

impl AblationEvaluator for ToyLmEvaluator<'_> {
    fn dim(&self) -> usize {
        self.lm.activation_dim()
    }

    fn metric_kind(&self) -> MetricKind {
        MetricKind::Perplexity
    }

    fn evaluate(&self, ablated: &[usize]) -> Result<f64> {
        ablate_model(self.lm, self.corpus, ablated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub direction: Direction,
    pub metric_kind: MetricKind,
    /// `(neurons ablated, metric)` with strictly increasing counts.
    pub points: Vec<(usize, f64)>,
}

impl AblationCurve {
    /// `# direction=<d> metric=<m>` followed by `step,metric` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("# direction={} metric={}\n", self.direction, self.metric_kind);
        for (step, metric) in &self.points {
            out.push_str(&format!("{step},{metric}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, message: "empty curve file".into() })?;
        let mut direction = None;
        let mut metric_kind = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("direction", d)) => direction = Some(d.parse()?),
                Some(("metric", m)) => metric_kind = Some(m.parse()?),
                _ => {}
            }
        }
        let bad_header = || Error::Parse {
            line: 1,
            message: "expected `# direction=<d> metric=<m>`".into(),
        };
        let mut points = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
            points.push(parsed.ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `step,metric`, got `{line}`"),
            })?);
        }
        Ok(Self {
            direction: direction.ok_or_else(bad_header)?,
            metric_kind: metric_kind.ok_or_else(bad_header)?,
            points,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Ablates the first `step` neurons of `ranking` (from the top or the bottom)
/// for every entry of `steps` and records the evaluator's metric.
pub fn ablation_curve(
    ranking: &NeuronRanking,
    direction: Direction,
    steps: &[usize],
    evaluator: &dyn AblationEvaluator,
) -> Result<AblationCurve> {
    let dim = evaluator.dim();
    if ranking.dim() != dim {
        return Err(Error::Shape(format!(
            "ranking covers {} neurons, evaluator has {dim}",
            ranking.dim()
        )));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ablation steps must be strictly increasing"));
    }
    if let Some(&last) = steps.last() {
        if last > dim {
            return Err(Error::invalid(format!("step {last} exceeds dimension {dim}")));
        }
    }
    let metrics: Vec<f64> = steps
        .par_iter()
        .map(|&k| {
            let ablated = match direction {
                Direction::TopFirst => ranking.top(k),
                Direction::BottomFirst => ranking.bottom(k),
            };
            let m = evaluator.evaluate(ablated)?;
            if !m.is_finite() {
                return Err(Error::Numerical(format!("non-finite metric at step {k}")));
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(AblationCurve {
        direction,
        metric_kind: evaluator.metric_kind(),
        points: steps.iter().copied().zip(metrics).collect(),
    })
}
