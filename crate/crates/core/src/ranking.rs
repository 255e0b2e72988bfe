//! Neuron rankings derived from probe weights.
//!
//! For a single label, neurons are ordered by the absolute value of their
//! weight for that label, and the salient set at `p` percent is the shortest
//! prefix of that order whose absolute weights add up to at least `p` percent
//! of the label's total weight mass.
//!
//! The global ordering grows the percentage in steps of `alpha` and appends
//! the neurons that become salient for any label at each step. Neurons added
//! in the same step are ordered by their largest absolute weight over labels
//! (lower index first on ties); neurons that never become salient are
//! appended last in index order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeModel;

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMethod {
    Linguistic,
    Crossmodel,
    Variance,
    MeanDistance,
}

impl fmt::Display for RankingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingMethod::Linguistic => "linguistic",
            RankingMethod::Crossmodel => "crossmodel",
            RankingMethod::Variance => "variance",
            RankingMethod::MeanDistance => "mean_distance",
        })
    }
}

impl FromStr for RankingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linguistic" => Ok(RankingMethod::Linguistic),
            "crossmodel" => Ok(RankingMethod::Crossmodel),
            "variance" => Ok(RankingMethod::Variance),
            "mean_distance" => Ok(RankingMethod::MeanDistance),
            other => Err(Error::invalid(format!("unknown ranking method `{other}`"))),
        }
    }
}

/// A full ordering of the neurons `0..D`, most important first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronRanking {
    order: Vec<usize>,
    pub method: RankingMethod,
    pub params: BTreeMap<String, String>,
}

impl NeuronRanking {
    /// Fails unless `order` is a permutation of `0..order.len()`.
    pub fn new(order: Vec<usize>, method: RankingMethod) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!(
                    "ranking is not a permutation of 0..{} (offending index {i})",
                    order.len()
                )));
            }
        }
        Ok(Self {
            order,
            method,
            params: BTreeMap::new(),
        })
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    pub fn bottom(&self, k: usize) -> &[usize] {
        let n = self.order.len();
        &self.order[n - k.min(n)..]
    }

    pub fn reversed(&self) -> Self {
        let mut order = self.order.clone();
        order.reverse();
        Self {
            order,
            method: self.method,
            params: self.params.clone(),
        }
    }

    /// Text form: `# key=value` comment lines, then one index per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# method={}\n", self.method);
        for (k, v) in &self.params {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for i in &self.order {
            out.push_str(&format!("{i}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut method = None;
        let mut params = BTreeMap::new();
        let mut order = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    if k.trim() == "method" {
                        method = Some(v.trim().parse()?);
                    } else {
                        params.insert(k.trim().to_owned(), v.trim().to_owned());
                    }
                }
                continue;
            }
            order.push(line.parse::<usize>().map_err(|e| Error::Parse {
                line: n + 1,
                message: format!("bad neuron index `{line}`: {e}"),
            })?);
        }
        let mut ranking = Self::new(order, method.unwrap_or(RankingMethod::Linguistic))?;
        ranking.params = params;
        Ok(ranking)
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

/// Neurons sorted by `|w|` descending (lower index first on ties), with the
/// running sum of `|w|` along that order.
struct ColumnMass {
    order: Vec<usize>,
    cumulative: Vec<f64>,
}

impl ColumnMass {
    fn new(column: ArrayView1<'_, f64>) -> Self {
        let mut order: Vec<usize> = (0..column.len()).collect();
        order.sort_by(|&a, &b| column[b].abs().total_cmp(&column[a].abs()).then(a.cmp(&b)));
        let mut acc = 0.0;
        let cumulative = order
            .iter()
            .map(|&i| {
                acc += column[i].abs();
                acc
            })
            .collect();
        Self { order, cumulative }
    }

    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Length of the shortest prefix holding `p` percent of the mass.
    fn prefix_len(&self, p: f64) -> usize {
        let total = self.total();
        if total == 0.0 {
            return 0;
        }
        let threshold = p / 100.0 * total;
        (self.cumulative.partition_point(|&c| c < threshold) + 1).min(self.order.len())
    }

    fn salient(&self, p: f64) -> &[usize] {
        &self.order[..self.prefix_len(p)]
    }
}

fn check_percent(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentage {p} outside (0, 100]")));
    }
    Ok(())
}

fn check_label(model: &ProbeModel, label: usize) -> Result<()> {
    if label >= model.num_labels() {
        return Err(Error::invalid(format!(
            "label id {label} out of range for {} labels",
            model.num_labels()
        )));
    }
    Ok(())
}

/// Salient neurons of one weight column at `p` percent of its mass.
pub fn top_neurons_in_column(column: ArrayView1<'_, f64>, p: f64) -> Result<Vec<usize>> {
    check_percent(p)?;
    Ok(ColumnMass::new(column).salient(p).to_vec())
}

/// Salient neurons for `label` at `p` percent of that label's weight mass.
pub fn top_neurons_per_label(model: &ProbeModel, label: usize, p: f64) -> Result<Vec<usize>> {
    check_label(model, label)?;
    top_neurons_in_column(model.weights().column(label), p)
}

/// Global ordering of all neurons from a probe.
pub fn extract_ranking(model: &ProbeModel, alpha: f64) -> Result<NeuronRanking> {
    Ok(ranking_from_weights(model.weights(), alpha)?
        .with_param("alpha", alpha)
        .with_param("labels", model.num_labels()))
}

/// [`extract_ranking`] on a bare `dim × labels` weight matrix.
pub fn ranking_from_weights(weights: ArrayView2<'_, f64>, alpha: f64) -> Result<NeuronRanking> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let d = weights.nrows();
    let columns: Vec<ColumnMass> = weights.columns().into_iter().map(ColumnMass::new).collect();
    let peak: Vec<f64> = weights
        .map(|w| w.abs())
        .fold_axis(Axis(1), 0.0, |&m: &f64, &v| m.max(v))
        .to_vec();
    let mut placed = vec![false; d];
    let mut order = Vec::with_capacity(d);
    let mut reached = vec![0usize; columns.len()];
    let mut step = 1u64;
    loop {
        let p = (step as f64 * alpha).min(100.0);
        let mut fresh = Vec::new();
        for (col, seen) in columns.iter().zip(reached.iter_mut()) {
            let len = col.prefix_len(p);
            for &n in &col.order[*seen..len.max(*seen)] {
                if !placed[n] {
                    placed[n] = true;
                    fresh.push(n);
                }
            }
            *seen = (*seen).max(len);
        }
        fresh.sort_by(|&a, &b| peak[b].total_cmp(&peak[a]).then(a.cmp(&b)));
        order.extend(fresh);
        if p >= 100.0 {
            break;
        }
        step += 1;
    }
    order.extend((0..d).filter(|&n| !placed[n]));
    NeuronRanking::new(order, RankingMethod::Linguistic)
}

/// Number of salient neurons per label at `p` percent, in label-vocabulary order.
pub fn salient_count_per_label(model: &ProbeModel, p: f64) -> Result<Vec<(String, usize)>> {
    check_percent(p)?;
    Ok(model
        .weights()
        .columns()
        .into_iter()
        .zip(model.label_vocab())
        .map(|(col, label)| (label.clone(), ColumnMass::new(col).prefix_len(p)))
        .collect())
}

/// `|top_k(a) ∩ top_k(b)| / k`.
pub fn topk_overlap(a: &NeuronRanking, b: &NeuronRanking, k: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "rankings cover {} and {} neurons",
            a.dim(),
            b.dim()
        )));
    }
    if k == 0 || k > a.dim() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", a.dim())));
    }
    let mut in_a = vec![false; a.dim()];
    for &n in a.top(k) {
        in_a[n] = true;
    }
    let common = b.top(k).iter().filter(|&&n| in_a[n]).count();
    Ok(common as f64 / k as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SharedNeurons {
    pub labels: Vec<String>,
    /// Neurons salient for every listed label, in the first label's order.
    pub shared: Vec<usize>,
    /// Per label, the neurons salient for it and for none of the others.
    pub exclusive: Vec<Vec<usize>>,
}

/// Intersects the salient sets of several labels.
pub fn shared_neurons(model: &ProbeModel, labels: &[usize], p: f64) -> Result<SharedNeurons> {
    if labels.len() < 2 {
        return Err(Error::invalid("need at least two labels to compare"));
    }
    for (i, &l) in labels.iter().enumerate() {
        check_label(model, l)?;
        if labels[..i].contains(&l) {
            return Err(Error::invalid(format!("label id {l} listed twice")));
        }
    }
    let sets: Vec<Vec<usize>> = labels
        .iter()
        .map(|&l| top_neurons_per_label(model, l, p))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let mut hits = vec![0usize; d];
    for set in &sets {
        for &n in set {
            hits[n] += 1;
        }
    }
    let shared = sets[0]
        .iter()
        .copied()
        .filter(|&n| hits[n] == sets.len())
        .collect();
    let exclusive = sets
        .iter()
        .map(|set| set.iter().copied().filter(|&n| hits[n] == 1).collect())
        .collect();
    Ok(SharedNeurons {
        labels: labels
            .iter()
            .map(|&l| model.label_vocab()[l].clone())
            .collect(),
        shared,
        exclusive,
    })
}
