//! Elastic-net regularized multinomial logistic regression probe.
//!
//! The probe is trained on frozen token activations to predict a per-token
//! property. Its objective is the negative log-likelihood of the gold labels
//! plus `lambda1 * |theta|_1 + lambda2 * |theta|_2^2`. The bias, when enabled,
//! is never regularized and never enters neuron rankings.
//!
//! Optimization is mini-batch Adam on the smooth part followed, every step, by
//! a soft-threshold proximal step for the L1 term. The threshold for each
//! weight uses that weight's own Adam step size, i.e. the proximal operator is
//! taken in the diagonal metric Adam preconditions with. This is what gives
//! exact zeros.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::LabeledDataset;

/// Operating point used throughout the original experiments.
pub const DEFAULT_LAMBDA: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fit an unregularized per-label bias.
    pub bias: bool,
    /// Z-score inputs with training-set statistics before the linear map.
    pub standardize: bool,
    /// Stop early once three consecutive epochs improve the objective by
    /// less than this amount.
    pub tolerance: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 10,
            seed: 42,
            bias: true,
            standardize: false,
            tolerance: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-neuron affine input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `dim × labels`
    weights: Array2<f64>,
    bias: Option<Array1<f64>>,
    label_vocab: Vec<String>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub config: ProbeConfig,
    standardizer: Option<Standardizer>,
}

impl ProbeModel {
    pub fn new(
        weights: Array2<f64>,
        bias: Option<Array1<f64>>,
        label_vocab: Vec<String>,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        if weights.ncols() != label_vocab.len() {
            return Err(Error::Shape(format!(
                "weights have {} columns for {} labels",
                weights.ncols(),
                label_vocab.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != label_vocab.len() {
                return Err(Error::Shape("bias length differs from label count".into()));
            }
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite probe weight".into()));
        }
        Ok(Self {
            weights,
            bias,
            label_vocab,
            lambda1,
            lambda2,
            config: ProbeConfig::default(),
            standardizer: None,
        })
    }

    /// A zero-initialized model for the given dimensionality and labels.
    pub fn zeros(dim: usize, label_vocab: Vec<String>, bias: bool) -> Self {
        let l = label_vocab.len();
        Self {
            weights: Array2::zeros((dim, l)),
            bias: bias.then(|| Array1::zeros(l)),
            label_vocab,
            lambda1: 0.0,
            lambda2: 0.0,
            config: ProbeConfig::default(),
            standardizer: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn bias(&self) -> Option<ArrayView1<'_, f64>> {
        self.bias.as_ref().map(|b| b.view())
    }

    pub fn label_vocab(&self) -> &[String] {
        &self.label_vocab
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_vocab.iter().position(|l| l == label)
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }

    /// Fraction of weights that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        let zeros = self.weights.iter().filter(|w| **w == 0.0).count();
        zeros as f64 / self.weights.len().max(1) as f64
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::Shape(format!(
                "model expects {}-dimensional activations, got {dim}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Logits for a batch of raw (unstandardized) inputs, `n × labels`.
    fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut logits = match &self.standardizer {
            Some(s) => {
                let mut xs = x.to_owned();
                s.apply(&mut xs);
                xs.dot(&self.weights)
            }
            None => x.dot(&self.weights),
        };
        if let Some(b) = &self.bias {
            logits += b;
        }
        logits
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&ProbeFile::from(self))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProbeFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProbeFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    dim: usize,
    label_vocab: Vec<String>,
    lambda1: f64,
    lambda2: f64,
    bias: Option<Vec<f64>>,
    /// Row-major `dim × labels`.
    weights: Vec<Vec<f64>>,
    config: ProbeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardizer: Option<Standardizer>,
}

impl From<&ProbeModel> for ProbeFile {
    fn from(m: &ProbeModel) -> Self {
        Self {
            dim: m.dim(),
            label_vocab: m.label_vocab.clone(),
            lambda1: m.lambda1,
            lambda2: m.lambda2,
            bias: m.bias.as_ref().map(|b| b.to_vec()),
            weights: m.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            config: m.config.clone(),
            standardizer: m.standardizer.clone(),
        }
    }
}

impl TryFrom<ProbeFile> for ProbeModel {
    type Error = Error;

    fn try_from(f: ProbeFile) -> Result<Self> {
        let l = f.label_vocab.len();
        if f.weights.len() != f.dim || f.weights.iter().any(|r| r.len() != l) {
            return Err(Error::Shape(format!(
                "weights are not {} x {l}",
                f.dim
            )));
        }
        let weights = Array2::from_shape_vec((f.dim, l), f.weights.concat())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut model = ProbeModel::new(
            weights,
            f.bias.map(Array1::from),
            f.label_vocab,
            f.lambda1,
            f.lambda2,
        )?;
        model.config = f.config;
        if let Some(s) = &f.standardizer {
            if s.mean.len() != f.dim || s.scale.len() != f.dim {
                return Err(Error::Shape("standardizer length differs from dim".into()));
            }
        }
        model.standardizer = f.standardizer;
        Ok(model)
    }
}

/// How the log-likelihood term is aggregated over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScale {
    /// `-sum_i log P(l_i | z_i)`, the objective exactly as written.
    Sum,
    /// Per-token mean of the negative log-likelihood. Training uses this form,
    /// so the regularization strengths do not depend on batch size.
    Mean,
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    /// Full regularized loss, including the L1 term.
    pub loss: f64,
    /// Gradient of the smooth part (NLL + L2) with respect to the weights.
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

/// Regularized loss and smooth-part gradient on a labeled batch.
pub fn loss_and_gradient(
    model: &ProbeModel,
    batch: &LabeledDataset,
    scale: LossScale,
) -> Result<LossGradient> {
    let batch = batch.remap_labels(model.label_vocab())?;
    let (x, y) = batch.flatten();
    batch_loss_and_gradient(model, x.view(), &y, scale)
}

/// Same as [`loss_and_gradient`] on a raw `n × dim` matrix and label ids.
pub fn batch_loss_and_gradient(
    model: &ProbeModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    scale: LossScale,
) -> Result<LossGradient> {
    if x.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if x.nrows() != labels.len() {
        return Err(Error::Shape("batch rows differ from label count".into()));
    }
    model.check_dim(x.ncols())?;
    if labels.iter().any(|&l| l >= model.num_labels()) {
        return Err(Error::Shape("label id out of range".into()));
    }
    let xs;
    let x = match &model.standardizer {
        Some(s) => {
            let mut owned = x.to_owned();
            s.apply(&mut owned);
            xs = owned;
            xs.view()
        }
        None => x,
    };
    let mut logits = x.dot(&model.weights);
    if let Some(b) = &model.bias {
        logits += b;
    }
    let (nll, mut residual) = softmax_nll(logits, labels);
    let factor = match scale {
        LossScale::Sum => 1.0,
        LossScale::Mean => 1.0 / labels.len() as f64,
    };
    residual.mapv_inplace(|r| r * factor);
    let mut grad_w = x.t().dot(&residual);
    grad_w.scaled_add(2.0 * model.lambda2, &model.weights);
    let grad_b = model.bias.as_ref().map(|_| residual.sum_axis(Axis(0)));
    let l1: f64 = model.weights.iter().map(|w| w.abs()).sum();
    let l2: f64 = model.weights.iter().map(|w| w * w).sum();
    Ok(LossGradient {
        loss: nll * factor + model.lambda1 * l1 + model.lambda2 * l2,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Turns logits into `softmax - onehot` in place and returns the summed NLL.
fn softmax_nll(mut logits: Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut nll = 0.0;
    for (mut row, &gold) in logits.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| v - max);
        let log_z = row.mapv(f64::exp).sum().ln();
        nll += log_z - row[gold];
        row.mapv_inplace(|v| (v - log_z).exp());
        row[gold] -= 1.0;
    }
    (nll, logits)
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut p = logits.mapv(|v| (v - max).exp());
    let z = p.sum();
    p /= z;
    p
}

/// Label distribution for one activation vector.
pub fn predict(model: &ProbeModel, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    model.check_dim(z.len())?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite input to predict"));
    }
    let logits = model.logits(z.insert_axis(Axis(0)));
    Ok(softmax(logits.row(0)))
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted label ids for a batch of activations.
pub fn predict_labels(model: &ProbeModel, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    model.check_dim(x.ncols())?;
    let logits = model.logits(x);
    Ok(logits.rows().into_iter().map(argmax).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Regularized objective on the full training set after each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub sparsity: f64,
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
    t: i32,
}

/// Soft-threshold operator `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Trains a probe on `train`. Deterministic given `config.seed`.
pub fn train_probe(
    train: &LabeledDataset,
    lambda1: f64,
    lambda2: f64,
    config: &ProbeConfig,
) -> Result<(ProbeModel, TrainReport)> {
    if train.num_tokens() == 0 {
        return Err(Error::invalid("cannot train a probe on an empty dataset"));
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
        return Err(Error::invalid("regularization strengths must be finite and >= 0"));
    }
    if config.batch_size == 0 || config.epochs == 0 || config.learning_rate <= 0.0 {
        return Err(Error::invalid("batch size, epochs and learning rate must be positive"));
    }
    let (mut x, y) = train.flatten();
    let mut model = ProbeModel::zeros(train.dim(), train.label_vocab().to_vec(), config.bias);
    model.lambda1 = lambda1;
    model.lambda2 = lambda2;
    model.config = config.clone();
    if config.standardize {
        let s = Standardizer::fit(x.view());
        s.apply(&mut x);
        model.standardizer = Some(s);
    }
    // x is already standardized; the inner loop runs on an unstandardized view
    let mut inner = model.clone();
    inner.standardizer = None;

    let (d, l) = (model.dim(), model.num_labels());
    let mut adam = Adam {
        m: Array2::zeros((d, l)),
        v: Array2::zeros((d, l)),
        mb: Array1::zeros(l),
        vb: Array1::zeros(l),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let g = batch_loss_and_gradient(&inner, xb.view(), &yb, LossScale::Mean)?;
            adam_step(&mut inner, &mut adam, &g, config);
        }
        let full = batch_loss_and_gradient(&inner, x.view(), &y, LossScale::Mean)?;
        if !full.loss.is_finite() || inner.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical(format!(
                "probe loss diverged at epoch {} (learning rate {})",
                epoch_losses.len() + 1,
                config.learning_rate
            )));
        }
        epoch_losses.push(full.loss);
        if let Some(tol) = config.tolerance {
            let n = epoch_losses.len();
            if n >= 4 && (n - 3..n).all(|i| epoch_losses[i - 1] - epoch_losses[i] < tol) {
                break;
            }
        }
    }

    model.weights = inner.weights;
    model.bias = inner.bias;
    let predicted = predict_labels(&model, train.base().stacked().view())?;
    let correct = predicted.iter().zip(&y).filter(|(p, g)| p == g).count();
    let report = TrainReport {
        epoch_losses,
        train_accuracy: correct as f64 / y.len() as f64,
        test_accuracy: None,
        sparsity: model.sparsity(),
    };
    Ok((model, report))
}

fn adam_step(model: &mut ProbeModel, adam: &mut Adam, g: &LossGradient, cfg: &ProbeConfig) {
    adam.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(adam.t);
    let bc2 = 1.0 - cfg.beta2.powi(adam.t);
    let lambda1 = model.lambda1;
    ndarray::Zip::from(&mut model.weights)
        .and(&mut adam.m)
        .and(&mut adam.v)
        .and(&g.weights)
        .for_each(|w, m, v, &gw| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gw;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gw * gw;
            let step = cfg.learning_rate / ((*v / bc2).sqrt() + cfg.epsilon);
            let moved = *w - step * (*m / bc1);
            *w = soft_threshold(moved, step * lambda1);
        });
    if let (Some(b), Some(gb)) = (model.bias.as_mut(), g.bias.as_ref()) {
        ndarray::Zip::from(b)
            .and(&mut adam.mb)
            .and(&mut adam.vb)
            .and(gb)
            .for_each(|b, m, v, &gb| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gb;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gb * gb;
                *b -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            });
    }
}

/// Number of correctly predicted tokens and total tokens.
pub(crate) fn count_correct(model: &ProbeModel, test: &LabeledDataset) -> Result<(usize, usize)> {
    model.check_dim(test.dim())?;
    let test = test.remap_labels(model.label_vocab())?;
    let base = test.base();
    let counts = (0..test.len())
        .into_par_iter()
        .map(|s| {
            let acts = base.sentence_activations(s);
            if acts.nrows() == 0 {
                return 0;
            }
            let logits = model.logits(acts);
            logits
                .rows()
                .into_iter()
                .zip(&test.labels()[s])
                .filter(|(row, &gold)| argmax(row.view()) == gold)
                .count()
        })
        .collect::<Vec<_>>();
    Ok((counts.iter().sum(), test.num_tokens()))
}

/// Token-level accuracy of argmax predictions.
pub fn evaluate(model: &ProbeModel, test: &LabeledDataset) -> Result<f64> {
    let (correct, total) = count_correct(model, test)?;
    if total == 0 {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub accuracy: f64,
    pub sparsity: f64,
}

/// Trains one probe per `(lambda1, lambda2)` pair and scores it on `heldout`.
/// Rows come back with `lambda1` as the outer loop.
pub fn grid_search(
    train: &LabeledDataset,
    heldout: &LabeledDataset,
    lambda1_values: &[f64],
    lambda2_values: &[f64],
    config: &ProbeConfig,
) -> Result<Vec<GridRow>> {
    if lambda1_values.is_empty() || lambda2_values.is_empty() {
        return Err(Error::invalid("grid search needs at least one value per lambda"));
    }
    let pairs: Vec<(f64, f64)> = lambda1_values
        .iter()
        .flat_map(|&a| lambda2_values.iter().map(move |&b| (a, b)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(l1, l2)| {
            let (model, _) = train_probe(train, l1, l2, config)?;
            Ok(GridRow {
                lambda1: l1,
                lambda2: l2,
                accuracy: evaluate(&model, heldout)?,
                sparsity: model.sparsity(),
            })
        })
        .collect()
}
