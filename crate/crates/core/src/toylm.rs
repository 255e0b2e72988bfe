//! A small LSTM language model for desk-scale experiments.
//!
//! Each sentence is modelled independently from a zero state: the inputs are
//! `<eos> w1 .. wn` and the targets `w1 .. wn <eos>`. The activation recorded
//! for word `wi` is the concatenation, over layers, of the hidden state `h`
//! right after the model has read `wi`.
//!
//! Ablation clamps selected hidden units to zero right after the cell emits
//! them, so the clamped value is what the next timestep, the next layer and
//! the output projection all see. Cell states are left alone.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{partition_indices, ActivationDataset};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Public-domain English prose (about 100k tokens, one sentence per line)
/// shipped with the crate so experiments run without downloads.
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

/// Sentences of whitespace-separated, lowercased tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Vec<String>>,
}

impl Corpus {
    /// One sentence per line; blank lines are skipped.
    pub fn from_text(text: &str) -> Self {
        let sentences = text
            .lines()
            .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        Self { sentences }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_CORPUS)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Word list with `<unk>` at id 0 and `<eos>` at id 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// The `cap - 2` most frequent words (ties broken alphabetically) plus the
    /// two special tokens.
    pub fn build(corpus: &Corpus, cap: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &corpus.sentences {
            for w in s {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut by_freq: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| *w != UNK && *w != EOS)
            .collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words = vec![UNK.to_owned(), EOS.to_owned()];
        words.extend(
            by_freq
                .into_iter()
                .take(cap.saturating_sub(2))
                .map(|(w, _)| w.to_owned()),
        );
        words.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn eos(&self) -> usize {
        1
    }

    /// Input and target ids for one sentence.
    pub fn encode(&self, sentence: &[String]) -> (Vec<usize>, Vec<usize>) {
        let ids: Vec<usize> = sentence.iter().map(|w| self.id(w)).collect();
        let mut inputs = Vec::with_capacity(ids.len() + 1);
        inputs.push(self.eos());
        inputs.extend_from_slice(&ids);
        let mut targets = ids;
        targets.push(self.eos());
        (inputs, targets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    /// Maximum vocabulary size, special tokens included.
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Truncated backpropagation length in timesteps.
    pub unroll: usize,
    /// Sentences per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Half-width of the uniform initialization range.
    pub init_range: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5000,
            embedding_dim: 64,
            hidden_dim: 64,
            layers: 2,
            unroll: 32,
            batch_size: 8,
            epochs: 5,
            learning_rate: 3e-3,
            grad_clip: 5.0,
            init_range: 0.1,
            seed: 42,
        }
    }
}

impl ToyLmConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 3
            || self.embedding_dim == 0
            || self.hidden_dim == 0
            || self.layers == 0
            || self.unroll == 0
            || self.batch_size == 0
        {
            return Err(Error::invalid(
                "language model dimensions, unroll and batch size must be positive (vocab >= 3)",
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Width of the extracted activation vectors.
    pub fn activation_dim(&self) -> usize {
        self.layers * self.hidden_dim
    }
}

/// One LSTM layer. `w` maps `[input, h_prev]` to the four gate
/// pre-activations laid out as `[input | forget | candidate | output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Params {
    embedding: Array2<f64>,
    layers: Vec<Layer>,
    out_w: Array2<f64>,
    out_b: Array1<f64>,
}

impl Params {
    fn init(cfg: &ToyLmConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let r = cfg.init_range;
        let mut uniform = |shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |_| rng.random_range(-r..r))
        };
        let h = cfg.hidden_dim;
        let embedding = uniform((vocab, cfg.embedding_dim));
        let layers = (0..cfg.layers)
            .map(|l| {
                let input = if l == 0 { cfg.embedding_dim } else { h };
                let w = uniform((input + h, 4 * h));
                let mut b = Array1::zeros(4 * h);
                b.slice_mut(s![h..2 * h]).fill(1.0);
                Layer { w, b }
            })
            .collect();
        let out_w = uniform((h, vocab));
        Self {
            embedding,
            layers,
            out_w,
            out_b: Array1::zeros(vocab),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
            out_w: Array2::zeros(self.out_w.raw_dim()),
            out_b: Array1::zeros(self.out_b.raw_dim()),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.embedding.as_slice().expect("standard layout")];
        for l in &self.layers {
            v.push(l.w.as_slice().expect("standard layout"));
            v.push(l.b.as_slice().expect("standard layout"));
        }
        v.push(self.out_w.as_slice().expect("standard layout"));
        v.push(self.out_b.as_slice().expect("standard layout"));
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            v.push(l.w.as_slice_mut().expect("standard layout"));
            v.push(l.b.as_slice_mut().expect("standard layout"));
        }
        v.push(self.out_w.as_slice_mut().expect("standard layout"));
        v.push(self.out_b.as_slice_mut().expect("standard layout"));
        v
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct CellCache {
    xh: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// One LSTM step for a batch. Returns `(h, c, cache)`.
fn cell_forward(
    layer: &Layer,
    x: ArrayView2<'_, f64>,
    h_prev: ArrayView2<'_, f64>,
    c_prev: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, CellCache) {
    let hd = h_prev.ncols();
    let xh = concatenate![Axis(1), x, h_prev];
    let mut z = xh.dot(&layer.w);
    z += &layer.b;
    let i = z.slice(s![.., 0..hd]).mapv(sigmoid);
    let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
    let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
    let o = z.slice(s![.., 3 * hd..4 * hd]).mapv(sigmoid);
    let c = &f * &c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let cache = CellCache {
        xh,
        i,
        f,
        g,
        o,
        c_prev: c_prev.to_owned(),
        tanh_c,
    };
    (h, c, cache)
}

/// Per-layer 0/1 multipliers applied to hidden states.
#[derive(Debug, Clone)]
struct ClampMask(Vec<Array1<f64>>);

impl ClampMask {
    fn new(cfg: &ToyLmConfig, clamp: &[usize]) -> Result<Self> {
        let h = cfg.hidden_dim;
        let mut masks = vec![Array1::ones(h); cfg.layers];
        for &u in clamp {
            if u >= cfg.activation_dim() {
                return Err(Error::invalid(format!(
                    "unit {u} out of range for {} hidden units",
                    cfg.activation_dim()
                )));
            }
            masks[u / h][u % h] = 0.0;
        }
        Ok(Self(masks))
    }
}

/// A trained (or freshly initialized) LSTM language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLm {
    config: ToyLmConfig,
    vocab: Vocab,
    params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Training perplexity accumulated over each epoch's batches.
    pub epoch_perplexities: Vec<f64>,
}

impl ToyLm {
    /// Randomly initialized model over `vocab`.
    pub fn new(config: ToyLmConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, vocab.len(), &mut rng);
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn activation_dim(&self) -> usize {
        self.config.activation_dim()
    }

    /// Output bias, i.e. the logits the model emits when every hidden unit is zero.
    pub fn output_bias(&self) -> ArrayView1<'_, f64> {
        self.params.out_b.view()
    }

    /// Overwrites the output projection and bias. Used to build reference models.
    pub fn set_output(&mut self, weights: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        if weights.raw_dim() != self.params.out_w.raw_dim() || bias.len() != self.vocab.len() {
            return Err(Error::Shape("output projection has the wrong shape".into()));
        }
        self.params.out_w = weights.as_standard_layout().into_owned();
        self.params.out_b = bias;
        Ok(())
    }

    /// L2 distance between the parameters of two models of identical shape.
    pub fn parameter_distance(&self, other: &ToyLm) -> Option<f64> {
        let (a, b) = (self.params.slices(), other.params.slices());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.len() != y.len()) {
            return None;
        }
        let ss: f64 = a
            .iter()
            .zip(&b)
            .flat_map(|(x, y)| x.iter().zip(y.iter()))
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        Some(ss.sqrt())
    }

    /// Runs one sentence from a zero state. `visit` receives the step index,
    /// the (clamped) hidden state of every layer and the output logits.
    fn run_sentence(
        &self,
        inputs: &[usize],
        mask: Option<&ClampMask>,
        mut visit: impl FnMut(usize, &[Array2<f64>], ArrayView1<'_, f64>),
    ) {
        let p = &self.params;
        let hd = self.config.hidden_dim;
        let mut hs: Vec<Array2<f64>> = vec![Array2::zeros((1, hd)); self.config.layers];
        let mut cs: Vec<Array2<f64>> = vec![Array2::zeros((1, hd)); self.config.layers];
        for (t, &id) in inputs.iter().enumerate() {
            let mut x = p.embedding.slice(s![id..id + 1, ..]).to_owned();
            for (l, layer) in p.layers.iter().enumerate() {
                let (mut h, c, _) = cell_forward(layer, x.view(), hs[l].view(), cs[l].view());
                if let Some(m) = mask {
                    h *= &m.0[l];
                }
                x = h.clone();
                hs[l] = h;
                cs[l] = c;
            }
            let mut logits = x.dot(&p.out_w);
            logits += &p.out_b;
            visit(t, &hs, logits.row(0));
        }
    }

    /// Summed negative log-likelihood and number of predicted tokens.
    fn sentence_nll(&self, sentence: &[String], mask: Option<&ClampMask>) -> (f64, usize) {
        let (inputs, targets) = self.vocab.encode(sentence);
        let mut nll = 0.0;
        self.run_sentence(&inputs, mask, |t, _, logits| {
            nll -= log_softmax_at(logits, targets[t]);
        });
        (nll, targets.len())
    }

    fn corpus_perplexity(&self, corpus: &Corpus, mask: Option<&ClampMask>) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::invalid("perplexity of an empty corpus"));
        }
        let parts: Vec<(f64, usize)> = corpus
            .sentences
            .par_iter()
            .map(|s| self.sentence_nll(s, mask))
            .collect();
        let (nll, n) = parts
            .iter()
            .fold((0.0, 0usize), |(a, c), (x, k)| (a + x, c + k));
        Ok((nll / n as f64).exp())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lm: ToyLm = serde_json::from_str(&text)?;
        lm.config.validate()?;
        Ok(lm)
    }
}

fn log_softmax_at(logits: ArrayView1<'_, f64>, target: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    logits[target] - max - z.ln()
}

/// `exp` of the mean per-token negative log-likelihood, `<eos>` included.
pub fn perplexity(lm: &ToyLm, corpus: &Corpus) -> Result<f64> {
    lm.corpus_perplexity(corpus, None)
}

/// Perplexity with the given hidden units (indices into the extracted
/// activation layout) forced to zero at every step.
pub fn ablate_model(lm: &ToyLm, corpus: &Corpus, clamp: &[usize]) -> Result<f64> {
    let mask = ClampMask::new(&lm.config, clamp)?;
    if clamp.is_empty() {
        return lm.corpus_perplexity(corpus, None);
    }
    lm.corpus_perplexity(corpus, Some(&mask))
}

/// Per-token hidden states of every layer, concatenated.
pub fn extract_activations(lm: &ToyLm, corpus: &Corpus) -> Result<ActivationDataset> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot extract activations from an empty corpus"));
    }
    let d = lm.activation_dim();
    let hd = lm.config.hidden_dim;
    let blocks: Vec<Array2<f64>> = corpus
        .sentences
        .par_iter()
        .map(|sentence| {
            let (inputs, _) = lm.vocab.encode(sentence);
            let mut block = Array2::zeros((sentence.len(), d));
            lm.run_sentence(&inputs, None, |t, hs, _| {
                if t == 0 {
                    return;
                }
                for (l, h) in hs.iter().enumerate() {
                    block
                        .slice_mut(s![t - 1, l * hd..(l + 1) * hd])
                        .assign(&h.row(0));
                }
            });
            block
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("model".to_owned(), "toylm".to_owned());
    meta.insert("layers".to_owned(), lm.config.layers.to_string());
    meta.insert("hidden_dim".to_owned(), hd.to_string());
    meta.insert("seed".to_owned(), lm.config.seed.to_string());
    ActivationDataset::new(corpus.sentences.clone(), blocks, meta)
}

/// A padded batch of sentences, `time × batch`.
struct Batch {
    inputs: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    valid: Vec<Vec<bool>>,
}

impl Batch {
    fn new(vocab: &Vocab, sentences: &[&Vec<String>]) -> Self {
        let encoded: Vec<_> = sentences.iter().map(|s| vocab.encode(s)).collect();
        let len = encoded.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let mut inputs = vec![vec![0; encoded.len()]; len];
        let mut targets = vec![vec![0; encoded.len()]; len];
        let mut valid = vec![vec![false; encoded.len()]; len];
        for (b, (inp, tgt)) in encoded.iter().enumerate() {
            for t in 0..inp.len() {
                inputs[t][b] = inp[t];
                targets[t][b] = tgt[t];
                valid[t][b] = true;
            }
        }
        Self {
            inputs,
            targets,
            valid,
        }
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }
}

struct StepCache {
    cells: Vec<CellCache>,
    h_top: Array2<f64>,
    dlogits: Array2<f64>,
}

/// Forward and backward over timesteps `range` of `batch`, starting from
/// `state` and leaving the final state in it. Returns the summed NLL, the
/// number of valid targets and the gradient of the mean NLL.
fn chunk_gradient(
    params: &Params,
    batch: &Batch,
    range: std::ops::Range<usize>,
    state: &mut (Vec<Array2<f64>>, Vec<Array2<f64>>),
) -> (f64, usize, Params) {
    let bsz = batch.inputs[0].len();
    let n_layers = params.layers.len();
    let hd = params.layers[0].b.len() / 4;
    let count: usize = range
        .clone()
        .map(|t| batch.valid[t].iter().filter(|v| **v).count())
        .sum();
    let scale = 1.0 / count.max(1) as f64;
    let mut nll = 0.0;
    let mut caches = Vec::with_capacity(range.len());

    for t in range.clone() {
        let mut x = params.embedding.select(Axis(0), &batch.inputs[t]);
        let mut cells = Vec::with_capacity(n_layers);
        for (l, layer) in params.layers.iter().enumerate() {
            let (h, c, cache) = cell_forward(layer, x.view(), state.0[l].view(), state.1[l].view());
            state.0[l] = h.clone();
            state.1[l] = c;
            cells.push(cache);
            x = h;
        }
        let mut dlogits = x.dot(&params.out_w);
        dlogits += &params.out_b;
        for (b, mut row) in dlogits.rows_mut().into_iter().enumerate() {
            if !batch.valid[t][b] {
                row.fill(0.0);
                continue;
            }
            let target = batch.targets[t][b];
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            nll -= (row[target] / z).ln();
            row.mapv_inplace(|v| v / z * scale);
            row[target] -= scale;
        }
        caches.push(StepCache {
            cells,
            h_top: x,
            dlogits,
        });
    }

    let mut grads = params.zeros_like();
    let mut dh_next: Vec<Array2<f64>> = vec![Array2::zeros((bsz, hd)); n_layers];
    let mut dc_next: Vec<Array2<f64>> = vec![Array2::zeros((bsz, hd)); n_layers];
    for (step, t) in caches.iter().zip(range).rev() {
        grads.out_w += &step.h_top.t().dot(&step.dlogits);
        grads.out_b += &step.dlogits.sum_axis(Axis(0));
        let mut dh_above = step.dlogits.dot(&params.out_w.t());
        for l in (0..n_layers).rev() {
            let cache = &step.cells[l];
            let layer = &params.layers[l];
            let dh = &dh_above + &dh_next[l];
            let d_o = &dh * &cache.tanh_c;
            let dc = &dh * &cache.o * &cache.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next[l];
            let d_i = &dc * &cache.g;
            let d_g = &dc * &cache.i;
            let d_f = &dc * &cache.c_prev;
            dc_next[l] = &dc * &cache.f;
            let mut dz = Array2::zeros((bsz, 4 * hd));
            dz.slice_mut(s![.., 0..hd])
                .assign(&(&d_i * &cache.i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., hd..2 * hd])
                .assign(&(&d_f * &cache.f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * hd..3 * hd])
                .assign(&(&d_g * &cache.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * hd..4 * hd])
                .assign(&(&d_o * &cache.o.mapv(|v| v * (1.0 - v))));
            grads.layers[l].w += &cache.xh.t().dot(&dz);
            grads.layers[l].b += &dz.sum_axis(Axis(0));
            let dxh = dz.dot(&layer.w.t());
            let input = layer.w.nrows() - hd;
            dh_next[l] = dxh.slice(s![.., input..]).to_owned();
            dh_above = dxh.slice(s![.., ..input]).to_owned();
        }
        for (b, &id) in batch.inputs[t].iter().enumerate() {
            let mut row = grads.embedding.row_mut(id);
            row += &dh_above.row(b);
        }
    }
    (nll, count, grads)
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
            }
        }
    }
}

fn clip_gradients(grads: &mut Params, max_norm: f64) {
    let norm = grads
        .slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Groups sentences into length-sorted mini-batches in a seeded random order.
fn make_batches(n_sentences: usize, lengths: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_sentences).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch * 16) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains a model on `corpus`, building the vocabulary from it.
pub fn train_lm(corpus: &Corpus, config: &ToyLmConfig) -> Result<(ToyLm, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train a language model on an empty corpus"));
    }
    config.validate()?;
    let vocab = Vocab::build(corpus, config.vocab_size);
    let mut lm = ToyLm::new(config.clone(), vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let mut adam = Adam {
        m: lm.params.zeros_like(),
        v: lm.params.zeros_like(),
        t: 0,
    };
    let lengths: Vec<usize> = corpus.sentences.iter().map(Vec::len).collect();
    let mut epoch_perplexities = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut nll, mut count) = (0.0, 0usize);
        for idx in make_batches(corpus.len(), &lengths, config.batch_size, &mut rng) {
            let sentences: Vec<&Vec<String>> = idx.iter().map(|&i| &corpus.sentences[i]).collect();
            let batch = Batch::new(&lm.vocab, &sentences);
            let zeros = Array2::zeros((sentences.len(), config.hidden_dim));
            let mut state = (vec![zeros.clone(); config.layers], vec![zeros; config.layers]);
            let mut start = 0;
            while start < batch.len() {
                let end = (start + config.unroll).min(batch.len());
                let (chunk_nll, n, mut grads) = chunk_gradient(&lm.params, &batch, start..end, &mut state);
                if !chunk_nll.is_finite() {
                    return Err(Error::Numerical(format!(
                        "language model loss diverged in epoch {}",
                        epoch + 1
                    )));
                }
                clip_gradients(&mut grads, config.grad_clip);
                adam.step(&mut lm.params, &grads, config.learning_rate);
                nll += chunk_nll;
                count += n;
                start = end;
            }
        }
        epoch_perplexities.push((nll / count as f64).exp());
    }
    Ok((lm, LmTrainReport { epoch_perplexities }))
}

#[derive(Debug, Clone)]
pub struct ModelTriple {
    pub models: Vec<ToyLm>,
    pub reports: Vec<LmTrainReport>,
    /// Sentence indices of each model's training third.
    pub parts: Vec<Vec<usize>>,
}

/// Three models with identical settings, trained on disjoint thirds of the
/// corpus with distinct seeds.
pub fn train_three_models(corpus: &Corpus, config: &ToyLmConfig) -> Result<ModelTriple> {
    if corpus.len() < 3 {
        return Err(Error::invalid("need at least three sentences to train three models"));
    }
    let parts = partition_indices(corpus.len(), &[1.0 / 3.0; 3], config.seed)?;
    let trained: Vec<(ToyLm, LmTrainReport)> = parts
        .par_iter()
        .enumerate()
        .map(|(i, part)| {
            let cfg = ToyLmConfig {
                seed: config.seed.wrapping_add(1 + i as u64),
                ..config.clone()
            };
            train_lm(&corpus.select(part), &cfg)
        })
        .collect::<Result<_>>()?;
    let (models, reports) = trained.into_iter().unzip();
    Ok(ModelTriple {
        models,
        reports,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ToyLmConfig {
        ToyLmConfig {
            vocab_size: 5,
            embedding_dim: 2,
            hidden_dim: 3,
            layers: 2,
            unroll: 32,
            batch_size: 2,
            epochs: 1,
            learning_rate: 1e-2,
            grad_clip: 5.0,
            init_range: 0.5,
            seed: 3,
        }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn total_loss(params: &Params, batch: &Batch, unroll: usize) -> f64 {
        let bsz = batch.inputs[0].len();
        let hd = params.layers[0].b.len() / 4;
        let zeros = Array2::zeros((bsz, hd));
        let mut state = (vec![zeros.clone(); params.layers.len()], vec![zeros; params.layers.len()]);
        let mut total = 0.0;
        let mut start = 0;
        while start < batch.len() {
            let end = (start + unroll).min(batch.len());
            let (nll, n, _) = chunk_gradient(params, batch, start..end, &mut state);
            total += nll / n as f64;
            start = end;
        }
        total
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let corpus = Corpus::from_text("a b c\nc b\n");
        let cfg = tiny_config();
        let vocab = Vocab::build(&corpus, cfg.vocab_size);
        assert_eq!(vocab.len(), 5);
        let lm = ToyLm::new(cfg, vocab).unwrap();
        // inputs: <eos> a b c (length 4) and <eos> c b (padded)
        let s: Vec<&Vec<String>> = corpus.sentences.iter().collect();
        let batch = Batch::new(&lm.vocab, &s);
        assert_eq!(batch.len(), 4);
        let zeros = Array2::zeros((2, 3));
        let mut state = (vec![zeros.clone(); 2], vec![zeros; 2]);
        let (_, _, grads) = chunk_gradient(&lm.params, &batch, 0..4, &mut state);

        let eps = 1e-5;
        let mut params = lm.params.clone();
        let n_tensors = params.slices().len();
        let mut worst: f64 = 0.0;
        for ti in 0..n_tensors {
            let len = params.slices()[ti].len();
            for k in 0..len {
                let orig = params.slices()[ti][k];
                params.slices_mut()[ti][k] = orig + eps;
                let up = total_loss(&params, &batch, 32);
                params.slices_mut()[ti][k] = orig - eps;
                let down = total_loss(&params, &batch, 32);
                params.slices_mut()[ti][k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.slices()[ti][k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn vocab_caps_and_unk() {
        let corpus = Corpus::from_text("the cat the dog\nthe cat\n");
        let v = Vocab::build(&corpus, 4);
        assert_eq!(v.len(), 4);
        assert_eq!(v.word(2), "the");
        assert_eq!(v.word(3), "cat");
        assert_eq!(v.id("dog"), 0);
        let (inp, tgt) = v.encode(&words("the dog"));
        assert_eq!(inp, [1, 2, 0]);
        assert_eq!(tgt, [2, 0, 1]);
    }

    #[test]
    fn clamp_mask_rejects_out_of_range() {
        let cfg = tiny_config();
        assert!(ClampMask::new(&cfg, &[6]).is_err());
        let m = ClampMask::new(&cfg, &[0, 4]).unwrap();
        assert_eq!(m.0[0].to_vec(), [0.0, 1.0, 1.0]);
        assert_eq!(m.0[1].to_vec(), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn output_distribution_sums_to_one() {
        let corpus = Corpus::from_text("a b c\nc b a a\n");
        let lm = ToyLm::new(tiny_config(), Vocab::build(&corpus, 5)).unwrap();
        let (inputs, _) = lm.vocab.encode(&corpus.sentences[1]);
        lm.run_sentence(&inputs, None, |_, _, logits| {
            let p = crate::probe::softmax(logits);
            assert!((p.sum() - 1.0).abs() < 1e-9);
        });
    }

    #[test]
    fn empty_corpus_errors() {
        let empty = Corpus::from_text("\n\n");
        assert!(train_lm(&empty, &tiny_config()).is_err());
        let lm = ToyLm::new(tiny_config(), Vocab::build(&Corpus::from_text("a"), 5)).unwrap();
        assert!(perplexity(&lm, &empty).is_err());
        assert!(extract_activations(&lm, &empty).is_err());
        assert!(train_three_models(&Corpus::from_text("a\nb\n"), &tiny_config()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let corpus = Corpus::from_text("a b c\n");
        let lm = ToyLm::new(tiny_config(), Vocab::build(&corpus, 5)).unwrap();
        let text = serde_json::to_string(&lm).unwrap();
        let back: ToyLm = serde_json::from_str(&text).unwrap();
        assert_eq!(back, lm);
    }
}
