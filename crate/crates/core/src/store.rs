//! Token-aligned activation datasets and their on-disk formats.
//!
//! Activation files are JSON lines, one sentence per line:
//!
//! ```text
//! {"tokens": ["the", "cat"], "activations": [[0.1, -0.2], [0.3, 0.0]]}
//! ```
//!
//! An optional first line of the form `{"metadata": {"model": "..."}}` carries
//! free-form string metadata. The dimensionality is taken from the first token
//! in the file and enforced for every token after it.
//!
//! Label files are plain text with one sentence per line and tags separated by
//! spaces.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-token activation vectors for a corpus of sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    sentences: Vec<Vec<String>>,
    activations: Vec<Array2<f64>>,
    dim: usize,
    metadata: BTreeMap<String, String>,
}

impl ActivationDataset {
    /// Builds a dataset, checking token alignment, dimensionality and finiteness.
    pub fn new(
        sentences: Vec<Vec<String>>,
        activations: Vec<Array2<f64>>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        if sentences.len() != activations.len() {
            return Err(Error::Shape(format!(
                "{} sentences but {} activation blocks",
                sentences.len(),
                activations.len()
            )));
        }
        let dim = activations
            .iter()
            .find(|a| a.nrows() > 0)
            .map(|a| a.ncols())
            .ok_or_else(|| Error::invalid("dataset contains no tokens"))?;
        if dim == 0 {
            return Err(Error::invalid("activation vectors must be non-empty"));
        }
        for (s, (tokens, acts)) in sentences.iter().zip(&activations).enumerate() {
            if tokens.len() != acts.nrows() {
                return Err(Error::Shape(format!(
                    "sentence {} has {} tokens but {} activation vectors",
                    s + 1,
                    tokens.len(),
                    acts.nrows()
                )));
            }
            if acts.nrows() > 0 && acts.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    sentence: s + 1,
                    token: 1,
                    expected: dim,
                    found: acts.ncols(),
                });
            }
            for (t, row) in acts.rows().into_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        sentence: s + 1,
                        token: t + 1,
                    });
                }
            }
        }
        Ok(Self {
            sentences,
            activations,
            dim,
            metadata,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    pub fn tokens(&self, sentence: usize) -> &[String] {
        &self.sentences[sentence]
    }

    /// Activations of one sentence, shaped `tokens × dim`.
    pub fn sentence_activations(&self, sentence: usize) -> ArrayView2<'_, f64> {
        self.activations[sentence].view()
    }

    pub fn activations(&self) -> &[Array2<f64>] {
        &self.activations
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Iterates over `(token, activation)` pairs in corpus order.
    pub fn iter_tokens(&self) -> impl Iterator<Item = (&str, ArrayView1<'_, f64>)> {
        self.sentences
            .iter()
            .zip(&self.activations)
            .flat_map(|(toks, acts)| toks.iter().map(String::as_str).zip(acts.rows()))
    }

    /// All token activations stacked in corpus order, shaped `T × dim`.
    pub fn stacked(&self) -> Array2<f64> {
        let views: Vec<_> = self.activations.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("blocks share the dataset dimension")
    }

    /// Sub-dataset made of the given sentences, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            activations: indices.iter().map(|&i| self.activations[i].clone()).collect(),
            dim: self.dim,
            metadata: self.metadata.clone(),
        }
    }

    /// Applies `f` to every activation block. The closure must keep shapes.
    pub(crate) fn map_blocks(&self, mut f: impl FnMut(&mut Array2<f64>)) -> Self {
        let mut out = self.clone();
        for block in &mut out.activations {
            f(block);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        if !self.metadata.is_empty() {
            let header = MetadataLine {
                metadata: self.metadata.clone(),
            };
            serde_json::to_writer(&mut *w, &header)?;
            w.write_all(b"\n")?;
        }
        for (tokens, acts) in self.sentences.iter().zip(&self.activations) {
            let line = SentenceLineRef {
                tokens,
                activations: acts.rows().into_iter().map(|r| r.to_vec()).collect(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataLine {
    metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceLine {
    tokens: Vec<String>,
    activations: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SentenceLineRef<'a> {
    tokens: &'a [String],
    activations: Vec<Vec<f64>>,
}

/// Reads an activation file.
pub fn load_activations(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_activations(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_activations(reader: impl BufRead) -> Result<ActivationDataset> {
    let mut metadata = BTreeMap::new();
    let mut sentences = Vec::new();
    let mut blocks = Vec::new();
    let mut dim: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io("<activations>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if sentences.is_empty() && metadata.is_empty() && line.contains("\"metadata\"") {
            if let Ok(header) = serde_json::from_str::<MetadataLine>(&line) {
                metadata = header.metadata;
                continue;
            }
        }
        let parsed: SentenceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let sentence = sentences.len() + 1;
        if parsed.tokens.len() != parsed.activations.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "{} tokens but {} activation vectors",
                    parsed.tokens.len(),
                    parsed.activations.len()
                ),
            });
        }
        for (t, v) in parsed.activations.iter().enumerate() {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected || expected == 0 {
                return Err(Error::DimensionMismatch {
                    sentence,
                    token: t + 1,
                    expected,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    sentence,
                    token: t + 1,
                });
            }
        }
        let d = dim.unwrap_or(0);
        let flat: Vec<f64> = parsed.activations.into_iter().flatten().collect();
        let block = Array2::from_shape_vec((parsed.tokens.len(), d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        sentences.push(parsed.tokens);
        blocks.push(block);
    }
    let dim = dim.ok_or_else(|| Error::invalid("activation file contains no tokens"))?;
    // empty sentences were parsed with width 0; give them the dataset width
    for b in &mut blocks {
        if b.nrows() == 0 {
            *b = Array2::zeros((0, dim));
        }
    }
    ActivationDataset::new(sentences, blocks, metadata)
}

/// An activation dataset with one label per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    base: ActivationDataset,
    labels: Vec<Vec<usize>>,
    label_vocab: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        base: ActivationDataset,
        labels: Vec<Vec<usize>>,
        label_vocab: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != base.len() {
            return Err(Error::Shape(format!(
                "{} label sequences for {} sentences",
                labels.len(),
                base.len()
            )));
        }
        for (s, (ls, toks)) in labels.iter().zip(base.sentences()).enumerate() {
            if ls.len() != toks.len() {
                return Err(Error::Shape(format!(
                    "sentence {} has {} tokens but {} labels",
                    s + 1,
                    toks.len(),
                    ls.len()
                )));
            }
            if let Some(&bad) = ls.iter().find(|&&l| l >= label_vocab.len()) {
                return Err(Error::Shape(format!(
                    "label id {bad} out of range for vocabulary of {}",
                    label_vocab.len()
                )));
            }
        }
        Ok(Self {
            base,
            labels,
            label_vocab,
        })
    }

    /// Builds labels from string tags; the vocabulary is collected in
    /// first-occurrence order.
    pub fn from_tags(base: ActivationDataset, tags: Vec<Vec<String>>) -> Result<Self> {
        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let labels = tags
            .into_iter()
            .map(|line| {
                line.into_iter()
                    .map(|tag| {
                        *index.entry(tag.clone()).or_insert_with(|| {
                            vocab.push(tag);
                            vocab.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        Self::new(base, labels, vocab)
    }

    pub fn base(&self) -> &ActivationDataset {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.base.num_tokens()
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn label_vocab(&self) -> &[String] {
        &self.label_vocab
    }

    pub fn num_labels(&self) -> usize {
        self.label_vocab.len()
    }

    /// Token activations stacked `T × dim` together with the flat label ids.
    pub fn flatten(&self) -> (Array2<f64>, Vec<usize>) {
        (
            self.base.stacked(),
            self.labels.iter().flatten().copied().collect(),
        )
    }

    /// Re-expresses the labels against another vocabulary. Fails on any tag
    /// the target vocabulary does not contain.
    pub fn remap_labels(&self, vocab: &[String]) -> Result<Self> {
        if vocab == self.label_vocab.as_slice() {
            return Ok(self.clone());
        }
        let index: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mapping = self
            .label_vocab
            .iter()
            .map(|tag| {
                index
                    .get(tag.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownLabel(tag.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        // only tags that actually occur need a mapping
        let labels = self
            .labels
            .iter()
            .map(|ls| ls.iter().map(|&l| mapping[l]).collect())
            .collect();
        Ok(Self {
            base: self.base.clone(),
            labels,
            label_vocab: vocab.to_vec(),
        })
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            base: self.base.select(indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            label_vocab: self.label_vocab.clone(),
        }
    }

    pub(crate) fn with_base(&self, base: ActivationDataset) -> Self {
        Self {
            base,
            labels: self.labels.clone(),
            label_vocab: self.label_vocab.clone(),
        }
    }

    /// Writes the label file for this dataset.
    pub fn save_labels(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for ls in &self.labels {
            let line: Vec<&str> = ls.iter().map(|&l| self.label_vocab[l].as_str()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a label file and aligns it with `base`.
pub fn load_labels(path: impl AsRef<Path>, base: ActivationDataset) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, base)
}

pub fn parse_labels(text: &str, base: ActivationDataset) -> Result<LabeledDataset> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != base.len() {
        return Err(Error::Shape(format!(
            "label file has {} lines but the dataset has {} sentences",
            lines.len(),
            base.len()
        )));
    }
    let mut tags = Vec::with_capacity(lines.len());
    for (i, (line, toks)) in lines.iter().zip(base.sentences()).enumerate() {
        let line_tags: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if line_tags.len() != toks.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{} tags for {} tokens", line_tags.len(), toks.len()),
            });
        }
        tags.push(line_tags);
    }
    LabeledDataset::from_tags(base, tags)
}

/// Position label (`B`, `M` or `E`) of token `t` in a sentence of length `n`.
pub fn position_label(t: usize, n: usize) -> &'static str {
    debug_assert!(t < n);
    if n == 2 {
        return if t == 0 { "B" } else { "E" };
    }
    if t < n.div_ceil(3) {
        "B"
    } else if t >= n - n / 3 {
        "E"
    } else {
        "M"
    }
}

/// Labels every token with its position (beginning, middle or end) in its sentence.
pub fn auto_label_position(base: ActivationDataset) -> Result<LabeledDataset> {
    let mut tags = Vec::with_capacity(base.len());
    for (s, toks) in base.sentences().iter().enumerate() {
        if toks.is_empty() {
            return Err(Error::invalid(format!("sentence {} is empty", s + 1)));
        }
        let n = toks.len();
        tags.push((0..n).map(|t| position_label(t, n).to_owned()).collect());
    }
    LabeledDataset::from_tags(base, tags)
}

/// Accuracy of the per-word most-frequent-tag predictor. Words never seen in
/// `train` get the globally most frequent training tag. Ties go to the lower
/// label id.
pub fn majority_baseline(train: &LabeledDataset, test: &LabeledDataset) -> Result<f64> {
    if train.num_tokens() == 0 || test.num_tokens() == 0 {
        return Err(Error::invalid("majority baseline needs non-empty train and test"));
    }
    let nl = train.num_labels();
    let mut per_word: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut global = vec![0usize; nl];
    for (toks, ls) in train.base().sentences().iter().zip(train.labels()) {
        for (tok, &l) in toks.iter().zip(ls) {
            per_word.entry(tok.as_str()).or_insert_with(|| vec![0; nl])[l] += 1;
            global[l] += 1;
        }
    }
    let argmax = |counts: &[usize]| {
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        best
    };
    let fallback = argmax(&global);
    let predictions: HashMap<&str, usize> =
        per_word.iter().map(|(w, c)| (*w, argmax(c))).collect();

    let mut correct = 0usize;
    let mut total = 0usize;
    for (toks, ls) in test.base().sentences().iter().zip(test.labels()) {
        for (tok, &gold) in toks.iter().zip(ls) {
            let pred = predictions.get(tok.as_str()).copied().unwrap_or(fallback);
            if train.label_vocab()[pred] == test.label_vocab()[gold] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Partitions `0..n` into parts of sizes `floor(f * n)`, handing the remainder
/// out one by one to the earliest parts. Membership is decided by a seeded
/// shuffle; indices inside each part stay in ascending order.
pub fn partition_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() {
        return Err(Error::invalid("no split fractions given"));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {sum}, not 1")));
    }
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * n as f64).floor() as usize).min(n))
        .collect();
    let assigned: usize = sizes.iter().sum();
    if assigned > n {
        return Err(Error::invalid("split sizes exceed the number of items"));
    }
    let k = sizes.len();
    for slot in sizes.iter_mut().take(n - assigned) {
        *slot += 1;
    }
    // more remainder than parts cannot happen since each floor loses < 1
    debug_assert!(n - assigned <= k);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for size in sizes {
        let mut part = order[start..start + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += size;
    }
    Ok(parts)
}

/// Sentence-level random split.
pub fn split(data: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    Ok(partition_indices(data.len(), fractions, seed)?
        .iter()
        .map(|idx| data.select(idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn dataset(sentences: Vec<Vec<String>>, dim: usize) -> ActivationDataset {
        let mut k = 0.0;
        let acts = sentences
            .iter()
            .map(|s| {
                Array2::from_shape_fn((s.len(), dim), |_| {
                    k += 1.0;
                    k
                })
            })
            .collect();
        ActivationDataset::new(sentences, acts, BTreeMap::new()).unwrap()
    }

    #[test]
    fn reads_single_sentence() {
        let text = r#"{"tokens": ["a", "b"], "activations": [[1, 2, 3], [4, 5, 6.5]]}"#;
        let ds = read_activations(text.as_bytes()).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.num_tokens(), 2);
        assert_eq!(ds.sentence_activations(0), array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]]);
    }

    #[test]
    fn dimension_mismatch_names_sentence() {
        let text = concat!(
            r#"{"tokens": ["a"], "activations": [[1, 2, 3]]}"#,
            "\n",
            r#"{"tokens": ["b", "c"], "activations": [[1, 2, 3], [1, 2, 3, 4]]}"#,
            "\n"
        );
        match read_activations(text.as_bytes()) {
            Err(Error::DimensionMismatch {
                sentence, token, ..
            }) => {
                assert_eq!(sentence, 2);
                assert_eq!(token, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"tokens": ["a"], "activations": [[1]]}"#,
            "\n",
            "{not json\n"
        );
        match read_activations(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_number_is_rejected() {
        let text = r#"{"tokens": ["a"], "activations": [[1e999]]}"#;
        assert!(read_activations(text.as_bytes()).is_err());
    }

    #[test]
    fn metadata_header_round_trips() {
        let mut ds = dataset(vec![toks(&["x", "y"])], 2);
        ds.metadata_mut().insert("model".into(), "lm-0".into());
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = read_activations(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn labels_build_first_occurrence_vocab() {
        let ds = dataset(vec![toks(&["a", "b", "c"])], 1);
        let labeled = parse_labels("NN VB NN\n", ds).unwrap();
        assert_eq!(labeled.label_vocab(), ["NN", "VB"]);
        assert_eq!(labeled.labels(), [vec![0, 1, 0]]);
    }

    #[test]
    fn label_line_count_must_match() {
        let ds = dataset(vec![toks(&["a"]), toks(&["b"])], 1);
        let err = parse_labels("X\nY\nZ\n", ds).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn label_tag_count_must_match() {
        let ds = dataset(vec![toks(&["a", "b"])], 1);
        assert!(matches!(
            parse_labels("X\n", ds),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn two_sentence_labels() {
        let ds = dataset(vec![toks(&["a", "b"]), toks(&["c"])], 1);
        let labeled = parse_labels("DT NN\nVB\n", ds).unwrap();
        assert_eq!(labeled.num_labels(), 3);
    }

    #[test]
    fn position_thirds() {
        let labels = |n: usize| -> Vec<&str> { (0..n).map(|t| position_label(t, n)).collect() };
        assert_eq!(labels(9), ["B", "B", "B", "M", "M", "M", "E", "E", "E"]);
        assert_eq!(labels(1), ["B"]);
        assert_eq!(labels(2), ["B", "E"]);
        assert_eq!(labels(4), ["B", "B", "M", "E"]);
    }

    #[test]
    fn position_rejects_empty_sentence() {
        let ds = ActivationDataset::new(
            vec![toks(&["a"]), vec![]],
            vec![Array2::zeros((1, 2)), Array2::zeros((0, 2))],
            BTreeMap::new(),
        )
        .unwrap();
        assert!(auto_label_position(ds).is_err());
    }

    #[test]
    fn majority_uses_word_then_global_tag() {
        let train_ds = dataset(
            vec![toks(&["the", "dog", "runs"]), toks(&["the", "cat", "dog"])],
            1,
        );
        let train = parse_labels("DT NN VB\nDT NN NN\n", train_ds).unwrap();
        let test_ds = dataset(vec![toks(&["the", "zebra"])], 1);
        // unseen word gets NN, the most frequent training tag
        let test = parse_labels("DT NN\n", test_ds.clone()).unwrap();
        assert_eq!(majority_baseline(&train, &test).unwrap(), 1.0);
        let test = parse_labels("DT VB\n", test_ds).unwrap();
        assert_eq!(majority_baseline(&train, &test).unwrap(), 0.5);
    }

    #[test]
    fn split_sizes_and_identity() {
        let sents: Vec<_> = (0..9).map(|i| toks(&[&format!("w{i}")])).collect();
        let ds = dataset(sents, 1);
        let labeled = LabeledDataset::from_tags(ds.clone(), vec![vec!["X".into()]; 9]).unwrap();
        let parts = split(&labeled, &[1.0 / 3.0; 3], 7).unwrap();
        assert_eq!(
            parts.iter().map(LabeledDataset::len).collect::<Vec<_>>(),
            [3, 3, 3]
        );
        let again = split(&labeled, &[1.0 / 3.0; 3], 7).unwrap();
        assert_eq!(parts, again);
        let whole = split(&labeled, &[1.0], 7).unwrap();
        assert_eq!(whole, vec![labeled]);
    }

    #[test]
    fn split_remainder_goes_to_earliest_parts() {
        let parts = partition_indices(10, &[0.25, 0.25, 0.5], 1).unwrap();
        // floors are 2, 2, 5 and the leftover item goes to part 0
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), [3, 2, 5]);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(partition_indices(4, &[0.5, 0.4], 0).is_err());
        assert!(partition_indices(4, &[1.5, -0.5], 0).is_err());
        assert!(partition_indices(4, &[], 0).is_err());
    }
}
