use ndarray::{Array1, Array2};
use serde_json::Value;

use neurank::ablation::ablate_model;
use neurank::store::partition_indices;
use neurank::toylm::{
    extract_activations, perplexity, train_lm, train_three_models, Corpus, ToyLm, ToyLmConfig,
    Vocab,
};

fn small_config() -> ToyLmConfig {
    ToyLmConfig {
        vocab_size: 40,
        embedding_dim: 6,
        hidden_dim: 5,
        layers: 2,
        epochs: 1,
        batch_size: 2,
        seed: 5,
        ..ToyLmConfig::default()
    }
}

fn sample_corpus() -> Corpus {
    Corpus::from_text(
        "the war is over\nwe must build a lasting peace\nthe peace is ours to keep\nwe will keep it\n",
    )
}

/// Plain nested-vector copy of the parameters, read back from the saved JSON.
struct RawParams {
    embedding: Vec<Vec<f64>>,
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    out_w: Vec<Vec<f64>>,
    out_b: Vec<f64>,
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    let dim: Vec<usize> = serde_json::from_value(v["dim"].clone()).unwrap();
    let data: Vec<f64> = serde_json::from_value(v["data"].clone()).unwrap();
    data.chunks(dim[1]).map(<[f64]>::to_vec).collect()
}

fn vector(v: &Value) -> Vec<f64> {
    serde_json::from_value(v["data"].clone()).unwrap()
}

fn raw_params(lm: &ToyLm) -> RawParams {
    let json: Value = serde_json::to_value(lm).unwrap();
    let p = &json["params"];
    RawParams {
        embedding: matrix(&p["embedding"]),
        layers: p["layers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| (matrix(&l["w"]), vector(&l["b"])))
            .collect(),
        out_w: matrix(&p["out_w"]),
        out_b: vector(&p["out_b"]),
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM forward over one sentence. Returns, per step, the hidden state
/// of each layer and the log-probabilities of the output distribution.
fn naive_forward(p: &RawParams, inputs: &[usize], hidden: usize) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    let n_layers = p.layers.len();
    let mut h = vec![vec![0.0; hidden]; n_layers];
    let mut c = vec![vec![0.0; hidden]; n_layers];
    let mut out = Vec::new();
    for &id in inputs {
        let mut x = p.embedding[id].clone();
        for l in 0..n_layers {
            let (w, b) = &p.layers[l];
            let xh: Vec<f64> = x.iter().chain(h[l].iter()).copied().collect();
            let gate = |g: usize, u: usize| {
                let col = g * hidden + u;
                b[col] + xh.iter().enumerate().map(|(r, v)| v * w[r][col]).sum::<f64>()
            };
            let mut new_h = vec![0.0; hidden];
            for u in 0..hidden {
                let (i, f, g, o) = (sig(gate(0, u)), sig(gate(1, u)), gate(2, u).tanh(), sig(gate(3, u)));
                c[l][u] = f * c[l][u] + i * g;
                new_h[u] = o * c[l][u].tanh();
            }
            h[l] = new_h.clone();
            x = new_h;
        }
        let logits: Vec<f64> = (0..p.out_b.len())
            .map(|v| p.out_b[v] + x.iter().enumerate().map(|(r, a)| a * p.out_w[r][v]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        out.push((h.clone(), logits.iter().map(|l| l - z.ln()).collect()));
    }
    out
}

fn unigram_perplexity(train: &Corpus, test: &Corpus, vocab: &Vocab) -> f64 {
    // add-one counts over the model vocabulary, <eos> counted once per sentence
    let mut counts = vec![1.0; vocab.len()];
    for s in &train.sentences {
        for w in s {
            counts[vocab.id(w)] += 1.0;
        }
        counts[vocab.eos()] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0.0);
    for s in &test.sentences {
        for id in s.iter().map(|w| vocab.id(w)).chain([vocab.eos()]) {
            nll -= (counts[id] / total).ln();
            n += 1.0;
        }
    }
    (nll / n).exp()
}

#[test]
fn extraction_matches_scalar_forward() {
    let corpus = sample_corpus();
    let (lm, _) = train_lm(&corpus, &small_config()).unwrap();
    let data = extract_activations(&lm, &corpus).unwrap();
    assert_eq!(data.dim(), 10);
    let raw = raw_params(&lm);
    for (s, sentence) in corpus.sentences.iter().enumerate() {
        let (inputs, _) = lm.vocab().encode(sentence);
        let steps = naive_forward(&raw, &inputs, 5);
        let acts = data.sentence_activations(s);
        for t in 0..sentence.len() {
            let (hs, _) = &steps[t + 1];
            for u in 0..10 {
                let want = hs[u / 5][u % 5];
                assert!((acts[[t, u]] - want).abs() < 1e-12, "sentence {s} token {t} unit {u}");
            }
        }
    }
}

#[test]
fn perplexity_matches_stepwise_likelihood() {
    // two sentences of four words, each followed by <eos>: 10 predictions
    let corpus = Corpus::from_text("we will keep it\nthe war is over\n");
    let train = sample_corpus();
    let (lm, _) = train_lm(&train, &small_config()).unwrap();
    let raw = raw_params(&lm);
    let mut nll = 0.0;
    let mut n = 0;
    for sentence in &corpus.sentences {
        let (inputs, targets) = lm.vocab().encode(sentence);
        for ((_, logp), &t) in naive_forward(&raw, &inputs, 5).iter().zip(&targets) {
            nll -= logp[t];
            n += 1;
        }
    }
    assert_eq!(n, 10);
    let want = (nll / n as f64).exp();
    let got = perplexity(&lm, &corpus).unwrap();
    assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
}

#[test]
fn uniform_output_has_perplexity_v() {
    let corpus = sample_corpus();
    let vocab = Vocab::build(&corpus, 40);
    let v = vocab.len();
    let mut lm = ToyLm::new(small_config(), vocab).unwrap();
    lm.set_output(Array2::zeros((5, v)), Array1::zeros(v)).unwrap();
    let ppl = perplexity(&lm, &corpus).unwrap();
    assert!((ppl - v as f64).abs() < 1e-9, "{ppl} vs {v}");
}

#[test]
fn clamping_everything_gives_context_free_readout() {
    let corpus = sample_corpus();
    let (lm, _) = train_lm(&corpus, &small_config()).unwrap();
    let all: Vec<usize> = (0..lm.activation_dim()).collect();
    let clamped = ablate_model(&lm, &corpus, &all).unwrap();

    let b = lm.output_bias();
    let log_z = b.iter().map(|v| v.exp()).sum::<f64>().ln();
    let (mut nll, mut n) = (0.0, 0.0);
    for s in &corpus.sentences {
        let (_, targets) = lm.vocab().encode(s);
        for t in targets {
            nll += log_z - b[t];
            n += 1.0;
        }
    }
    let want = (nll / n).exp();
    assert!((clamped - want).abs() <= 1e-12 * want, "{clamped} vs {want}");
}

#[test]
fn empty_clamp_is_exact_and_extraction_is_deterministic() {
    let corpus = sample_corpus();
    let (lm, _) = train_lm(&corpus, &small_config()).unwrap();
    let first = extract_activations(&lm, &corpus).unwrap();
    let second = extract_activations(&lm, &corpus).unwrap();
    assert_eq!(first, second);
    let base = perplexity(&lm, &corpus).unwrap();
    assert_eq!(ablate_model(&lm, &corpus, &[]).unwrap().to_bits(), base.to_bits());
    assert!(ablate_model(&lm, &corpus, &[10]).is_err());
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let corpus = sample_corpus();
    let (a, ra) = train_lm(&corpus, &small_config()).unwrap();
    let (b, rb) = train_lm(&corpus, &small_config()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.json");
    a.save(&path).unwrap();
    assert_eq!(ToyLm::load(&path).unwrap(), a);
}

#[test]
fn repeated_token_is_learned() {
    let line = vec!["a"; 200].join(" ");
    let corpus = Corpus::from_text(&line);
    let cfg = ToyLmConfig {
        epochs: 30,
        learning_rate: 1e-2,
        ..small_config()
    };
    let (lm, report) = train_lm(&corpus, &cfg).unwrap();
    let last = *report.epoch_perplexities.last().unwrap();
    assert!(last < 1.1, "training perplexity {last}");
    assert!(perplexity(&lm, &corpus).unwrap() < 1.1);
}

#[test]
fn random_tokens_stay_near_vocab_size() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let symbols: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    let mut text = String::new();
    for _ in 0..300 {
        let words: Vec<&str> = (0..20).map(|_| symbols[rng.random_range(0..10)].as_str()).collect();
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    let corpus = Corpus::from_text(&text);
    let parts = partition_indices(corpus.len(), &[0.8, 0.2], 1).unwrap();
    let (train, test) = (corpus.select(&parts[0]), corpus.select(&parts[1]));
    let cfg = ToyLmConfig {
        epochs: 2,
        ..small_config()
    };
    let (lm, _) = train_lm(&train, &cfg).unwrap();
    // 10 symbols plus a predictable-length <eos>; <unk> never occurs
    let ppl = perplexity(&lm, &test).unwrap();
    assert!(ppl > 9.0 && ppl < 12.5, "perplexity {ppl}");
}

#[test]
fn three_models_beat_unigram_on_bundled_text() {
    let corpus = Corpus::bundled();
    assert!(corpus.num_tokens() > 90_000);
    let parts = partition_indices(corpus.len(), &[0.9, 0.1], 42).unwrap();
    let (train, heldout) = (corpus.select(&parts[0]), corpus.select(&parts[1]));
    let cfg = ToyLmConfig {
        vocab_size: 2000,
        embedding_dim: 24,
        hidden_dim: 24,
        epochs: 4,
        ..ToyLmConfig::default()
    };
    let trio = train_three_models(&train, &cfg).unwrap();
    assert_eq!(trio.models.len(), 3);

    let mut seen = vec![false; train.len()];
    for part in &trio.parts {
        for &i in part {
            assert!(!seen[i], "sentence {i} used twice");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));

    for i in 0..3 {
        assert_eq!(trio.models[i].config().hidden_dim, 24);
        for j in i + 1..3 {
            assert_ne!(trio.models[i], trio.models[j]);
        }
        let third = train.select(&trio.parts[i]);
        let lm = &trio.models[i];
        let ppl = perplexity(lm, &heldout).unwrap();
        let unigram = unigram_perplexity(&third, &heldout, lm.vocab());
        let last = *trio.reports[i].epoch_perplexities.last().unwrap();
        assert!(last < lm.vocab().len() as f64);
        assert!(ppl < unigram, "model {i}: {ppl} vs unigram {unigram}");
    }
}
