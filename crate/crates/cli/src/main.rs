use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use neurank::ablation::{
    ablation_curve, evaluate_masked, percent_count, retrain_subset, Direction, ToyLmEvaluator,
};
use neurank::crossmodel::{cross_model_scores, rank_by_mean_distance, rank_by_variance, CorrelationMode};
use neurank::probe::{evaluate, train_probe, ProbeConfig, ProbeModel};
use neurank::ranking::{extract_ranking, salient_count_per_label, shared_neurons, topk_overlap};
use neurank::report::{heatmap, summary_report, top_words_for_neuron, Analysis, HeatmapFormat};
use neurank::store::{auto_label_position, load_activations, load_labels, partition_indices, LabeledDataset};
use neurank::toylm::{extract_activations, train_lm, train_three_models, Corpus, ToyLm, ToyLmConfig};
use neurank::{Error, NeuronRanking, Result};

#[derive(Debug, Parser)]
#[command(name = "neurank", version, about = "Find and rank the neurons that carry information in sequence models")]
struct Cli {
    /// Seed for every random choice (shuffling, initialization, splits).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Do not print the resolved configuration or progress.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an elastic-net probe on labeled activations.
    ProbeTrain(ProbeTrain),
    /// Score a probe on labeled activations.
    ProbeEval(ProbeEval),
    /// Rank neurons from probe weights or activation statistics.
    Rank(Rank),
    /// Rank one model's neurons by their best match in other models.
    RankCross(RankCross),
    /// Accuracy of a trained probe with all but the top or bottom neurons masked.
    AblateMask(AblateMask),
    /// Accuracy of probes retrained on the top or bottom neurons only.
    AblateRetrain(AblateRetrain),
    /// Train one or three toy LSTM language models.
    LmTrain(LmTrain),
    /// Write per-token hidden states of a language model.
    LmExtract(LmExtract),
    /// Perplexity curve while clamping ranked hidden units to zero.
    LmAblate(LmAblate),
    /// Analyses of probes, rankings and activations.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Write a summary report directory.
    Report(Report),
}

#[derive(Debug, Args)]
struct LabeledInput {
    /// Activation file (JSON lines).
    #[arg(long)]
    activations: PathBuf,
    /// Label file, one line of tags per sentence.
    #[arg(long, required_unless_present = "position_labels")]
    labels: Option<PathBuf>,
    /// Label tokens by sentence position (B/M/E) instead of reading a label file.
    #[arg(long, conflicts_with = "labels")]
    position_labels: bool,
}

impl LabeledInput {
    fn load(&self) -> Result<LabeledDataset> {
        let base = load_activations(&self.activations)?;
        match &self.labels {
            Some(path) => load_labels(path, base),
            None => auto_label_position(base),
        }
    }
}

#[derive(Debug, Args)]
struct ProbeOptions {
    #[arg(long, default_value_t = neurank::probe::DEFAULT_LAMBDA)]
    l1: f64,
    #[arg(long, default_value_t = neurank::probe::DEFAULT_LAMBDA)]
    l2: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Z-score features before training.
    #[arg(long)]
    standardize: bool,
    /// Train without a bias term.
    #[arg(long)]
    no_bias: bool,
}

impl ProbeOptions {
    fn config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            bias: !self.no_bias,
            standardize: self.standardize,
            ..ProbeConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct ProbeTrain {
    #[command(flatten)]
    input: LabeledInput,
    #[command(flatten)]
    probe: ProbeOptions,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeEval {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: LabeledInput,
    /// Output file (JSON with accuracy and token count).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RankBy {
    Linguistic,
    Variance,
    MeanDistance,
}

#[derive(Debug, Args)]
struct Rank {
    #[arg(long, value_enum, default_value_t = RankBy::Linguistic)]
    method: RankBy,
    /// Probe model (linguistic ranking).
    #[arg(long, required_if_eq("method", "linguistic"))]
    model: Option<PathBuf>,
    /// Activation file (variance and mean-distance rankings).
    #[arg(long, required_if_eq_any([("method", "variance"), ("method", "mean-distance")]))]
    activations: Option<PathBuf>,
    /// Percentage step of the weight-mass sweep.
    #[arg(long, default_value_t = neurank::ranking::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RankCross {
    /// Activation files of two or more models over the same corpus.
    #[arg(long, num_args = 2.., required = true)]
    activations: Vec<PathBuf>,
    /// Index of the model whose neurons are ranked.
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Use the signed correlation instead of its absolute value.
    #[arg(long)]
    signed: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-neuron scores and best matches.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateMask {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: LabeledInput,
    #[arg(long)]
    ranking: PathBuf,
    /// Percentages of neurons to keep.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 15.0, 20.0])]
    percent: Vec<f64>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateRetrain {
    #[arg(long)]
    train_activations: PathBuf,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long)]
    test_activations: PathBuf,
    #[arg(long)]
    test_labels: PathBuf,
    #[arg(long)]
    ranking: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 15.0, 20.0])]
    percent: Vec<f64>,
    #[command(flatten)]
    probe: ProbeOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CorpusInput {
    /// Plain-text corpus, one sentence per line.
    #[arg(long, required_unless_present = "bundled_corpus")]
    corpus: Option<PathBuf>,
    /// Use the corpus shipped with the library.
    #[arg(long, conflicts_with = "corpus")]
    bundled_corpus: bool,
}

impl CorpusInput {
    fn load(&self) -> Result<Corpus> {
        match &self.corpus {
            Some(p) => Corpus::load(p),
            None => Ok(Corpus::bundled()),
        }
    }
}

#[derive(Debug, Args)]
struct LmTrain {
    #[command(flatten)]
    corpus: CorpusInput,
    /// Number of models: 1, or 3 trained on disjoint thirds.
    #[arg(long, default_value_t = 1, value_parser = parse_model_count)]
    models: usize,
    /// Fraction of sentences held out before training.
    #[arg(long, requires = "holdout_out")]
    holdout: Option<f64>,
    /// Where to write the held-out sentences.
    #[arg(long, requires = "holdout")]
    holdout_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    unroll: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    learning_rate: f64,
    /// Directory for model_<i>.json and train_report.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct LmExtract {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusInput,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Top,
    Bottom,
}

#[derive(Debug, Args)]
struct LmAblate {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusInput,
    #[arg(long)]
    ranking: PathBuf,
    #[arg(long, value_enum)]
    direction: DirectionArg,
    /// Numbers of clamped units, strictly increasing.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 20])]
    steps: Vec<usize>,
    /// Output curve file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Analyze {
    /// Number of salient neurons per label.
    SalientCounts {
        #[arg(long)]
        model: PathBuf,
        /// Percentage of each label's weight mass.
        #[arg(long, default_value_t = 25.0)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Neurons salient for all of the given labels, and for each one alone.
    Shared {
        #[arg(long)]
        model: PathBuf,
        /// Label names, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        labels: Vec<String>,
        #[arg(long, default_value_t = 25.0)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise top-k overlap between rankings.
    Overlap {
        #[arg(long, num_args = 2.., required = true)]
        rankings: Vec<PathBuf>,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Words with the strongest mean |activation| for a neuron.
    TopWords {
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        neuron: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = neurank::report::DEFAULT_MIN_COUNT)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One sentence coloured by one neuron's activations.
    Heatmap {
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        sentence: usize,
        #[arg(long)]
        neuron: usize,
        #[arg(long, value_enum, default_value_t = FormatArg::Html)]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Html,
}

#[derive(Debug, Args)]
struct Report {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1..)]
    rankings: Vec<PathBuf>,
    /// Ablation curves as name=path.
    #[arg(long, num_args = 1..)]
    curves: Vec<String>,
    /// Weight-mass percentages for salient-count tables.
    #[arg(long, value_delimiter = ',')]
    salient_p: Vec<f64>,
    /// k values for overlap matrices.
    #[arg(long, value_delimiter = ',')]
    overlap_k: Vec<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn percents_to_counts(percent: &[f64], dim: usize) -> Result<Vec<(f64, usize)>> {
    percent
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::InvalidArgument(format!("percentage {p} outside (0, 100]")));
            }
            Ok((p, percent_count(p, dim)))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    let say = |msg: &str| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::ProbeTrain(a) => {
            let data = a.input.load()?;
            say(&format!(
                "{} sentences, {} tokens, {} neurons, {} labels",
                data.len(),
                data.num_tokens(),
                data.dim(),
                data.num_labels()
            ));
            let (model, report) = train_probe(&data, a.probe.l1, a.probe.l2, &a.probe.config(seed))?;
            say(&format!(
                "train accuracy {:.4}, sparsity {:.4}",
                report.train_accuracy, report.sparsity
            ));
            model.save(&a.out)?;
            if let Some(path) = &a.report {
                write_file(path, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            }
        }
        Command::ProbeEval(a) => {
            let model = ProbeModel::load(&a.model)?;
            let data = a.input.load()?;
            let acc = evaluate(&model, &data)?;
            say(&format!("accuracy {acc:.4}"));
            let record = serde_json::json!({"accuracy": acc, "tokens": data.num_tokens()});
            write_file(&a.out, &format!("{record:#}\n"))?;
        }
        Command::Rank(a) => {
            let ranking = match a.method {
                RankBy::Linguistic => {
                    let model = ProbeModel::load(a.model.as_ref().expect("required by clap"))?;
                    extract_ranking(&model, a.alpha)?
                }
                RankBy::Variance | RankBy::MeanDistance => {
                    let data = load_activations(a.activations.as_ref().expect("required by clap"))?;
                    let acts = data.stacked();
                    if matches!(a.method, RankBy::Variance) {
                        rank_by_variance(acts.view())?
                    } else {
                        rank_by_mean_distance(acts.view())?
                    }
                }
            };
            ranking.save(&a.out)?;
        }
        Command::RankCross(a) => {
            let data = a
                .activations
                .iter()
                .map(load_activations)
                .collect::<Result<Vec<_>>>()?;
            let stacked: Vec<_> = data.iter().map(|d| d.stacked()).collect();
            let views: Vec<_> = stacked.iter().map(|m| m.view()).collect();
            let mode = if a.signed { CorrelationMode::Signed } else { CorrelationMode::Absolute };
            let scores = cross_model_scores(&views, a.target, mode)?;
            scores.ranking().save(&a.out)?;
            if let Some(path) = &a.scores {
                scores.save(path)?;
            }
        }
        Command::AblateMask(a) => {
            let model = ProbeModel::load(&a.model)?;
            let test = a.input.load()?;
            let ranking = NeuronRanking::load(&a.ranking)?;
            let all = evaluate(&model, &test)?;
            let mut csv = String::from("percent,neurons,keep_top,keep_bottom\n");
            let _ = writeln!(csv, "100,{},{all},{all}", model.dim());
            for (p, k) in percents_to_counts(&a.percent, model.dim())? {
                let top = evaluate_masked(&model, &test, ranking.top(k))?;
                let bottom = evaluate_masked(&model, &test, ranking.bottom(k))?;
                say(&format!("{p}% ({k} neurons): top {top:.4}, bottom {bottom:.4}"));
                let _ = writeln!(csv, "{p},{k},{top},{bottom}");
            }
            write_file(&a.out, &csv)?;
        }
        Command::AblateRetrain(a) => {
            let train = load_labels(&a.train_labels, load_activations(&a.train_activations)?)?;
            let test = load_labels(&a.test_labels, load_activations(&a.test_activations)?)?;
            let ranking = NeuronRanking::load(&a.ranking)?;
            let cfg = a.probe.config(seed);
            let (l1, l2) = (a.probe.l1, a.probe.l2);
            let (model, _) = train_probe(&train, l1, l2, &cfg)?;
            let all = evaluate(&model, &test)?;
            let mut csv = String::from("percent,neurons,keep_top,keep_bottom\n");
            let _ = writeln!(csv, "100,{},{all},{all}", train.dim());
            for (p, k) in percents_to_counts(&a.percent, train.dim())? {
                let top = retrain_subset(&train, &test, ranking.top(k), l1, l2, &cfg)?;
                let bottom = retrain_subset(&train, &test, ranking.bottom(k), l1, l2, &cfg)?;
                say(&format!("{p}% ({k} neurons): top {top:.4}, bottom {bottom:.4}"));
                let _ = writeln!(csv, "{p},{k},{top},{bottom}");
            }
            write_file(&a.out, &csv)?;
        }
        Command::LmTrain(a) => {
            let mut corpus = a.corpus.load()?;
            if let (Some(frac), Some(path)) = (a.holdout, &a.holdout_out) {
                if !(frac > 0.0 && frac < 1.0) {
                    return Err(Error::InvalidArgument(format!("holdout fraction {frac} outside (0, 1)")));
                }
                let parts = partition_indices(corpus.len(), &[1.0 - frac, frac], seed)?;
                write_file(path, &corpus.select(&parts[1]).to_text())?;
                corpus = corpus.select(&parts[0]);
            }
            let config = ToyLmConfig {
                vocab_size: a.vocab_size,
                embedding_dim: a.embedding_dim,
                hidden_dim: a.hidden_dim,
                layers: a.layers,
                unroll: a.unroll,
                batch_size: a.batch_size,
                epochs: a.epochs,
                learning_rate: a.learning_rate,
                seed,
                ..ToyLmConfig::default()
            };
            say(&format!("training {} model(s) on {} sentences", a.models, corpus.len()));
            let (models, reports) = if a.models == 3 {
                let trio = train_three_models(&corpus, &config)?;
                (trio.models, trio.reports)
            } else {
                let (lm, report) = train_lm(&corpus, &config)?;
                (vec![lm], vec![report])
            };
            create_dir(&a.out_dir)?;
            let mut csv = String::from("model,epoch,perplexity\n");
            for (i, (lm, report)) in models.iter().zip(&reports).enumerate() {
                lm.save(a.out_dir.join(format!("model_{i}.json")))?;
                for (e, ppl) in report.epoch_perplexities.iter().enumerate() {
                    let _ = writeln!(csv, "{i},{},{ppl}", e + 1);
                }
                say(&format!(
                    "model {i}: final training perplexity {:.2}",
                    report.epoch_perplexities.last().copied().unwrap_or(f64::NAN)
                ));
            }
            write_file(&a.out_dir.join("train_report.csv"), &csv)?;
        }
        Command::LmExtract(a) => {
            let lm = ToyLm::load(&a.model)?;
            let corpus = a.corpus.load()?;
            extract_activations(&lm, &corpus)?.save(&a.out)?;
        }
        Command::LmAblate(a) => {
            let lm = ToyLm::load(&a.model)?;
            let corpus = a.corpus.load()?;
            let ranking = NeuronRanking::load(&a.ranking)?;
            let direction = match a.direction {
                DirectionArg::Top => Direction::TopFirst,
                DirectionArg::Bottom => Direction::BottomFirst,
            };
            let eval = ToyLmEvaluator { lm: &lm, corpus: &corpus };
            let curve = ablation_curve(&ranking, direction, &a.steps, &eval)?;
            for (k, ppl) in &curve.points {
                say(&format!("{direction} {k}: perplexity {ppl:.3}"));
            }
            curve.save(&a.out)?;
        }
        Command::Analyze(kind) => analyze(kind)?,
        Command::Report(a) => {
            let model = ProbeModel::load(&a.model)?;
            let rankings = a
                .rankings
                .iter()
                .map(NeuronRanking::load)
                .collect::<Result<Vec<_>>>()?;
            let mut analyses: Vec<Analysis> = a.salient_p.iter().map(|&p| Analysis::SalientCounts { p }).collect();
            analyses.extend(a.overlap_k.iter().map(|&k| Analysis::Overlap { k }));
            for spec in &a.curves {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("curve `{spec}` is not name=path")))?;
                analyses.push(Analysis::Curve {
                    name: name.to_owned(),
                    curve: neurank::ablation::AblationCurve::load(path)?,
                });
            }
            let written = summary_report(&a.out_dir, &model, &rankings, &analyses)?;
            say(&format!("wrote {} files", written.len()));
        }
    }
    Ok(())
}

fn analyze(kind: &Analyze) -> Result<()> {
    match kind {
        Analyze::SalientCounts { model, p, out } => {
            let model = ProbeModel::load(model)?;
            let mut csv = String::from("label,count\n");
            for (label, n) in salient_count_per_label(&model, *p)? {
                let _ = writeln!(csv, "{label},{n}");
            }
            write_file(out, &csv)
        }
        Analyze::Shared { model, labels, p, out } => {
            let model = ProbeModel::load(model)?;
            let ids = labels
                .iter()
                .map(|l| model.label_id(l).ok_or_else(|| Error::UnknownLabel(l.clone())))
                .collect::<Result<Vec<_>>>()?;
            let shared = shared_neurons(&model, &ids, *p)?;
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            let mut text = format!("shared: {}\n", join(&shared.shared));
            for (label, ex) in shared.labels.iter().zip(&shared.exclusive) {
                let _ = writeln!(text, "{label}: {}", join(ex));
            }
            write_file(out, &text)
        }
        Analyze::Overlap { rankings, k, out } => {
            let loaded = rankings
                .iter()
                .map(NeuronRanking::load)
                .collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = rankings.iter().map(|p| p.display().to_string()).collect();
            let mut csv = format!(",{}\n", names.join(","));
            for (a, name) in loaded.iter().zip(&names) {
                let row = loaded
                    .iter()
                    .map(|b| topk_overlap(a, b, *k).map(|v| v.to_string()))
                    .collect::<Result<Vec<_>>>()?;
                let _ = writeln!(csv, "{name},{}", row.join(","));
            }
            write_file(out, &csv)
        }
        Analyze::TopWords {
            activations,
            neuron,
            k,
            min_count,
            out,
        } => {
            let data = load_activations(activations)?;
            write_file(out, &top_words_for_neuron(&data, *neuron, *k, *min_count)?.to_text())
        }
        Analyze::Heatmap {
            activations,
            sentence,
            neuron,
            format,
            out,
        } => {
            let data = load_activations(activations)?;
            let format = match format {
                FormatArg::Text => HeatmapFormat::Text,
                FormatArg::Html => HeatmapFormat::Html,
            };
            write_file(out, &heatmap(&data, *sentence, *neuron, format)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if !cli.quiet {
        eprintln!("{cli:#?}");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn parse_model_count(s: &str) -> std::result::Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err(format!("expected 1 or 3, got `{s}`")),
    }
}
