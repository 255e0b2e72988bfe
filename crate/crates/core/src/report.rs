//! Qualitative artifacts: top words per neuron, activation heatmaps and a
//! summary report directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ablation::AblationCurve;
use crate::error::{Error, Result};
use crate::probe::ProbeModel;
use crate::ranking::{salient_count_per_label, topk_overlap, NeuronRanking};
use crate::store::ActivationDataset;

pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordScore {
    pub word: String,
    pub score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeuronProfile {
    pub neuron: usize,
    /// Sorted by score, high to low; equal scores in word order.
    pub words: Vec<WordScore>,
    pub statistic: String,
}

impl NeuronProfile {
    /// Tab-separated `word score count` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("# neuron={} statistic={}\n", self.neuron, self.statistic);
        for w in &self.words {
            let _ = writeln!(out, "{}\t{}\t{}", w.word, w.score, w.count);
        }
        out
    }
}

fn check_neuron(data: &ActivationDataset, neuron: usize) -> Result<()> {
    if neuron >= data.dim() {
        return Err(Error::invalid(format!(
            "neuron {neuron} out of range for dimension {}",
            data.dim()
        )));
    }
    Ok(())
}

/// The `k` words with the largest mean absolute activation of `neuron`,
/// among words seen at least `min_count` times.
pub fn top_words_for_neuron(
    data: &ActivationDataset,
    neuron: usize,
    k: usize,
    min_count: usize,
) -> Result<NeuronProfile> {
    check_neuron(data, neuron)?;
    let mut per_word: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (word, acts) in data.iter_tokens() {
        per_word.entry(word).or_default().push(acts[neuron].abs());
    }
    let mut words: Vec<WordScore> = per_word
        .into_iter()
        .filter(|(_, v)| v.len() >= min_count.max(1))
        .map(|(word, mut v)| {
            // summing in sorted order keeps the score independent of corpus order
            v.sort_by(f64::total_cmp);
            let score = v.iter().sum::<f64>() / v.len() as f64;
            WordScore {
                word: word.to_owned(),
                score,
                count: v.len(),
            }
        })
        .collect();
    words.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
    words.truncate(k);
    Ok(NeuronProfile {
        neuron,
        words,
        statistic: "mean_abs".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Text,
    Html,
}

/// Largest `|activation|` of `neuron` anywhere in the dataset.
pub fn neuron_max_abs(data: &ActivationDataset, neuron: usize) -> f64 {
    data.activations()
        .iter()
        .flat_map(|b| b.column(neuron).to_vec())
        .fold(0.0, |m, v| m.max(v.abs()))
}

/// Signed bucket in `-4..=4` for the text heatmap: `round(4 · v / max_abs)`.
pub fn heatmap_bucket(value: f64, max_abs: f64) -> i32 {
    if max_abs == 0.0 {
        return 0;
    }
    (4.0 * value / max_abs).round().clamp(-4.0, 4.0) as i32
}

/// Cell colour on a red (negative) / white (zero) / blue (positive) scale.
pub fn heatmap_color(value: f64, max_abs: f64) -> (u8, u8, u8) {
    if max_abs == 0.0 {
        return (255, 255, 255);
    }
    let a = (value / max_abs).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - a.abs())).round() as u8;
    if a < 0.0 {
        (255, fade, fade)
    } else {
        (fade, fade, 255)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Renders one sentence's activations for one neuron.
///
/// Text mode writes `word[b]` per token, where `b` is the signed bucket from
/// [`heatmap_bucket`] (`-4` strongly negative, `0` neutral, `+4` strongly
/// positive). HTML mode writes a single self-contained table row with one
/// cell per token. Both scales are normalized by the neuron's largest
/// magnitude over the whole dataset.
pub fn heatmap(
    data: &ActivationDataset,
    sentence: usize,
    neuron: usize,
    format: HeatmapFormat,
) -> Result<String> {
    check_neuron(data, neuron)?;
    if sentence >= data.len() {
        return Err(Error::invalid(format!(
            "sentence {sentence} out of range for {} sentences",
            data.len()
        )));
    }
    let max_abs = neuron_max_abs(data, neuron);
    let tokens = data.tokens(sentence);
    let values = data.sentence_activations(sentence).column(neuron).to_vec();
    let mut out = String::new();
    match format {
        HeatmapFormat::Text => {
            let cells: Vec<String> = tokens
                .iter()
                .zip(&values)
                .map(|(w, &v)| match heatmap_bucket(v, max_abs) {
                    0 => format!("{w}[0]"),
                    b => format!("{w}[{b:+}]"),
                })
                .collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        HeatmapFormat::Html => {
            let _ = write!(
                out,
                "<html><head><meta charset=\"utf-8\"/><title>neuron {neuron}, sentence {sentence}</title></head>\
                 <body><table style=\"border-collapse:collapse;font-family:monospace\"><tr>"
            );
            for (w, &v) in tokens.iter().zip(&values) {
                let (r, g, b) = heatmap_color(v, max_abs);
                let _ = write!(
                    out,
                    "<td style=\"background-color:rgb({r},{g},{b});padding:2px 4px\" title=\"{v}\">{}</td>",
                    escape(w)
                );
            }
            out.push_str("</tr></table></body></html>\n");
        }
    }
    Ok(out)
}

/// One section of a summary report.
#[derive(Debug, Clone)]
pub enum Analysis {
    /// Salient neurons per label at weight-mass percentage `p`.
    SalientCounts { p: f64 },
    /// Pairwise top-`k` overlap of all rankings in the report.
    Overlap { k: usize },
    /// An ablation curve stored under `name`.
    Curve { name: String, curve: AblationCurve },
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `index.md` plus one file per ranking and analysis into `dir`, and
/// returns the paths written (index last). Output depends only on the inputs.
pub fn summary_report(
    dir: impl AsRef<Path>,
    probe: &ProbeModel,
    rankings: &[NeuronRanking],
    analyses: &[Analysis],
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if let Some(r) = rankings.iter().find(|r| r.dim() != probe.dim()) {
        return Err(Error::Shape(format!(
            "ranking over {} neurons does not match probe dimension {}",
            r.dim(),
            probe.dim()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, content: &str| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let mut index = String::from("# Neuron ranking report\n\n## Probe\n\n");
    let _ = writeln!(index, "- neurons: {}", probe.dim());
    let _ = writeln!(index, "- labels: {}", probe.label_vocab().join(", "));
    let _ = writeln!(index, "- lambda1: {}", probe.lambda1);
    let _ = writeln!(index, "- lambda2: {}", probe.lambda2);
    let _ = writeln!(index, "- sparsity: {}", probe.sparsity());

    let ranking_names: Vec<String> = rankings
        .iter()
        .enumerate()
        .map(|(i, r)| format!("ranking_{i}_{}", r.method))
        .collect();
    if !rankings.is_empty() {
        index.push_str("\n## Rankings\n\n");
        for (name, r) in ranking_names.iter().zip(rankings) {
            let file = format!("{name}.txt");
            write(&file, &r.to_text())?;
            let top: Vec<String> = r.top(10.min(r.dim())).iter().map(usize::to_string).collect();
            let _ = writeln!(index, "- [{file}]({file}): top 10 = {}", top.join(" "));
        }
    }

    for analysis in analyses {
        match analysis {
            Analysis::SalientCounts { p } => {
                let counts = salient_count_per_label(probe, *p)?;
                let file = format!("salient_p{}.csv", file_safe(&p.to_string()));
                let mut csv = String::from("label,count\n");
                let _ = writeln!(index, "\n## Salient neurons at {p}% weight mass\n");
                index.push_str("| label | neurons |\n|---|---|\n");
                for (label, n) in &counts {
                    let _ = writeln!(csv, "{label},{n}");
                    let _ = writeln!(index, "| {label} | {n} |");
                }
                write(&file, &csv)?;
                let _ = writeln!(index, "\nData: [{file}]({file})");
            }
            Analysis::Overlap { k } => {
                let file = format!("overlap_k{k}.csv");
                let mut csv = format!(",{}\n", ranking_names.join(","));
                for (a, name) in rankings.iter().zip(&ranking_names) {
                    let row: Vec<String> = rankings
                        .iter()
                        .map(|b| topk_overlap(a, b, *k).map(|v| v.to_string()))
                        .collect::<Result<_>>()?;
                    let _ = writeln!(csv, "{name},{}", row.join(","));
                }
                write(&file, &csv)?;
                let _ = writeln!(index, "\n## Top-{k} overlap\n\nMatrix: [{file}]({file})");
            }
            Analysis::Curve { name, curve } => {
                let file = format!("curve_{}.csv", file_safe(name));
                write(&file, &curve.to_text())?;
                let _ = writeln!(
                    index,
                    "\n## Ablation curve `{name}`\n\n{} first, metric {}: [{file}]({file})",
                    curve.direction, curve.metric_kind
                );
            }
        }
    }
    write("index.md", &index)?;
    Ok(written)
}
