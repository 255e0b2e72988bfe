use std::path::Path;
use std::process::{Command, Output};

fn neurank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurank"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = neurank(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Two labels, separable on neuron 0.
fn write_probe_inputs(dir: &Path) {
    let mut acts = String::new();
    let mut labels = String::new();
    for s in 0..20 {
        let tags: Vec<&str> = (0..4).map(|t| if (s + t) % 2 == 0 { "A" } else { "B" }).collect();
        let rows: Vec<String> = tags
            .iter()
            .enumerate()
            .map(|(t, tag)| {
                let sign = if *tag == "A" { 1.0 } else { -1.0 };
                format!("[{}, {}, 0.5]", sign * 2.0, 0.1 * (s * 4 + t) as f64 % 1.0)
            })
            .collect();
        acts.push_str(&format!(
            "{{\"tokens\": [\"w{s}\", \"x\", \"y\", \"z\"], \"activations\": [{}]}}\n",
            rows.join(", ")
        ));
        labels.push_str(&tags.join(" "));
        labels.push('\n');
    }
    std::fs::write(dir.join("a.jsonl"), acts).unwrap();
    std::fs::write(dir.join("a.lbl"), labels).unwrap();
}

fn write_corpus(dir: &Path) {
    let words = ["we", "will", "build", "the", "nation", "and", "our", "people", "work", "now"];
    let mut text = String::new();
    for s in 0..45 {
        let n = 3 + s % 5;
        let line: Vec<&str> = (0..n).map(|t| words[(s * 7 + t * 3) % words.len()]).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(dir.join("corpus.txt"), text).unwrap();
}

#[test]
fn probe_train_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    write_probe_inputs(dir.path());
    let args = [
        "probe-train", "--activations", "a.jsonl", "--labels", "a.lbl", "--l1", "1e-5", "--l2", "1e-5", "--out", "m.json",
    ];
    ok(dir.path(), &args);
    let model = neurank::probe::ProbeModel::load(dir.path().join("m.json")).unwrap();
    assert_eq!(model.dim(), 3);
    assert_eq!(model.label_vocab(), ["A", "B"]);

    ok(dir.path(), &["probe-eval", "--model", "m.json", "--activations", "a.jsonl", "--labels", "a.lbl", "--out", "eval.json"]);
    let eval = std::fs::read_to_string(dir.path().join("eval.json")).unwrap();
    assert!(eval.contains("\"tokens\": 80"), "{eval}");

    ok(dir.path(), &["rank", "--model", "m.json", "--out", "r.txt", "--quiet"]);
    let ranking = neurank::NeuronRanking::load(dir.path().join("r.txt")).unwrap();
    assert_eq!(ranking.top(1), [0]);
}

#[test]
fn missing_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = neurank(dir.path(), &["probe-train", "--activations", "a.jsonl", "--labels", "a.lbl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--out") && err.contains("Usage"), "{err}");
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn help_exits_zero_and_bad_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(neurank(dir.path(), &["--help"]).status.code(), Some(0));
    let out = neurank(dir.path(), &["probe-train", "--activations", "nope.jsonl", "--position-labels", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    let out = neurank(dir.path(), &["lm-train", "--models", "2", "--bundled-corpus", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write_probe_inputs(dir.path());
    let out = neurank(
        dir.path(),
        &["probe-train", "--activations", "a.jsonl", "--labels", "a.lbl", "--learning-rate", "1e300", "--out", "m.json"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn run_pipeline(dir: &Path) {
    write_corpus(dir);
    ok(dir, &[
        "lm-train", "--corpus", "corpus.txt", "--models", "3", "--holdout", "0.2", "--holdout-out", "heldout.txt",
        "--vocab-size", "20", "--embedding-dim", "6", "--hidden-dim", "6", "--epochs", "1", "--seed", "7",
        "--out-dir", "lms",
    ]);
    for i in 0..3 {
        let model = format!("lms/model_{i}.json");
        let out = format!("acts_{i}.jsonl");
        ok(dir, &["lm-extract", "--model", &model, "--corpus", "heldout.txt", "--out", &out]);
    }
    ok(dir, &[
        "rank-cross", "--activations", "acts_0.jsonl", "acts_1.jsonl", "acts_2.jsonl", "--target", "0",
        "--out", "ranking.txt", "--scores", "scores.txt",
    ]);
    for dir_name in ["top", "bottom"] {
        let out = format!("curve_{dir_name}.csv");
        ok(dir, &[
            "lm-ablate", "--model", "lms/model_0.json", "--corpus", "heldout.txt", "--ranking", "ranking.txt",
            "--direction", dir_name, "--steps", "0,2,4", "--out", &out,
        ]);
    }
}

#[test]
fn small_pipeline_emits_two_curves() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let top = neurank::ablation::AblationCurve::load(dir.path().join("curve_top.csv")).unwrap();
    let bottom = neurank::ablation::AblationCurve::load(dir.path().join("curve_bottom.csv")).unwrap();
    assert_eq!(top.points.len(), 3);
    assert_eq!(top.points[0], bottom.points[0]);
    assert!(top.points.iter().all(|(_, ppl)| ppl.is_finite() && *ppl > 1.0));
    let heldout = std::fs::read_to_string(dir.path().join("heldout.txt")).unwrap();
    assert_eq!(heldout.lines().count(), 9);
}

#[test]
fn same_arguments_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    for name in [
        "heldout.txt", "lms/model_0.json", "lms/model_2.json", "lms/train_report.csv", "acts_1.jsonl",
        "ranking.txt", "scores.txt", "curve_top.csv", "curve_bottom.csv",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }

    for d in [a.path(), b.path()] {
        write_probe_inputs(d);
        ok(d, &["probe-train", "--activations", "a.jsonl", "--labels", "a.lbl", "--out", "m.json", "--seed", "3"]);
    }
    assert_eq!(
        std::fs::read(a.path().join("m.json")).unwrap(),
        std::fs::read(b.path().join("m.json")).unwrap()
    );
}

#[test]
fn analyses_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_probe_inputs(d);
    ok(d, &["probe-train", "--activations", "a.jsonl", "--labels", "a.lbl", "--out", "m.json"]);
    ok(d, &["rank", "--model", "m.json", "--out", "ling.txt"]);
    ok(d, &["rank", "--method", "variance", "--activations", "a.jsonl", "--out", "var.txt"]);
    ok(d, &["analyze", "salient-counts", "--model", "m.json", "--p", "50", "--out", "counts.csv"]);
    ok(d, &["analyze", "shared", "--model", "m.json", "--labels", "A,B", "--out", "shared.txt"]);
    ok(d, &["analyze", "overlap", "--rankings", "ling.txt", "var.txt", "--k", "1", "--out", "overlap.csv"]);
    ok(d, &["analyze", "top-words", "--activations", "a.jsonl", "--neuron", "2", "--min-count", "1", "--out", "words.txt"]);
    ok(d, &["analyze", "heatmap", "--activations", "a.jsonl", "--sentence", "0", "--neuron", "0", "--format", "text", "--out", "h.txt"]);
    ok(d, &["ablate-mask", "--model", "m.json", "--activations", "a.jsonl", "--labels", "a.lbl", "--ranking", "ling.txt", "--percent", "34", "--out", "mask.csv"]);

    let counts = std::fs::read_to_string(d.join("counts.csv")).unwrap();
    assert!(counts.starts_with("label,count\nA,"), "{counts}");
    let heat = std::fs::read_to_string(d.join("h.txt")).unwrap();
    assert_eq!(heat, "w0[+4] x[-4] y[+4] z[-4]\n");
    let mask = std::fs::read_to_string(d.join("mask.csv")).unwrap();
    let last: Vec<&str> = mask.lines().last().unwrap().split(',').collect();
    assert_eq!(&last[..2], ["34", "1"]);

    std::fs::write(d.join("curve.csv"), "# direction=top metric=accuracy\n1,0.5\n").unwrap();
    ok(d, &[
        "report", "--model", "m.json", "--rankings", "ling.txt", "var.txt", "--curves", "masked=curve.csv",
        "--salient-p", "25,50", "--overlap-k", "1", "--out-dir", "rep",
    ]);
    let index = std::fs::read_to_string(d.join("rep/index.md")).unwrap();
    assert!(index.contains("(salient_p50.csv)") && index.contains("(curve_masked.csv)"), "{index}");
}
