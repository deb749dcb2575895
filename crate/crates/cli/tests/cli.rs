//! Command-level tests driving the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_recall")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const LOG_HEADER: &str = "p_recall,timestamp,delta,user_id,lexeme_id,history_seen,history_correct,session_seen,session_correct";

fn fixture_log(rows: usize) -> String {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for i in 0..rows {
        text.push_str(&format!(
            "0.{},{},{},u{},w{},{},{},2,1\n",
            5 + i % 5,
            1000 + i * 500,
            (i % 4) * 86_400,
            i % 3,
            i % 4,
            i % 6 + 1,
            (i % 6 + 1).min(i % 4 + 1),
        ));
    }
    text
}

const SYNTH_CFG: &str = "learners=10\nitems=4\nsteps_per_learner=8\nform=hlr\nnoise_sd=0\nseed=5\n";
const TRAIN_CFG: &str = "form=hlr\nseed=5\nhidden_dim=4\ndecoder_hidden=4\nepochs_per_phase=1\nmax_outer_rounds=1\nbatch_size=4\nlr_sr=0.5\n";

#[test]
fn ingest_counts_rows_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "log.csv", &fixture_log(40));
    let out = run_in(dir.path(), &["ingest", "--input", "log.csv", "--out", "corpus.tsv"]);
    assert_ok(&out);
    let corpus = fs::read_to_string(dir.path().join("corpus.tsv")).unwrap();
    let data_rows = corpus
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("learner\t") && !l.trim().is_empty())
        .count();
    assert_eq!(data_rows, 40, "one corpus row per valid input row");

    let out2 = run_in(dir.path(), &["ingest", "--input", "log.csv", "--out", "corpus2.tsv"]);
    assert_ok(&out2);
    let corpus2 = fs::read_to_string(dir.path().join("corpus2.tsv")).unwrap();
    assert_eq!(corpus, corpus2, "re-ingest must be byte-identical");
}

#[test]
fn ingest_bad_schema_fails_with_named_column() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "log.csv", &fixture_log(3));
    let out = run_in(
        dir.path(),
        &["ingest", "--input", "log.csv", "--out", "c.tsv", "--schema", "recall=not_there"],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not_there"), "stderr: {stderr}");
    assert_eq!(stderr.lines().count(), 1, "single-line error: {stderr}");
}

#[test]
fn synth_is_deterministic_and_truth_recovers() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "synth.cfg", SYNTH_CFG);
    assert_ok(&run_in(dir.path(), &["synth", "--config", "synth.cfg", "--out", "a.tsv"]));
    assert_ok(&run_in(dir.path(), &["synth", "--config", "synth.cfg", "--out", "b.tsv"]));
    let a = fs::read(dir.path().join("a.tsv")).unwrap();
    let b = fs::read(dir.path().join("b.tsv")).unwrap();
    assert_eq!(a, b, "same seed, same corpus bytes");
    assert_eq!(
        fs::read(dir.path().join("a.tsv.truth")).unwrap(),
        fs::read(dir.path().join("b.tsv.truth")).unwrap()
    );

    // The truth model scores a perfect MAE on its own noise-free corpus.
    let out = run_in(
        dir.path(),
        &["eval", "--model", "a.tsv.truth", "--corpus", "a.tsv", "--split", "all"],
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mae: f64 = stdout
        .lines()
        .nth(1)
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(mae <= 1e-12, "truth model MAE {mae}");

    // Recovery pipeline: refitting the same form on the corpus lands close
    // to the truth predictions.
    let corpus_text = fs::read_to_string(dir.path().join("a.tsv")).unwrap();
    let (seqs, _) = read_corpus_text(&corpus_text);
    let fitted = recall_core::equations::fit_baseline(
        recall_core::equations::EquationForm::Hlr,
        &seqs,
        recall_core::equations::FitHyper { lr: 0.5, epochs: 800, seed: 1 },
    )
    .unwrap();
    let truth = recall_core::equations::BaselineModel::load(
        &fs::read_to_string(dir.path().join("a.tsv.truth")).unwrap(),
    )
    .unwrap();
    let mut diff = 0.0;
    let mut count = 0;
    for seq in &seqs {
        for (a, b) in fitted.predict(seq).iter().zip(truth.predict(seq)) {
            diff += (a - b).abs();
            count += 1;
        }
    }
    assert!(diff / count as f64 <= 0.02, "refit deviates {}", diff / count as f64);
}

#[test]
fn synth_zero_learners_fails() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "synth.cfg", SYNTH_CFG);
    let out = run_in(
        dir.path(),
        &["synth", "--config", "synth.cfg", "--out", "x.tsv", "--set", "learners=0"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

/// Tiny corpus-file parser mirror for oracle comparisons in these tests.
fn read_corpus_text(text: &str) -> (Vec<recall_core::LearnerSequence>, Vec<String>) {
    let mut names = Vec::new();
    let mut seqs: Vec<recall_core::LearnerSequence> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("#features=") {
            names = rest.split(',').map(str::to_string).collect();
            continue;
        }
        if line.starts_with('#') || line.starts_with("learner\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let learner = f[0].to_string();
        let step = recall_core::SequenceStep {
            timestamp: f[1].parse().unwrap(),
            delta_days: f[2].parse().unwrap(),
            features: recall_core::FeatureVector::new(
                f[3..3 + names.len()].iter().map(|v| v.parse().unwrap()).collect(),
            ),
            outcome: f[3 + names.len()].parse().unwrap(),
        };
        match seqs.iter_mut().find(|s| s.learner_id == learner) {
            Some(s) => s.steps.push(step),
            None => seqs.push(recall_core::LearnerSequence {
                learner_id: learner,
                steps: vec![step],
            }),
        }
    }
    (seqs, names)
}

fn setup_trained(dir: &Path) {
    write(dir, "synth.cfg", SYNTH_CFG);
    write(dir, "train.cfg", TRAIN_CFG);
    assert_ok(&run_in(dir, &["synth", "--config", "synth.cfg", "--out", "corpus.tsv"]));
    assert_ok(&run_in(
        dir,
        &["train", "--config", "train.cfg", "--corpus", "corpus.tsv", "--outdir", "run"],
    ));
}

#[test]
fn train_writes_expected_files_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    setup_trained(dir.path());
    for name in [
        "trace.tsv",
        "queue.tsv",
        "checkpoint_round_1.txt",
        "checkpoint_final.txt",
        "lambda_final.txt",
        "model.txt",
    ] {
        assert!(dir.path().join("run").join(name).exists(), "missing {name}");
    }
    assert_ok(&run_in(
        dir.path(),
        &["train", "--config", "train.cfg", "--corpus", "corpus.tsv", "--outdir", "run2"],
    ));
    for name in ["trace.tsv", "checkpoint_final.txt", "lambda_final.txt", "queue.tsv"] {
        assert_eq!(
            fs::read(dir.path().join("run").join(name)).unwrap(),
            fs::read(dir.path().join("run2").join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn ablation_flags_produce_distinct_tags() {
    let dir = tempfile::tempdir().unwrap();
    setup_trained(dir.path());
    assert_ok(&run_in(
        dir.path(),
        &["train", "--config", "train.cfg", "--corpus", "corpus.tsv", "--outdir", "run_nq", "--no-queue"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &["train", "--config", "train.cfg", "--corpus", "corpus.tsv", "--outdir", "run_na", "--no-alternate"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &["train", "--config", "train.cfg", "--corpus", "corpus.tsv", "--outdir", "run_rs", "--strategy", "random"],
    ));
    let tag = |d: &str| -> String {
        fs::read_to_string(dir.path().join(d).join("trace.tsv"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("#tag="))
            .unwrap()
            .to_string()
    };
    let tags = [tag("run"), tag("run_nq"), tag("run_na"), tag("run_rs")];
    for i in 0..tags.len() {
        for j in i + 1..tags.len() {
            assert_ne!(tags[i], tags[j], "tags must be distinct: {tags:?}");
        }
    }
}

#[test]
fn eval_matches_in_process_and_fields_are_finite() {
    let dir = tempfile::tempdir().unwrap();
    setup_trained(dir.path());
    let out = run_in(
        dir.path(),
        &["eval", "--model", "run/checkpoint_final.txt", "--corpus", "corpus.tsv", "--split", "test", "--seed", "5"],
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let fields: Vec<&str> = stdout.lines().nth(1).unwrap().split('\t').collect();
    let (mae, mape): (f64, f64) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    assert!(mae.is_finite() && mape.is_finite());

    // In-process oracle with the same split parameters.
    let corpus_text = fs::read_to_string(dir.path().join("corpus.tsv")).unwrap();
    let (seqs, _) = read_corpus_text(&corpus_text);
    let split = recall_core::dataset::split(seqs, (0.8, 0.1, 0.1), 5).unwrap();
    let params = recall_core::PredictorParameters::load(
        &fs::read_to_string(dir.path().join("run/checkpoint_final.txt")).unwrap(),
    )
    .unwrap();
    let model = recall_core::evaluation::PredictorModel {
        params,
        tag: "predictor".into(),
    };
    let report = recall_core::evaluation::evaluate_model(&model, &split.test);
    assert!((report.mae - mae).abs() < 1e-15, "{} vs {mae}", report.mae);
    assert!((report.mape - mape).abs() < 1e-12);
}

#[test]
fn extract_roundtrips_against_sr_predict() {
    let dir = tempfile::tempdir().unwrap();
    setup_trained(dir.path());
    let out = run_in(dir.path(), &["extract", "--model", "run/model.txt"]);
    assert_ok(&out);
    let rendered = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(rendered.contains("p(recall)"), "{rendered}");

    // Re-parse the printed equation and compare against sr_predict on the
    // original coefficient export.
    let lambda_text = fs::read_to_string(dir.path().join("run/lambda_final.txt")).unwrap();
    let (form, _labels, lambda) =
        recall_core::SparseCoefficientMatrix::parse_export(&lambda_text).unwrap();

    // Parse rendered terms back into a matrix using the label header.
    let labels_line = rendered
        .lines()
        .find(|l| l.starts_with("#labels="))
        .unwrap()["#labels=".len()..]
        .to_string();
    let labels: Vec<&str> = labels_line.split(',').collect();
    let mut reparsed = recall_core::SparseCoefficientMatrix::zeros(labels.len(), lambda.z);
    for line in rendered.lines() {
        if !line.starts_with('d') || !line.contains('=') {
            continue;
        }
        let (name, body) = line.split_once('=').unwrap();
        let j: usize = name.trim()[1..].parse::<usize>().unwrap() - 1;
        if body.trim() == "0" {
            continue;
        }
        for term in body.trim().split(" + ") {
            let (coef, label) = term.split_once('*').unwrap();
            let r = labels.iter().position(|l| *l == label.trim()).unwrap();
            reparsed.values[r * reparsed.z + j] = coef.trim().parse().unwrap();
        }
    }

    let mut matrix = recall_core::AugmentedDescriptorMatrix::new(labels.len(), true);
    let mut deltas = Vec::new();
    for i in 0..20 {
        let row: Vec<f64> = (0..labels.len())
            .map(|r| ((i * 7 + r * 3) % 11) as f64 / 10.0 - 0.4)
            .collect();
        matrix.push_row(&row);
        deltas.push(i as f64 * 0.7);
    }
    let a = recall_core::sparsereg::sr_predict(form, &matrix, &lambda, &deltas);
    let b = recall_core::sparsereg::sr_predict(form, &matrix, &reparsed, &deltas);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
}

#[test]
fn plots_emit_consistent_csv_and_wellformed_svg() {
    let dir = tempfile::tempdir().unwrap();
    setup_trained(dir.path());

    // Equation-mode forgetting trajectory must never rise.
    assert_ok(&run_in(
        dir.path(),
        &["plot", "--kind", "kstudy", "--model", "run/model.txt", "--corpus", "corpus.tsv",
          "--horizon-days", "20", "--step-days", "0.5", "--out-csv", "k.csv", "--out-svg", "k.svg"],
    ));
    let csv = fs::read_to_string(dir.path().join("k.csv")).unwrap();
    let recalls: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(recalls.len() > 30);
    for w in recalls.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "curve rose: {w:?}");
    }

    assert_ok(&run_in(
        dir.path(),
        &["plot", "--kind", "heatmap", "--model", "run/lambda_final.txt", "--out-csv", "h.csv", "--out-svg", "h.svg"],
    ));
    // Heatmap CSV delegates to the evaluation-module export.
    let lambda_text = fs::read_to_string(dir.path().join("run/lambda_final.txt")).unwrap();
    let (_, labels, lambda) =
        recall_core::SparseCoefficientMatrix::parse_export(&lambda_text).unwrap();
    let n = labels.iter().filter(|l| !l.starts_with("ddx_") && l.as_str() != "bias").count();
    let short: Vec<&str> = labels.iter().take(n).map(String::as_str).collect();
    let expect = recall_core::evaluation::weight_heatmap_export(&lambda, &short, true);
    assert_eq!(fs::read_to_string(dir.path().join("h.csv")).unwrap(), expect);

    assert_ok(&run_in(
        dir.path(),
        &["plot", "--kind", "trace", "--input", "run/trace.tsv", "--out-csv", "t.csv", "--out-svg", "t.svg"],
    ));

    for name in ["k.svg", "h.svg", "t.svg"] {
        let svg = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(xml_well_formed(&svg), "{name} is not well-formed XML");
    }
}

/// Tag-balance well-formedness check (no external XML dependency).
fn xml_well_formed(text: &str) -> bool {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        let Some(close) = rest[open..].find('>') else {
            return false;
        };
        let tag = &rest[open + 1..open + close];
        rest = &rest[open + close + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            match stack.pop() {
                Some(top) if top == name => {}
                _ => return false,
            }
        } else if !tag.ends_with('/') {
            stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
        }
    }
    stack.is_empty()
}
