//! The six subcommand implementations.

use crate::config::{parse_kv, parse_schema_overrides, synth_from_text, RunConfig};
use crate::corpus::{read_corpus, write_corpus};
use crate::equation_text::{parse_equation, render_equation};
use crate::svg;
use anyhow::{anyhow, bail, Context, Result};
use recall_core::bufferqueue::SelectionStrategy;
use recall_core::dataset::{self, ColumnSchema, FEATURE_NAMES};
use recall_core::equations::BaselineModel;
use recall_core::evaluation::{
    evaluate_model, kstudy_curve, weight_heatmap_export, ExtractedEquationModel, PredictorModel,
    RecallModel,
};
use recall_core::predictor::PredictorParameters;
use recall_core::sparsereg::SparseCoefficientMatrix;
use recall_core::trainer::run;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

fn feature_name_strings() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn cmd_ingest(input: &Path, out: &Path, schema_spec: &str) -> Result<()> {
    let overrides = parse_schema_overrides(schema_spec)?;
    let schema = ColumnSchema::with_overrides(&overrides).map_err(|e| anyhow!("{e}"))?;
    let file = fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let outcome = dataset::parse_log(BufReader::new(file), &schema).map_err(|e| anyhow!("{e}"))?;
    for reject in outcome.rejected.iter().take(5) {
        eprintln!("rejected line {}: {}", reject.line, reject.reason);
    }
    if outcome.records.is_empty() {
        bail!("no valid rows in {}", input.display());
    }
    let sequences = dataset::featurize(&outcome.records);
    let text = write_corpus(&sequences, &feature_name_strings());
    fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "ingested {} records ({} rejected) into {} learner sequences -> {}",
        outcome.records.len(),
        outcome.rejected.len(),
        sequences.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_synth(config: &Path, out: &Path, truth_out: Option<&Path>, sets: &[String]) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let synth_cfg = synth_from_text(&text, sets)?;
    let (sequences, truth) = dataset::synthesize(&synth_cfg).map_err(|e| anyhow!("{e}"))?;
    let corpus_text = write_corpus(&sequences, &feature_name_strings());
    fs::write(out, &corpus_text).with_context(|| format!("writing {}", out.display()))?;
    let truth_path: PathBuf = match truth_out {
        Some(p) => p.to_path_buf(),
        None => {
            let mut p = out.as_os_str().to_owned();
            p.push(".truth");
            PathBuf::from(p)
        }
    };
    fs::write(&truth_path, truth.to_baseline().save())
        .with_context(|| format!("writing {}", truth_path.display()))?;
    let steps: usize = sequences.iter().map(|s| s.steps.len()).sum();
    println!(
        "synthesized {} learners x {} steps ({} rows) -> {} (truth: {})",
        synth_cfg.learners,
        synth_cfg.steps_per_learner,
        steps,
        out.display(),
        truth_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config: &Path,
    corpus: &Path,
    outdir: &Path,
    strategy: Option<SelectionStrategy>,
    no_alternate: bool,
    no_queue: bool,
    alpha: Option<f64>,
    sets: &[String],
) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = RunConfig::from_text(&text, sets)?;
    if let Some(s) = strategy {
        cfg.trainer.strategy = s;
    }
    if no_queue {
        cfg.trainer.strategy = SelectionStrategy::Direct;
    }
    if no_alternate {
        cfg.trainer.alternate = false;
    }
    if let Some(a) = alpha {
        cfg.trainer.alpha = a;
    }

    let corpus_text =
        fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let (sequences, feature_names) = read_corpus(&corpus_text)?;
    let split = dataset::split(sequences, cfg.ratios, cfg.trainer.seed).map_err(|e| anyhow!("{e}"))?;

    let trace = run(&split, &cfg.trainer).map_err(|e| anyhow!("{e}"))?;

    fs::create_dir_all(outdir).with_context(|| format!("creating {}", outdir.display()))?;
    let tag = cfg.tag();
    fs::write(outdir.join("trace.tsv"), trace.to_tsv(&tag))?;
    fs::write(outdir.join("queue.tsv"), trace.queue_tsv())?;
    for (round, params) in &trace.round_checkpoints {
        fs::write(outdir.join(format!("checkpoint_round_{round}.txt")), params.save())?;
    }
    fs::write(outdir.join("checkpoint_final.txt"), trace.final_params.save())?;
    let label_refs: Vec<&str> = feature_names.iter().map(String::as_str).collect();
    fs::write(
        outdir.join("lambda_final.txt"),
        trace
            .final_lambda
            .export(cfg.trainer.form, &label_refs, cfg.trainer.bias_column),
    )?;
    let manifest = format!(
        "#model v1\nkind=extracted\ncheckpoint=checkpoint_final.txt\nlambda=lambda_final.txt\nform={}\nbias={}\nfd_epsilon={:e}\ntag={}\n",
        cfg.trainer.form.name(),
        cfg.trainer.bias_column,
        cfg.trainer.fd_epsilon,
        tag
    );
    fs::write(outdir.join("model.txt"), manifest)?;

    let last = trace.rows.last().map(|r| r.val_mae).unwrap_or(f64::NAN);
    println!(
        "trained [{tag}]: {} rows, {} rounds, early_stop={}, final val MAE {:.6} -> {}",
        trace.rows.len(),
        trace.queue_snapshots.len(),
        trace.stopped_early,
        last,
        outdir.display()
    );
    Ok(())
}

/// Load any model artifact by sniffing its first line. Manifests resolve
/// their referenced files relative to the manifest location.
pub fn load_model(path: &Path) -> Result<Box<dyn RecallModel>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or("").trim();
    match first {
        "#checkpoint v1" => {
            let params = PredictorParameters::load(&text).map_err(|e| anyhow!("{e}"))?;
            Ok(Box::new(PredictorModel {
                params,
                tag: "predictor".into(),
            }))
        }
        "#equation v1" => {
            let model = BaselineModel::load(&text).map_err(|e| anyhow!("{e}"))?;
            Ok(Box::new(model))
        }
        "#model v1" => {
            let kv = parse_kv(&text)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let kind = kv.get("kind").map(String::as_str).unwrap_or("extracted");
            if kind != "extracted" {
                bail!("unsupported model kind '{kind}'");
            }
            let checkpoint = dir.join(
                kv.get("checkpoint")
                    .ok_or_else(|| anyhow!("manifest missing 'checkpoint'"))?,
            );
            let lambda_path = dir.join(
                kv.get("lambda")
                    .ok_or_else(|| anyhow!("manifest missing 'lambda'"))?,
            );
            let params = PredictorParameters::load(&fs::read_to_string(&checkpoint)?)
                .map_err(|e| anyhow!("{e}"))?;
            let (form, _labels, lambda) =
                SparseCoefficientMatrix::parse_export(&fs::read_to_string(&lambda_path)?)
                    .map_err(|e| anyhow!("{e}"))?;
            let bias = kv.get("bias").map(|v| v == "true").unwrap_or(true);
            let fd_epsilon: f64 = kv
                .get("fd_epsilon")
                .map(|v| v.parse())
                .transpose()?
                .unwrap_or(1e-3);
            Ok(Box::new(ExtractedEquationModel {
                params,
                lambda,
                form,
                bias_column: bias,
                fd_epsilon,
            }))
        }
        other => bail!(
            "unrecognized model file {} (first line '{other}')",
            path.display()
        ),
    }
}

pub fn cmd_eval(
    model_path: &Path,
    corpus: &Path,
    which: &str,
    seed: u64,
    ratios: (f64, f64, f64),
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let corpus_text =
        fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let (sequences, _) = read_corpus(&corpus_text)?;
    let part = match which {
        "all" => sequences,
        "train" | "validation" | "test" => {
            let split = dataset::split(sequences, ratios, seed).map_err(|e| anyhow!("{e}"))?;
            match which {
                "train" => split.train,
                "validation" => split.validation,
                _ => split.test,
            }
        }
        other => bail!("unknown split '{other}' (expected train, validation, test, or all)"),
    };
    if part.is_empty() {
        bail!("selected split is empty");
    }
    let report = evaluate_model(model.as_ref(), &part);
    let text = report.to_tsv();
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    Ok(())
}

/// Resolve a path to a coefficient export: either the export itself or a
/// manifest that names one.
fn resolve_lambda(path: &Path) -> Result<(recall_core::equations::EquationForm, Vec<String>, SparseCoefficientMatrix)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or("").trim();
    let lambda_text = if first == "#model v1" {
        let kv = parse_kv(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::read_to_string(dir.join(
            kv.get("lambda")
                .ok_or_else(|| anyhow!("manifest missing 'lambda'"))?,
        ))?
    } else if first == "#lambda v1" {
        text
    } else {
        bail!("{} is neither a coefficient export nor a model manifest", path.display());
    };
    SparseCoefficientMatrix::parse_export(&lambda_text).map_err(|e| anyhow!("{e}"))
}

pub fn cmd_extract(model_path: &Path) -> Result<()> {
    let (form, labels, lambda) = resolve_lambda(model_path)?;
    let rendered = render_equation(form, &labels, &lambda);
    // The rendering must survive a parse (the printed equation is data).
    parse_equation(&rendered).context("internal: rendered equation failed to re-parse")?;
    print!("{rendered}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_plot(
    kind: &str,
    model: Option<&Path>,
    corpus: Option<&Path>,
    input: Option<&Path>,
    learner: Option<&str>,
    horizon_days: f64,
    step_days: f64,
    out_csv: &Path,
    out_svg: &Path,
) -> Result<()> {
    match kind {
        "kstudy" => {
            let model_path = model.ok_or_else(|| anyhow!("kstudy needs --model"))?;
            let corpus_path = corpus.ok_or_else(|| anyhow!("kstudy needs --corpus"))?;
            let model = load_model(model_path)?;
            let (sequences, _) = read_corpus(&fs::read_to_string(corpus_path)?)?;
            let history = match learner {
                Some(id) => sequences
                    .iter()
                    .find(|s| s.learner_id == id)
                    .ok_or_else(|| anyhow!("learner '{id}' not in corpus"))?,
                None => sequences.first().ok_or_else(|| anyhow!("corpus is empty"))?,
            };
            let curve = kstudy_curve(model.as_ref(), history, horizon_days, step_days);
            let mut csv = String::from("day,recall\n");
            for (d, p) in &curve {
                csv.push_str(&format!("{d:e},{p:e}\n"));
            }
            fs::write(out_csv, &csv)?;
            let title = format!("predicted recall: learner {}", history.learner_id);
            fs::write(out_svg, svg::line_chart(&title, &[("recall".into(), curve)]))?;
        }
        "heatmap" => {
            let model_path = model.ok_or_else(|| anyhow!("heatmap needs --model"))?;
            let (_, labels, lambda) = resolve_lambda(model_path)?;
            // The CSV is exactly the evaluation-module export.
            let n = labels.iter().filter(|l| !l.starts_with("ddx_") && l.as_str() != "bias").count();
            let short: Vec<&str> = labels.iter().take(n).map(String::as_str).collect();
            let csv = weight_heatmap_export(&lambda, &short, labels.len() == 2 * n + 1);
            fs::write(out_csv, &csv)?;
            let values: Vec<Vec<f64>> = (0..lambda.width)
                .map(|r| (0..lambda.z).map(|j| lambda.values[r * lambda.z + j]).collect())
                .collect();
            let cols: Vec<String> = (1..=lambda.z).map(|j| format!("d{j}")).collect();
            fs::write(out_svg, svg::heatmap("descriptor weights", &labels, &cols, &values))?;
        }
        "trace" => {
            let input_path = input.ok_or_else(|| anyhow!("trace needs --input"))?;
            let text = fs::read_to_string(input_path)?;
            let mut csv = String::from("index,round,phase,epoch,l_data,l_sr,l_t,val_mae\n");
            let mut l_t_series = Vec::new();
            let mut val_series = Vec::new();
            let mut index = 0usize;
            for line in text.lines() {
                if line.starts_with('#') || line.starts_with("round\t") || line.trim().is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 7 {
                    bail!("bad trace row '{line}'");
                }
                index += 1;
                csv.push_str(&format!(
                    "{index},{},{},{},{},{},{},{}\n",
                    f[0], f[1], f[2], f[3], f[4], f[5], f[6]
                ));
                l_t_series.push((index as f64, f[5].parse::<f64>()?));
                val_series.push((index as f64, f[6].parse::<f64>()?));
            }
            if index == 0 {
                bail!("trace file has no rows");
            }
            fs::write(out_csv, &csv)?;
            fs::write(
                out_svg,
                svg::line_chart(
                    "training trajectory",
                    &[("l_t".into(), l_t_series), ("val_mae".into(), val_series)],
                ),
            )?;
        }
        other => bail!("unknown plot kind '{other}' (expected kstudy, heatmap, or trace)"),
    }
    println!("wrote {} and {}", out_csv.display(), out_svg.display());
    Ok(())
}
