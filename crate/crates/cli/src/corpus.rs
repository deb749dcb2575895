//! Self-describing featurized corpus files: a commented header naming the
//! feature columns, then one tab-separated row per interaction.

use anyhow::{anyhow, bail, Context, Result};
use recall_core::dataset::{FeatureVector, LearnerSequence, SequenceStep};

/// Serialize sequences with their feature naming. Full float precision so a
/// rewrite of the same data is byte-identical.
pub fn write_corpus(sequences: &[LearnerSequence], feature_names: &[String]) -> String {
    let n = feature_names.len();
    let mut out = String::from("#corpus v1\n");
    out.push_str(&format!("#n={n}\n"));
    out.push_str(&format!("#features={}\n", feature_names.join(",")));
    out.push_str("learner\ttimestamp\tdelta_days");
    for name in feature_names {
        out.push('\t');
        out.push_str(name);
    }
    out.push_str("\ty\n");
    for seq in sequences {
        for step in &seq.steps {
            debug_assert_eq!(step.features.len(), n);
            out.push_str(&format!(
                "{}\t{}\t{:e}",
                seq.learner_id, step.timestamp, step.delta_days
            ));
            for v in step.features.values() {
                out.push_str(&format!("\t{v:e}"));
            }
            out.push_str(&format!("\t{:e}\n", step.outcome));
        }
    }
    out
}

/// Parse a corpus file back into sequences plus the feature names.
/// Sequences come back in first-appearance order with steps in file order.
pub fn read_corpus(text: &str) -> Result<(Vec<LearnerSequence>, Vec<String>)> {
    let mut feature_names: Option<Vec<String>> = None;
    let mut sequences: Vec<LearnerSequence> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut saw_header_row = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.starts_with("#features=") {
            feature_names = Some(
                line["#features=".len()..]
                    .split(',')
                    .map(str::to_string)
                    .collect(),
            );
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !saw_header_row {
            // Column header row.
            if !line.starts_with("learner\t") {
                bail!("line {lineno}: expected the column header, got '{line}'");
            }
            saw_header_row = true;
            continue;
        }
        let names = feature_names
            .as_ref()
            .ok_or_else(|| anyhow!("missing #features header before data rows"))?;
        let n = names.len();
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 + n {
            bail!(
                "line {lineno}: expected {} fields, found {}",
                4 + n,
                fields.len()
            );
        }
        let learner = fields[0].to_string();
        let timestamp: i64 = fields[1]
            .parse()
            .with_context(|| format!("line {lineno}: timestamp"))?;
        let delta_days: f64 = fields[2]
            .parse()
            .with_context(|| format!("line {lineno}: delta_days"))?;
        let mut values = Vec::with_capacity(n);
        for (i, f) in fields[3..3 + n].iter().enumerate() {
            values.push(
                f.parse::<f64>()
                    .with_context(|| format!("line {lineno}: feature {}", i + 1))?,
            );
        }
        let outcome: f64 = fields[3 + n]
            .parse()
            .with_context(|| format!("line {lineno}: y"))?;
        let slot = *index.entry(learner.clone()).or_insert_with(|| {
            sequences.push(LearnerSequence {
                learner_id: learner.clone(),
                steps: Vec::new(),
            });
            sequences.len() - 1
        });
        sequences[slot].steps.push(SequenceStep {
            features: FeatureVector::new(values),
            outcome,
            timestamp,
            delta_days,
        });
    }
    let names = feature_names.ok_or_else(|| anyhow!("not a corpus file (missing #features)"))?;
    Ok((sequences, names))
}
