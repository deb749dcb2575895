//! Delimited-log ingestion for Duolingo-style spaced-repetition exports.

use super::{DatasetError, InteractionRecord};
use std::collections::HashMap;
use std::io::BufRead;

/// Maps our record fields to column names in the input header. The default
/// matches the public Duolingo spaced-repetition log.
#[derive(Clone, Debug)]
pub struct ColumnSchema {
    pub recall: String,
    pub timestamp: String,
    pub delta: String,
    pub learner: String,
    pub item: String,
    pub history_seen: String,
    pub history_correct: String,
    pub session_seen: String,
    pub session_correct: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            recall: "p_recall".into(),
            timestamp: "timestamp".into(),
            delta: "delta".into(),
            learner: "user_id".into(),
            item: "lexeme_id".into(),
            history_seen: "history_seen".into(),
            history_correct: "history_correct".into(),
            session_seen: "session_seen".into(),
            session_correct: "session_correct".into(),
        }
    }
}

impl ColumnSchema {
    /// Apply `field=column` overrides to the default map. Field names match
    /// the struct fields.
    pub fn with_overrides(overrides: &[(String, String)]) -> Result<Self, DatasetError> {
        let mut schema = ColumnSchema::default();
        for (field, column) in overrides {
            let slot = match field.as_str() {
                "recall" => &mut schema.recall,
                "timestamp" => &mut schema.timestamp,
                "delta" => &mut schema.delta,
                "learner" => &mut schema.learner,
                "item" => &mut schema.item,
                "history_seen" => &mut schema.history_seen,
                "history_correct" => &mut schema.history_correct,
                "session_seen" => &mut schema.session_seen,
                "session_correct" => &mut schema.session_correct,
                other => return Err(DatasetError::MissingColumn(format!("unknown field '{other}'"))),
            };
            *slot = column.clone();
        }
        Ok(schema)
    }
}

/// A rejected input row and why it was dropped.
#[derive(Clone, Debug)]
pub struct RejectedRow {
    /// 1-based line number in the input.
    pub line: usize,
    pub reason: String,
}

/// Records accepted in file order plus the rejects, counted and explained.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<InteractionRecord>,
    pub rejected: Vec<RejectedRow>,
}

fn sniff_delimiter(header: &str) -> char {
    if header.contains('\t') {
        '\t'
    } else {
        ','
    }
}

/// Parse a tab- or comma-separated log with a header row. Rows that fail to
/// parse or violate record invariants are rejected with their line number;
/// a mapped column missing from the header is a schema error.
pub fn parse_log<R: BufRead>(reader: R, schema: &ColumnSchema) -> Result<ParseOutcome, DatasetError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(Ok(h)) => h,
        _ => return Err(DatasetError::EmptyInput),
    };
    let delim = sniff_delimiter(&header);
    let columns: HashMap<&str, usize> = header
        .split(delim)
        .enumerate()
        .map(|(i, name)| (name.trim(), i))
        .collect();

    let required = [
        &schema.recall,
        &schema.timestamp,
        &schema.delta,
        &schema.learner,
        &schema.item,
        &schema.history_seen,
        &schema.history_correct,
        &schema.session_seen,
        &schema.session_correct,
    ];
    let mut idx = [0usize; 9];
    for (slot, name) in idx.iter_mut().zip(required.iter()) {
        *slot = *columns
            .get(name.as_str())
            .ok_or_else(|| DatasetError::MissingColumn((*name).clone()))?;
    }
    let [i_recall, i_ts, i_delta, i_learner, i_item, i_hseen, i_hcorr, i_sseen, i_scorr] = idx;

    let mut outcome = ParseOutcome::default();
    for (line_idx, line) in lines.enumerate() {
        let line_no = line_idx + 2; // header is line 1
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                outcome.rejected.push(RejectedRow {
                    line: line_no,
                    reason: format!("unreadable line: {e}"),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        let get = |i: usize| -> Result<&str, String> {
            fields
                .get(i)
                .copied()
                .ok_or_else(|| format!("row has {} fields, needed index {}", fields.len(), i))
        };
        let parsed: Result<InteractionRecord, String> = (|| {
            let recall: f64 = get(i_recall)?
                .parse()
                .map_err(|e| format!("recall: {e}"))?;
            let timestamp: i64 = get(i_ts)?.parse().map_err(|e| format!("timestamp: {e}"))?;
            let delta_t: f64 = get(i_delta)?.parse().map_err(|e| format!("delta: {e}"))?;
            let history_seen: u32 = get(i_hseen)?
                .parse()
                .map_err(|e| format!("history_seen: {e}"))?;
            let history_correct: u32 = get(i_hcorr)?
                .parse()
                .map_err(|e| format!("history_correct: {e}"))?;
            let session_seen: u32 = get(i_sseen)?
                .parse()
                .map_err(|e| format!("session_seen: {e}"))?;
            let session_correct: u32 = get(i_scorr)?
                .parse()
                .map_err(|e| format!("session_correct: {e}"))?;
            let record = InteractionRecord {
                learner_id: get(i_learner)?.to_string(),
                item_id: get(i_item)?.to_string(),
                timestamp,
                delta_t,
                recall_outcome: recall,
                history_seen,
                history_correct,
                session_seen,
                session_correct,
            };
            record.check()?;
            Ok(record)
        })();
        match parsed {
            Ok(record) => outcome.records.push(record),
            Err(reason) => outcome.rejected.push(RejectedRow {
                line: line_no,
                reason,
            }),
        }
    }
    Ok(outcome)
}
