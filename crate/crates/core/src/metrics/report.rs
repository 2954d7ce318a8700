//! On-disk report formats. See `docs/FORMATS.md`.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapt::StepRecord;
use crate::{Error, Result};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const TRACE_HEADER: &str = "# gala-trace v1";

/// Per-run machine-readable summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    pub format_version: u32,
    pub label: String,
    pub seed: u64,
    pub fingerprint: String,
    pub tta_acc: f64,
    pub generalization: f64,
    pub forgetting: f64,
    /// Target-holdout accuracy of the frozen pretrained model.
    pub erm_generalization: f64,
    pub rank_correlation: Option<f64>,
    pub group_names: Vec<String>,
    pub selection_frequency: Vec<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
}

impl MetricsSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.format_version != SUMMARY_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported summary version {}",
                s.format_version
            )));
        }
        Ok(s)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    step: u64,
    correct: usize,
    total: usize,
    loss: f64,
    first_of_window: u8,
    skipped: u8,
    warmup_scale: f64,
    reset: u8,
    cosines: String,
    mask: String,
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

fn parse_flag(v: u8) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Format(format!("flag must be 0 or 1, got {other}"))),
    }
}

/// Writes a decision trace: a version line, then CSV with `;`-joined per-group lists.
pub fn write_trace<W: Write>(mut out: W, steps: &[StepRecord]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    for s in steps {
        let cosines = s
            .cosines
            .iter()
            .map(|c| c.map(|v| v.to_string()).unwrap_or_else(|| "undef".into()))
            .collect::<Vec<_>>()
            .join(";");
        let mask = s
            .mask
            .iter()
            .map(|&m| if m { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(";");
        w.serialize(TraceRow {
            step: s.step,
            correct: s.correct,
            total: s.total,
            loss: s.loss,
            first_of_window: flag(s.first_of_window),
            skipped: flag(s.skipped),
            warmup_scale: s.warmup_scale,
            reset: flag(s.reset),
            cosines,
            mask,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != TRACE_HEADER {
        return Err(Error::Format(format!(
            "expected {TRACE_HEADER:?}, found {:?}",
            first.trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(reader);
    let mut steps = Vec::new();
    for row in r.deserialize::<TraceRow>() {
        let row = row?;
        let split = |s: &str| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(';').map(str::to_owned).collect()
            }
        };
        let cosines = split(&row.cosines)
            .iter()
            .map(|c| match c.as_str() {
                "undef" => Ok(None),
                v => v
                    .parse()
                    .map(Some)
                    .map_err(|e| Error::Format(format!("bad cosine {v:?}: {e}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = split(&row.mask)
            .iter()
            .map(|m| match m.as_str() {
                "0" => Ok(false),
                "1" => Ok(true),
                v => Err(Error::Format(format!("bad mask entry {v:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        steps.push(StepRecord {
            step: row.step,
            correct: row.correct,
            total: row.total,
            loss: row.loss,
            first_of_window: parse_flag(row.first_of_window)?,
            skipped: parse_flag(row.skipped)?,
            warmup_scale: row.warmup_scale,
            reset: parse_flag(row.reset)?,
            cosines,
            mask,
        });
    }
    Ok(steps)
}

/// Mean and sample standard deviation across seeds for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub seeds: usize,
    pub tta_acc_mean: f64,
    pub tta_acc_std: f64,
    pub generalization_mean: f64,
    pub generalization_std: f64,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
    pub rank_correlation_mean: Option<f64>,
    pub rank_correlation_std: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Groups summaries by label (first-seen order) and reduces each group.
pub fn aggregate(summaries: &[MetricsSummary]) -> Vec<AggregateRow> {
    let mut labels: Vec<&str> = Vec::new();
    for s in summaries {
        if !labels.contains(&s.label.as_str()) {
            labels.push(&s.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&MetricsSummary> = summaries.iter().filter(|s| s.label == label).collect();
            let col = |f: fn(&MetricsSummary) -> f64| mean_std(&group.iter().map(|s| f(s)).collect::<Vec<_>>());
            let (tta_acc_mean, tta_acc_std) = col(|s| s.tta_acc);
            let (generalization_mean, generalization_std) = col(|s| s.generalization);
            let (forgetting_mean, forgetting_std) = col(|s| s.forgetting);
            let ranks: Vec<f64> = group.iter().filter_map(|s| s.rank_correlation).collect();
            let (rank_correlation_mean, rank_correlation_std) = if ranks.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&ranks);
                (Some(m), Some(s))
            };
            AggregateRow {
                label: label.to_string(),
                seeds: group.len(),
                tta_acc_mean,
                tta_acc_std,
                generalization_mean,
                generalization_std,
                forgetting_mean,
                forgetting_std,
                rank_correlation_mean,
                rank_correlation_std,
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate_csv<R: Read>(input: R) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
