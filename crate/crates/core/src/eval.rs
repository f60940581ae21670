//! Scoring, throughput statistics and the report table.
//!
//! Predictions are scored in two modes: [`ValidationMode::InDocument`] counts
//! an answer as correct when it is one of the document's own candidate dates,
//! [`ValidationMode::MatchesTarget`] only when it equals the expert target.
//! Throughput is `characters / (4 * seconds)`, i.e. four characters per token.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cascade::{ChainOutcome, PredictionRecord, StageTrace};
use crate::corpus::{Corpus, Document};
use crate::dates::{extract_candidates, CanonicalDate};

pub const CHARS_PER_TOKEN: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no record for document {0:?}")]
    MissingRecord(String),
    #[error("record for unknown document {0:?}")]
    UnknownDocument(String),
    #[error("more than one record for document {0:?}")]
    DuplicateRecord(String),
    #[error("elapsed seconds must be positive, got {0}")]
    NonPositiveSeconds(f64),
    #[error("cannot summarise an empty sample")]
    EmptySample,
    #[error("mean tokens per second must be positive")]
    ZeroThroughput,
    #[error("unknown validation mode {0:?}")]
    UnknownMode(String),
    #[error("report table: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    InDocument,
    MatchesTarget,
}

impl ValidationMode {
    pub const ALL: [ValidationMode; 2] = [ValidationMode::InDocument, ValidationMode::MatchesTarget];

    pub fn as_str(&self) -> &'static str {
        match self {
            ValidationMode::InDocument => "in_document",
            ValidationMode::MatchesTarget => "matches_target",
        }
    }
}

impl fmt::Display for ValidationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValidationMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in_document" => Ok(ValidationMode::InDocument),
            "matches_target" => Ok(ValidationMode::MatchesTarget),
            other => Err(EvalError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, answer: Option<CanonicalDate>, doc: &Document, mode: ValidationMode) {
        match mode {
            ValidationMode::InDocument => {
                let candidates = extract_candidates(doc.text());
                match answer {
                    Some(a) if candidates.contains(&a) => self.tp += 1,
                    Some(_) => self.fp += 1,
                    None if !candidates.is_empty() => self.fn_ += 1,
                    None => self.tn += 1,
                }
            }
            ValidationMode::MatchesTarget => match (answer, doc.target()) {
                (Some(a), Some(t)) if a == t => self.tp += 1,
                (Some(_), _) => self.fp += 1,
                (None, Some(_)) => self.fn_ += 1,
                (None, None) => self.tn += 1,
            },
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn percentage(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        100.0 * numerator as f64 / denominator as f64
    }
}

/// Harmonic mean of two percentages, 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn compute_metrics(m: &ConfusionMatrix) -> Metrics {
    let precision = percentage(m.tp, m.tp + m.fp);
    let recall = percentage(m.tp, m.tp + m.fn_);
    Metrics {
        precision,
        recall,
        f1: f1_from(precision, recall),
    }
}

fn index_records<'a>(
    records: &'a [PredictionRecord],
    corpus: &Corpus,
) -> Result<HashMap<&'a str, &'a PredictionRecord>, EvalError> {
    let mut by_id = HashMap::with_capacity(records.len());
    for r in records {
        if corpus.get(&r.document_id).is_none() {
            return Err(EvalError::UnknownDocument(r.document_id.clone()));
        }
        if by_id.insert(r.document_id.as_str(), r).is_some() {
            return Err(EvalError::DuplicateRecord(r.document_id.clone()));
        }
    }
    if let Some(doc) = corpus
        .documents()
        .iter()
        .find(|d| !by_id.contains_key(d.id()))
    {
        return Err(EvalError::MissingRecord(doc.id().to_string()));
    }
    Ok(by_id)
}

/// Scores one record per corpus document.
pub fn score(
    records: &[PredictionRecord],
    corpus: &Corpus,
    mode: ValidationMode,
) -> Result<ConfusionMatrix, EvalError> {
    let by_id = index_records(records, corpus)?;
    let mut matrix = ConfusionMatrix::default();
    for doc in corpus.documents() {
        matrix.add(by_id[doc.id()].answer, doc, mode);
    }
    Ok(matrix)
}

/// Scores only the documents a stage was asked about, using that stage's own
/// answers.
pub fn score_stage(
    trace: &StageTrace,
    corpus: &Corpus,
    mode: ValidationMode,
) -> Result<ConfusionMatrix, EvalError> {
    let mut matrix = ConfusionMatrix::default();
    for visit in &trace.visits {
        let doc = corpus
            .get(&visit.document_id)
            .ok_or_else(|| EvalError::UnknownDocument(visit.document_id.clone()))?;
        matrix.add(visit.answer, doc, mode);
    }
    Ok(matrix)
}

pub fn tokens_per_second(doc: &Document, elapsed_seconds: f64) -> Result<f64, EvalError> {
    if elapsed_seconds.is_nan() || elapsed_seconds <= 0.0 {
        return Err(EvalError::NonPositiveSeconds(elapsed_seconds));
    }
    Ok(doc.char_count() as f64 / (CHARS_PER_TOKEN * elapsed_seconds))
}

/// Throughput of a whole chain on one document: the latencies of every stage
/// that saw the document add up.
pub fn chain_tps(doc: &Document, record: &PredictionRecord) -> Result<f64, EvalError> {
    tokens_per_second(doc, record.elapsed_seconds_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpsStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile of sorted data, interpolating linearly between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize_tps(samples: &[f64]) -> Result<TpsStats, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(TpsStats {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_index: usize,
    pub model_name: String,
    pub n_documents: usize,
    pub matrix: ConfusionMatrix,
    pub metrics: Metrics,
    pub tps: Option<TpsStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject: String,
    pub mode: ValidationMode,
    pub n_documents: usize,
    pub matrix: ConfusionMatrix,
    pub metrics: Metrics,
    /// `None` only for an empty corpus.
    pub tps: Option<TpsStats>,
    /// Present for chains only.
    pub per_stage: Option<Vec<StageReport>>,
}

fn tps_of<'a>(
    corpus: &Corpus,
    latencies: impl Iterator<Item = (&'a str, f64)>,
) -> Result<Option<TpsStats>, EvalError> {
    let samples = latencies
        .map(|(id, secs)| {
            let doc = corpus
                .get(id)
                .ok_or_else(|| EvalError::UnknownDocument(id.to_string()))?;
            tokens_per_second(doc, secs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        Ok(None)
    } else {
        summarize_tps(&samples).map(Some)
    }
}

/// Report for a set of final records: one model run standalone, or the
/// combined result of a chain (without per-stage rows).
pub fn records_report(
    subject: impl Into<String>,
    records: &[PredictionRecord],
    corpus: &Corpus,
    mode: ValidationMode,
) -> Result<MetricsReport, EvalError> {
    let matrix = score(records, corpus, mode)?;
    let tps = tps_of(
        corpus,
        records
            .iter()
            .map(|r| (r.document_id.as_str(), r.elapsed_seconds_total)),
    )?;
    Ok(MetricsReport {
        subject: subject.into(),
        mode,
        n_documents: corpus.len(),
        matrix,
        metrics: compute_metrics(&matrix),
        tps,
        per_stage: None,
    })
}

pub fn chain_report(
    chain_id: impl Into<String>,
    outcome: &ChainOutcome,
    corpus: &Corpus,
    mode: ValidationMode,
) -> Result<MetricsReport, EvalError> {
    let mut report = records_report(chain_id, &outcome.records, corpus, mode)?;
    let stages = outcome
        .traces
        .iter()
        .map(|trace| {
            let matrix = score_stage(trace, corpus, mode)?;
            Ok(StageReport {
                stage_index: trace.stage_index,
                model_name: trace.model_name.clone(),
                n_documents: trace.documents_in,
                matrix,
                metrics: compute_metrics(&matrix),
                tps: tps_of(corpus, trace.per_document_latency())?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    report.per_stage = Some(stages);
    Ok(report)
}

/// Seconds per token implied by the mean throughput.
pub fn reciprocal_mean_tps(report: &MetricsReport) -> Result<f64, EvalError> {
    match report.tps {
        Some(stats) if stats.mean > 0.0 => Ok(1.0 / stats.mean),
        _ => Err(EvalError::ZeroThroughput),
    }
}

/// One row of the report table. Percentages carry one decimal place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject: String,
    pub mode: ValidationMode,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tps_min: Option<f64>,
    pub tps_q1: Option<f64>,
    pub tps_median: Option<f64>,
    pub tps_mean: Option<f64>,
    pub tps_q3: Option<f64>,
    pub tps_max: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "subject",
    "mode",
    "n",
    "tp",
    "fp",
    "fn",
    "tn",
    "precision",
    "recall",
    "f1",
    "tps_min",
    "tps_q1",
    "tps_median",
    "tps_mean",
    "tps_q3",
    "tps_max",
];

/// Subject label for a chain's per-stage rows.
pub fn stage_subject(chain_id: &str, stage: &StageReport) -> String {
    format!("{chain_id}/{}/{}", stage.stage_index, stage.model_name)
}

fn table_row(
    subject: &str,
    mode: ValidationMode,
    n: usize,
    m: &ConfusionMatrix,
    metrics: &Metrics,
    tps: Option<&TpsStats>,
) -> Vec<String> {
    let mut row = vec![
        subject.to_string(),
        mode.to_string(),
        n.to_string(),
        m.tp.to_string(),
        m.fp.to_string(),
        m.fn_.to_string(),
        m.tn.to_string(),
        format!("{:.1}", metrics.precision),
        format!("{:.1}", metrics.recall),
        format!("{:.1}", metrics.f1),
    ];
    match tps {
        Some(s) => row.extend(
            [s.min, s.q1, s.median, s.mean, s.q3, s.max]
                .iter()
                .map(|v| format!("{v:.4}")),
        ),
        None => row.extend(std::iter::repeat_n(String::new(), 6)),
    }
    row
}

/// Writes reports as CSV, one row per report plus one per chain stage.
pub fn write_report_table<W: io::Write>(
    reports: &[MetricsReport],
    writer: W,
) -> Result<(), EvalError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(REPORT_COLUMNS)?;
    for r in reports {
        csv.write_record(table_row(
            &r.subject,
            r.mode,
            r.n_documents,
            &r.matrix,
            &r.metrics,
            r.tps.as_ref(),
        ))?;
        for stage in r.per_stage.iter().flatten() {
            csv.write_record(table_row(
                &stage_subject(&r.subject, stage),
                r.mode,
                stage.n_documents,
                &stage.matrix,
                &stage.metrics,
                stage.tps.as_ref(),
            ))?;
        }
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_report_table<R: io::Read>(reader: R) -> Result<Vec<ReportRow>, EvalError> {
    let mut csv = csv::Reader::from_reader(reader);
    let rows = csv.deserialize().collect::<Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}
