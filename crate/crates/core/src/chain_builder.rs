//! Chain proposals from standalone benchmark results.
//!
//! Each model is a point (mean tokens per second, F1). A line is anchored at
//! `(0, max F1)` and its slope fitted by least squares; models sitting furthest
//! above that line are fast for how accurate they are, which makes them good
//! chain members.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::cascade::{ChainConfig, ChainFileError};
use crate::eval::{ReportRow, ValidationMode};
use crate::gateway::{ModelSpec, PromptTemplate};

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("need at least 2 benchmarks to fit a line, got {0}")]
    TooFewPoints(usize),
    #[error("mean tokens per second has no variance")]
    ZeroVariance,
    #[error("benchmark {model:?}: {reason}")]
    InvalidBenchmark { model: String, reason: String },
    #[error("chain length must be at least 2, got {0}")]
    ChainTooShort(usize),
    #[error("chain length {k} exceeds the {available} benchmarked models")]
    NotEnoughModels { k: usize, available: usize },
    #[error("report has no in_document row for {0:?}")]
    MissingInDocument(String),
    #[error(transparent)]
    Chain(#[from] ChainFileError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBenchmark {
    pub model: ModelSpec,
    pub mean_tps: f64,
    pub f1_in_document: f64,
    /// Absent when the report carried no target-mode row for the model.
    pub f1_matches_target: Option<f64>,
}

impl ModelBenchmark {
    fn f1(&self, mode: ValidationMode) -> Option<f64> {
        match mode {
            ValidationMode::InDocument => Some(self.f1_in_document),
            ValidationMode::MatchesTarget => self.f1_matches_target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationLine {
    pub anchor_y: f64,
    pub slope: f64,
    pub pearson_r: f64,
}

impl CorrelationLine {
    pub fn at(&self, tps: f64) -> f64 {
        self.anchor_y + self.slope * tps
    }

    pub fn residual(&self, tps: f64, f1: f64) -> f64 {
        f1 - self.at(tps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainProposal {
    pub chain: ChainConfig,
    pub rationale: String,
    pub residuals: Vec<(String, f64)>,
}

fn points(
    benchmarks: &[ModelBenchmark],
    mode: ValidationMode,
) -> Result<Vec<(f64, f64)>, BuildError> {
    benchmarks
        .iter()
        .map(|b| {
            let invalid = |reason: &str| BuildError::InvalidBenchmark {
                model: b.model.name().to_string(),
                reason: reason.to_string(),
            };
            let f1 = b.f1(mode).ok_or_else(|| invalid("no F1 for this mode"))?;
            if !(0.0..=100.0).contains(&f1) {
                return Err(invalid("F1 outside [0, 100]"));
            }
            if !(b.mean_tps.is_finite() && b.mean_tps >= 0.0) {
                return Err(invalid("mean tokens per second must be finite and non-negative"));
            }
            Ok((b.mean_tps, f1))
        })
        .collect()
}

/// Fits the anchored line and the Pearson correlation of (mean TPS, F1).
/// A constant F1 gives `pearson_r = 0`.
pub fn fit_correlation(
    benchmarks: &[ModelBenchmark],
    mode: ValidationMode,
) -> Result<CorrelationLine, BuildError> {
    let pts = points(benchmarks, mode)?;
    if pts.len() < 2 {
        return Err(BuildError::TooFewPoints(pts.len()));
    }
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(BuildError::ZeroVariance);
    }
    let pearson_r = if syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };

    // Least squares with the intercept pinned at the best F1.
    let anchor_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let num: f64 = pts.iter().map(|p| p.0 * (p.1 - anchor_y)).sum();
    let den: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    Ok(CorrelationLine {
        anchor_y,
        slope: num / den,
        pearson_r,
    })
}

/// Models by descending residual; ties go to the faster model, then by name.
pub fn rank_by_residual(
    benchmarks: &[ModelBenchmark],
    line: &CorrelationLine,
    mode: ValidationMode,
) -> Result<Vec<(ModelBenchmark, f64)>, BuildError> {
    let pts = points(benchmarks, mode)?;
    let mut ranked: Vec<(ModelBenchmark, f64)> = benchmarks
        .iter()
        .zip(pts)
        .map(|(b, (x, y))| (b.clone(), line.residual(x, y)))
        .collect();
    ranked.sort_by(|(a, ra), (b, rb)| {
        rb.total_cmp(ra)
            .then_with(|| b.mean_tps.total_cmp(&a.mean_tps))
            .then_with(|| a.model.name().cmp(b.model.name()))
    });
    Ok(ranked)
}

fn fastest_first(a: &ModelBenchmark, b: &ModelBenchmark) -> Ordering {
    b.mean_tps
        .total_cmp(&a.mean_tps)
        .then_with(|| a.model.name().cmp(b.model.name()))
}

fn names(models: &[ModelBenchmark]) -> String {
    models
        .iter()
        .map(|m| m.model.name())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Proposes chains from the `k` models furthest above the fitted line:
///
/// 1. all `k`, fastest first;
/// 2. the first `k - 1` of those, and the same prefix reversed (for order
///    studies). When `k = 2` the prefix would be a single model, so the full
///    chain is reversed instead.
pub fn propose_chains(
    benchmarks: &[ModelBenchmark],
    k: usize,
    mode: ValidationMode,
    prompt: &PromptTemplate,
) -> Result<Vec<ChainProposal>, BuildError> {
    if k < 2 {
        return Err(BuildError::ChainTooShort(k));
    }
    let line = fit_correlation(benchmarks, mode)?;
    if k > benchmarks.len() {
        return Err(BuildError::NotEnoughModels {
            k,
            available: benchmarks.len(),
        });
    }
    let ranked = rank_by_residual(benchmarks, &line, mode)?;
    let residuals: Vec<(String, f64)> = ranked
        .iter()
        .map(|(b, r)| (b.model.name().to_string(), *r))
        .collect();

    let mut top: Vec<ModelBenchmark> = ranked.iter().take(k).map(|(b, _)| b.clone()).collect();
    top.sort_by(fastest_first);

    let fit = format!(
        "line F1 = {:.3} {:+.6} * tps (pearson r = {:.3}, mode {mode})",
        line.anchor_y, line.slope, line.pearson_r
    );
    let build = |id: String, members: &[ModelBenchmark], why: String| {
        let models = members.iter().map(|m| m.model.clone()).collect();
        Ok::<_, BuildError>(ChainProposal {
            chain: ChainConfig::new(id, models, prompt.clone())?,
            rationale: format!("{why}; {fit}"),
            residuals: residuals.clone(),
        })
    };

    let mut proposals = vec![build(
        format!("top{k}"),
        &top,
        format!(
            "the {k} models furthest above the line, fastest first: {}",
            names(&top)
        ),
    )?];
    if k > 2 {
        let prefix = &top[..k - 1];
        let mut reversed = prefix.to_vec();
        reversed.reverse();
        proposals.push(build(
            format!("top{k}_prefix{}", k - 1),
            prefix,
            format!("the first {} models of top{k}: {}", k - 1, names(prefix)),
        )?);
        proposals.push(build(
            format!("top{k}_prefix{}_reversed", k - 1),
            &reversed,
            format!(
                "top{k}_prefix{} in reverse order: {}",
                k - 1,
                names(&reversed)
            ),
        )?);
    } else {
        let mut reversed = top.clone();
        reversed.reverse();
        proposals.push(build(
            format!("top{k}_reversed"),
            &reversed,
            format!("top{k} in reverse order: {}", names(&reversed)),
        )?);
    }
    Ok(proposals)
}

/// Collects one benchmark per subject from a report table. Only the
/// `in_document` row is required; `tps_mean` is taken from it.
pub fn benchmarks_from_report(rows: &[ReportRow]) -> Result<Vec<ModelBenchmark>, BuildError> {
    let mut by_subject: BTreeMap<&str, (Option<&ReportRow>, Option<&ReportRow>)> =
        BTreeMap::new();
    let mut order = Vec::new();
    for row in rows {
        let entry = by_subject.entry(row.subject.as_str()).or_insert_with(|| {
            order.push(row.subject.as_str());
            (None, None)
        });
        match row.mode {
            ValidationMode::InDocument => entry.0 = Some(row),
            ValidationMode::MatchesTarget => entry.1 = Some(row),
        }
    }
    order
        .into_iter()
        .map(|subject| {
            let (in_doc, target) = by_subject[subject];
            let in_doc = in_doc.ok_or_else(|| BuildError::MissingInDocument(subject.to_string()))?;
            let model = ModelSpec::new(subject).map_err(|e| BuildError::InvalidBenchmark {
                model: subject.to_string(),
                reason: e.to_string(),
            })?;
            let mean_tps = in_doc.tps_mean.ok_or_else(|| BuildError::InvalidBenchmark {
                model: subject.to_string(),
                reason: "no tps_mean".to_string(),
            })?;
            Ok(ModelBenchmark {
                model,
                mean_tps,
                f1_in_document: in_doc.f1,
                f1_matches_target: target.map(|t| t.f1),
            })
        })
        .collect()
}
