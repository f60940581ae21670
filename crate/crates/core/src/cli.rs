//! Command implementations behind the `lmc` binary.
//!
//! Every command validates its whole configuration (corpus, chain file,
//! prompt, backend) before the first request goes out. Outputs land in the
//! configured output directory:
//!
//! * `report.csv`: the report table, see [`crate::eval::write_report_table`];
//! * `predictions.jsonl`: one [`SubjectRecord`] per line;
//! * `stage_traces.jsonl`: one [`SubjectTrace`] per line (chains only);
//! * `<chain id>.toml` and `residuals.csv` from `propose`;
//! * `FAILED`: written with the error message when a run stops early.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cascade::{
    run_chain, CascadeError, ChainConfig, ChainFileError, ChainOutcome, PredictionRecord,
    StageTrace,
};
use crate::chain_builder::{benchmarks_from_report, propose_chains, BuildError, ChainProposal};
use crate::corpus::{load_corpus, Corpus, CorpusError, Document};
use crate::eval::{
    chain_report, read_report_table, records_report, write_report_table, EvalError,
    MetricsReport, ValidationMode,
};
use crate::gateway::{
    Backend, ConfigError, Gateway, GatewayError, HttpBackend, MockBackend, ModelSpec,
    PromptTemplate,
};

pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TRACES_FILE: &str = "stage_traces.jsonl";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const FAILURE_MARKER: &str = "FAILED";

/// Printed by `extract` when no model produced a verified date.
pub const NOT_FOUND: &str = "NOT_FOUND";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNRESOLVED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    ChainFile(#[from] ChainFileError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendChoice {
    /// Full URL of the generate endpoint.
    Http { url: String },
    Mock { script: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus_manifest: Option<PathBuf>,
    pub backend: Option<BackendChoice>,
    pub prompt_override: Option<String>,
    pub concurrency_limit: usize,
    pub timeout_seconds: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_manifest: None,
            backend: None,
            prompt_override: None,
            concurrency_limit: 1,
            timeout_seconds: crate::gateway::DEFAULT_TIMEOUT.as_secs_f64(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    fn check_limits(&self) -> Result<(), CliError> {
        if self.concurrency_limit == 0 {
            return Err(CliError::Usage("--concurrency must be at least 1".into()));
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(CliError::Usage("--timeout must be a positive number".into()));
        }
        Ok(())
    }

    fn corpus(&self) -> Result<Corpus, CliError> {
        let path = self
            .corpus_manifest
            .as_deref()
            .ok_or_else(|| CliError::Usage("--manifest is required".into()))?;
        Ok(load_corpus(path)?)
    }

    fn prompt(&self) -> Result<Option<PromptTemplate>, CliError> {
        self.prompt_override
            .as_ref()
            .map(|p| PromptTemplate::new(p.clone()).map_err(CliError::from))
            .transpose()
    }

    /// Builds the gateway and checks it can serve every model in `models`.
    fn gateway(&self, models: &[&ModelSpec]) -> Result<Gateway, CliError> {
        let backend: Arc<dyn Backend> = match &self.backend {
            None => {
                return Err(CliError::Usage(
                    "one of --backend-url or --mock-script is required".into(),
                ))
            }
            Some(BackendChoice::Http { url }) => Arc::new(HttpBackend::new(
                url.clone(),
                Duration::from_secs_f64(self.timeout_seconds),
            )),
            Some(BackendChoice::Mock { script }) => Arc::new(MockBackend::from_path(script)?),
        };
        if let Some(missing) = models.iter().find(|m| !backend.serves_model(m.name())) {
            return Err(CliError::Config(format!(
                "backend cannot serve model {:?}",
                missing.name()
            )));
        }
        Ok(Gateway::new(backend).with_max_in_flight(self.concurrency_limit))
    }

    fn prepare_output(&self) -> Result<(), CliError> {
        let dir = &self.output_dir;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let marker = dir.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(io_err(&marker))?;
        }
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn mark_failed(&self, error: &CliError) {
        // Best effort: the original error is what the caller reports.
        let _ = fs::write(self.out(FAILURE_MARKER), format!("{error}\n"));
    }
}

/// A prediction record tagged with the model or chain that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject: String,
    #[serde(flatten)]
    pub record: PredictionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrace {
    pub subject: String,
    #[serde(flatten)]
    pub trace: StageTrace,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line).map_err(|source| CliError::Json {
                path: path.to_path_buf(),
                line: index + 1,
                source,
            })?,
        );
    }
    Ok(items)
}

fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_report_table(reports, BufWriter::new(file))?;
    Ok(())
}

fn tag(subject: &str, records: &[PredictionRecord]) -> Vec<SubjectRecord> {
    records
        .iter()
        .map(|r| SubjectRecord {
            subject: subject.to_string(),
            record: r.clone(),
        })
        .collect()
}

/// Runs each model on its own over the corpus.
pub fn cmd_bench(config: &RunConfig, models: &[String]) -> Result<Vec<MetricsReport>, CliError> {
    if models.is_empty() {
        return Err(CliError::Usage("--models needs at least one model".into()));
    }
    config.check_limits()?;
    let corpus = config.corpus()?;
    let prompt = config.prompt()?.unwrap_or_default();
    let specs = models
        .iter()
        .map(ModelSpec::new)
        .collect::<Result<Vec<_>, _>>()?;
    let gateway = config.gateway(&specs.iter().collect::<Vec<_>>())?;
    config.prepare_output()?;

    let mut tagged = Vec::new();
    let mut reports = Vec::new();
    for spec in specs {
        let chain = ChainConfig::new(spec.name(), vec![spec.clone()], prompt.clone())?;
        let outcome = match run_chain(&corpus, &chain, &gateway) {
            Ok(outcome) => outcome,
            Err(err) => {
                if let CascadeError::Backend { partial, .. } = &err {
                    tagged.extend(tag(spec.name(), &partial.records));
                }
                let err = CliError::from(err);
                write_jsonl(&config.out(PREDICTIONS_FILE), &tagged)?;
                config.mark_failed(&err);
                return Err(err);
            }
        };
        tagged.extend(tag(spec.name(), &outcome.records));
        for mode in ValidationMode::ALL {
            reports.push(records_report(spec.name(), &outcome.records, &corpus, mode)?);
        }
    }
    write_jsonl(&config.out(PREDICTIONS_FILE), &tagged)?;
    write_reports(&config.out(REPORT_FILE), &reports)?;
    Ok(reports)
}

fn load_chain(config: &RunConfig, chain_file: &Path) -> Result<ChainConfig, CliError> {
    let chain = ChainConfig::from_path(chain_file)?;
    Ok(match config.prompt()? {
        Some(prompt) => chain.with_prompt(prompt),
        None => chain,
    })
}

fn write_chain_outputs(
    config: &RunConfig,
    chain_id: &str,
    outcome: &ChainOutcome,
) -> Result<(), CliError> {
    write_jsonl(&config.out(PREDICTIONS_FILE), &tag(chain_id, &outcome.records))?;
    let traces: Vec<SubjectTrace> = outcome
        .traces
        .iter()
        .map(|t| SubjectTrace {
            subject: chain_id.to_string(),
            trace: t.clone(),
        })
        .collect();
    write_jsonl(&config.out(TRACES_FILE), &traces)
}

/// Runs a chain over the corpus.
pub fn cmd_chain(
    config: &RunConfig,
    chain_file: &Path,
) -> Result<(ChainOutcome, Vec<MetricsReport>), CliError> {
    config.check_limits()?;
    let corpus = config.corpus()?;
    let chain = load_chain(config, chain_file)?;
    let gateway = config.gateway(&chain.models().iter().collect::<Vec<_>>())?;
    config.prepare_output()?;

    let outcome = match run_chain(&corpus, &chain, &gateway) {
        Ok(outcome) => outcome,
        Err(err) => {
            if let CascadeError::Backend { partial, .. } = &err {
                write_chain_outputs(config, chain.id(), partial)?;
            }
            let err = CliError::from(err);
            config.mark_failed(&err);
            return Err(err);
        }
    };
    write_chain_outputs(config, chain.id(), &outcome)?;
    let reports = ValidationMode::ALL
        .iter()
        .map(|&mode| chain_report(chain.id(), &outcome, &corpus, mode))
        .collect::<Result<Vec<_>, _>>()?;
    write_reports(&config.out(REPORT_FILE), &reports)?;
    Ok((outcome, reports))
}

/// Reads a bench report table and writes chain proposals plus the residual
/// ranking.
pub fn cmd_propose(
    config: &RunConfig,
    bench_report: &Path,
    k: usize,
    mode: ValidationMode,
) -> Result<Vec<ChainProposal>, CliError> {
    if k < 2 {
        return Err(CliError::Usage(format!("--k must be at least 2, got {k}")));
    }
    let prompt = config.prompt()?.unwrap_or_default();
    let file = File::open(bench_report).map_err(io_err(bench_report))?;
    let rows = read_report_table(BufReader::new(file))?;
    let benchmarks = benchmarks_from_report(&rows)?;
    let proposals = propose_chains(&benchmarks, k, mode, &prompt)?;
    config.prepare_output()?;

    for p in &proposals {
        let path = config.out(&format!("{}.toml", p.chain.id()));
        let body = format!(
            "# {}\n{}",
            p.rationale.replace('\n', " "),
            p.chain.to_toml()
        );
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    if let Some(first) = proposals.first() {
        let path = config.out(RESIDUALS_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(EvalError::from)?;
        w.write_record(["rank", "model", "residual"])
            .map_err(EvalError::from)?;
        for (rank, (model, residual)) in first.residuals.iter().enumerate() {
            w.write_record([(rank + 1).to_string(), model.clone(), format!("{residual:.4}")])
                .map_err(EvalError::from)?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(proposals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOutcome {
    pub record: PredictionRecord,
    pub traces: Vec<StageTrace>,
}

impl ExtractOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.record.is_resolved() {
            EXIT_OK
        } else {
            EXIT_UNRESOLVED
        }
    }

    pub fn render(&self) -> String {
        let r = &self.record;
        let date = match (r.is_resolved(), r.answer) {
            (true, Some(d)) => d.to_string(),
            _ => NOT_FOUND.to_string(),
        };
        let stage = r
            .stage_index
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "date_of_birth: {date}\nstage: {stage}\nmodel: {}\nelapsed_seconds: {}\n",
            r.model_name.as_deref().unwrap_or("none"),
            r.elapsed_seconds_total
        )
    }
}

/// Runs a chain on a single text file. The document id used for the backend
/// is the file stem.
pub fn cmd_extract(
    config: &RunConfig,
    chain_file: &Path,
    text_path: &Path,
) -> Result<ExtractOutcome, CliError> {
    config.check_limits()?;
    let chain = load_chain(config, chain_file)?;
    let raw = fs::read_to_string(text_path).map_err(io_err(text_path))?;
    let id = text_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "document".to_string());
    let corpus = Corpus::new(
        vec![Document::new(id, &raw, None)],
        text_path.display().to_string(),
    )?;
    let gateway = config.gateway(&chain.models().iter().collect::<Vec<_>>())?;
    let mut outcome = run_chain(&corpus, &chain, &gateway)?;
    let record = outcome.records.pop().expect("one document in, one record out");
    Ok(ExtractOutcome {
        record,
        traces: outcome.traces,
    })
}

/// Re-derives the report table from stored prediction records (and, when
/// given, stage traces for per-stage rows).
pub fn cmd_report(
    config: &RunConfig,
    records_path: &Path,
    traces_path: Option<&Path>,
) -> Result<Vec<MetricsReport>, CliError> {
    let corpus = config.corpus()?;
    let records: Vec<SubjectRecord> = read_jsonl(records_path)?;
    let traces: Vec<SubjectTrace> = match traces_path {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };

    let mut subjects: Vec<&str> = Vec::new();
    for r in &records {
        if !subjects.contains(&r.subject.as_str()) {
            subjects.push(&r.subject);
        }
    }
    let mut reports = Vec::new();
    for subject in subjects {
        let outcome = ChainOutcome {
            records: records
                .iter()
                .filter(|r| r.subject == subject)
                .map(|r| r.record.clone())
                .collect(),
            traces: traces
                .iter()
                .filter(|t| t.subject == subject)
                .map(|t| t.trace.clone())
                .collect(),
        };
        for mode in ValidationMode::ALL {
            reports.push(if outcome.traces.is_empty() {
                records_report(subject, &outcome.records, &corpus, mode)?
            } else {
                chain_report(subject, &outcome, &corpus, mode)?
            });
        }
    }
    config.prepare_output()?;
    write_reports(&config.out(REPORT_FILE), &reports)?;
    Ok(reports)
}
