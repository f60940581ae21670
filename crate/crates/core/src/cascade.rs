//! The chain engine.
//!
//! Every document is first reduced to its candidate dates. The head model is
//! then asked about every document; a document whose answer is one of its own
//! candidates is resolved and leaves the chain, the rest move on to the next
//! model. This repeats until the models run out or nothing is left.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dates::{extract_candidates, CandidateSet, CanonicalDate};
use crate::gateway::{
    extract_answer_with, ConfigError, Gateway, GatewayError, GenerationOptions, ModelSpec,
    PromptTemplate, ThinkingMarkers,
};

#[derive(Debug, thiserror::Error)]
pub enum CascadeError {
    #[error("stage {stage} ({model}), document {document:?}: {source}")]
    Backend {
        stage: usize,
        model: String,
        document: String,
        #[source]
        source: GatewayError,
        /// Everything completed before the failing stage.
        partial: Box<ChainOutcome>,
    },
    #[error("cannot merge: document {0:?} appears on both sides")]
    Overlap(String),
    #[error("cannot merge: document {0:?} is not in the corpus")]
    UnknownDocument(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ChainFileError {
    #[error("cannot read chain file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid chain file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid chain file: {0}")]
    Config(#[from] ConfigError),
    #[error("chain {0:?} lists no models")]
    Empty(String),
}

/// An ordered model stack, head first. A model may appear more than once.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    id: String,
    models: Vec<ModelSpec>,
    prompt: PromptTemplate,
}

#[derive(Serialize, Deserialize)]
struct ChainFile {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<PromptTemplate>,
    models: Vec<ModelEntry>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<GenerationOptions>,
}

impl ChainConfig {
    pub fn new(
        id: impl Into<String>,
        models: Vec<ModelSpec>,
        prompt: PromptTemplate,
    ) -> Result<Self, ChainFileError> {
        let id = id.into();
        if models.is_empty() {
            return Err(ChainFileError::Empty(id));
        }
        Ok(Self { id, models, prompt })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn prompt(&self) -> &PromptTemplate {
        &self.prompt
    }

    pub fn with_prompt(mut self, prompt: PromptTemplate) -> Self {
        self.prompt = prompt;
        self
    }

    /// Parses a TOML chain file:
    ///
    /// ```toml
    /// id = "chain_2"
    /// prompt = "TEXT: _. QUESTION: ..."   # optional
    ///
    /// [[models]]
    /// name = "llama3.2:1b"
    ///
    /// [[models]]
    /// name = "qwen3:4b"
    /// options = { temperature = 0.0, random_seed = 0, repeat_last_n = 0 }
    /// ```
    pub fn from_toml(source: &str) -> Result<Self, ChainFileError> {
        let file: ChainFile = toml::from_str(source)?;
        let models = file
            .models
            .into_iter()
            .map(|m| ModelSpec::with_options(m.name, m.options.unwrap_or_default()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(file.id, models, file.prompt.unwrap_or_default())
    }

    pub fn from_path(path: &Path) -> Result<Self, ChainFileError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let default_prompt = PromptTemplate::default();
        let file = ChainFile {
            id: self.id.clone(),
            prompt: (self.prompt != default_prompt).then(|| self.prompt.clone()),
            models: self
                .models
                .iter()
                .map(|m| ModelEntry {
                    name: m.name().to_string(),
                    options: (*m.options() != GenerationOptions::default())
                        .then_some(*m.options()),
                })
                .collect(),
        };
        toml::to_string(&file).expect("chain config always serialises")
    }
}

/// Final outcome for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub document_id: String,
    /// Index of the resolving model; `None` when no model resolved it.
    pub stage_index: Option<usize>,
    /// The model that produced `raw_response`: the resolver, or for an
    /// unresolved document the last model that was asked.
    pub model_name: Option<String>,
    pub raw_response: Option<String>,
    pub answer: Option<CanonicalDate>,
    pub in_document: bool,
    pub matches_target: Option<bool>,
    pub elapsed_seconds_total: f64,
}

impl PredictionRecord {
    pub fn is_resolved(&self) -> bool {
        self.stage_index.is_some()
    }
}

/// What one stage did with one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageVisit {
    pub document_id: String,
    pub elapsed_seconds: f64,
    pub raw_response: String,
    pub answer: Option<CanonicalDate>,
    pub in_document: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage_index: usize,
    pub model_name: String,
    pub documents_in: usize,
    pub resolved: usize,
    pub unresolved: usize,
    /// Per-document outcomes in corpus order.
    pub visits: Vec<StageVisit>,
}

impl StageTrace {
    pub fn per_document_latency(&self) -> impl Iterator<Item = (&str, f64)> {
        self.visits
            .iter()
            .map(|v| (v.document_id.as_str(), v.elapsed_seconds))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainOutcome {
    /// One record per corpus document, in corpus order.
    pub records: Vec<PredictionRecord>,
    pub traces: Vec<StageTrace>,
}

impl ChainOutcome {
    pub fn resolved_ids(&self) -> HashSet<&str> {
        self.records
            .iter()
            .filter(|r| r.is_resolved())
            .map(|r| r.document_id.as_str())
            .collect()
    }
}

pub fn validate_response(answer: Option<&CanonicalDate>, candidates: &CandidateSet) -> bool {
    answer.is_some_and(|a| candidates.contains(a))
}

/// Unions two disjoint record lists and orders the result by corpus position.
pub fn merge(
    resolved: Vec<PredictionRecord>,
    later: Vec<PredictionRecord>,
    corpus: &Corpus,
) -> Result<Vec<PredictionRecord>, CascadeError> {
    let position: HashMap<&str, usize> = corpus
        .documents()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id(), i))
        .collect();
    let mut seen = HashSet::with_capacity(resolved.len() + later.len());
    let mut keyed = Vec::with_capacity(resolved.len() + later.len());
    for record in resolved.into_iter().chain(later) {
        let Some(&pos) = position.get(record.document_id.as_str()) else {
            return Err(CascadeError::UnknownDocument(record.document_id));
        };
        if !seen.insert(pos) {
            return Err(CascadeError::Overlap(record.document_id));
        }
        keyed.push((pos, record));
    }
    keyed.sort_by_key(|(pos, _)| *pos);
    Ok(keyed.into_iter().map(|(_, r)| r).collect())
}

/// Runs a chain with the default thinking markers.
pub fn run_chain(
    corpus: &Corpus,
    chain: &ChainConfig,
    gateway: &Gateway,
) -> Result<ChainOutcome, CascadeError> {
    run_chain_with(corpus, chain, gateway, &ThinkingMarkers::default())
}

/// Latest state of a document that is still moving through the chain.
struct Pending {
    index: usize,
    elapsed: f64,
    last: Option<(String, String, Option<CanonicalDate>)>,
}

pub fn run_chain_with(
    corpus: &Corpus,
    chain: &ChainConfig,
    gateway: &Gateway,
    markers: &ThinkingMarkers,
) -> Result<ChainOutcome, CascadeError> {
    let docs = corpus.documents();
    let candidates: Vec<CandidateSet> = docs.iter().map(|d| extract_candidates(d.text())).collect();

    let mut worklist: Vec<Pending> = (0..docs.len())
        .map(|index| Pending {
            index,
            elapsed: 0.0,
            last: None,
        })
        .collect();
    let mut resolved = Vec::new();
    let mut traces = Vec::new();

    let record_for = |p: &Pending, stage: Option<usize>| {
        let doc = &docs[p.index];
        let (model_name, raw_response, answer) = match &p.last {
            Some((m, r, a)) => (Some(m.clone()), Some(r.clone()), *a),
            None => (None, None, None),
        };
        PredictionRecord {
            document_id: doc.id().to_string(),
            stage_index: stage,
            model_name,
            raw_response,
            answer,
            in_document: validate_response(answer.as_ref(), &candidates[p.index]),
            matches_target: doc.target().map(|t| answer == Some(t)),
            elapsed_seconds_total: p.elapsed,
        }
    };

    for (stage, model) in chain.models().iter().enumerate() {
        // Stage 0 always runs, even on an empty corpus, so its trace exists.
        if stage > 0 && worklist.is_empty() {
            break;
        }
        let requests: Vec<(&str, String)> = worklist
            .iter()
            .map(|p| {
                let doc = &docs[p.index];
                (doc.id(), chain.prompt().render(doc.text()))
            })
            .collect();
        let results = gateway.generate_many(model, &requests);

        let mut visits = Vec::with_capacity(worklist.len());
        let mut still_pending = Vec::new();
        let mut newly_resolved = Vec::new();
        for (mut pending, result) in worklist.into_iter().zip(results) {
            let doc = &docs[pending.index];
            let generation = match result {
                Ok(g) => g,
                Err(source) => {
                    return Err(CascadeError::Backend {
                        stage,
                        model: model.name().to_string(),
                        document: doc.id().to_string(),
                        source,
                        partial: Box::new(ChainOutcome {
                            records: merge(resolved, Vec::new(), corpus)?,
                            traces,
                        }),
                    })
                }
            };
            let answer = extract_answer_with(&generation.raw_text, markers);
            let valid = validate_response(answer.as_ref(), &candidates[pending.index]);
            pending.elapsed += generation.elapsed_seconds;
            visits.push(StageVisit {
                document_id: doc.id().to_string(),
                elapsed_seconds: generation.elapsed_seconds,
                raw_response: generation.raw_text.clone(),
                answer,
                in_document: valid,
            });
            pending.last = Some((model.name().to_string(), generation.raw_text, answer));
            if valid {
                newly_resolved.push(record_for(&pending, Some(stage)));
            } else {
                still_pending.push(pending);
            }
        }

        traces.push(StageTrace {
            stage_index: stage,
            model_name: model.name().to_string(),
            documents_in: visits.len(),
            resolved: newly_resolved.len(),
            unresolved: still_pending.len(),
            visits,
        });
        resolved.extend(newly_resolved);
        worklist = still_pending;
    }

    let unresolved = worklist.iter().map(|p| record_for(p, None)).collect();
    Ok(ChainOutcome {
        records: merge(resolved, unresolved, corpus)?,
        traces,
    })
}
