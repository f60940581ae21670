//! Access to text-generation backends.
//!
//! [`HttpBackend`] talks to a local generate endpoint (one JSON request, one
//! JSON response, streaming disabled). [`MockBackend`] replays a script keyed
//! by model name and document id, so runs are exactly reproducible.
//! [`Gateway`] wraps either one and bounds the number of in-flight requests.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::dates::{extract_candidates, CanonicalDate};

pub const PLACEHOLDER: char = '_';

pub const DEFAULT_PROMPT: &str = "TEXT: _. QUESTION: What is the patient's date of birth? \
The date must be in DD/MM/YYYY format. Return 'I do not know' if the date of birth is not \
written in the TEXT.";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("prompt template must contain exactly one `{PLACEHOLDER}` placeholder, found {0}")]
    Placeholder(usize),
    #[error("model name must not be empty")]
    EmptyModelName,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("model {model}: {cause}")]
    Backend { model: String, cause: String },
    #[error("model {model}: request timed out after {seconds}s")]
    Timeout { model: String, seconds: f64 },
    #[error("mock script has no entry for model {model:?}, document {document:?}")]
    Unscripted { model: String, document: String },
    #[error("mock script line {line}: {reason}")]
    Script { line: usize, reason: String },
    #[error("cannot read mock script: {0}")]
    Io(#[from] std::io::Error),
}

/// A prompt with a single `_` slot for the document text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    template: String,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self, ConfigError> {
        let template = template.into();
        match template.matches(PLACEHOLDER).count() {
            1 => Ok(Self { template }),
            n => Err(ConfigError::Placeholder(n)),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    pub fn render(&self, text: &str) -> String {
        self.template.replacen(PLACEHOLDER, text, 1)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_PROMPT).expect("default prompt has one placeholder")
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = ConfigError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<PromptTemplate> for String {
    fn from(value: PromptTemplate) -> Self {
        value.template
    }
}

pub fn render_prompt(template: &PromptTemplate, document: &Document) -> String {
    template.render(document.text())
}

/// Decoding options. All zero by default: greedy, fixed seed, no repeat
/// penalty window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub temperature: f64,
    pub random_seed: i64,
    pub repeat_last_n: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    name: String,
    #[serde(default)]
    options: GenerationOptions,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>) -> Result<Self, ConfigError> {
        Self::with_options(name, GenerationOptions::default())
    }

    pub fn with_options(
        name: impl Into<String>,
        options: GenerationOptions,
    ) -> Result<Self, ConfigError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(ConfigError::EmptyModelName);
        }
        Ok(Self { name, options })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn options(&self) -> &GenerationOptions {
        &self.options
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub raw_text: String,
    pub elapsed_seconds: f64,
    pub backend: String,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub model: &'a ModelSpec,
    pub document_id: &'a str,
    pub prompt: &'a str,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GatewayError>;

    /// Whether the backend can serve `model` at all. Used to validate
    /// configuration before any request is issued; backends that cannot tell
    /// answer `true`.
    fn serves_model(&self, _model: &str) -> bool {
        true
    }
}

#[derive(Serialize)]
struct WireOptions {
    temperature: f64,
    seed: i64,
    repeat_last_n: i64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    stream: bool,
    options: WireOptions,
}

#[derive(Deserialize)]
struct WireResponse {
    response: String,
}

/// Blocking client for a `POST {model, prompt, stream, options}` generate
/// endpoint whose reply carries the completion under `response`.
pub struct HttpBackend {
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// `url` is the full endpoint, e.g. `http://localhost:11434/api/generate`.
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            url: url.into(),
            timeout,
            agent: config.into(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GatewayError> {
        let model = request.model.name();
        let options = request.model.options();
        let body = WireRequest {
            model,
            prompt: request.prompt,
            stream: false,
            options: WireOptions {
                temperature: options.temperature,
                seed: options.random_seed,
                repeat_last_n: options.repeat_last_n,
            },
        };
        let backend_err = |cause: String| GatewayError::Backend {
            model: model.to_string(),
            cause,
        };

        let started = Instant::now();
        let mut response = match self.agent.post(&self.url).send_json(&body) {
            Ok(response) => response,
            Err(ureq::Error::Timeout(_)) => {
                return Err(GatewayError::Timeout {
                    model: model.to_string(),
                    seconds: self.timeout.as_secs_f64(),
                })
            }
            Err(e) => return Err(backend_err(e.to_string())),
        };
        let status = response.status();
        let text = match response.body_mut().read_to_string() {
            Ok(text) => text,
            Err(ureq::Error::Timeout(_)) => {
                return Err(GatewayError::Timeout {
                    model: model.to_string(),
                    seconds: self.timeout.as_secs_f64(),
                })
            }
            Err(e) => return Err(backend_err(format!("reading body: {e}"))),
        };
        let elapsed = started.elapsed().as_secs_f64();

        if !status.is_success() {
            return Err(backend_err(format!("HTTP {}: {}", status.as_u16(), text.trim())));
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| backend_err(format!("malformed response body: {e}")))?;
        Ok(GenerationResult {
            raw_text: parsed.response,
            elapsed_seconds: elapsed.max(f64::MIN_POSITIVE),
            backend: self.name().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ScriptEntry {
    latency: f64,
    response: String,
}

/// Scripted backend. Each line of a script is
/// `model<TAB>document id<TAB>latency seconds<TAB>response`; the response runs
/// to the end of the line and may itself contain tabs. Blank lines and lines
/// starting with `#` are skipped.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    entries: HashMap<(String, String), ScriptEntry>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(script: &str) -> Result<Self, GatewayError> {
        let mut mock = Self::new();
        for (index, line) in script.lines().enumerate() {
            let line_no = index + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| GatewayError::Script {
                line: line_no,
                reason: reason.to_string(),
            };
            let mut fields = line.splitn(4, '\t');
            let (Some(model), Some(document), Some(latency), Some(response)) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected 4 tab-separated fields"));
            };
            let latency: f64 = latency
                .trim()
                .parse()
                .map_err(|_| err("latency is not a number"))?;
            if !(latency.is_finite() && latency > 0.0) {
                return Err(err("latency must be a positive number of seconds"));
            }
            if model.is_empty() || document.is_empty() {
                return Err(err("model and document id must not be empty"));
            }
            if mock.contains(model, document) {
                return Err(err("duplicate (model, document) entry"));
            }
            mock.insert(model, document, latency, response);
        }
        Ok(mock)
    }

    /// Adds or replaces one scripted reply.
    ///
    /// # Panics
    ///
    /// Panics if `latency` is not a positive finite number.
    pub fn insert(
        &mut self,
        model: impl Into<String>,
        document: impl Into<String>,
        latency: f64,
        response: impl Into<String>,
    ) {
        assert!(latency.is_finite() && latency > 0.0, "latency must be positive");
        self.entries.insert(
            (model.into(), document.into()),
            ScriptEntry {
                latency,
                response: response.into(),
            },
        );
    }

    pub fn contains(&self, model: &str, document: &str) -> bool {
        self.entries
            .contains_key(&(model.to_string(), document.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GatewayError> {
        let key = (
            request.model.name().to_string(),
            request.document_id.to_string(),
        );
        let entry = self
            .entries
            .get(&key)
            .ok_or_else(|| GatewayError::Unscripted {
                model: key.0.clone(),
                document: key.1.clone(),
            })?;
        Ok(GenerationResult {
            raw_text: entry.response.clone(),
            elapsed_seconds: entry.latency,
            backend: self.name().to_string(),
        })
    }

    fn serves_model(&self, model: &str) -> bool {
        self.entries.keys().any(|(m, _)| m == model)
    }
}

/// A backend plus an in-flight request cap.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    max_in_flight: usize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            max_in_flight: 1,
        }
    }

    /// Sets the in-flight cap; values below 1 are treated as 1.
    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.max_in_flight = limit.max(1);
        self
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn generate(
        &self,
        model: &ModelSpec,
        document_id: &str,
        prompt: &str,
    ) -> Result<GenerationResult, GatewayError> {
        self.backend.generate(&GenerationRequest {
            model,
            document_id,
            prompt,
        })
    }

    /// Runs one request per `(document id, prompt)` pair against `model` and
    /// returns the results in input order. At most `max_in_flight` requests
    /// run at once.
    pub fn generate_many(
        &self,
        model: &ModelSpec,
        requests: &[(&str, String)],
    ) -> Vec<Result<GenerationResult, GatewayError>> {
        if self.max_in_flight == 1 || requests.len() <= 1 {
            return requests
                .iter()
                .map(|(id, prompt)| self.generate(model, id, prompt))
                .collect();
        }

        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<GenerationResult, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.max_in_flight.min(requests.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((id, prompt)) = requests.get(i) else {
                        break;
                    };
                    let result = self.generate(model, id, prompt);
                    *slots[i].lock().expect("slot lock poisoned") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("slot lock poisoned")
                    .expect("every request index is visited")
            })
            .collect()
    }
}

/// Open/close markers around a model's reasoning trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinkingMarkers {
    pub open: String,
    pub close: String,
}

impl Default for ThinkingMarkers {
    fn default() -> Self {
        Self {
            open: "<think>".to_string(),
            close: "</think>".to_string(),
        }
    }
}

/// Removes every thinking block. An opener without a closer swallows the rest
/// of the text. Each removed block leaves a single space behind so that text
/// on either side is not glued together.
pub fn strip_thinking(raw: &str, markers: &ThinkingMarkers) -> String {
    if markers.open.is_empty() {
        return raw.to_string();
    }
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find(&markers.open) {
        out.push_str(&rest[..start]);
        out.push(' ');
        let inner = &rest[start + markers.open.len()..];
        match (!markers.close.is_empty())
            .then(|| inner.find(&markers.close))
            .flatten()
        {
            Some(end) => rest = &inner[end + markers.close.len()..],
            None => return out,
        }
    }
    out.push_str(rest);
    out
}

/// The first date in a response once thinking blocks are removed.
pub fn extract_answer(raw_text: &str) -> Option<CanonicalDate> {
    extract_answer_with(raw_text, &ThinkingMarkers::default())
}

pub fn extract_answer_with(raw_text: &str, markers: &ThinkingMarkers) -> Option<CanonicalDate> {
    let visible = strip_thinking(raw_text, markers);
    extract_candidates(&visible).first().map(|m| m.date)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(day: u32, month: u32, year: u32) -> CanonicalDate {
        CanonicalDate::new(day, month, year).unwrap()
    }

    #[test]
    fn prompt_rendering() {
        let t = PromptTemplate::new("TEXT: _.").unwrap();
        assert_eq!(t.render("abc"), "TEXT: abc.");
        // Underscores in the document text are not placeholders.
        assert_eq!(t.render("a_b"), "TEXT: a_b.");
        let doc = Document::new("d", "", None);
        let rendered = render_prompt(&PromptTemplate::default(), &doc);
        assert!(rendered.starts_with("TEXT: . QUESTION: What is the patient's date of birth?"));
    }

    #[test]
    fn prompt_placeholder_count() {
        assert_eq!(
            PromptTemplate::new("no slot"),
            Err(ConfigError::Placeholder(0))
        );
        assert_eq!(PromptTemplate::new("_ _"), Err(ConfigError::Placeholder(2)));
        assert!(serde_json::from_str::<PromptTemplate>("\"x\"").is_err());
    }

    #[test]
    fn default_options_are_zero() {
        let o = GenerationOptions::default();
        assert_eq!((o.temperature, o.random_seed, o.repeat_last_n), (0.0, 0, 0));
        assert_eq!(ModelSpec::new(" "), Err(ConfigError::EmptyModelName));
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(
            extract_answer("<think>maybe 01/01/2000</think> DOB is 03/04/1985."),
            Some(d(3, 4, 1985))
        );
        assert_eq!(extract_answer("I do not know"), None);
        assert_eq!(
            extract_answer("Born 03/04/1985, seen 05/06/2020"),
            Some(d(3, 4, 1985))
        );
        assert_eq!(extract_answer("<think>01/01/2000 and on"), None);
        assert_eq!(
            extract_answer("It is the 5th of May, 1998."),
            Some(d(5, 5, 1998))
        );
        assert_eq!(extract_answer("1<think></think>5/5/98"), Some(d(5, 5, 1998)));
    }

    #[test]
    fn custom_markers() {
        let markers = ThinkingMarkers {
            open: "[[".into(),
            close: "]]".into(),
        };
        assert_eq!(
            extract_answer_with("[[01/01/2000]] 02/02/2002", &markers),
            Some(d(2, 2, 2002))
        );
    }

    #[test]
    fn mock_script_parsing() {
        let mock = MockBackend::parse(
            "# comment\nm1\td1\t0.5\t01/02/1990\nm1\td2\t1\tsay\t\"hi\"\n\n",
        )
        .unwrap();
        assert_eq!(mock.len(), 2);
        let spec = ModelSpec::new("m1").unwrap();
        let gw = Gateway::new(Arc::new(mock));
        let r = gw.generate(&spec, "d1", "ignored").unwrap();
        assert_eq!(r.raw_text, "01/02/1990");
        assert_eq!(r.elapsed_seconds, 0.5);
        assert_eq!(gw.generate(&spec, "d2", "").unwrap().raw_text, "say\t\"hi\"");
        assert!(matches!(
            gw.generate(&spec, "d3", ""),
            Err(GatewayError::Unscripted { .. })
        ));
        assert!(gw.backend().serves_model("m1"));
        assert!(!gw.backend().serves_model("m2"));
    }

    #[test]
    fn mock_script_errors() {
        for bad in [
            "m\td\t0.5",
            "m\td\tfast\tx",
            "m\td\t0\tx",
            "m\td\t-1\tx",
            "m\td\t1\tx\nm\td\t2\ty",
        ] {
            assert!(
                matches!(MockBackend::parse(bad), Err(GatewayError::Script { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn generate_many_preserves_order() {
        let mut mock = MockBackend::new();
        for i in 0..20 {
            mock.insert("m", format!("d{i}"), 1.0 + i as f64, format!("r{i}"));
        }
        let spec = ModelSpec::new("m").unwrap();
        let requests: Vec<(String, String)> =
            (0..20).map(|i| (format!("d{i}"), String::new())).collect();
        let borrowed: Vec<(&str, String)> = requests
            .iter()
            .map(|(id, p)| (id.as_str(), p.clone()))
            .collect();
        let gw = Gateway::new(Arc::new(mock)).with_max_in_flight(4);
        let out = gw.generate_many(&spec, &borrowed);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap().raw_text, format!("r{i}"));
        }
    }

    proptest! {
        #[test]
        fn thinking_content_is_ignored(
            before in "[a-z0-9 /]{0,20}",
            thought_a in "[a-z0-9 /.\\-]{0,30}",
            thought_b in "[a-z0-9 /.\\-]{0,30}",
            after in "[a-z0-9 /]{0,20}",
        ) {
            let a = format!("{before}<think>{thought_a}</think>{after}");
            let b = format!("{before}<think>{thought_b}</think>{after}");
            prop_assert_eq!(extract_answer(&a), extract_answer(&b));
        }

        #[test]
        fn mock_is_deterministic(text in "[ -~]{0,40}", latency in 0.001f64..100.0) {
            let mut mock = MockBackend::new();
            mock.insert("m", "d", latency, text.clone());
            let spec = ModelSpec::new("m").unwrap();
            let first = mock.generate(&GenerationRequest { model: &spec, document_id: "d", prompt: "p" }).unwrap();
            let second = mock.generate(&GenerationRequest { model: &spec, document_id: "d", prompt: "p" }).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
