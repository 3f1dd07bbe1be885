//! Chat-completion client with record/replay fixtures.
//!
//! Three prompt templates are built in: a yes/no scope check, the annotated
//! answer that elicits `[surface]($nK)` / `[surface]($rK, $nI, $nJ)` markers, and a plain
//! answer used for out-of-scope questions. In `Replay` mode each rendered
//! prompt is looked up as `{fixtures}/{template}/{key}.json` and its chunks are
//! streamed back verbatim; no backend is ever contacted.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: no value for placeholder {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("no fixture for template {template}, key {key}")]
    MissingFixture { template: String, key: String },
    #[error("fixture {path}: {reason}")]
    BadFixture { path: String, reason: String },
    #[error("request timed out")]
    Timeout,
    #[error("chat endpoint error: {0}")]
    Transport(String),
    #[error("chat endpoint returned an unexpected payload: {0}")]
    Protocol(String),
    #[error("{0}")]
    Config(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::Timeout)
    }
}

pub const PLACEHOLDERS: [&str; 3] = ["question", "kg_types", "history_summary"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    #[serde(skip)]
    pub template: String,
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// First 16 hex digits of SHA-256 over the template name and the
    /// normalized prompt text.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.template.as_bytes());
        h.update(b"\n");
        h.update(normalize_prompt(&self.system).as_bytes());
        h.update(b"\n");
        h.update(normalize_prompt(&self.user).as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Line endings to `\n`, trailing whitespace per line stripped, outer blank
/// lines removed. Keeps keys stable across platforms and editors.
pub fn normalize_prompt(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    lines.join("\n").trim_matches('\n').to_string()
}

impl PromptTemplate {
    pub fn new(name: &str, system: &str, user: &str) -> Result<Self, GatewayError> {
        let t = Self { name: name.into(), system: system.into(), user: user.into() };
        for part in [&t.system, &t.user] {
            for p in placeholders(part) {
                if !PLACEHOLDERS.contains(&p.as_str()) {
                    return Err(GatewayError::UnknownPlaceholder { template: t.name.clone(), name: p });
                }
            }
        }
        Ok(t)
    }

    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<RenderedPrompt, GatewayError> {
        Ok(RenderedPrompt {
            template: self.name.clone(),
            system: self.fill(&self.system, vars)?,
            user: self.fill(&self.user, vars)?,
        })
    }

    fn fill(&self, text: &str, vars: &BTreeMap<&str, String>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some((start, name)) = next_placeholder(rest) {
            out.push_str(&rest[..start]);
            let value = vars
                .get(name)
                .ok_or_else(|| GatewayError::MissingValue { template: self.name.clone(), name: name.to_string() })?;
            out.push_str(value);
            rest = &rest[start + name.len() + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// `{ident}` where ident is lowercase ASCII and underscores; anything else in
/// braces is literal text.
fn next_placeholder(text: &str) -> Option<(usize, &str)> {
    let mut from = 0;
    while let Some(off) = text[from..].find('{') {
        let start = from + off;
        let body = &text[start + 1..];
        let len = body.bytes().take_while(|b| b.is_ascii_lowercase() || *b == b'_').count();
        if len > 0 && body.as_bytes().get(len) == Some(&b'}') {
            return Some((start, &body[..len]));
        }
        from = start + 1;
    }
    None
}

fn placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some((start, name)) = next_placeholder(rest) {
        out.push(name.to_string());
        rest = &rest[start + name.len() + 2..];
    }
    out
}

pub const SCOPE_CHECK: &str = "scope_check";
pub const ANNOTATED_ANSWER: &str = "annotated_answer";
pub const PLAIN_ANSWER: &str = "plain_answer";

const SCOPE_SYSTEM: &str = "\
You decide whether a question can be answered with a biomedical knowledge graph.
The graph covers dietary supplements, drugs, disorders and related biology, with a focus on Alzheimer's disease.
Its entity types are: {kg_types}.
Reply with exactly one word: yes or no.";

const ANNOTATED_SYSTEM: &str = "\
You are a biomedical assistant. Answer in a few short sentences.
While writing, annotate the single most important relation of each sentence:
- mark an entity as [surface text]($nK), where K numbers entities from 1 in order of first mention;
- mark each entity only at its first mention; later relations refer to it by its $nK;
- mark the relation phrase as [relation text]($rK, $nI, $nJ), where $nI is the subject and $nJ the object.
Example: [Fish oil]($n1) is known for [containing]($r1, $n1, $n2) [omega-3 fatty acids]($n2).
Only annotate entities that belong to one of these types: {kg_types}.
Do not use square brackets for anything else.";

const ANNOTATED_USER: &str = "\
Earlier questions in this conversation:
{history_summary}

Question: {question}";

const PLAIN_SYSTEM: &str = "You are a helpful assistant. Answer briefly.";

pub fn builtin_templates() -> BTreeMap<String, PromptTemplate> {
    let defs = [
        (SCOPE_CHECK, SCOPE_SYSTEM, "Question: {question}"),
        (ANNOTATED_ANSWER, ANNOTATED_SYSTEM, ANNOTATED_USER),
        (PLAIN_ANSWER, PLAIN_SYSTEM, "{question}"),
    ];
    defs.into_iter()
        .map(|(name, system, user)| {
            (name.to_string(), PromptTemplate::new(name, system, user).expect("built-in templates are valid"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptFixture {
    pub template: String,
    pub key: String,
    pub prompt: RenderedPrompt,
    pub chunks: Vec<String>,
}

impl TranscriptFixture {
    pub fn text(&self) -> String {
        self.chunks.concat()
    }
}

pub fn fixture_path(dir: &Path, template: &str, key: &str) -> PathBuf {
    dir.join(template).join(format!("{key}.json"))
}

pub fn load_fixture(dir: &Path, prompt: &RenderedPrompt) -> Result<TranscriptFixture, GatewayError> {
    let key = prompt.key();
    let path = fixture_path(dir, &prompt.template, &key);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(GatewayError::MissingFixture { template: prompt.template.clone(), key })
        }
        Err(e) => return Err(e.into()),
    };
    let bad = |reason: String| GatewayError::BadFixture { path: path.display().to_string(), reason };
    let mut fixture: TranscriptFixture = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if fixture.key != key || fixture.template != prompt.template {
        return Err(bad(format!("recorded for {}/{}", fixture.template, fixture.key)));
    }
    fixture.prompt.template = fixture.template.clone();
    Ok(fixture)
}

/// Writes via a temporary file in the target directory and renames it into place.
pub fn save_fixture(dir: &Path, fixture: &TranscriptFixture) -> Result<PathBuf, GatewayError> {
    let path = fixture_path(dir, &fixture.template, &fixture.key);
    let parent = path.parent().expect("fixture path has a parent");
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    let mut json = serde_json::to_string_pretty(fixture).expect("fixture serializes");
    json.push('\n');
    tmp.write_all(json.as_bytes())?;
    tmp.persist(&path).map_err(|e| GatewayError::Io(e.error))?;
    Ok(path)
}

/// Something that turns a prompt into a stream of completion fragments.
pub trait ChatBackend: Send + Sync {
    fn stream(&self, prompt: &RenderedPrompt, sink: &mut dyn FnMut(&str)) -> Result<(), GatewayError>;

    /// Outbound requests made so far.
    fn network_calls(&self) -> usize {
        0
    }
}

/// Client for the chat-completions streaming contract (`data:` lines of JSON
/// deltas, terminated by `data: [DONE]`).
pub struct HttpChatBackend {
    url: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, model: &str, api_key: String, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            client,
            calls: AtomicUsize::new(0),
        })
    }
}

fn transport(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

impl ChatBackend for HttpChatBackend {
    fn stream(&self, prompt: &RenderedPrompt, sink: &mut dyn FnMut(&str)) -> Result<(), GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let body = serde_json::json!({
            "model": self.model,
            "stream": true,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        });
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(transport)?;
        let reader = BufReader::new(resp);
        for line in reader.lines() {
            let line = line.map_err(|e| {
                if e.kind() == std::io::ErrorKind::TimedOut {
                    GatewayError::Timeout
                } else {
                    GatewayError::Transport(e.to_string())
                }
            })?;
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.trim();
            if data == "[DONE]" {
                return Ok(());
            }
            let v: serde_json::Value =
                serde_json::from_str(data).map_err(|e| GatewayError::Protocol(format!("{e}: {data}")))?;
            if let Some(err) = v.get("error") {
                return Err(GatewayError::Transport(err.to_string()));
            }
            if let Some(content) = v.pointer("/choices/0/delta/content").and_then(|c| c.as_str()) {
                if !content.is_empty() {
                    sink(content);
                }
            }
        }
        Ok(())
    }

    fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Canned responses chosen by template and a substring of the last line of
/// the user prompt (where the templates put the question). Used to author
/// fixtures and in tests; never touches the network.
#[derive(Default)]
pub struct ScriptedBackend {
    rules: Vec<(String, String, Vec<String>)>,
    calls: AtomicUsize,
    failures: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// First matching rule wins.
    pub fn on(mut self, template: &str, needle: &str, chunks: &[&str]) -> Self {
        self.rules.push((template.into(), needle.into(), chunks.iter().map(|c| c.to_string()).collect()));
        self
    }

    /// The next `n` calls fail with a transport error.
    pub fn fail_next(self, n: usize) -> Self {
        *self.failures.lock().expect("lock") = n;
        self
    }

    /// Calls received, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatBackend for ScriptedBackend {
    fn stream(&self, prompt: &RenderedPrompt, sink: &mut dyn FnMut(&str)) -> Result<(), GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        {
            let mut failures = self.failures.lock().expect("lock");
            if *failures > 0 {
                *failures -= 1;
                return Err(GatewayError::Transport("scripted failure".into()));
            }
        }
        let (_, _, chunks) = self
            .rules
            .iter()
            .find(|(t, needle, _)| {
                *t == prompt.template && prompt.user.lines().last().unwrap_or("").contains(needle.as_str())
            })
            .ok_or_else(|| GatewayError::Protocol(format!("no scripted response for {}", prompt.template)))?;
        for c in chunks {
            sink(c);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Live,
    Replay,
    Record,
}

impl std::str::FromStr for ModeKind {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ModeKind::Live),
            "replay" => Ok(ModeKind::Replay),
            "record" => Ok(ModeKind::Record),
            other => Err(GatewayError::Config(format!("unknown gateway mode {other:?}"))),
        }
    }
}

pub enum GatewayMode {
    Live(Box<dyn ChatBackend>),
    Replay { fixtures: PathBuf },
    Record { backend: Box<dyn ChatBackend>, fixtures: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeDecision {
    pub in_scope: bool,
    pub attempts: usize,
    /// Set when no attempt produced a yes/no answer.
    pub diagnostic: Option<String>,
}

pub struct LlmGateway {
    mode: GatewayMode,
    templates: BTreeMap<String, PromptTemplate>,
}

const SCOPE_RETRY_SUFFIX: &str = "\nAnswer with exactly one word: yes or no.";

pub fn parse_yes_no(text: &str) -> Option<bool> {
    let word: String = text.trim().chars().take_while(|c| c.is_alphabetic()).collect::<String>().to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

impl LlmGateway {
    pub fn new(mode: GatewayMode) -> Self {
        Self { mode, templates: builtin_templates() }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.templates.insert(template.name.clone(), template);
        self
    }

    pub fn mode(&self) -> &GatewayMode {
        &self.mode
    }

    pub fn network_calls(&self) -> usize {
        match &self.mode {
            GatewayMode::Live(b) | GatewayMode::Record { backend: b, .. } => b.network_calls(),
            GatewayMode::Replay { .. } => 0,
        }
    }

    pub fn render(&self, template: &str, vars: &BTreeMap<&str, String>) -> Result<RenderedPrompt, GatewayError> {
        self.templates.get(template).ok_or_else(|| GatewayError::UnknownTemplate(template.into()))?.render(vars)
    }

    /// Streams the completion for `prompt` into `sink` and returns the full text.
    pub fn complete(&self, prompt: &RenderedPrompt, sink: &mut dyn FnMut(&str)) -> Result<String, GatewayError> {
        match &self.mode {
            GatewayMode::Replay { fixtures } => {
                let fixture = load_fixture(fixtures, prompt)?;
                for c in &fixture.chunks {
                    sink(c);
                }
                Ok(fixture.text())
            }
            GatewayMode::Live(backend) => {
                let mut text = String::new();
                stream_with_retry(backend.as_ref(), prompt, &mut |c| {
                    text.push_str(c);
                    sink(c);
                })?;
                Ok(text)
            }
            GatewayMode::Record { backend, fixtures } => {
                let mut chunks = Vec::new();
                stream_with_retry(backend.as_ref(), prompt, &mut |c| {
                    chunks.push(c.to_string());
                    sink(c);
                })?;
                let fixture = TranscriptFixture {
                    template: prompt.template.clone(),
                    key: prompt.key(),
                    prompt: prompt.clone(),
                    chunks,
                };
                save_fixture(fixtures, &fixture)?;
                Ok(fixture.text())
            }
        }
    }

    pub fn check_scope(&self, question: &str, kg_types: &str) -> Result<ScopeDecision, GatewayError> {
        if question.trim().is_empty() {
            return Err(GatewayError::EmptyQuestion);
        }
        let mut vars = BTreeMap::from([("question", question.to_string()), ("kg_types", kg_types.to_string())]);
        let mut replies = Vec::new();
        for attempt in 1..=2 {
            let prompt = self.render(SCOPE_CHECK, &vars)?;
            let reply = self.complete(&prompt, &mut |_| {})?;
            if let Some(in_scope) = parse_yes_no(&reply) {
                return Ok(ScopeDecision { in_scope, attempts: attempt, diagnostic: None });
            }
            replies.push(reply);
            vars.insert("question", format!("{question}{SCOPE_RETRY_SUFFIX}"));
        }
        let diagnostic = format!("unparseable scope verdicts {replies:?}; treating as out of scope");
        tracing::warn!("{diagnostic}");
        Ok(ScopeDecision { in_scope: false, attempts: 2, diagnostic: Some(diagnostic) })
    }

    pub fn annotated_answer(
        &self,
        question: &str,
        kg_types: &str,
        history_summary: &str,
        sink: &mut dyn FnMut(&str),
    ) -> Result<String, GatewayError> {
        let vars = BTreeMap::from([
            ("question", question.to_string()),
            ("kg_types", kg_types.to_string()),
            ("history_summary", history_summary.to_string()),
        ]);
        let prompt = self.render(ANNOTATED_ANSWER, &vars)?;
        self.complete(&prompt, sink)
    }

    pub fn plain_answer(&self, question: &str, sink: &mut dyn FnMut(&str)) -> Result<String, GatewayError> {
        let prompt = self.render(PLAIN_ANSWER, &BTreeMap::from([("question", question.to_string())]))?;
        self.complete(&prompt, sink)
    }
}

/// One retry on transport errors, and only if nothing reached the sink yet.
fn stream_with_retry(
    backend: &dyn ChatBackend,
    prompt: &RenderedPrompt,
    sink: &mut dyn FnMut(&str),
) -> Result<(), GatewayError> {
    let mut emitted = false;
    let mut tracked = |c: &str| {
        emitted = true;
        sink(c);
    };
    match backend.stream(prompt, &mut tracked) {
        Err(e) if e.retryable() && !emitted => {
            tracing::warn!(error = %e, "chat request failed, retrying once");
            backend.stream(prompt, sink)
        }
        other => other,
    }
}
