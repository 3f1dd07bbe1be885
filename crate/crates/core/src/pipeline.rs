//! Orchestration of one conversational turn.
//!
//! scope check → annotated answer (streamed through the parser) → grounding
//! of every triple → session events → recommendations. Each event is
//! appended to the store as soon as it is applied, so a crash mid-turn loses
//! nothing that was committed; the snapshot is refreshed at the end of each
//! operation.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationParser, Span};
use crate::gateway::{GatewayError, LlmGateway};
use crate::grounding::{GroundedTriple, Grounder, GroundingError};
use crate::kg::{Evidence, KgEdge, KnowledgeGraph};
use crate::recommend::{generate, Query, RecommendError, Recommendation, Target};
use crate::session::{
    EventPayload, GraphEdge, GraphNode, Session, SessionError, SessionEvent, SessionState, SessionStore, StepView,
    StoreError,
};

pub const DEFAULT_RECOMMENDATIONS: usize = 3;
const HISTORY_QUESTIONS: usize = 5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("unknown edge {0}")]
    UnknownEdge(String),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSession(id) => EngineError::UnknownSession(id),
            other => EngineError::Store(other),
        }
    }
}

impl EngineError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::UnknownSession(_) => "unknown_session",
            EngineError::SessionExists(_) => "session_exists",
            EngineError::BadRequest(_) => "bad_request",
            EngineError::UnknownEdge(_) => "unknown_edge",
            EngineError::Store(_) => "store_unavailable",
            EngineError::Session(SessionError::StepOutOfRange { .. }) => "step_out_of_range",
            EngineError::Session(SessionError::Recommend(e)) | EngineError::Recommend(e) => recommend_code(e),
            EngineError::Session(_) => "session_error",
            EngineError::Grounding(_) => "grounding_error",
            EngineError::Gateway(GatewayError::MissingFixture { .. }) => "missing_fixture",
            EngineError::Gateway(GatewayError::Timeout) => "timeout",
            EngineError::Gateway(_) => "llm_error",
        }
    }
}

fn recommend_code(e: &RecommendError) -> &'static str {
    match e {
        RecommendError::UnknownRecommendation(_) => "unknown_recommendation",
        RecommendError::AlreadyExplored(_) => "already_explored",
        _ => "invalid_query",
    }
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

/// Advances by `step` on every reading.
pub struct TickClock {
    next: AtomicU64,
    step: u64,
}

impl TickClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self { next: AtomicU64::new(start), step }
    }
}

impl Clock for TickClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::Relaxed)
    }
}

/// Events streamed to the client during a turn.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    /// Plain answer text with markers removed.
    Text {
        text: String,
    },
    /// An entity or relation span, as soon as its marker closes.
    Entity {
        span: Span,
    },
    Triple {
        triple: GroundedTriple,
    },
    Recommendations {
        items: Vec<Recommendation>,
    },
    Progress {
        value: f64,
    },
    Error {
        code: String,
        message: String,
    },
    Done {
        step: usize,
        in_scope: bool,
    },
}

impl StreamEvent {
    pub fn name(&self) -> &'static str {
        match self {
            StreamEvent::Text { .. } => "text",
            StreamEvent::Entity { .. } => "entity",
            StreamEvent::Triple { .. } => "triple",
            StreamEvent::Recommendations { .. } => "recommendations",
            StreamEvent::Progress { .. } => "progress",
            StreamEvent::Error { .. } => "error",
            StreamEvent::Done { .. } => "done",
        }
    }
}

/// A user turn: free text, a structured query, or a recommendation click.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageInput {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub query: Option<Query>,
    #[serde(default)]
    pub recommendation_id: Option<String>,
}

impl MessageInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: Some(text.into()), ..Self::default() }
    }

    pub fn recommendation(id: impl Into<String>) -> Self {
        Self { recommendation_id: Some(id.into()), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageOutcome {
    pub step: usize,
    pub in_scope: bool,
    pub text: String,
    pub grounded: Vec<GroundedTriple>,
    pub recommendations: Vec<Recommendation>,
    pub progress: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub progress: f64,
    pub explored: usize,
    /// Goal items not dismissed.
    pub total: usize,
    pub dismissed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub session: String,
    pub view: Option<StepView>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub edge: KgEdge,
    pub source_name: String,
    pub target_name: String,
    pub evidence: Vec<Evidence>,
}

/// Whole-word label index over node names and aliases.
struct Lexicon {
    /// Token sequence → node id; the first node registered for a label wins.
    labels: BTreeMap<Vec<String>, String>,
    longest: usize,
    /// Singular type-name token → type.
    type_tokens: Vec<(String, String)>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .map(|t| t.trim_matches(|c| c == '\'' || c == '-').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn singular(token: &str) -> &str {
    if token.len() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        &token[..token.len() - 1]
    } else {
        token
    }
}

impl Lexicon {
    fn build(graph: &KnowledgeGraph) -> Self {
        let mut labels = BTreeMap::new();
        for node in graph.nodes() {
            for label in std::iter::once(&node.name).chain(node.aliases.iter()) {
                let tokens = tokenize(label);
                if !tokens.is_empty() {
                    labels.entry(tokens).or_insert_with(|| node.id.clone());
                }
            }
        }
        let longest = labels.keys().map(Vec::len).max().unwrap_or(0);
        let mut type_tokens = Vec::new();
        for t in graph.node_types() {
            for tok in tokenize(t) {
                type_tokens.push((singular(&tok).to_string(), t.to_string()));
            }
        }
        Self { labels, longest, type_tokens }
    }

    /// Node mentions in order of appearance, then the first type mentioned
    /// outside them.
    fn scan(&self, text: &str) -> (Vec<String>, Option<String>) {
        let tokens = tokenize(text);
        let mut nodes: Vec<String> = Vec::new();
        let mut first_type = None;
        let mut i = 0;
        while i < tokens.len() {
            let hit = (1..=self.longest.min(tokens.len() - i))
                .rev()
                .find_map(|n| self.labels.get(&tokens[i..i + n]).map(|id| (n, id)));
            match hit {
                Some((n, id)) => {
                    if !nodes.contains(id) {
                        nodes.push(id.clone());
                    }
                    i += n;
                }
                None => {
                    if first_type.is_none() {
                        let s = singular(&tokens[i]);
                        first_type = self.type_tokens.iter().find(|(t, _)| t == s).map(|(_, ty)| ty.clone());
                    }
                    i += 1;
                }
            }
        }
        (nodes, first_type)
    }

    /// Structured form of a free-text question: focus is the nodes named in
    /// the question followed by the nodes linked in the answer; the target is
    /// the second named node, else the first named type, else the second
    /// focus node.
    fn derive_query(&self, question: &str, grounded: &[GroundedTriple]) -> Option<Query> {
        let (mentioned, mentioned_type) = self.scan(question);
        let mut focus = mentioned.clone();
        for id in grounded.iter().flat_map(|g| [&g.subject_match.node, &g.object_match.node]).flatten() {
            if !focus.contains(id) {
                focus.push(id.clone());
            }
        }
        let target = if let Some(second) = mentioned.get(1) {
            Target::Node(second.clone())
        } else if let Some(ty) = mentioned_type {
            Target::Type(ty)
        } else {
            Target::Node(focus.get(1)?.clone())
        };
        Some(Query { focus, target })
    }
}

pub struct Engine {
    grounder: Arc<Grounder>,
    gateway: LlmGateway,
    store: Box<dyn SessionStore>,
    clock: Arc<dyn Clock>,
    kg_types: String,
    lexicon: Lexicon,
    recommendation_k: usize,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Engine {
    pub fn new(
        grounder: Arc<Grounder>,
        gateway: LlmGateway,
        store: Box<dyn SessionStore>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let graph = &grounder.graph;
        let kg_types = graph.node_types().collect::<Vec<_>>().join(", ");
        let lexicon = Lexicon::build(graph);
        Self {
            grounder,
            gateway,
            store,
            clock,
            kg_types,
            lexicon,
            recommendation_k: DEFAULT_RECOMMENDATIONS,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_recommendation_count(mut self, k: usize) -> Self {
        self.recommendation_k = k;
        self
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.grounder.graph
    }

    pub fn grounder(&self) -> &Grounder {
        &self.grounder
    }

    pub fn gateway(&self) -> &LlmGateway {
        &self.gateway
    }

    /// Outbound requests made by the LLM gateway and the embedding provider.
    pub fn network_calls(&self) -> usize {
        self.gateway.network_calls() + self.grounder.embedder.network_calls()
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table");
        locks.entry(id.to_string()).or_default().clone()
    }

    fn load(&self, id: &str) -> Result<Session, EngineError> {
        let loaded = self.store.load(id, self.graph())?;
        for w in &loaded.warnings {
            tracing::warn!(session = id, "{w}");
        }
        Ok(loaded.session)
    }

    fn commit(&self, session: &mut Session, payload: EventPayload) -> Result<(), EngineError> {
        let event = SessionEvent { sequence: session.state.last_sequence + 1, timestamp: self.clock.now_ms(), payload };
        session.state.apply(&event, self.graph())?;
        self.store.append_event(&session.state.id, &event)?;
        session.events.push(event);
        Ok(())
    }

    pub fn create_session(&self, id: &str) -> Result<SessionState, EngineError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock().expect("session lock");
        if self.store.exists(id)? {
            return Err(EngineError::SessionExists(id.to_string()));
        }
        let session = Session::new(id);
        self.store.save(&session)?;
        Ok(session.state)
    }

    pub fn state(&self, id: &str) -> Result<SessionState, EngineError> {
        Ok(self.load(id)?.state)
    }

    pub fn events(&self, id: &str) -> Result<Vec<SessionEvent>, EngineError> {
        Ok(self.load(id)?.events)
    }

    fn history_summary(state: &SessionState) -> String {
        let start = state.steps.len().saturating_sub(HISTORY_QUESTIONS);
        let lines: Vec<String> = state.steps[start..].iter().map(|s| format!("- {}", s.query_text)).collect();
        if lines.is_empty() {
            "(none)".to_string()
        } else {
            lines.join("\n")
        }
    }

    fn resolve_input(&self, state: &SessionState, input: MessageInput) -> Result<(String, Option<Query>), EngineError> {
        let graph = self.graph();
        if let Some(rid) = input.recommendation_id {
            let pool = state.pool.as_ref().ok_or_else(|| RecommendError::UnknownRecommendation(rid.clone()))?;
            let item = pool.open().find(|i| i.id() == rid).cloned();
            let item = match item {
                Some(item) => item,
                None if pool.explored.iter().any(|i| i.id() == rid) => {
                    return Err(RecommendError::AlreadyExplored(rid).into())
                }
                None => return Err(RecommendError::UnknownRecommendation(rid).into()),
            };
            let query = Query { focus: vec![item.source.clone()], target: item.target.clone() };
            let text = input.text.unwrap_or_else(|| {
                let name = |id: &str| graph.node(id).map_or_else(|| id.to_string(), |n| n.name.clone());
                let target = match &item.target {
                    Target::Node(n) => name(n),
                    Target::Type(t) => t.clone(),
                };
                format!("Can you tell me more about {} and {}?", name(&item.source), target)
            });
            return Ok((text, Some(query)));
        }
        let text = input
            .text
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| EngineError::BadRequest("message needs non-empty text or a recommendation id".into()))?;
        if let Some(q) = &input.query {
            q.validate(graph)?;
        }
        Ok((text, input.query))
    }

    /// Runs one turn. Errors before the turn starts (unknown session, bad
    /// input) are returned; failures during the turn are recorded as a failed
    /// step and reported through `sink`.
    pub fn handle_message(
        &self,
        id: &str,
        input: MessageInput,
        sink: &mut dyn FnMut(StreamEvent),
    ) -> Result<MessageOutcome, EngineError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock().expect("session lock");
        let mut session = self.load(id)?;
        let (text, query) = self.resolve_input(&session.state, input)?;
        let history = Self::history_summary(&session.state);
        self.commit(&mut session, EventPayload::UserQuery { text: text.clone(), query: query.clone() })?;

        let result = self.run_turn(&mut session, &text, query, &history, sink);
        let outcome = match result {
            Ok(outcome) => outcome,
            Err(e) => {
                let message = e.to_string();
                sink(StreamEvent::Error { code: e.code().to_string(), message: message.clone() });
                if session.state.pending.is_some() {
                    self.commit(&mut session, EventPayload::StepFailed { error: message.clone() })?;
                }
                let recommendations = self.current_recommendations(&session.state, self.recommendation_k);
                let progress = session.state.progress();
                sink(StreamEvent::Recommendations { items: recommendations.clone() });
                sink(StreamEvent::Progress { value: progress });
                let step = session.state.steps.len() - 1;
                sink(StreamEvent::Done { step, in_scope: false });
                MessageOutcome {
                    step,
                    in_scope: false,
                    text: session.state.steps[step].response.plain_text.clone(),
                    grounded: vec![],
                    recommendations,
                    progress,
                    error: Some(message),
                }
            }
        };
        self.store.save_snapshot(&session.state)?;
        Ok(outcome)
    }

    fn run_turn(
        &self,
        session: &mut Session,
        text: &str,
        query: Option<Query>,
        history: &str,
        sink: &mut dyn FnMut(StreamEvent),
    ) -> Result<MessageOutcome, EngineError> {
        let scope = self.gateway.check_scope(text, &self.kg_types)?;
        self.commit(session, EventPayload::LlmScope { in_scope: scope.in_scope })?;

        if !scope.in_scope {
            let raw = self.gateway.plain_answer(text, &mut |c| sink(StreamEvent::Text { text: c.to_string() }))?;
            self.commit(session, EventPayload::LlmResponse { raw: raw.clone() })?;
            let recommendations = self.current_recommendations(&session.state, self.recommendation_k);
            return Ok(self.finish_turn(session, false, raw, vec![], recommendations, sink));
        }

        let mut parser = AnnotationParser::new();
        let raw = self.gateway.annotated_answer(text, &self.kg_types, history, &mut |chunk| {
            let out = parser.feed(chunk);
            if !out.text.is_empty() {
                sink(StreamEvent::Text { text: out.text });
            }
            for span in out.spans {
                sink(StreamEvent::Entity { span });
            }
        })?;
        self.commit(session, EventPayload::LlmResponse { raw })?;
        let (tail, response) = parser.finish_streaming();
        if !tail.is_empty() {
            sink(StreamEvent::Text { text: tail });
        }
        for d in &response.diagnostics {
            tracing::debug!(?d, "annotation diagnostic");
        }

        let grounded = response.triples.iter().map(|t| self.grounder.ground(t)).collect::<Result<Vec<_>, _>>()?;
        let query = match query {
            Some(q) => Some(q),
            None => self.lexicon.derive_query(text, &grounded),
        };
        self.commit(session, EventPayload::GroundingResult { triples: grounded.clone(), query })?;
        for g in &grounded {
            sink(StreamEvent::Triple { triple: g.clone() });
        }

        let recommendations = self.current_recommendations(&session.state, self.recommendation_k);
        self.commit(
            session,
            EventPayload::RecommendationShown { ids: recommendations.iter().map(|r| r.id.clone()).collect() },
        )?;
        Ok(self.finish_turn(session, true, response.plain_text, grounded, recommendations, sink))
    }

    fn finish_turn(
        &self,
        session: &Session,
        in_scope: bool,
        text: String,
        grounded: Vec<GroundedTriple>,
        recommendations: Vec<Recommendation>,
        sink: &mut dyn FnMut(StreamEvent),
    ) -> MessageOutcome {
        let progress = session.state.progress();
        let step = session.state.steps.len() - 1;
        sink(StreamEvent::Recommendations { items: recommendations.clone() });
        sink(StreamEvent::Progress { value: progress });
        sink(StreamEvent::Done { step, in_scope });
        MessageOutcome { step, in_scope, text, grounded, recommendations, progress, error: None }
    }

    fn current_recommendations(&self, state: &SessionState, k: usize) -> Vec<Recommendation> {
        match &state.pool {
            Some(pool) => generate(&state.context, pool, self.graph(), k),
            None => Vec::new(),
        }
    }

    pub fn recommendations(&self, id: &str, k: usize) -> Result<Vec<Recommendation>, EngineError> {
        let state = self.state(id)?;
        Ok(self.current_recommendations(&state, k))
    }

    /// Dismisses a recommendation and returns the refreshed top list.
    pub fn dismiss(&self, id: &str, rec_id: &str) -> Result<(Vec<Recommendation>, ProgressReport), EngineError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock().expect("session lock");
        let mut session = self.load(id)?;
        self.commit(&mut session, EventPayload::Dismissal { id: rec_id.to_string() })?;
        self.store.save_snapshot(&session.state)?;
        Ok((self.current_recommendations(&session.state, self.recommendation_k), progress_report(&session.state)))
    }

    /// Moves the session's current step; the pool is not rewound.
    pub fn navigate(&self, id: &str, step: usize) -> Result<StepView, EngineError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock().expect("session lock");
        let mut session = self.load(id)?;
        self.commit(&mut session, EventPayload::Navigation { step })?;
        self.store.save_snapshot(&session.state)?;
        Ok(session.state.view_at_step(step)?)
    }

    /// Accumulated graph partitioned for `step` (default: the current step).
    pub fn graph_view(&self, id: &str, step: Option<usize>) -> Result<GraphSnapshot, EngineError> {
        let state = self.state(id)?;
        snapshot_of(&state, step)
    }

    pub fn progress(&self, id: &str) -> Result<ProgressReport, EngineError> {
        Ok(progress_report(&self.state(id)?))
    }

    pub fn evidence(&self, edge_id: &str) -> Result<EvidenceReport, EngineError> {
        let graph = self.graph();
        let edge = graph.edge(edge_id).ok_or_else(|| EngineError::UnknownEdge(edge_id.to_string()))?;
        let name = |id: &str| graph.node(id).map_or_else(|| id.to_string(), |n| n.name.clone());
        Ok(EvidenceReport {
            source_name: name(&edge.source),
            target_name: name(&edge.target),
            evidence: edge.evidence.clone(),
            edge: edge.clone(),
        })
    }
}

pub fn snapshot_of(state: &SessionState, step: Option<usize>) -> Result<GraphSnapshot, EngineError> {
    let view = match step.or(state.current_step) {
        Some(k) => Some(state.view_at_step(k)?),
        None => None,
    };
    Ok(GraphSnapshot {
        session: state.id.clone(),
        view,
        nodes: state.graph.nodes.values().cloned().collect(),
        edges: state.graph.edges.values().cloned().collect(),
    })
}

pub fn progress_report(state: &SessionState) -> ProgressReport {
    match &state.pool {
        Some(pool) => ProgressReport {
            progress: pool.progress(),
            explored: pool.explored.len(),
            total: pool.goal.len() - pool.dismissed.len(),
            dismissed: pool.dismissed.len(),
        },
        None => ProgressReport { progress: 0.0, explored: 0, total: 0, dismissed: 0 },
    }
}
