//! Event-sourced conversation state.
//!
//! Every change to a session is a [`SessionEvent`]; the state is a left fold of
//! [`SessionState::apply`] over the event log. The accumulated graph records
//! the step at which each node and edge first appeared, which drives the
//! per-step highlight/fade/hide partition in [`SessionState::view_at_step`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{self, AnnotatedResponse};
use crate::grounding::{normalize_text, GroundedTriple, Label};
use crate::kg::KnowledgeGraph;
use crate::recommend::{init_pool, Context, Query, RecommendError, RecommendationPool};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("event sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("{0} event without a pending user query")]
    NoPendingQuery(&'static str),
    #[error("grounding result before the LLM response")]
    MissingResponse,
    #[error("step {step} out of range ({steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },
    #[error(transparent)]
    Recommend(#[from] RecommendError),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session store unavailable: {0}")]
    Unavailable(#[from] std::io::Error),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("corrupt record in session {id}: {reason}")]
    CorruptRecord { id: String, reason: String },
    #[error("replaying session {id} failed: {source}")]
    Replay { id: String, source: SessionError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub sequence: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    UserQuery {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query: Option<Query>,
    },
    LlmScope {
        in_scope: bool,
    },
    LlmResponse {
        raw: String,
    },
    GroundingResult {
        triples: Vec<GroundedTriple>,
        /// The structured form of the user's question, when one could be resolved.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query: Option<Query>,
    },
    RecommendationShown {
        ids: Vec<String>,
    },
    Dismissal {
        id: String,
    },
    Navigation {
        step: usize,
    },
    /// The pending turn could not be completed; nothing was grounded.
    StepFailed {
        error: String,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::UserQuery { .. } => "user_query",
            EventPayload::LlmScope { .. } => "llm_scope",
            EventPayload::LlmResponse { .. } => "llm_response",
            EventPayload::GroundingResult { .. } => "grounding_result",
            EventPayload::RecommendationShown { .. } => "recommendation_shown",
            EventPayload::Dismissal { .. } => "dismissal",
            EventPayload::Navigation { .. } => "navigation",
            EventPayload::StepFailed { .. } => "step_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTurn {
    pub text: String,
    pub query: Option<Query>,
    pub in_scope: Option<bool>,
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepOutcome {
    Grounded,
    OutOfScope,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub query_text: String,
    pub query: Option<Query>,
    pub outcome: StepOutcome,
    pub response: AnnotatedResponse,
    pub grounded: Vec<GroundedTriple>,
    pub added_nodes: Vec<String>,
    pub added_edges: Vec<String>,
    /// Progress after this step was applied.
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub name: String,
    pub node_type: Option<String>,
    /// Set when the entity was linked to a KG node.
    pub kg_node: Option<String>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub id: String,
    pub source: String,
    pub target: String,
    pub relation: String,
    pub label: Label,
    pub evidence_count: usize,
    pub kg_edges: Vec<String>,
    /// Intermediate node ids of two-hop paths, for relevant-by-path edges.
    pub via: Vec<String>,
    pub step: usize,
}

/// Union of everything grounded so far, keyed by element id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CumulativeGraph {
    pub nodes: BTreeMap<String, GraphNode>,
    pub edges: BTreeMap<String, GraphEdge>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSet {
    pub nodes: Vec<String>,
    pub edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepView {
    pub step: usize,
    pub highlighted: ElementSet,
    pub faded: ElementSet,
    pub hidden: ElementSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub id: String,
    pub last_sequence: u64,
    pub steps: Vec<Step>,
    pub graph: CumulativeGraph,
    pub pool: Option<RecommendationPool>,
    pub context: Context,
    pub current_step: Option<usize>,
    pub pending: Option<PendingTurn>,
    pub shown: Vec<String>,
}

fn node_key(m: &crate::grounding::EntityMatch) -> String {
    match &m.node {
        Some(id) => id.clone(),
        None => format!("text:{}", normalize_text(&m.surface)),
    }
}

impl SessionState {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            last_sequence: 0,
            steps: Vec::new(),
            graph: CumulativeGraph::default(),
            pool: None,
            context: Context::default(),
            current_step: None,
            pending: None,
            shown: Vec::new(),
        }
    }

    /// Exploration progress; 0 before any goal exists.
    pub fn progress(&self) -> f64 {
        self.pool.as_ref().map_or(0.0, RecommendationPool::progress)
    }

    /// Applies one event. On error the state is left untouched.
    pub fn apply(&mut self, event: &SessionEvent, graph: &KnowledgeGraph) -> Result<(), SessionError> {
        let expected = self.last_sequence + 1;
        if event.sequence != expected {
            return Err(SessionError::SequenceGap { expected, got: event.sequence });
        }
        match &event.payload {
            EventPayload::UserQuery { text, query } => {
                self.pending =
                    Some(PendingTurn { text: text.clone(), query: query.clone(), in_scope: None, raw: None });
            }
            EventPayload::LlmScope { in_scope } => {
                self.pending_mut("llm_scope")?.in_scope = Some(*in_scope);
            }
            EventPayload::LlmResponse { raw } => {
                let pending = self.pending_mut("llm_response")?;
                pending.raw = Some(raw.clone());
                if pending.in_scope == Some(false) {
                    let pending = self.pending.take().expect("checked above");
                    self.push_step(
                        graph,
                        pending,
                        StepOutcome::OutOfScope,
                        AnnotatedResponse::plain(raw.clone()),
                        vec![],
                    );
                }
            }
            EventPayload::GroundingResult { triples, query } => {
                let pending = self.pending.as_ref().ok_or(SessionError::NoPendingQuery("grounding_result"))?;
                let raw = pending.raw.clone().ok_or(SessionError::MissingResponse)?;
                self.update_pool(pending.query.is_none(), triples, query.as_ref(), graph)?;
                let mut pending = self.pending.take().expect("checked above");
                pending.query = query.clone();
                let prefix = format!("s{}:", self.steps.len());
                let response = annotation::parse(&raw).namespaced(&prefix);
                let grounded = triples
                    .iter()
                    .map(|t| GroundedTriple { triple: t.triple.namespaced(&prefix), ..t.clone() })
                    .collect();
                self.push_step(graph, pending, StepOutcome::Grounded, response, grounded);
            }
            EventPayload::StepFailed { error } => {
                let pending = self.pending.take().ok_or(SessionError::NoPendingQuery("step_failed"))?;
                let response = AnnotatedResponse::plain(pending.raw.clone().unwrap_or_default());
                self.push_step(graph, pending, StepOutcome::Failed { error: error.clone() }, response, vec![]);
            }
            EventPayload::RecommendationShown { ids } => {
                self.shown = ids.clone();
            }
            EventPayload::Dismissal { id } => {
                let pool = self.pool.as_mut().ok_or_else(|| RecommendError::UnknownRecommendation(id.clone()))?;
                pool.dismiss(id)?;
            }
            EventPayload::Navigation { step } => {
                if *step >= self.steps.len() {
                    return Err(SessionError::StepOutOfRange { step: *step, steps: self.steps.len() });
                }
                self.current_step = Some(*step);
            }
        }
        self.last_sequence = event.sequence;
        Ok(())
    }

    fn pending_mut(&mut self, kind: &'static str) -> Result<&mut PendingTurn, SessionError> {
        self.pending.as_mut().ok_or(SessionError::NoPendingQuery(kind))
    }

    /// Seeds the goal on the first grounded step, widens it for free-text
    /// questions afterwards, and marks what the question covered as explored.
    /// Validates everything before mutating.
    fn update_pool(
        &mut self,
        free_text: bool,
        triples: &[GroundedTriple],
        query: Option<&Query>,
        graph: &KnowledgeGraph,
    ) -> Result<(), SessionError> {
        if let Some(q) = query {
            q.validate(graph)?;
        }
        let mut entities: Vec<String> = Vec::new();
        let matched = triples.iter().flat_map(|t| [&t.subject_match.node, &t.object_match.node]).flatten();
        for id in query.into_iter().flat_map(|q| q.focus.iter()).chain(matched) {
            if !entities.contains(id) {
                entities.push(id.clone());
            }
        }

        let mut pool = self.pool.clone();
        match &mut pool {
            None if !entities.is_empty() => pool = Some(init_pool(&entities, graph)?),
            Some(p) if free_text => p.expand(&entities, graph)?,
            _ => {}
        }
        if let (Some(p), Some(q)) = (&mut pool, query) {
            p.record_explored(q);
        }
        self.pool = pool;
        if let Some(q) = query {
            self.context.push(q.clone());
        }
        Ok(())
    }

    fn push_step(
        &mut self,
        graph: &KnowledgeGraph,
        pending: PendingTurn,
        outcome: StepOutcome,
        response: AnnotatedResponse,
        grounded: Vec<GroundedTriple>,
    ) {
        let index = self.steps.len();
        let mut added_nodes = Vec::new();
        let mut added_edges = Vec::new();
        for g in &grounded {
            let ends = [(&g.subject_match, &g.triple.subject_surface), (&g.object_match, &g.triple.object_surface)];
            let mut keys = Vec::with_capacity(2);
            for (m, surface) in ends {
                let key = node_key(m);
                if !self.graph.nodes.contains_key(&key) {
                    let kg_node = m.node.as_deref().and_then(|id| graph.node(id));
                    self.graph.nodes.insert(
                        key.clone(),
                        GraphNode {
                            id: key.clone(),
                            name: kg_node.map_or_else(|| surface.clone(), |n| n.name.clone()),
                            node_type: kg_node.map(|n| n.node_type.clone()),
                            kg_node: m.node.clone(),
                            step: index,
                        },
                    );
                    added_nodes.push(key.clone());
                }
                keys.push(key);
            }
            let edge_id = format!("{}|{}|{}", keys[0], normalize_text(&g.triple.relation_surface), keys[1]);
            if !self.graph.edges.contains_key(&edge_id) {
                let v = &g.verdict;
                self.graph.edges.insert(
                    edge_id.clone(),
                    GraphEdge {
                        id: edge_id.clone(),
                        source: keys[0].clone(),
                        target: keys[1].clone(),
                        relation: g.triple.relation_surface.clone(),
                        label: v.label,
                        evidence_count: v.evidence_count,
                        kg_edges: v.direct_edges.clone(),
                        via: v.two_hop.iter().map(|p| p.mid.id.clone()).collect(),
                        step: index,
                    },
                );
                added_edges.push(edge_id);
            }
        }
        self.steps.push(Step {
            index,
            query_text: pending.text,
            query: pending.query,
            outcome,
            response,
            grounded,
            added_nodes,
            added_edges,
            progress: self.progress(),
        });
        self.current_step = Some(index);
    }

    /// Splits the accumulated graph into the elements introduced at step `k`,
    /// before it, and after it.
    pub fn view_at_step(&self, k: usize) -> Result<StepView, SessionError> {
        if k >= self.steps.len() {
            return Err(SessionError::StepOutOfRange { step: k, steps: self.steps.len() });
        }
        let mut view = StepView {
            step: k,
            highlighted: ElementSet::default(),
            faded: ElementSet::default(),
            hidden: ElementSet::default(),
        };
        for node in self.graph.nodes.values() {
            select(&mut view, node.step, k).nodes.push(node.id.clone());
        }
        for edge in self.graph.edges.values() {
            select(&mut view, edge.step, k).edges.push(edge.id.clone());
        }
        Ok(view)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session state serializes")
    }
}

fn select(view: &mut StepView, step: usize, k: usize) -> &mut ElementSet {
    match step.cmp(&k) {
        std::cmp::Ordering::Less => &mut view.faded,
        std::cmp::Ordering::Equal => &mut view.highlighted,
        std::cmp::Ordering::Greater => &mut view.hidden,
    }
}

/// Folds `events` into a fresh state for session `id`.
pub fn replay(id: &str, events: &[SessionEvent], graph: &KnowledgeGraph) -> Result<SessionState, SessionError> {
    let mut state = SessionState::new(id);
    for event in events {
        state.apply(event, graph)?;
    }
    Ok(state)
}

/// A session's state together with the log it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub state: SessionState,
    pub events: Vec<SessionEvent>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self { state: SessionState::new(id), events: Vec::new() }
    }
}

/// Result of [`SessionStore::load`]; `warnings` explains any recovery performed.
#[derive(Debug)]
pub struct Loaded {
    pub session: Session,
    pub warnings: Vec<String>,
}

pub fn events_to_jsonl(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSON Lines event log. A torn final line (no trailing newline)
/// is dropped with a warning; any other bad line is an error.
pub fn events_from_jsonl(id: &str, text: &str) -> Result<(Vec<SessionEvent>, Vec<String>), StoreError> {
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    let lines: Vec<&str> = text.split('\n').collect();
    let last = lines.len() - 1;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SessionEvent>(line) {
            Ok(e) => events.push(e),
            Err(_) if i == last => warnings.push(format!("dropped incomplete trailing event in session {id}")),
            Err(e) => {
                return Err(StoreError::CorruptRecord {
                    id: id.to_string(),
                    reason: format!("event line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok((events, warnings))
}

/// Rebuilds a session from its raw snapshot and log. The snapshot is trusted
/// only if it parses, has the current schema and matches the log's last sequence.
pub fn recover(id: &str, snapshot: Option<&str>, log: &str, graph: &KnowledgeGraph) -> Result<Loaded, StoreError> {
    let (events, mut warnings) = events_from_jsonl(id, log)?;
    let last = events.last().map_or(0, |e| e.sequence);
    let parsed = snapshot.map(serde_json::from_str::<SessionState>);
    let state = match parsed {
        Some(Ok(s)) if s.schema_version == SCHEMA_VERSION && s.last_sequence == last && s.id == id => s,
        other => {
            let reason = match other {
                None => "snapshot missing".to_string(),
                Some(Err(e)) => format!("snapshot unreadable: {e}"),
                Some(Ok(s)) if s.schema_version != SCHEMA_VERSION => format!("snapshot schema {}", s.schema_version),
                Some(Ok(_)) => "snapshot out of date with log".to_string(),
            };
            warnings.push(format!("session {id}: {reason}; rebuilt from event log"));
            tracing::warn!(session = id, %reason, "rebuilding session from event log");
            replay(id, &events, graph).map_err(|source| StoreError::Replay { id: id.to_string(), source })?
        }
    };
    Ok(Loaded { session: Session { state, events }, warnings })
}

/// Key-value persistence for sessions: a snapshot plus an append-only event log.
pub trait SessionStore: Send + Sync {
    fn append_event(&self, id: &str, event: &SessionEvent) -> Result<(), StoreError>;
    fn save_snapshot(&self, state: &SessionState) -> Result<(), StoreError>;
    fn load(&self, id: &str, graph: &KnowledgeGraph) -> Result<Loaded, StoreError>;
    fn exists(&self, id: &str) -> Result<bool, StoreError>;

    /// Replaces both log and snapshot with `session`.
    fn save(&self, session: &Session) -> Result<(), StoreError>;
}

/// One directory, two files per session: `{id}.snapshot.json` and `{id}.events.jsonl`.
pub struct FileStore {
    root: PathBuf,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    fn check_id(id: &str) -> Result<(), StoreError> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(StoreError::UnknownSession(id.to_string()))
        }
    }

    pub fn snapshot_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.snapshot.json"))
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.events.jsonl"))
    }

    fn write_atomic(&self, path: &Path, contents: &str) -> Result<(), StoreError> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root)?;
        tmp.write_all(contents.as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| StoreError::Unavailable(e.error))?;
        Ok(())
    }
}

impl SessionStore for FileStore {
    fn append_event(&self, id: &str, event: &SessionEvent) -> Result<(), StoreError> {
        Self::check_id(id)?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.log_path(id))?;
        let mut line = serde_json::to_string(event).expect("event serializes");
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    fn save_snapshot(&self, state: &SessionState) -> Result<(), StoreError> {
        Self::check_id(&state.id)?;
        self.write_atomic(&self.snapshot_path(&state.id), &state.to_json())
    }

    fn load(&self, id: &str, graph: &KnowledgeGraph) -> Result<Loaded, StoreError> {
        Self::check_id(id)?;
        let read = |p: PathBuf| match fs::read_to_string(p) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Unavailable(e)),
        };
        let snapshot = read(self.snapshot_path(id))?;
        let log = read(self.log_path(id))?;
        if snapshot.is_none() && log.is_none() {
            return Err(StoreError::UnknownSession(id.to_string()));
        }
        recover(id, snapshot.as_deref(), log.as_deref().unwrap_or(""), graph)
    }

    fn exists(&self, id: &str) -> Result<bool, StoreError> {
        Self::check_id(id)?;
        Ok(self.snapshot_path(id).exists() || self.log_path(id).exists())
    }

    fn save(&self, session: &Session) -> Result<(), StoreError> {
        Self::check_id(&session.state.id)?;
        self.write_atomic(&self.log_path(&session.state.id), &events_to_jsonl(&session.events))?;
        self.save_snapshot(&session.state)
    }
}

/// In-process store; handy for tests and ephemeral servers.
#[derive(Default)]
pub struct MemoryStore {
    records: Mutex<HashMap<String, (Option<String>, String)>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overwrites the raw snapshot text; lets tests simulate corruption.
    pub fn put_raw_snapshot(&self, id: &str, text: &str) {
        let mut records = self.records.lock().expect("store lock");
        records.entry(id.to_string()).or_default().0 = Some(text.to_string());
    }
}

impl SessionStore for MemoryStore {
    fn append_event(&self, id: &str, event: &SessionEvent) -> Result<(), StoreError> {
        let mut records = self.records.lock().expect("store lock");
        let log = &mut records.entry(id.to_string()).or_default().1;
        log.push_str(&serde_json::to_string(event).expect("event serializes"));
        log.push('\n');
        Ok(())
    }

    fn save_snapshot(&self, state: &SessionState) -> Result<(), StoreError> {
        let mut records = self.records.lock().expect("store lock");
        records.entry(state.id.clone()).or_default().0 = Some(state.to_json());
        Ok(())
    }

    fn load(&self, id: &str, graph: &KnowledgeGraph) -> Result<Loaded, StoreError> {
        let (snapshot, log) = {
            let records = self.records.lock().expect("store lock");
            records.get(id).cloned().ok_or_else(|| StoreError::UnknownSession(id.to_string()))?
        };
        recover(id, snapshot.as_deref(), &log, graph)
    }

    fn exists(&self, id: &str) -> Result<bool, StoreError> {
        Ok(self.records.lock().expect("store lock").contains_key(id))
    }

    fn save(&self, session: &Session) -> Result<(), StoreError> {
        let mut records = self.records.lock().expect("store lock");
        records.insert(session.state.id.clone(), (Some(session.state.to_json()), events_to_jsonl(&session.events)));
        Ok(())
    }
}
