//! Grounding of extracted triples onto the knowledge graph.
//!
//! Entities are linked to nodes by embedding cosine similarity over node names
//! and aliases. A linked triple then gets one of three labels:
//!
//! * **Support**: a direct edge exists whose relation embeds within
//!   `theta_r` of the triple's relation.
//! * **Relevant**: direct edges exist but none has a close enough relation,
//!   or there is no direct edge but a two-hop path connects the nodes.
//! * **Unsure**: an entity could not be linked, or the nodes are not
//!   connected within two hops.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::Triple;
use crate::kg::{KgError, KnowledgeGraph, TwoHopPath};

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine of an all-zero vector is undefined")]
    ZeroVector,
    #[error("embedding contains non-finite values or is empty")]
    InvalidVector,
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("embedding table: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kg(#[from] KgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GroundingError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(GroundingError::InvalidVector);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, GroundingError> {
    if a.dimension() != b.dimension() {
        return Err(GroundingError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GroundingError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> &str;

    /// Embeds already-normalized, non-empty texts.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GroundingError>;

    /// Number of requests that went over the network.
    fn network_calls(&self) -> usize {
        0
    }
}

/// Table-backed provider for offline use. Terms missing from the table get a
/// pseudo-random vector seeded by a hash of the text, so they are stable but
/// unrelated to everything else.
pub struct FixtureProvider {
    id: String,
    dimension: usize,
    seed: u64,
    vectors: HashMap<String, EmbeddingVector>,
}

#[derive(Deserialize)]
struct FixtureTable {
    dimension: usize,
    #[serde(default)]
    seed: u64,
    vectors: HashMap<String, Vec<f64>>,
}

impl FixtureProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GroundingError> {
        let text = fs::read_to_string(path.as_ref())?;
        let digest = hex::encode(&Sha256::digest(text.as_bytes())[..4]);
        let table: FixtureTable = serde_json::from_str(&text).map_err(|e| GroundingError::Table(e.to_string()))?;
        let mut vectors = HashMap::with_capacity(table.vectors.len());
        for (term, values) in table.vectors {
            if values.len() != table.dimension {
                return Err(GroundingError::Table(format!(
                    "vector for {term:?} has {} values, expected {}",
                    values.len(),
                    table.dimension
                )));
            }
            vectors.insert(normalize_text(&term), EmbeddingVector::new(values)?);
        }
        Ok(Self {
            id: format!("fixture:{}:{digest}", table.seed),
            dimension: table.dimension,
            seed: table.seed,
            vectors,
        })
    }

    /// Provider with no table: every text gets its hash-seeded vector.
    pub fn hashed(dimension: usize, seed: u64) -> Self {
        Self { id: format!("fixture:{seed}"), dimension, seed, vectors: HashMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn contains(&self, text: &str) -> bool {
        self.vectors.contains_key(&normalize_text(text))
    }

    fn fallback(&self, normalized: &str) -> EmbeddingVector {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(normalized.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let values = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingVector(values)
    }
}

impl EmbeddingProvider for FixtureProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GroundingError> {
        Ok(texts.iter().map(|t| self.vectors.get(t).cloned().unwrap_or_else(|| self.fallback(t))).collect())
    }
}

/// Client for an HTTP embedding endpoint speaking the
/// `{"model", "input": [...]}` -> `{"data": [{"embedding": [...]}]}` contract.
pub struct HttpProvider {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpProvider {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GroundingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GroundingError::ProviderUnavailable(e.to_string()))?;
        Ok(Self {
            id: format!("http:{model}"),
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            client,
            calls: AtomicUsize::new(0),
        })
    }
}

impl EmbeddingProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GroundingError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut req = self.client.post(&self.url).json(&serde_json::json!({
            "model": self.model,
            "input": texts,
        }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let unavailable = |e: reqwest::Error| GroundingError::ProviderUnavailable(e.to_string());
        let resp: EmbeddingResponse =
            req.send().and_then(|r| r.error_for_status()).map_err(unavailable)?.json().map_err(unavailable)?;
        if resp.data.len() != texts.len() {
            return Err(GroundingError::ProviderUnavailable(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        data.into_iter().map(|d| EmbeddingVector::new(d.embedding)).collect()
    }

    fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Caching front for a provider. Keys are `(provider id, normalized text)`.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Mutex<HashMap<(String, String), Arc<EmbeddingVector>>>,
    dimension: Mutex<Option<usize>>,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self { provider, cache: Mutex::new(HashMap::new()), dimension: Mutex::new(None) }
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn network_calls(&self) -> usize {
        self.provider.network_calls()
    }

    pub fn embed(&self, text: &str) -> Result<Arc<EmbeddingVector>, GroundingError> {
        let mut out = self.embed_many(&[text])?;
        Ok(out.pop().expect("one input, one output"))
    }

    pub fn embed_many(&self, texts: &[&str]) -> Result<Vec<Arc<EmbeddingVector>>, GroundingError> {
        let keys: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
        if keys.iter().any(String::is_empty) {
            return Err(GroundingError::EmptyText);
        }
        let provider_id = self.provider.id().to_string();
        let mut missing: Vec<String> = {
            let cache = self.cache.lock().expect("cache lock");
            keys.iter().filter(|k| !cache.contains_key(&(provider_id.clone(), (*k).clone()))).cloned().collect()
        };
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            let vectors = self.provider.embed_batch(&missing)?;
            let mut dim = self.dimension.lock().expect("dimension lock");
            for v in &vectors {
                let expected = *dim.get_or_insert(v.dimension());
                if v.dimension() != expected {
                    return Err(GroundingError::DimensionMismatch(expected, v.dimension()));
                }
            }
            let mut cache = self.cache.lock().expect("cache lock");
            for (k, v) in missing.into_iter().zip(vectors) {
                cache.insert((provider_id.clone(), k), Arc::new(v));
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(keys.into_iter().map(|k| cache[&(provider_id.clone(), k)].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub theta_n: f64,
    pub theta_r: f64,
    pub two_hop_limit: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { theta_n: 0.85, theta_r: 0.94, two_hop_limit: 10 }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), GroundingError> {
        for t in [self.theta_n, self.theta_r] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(GroundingError::InvalidThreshold(t));
            }
        }
        if self.two_hop_limit == 0 {
            return Err(GroundingError::Table("two_hop_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub node_id: String,
    pub label: String,
    pub vector: Arc<EmbeddingVector>,
}

/// Embeddings of every node name and alias, in `(node id, label)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeIndex {
    pub provider: String,
    pub entries: Vec<IndexEntry>,
}

impl NodeIndex {
    pub fn build(graph: &KnowledgeGraph, embedder: &Embedder) -> Result<Self, GroundingError> {
        let labels = node_labels(graph);
        let texts: Vec<&str> = labels.iter().map(|(_, l)| l.as_str()).collect();
        let vectors = embedder.embed_many(&texts)?;
        let entries = labels
            .into_iter()
            .zip(vectors)
            .map(|((node_id, label), vector)| IndexEntry { node_id, label, vector })
            .collect();
        Ok(Self { provider: embedder.provider_id().to_string(), entries })
    }

    /// Reuses the sidecar cache at `path` when it was built by the same provider
    /// over the same labels; otherwise rebuilds and rewrites it.
    pub fn load_or_build(
        graph: &KnowledgeGraph,
        embedder: &Embedder,
        path: impl AsRef<Path>,
    ) -> Result<Self, GroundingError> {
        let path = path.as_ref();
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(cached) = serde_json::from_str::<NodeIndex>(&text) {
                let labels = node_labels(graph);
                let same_labels = cached.entries.len() == labels.len()
                    && cached.entries.iter().zip(&labels).all(|(e, (n, l))| &e.node_id == n && &e.label == l);
                if cached.provider == embedder.provider_id() && same_labels {
                    return Ok(cached);
                }
            }
            tracing::warn!(path = %path.display(), "embedding cache stale or unreadable, rebuilding");
        }
        let index = Self::build(graph, embedder)?;
        index.save(path)?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GroundingError> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, self).map_err(|e| GroundingError::Table(e.to_string()))?;
        tmp.persist(path).map_err(|e| GroundingError::Io(e.error))?;
        Ok(())
    }
}

/// `(node id, label)` for each node name and distinct alias.
fn node_labels(graph: &KnowledgeGraph) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for node in graph.nodes() {
        let mut seen = vec![normalize_text(&node.name)];
        out.push((node.id.clone(), node.name.clone()));
        for alias in &node.aliases {
            let norm = normalize_text(alias);
            if norm.is_empty() || seen.contains(&norm) {
                continue;
            }
            seen.push(norm);
            out.push((node.id.clone(), alias.clone()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub surface: String,
    pub node: Option<String>,
    /// Best similarity found, whether or not it cleared the threshold.
    pub similarity: f64,
}

/// Links `surface` to the node with the most similar name or alias. Ties go to
/// the smallest node id. No node is returned below `theta_n`.
pub fn match_entity(
    surface: &str,
    index: &NodeIndex,
    embedder: &Embedder,
    theta_n: f64,
) -> Result<EntityMatch, GroundingError> {
    let query = embedder.embed(surface)?;
    let mut best: Option<(&str, f64)> = None;
    for entry in &index.entries {
        let sim = cosine(&query, &entry.vector)?;
        best = match best {
            Some((id, s)) if s > sim || (s == sim && id <= entry.node_id.as_str()) => Some((id, s)),
            _ => Some((entry.node_id.as_str(), sim)),
        };
    }
    Ok(match best {
        Some((id, sim)) => EntityMatch {
            surface: surface.to_string(),
            node: (sim >= theta_n).then(|| id.to_string()),
            similarity: sim,
        },
        None => EntityMatch { surface: surface.to_string(), node: None, similarity: -1.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Support,
    Relevant,
    Unsure,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Support => "Support",
            Label::Relevant => "Relevant",
            Label::Unsure => "Unsure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub direct_edges: Vec<String>,
    pub two_hop: Vec<TwoHopPath>,
    pub evidence_count: usize,
    pub best_relation_similarity: Option<f64>,
}

impl Verdict {
    fn unsure() -> Self {
        Self {
            label: Label::Unsure,
            direct_edges: vec![],
            two_hop: vec![],
            evidence_count: 0,
            best_relation_similarity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedTriple {
    pub triple: Triple,
    pub subject_match: EntityMatch,
    pub object_match: EntityMatch,
    pub verdict: Verdict,
}

/// Applies the labelling rules in order; see the module docs.
pub fn classify(
    triple: &Triple,
    subject: &EntityMatch,
    object: &EntityMatch,
    graph: &KnowledgeGraph,
    cfg: &MatcherConfig,
    embedder: &Embedder,
) -> Result<Verdict, GroundingError> {
    let (Some(s), Some(o)) = (&subject.node, &object.node) else {
        return Ok(Verdict::unsure());
    };

    let direct = graph.direct_edges(s, o)?;
    if !direct.is_empty() {
        let relation = embedder.embed(&triple.relation_surface)?;
        let mut passing = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for (edge, _) in &direct {
            let sim = cosine(&relation, &*embedder.embed(&edge.relation)?)?;
            best = best.max(sim);
            if sim >= cfg.theta_r {
                passing.push(*edge);
            }
        }
        let (label, counted) = if passing.is_empty() {
            (Label::Relevant, direct.iter().map(|(e, _)| *e).collect::<Vec<_>>())
        } else {
            (Label::Support, passing)
        };
        return Ok(Verdict {
            label,
            direct_edges: counted.iter().map(|e| e.id.clone()).collect(),
            two_hop: vec![],
            evidence_count: counted.iter().map(|e| e.evidence.len()).sum(),
            best_relation_similarity: Some(best),
        });
    }

    let two_hop = graph.two_hop_paths(s, o, cfg.two_hop_limit)?;
    if two_hop.is_empty() {
        return Ok(Verdict::unsure());
    }
    Ok(Verdict {
        label: Label::Relevant,
        direct_edges: vec![],
        two_hop,
        evidence_count: 0,
        best_relation_similarity: None,
    })
}

/// Graph, node index, embedder and thresholds bundled for repeated grounding.
pub struct Grounder {
    pub graph: Arc<KnowledgeGraph>,
    pub index: Arc<NodeIndex>,
    pub embedder: Arc<Embedder>,
    pub config: MatcherConfig,
}

impl Grounder {
    pub fn new(
        graph: Arc<KnowledgeGraph>,
        embedder: Arc<Embedder>,
        config: MatcherConfig,
    ) -> Result<Self, GroundingError> {
        config.validate()?;
        let index = Arc::new(NodeIndex::build(&graph, &embedder)?);
        Ok(Self { graph, index, embedder, config })
    }

    pub fn with_index(
        graph: Arc<KnowledgeGraph>,
        index: Arc<NodeIndex>,
        embedder: Arc<Embedder>,
        config: MatcherConfig,
    ) -> Result<Self, GroundingError> {
        config.validate()?;
        Ok(Self { graph, index, embedder, config })
    }

    pub fn match_entity(&self, surface: &str) -> Result<EntityMatch, GroundingError> {
        match_entity(surface, &self.index, &self.embedder, self.config.theta_n)
    }

    pub fn ground(&self, triple: &Triple) -> Result<GroundedTriple, GroundingError> {
        let subject_match = self.match_entity(&triple.subject_surface)?;
        let object_match = self.match_entity(&triple.object_surface)?;
        let verdict = classify(triple, &subject_match, &object_match, &self.graph, &self.config, &self.embedder)?;
        Ok(GroundedTriple { triple: triple.clone(), subject_match, object_match, verdict })
    }

    /// Grounds a bare `(subject, relation, object)` claim.
    pub fn verify(&self, subject: &str, relation: &str, object: &str) -> Result<GroundedTriple, GroundingError> {
        self.ground(&Triple {
            subject_surface: subject.to_string(),
            relation_surface: relation.to_string(),
            object_surface: object.to_string(),
            subject_id: "$n1".into(),
            relation_id: "$r1".into(),
            object_id: "$n2".into(),
        })
    }
}
