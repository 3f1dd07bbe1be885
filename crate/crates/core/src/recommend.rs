//! Next-question recommendations drawn from the KG neighbourhood of the
//! conversation.
//!
//! A query pairs one or more focus nodes with either another node or a node
//! type. The goal set holds every `(entity, neighbour)` and
//! `(entity, neighbour type)` pair around the frontier entities; recommendations
//! are the goal items whose source appears in the conversation context and that
//! the user has neither dismissed nor already asked about. Progress is the
//! explored share of the non-dismissed goal.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{Direction, KgError, KnowledgeGraph};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecommendError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown node type {0}")]
    UnknownType(String),
    #[error("query has no focus nodes")]
    EmptyFocus,
    #[error("unknown recommendation {0}")]
    UnknownRecommendation(String),
    #[error("recommendation {0} was already explored")]
    AlreadyExplored(String),
}

impl From<KgError> for RecommendError {
    fn from(e: KgError) -> Self {
        match e {
            KgError::UnknownNode(id) => RecommendError::UnknownNode(id),
            other => RecommendError::UnknownNode(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Target {
    Node(String),
    Type(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub focus: Vec<String>,
    pub target: Target,
}

impl Query {
    pub fn validate(&self, graph: &KnowledgeGraph) -> Result<(), RecommendError> {
        if self.focus.is_empty() {
            return Err(RecommendError::EmptyFocus);
        }
        for id in &self.focus {
            graph.node(id).ok_or_else(|| RecommendError::UnknownNode(id.clone()))?;
        }
        match &self.target {
            Target::Node(id) => {
                graph.node(id).ok_or_else(|| RecommendError::UnknownNode(id.clone()))?;
            }
            Target::Type(t) => {
                if graph.nodes_of_type(t).next().is_none() {
                    return Err(RecommendError::UnknownType(t.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Ordered query history, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub queries: Vec<Query>,
}

impl Context {
    pub fn push(&mut self, query: Query) {
        self.queries.push(query);
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn focus_nodes(&self) -> BTreeSet<&str> {
        self.queries.iter().flat_map(|q| q.focus.iter().map(String::as_str)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoalItem {
    pub source: String,
    pub target: Target,
}

impl GoalItem {
    /// Content hash of `(source, target)`; stable across runs and serialization.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.as_bytes());
        h.update([0x1f]);
        match &self.target {
            Target::Node(n) => {
                h.update(b"node:");
                h.update(n.as_bytes());
            }
            Target::Type(t) => {
                h.update(b"type:");
                h.update(t.as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub source: String,
    pub target: Target,
    pub question: String,
    pub score: f64,
}

impl Recommendation {
    pub fn item(&self) -> GoalItem {
        GoalItem { source: self.source.clone(), target: self.target.clone() }
    }

    pub fn as_query(&self) -> Query {
        Query { focus: vec![self.source.clone()], target: self.target.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationPool {
    pub goal: BTreeSet<GoalItem>,
    pub dismissed: BTreeSet<GoalItem>,
    pub explored: BTreeSet<GoalItem>,
    pub frontier: BTreeSet<String>,
}

/// Goal items contributed by one entity: each neighbour and each neighbour
/// type. Self-loops contribute nothing.
fn neighbourhood(entity: &str, graph: &KnowledgeGraph) -> Result<BTreeSet<GoalItem>, RecommendError> {
    let mut items = BTreeSet::new();
    for (_, neighbour) in graph.neighbors(entity, Direction::Both)? {
        if neighbour == entity {
            continue;
        }
        let node = graph.node(neighbour).expect("neighbour exists");
        items.insert(GoalItem { source: entity.to_string(), target: Target::Node(node.id.clone()) });
        items.insert(GoalItem { source: entity.to_string(), target: Target::Type(node.node_type.clone()) });
    }
    Ok(items)
}

pub fn init_pool(entities: &[String], graph: &KnowledgeGraph) -> Result<RecommendationPool, RecommendError> {
    let mut pool = RecommendationPool::default();
    pool.expand(entities, graph)?;
    Ok(pool)
}

impl RecommendationPool {
    /// Adds the neighbourhoods of entities not yet on the frontier. All
    /// entities are checked before anything changes.
    pub fn expand(&mut self, entities: &[String], graph: &KnowledgeGraph) -> Result<(), RecommendError> {
        let mut additions = Vec::new();
        for e in entities {
            if graph.node(e).is_none() {
                return Err(RecommendError::UnknownNode(e.clone()));
            }
            if !self.frontier.contains(e) {
                additions.push((e.clone(), neighbourhood(e, graph)?));
            }
        }
        for (entity, items) in additions {
            self.frontier.insert(entity);
            self.goal.extend(items);
        }
        Ok(())
    }

    pub fn find(&self, rec_id: &str) -> Option<&GoalItem> {
        self.goal.iter().find(|item| item.id() == rec_id)
    }

    pub fn dismiss(&mut self, rec_id: &str) -> Result<GoalItem, RecommendError> {
        let item = self.find(rec_id).cloned().ok_or_else(|| RecommendError::UnknownRecommendation(rec_id.into()))?;
        if self.explored.contains(&item) {
            return Err(RecommendError::AlreadyExplored(rec_id.into()));
        }
        self.dismissed.insert(item.clone());
        Ok(item)
    }

    /// Marks every goal item answered by `query` as explored and returns how
    /// many moved. Dismissed items stay dismissed.
    pub fn record_explored(&mut self, query: &Query) -> usize {
        let matched: Vec<GoalItem> = self
            .goal
            .iter()
            .filter(|item| item.target == query.target && query.focus.contains(&item.source))
            .filter(|item| !self.dismissed.contains(*item) && !self.explored.contains(*item))
            .cloned()
            .collect();
        let n = matched.len();
        self.explored.extend(matched);
        n
    }

    /// Items still open for recommendation.
    pub fn open(&self) -> impl Iterator<Item = &GoalItem> {
        self.goal.iter().filter(|i| !self.dismissed.contains(*i) && !self.explored.contains(*i))
    }

    /// `|explored| / |goal \ dismissed|`, or 1.0 when nothing is left to count.
    pub fn progress(&self) -> f64 {
        let denominator = self.goal.len() - self.dismissed.len();
        if denominator == 0 {
            1.0
        } else {
            self.explored.len() as f64 / denominator as f64
        }
    }
}

/// Literature supporting the connection an item asks about.
pub fn evidence_score(item: &GoalItem, graph: &KnowledgeGraph) -> usize {
    let Some(adj) = graph.adjacency().get(&item.source) else {
        return 0;
    };
    let edges = graph.edges();
    adj.outgoing
        .iter()
        .chain(&adj.incoming)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|&i| &edges[i])
        .filter(|e| {
            let other = e.other_end(&item.source);
            if other == item.source {
                return false;
            }
            match &item.target {
                Target::Node(n) => other == n,
                Target::Type(t) => graph.node(other).is_some_and(|n| &n.node_type == t),
            }
        })
        .map(|e| e.evidence.len())
        .sum()
}

/// Top `k` open goal items whose source appears in the context, ranked by
/// evidence score (descending) and then id.
pub fn generate(context: &Context, pool: &RecommendationPool, graph: &KnowledgeGraph, k: usize) -> Vec<Recommendation> {
    let focus = context.focus_nodes();
    let mut recs: Vec<Recommendation> = pool
        .open()
        .filter(|item| focus.contains(item.source.as_str()))
        .map(|item| Recommendation {
            id: item.id(),
            source: item.source.clone(),
            target: item.target.clone(),
            question: question_for(item, graph),
            score: evidence_score(item, graph) as f64,
        })
        .collect();
    recs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    recs.truncate(k);
    recs
}

pub fn to_question(rec: &Recommendation, graph: &KnowledgeGraph) -> String {
    question_for(&rec.item(), graph)
}

fn question_for(item: &GoalItem, graph: &KnowledgeGraph) -> String {
    let name = |id: &str| graph.node(id).map_or_else(|| id.to_string(), |n| n.name.clone());
    let target = match &item.target {
        Target::Node(n) => name(n),
        Target::Type(t) => t.clone(),
    };
    format!("Can you tell me more about {} and {}?", name(&item.source), target)
}
