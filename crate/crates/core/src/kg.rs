//! In-memory knowledge graph with literature evidence attached to edges.
//!
//! The graph is loaded once from a JSON Lines file and is immutable afterwards.
//! Connectivity queries ([`KnowledgeGraph::direct_edges`],
//! [`KnowledgeGraph::two_hop_paths`]) ignore edge direction but report the
//! orientation of every hop so callers can render the edge the way it is stored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("failed to read knowledge graph: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("edge {0} references a node that does not exist")]
    DanglingEndpoint(String),
    #[error("duplicate node id {0}")]
    DuplicateNodeId(String),
    #[error("duplicate edge id {0}")]
    DuplicateEdgeId(String),
    #[error("edge {edge} lists evidence {source_id} more than once")]
    DuplicateEvidence { edge: String, source_id: String },
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: &'static str },
    #[error("unknown node {0}")]
    UnknownNode(String),
}

/// A literature record backing an edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub source_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: String,
    pub name: String,
    #[serde(rename = "type")]
    pub node_type: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEdge {
    pub id: String,
    pub source: String,
    pub target: String,
    pub relation: String,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
}

impl KgEdge {
    /// The endpoint opposite to `node`. For a self-loop this is `node` itself.
    pub fn other_end(&self, node: &str) -> &str {
        if self.source == node {
            &self.target
        } else {
            &self.source
        }
    }
}

/// Traversal direction for [`KnowledgeGraph::neighbors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Out,
    In,
    Both,
}

/// How a hop traverses a stored edge: along its direction or against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHopPath {
    pub first: KgEdge,
    pub first_orientation: Orientation,
    pub mid: KgNode,
    pub second: KgEdge,
    pub second_orientation: Orientation,
}

impl TwoHopPath {
    pub fn evidence_count(&self) -> usize {
        self.first.evidence.len() + self.second.evidence.len()
    }
}

/// Edge indices incident to a node, each list sorted by edge id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Adjacency {
    pub outgoing: Vec<usize>,
    pub incoming: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Node(KgNode),
    Edge(KgEdge),
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<String, KgNode>,
    edges: Vec<KgEdge>,
    edge_index: HashMap<String, usize>,
    adjacency: BTreeMap<String, Adjacency>,
    type_index: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeGraph {
    /// Reads a JSON Lines graph file. Node lines may follow the edges that
    /// reference them; endpoints are validated once the whole file is read.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let reader = BufReader::new(File::open(path)?);
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(&line).map_err(|e| KgError::Parse { line: i + 1, message: e.to_string() })?;
            match record {
                Record::Node(n) => nodes.push(n),
                Record::Edge(e) => edges.push(e),
            }
        }
        Self::from_parts(nodes, edges)
    }

    pub fn from_parts(nodes: Vec<KgNode>, edges: Vec<KgEdge>) -> Result<Self, KgError> {
        let mut node_map = BTreeMap::new();
        for node in nodes {
            if node.id.is_empty() {
                return Err(KgError::InvalidRecord { id: node.id, reason: "empty node id" });
            }
            if node.name.trim().is_empty() {
                return Err(KgError::InvalidRecord { id: node.id, reason: "empty node name" });
            }
            if node.node_type.trim().is_empty() {
                return Err(KgError::InvalidRecord { id: node.id, reason: "empty node type" });
            }
            if node_map.contains_key(&node.id) {
                return Err(KgError::DuplicateNodeId(node.id));
            }
            node_map.insert(node.id.clone(), node);
        }

        let mut edge_index = HashMap::with_capacity(edges.len());
        for (i, edge) in edges.iter().enumerate() {
            if edge.id.is_empty() {
                return Err(KgError::InvalidRecord { id: edge.id.clone(), reason: "empty edge id" });
            }
            if edge.relation.trim().is_empty() {
                return Err(KgError::InvalidRecord { id: edge.id.clone(), reason: "empty relation" });
            }
            if !node_map.contains_key(&edge.source) || !node_map.contains_key(&edge.target) {
                return Err(KgError::DanglingEndpoint(edge.id.clone()));
            }
            let mut seen = BTreeSet::new();
            for ev in &edge.evidence {
                if ev.source_id.is_empty() {
                    return Err(KgError::InvalidRecord { id: edge.id.clone(), reason: "evidence without source id" });
                }
                if !seen.insert(ev.source_id.as_str()) {
                    return Err(KgError::DuplicateEvidence { edge: edge.id.clone(), source_id: ev.source_id.clone() });
                }
            }
            if edge_index.insert(edge.id.clone(), i).is_some() {
                return Err(KgError::DuplicateEdgeId(edge.id.clone()));
            }
        }

        let mut type_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for node in node_map.values() {
            type_index.entry(node.node_type.clone()).or_default().insert(node.id.clone());
        }

        let adjacency = build_adjacency(&node_map, &edges);
        Ok(Self { nodes: node_map, edges, edge_index, adjacency, type_index })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    pub fn edge(&self, id: &str) -> Option<&KgEdge> {
        self.edge_index.get(id).map(|&i| &self.edges[i])
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values()
    }

    /// Edges in file order.
    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn node_types(&self) -> impl Iterator<Item = &str> {
        self.type_index.keys().map(String::as_str)
    }

    pub fn nodes_of_type(&self, node_type: &str) -> impl Iterator<Item = &str> {
        self.type_index.get(node_type).into_iter().flatten().map(String::as_str)
    }

    pub fn adjacency(&self) -> &BTreeMap<String, Adjacency> {
        &self.adjacency
    }

    /// True when rebuilding the adjacency index from the raw edge list
    /// reproduces the loaded index exactly.
    pub fn index_is_consistent(&self) -> bool {
        build_adjacency(&self.nodes, &self.edges) == self.adjacency
    }

    fn require(&self, id: &str) -> Result<&Adjacency, KgError> {
        self.adjacency.get(id).ok_or_else(|| KgError::UnknownNode(id.to_string()))
    }

    /// `(edge id, neighbor id)` pairs sorted by edge id. A self-loop shows up once
    /// even when both directions are requested.
    pub fn neighbors(&self, node: &str, direction: Direction) -> Result<Vec<(&str, &str)>, KgError> {
        let adj = self.require(node)?;
        let mut idx: Vec<usize> = match direction {
            Direction::Out => adj.outgoing.clone(),
            Direction::In => adj.incoming.clone(),
            Direction::Both => adj.outgoing.iter().chain(&adj.incoming).copied().collect(),
        };
        idx.sort_by(|&a, &b| self.edges[a].id.cmp(&self.edges[b].id));
        idx.dedup();
        Ok(idx
            .into_iter()
            .map(|i| {
                let e = &self.edges[i];
                (e.id.as_str(), e.other_end(node))
            })
            .collect())
    }

    /// Every edge whose endpoint set is `{a, b}`, sorted by edge id, with the
    /// orientation relative to reading the edge from `a` to `b`.
    pub fn direct_edges(&self, a: &str, b: &str) -> Result<Vec<(&KgEdge, Orientation)>, KgError> {
        let adj = self.require(a)?;
        self.require(b)?;
        let mut out: Vec<(&KgEdge, Orientation)> = Vec::new();
        for &i in &adj.outgoing {
            let e = &self.edges[i];
            if e.target == b {
                out.push((e, Orientation::Forward));
            }
        }
        if a != b {
            for &i in &adj.incoming {
                let e = &self.edges[i];
                if e.source == b {
                    out.push((e, Orientation::Reverse));
                }
            }
        }
        out.sort_by(|x, y| x.0.id.cmp(&y.0.id));
        Ok(out)
    }

    /// Paths `a - mid - b` with `mid` distinct from both ends, ranked by summed
    /// evidence (descending) and then by the pair of edge ids.
    pub fn two_hop_paths(&self, a: &str, b: &str, limit: usize) -> Result<Vec<TwoHopPath>, KgError> {
        self.require(b)?;
        let mut paths = Vec::new();
        for (first_id, mid) in self.neighbors(a, Direction::Both)? {
            if mid == a || mid == b {
                continue;
            }
            let first = self.edge(first_id).expect("indexed edge");
            for (second_id, end) in self.neighbors(mid, Direction::Both)? {
                if end != b || second_id == first_id {
                    continue;
                }
                let second = self.edge(second_id).expect("indexed edge");
                paths.push(TwoHopPath {
                    first: first.clone(),
                    first_orientation: if first.source == a { Orientation::Forward } else { Orientation::Reverse },
                    mid: self.nodes[mid].clone(),
                    second: second.clone(),
                    second_orientation: if second.source == mid { Orientation::Forward } else { Orientation::Reverse },
                });
            }
        }
        paths.sort_by(|x, y| {
            y.evidence_count()
                .cmp(&x.evidence_count())
                .then_with(|| x.first.id.cmp(&y.first.id))
                .then_with(|| x.second.id.cmp(&y.second.id))
        });
        paths.truncate(limit);
        Ok(paths)
    }
}

fn build_adjacency(nodes: &BTreeMap<String, KgNode>, edges: &[KgEdge]) -> BTreeMap<String, Adjacency> {
    let mut adjacency: BTreeMap<String, Adjacency> =
        nodes.keys().map(|id| (id.clone(), Adjacency::default())).collect();
    for (i, edge) in edges.iter().enumerate() {
        if let Some(a) = adjacency.get_mut(&edge.source) {
            a.outgoing.push(i);
        }
        if let Some(a) = adjacency.get_mut(&edge.target) {
            a.incoming.push(i);
        }
    }
    for adj in adjacency.values_mut() {
        adj.outgoing.sort_by(|&a, &b| edges[a].id.cmp(&edges[b].id));
        adj.incoming.sort_by(|&a, &b| edges[a].id.cmp(&edges[b].id));
    }
    adjacency
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, name: &str, ty: &str) -> KgNode {
        KgNode { id: id.into(), name: name.into(), node_type: ty.into(), aliases: vec![] }
    }

    fn edge(id: &str, s: &str, t: &str, rel: &str, evidence: usize) -> KgEdge {
        KgEdge {
            id: id.into(),
            source: s.into(),
            target: t.into(),
            relation: rel.into(),
            evidence: (0..evidence)
                .map(|i| Evidence { source_id: format!("{id}-{i}"), title: "t".into(), year: None })
                .collect(),
        }
    }

    fn load_str(text: &str) -> Result<KnowledgeGraph, KgError> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, text.as_bytes()).unwrap();
        KnowledgeGraph::load(f.path())
    }

    #[test]
    fn empty_file_gives_empty_graph() {
        let g = load_str("").unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
        assert!(matches!(g.neighbors("x", Direction::Both), Err(KgError::UnknownNode(_))));
    }

    #[test]
    fn loads_procaine_edge_with_nodes_after_edges() {
        let g = load_str(concat!(
            r#"{"kind":"edge","id":"e1","source":"C1","target":"C2","relation":"PREVENTS","evidence":[{"source_id":"P1","title":"x","year":2010}]}"#,
            "\n",
            r#"{"kind":"node","id":"C1","name":"Procaine","type":"Drugs"}"#,
            "\n\n",
            r#"{"kind":"node","id":"C2","name":"Alzheimer's Disease","type":"Disorders","aliases":["AD"]}"#,
            "\n",
        ))
        .unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.adjacency()["C1"].outgoing.len(), 1);
        assert_eq!(g.adjacency()["C2"].incoming.len(), 1);
        let direct = g.direct_edges("C1", "C2").unwrap();
        assert_eq!(direct.len(), 1);
        assert_eq!(direct[0].0.relation, "PREVENTS");
        assert_eq!(direct[0].1, Orientation::Forward);
        assert_eq!(g.direct_edges("C2", "C1").unwrap()[0].1, Orientation::Reverse);
        assert!(g.index_is_consistent());
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let err = load_str(concat!(
            r#"{"kind":"node","id":"C1","name":"a","type":"T"}"#,
            "\n",
            r#"{"kind":"edge","id":"bad","source":"C1","target":"C9","relation":"R"}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, KgError::DanglingEndpoint(ref id) if id == "bad"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = load_str("{\"kind\":\"node\",\"id\":\"a\",\"name\":\"a\",\"type\":\"T\"}\n{nope\n").unwrap_err();
        assert!(matches!(err, KgError::Parse { line: 2, .. }));
    }

    #[test]
    fn duplicate_ids_and_evidence_are_rejected() {
        let n = node("a", "a", "T");
        assert!(matches!(
            KnowledgeGraph::from_parts(vec![n.clone(), n.clone()], vec![]),
            Err(KgError::DuplicateNodeId(_))
        ));
        let mut e = edge("e", "a", "a", "R", 1);
        e.evidence.push(e.evidence[0].clone());
        assert!(matches!(KnowledgeGraph::from_parts(vec![n], vec![e]), Err(KgError::DuplicateEvidence { .. })));
    }

    #[test]
    fn isolated_node_and_self_loops() {
        let g = KnowledgeGraph::from_parts(
            vec![node("a", "a", "T"), node("b", "b", "T")],
            vec![edge("loop", "b", "b", "R", 0)],
        )
        .unwrap();
        assert!(g.neighbors("a", Direction::Both).unwrap().is_empty());
        assert!(g.direct_edges("a", "a").unwrap().is_empty());
        assert_eq!(g.neighbors("b", Direction::Both).unwrap(), vec![("loop", "b")]);
        assert_eq!(g.direct_edges("b", "b").unwrap().len(), 1);
    }

    #[test]
    fn two_hop_ranking_and_mid_exclusion() {
        let g = KnowledgeGraph::from_parts(
            vec![node("a", "a", "T"), node("b", "b", "T"), node("m1", "m1", "T"), node("m2", "m2", "T")],
            vec![
                edge("e1", "a", "m1", "R", 1),
                edge("e2", "m1", "b", "R", 0),
                edge("e3", "m2", "a", "R", 2),
                edge("e4", "b", "m2", "R", 2),
                edge("e5", "a", "b", "R", 5),
                edge("e6", "m1", "m1", "R", 9),
            ],
        )
        .unwrap();
        let paths = g.two_hop_paths("a", "b", 10).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].mid.id, "m2");
        assert_eq!(paths[0].first_orientation, Orientation::Reverse);
        assert_eq!(paths[0].second_orientation, Orientation::Reverse);
        assert_eq!(paths[1].mid.id, "m1");
        assert_eq!(paths[1].first_orientation, Orientation::Forward);
        assert_eq!(g.two_hop_paths("a", "b", 1).unwrap().len(), 1);
        assert!(g.two_hop_paths("a", "a", 10).unwrap().iter().all(|p| p.first.id != p.second.id));
    }
}
