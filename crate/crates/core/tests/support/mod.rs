//! Shared helpers for integration tests: fixture loading, random instance
//! generators, brute-force oracles and a tiny HTTP server.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use kgnav_core::config::ServiceConfig;
use kgnav_core::gateway::{GatewayMode, LlmGateway};
use kgnav_core::grounding::Grounder;
use kgnav_core::kg::{Direction, Evidence, KgEdge, KgNode, KnowledgeGraph, Orientation};
use kgnav_core::pipeline::{Clock, Engine, MessageInput, MessageOutcome, TickClock};
use kgnav_core::recommend::{init_pool, Context, GoalItem, Query, RecommendationPool, Target};
use kgnav_core::session::{MemoryStore, SessionStore};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures() -> PathBuf {
    root().join("fixtures")
}

/// The shipped offline config with in-memory sessions.
pub fn config() -> ServiceConfig {
    let mut cfg = ServiceConfig::load(root().join("config/kgnav.toml")).expect("config/kgnav.toml");
    cfg.store_path = None;
    cfg
}

pub fn grounder() -> Arc<Grounder> {
    Arc::new(config().build_grounder().expect("fixture grounder"))
}

pub fn fixture_graph() -> KnowledgeGraph {
    KnowledgeGraph::load(fixtures().join("kg/mini.jsonl")).expect("fixture KG")
}

pub fn id_of(graph: &KnowledgeGraph, name: &str) -> String {
    graph.nodes().find(|n| n.name == name).unwrap_or_else(|| panic!("no node named {name}")).id.clone()
}

pub fn tick_clock() -> Arc<dyn Clock> {
    Arc::new(TickClock::new(1_700_000_000_000, 1_000))
}

pub fn replay_engine_with(grounder: Arc<Grounder>, store: Box<dyn SessionStore>) -> Engine {
    let gateway = LlmGateway::new(GatewayMode::Replay { fixtures: fixtures().join("llm") });
    Engine::new(grounder, gateway, store, tick_clock())
}

pub fn replay_engine() -> Engine {
    replay_engine_with(grounder(), Box::new(MemoryStore::new()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- graphs

pub const TYPES: [&str; 4] = ["Drugs", "Disorders", "Genes", "Physiology"];

/// Random multigraph with self-loops and parallel edges.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_edges: usize) -> KnowledgeGraph {
    let n = rng.random_range(1..=max_nodes);
    let m = rng.random_range(0..=max_edges);
    let nodes: Vec<KgNode> = (0..n)
        .map(|i| KgNode {
            id: format!("n{i:03}"),
            name: format!("node {i}"),
            node_type: TYPES.choose(rng).unwrap().to_string(),
            aliases: vec![],
        })
        .collect();
    let relations = ["TREATS", "AFFECTS", "ISA", "PREVENTS"];
    let mut source_counter = 0;
    let edges: Vec<KgEdge> = (0..m)
        .map(|i| {
            let s = rng.random_range(0..n);
            let t = if rng.random_bool(0.05) { s } else { rng.random_range(0..n) };
            let evidence = (0..rng.random_range(0..4))
                .map(|_| {
                    source_counter += 1;
                    Evidence { source_id: format!("S{source_counter}"), title: String::new(), year: None }
                })
                .collect();
            KgEdge {
                id: format!("e{i:04}"),
                source: nodes[s].id.clone(),
                target: nodes[t].id.clone(),
                relation: relations.choose(rng).unwrap().to_string(),
                evidence,
            }
        })
        .collect();
    KnowledgeGraph::from_parts(nodes, edges).expect("generated graph is valid")
}

pub fn bf_neighbors(g: &KnowledgeGraph, node: &str, dir: Direction) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for e in g.edges() {
        let out_hit = e.source == node && matches!(dir, Direction::Out | Direction::Both);
        let in_hit = e.target == node && matches!(dir, Direction::In | Direction::Both);
        if out_hit {
            out.insert((e.id.clone(), e.target.clone()));
        }
        if in_hit {
            out.insert((e.id.clone(), e.source.clone()));
        }
    }
    out
}

pub fn bf_direct(g: &KnowledgeGraph, a: &str, b: &str) -> BTreeSet<(String, Orientation)> {
    let mut out = BTreeSet::new();
    for e in g.edges() {
        if e.source == a && e.target == b {
            out.insert((e.id.clone(), Orientation::Forward));
        } else if e.source == b && e.target == a {
            out.insert((e.id.clone(), Orientation::Reverse));
        }
    }
    out
}

/// Every `(first edge, second edge, mid)` with distinct edges and mid outside `{a, b}`.
pub fn bf_two_hop(g: &KnowledgeGraph, a: &str, b: &str) -> BTreeSet<(String, String, String)> {
    let touches = |e: &KgEdge, x: &str, y: &str| (e.source == x && e.target == y) || (e.source == y && e.target == x);
    let mut out = BTreeSet::new();
    for e1 in g.edges() {
        for mid in [&e1.source, &e1.target] {
            if mid == a || mid == b || !touches(e1, a, mid) {
                continue;
            }
            for e2 in g.edges() {
                if e2.id != e1.id && touches(e2, mid, b) {
                    out.insert((e1.id.clone(), e2.id.clone(), mid.clone()));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- recommender

/// Goal items of `entities` computed straight from the edge list.
pub fn bf_goal(g: &KnowledgeGraph, entities: &[String]) -> BTreeSet<GoalItem> {
    let mut goal = BTreeSet::new();
    for e in entities {
        for edge in g.edges() {
            let other = if &edge.source == e {
                &edge.target
            } else if &edge.target == e {
                &edge.source
            } else {
                continue;
            };
            if other == e {
                continue;
            }
            goal.insert(GoalItem { source: e.clone(), target: Target::Node(other.clone()) });
            let ty = g.node(other).unwrap().node_type.clone();
            goal.insert(GoalItem { source: e.clone(), target: Target::Type(ty) });
        }
    }
    goal
}

/// The recommendation set-builder: pairs whose source is in some context
/// query's focus and which are goal items, minus dismissed and explored.
pub fn bf_candidates(ctx: &Context, pool: &RecommendationPool) -> BTreeSet<GoalItem> {
    let mut out = BTreeSet::new();
    for q in &ctx.queries {
        for n in &q.focus {
            for item in &pool.goal {
                if &item.source == n && !pool.dismissed.contains(item) && !pool.explored.contains(item) {
                    out.insert(item.clone());
                }
            }
        }
    }
    out
}

pub fn bf_score(g: &KnowledgeGraph, item: &GoalItem) -> usize {
    g.edges()
        .iter()
        .filter(|e| e.source != e.target)
        .filter_map(|e| {
            let other = if e.source == item.source {
                &e.target
            } else if e.target == item.source {
                &e.source
            } else {
                return None;
            };
            let hit = match &item.target {
                Target::Node(n) => other == n,
                Target::Type(t) => &g.node(other).unwrap().node_type == t,
            };
            hit.then_some(e.evidence.len())
        })
        .sum()
}

pub struct Instance {
    pub graph: KnowledgeGraph,
    pub entities: Vec<String>,
    pub context: Context,
    pub pool: RecommendationPool,
}

pub fn random_query(r: &mut ChaCha8Rng, g: &KnowledgeGraph, focus_from: &[String]) -> Query {
    let ids: Vec<String> = g.nodes().map(|n| n.id.clone()).collect();
    let n_focus = r.random_range(1..=2);
    let focus = (0..n_focus)
        .map(
            |_| if r.random_bool(0.8) { focus_from.choose(r).unwrap().clone() } else { ids.choose(r).unwrap().clone() },
        )
        .collect();
    let target = if r.random_bool(0.5) {
        Target::Node(ids.choose(r).unwrap().clone())
    } else {
        Target::Type(g.node(ids.choose(r).unwrap()).unwrap().node_type.clone())
    };
    Query { focus, target }
}

/// A pool over a few entities with some items explored by context queries and
/// some dismissed at random.
pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let graph = random_graph(&mut r, 30, 90);
    let ids: Vec<String> = graph.nodes().map(|n| n.id.clone()).collect();
    let entities: Vec<String> = (0..r.random_range(1..=4)).map(|_| ids.choose(&mut r).unwrap().clone()).collect();
    let mut pool = init_pool(&entities, &graph).unwrap();
    let mut context = Context::default();
    for _ in 0..r.random_range(0..5) {
        let q = random_query(&mut r, &graph, &entities);
        pool.record_explored(&q);
        context.push(q);
    }
    let open: Vec<GoalItem> = pool.open().cloned().collect();
    for item in open {
        if r.random_bool(0.2) {
            pool.dismiss(&item.id()).unwrap();
        }
    }
    Instance { graph, entities, context, pool }
}

// ---------------------------------------------------------------- annotated text

pub struct Generated {
    pub raw: String,
    pub plain: String,
    /// `(subject, relation, object)` surfaces.
    pub triples: Vec<(String, String, String)>,
}

const WORDS: [&str; 14] = [
    "fish",
    "oil",
    "omega-3",
    "acids",
    "vitamin",
    "é",
    "ß",
    "neuron",
    "ginkgo",
    "AD",
    "δ-tocopherol",
    "x",
    "(aside)",
    "50%",
];

fn phrase(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn marker_ref(rng: &mut ChaCha8Rng, prefix: char, k: usize) -> String {
    if rng.random_bool(0.1) {
        format!("${prefix}0{k}")
    } else {
        format!("${prefix}{k}")
    }
}

/// A valid annotated string together with what parsing it must produce.
/// Relations may reference entities that appear later in the text.
pub fn generate_annotated(rng: &mut ChaCha8Rng) -> Generated {
    let n_entities = rng.random_range(0..6);
    let entities: Vec<String> = (0..n_entities).map(|_| phrase(rng, 3)).collect();
    let mut items: Vec<(bool, usize)> = (0..n_entities).map(|i| (true, i)).collect();
    let mut relations = Vec::new();
    if n_entities >= 2 {
        for _ in 0..rng.random_range(0..4) {
            let s = rng.random_range(0..n_entities);
            let mut o = rng.random_range(0..n_entities);
            while o == s {
                o = rng.random_range(0..n_entities);
            }
            relations.push((phrase(rng, 4), s, o));
            items.push((false, relations.len() - 1));
        }
    }
    // Entities keep their relative order so ids are numbered by first mention;
    // relations are inserted at random positions.
    let mut order: Vec<(bool, usize)> = items.iter().filter(|(e, _)| *e).copied().collect();
    for r in items.iter().filter(|(e, _)| !*e) {
        let pos = rng.random_range(0..=order.len());
        order.insert(pos, *r);
    }

    let mut raw = String::new();
    let mut plain = String::new();
    for (is_entity, i) in order {
        if rng.random_bool(0.7) {
            let filler = format!("{} ", phrase(rng, 4));
            raw.push_str(&filler);
            plain.push_str(&filler);
        }
        let sep = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { ", " } else { "," };
        if is_entity {
            raw.push_str(&format!("[{}]({})", entities[i], marker_ref(rng, 'n', i + 1)));
            plain.push_str(&entities[i]);
        } else {
            let (surface, s, o) = &relations[i];
            let a = sep(rng);
            let b = sep(rng);
            raw.push_str(&format!(
                "[{}]({}{a}{}{b}{})",
                surface,
                marker_ref(rng, 'r', i + 1),
                marker_ref(rng, 'n', s + 1),
                marker_ref(rng, 'n', o + 1)
            ));
            plain.push_str(surface);
        }
        raw.push(' ');
        plain.push(' ');
    }
    if rng.random_bool(0.5) {
        let tail = phrase(rng, 3);
        raw.push_str(&tail);
        plain.push_str(&tail);
    }
    let triples = relations.iter().map(|(r, s, o)| (entities[*s].clone(), r.clone(), entities[*o].clone())).collect();
    Generated { raw, plain, triples }
}

/// Splits at random character boundaries.
pub fn random_chunks(rng: &mut ChaCha8Rng, text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let len = rng.random_range(1..=chars.len() - i);
        let len = len.min(rng.random_range(1..=12));
        out.push(chars[i..i + len].iter().collect());
        i += len;
    }
    out
}

// ---------------------------------------------------------------- HTTP

pub struct MockRequest {
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

pub struct MockResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

/// Single-threaded HTTP/1.1 server on an ephemeral loopback port. Each
/// connection carries one request. Returns `None` when loopback is unavailable.
pub struct MockServer {
    pub base_url: String,
    pub hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> Option<Self>
    where
        F: Fn(&MockRequest) -> MockResponse + Send + 'static,
    {
        let listener = match TcpListener::bind("127.0.0.1:0") {
            Ok(l) => l,
            Err(e) => {
                eprintln!("loopback unavailable ({e}); skipping HTTP client test");
                return None;
            }
        };
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                counter.fetch_add(1, Ordering::SeqCst);
                let _ = serve_one(stream, &handler);
            }
        });
        Some(Self { base_url: format!("http://{addr}"), hits })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve_one<F>(stream: TcpStream, handler: &F) -> std::io::Result<()>
where
    F: Fn(&MockRequest) -> MockResponse,
{
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut headers = BTreeMap::new();
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    let req = MockRequest { path, headers, body: String::from_utf8_lossy(&body).into_owned() };
    let resp = handler(&req);
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        resp.status,
        resp.content_type,
        resp.body.len(),
        resp.body
    )?;
    stream.flush()
}

/// Chat-completions streaming body for `chunks`.
pub fn sse_body(chunks: &[&str]) -> String {
    let mut out = String::new();
    for c in chunks {
        let v = serde_json::json!({"choices": [{"index": 0, "delta": {"content": c}}]});
        out.push_str(&format!("data: {v}\n\n"));
    }
    out.push_str("data: [DONE]\n\n");
    out
}

// ---------------------------------------------------------------- recorded cases

pub const CASE1: &str = "Can Procaine slow the progression of Alzheimer's disease?";
pub const CASE2: &str = "Can rivastigmine treat AD?";
pub const CASE3: &str = "Which supplement may slow the progression of Alzheimer's disease?";

pub fn rec_id(graph: &KnowledgeGraph, source: &str, target: Target) -> String {
    let target = match target {
        Target::Node(n) => Target::Node(id_of(graph, &n)),
        t => t,
    };
    GoalItem { source: id_of(graph, source), target }.id()
}

/// The three turns of the supplement walkthrough, as recorded in `fixtures/llm`.
pub fn case3_inputs(graph: &KnowledgeGraph) -> Vec<MessageInput> {
    vec![
        MessageInput::text(CASE3),
        MessageInput::recommendation(rec_id(graph, "Omega-3 fatty acids", Target::Type("Disorders".into()))),
        MessageInput::recommendation(rec_id(graph, "Vitamin E", Target::Node("Alzheimer's Disease".into()))),
    ]
}

pub fn run_case3(engine: &Engine, id: &str) -> Vec<MessageOutcome> {
    engine.create_session(id).unwrap();
    case3_inputs(engine.graph())
        .into_iter()
        .map(|input| {
            let out = engine.handle_message(id, input, &mut |_| {}).unwrap();
            assert_eq!(out.error, None);
            out
        })
        .collect()
}
