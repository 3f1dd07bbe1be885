//! The `kgnav` command line. Every command prints JSON on stdout; failures
//! print `{"error": {"code", "message"}}` on stderr and exit with status 1.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use kgnav_core::config::{ConfigError, ServiceConfig};
use kgnav_core::gateway::ModeKind;
use kgnav_core::grounding::NodeIndex;
use kgnav_core::kg::KnowledgeGraph;
use kgnav_core::pipeline::{progress_report, EngineError, MessageInput};
use kgnav_core::session::{events_from_jsonl, replay};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "kgnav", version, about = "Knowledge-graph grounded question answering")]
pub struct Cli {
    /// TOML or JSON service config. Defaults to $KGNAV_CONFIG.
    #[arg(long, global = true, env = "KGNAV_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub theta_n: Option<f64>,
    #[arg(long, global = true)]
    pub theta_r: Option<f64>,
    #[arg(long, global = true, value_parser = ["live", "replay", "record"])]
    pub mode: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a KG file and build its embedding index.
    LoadKg {
        path: PathBuf,
        /// Write the index here (default: `embeddings.cache` from the config).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Send one message; prints the streamed events as JSON lines.
    Ask {
        #[arg(long)]
        session: String,
        #[arg(long)]
        text: String,
    },
    /// Ground a single "subject|relation|object" claim.
    Verify {
        #[arg(long)]
        triple: String,
    },
    /// Current recommendations and progress for a session.
    Recommend {
        #[arg(long)]
        session: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Rebuild a session from an event log file.
    Replay {
        #[arg(long)]
        session: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new("config_error", e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

/// File, then flags, then `KGNAV_*` environment variables.
pub fn resolve_config(cli: &Cli) -> Result<ServiceConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ServiceConfig::load(path)?,
        None => {
            let mut cfg = ServiceConfig::default();
            cfg.resolve_paths(&std::env::current_dir().map_err(|e| CliError::new("io_error", e.to_string()))?);
            cfg
        }
    };
    if let Some(t) = cli.theta_n {
        cfg.matcher.theta_n = t;
    }
    if let Some(t) = cli.theta_r {
        cfg.matcher.theta_r = t;
    }
    if let Some(m) = &cli.mode {
        cfg.llm.mode = m.parse::<ModeKind>().map_err(|e| CliError::new("config_error", e.to_string()))?;
    }
    cfg.apply_process_env()?;
    Ok(cfg)
}

/// Ignores write errors so a closed pipe (`kgnav ... | head`) is not a crash.
fn print(value: &Value) {
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value).expect("JSON output"));
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::LoadKg { path, cache } => load_kg(cfg, path, cache),
        Command::Serve { listen } => serve(cfg, listen),
        Command::Ask { session, text } => ask(cfg, &session, text),
        Command::Verify { triple } => verify(cfg, &triple),
        Command::Recommend { session, k } => {
            let engine = cfg.build_engine()?;
            let items = engine.recommendations(&session, k)?;
            let progress = engine.progress(&session)?;
            print(&json!({"session": session, "items": items, "progress": progress}));
            Ok(())
        }
        Command::Replay { session } => replay_log(cfg, &session),
    }
}

fn load_kg(mut cfg: ServiceConfig, path: PathBuf, cache: Option<PathBuf>) -> Result<(), CliError> {
    cfg.kg_path = path;
    if cache.is_some() {
        cfg.embeddings.cache = cache;
    }
    cfg.validate()?;
    let graph = cfg.load_graph()?;
    let embedder = cfg.build_embedder()?;
    let bad = |e: kgnav_core::grounding::GroundingError| CliError::new("grounding_error", e.to_string());
    let index = match &cfg.embeddings.cache {
        Some(p) => NodeIndex::load_or_build(&graph, &embedder, p).map_err(bad)?,
        None => NodeIndex::build(&graph, &embedder).map_err(bad)?,
    };
    print(&json!({
        "kg_path": cfg.kg_path,
        "nodes": graph.nodes().count(),
        "edges": graph.edges().len(),
        "node_types": graph.node_types().collect::<Vec<_>>(),
        "index_entries": index.entries.len(),
        "provider": index.provider,
        "cache": cfg.embeddings.cache,
    }));
    Ok(())
}

fn serve(mut cfg: ServiceConfig, listen: Option<String>) -> Result<(), CliError> {
    if let Some(l) = listen {
        cfg.listen = l;
        // Environment still wins over the flag.
        cfg.apply_process_env()?;
    }
    let engine = Arc::new(cfg.build_engine()?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io_error", e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .map_err(|e| CliError::new("io_error", format!("binding {}: {e}", cfg.listen)))?;
        let addr = listener.local_addr().map_err(|e| CliError::new("io_error", e.to_string()))?;
        tracing::info!(%addr, "listening");
        eprintln!("{}", json!({"listening": addr.to_string()}));
        axum::serve(listener, crate::router(engine))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::new("io_error", e.to_string()))
    })
}

fn ask(cfg: ServiceConfig, session: &str, text: String) -> Result<(), CliError> {
    let engine = cfg.build_engine()?;
    match engine.create_session(session) {
        Ok(_) | Err(EngineError::SessionExists(_)) => {}
        Err(e) => return Err(e.into()),
    }
    let mut out = std::io::stdout().lock();
    let outcome = engine.handle_message(session, MessageInput::text(text), &mut |ev| {
        let _ = writeln!(out, "{}", serde_json::to_string(&ev).expect("stream events serialize"));
    })?;
    match outcome.error {
        Some(message) => Err(CliError::new("turn_failed", message)),
        None => Ok(()),
    }
}

pub fn parse_triple(text: &str) -> Result<(String, String, String), CliError> {
    let parts: Vec<&str> = text.split('|').map(str::trim).collect();
    match parts[..] {
        [s, r, o] if !s.is_empty() && !r.is_empty() && !o.is_empty() => Ok((s.into(), r.into(), o.into())),
        _ => Err(CliError::new("bad_request", format!("expected \"subject|relation|object\", got {text:?}"))),
    }
}

fn verify(cfg: ServiceConfig, triple: &str) -> Result<(), CliError> {
    let (s, r, o) = parse_triple(triple)?;
    cfg.validate()?;
    let grounder = cfg.build_grounder()?;
    let grounded = grounder.verify(&s, &r, &o).map_err(|e| CliError::new("grounding_error", e.to_string()))?;
    let graph = &grounder.graph;
    let evidence: Vec<Value> = grounded
        .verdict
        .direct_edges
        .iter()
        .filter_map(|id| graph.edge(id))
        .map(|e| json!({"edge": e.id, "relation": e.relation, "records": e.evidence}))
        .collect();
    let name =
        |m: &kgnav_core::grounding::EntityMatch| m.node.as_ref().and_then(|id| graph.node(id)).map(|n| n.name.clone());
    print(&json!({
        "label": grounded.verdict.label,
        "subject": {"surface": s, "node": grounded.subject_match.node, "name": name(&grounded.subject_match), "similarity": grounded.subject_match.similarity},
        "object": {"surface": o, "node": grounded.object_match.node, "name": name(&grounded.object_match), "similarity": grounded.object_match.similarity},
        "relation": r,
        "evidence_count": grounded.verdict.evidence_count,
        "evidence": evidence,
        "two_hop": grounded.verdict.two_hop,
        "best_relation_similarity": grounded.verdict.best_relation_similarity,
    }));
    Ok(())
}

fn replay_log(cfg: ServiceConfig, path: &Path) -> Result<(), CliError> {
    let id =
        path.file_stem().and_then(|s| s.to_str()).map(|s| s.trim_end_matches(".events")).ok_or_else(|| {
            CliError::new("bad_request", format!("cannot derive a session id from {}", path.display()))
        })?;
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::new("io_error", format!("{}: {e}", path.display())))?;
    let graph: KnowledgeGraph = cfg.load_graph()?;
    let (events, warnings) = events_from_jsonl(id, &text).map_err(|e| CliError::new("store_error", e.to_string()))?;
    let state = replay(id, &events, &graph).map_err(|e| CliError::new("session_error", e.to_string()))?;
    let steps: Vec<Value> = state
        .steps
        .iter()
        .map(|s| json!({"index": s.index, "query": s.query_text, "outcome": s.outcome, "triples": s.grounded.len(), "progress": s.progress}))
        .collect();
    print(&json!({
        "session": id,
        "events": events.len(),
        "steps": steps,
        "progress": progress_report(&state),
        "warnings": warnings,
    }));
    Ok(())
}

/// Entry point shared by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let default = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_env("KGNAV_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": {"code": e.code, "message": e.message}}));
            1
        }
    }
}
