//! Regenerates `fixtures/llm/` and `fixtures/case3.log`.
//!
//! The answers below are scripted; running them through the engine in Record
//! mode stores each one under the key of the exact prompt the engine renders,
//! so replay picks them up unchanged. Rerun after editing a prompt template,
//! the KG type vocabulary, or these scripts.
//!
//! ```text
//! cargo run -p kgnav-core --example record_case_fixtures
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use kgnav_core::config::ServiceConfig;
use kgnav_core::gateway::{GatewayMode, LlmGateway, ScriptedBackend, ANNOTATED_ANSWER, PLAIN_ANSWER, SCOPE_CHECK};
use kgnav_core::pipeline::{Engine, MessageInput, TickClock};
use kgnav_core::recommend::{GoalItem, Target};
use kgnav_core::session::{events_to_jsonl, MemoryStore};

/// Splits `text` into pieces of 3..=17 chars so markers straddle chunk borders.
fn chunked(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let sizes = [7, 13, 3, 11, 17, 5];
    let mut out = Vec::new();
    let mut i = 0;
    let mut n = 0;
    while i < chars.len() {
        let end = (i + sizes[n % sizes.len()]).min(chars.len());
        out.push(chars[i..end].iter().collect());
        i = end;
        n += 1;
    }
    out
}

const ANSWERS: &[(&str, &str)] = &[
    (
        "Can Procaine slow the progression",
        "[Procaine]($n1) has been studied as a compound that may [prevent]($r1, $n1, $n2) \
         [Alzheimer's disease]($n2). Evidence in humans is limited, so it is not an established therapy.",
    ),
    (
        "Can rivastigmine treat AD?",
        "[Rivastigmine]($n1) is a cholinesterase inhibitor used to [treat]($r1, $n1, $n2) mild to moderate \
         [Alzheimer's disease]($n2). It increases acetylcholine levels in the brain.",
    ),
    (
        "Rivastigmine and Disorders",
        "Besides Alzheimer's disease, [rivastigmine]($n1) is also approved for [managing]($r1, $n1, $n2) \
         [Parkinson's disease dementia]($n2). Side effects are mostly gastrointestinal.",
    ),
    (
        "Which supplement may slow the progression",
        "Several supplements have been studied. [Omega-3 fatty acids]($n1) may \
         [slow the progression of]($r1, $n1, $n2) [Alzheimer's disease]($n2) in its early stages. \
         [Vitamin E]($n3) has been reported to [slow cognitive decline in]($r2, $n3, $n2) people with the disease.",
    ),
    (
        "Omega-3 fatty acids and Disorders",
        "[Omega-3 fatty acids]($n1) are linked to several disorders. They may help in \
         [reducing]($r1, $n1, $n2) the burden of [heart disorders]($n2). They are studied for \
         [slowing down the progression of]($r2, $n1, $n3) [neurodegenerative disorders]($n3). \
         [Alzheimer's disease]($n4) is [a form of]($r3, $n4, $n3) neurodegenerative disorder. \
         They may also help in [managing]($r4, $n1, $n5) [mood disorders]($n5) such as depression.",
    ),
    (
        "Vitamin E and Alzheimer's Disease",
        "[Vitamin E]($n1) [exhibits]($r1, $n1, $n2) [antioxidant properties]($n2). \
         Such antioxidants may [protect]($r2, $n2, $n3) [neurons]($n3) from oxidative damage, \
         which is one reason it has drawn interest for Alzheimer's disease.",
    ),
    (
        "Is fish oil a good source",
        "[fish oil]($n1) is known for [containing]($r1, $n1, $n2) a rich content of [Omega-3 fatty acids]($n2)",
    ),
    (
        "Can Ginkgo biloba help",
        "[Ginkgo biloba]($n1) is a popular herbal supplement that some studies suggest may \
         [slow cognitive decline in]($r1, $n1, $n2) [Alzheimer's disease]($n2), although results are mixed.",
    ),
];

fn backend() -> ScriptedBackend {
    let mut b = ScriptedBackend::new().on(SCOPE_CHECK, "capital of France", &["No"]);
    b = b.on(SCOPE_CHECK, "", &["Yes"]);
    b = b.on(PLAIN_ANSWER, "capital of France", &["The capital of France ", "is Paris."]);
    for (needle, answer) in ANSWERS {
        let chunks = chunked(answer);
        let refs: Vec<&str> = chunks.iter().map(String::as_str).collect();
        b = b.on(ANNOTATED_ANSWER, needle, &refs);
    }
    b
}

fn rec_id(engine: &Engine, source: &str, target: Target) -> String {
    let id_of = |name: &str| {
        engine.graph().nodes().find(|n| n.name == name).unwrap_or_else(|| panic!("no node {name}")).id.clone()
    };
    let target = match target {
        Target::Node(n) => Target::Node(id_of(&n)),
        t => t,
    };
    GoalItem { source: id_of(source), target }.id()
}

fn ask(engine: &Engine, session: &str, input: MessageInput) {
    let outcome = engine.handle_message(session, input, &mut |_| {}).expect("turn runs");
    if let Some(e) = outcome.error {
        panic!("{session}: {e}");
    }
    let labels: Vec<_> = outcome.grounded.iter().map(|g| g.verdict.label.as_str()).collect();
    println!("{session} step {}: {:?} progress {:.4}", outcome.step, labels, outcome.progress);
}

fn run_cases(engine: &Engine, only_case3: bool) {
    if !only_case3 {
        for (id, q) in [
            ("case1", "Can Procaine slow the progression of Alzheimer's disease?"),
            ("fish-oil", "Is fish oil a good source of omega-3 fatty acids?"),
            ("ginkgo", "Can Ginkgo biloba help with Alzheimer's disease?"),
            ("off-topic", "What is the capital of France?"),
        ] {
            engine.create_session(id).unwrap();
            ask(engine, id, MessageInput::text(q));
        }
        engine.create_session("case2").unwrap();
        ask(engine, "case2", MessageInput::text("Can rivastigmine treat AD?"));
        let rid = rec_id(engine, "Rivastigmine", Target::Type("Disorders".into()));
        ask(engine, "case2", MessageInput::recommendation(rid));
    }
    engine.create_session("case3").unwrap();
    ask(engine, "case3", MessageInput::text("Which supplement may slow the progression of Alzheimer's disease?"));
    let rid = rec_id(engine, "Omega-3 fatty acids", Target::Type("Disorders".into()));
    ask(engine, "case3", MessageInput::recommendation(rid));
    let rid = rec_id(engine, "Vitamin E", Target::Node("Alzheimer's Disease".into()));
    ask(engine, "case3", MessageInput::recommendation(rid));
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let fixtures: PathBuf = root.join("fixtures");
    let llm_dir = fixtures.join("llm");
    if llm_dir.exists() {
        std::fs::remove_dir_all(&llm_dir).unwrap();
    }

    let mut cfg = ServiceConfig::load(root.join("config/kgnav.toml")).expect("config/kgnav.toml");
    cfg.store_path = None;
    let grounder = Arc::new(cfg.build_grounder().unwrap());

    let record = LlmGateway::new(GatewayMode::Record { backend: Box::new(backend()), fixtures: llm_dir.clone() });
    let clock = Arc::new(TickClock::new(1_700_000_000_000, 1_000));
    let engine = Engine::new(grounder.clone(), record, Box::new(MemoryStore::new()), clock);
    run_cases(&engine, false);

    let replay = LlmGateway::new(GatewayMode::Replay { fixtures: llm_dir });
    let clock = Arc::new(TickClock::new(1_700_000_000_000, 1_000));
    let engine = Engine::new(grounder, replay, Box::new(MemoryStore::new()), clock);
    run_cases(&engine, true);
    let log = events_to_jsonl(&engine.events("case3").unwrap());
    std::fs::write(fixtures.join("case3.log"), log).unwrap();
    println!("wrote {}", fixtures.join("case3.log").display());
}
