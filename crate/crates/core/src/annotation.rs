//! Streaming parser for inline entity/relation markers in LLM output.
//!
//! Two marker forms are recognised:
//!
//! ```text
//! [fish oil]($n1)                      entity with id $n1
//! [containing]($r1, $n1, $n2)          relation $r1 from $n1 to $n2
//! ```
//!
//! Everything else is literal text. The parser is a per-character state
//! machine, so splitting the input into chunks at arbitrary points (including
//! inside a marker) never changes the result. Malformed markers degrade to
//! literal text plus a [`Diagnostic`]; the parser itself never fails.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

const MAX_SURFACE_CHARS: usize = 256;
const MAX_MARKER_CHARS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub marker_id: String,
    pub surface: String,
    /// Half-open interval of character offsets into the plain text.
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpan {
    pub marker_id: String,
    pub surface: String,
    pub subject_ref: String,
    pub object_ref: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject_surface: String,
    pub relation_surface: String,
    pub object_surface: String,
    pub subject_id: String,
    pub relation_id: String,
    pub object_id: String,
}

/// Why part of the input was not turned into a span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// A `[` opened inside another bracket; the outer one became literal text.
    NestedBracket {
        offset: usize,
    },
    /// `[..](` followed by `$...)` that matches neither marker form.
    UnknownMarker {
        text: String,
    },
    /// A marker broken by a newline, a bracket or excessive length.
    MalformedMarker {
        text: String,
    },
    /// A marker still open when the stream ended.
    UnterminatedMarker {
        text: String,
    },
    EmptySurface {
        marker_id: String,
    },
    DuplicateMarker {
        marker_id: String,
    },
    SelfRelation {
        marker_id: String,
    },
    UnresolvedEntityRef {
        relation_id: String,
        entity_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Span {
    Entity(EntitySpan),
    Relation(RelationSpan),
}

/// Output of one [`AnnotationParser::feed`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkOutput {
    pub text: String,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedResponse {
    pub plain_text: String,
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationSpan>,
    pub triples: Vec<Triple>,
    pub diagnostics: Vec<Diagnostic>,
}

impl AnnotatedResponse {
    /// A response carrying text only, used for answers that were never annotated.
    pub fn plain(text: impl Into<String>) -> Self {
        Self { plain_text: text.into(), ..Default::default() }
    }

    /// Characters `range` of the plain text.
    pub fn slice(&self, range: &Range<usize>) -> String {
        self.plain_text.chars().skip(range.start).take(range.len()).collect()
    }

    /// Prefixes every marker id with `prefix`, so ids from different answers
    /// in one conversation cannot collide.
    pub fn namespaced(&self, prefix: &str) -> Self {
        let ns = |id: &str| format!("{prefix}{id}");
        let mut out = self.clone();
        for e in &mut out.entities {
            e.marker_id = ns(&e.marker_id);
        }
        for r in &mut out.relations {
            r.marker_id = ns(&r.marker_id);
            r.subject_ref = ns(&r.subject_ref);
            r.object_ref = ns(&r.object_ref);
        }
        for t in &mut out.triples {
            *t = t.namespaced(prefix);
        }
        out
    }
}

impl Triple {
    pub fn namespaced(&self, prefix: &str) -> Self {
        Self {
            subject_id: format!("{prefix}{}", self.subject_id),
            relation_id: format!("{prefix}{}", self.relation_id),
            object_id: format!("{prefix}{}", self.object_id),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Text,
    Surface,
    AfterClose,
    Marker,
}

enum Marker {
    Entity(String),
    Relation { id: String, subject: String, object: String },
}

/// Incremental parser state. Feed chunks with [`feed`](Self::feed), then call
/// [`finish`](Self::finish).
#[derive(Debug, Clone)]
pub struct AnnotationParser {
    state: State,
    surface: String,
    marker: String,
    plain: String,
    plain_chars: usize,
    entities: Vec<EntitySpan>,
    relations: Vec<RelationSpan>,
    diagnostics: Vec<Diagnostic>,
    entity_ids: HashSet<String>,
    relation_ids: HashSet<String>,
}

impl Default for AnnotationParser {
    fn default() -> Self {
        Self::new()
    }
}

impl AnnotationParser {
    pub fn new() -> Self {
        Self {
            state: State::Text,
            surface: String::new(),
            marker: String::new(),
            plain: String::new(),
            plain_chars: 0,
            entities: Vec::new(),
            relations: Vec::new(),
            diagnostics: Vec::new(),
            entity_ids: HashSet::new(),
            relation_ids: HashSet::new(),
        }
    }

    /// Plain text committed so far.
    pub fn plain_text(&self) -> &str {
        &self.plain
    }

    pub fn feed(&mut self, chunk: &str) -> ChunkOutput {
        let text_start = self.plain.len();
        let (entities_before, relations_before) = (self.entities.len(), self.relations.len());
        let mut new_spans = Vec::new();

        for c in chunk.chars() {
            self.step(c, &mut new_spans);
        }

        debug_assert_eq!(
            new_spans.len(),
            self.entities.len() - entities_before + self.relations.len() - relations_before
        );
        ChunkOutput { text: self.plain[text_start..].to_string(), spans: new_spans }
    }

    pub fn finish(self) -> AnnotatedResponse {
        self.finish_streaming().1
    }

    /// Like [`finish`](Self::finish), also returning the plain text released
    /// by end of stream (an unclosed bracket becomes literal text here).
    pub fn finish_streaming(mut self) -> (String, AnnotatedResponse) {
        let tail_start = self.plain.len();
        match self.state {
            State::Text => {}
            State::Surface => {
                let lit = format!("[{}", self.surface);
                self.emit(&lit);
            }
            State::AfterClose => {
                let lit = format!("[{}]", self.surface);
                self.emit(&lit);
            }
            State::Marker => {
                let lit = format!("[{}]({}", self.surface, self.marker);
                self.diagnostics.push(Diagnostic::UnterminatedMarker { text: lit.clone() });
                self.emit(&lit);
            }
        }

        let mut accepted = Vec::with_capacity(self.relations.len());
        for rel in std::mem::take(&mut self.relations) {
            let mut ok = true;
            for entity in [&rel.subject_ref, &rel.object_ref] {
                if !self.entity_ids.contains(entity) {
                    self.diagnostics.push(Diagnostic::UnresolvedEntityRef {
                        relation_id: rel.marker_id.clone(),
                        entity_id: entity.clone(),
                    });
                    ok = false;
                }
            }
            if ok {
                accepted.push(rel);
            }
        }

        let surface_of = |id: &str| {
            self.entities.iter().find(|e| e.marker_id == id).map(|e| e.surface.clone()).expect("resolved above")
        };
        let triples = accepted
            .iter()
            .map(|r| Triple {
                subject_surface: surface_of(&r.subject_ref),
                relation_surface: r.surface.clone(),
                object_surface: surface_of(&r.object_ref),
                subject_id: r.subject_ref.clone(),
                relation_id: r.marker_id.clone(),
                object_id: r.object_ref.clone(),
            })
            .collect();

        let tail = self.plain[tail_start..].to_string();
        let response = AnnotatedResponse {
            plain_text: self.plain,
            entities: self.entities,
            relations: accepted,
            triples,
            diagnostics: self.diagnostics,
        };
        (tail, response)
    }

    fn emit(&mut self, s: &str) {
        self.plain.push_str(s);
        self.plain_chars += s.chars().count();
    }

    fn emit_char(&mut self, c: char) {
        self.plain.push(c);
        self.plain_chars += 1;
    }

    fn step(&mut self, c: char, spans: &mut Vec<Span>) {
        // Loop so a character that aborts a candidate marker is re-read as text.
        loop {
            match self.state {
                State::Text => {
                    if c == '[' {
                        self.surface.clear();
                        self.state = State::Surface;
                    } else {
                        self.emit_char(c);
                    }
                    return;
                }
                State::Surface => match c {
                    ']' => {
                        self.state = State::AfterClose;
                        return;
                    }
                    '[' => {
                        let lit = format!("[{}", self.surface);
                        self.emit(&lit);
                        self.diagnostics.push(Diagnostic::NestedBracket { offset: self.plain_chars });
                        self.surface.clear();
                        return;
                    }
                    '\n' => self.abort(format!("[{}", self.surface), None),
                    _ if self.surface.chars().count() >= MAX_SURFACE_CHARS => {
                        self.abort(format!("[{}", self.surface), None)
                    }
                    _ => {
                        self.surface.push(c);
                        return;
                    }
                },
                State::AfterClose => {
                    if c == '(' {
                        self.marker.clear();
                        self.state = State::Marker;
                        return;
                    }
                    self.abort(format!("[{}]", self.surface), None);
                }
                State::Marker => match c {
                    ')' => {
                        self.complete(spans);
                        return;
                    }
                    _ if self.marker.is_empty() && c != '$' => {
                        // An ordinary parenthesis after brackets, e.g. a markdown link.
                        self.abort(format!("[{}](", self.surface), None)
                    }
                    '\n' | '[' => {
                        let lit = format!("[{}]({}", self.surface, self.marker);
                        self.abort(lit.clone(), Some(Diagnostic::MalformedMarker { text: lit }))
                    }
                    _ if self.marker.chars().count() >= MAX_MARKER_CHARS => {
                        let lit = format!("[{}]({}", self.surface, self.marker);
                        self.abort(lit.clone(), Some(Diagnostic::MalformedMarker { text: lit }))
                    }
                    _ => {
                        self.marker.push(c);
                        return;
                    }
                },
            }
        }
    }

    fn abort(&mut self, literal: String, diagnostic: Option<Diagnostic>) {
        self.emit(&literal);
        if let Some(d) = diagnostic {
            self.diagnostics.push(d);
        }
        self.state = State::Text;
    }

    fn complete(&mut self, spans: &mut Vec<Span>) {
        self.state = State::Text;
        let surface = std::mem::take(&mut self.surface);
        let marker = std::mem::take(&mut self.marker);
        let Some(parsed) = parse_marker(&marker) else {
            let lit = format!("[{surface}]({marker})");
            self.diagnostics.push(Diagnostic::UnknownMarker { text: lit.clone() });
            self.emit(&lit);
            return;
        };

        let start = self.plain_chars;
        self.emit(&surface);
        let range = start..self.plain_chars;
        let marker_id = match &parsed {
            Marker::Entity(id) | Marker::Relation { id, .. } => id.clone(),
        };
        if surface.trim().is_empty() {
            self.diagnostics.push(Diagnostic::EmptySurface { marker_id });
            return;
        }

        match parsed {
            Marker::Entity(id) => {
                if !self.entity_ids.insert(id.clone()) {
                    self.diagnostics.push(Diagnostic::DuplicateMarker { marker_id: id });
                    return;
                }
                let span = EntitySpan { marker_id: id, surface, range };
                self.entities.push(span.clone());
                spans.push(Span::Entity(span));
            }
            Marker::Relation { id, subject, object } => {
                if subject == object {
                    self.diagnostics.push(Diagnostic::SelfRelation { marker_id: id });
                    return;
                }
                if !self.relation_ids.insert(id.clone()) {
                    self.diagnostics.push(Diagnostic::DuplicateMarker { marker_id: id });
                    return;
                }
                let span = RelationSpan { marker_id: id, surface, subject_ref: subject, object_ref: object, range };
                self.relations.push(span.clone());
                spans.push(Span::Relation(span));
            }
        }
    }
}

/// `$` + prefix + positive integer, canonicalised without leading zeros.
fn parse_id(text: &str, prefix: char) -> Option<String> {
    let rest = text.strip_prefix('$')?.strip_prefix(prefix)?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let n: u64 = rest.parse().ok()?;
    (n > 0).then(|| format!("${prefix}{n}"))
}

fn parse_marker(content: &str) -> Option<Marker> {
    let parts: Vec<&str> = content.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [one] => parse_id(one, 'n').map(Marker::Entity),
        [rel, subject, object] => Some(Marker::Relation {
            id: parse_id(rel, 'r')?,
            subject: parse_id(subject, 'n')?,
            object: parse_id(object, 'n')?,
        }),
        _ => None,
    }
}

/// One-shot parse; identical to feeding `raw` as a single chunk.
pub fn parse(raw: &str) -> AnnotatedResponse {
    let mut parser = AnnotationParser::new();
    parser.feed(raw);
    parser.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FISH_OIL: &str =
        "[fish oil]($n1) is known for [containing]($r1, $n1, $n2) a rich content of [Omega-3 fatty acids]($n2)";

    #[test]
    fn fish_oil_sentence() {
        let r = parse(FISH_OIL);
        assert_eq!(r.plain_text, "fish oil is known for containing a rich content of Omega-3 fatty acids");
        assert_eq!(r.entities.len(), 2);
        assert_eq!(r.relations.len(), 1);
        assert_eq!(
            r.triples,
            vec![Triple {
                subject_surface: "fish oil".into(),
                relation_surface: "containing".into(),
                object_surface: "Omega-3 fatty acids".into(),
                subject_id: "$n1".into(),
                relation_id: "$r1".into(),
                object_id: "$n2".into(),
            }]
        );
        assert!(r.diagnostics.is_empty());
        for e in &r.entities {
            assert_eq!(r.slice(&e.range), e.surface);
        }
    }

    #[test]
    fn marker_split_across_chunks() {
        let mut p = AnnotationParser::new();
        let first = p.feed("[fish o");
        assert_eq!(first.text, "");
        assert!(first.spans.is_empty());
        let second = p.feed("il]($n1) is known");
        assert_eq!(p.plain_text(), "fish oil is known");
        assert_eq!(second.text, "fish oil is known");
        assert_eq!(
            second.spans,
            vec![Span::Entity(EntitySpan { marker_id: "$n1".into(), surface: "fish oil".into(), range: 0..8 })]
        );
    }

    #[test]
    fn unannotated_text_is_identity() {
        let r = parse("hello world");
        assert_eq!(r.plain_text, "hello world");
        assert!(r.entities.is_empty() && r.relations.is_empty() && r.diagnostics.is_empty());
    }

    #[test]
    fn empty_stream() {
        assert_eq!(parse(""), AnnotatedResponse::default());
    }

    #[test]
    fn unresolved_relation_is_dropped() {
        let r = parse("[a]($n1) [x]($r9, $n1, $n5)");
        assert_eq!(r.plain_text, "a x");
        assert!(r.relations.is_empty());
        assert!(r.triples.is_empty());
        assert_eq!(
            r.diagnostics,
            vec![Diagnostic::UnresolvedEntityRef { relation_id: "$r9".into(), entity_id: "$n5".into() }]
        );
    }

    #[test]
    fn unknown_marker_forms_pass_through() {
        let r = parse("see [this]($x3) and [that]($n1, $n2)");
        assert_eq!(r.plain_text, "see [this]($x3) and [that]($n1, $n2)");
        assert_eq!(r.diagnostics.len(), 2);
        assert!(matches!(r.diagnostics[0], Diagnostic::UnknownMarker { .. }));
    }

    #[test]
    fn markdown_links_and_stray_brackets_are_literal() {
        let r = parse("a [link](https://x.org) and [b] (c) [d]");
        assert_eq!(r.plain_text, "a [link](https://x.org) and [b] (c) [d]");
        assert!(r.diagnostics.is_empty());
    }

    #[test]
    fn nested_marker_innermost_wins() {
        let r = parse("[outer [inner]($n1) text]");
        assert_eq!(r.plain_text, "[outer inner text]");
        assert_eq!(r.entities.len(), 1);
        assert_eq!(r.entities[0].surface, "inner");
        assert_eq!(r.entities[0].range, 7..12);
        assert_eq!(r.diagnostics, vec![Diagnostic::NestedBracket { offset: 7 }]);
    }

    #[test]
    fn relation_ids_tolerate_spacing_and_leading_zeros() {
        let r = parse("[a]($n01) [rel]($r1 ,$n1,   $n2) [b]($n2 )");
        assert_eq!(r.triples.len(), 1);
        assert_eq!(r.triples[0].subject_id, "$n1");
        assert_eq!(r.plain_text, "a rel b");
    }

    #[test]
    fn semantic_rejections_strip_markup() {
        let r = parse("[a]($n1) [again]($n1) [self]($r1, $n1, $n1) []($n2) [zero]($n0)");
        assert_eq!(r.plain_text, "a again self  [zero]($n0)");
        assert_eq!(r.entities.len(), 1);
        assert_eq!(
            r.diagnostics[..3],
            [
                Diagnostic::DuplicateMarker { marker_id: "$n1".into() },
                Diagnostic::SelfRelation { marker_id: "$r1".into() },
                Diagnostic::EmptySurface { marker_id: "$n2".into() },
            ]
        );
    }

    #[test]
    fn unterminated_and_malformed_markers() {
        let r = parse("[a]($n1");
        assert_eq!(r.plain_text, "[a]($n1");
        assert!(matches!(r.diagnostics[0], Diagnostic::UnterminatedMarker { .. }));

        let r = parse("[a]($n1\n[b]($n2)");
        assert_eq!(r.plain_text, "[a]($n1\nb");
        assert!(matches!(r.diagnostics[0], Diagnostic::MalformedMarker { .. }));
        assert_eq!(r.entities.len(), 1);
    }

    #[test]
    fn ranges_count_characters_not_bytes() {
        let r = parse("café [Ginkgo 銀杏]($n1)");
        assert_eq!(r.entities[0].range, 5..14);
        assert_eq!(r.slice(&r.entities[0].range), "Ginkgo 銀杏");
    }

    #[test]
    fn namespacing_rewrites_every_reference() {
        let r = parse(FISH_OIL).namespaced("s2:");
        assert_eq!(r.entities[0].marker_id, "s2:$n1");
        assert_eq!(r.relations[0].subject_ref, "s2:$n1");
        assert_eq!(r.triples[0].object_id, "s2:$n2");
    }
}
