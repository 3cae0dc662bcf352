//! Knowledge-base ingestion and distant-supervision example construction.
//!
//! Inputs are anchor-annotated documents, entity pages and a fact store.
//! Every anchor whose entity has a page yields an entity-page example; every
//! fact whose head and tail are both anchored in the same sentence yields a
//! relational example on the head anchor.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{flatten_fact_words, TargetWord, DEFAULT_SOFT_PROMPTS};
use crate::util;

pub const DEFAULT_PAGE_PREFIX_LEN: usize = 64;
pub const DEFAULT_TOP_K_RELATIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityEntry {
    #[serde(rename = "entity")]
    pub id: String,
    pub name: Vec<String>,
    #[serde(default)]
    pub page: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl FactTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        FactTriple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    pub fn is_self_loop(&self) -> bool {
        self.head == self.tail
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbReport {
    pub entities: usize,
    pub facts: usize,
    pub duplicate_facts: usize,
    pub self_loops: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Kb {
    entities: HashMap<String, EntityEntry>,
    facts: Vec<FactTriple>,
    fact_set: HashSet<FactTriple>,
    by_pair: HashMap<(String, String), Vec<usize>>,
    relation_surfaces: HashMap<String, Vec<String>>,
    report: KbReport,
}

impl Kb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, mut entry: EntityEntry, page_prefix_len: usize) -> Result<()> {
        if self.entities.contains_key(&entry.id) {
            return Err(Error::DuplicateEntity(entry.id));
        }
        entry.page.truncate(page_prefix_len);
        self.entities.insert(entry.id.clone(), entry);
        self.report.entities += 1;
        Ok(())
    }

    /// Adds a fact; returns false when it was already present.
    pub fn add_fact(&mut self, fact: FactTriple) -> bool {
        if self.fact_set.contains(&fact) {
            self.report.duplicate_facts += 1;
            return false;
        }
        if fact.is_self_loop() {
            self.report.self_loops += 1;
        }
        self.by_pair
            .entry((fact.head.clone(), fact.tail.clone()))
            .or_default()
            .push(self.facts.len());
        self.fact_set.insert(fact.clone());
        self.facts.push(fact);
        self.report.facts += 1;
        true
    }

    pub fn set_relation_surface(&mut self, relation: impl Into<String>, surface: Vec<String>) {
        self.relation_surfaces.insert(relation.into(), surface);
    }

    pub fn entity(&self, id: &str) -> Option<&EntityEntry> {
        self.entities.get(id)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn facts(&self) -> &[FactTriple] {
        &self.facts
    }

    pub fn contains(&self, fact: &FactTriple) -> bool {
        self.fact_set.contains(fact)
    }

    pub fn report(&self) -> &KbReport {
        &self.report
    }

    /// Facts with the given head and tail, in insertion order.
    pub fn facts_between(&self, head: &str, tail: &str) -> impl Iterator<Item = &FactTriple> {
        self.by_pair
            .get(&(head.to_string(), tail.to_string()))
            .into_iter()
            .flatten()
            .map(|&i| &self.facts[i])
    }

    /// Surface tokens of a relation; falls back to the id split on `_`.
    pub fn relation_surface(&self, relation: &str) -> Vec<String> {
        self.relation_surfaces
            .get(relation)
            .cloned()
            .unwrap_or_else(|| relation.split('_').filter(|s| !s.is_empty()).map(str::to_string).collect())
    }

    pub fn load_relation_surfaces(&mut self, path: &Path) -> Result<usize> {
        let mut n = 0;
        for (lineno, line) in util::read_lines(path)?.into_iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (rel, surface) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(path, lineno + 1, "expected relation<TAB>surface"))?;
            let tokens: Vec<String> = surface.split_whitespace().map(str::to_string).collect();
            if rel.is_empty() || tokens.is_empty() {
                return Err(Error::malformed(path, lineno + 1, "empty relation or surface"));
            }
            self.set_relation_surface(rel, tokens);
            n += 1;
        }
        Ok(n)
    }
}

pub fn load_entities(path: &Path, page_prefix_len: usize, kb: &mut Kb) -> Result<()> {
    for entry in util::read_jsonl::<EntityEntry>(path)? {
        kb.add_entity(entry, page_prefix_len)?;
    }
    Ok(())
}

/// Reads `head<TAB>relation<TAB>tail` lines.
pub fn read_facts(path: &Path) -> Result<Vec<FactTriple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::malformed(path, i + 1, "expected head<TAB>relation<TAB>tail"));
        }
        out.push(FactTriple::new(cols[0].trim(), cols[1].trim(), cols[2].trim()));
    }
    Ok(out)
}

pub fn write_facts(path: &Path, facts: &[FactTriple]) -> Result<()> {
    let mut s = String::new();
    for f in facts {
        s.push_str(&format!("{}\t{}\t{}\n", f.head, f.relation, f.tail));
    }
    util::write_string(path, &s)
}

pub fn load_kb(entities_path: &Path, facts_path: &Path) -> Result<Kb> {
    load_kb_with(entities_path, facts_path, DEFAULT_PAGE_PREFIX_LEN)
}

pub fn load_kb_with(entities_path: &Path, facts_path: &Path, page_prefix_len: usize) -> Result<Kb> {
    let mut kb = Kb::new();
    load_entities(entities_path, page_prefix_len, &mut kb)?;
    for fact in read_facts(facts_path)? {
        kb.add_fact(fact);
    }
    if kb.report.duplicate_facts > 0 {
        log::info!("dropped {} duplicate facts", kb.report.duplicate_facts);
    }
    Ok(kb)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

impl Anchor {
    fn len(&self) -> usize {
        self.end - self.start + 1
    }

    fn overlaps(&self, other: &Anchor) -> bool {
        self.sent == other.sent && self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
}

impl Document {
    fn check_bounds(&self) -> std::result::Result<(), String> {
        for a in &self.anchors {
            let len = self
                .sentences
                .get(a.sent)
                .map(Vec::len)
                .ok_or_else(|| format!("anchor sentence {} out of range", a.sent))?;
            if a.start > a.end || a.end >= len {
                return Err(format!("anchor ({}, {}) outside sentence {} of length {len}", a.start, a.end, a.sent));
            }
        }
        Ok(())
    }
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let docs: Vec<Document> = util::read_jsonl(path)?;
    for (i, d) in docs.iter().enumerate() {
        d.check_bounds().map_err(|m| Error::malformed(path, i + 1, m))?;
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub kept: usize,
    pub unknown_entity: usize,
    pub overlapping: usize,
}

/// Drops anchors whose entity is not in the KB and resolves overlaps by
/// keeping the longer span (ties: earlier start). Surviving anchors are
/// sorted by (sentence, start).
pub fn resolve_anchors(doc: &Document, kb: &Kb) -> (Document, AnchorReport) {
    let mut report = AnchorReport::default();
    let mut known: Vec<&Anchor> = doc
        .anchors
        .iter()
        .filter(|a| {
            let ok = kb.entity(&a.entity).is_some();
            if !ok {
                report.unknown_entity += 1;
            }
            ok
        })
        .collect();
    // longest first, then earliest start, then input order
    known.sort_by(|a, b| {
        a.sent
            .cmp(&b.sent)
            .then(b.len().cmp(&a.len()))
            .then(a.start.cmp(&b.start))
    });
    let mut kept: Vec<Anchor> = Vec::new();
    for a in known {
        if kept.iter().any(|k| k.overlaps(a)) {
            report.overlapping += 1;
        } else {
            kept.push(a.clone());
        }
    }
    kept.sort_by_key(|a| (a.sent, a.start));
    report.kept = kept.len();
    (
        Document {
            doc_id: doc.doc_id.clone(),
            sentences: doc.sentences.clone(),
            anchors: kept,
        },
        report,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub doc_id: String,
    pub sent: usize,
    /// Inclusive head-anchor span within the sentence.
    pub span: (usize, usize),
    pub fact: FactTriple,
}

/// All facts whose head and tail are anchored in the same sentence, keyed
/// on the head anchor. Both anchor orders are tried.
pub fn align_facts(doc: &Document, kb: &Kb) -> Vec<Alignment> {
    let mut out: Vec<Alignment> = Vec::new();
    let mut seen: HashSet<(usize, usize, usize, FactTriple)> = HashSet::new();
    for (i, h) in doc.anchors.iter().enumerate() {
        for (j, t) in doc.anchors.iter().enumerate() {
            if i == j || h.sent != t.sent {
                continue;
            }
            for fact in kb.facts_between(&h.entity, &t.entity) {
                if seen.insert((h.sent, h.start, h.end, fact.clone())) {
                    out.push(Alignment {
                        doc_id: doc.doc_id.clone(),
                        sent: h.sent,
                        span: (h.start, h.end),
                        fact: fact.clone(),
                    });
                }
            }
        }
    }
    out
}

/// Relations ranked by alignment count (descending, ties by name).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub ranked: Vec<(String, usize)>,
}

impl FrequencyTable {
    pub fn count(alignments: &[Alignment]) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in alignments {
            *counts.entry(&a.fact.relation).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(r, c)| (r.to_string(), c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        FrequencyTable { ranked }
    }

    pub fn top(&self, k: usize) -> Vec<&str> {
        self.ranked.iter().take(k).map(|(r, _)| r.as_str()).collect()
    }

    pub fn to_tsv(&self) -> String {
        self.ranked.iter().map(|(r, c)| format!("{r}\t{c}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut ranked = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (r, c) = line
                .split_once('\t')
                .and_then(|(r, c)| c.parse::<usize>().ok().map(|c| (r.to_string(), c)))
                .ok_or_else(|| Error::malformed("frequency table", i + 1, "expected relation<TAB>count"))?;
            ranked.push((r, c));
        }
        Ok(FrequencyTable { ranked })
    }
}

/// Removes every alignment whose relation ranks in the top `top_k` by
/// frequency.
pub fn filter_frequent_relations(
    alignments: Vec<Alignment>,
    top_k: usize,
) -> Result<(Vec<Alignment>, FrequencyTable)> {
    let table = FrequencyTable::count(&alignments);
    if top_k == 0 {
        return Ok((alignments, table));
    }
    if top_k >= table.ranked.len() {
        return Err(Error::TopKTooLarge {
            top_k,
            distinct: table.ranked.len(),
        });
    }
    let removed: HashSet<&str> = table.top(top_k).into_iter().collect();
    let kept = alignments
        .iter()
        .filter(|a| !removed.contains(a.fact.relation.as_str()))
        .cloned()
        .collect();
    Ok((kept, table))
}

/// Drops alignments whose triple is held out; returns survivors and the
/// number removed.
pub fn scrub_leakage(alignments: Vec<Alignment>, held_out: &HashSet<FactTriple>) -> (Vec<Alignment>, usize) {
    let before = alignments.len();
    let kept: Vec<Alignment> = alignments.into_iter().filter(|a| !held_out.contains(&a.fact)).collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    EntityPage,
    Relational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionExample {
    pub doc_id: String,
    pub sent: usize,
    pub sentence: Vec<String>,
    /// Inclusive span within `sentence`.
    pub span: (usize, usize),
    pub kind: ExampleKind,
    pub entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<FactTriple>,
    pub target: Vec<TargetWord>,
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub top_k_relations: usize,
    pub held_out: Option<HashSet<FactTriple>>,
    pub num_prompts: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            top_k_relations: DEFAULT_TOP_K_RELATIONS,
            held_out: None,
            num_prompts: DEFAULT_SOFT_PROMPTS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub documents: usize,
    pub sentences: usize,
    pub anchors: AnchorReport,
    pub alignments: usize,
    pub removed_relations: Vec<String>,
    pub removed_by_frequency: usize,
    pub removed_by_scrub: usize,
    pub anchors_without_page: usize,
    pub entity_page_examples: usize,
    pub relational_examples: usize,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub examples: Vec<InjectionExample>,
    pub frequencies: FrequencyTable,
    pub stats: BuildStats,
}

/// Runs resolution, alignment, frequency filtering and leakage scrubbing,
/// then emits examples in ascending `doc_id` order.
pub fn build_injection_examples(docs: &[Document], kb: &Kb, config: &BuildConfig) -> Result<BuildOutput> {
    let mut order: Vec<&Document> = docs.iter().collect();
    order.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let mut stats = BuildStats {
        documents: docs.len(),
        ..Default::default()
    };

    let mut resolved = Vec::with_capacity(order.len());
    let mut alignments = Vec::new();
    for doc in order {
        let (doc, rep) = resolve_anchors(doc, kb);
        stats.sentences += doc.sentences.len();
        stats.anchors.kept += rep.kept;
        stats.anchors.unknown_entity += rep.unknown_entity;
        stats.anchors.overlapping += rep.overlapping;
        alignments.extend(align_facts(&doc, kb));
        resolved.push(doc);
    }
    stats.alignments = alignments.len();

    let before = alignments.len();
    let (alignments, frequencies) = filter_frequent_relations(alignments, config.top_k_relations)?;
    stats.removed_by_frequency = before - alignments.len();
    stats.removed_relations = frequencies
        .top(config.top_k_relations)
        .into_iter()
        .map(str::to_string)
        .collect();
    let alignments = match &config.held_out {
        Some(held) => {
            let (kept, removed) = scrub_leakage(alignments, held);
            stats.removed_by_scrub = removed;
            kept
        }
        None => alignments,
    };

    let mut by_head: HashMap<(&str, usize, (usize, usize)), Vec<&Alignment>> = HashMap::new();
    for a in &alignments {
        by_head.entry((a.doc_id.as_str(), a.sent, a.span)).or_default().push(a);
    }

    let mut examples = Vec::new();
    for doc in &resolved {
        for anchor in &doc.anchors {
            let entity = kb.entity(&anchor.entity).expect("anchors resolved against kb");
            let sentence = &doc.sentences[anchor.sent];
            let span = (anchor.start, anchor.end);
            if entity.page.is_empty() {
                stats.anchors_without_page += 1;
            } else {
                examples.push(InjectionExample {
                    doc_id: doc.doc_id.clone(),
                    sent: anchor.sent,
                    sentence: sentence.clone(),
                    span,
                    kind: ExampleKind::EntityPage,
                    entity: anchor.entity.clone(),
                    fact: None,
                    target: entity.page.iter().cloned().map(TargetWord::Word).collect(),
                });
                stats.entity_page_examples += 1;
            }
            let Some(aligned) = by_head.get(&(doc.doc_id.as_str(), anchor.sent, span)) else {
                continue;
            };
            for a in aligned {
                let tail_name = kb
                    .entity(&a.fact.tail)
                    .map(|e| e.name.clone())
                    .unwrap_or_default();
                let target = flatten_fact_words(
                    &kb.relation_surface(&a.fact.relation),
                    &tail_name,
                    config.num_prompts,
                )?;
                examples.push(InjectionExample {
                    doc_id: doc.doc_id.clone(),
                    sent: anchor.sent,
                    sentence: sentence.clone(),
                    span,
                    kind: ExampleKind::Relational,
                    entity: anchor.entity.clone(),
                    fact: Some(a.fact.clone()),
                    target,
                });
                stats.relational_examples += 1;
            }
        }
    }
    Ok(BuildOutput {
        examples,
        frequencies,
        stats,
    })
}

pub fn write_examples(path: &Path, examples: &[InjectionExample]) -> Result<()> {
    util::write_jsonl(path, examples)
}

pub fn read_examples(path: &Path) -> Result<Vec<InjectionExample>> {
    util::read_jsonl(path)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    util::write_jsonl(path, docs)
}

pub fn write_entities(path: &Path, entities: &[EntityEntry]) -> Result<()> {
    util::write_jsonl(path, entities)
}
