//! Vocabulary, decoder targets, levitated-marker encoder inputs and MLM
//! corruption.
//!
//! Tokenization is whitespace splitting over pre-tokenized input. Reserved
//! ids occupy a fixed prefix of the id space:
//!
//! | id | token |
//! |----|-------|
//! | 0..=3 | `[PAD]` `[CLS]` `[SEP]` `[MASK]` |
//! | 4..=7 | `[ME]` `[/ME]` `[MR]` `[/MR]` (levitated pre-training markers) |
//! | 8..=11 | `[E1]` `[/E1]` `[E2]` `[/E2]` (inline fine-tuning enclosures) |
//! | 12.. | `[P1]` .. `[Pn]` soft prompts (n = 3 by default) |
//! | 12+n | `[UNK]` |
//!
//! Surface words follow `[UNK]`. Every id from `[UNK]` upward is a
//! predictable output class; ids below it never receive output logits.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::util;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const ENTITY_OPEN: u32 = 4;
pub const ENTITY_CLOSE: u32 = 5;
pub const RELATION_OPEN: u32 = 6;
pub const RELATION_CLOSE: u32 = 7;
pub const E1_OPEN: u32 = 8;
pub const E1_CLOSE: u32 = 9;
pub const E2_OPEN: u32 = 10;
pub const E2_CLOSE: u32 = 11;
const FIRST_PROMPT: u32 = 12;

pub const DEFAULT_SOFT_PROMPTS: usize = 3;

const FIXED_SPECIALS: [&str; 12] = [
    "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[ME]", "[/ME]", "[MR]", "[/MR]", "[E1]", "[/E1]", "[E2]",
    "[/E2]",
];
const UNK_TOKEN: &str = "[UNK]";

/// Id of soft prompt `[P<index>]` (1-based) in any vocabulary that has it.
pub const fn prompt_id(index: u8) -> u32 {
    FIRST_PROMPT + index as u32 - 1
}

fn prompt_token(index: usize) -> String {
    format!("[P{index}]")
}

/// Parses `[P<n>]` into `n`.
fn parse_prompt(token: &str) -> Option<u8> {
    token
        .strip_prefix("[P")
        .and_then(|rest| rest.strip_suffix(']'))
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| n >= 1)
}

fn is_reserved_string(token: &str) -> bool {
    token == UNK_TOKEN || FIXED_SPECIALS.contains(&token) || parse_prompt(token).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    num_prompts: usize,
}

impl Vocab {
    fn reserved(num_prompts: usize) -> Vec<String> {
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((1..=num_prompts).map(prompt_token));
        tokens.push(UNK_TOKEN.to_string());
        tokens
    }

    fn from_tokens(tokens: Vec<String>, num_prompts: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            num_prompts,
        }
    }

    /// A vocabulary holding only the reserved tokens.
    pub fn reserved_only(num_prompts: usize) -> Self {
        Self::from_tokens(Self::reserved(num_prompts), num_prompts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_reserved(&self) -> usize {
        FIXED_SPECIALS.len() + self.num_prompts + 1
    }

    pub fn unk(&self) -> u32 {
        FIRST_PROMPT + self.num_prompts as u32
    }

    /// First id that is a legal prediction target (`[UNK]`).
    pub fn first_output_id(&self) -> u32 {
        self.unk()
    }

    /// Id of soft prompt `[P<index>]`, 1-based.
    pub fn prompt(&self, index: u8) -> Option<u32> {
        let i = index as usize;
        (i >= 1 && i <= self.num_prompts).then(|| prompt_id(index))
    }

    /// Ids that are not ordinary text: everything reserved except `[UNK]`.
    pub fn is_special(&self, id: u32) -> bool {
        id < self.unk()
    }

    /// Looks up a surface token. Reserved strings appearing in text are not
    /// allowed to alias reserved ids and map to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        if is_reserved_string(token) {
            return self.unk();
        }
        self.index.get(token).copied().unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        util::write_string(path, &s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = util::read_lines(path)?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        let num_prompts = tokens
            .iter()
            .skip(FIXED_SPECIALS.len())
            .take_while(|t| parse_prompt(t).is_some())
            .count();
        let reserved = Self::reserved(num_prompts);
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::malformed(path, 1, "vocabulary does not start with the reserved tokens"));
        }
        for (i, t) in tokens.iter().enumerate().skip(reserved.len()) {
            if is_reserved_string(t) {
                return Err(Error::malformed(path, i + 1, format!("reserved token `{t}` out of place")));
            }
        }
        Ok(Self::from_tokens(tokens, num_prompts))
    }
}

/// Builds a vocabulary from a token stream. Words with count >= `min_count`
/// are kept, ordered by descending count then lexicographically.
pub fn build_vocab<I, S>(corpus: I, min_count: usize) -> Vocab
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    build_vocab_with_prompts(corpus, min_count, DEFAULT_SOFT_PROMPTS)
}

pub fn build_vocab_with_prompts<I, S>(corpus: I, min_count: usize, num_prompts: usize) -> Vocab
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in corpus {
        let tok = tok.as_ref();
        if tok.is_empty() || is_reserved_string(tok) {
            continue;
        }
        *counts.entry(tok.to_string()).or_default() += 1;
    }
    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = Vocab::reserved(num_prompts);
    tokens.extend(words.into_iter().map(|(w, _)| w));
    Vocab::from_tokens(tokens, num_prompts)
}

/// One slot of a flattened target before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TargetWord {
    Prompt(u8),
    Word(String),
}

impl fmt::Display for TargetWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetWord::Prompt(i) => write!(f, "[P{i}]"),
            TargetWord::Word(w) => f.write_str(w),
        }
    }
}

impl Serialize for TargetWord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TargetWord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match parse_prompt(&s) {
            Some(i) => TargetWord::Prompt(i),
            None => TargetWord::Word(s),
        })
    }
}

/// Word-level form of a flattened fact: `[P1] relation [P2] tail [P3]`.
/// With more than three prompts the extra ones trail the tail.
pub fn flatten_fact_words<S: AsRef<str>>(
    relation_surface: &[S],
    tail_name: &[S],
    num_prompts: usize,
) -> Result<Vec<TargetWord>> {
    if relation_surface.is_empty() {
        return Err(Error::EmptySurface("relation"));
    }
    if tail_name.is_empty() {
        return Err(Error::EmptySurface("tail"));
    }
    if num_prompts < 3 {
        return Err(Error::Config(format!("need at least 3 soft prompts, got {num_prompts}")));
    }
    let word = |s: &S| TargetWord::Word(s.as_ref().to_string());
    let mut out = vec![TargetWord::Prompt(1)];
    out.extend(relation_surface.iter().map(word));
    out.push(TargetWord::Prompt(2));
    out.extend(tail_name.iter().map(word));
    out.extend((3..=num_prompts as u8).map(TargetWord::Prompt));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    SoftPrompt(u8),
    Token(u32),
}

/// Decoder target sequence. Soft-prompt slots are fed to the decoder as
/// inputs but never scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderTarget {
    slots: Vec<Slot>,
    loss_mask: Vec<bool>,
}

impl DecoderTarget {
    pub fn from_slots(slots: Vec<Slot>) -> Result<Self> {
        if slots.iter().any(|s| matches!(s, Slot::SoftPrompt(0))) {
            return Err(Error::Config("soft prompts are numbered from 1".into()));
        }
        let loss_mask: Vec<bool> = slots.iter().map(|s| matches!(s, Slot::Token(_))).collect();
        if !loss_mask.iter().any(|&m| m) {
            return Err(Error::EmptyTarget);
        }
        Ok(DecoderTarget { slots, loss_mask })
    }

    /// An unstructured target: every slot is loss-bearing.
    pub fn page<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Result<Self> {
        Self::from_slots(vocab.encode(tokens).into_iter().map(Slot::Token).collect())
    }

    pub fn from_words(words: &[TargetWord], vocab: &Vocab) -> Result<Self> {
        let slots = words
            .iter()
            .map(|w| match w {
                TargetWord::Prompt(i) => {
                    if vocab.prompt(*i).is_none() {
                        return Err(Error::Config(format!(
                            "soft prompt [P{i}] not in vocabulary ({} prompts)",
                            vocab.num_prompts()
                        )));
                    }
                    Ok(Slot::SoftPrompt(*i))
                }
                TargetWord::Word(w) => Ok(Slot::Token(vocab.id(w))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_slots(slots)
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scored(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Vocabulary id of every slot; soft prompts resolve to their rows.
    pub fn slot_ids(&self) -> Vec<u32> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::SoftPrompt(i) => prompt_id(i),
                Slot::Token(id) => id,
            })
            .collect()
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::SoftPrompt(i) => prompt_token(i as usize),
                Slot::Token(id) => vocab.token(id).to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `[P1] relation [P2] tail [P3]` as a decoder target.
pub fn flatten_fact<S: AsRef<str>>(
    relation_surface: &[S],
    tail_name: &[S],
    vocab: &Vocab,
) -> Result<DecoderTarget> {
    let words = flatten_fact_words(relation_surface, tail_name, vocab.num_prompts())?;
    DecoderTarget::from_words(&words, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    /// Entity-page (unstructured) supervision, `[ME]`/`[/ME]`.
    Entity,
    /// Relational (structured) supervision, `[MR]`/`[/MR]`.
    Relation,
}

impl MarkerKind {
    pub fn open_id(self) -> u32 {
        match self {
            MarkerKind::Entity => ENTITY_OPEN,
            MarkerKind::Relation => RELATION_OPEN,
        }
    }

    pub fn close_id(self) -> u32 {
        match self {
            MarkerKind::Entity => ENTITY_CLOSE,
            MarkerKind::Relation => RELATION_CLOSE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Text,
    MarkerOpen,
    MarkerClose,
}

/// A levitated marker pair. `span` is given in sequence indices (the `[CLS]`
/// offset already applied), inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerPair {
    pub open: usize,
    pub close: usize,
    pub span: (usize, usize),
    pub kind: MarkerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub roles: Vec<Role>,
    pub pairs: Vec<MarkerPair>,
    /// Original id at each corrupted position, `None` elsewhere.
    pub mlm_labels: Option<Vec<Option<u32>>>,
    text_len: usize,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length of the `[CLS] text [SEP]` region.
    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// The sentence ids between `[CLS]` and `[SEP]`.
    pub fn sentence_ids(&self) -> &[u32] {
        &self.ids[1..self.text_len - 1]
    }

    /// Same input with every marker pair removed.
    pub fn without_markers(&self) -> EncoderInput {
        let n = self.text_len;
        EncoderInput {
            ids: self.ids[..n].to_vec(),
            positions: self.positions[..n].to_vec(),
            roles: self.roles[..n].to_vec(),
            pairs: Vec::new(),
            mlm_labels: self.mlm_labels.as_ref().map(|l| l[..n].to_vec()),
            text_len: n,
        }
    }

    /// Positions carrying an MLM label, with the label.
    pub fn mlm_targets(&self) -> Vec<(usize, u32)> {
        self.mlm_labels
            .as_ref()
            .map(|labels| {
                labels
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.map(|id| (i, id)))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Lays out `[CLS] sentence [SEP]` followed by one appended marker pair per
/// span. Spans are inclusive sentence indices; each marker copies the
/// position id of its span boundary token.
pub fn assemble_encoder_input<S: AsRef<str>>(
    sentence: &[S],
    spans: &[(usize, usize, MarkerKind)],
    vocab: &Vocab,
) -> Result<EncoderInput> {
    assemble_from_ids(&vocab.encode(sentence), spans)
}

pub fn assemble_from_ids(
    sentence: &[u32],
    spans: &[(usize, usize, MarkerKind)],
) -> Result<EncoderInput> {
    let n = sentence.len();
    for (i, &(start, end, kind)) in spans.iter().enumerate() {
        if start > end || end >= n {
            return Err(Error::SpanOutOfBounds { start, end, len: n });
        }
        if spans[..i].iter().any(|&(s, e, k)| s == start && e == end && k == kind) {
            return Err(Error::DuplicatePair { start, end });
        }
    }
    let text_len = n + 2;
    let total = text_len + 2 * spans.len();
    let mut ids = Vec::with_capacity(total);
    ids.push(CLS);
    ids.extend_from_slice(sentence);
    ids.push(SEP);
    let mut positions: Vec<usize> = (0..text_len).collect();
    let mut roles = vec![Role::Text; text_len];
    let mut pairs = Vec::with_capacity(spans.len());
    for &(start, end, kind) in spans {
        let span = (start + 1, end + 1);
        let open = ids.len();
        ids.push(kind.open_id());
        positions.push(positions[span.0]);
        roles.push(Role::MarkerOpen);
        ids.push(kind.close_id());
        positions.push(positions[span.1]);
        roles.push(Role::MarkerClose);
        pairs.push(MarkerPair {
            open,
            close: open + 1,
            span,
            kind,
        });
    }
    Ok(EncoderInput {
        ids,
        positions,
        roles,
        pairs,
        mlm_labels: None,
        text_len,
    })
}

/// Builds a plain `[CLS] ids [SEP]` input with caller-provided inline tokens
/// already in place (used for downstream enclosures).
pub fn text_only(ids_between: &[u32]) -> EncoderInput {
    assemble_from_ids(ids_between, &[]).expect("no spans to validate")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    rate: f64,
    /// 80/10/10 mask/random/keep; otherwise always `[MASK]`.
    pub bert_split: bool,
    /// Whether tokens inside marked spans may be corrupted.
    pub corrupt_anchors: bool,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            rate: 0.15,
            bert_split: true,
            corrupt_anchors: true,
        }
    }
}

impl MlmConfig {
    pub fn new(rate: f64, bert_split: bool, corrupt_anchors: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("mlm rate {rate} outside [0, 1)")));
        }
        Ok(MlmConfig {
            rate,
            bert_split,
            corrupt_anchors,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Selects each eligible text token with probability `rate` and corrupts it.
/// `[CLS]`, `[SEP]` and all marker tokens are never touched.
pub fn apply_mlm(input: &EncoderInput, config: &MlmConfig, vocab: &Vocab, seed: u64) -> EncoderInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = input.clone();
    let mut labels = vec![None; input.len()];
    let first_word = vocab.first_output_id();
    let n_words = vocab.len() as u32 - first_word;
    for i in 0..input.text_len {
        let id = input.ids[i];
        if input.roles[i] != Role::Text || vocab.is_special(id) {
            continue;
        }
        if !config.corrupt_anchors && input.pairs.iter().any(|p| p.span.0 <= i && i <= p.span.1) {
            continue;
        }
        if rng.gen::<f64>() >= config.rate {
            continue;
        }
        labels[i] = Some(id);
        if !config.bert_split {
            out.ids[i] = MASK;
            continue;
        }
        let r = rng.gen::<f64>();
        if r < 0.8 {
            out.ids[i] = MASK;
        } else if r < 0.9 {
            out.ids[i] = first_word + rng.gen_range(0..n_words);
        }
    }
    out.mlm_labels = Some(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn empty_corpus_has_only_reserved_tokens() {
        let v = build_vocab(Vec::<String>::new(), 1);
        assert_eq!(v.len(), 16);
        assert_eq!(v.num_reserved(), 16);
        assert_eq!(v.unk(), 15);
        assert_eq!(v.token(v.prompt(1).unwrap()), "[P1]");
    }

    #[test]
    fn min_count_filters_rare_words() {
        let v = build_vocab(words("a a b"), 2);
        assert_ne!(v.id("a"), v.unk());
        assert_eq!(v.id("b"), v.unk());
        assert_eq!(v.len(), 17);
    }

    #[test]
    fn reserved_strings_in_text_map_to_unk() {
        let v = build_vocab(words("[CLS] x [P1] x"), 1);
        assert_eq!(v.id("[CLS]"), v.unk());
        assert_eq!(v.id("[P1]"), v.unk());
        assert_eq!(v.len(), 17);
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let v = build_vocab(words("the cat sat on the mat"), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn flatten_fact_reproduces_curry_pattern() {
        let v = build_vocab(words("graduated at davidson college"), 1);
        let t = flatten_fact(&words("graduated at"), &words("davidson college"), &v).unwrap();
        assert_eq!(t.render(&v), "[P1] graduated at [P2] davidson college [P3]");
        assert_eq!(t.loss_mask(), &[false, true, true, false, true, true, false]);
        assert_eq!(t.num_scored(), 4);
    }

    #[test]
    fn single_token_fact_has_five_slots() {
        let v = build_vocab(words("r t"), 1);
        let t = flatten_fact(&["r"], &["t"], &v).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.num_scored(), 2);
    }

    #[test]
    fn flatten_fact_rejects_empty_surfaces() {
        let v = build_vocab(words("r"), 1);
        let empty: [&str; 0] = [];
        assert!(matches!(flatten_fact(&empty, &["r"], &v), Err(Error::EmptySurface("relation"))));
        assert!(matches!(flatten_fact(&["r"], &empty, &v), Err(Error::EmptySurface("tail"))));
    }

    #[test]
    fn target_words_serialize_as_strings() {
        let w = flatten_fact_words(&["r"], &["t"], 3).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"["[P1]","r","[P2]","t","[P3]"]"#);
        let back: Vec<TargetWord> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn no_spans_gives_pure_text() {
        let v = build_vocab(words("a b c"), 1);
        let inp = assemble_encoder_input(&words("a b c"), &[], &v).unwrap();
        assert_eq!(inp.len(), 5);
        assert!(inp.pairs.is_empty());
        assert!(inp.roles.iter().all(|r| *r == Role::Text));
    }

    #[test]
    fn marker_positions_copy_span_boundaries() {
        let v = build_vocab(words("a b c"), 1);
        let inp = assemble_encoder_input(&words("a b c"), &[(1, 2, MarkerKind::Entity)], &v).unwrap();
        assert_eq!(inp.len(), 7);
        assert_eq!(inp.positions[5], 2);
        assert_eq!(inp.positions[6], 3);
        assert_eq!(inp.ids[5], ENTITY_OPEN);
        assert_eq!(inp.ids[6], ENTITY_CLOSE);
        assert_eq!(inp.pairs[0].span, (2, 3));
    }

    #[test]
    fn two_spans_give_two_pairs() {
        let v = build_vocab(words("a b c"), 1);
        let inp = assemble_encoder_input(
            &words("a b c"),
            &[(0, 0, MarkerKind::Entity), (0, 0, MarkerKind::Relation)],
            &v,
        )
        .unwrap();
        assert_eq!(inp.pairs.len(), 2);
        assert_eq!(inp.ids[7], RELATION_OPEN);
    }

    #[test]
    fn assemble_rejects_bad_spans() {
        let v = build_vocab(words("a b c"), 1);
        let s = words("a b c");
        assert!(matches!(
            assemble_encoder_input(&s, &[(1, 3, MarkerKind::Entity)], &v),
            Err(Error::SpanOutOfBounds { .. })
        ));
        assert!(matches!(
            assemble_encoder_input(&s, &[(2, 1, MarkerKind::Entity)], &v),
            Err(Error::SpanOutOfBounds { .. })
        ));
        assert!(matches!(
            assemble_encoder_input(&s, &[(0, 1, MarkerKind::Entity), (0, 1, MarkerKind::Entity)], &v),
            Err(Error::DuplicatePair { .. })
        ));
    }

    #[test]
    fn mlm_rate_zero_corrupts_nothing() {
        let v = build_vocab(words("a b c"), 1);
        let inp = assemble_encoder_input(&words("a b c a b c"), &[], &v).unwrap();
        let cfg = MlmConfig::new(0.0, true, true).unwrap();
        let out = apply_mlm(&inp, &cfg, &v, 3);
        assert!(out.mlm_targets().is_empty());
        assert_eq!(out.ids, inp.ids);
    }

    #[test]
    fn mlm_rate_default_is_fifteen_percent() {
        assert_eq!(MlmConfig::default().rate(), 0.15);
        assert!(MlmConfig::new(1.0, true, true).is_err());
    }

    #[test]
    fn mlm_selection_rate_within_binomial_interval() {
        let vocab_words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&vocab_words, 1);
        let sentence: Vec<String> = (0..10_000).map(|i| vocab_words[i % 50].clone()).collect();
        let inp = assemble_encoder_input(&sentence, &[], &v).unwrap();
        let out = apply_mlm(&inp, &MlmConfig::default(), &v, 11);
        let n = 10_000.0_f64;
        let p = 0.15;
        let selected = out.mlm_targets().len() as f64;
        // normal approximation, two-sided 99%
        let half = 2.5758 * (n * p * (1.0 - p)).sqrt();
        assert!((selected - n * p).abs() <= half, "selected {selected}");
    }

    #[test]
    fn mlm_can_exempt_anchor_spans() {
        let vocab_words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&vocab_words, 1);
        let inp = assemble_encoder_input(&vocab_words, &[(2, 9, MarkerKind::Entity)], &v).unwrap();
        let cfg = MlmConfig::new(0.9, false, false).unwrap();
        for seed in 0..20 {
            let out = apply_mlm(&inp, &cfg, &v, seed);
            for (i, _) in out.mlm_targets() {
                assert!(!(3..=10).contains(&i));
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_case() -> impl Strategy<Value = (Vec<usize>, Vec<(usize, usize, bool)>, u64)> {
        (1usize..20)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0usize..30, n),
                    prop::collection::vec((0..n, 0..n, any::<bool>()), 0..5),
                    any::<u64>(),
                )
            })
    }

    proptest! {
        #[test]
        fn position_law_and_mlm_exclusions((toks, spans, seed) in arb_case()) {
            let vocab_words: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
            let v = build_vocab(&vocab_words, 1);
            let sentence: Vec<String> = toks.iter().map(|&i| vocab_words[i].clone()).collect();
            let mut spans: Vec<(usize, usize, MarkerKind)> = spans
                .into_iter()
                .map(|(a, b, k)| (a.min(b), a.max(b), if k { MarkerKind::Entity } else { MarkerKind::Relation }))
                .collect();
            spans.sort();
            spans.dedup();
            let inp = assemble_encoder_input(&sentence, &spans, &v).unwrap();

            // text region round-trips
            prop_assert_eq!(v.decode(inp.sentence_ids()), sentence);
            let opens = inp.roles.iter().filter(|r| **r == Role::MarkerOpen).count();
            let closes = inp.roles.iter().filter(|r| **r == Role::MarkerClose).count();
            prop_assert_eq!(opens, closes);
            for p in &inp.pairs {
                prop_assert_eq!(inp.positions[p.open], inp.positions[p.span.0]);
                prop_assert_eq!(inp.positions[p.close], inp.positions[p.span.1]);
                prop_assert!(p.span.0 >= 1 && p.span.1 < inp.text_len() - 1);
            }

            let out = apply_mlm(&inp, &MlmConfig::new(0.5, true, true).unwrap(), &v, seed);
            for i in inp.text_len()..inp.len() {
                prop_assert_eq!(out.ids[i], inp.ids[i]);
            }
            prop_assert_eq!(out.ids[0], CLS);
            prop_assert_eq!(out.ids[inp.text_len() - 1], SEP);
            for (i, label) in out.mlm_targets() {
                prop_assert!(inp.roles[i] == Role::Text);
                prop_assert_eq!(label, inp.ids[i]);
            }
        }

        #[test]
        fn loss_mask_false_exactly_on_prompts(rel in 1usize..4, tail in 1usize..4, extra in 0usize..3) {
            let r: Vec<String> = (0..rel).map(|i| format!("r{i}")).collect();
            let t: Vec<String> = (0..tail).map(|i| format!("t{i}")).collect();
            let mut all = r.clone();
            all.extend(t.clone());
            let v = build_vocab_with_prompts(&all, 1, 3 + extra);
            let target = flatten_fact(&r, &t, &v).unwrap();
            for (slot, m) in target.slots().iter().zip(target.loss_mask()) {
                prop_assert_eq!(matches!(slot, Slot::SoftPrompt(_)), !*m);
            }
            prop_assert_eq!(target.num_scored(), rel + tail);
        }
    }
}
