//! Sentence/dataset model, CoNLL ingestion, and a distant-supervision
//! simulator.
//!
//! The simulator builds a clean synthetic corpus with known gold spans and a
//! surface-form dictionary, then [`distant_annotate`] re-labels the corpus by
//! dictionary lookup alone. Limiting the dictionary's coverage produces
//! incomplete labels; mistyping a fraction of its entries produces inaccurate
//! ones. [`noise_report`] quantifies both against the gold spans.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the "O" tag in every [`TagVocab`].
pub const O_TAG: usize = 0;

/// What a tag index means structurally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    Outside,
    /// `B-` tag carrying the entity type id.
    Begin(usize),
    /// `I-` tag carrying the entity type id.
    Inside(usize),
}

/// BIO tag vocabulary: `"O"` at index 0, then `B-X`/`I-X` pairs in entity
/// type order. Indices are a pure function of the ordered type list, so a
/// vocabulary round-trips through serialization to identical indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocab {
    entity_types: Vec<String>,
}

impl TagVocab {
    pub fn new<S: AsRef<str>>(entity_types: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in entity_types {
            let t = t.as_ref();
            if t.is_empty() {
                return Err(Error::Schema("empty entity type name".into()));
            }
            if t == "O" || t.contains('-') || t.contains(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid entity type name {t:?}")));
            }
            if !seen.insert(t.to_string()) {
                return Err(Error::Schema(format!("duplicate entity type {t:?}")));
            }
        }
        Ok(TagVocab {
            entity_types: entity_types.iter().map(|s| s.as_ref().to_string()).collect(),
        })
    }

    /// Number of tags: `1 + 2 * entity type count`.
    pub fn len(&self) -> usize {
        1 + 2 * self.entity_types.len()
    }

    pub fn is_empty(&self) -> bool {
        false // "O" is always present
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn kind(&self, tag: usize) -> TagKind {
        if tag == O_TAG {
            TagKind::Outside
        } else if (tag - 1) % 2 == 0 {
            TagKind::Begin((tag - 1) / 2)
        } else {
            TagKind::Inside((tag - 1) / 2)
        }
    }

    pub fn begin(&self, type_id: usize) -> usize {
        1 + 2 * type_id
    }

    pub fn inside(&self, type_id: usize) -> usize {
        2 + 2 * type_id
    }

    pub fn type_name(&self, type_id: usize) -> &str {
        &self.entity_types[type_id]
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    /// Renders a tag index as its string form (`"O"`, `"B-X"`, `"I-X"`).
    pub fn tag_string(&self, tag: usize) -> String {
        match self.kind(tag) {
            TagKind::Outside => "O".to_string(),
            TagKind::Begin(t) => format!("B-{}", self.entity_types[t]),
            TagKind::Inside(t) => format!("I-{}", self.entity_types[t]),
        }
    }

    /// Parses a tag string; `Err` if it is not `"O"`, `"B-X"` or `"I-X"`
    /// for a known type `X`.
    pub fn parse_tag(&self, s: &str) -> Result<usize> {
        if s == "O" {
            return Ok(O_TAG);
        }
        let (prefix, ty) = s
            .split_once('-')
            .ok_or_else(|| Error::Schema(format!("tag {s:?} does not match O/B-X/I-X")))?;
        let type_id = self
            .type_id(ty)
            .ok_or_else(|| Error::Schema(format!("unknown entity type in tag {s:?}")))?;
        match prefix {
            "B" => Ok(self.begin(type_id)),
            "I" => Ok(self.inside(type_id)),
            _ => Err(Error::Schema(format!("tag {s:?} does not match O/B-X/I-X"))),
        }
    }
}

/// Splits a raw tag string into its structural parts without resolving the
/// type against a vocabulary. Used while the vocabulary is still being built.
fn split_tag(s: &str) -> Result<Option<&str>> {
    if s == "O" {
        return Ok(None);
    }
    match s.split_once('-') {
        Some(("B", ty)) | Some(("I", ty)) if !ty.is_empty() => Ok(Some(ty)),
        _ => Err(Error::Schema(format!("tag {s:?} does not match O/B-X/I-X"))),
    }
}

/// A tokenized sentence with one tag index per token. `gold_tags`, when
/// present, carries the reference annotation separately from the (possibly
/// distant or pseudo) working tags so the two can never be confused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_tags: Option<Vec<usize>>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, tags: Vec<usize>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Alignment(format!(
                "sentence has {} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Sentence {
            tokens,
            tags,
            gold_tags: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// An immutable collection of sentences sharing one tag vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub vocab: TagVocab,
    pub split: Split,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, vocab: TagVocab, split: Split) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = vocab.len();
        for s in &sentences {
            if s.tokens.len() != s.tags.len() {
                return Err(Error::Alignment("token/tag length mismatch".into()));
            }
            for &t in s.tags.iter().chain(s.gold_tags.iter().flatten()) {
                if t >= k {
                    return Err(Error::Schema(format!("tag index {t} out of range for vocab")));
                }
            }
        }
        Ok(Dataset {
            sentences,
            vocab,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Serializes to line-delimited JSON: one object per sentence with fixed
    /// field names `tokens`, `tags` and (when present) `gold_tags`; tags are
    /// written as strings.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let rec = JsonlSentence {
                tokens: s.tokens.clone(),
                tags: s.tags.iter().map(|&t| self.vocab.tag_string(t)).collect(),
                gold_tags: s
                    .gold_tags
                    .as_ref()
                    .map(|g| g.iter().map(|&t| self.vocab.tag_string(t)).collect()),
            };
            out.push_str(&serde_json::to_string(&rec).expect("jsonl record"));
            out.push('\n');
        }
        out
    }

    /// Parses the line-delimited JSON form. When `vocab` is given, tags are
    /// resolved against it (unknown tags are schema errors); otherwise a
    /// vocabulary is built from the types present, sorted by name.
    pub fn from_jsonl(text: &str, vocab: Option<&TagVocab>, split: Split) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlSentence = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let vocab = match vocab {
            Some(v) => v.clone(),
            None => {
                let mut types = BTreeSet::new();
                for r in &records {
                    for tag in r.tags.iter().chain(r.gold_tags.iter().flatten()) {
                        if let Some(ty) = split_tag(tag)? {
                            types.insert(ty.to_string());
                        }
                    }
                }
                TagVocab::new(&types.into_iter().collect::<Vec<_>>())?
            }
        };
        let mut sentences = Vec::with_capacity(records.len());
        for r in records {
            let tags = r
                .tags
                .iter()
                .map(|t| vocab.parse_tag(t))
                .collect::<Result<Vec<_>>>()?;
            let gold_tags = r
                .gold_tags
                .map(|g| g.iter().map(|t| vocab.parse_tag(t)).collect::<Result<Vec<_>>>())
                .transpose()?;
            let mut s = Sentence::new(r.tokens, tags)?;
            s.gold_tags = gold_tags;
            sentences.push(s);
        }
        Dataset::new(sentences, vocab, split)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlSentence {
    tokens: Vec<String>,
    tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_tags: Option<Vec<String>>,
}

/// Repairs BIO violations in place: an `I-X` that does not continue a `B-X`
/// or `I-X` of the same type becomes `B-X`. Idempotent.
pub fn repair_bio(tags: &mut [usize], vocab: &TagVocab) {
    let mut prev_type: Option<usize> = None;
    for j in 0..tags.len() {
        match vocab.kind(tags[j]) {
            TagKind::Outside => prev_type = None,
            TagKind::Begin(t) => prev_type = Some(t),
            TagKind::Inside(t) => {
                if prev_type != Some(t) {
                    tags[j] = vocab.begin(t);
                }
                prev_type = Some(t);
            }
        }
    }
}

/// Parses two-column CoNLL text (token, whitespace, tag; blank line between
/// sentences) into a dataset with a vocabulary built from the tags present.
/// Tag sequences are BIO-repaired on the way in.
pub fn parse_conll(text: &str) -> Result<Dataset> {
    // First pass: validate line shapes and collect entity types.
    let mut types = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        if let Some(ty) = split_tag(fields[1]).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("line {}: {m}", i + 1)),
            other => other,
        })? {
            types.insert(ty.to_string());
        }
    }
    let vocab = TagVocab::new(&types.into_iter().collect::<Vec<_>>())?;

    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<usize> = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<usize>| -> Result<()> {
        if !tokens.is_empty() {
            repair_bio(tags, &vocab);
            sentences.push(Sentence::new(std::mem::take(tokens), std::mem::take(tags))?);
        }
        Ok(())
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap();
        let tag = fields.next().unwrap();
        tokens.push(token.to_string());
        tags.push(vocab.parse_tag(tag)?);
    }
    flush(&mut tokens, &mut tags)?;
    Dataset::new(sentences, vocab, Split::Train)
}

/// Maps token strings to dense indices, with a reserved unknown-token slot
/// at index 0 for anything unseen at build time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub const UNK: usize = 0;

    /// Builds from the distinct tokens of a dataset, sorted for determinism.
    pub fn build(dataset: &Dataset) -> Self {
        let distinct: BTreeSet<&str> = dataset
            .sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
            .collect();
        let mut tokens = Vec::with_capacity(distinct.len() + 1);
        tokens.push("<unk>".to_string());
        tokens.extend(distinct.into_iter().filter(|t| *t != "<unk>").map(String::from));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Surface-form dictionary for distant annotation: lowercased token n-grams
/// mapped to an entity type name. Longer entries win over shorter ones;
/// matching scans left to right.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dictionary {
    entries: BTreeMap<String, String>,
}

impl Dictionary {
    pub fn new() -> Self {
        Dictionary::default()
    }

    /// Inserts a surface form (tokens joined by single spaces, lowercased).
    pub fn insert(&mut self, surface: &str, entity_type: &str) -> Result<()> {
        let key = normalize_surface(surface);
        if key.is_empty() {
            return Err(Error::Input("empty dictionary surface form".into()));
        }
        self.entries.insert(key, entity_type.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn get(&self, surface: &str) -> Option<&str> {
        self.entries.get(&normalize_surface(surface)).map(String::as_str)
    }

    fn max_ngram_len(&self) -> usize {
        self.entries
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(0)
    }
}

fn normalize_surface(surface: &str) -> String {
    surface
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Re-labels a clean dataset purely by dictionary lookup. The output tags
/// come from longest-match, leftmost-first n-gram matching; unmatched tokens
/// are `"O"`. Gold tags are carried into `gold_tags` and never read by the
/// matcher.
pub fn distant_annotate(clean: &Dataset, dict: &Dictionary) -> Result<Dataset> {
    for ty in dict.entries.values() {
        if clean.vocab.type_id(ty).is_none() {
            return Err(Error::Schema(format!(
                "dictionary type {ty:?} not present in dataset vocab"
            )));
        }
    }
    let max_len = dict.max_ngram_len();
    let mut sentences = Vec::with_capacity(clean.sentences.len());
    for s in &clean.sentences {
        let lowered: Vec<String> = s.tokens.iter().map(|t| t.to_lowercase()).collect();
        let n = lowered.len();
        let mut tags = vec![O_TAG; n];
        let mut i = 0;
        while i < n {
            let mut matched = 0;
            let mut matched_type = 0;
            let upper = max_len.min(n - i);
            for len in (1..=upper).rev() {
                let key = lowered[i..i + len].join(" ");
                if let Some(ty) = dict.entries.get(&key) {
                    matched = len;
                    matched_type = clean.vocab.type_id(ty).expect("validated above");
                    break;
                }
            }
            if matched > 0 {
                tags[i] = clean.vocab.begin(matched_type);
                for t in tags.iter_mut().take(i + matched).skip(i + 1) {
                    *t = clean.vocab.inside(matched_type);
                }
                i += matched;
            } else {
                i += 1;
            }
        }
        let mut out = Sentence::new(s.tokens.clone(), tags)?;
        out.gold_tags = Some(s.gold_tags.clone().unwrap_or_else(|| s.tags.clone()));
        sentences.push(out);
    }
    Dataset::new(sentences, clean.vocab.clone(), clean.split)
}

/// Span-level quality of a noisy labeling against the clean reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// Fraction of noisy spans that exactly match a gold span.
    pub label_precision: f64,
    /// Fraction of gold spans recovered exactly.
    pub label_recall: f64,
    /// Noisy spans whose boundaries match a gold span but whose type differs.
    pub confusion_count: usize,
    pub noisy_spans: usize,
    pub gold_spans: usize,
    /// True when a precision or recall denominator was zero and the value
    /// was reported as 0 instead of NaN.
    pub zero_denominator: bool,
}

/// (start, end, type_id) spans of a tag sequence; local BIO walk independent
/// of the metrics module so the two can cross-check each other.
fn tag_spans(tags: &[usize], vocab: &TagVocab) -> Vec<(usize, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (start, type)
    for (j, &tag) in tags.iter().enumerate() {
        match vocab.kind(tag) {
            TagKind::Outside => {
                if let Some((s, t)) = open.take() {
                    spans.push((s, j, t));
                }
            }
            TagKind::Begin(t) => {
                if let Some((s, pt)) = open.take() {
                    spans.push((s, j, pt));
                }
                open = Some((j, t));
            }
            TagKind::Inside(t) => match open {
                Some((_, pt)) if pt == t => {}
                _ => {
                    // Stray I- behaves like B- (same repair rule as decoding).
                    if let Some((s, pt)) = open.take() {
                        spans.push((s, j, pt));
                    }
                    open = Some((j, t));
                }
            },
        }
    }
    if let Some((s, t)) = open {
        spans.push((s, tags.len(), t));
    }
    spans
}

/// Compares a noisy dataset against its clean source span-by-span. The
/// datasets must be token-aligned. Gold spans come from the clean tags
/// (or the clean `gold_tags` when present).
pub fn noise_report(clean: &Dataset, noisy: &Dataset) -> Result<NoiseReport> {
    if clean.sentences.len() != noisy.sentences.len() {
        return Err(Error::Alignment(format!(
            "clean has {} sentences, noisy has {}",
            clean.sentences.len(),
            noisy.sentences.len()
        )));
    }
    if clean.vocab != noisy.vocab {
        return Err(Error::Alignment("tag vocabularies differ".into()));
    }
    let mut matched = 0usize;
    let mut confusion = 0usize;
    let mut noisy_total = 0usize;
    let mut gold_total = 0usize;
    for (c, n) in clean.sentences.iter().zip(&noisy.sentences) {
        if c.tokens != n.tokens {
            return Err(Error::Alignment("token sequences differ".into()));
        }
        let gold_tags = c.gold_tags.as_ref().unwrap_or(&c.tags);
        let gold: Vec<_> = tag_spans(gold_tags, &clean.vocab);
        let noisy_spans: Vec<_> = tag_spans(&n.tags, &noisy.vocab);
        let gold_set: HashSet<_> = gold.iter().copied().collect();
        let gold_bounds: HashSet<_> = gold.iter().map(|&(s, e, _)| (s, e)).collect();
        for sp in &noisy_spans {
            if gold_set.contains(sp) {
                matched += 1;
            } else if gold_bounds.contains(&(sp.0, sp.1)) {
                confusion += 1;
            }
        }
        noisy_total += noisy_spans.len();
        gold_total += gold.len();
    }
    let zero_denominator = noisy_total == 0 || gold_total == 0;
    Ok(NoiseReport {
        label_precision: if noisy_total == 0 {
            0.0
        } else {
            matched as f64 / noisy_total as f64
        },
        label_recall: if gold_total == 0 {
            0.0
        } else {
            matched as f64 / gold_total as f64
        },
        confusion_count: confusion,
        noisy_spans: noisy_total,
        gold_spans: gold_total,
        zero_denominator,
    })
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    /// Number of entity types.
    pub entity_types: usize,
    /// Distinct gold surface forms per type.
    pub surfaces_per_type: usize,
    /// Mention-initial words per type. Small pools mean heavy sharing of
    /// words across surface forms, which is what makes partially covered
    /// surfaces recoverable by generalization.
    pub head_words_per_type: usize,
    /// Mention-continuation words per type.
    pub tail_words_per_type: usize,
    /// Distinct filler (non-entity) words.
    pub context_vocab_size: usize,
    /// Mention length is drawn uniformly from min..=max.
    pub min_entity_len: usize,
    pub max_entity_len: usize,
    /// Context token count is drawn uniformly from this range.
    pub min_context_len: usize,
    pub max_context_len: usize,
    /// Mentions per sentence are drawn uniformly from 1..=max.
    pub max_mentions_per_sentence: usize,
    /// Type-revealing context words per entity type (tagged "O"; placed
    /// before a mention with probability `cue_prob`). They are what makes
    /// uncovered mentions recoverable from context.
    pub cue_words_per_type: usize,
    /// Probability that a mention is preceded by a cue word of its type.
    pub cue_prob: f64,
    /// Fraction of head words shared between two types' pools, creating
    /// surface forms whose type is only decidable from context.
    pub shared_head_fraction: f64,
    /// Fraction of each type's head words that are polysemous: they also
    /// occur as plain context tokens (gold "O"), so mention-hood is only
    /// decidable from the surrounding window.
    pub polyseme_fraction: f64,
    /// Per context slot, the probability of drawing a polysemous head word
    /// instead of a filler word.
    pub polyseme_rate: f64,
    /// Fraction of gold surface forms present in the dictionary.
    pub dict_coverage: f64,
    /// Fraction of dictionary entries assigned a wrong type.
    pub dict_confusion: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_sentences: 2000,
            dev_sentences: 400,
            test_sentences: 400,
            entity_types: 4,
            surfaces_per_type: 160,
            head_words_per_type: 8,
            tail_words_per_type: 6,
            context_vocab_size: 120,
            min_entity_len: 2,
            max_entity_len: 3,
            min_context_len: 6,
            max_context_len: 14,
            max_mentions_per_sentence: 2,
            cue_words_per_type: 6,
            cue_prob: 0.7,
            shared_head_fraction: 0.0,
            polyseme_fraction: 0.5,
            polyseme_rate: 0.1,
            dict_coverage: 0.6,
            dict_confusion: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dict_coverage) {
            return Err(Error::config("dict_coverage", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dict_confusion) {
            return Err(Error::config("dict_confusion", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cue_prob) {
            return Err(Error::config("cue_prob", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.shared_head_fraction) {
            return Err(Error::config("shared_head_fraction", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.polyseme_fraction) {
            return Err(Error::config("polyseme_fraction", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.polyseme_rate) {
            return Err(Error::config("polyseme_rate", "must be in [0, 1]"));
        }
        for (field, v) in [
            ("train_sentences", self.train_sentences),
            ("dev_sentences", self.dev_sentences),
            ("test_sentences", self.test_sentences),
            ("entity_types", self.entity_types),
            ("surfaces_per_type", self.surfaces_per_type),
            ("head_words_per_type", self.head_words_per_type),
            ("tail_words_per_type", self.tail_words_per_type),
            ("context_vocab_size", self.context_vocab_size),
            ("min_entity_len", self.min_entity_len),
            ("max_entity_len", self.max_entity_len),
            ("max_mentions_per_sentence", self.max_mentions_per_sentence),
            ("min_context_len", self.min_context_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.max_context_len < self.min_context_len {
            return Err(Error::config("max_context_len", "must be >= min_context_len"));
        }
        if self.max_entity_len < self.min_entity_len {
            return Err(Error::config("max_entity_len", "must be >= min_entity_len"));
        }
        // Surfaces are deduplicated draws from the pools; leave headroom so
        // generation terminates.
        let mut combos = 0usize;
        for len in self.min_entity_len..=self.max_entity_len {
            combos = combos.saturating_add(
                self.head_words_per_type
                    .saturating_mul(self.tail_words_per_type.saturating_pow(len as u32 - 1)),
            );
        }
        if self.surfaces_per_type * 2 > combos {
            return Err(Error::config(
                "surfaces_per_type",
                format!(
                    "needs at most half the {combos} distinct head/tail combinations; grow the word pools"
                ),
            ));
        }
        if self.entity_types < 2 && self.dict_confusion > 0.0 {
            return Err(Error::config(
                "dict_confusion",
                "needs at least 2 entity types to assign a wrong one",
            ));
        }
        Ok(())
    }
}

/// Output of [`synth_corpus`]: three clean gold-tagged splits plus the
/// (possibly incomplete and confused) dictionary.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub dictionary: Dictionary,
}

const TYPE_NAME_POOL: [&str; 10] = [
    "PER", "LOC", "ORG", "MISC", "GPE", "EVT", "PROD", "FAC", "LANG", "NORP",
];

const SYLLABLES: [&str; 24] = [
    "ba", "re", "mo", "ka", "li", "zu", "ta", "ne", "vo", "shi", "gar", "del", "on", "pra", "mi",
    "ke", "sol", "ur", "fen", "da", "lo", "wen", "tri", "hus",
];

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>()
}

fn gen_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Generates a deterministic synthetic corpus. Entity mentions are composed
/// from per-type head/tail word pools (so distinct surface forms share
/// tokens) and inserted into filler-token streams with at least one filler
/// token between mentions; every gold surface form is guaranteed to occur in
/// the train split.
pub fn synth_corpus(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut type_names: Vec<String> = (0..config.entity_types)
        .map(|i| {
            TYPE_NAME_POOL
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("T{i}"))
        })
        .collect();
    // Sorted so indices survive a serialization round trip (the loader
    // rebuilds vocabularies with sorted type names).
    type_names.sort();
    let vocab = TagVocab::new(&type_names)?;

    let mut used_words = HashSet::new();
    let context: Vec<String> = (0..config.context_vocab_size)
        .map(|_| gen_word(&mut rng, &mut used_words))
        .collect();

    // Head words start a mention, tail words continue it; sharing pools
    // across surfaces of a type is what makes uncovered surfaces learnable
    // from covered ones. Cue words are per-type context vocabulary.
    let mut heads: Vec<Vec<String>> = Vec::new();
    let mut tails = Vec::new();
    let mut cues = Vec::new();
    for _ in 0..config.entity_types {
        heads.push(
            (0..config.head_words_per_type)
                .map(|_| gen_word(&mut rng, &mut used_words))
                .collect::<Vec<_>>(),
        );
        tails.push(
            (0..config.tail_words_per_type)
                .map(|_| gen_word(&mut rng, &mut used_words))
                .collect::<Vec<_>>(),
        );
        cues.push(
            (0..config.cue_words_per_type)
                .map(|_| gen_word(&mut rng, &mut used_words))
                .collect::<Vec<_>>(),
        );
    }
    // Cross-type head sharing: each type borrows a fraction of the next
    // type's head words, so those words are typable only from context.
    if config.entity_types >= 2 {
        let shared = ((config.shared_head_fraction * config.head_words_per_type as f64).round()
            as usize)
            .min(config.head_words_per_type);
        for ty in 0..config.entity_types {
            let from = (ty + 1) % config.entity_types;
            for i in 0..shared {
                let borrowed = heads[from][i].clone();
                heads[ty].push(borrowed);
            }
        }
    }

    // Surface forms, unique across all types.
    let mut surface_set = HashSet::new();
    let mut surfaces: Vec<(usize, Vec<String>)> = Vec::new();
    for ty in 0..config.entity_types {
        let mut made = 0;
        while made < config.surfaces_per_type {
            let len = rng.gen_range(config.min_entity_len..=config.max_entity_len);
            let mut toks = vec![heads[ty][rng.gen_range(0..heads[ty].len())].clone()];
            for _ in 1..len {
                toks.push(tails[ty][rng.gen_range(0..tails[ty].len())].clone());
            }
            if surface_set.insert(toks.join(" ")) {
                surfaces.push((ty, toks));
                made += 1;
            }
        }
    }

    // Dictionary: a covered fraction of surfaces, a confused fraction of
    // those entries mistyped.
    let n_surfaces = surfaces.len();
    let covered = ((config.dict_coverage * n_surfaces as f64).round() as usize).min(n_surfaces);
    let mut order: Vec<usize> = (0..n_surfaces).collect();
    shuffle(&mut order, &mut rng);
    let covered_ids: Vec<usize> = order[..covered].to_vec();
    let confused = ((config.dict_confusion * covered as f64).round() as usize).min(covered);
    let mut dictionary = Dictionary::new();
    for (rank, &sid) in covered_ids.iter().enumerate() {
        let (ty, toks) = &surfaces[sid];
        let assigned = if rank < confused {
            // Deterministically pick a different type.
            let offset = rng.gen_range(1..config.entity_types);
            (ty + offset) % config.entity_types
        } else {
            *ty
        };
        dictionary.insert(&toks.join(" "), &type_names[assigned])?;
    }

    // Polysemous heads double as ordinary context vocabulary.
    let mut polysemes: Vec<String> = Vec::new();
    for head_pool in &heads {
        let n_poly = ((config.polyseme_fraction * config.head_words_per_type as f64).round()
            as usize)
            .min(config.head_words_per_type);
        polysemes.extend(head_pool.iter().take(n_poly).cloned());
    }

    let mut seen_sentences: HashSet<Vec<String>> = HashSet::new();
    let make_split = |count: usize,
                          split: Split,
                          guarantee_all: bool,
                          rng: &mut ChaCha8Rng,
                          seen: &mut HashSet<Vec<String>>|
     -> Result<Dataset> {
        let mut sentences = Vec::with_capacity(count);
        for i in 0..count {
            // Mentions for this sentence. The train split walks every
            // surface round-robin so each one occurs at least once.
            let mut mention_ids: Vec<usize> = Vec::new();
            if guarantee_all {
                let mut j = i;
                while j < n_surfaces {
                    mention_ids.push(j);
                    j += count;
                }
                if mention_ids.is_empty() {
                    mention_ids.push(rng.gen_range(0..n_surfaces));
                }
            }
            let extra = rng.gen_range(1..=config.max_mentions_per_sentence);
            while mention_ids.len() < extra.max(mention_ids.len().max(1)) {
                mention_ids.push(rng.gen_range(0..n_surfaces));
            }

            let mut attempt = 0usize;
            let (tokens, tags) = loop {
                let ctx_len = rng.gen_range(config.min_context_len..=config.max_context_len) + attempt;
                let mut tokens: Vec<String> = (0..ctx_len)
                    .map(|_| {
                        if !polysemes.is_empty() && uniform(rng) < config.polyseme_rate {
                            polysemes[rng.gen_range(0..polysemes.len())].clone()
                        } else {
                            context[rng.gen_range(0..context.len())].clone()
                        }
                    })
                    .collect();
                let mut tags = vec![O_TAG; tokens.len()];
                // Insert mentions at distinct filler positions, never
                // adjacent to another mention. A type cue word (tagged "O")
                // precedes the mention with probability cue_prob.
                for &sid in &mention_ids {
                    let (ty, toks) = &surfaces[sid];
                    let pos = pick_insertion(&tags, &vocab, rng);
                    let Some(mut pos) = pos else { break };
                    if uniform(rng) < config.cue_prob {
                        let cue = cues[*ty][rng.gen_range(0..cues[*ty].len())].clone();
                        tokens.insert(pos, cue);
                        tags.insert(pos, O_TAG);
                        pos += 1;
                    }
                    for (k, t) in toks.iter().enumerate() {
                        tokens.insert(pos + k, t.clone());
                        tags.insert(
                            pos + k,
                            if k == 0 { vocab.begin(*ty) } else { vocab.inside(*ty) },
                        );
                    }
                }
                if seen.insert(tokens.clone()) {
                    break (tokens, tags);
                }
                attempt += 1;
            };
            let mut s = Sentence::new(tokens, tags)?;
            s.gold_tags = Some(s.tags.clone());
            sentences.push(s);
        }
        Dataset::new(sentences, vocab.clone(), split)
    };

    let train = make_split(config.train_sentences, Split::Train, true, &mut rng, &mut seen_sentences)?;
    let dev = make_split(config.dev_sentences, Split::Dev, false, &mut rng, &mut seen_sentences)?;
    let test = make_split(config.test_sentences, Split::Test, false, &mut rng, &mut seen_sentences)?;

    Ok(SynthCorpus {
        train,
        dev,
        test,
        dictionary,
    })
}

/// Picks a position where a mention can be inserted so that it touches only
/// filler tokens (keeps mentions non-adjacent, which keeps longest-match
/// annotation exact for a perfect dictionary).
fn pick_insertion(tags: &[usize], _vocab: &TagVocab, rng: &mut ChaCha8Rng) -> Option<usize> {
    let n = tags.len();
    let ok = |p: usize| -> bool {
        let before_o = p == 0 || tags[p - 1] == O_TAG;
        let after_o = p >= n || tags[p] == O_TAG;
        before_o && after_o
    };
    let candidates: Vec<usize> = (0..=n).filter(|&p| ok(p)).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.gen_range(0..candidates.len())])
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Deterministic per-epoch permutation of `0..n`, derived from the data seed
/// and an epoch tag so different consumers can replay identical batch orders.
pub fn epoch_permutation(data_seed: u64, epoch_tag: u64, n: usize) -> Vec<usize> {
    let mixed = crate::experiment::mix_seed(data_seed, &format!("epoch/{epoch_tag}"));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    order
}

// Exposed for the ensemble module's seeded unit draws.
pub(crate) fn unit_draw(rng: &mut ChaCha8Rng) -> f64 {
    uniform(rng)
}
