//! BIO span decoding and entity-level precision/recall/F1.
//!
//! Scoring is exact-match on (start, end, type), micro-averaged over the
//! corpus, with a per-type breakdown. Zero denominators report 0 with an
//! explicit flag instead of NaN.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, TagKind, TagVocab};
use crate::error::{Error, Result};

/// A decoded entity mention: token range `[start, end)` plus its type name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

/// Counts and derived scores for one slice of the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PrfCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl PrfCounts {
    pub fn precision(&self) -> f64 {
        let denom = self.true_positives + self.false_positives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_positives + self.false_negatives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

/// Micro-averaged entity metrics with per-type breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub per_type: BTreeMap<String, PrfCounts>,
    /// Set when the precision denominator (predicted spans) was zero.
    pub precision_zero_denominator: bool,
    /// Set when the recall denominator (gold spans) was zero.
    pub recall_zero_denominator: bool,
}

impl EntityMetrics {
    fn from_counts(counts: PrfCounts, per_type: BTreeMap<String, PrfCounts>) -> Self {
        EntityMetrics {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            true_positives: counts.true_positives,
            false_positives: counts.false_positives,
            false_negatives: counts.false_negatives,
            per_type,
            precision_zero_denominator: counts.true_positives + counts.false_positives == 0,
            recall_zero_denominator: counts.true_positives + counts.false_negatives == 0,
        }
    }

    /// Aligned plain-text table: overall row plus one row per type.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n",
            "type", "P", "R", "F1", "tp", "fp", "fn"
        ));
        out.push_str(&format!(
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}\n",
            "ALL",
            self.precision,
            self.recall,
            self.f1,
            self.true_positives,
            self.false_positives,
            self.false_negatives
        ));
        for (ty, c) in &self.per_type {
            out.push_str(&format!(
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}\n",
                ty,
                c.precision(),
                c.recall(),
                c.f1(),
                c.true_positives,
                c.false_positives,
                c.false_negatives
            ));
        }
        out
    }
}

/// Decodes a BIO tag sequence into maximal spans. A stray `I-` (one that
/// does not continue a same-type span) starts a new span, mirroring the
/// ingestion repair rule.
pub fn decode_spans(tags: &[usize], vocab: &TagVocab) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (start, type_id)
    let close = |open: &mut Option<(usize, usize)>, end: usize, spans: &mut Vec<EntitySpan>| {
        if let Some((start, ty)) = open.take() {
            spans.push(EntitySpan {
                start,
                end,
                entity_type: vocab.type_name(ty).to_string(),
            });
        }
    };
    for (j, &tag) in tags.iter().enumerate() {
        match vocab.kind(tag) {
            TagKind::Outside => close(&mut open, j, &mut spans),
            TagKind::Begin(t) => {
                close(&mut open, j, &mut spans);
                open = Some((j, t));
            }
            TagKind::Inside(t) => match open {
                Some((_, ot)) if ot == t => {}
                _ => {
                    close(&mut open, j, &mut spans);
                    open = Some((j, t));
                }
            },
        }
    }
    close(&mut open, tags.len(), &mut spans);
    spans
}

/// Entity precision/recall/F1 of predicted tag sequences against gold tag
/// sequences, both given per sentence. Sequences must be aligned in count
/// and length.
pub fn entity_prf_tags(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
    vocab: &TagVocab,
) -> Result<EntityMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!(
            "prediction covers {} sentences, gold covers {}",
            pred.len(),
            gold.len()
        )));
    }
    let mut overall = PrfCounts::default();
    let mut per_type: BTreeMap<String, PrfCounts> = vocab
        .entity_types()
        .iter()
        .map(|t| (t.clone(), PrfCounts::default()))
        .collect();
    for (p_tags, g_tags) in pred.iter().zip(gold) {
        if p_tags.len() != g_tags.len() {
            return Err(Error::Input("sentence lengths differ".into()));
        }
        let p_spans = decode_spans(p_tags, vocab);
        let g_spans = decode_spans(g_tags, vocab);
        let gold_set: std::collections::HashSet<&EntitySpan> = g_spans.iter().collect();
        for sp in &p_spans {
            let slot = per_type.get_mut(&sp.entity_type).expect("known type");
            if gold_set.contains(sp) {
                overall.true_positives += 1;
                slot.true_positives += 1;
            } else {
                overall.false_positives += 1;
                slot.false_positives += 1;
            }
        }
        let pred_set: std::collections::HashSet<&EntitySpan> = p_spans.iter().collect();
        for sp in &g_spans {
            if !pred_set.contains(sp) {
                overall.false_negatives += 1;
                per_type.get_mut(&sp.entity_type).expect("known type").false_negatives += 1;
            }
        }
    }
    Ok(EntityMetrics::from_counts(overall, per_type))
}

/// Dataset-level wrapper: checks token alignment, then scores `pred.tags`
/// against `gold.tags`.
pub fn entity_prf(pred: &Dataset, gold: &Dataset) -> Result<EntityMetrics> {
    if pred.vocab != gold.vocab {
        return Err(Error::Input("tag vocabularies differ".into()));
    }
    if pred.sentences.len() != gold.sentences.len() {
        return Err(Error::Input("sentence counts differ".into()));
    }
    for (p, g) in pred.sentences.iter().zip(&gold.sentences) {
        if p.tokens != g.tokens {
            return Err(Error::Input("token sequences differ".into()));
        }
    }
    let pred_tags: Vec<Vec<usize>> = pred.sentences.iter().map(|s| s.tags.clone()).collect();
    let gold_tags: Vec<Vec<usize>> = gold.sentences.iter().map(|s| s.tags.clone()).collect();
    entity_prf_tags(&pred_tags, &gold_tags, &pred.vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> TagVocab {
        TagVocab::new(&["PER", "LOC"]).unwrap()
    }

    // Test-only inverse of decode_spans for the round-trip property.
    fn encode_spans(spans: &[EntitySpan], len: usize, vocab: &TagVocab) -> Vec<usize> {
        let mut tags = vec![crate::corpus::O_TAG; len];
        for sp in spans {
            let ty = vocab.type_id(&sp.entity_type).unwrap();
            tags[sp.start] = vocab.begin(ty);
            for t in tags.iter_mut().take(sp.end).skip(sp.start + 1) {
                *t = vocab.inside(ty);
            }
        }
        tags
    }

    #[test]
    fn decode_canonical_cases() {
        let v = vocab();
        let spans = decode_spans(&[v.begin(0), v.inside(0), 0], &v);
        assert_eq!(
            spans,
            vec![EntitySpan { start: 0, end: 2, entity_type: "PER".into() }]
        );
        assert!(decode_spans(&[0, 0, 0], &v).is_empty());
        // Stray I- of a different type starts a new span.
        let spans = decode_spans(&[v.begin(0), v.inside(1)], &v);
        assert_eq!(
            spans,
            vec![
                EntitySpan { start: 0, end: 1, entity_type: "PER".into() },
                EntitySpan { start: 1, end: 2, entity_type: "LOC".into() },
            ]
        );
    }

    #[test]
    fn prf_identity_and_degenerate() {
        let v = vocab();
        let gold = vec![vec![v.begin(0), v.inside(0), 0]];
        let m = entity_prf_tags(&gold, &gold, &v).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let blank = vec![vec![0, 0, 0]];
        let m = entity_prf_tags(&blank, &gold, &v).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_zero_denominator);
        assert!(!m.recall_zero_denominator);
    }

    #[test]
    fn prf_half_right() {
        let v = vocab();
        // 2 predicted spans, 1 correct; 2 gold spans.
        let gold = vec![vec![v.begin(0), 0, v.begin(1), 0]];
        let pred = vec![vec![v.begin(0), 0, 0, v.begin(1)]];
        let m = entity_prf_tags(&pred, &gold, &v).unwrap();
        assert_eq!(m.true_positives, 1);
        assert_eq!(m.false_positives, 1);
        assert_eq!(m.false_negatives, 1);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn f1_zero_iff_no_true_positives() {
        let v = vocab();
        let gold = vec![vec![v.begin(0)]];
        let pred = vec![vec![v.begin(1)]];
        let m = entity_prf_tags(&pred, &gold, &v).unwrap();
        assert_eq!(m.true_positives, 0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn micro_f1_permutation_invariant() {
        let v = vocab();
        let gold = vec![
            vec![v.begin(0), 0],
            vec![0, v.begin(1)],
            vec![v.begin(1), v.inside(1)],
        ];
        let pred = vec![
            vec![v.begin(0), 0],
            vec![v.begin(0), 0],
            vec![v.begin(1), v.inside(1)],
        ];
        let m1 = entity_prf_tags(&pred, &gold, &v).unwrap();
        let perm = [2usize, 0, 1];
        let pred_p: Vec<_> = perm.iter().map(|&i| pred[i].clone()).collect();
        let gold_p: Vec<_> = perm.iter().map(|&i| gold[i].clone()).collect();
        let m2 = entity_prf_tags(&pred_p, &gold_p, &v).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn table_renders_all_types() {
        let v = vocab();
        let gold = vec![vec![v.begin(0), 0]];
        let m = entity_prf_tags(&gold, &gold, &v).unwrap();
        let table = m.render_table();
        assert!(table.contains("ALL"));
        assert!(table.contains("PER"));
        assert!(table.contains("LOC"));
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(raw in proptest::collection::vec(0usize..5, 1..40)) {
            let v = vocab();
            // Any decode output is a valid non-overlapping span set; encoding
            // it and decoding again must reproduce it exactly.
            let spans = decode_spans(&raw, &v);
            let encoded = encode_spans(&spans, raw.len(), &v);
            prop_assert_eq!(decode_spans(&encoded, &v), spans);
        }
    }
}
