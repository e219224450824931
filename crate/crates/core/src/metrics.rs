//! Exact-match span micro-F1 and the sentence-level Perfect score.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sbio::{sbio_to_spans, SbioTag, Span};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpans {
    pub id: String,
    pub spans: Vec<Span>,
}

impl SentenceSpans {
    pub fn from_tags(id: impl Into<String>, tags: &[SbioTag]) -> Result<Self> {
        Ok(SentenceSpans {
            id: id.into(),
            spans: sbio_to_spans(tags)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Counts {
    /// (precision, recall, f1). An empty comparison scores 1 across the board.
    pub fn prf(&self) -> (f64, f64, f64) {
        let (tp, fp, fn_) = (
            self.true_positives as f64,
            self.false_positives as f64,
            self.false_negatives as f64,
        );
        if tp + fp + fn_ == 0.0 {
            return (1.0, 1.0, 1.0);
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }

    fn add(&mut self, other: &Counts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub perfect: f64,
    pub sentences: usize,
    pub per_label: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn counts(&self) -> Counts {
        Counts {
            true_positives: self.true_positives,
            false_positives: self.false_positives,
            false_negatives: self.false_negatives,
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}", "label", "tp", "fp", "fn", "prec", "rec", "f1");
        for (label, c) in &self.per_label {
            let (p, r, f) = c.prf();
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>8.2} {:>8.2} {:>8.2}",
                label,
                c.true_positives,
                c.false_positives,
                c.false_negatives,
                100.0 * p,
                100.0 * r,
                100.0 * f
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            "micro",
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        );
        let _ = writeln!(out, "perfect: {:.2} over {} sentences", 100.0 * self.perfect, self.sentences);
        out
    }
}

/// Pools exact (label, start, end) matches over the corpus.
///
/// `perfect` is the fraction of sentences whose span sets coincide, which
/// for valid sBIO is the same as identical tag sequences.
pub fn micro_f1(gold: &[SentenceSpans], pred: &[SentenceSpans]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    let mut exact = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        if g.id != p.id {
            return Err(Error::Contract(format!(
                "sentence ids out of alignment: {} vs {}",
                g.id, p.id
            )));
        }
        let gset: HashSet<&Span> = g.spans.iter().collect();
        let pset: HashSet<&Span> = p.spans.iter().collect();
        if gset == pset {
            exact += 1;
        }
        for span in &pset {
            let c = per_label.entry(span.label.clone()).or_default();
            if gset.contains(span) {
                c.true_positives += 1;
            } else {
                c.false_positives += 1;
            }
        }
        for span in gset.difference(&pset) {
            per_label.entry(span.label.clone()).or_default().false_negatives += 1;
        }
    }
    let mut total = Counts::default();
    for c in per_label.values() {
        total.add(c);
    }
    let (precision, recall, f1) = total.prf();
    Ok(EvalReport {
        true_positives: total.true_positives,
        false_positives: total.false_positives,
        false_negatives: total.false_negatives,
        precision,
        recall,
        f1,
        perfect: if gold.is_empty() { 1.0 } else { exact as f64 / gold.len() as f64 },
        sentences: gold.len(),
        per_label,
    })
}

/// Fraction of sentences predicted exactly.
pub fn perfect(gold: &[Vec<SbioTag>], pred: &[Vec<SbioTag>]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sequences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut exact = 0;
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "sentence {i}: gold length {} but predicted length {}",
                g.len(),
                p.len()
            )));
        }
        if g == p {
            exact += 1;
        }
    }
    Ok(if gold.is_empty() { 1.0 } else { exact as f64 / gold.len() as f64 })
}

/// Convenience over aligned (id, gold tags, predicted tags) triples.
pub fn evaluate_tags<'a, I>(items: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a str, &'a [SbioTag], &'a [SbioTag])>,
{
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for (id, g, p) in items {
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "sentence {id}: gold length {} but predicted length {}",
                g.len(),
                p.len()
            )));
        }
        gold.push(SentenceSpans::from_tags(id, g)?);
        pred.push(SentenceSpans::from_tags(id, p)?);
    }
    micro_f1(&gold, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ss(id: &str, spans: &[(&str, usize, usize)]) -> SentenceSpans {
        SentenceSpans {
            id: id.into(),
            spans: spans.iter().map(|&(l, s, e)| Span::new(l, s, e)).collect(),
        }
    }

    #[test]
    fn exact_match() {
        let g = [ss("a", &[("TRACK", 1, 1), ("ARTIST", 3, 4)])];
        let r = micro_f1(&g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.perfect), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn boundary_error_fixture() {
        let g = [ss("a", &[("TRACK", 1, 1), ("ARTIST", 3, 4)])];
        let p = [ss("a", &[("TRACK", 1, 1), ("ARTIST", 3, 3)])];
        let r = micro_f1(&g, &p).unwrap();
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives), (1, 1, 1));
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.perfect, 0.0);
        assert_eq!(r.per_label["ARTIST"].false_positives, 1);
    }

    #[test]
    fn degenerate_corpora() {
        let empty = [ss("a", &[]), ss("b", &[])];
        let r = micro_f1(&empty, &empty).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let only_fp = micro_f1(&empty, &[ss("a", &[("X", 0, 0)]), ss("b", &[])]).unwrap();
        assert_eq!((only_fp.precision, only_fp.recall, only_fp.f1), (0.0, 0.0, 0.0));
        let only_fn = micro_f1(&[ss("a", &[("X", 0, 0)]), ss("b", &[])], &empty).unwrap();
        assert_eq!(only_fn.f1, 0.0);
    }

    #[test]
    fn misaligned_ids_are_contract_errors() {
        assert!(micro_f1(&[ss("a", &[])], &[ss("b", &[])]).is_err());
        assert!(micro_f1(&[ss("a", &[])], &[]).is_err());
    }

    #[test]
    fn perfect_counts() {
        let o = || vec![SbioTag::Outside, SbioTag::Outside];
        let gold = vec![o(), o(), o(), o()];
        let mut pred = gold.clone();
        assert_eq!(perfect(&gold, &pred).unwrap(), 1.0);
        pred[2][1] = SbioTag::label("A");
        assert_eq!(perfect(&gold, &pred).unwrap(), 0.75);
        pred[0].pop();
        assert!(perfect(&gold, &pred).is_err());
    }
}
