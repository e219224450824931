//! Anything that assigns a log-likelihood to a candidate output string given
//! an input string.

use std::collections::HashMap;

use crate::error::Result;

pub mod remote;
pub mod teacher;
mod vocab;

pub use remote::{serve, serve_tcp, ExternalScorer};
pub use teacher::{train_teacher, TeacherDims, TeacherReport, TeacherTrainConfig, ToyTeacher};
pub use vocab::Vocab;

/// Log-likelihood of `candidate` given `input`.
///
/// Implementations must be pure: equal arguments give equal results.
pub trait Scorer: Send + Sync {
    fn score(&self, input: &str, candidate: &str) -> Result<f64>;

    /// Elementwise equal to calling [`Scorer::score`] on each candidate.
    fn score_batch(&self, input: &str, candidates: &[String]) -> Result<Vec<f64>> {
        candidates.iter().map(|c| self.score(input, c)).collect()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, input: &str, candidate: &str) -> Result<f64> {
        (**self).score(input, candidate)
    }

    fn score_batch(&self, input: &str, candidates: &[String]) -> Result<Vec<f64>> {
        (**self).score_batch(input, candidates)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score(&self, input: &str, candidate: &str) -> Result<f64> {
        (**self).score(input, candidate)
    }

    fn score_batch(&self, input: &str, candidates: &[String]) -> Result<Vec<f64>> {
        (**self).score_batch(input, candidates)
    }
}

/// Lookup table with a fallback for misses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableScorer {
    pub entries: HashMap<(String, String), f64>,
    pub default_score: f64,
}

impl TableScorer {
    pub fn new(default_score: f64) -> Self {
        TableScorer {
            entries: HashMap::new(),
            default_score,
        }
    }

    pub fn insert(&mut self, input: impl Into<String>, candidate: impl Into<String>, score: f64) {
        self.entries.insert((input.into(), candidate.into()), score);
    }

    pub fn with(mut self, input: impl Into<String>, candidate: impl Into<String>, score: f64) -> Self {
        self.insert(input, candidate, score);
        self
    }
}

impl Scorer for TableScorer {
    fn score(&self, input: &str, candidate: &str) -> Result<f64> {
        Ok(self
            .entries
            .get(&(input.to_string(), candidate.to_string()))
            .copied()
            .unwrap_or(self.default_score))
    }
}

/// Wraps a pure closure as a scorer.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&str, &str) -> f64 + Send + Sync,
{
    fn score(&self, input: &str, candidate: &str) -> Result<f64> {
        Ok((self.0)(input, candidate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_hit_and_miss() {
        let t = TableScorer::new(-7.0).with("in", "cand", -1.5);
        assert_eq!(t.score("in", "cand").unwrap(), -1.5);
        assert_eq!(t.score("in", "other").unwrap(), -7.0);
    }

    #[test]
    fn batch_matches_pointwise() {
        let t = TableScorer::new(0.0).with("x", "a", 1.0).with("x", "b", f64::NEG_INFINITY);
        let cands: Vec<String> = ["a", "b", "c", "a"].iter().map(|s| s.to_string()).collect();
        let batch = t.score_batch("x", &cands).unwrap();
        let single: Vec<f64> = cands.iter().map(|c| t.score("x", c).unwrap()).collect();
        assert_eq!(batch, single);
        assert_eq!(t.score_batch("x", &cands[..1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn closures_and_references_score() {
        let f = FnScorer(|i: &str, c: &str| -((i.len() + c.len()) as f64));
        assert_eq!(f.score("ab", "c").unwrap(), -3.0);
        let boxed: Box<dyn Scorer> = Box::new(f);
        assert_eq!((&boxed).score("", "").unwrap(), 0.0);
    }
}
