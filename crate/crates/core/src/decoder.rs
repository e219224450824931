//! Constrained tag-wise beam search over scorer likelihoods.
//!
//! At position `i` every live hypothesis `s_0 t_1 s_1 … t_{i-1} s_{i-1}` is
//! extended by each permitted tag followed by the next sentinel, and each
//! extension is scored as a complete string. The next sentinel closes the
//! step, so every stored row holds comparable full-string likelihoods.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::softmax;
use crate::sbio::{encode_input, valid_next_indices, SbioTag, SentinelScheme, TagSet, Variant};
use crate::scorer::Scorer;

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Order among hypotheses with equal scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Lower canonical tag index first, then lower parent rank.
    #[default]
    TagThenParent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub k: usize,
    /// Mask `I` at the start and after `O`. Off only for ablations.
    pub constrain_sbio: bool,
    pub tie_break: TieBreak,
    pub scheme: SentinelScheme,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            k: 1,
            constrain_sbio: true,
            tie_break: TieBreak::TagThenParent,
            scheme: SentinelScheme::default(),
        }
    }
}

impl BeamConfig {
    pub fn with_k(k: usize) -> Self {
        BeamConfig {
            k,
            ..BeamConfig::default()
        }
    }
}

/// Top hypotheses in descending order of final score.
///
/// `score_matrices[k][i][t]` is the full-string score of the parent of
/// hypothesis `k` at step `i` extended by tag `t`; masked tags hold −∞.
/// The final score of hypothesis `k` is therefore the entry of its last row
/// at its own last tag, which for the top hypothesis is the row maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub sequences: Vec<Vec<SbioTag>>,
    pub indices: Vec<Vec<usize>>,
    pub score_matrices: Vec<Vec<Vec<f64>>>,
    pub final_scores: Vec<f64>,
    pub outputs: Vec<String>,
}

impl DecodeResult {
    pub fn best(&self) -> (&[SbioTag], &[Vec<f64>]) {
        (&self.sequences[0], &self.score_matrices[0])
    }
}

struct Hypothesis {
    tags: Vec<usize>,
    text: String,
    rows: Vec<Vec<f64>>,
    score: f64,
}

fn sanitize(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// Descending score, then ascending tag, then ascending parent rank.
fn rank(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .expect("NaN removed")
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

pub fn sentscore_beam<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[String],
    tag_set: &TagSet,
    config: &BeamConfig,
) -> Result<DecodeResult> {
    if config.k == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let input = encode_input(tokens, &config.scheme, Variant::SentPrime)?;
    let width = tag_set.full_len();
    let tag_strings = tag_set.tag_strings();

    let mut beam = vec![Hypothesis {
        tags: Vec::new(),
        text: config.scheme.sentinel(0),
        rows: Vec::new(),
        score: 0.0,
    }];
    for i in 1..=tokens.len() {
        let sentinel = config.scheme.sentinel(i);
        let mut origin = Vec::new();
        let mut candidates = Vec::new();
        for (parent, h) in beam.iter().enumerate() {
            let mask = if config.constrain_sbio {
                valid_next_indices(&h.tags, tag_set)
            } else {
                vec![true; width]
            };
            for (t, allowed) in mask.into_iter().enumerate() {
                if allowed {
                    origin.push((parent, t));
                    candidates.push(format!("{} {} {}", h.text, tag_strings[t], sentinel));
                }
            }
        }
        let scores = scorer.score_batch(&input, &candidates)?;
        if scores.len() != candidates.len() {
            return Err(Error::Protocol(format!(
                "scorer returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        let scores: Vec<f64> = scores.into_iter().map(sanitize).collect();

        let mut rows = vec![vec![f64::NEG_INFINITY; width]; beam.len()];
        for (&(parent, t), &s) in origin.iter().zip(&scores) {
            rows[parent][t] = s;
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            rank(
                (scores[a], origin[a].1, origin[a].0),
                (scores[b], origin[b].1, origin[b].0),
            )
        });
        order.truncate(config.k);

        let mut candidates: Vec<Option<String>> = candidates.into_iter().map(Some).collect();
        beam = order
            .into_iter()
            .map(|j| {
                let (parent, t) = origin[j];
                let p = &beam[parent];
                let mut tags = p.tags.clone();
                tags.push(t);
                let mut hist = p.rows.clone();
                hist.push(rows[parent].clone());
                Hypothesis {
                    tags,
                    text: candidates[j].take().expect("each candidate used once"),
                    rows: hist,
                    score: scores[j],
                }
            })
            .collect();
    }

    let mut out = DecodeResult {
        sequences: Vec::with_capacity(beam.len()),
        indices: Vec::with_capacity(beam.len()),
        score_matrices: Vec::with_capacity(beam.len()),
        final_scores: Vec::with_capacity(beam.len()),
        outputs: Vec::with_capacity(beam.len()),
    };
    for h in beam {
        out.sequences.push(h.tags.iter().map(|&t| tag_set.tag_at(t)).collect());
        out.indices.push(h.tags);
        out.score_matrices.push(h.rows);
        out.final_scores.push(h.score);
        out.outputs.push(h.text);
    }
    Ok(out)
}

/// Beam search with `K = 1`: the best sequence and its score rows.
pub fn greedy<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[String],
    tag_set: &TagSet,
    scheme: &SentinelScheme,
) -> Result<(Vec<SbioTag>, Vec<Vec<f64>>)> {
    let config = BeamConfig {
        scheme: scheme.clone(),
        ..BeamConfig::default()
    };
    let mut r = sentscore_beam(scorer, tokens, tag_set, &config)?;
    Ok((r.sequences.swap_remove(0), r.score_matrices.swap_remove(0)))
}

/// All valid sBIO index sequences of length `len`, in lexicographic order.
pub fn enumerate_valid(len: usize, tag_set: &TagSet) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::new();
        for prefix in &out {
            for (t, ok) in valid_next_indices(prefix, tag_set).into_iter().enumerate() {
                if ok {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push(p);
                }
            }
        }
        out = next;
    }
    out
}

/// Exact argmax over every valid sequence, scoring full output strings.
///
/// Ties follow the same rule as the beam: among equal final scores the lower
/// last tag wins, then the better-ranked prefix, compared recursively.
pub fn exhaustive_oracle<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[String],
    tag_set: &TagSet,
    scheme: &SentinelScheme,
    cap: u64,
) -> Result<(Vec<SbioTag>, f64)> {
    let width = tag_set.full_len() as u64;
    let total = (0..tokens.len()).try_fold(1u64, |acc, _| acc.checked_mul(width));
    match total {
        Some(n) if n <= cap => {}
        _ => {
            return Err(Error::Size {
                requested: total.map_or(usize::MAX, |n| n as usize),
                available: cap as usize,
            })
        }
    }
    let input = encode_input(tokens, scheme, Variant::SentPrime)?;
    let tag_strings = tag_set.tag_strings();
    let mut memo: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut prefix_score = |seq: &[usize]| -> Result<f64> {
        if let Some(&s) = memo.get(seq) {
            return Ok(s);
        }
        let mut text = scheme.sentinel(0);
        for (i, &t) in seq.iter().enumerate() {
            text.push(' ');
            text.push_str(&tag_strings[t]);
            text.push(' ');
            text.push_str(&scheme.sentinel(i + 1));
        }
        let s = sanitize(scorer.score(&input, &text)?);
        memo.insert(seq.to_vec(), s);
        Ok(s)
    };

    let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
    for seq in enumerate_valid(tokens.len(), tag_set) {
        let scores = (1..=seq.len())
            .map(|j| prefix_score(&seq[..j]))
            .collect::<Result<Vec<f64>>>()?;
        let better = match &best {
            None => true,
            Some((bseq, bscores)) => {
                let mut ord = Ordering::Equal;
                for j in (0..seq.len()).rev() {
                    ord = rank((scores[j], seq[j], 0), (bscores[j], bseq[j], 0));
                    if ord != Ordering::Equal {
                        break;
                    }
                }
                ord == Ordering::Less
            }
        };
        if better {
            best = Some((seq, scores));
        }
    }
    let (seq, scores) = best.expect("at least one valid sequence");
    let last = scores.last().copied().unwrap_or(0.0);
    Ok((seq.into_iter().map(|t| tag_set.tag_at(t)).collect(), last))
}

/// `softmax(row / τ)` over unmasked entries; masked entries get probability 0.
///
/// Entries at −∞ get 0 unless every unmasked entry is −∞, in which case the
/// unmasked entries share the mass evenly.
pub fn step_distribution(row: &[f64], mask: Option<&[bool]>, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if let Some(m) = mask {
        if m.len() != row.len() {
            return Err(Error::Contract(format!(
                "mask has {} entries for a row of {}",
                m.len(),
                row.len()
            )));
        }
    }
    let allowed = |i: usize| mask.map_or(true, |m| m[i]);
    let live: Vec<usize> = (0..row.len()).filter(|&i| allowed(i)).collect();
    if live.is_empty() {
        return Err(Error::Contract("every tag is masked".into()));
    }
    let vals: Vec<f64> = live.iter().map(|&i| sanitize(row[i]) / tau).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; row.len()];
    if max.is_infinite() {
        let winners: Vec<usize> = live
            .iter()
            .zip(&vals)
            .filter(|(_, &v)| v == max)
            .map(|(&i, _)| i)
            .collect();
        for &i in &winners {
            out[i] = 1.0 / winners.len() as f64;
        }
        return Ok(out);
    }
    for (&i, p) in live.iter().zip(softmax(&vals)) {
        out[i] = p;
    }
    Ok(out)
}

/// Masks implied by each prefix of `tags`, one per position.
pub fn prefix_masks(tags: &[usize], tag_set: &TagSet) -> Vec<Vec<bool>> {
    (0..tags.len())
        .map(|i| valid_next_indices(&tags[..i], tag_set))
        .collect()
}

/// One decoded sentence as a JSON line. `null` in `scores` is −∞.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub scores: Vec<Vec<Option<f64>>>,
    pub tag_order: Vec<String>,
}

impl DecodeRecord {
    pub fn new(
        id: impl Into<String>,
        tokens: &[String],
        tags: &[SbioTag],
        matrix: &[Vec<f64>],
        tag_set: &TagSet,
    ) -> Self {
        DecodeRecord {
            id: id.into(),
            tokens: tokens.to_vec(),
            tags: tags.iter().map(|t| t.as_str().to_string()).collect(),
            scores: matrix
                .iter()
                .map(|r| r.iter().map(|&x| x.is_finite().then_some(x)).collect())
                .collect(),
            tag_order: tag_set.tag_strings(),
        }
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.scores
            .iter()
            .map(|r| r.iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
            .collect()
    }

    pub fn sbio_tags(&self) -> Vec<SbioTag> {
        self.tags.iter().map(|t| SbioTag::from_raw(t)).collect()
    }
}

pub fn write_records<W: Write>(records: &[DecodeRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DecodeRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: "<records>".into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
