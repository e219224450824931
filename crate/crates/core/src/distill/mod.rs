//! Silver data from a scorer, the pseudo-label plus KL objective, and the
//! student training loop.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::decoder::{
    prefix_masks, read_records, sentscore_beam, step_distribution, write_records, BeamConfig, DecodeRecord,
};
use crate::error::{Error, Result};
use crate::nn::loss::{kl_rows, weighted_nll};
use crate::nn::tensor::log_softmax;
use crate::nn::{Tape, Tensor, Var};
use crate::sbio::{validate_sbio, SbioTag, TagSet};
use crate::scorer::Scorer;

mod student;
mod train;

pub use student::{load_embeddings, masked_argmax, raw_argmax, Student, StudentConfig, StudentDims, StudentOutput};
pub use train::{evaluate_student, train_student, TrainReport};

pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda_kl: f64,
    /// Temperature applied to the teacher's score rows.
    pub tau: f64,
    /// Also divide the student logits by `tau` inside the KL term.
    pub temper_student: bool,
    /// Multiply the KL term by `tau²`.
    pub tau_squared: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_kl: 1.0,
            tau: DEFAULT_TAU,
            temper_student: false,
            tau_squared: false,
        }
    }
}

impl DistillConfig {
    pub fn with_lambda(lambda_kl: f64) -> Self {
        DistillConfig {
            lambda_kl,
            ..DistillConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0) || !self.lambda_kl.is_finite() {
            return Err(Error::Config(format!("lambda_kl must be finite and >= 0, got {}", self.lambda_kl)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        Ok(())
    }

    fn kl_factor(&self) -> f64 {
        if self.tau_squared {
            self.lambda_kl * self.tau * self.tau
        } else {
            self.lambda_kl
        }
    }
}

/// A teacher-labelled sentence: pseudo-tags and the score rows behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct SilverExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<SbioTag>,
    /// One row of cumulative log-likelihoods over the tag set per position.
    pub rows: Vec<Vec<f64>>,
}

impl SilverExample {
    pub fn tag_indices(&self, tag_set: &TagSet) -> Result<Vec<usize>> {
        tag_set.indices_of(&self.tags)
    }

    /// Temperature-softmaxed rows under the masks implied by the pseudo-tags.
    pub fn targets(&self, tag_set: &TagSet, tau: f64) -> Result<Vec<Vec<f64>>> {
        let idx = self.tag_indices(tag_set)?;
        prefix_masks(&idx, tag_set)
            .iter()
            .zip(&self.rows)
            .map(|(m, r)| step_distribution(r, Some(m), tau))
            .collect()
    }

    pub fn to_record(&self, tag_set: &TagSet) -> DecodeRecord {
        DecodeRecord::new(self.id.clone(), &self.tokens, &self.tags, &self.rows, tag_set)
    }

    pub fn from_record(rec: &DecodeRecord, tag_set: &TagSet) -> Result<Self> {
        if rec.tag_order != tag_set.tag_strings() {
            return Err(Error::Validation(format!(
                "record {} was written for tag order {:?}, expected {:?}",
                rec.id,
                rec.tag_order,
                tag_set.tag_strings()
            )));
        }
        let tags = rec.sbio_tags();
        let bad_shape = tags.len() != rec.tokens.len()
            || rec.scores.len() != rec.tokens.len()
            || rec.scores.iter().any(|r| r.len() != tag_set.full_len());
        if bad_shape || rec.tokens.is_empty() {
            return Err(Error::Validation(format!("record {} has inconsistent lengths", rec.id)));
        }
        validate_sbio(&tags).map_err(|e| Error::Validation(format!("record {}: {e}", rec.id)))?;
        tag_set.indices_of(&tags)?;
        Ok(SilverExample {
            id: rec.id.clone(),
            tokens: rec.tokens.clone(),
            tags,
            rows: rec.matrix(),
        })
    }
}

fn with_sentence(e: Error, id: &str) -> Error {
    match e {
        Error::Transport(m) => Error::Transport(format!("sentence {id}: {m}")),
        Error::Protocol(m) => Error::Protocol(format!("sentence {id}: {m}")),
        Error::Validation(m) => Error::Validation(format!("sentence {id}: {m}")),
        Error::Contract(m) => Error::Contract(format!("sentence {id}: {m}")),
        other => other,
    }
}

/// Decodes every sentence and keeps the top hypothesis with its score rows.
/// `K = 1` is the usual setting.
pub fn generate_silver<S: Scorer + ?Sized>(
    teacher: &S,
    sentences: &[Sentence],
    tag_set: &TagSet,
    config: &BeamConfig,
) -> Result<Vec<SilverExample>> {
    sentences
        .iter()
        .map(|s| {
            let mut r = sentscore_beam(teacher, &s.tokens, tag_set, config).map_err(|e| with_sentence(e, &s.id))?;
            Ok(SilverExample {
                id: s.id.clone(),
                tokens: s.tokens.clone(),
                tags: r.sequences.swap_remove(0),
                rows: r.score_matrices.swap_remove(0),
            })
        })
        .collect()
}

pub fn write_silver<W: Write>(silver: &[SilverExample], tag_set: &TagSet, w: W) -> Result<()> {
    let records: Vec<DecodeRecord> = silver.iter().map(|s| s.to_record(tag_set)).collect();
    write_records(&records, w)
}

pub fn read_silver<R: BufRead>(r: R, tag_set: &TagSet) -> Result<Vec<SilverExample>> {
    read_records(r)?
        .iter()
        .map(|rec| SilverExample::from_record(rec, tag_set))
        .collect()
}

/// Σ_i −log q_i[y_i] + λ · KL(p_i ‖ q_i). `p` may be omitted only when λ = 0.
pub fn pseudo_label_kl_loss(
    pseudo: &[usize],
    p_star: Option<&[Vec<f64>]>,
    q: &[Vec<f64>],
    lambda_kl: f64,
) -> Result<f64> {
    if pseudo.len() != q.len() {
        return Err(Error::Contract(format!("{} labels for {} student rows", pseudo.len(), q.len())));
    }
    let mut total = 0.0;
    for (i, (&y, qi)) in pseudo.iter().zip(q).enumerate() {
        let qy = *qi
            .get(y)
            .ok_or_else(|| Error::Contract(format!("label index {y} out of range at position {i}")))?;
        total -= qy.ln();
    }
    if lambda_kl != 0.0 {
        let p = p_star.ok_or_else(|| {
            Error::Contract("the KL term needs teacher distributions but none were given".into())
        })?;
        if p.len() != q.len() {
            return Err(Error::Contract(format!("{} teacher rows for {} student rows", p.len(), q.len())));
        }
        for (pi, qi) in p.iter().zip(q) {
            total += lambda_kl * crate::nn::loss::kl_divergence(pi, qi)?;
        }
    }
    Ok(total)
}

/// What one training sentence is supervised with.
#[derive(Clone, Debug, PartialEq)]
pub enum Supervision {
    Gold(Vec<usize>),
    Silver {
        pseudo: Vec<usize>,
        /// Teacher score rows `u*`; `None` when only hard labels are kept.
        rows: Option<Vec<Vec<f64>>>,
    },
}

/// Per-sentence loss from student logits.
pub fn distill_loss(
    sup: &Supervision,
    logits: &[Vec<f64>],
    tag_set: &TagSet,
    config: &DistillConfig,
) -> Result<f64> {
    config.validate()?;
    let q: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r).into_iter().map(f64::exp).collect()).collect();
    match sup {
        Supervision::Gold(y) => pseudo_label_kl_loss(y, None, &q, 0.0),
        Supervision::Silver { pseudo, rows } => {
            let ce = pseudo_label_kl_loss(pseudo, None, &q, 0.0)?;
            if config.lambda_kl == 0.0 {
                return Ok(ce);
            }
            let rows = rows.as_ref().ok_or_else(|| {
                Error::Contract("silver example without teacher scores and lambda_kl > 0".into())
            })?;
            let p = rows_to_targets(pseudo, rows, tag_set, config.tau)?;
            let q_kl: Vec<Vec<f64>> = if config.temper_student {
                logits
                    .iter()
                    .map(|r| {
                        let scaled: Vec<f64> = r.iter().map(|x| x / config.tau).collect();
                        log_softmax(&scaled).into_iter().map(f64::exp).collect()
                    })
                    .collect()
            } else {
                q
            };
            let mut kl = 0.0;
            for (pi, qi) in p.iter().zip(&q_kl) {
                kl += crate::nn::loss::kl_divergence(pi, qi)?;
            }
            Ok(ce + config.kl_factor() * kl)
        }
    }
}

fn rows_to_targets(pseudo: &[usize], rows: &[Vec<f64>], tag_set: &TagSet, tau: f64) -> Result<Vec<Vec<f64>>> {
    if rows.len() != pseudo.len() {
        return Err(Error::Contract(format!("{} score rows for {} labels", rows.len(), pseudo.len())));
    }
    prefix_masks(pseudo, tag_set)
        .iter()
        .zip(rows)
        .map(|(m, r)| step_distribution(r, Some(m), tau))
        .collect()
}

/// Supervision turned into dense per-row targets for the tape loss.
#[derive(Clone, Debug)]
pub(crate) struct DenseTargets {
    pub onehot: Tensor,
    pub teacher: Option<Tensor>,
}

pub(crate) fn dense_targets(
    sups: &[&Supervision],
    tag_set: &TagSet,
    config: &DistillConfig,
) -> Result<DenseTargets> {
    let width = tag_set.full_len();
    let rows: usize = sups
        .iter()
        .map(|s| match s {
            Supervision::Gold(y) => y.len(),
            Supervision::Silver { pseudo, .. } => pseudo.len(),
        })
        .sum();
    let mut onehot = Tensor::zeros(rows, width);
    let mut teacher = Tensor::zeros(rows, width);
    let mut any_teacher = false;
    let mut r = 0;
    for s in sups {
        let (labels, p) = match s {
            Supervision::Gold(y) => (y, None),
            Supervision::Silver { pseudo, rows } => {
                let p = if config.lambda_kl != 0.0 {
                    let rows = rows.as_ref().ok_or_else(|| {
                        Error::Contract("silver example without teacher scores and lambda_kl > 0".into())
                    })?;
                    Some(rows_to_targets(pseudo, rows, tag_set, config.tau)?)
                } else {
                    None
                };
                (pseudo, p)
            }
        };
        for (i, &y) in labels.iter().enumerate() {
            if y >= width {
                return Err(Error::Contract(format!("label index {y} out of range")));
            }
            onehot.data_mut()[(r + i) * width + y] = 1.0;
            if let Some(p) = &p {
                teacher.data_mut()[(r + i) * width..(r + i + 1) * width].copy_from_slice(&p[i]);
                any_teacher = true;
            }
        }
        r += labels.len();
    }
    Ok(DenseTargets {
        onehot,
        teacher: any_teacher.then_some(teacher),
    })
}

/// Summed loss over the rows of `logits` on the tape, not yet averaged.
pub(crate) fn tape_loss(tape: &mut Tape<'_>, logits: Var, targets: &DenseTargets, config: &DistillConfig) -> Result<Var> {
    let log_q = tape.log_softmax_rows(logits);
    let ce = weighted_nll(tape, log_q, &targets.onehot)?;
    let Some(p) = &targets.teacher else {
        return Ok(ce);
    };
    let log_q_kl = if config.temper_student {
        let scaled = tape.scale(logits, 1.0 / config.tau);
        tape.log_softmax_rows(scaled)
    } else {
        log_q
    };
    let kl = kl_rows(tape, log_q_kl, p)?;
    let kl = tape.scale(kl, config.kl_factor());
    tape.add(ce, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::TableScorer;

    #[test]
    fn two_tag_fixture() {
        let loss = pseudo_label_kl_loss(&[0], Some(&[vec![0.8, 0.2]]), &[vec![0.6, 0.4]], 1.0).unwrap();
        let expected = -(0.6f64).ln() + 0.8 * (0.8f64 / 0.6).ln() + 0.2 * (0.2f64 / 0.4).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.6023).abs() < 1e-4);
        assert!(matches!(
            pseudo_label_kl_loss(&[0], None, &[vec![0.6, 0.4]], 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn q_equal_p_leaves_only_cross_entropy() {
        let p = vec![vec![0.7, 0.2, 0.1]];
        let loss = pseudo_label_kl_loss(&[0], Some(&p), &p, 3.0).unwrap();
        assert!((loss + (0.7f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn silver_loss_through_logits_matches_the_tape() {
        let tags = TagSet::new(["A"]).unwrap();
        let sup = Supervision::Silver {
            pseudo: vec![0, 1, 2],
            rows: Some(vec![
                vec![-1.0, f64::NEG_INFINITY, -3.0],
                vec![-4.0, -2.0, -2.5],
                vec![-6.0, -5.0, -4.0],
            ]),
        };
        let logits = vec![vec![0.3, -0.2, 0.1], vec![1.0, 2.0, -1.0], vec![0.0, 0.5, 0.7]];
        for cfg in [
            DistillConfig::with_lambda(0.0),
            DistillConfig::with_lambda(1.0),
            DistillConfig {
                temper_student: true,
                tau_squared: true,
                ..DistillConfig::default()
            },
        ] {
            let direct = distill_loss(&sup, &logits, &tags, &cfg).unwrap();
            let targets = dense_targets(&[&sup], &tags, &cfg).unwrap();
            let mut tape = Tape::new();
            let flat: Vec<f64> = logits.concat();
            let l = tape.variable(Tensor::new(3, 3, flat).unwrap());
            let v = tape_loss(&mut tape, l, &targets, &cfg).unwrap();
            assert!((tape.value(v).item() - direct).abs() < 1e-12, "{cfg:?}");
        }
        let gold = Supervision::Gold(vec![0, 1, 2]);
        let ce = distill_loss(&gold, &logits, &tags, &DistillConfig::default()).unwrap();
        let silver0 = distill_loss(&sup, &logits, &tags, &DistillConfig::with_lambda(0.0)).unwrap();
        assert_eq!(ce, silver0);
        let no_rows = Supervision::Silver { pseudo: vec![0, 1, 2], rows: None };
        assert!(distill_loss(&no_rows, &logits, &tags, &DistillConfig::default()).is_err());
    }

    #[test]
    fn silver_generation_and_cache_round_trip() {
        let tags = TagSet::new(["A"]).unwrap();
        let input = "<extra_id_0> x <extra_id_1> y <extra_id_2>";
        let table = TableScorer::new(-5.0)
            .with(input, "<extra_id_0> A <extra_id_1>", -1.0)
            .with(input, "<extra_id_0> A <extra_id_1> I <extra_id_2>", -1.5);
        let s = Sentence::new("s0", vec!["x".into(), "y".into()], None).unwrap();
        let silver = generate_silver(&table, &[s], &tags, &BeamConfig::default()).unwrap();
        assert_eq!(silver[0].tags, vec![SbioTag::label("A"), SbioTag::Inside]);
        for (row, t) in silver[0].rows.iter().zip(silver[0].tag_indices(&tags).unwrap()) {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[t], best);
            assert_eq!(row.iter().position(|&x| x == best), Some(t));
        }
        let p = silver[0].targets(&tags, 10.0).unwrap();
        assert_eq!(p[0][1], 0.0);
        let mut buf = Vec::new();
        write_silver(&silver, &tags, &mut buf).unwrap();
        assert_eq!(read_silver(&buf[..], &tags).unwrap(), silver);
        let other = TagSet::new(["B"]).unwrap();
        assert!(read_silver(&buf[..], &other).is_err());
    }
}
