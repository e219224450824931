use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::student::{Student, StudentConfig};
use super::{dense_targets, tape_loss, DistillConfig, SilverExample, Supervision};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_tags, EvalReport};
use crate::nn::{AdamW, AdamWConfig, GradStore, Tape, GRAD_CLIP_NORM};
use crate::sbio::TagSet;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub gold_examples: usize,
    pub silver_examples: usize,
    /// Mean per-sentence training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub dev_f1: Vec<f64>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub updates: u64,
}

/// Span micro-F1 and Perfect of masked predictions on gold-labelled sentences.
pub fn evaluate_student(student: &Student, sentences: &[Sentence]) -> Result<EvalReport> {
    let tokens: Vec<&[String]> = sentences.iter().map(|s| s.tokens.as_slice()).collect();
    let preds = student.predict_many(&tokens, false)?;
    let mut items = Vec::with_capacity(sentences.len());
    for (s, p) in sentences.iter().zip(&preds) {
        items.push((s.id.as_str(), s.require_tags()?, p.as_slice()));
    }
    evaluate_tags(items)
}

/// Trains on the shuffled union of gold (cross-entropy) and silver
/// (cross-entropy on pseudo-labels plus λ·KL to the teacher rows) and keeps
/// the checkpoint with the best dev micro-F1.
pub fn train_student(
    gold: &[Sentence],
    silver: &[SilverExample],
    dev: &[Sentence],
    tag_set: &TagSet,
    config: &StudentConfig,
    distill: &DistillConfig,
) -> Result<(Student, TrainReport)> {
    config.validate()?;
    distill.validate()?;
    if gold.is_empty() {
        return Err(Error::Config("student training needs at least one gold sentence".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("student training needs a non-empty dev set".into()));
    }

    let mut items: Vec<(&[String], Supervision)> = Vec::with_capacity(gold.len() + silver.len());
    for s in gold {
        items.push((&s.tokens, Supervision::Gold(tag_set.indices_of(s.require_tags()?)?)));
    }
    for s in silver {
        let rows = (distill.lambda_kl != 0.0).then(|| s.rows.clone());
        items.push((
            &s.tokens,
            Supervision::Silver {
                pseudo: s.tag_indices(tag_set)?,
                rows,
            },
        ));
    }

    let mut student = Student::new(items.iter().map(|(t, _)| *t), tag_set, config)?;
    let frozen = (config.freeze_pretrained && config.pretrained_embedding_path.is_some())
        .then(|| student.word_embed_id());
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &student.store,
    );
    let mut grads = GradStore::zeros_like(&student.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7374_7564_656e_74);
    let mut report = TrainReport {
        gold_examples: gold.len(),
        silver_examples: silver.len(),
        best_dev_f1: f64::NEG_INFINITY,
        ..TrainReport::default()
    };
    let mut best = student.store.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let tokens: Vec<&[String]> = batch.iter().map(|&i| items[i].0).collect();
            let sups: Vec<&Supervision> = batch.iter().map(|&i| &items[i].1).collect();
            let targets = dense_targets(&sups, tag_set, distill)?;
            grads.zero();
            {
                let mut tape = Tape::with_params(&student.store);
                let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut rng));
                let logits = student.forward_batch(&mut tape, &tokens, dropout)?;
                let loss = tape_loss(&mut tape, logits, &targets, distill)?;
                epoch_loss += tape.value(loss).item();
                let mean = tape.scale(loss, 1.0 / batch.len() as f64);
                tape.backward_into(mean, &mut grads)?;
            }
            grads.clip_global_norm(GRAD_CLIP_NORM);
            let keep = frozen.map(|id| student.store.get(id).clone());
            opt.step(&mut student.store, &grads);
            if let (Some(id), Some(t)) = (frozen, keep) {
                *student.store.get_mut(id) = t;
            }
        }
        report.updates = opt.step_count();
        report.epoch_losses.push(epoch_loss / items.len() as f64);
        if !student.store.all_finite() {
            return Err(Error::Domain(format!("student parameters became non-finite in epoch {epoch}")));
        }

        let f1 = evaluate_student(&student, dev)?.f1;
        report.dev_f1.push(f1);
        if f1 > report.best_dev_f1 {
            report.best_dev_f1 = f1;
            report.best_epoch = epoch;
            best = student.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    student.set_params(best)?;
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};

    fn small_config(seed: u64) -> StudentConfig {
        StudentConfig {
            word_emb_dim: 8,
            char_emb_dim: 4,
            char_bilstm_hidden: 4,
            word_bilstm_hidden: 8,
            epochs: 6,
            patience: 6,
            learning_rate: 1e-2,
            batch_size: 8,
            seed,
            ..StudentConfig::default()
        }
    }

    #[test]
    fn learns_and_is_deterministic() {
        let ds = generate_synthetic(&SyntheticConfig::new(2, 80, 30, 0, 2)).unwrap();
        let cfg = small_config(5);
        let (student, report) = train_student(
            &ds.train.sentences,
            &[],
            &ds.dev.sentences,
            &ds.tag_set,
            &cfg,
            &DistillConfig::with_lambda(0.0),
        )
        .unwrap();
        assert!(report.best_dev_f1 >= report.dev_f1[0]);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        assert!(report.best_dev_f1 > 0.3, "{report:?}");
        let (again, report2) = train_student(
            &ds.train.sentences,
            &[],
            &ds.dev.sentences,
            &ds.tag_set,
            &cfg,
            &DistillConfig::with_lambda(0.0),
        )
        .unwrap();
        assert_eq!(report, report2);
        assert_eq!(again.params().to_bytes(), student.params().to_bytes());
    }

    #[test]
    fn empty_gold_or_dev_is_a_config_error() {
        let ds = generate_synthetic(&SyntheticConfig::new(2, 5, 5, 0, 2)).unwrap();
        let cfg = small_config(0);
        let d = DistillConfig::default();
        assert!(matches!(
            train_student(&[], &[], &ds.dev.sentences, &ds.tag_set, &cfg, &d),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_student(&ds.train.sentences, &[], &[], &ds.tag_set, &cfg, &d),
            Err(Error::Config(_))
        ));
    }
}
