use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{derive_seed, Cell, ExperimentConfig, RunRecord, SeedRun, TeacherSummary};
use crate::corpus::{downsample, Sentence};
use crate::decoder::{sentscore_beam, BeamConfig};
use crate::distill::{evaluate_student, generate_silver, train_student, write_silver, SilverExample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_tags, EvalReport};
use crate::sbio::{SentinelScheme, TagSet};
use crate::scorer::{train_teacher, ToyTeacher};

/// A trained teacher with the silver pool it labelled.
#[derive(Debug)]
pub struct TeacherRun {
    pub summary: TeacherSummary,
    pub teacher: ToyTeacher,
    pub silver: Vec<SilverExample>,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub fingerprint: String,
    pub teachers: Vec<TeacherRun>,
    /// One per cell, ordered by gold split, silver size, then λ_KL as listed in the config.
    pub records: Vec<RunRecord>,
}

/// Applies `f` to every item on up to `jobs` threads; results keep item order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

/// Splits `items` into contiguous chunks, one per job, each handled by its
/// own copy of the teacher so the per-input score cache is not shared.
fn with_teacher_chunks<T, R, F>(teacher: &ToyTeacher, items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&ToyTeacher, &[T]) -> Result<Vec<R>> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let size = items.len().div_ceil(jobs.max(1));
    let chunks: Vec<&[T]> = items.chunks(size).collect();
    let out = parallel_map(&chunks, jobs, |chunk| f(&teacher.clone(), chunk))?;
    Ok(out.into_iter().flatten().collect())
}

fn teacher_test_report(teacher: &ToyTeacher, test: &[Sentence], beam: &BeamConfig, jobs: usize) -> Result<EvalReport> {
    let preds = with_teacher_chunks(teacher, test, jobs, |t, chunk| {
        chunk
            .iter()
            .map(|s| Ok(sentscore_beam(t, &s.tokens, t.tag_set(), beam)?.sequences.swap_remove(0)))
            .collect()
    })?;
    let mut items = Vec::with_capacity(test.len());
    for (s, p) in test.iter().zip(&preds) {
        items.push((s.id.as_str(), s.require_tags()?, p.as_slice()));
    }
    evaluate_tags(items)
}

/// Pool positions in the order a master seed draws them; silver sets of
/// increasing size are prefixes of this order.
fn silver_order(pool: &[Sentence], silver_seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| pool[a].id.cmp(&pool[b].id));
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(silver_seed));
    idx
}

struct GoldSplit {
    gold_train: usize,
    gold_dev: usize,
    train: Vec<Sentence>,
    dev: Vec<Sentence>,
    /// Silver examples by pool position, decoded only where some seed needs them.
    silver: HashMap<usize, SilverExample>,
    orders: Vec<Vec<usize>>,
    counts: Vec<usize>,
}

struct Task<'a> {
    split: &'a GoldSplit,
    cell: Cell,
    seed_pos: usize,
    seed: u64,
}

/// Runs the whole grid: per gold split a teacher trained on the gold part,
/// silver labels for the remainder, and one student per (silver size, λ_KL, seed).
///
/// `jobs` bounds the worker threads. When `out_dir` is given the resolved
/// config, teachers, silver files and RunRecords are written there.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    config.validate()?;
    let data = config.load_dataset()?;
    config.validate_against(&data)?;
    let fingerprint = config.fingerprint();
    let tag_set: &TagSet = &data.tag_set;
    let scheme = SentinelScheme::new(&config.sentinel_pattern)?;
    let beam = BeamConfig {
        k: config.beam_k,
        scheme: scheme.clone(),
        ..BeamConfig::default()
    };

    let mut splits = Vec::new();
    let mut teachers = Vec::new();
    for &(t, d) in &config.gold_splits {
        let (gold_train, pool) = downsample(&data.train, t, derive_seed(config.split_seed, "gold-train"))?;
        let (gold_dev, _) = downsample(&data.dev, d, derive_seed(config.split_seed, "gold-dev"))?;
        let (teacher, training) =
            train_teacher(&gold_train.sentences, &gold_dev.sentences, tag_set, &scheme, &config.teacher)?;

        let pool = pool.sentences;
        let counts: Vec<usize> = config
            .silver_sizes
            .iter()
            .map(|s| s.resolve(pool.len()))
            .collect::<Result<_>>()?;
        let widest = counts.iter().copied().max().unwrap_or(0);
        let orders: Vec<Vec<usize>> = config
            .seeds
            .iter()
            .map(|&s| silver_order(&pool, derive_seed(s, "silver")))
            .collect();
        let needed: BTreeSet<usize> = orders.iter().flat_map(|o| o[..widest].iter().copied()).collect();
        let needed: Vec<usize> = needed.into_iter().collect();
        let to_decode: Vec<Sentence> = needed.iter().map(|&i| pool[i].clone()).collect();
        let decoded = with_teacher_chunks(&teacher, &to_decode, jobs, |t, chunk| {
            generate_silver(t, chunk, tag_set, &beam)
        })?;
        let test = teacher_test_report(&teacher, &data.test.sentences, &beam, jobs)?;

        let summary = TeacherSummary {
            config_fingerprint: fingerprint.clone(),
            gold_train: t,
            gold_dev: d,
            training,
            test,
            silver_decoded: decoded.len(),
        };
        splits.push(GoldSplit {
            gold_train: t,
            gold_dev: d,
            train: gold_train.sentences,
            dev: gold_dev.sentences,
            silver: needed.iter().copied().zip(decoded.iter().cloned()).collect(),
            orders,
            counts,
        });
        teachers.push(TeacherRun {
            summary,
            teacher,
            silver: decoded,
        });
    }

    let mut tasks = Vec::new();
    for split in &splits {
        for (size, &count) in config.silver_sizes.iter().zip(&split.counts) {
            for &lambda_kl in &config.lambda_kl {
                let cell = Cell {
                    gold_train: split.gold_train,
                    gold_dev: split.gold_dev,
                    silver: *size,
                    silver_count: count,
                    lambda_kl,
                };
                for (seed_pos, &seed) in config.seeds.iter().enumerate() {
                    tasks.push(Task {
                        split,
                        cell: cell.clone(),
                        seed_pos,
                        seed,
                    });
                }
            }
        }
    }

    let runs = parallel_map(&tasks, jobs, |task| {
        let split = task.split;
        let silver: Vec<SilverExample> = split.orders[task.seed_pos][..task.cell.silver_count]
            .iter()
            .map(|i| split.silver[i].clone())
            .collect();
        let student_seed = derive_seed(task.seed, "student");
        let student_cfg = crate::distill::StudentConfig {
            seed: student_seed,
            ..config.student.clone()
        };
        let (student, training) = train_student(
            &split.train,
            &silver,
            &split.dev,
            tag_set,
            &student_cfg,
            &config.distill_config(task.cell.lambda_kl),
        )?;
        Ok(SeedRun {
            seed: task.seed,
            student_seed,
            silver_seed: derive_seed(task.seed, "silver"),
            test: evaluate_student(&student, &data.test.sentences)?,
            training,
        })
    })?;

    let per_cell = config.seeds.len();
    let records: Vec<RunRecord> = tasks
        .chunks(per_cell)
        .zip(runs.chunks(per_cell))
        .map(|(t, r)| RunRecord::new(fingerprint.clone(), t[0].cell.clone(), r.to_vec()))
        .collect();

    let out = ExperimentOutput {
        fingerprint,
        teachers,
        records,
    };
    if let Some(dir) = out_dir {
        write_outputs(config, &out, tag_set, dir)?;
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

fn write_outputs(config: &ExperimentConfig, out: &ExperimentOutput, tag_set: &TagSet, dir: &Path) -> Result<()> {
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir).map_err(|e| Error::io_at(&records_dir, e))?;
    write_json(&dir.join("config.json"), config)?;
    for run in &out.teachers {
        let s = &run.summary;
        let tdir = dir.join(format!("teacher_g{}-{}", s.gold_train, s.gold_dev));
        run.teacher.save(&tdir)?;
        write_json(&tdir.join("summary.json"), s)?;
        let path = dir.join(format!("silver_g{}-{}.jsonl", s.gold_train, s.gold_dev));
        let f = File::create(&path).map_err(|e| Error::io_at(&path, e))?;
        write_silver(&run.silver, tag_set, BufWriter::new(f))?;
    }
    for r in &out.records {
        write_json(&records_dir.join(format!("{}.json", r.cell.file_stem())), r)?;
    }
    Ok(())
}
