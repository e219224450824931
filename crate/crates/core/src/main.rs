use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sentscore::corpus::{
    dedup, generate_synthetic, load_conll, load_tokens, save_conll, stats, Dataset, DatasetSplit, SplitName,
    SyntheticConfig, DEFAULT_DEDUP_PRIORITY,
};
use sentscore::decoder::{sentscore_beam, BeamConfig};
use sentscore::distill::{
    evaluate_student, generate_silver, read_silver, train_student, write_silver, DistillConfig, Student, StudentConfig,
};
use sentscore::harness::{reference_stats, run_experiment, write_report, ExperimentConfig};
use sentscore::metrics::{evaluate_tags, EvalReport};
use sentscore::sbio::{SentinelScheme, TagSet};
use sentscore::scorer::{train_teacher, ExternalScorer, Scorer, TeacherTrainConfig, ToyTeacher};
use sentscore::{Error, Result};

#[derive(Parser)]
#[command(name = "sentscore", version, about = "Sentinel-format tagging, constrained beam search and distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read CoNLL train/dev/test files, optionally deduplicate, and write them with statistics.
    Ingest(IngestArgs),
    /// Generate the synthetic corpus as CoNLL files.
    Synth(SynthArgs),
    /// Train the toy encoder-decoder teacher on gold data.
    TrainTeacher(TrainTeacherArgs),
    /// Top-K constrained decoding with a teacher or an external scorer.
    Decode(DecodeArgs),
    /// Label sentences with the teacher and keep its score rows.
    Silver(SilverArgs),
    /// Train the BiLSTM student on gold plus optional silver data.
    Distill(DistillArgs),
    /// Span micro-F1 and Perfect of a model or of a prediction file.
    Eval(EvalArgs),
    /// Run the full gold/silver/λ_KL grid.
    Experiment(ExperimentArgs),
    /// Render tables and a plot CSV from an experiment directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Keep each duplicate only in its highest-priority split (test, dev, train).
    #[arg(long)]
    dedup: bool,
    /// Compare statistics with a known public dataset (atis, snips, movie, ...).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic-corpus config; flags below are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    dev: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    tags: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// JSON teacher training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "<extra_id_{k}>")]
    pattern: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScorerArgs {
    /// Directory of a trained teacher.
    #[arg(long, conflicts_with = "scorer")]
    teacher: Option<PathBuf>,
    /// External scorer: `tcp://host:port` or `exec:program args`.
    #[arg(long)]
    scorer: Option<String>,
    /// Comma-separated label set, required with --scorer.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, default_value = "<extra_id_{k}>")]
    pattern: String,
    /// Seconds to wait for an external scorer reply.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    /// CoNLL file, or raw text with one sentence per line when --raw is set.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Switch off the sBIO constraint (ablation only).
    #[arg(long)]
    unconstrained: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SilverArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Student and distillation settings read by `distill`.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DistillFile {
    student: StudentConfig,
    distill: DistillConfig,
}

#[derive(Args)]
struct DistillArgs {
    /// Gold CoNLL training file.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Silver JSONL written by `silver`.
    #[arg(long)]
    silver: Option<PathBuf>,
    /// JSON with optional `student` and `distill` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold CoNLL file.
    #[arg(long)]
    gold: PathBuf,
    /// Student directory.
    #[arg(long, conflicts_with_all = ["teacher", "pred"])]
    student: Option<PathBuf>,
    /// Teacher directory, decoded with K = --k.
    #[arg(long, conflicts_with = "pred")]
    teacher: Option<PathBuf>,
    /// Predicted CoNLL file aligned with --gold.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Write the report JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace the seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directory.
    #[arg(long)]
    dir: PathBuf,
    /// Defaults to the experiment directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io_at(path, e))?))
}

fn read_input(path: &Path, raw: bool) -> Result<DatasetSplit> {
    if raw {
        load_tokens(path, SplitName::Test)
    } else {
        load_conll(path, SplitName::Test)
    }
}

fn write_dataset(data: &Dataset, out: &Path) -> Result<()> {
    create_dir(out)?;
    for name in SplitName::ALL {
        save_conll(data.split(name), out.join(format!("{}.conll", name.as_str())))?;
    }
    write_json(&out.join("stats.json"), &stats(data))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut data = Dataset::new(
        load_conll(&a.train, SplitName::Train)?,
        load_conll(&a.dev, SplitName::Dev)?,
        load_conll(&a.test, SplitName::Test)?,
    )?;
    if a.dedup {
        data = dedup(&data, &DEFAULT_DEDUP_PRIORITY)?;
    }
    write_dataset(&data, &a.out)?;
    let s = stats(&data);
    let mut summary = serde_json::json!({ "stats": s });
    if let Some(name) = &a.name {
        let reference = reference_stats(name).ok_or_else(|| Error::Config(format!("unknown dataset name {name}")))?;
        summary["reference"] = serde_json::to_value(&reference)?;
        summary["matches_reference"] = (reference == s).into();
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::new(a.seed, a.train, a.dev, a.test, a.tags),
    };
    let data = generate_synthetic(&cfg)?;
    write_dataset(&data, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&stats(&data))?);
    Ok(())
}

fn train_teacher_cmd(a: TrainTeacherArgs) -> Result<()> {
    let mut cfg: TeacherTrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TeacherTrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let train = load_conll(&a.train, SplitName::Train)?;
    let dev = load_conll(&a.dev, SplitName::Dev)?;
    let tag_set = TagSet::from_tags(train.tags().chain(dev.tags()))?;
    let scheme = SentinelScheme::new(&a.pattern)?;
    let (teacher, report) = train_teacher(&train.sentences, &dev.sentences, &tag_set, &scheme, &cfg)?;
    teacher.save(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    println!("best dev F1 {:.2} at epoch {}", 100.0 * report.best_dev_f1, report.best_epoch);
    Ok(())
}

enum AnyScorer {
    Teacher(ToyTeacher),
    External(ExternalScorer),
}

impl AnyScorer {
    fn as_scorer(&self) -> &dyn Scorer {
        match self {
            AnyScorer::Teacher(t) => t,
            AnyScorer::External(e) => e,
        }
    }
}

fn open_scorer(a: &ScorerArgs) -> Result<(AnyScorer, TagSet, SentinelScheme)> {
    match (&a.teacher, &a.scorer) {
        (Some(dir), None) => {
            let t = ToyTeacher::load(dir)?;
            let (tags, scheme) = (t.tag_set().clone(), t.scheme().clone());
            Ok((AnyScorer::Teacher(t), tags, scheme))
        }
        (None, Some(endpoint)) => {
            let labels = a
                .labels
                .as_deref()
                .ok_or_else(|| Error::Config("--labels is required with --scorer".into()))?;
            let tags = TagSet::new(labels.split(',').map(str::trim).filter(|s| !s.is_empty()))?;
            let ext = ExternalScorer::open(endpoint, Duration::from_secs(a.timeout))?;
            Ok((AnyScorer::External(ext), tags, SentinelScheme::new(&a.pattern)?))
        }
        _ => Err(Error::Config("give exactly one of --teacher or --scorer".into())),
    }
}

#[derive(Serialize)]
struct Hypothesis {
    tags: Vec<String>,
    score: Option<f64>,
    output: String,
}

#[derive(Serialize)]
struct DecodeLine {
    id: String,
    tokens: Vec<String>,
    hypotheses: Vec<Hypothesis>,
}

fn decode(a: DecodeArgs) -> Result<()> {
    let (scorer, tags, scheme) = open_scorer(&a.scorer)?;
    let input = read_input(&a.input, a.raw)?;
    let config = BeamConfig {
        k: a.k,
        constrain_sbio: !a.unconstrained,
        scheme,
        ..BeamConfig::default()
    };
    let mut w = create(&a.out)?;
    for s in &input.sentences {
        let r = sentscore_beam(scorer.as_scorer(), &s.tokens, &tags, &config)?;
        let hypotheses = r
            .sequences
            .iter()
            .zip(&r.final_scores)
            .zip(&r.outputs)
            .map(|((seq, &score), out)| Hypothesis {
                tags: seq.iter().map(|t| t.as_str().to_string()).collect(),
                score: score.is_finite().then_some(score),
                output: out.clone(),
            })
            .collect();
        let line = DecodeLine {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            hypotheses,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn silver(a: SilverArgs) -> Result<()> {
    let (scorer, tags, scheme) = open_scorer(&a.scorer)?;
    let input = read_input(&a.input, a.raw)?;
    let config = BeamConfig {
        k: a.k,
        scheme,
        ..BeamConfig::default()
    };
    let silver = generate_silver(scorer.as_scorer(), &input.sentences, &tags, &config)?;
    write_silver(&silver, &tags, create(&a.out)?)?;
    eprintln!("labelled {} sentences", silver.len());
    Ok(())
}

fn distill(a: DistillArgs) -> Result<()> {
    let mut cfg: DistillFile = match &a.config {
        Some(p) => read_json(p)?,
        None => DistillFile::default(),
    };
    if let Some(l) = a.lambda_kl {
        cfg.distill.lambda_kl = l;
    }
    if let Some(s) = a.seed {
        cfg.student.seed = s;
    }
    let train = load_conll(&a.train, SplitName::Train)?;
    let dev = load_conll(&a.dev, SplitName::Dev)?;
    let tag_set = TagSet::from_tags(train.tags().chain(dev.tags()))?;
    let silver = match &a.silver {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Error::io_at(p, e))?;
            read_silver(BufReader::new(f), &tag_set)?
        }
        None => Vec::new(),
    };
    let (student, report) = train_student(&train.sentences, &silver, &dev.sentences, &tag_set, &cfg.student, &cfg.distill)?;
    student.save(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    println!("best dev F1 {:.2} at epoch {}", 100.0 * report.best_dev_f1, report.best_epoch);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let gold = load_conll(&a.gold, SplitName::Test)?;
    let report: EvalReport = if let Some(dir) = &a.student {
        evaluate_student(&Student::load(dir)?, &gold.sentences)?
    } else if let Some(dir) = &a.teacher {
        let t = ToyTeacher::load(dir)?;
        let config = BeamConfig {
            k: a.k,
            scheme: t.scheme().clone(),
            ..BeamConfig::default()
        };
        let mut preds = Vec::with_capacity(gold.len());
        for s in &gold.sentences {
            preds.push(sentscore_beam(&t, &s.tokens, t.tag_set(), &config)?.sequences.swap_remove(0));
        }
        let mut items = Vec::new();
        for (s, p) in gold.sentences.iter().zip(&preds) {
            items.push((s.id.as_str(), s.require_tags()?, p.as_slice()));
        }
        evaluate_tags(items)?
    } else if let Some(p) = &a.pred {
        let pred = load_conll(p, SplitName::Test)?;
        if pred.len() != gold.len() {
            return Err(Error::Validation(format!(
                "{} has {} sentences, gold has {}",
                p.display(),
                pred.len(),
                gold.len()
            )));
        }
        let mut items = Vec::new();
        for (g, p) in gold.sentences.iter().zip(&pred.sentences) {
            items.push((g.id.as_str(), g.require_tags()?, p.require_tags()?));
        }
        evaluate_tags(items)?
    } else {
        return Err(Error::Config("give one of --student, --teacher or --pred".into()));
    };
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    eprint!("{}", report.render_table());
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: set out_dir or pass --out".into()))?;
    let result = run_experiment(&cfg, a.jobs, Some(&out))?;
    for r in &result.records {
        println!(
            "{:<24} F1 {:6.2} ± {:5.2}  Perfect {:6.2} ± {:5.2}",
            r.cell.file_stem(),
            100.0 * r.mean_f1,
            100.0 * r.std_f1,
            100.0 * r.mean_perfect,
            100.0 * r.std_perfect
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.dir.clone());
    print!("{}", write_report(&a.dir, &out)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Decode(a) => decode(a),
        Command::Silver(a) => silver(a),
        Command::Distill(a) => distill(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
