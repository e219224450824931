//! Experiment configuration, seed derivation, the gold/silver/λ grid and
//! report emission.
//!
//! A grid cell is a (gold split, silver size, λ_KL) triple; each cell is
//! trained once per master seed and summarised by one [`RunRecord`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::corpus::{dedup, generate_synthetic, load_conll, Dataset, SplitName, SyntheticConfig, DEFAULT_DEDUP_PRIORITY};
use crate::distill::{StudentConfig, TrainReport, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::scorer::{TeacherReport, TeacherTrainConfig};

mod grid;
mod report;

pub use grid::{run_experiment, ExperimentOutput, TeacherRun};
pub use report::{read_records, render_report, report_csv, write_report};

/// Reference split sizes of the public slot-labelling datasets:
/// (name, tags, train, dev, test).
pub const PUBLIC_DATASET_STATS: [(&str, usize, usize, usize, usize); 7] = [
    ("atis", 83, 4478, 500, 893),
    ("snips", 39, 13084, 700, 700),
    ("movietrivia", 12, 7005, 811, 1953),
    ("movie", 12, 8722, 1053, 2443),
    ("restaurant", 8, 6845, 815, 1521),
    ("mtop", 75, 15667, 2235, 4386),
    ("mtod", 16, 30521, 4181, 8621),
];

pub fn reference_stats(name: &str) -> Option<crate::corpus::DatasetStats> {
    let key = name.to_ascii_lowercase();
    PUBLIC_DATASET_STATS
        .iter()
        .find(|r| r.0 == key)
        .map(|&(_, tags, train, dev, test)| crate::corpus::DatasetStats { train, dev, test, tags })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Conll { train: PathBuf, dev: PathBuf, test: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(cfg) => generate_synthetic(cfg),
            DatasetSource::Conll { train, dev, test } => Dataset::new(
                load_conll(train, SplitName::Train)?,
                load_conll(dev, SplitName::Dev)?,
                load_conll(test, SplitName::Test)?,
            ),
        }
    }
}

/// Number of silver sentences: a count, or the whole remainder (`"all"`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SilverSize {
    Count(usize),
    AllRemainder,
}

impl SilverSize {
    pub fn resolve(self, pool: usize) -> Result<usize> {
        match self {
            SilverSize::AllRemainder => Ok(pool),
            SilverSize::Count(n) if n <= pool => Ok(n),
            SilverSize::Count(n) => Err(Error::Size {
                requested: n,
                available: pool,
            }),
        }
    }
}

impl fmt::Display for SilverSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SilverSize::Count(n) => write!(f, "{n}"),
            SilverSize::AllRemainder => f.write_str("all"),
        }
    }
}

impl Serialize for SilverSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SilverSize::Count(n) => s.serialize_u64(*n as u64),
            SilverSize::AllRemainder => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for SilverSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(SilverSize::Count(n)),
            Raw::Word(w) if w == "all" => Ok(SilverSize::AllRemainder),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "silver size must be a count or \"all\", got {w:?}"
            ))),
        }
    }
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_beam_k() -> usize {
    1
}

fn default_pattern() -> String {
    "<extra_id_{k}>".to_string()
}

/// The whole experiment as one JSON document. See `docs/experiment-config.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Deduplicate across splits (test kept first, then dev, then train).
    #[serde(default)]
    pub dedup: bool,
    /// (gold train, gold dev) sizes.
    pub gold_splits: Vec<(usize, usize)>,
    pub silver_sizes: Vec<SilverSize>,
    pub lambda_kl: Vec<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub temper_student: bool,
    #[serde(default)]
    pub tau_squared: bool,
    #[serde(default = "default_beam_k")]
    pub beam_k: usize,
    /// Master seeds; each drives student initialisation, batch order and the
    /// choice of silver sentences.
    pub seeds: Vec<u64>,
    /// Seed of the gold downsampling, shared by all runs.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_pattern")]
    pub sentinel_pattern: String,
    #[serde(default)]
    pub teacher: TeacherTrainConfig,
    /// `seed` is ignored here; it is derived from the master seed.
    #[serde(default)]
    pub student: StudentConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.gold_splits.is_empty() || self.silver_sizes.is_empty() || self.lambda_kl.is_empty() {
            return Err(Error::Config("gold_splits, silver_sizes and lambda_kl must be non-empty".into()));
        }
        if let Some(&(t, d)) = self.gold_splits.iter().find(|g| g.0 == 0 || g.1 == 0) {
            return Err(Error::Config(format!("gold split ({t}, {d}) must have non-empty train and dev parts")));
        }
        if self.beam_k == 0 {
            return Err(Error::Config("beam_k must be at least 1".into()));
        }
        self.distill_config(0.0).validate()?;
        for &l in &self.lambda_kl {
            self.distill_config(l).validate()?;
        }
        crate::sbio::SentinelScheme::new(&self.sentinel_pattern)?;
        self.teacher.validate()?;
        self.student.validate()
    }

    /// Checks every split and silver size against the loaded data.
    pub fn validate_against(&self, dataset: &Dataset) -> Result<()> {
        for &(t, d) in &self.gold_splits {
            for (want, have) in [(t, dataset.train.len()), (d, dataset.dev.len())] {
                if want > have {
                    return Err(Error::Size {
                        requested: want,
                        available: have,
                    });
                }
            }
            for s in &self.silver_sizes {
                s.resolve(dataset.train.len() - t)?;
            }
        }
        if dataset.test.is_empty() {
            return Err(Error::Config("the test split is empty".into()));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = self.dataset.load()?;
        if self.dedup {
            dedup(&data, &DEFAULT_DEDUP_PRIORITY)
        } else {
            Ok(data)
        }
    }

    pub fn distill_config(&self, lambda_kl: f64) -> crate::distill::DistillConfig {
        crate::distill::DistillConfig {
            lambda_kl,
            tau: self.tau,
            temper_student: self.temper_student,
            tau_squared: self.tau_squared,
        }
    }

    /// Hex SHA-256 of the canonical JSON of everything that affects results
    /// (the output directory is left out).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Sub-seed for one component, from a fixed labelled hash of the master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(master.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub gold_train: usize,
    pub gold_dev: usize,
    pub silver: SilverSize,
    /// Resolved number of silver sentences.
    pub silver_count: usize,
    pub lambda_kl: f64,
}

impl Cell {
    pub fn file_stem(&self) -> String {
        format!("g{}-{}_s{}_l{}", self.gold_train, self.gold_dev, self.silver, self.lambda_kl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub student_seed: u64,
    pub silver_seed: u64,
    pub test: EvalReport,
    pub training: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_fingerprint: String,
    pub cell: Cell,
    pub runs: Vec<SeedRun>,
    pub mean_f1: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_f1: f64,
    pub mean_perfect: f64,
    pub std_perfect: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunRecord {
    pub fn new(config_fingerprint: String, cell: Cell, runs: Vec<SeedRun>) -> Self {
        let f1: Vec<f64> = runs.iter().map(|r| r.test.f1).collect();
        let perfect: Vec<f64> = runs.iter().map(|r| r.test.perfect).collect();
        let (mean_f1, std_f1) = mean_std(&f1);
        let (mean_perfect, std_perfect) = mean_std(&perfect);
        RunRecord {
            config_fingerprint,
            cell,
            runs,
            mean_f1,
            std_f1,
            mean_perfect,
            std_perfect,
        }
    }

    /// True when the stored aggregates equal those recomputed from the runs.
    pub fn aggregates_consistent(&self) -> bool {
        let fresh = RunRecord::new(self.config_fingerprint.clone(), self.cell.clone(), self.runs.clone());
        fresh.mean_f1.to_bits() == self.mean_f1.to_bits()
            && fresh.std_f1.to_bits() == self.std_f1.to_bits()
            && fresh.mean_perfect.to_bits() == self.mean_perfect.to_bits()
            && fresh.std_perfect.to_bits() == self.std_perfect.to_bits()
    }
}

/// Everything persisted about one teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub config_fingerprint: String,
    pub gold_train: usize,
    pub gold_dev: usize,
    pub training: TeacherReport,
    pub test: EvalReport,
    pub silver_decoded: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "dataset": {"kind": "synthetic", "seed": 1, "train": 50, "dev": 20, "test": 20, "tag_count": 2},
                "gold_splits": [[10, 5]],
                "silver_sizes": [0, "all"],
                "lambda_kl": [0, 1],
                "seeds": [1, 2]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let c = base();
        assert_eq!(c.tau, 10.0);
        assert_eq!(c.beam_k, 1);
        assert_eq!(c.silver_sizes, vec![SilverSize::Count(0), SilverSize::AllRemainder]);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn config_errors() {
        let bad = [
            r#"{"dataset": {"kind": "synthetic", "seed": 1, "train": 5, "dev": 5, "test": 5, "tag_count": 2},
                "gold_splits": [[1, 1]], "silver_sizes": [0], "lambda_kl": [0], "seeds": []}"#,
            r#"{"dataset": {"kind": "synthetic", "seed": 1, "train": 5, "dev": 5, "test": 5, "tag_count": 2},
                "gold_splits": [[1, 1]], "silver_sizes": ["most"], "lambda_kl": [0], "seeds": [1]}"#,
            r#"{"dataset": {"kind": "synthetic", "seed": 1, "train": 5, "dev": 5, "test": 5, "tag_count": 2},
                "gold_splits": [[1, 1]], "silver_sizes": [0], "lambda_kl": [-1], "seeds": [1]}"#,
            r#"{"dataset": {"kind": "synthetic", "seed": 1, "train": 5, "dev": 5, "test": 5, "tag_count": 2},
                "gold_splits": [[1, 1]], "silver_sizes": [0], "lambda_kl": [0], "seeds": [1], "extra": 3}"#,
        ];
        for text in bad {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
        let mut c = base();
        c.silver_sizes = vec![SilverSize::Count(41)];
        let data = c.load_dataset().unwrap();
        assert!(matches!(
            c.validate_against(&data),
            Err(Error::Size {
                requested: 41,
                available: 40
            })
        ));
    }

    #[test]
    fn fingerprint_ignores_output_location_only() {
        let a = base();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seeds.push(3);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn derived_seeds_depend_on_label_and_master() {
        assert_eq!(derive_seed(1, "student"), derive_seed(1, "student"));
        assert_ne!(derive_seed(1, "student"), derive_seed(1, "silver"));
        assert_ne!(derive_seed(1, "student"), derive_seed(2, "student"));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn reference_stats_lookup() {
        let s = reference_stats("ATIS").unwrap();
        assert_eq!((s.tags, s.train, s.dev, s.test), (83, 4478, 500, 893));
        assert!(reference_stats("unknown").is_none());
    }
}
