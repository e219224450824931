//! Sentences, dataset splits and the dataset-level operations: downsampling,
//! deduplication and summary counts.

mod conll;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sbio::{sbio_to_spans, validate_sbio, SbioTag, Span, TagSet};

pub use conll::{load_conll, load_tokens, read_conll, save_conll, write_conll};
pub use synth::{generate_synthetic, SyntheticConfig};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold_tags: Option<Vec<SbioTag>>,
}

impl Sentence {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        gold_tags: Option<Vec<SbioTag>>,
    ) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::Validation(format!("sentence {id} has no tokens")));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::Validation(format!(
                "sentence {id}: token {bad:?} is empty or contains whitespace"
            )));
        }
        if let Some(tags) = &gold_tags {
            if tags.len() != tokens.len() {
                return Err(Error::Validation(format!(
                    "sentence {id}: {} tokens but {} tags",
                    tokens.len(),
                    tags.len()
                )));
            }
            validate_sbio(tags).map_err(|e| Error::Validation(format!("sentence {id}: {e}")))?;
        }
        Ok(Sentence {
            id,
            tokens,
            gold_tags,
        })
    }

    /// Whitespace pretokenization of raw text.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self> {
        Sentence::new(id, text.split_whitespace().map(str::to_string).collect(), None)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold_spans(&self) -> Option<Vec<Span>> {
        self.gold_tags
            .as_ref()
            .map(|t| sbio_to_spans(t).expect("gold tags validated at construction"))
    }

    pub fn require_tags(&self) -> Result<&[SbioTag]> {
        self.gold_tags
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("sentence {} has no gold tags", self.id)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub sentences: Vec<Sentence>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, sentences: Vec<Sentence>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sentences {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate sentence id {} in {name} split",
                    s.id
                )));
            }
        }
        Ok(DatasetSplit { name, sentences })
    }

    pub fn empty(name: SplitName) -> Self {
        DatasetSplit {
            name,
            sentences: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tags(&self) -> impl Iterator<Item = &SbioTag> {
        self.sentences
            .iter()
            .filter_map(|s| s.gold_tags.as_ref())
            .flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    pub tag_set: TagSet,
}

impl Dataset {
    /// Derives the tag set from all gold tags in train, dev, test order.
    pub fn new(train: DatasetSplit, dev: DatasetSplit, test: DatasetSplit) -> Result<Self> {
        let tag_set = TagSet::from_tags(train.tags().chain(dev.tags()).chain(test.tags()))?;
        Ok(Dataset {
            train,
            dev,
            test,
            tag_set,
        })
    }

    /// Uses a given tag set, checking every gold tag is drawn from it.
    pub fn with_tag_set(
        train: DatasetSplit,
        dev: DatasetSplit,
        test: DatasetSplit,
        tag_set: TagSet,
    ) -> Result<Self> {
        for tag in train.tags().chain(dev.tags()).chain(test.tags()) {
            if tag_set.index_of(tag).is_none() {
                return Err(Error::Validation(format!("tag {tag} is not in the tag set")));
            }
        }
        Ok(Dataset {
            train,
            dev,
            test,
            tag_set,
        })
    }

    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    fn split_mut(&mut self, name: SplitName) -> &mut DatasetSplit {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Dev => &mut self.dev,
            SplitName::Test => &mut self.test,
        }
    }
}

/// Gold/pool decomposition of a training run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub gold_train_size: usize,
    pub gold_dev_size: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        for (want, have) in [
            (self.gold_train_size, dataset.train.len()),
            (self.gold_dev_size, dataset.dev.len()),
        ] {
            if want > have {
                return Err(Error::Size {
                    requested: want,
                    available: have,
                });
            }
        }
        Ok(())
    }
}

/// Uniform sample of `n` sentences without replacement.
///
/// Ids are sorted before sampling so the result does not depend on file
/// order. Both halves keep the original sentence order.
pub fn downsample(split: &DatasetSplit, n: usize, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    if n > split.len() {
        return Err(Error::Size {
            requested: n,
            available: split.len(),
        });
    }
    let mut ids: Vec<&str> = split.sentences.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<&str> = rand::seq::index::sample(&mut rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    let (gold, rest): (Vec<Sentence>, Vec<Sentence>) = split
        .sentences
        .iter()
        .cloned()
        .partition(|s| chosen.contains(s.id.as_str()));
    Ok((
        DatasetSplit {
            name: split.name,
            sentences: gold,
        },
        DatasetSplit {
            name: split.name,
            sentences: rest,
        },
    ))
}

/// Retention priority used when none is given: test first, then dev, then train.
pub const DEFAULT_DEDUP_PRIORITY: [SplitName; 3] = [SplitName::Test, SplitName::Dev, SplitName::Train];

/// Keeps each (tokens, tags) example only in its highest-priority split,
/// and only once within that split. `priority` lists splits highest first.
pub fn dedup(dataset: &Dataset, priority: &[SplitName]) -> Result<Dataset> {
    let mut sorted = priority.to_vec();
    sorted.sort();
    if sorted != SplitName::ALL {
        return Err(Error::Config(format!(
            "dedup priority {priority:?} is not a permutation of train, dev, test"
        )));
    }
    let mut out = dataset.clone();
    let mut seen: HashSet<(&[String], Option<&[SbioTag]>)> = HashSet::new();
    for &name in priority {
        let kept: Vec<Sentence> = dataset
            .split(name)
            .sentences
            .iter()
            .filter(|s| seen.insert((s.tokens.as_slice(), s.gold_tags.as_deref())))
            .cloned()
            .collect();
        out.split_mut(name).sentences = kept;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub tags: usize,
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    DatasetStats {
        train: dataset.train.len(),
        dev: dataset.dev.len(),
        test: dataset.test.len(),
        tags: dataset.tag_set.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(id: &str, toks: &str, tags: &str) -> Sentence {
        Sentence::new(
            id,
            toks.split(' ').map(String::from).collect(),
            Some(tags.split(' ').map(SbioTag::from_raw).collect()),
        )
        .unwrap()
    }

    fn split_of(name: SplitName, n: usize) -> DatasetSplit {
        let sentences = (0..n)
            .map(|i| sent(&format!("f:{i}"), &format!("w{i} x"), "A O"))
            .collect();
        DatasetSplit::new(name, sentences).unwrap()
    }

    #[test]
    fn sentence_validation() {
        assert!(Sentence::new("a", vec![], None).is_err());
        assert!(Sentence::new("a", vec!["x y".into()], None).is_err());
        assert!(Sentence::new("a", vec!["x".into()], Some(vec![SbioTag::Inside])).is_err());
        assert!(Sentence::new("a", vec!["x".into()], Some(vec![])).is_err());
    }

    #[test]
    fn downsample_counts_and_identity() {
        let split = split_of(SplitName::Train, 4478);
        let (gold, rest) = downsample(&split, 100, 7).unwrap();
        assert_eq!((gold.len(), rest.len()), (100, 4378));

        let (all, none) = downsample(&split, split.len(), 7).unwrap();
        assert_eq!(all, split);
        assert!(none.is_empty());

        let (again, _) = downsample(&split, 100, 7).unwrap();
        assert_eq!(gold, again);
        assert!(matches!(
            downsample(&split, 4479, 0),
            Err(Error::Size { requested: 4479, available: 4478 })
        ));
    }

    #[test]
    fn downsample_ignores_file_order() {
        let split = split_of(SplitName::Train, 50);
        let mut reversed = split.clone();
        reversed.sentences.reverse();
        let ids = |s: &DatasetSplit| {
            let mut v: Vec<String> = s.sentences.iter().map(|s| s.id.clone()).collect();
            v.sort();
            v
        };
        let (a, _) = downsample(&split, 10, 3).unwrap();
        let (b, _) = downsample(&reversed, 10, 3).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }

    fn small_dataset() -> Dataset {
        let train = DatasetSplit::new(
            SplitName::Train,
            vec![
                sent("tr:0", "play wow", "O A"),
                sent("tr:1", "play wow", "O A"),
                sent("tr:2", "stop now", "O O"),
                sent("tr:3", "only train", "A I"),
            ],
        )
        .unwrap();
        let dev = DatasetSplit::new(SplitName::Dev, vec![sent("dv:0", "stop now", "O O")]).unwrap();
        let test = DatasetSplit::new(
            SplitName::Test,
            vec![sent("te:0", "play wow", "O A"), sent("te:1", "play wow", "O B")],
        )
        .unwrap();
        Dataset::new(train, dev, test).unwrap()
    }

    #[test]
    fn dedup_rules() {
        let ds = small_dataset();
        let out = dedup(&ds, &DEFAULT_DEDUP_PRIORITY).unwrap();
        let ids = |s: &DatasetSplit| s.sentences.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        // label-conflicting duplicates are kept apart
        assert_eq!(ids(&out.test), ["te:0", "te:1"]);
        assert_eq!(ids(&out.dev), ["dv:0"]);
        assert_eq!(ids(&out.train), ["tr:3"]);
        assert_eq!(dedup(&out, &DEFAULT_DEDUP_PRIORITY).unwrap(), out);

        // literal reading: train retained first
        let literal = dedup(&ds, &[SplitName::Train, SplitName::Dev, SplitName::Test]).unwrap();
        assert_eq!(ids(&literal.train), ["tr:0", "tr:2", "tr:3"]);
        assert!(literal.dev.is_empty());
        assert_eq!(ids(&literal.test), ["te:1"]);

        assert!(dedup(&ds, &[SplitName::Train, SplitName::Train, SplitName::Test]).is_err());
    }

    #[test]
    fn dedup_without_duplicates_is_identity() {
        let train = split_of(SplitName::Train, 5);
        let ds = Dataset::new(train, DatasetSplit::empty(SplitName::Dev), DatasetSplit::empty(SplitName::Test))
            .unwrap();
        assert_eq!(dedup(&ds, &DEFAULT_DEDUP_PRIORITY).unwrap(), ds);
    }

    #[test]
    fn stats_of_empty_dataset() {
        let ds = Dataset::new(
            DatasetSplit::empty(SplitName::Train),
            DatasetSplit::empty(SplitName::Dev),
            DatasetSplit::empty(SplitName::Test),
        )
        .unwrap();
        assert_eq!(
            stats(&ds),
            DatasetStats { train: 0, dev: 0, test: 0, tags: 0 }
        );
        assert_eq!(stats(&small_dataset()).tags, 2);
    }

    proptest! {
        #[test]
        fn downsample_partitions(n_total in 0usize..60, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let split = split_of(SplitName::Train, n_total);
            let n = (n_total as f64 * frac).floor() as usize;
            let (gold, rest) = downsample(&split, n, seed).unwrap();
            prop_assert_eq!(gold.len(), n);
            let g: HashSet<_> = gold.sentences.iter().map(|s| s.id.clone()).collect();
            let r: HashSet<_> = rest.sentences.iter().map(|s| s.id.clone()).collect();
            prop_assert!(g.is_disjoint(&r));
            prop_assert_eq!(g.len() + r.len(), split.len());
        }
    }
}
