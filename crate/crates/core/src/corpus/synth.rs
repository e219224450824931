//! Template-grammar generator for command-like slot-filling utterances.
//!
//! Each label owns a lexicon of invented words and two cue words that
//! usually introduce it; a fraction of slots are introduced by the shared
//! cue `the`, so context alone does not always decide the label.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit, Sentence, SplitName};
use crate::error::{Error, Result};
use crate::sbio::{spans_to_sbio, Span, TagSet};

const LABEL_NAMES: [&str; 12] = [
    "ARTIST", "TRACK", "PLAYLIST", "CITY", "DATE", "CUISINE", "RESTAURANT", "MOVIE", "ACTOR",
    "GENRE", "TIME", "PARTY",
];
const CUES: [&str; 16] = [
    "by", "from", "at", "on", "for", "with", "about", "near", "during", "into", "via", "like",
    "under", "after", "before", "around",
];
const VERBS: [&str; 10] = [
    "play", "find", "show", "book", "add", "search", "get", "put", "tell", "open",
];
const FILLERS: [&str; 4] = ["please", "me", "some", "a"];
const TRAILERS: [&str; 3] = ["now", "again", "quickly"];
const SHARED_CUE: &str = "the";
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub tag_count: usize,
    #[serde(default = "default_lexicon_size")]
    pub lexicon_size: usize,
    #[serde(default = "default_max_span")]
    pub max_span_len: usize,
    #[serde(default = "default_shared_cue_rate")]
    pub shared_cue_rate: f64,
}

fn default_lexicon_size() -> usize {
    60
}

fn default_max_span() -> usize {
    3
}

fn default_shared_cue_rate() -> f64 {
    0.25
}

impl SyntheticConfig {
    pub fn new(seed: u64, train: usize, dev: usize, test: usize, tag_count: usize) -> Self {
        SyntheticConfig {
            seed,
            train,
            dev,
            test,
            tag_count,
            lexicon_size: default_lexicon_size(),
            max_span_len: default_max_span(),
            shared_cue_rate: default_shared_cue_rate(),
        }
    }
}

struct Grammar {
    labels: Vec<String>,
    lexicons: Vec<Vec<String>>,
    cues: Vec<[&'static str; 2]>,
}

impl Grammar {
    fn new(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let labels: Vec<String> = (0..cfg.tag_count)
            .map(|k| match LABEL_NAMES.get(k) {
                Some(name) => name.to_string(),
                None => format!("SLOT{k}"),
            })
            .collect();
        let mut reserved: HashSet<String> = CUES
            .iter()
            .chain(&VERBS)
            .chain(&FILLERS)
            .chain(&TRAILERS)
            .chain(std::iter::once(&SHARED_CUE))
            .map(|s| s.to_string())
            .collect();
        let lexicons = (0..cfg.tag_count)
            .map(|_| {
                (0..cfg.lexicon_size)
                    .map(|_| loop {
                        let w = pseudo_word(rng);
                        if reserved.insert(w.clone()) {
                            break w;
                        }
                    })
                    .collect()
            })
            .collect();
        let cues = (0..cfg.tag_count)
            .map(|k| [CUES[(2 * k) % CUES.len()], CUES[(2 * k + 1) % CUES.len()]])
            .collect();
        Grammar {
            labels,
            lexicons,
            cues,
        }
    }

    fn utterance(&self, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Span>) {
        let mut tokens = vec![VERBS.choose(rng).unwrap().to_string()];
        if rng.gen_bool(0.3) {
            tokens.push(FILLERS.choose(rng).unwrap().to_string());
        }
        let max_slots = self.labels.len().min(3);
        let n_slots = rng.gen_range(1..=max_slots);
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.shuffle(rng);
        let mut spans = Vec::new();
        for &label in &order[..n_slots] {
            let cue = if rng.gen_bool(cfg.shared_cue_rate) {
                SHARED_CUE
            } else {
                self.cues[label][rng.gen_range(0..2)]
            };
            tokens.push(cue.to_string());
            let len = span_length(cfg.max_span_len, rng);
            let start = tokens.len();
            for _ in 0..len {
                tokens.push(self.lexicons[label].choose(rng).unwrap().clone());
            }
            spans.push(Span::new(self.labels[label].clone(), start, tokens.len() - 1));
        }
        if rng.gen_bool(0.2) {
            tokens.push(TRAILERS.choose(rng).unwrap().to_string());
        }
        (tokens, spans)
    }
}

fn span_length(max: usize, rng: &mut ChaCha8Rng) -> usize {
    // roughly 1:0.6:0.4:… weighting, capped at max
    let mut len = 1;
    while len < max && rng.gen_bool(0.4) {
        len += 1;
    }
    len
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if rng.gen_bool(0.3) {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    w
}

/// Deterministic for a fixed config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.tag_count == 0 {
        return Err(Error::Config("synthetic corpus needs tag_count >= 1".into()));
    }
    if cfg.lexicon_size == 0 || cfg.max_span_len == 0 {
        return Err(Error::Config("lexicon_size and max_span_len must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.shared_cue_rate) {
        return Err(Error::Config("shared_cue_rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grammar = Grammar::new(cfg, &mut rng);
    let mut make = |name: SplitName, n: usize| -> Result<DatasetSplit> {
        let mut sentences = Vec::with_capacity(n);
        for i in 0..n {
            let (tokens, spans) = grammar.utterance(cfg, &mut rng);
            let tags = spans_to_sbio(tokens.len(), &spans)?;
            sentences.push(Sentence::new(format!("synthetic-{name}:{i}"), tokens, Some(tags))?);
        }
        DatasetSplit::new(name, sentences)
    };
    let train = make(SplitName::Train, cfg.train)?;
    let dev = make(SplitName::Dev, cfg.dev)?;
    let test = make(SplitName::Test, cfg.test)?;
    Dataset::with_tag_set(train, dev, test, TagSet::new(grammar.labels.clone())?)
}
