//! A small word-level encoder-decoder language model used as the teacher.
//!
//! The encoder is a BiLSTM over the input symbols; the decoder is an LSTM
//! whose state queries the encoder states with dot-product attention. The
//! training forward runs on the tape. Scoring uses a separate plain-array
//! forward with a per-input cache of decoder prefix states, so re-scoring the
//! shared prefixes of beam hypotheses costs one decoder step per new symbol.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use super::Scorer;
use crate::corpus::Sentence;
use crate::decoder::greedy;
use crate::error::{create_file, open_file, Error, Result};
use crate::metrics::evaluate_tags;
use crate::nn::lstm::{bilstm, step_from_preactivation};
use crate::nn::loss::weighted_nll;
use crate::nn::tape::sigmoid;
use crate::nn::tensor::log_softmax;
use crate::nn::{AdamW, AdamWConfig, GradStore, LstmParams, ParamId, ParamStore, Tape, Tensor, Var, GRAD_CLIP_NORM};
use crate::sbio::{encode_input, encode_target, SentinelScheme, TagSet, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherDims {
    pub embedding: usize,
    /// Per direction.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for TeacherDims {
    fn default() -> Self {
        TeacherDims {
            embedding: 32,
            encoder_hidden: 64,
            decoder_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub dims: TeacherDims,
    pub epochs: usize,
    /// Epochs without a dev micro-F1 improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Probability of replacing a rare input word by the unknown marker
    /// during training, so that unseen words at labelling time look familiar.
    pub unk_replace_prob: f64,
    /// Words seen at most this many times in training count as rare.
    pub unk_max_count: usize,
    /// Sentinels `0..=max_sentinels` are always in the vocabulary.
    pub max_sentinels: usize,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            dims: TeacherDims::default(),
            epochs: 30,
            patience: 5,
            learning_rate: 5e-3,
            weight_decay: 0.01,
            batch_size: 8,
            unk_replace_prob: 0.15,
            unk_max_count: 1,
            max_sentinels: 64,
            seed: 0,
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.embedding == 0 || d.encoder_hidden == 0 || d.decoder_hidden == 0 {
            return Err(Error::Config("teacher dimensions must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("teacher learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unk_replace_prob) {
            return Err(Error::Config("unk_replace_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct TeacherParams {
    embed: ParamId,
    enc_fw: LstmParams,
    enc_bw: LstmParams,
    dec: LstmParams,
    /// Memory rows `[enc; emb]` to query space `[h; emb]`, `(2H + E) × (D + E)`.
    attn: ParamId,
    comb_w: ParamId,
    comb_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Serialize, Deserialize)]
struct TeacherMeta {
    dims: TeacherDims,
    vocab: Vocab,
    tag_set: TagSet,
    scheme: SentinelScheme,
}

struct Encoded {
    /// `n × (2H + E)`: BiLSTM state and input embedding of each input symbol.
    states: Vec<Vec<f64>>,
    /// `n × (D + E)`, memory projected into query space.
    keys: Vec<Vec<f64>>,
    input: Vec<usize>,
}

struct PrefixState {
    /// Symbol fed to the decoder to reach this state.
    last: usize,
    anchor: Option<usize>,
    h: Vec<f64>,
    c: Vec<f64>,
    cum: f64,
    log_probs: Option<Vec<f64>>,
}

struct ScoreCache {
    input: String,
    encoded: Encoded,
    states: HashMap<Vec<usize>, PrefixState>,
}

const CACHE_LIMIT: usize = 200_000;
/// Added to the attention logit of every input position holding the anchor:
/// the most recent decoder symbol that also occurs in the input. Sentinels
/// are the only such symbols in well-formed targets, so each step attends to
/// the sentinel it follows.
const MATCH_BONUS: f64 = 30.0;

/// Anchor after each decoder input symbol; `None` until one occurs in `input`.
fn anchors(input: &[usize], dec_in: &[usize]) -> Vec<Option<usize>> {
    let mut current = None;
    dec_in
        .iter()
        .map(|sym| {
            if input.contains(sym) {
                current = Some(*sym);
            }
            current
        })
        .collect()
}

pub struct ToyTeacher {
    dims: TeacherDims,
    vocab: Vocab,
    tag_set: TagSet,
    scheme: SentinelScheme,
    store: ParamStore,
    params: TeacherParams,
    cache: Mutex<Option<ScoreCache>>,
}

impl std::fmt::Debug for ToyTeacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyTeacher")
            .field("dims", &self.dims)
            .field("vocab_size", &self.vocab.len())
            .field("tag_set", &self.tag_set)
            .finish()
    }
}

impl Clone for ToyTeacher {
    fn clone(&self) -> Self {
        ToyTeacher {
            dims: self.dims,
            vocab: self.vocab.clone(),
            tag_set: self.tag_set.clone(),
            scheme: self.scheme.clone(),
            store: self.store.clone(),
            params: self.params,
            cache: Mutex::new(None),
        }
    }
}

/// Vocabulary of specials, sentinels, tags and then corpus words in order of
/// first appearance.
pub fn build_vocab<'a, I>(
    sentences: I,
    tag_set: &TagSet,
    scheme: &SentinelScheme,
    max_sentinels: usize,
) -> Vocab
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let sentences: Vec<&Sentence> = sentences.into_iter().collect();
    let longest = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut vocab = Vocab::new();
    for k in 0..=max_sentinels.max(longest) {
        vocab.add(&scheme.sentinel(k));
    }
    for t in tag_set.tag_strings() {
        vocab.add(&t);
    }
    for s in sentences {
        for tok in &s.tokens {
            vocab.add(tok);
        }
    }
    vocab
}

impl ToyTeacher {
    /// Fresh randomly initialised model over `vocab`.
    pub fn new(
        vocab: Vocab,
        tag_set: TagSet,
        scheme: SentinelScheme,
        dims: TeacherDims,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h, d, v) = (dims.embedding, dims.encoder_hidden, dims.decoder_hidden, vocab.len());
        let bound = 1.0 / (e as f64).sqrt();
        let table = (0..v * e).map(|_| rng.gen_range(-bound..bound)).collect();
        let embed = store.insert("embed", Tensor::new(v, e, table)?)?;
        let enc_fw = LstmParams::init(&mut store, "enc.fw", e, h, &mut rng)?;
        let enc_bw = LstmParams::init(&mut store, "enc.bw", e, h, &mut rng)?;
        let dec = LstmParams::init(&mut store, "dec", e, d, &mut rng)?;
        let attn = store.init_weight("attn.w", 2 * h + e, d + e, &mut rng)?;
        let comb_w = store.init_weight("comb.w", d + 2 * h + e, d, &mut rng)?;
        let comb_b = store.init_zeros("comb.b", 1, d)?;
        let out_w = store.init_weight("out.w", d, v, &mut rng)?;
        let out_b = store.init_zeros("out.b", 1, v)?;
        Ok(ToyTeacher {
            dims,
            vocab,
            tag_set,
            scheme,
            store,
            params: TeacherParams {
                embed,
                enc_fw,
                enc_bw,
                dec,
                attn,
                comb_w,
                comb_b,
                out_w,
                out_b,
            },
            cache: Mutex::new(None),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tag_set(&self) -> &TagSet {
        &self.tag_set
    }

    pub fn scheme(&self) -> &SentinelScheme {
        &self.scheme
    }

    pub fn dims(&self) -> TeacherDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::ParamFormat(format!(
                "expected {} tensors, found {}",
                self.store.len(),
                store.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in self.store.iter().zip(store.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::ParamFormat(format!(
                    "tensor {n2} {:?} does not match expected {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        self.store = store;
        self.clear_cache();
        Ok(())
    }

    pub fn clear_cache(&self) {
        *self.cache.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }

    /// Writes `teacher.json` and `teacher.params` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let meta = TeacherMeta {
            dims: self.dims,
            vocab: self.vocab.clone(),
            tag_set: self.tag_set.clone(),
            scheme: self.scheme.clone(),
        };
        serde_json::to_writer(BufWriter::new(create_file(&dir.join("teacher.json"))?), &meta)?;
        self.store
            .write_to(BufWriter::new(create_file(&dir.join("teacher.params"))?))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: TeacherMeta =
            serde_json::from_reader(BufReader::new(open_file(&dir.join("teacher.json"))?))?;
        let store = ParamStore::read_from(BufReader::new(open_file(&dir.join("teacher.params"))?))?;
        let mut t = ToyTeacher::new(meta.vocab, meta.tag_set, meta.scheme, meta.dims, 0)?;
        t.set_params(store)?;
        Ok(t)
    }

    /// `m × V` log-probabilities on the tape: row `j` is the distribution of
    /// the `j`-th target symbol given the input and the symbols before it.
    pub fn target_log_probs(&self, tape: &mut Tape<'_>, input: &[usize], target: &[usize]) -> Result<Var> {
        if input.is_empty() || target.is_empty() {
            return Err(Error::Contract("teacher needs non-empty input and target".into()));
        }
        let p = &self.params;
        let embed = tape.param(p.embed);
        let x = tape.gather_rows(embed, input)?;
        let fw = p.enc_fw.bind(tape);
        let bw = p.enc_bw.bind(tape);
        let enc = bilstm(tape, x, &fw, &bw)?;
        let memory = tape.concat_cols(&[enc, x])?;
        let attn = tape.param(p.attn);
        let keys = tape.matmul(memory, attn)?;
        let keys_t = tape.transpose(keys);

        let mut dec_in = Vec::with_capacity(target.len());
        dec_in.push(Vocab::BOS_ID);
        dec_in.extend_from_slice(&target[..target.len() - 1]);
        let y = tape.gather_rows(embed, &dec_in)?;
        let dec = p.dec.bind(tape);
        let yw = tape.matmul(y, dec.w_input)?;
        let yw = tape.add_row(yw, dec.bias)?;
        let mut h = tape.constant(Tensor::zeros(1, self.dims.decoder_hidden));
        let mut c = h;
        let mut hs = Vec::with_capacity(target.len());
        for t in 0..target.len() {
            let xw = tape.row(yw, t)?;
            let (h2, c2) = step_from_preactivation(tape, xw, h, c, &dec)?;
            h = h2;
            c = c2;
            hs.push(h);
        }
        let hd = tape.concat_rows(&hs)?;
        let query = tape.concat_cols(&[hd, y])?;
        let att = tape.matmul(query, keys_t)?;
        let mut bonus = Tensor::zeros(target.len(), input.len());
        for (t, anchor) in anchors(input, &dec_in).into_iter().enumerate() {
            for (j, &x) in input.iter().enumerate() {
                if Some(x) == anchor {
                    bonus.data_mut()[t * input.len() + j] = MATCH_BONUS;
                }
            }
        }
        let bonus = tape.constant(bonus);
        let att = tape.add(att, bonus)?;
        let alpha = tape.softmax_rows(att);
        let ctx = tape.matmul(alpha, memory)?;
        let joined = tape.concat_cols(&[hd, ctx])?;
        let comb_w = tape.param(p.comb_w);
        let comb_b = tape.param(p.comb_b);
        let z = tape.matmul(joined, comb_w)?;
        let z = tape.add_row(z, comb_b)?;
        let z = tape.tanh(z);
        let out_w = tape.param(p.out_w);
        let out_b = tape.param(p.out_b);
        let logits = tape.matmul(z, out_w)?;
        let logits = tape.add_row(logits, out_b)?;
        Ok(tape.log_softmax_rows(logits))
    }

    /// Summed negative log-likelihood of `target` given `input`.
    pub fn sequence_nll(&self, tape: &mut Tape<'_>, input: &[usize], target: &[usize]) -> Result<Var> {
        let log_probs = self.target_log_probs(tape, input, target)?;
        let mut onehot = Tensor::zeros(target.len(), self.vocab.len());
        for (j, &t) in target.iter().enumerate() {
            onehot.data_mut()[j * self.vocab.len() + t] = 1.0;
        }
        weighted_nll(tape, log_probs, &onehot)
    }

    /// Conditional log-likelihood of each continuation given `prefix`,
    /// computed through the training forward rather than the scoring cache.
    pub fn step_log_probs(&self, input: &str, prefix: &str, continuations: &[String]) -> Result<Vec<f64>> {
        let input_ids = self.vocab.encode(input);
        let prefix_ids = self.vocab.encode(prefix);
        let mut out = Vec::with_capacity(continuations.len());
        for cont in continuations {
            let cont_ids = self.vocab.encode(cont);
            if cont_ids.is_empty() {
                out.push(0.0);
                continue;
            }
            let mut target = prefix_ids.clone();
            target.extend_from_slice(&cont_ids);
            let mut tape = Tape::with_params(&self.store);
            let lp = self.target_log_probs(&mut tape, &input_ids, &target)?;
            let lp = tape.value(lp);
            let v = self.vocab.len();
            let total: f64 = (prefix_ids.len()..target.len())
                .map(|j| lp.data()[j * v + target[j]])
                .sum();
            out.push(total);
        }
        Ok(out)
    }

    fn encode_plain(&self, input: &[usize]) -> Encoded {
        let s = &self.store;
        let p = &self.params;
        let embed = s.get(p.embed);
        let run = |lp: &LstmParams, reverse: bool| -> Vec<Vec<f64>> {
            let n = lp.hidden_size;
            let mut h = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut out = vec![Vec::new(); input.len()];
            let order: Vec<usize> = if reverse {
                (0..input.len()).rev().collect()
            } else {
                (0..input.len()).collect()
            };
            for t in order {
                let (h2, c2) = lstm_plain(s, lp, embed.row(input[t]), &h, &c);
                h = h2;
                c = c2;
                out[t] = h.clone();
            }
            out
        };
        let fw = run(&p.enc_fw, false);
        let bw = run(&p.enc_bw, true);
        let states: Vec<Vec<f64>> = fw
            .into_iter()
            .zip(bw)
            .zip(input)
            .map(|((mut f, b), &id)| {
                f.extend(b);
                f.extend_from_slice(embed.row(id));
                f
            })
            .collect();
        let attn = s.get(p.attn);
        let keys = states.iter().map(|st| affine(st, attn, None)).collect();
        Encoded {
            states,
            keys,
            input: input.to_vec(),
        }
    }

    /// Distribution over the next symbol for decoder state `h` reached by
    /// feeding symbol `last`.
    fn next_log_probs(&self, enc: &Encoded, h: &[f64], last: usize, anchor: Option<usize>) -> Vec<f64> {
        let s = &self.store;
        let p = &self.params;
        let mut query = h.to_vec();
        query.extend_from_slice(s.get(p.embed).row(last));
        let att: Vec<f64> = enc
            .keys
            .iter()
            .zip(&enc.input)
            .map(|(k, &x)| dot(&query, k) + if Some(x) == anchor { MATCH_BONUS } else { 0.0 })
            .collect();
        let alpha = crate::nn::tensor::softmax(&att);
        let width = enc.states[0].len();
        let mut joined = h.to_vec();
        joined.resize(h.len() + width, 0.0);
        for (a, st) in alpha.iter().zip(&enc.states) {
            for (j, x) in st.iter().enumerate() {
                joined[h.len() + j] += a * x;
            }
        }
        let z: Vec<f64> = affine(&joined, s.get(p.comb_w), Some(s.get(p.comb_b)))
            .into_iter()
            .map(f64::tanh)
            .collect();
        log_softmax(&affine(&z, s.get(p.out_w), Some(s.get(p.out_b))))
    }

    fn score_ids(&self, cache: &mut ScoreCache, ids: &[usize]) -> f64 {
        if !cache.states.contains_key(&ids[..0]) {
            let (h, c) = lstm_plain(
                &self.store,
                &self.params.dec,
                self.store.get(self.params.embed).row(Vocab::BOS_ID),
                &vec![0.0; self.dims.decoder_hidden],
                &vec![0.0; self.dims.decoder_hidden],
            );
            cache.states.insert(
                Vec::new(),
                PrefixState {
                    last: Vocab::BOS_ID,
                    anchor: cache.encoded.input.contains(&Vocab::BOS_ID).then_some(Vocab::BOS_ID),
                    h,
                    c,
                    cum: 0.0,
                    log_probs: None,
                },
            );
        }
        // deepest cached prefix, then extend one symbol at a time
        let mut depth = ids.len();
        while !cache.states.contains_key(&ids[..depth]) {
            depth -= 1;
        }
        while depth < ids.len() {
            let parent = cache.states.get_mut(&ids[..depth]).expect("present");
            if parent.log_probs.is_none() {
                parent.log_probs = Some(self.next_log_probs(&cache.encoded, &parent.h, parent.last, parent.anchor));
            }
            let tok = ids[depth];
            let cum = parent.cum + parent.log_probs.as_ref().expect("set")[tok];
            let anchor = if cache.encoded.input.contains(&tok) {
                Some(tok)
            } else {
                parent.anchor
            };
            let (h, c) = lstm_plain(
                &self.store,
                &self.params.dec,
                self.store.get(self.params.embed).row(tok),
                &parent.h,
                &parent.c,
            );
            depth += 1;
            cache.states.insert(
                ids[..depth].to_vec(),
                PrefixState {
                    last: tok,
                    anchor,
                    h,
                    c,
                    cum,
                    log_probs: None,
                },
            );
        }
        cache.states[ids].cum
    }
}

impl Scorer for ToyTeacher {
    fn score(&self, input: &str, candidate: &str) -> Result<f64> {
        Ok(self.score_batch(input, std::slice::from_ref(&candidate.to_string()))?[0])
    }

    fn score_batch(&self, input: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let input_ids = self.vocab.encode(input);
        if input_ids.is_empty() {
            return Err(Error::Contract("teacher cannot score against an empty input".into()));
        }
        let mut guard = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let stale = match guard.as_ref() {
            Some(c) => c.input != input || c.states.len() > CACHE_LIMIT,
            None => true,
        };
        if stale {
            *guard = Some(ScoreCache {
                input: input.to_string(),
                encoded: self.encode_plain(&input_ids),
                states: HashMap::new(),
            });
        }
        let cache = guard.as_mut().expect("initialised");
        Ok(candidates
            .iter()
            .map(|cand| self.score_ids(cache, &self.vocab.encode(cand)))
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W (+ b)` for a row vector `x`.
fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let mut out = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; w.cols()],
    };
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn lstm_plain(store: &ParamStore, p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = p.hidden_size;
    let mut z = affine(x, store.get(p.w_input), Some(store.get(p.bias)));
    for (zi, hi) in z.iter_mut().zip(affine(h, store.get(p.w_hidden), None)) {
        *zi += hi;
    }
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for j in 0..n {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[n + j]);
        let g = z[2 * n + j].tanh();
        let o = sigmoid(z[3 * n + j]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    /// Mean per-symbol training loss before any update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub dev_f1: Vec<f64>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

struct Example {
    input: Vec<usize>,
    target: Vec<usize>,
    /// Positions of rare corpus words inside `input`, candidates for unknown-word replacement.
    word_positions: Vec<usize>,
}

/// Encoded pairs; words occurring at most `rare_count` times in `sentences`
/// are marked as replaceable.
fn examples(teacher: &ToyTeacher, sentences: &[Sentence], rare_count: usize) -> Result<Vec<Example>> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for w in &s.tokens {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    sentences
        .iter()
        .map(|s| {
            let input = encode_input(&s.tokens, &teacher.scheme, Variant::SentPrime)?;
            let target = encode_target(s.require_tags()?, &teacher.scheme)?;
            Ok(Example {
                input: teacher.vocab.encode(&input),
                target: teacher.vocab.encode(&target),
                word_positions: (0..s.len())
                    .filter(|&i| counts[s.tokens[i].as_str()] <= rare_count)
                    .map(|i| 2 * i + 1)
                    .collect(),
            })
        })
        .collect()
}

/// Mean per-symbol negative log-likelihood of the gold targets.
pub fn mean_target_nll(teacher: &ToyTeacher, sentences: &[Sentence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples(teacher, sentences, 0)? {
        let mut tape = Tape::with_params(&teacher.store);
        let nll = teacher.sequence_nll(&mut tape, &ex.input, &ex.target)?;
        total += tape.value(nll).item();
        count += ex.target.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Greedy-decoding micro-F1 of `teacher` on `sentences`.
pub fn decode_f1(teacher: &ToyTeacher, sentences: &[Sentence]) -> Result<f64> {
    let mut preds = Vec::with_capacity(sentences.len());
    for s in sentences {
        preds.push(greedy(teacher, &s.tokens, &teacher.tag_set, &teacher.scheme)?.0);
    }
    let mut items = Vec::with_capacity(sentences.len());
    for (s, p) in sentences.iter().zip(&preds) {
        items.push((s.id.as_str(), s.require_tags()?, p.as_slice()));
    }
    Ok(evaluate_tags(items)?.f1)
}

/// Trains a teacher on gold sentences, keeping the checkpoint with the best
/// dev micro-F1 under greedy decoding.
pub fn train_teacher(
    train: &[Sentence],
    dev: &[Sentence],
    tag_set: &TagSet,
    scheme: &SentinelScheme,
    config: &TeacherTrainConfig,
) -> Result<(ToyTeacher, TeacherReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("teacher training set is empty".into()));
    }
    let vocab = build_vocab(train, tag_set, scheme, config.max_sentinels);
    let mut teacher = ToyTeacher::new(vocab, tag_set.clone(), scheme.clone(), config.dims, config.seed)?;
    let data = examples(&teacher, train, config.unk_max_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7465_6163_6865_72);
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &teacher.store,
    );
    let mut grads = GradStore::zeros_like(&teacher.store);
    let mut report = TeacherReport {
        initial_loss: mean_target_nll(&teacher, train)?,
        best_dev_f1: f64::NEG_INFINITY,
        ..TeacherReport::default()
    };
    let mut best = teacher.store.clone();
    let mut stale_epochs = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_symbols = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            let symbols: usize = batch.iter().map(|&i| data[i].target.len()).sum();
            for &i in batch {
                let ex = &data[i];
                let mut input = ex.input.clone();
                for &pos in &ex.word_positions {
                    if config.unk_replace_prob > 0.0 && rng.gen_bool(config.unk_replace_prob) {
                        input[pos] = Vocab::UNK_ID;
                    }
                }
                let mut tape = Tape::with_params(&teacher.store);
                let nll = teacher.sequence_nll(&mut tape, &input, &ex.target)?;
                epoch_loss += tape.value(nll).item();
                let scaled = tape.scale(nll, 1.0 / symbols as f64);
                tape.backward_into(scaled, &mut grads)?;
            }
            epoch_symbols += symbols;
            grads.clip_global_norm(GRAD_CLIP_NORM);
            opt.step(&mut teacher.store, &grads);
        }
        teacher.clear_cache();
        report.epoch_losses.push(epoch_loss / epoch_symbols as f64);

        let f1 = if dev.is_empty() { 0.0 } else { decode_f1(&teacher, dev)? };
        teacher.clear_cache();
        report.dev_f1.push(f1);
        if f1 > report.best_dev_f1 {
            report.best_dev_f1 = f1;
            report.best_epoch = epoch;
            best = teacher.store.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }
    if !teacher.store.all_finite() {
        return Err(Error::Domain("teacher parameters diverged to non-finite values".into()));
    }
    teacher.set_params(best)?;
    Ok((teacher, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use crate::sbio::SbioTag;

    fn tiny_teacher(seed: u64) -> ToyTeacher {
        let tags = TagSet::new(["A", "B"]).unwrap();
        let scheme = SentinelScheme::default();
        let s = Sentence::new("x", vec!["p".into(), "q".into()], None).unwrap();
        let vocab = build_vocab([&s], &tags, &scheme, 3);
        let dims = TeacherDims {
            embedding: 3,
            encoder_hidden: 2,
            decoder_hidden: 3,
        };
        ToyTeacher::new(vocab, tags, scheme, dims, seed).unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let t = tiny_teacher(0);
        let v = t.vocab();
        assert_eq!(v.get("<extra_id_0>"), Some(3));
        assert!(v.get("<extra_id_3>").is_some());
        assert!(v.get("A").is_some() && v.get("I").is_some() && v.get("O").is_some());
        assert!(v.get("q").is_some());
    }

    #[test]
    fn score_is_sum_of_stepwise_log_probs() {
        let t = tiny_teacher(1);
        let input = "<extra_id_0> p <extra_id_1> q <extra_id_2>";
        let two = t.score(input, "<extra_id_0> A").unwrap();
        let first = t.step_log_probs(input, "", &["<extra_id_0>".into()]).unwrap()[0];
        let second = t.step_log_probs(input, "<extra_id_0>", &["A".into()]).unwrap()[0];
        assert!((two - (first + second)).abs() < 1e-12);
        let whole = t.step_log_probs(input, "", &["<extra_id_0> A".into()]).unwrap()[0];
        assert!((two - whole).abs() < 1e-12);
    }

    #[test]
    fn next_symbol_distributions_normalise() {
        let t = tiny_teacher(2);
        let ids = t.vocab().encode("<extra_id_0> p <extra_id_1>");
        let enc = t.encode_plain(&ids);
        let lp = t.next_log_probs(&enc, &[0.3, -0.2, 0.9], 5, None);
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(lp.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn batch_equals_pointwise_and_prefix_extension_never_gains() {
        let t = tiny_teacher(3);
        let input = "<extra_id_0> p <extra_id_1>";
        let cands: Vec<String> = ["<extra_id_0>", "<extra_id_0> A", "<extra_id_0> A <extra_id_1>", "zzz", ""]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let batch = t.score_batch(input, &cands).unwrap();
        let fresh = tiny_teacher(3);
        for (c, b) in cands.iter().zip(&batch) {
            assert_eq!(fresh.score(input, c).unwrap().to_bits(), b.to_bits());
            fresh.clear_cache();
        }
        assert!(batch[1] <= batch[0] && batch[2] <= batch[1]);
        assert_eq!(batch[4], 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = tiny_teacher(4);
        let input = t.vocab().encode("<extra_id_0> p <extra_id_1> q <extra_id_2>");
        let target = t.vocab().encode("<extra_id_0> A <extra_id_1> I <extra_id_2>");
        let report = check_param_gradients(
            t.params(),
            |tape| t.sequence_nll(tape, &input, &target),
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn save_load_round_trip() {
        let t = tiny_teacher(5);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let back = ToyTeacher::load(dir.path()).unwrap();
        assert_eq!(back.params().to_bytes(), t.params().to_bytes());
        let input = "<extra_id_0> p <extra_id_1>";
        assert_eq!(back.score(input, "<extra_id_0> B").unwrap(), t.score(input, "<extra_id_0> B").unwrap());
    }

    #[test]
    fn training_fits_a_single_sentence() {
        let tags = TagSet::new(["TRACK", "ARTIST"]).unwrap();
        let scheme = SentinelScheme::default();
        let tok = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let gold = vec![
            SbioTag::Outside,
            SbioTag::label("TRACK"),
            SbioTag::Outside,
            SbioTag::label("ARTIST"),
            SbioTag::Inside,
        ];
        let s = Sentence::new("s", tok("play wow by jon theodore"), Some(gold.clone())).unwrap();
        let config = TeacherTrainConfig {
            dims: TeacherDims {
                embedding: 8,
                encoder_hidden: 8,
                decoder_hidden: 8,
            },
            epochs: 150,
            patience: 150,
            learning_rate: 2e-2,
            unk_replace_prob: 0.0,
            max_sentinels: 6,
            seed: 7,
            ..TeacherTrainConfig::default()
        };
        let train = [s.clone()];
        let (teacher, report) = train_teacher(&train, &train, &tags, &scheme, &config).unwrap();
        let one = TeacherTrainConfig { epochs: 1, ..config.clone() };
        let (after_one, _) = train_teacher(&train, &[], &tags, &scheme, &one).unwrap();
        assert!(mean_target_nll(&after_one, &train).unwrap() < report.initial_loss);
        let (pred, _) = greedy(&teacher, &s.tokens, &tags, &scheme).unwrap();
        assert_eq!(pred, gold);
        let (best, _) = crate::decoder::exhaustive_oracle(&teacher, &s.tokens, &tags, &scheme, 1_000_000).unwrap();
        assert_eq!(best, gold);

        let (again, _) = train_teacher(&train, &train, &tags, &scheme, &config).unwrap();
        assert_eq!(again.params().to_bytes(), teacher.params().to_bytes());
        assert!(train_teacher(&[], &train, &tags, &scheme, &config).is_err());
    }
}
