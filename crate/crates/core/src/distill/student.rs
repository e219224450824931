//! BiLSTM tagger: word embedding plus a character BiLSTM summary per token,
//! a word-level BiLSTM, and a linear layer to tag logits. No CRF.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{create_file, open_file, Error, Result};
use crate::nn::lstm::run_direction;
use crate::nn::tensor::softmax;
use crate::nn::{LstmParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sbio::{valid_next_indices, SbioTag, TagSet};
use crate::scorer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub word_emb_dim: usize,
    pub char_emb_dim: usize,
    /// Both directions together; each direction gets half.
    pub char_bilstm_hidden: usize,
    /// Both directions together; each direction gets half.
    pub word_bilstm_hidden: usize,
    /// GloVe-style text file, `word v_1 … v_d` per line.
    pub pretrained_embedding_path: Option<PathBuf>,
    pub freeze_pretrained: bool,
    pub dropout: f64,
    pub epochs: usize,
    /// Epochs without a dev micro-F1 improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            word_emb_dim: 100,
            char_emb_dim: 25,
            char_bilstm_hidden: 50,
            word_bilstm_hidden: 200,
            pretrained_embedding_path: None,
            freeze_pretrained: false,
            dropout: 0.0,
            epochs: 100,
            patience: 25,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_emb_dim == 0 || self.char_emb_dim == 0 {
            return Err(Error::Config("student embedding sizes must be positive".into()));
        }
        for (name, v) in [
            ("char_bilstm_hidden", self.char_bilstm_hidden),
            ("word_bilstm_hidden", self.word_bilstm_hidden),
        ] {
            if v == 0 || v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be a positive even number, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("student epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("student learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentDims {
    pub word_emb: usize,
    pub char_emb: usize,
    /// Per direction.
    pub char_hidden: usize,
    /// Per direction.
    pub word_hidden: usize,
}

impl From<&StudentConfig> for StudentDims {
    fn from(c: &StudentConfig) -> Self {
        StudentDims {
            word_emb: c.word_emb_dim,
            char_emb: c.char_emb_dim,
            char_hidden: c.char_bilstm_hidden / 2,
            word_hidden: c.word_bilstm_hidden / 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct StudentParams {
    word_embed: ParamId,
    char_embed: ParamId,
    char_fw: LstmParams,
    char_bw: LstmParams,
    word_fw: LstmParams,
    word_bw: LstmParams,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Serialize, Deserialize)]
struct StudentMeta {
    dims: StudentDims,
    words: Vocab,
    chars: Vocab,
    tag_set: TagSet,
}

/// Per-position logits and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput {
    pub logits: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

impl StudentOutput {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let q = logits.iter().map(|r| softmax(r)).collect();
        StudentOutput { logits, q }
    }
}

#[derive(Clone, Debug)]
pub struct Student {
    dims: StudentDims,
    words: Vocab,
    chars: Vocab,
    tag_set: TagSet,
    pub(crate) store: ParamStore,
    params: StudentParams,
}

/// Reads GloVe-style text vectors. All rows must share one dimension.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<HashMap<String, Vec<f64>>> {
    use std::io::BufRead;
    let path = path.as_ref();
    let reader = BufReader::new(open_file(path)?);
    let mut out = HashMap::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split(' ').filter(|p| !p.is_empty());
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad vector component: {e}"),
            })?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {d} components, found {}", values.len()),
                })
            }
            _ => {}
        }
        out.insert(word.to_string(), values);
    }
    Ok(out)
}

impl Student {
    /// Builds vocabularies from `training_tokens` and initialises parameters.
    pub fn new<'a, I>(training_tokens: I, tag_set: &TagSet, config: &StudentConfig) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        config.validate()?;
        let mut words = Vocab::new();
        let mut chars = Vocab::new();
        for sent in training_tokens {
            for tok in sent {
                words.add(tok);
                for ch in tok.chars() {
                    chars.add(ch.encode_utf8(&mut [0u8; 4]));
                }
            }
        }
        let pretrained = match &config.pretrained_embedding_path {
            Some(p) => Some(load_embeddings(p)?),
            None => None,
        };
        Self::init(words, chars, tag_set.clone(), StudentDims::from(config), pretrained.as_ref(), config.seed)
    }

    fn init(
        words: Vocab,
        chars: Vocab,
        tag_set: TagSet,
        dims: StudentDims,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bound = 1.0 / (dims.word_emb as f64).sqrt();
        let mut table: Vec<f64> = (0..words.len() * dims.word_emb)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        if let Some(vectors) = pretrained {
            for id in 0..words.len() {
                if let Some(v) = vectors.get(words.symbol(id)) {
                    if v.len() != dims.word_emb {
                        return Err(Error::Config(format!(
                            "pretrained vectors have {} dimensions but word_emb_dim is {}",
                            v.len(),
                            dims.word_emb
                        )));
                    }
                    table[id * dims.word_emb..(id + 1) * dims.word_emb].copy_from_slice(v);
                }
            }
        }
        let word_embed = store.insert("word_embed", Tensor::new(words.len(), dims.word_emb, table)?)?;
        let cbound = 1.0 / (dims.char_emb as f64).sqrt();
        let ctable = (0..chars.len() * dims.char_emb)
            .map(|_| rng.gen_range(-cbound..cbound))
            .collect();
        let char_embed = store.insert("char_embed", Tensor::new(chars.len(), dims.char_emb, ctable)?)?;
        let char_fw = LstmParams::init(&mut store, "char.fw", dims.char_emb, dims.char_hidden, &mut rng)?;
        let char_bw = LstmParams::init(&mut store, "char.bw", dims.char_emb, dims.char_hidden, &mut rng)?;
        let feat = dims.word_emb + 2 * dims.char_hidden;
        let word_fw = LstmParams::init(&mut store, "word.fw", feat, dims.word_hidden, &mut rng)?;
        let word_bw = LstmParams::init(&mut store, "word.bw", feat, dims.word_hidden, &mut rng)?;
        let out_w = store.init_weight("out.w", 2 * dims.word_hidden, tag_set.full_len(), &mut rng)?;
        let out_b = store.init_zeros("out.b", 1, tag_set.full_len())?;
        Ok(Student {
            dims,
            words,
            chars,
            tag_set,
            store,
            params: StudentParams {
                word_embed,
                char_embed,
                char_fw,
                char_bw,
                word_fw,
                word_bw,
                out_w,
                out_b,
            },
        })
    }

    pub fn tag_set(&self) -> &TagSet {
        &self.tag_set
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn word_vocab(&self) -> &Vocab {
        &self.words
    }

    pub(crate) fn word_embed_id(&self) -> ParamId {
        self.params.word_embed
    }

    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len()
            || self
                .store
                .iter()
                .zip(store.iter())
                .any(|((_, n1, t1), (_, n2, t2))| n1 != n2 || t1.shape() != t2.shape())
        {
            return Err(Error::ParamFormat("student parameter layout does not match".into()));
        }
        self.store = store;
        Ok(())
    }

    /// Writes `student.json` and `student.params` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let meta = StudentMeta {
            dims: self.dims,
            words: self.words.clone(),
            chars: self.chars.clone(),
            tag_set: self.tag_set.clone(),
        };
        serde_json::to_writer(BufWriter::new(create_file(&dir.join("student.json"))?), &meta)?;
        self.store
            .write_to(BufWriter::new(create_file(&dir.join("student.params"))?))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: StudentMeta =
            serde_json::from_reader(BufReader::new(open_file(&dir.join("student.json"))?))?;
        let store = ParamStore::read_from(BufReader::new(open_file(&dir.join("student.params"))?))?;
        let mut s = Student::init(meta.words, meta.chars, meta.tag_set, meta.dims, None, 0)?;
        s.set_params(store)?;
        Ok(s)
    }

    /// Logits for a batch of sentences, `N × |T̄|` with the rows of each
    /// sentence contiguous and in batch order. `dropout` is `(rate, rng)`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&[String]],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("student input contains an empty sentence".into()));
        }
        let d = self.dims;
        let p = &self.params;
        let tokens: Vec<&String> = batch.iter().flat_map(|s| s.iter()).collect();
        let n = tokens.len();

        // character summaries, all tokens of the batch at once
        let char_ids: Vec<Vec<usize>> = tokens
            .iter()
            .map(|t| {
                t.chars()
                    .map(|c| self.chars.id_or_unk(c.encode_utf8(&mut [0u8; 4])))
                    .collect()
            })
            .collect();
        let max_chars = char_ids.iter().map(Vec::len).max().unwrap_or(0);
        let char_table = tape.param(p.char_embed);
        let mut steps = Vec::with_capacity(max_chars);
        let mut masks = Vec::with_capacity(max_chars);
        for c in 0..max_chars {
            let ids: Vec<usize> = char_ids
                .iter()
                .map(|w| w.get(c).copied().unwrap_or(Vocab::UNK_ID))
                .collect();
            steps.push(tape.gather_rows(char_table, &ids)?);
            masks.push(row_mask(char_ids.iter().map(|w| c < w.len()), d.char_hidden));
        }
        let cfw = p.char_fw.bind(tape);
        let cbw = p.char_bw.bind(tape);
        let fw = run_direction(tape, &steps, Some(&masks), &cfw, false)?;
        let bw = run_direction(tape, &steps, Some(&masks), &cbw, true)?;
        let word_table = tape.param(p.word_embed);
        let word_ids: Vec<usize> = tokens.iter().map(|t| self.words.id_or_unk(t)).collect();
        let wemb = tape.gather_rows(word_table, &word_ids)?;
        let mut feats = tape.concat_cols(&[wemb, fw[max_chars - 1], bw[0]])?;
        if let Some((rate, rng)) = dropout.as_mut() {
            feats = tape.dropout(feats, *rate, *rng);
        }

        // word level, padded to the longest sentence
        let zero = tape.constant(Tensor::zeros(1, d.word_emb + 2 * d.char_hidden));
        let padded = tape.concat_rows(&[feats, zero])?;
        let max_len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        let offsets: Vec<usize> = batch
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.len();
                Some(o)
            })
            .collect();
        let mut steps = Vec::with_capacity(max_len);
        let mut masks = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let ids: Vec<usize> = batch
                .iter()
                .zip(&offsets)
                .map(|(s, &o)| if t < s.len() { o + t } else { n })
                .collect();
            steps.push(tape.gather_rows(padded, &ids)?);
            masks.push(row_mask(batch.iter().map(|s| t < s.len()), d.word_hidden));
        }
        let wfw = p.word_fw.bind(tape);
        let wbw = p.word_bw.bind(tape);
        let fw = run_direction(tape, &steps, Some(&masks), &wfw, false)?;
        let bw = run_direction(tape, &steps, Some(&masks), &wbw, true)?;
        let mut per_step = Vec::with_capacity(max_len);
        for t in 0..max_len {
            per_step.push(tape.concat_cols(&[fw[t], bw[t]])?);
        }
        let stacked = tape.concat_rows(&per_step)?;
        let b = batch.len();
        let order: Vec<usize> = batch
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.len()).map(move |t| t * b + i))
            .collect();
        let mut hidden = tape.gather_rows(stacked, &order)?;
        if let Some((rate, rng)) = dropout.as_mut() {
            hidden = tape.dropout(hidden, *rate, *rng);
        }
        let out_w = tape.param(p.out_w);
        let out_b = tape.param(p.out_b);
        let logits = tape.matmul(hidden, out_w)?;
        tape.add_row(logits, out_b)
    }

    pub fn forward(&self, tokens: &[String]) -> Result<StudentOutput> {
        let mut tape = Tape::with_params(&self.store);
        let logits = self.forward_batch(&mut tape, &[tokens], None)?;
        let t = tape.value(logits);
        Ok(StudentOutput::from_logits(
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
        ))
    }

    /// Logits per sentence, computed in chunks of `batch_size`.
    pub fn logits_many(&self, sentences: &[&[String]], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let mut tape = Tape::with_params(&self.store);
            let logits = self.forward_batch(&mut tape, chunk, None)?;
            let t = tape.value(logits);
            let mut row = 0;
            for s in chunk {
                out.push((row..row + s.len()).map(|r| t.row(r).to_vec()).collect());
                row += s.len();
            }
        }
        Ok(out)
    }

    pub fn predict(&self, tokens: &[String]) -> Result<Vec<SbioTag>> {
        Ok(masked_argmax(&self.forward(tokens)?.logits, &self.tag_set))
    }

    pub fn predict_many(&self, sentences: &[&[String]], raw: bool) -> Result<Vec<Vec<SbioTag>>> {
        Ok(self
            .logits_many(sentences, 64)?
            .iter()
            .map(|l| {
                if raw {
                    raw_argmax(l, &self.tag_set)
                } else {
                    masked_argmax(l, &self.tag_set)
                }
            })
            .collect())
    }
}

fn row_mask(active: impl Iterator<Item = bool>, width: usize) -> Tensor {
    let rows: Vec<bool> = active.collect();
    let mut data = Vec::with_capacity(rows.len() * width);
    for on in &rows {
        data.extend(std::iter::repeat(if *on { 1.0 } else { 0.0 }).take(width));
    }
    Tensor::new(rows.len(), width, data).expect("consistent shape")
}

fn argmax(row: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = None;
    for (i, &v) in row.iter().enumerate() {
        if !allowed(i) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

/// Left-to-right argmax over the tags allowed after the prefix chosen so far.
pub fn masked_argmax(logits: &[Vec<f64>], tag_set: &TagSet) -> Vec<SbioTag> {
    let mut idx = Vec::with_capacity(logits.len());
    for row in logits {
        let mask = valid_next_indices(&idx, tag_set);
        idx.push(argmax(row, |i| mask[i]));
    }
    idx.into_iter().map(|i| tag_set.tag_at(i)).collect()
}

/// Per-position argmax with no structural constraint.
pub fn raw_argmax(logits: &[Vec<f64>], tag_set: &TagSet) -> Vec<SbioTag> {
    logits.iter().map(|r| tag_set.tag_at(argmax(r, |_| true))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use crate::sbio::is_valid_sbio;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn tiny() -> Student {
        let cfg = StudentConfig {
            word_emb_dim: 3,
            char_emb_dim: 2,
            char_bilstm_hidden: 4,
            word_bilstm_hidden: 4,
            seed: 11,
            ..StudentConfig::default()
        };
        let sents = [toks("play wow by jon"), toks("ab c")];
        Student::new(sents.iter().map(|s| s.as_slice()), &TagSet::new(["A", "B"]).unwrap(), &cfg).unwrap()
    }

    #[test]
    fn output_shape_and_normalisation() {
        let s = tiny();
        for n in 1..5 {
            let out = s.forward(&toks(&vec!["wow"; n].join(" "))).unwrap();
            assert_eq!(out.logits.len(), n);
            assert!(out.logits.iter().all(|r| r.len() == 4));
            for q in &out.q {
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(s.forward(&[]).is_err());
    }

    #[test]
    fn batched_rows_equal_single_runs() {
        let s = tiny();
        let a = toks("play wow by jon");
        let b = toks("zz");
        let c = toks("c ab");
        let batch = s.logits_many(&[&a, &b, &c], 8).unwrap();
        for (sent, rows) in [&a, &b, &c].iter().zip(&batch) {
            assert_eq!(&s.forward(sent).unwrap().logits, rows);
        }
    }

    #[test]
    fn masked_prediction_is_valid_and_raw_may_not_be() {
        let tags = TagSet::new(["A"]).unwrap();
        // I scores highest everywhere
        let logits = vec![vec![0.0, 5.0, 1.0], vec![0.0, 5.0, 1.0]];
        assert_eq!(masked_argmax(&logits, &tags), vec![SbioTag::Outside, SbioTag::Outside]);
        let logits = vec![vec![2.0, 5.0, 1.0], vec![0.0, 5.0, 1.0]];
        assert_eq!(masked_argmax(&logits, &tags), vec![SbioTag::label("A"), SbioTag::Inside]);
        let raw = raw_argmax(&[vec![0.0, 5.0, 1.0]], &tags);
        assert!(!is_valid_sbio(&raw));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = tiny();
        let batch = [toks("play wow"), toks("jon"), toks("ab zz c")];
        let refs: Vec<&[String]> = batch.iter().map(|v| v.as_slice()).collect();
        let mut weights = Tensor::zeros(6, 4);
        for (r, t) in [0usize, 2, 1, 3, 0, 1].iter().enumerate() {
            weights.data_mut()[r * 4 + t] = 1.0;
        }
        let report = check_param_gradients(
            s.params(),
            |tape| {
                let l = s.forward_batch(tape, &refs, None)?;
                let lq = tape.log_softmax_rows(l);
                crate::nn::loss::weighted_nll(tape, lq, &weights)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn permuting_the_tag_order_permutes_logit_columns() {
        let cfg = StudentConfig {
            word_emb_dim: 3,
            char_emb_dim: 2,
            char_bilstm_hidden: 2,
            word_bilstm_hidden: 2,
            ..StudentConfig::default()
        };
        let sents = [toks("x y")];
        let a = Student::new(sents.iter().map(|s| s.as_slice()), &TagSet::new(["A", "B"]).unwrap(), &cfg).unwrap();
        let mut b = Student::new(sents.iter().map(|s| s.as_slice()), &TagSet::new(["B", "A"]).unwrap(), &cfg).unwrap();
        // same weights with the first two output columns swapped
        let mut store = a.params().clone();
        for name in ["out.w", "out.b"] {
            let id = store.id(name).unwrap();
            let t = store.get_mut(id);
            let cols = t.cols();
            for r in 0..t.rows() {
                t.data_mut().swap(r * cols, r * cols + 1);
            }
        }
        b.set_params(store).unwrap();
        let la = a.forward(&sents[0]).unwrap().logits;
        let lb = b.forward(&sents[0]).unwrap().logits;
        for (ra, rb) in la.iter().zip(&lb) {
            assert_eq!((ra[0], ra[1], ra[2], ra[3]), (rb[1], rb[0], rb[2], rb[3]));
        }
    }

    #[test]
    fn save_load_and_pretrained_rows() {
        let dir = tempfile::tempdir().unwrap();
        let glove = dir.path().join("vec.txt");
        std::fs::write(&glove, "wow 0.5 -1 2\nnope 1 1 1\n").unwrap();
        let cfg = StudentConfig {
            word_emb_dim: 3,
            char_emb_dim: 2,
            char_bilstm_hidden: 2,
            word_bilstm_hidden: 2,
            pretrained_embedding_path: Some(glove.clone()),
            ..StudentConfig::default()
        };
        let sents = [toks("play wow")];
        let s = Student::new(sents.iter().map(|s| s.as_slice()), &TagSet::new(["A"]).unwrap(), &cfg).unwrap();
        let row = s.word_vocab().get("wow").unwrap();
        assert_eq!(s.params().by_name("word_embed").unwrap().row(row), &[0.5, -1.0, 2.0]);
        s.save(dir.path().join("m")).unwrap();
        let back = Student::load(dir.path().join("m")).unwrap();
        assert_eq!(back.params().to_bytes(), s.params().to_bytes());
        assert_eq!(back.predict(&sents[0]).unwrap(), s.predict(&sents[0]).unwrap());

        std::fs::write(&glove, "a 1 2\nb 1\n").unwrap();
        assert!(matches!(load_embeddings(&glove), Err(Error::Parse { line: 2, .. })));
    }
}
