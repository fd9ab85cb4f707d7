//! Synthetic corpus and feature generator.
//!
//! Sentences come from a sparse Markov chain over toy words whose unigram
//! popularity is Zipf-like, so a frequency cut separates common (head) words
//! from rare (tail) words. Each tail word is rendered with nearly the same
//! acoustic prototype as one head word that it rarely shares a context with:
//! the acoustics alone cannot tell the pair apart, the surrounding text can.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EOS: &str = "</s>";

/// Word inventory. Ids `0..V-1` are words, `V-1` is the end-of-sentence
/// token, `V` is blank and `V+1` the start sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut tokens = words;
        tokens.push(EOS.to_string());
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `V`: words plus end-of-sentence, blank excluded.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn blank(&self) -> usize {
        self.tokens.len()
    }

    pub fn start(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Result<Vec<usize>> {
        sentence
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::Data(format!("out-of-vocabulary token {}", w.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Data(format!("token id {i} outside vocabulary")))
            })
            .collect()
    }

    pub fn join(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The `size` most frequent word types, ordered by descending count, then
/// lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], size: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for w in s {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
    }
    counts.remove(EOS);
    if counts.len() < size {
        return Err(Error::Data(format!(
            "corpus has {} token types, vocabulary needs {size}",
            counts.len()
        )));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::new(ranked.into_iter().take(size).map(|(w, _)| w.to_string()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageConfig {
    pub words: usize,
    /// Successors per context.
    pub successors: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of ending once `min_len` is reached.
    pub stop_prob: f64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            words: 47,
            successors: 5,
            zipf_exponent: 0.5,
            min_len: 3,
            max_len: 8,
            stop_prob: 0.3,
        }
    }
}

/// Sparse first-order Markov language over toy words.
#[derive(Clone, Debug)]
pub struct ToyLanguage {
    pub words: Vec<String>,
    /// Row `w` lists `(successor, probability)`; the last row is the start
    /// context.
    transitions: Vec<Vec<(usize, f64)>>,
    config: LanguageConfig,
}

fn word_name(i: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut name = String::new();
    let mut n = i;
    loop {
        name.push_str(ONSETS[n % ONSETS.len()]);
        n /= ONSETS.len();
        name.push_str(NUCLEI[n % NUCLEI.len()]);
        n /= NUCLEI.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    name
}

impl ToyLanguage {
    pub fn generate(config: &LanguageConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.words < 2 || config.successors == 0 || config.successors > config.words {
            return Err(Error::Config("language needs at least two words and 1..=words successors".into()));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::Config("language needs 1 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&config.stop_prob) {
            return Err(Error::Config("language stop_prob must lie in [0, 1]".into()));
        }
        let words: Vec<String> = (0..config.words).map(word_name).collect();
        let popularity: Vec<f64> = (0..config.words)
            .map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf_exponent))
            .collect();
        // each word gets a host context that is the start or a more popular
        // word, so every word is reachable
        let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); config.words + 1];
        for w in 0..config.words {
            let host = rng.gen_range(0..=w);
            let host = if host == w { config.words } else { host };
            chosen[host].push(w);
        }
        let mut transitions = Vec::with_capacity(config.words + 1);
        for (ctx, row) in chosen.iter_mut().enumerate() {
            while row.len() < config.successors {
                let open: Vec<usize> = (0..config.words).filter(|w| !row.contains(w) && *w != ctx).collect();
                let Some(&fallback) = open.last() else { break };
                let total: f64 = open.iter().map(|&w| popularity[w]).sum();
                let mut x = rng.gen::<f64>() * total;
                let mut pick = fallback;
                for &w in &open {
                    x -= popularity[w];
                    if x <= 0.0 {
                        pick = w;
                        break;
                    }
                }
                row.push(pick);
            }
            row.sort_unstable();
            let weights: Vec<f64> = row.iter().map(|_| 0.5 + rng.gen::<f64>()).collect();
            let z: f64 = weights.iter().sum();
            transitions.push(row.iter().copied().zip(weights.into_iter().map(|x| x / z)).collect());
        }
        Ok(Self {
            words,
            transitions,
            config: config.clone(),
        })
    }

    pub fn successors(&self, context: Option<usize>) -> &[(usize, f64)] {
        &self.transitions[context.unwrap_or(self.words.len())]
    }

    pub fn sample_sentence(&self, rng: &mut impl Rng) -> Vec<String> {
        let mut out = Vec::new();
        let mut ctx = None;
        loop {
            let row = self.successors(ctx);
            let mut x = rng.gen::<f64>();
            let mut next = row[row.len() - 1].0;
            for &(w, p) in row {
                if x < p {
                    next = w;
                    break;
                }
                x -= p;
            }
            out.push(self.words[next].clone());
            ctx = Some(next);
            if out.len() >= self.config.max_len
                || (out.len() >= self.config.min_len && rng.gen::<f64>() < self.config.stop_prob)
            {
                return out;
            }
        }
    }

    pub fn sample_corpus(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec<String>> {
        (0..n).map(|_| self.sample_sentence(rng)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticConfig {
    pub feature_dim: usize,
    pub noise: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Distance between a tail word's prototype and its head partner's.
    pub tail_offset: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            noise: 0.1,
            min_frames: 2,
            max_frames: 4,
            tail_offset: 0.3,
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("acoustics need feature_dim >= 1 and 1 <= min_frames <= max_frames".into()));
        }
        if !(self.noise >= 0.0) || !(self.tail_offset >= 0.0) {
            return Err(Error::Config("acoustic noise and tail_offset must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-token prototype feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Acoustics {
    pub prototypes: Vec<Vec<f64>>,
    /// Tail token → the head token it sounds like.
    pub partners: BTreeMap<usize, usize>,
}

impl Acoustics {
    /// Head words get independent standard-normal prototypes; each tail word
    /// sits at `tail_offset` from its partner's.
    pub fn new(vocab_size: usize, partners: BTreeMap<usize, usize>, cfg: &AcousticConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut prototypes: Vec<Vec<f64>> = (0..vocab_size)
            .map(|_| (0..cfg.feature_dim).map(|_| normal.sample(rng)).collect())
            .collect();
        for (&tail, &head) in &partners {
            if tail >= vocab_size || head >= vocab_size {
                return Err(Error::Data(format!("partner pair ({tail}, {head}) outside vocabulary")));
            }
            let dir: Vec<f64> = (0..cfg.feature_dim).map(|_| normal.sample(rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let base = prototypes[head].clone();
            prototypes[tail] = base
                .iter()
                .zip(&dir)
                .map(|(b, d)| b + cfg.tail_offset * d / norm)
                .collect();
        }
        Ok(Self { prototypes, partners })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T_raw × d`.
    pub features: Tensor,
    pub transcript: Vec<usize>,
}

/// Renders each token as `min_frames..=max_frames` copies of its prototype
/// plus Gaussian noise.
pub fn synthesize_utterance(
    id: &str,
    sentence: &[usize],
    acoustics: &Acoustics,
    cfg: &AcousticConfig,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    if sentence.is_empty() {
        return Err(Error::Data(format!("utterance {id} has an empty transcript")));
    }
    let d = cfg.feature_dim;
    let mut values = Vec::new();
    let mut frames = 0;
    for &tok in sentence {
        let proto = acoustics
            .prototypes
            .get(tok)
            .ok_or_else(|| Error::Data(format!("out-of-vocabulary token id {tok} in {id}")))?;
        if proto.len() != d {
            return Err(Error::Data(format!("prototype width {} differs from feature_dim {d}", proto.len())));
        }
        let n = rng.gen_range(cfg.min_frames..=cfg.max_frames);
        for _ in 0..n {
            for &p in proto {
                let noise = if cfg.noise > 0.0 {
                    cfg.noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    0.0
                };
                values.push(p + noise);
            }
            frames += 1;
        }
    }
    Ok(Utterance {
        id: id.to_string(),
        features: Tensor::matrix(frames, d, values)?,
        transcript: sentence.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub head_fraction: f64,
    pub paired_train: usize,
    pub lm_text: usize,
    pub dev: usize,
    pub head_test: usize,
    pub tail_test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            head_fraction: 0.75,
            paired_train: 3000,
            lm_text: 30000,
            dev: 300,
            head_test: 300,
            tail_test: 300,
        }
    }
}

/// Text-level split. Dev holds head-only and tail sentences in equal parts.
#[derive(Clone, Debug, PartialEq)]
pub struct TailSplit {
    pub head: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
    pub paired_train: Vec<Vec<usize>>,
    pub lm_text: Vec<Vec<usize>>,
    pub dev: Vec<Vec<usize>>,
    pub head_test: Vec<Vec<usize>>,
    pub tail_test: Vec<Vec<usize>>,
}

/// Splits word types by frequency (end-of-sentence excluded) and sentences by
/// content. Held-out sentences are distinct texts never used for training.
pub fn make_tail_split(corpus: &[Vec<usize>], vocab: &Vocab, cfg: &SplitConfig, rng: &mut impl Rng) -> Result<TailSplit> {
    if !(cfg.head_fraction > 0.0 && cfg.head_fraction < 1.0) {
        return Err(Error::Config(format!(
            "head_fraction must lie strictly between 0 and 1, got {}",
            cfg.head_fraction
        )));
    }
    let eos = vocab.eos();
    let mut counts = vec![0usize; vocab.size()];
    for s in corpus {
        for &t in s {
            if t >= vocab.size() {
                return Err(Error::Data(format!("token id {t} outside vocabulary")));
            }
            counts[t] += 1;
        }
    }
    let mut words: Vec<usize> = (0..vocab.size()).filter(|&t| t != eos).collect();
    words.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let n_head = ((words.len() as f64) * cfg.head_fraction).round() as usize;
    let n_head = n_head.clamp(1, words.len().saturating_sub(1));
    let head: BTreeSet<usize> = words[..n_head].iter().copied().collect();
    let tail: BTreeSet<usize> = words[n_head..].iter().copied().collect();
    if tail.is_empty() {
        return Err(Error::Data("no tail tokens".into()));
    }

    let mut seen = HashSet::new();
    let mut head_types = Vec::new();
    let mut tail_types = Vec::new();
    for s in corpus {
        if s.is_empty() || !seen.insert(s.clone()) {
            continue;
        }
        if s.iter().any(|t| tail.contains(t)) {
            tail_types.push(s.clone());
        } else {
            head_types.push(s.clone());
        }
    }
    if tail_types.is_empty() {
        return Err(Error::Data("no tail-containing sentences available".into()));
    }
    head_types.shuffle(rng);
    tail_types.shuffle(rng);

    let dev_tail = cfg.dev / 2;
    let dev_head = cfg.dev - dev_tail;
    if tail_types.len() < cfg.tail_test + dev_tail {
        return Err(Error::Data(format!(
            "only {} distinct tail sentences, need {}",
            tail_types.len(),
            cfg.tail_test + dev_tail
        )));
    }
    if head_types.len() < cfg.head_test + dev_head + 1 {
        return Err(Error::Data(format!(
            "only {} distinct head-only sentences, need more than {}",
            head_types.len(),
            cfg.head_test + dev_head
        )));
    }
    let tail_test: Vec<Vec<usize>> = tail_types.drain(..cfg.tail_test).collect();
    let head_test: Vec<Vec<usize>> = head_types.drain(..cfg.head_test).collect();
    let mut dev: Vec<Vec<usize>> = head_types.drain(..dev_head).collect();
    dev.extend(tail_types.drain(..dev_tail));
    dev.shuffle(rng);

    let held_out: HashSet<&Vec<usize>> = tail_test.iter().chain(&head_test).chain(&dev).collect();
    let train_pool: Vec<&Vec<usize>> = corpus.iter().filter(|s| !s.is_empty() && !held_out.contains(s)).collect();
    let head_pool: Vec<&Vec<usize>> = train_pool
        .iter()
        .copied()
        .filter(|s| s.iter().all(|t| head.contains(t)))
        .collect();
    if head_pool.is_empty() {
        return Err(Error::Data("no head-only training sentences".into()));
    }
    // token-frequency faithful draws from the remaining corpus
    let paired_train: Vec<Vec<usize>> = (0..cfg.paired_train)
        .map(|_| head_pool[rng.gen_range(0..head_pool.len())].clone())
        .collect();
    let lm_text: Vec<Vec<usize>> = (0..cfg.lm_text)
        .map(|_| train_pool[rng.gen_range(0..train_pool.len())].clone())
        .collect();

    let split = TailSplit {
        head,
        tail,
        paired_train,
        lm_text,
        dev,
        head_test,
        tail_test,
    };
    split.audit()?;
    Ok(split)
}

impl TailSplit {
    /// Checks the split's invariants.
    pub fn audit(&self) -> Result<()> {
        let paired_tokens: HashSet<usize> = self.paired_train.iter().flatten().copied().collect();
        if let Some(t) = paired_tokens.iter().find(|t| self.tail.contains(t)) {
            return Err(Error::Data(format!("tail token {t} occurs in paired training data")));
        }
        if let Some(s) = self.tail_test.iter().find(|s| s.iter().all(|t| paired_tokens.contains(t))) {
            return Err(Error::Data(format!("tail test sentence {s:?} has no unseen token")));
        }
        let lm_tokens: HashSet<usize> = self.lm_text.iter().flatten().copied().collect();
        if !paired_tokens.is_subset(&lm_tokens) {
            return Err(Error::Data("lm text does not cover the paired vocabulary".into()));
        }
        let train: HashSet<&Vec<usize>> = self.paired_train.iter().chain(&self.lm_text).collect();
        for (name, set) in [("dev", &self.dev), ("head_test", &self.head_test), ("tail_test", &self.tail_test)] {
            if set.iter().any(|s| train.contains(s)) {
                return Err(Error::Data(format!("{name} overlaps training text")));
            }
        }
        let mut held = HashSet::new();
        for s in self.dev.iter().chain(&self.head_test).chain(&self.tail_test) {
            if !held.insert(s) {
                return Err(Error::Data("held-out sets share a sentence".into()));
            }
        }
        Ok(())
    }

    /// Pairs each tail token with the head token it least often shares a
    /// context with (ties: fewest partners so far, then lowest id).
    pub fn choose_partners(&self, corpus: &[Vec<usize>], start: usize) -> BTreeMap<usize, usize> {
        let mut contexts: HashMap<usize, HashSet<usize>> = HashMap::new();
        for s in corpus {
            let mut prev = start;
            for &t in s {
                contexts.entry(t).or_default().insert(prev);
                prev = t;
            }
        }
        let empty = HashSet::new();
        let mut used: HashMap<usize, usize> = HashMap::new();
        let mut out = BTreeMap::new();
        for &t in &self.tail {
            let ct = contexts.get(&t).unwrap_or(&empty);
            let best = self
                .head
                .iter()
                .copied()
                .min_by_key(|h| {
                    let shared = contexts.get(h).unwrap_or(&empty).intersection(ct).count();
                    (shared, used.get(h).copied().unwrap_or(0), *h)
                })
                .expect("head set is non-empty");
            *used.entry(best).or_default() += 1;
            out.insert(t, best);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub language: LanguageConfig,
    pub acoustics: AcousticConfig,
    pub split: SplitConfig,
    /// Sentences drawn before splitting.
    pub corpus_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            language: LanguageConfig::default(),
            acoustics: AcousticConfig::default(),
            split: SplitConfig::default(),
            corpus_size: 60000,
        }
    }
}

/// Everything an experiment consumes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub split: TailSplit,
    pub acoustics: Acoustics,
    pub paired_train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub head_test: Vec<Utterance>,
    pub tail_test: Vec<Utterance>,
}

fn synthesize_set(prefix: &str, sentences: &[Vec<usize>], ac: &Acoustics, cfg: &AcousticConfig, rng: &mut impl Rng) -> Result<Vec<Utterance>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| synthesize_utterance(&format!("{prefix}-{i:05}"), s, ac, cfg, rng))
        .collect()
}

/// Generates the language, corpus, split, acoustics and utterances from a
/// single seeded rng.
pub fn generate_dataset(cfg: &DataConfig, rng: &mut impl Rng) -> Result<Dataset> {
    let language = ToyLanguage::generate(&cfg.language, rng)?;
    let text = language.sample_corpus(cfg.corpus_size, rng);
    let vocab = build_vocab(&text, cfg.language.words)?;
    let corpus: Vec<Vec<usize>> = text.iter().map(|s| vocab.encode(s)).collect::<Result<_>>()?;
    let split = make_tail_split(&corpus, &vocab, &cfg.split, rng)?;
    let partners = split.choose_partners(&corpus, vocab.start());
    let acoustics = Acoustics::new(vocab.size(), partners, &cfg.acoustics, rng)?;
    let paired_train = synthesize_set("train", &split.paired_train, &acoustics, &cfg.acoustics, rng)?;
    let dev = synthesize_set("dev", &split.dev, &acoustics, &cfg.acoustics, rng)?;
    let head_test = synthesize_set("head", &split.head_test, &acoustics, &cfg.acoustics, rng)?;
    let tail_test = synthesize_set("tail", &split.tail_test, &acoustics, &cfg.acoustics, rng)?;
    Ok(Dataset {
        vocab,
        split,
        acoustics,
        paired_train,
        dev,
        head_test,
        tail_test,
    })
}

/// One utterance per line: `id \t tokens \t T_rawxd,v,v,...`.
pub fn write_utterances(path: &Path, utts: &[Utterance], vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        let (rows, cols) = u.features.rows_cols();
        write!(w, "{}\t{}\t{rows}x{cols}", u.id, vocab.join(&u.transcript))?;
        for v in u.features.values() {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_utterances(path: &Path, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), n + 1));
        let mut fields = line.split('\t');
        let (Some(id), Some(text), Some(feats), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected three tab-separated fields"));
        };
        let words: Vec<&str> = text.split_whitespace().collect();
        let transcript = vocab.encode(&words)?;
        let mut parts = feats.split(',');
        let header = parts.next().ok_or_else(|| bad("missing feature header"))?;
        let (r, c) = header.split_once('x').ok_or_else(|| bad("feature header must be T_rawxd"))?;
        let rows: usize = r.parse().map_err(|_| bad("bad frame count"))?;
        let cols: usize = c.parse().map_err(|_| bad("bad feature width"))?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|_| bad("bad feature value")))
            .collect::<Result<_>>()?;
        let features = Tensor::matrix(rows, cols, values).map_err(|e| bad(&e.to_string()))?;
        out.push(Utterance {
            id: id.to_string(),
            features,
            transcript,
        });
    }
    Ok(out)
}

/// One sentence per line, space-joined tokens.
pub fn write_sentences(path: &Path, sentences: &[Vec<usize>], vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sentences {
        writeln!(w, "{}", vocab.join(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sentences(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let words: Vec<&str> = line.split_whitespace().collect();
        if !words.is_empty() {
            out.push(vocab.encode(&words)?);
        }
    }
    Ok(out)
}

/// Writes a dataset as plain files under `dir`: `vocab.tsv` (token and its
/// head/tail class), `acoustics.tsv`, the four utterance sets and the text
/// sets.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("vocab.tsv"))?);
    for (i, t) in data.vocab.tokens().iter().enumerate() {
        let class = if i == data.vocab.eos() {
            "eos"
        } else if data.split.tail.contains(&i) {
            "tail"
        } else {
            "head"
        };
        writeln!(w, "{t}\t{class}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("acoustics.tsv"))?);
    for (i, proto) in data.acoustics.prototypes.iter().enumerate() {
        let partner = data.acoustics.partners.get(&i).map_or("-".to_string(), |p| p.to_string());
        let values: Vec<String> = proto.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{i}\t{partner}\t{}", values.join(","))?;
    }
    w.flush()?;

    write_utterances(&dir.join("train.tsv"), &data.paired_train, &data.vocab)?;
    write_utterances(&dir.join("dev.tsv"), &data.dev, &data.vocab)?;
    write_utterances(&dir.join("head_test.tsv"), &data.head_test, &data.vocab)?;
    write_utterances(&dir.join("tail_test.tsv"), &data.tail_test, &data.vocab)?;
    write_sentences(&dir.join("lm_text.txt"), &data.split.lm_text, &data.vocab)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("vocab.tsv"))?;
    let mut words = Vec::new();
    let mut classes = Vec::new();
    for (n, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let (tok, class) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("vocab.tsv:{}: expected token and class", n + 1)))?;
        if class != "eos" {
            words.push(tok.to_string());
            classes.push(class.to_string());
        }
    }
    let vocab = Vocab::new(words)?;
    let mut head = BTreeSet::new();
    let mut tail = BTreeSet::new();
    for (i, c) in classes.iter().enumerate() {
        match c.as_str() {
            "head" => head.insert(i),
            "tail" => tail.insert(i),
            other => return Err(Error::Data(format!("vocab.tsv: unknown class {other}"))),
        };
    }

    let text = std::fs::read_to_string(dir.join("acoustics.tsv"))?;
    let mut prototypes = Vec::new();
    let mut partners = BTreeMap::new();
    for (n, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let bad = || Error::Data(format!("acoustics.tsv:{}: malformed line", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields[0].parse::<usize>().ok() != Some(n) {
            return Err(bad());
        }
        if fields[1] != "-" {
            partners.insert(n, fields[1].parse().map_err(|_| bad())?);
        }
        prototypes.push(
            fields[2]
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let paired_train = read_utterances(&dir.join("train.tsv"), &vocab)?;
    let dev = read_utterances(&dir.join("dev.tsv"), &vocab)?;
    let head_test = read_utterances(&dir.join("head_test.tsv"), &vocab)?;
    let tail_test = read_utterances(&dir.join("tail_test.tsv"), &vocab)?;
    let transcripts = |u: &[Utterance]| u.iter().map(|u| u.transcript.clone()).collect::<Vec<_>>();
    let split = TailSplit {
        head,
        tail,
        paired_train: transcripts(&paired_train),
        lm_text: read_sentences(&dir.join("lm_text.txt"), &vocab)?,
        dev: transcripts(&dev),
        head_test: transcripts(&head_test),
        tail_test: transcripts(&tail_test),
    };
    split.audit()?;
    Ok(Dataset {
        vocab,
        split,
        acoustics: Acoustics { prototypes, partners },
        paired_train,
        dev,
        head_test,
        tail_test,
    })
}
