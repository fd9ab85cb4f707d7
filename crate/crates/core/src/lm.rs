//! Recurrent word-level language model over the transducer's vocabulary
//! (no blank), with mixture sampling over text sources and early-stopped
//! training on held-out log perplexity.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{lstm_step, LayerState, LayerVars, Linear, LstmCell};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 1,
            hidden: 64,
            vocab_size: 48,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("lm.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Same id as the transducer's blank; never a valid LM input.
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn start(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Per-layer LSTM states plus the number of tokens consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub layers: Vec<LayerState>,
    pub steps: usize,
}

/// Next-token distribution after some context.
#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RnnLm {
    pub config: LmConfig,
    pub store: ParamStore,
    embed: ParamId,
    cells: Vec<LstmCell>,
    out: Linear,
}

impl RnnLm {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        // rows 0..V are tokens, row V is the start sentinel
        let embed = store.add_uniform("lm.embed", vec![config.vocab_size + 1, config.embed_dim], 1.0, rng)?;
        let mut cells = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let input = if i == 0 { config.embed_dim } else { config.hidden };
            cells.push(LstmCell::new(&mut store, &format!("lm.l{i}"), input, config.hidden, rng)?);
        }
        let out = Linear::new(&mut store, "lm.out", config.hidden, config.vocab_size, true, rng)?;
        Ok(Self {
            config,
            store,
            embed,
            cells,
            out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_values()
    }

    pub fn initial_state(&self) -> LmState {
        LmState {
            layers: (0..self.config.layers).map(|_| LayerState::zeros(self.config.hidden)).collect(),
            steps: 0,
        }
    }

    fn embed_row(&self, token: usize) -> Result<usize> {
        let c = &self.config;
        if token == c.blank() {
            Err(Error::Contract("blank cannot be fed to the language model".into()))
        } else if token == c.start() {
            Ok(c.vocab_size)
        } else if token < c.vocab_size {
            Ok(token)
        } else {
            Err(Error::Contract(format!("token {token} outside vocabulary")))
        }
    }

    /// One step on a tape, returning the logits node.
    fn step_on(&self, tape: &mut Tape, token: usize, layers: &mut [LayerVars]) -> Result<Var> {
        let row = self.embed_row(token)?;
        let table = tape.param(&self.store, self.embed);
        let at: Vec<(usize, usize)> = (0..self.config.embed_dim).map(|j| (row, j)).collect();
        let mut x = tape.select(table, &at)?;
        for (cell, st) in self.cells.iter().zip(layers.iter_mut()) {
            let vars = cell.vars(tape, &self.store);
            let (h, c) = lstm_step(tape, x, st.h, st.c, &vars)?;
            *st = LayerVars { h, c };
            x = h;
        }
        self.out.forward(tape, &self.store, x)
    }

    /// Consumes `token` and returns the distribution over the next token.
    pub fn lm_step(&self, token: usize, state: &LmState) -> Result<(LmOutput, LmState)> {
        let mut tape = Tape::new();
        let mut layers: Vec<LayerVars> = state.layers.iter().map(|s| LayerVars::from_state(&mut tape, s)).collect();
        let logits = self.step_on(&mut tape, token, &mut layers)?;
        let logits = tape.value(logits).to_vec();
        let log_probs = crate::autodiff::log_softmax_checked(&logits)?;
        let next = LmState {
            layers: layers.iter().map(|v| v.to_state(&tape)).collect(),
            steps: state.steps + 1,
        };
        Ok((LmOutput { logits, log_probs }, next))
    }

    /// Distribution after the start sentinel, plus the resulting state.
    pub fn start(&self) -> Result<(LmOutput, LmState)> {
        self.lm_step(self.config.start(), &self.initial_state())
    }

    /// Logits after each prefix `<s>`, `<s> y1`, …, `<s> y1..yU` (`U+1` rows).
    pub fn prefix_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (first, mut state) = self.start()?;
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        rows.push(first.logits);
        for &t in tokens {
            let (out, next) = self.lm_step(t, &state)?;
            rows.push(out.logits);
            state = next;
        }
        Ok(rows)
    }

    /// `Σ log P(w_i | w_<i)` including the end-of-sentence token when given.
    pub fn sentence_log_prob(&self, sentence: &[usize], eos: Option<usize>) -> Result<(f64, usize)> {
        let (mut out, mut state) = self.start()?;
        let mut total = 0.0;
        let mut count = 0;
        for (i, &w) in sentence.iter().chain(eos.iter()).enumerate() {
            let lp = *out
                .log_probs
                .get(w)
                .ok_or_else(|| Error::Contract(format!("token {w} outside vocabulary")))?;
            total += lp;
            count += 1;
            if i < sentence.len() {
                let (o, s) = self.lm_step(w, &state)?;
                out = o;
                state = s;
            }
        }
        Ok((total, count))
    }

    /// Mean negative log-likelihood of `targets` on a tape (teacher forcing).
    pub fn loss_on_tape(&self, tape: &mut Tape, sentence: &[usize], eos: usize) -> Result<Var> {
        let mut layers: Vec<LayerVars> = self
            .initial_state()
            .layers
            .iter()
            .map(|s| LayerVars::from_state(tape, s))
            .collect();
        let inputs = std::iter::once(self.config.start()).chain(sentence.iter().copied());
        let targets: Vec<usize> = sentence.iter().copied().chain(std::iter::once(eos)).collect();
        let mut rows = Vec::with_capacity(targets.len());
        for tok in inputs {
            rows.push(self.step_on(tape, tok, &mut layers)?);
        }
        let logits = tape.stack_rows(&rows)?;
        let lp = tape.log_softmax_rows(logits)?;
        let v = self.config.vocab_size;
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!("target token {bad} outside vocabulary")));
        }
        let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, &t)| (r, t)).collect();
        let picked = tape.select(lp, &at)?;
        let total = tape.sum(picked)?;
        tape.scale(total, -1.0 / targets.len() as f64)
    }
}

/// Mean per-token negative log-probability (natural log), end-of-sentence
/// included.
pub fn log_perplexity(lm: &RnnLm, corpus: &[Vec<usize>], eos: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("log perplexity needs a non-empty corpus".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for s in corpus {
        let (lp, n) = lm.sentence_log_prob(s, Some(eos))?;
        total += lp;
        count += n;
    }
    Ok(-total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextSource {
    pub name: String,
    pub sentences: Vec<Vec<usize>>,
    pub weight: f64,
}

/// Draws sentences: source `i` with probability `weight_i`, then uniformly
/// within the source.
#[derive(Clone, Debug)]
pub struct MixtureSampler<'a> {
    sources: &'a [TextSource],
    index: WeightedIndex<f64>,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(sources: &'a [TextSource]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Data("mixture has no sources".into()));
        }
        if let Some(s) = sources.iter().find(|s| !(s.weight >= 0.0) || !s.weight.is_finite()) {
            return Err(Error::Data(format!("source {} has invalid weight {}", s.name, s.weight)));
        }
        let total: f64 = sources.iter().map(|s| s.weight).sum();
        if total == 0.0 {
            return Err(Error::Data("mixture weights are all zero".into()));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("mixture weights sum to {total}, expected 1")));
        }
        if let Some(s) = sources.iter().find(|s| s.weight > 0.0 && s.sentences.is_empty()) {
            return Err(Error::Data(format!("source {} is empty", s.name)));
        }
        let index = WeightedIndex::new(sources.iter().map(|s| s.weight))
            .map_err(|e| Error::Data(format!("mixture weights: {e}")))?;
        Ok(Self { sources, index })
    }

    /// Index of the source and the drawn sentence.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, &'a [usize]) {
        let i = self.index.sample(rng);
        let src = &self.sources[i];
        let j = rng.gen_range(0..src.sentences.len());
        (i, &src.sentences[j])
    }
}

/// Convenience wrapper: `n` sentences from the mixture.
pub fn sample_mixture(sources: &[TextSource], n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let sampler = MixtureSampler::new(sources)?;
    Ok((0..n).map(|_| sampler.sample(rng).1.to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub eval_every: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 8,
            learning_rate: 0.5,
            clip: 1.0,
            eval_every: 250,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmTrainResult {
    pub lm: RnnLm,
    pub best_step: usize,
    pub best_log_perplexity: f64,
    /// `(step, held-out log perplexity)` at every evaluation.
    pub history: Vec<(usize, f64)>,
}

/// SGD on mixture-sampled sentences. Held-out log perplexity is measured at
/// step 0, every `eval_every` steps and at the end; the best checkpoint is
/// returned.
pub fn train_lm(
    mut lm: RnnLm,
    sources: &[TextSource],
    heldout: &[Vec<usize>],
    eos: usize,
    cfg: &LmTrainConfig,
    rng: &mut impl Rng,
) -> Result<LmTrainResult> {
    if heldout.is_empty() {
        return Err(Error::Data("held-out set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("lm training batch_size and eval_every must be positive".into()));
    }
    let sampler = MixtureSampler::new(sources)?;
    let mut history = Vec::new();
    let mut best = lm.clone();
    let mut best_ppl = log_perplexity(&lm, heldout, eos)?;
    let mut best_step = 0;
    history.push((0, best_ppl));

    for step in 1..=cfg.steps {
        lm.store.zero_grad();
        for _ in 0..cfg.batch_size {
            let (_, sentence) = sampler.sample(rng);
            let mut tape = Tape::new();
            let loss = lm.loss_on_tape(&mut tape, sentence, eos)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("lm loss {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            lm.store.accumulate(&grads);
        }
        lm.store.scale_grads(1.0 / cfg.batch_size as f64);
        lm.store.sgd_step(cfg.learning_rate, cfg.clip);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let ppl = log_perplexity(&lm, heldout, eos)?;
            history.push((step, ppl));
            if ppl < best_ppl {
                best_ppl = ppl;
                best_step = step;
                best = lm.clone();
            }
        }
    }
    Ok(LmTrainResult {
        lm: best,
        best_step,
        best_log_perplexity: best_ppl,
        history,
    })
}
