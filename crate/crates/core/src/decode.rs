//! Candidate generation: greedy decoding, beam search and nucleus sampling
//! over any autoregressive next-token scorer.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::ctc_greedy_decode;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::nn::Ctx;
use crate::vocab::PhonemeVocab;
use neuroseq_autodiff::{log_sum_exp, Graph, ParamStore, Tensor};

/// Next-token log-probabilities given a prefix that starts with BOS.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
    fn bos(&self) -> usize;
    fn eos(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Tokens without BOS and EOS.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when finished.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per generated token (EOS counts as a token).
    pub fn normalized(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        self.log_prob / n.max(1) as f64
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![scorer.bos()];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&prefix)?;
        let k = argmax(&lp);
        log_prob += lp[k];
        if k == scorer.eos() {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(k);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

/// Higher normalized score first; ties broken by token ids, lexicographically.
fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.normalized()
        .total_cmp(&a.normalized())
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

/// Beam search with length-normalized ranking. At every step the best
/// `width` expansions survive; those ending in EOS are set aside as
/// finished. Returns at most `width` hypotheses, best first.
pub fn beam_search(scorer: &mut dyn StepScorer, width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut expansions = Vec::new();
        for h in &active {
            let mut prefix = vec![scorer.bos()];
            prefix.extend(&h.tokens);
            let lp = scorer.next_log_probs(&prefix)?;
            for (k, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let finished = k == eos;
                let mut tokens = h.tokens.clone();
                if !finished {
                    tokens.push(k);
                }
                expansions.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + v,
                    finished,
                });
            }
        }
        expansions.sort_by(rank);
        expansions.truncate(width);
        active.clear();
        for h in expansions {
            if h.finished {
                done.push(h);
            } else {
                active.push(h);
            }
        }
    }
    done.extend(active);
    done.sort_by(rank);
    done.truncate(width);
    Ok(done)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub beam_width: usize,
    pub samples: usize,
    pub top_p: f64,
    pub temperature: f64,
    /// 0 disables the top-k filter.
    pub top_k: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            samples: 128,
            top_p: 0.95,
            temperature: 1.0,
            top_k: 0,
            max_len: 12,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// The renormalized sampling distribution of one nucleus step.
pub fn nucleus_distribution(log_probs: &[f64], top_p: f64, temperature: f64, top_k: usize) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs.iter().map(|v| v / temperature).collect();
    let z = log_sum_exp(&scaled);
    let probs: Vec<f64> = scaled.iter().map(|v| (v - z).exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &kept {
        out[i] = probs[i] / mass;
    }
    out
}

/// Inverse-CDF draw from `probs` with a single uniform.
pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws `cfg.samples` sequences; duplicates are removed keeping the first
/// occurrence. `log_prob` is scored under the untempered model.
pub fn nucleus_sample(
    scorer: &mut dyn StepScorer,
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let eos = scorer.eos();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..cfg.samples {
        let mut prefix = vec![scorer.bos()];
        let mut log_prob = 0.0;
        let mut finished = false;
        for _ in 0..cfg.max_len {
            let lp = scorer.next_log_probs(&prefix)?;
            let dist = nucleus_distribution(&lp, cfg.top_p, cfg.temperature, cfg.top_k);
            let k = sample_index(&dist, rng);
            log_prob += lp[k];
            if k == eos {
                finished = true;
                break;
            }
            prefix.push(k);
        }
        let tokens = prefix[1..].to_vec();
        if seen.insert(tokens.clone()) {
            out.push(Hypothesis {
                tokens,
                log_prob,
                finished,
            });
        }
    }
    Ok(out)
}

/// Beam-search results followed by nucleus samples, deduplicated.
pub fn candidate_pool(
    scorer: &mut dyn StepScorer,
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Hypothesis>> {
    let mut pool = beam_search(scorer, cfg.beam_width, cfg.max_len)?;
    let mut seen: HashSet<Vec<usize>> = pool.iter().map(|h| h.tokens.clone()).collect();
    for h in nucleus_sample(scorer, cfg, rng)? {
        if seen.insert(h.tokens.clone()) {
            pool.push(h);
        }
    }
    Ok(pool)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Phonemes,
    Words,
}

/// Scores next tokens with one of a model's decoders given cached encoder
/// memory. BOS and PAD are never proposed.
pub struct ModelScorer<'m> {
    model: &'m Model,
    store: &'m ParamStore,
    memory: Tensor,
    head: Head,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl<'m> ModelScorer<'m> {
    fn new(model: &'m Model, store: &'m ParamStore, memory: Tensor, head: Head) -> Self {
        Self {
            model,
            store,
            memory,
            head,
            cache: HashMap::new(),
        }
    }

    pub fn phonemes(model: &'m Model, store: &'m ParamStore, memory: Tensor) -> Self {
        Self::new(model, store, memory, Head::Phonemes)
    }

    pub fn words(model: &'m Model, store: &'m ParamStore, memory: Tensor) -> Self {
        Self::new(model, store, memory, Head::Words)
    }

    fn specials(&self) -> (usize, usize, usize) {
        match self.head {
            Head::Phonemes => (PhonemeVocab::BOS, PhonemeVocab::EOS, PhonemeVocab::PAD),
            Head::Words => {
                let n = self.model.arch.n_words;
                (n, n + 1, n + 2)
            }
        }
    }

    /// Teacher-forced log-probabilities of `tokens` followed by EOS, one per position.
    pub fn sequence_log_probs(&mut self, tokens: &[usize]) -> Result<Vec<f64>> {
        let (bos, eos, _) = self.specials();
        let mut inputs = vec![bos];
        inputs.extend(tokens);
        let lp = self.log_prob_rows(&inputs)?;
        let mut targets = tokens.to_vec();
        targets.push(eos);
        Ok(targets.iter().enumerate().map(|(i, &t)| lp.get(i, t)).collect())
    }

    fn log_prob_rows(&self, inputs: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference(self.store);
        let memory = g.constant(self.memory.clone());
        let mut ctx = Ctx::eval();
        let out = match self.head {
            Head::Phonemes => self.model.phoneme_logits(&mut g, memory, inputs, &mut ctx)?,
            Head::Words => self.model.word_logits(&mut g, memory, inputs, &mut ctx)?,
        };
        let (_, _, pad) = self.specials();
        let (bos, _, _) = self.specials();
        let mut logits = g.value(out.logits).clone();
        for r in 0..logits.rows() {
            logits.set(r, bos, f64::NEG_INFINITY);
            logits.set(r, pad, f64::NEG_INFINITY);
        }
        let lp = g.constant(logits);
        let lp = g.log_softmax_rows(lp);
        Ok(g.value(lp).clone())
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.get(prefix) {
            return Ok(v.clone());
        }
        let rows = self.log_prob_rows(prefix)?;
        let last = rows.row(rows.rows() - 1).to_vec();
        self.cache.insert(prefix.to_vec(), last.clone());
        Ok(last)
    }

    fn bos(&self) -> usize {
        self.specials().0
    }

    fn eos(&self) -> usize {
        self.specials().1
    }
}

/// Encoder memory and, for the CTC variant, per-frame CTC logits.
pub struct EncodedTrial {
    pub memory: Tensor,
    pub ctc_logits: Option<Tensor>,
    pub attention: Vec<Tensor>,
}

pub fn encode_trial(model: &Model, store: &ParamStore, features: &Tensor, day: usize, capture: bool) -> Result<EncodedTrial> {
    let mut g = Graph::inference(store);
    let x = g.constant(features.clone());
    let mut ctx = if capture { Ctx::capture() } else { Ctx::eval() };
    let enc = model.encode(&mut g, x, day, &mut ctx)?;
    let ctc_logits = match model.variant() {
        Variant::Ctc => {
            let l = model.ctc_logits(&mut g, enc.memory)?;
            Some(g.value(l).clone())
        }
        Variant::Seq2seq => None,
    };
    Ok(EncodedTrial {
        memory: g.value(enc.memory).clone(),
        ctc_logits,
        attention: enc.attention,
    })
}

/// Greedy phoneme prediction: autoregressive for the Transformer, best
/// path for CTC.
pub fn predict_phonemes(model: &Model, store: &ParamStore, enc: &EncodedTrial, max_len: usize) -> Result<Vec<usize>> {
    match &enc.ctc_logits {
        Some(logits) => Ok(ctc_greedy_decode(logits, PhonemeVocab::BLANK)),
        None => {
            let mut scorer = ModelScorer::phonemes(model, store, enc.memory.clone());
            Ok(greedy(&mut scorer, max_len)?.tokens)
        }
    }
}

/// Greedy word prediction with the word decoder.
pub fn predict_words(model: &Model, store: &ParamStore, enc: &EncodedTrial, max_len: usize) -> Result<Vec<usize>> {
    let mut scorer = ModelScorer::words(model, store, enc.memory.clone());
    Ok(greedy(&mut scorer, max_len)?.tokens)
}
