//! Three-signal rescoring of word hypotheses: phoneme-decoder likelihood of
//! the pronunciation, agreement with the greedy phoneme prediction, and a
//! bigram language-model score.

use serde::{Deserialize, Serialize};

use crate::ctc::ctc_neg_log_likelihood;
use crate::decode::{candidate_pool, encode_trial, greedy, predict_phonemes, GenerationConfig, Hypothesis, ModelScorer};
use crate::error::{Error, Result};
use crate::lm::BigramLm;
use crate::metrics::{per, wer};
use crate::model::Model;
use crate::synth::stream_rng;
use crate::vocab::{Lexicon, PhonemeVocab, WordVocab};
use neuroseq_autodiff::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendWeights {
    pub phoneme_head: f64,
    pub per_consistency: f64,
    pub lm: f64,
}

impl Default for BlendWeights {
    fn default() -> Self {
        Self {
            phoneme_head: 9.0,
            per_consistency: 4.0,
            lm: 5.0,
        }
    }
}

impl BlendWeights {
    pub fn new(phoneme_head: f64, per_consistency: f64, lm: f64) -> Self {
        Self {
            phoneme_head,
            per_consistency,
            lm,
        }
    }

    pub fn blend(&self, head: f64, per_consistency: f64, lm: f64) -> f64 {
        self.phoneme_head * head + self.per_consistency * per_consistency + self.lm * lm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescoreConfig {
    pub weights: BlendWeights,
    /// Divide the phoneme-head log-likelihood by the scored length.
    pub normalize_head: bool,
    /// Phoneme-based score given to candidates with out-of-lexicon words.
    pub oov_floor: f64,
    /// Add-k constant of the bigram model.
    pub lm_k: f64,
    /// Length cap for the greedy phoneme prediction.
    pub max_phonemes: usize,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        Self {
            weights: BlendWeights::default(),
            normalize_head: true,
            oov_floor: -20.0,
            lm_k: 0.1,
            max_phonemes: 60,
        }
    }
}

/// Log-likelihood of a phoneme sequence given one trial's neural data.
pub trait PhonemeLikelihood {
    /// Total log-likelihood and the number of scored positions.
    fn log_likelihood(&mut self, phonemes: &[usize]) -> Result<(f64, usize)>;
}

impl PhonemeLikelihood for ModelScorer<'_> {
    /// Teacher-forced decoder likelihood, EOS included.
    fn log_likelihood(&mut self, phonemes: &[usize]) -> Result<(f64, usize)> {
        let lp = self.sequence_log_probs(phonemes)?;
        Ok((lp.iter().sum(), lp.len()))
    }
}

/// CTC likelihood from per-frame log-probabilities.
pub struct CtcLikelihood {
    pub log_probs: Tensor,
}

impl PhonemeLikelihood for CtcLikelihood {
    fn log_likelihood(&mut self, phonemes: &[usize]) -> Result<(f64, usize)> {
        match ctc_neg_log_likelihood(&self.log_probs, phonemes, PhonemeVocab::BLANK) {
            Ok(nll) => Ok((-nll, phonemes.len().max(1))),
            Err(Error::InfeasibleAlignment { .. }) => Ok((f64::NEG_INFINITY, phonemes.len().max(1))),
            Err(e) => Err(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub words: Vec<usize>,
    pub text: String,
    pub gen_log_prob: f64,
    pub phoneme_head: f64,
    pub per_consistency: f64,
    pub lm: f64,
    pub blended: f64,
    /// Some word had no pronunciation; phoneme scores hold the floor.
    pub oov: bool,
}

impl ScoredHypothesis {
    pub fn reblend(&mut self, w: &BlendWeights) {
        self.blended = w.blend(self.phoneme_head, self.per_consistency, self.lm);
    }
}

/// Fills the three component scores and the blend for every candidate.
pub fn score_candidates(
    candidates: &[Hypothesis],
    vocab: &WordVocab,
    lexicon: &Lexicon,
    lm: &BigramLm,
    greedy_phonemes: &[usize],
    head: &mut dyn PhonemeLikelihood,
    cfg: &RescoreConfig,
) -> Result<Vec<ScoredHypothesis>> {
    let mut out = Vec::with_capacity(candidates.len());
    for h in candidates {
        let text = vocab.text(&h.tokens);
        let pron = lexicon.g2p_ids(vocab, &h.tokens);
        let (phoneme_head, per_consistency, oov) = match pron {
            Some(p) => {
                let (total, n) = head.log_likelihood(&p)?;
                let s = if cfg.normalize_head { total / n as f64 } else { total };
                let s = if s.is_finite() { s } else { cfg.oov_floor };
                (s, -per(greedy_phonemes, &p).rate(), false)
            }
            None => (cfg.oov_floor, cfg.oov_floor, true),
        };
        let lm_score = lm.score(&text);
        out.push(ScoredHypothesis {
            words: h.tokens.clone(),
            text,
            gen_log_prob: h.log_prob,
            phoneme_head,
            per_consistency,
            lm: lm_score,
            blended: cfg.weights.blend(phoneme_head, per_consistency, lm_score),
            oov,
        });
    }
    Ok(out)
}

/// Index of the highest blended score; ties go to the higher generation
/// log-probability, then to the earlier candidate.
pub fn select_best(scored: &[ScoredHypothesis]) -> Result<usize> {
    select_by(scored, |h| h.blended)
}

fn select_by(scored: &[ScoredHypothesis], score: impl Fn(&ScoredHypothesis) -> f64) -> Result<usize> {
    if scored.is_empty() {
        return Err(Error::Data("cannot select from an empty candidate set".into()));
    }
    let mut best = 0;
    let mut best_score = score(&scored[0]);
    for (i, h) in scored.iter().enumerate().skip(1) {
        let s = score(h);
        if s > best_score || (s == best_score && h.gen_log_prob > scored[best].gen_log_prob) {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// Index of the candidate with the lowest WER against `reference`
/// (earliest on ties).
pub fn oracle_select(scored: &[ScoredHypothesis], reference: &str) -> Result<usize> {
    if scored.is_empty() {
        return Err(Error::Data("cannot select from an empty candidate set".into()));
    }
    let mut best = 0;
    let mut best_wer = f64::INFINITY;
    for (i, h) in scored.iter().enumerate() {
        let w = wer(reference, &h.text).rate();
        if w < best_wer {
            best = i;
            best_wer = w;
        }
    }
    Ok(best)
}

/// Rescoring outcome for one trial; also one line of the JSONL report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRescore {
    pub trial: usize,
    pub reference: String,
    pub greedy: String,
    pub greedy_phonemes: Vec<usize>,
    pub candidates: Vec<ScoredHypothesis>,
    pub selected: usize,
    pub oracle: usize,
}

/// Builds the candidate pool for one trial with the word decoder and
/// scores it.
#[allow(clippy::too_many_arguments)]
pub fn rescore_trial(
    model: &Model,
    store: &ParamStore,
    features: &Tensor,
    day: usize,
    trial: usize,
    reference: &str,
    vocab: &WordVocab,
    lexicon: &Lexicon,
    lm: &BigramLm,
    generation: &GenerationConfig,
    cfg: &RescoreConfig,
) -> Result<TrialRescore> {
    if !model.has_word_decoder() {
        return Err(Error::Config("rescoring needs a stage-2 model with a word decoder".into()));
    }
    let enc = encode_trial(model, store, features, day, false)?;
    let greedy_phonemes = predict_phonemes(model, store, &enc, cfg.max_phonemes)?;
    let mut words = ModelScorer::words(model, store, enc.memory.clone());
    let greedy_words = greedy(&mut words, generation.max_len)?;
    let mut rng = stream_rng(generation.seed, 100_000 + trial as u64);
    let pool = candidate_pool(&mut words, generation, &mut rng)?;
    let candidates = match &enc.ctc_logits {
        Some(logits) => {
            let mut g = neuroseq_autodiff::Graph::new();
            let l = g.constant(logits.clone());
            let lp = g.log_softmax_rows(l);
            let mut head = CtcLikelihood {
                log_probs: g.value(lp).clone(),
            };
            score_candidates(&pool, vocab, lexicon, lm, &greedy_phonemes, &mut head, cfg)?
        }
        None => {
            let mut head = ModelScorer::phonemes(model, store, enc.memory.clone());
            score_candidates(&pool, vocab, lexicon, lm, &greedy_phonemes, &mut head, cfg)?
        }
    };
    Ok(TrialRescore {
        trial,
        reference: reference.to_string(),
        greedy: vocab.text(&greedy_words.tokens),
        greedy_phonemes,
        selected: select_best(&candidates)?,
        oracle: oracle_select(&candidates, reference)?,
        candidates,
    })
}

/// Pooled WER of the candidates picked by `weights` across trials.
pub fn blend_wer(trials: &[TrialRescore], weights: &BlendWeights) -> Result<f64> {
    let mut edits = 0;
    let mut refs = 0;
    for t in trials {
        let i = select_by(&t.candidates, |h| weights.blend(h.phoneme_head, h.per_consistency, h.lm))?;
        let e = wer(&t.reference, &t.candidates[i].text);
        edits += e.edits;
        refs += e.ref_len;
    }
    Ok(edits as f64 / refs.max(1) as f64)
}

/// Exhaustive search over integer weights `0..=max` (not all zero) for the
/// lowest pooled WER. Ties keep the first triple in lexicographic order.
pub fn tune_weights(trials: &[TrialRescore], max: u32) -> Result<(BlendWeights, f64)> {
    let mut best: Option<(BlendWeights, f64)> = None;
    for a in 0..=max {
        for b in 0..=max {
            for c in 0..=max {
                if a + b + c == 0 {
                    continue;
                }
                let w = BlendWeights::new(a as f64, b as f64, c as f64);
                let e = blend_wer(trials, &w)?;
                if best.as_ref().is_none_or(|(_, be)| e < *be) {
                    best = Some((w, e));
                }
            }
        }
    }
    best.ok_or_else(|| Error::Config("empty weight grid".into()))
}
