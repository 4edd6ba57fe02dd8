//! Greedy evaluation of a model over prepared examples.

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::decode::{encode_trial, predict_phonemes, predict_words};
use crate::error::Result;
use crate::metrics::{aggregate, per, wer, Aggregation, ErrorCount};
use crate::model::Model;
use neuroseq_autodiff::ParamStore;

/// Decoding length cap, as a multiple of the reference length.
pub const LENGTH_CAP: f64 = 1.5;

pub fn length_cap(reference_len: usize, factor: f64) -> usize {
    ((reference_len.max(1) as f64) * factor).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPrediction {
    pub index: usize,
    pub day: usize,
    pub phonemes: Vec<usize>,
    pub phoneme_errors: ErrorCount,
    pub words: Option<Vec<usize>>,
    pub text: Option<String>,
    pub word_errors: Option<ErrorCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: Vec<TrialPrediction>,
}

impl EvalReport {
    pub fn per(&self, how: Aggregation) -> f64 {
        let c: Vec<ErrorCount> = self.trials.iter().map(|t| t.phoneme_errors).collect();
        aggregate(&c, how)
    }

    pub fn wer(&self, how: Aggregation) -> Option<f64> {
        let c: Option<Vec<ErrorCount>> = self.trials.iter().map(|t| t.word_errors).collect();
        c.filter(|c| !c.is_empty()).map(|c| aggregate(&c, how))
    }

    /// Number of trials whose reference was empty.
    pub fn empty_references(&self) -> usize {
        self.trials.iter().filter(|t| t.phoneme_errors.empty_reference()).count()
    }
}

pub fn words_to_text(ids: &[usize], words: &[String]) -> String {
    ids.iter()
        .map(|&i| words.get(i).map(String::as_str).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Greedy phoneme (and, with a word decoder, word) decoding of every example.
pub fn evaluate(model: &Model, store: &ParamStore, examples: &[Example], words: &[String], cap: f64) -> Result<EvalReport> {
    let mut trials = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let enc = encode_trial(model, store, &ex.features, ex.day, false)?;
        let phonemes = predict_phonemes(model, store, &enc, length_cap(ex.phonemes.len(), cap))?;
        let phoneme_errors = per(&ex.phonemes, &phonemes);
        let (w, text, word_errors) = if model.has_word_decoder() {
            let w = predict_words(model, store, &enc, length_cap(ex.words.len(), cap))?;
            let text = words_to_text(&w, words);
            let e = wer(&ex.text, &text);
            (Some(w), Some(text), Some(e))
        } else {
            (None, None, None)
        };
        trials.push(TrialPrediction {
            index,
            day: ex.day,
            phonemes,
            phoneme_errors,
            words: w,
            text,
            word_errors,
        });
    }
    Ok(EvalReport { trials })
}
