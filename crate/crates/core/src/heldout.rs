//! Held-out-day generalization: decoding later days with the calibration
//! of the last training day, for a model that saw those days and for one
//! that did not.

use serde::{Deserialize, Serialize};

use crate::dataset::{prepare, Corpus, Example};
use crate::error::{Error, Result};
use crate::eval::{length_cap, LENGTH_CAP};
use crate::decode::{encode_trial, predict_phonemes};
use crate::metrics::{aggregate, bootstrap_ci, per, Aggregation, ErrorCount, Interval};
use crate::model::{Model, ModelConfig};
use crate::train::{days_of, train_stage1, TrainConfig};
use neuroseq_autodiff::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldOutConfig {
    /// Final days withheld from the partial model.
    pub held_out_days: Vec<usize>,
    /// Last training day of the partial model; its calibration stands in
    /// for the held-out days.
    pub proximal: usize,
    pub seeds: Vec<u64>,
    pub n_boot: usize,
    pub level: f64,
}

impl Default for HeldOutConfig {
    fn default() -> Self {
        Self {
            held_out_days: vec![5, 6, 7],
            proximal: 4,
            seeds: vec![0, 1, 2],
            n_boot: 2000,
            level: 0.95,
        }
    }
}

/// A model together with its parameters.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
}

/// Pooled PER of `examples` from `day`, decoded with the calibration of
/// `transform_day`.
pub fn day_per(dec: Decoder, examples: &[Example], day: usize, transform_day: usize) -> Result<f64> {
    let mut counts: Vec<ErrorCount> = Vec::new();
    for ex in examples.iter().filter(|e| e.day == day) {
        let enc = encode_trial(dec.model, dec.store, &ex.features, transform_day, false)?;
        let pred = predict_phonemes(dec.model, dec.store, &enc, length_cap(ex.phonemes.len(), LENGTH_CAP))?;
        counts.push(per(&ex.phonemes, &pred));
    }
    if counts.is_empty() {
        return Err(Error::Data(format!("no evaluation trials on day {day}")));
    }
    Ok(aggregate(&counts, Aggregation::Pooled))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutDay {
    pub day: usize,
    /// Days after the proximal day.
    pub gap: usize,
    /// All-days model with the day's own calibration.
    pub reference: f64,
    /// All-days model with the proximal calibration.
    pub seen_proximal: f64,
    /// Partial model with the proximal calibration.
    pub unseen_proximal: f64,
    pub seen_delta: f64,
    /// `unseen_proximal - gap_correction - reference`.
    pub unseen_delta: f64,
}

/// One seed's held-out analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutRun {
    pub proximal: usize,
    /// Mean PER gap (partial minus all-days model) over the shared days,
    /// each with its own calibration.
    pub gap_correction: f64,
    pub days: Vec<HeldOutDay>,
}

/// `full` was trained on every day, `partial` only on days up to and
/// including `proximal`. `shared` lists the days both models know.
pub fn heldout_day_eval(
    full: Decoder,
    partial: Decoder,
    examples: &[Example],
    held_out: &[usize],
    proximal: usize,
    shared: &[usize],
) -> Result<HeldOutRun> {
    if !full.model.daycal.has_day(proximal) || !partial.model.daycal.has_day(proximal) {
        return Err(Error::Config(format!("both models need a calibration for proximal day {proximal}")));
    }
    if shared.is_empty() {
        return Err(Error::Config("gap correction needs at least one shared day".into()));
    }
    let mut gaps = Vec::with_capacity(shared.len());
    for &d in shared {
        gaps.push(day_per(partial, examples, d, d)? - day_per(full, examples, d, d)?);
    }
    let gap_correction = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let mut days = Vec::with_capacity(held_out.len());
    for &d in held_out {
        if d < proximal {
            return Err(Error::Config(format!("held-out day {d} precedes proximal day {proximal}")));
        }
        let reference = day_per(full, examples, d, d)?;
        let seen_proximal = day_per(full, examples, d, proximal)?;
        let unseen_proximal = day_per(partial, examples, d, proximal)?;
        days.push(HeldOutDay {
            day: d,
            gap: d - proximal,
            reference,
            seen_proximal,
            unseen_proximal,
            seen_delta: seen_proximal - reference,
            unseen_delta: unseen_proximal - gap_correction - reference,
        });
    }
    Ok(HeldOutRun {
        proximal,
        gap_correction,
        days,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutSummaryDay {
    pub day: usize,
    pub gap: usize,
    pub seen_delta: Interval,
    pub unseen_delta: Interval,
}

/// Seed-level runs and per-day deltas with bootstrap intervals over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub runs: Vec<HeldOutRun>,
    pub days: Vec<HeldOutSummaryDay>,
}

impl HeldOutReport {
    pub fn summarize(runs: Vec<HeldOutRun>, n_boot: usize, level: f64, seed: u64) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Data("no held-out runs to summarize".into()))?;
        let mut days = Vec::new();
        for (i, d) in first.days.iter().enumerate() {
            let pick = |f: fn(&HeldOutDay) -> f64| -> Result<Vec<f64>> {
                runs.iter()
                    .map(|r| {
                        r.days
                            .get(i)
                            .filter(|x| x.day == d.day)
                            .map(f)
                            .ok_or_else(|| Error::Data("held-out runs cover different days".into()))
                    })
                    .collect()
            };
            days.push(HeldOutSummaryDay {
                day: d.day,
                gap: d.gap,
                seen_delta: bootstrap_ci(&pick(|x| x.seen_delta)?, n_boot, level, seed)?,
                unseen_delta: bootstrap_ci(&pick(|x| x.unseen_delta)?, n_boot, level, seed)?,
            });
        }
        Ok(Self { runs, days })
    }

    /// `gap,day,seen_delta,seen_low,seen_high,unseen_delta,unseen_low,unseen_high`.
    pub fn csv(&self) -> String {
        let mut s = String::from("gap,day,seen_delta,seen_low,seen_high,unseen_delta,unseen_low,unseen_high\n");
        for d in &self.days {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                d.gap,
                d.day,
                d.seen_delta.estimate,
                d.seen_delta.low,
                d.seen_delta.high,
                d.unseen_delta.estimate,
                d.unseen_delta.low,
                d.unseen_delta.high
            ));
        }
        s
    }
}

/// Trains the all-days and the partial model for every seed and evaluates
/// on the test split. `on_run` sees each seed's result as it completes.
pub fn run_heldout(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    cfg: &HeldOutConfig,
    mut on_run: impl FnMut(u64, &HeldOutRun),
) -> Result<HeldOutReport> {
    let words = &corpus.train.header.words;
    let train = prepare(&corpus.train);
    let val = prepare(&corpus.val);
    let test = prepare(&corpus.test);
    let keep = |e: &&Example| e.day <= cfg.proximal && !cfg.held_out_days.contains(&e.day);
    let train_partial: Vec<Example> = train.iter().filter(keep).cloned().collect();
    let val_partial: Vec<Example> = val.iter().filter(keep).cloned().collect();
    let shared = days_of(&train_partial);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let tc = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let mut full = train_stage1(model_cfg, &tc, &train, &val, words)?;
        let mut partial = train_stage1(model_cfg, &tc, &train_partial, &val_partial, words)?;
        let full_model = full.model()?;
        let partial_model = partial.model()?;
        let run = heldout_day_eval(
            Decoder {
                model: &full_model,
                store: &full.store,
            },
            Decoder {
                model: &partial_model,
                store: &partial.store,
            },
            &test,
            &cfg.held_out_days,
            cfg.proximal,
            &shared,
        )?;
        on_run(seed, &run);
        runs.push(run);
    }
    HeldOutReport::summarize(runs, cfg.n_boot, cfg.level, 0)
}
