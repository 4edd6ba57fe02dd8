//! Synthetic multi-day recordings.
//!
//! Sentences come from a sparse bigram word process, are expanded to
//! phonemes through the lexicon, and each phoneme holds a prototype latent
//! vector for a few 20 ms frames. The latent is pushed through a per-day
//! drifting channel mixer `M_d` (random-walk rotations times scalings) and
//! per-channel gains and offsets before being read out as Poisson spike
//! counts and Gaussian band power. MFCC targets are a fixed projection of
//! the undrifted latent.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Poisson, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Dataset, DatasetHeader, NeuralTrial, Split, MFCC_DIM};
use crate::error::{Error, Result};
use crate::vocab::{Lexicon, PhonemeVocab, WordVocab};
use neuroseq_autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_days: usize,
    pub trials_per_day: usize,
    /// Electrodes; every trial carries `2 * channels` feature columns.
    pub channels: usize,
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_hold: usize,
    pub max_hold: usize,
    /// Silent frames before the first and after the last phoneme (inclusive range).
    pub min_silence: usize,
    pub max_silence: usize,
    /// Standard deviation of the phoneme prototype latents.
    pub prototype_scale: f64,
    pub latent_noise: f64,
    pub spike_noise: f64,
    pub band_noise: f64,
    pub mfcc_noise: f64,
    /// Mean spike count scale applied after the softplus.
    pub spike_rate: f64,
    /// Disable to replace Poisson sampling by rounding the rate.
    pub poisson: bool,
    /// Drift magnitude; 0 makes every day identical.
    pub drift: f64,
    pub block_size: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Preferred successors per word in the bigram process.
    pub successors: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_days: 8,
            trials_per_day: 250,
            channels: 16,
            vocab_size: 30,
            min_words: 3,
            max_words: 6,
            min_hold: 3,
            max_hold: 8,
            min_silence: 3,
            max_silence: 6,
            prototype_scale: 1.0,
            latent_noise: 0.25,
            spike_noise: 0.2,
            band_noise: 0.3,
            mfcc_noise: 0.1,
            spike_rate: 3.0,
            poisson: true,
            drift: 3.0,
            block_size: 50,
            train_fraction: 0.8,
            val_fraction: 0.1,
            successors: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_days == 0 || self.trials_per_day == 0 || self.channels == 0 {
            return fail("n_days, trials_per_day and channels must be positive");
        }
        if self.n_days > u16::MAX as usize {
            return fail("n_days exceeds the container's u16 day id");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail("need 1 <= min_words <= max_words");
        }
        if self.min_hold == 0 || self.min_hold > self.max_hold {
            return fail("need 1 <= min_hold <= max_hold");
        }
        if self.min_silence > self.max_silence {
            return fail("need min_silence <= max_silence");
        }
        if self.block_size == 0 {
            return fail("block_size must be positive");
        }
        let noises = [
            self.prototype_scale,
            self.latent_noise,
            self.spike_noise,
            self.band_noise,
            self.mfcc_noise,
            self.spike_rate,
            self.drift,
        ];
        if noises.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("scales, noise levels and drift must be finite and nonnegative");
        }
        let split_ok = (0.0..=1.0).contains(&self.train_fraction)
            && (0.0..=1.0).contains(&self.val_fraction)
            && self.train_fraction + self.val_fraction <= 1.0;
        if !split_ok {
            return fail("train_fraction + val_fraction must lie in [0, 1]");
        }
        if self.successors == 0 {
            return fail("successors must be positive");
        }
        Ok(())
    }

    /// Per-day split sizes `(train, val, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.trials_per_day;
        let train = (self.train_fraction * n as f64).round() as usize;
        let val = ((self.val_fraction * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Independent random stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_DRIFT: u64 = 1;
const STREAM_LANGUAGE: u64 = 2;
const STREAM_READOUT: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_TRIALS: u64 = 100;

/// Per-day channel-space distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftModel {
    /// `mixing[d]` is `M_d` (channels x channels), applied as `M_d z`.
    pub mixing: Vec<Tensor>,
    pub spike_gain: Vec<Vec<f64>>,
    pub spike_offset: Vec<Vec<f64>>,
    pub band_gain: Vec<Vec<f64>>,
    pub band_offset: Vec<Vec<f64>>,
    /// Drift magnitude per day, `drift * sqrt(d)`: the expected size of the walk.
    pub schedule: Vec<f64>,
}

impl DriftModel {
    pub fn generate(n_days: usize, channels: usize, drift: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, STREAM_DRIFT);
        let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rotation = Tensor::eye(channels);
        let mut log_scale = vec![0.0; channels];
        let mut spike_gain = vec![0.0; channels];
        let mut spike_offset = vec![0.0; channels];
        let mut band_gain = vec![0.0; channels];
        let mut band_offset = vec![0.0; channels];
        let mut model = Self {
            mixing: Vec::with_capacity(n_days),
            spike_gain: Vec::new(),
            spike_offset: Vec::new(),
            band_gain: Vec::new(),
            band_offset: Vec::new(),
            schedule: Vec::new(),
        };
        for d in 0..n_days {
            if d > 0 {
                for _ in 0..channels {
                    let i = rng.gen_range(0..channels);
                    let mut j = rng.gen_range(0..channels);
                    if channels > 1 {
                        while j == i {
                            j = rng.gen_range(0..channels);
                        }
                    }
                    let angle = 0.3 * drift * std.sample(&mut rng);
                    if i != j {
                        givens_left(&mut rotation, i, j, angle);
                    }
                }
                for k in 0..channels {
                    log_scale[k] += 0.1 * drift * std.sample(&mut rng);
                    spike_gain[k] += 0.1 * drift * std.sample(&mut rng);
                    spike_offset[k] += 0.2 * drift * std.sample(&mut rng);
                    band_gain[k] += 0.1 * drift * std.sample(&mut rng);
                    band_offset[k] += 0.2 * drift * std.sample(&mut rng);
                }
            }
            let mut m = rotation.clone();
            for r in 0..channels {
                for c in 0..channels {
                    let v = m.get(r, c) * log_scale[c].exp();
                    m.set(r, c, v);
                }
            }
            model.mixing.push(m);
            model.spike_gain.push(spike_gain.iter().map(|g: &f64| g.exp()).collect());
            model.spike_offset.push(spike_offset.clone());
            model.band_gain.push(band_gain.iter().map(|g: &f64| g.exp()).collect());
            model.band_offset.push(band_offset.clone());
            model.schedule.push(drift * (d as f64).sqrt());
        }
        model
    }

    /// `||M_d - I||_F` per day.
    pub fn distance_from_identity(&self) -> Vec<f64> {
        self.mixing
            .iter()
            .map(|m| {
                let n = m.rows();
                let mut s = 0.0;
                for r in 0..n {
                    for c in 0..n {
                        let e = m.get(r, c) - if r == c { 1.0 } else { 0.0 };
                        s += e * e;
                    }
                }
                s.sqrt()
            })
            .collect()
    }
}

/// Left-multiplies `m` by a Givens rotation in the `(i, j)` plane.
fn givens_left(m: &mut Tensor, i: usize, j: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    for col in 0..m.cols() {
        let a = m.get(i, col);
        let b = m.get(j, col);
        m.set(i, col, c * a - s * b);
        m.set(j, col, s * a + c * b);
    }
}

/// Sparse bigram process over word ids used to draw sentences.
#[derive(Clone, Debug)]
pub struct WordProcess {
    start: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
}

impl WordProcess {
    fn generate(vocab: usize, successors: usize, rng: &mut ChaCha8Rng) -> Self {
        let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
        let start_w: Vec<f64> = (0..vocab).map(|_| (std.sample(rng) * 0.7).exp()).collect();
        let mut next = Vec::with_capacity(vocab);
        let ids: Vec<usize> = (0..vocab).collect();
        for _ in 0..vocab {
            let mut w = vec![0.02; vocab];
            for &s in ids.choose_multiple(rng, successors.min(vocab)) {
                w[s] += rng.gen_range(0.5..1.5);
            }
            next.push(WeightedIndex::new(w).expect("positive weights"));
        }
        Self {
            start: WeightedIndex::new(start_w).expect("positive weights"),
            next,
        }
    }

    fn sentence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut w = self.start.sample(rng);
        out.push(w);
        while out.len() < len {
            w = self.next[w].sample(rng);
            out.push(w);
        }
        out
    }
}

/// Fixed (day-independent) parts of the generative model.
struct Readout {
    prototypes: Vec<Vec<f64>>,
    band_mix: Tensor,
    mfcc_proj: Tensor,
}

impl Readout {
    fn generate(cfg: &CorpusConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, STREAM_READOUT);
        let ch = cfg.channels;
        let proto = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..PhonemeVocab::N_PHONEMES)
            .map(|_| (0..ch).map(|_| cfg.prototype_scale * proto.sample(&mut rng)).collect())
            .collect();
        let scale = 1.0 / (ch as f64).sqrt();
        let band_mix = Tensor::new(
            vec![ch, ch],
            (0..ch * ch).map(|_| scale * proto.sample(&mut rng)).collect(),
        )
        .expect("shape matches");
        let mfcc_proj = Tensor::new(
            vec![MFCC_DIM, ch],
            (0..MFCC_DIM * ch).map(|_| scale * proto.sample(&mut rng)).collect(),
        )
        .expect("shape matches");
        Self {
            prototypes,
            band_mix,
            mfcc_proj,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn matvec(m: &Tensor, v: &[f64], out: &mut [f64]) {
    let cols = m.cols();
    for (r, o) in out.iter_mut().enumerate() {
        *o = m.data()[r * cols..(r + 1) * cols]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

struct TrialSpec {
    day: usize,
    index: usize,
}

fn generate_trial(
    cfg: &CorpusConfig,
    seed: u64,
    spec: &TrialSpec,
    words: &WordProcess,
    vocab: &WordVocab,
    lexicon: &Lexicon,
    readout: &Readout,
    drift: &DriftModel,
) -> NeuralTrial {
    let stream = STREAM_TRIALS + (spec.day * cfg.trials_per_day + spec.index) as u64;
    let mut rng = stream_rng(seed, stream);
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
    let word_ids = words.sentence(n_words, &mut rng);
    let phonemes = lexicon
        .g2p_ids(vocab, &word_ids)
        .expect("lexicon covers vocabulary");

    let ch = cfg.channels;
    let lead = rng.gen_range(cfg.min_silence..=cfg.max_silence);
    let tail = rng.gen_range(cfg.min_silence..=cfg.max_silence);
    let mut frames: Vec<Option<usize>> = vec![None; lead];
    for &p in &phonemes {
        let hold = rng.gen_range(cfg.min_hold..=cfg.max_hold);
        frames.extend(std::iter::repeat(Some(p)).take(hold));
    }
    frames.extend(std::iter::repeat(None).take(tail));

    let t = frames.len();
    let mut features = vec![0f32; t * 2 * ch];
    let mut mfcc = vec![0f32; t * MFCC_DIM];
    let mix = &drift.mixing[spec.day];
    let mut z = vec![0.0; ch];
    let mut mixed = vec![0.0; ch];
    let mut band = vec![0.0; ch];
    let mut coeffs = vec![0.0; MFCC_DIM];
    for (f, frame) in frames.iter().enumerate() {
        match frame {
            Some(p) => z.copy_from_slice(&readout.prototypes[*p]),
            None => z.iter_mut().for_each(|v| *v = 0.0),
        }
        matvec(&readout.mfcc_proj, &z, &mut coeffs);
        for (k, c) in coeffs.iter().enumerate() {
            mfcc[f * MFCC_DIM + k] = (c + cfg.mfcc_noise * std.sample(&mut rng)) as f32;
        }
        for v in z.iter_mut() {
            *v += cfg.latent_noise * std.sample(&mut rng);
        }
        matvec(mix, &z, &mut mixed);
        matvec(&readout.band_mix, &mixed, &mut band);
        let row = &mut features[f * 2 * ch..(f + 1) * 2 * ch];
        for k in 0..ch {
            let drive = drift.spike_gain[spec.day][k] * mixed[k]
                + drift.spike_offset[spec.day][k]
                + cfg.spike_noise * std.sample(&mut rng);
            let rate = cfg.spike_rate * softplus(drive);
            let count = if cfg.poisson && rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut rng)
            } else {
                rate.round()
            };
            row[k] = count as f32;
            row[ch + k] = (drift.band_gain[spec.day][k] * band[k]
                + drift.band_offset[spec.day][k]
                + cfg.band_noise * std.sample(&mut rng)) as f32;
        }
    }

    NeuralTrial {
        day: spec.day as u16,
        block: (spec.index / cfg.block_size) as u16,
        frames: t,
        columns: 2 * ch,
        features,
        phonemes: phonemes.iter().map(|&p| p as u16).collect(),
        words: word_ids.iter().map(|&w| w as u16).collect(),
        text: vocab.text(&word_ids),
        mfcc,
    }
}

/// Generates the train/val/test partitions; a pure function of `(cfg, seed)`.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let (vocab, lexicon) = Lexicon::builtin(cfg.vocab_size)?;
    lexicon.covers(&vocab)?;
    let words = WordProcess::generate(
        vocab.len(),
        cfg.successors,
        &mut stream_rng(seed, STREAM_LANGUAGE),
    );
    let readout = Readout::generate(cfg, seed);
    let drift = DriftModel::generate(cfg.n_days, cfg.channels, cfg.drift, seed);

    let (n_train, n_val, _) = cfg.split_sizes();
    let mut split_rng = stream_rng(seed, STREAM_SPLIT);
    let mut parts: [Vec<NeuralTrial>; 3] = Default::default();
    for day in 0..cfg.n_days {
        let mut order: Vec<usize> = (0..cfg.trials_per_day).collect();
        order.shuffle(&mut split_rng);
        let mut assignment = vec![2usize; cfg.trials_per_day];
        for &i in &order[..n_train] {
            assignment[i] = 0;
        }
        for &i in &order[n_train..n_train + n_val] {
            assignment[i] = 1;
        }
        for (index, &part) in assignment.iter().enumerate() {
            let trial = generate_trial(
                cfg,
                seed,
                &TrialSpec { day, index },
                &words,
                &vocab,
                &lexicon,
                &readout,
                &drift,
            );
            parts[part].push(trial);
        }
    }
    let [train, val, test] = parts;
    let make = |split: Split, trials: Vec<NeuralTrial>| {
        let header = DatasetHeader::new(split, seed, cfg.clone(), &vocab, &lexicon, &trials);
        Dataset { header, trials }
    };
    Ok(Corpus {
        train: make(Split::Train, train),
        val: make(Split::Val, val),
        test: make(Split::Test, test),
    })
}

/// Training-split word sentences, for fitting language models.
pub fn sentences(dataset: &Dataset) -> Vec<Vec<usize>> {
    dataset
        .trials
        .iter()
        .map(|t| t.words.iter().map(|&w| w as usize).collect())
        .collect()
}
