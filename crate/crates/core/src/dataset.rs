//! Trials, splits, the `NSQD` binary container, block z-scoring and
//! day-stratified subsampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{stream_rng, CorpusConfig};
use crate::vocab::{Lexicon, PhonemeVocab, WordVocab};
use neuroseq_autodiff::Tensor;

pub const MFCC_DIM: usize = 14;
pub const MAGIC: &[u8; 4] = b"NSQD";
pub const VERSION: u16 = 1;

/// One attempted-speech trial in 20 ms bins.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTrial {
    pub day: u16,
    pub block: u16,
    pub frames: usize,
    /// `2 * channels`: spike counts first, then band power.
    pub columns: usize,
    /// Row-major `frames x columns`.
    pub features: Vec<f32>,
    pub phonemes: Vec<u16>,
    pub words: Vec<u16>,
    pub text: String,
    /// Row-major `frames x 14`.
    pub mfcc: Vec<f32>,
}

impl NeuralTrial {
    pub fn mfcc_frames(&self) -> usize {
        self.mfcc.len() / MFCC_DIM
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub split: Split,
    pub seed: u64,
    pub config: CorpusConfig,
    pub phonemes: Vec<String>,
    pub words: Vec<String>,
    pub lexicon: Lexicon,
    pub days: Vec<u16>,
    pub records: usize,
}

impl DatasetHeader {
    pub fn new(
        split: Split,
        seed: u64,
        config: CorpusConfig,
        vocab: &WordVocab,
        lexicon: &Lexicon,
        trials: &[NeuralTrial],
    ) -> Self {
        let mut header = Self {
            split,
            seed,
            config,
            phonemes: PhonemeVocab::symbols(),
            words: vocab.words().to_vec(),
            lexicon: lexicon.clone(),
            days: Vec::new(),
            records: 0,
        };
        header.refresh(trials);
        header
    }

    fn refresh(&mut self, trials: &[NeuralTrial]) {
        let mut days: Vec<u16> = trials.iter().map(|t| t.day).collect();
        days.sort_unstable();
        days.dedup();
        self.days = days;
        self.records = trials.len();
    }

    pub fn vocab(&self) -> WordVocab {
        WordVocab::new(self.words.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trials: Vec<NeuralTrial>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Keeps the trials for which `keep` holds, in order.
    pub fn filter(&self, keep: impl Fn(&NeuralTrial) -> bool) -> Dataset {
        let trials: Vec<NeuralTrial> = self.trials.iter().filter(|t| keep(t)).cloned().collect();
        let mut header = self.header.clone();
        header.refresh(&trials);
        Dataset { header, trials }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&len_u32(json.len(), "header")?.to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.trials {
            out.extend_from_slice(&t.day.to_le_bytes());
            out.extend_from_slice(&t.block.to_le_bytes());
            out.extend_from_slice(&len_u32(t.frames, "frames")?.to_le_bytes());
            out.extend_from_slice(&len_u32(t.columns, "columns")?.to_le_bytes());
            for v in &t.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&len_u16(t.phonemes.len(), "phonemes")?.to_le_bytes());
            for p in &t.phonemes {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out.extend_from_slice(&len_u16(t.words.len(), "words")?.to_le_bytes());
            for w in &t.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&len_u32(t.mfcc_frames(), "mfcc frames")?.to_le_bytes());
            for v in &t.mfcc {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::UnsupportedContainer("bad magic bytes, expected NSQD".into()));
        }
        r.pos = 4;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedContainer(format!("version {version}")));
        }
        let len = r.u32("header length")? as usize;
        let start = r.pos as u64;
        let json = r.take(len, "header")?;
        let header: DatasetHeader = serde_json::from_slice(json).map_err(|e| Error::Parse {
            offset: start,
            message: format!("header: {e}"),
        })?;
        let vocab = header.vocab();
        let mut trials = Vec::with_capacity(header.records);
        for _ in 0..header.records {
            let record_start = r.pos as u64;
            let day = r.u16("day id")?;
            let block = r.u16("block id")?;
            let frames = r.u32("frame count")? as usize;
            let columns = r.u32("column count")? as usize;
            let features = r.f32s(frames * columns, "features")?;
            let n_ph = r.u16("phoneme count")? as usize;
            let phonemes = r.u16s(n_ph, "phonemes")?;
            let n_w = r.u16("word count")? as usize;
            let words = r.u16s(n_w, "words")?;
            let ta = r.u32("mfcc frame count")? as usize;
            let mfcc = r.f32s(ta * MFCC_DIM, "mfcc")?;
            if words.iter().any(|&w| w as usize >= vocab.len()) {
                return Err(Error::Parse {
                    offset: record_start,
                    message: "word id outside the header vocabulary".into(),
                });
            }
            let ids: Vec<usize> = words.iter().map(|&w| w as usize).collect();
            trials.push(NeuralTrial {
                day,
                block,
                frames,
                columns,
                features,
                phonemes,
                words,
                text: vocab.text(&ids),
                mfcc,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos as u64,
                message: "trailing bytes after the last record".into(),
            });
        }
        Ok(Dataset { header, trials })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("{what} count {n} exceeds u32")))
}

fn len_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Data(format!("{what} count {n} exceeds u16")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16s(&mut self, n: usize, what: &str) -> Result<Vec<u16>> {
        let b = self.take(n * 2, what)?;
        Ok(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: format!("{what} size overflows"),
        })?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl Corpus {
    pub fn splits(&self) -> [&Dataset; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for ds in self.splits() {
            ds.write(&dir.join(split_file(ds.header.split)))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        Ok(Corpus {
            train: Dataset::read(&dir.join(split_file(Split::Train)))?,
            val: Dataset::read(&dir.join(split_file(Split::Val)))?,
            test: Dataset::read(&dir.join(split_file(Split::Test)))?,
        })
    }
}

pub fn split_file(split: Split) -> String {
    format!("{split}.nsqd")
}

/// Z-scores each column of a row-major `frames x cols` block in place using
/// the population standard deviation; zero-variance columns become zeros.
pub fn zscore_block(data: &mut [f64], frames: usize, cols: usize) {
    if frames == 0 {
        return;
    }
    for c in 0..cols {
        let mean = (0..frames).map(|r| data[r * cols + c]).sum::<f64>() / frames as f64;
        let var = (0..frames)
            .map(|r| (data[r * cols + c] - mean).powi(2))
            .sum::<f64>()
            / frames as f64;
        let std = var.sqrt();
        for r in 0..frames {
            let v = &mut data[r * cols + c];
            *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
        }
    }
}

/// Feature matrices z-scored per `(day, block)` using the statistics of all
/// frames of that block present in `trials`.
pub fn zscore_by_block(trials: &[NeuralTrial]) -> Vec<Tensor> {
    let mut groups: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        groups.entry((t.day, t.block)).or_default().push(i);
    }
    let mut out: Vec<Option<Tensor>> = vec![None; trials.len()];
    for members in groups.values() {
        let cols = trials[members[0]].columns;
        let mut stacked: Vec<f64> = Vec::new();
        for &i in members {
            stacked.extend(trials[i].features.iter().map(|&v| v as f64));
        }
        let frames = stacked.len() / cols.max(1);
        zscore_block(&mut stacked, frames, cols);
        let mut offset = 0;
        for &i in members {
            let n = trials[i].frames * cols;
            let data = stacked[offset..offset + n].to_vec();
            offset += n;
            out[i] = Some(Tensor::new(vec![trials[i].frames, cols], data).expect("shape matches"));
        }
    }
    out.into_iter().map(|t| t.expect("every trial grouped")).collect()
}

/// Model-ready trial: z-scored `f64` features and `usize` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub day: usize,
    pub features: Tensor,
    pub phonemes: Vec<usize>,
    pub words: Vec<usize>,
    pub text: String,
    pub mfcc: Tensor,
}

pub fn prepare(dataset: &Dataset) -> Vec<Example> {
    let features = zscore_by_block(&dataset.trials);
    dataset
        .trials
        .iter()
        .zip(features)
        .map(|(t, features)| Example {
            day: t.day as usize,
            features,
            phonemes: t.phonemes.iter().map(|&p| p as usize).collect(),
            words: t.words.iter().map(|&w| w as usize).collect(),
            text: t.text.clone(),
            mfcc: Tensor::new(
                vec![t.mfcc_frames(), MFCC_DIM],
                t.mfcc.iter().map(|&v| v as f64).collect(),
            )
            .expect("shape matches"),
        })
        .collect()
}

/// Retains `round(fraction * n_d)` trials of every day `d`, chosen as the
/// prefix of a per-day seeded permutation (so smaller fractions are nested
/// inside larger ones) and returned in original order.
pub fn subsample_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_day: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.trials.iter().enumerate() {
        by_day.entry(t.day).or_default().push(i);
    }
    let mut keep = vec![false; dataset.trials.len()];
    for (&day, members) in &by_day {
        let n = (fraction * members.len() as f64).round() as usize;
        if n == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} leaves day {day} with no trials"
            )));
        }
        let mut order = members.clone();
        order.shuffle(&mut stream_rng(seed, 1000 + day as u64));
        for &i in &order[..n] {
            keep[i] = true;
        }
    }
    let trials: Vec<NeuralTrial> = dataset
        .trials
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    let mut header = dataset.header.clone();
    header.refresh(&trials);
    Ok(Dataset { header, trials })
}
