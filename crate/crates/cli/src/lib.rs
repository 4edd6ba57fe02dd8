//! Command-line surface for data generation, training, evaluation,
//! decoding, rescoring, held-out-day analysis, scaling sweeps,
//! benchmarking and attention export.

pub mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use neuroseq::attention::{capture_attention, write_export};
use neuroseq::dataset::{prepare, split_file, Corpus, Dataset, Example, Split};
use neuroseq::decode::{beam_search, encode_trial, greedy, nucleus_sample, predict_phonemes, Hypothesis, ModelScorer};
use neuroseq::eval::{evaluate, EvalReport, LENGTH_CAP};
use neuroseq::heldout::run_heldout;
use neuroseq::lm::BigramLm;
use neuroseq::metrics::{bootstrap_ci, wer, Interval};
use neuroseq::model::{Model, Variant};
use neuroseq::rescore::{blend_wer, rescore_trial, tune_weights, BlendWeights, TrialRescore};
use neuroseq::scaling::{fit_cells, run_cell, ScalingCell};
use neuroseq::synth::{generate_corpus, stream_rng};
use neuroseq::train::{metrics_csv, Checkpoint, TrainData, Trainer};
use neuroseq::vocab::{PhonemeVocab, WordVocab};
use neuroseq::{Error, Result};

pub use config::{RunConfig, CONFIG_ENV};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "neuroseq", version, about = "Sequence-to-sequence decoding of synthetic intracortical speech data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML configuration file (default: $NEUROSEQ_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecodeMode {
    Greedy,
    Beam,
    Nucleus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (three split files and a manifest).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (encoder, phoneme decoder, MFCC head) or stage 2 (word decoder).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long, value_parser = ["seq2seq", "ctc"])]
        variant: Option<String>,
        #[arg(long, value_parser = ["nhs", "linear", "none"])]
        daycal: Option<String>,
        #[arg(long)]
        mfcc: Option<Toggle>,
        /// Stage-1 checkpoint to continue from (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy PER/WER of one or more checkpoints, with bootstrap intervals over them.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-trial hypotheses as JSON lines.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: DecodeMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Candidate generation and three-signal rescoring.
    Rescore {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Grid-search blend weights on the validation split first.
        #[arg(long)]
        tune: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out-day generalization with proximal calibration.
    Heldout {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain over training-set fractions and fit a power law.
    Scale {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run fraction x seed cells on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Wall-clock throughput of direct and rescored decoding.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention maps of one trial as CSV matrices and an SVG panel.
    AttnExport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        trial_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Creates `out` and records the resolved config and tool version there.
fn open_output(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out.join("VERSION"), format!("{VERSION}\n"))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_split(data: &Path, split: Split) -> Result<Dataset> {
    Dataset::read(&data.join(split_file(split)))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model)> {
    let mut c = Checkpoint::load(path)?;
    let m = c.model()?;
    Ok((c, m))
}

fn select_trial<'a>(examples: &'a [Example], id: usize) -> Result<&'a Example> {
    examples
        .get(id)
        .ok_or_else(|| Error::Config(format!("unknown trial id {id} (split has {} trials)", examples.len())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, seed, out } => gen_data(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, seed, &out),
        Command::Train {
            cfg,
            data,
            out,
            stage,
            variant,
            daycal,
            mfcc,
            init,
            seed,
        } => {
            let mut overrides = cfg.overrides.clone();
            if let Some(s) = stage {
                overrides.push(format!("train.stage={s}"));
            }
            if let Some(v) = variant {
                overrides.push(format!("model.variant=\"{v}\""));
            }
            if let Some(d) = daycal {
                overrides.push(format!("model.daycal.kind=\"{d}\""));
            }
            if mfcc == Some(Toggle::Off) {
                overrides.push("train.loss.mfcc=0.0".into());
            }
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            let rc = RunConfig::load(cfg.config.as_deref(), &overrides)?;
            train(&rc, &data, &out, init.as_deref())
        }
        Command::Eval {
            cfg,
            data,
            checkpoints,
            split,
            out,
        } => eval(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &checkpoints, split.into(), &out),
        Command::Decode {
            cfg,
            data,
            checkpoint,
            split,
            mode,
            out,
        } => decode(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &checkpoint, split.into(), mode, &out),
        Command::Rescore {
            cfg,
            data,
            checkpoint,
            split,
            tune,
            out,
        } => rescore(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &checkpoint, split.into(), tune, &out),
        Command::Heldout { cfg, data, out } => heldout(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &out),
        Command::Scale {
            cfg,
            data,
            out,
            parallel,
        } => scale(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &out, parallel),
        Command::Bench {
            cfg,
            data,
            checkpoint,
            split,
            trials,
            out,
        } => bench(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &checkpoint, split.into(), trials, &out),
        Command::AttnExport {
            cfg,
            data,
            checkpoint,
            split,
            trial_id,
            out,
        } => attn_export(&RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?, &data, &checkpoint, split.into(), trial_id, &out),
    }
}

#[derive(Serialize)]
struct ManifestFile {
    name: String,
    records: usize,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    seed: u64,
    files: Vec<ManifestFile>,
}

pub fn gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus, seed)?;
    open_output(out, cfg)?;
    let mut files = Vec::new();
    for ds in corpus.splits() {
        let bytes = ds.to_bytes()?;
        let name = split_file(ds.header.split);
        std::fs::write(out.join(&name), &bytes)?;
        files.push(ManifestFile {
            name,
            records: ds.len(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            version: VERSION,
            seed,
            files,
        },
    )
}

#[derive(Serialize)]
struct TrainSummary {
    stage: u8,
    epochs: usize,
    best_metric: Option<f64>,
    selection_metric: &'static str,
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let corpus = Corpus::read_dir(data)?;
    let words = corpus.train.header.words.clone();
    let train = prepare(&corpus.train);
    let val = prepare(&corpus.val);
    let trainer = match (cfg.train.stage, init) {
        (1, None) => Trainer::stage1(&cfg.model, &cfg.train, neuroseq::train::days_of(&train), &words)?,
        (1, Some(_)) => return Err(Error::Config("--init is only used by stage 2".into())),
        (2, Some(path)) => {
            let stage1 = Checkpoint::load(path)?;
            if stage1.arch.model != cfg.model {
                return Err(Error::Config(
                    "model configuration differs from the stage-1 checkpoint's architecture".into(),
                ));
            }
            Trainer::stage2(&stage1, &cfg.train)?
        }
        (2, None) => return Err(Error::Config("stage 2 requires a stage-1 checkpoint (--init)".into())),
        (s, _) => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    open_output(out, cfg)?;
    let audit = trainer.model.audit(&trainer.ckpt.store);
    write_json(&out.join("audit.json"), &audit)?;
    let data = TrainData {
        train: &train,
        val: &val,
        words: &words,
    };
    let mut rows = Vec::new();
    let result = trainer.fit(&data, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val PER {:.4}{}  lr {:.2e}",
            m.epoch,
            m.loss,
            m.val_per,
            m.val_wer.map(|w| format!("  val WER {w:.4}")).unwrap_or_default(),
            m.lr
        );
        rows.push(m.clone());
    });
    std::fs::write(out.join("metrics.csv"), metrics_csv(&rows))?;
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NonFinite { message, last_good }) => {
            if let Some(c) = &last_good {
                c.save(&out.join("last_good.nsqc"))?;
            }
            return Err(Error::NonFinite { message, last_good });
        }
        Err(e) => return Err(e),
    };
    outcome.best.save(&out.join("best.nsqc"))?;
    outcome.last.save(&out.join("last.nsqc"))?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            stage: cfg.train.stage,
            epochs: outcome.history.len(),
            best_metric: outcome.best.best_metric,
            selection_metric: if cfg.train.stage == 1 { "val_per" } else { "val_wer" },
        },
    )
}

#[derive(Serialize)]
struct CheckpointEval {
    checkpoint: String,
    per: f64,
    per_per_trial: f64,
    wer: Option<f64>,
    wer_per_trial: Option<f64>,
    empty_references: usize,
}

#[derive(Serialize)]
struct EvalSummary {
    split: Split,
    aggregation: neuroseq::metrics::Aggregation,
    checkpoints: Vec<CheckpointEval>,
    per: Interval,
    wer: Option<Interval>,
}

fn eval_examples(data: &Path, split: Split) -> Result<(Dataset, Vec<Example>)> {
    let ds = load_split(data, split)?;
    let ex = prepare(&ds);
    Ok((ds, ex))
}

pub fn eval(cfg: &RunConfig, data: &Path, checkpoints: &[PathBuf], split: Split, out: &Path) -> Result<()> {
    let (ds, examples) = eval_examples(data, split)?;
    let mut rows = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in checkpoints {
        let (c, model) = load_checkpoint(path)?;
        let report = evaluate(&model, &c.store, &examples, &ds.header.words, LENGTH_CAP)?;
        rows.push(CheckpointEval {
            checkpoint: path.display().to_string(),
            per: report.per(cfg.eval.aggregation),
            per_per_trial: report.per(neuroseq::metrics::Aggregation::PerTrial),
            wer: report.wer(cfg.eval.aggregation),
            wer_per_trial: report.wer(neuroseq::metrics::Aggregation::PerTrial),
            empty_references: report.empty_references(),
        });
        reports.push(report);
    }
    let pers: Vec<f64> = rows.iter().map(|r| r.per).collect();
    let wers: Option<Vec<f64>> = rows.iter().map(|r| r.wer).collect();
    let summary = EvalSummary {
        split,
        aggregation: cfg.eval.aggregation,
        per: bootstrap_ci(&pers, cfg.eval.n_boot, cfg.eval.level, cfg.eval.seed)?,
        wer: wers
            .map(|w| bootstrap_ci(&w, cfg.eval.n_boot, cfg.eval.level, cfg.eval.seed))
            .transpose()?,
        checkpoints: rows,
    };
    open_output(out, cfg)?;
    write_json(&out.join("eval.json"), &summary)?;
    let trials: Vec<_> = reports.into_iter().flat_map(|r| r.trials).collect();
    write_jsonl(&out.join("predictions.jsonl"), &trials)
}

#[derive(Serialize)]
struct DecodedHypothesis {
    tokens: Vec<usize>,
    text: String,
    log_prob: f64,
    finished: bool,
}

#[derive(Serialize)]
struct DecodedTrial {
    trial: usize,
    day: usize,
    reference: String,
    phonemes: Vec<String>,
    hypotheses: Vec<DecodedHypothesis>,
}

pub fn decode(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: Split, mode: DecodeMode, out: &Path) -> Result<()> {
    cfg.decode.validate()?;
    let (ds, examples) = eval_examples(data, split)?;
    let (c, model) = load_checkpoint(checkpoint)?;
    let vocab = WordVocab::new(ds.header.words.clone());
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let enc = encode_trial(&model, &c.store, &ex.features, ex.day, false)?;
        let phonemes = predict_phonemes(&model, &c.store, &enc, cfg.rescore.max_phonemes)?;
        let hyps: Vec<Hypothesis> = if model.has_word_decoder() {
            let mut scorer = ModelScorer::words(&model, &c.store, enc.memory.clone());
            match mode {
                DecodeMode::Greedy => vec![greedy(&mut scorer, cfg.decode.max_len)?],
                DecodeMode::Beam => beam_search(&mut scorer, cfg.decode.beam_width, cfg.decode.max_len)?,
                DecodeMode::Nucleus => {
                    let mut rng = stream_rng(cfg.decode.seed, 100_000 + i as u64);
                    nucleus_sample(&mut scorer, &cfg.decode, &mut rng)?
                }
            }
        } else {
            Vec::new()
        };
        rows.push(DecodedTrial {
            trial: i,
            day: ex.day,
            reference: ex.text.clone(),
            phonemes: phonemes.iter().map(|&p| PhonemeVocab::symbol(p).to_string()).collect(),
            hypotheses: hyps
                .into_iter()
                .map(|h| DecodedHypothesis {
                    text: vocab.text(&h.tokens),
                    tokens: h.tokens,
                    log_prob: h.log_prob,
                    finished: h.finished,
                })
                .collect(),
        });
    }
    open_output(out, cfg)?;
    write_jsonl(&out.join("hypotheses.jsonl"), &rows)
}

#[derive(Serialize)]
struct RescoreSummary {
    trials: usize,
    weights: BlendWeights,
    tuned_val_wer: Option<f64>,
    greedy_wer: f64,
    beam_top_wer: f64,
    blend_wer: f64,
    oracle_wer: f64,
}

fn rescore_split(
    cfg: &RunConfig,
    model: &Model,
    c: &Checkpoint,
    ds: &Dataset,
    lm: &BigramLm,
    rescore_cfg: &neuroseq::rescore::RescoreConfig,
) -> Result<Vec<TrialRescore>> {
    let vocab = WordVocab::new(ds.header.words.clone());
    let examples = prepare(ds);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            rescore_trial(
                model,
                &c.store,
                &ex.features,
                ex.day,
                i,
                &ex.text,
                &vocab,
                &ds.header.lexicon,
                lm,
                &cfg.decode,
                rescore_cfg,
            )
        })
        .collect()
}

/// Pooled WER of one chosen candidate (or the greedy output) per trial.
pub fn pooled_wer<'a>(trials: &'a [TrialRescore], pick: impl Fn(&'a TrialRescore) -> &'a str) -> f64 {
    let (mut e, mut n) = (0, 0);
    for t in trials {
        let c = wer(&t.reference, pick(t));
        e += c.edits;
        n += c.ref_len;
    }
    e as f64 / n.max(1) as f64
}

pub fn rescore(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: Split, tune: bool, out: &Path) -> Result<()> {
    let (c, model) = load_checkpoint(checkpoint)?;
    let train = load_split(data, Split::Train)?;
    let sentences: Vec<&str> = train.trials.iter().map(|t| t.text.as_str()).collect();
    let lm = BigramLm::fit(&sentences, cfg.rescore.lm_k)?;
    let mut rcfg = cfg.rescore.clone();
    let mut tuned_val_wer = None;
    if tune {
        let val = load_split(data, Split::Val)?;
        let val_trials = rescore_split(cfg, &model, &c, &val, &lm, &rcfg)?;
        let (w, e) = tune_weights(&val_trials, 9)?;
        rcfg.weights = w;
        tuned_val_wer = Some(e);
    }
    let ds = load_split(data, split)?;
    let trials = rescore_split(cfg, &model, &c, &ds, &lm, &rcfg)?;
    let summary = RescoreSummary {
        trials: trials.len(),
        weights: rcfg.weights,
        tuned_val_wer,
        greedy_wer: pooled_wer(&trials, |t| t.greedy.as_str()),
        beam_top_wer: pooled_wer(&trials, |t| t.candidates[0].text.as_str()),
        blend_wer: blend_wer(&trials, &rcfg.weights)?,
        oracle_wer: pooled_wer(&trials, |t| t.candidates[t.oracle].text.as_str()),
    };
    open_output(out, cfg)?;
    write_jsonl(&out.join("rescore.jsonl"), &trials)?;
    let selected: String = trials
        .iter()
        .map(|t| format!("{}\n", t.candidates[t.selected].text))
        .collect();
    std::fs::write(out.join("selected.txt"), selected)?;
    write_json(&out.join("summary.json"), &summary)
}

pub fn heldout(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::read_dir(data)?;
    let report = run_heldout(&corpus, &cfg.model, &cfg.train, &cfg.heldout, |seed, run| {
        eprintln!("seed {seed}: gap correction {:.4}", run.gap_correction);
    })?;
    open_output(out, cfg)?;
    write_json(&out.join("heldout.json"), &report)?;
    std::fs::write(out.join("deltas.csv"), report.csv())?;
    Ok(())
}

pub fn scale(cfg: &RunConfig, data: &Path, out: &Path, parallel: bool) -> Result<()> {
    let corpus = Corpus::read_dir(data)?;
    let val = prepare(&corpus.val);
    let test = prepare(&corpus.test);
    let sc = &cfg.scaling;
    let jobs: Vec<(f64, u64)> = sc
        .fractions
        .iter()
        .flat_map(|&f| sc.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let cell = |&(f, s): &(f64, u64)| run_cell(&corpus.train, &val, &test, &cfg.model, &cfg.train, f, s);
    let cells: Vec<ScalingCell> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|j| scope.spawn(move || cell(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scaling worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        jobs.iter()
            .map(|j| {
                let c = cell(j)?;
                eprintln!("fraction {} seed {}: test PER {:.2}%", c.fraction, c.seed, c.test_per);
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let report = fit_cells(cells, sc, cfg.eval.seed)?;
    open_output(out, cfg)?;
    write_json(&out.join("scaling.json"), &report)?;
    std::fs::write(out.join("points.csv"), report.csv())?;
    let mut table = String::from("n,estimate,low,high\n");
    for e in &report.fit.extrapolations {
        table.push_str(&format!("{},{},{},{}\n", e.n, e.interval.estimate, e.interval.low, e.interval.high));
    }
    std::fs::write(out.join("extrapolation.csv"), table)?;
    Ok(())
}

/// Throughput in the columns of a decoding-speed table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Throughput {
    pub sentences_per_s: f64,
    pub words_per_s: f64,
    pub ms_per_sentence: f64,
    pub ms_per_word: f64,
}

impl Throughput {
    fn new(seconds: f64, sentences: usize, words: usize) -> Self {
        let s = seconds.max(f64::MIN_POSITIVE);
        Self {
            sentences_per_s: sentences as f64 / s,
            words_per_s: words as f64 / s,
            ms_per_sentence: 1000.0 * s / sentences.max(1) as f64,
            ms_per_word: 1000.0 * s / words.max(1) as f64,
        }
    }
}

#[derive(Serialize)]
struct BenchReport {
    trials: usize,
    words: usize,
    direct: Throughput,
    rescored: Throughput,
}

pub fn bench(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: Split, trials: usize, out: &Path) -> Result<()> {
    let (c, model) = load_checkpoint(checkpoint)?;
    if !model.has_word_decoder() {
        return Err(Error::Config("bench needs a stage-2 checkpoint".into()));
    }
    let ds = load_split(data, split)?;
    let examples: Vec<Example> = prepare(&ds).into_iter().take(trials).collect();
    let words: usize = examples.iter().map(|e| e.words.len()).sum();
    let vocab = WordVocab::new(ds.header.words.clone());
    let train = load_split(data, Split::Train)?;
    let sentences: Vec<&str> = train.trials.iter().map(|t| t.text.as_str()).collect();
    let lm = BigramLm::fit(&sentences, cfg.rescore.lm_k)?;

    let t = Instant::now();
    for ex in &examples {
        let enc = encode_trial(&model, &c.store, &ex.features, ex.day, false)?;
        let mut scorer = ModelScorer::words(&model, &c.store, enc.memory.clone());
        greedy(&mut scorer, cfg.decode.max_len)?;
    }
    let direct = Throughput::new(t.elapsed().as_secs_f64(), examples.len(), words);

    let t = Instant::now();
    for (i, ex) in examples.iter().enumerate() {
        rescore_trial(
            &model,
            &c.store,
            &ex.features,
            ex.day,
            i,
            &ex.text,
            &vocab,
            &ds.header.lexicon,
            &lm,
            &cfg.decode,
            &cfg.rescore,
        )?;
    }
    let rescored = Throughput::new(t.elapsed().as_secs_f64(), examples.len(), words);
    open_output(out, cfg)?;
    write_json(
        &out.join("bench.json"),
        &BenchReport {
            trials: examples.len(),
            words,
            direct,
            rescored,
        },
    )
}

pub fn attn_export(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: Split, trial_id: usize, out: &Path) -> Result<()> {
    let (c, model) = load_checkpoint(checkpoint)?;
    if model.variant() == Variant::Ctc {
        return Err(Error::Config("the CTC variant has no attention to export".into()));
    }
    let (_, examples) = eval_examples(data, split)?;
    let ex = select_trial(&examples, trial_id)?;
    let export = capture_attention(&model, &c.store, ex, cfg.rescore.max_phonemes)?;
    open_output(out, cfg)?;
    write_export(&export, out, trial_id)?;
    Ok(())
}
