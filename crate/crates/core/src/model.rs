//! Full decoder: front end, day calibration, and either the Transformer
//! sequence-to-sequence body or the GRU + CTC baseline, with optional MFCC
//! head (stage 1) and word decoder (stage 2).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::{ctc_loss, CtcHead, Gru, GruConfig};
use crate::daycal::{CalibrationAudit, DayCalConfig, DayCalibration};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::frontend::{FrontEnd, FrontEndConfig};
use crate::nn::{Builder, Ctx};
use crate::seq2seq::{pool_rows, DecoderOutput, Encoder, MfccHead, TokenDecoder, TransformerConfig};
use crate::vocab::PhonemeVocab;
use neuroseq_autodiff::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Seq2seq,
    Ctc,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Self::Seq2seq),
            "ctc" => Ok(Self::Ctc),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub frontend: FrontEndConfig,
    pub daycal: DayCalConfig,
    pub transformer: TransformerConfig,
    pub gru: GruConfig,
    /// Encoder (or GRU) layer whose output feeds the MFCC head.
    pub mfcc_tap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Seq2seq,
            frontend: FrontEndConfig::default(),
            daycal: DayCalConfig::default(),
            transformer: TransformerConfig::default(),
            gru: GruConfig::default(),
            mfcc_tap: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.transformer.validate()?;
        let layers = match self.variant {
            Variant::Seq2seq => self.transformer.encoder_layers,
            Variant::Ctc => self.gru.layers,
        };
        if self.mfcc_tap >= layers {
            return Err(Error::Config(format!(
                "mfcc_tap {} must be below the {layers} encoder layers",
                self.mfcc_tap
            )));
        }
        Ok(())
    }
}

/// Everything that determines the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    /// Recording days with their own calibration parameters.
    pub days: Vec<usize>,
    pub n_words: usize,
    pub mfcc_head: bool,
    pub word_decoder: bool,
}

#[derive(Clone, Debug)]
enum Body {
    Transformer { encoder: Encoder, phonemes: TokenDecoder },
    Gru { gru: Gru, head: CtcHead },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub frontend: FrontEnd,
    pub daycal: DayCalibration,
    body: Body,
    mfcc: Option<MfccHead>,
    words: Option<TokenDecoder>,
}

/// Output of the shared encoding path for one trial.
pub struct Encoded {
    /// Calibrated latent sequence, `L x D`.
    pub latent: Var,
    /// Per-layer encoder (or GRU) states.
    pub states: Vec<Var>,
    /// What the decoders attend to.
    pub memory: Var,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub phoneme: f64,
    pub mfcc: f64,
    pub word: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            phoneme: 1.0,
            mfcc: 0.001,
            word: 1.0,
        }
    }
}

pub struct Losses {
    pub total: Var,
    pub phoneme: f64,
    pub mfcc: f64,
    pub word: f64,
}

/// Module identities and parameter counts of a built model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphAudit {
    pub modules: Vec<String>,
    pub parameters: usize,
    pub calibration: CalibrationAudit,
}

pub const WORD_DECODER_STREAM: u64 = 20;
const MODEL_STREAM: u64 = 10;

impl Model {
    /// Creates missing parameters (initialized from `seed`) and binds to
    /// existing ones of the same name.
    pub fn build(store: &mut ParamStore, arch: &Architecture, seed: u64) -> Result<Model> {
        let cfg = &arch.model;
        cfg.validate()?;
        let mut b = Builder::new(store, seed, MODEL_STREAM);
        let frontend = FrontEnd::new(&mut b, &cfg.frontend)?;
        let latent = cfg.frontend.latent_dim;
        let daycal = DayCalibration::new(&mut b, &cfg.daycal, latent, &arch.days)?;
        let (body, memory_dim, tap_dim) = match cfg.variant {
            Variant::Seq2seq => {
                let encoder = Encoder::new(&mut b, &cfg.transformer, latent)?;
                let phonemes = TokenDecoder::new(
                    &mut b,
                    "phoneme_decoder",
                    &cfg.transformer,
                    cfg.transformer.phoneme_layers,
                    PhonemeVocab::DECODER_SIZE,
                    cfg.transformer.d_model,
                )?;
                let d = cfg.transformer.d_model;
                (Body::Transformer { encoder, phonemes }, d, d)
            }
            Variant::Ctc => {
                let gru = Gru::new(&mut b, &cfg.gru, latent)?;
                let head = CtcHead::new(&mut b, cfg.gru.output_dim(), PhonemeVocab::SIZE)?;
                let d = cfg.gru.output_dim();
                (Body::Gru { gru, head }, d, d)
            }
        };
        let mfcc = if arch.mfcc_head {
            Some(MfccHead::new(&mut b, tap_dim)?)
        } else {
            None
        };
        drop(b);
        let words = if arch.word_decoder {
            let mut b = Builder::new(store, seed, WORD_DECODER_STREAM);
            Some(TokenDecoder::new(
                &mut b,
                "word_decoder",
                &cfg.transformer,
                cfg.transformer.word_layers,
                arch.n_words + 3,
                memory_dim,
            )?)
        } else {
            None
        };
        Ok(Model {
            arch: arch.clone(),
            frontend,
            daycal,
            body,
            mfcc,
            words,
        })
    }

    pub fn variant(&self) -> Variant {
        self.arch.model.variant
    }

    pub fn has_word_decoder(&self) -> bool {
        self.words.is_some()
    }

    pub fn encoder_layers(&self) -> usize {
        match &self.body {
            Body::Transformer { encoder, .. } => encoder.layers(),
            Body::Gru { gru, .. } => gru.config.layers,
        }
    }

    /// Front end, calibration for `day`, then the encoder body.
    pub fn encode(&self, g: &mut Graph, features: Var, day: usize, ctx: &mut Ctx) -> Result<Encoded> {
        let latent = self.frontend.forward(g, features)?;
        let latent = self.daycal.forward(g, latent, day)?;
        match &self.body {
            Body::Transformer { encoder, .. } => {
                let out = encoder.forward(g, latent, ctx)?;
                Ok(Encoded {
                    latent,
                    states: out.states,
                    memory: out.memory,
                    attention: out.attention,
                })
            }
            Body::Gru { gru, .. } => {
                let x = ctx.drop(g, latent)?;
                let states = gru.forward(g, x)?;
                let memory = *states.last().expect("GRU has layers");
                Ok(Encoded {
                    latent,
                    states,
                    memory,
                    attention: Vec::new(),
                })
            }
        }
    }

    /// Teacher-forced phoneme decoder logits (Transformer variant).
    pub fn phoneme_logits(&self, g: &mut Graph, memory: Var, inputs: &[usize], ctx: &mut Ctx) -> Result<DecoderOutput> {
        match &self.body {
            Body::Transformer { phonemes, .. } => phonemes.forward(g, memory, inputs, ctx),
            Body::Gru { .. } => Err(Error::Config("the CTC variant has no phoneme decoder".into())),
        }
    }

    /// Per-frame CTC logits over phonemes plus blank (GRU variant).
    pub fn ctc_logits(&self, g: &mut Graph, memory: Var) -> Result<Var> {
        match &self.body {
            Body::Gru { head, .. } => head.forward(g, memory),
            Body::Transformer { .. } => Err(Error::Config("the Transformer variant has no CTC head".into())),
        }
    }

    pub fn word_logits(&self, g: &mut Graph, memory: Var, inputs: &[usize], ctx: &mut Ctx) -> Result<DecoderOutput> {
        match &self.words {
            Some(d) => d.forward(g, memory, inputs, ctx),
            None => Err(Error::Config("model has no word decoder (stage 1)".into())),
        }
    }

    pub fn mfcc_prediction(&self, g: &mut Graph, enc: &Encoded) -> Result<Option<Var>> {
        match &self.mfcc {
            Some(head) => Ok(Some(head.forward(g, enc.states[self.arch.model.mfcc_tap])?)),
            None => Ok(None),
        }
    }

    /// Weighted multitask loss for one trial.
    pub fn loss(
        &self,
        g: &mut Graph,
        ex: &Example,
        weights: &LossWeights,
        ctx: &mut Ctx,
    ) -> Result<Losses> {
        if ex.phonemes.iter().any(|&p| p >= PhonemeVocab::N_PHONEMES) {
            return Err(Error::InvalidTarget("phoneme target outside the 39 phonemes".into()));
        }
        let x = g.constant(ex.features.clone());
        let enc = self.encode(g, x, ex.day, ctx)?;
        let phoneme = match &self.body {
            Body::Transformer { phonemes, .. } => {
                let mut inputs = vec![PhonemeVocab::BOS];
                inputs.extend(&ex.phonemes);
                let mut targets = ex.phonemes.clone();
                targets.push(PhonemeVocab::EOS);
                let out = phonemes.forward(g, enc.memory, &inputs, ctx)?;
                g.cross_entropy(out.logits, &targets, None)?
            }
            Body::Gru { head, .. } => {
                let logits = head.forward(g, enc.memory)?;
                let lp = g.log_softmax_rows(logits);
                let nll = ctc_loss(g, lp, &ex.phonemes, PhonemeVocab::BLANK)?;
                g.scale(nll, 1.0 / ex.phonemes.len().max(1) as f64)
            }
        };
        let phoneme_value = g.value(phoneme).item();
        let mut total = g.scale(phoneme, weights.phoneme);
        let mut mfcc_value = 0.0;
        if let (Some(head), true) = (&self.mfcc, weights.mfcc != 0.0) {
            let target = pool_rows(&ex.mfcc, self.arch.model.frontend.stride);
            let l = head.loss(g, enc.states[self.arch.model.mfcc_tap], &target)?;
            mfcc_value = g.value(l).item();
            let l = g.scale(l, weights.mfcc);
            total = g.add(total, l)?;
        }
        let mut word_value = 0.0;
        if let (Some(dec), true) = (&self.words, weights.word != 0.0) {
            let n = self.arch.n_words;
            let mut inputs = vec![n];
            inputs.extend(&ex.words);
            let mut targets = ex.words.clone();
            targets.push(n + 1);
            let out = dec.forward(g, enc.memory, &inputs, ctx)?;
            let l = g.cross_entropy(out.logits, &targets, None)?;
            word_value = g.value(l).item();
            let l = g.scale(l, weights.word);
            total = g.add(total, l)?;
        }
        Ok(Losses {
            total,
            phoneme: phoneme_value,
            mfcc: mfcc_value,
            word: word_value,
        })
    }

    pub fn audit(&self, store: &ParamStore) -> GraphAudit {
        fn id<T>(_: &T) -> String {
            std::any::type_name::<T>().to_string()
        }
        let mut modules = vec![
            id(&self.frontend),
            format!("{}({:?})", id(&self.daycal), self.daycal.kind()),
        ];
        match &self.body {
            Body::Transformer { encoder, phonemes } => {
                modules.push(id(encoder));
                modules.push(format!("{}(phonemes)", id(phonemes)));
            }
            Body::Gru { gru, head } => {
                modules.push(id(gru));
                modules.push(id(head));
            }
        }
        if let Some(m) = &self.mfcc {
            modules.push(id(m));
        }
        if let Some(w) = &self.words {
            modules.push(format!("{}(words)", id(w)));
        }
        GraphAudit {
            modules,
            parameters: store.numel(),
            calibration: self.daycal.audit(store),
        }
    }
}

/// SHA-256 over the names and values of every parameter starting with `prefix`.
pub fn checksum(store: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
