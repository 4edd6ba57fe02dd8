//! Transformer encoder, autoregressive token decoders and the MFCC head.

use serde::{Deserialize, Serialize};

use crate::dataset::MFCC_DIM;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Builder, Ctx, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear};
use neuroseq_autodiff::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub phoneme_layers: usize,
    pub word_layers: usize,
    pub ffn: usize,
    /// Disable to make the encoder permutation-equivariant (used in tests).
    pub positional: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            phoneme_layers: 2,
            word_layers: 2,
            ffn: 128,
            positional: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    input: Linear,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    positional: bool,
}

pub struct EncoderOutput {
    /// Output of every layer, before the final norm.
    pub states: Vec<Var>,
    /// Final normalized states, the decoders' memory.
    pub memory: Var,
    /// Head-averaged self-attention per layer (when captured).
    pub attention: Vec<Tensor>,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &TransformerConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        b.scoped("encoder", |b| {
            Ok(Self {
                input: Linear::new(b, "input", input_dim, cfg.d_model, true)?,
                layers: (0..cfg.encoder_layers)
                    .map(|i| EncoderLayer::new(b, &format!("layer{i}"), cfg.d_model, cfg.heads, cfg.ffn))
                    .collect::<Result<_>>()?,
                norm: LayerNorm::new(b, "norm", cfg.d_model)?,
                positional: cfg.positional,
            })
        })
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<EncoderOutput> {
        let mut h = self.input.forward(g, x)?;
        if self.positional {
            let (len, dim) = (g.shape(h)[0], g.shape(h)[1]);
            let pe = sinusoidal_positions(len, dim);
            let pe = g.constant(pe);
            h = g.add(h, pe)?;
        }
        h = ctx.drop(g, h)?;
        let mut states = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::new();
        for layer in &self.layers {
            let (out, w) = layer.forward(g, h, ctx)?;
            h = out;
            states.push(h);
            attention.extend(w);
        }
        let memory = self.norm.forward(g, h)?;
        Ok(EncoderOutput {
            states,
            memory,
            attention,
        })
    }
}

/// Autoregressive Transformer decoder over a token vocabulary.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    embed: Embedding,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    out: Linear,
    vocab: usize,
    dim: usize,
}

pub struct DecoderOutput {
    /// `len(inputs) x vocab`.
    pub logits: Var,
    pub self_attention: Vec<Tensor>,
    pub cross_attention: Vec<Tensor>,
}

impl TokenDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        cfg: &TransformerConfig,
        layers: usize,
        vocab: usize,
        memory_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        b.scoped(name, |b| {
            Ok(Self {
                embed: Embedding::new(b, "embed", vocab, cfg.d_model)?,
                layers: (0..layers)
                    .map(|i| {
                        DecoderLayer::new(b, &format!("layer{i}"), cfg.d_model, memory_dim, cfg.heads, cfg.ffn)
                    })
                    .collect::<Result<_>>()?,
                norm: LayerNorm::new(b, "norm", cfg.d_model)?,
                out: Linear::new(b, "out", cfg.d_model, vocab, true)?,
                vocab,
                dim: cfg.d_model,
            })
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Teacher-forced logits for every position of `inputs` (which start with BOS).
    pub fn forward(&self, g: &mut Graph, memory: Var, inputs: &[usize], ctx: &mut Ctx) -> Result<DecoderOutput> {
        if inputs.is_empty() {
            return Err(Error::InvalidTarget("decoder input is empty".into()));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::InvalidTarget(format!(
                "token {bad} outside decoder vocabulary of {}",
                self.vocab
            )));
        }
        let e = self.embed.forward(g, inputs)?;
        let e = g.scale(e, (self.dim as f64).sqrt());
        let pe = g.constant(sinusoidal_positions(inputs.len(), self.dim));
        let mut h = g.add(e, pe)?;
        h = ctx.drop(g, h)?;
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for layer in &self.layers {
            let out = layer.forward(g, h, memory, ctx)?;
            h = out.hidden;
            self_attention.extend(out.self_attn);
            cross_attention.extend(out.cross_attn);
        }
        let h = self.norm.forward(g, h)?;
        Ok(DecoderOutput {
            logits: self.out.forward(g, h)?,
            self_attention,
            cross_attention,
        })
    }
}

/// Linear MFCC regression from an intermediate encoder layer.
#[derive(Clone, Debug)]
pub struct MfccHead {
    linear: Linear,
}

impl MfccHead {
    pub fn new(b: &mut Builder, input_dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(b, "mfcc_head", input_dim, MFCC_DIM, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.linear.forward(g, states)
    }

    /// Mean squared error against targets already pooled to the encoder cadence.
    pub fn loss(&self, g: &mut Graph, states: Var, targets: &Tensor) -> Result<Var> {
        if targets.cols() != MFCC_DIM {
            return Err(Error::InvalidTarget(format!(
                "MFCC targets have width {}, expected {MFCC_DIM}",
                targets.cols()
            )));
        }
        let pred = self.forward(g, states)?;
        Ok(g.mse(pred, targets)?)
    }
}

/// Mean-pools consecutive groups of `stride` rows, giving `ceil(T / stride)`
/// rows; the last group may be shorter.
pub fn pool_rows(x: &Tensor, stride: usize) -> Tensor {
    let (t, c) = (x.rows(), x.cols());
    let l = t.div_ceil(stride);
    let mut out = Tensor::zeros(&[l, c]);
    for i in 0..l {
        let (lo, hi) = (i * stride, ((i + 1) * stride).min(t));
        let dst = out.row_mut(i);
        for r in lo..hi {
            for (d, v) in dst.iter_mut().zip(x.row(r)) {
                *d += v;
            }
        }
        let n = (hi - lo) as f64;
        dst.iter_mut().for_each(|d| *d /= n);
    }
    out
}
