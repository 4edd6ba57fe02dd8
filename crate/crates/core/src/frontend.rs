//! Dual-branch convolutional front end.
//!
//! Spike counts and band power pass through separate 1-D convolution stacks
//! (the first layer of each stack downsamples by `stride`), are merged by
//! concatenation, and are then reweighted frame by frame by a content gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Linear};
use neuroseq_autodiff::{Graph, Padding, ParamId, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontEndConfig {
    /// Electrodes; the input has `2 * channels` columns.
    pub channels: usize,
    pub kernel: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub stride: usize,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            kernel: 5,
            layers: 2,
            latent_dim: 64,
            stride: 4,
        }
    }
}

impl FrontEndConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel == 0 || self.layers == 0 || self.channels == 0 {
            return Err(Error::Config(
                "front end stride, kernel, layers and channels must be positive".into(),
            ));
        }
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "latent width {} must be even and positive",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Latent length for `frames` input frames under same padding.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        b.scoped(name, |b| {
            Ok(Self {
                w: b.param("w", &[cout, cin, k], Init::Uniform(bound))?,
                b: b.param("b", &[1, cout], Init::Zeros)?,
                stride,
            })
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, self.stride, Padding::Same)?;
        let b = g.param(self.b);
        Ok(g.add_row(y, b)?)
    }
}

/// Per-frame gate `x * sigmoid(x W + b)`.
#[derive(Clone, Debug)]
pub struct ContentGate {
    pub linear: Linear,
}

impl ContentGate {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(b, "gate", dim, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = self.linear.forward(g, x)?;
        let gate = g.sigmoid(logits);
        Ok(g.mul(x, gate)?)
    }
}

#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub config: FrontEndConfig,
    spike: Vec<Conv>,
    band: Vec<Conv>,
    pub gate: ContentGate,
}

impl FrontEnd {
    pub fn new(b: &mut Builder, config: &FrontEndConfig) -> Result<Self> {
        config.validate()?;
        let half = config.latent_dim / 2;
        let branch = |b: &mut Builder, name: &str| -> Result<Vec<Conv>> {
            b.scoped(name, |b| {
                (0..config.layers)
                    .map(|i| {
                        let cin = if i == 0 { config.channels } else { half };
                        let stride = if i == 0 { config.stride } else { 1 };
                        Conv::new(b, &format!("conv{i}"), cin, half, config.kernel, stride)
                    })
                    .collect()
            })
        };
        b.scoped("frontend", |b| {
            Ok(Self {
                config: config.clone(),
                spike: branch(b, "spike")?,
                band: branch(b, "band")?,
                gate: ContentGate::new(b, config.latent_dim)?,
            })
        })
    }

    /// Maps a `T x 2*channels` feature matrix to an `L x D` latent sequence,
    /// `L = ceil(T / stride)`.
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let (t, cols) = (g.shape(features)[0], g.shape(features)[1]);
        let ch = self.config.channels;
        if cols != 2 * ch {
            return Err(Error::Data(format!(
                "expected {} feature columns, found {cols}",
                2 * ch
            )));
        }
        if t < self.config.kernel {
            return Err(neuroseq_autodiff::Error::InputTooShort {
                op: "frontend",
                len: t,
                kernel: self.config.kernel,
            }
            .into());
        }
        let mut outs = Vec::with_capacity(2);
        for (stack, range) in [(&self.spike, 0..ch), (&self.band, ch..2 * ch)] {
            let mut h = g.slice_cols(features, range.start, range.end)?;
            for conv in stack {
                h = conv.forward(g, h)?;
                h = g.gelu(h);
            }
            outs.push(h);
        }
        let merged = g.concat_cols(&outs)?;
        self.gate.forward(g, merged)
    }
}
