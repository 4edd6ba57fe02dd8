//! Layers built on the autodiff graph: linear maps, layer norm, embeddings,
//! multi-head attention and Transformer blocks.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. They are created through a
//! [`Builder`], which either adds a freshly initialized parameter or, when a
//! parameter of that name already exists (for instance after loading a
//! checkpoint), binds to it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::synth::stream_rng;
use neuroseq_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Identity,
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    Normal(f64),
}

pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, stream: u64) -> Self {
        Self {
            store,
            rng: stream_rng(seed, stream),
            prefix: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full_name(name);
        if let Some(id) = self.store.id(&full) {
            let have = self.store.value(id).shape();
            if have != shape {
                return Err(Error::Config(format!(
                    "parameter {full} has shape {have:?}, expected {shape:?}"
                )));
            }
            return Ok(id);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Identity => {
                let k = shape[0];
                let mut d = vec![0.0; n];
                for i in 0..k.min(shape[1]) {
                    d[i * shape[1] + i] = 1.0;
                }
                d
            }
            Init::Uniform(a) => (0..n).map(|_| self.rng.gen_range(-a..=a)).collect(),
            Init::Normal(s) => {
                let dist = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        Ok(self.store.add(full, Tensor::new(shape.to_vec(), data)?)?)
    }
}

/// Dropout and attention-capture settings for one forward pass.
pub struct Ctx<'r> {
    pub dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
    pub capture: bool,
}

impl Ctx<'static> {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
            capture: false,
        }
    }

    pub fn capture() -> Self {
        Self {
            capture: true,
            ..Self::eval()
        }
    }
}

impl<'r> Ctx<'r> {
    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            capture: false,
        }
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => Ok(g.dropout(x, self.dropout, || rng.gen::<f64>())?),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        b.scoped(name, |b| {
            Ok(Self {
                w: b.param("w", &[inp, out], Init::Uniform(bound))?,
                b: if bias {
                    Some(b.param("b", &[1, out], Init::Zeros)?)
                } else {
                    None
                },
            })
        })
    }

    pub fn with_init(
        b: &mut Builder,
        name: &str,
        inp: usize,
        out: usize,
        w_init: Init,
        b_init: Init,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                w: b.param("w", &[inp, out], w_init)?,
                b: Some(b.param("b", &[1, out], b_init)?),
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                Ok(g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gain: b.param("gain", &[1, dim], Init::Ones)?,
                bias: b.param("bias", &[1, dim], Init::Zeros)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        Ok(g.layer_norm(x, gain, bias, Self::EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(b: &mut Builder, name: &str, rows: usize, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                table: b.param("table", &[rows, dim], Init::Normal(1.0 / (dim as f64).sqrt()))?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        Ok(g.gather_rows(t, ids)?)
    }
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        b.scoped(name, |b| {
            Ok(Self {
                q: Linear::new(b, "q", dim, dim, true)?,
                k: Linear::new(b, "k", kv_dim, dim, true)?,
                v: Linear::new(b, "v", kv_dim, dim, true)?,
                out: Linear::new(b, "out", dim, dim, true)?,
                heads,
            })
        })
    }

    /// Attends from `query` rows to `memory` rows. With `causal`, row `t`
    /// only sees memory rows `0..=t`. Returns the head-averaged weights when
    /// `ctx.capture` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        memory: Var,
        causal: bool,
        ctx: &mut Ctx,
    ) -> Result<(Var, Option<Tensor>)> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let (lq, lk) = (g.shape(q)[0], g.shape(k)[0]);
        let dim = g.shape(q)[1];
        let dh = dim / self.heads;
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..lq * lk).map(|i| i % lk <= i / lk).collect());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut avg = ctx.capture.then(|| Tensor::zeros(&[lq, lk]));
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows_masked(scores, mask.as_deref())?;
            if let Some(a) = avg.as_mut() {
                a.add_assign(g.value(weights));
            }
            let weights = ctx.drop(g, weights)?;
            heads.push(g.matmul(weights, vh)?);
        }
        if let Some(a) = avg.as_mut() {
            a.scale_assign(1.0 / self.heads as f64);
        }
        let merged = g.concat_cols(&heads)?;
        Ok((self.out.forward(g, merged)?, avg))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                up: Linear::new(b, "up", dim, hidden, true)?,
                down: Linear::new(b, "down", hidden, dim, true)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        let h = ctx.drop(g, h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm encoder layer: self-attention then feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                norm_attn: LayerNorm::new(b, "norm_attn", dim)?,
                attn: MultiHeadAttention::new(b, "attn", dim, dim, heads)?,
                norm_ff: LayerNorm::new(b, "norm_ff", dim)?,
                ff: FeedForward::new(b, "ff", dim, ffn)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<(Var, Option<Tensor>)> {
        let n = self.norm_attn.forward(g, x)?;
        let (a, weights) = self.attn.forward(g, n, n, false, ctx)?;
        let a = ctx.drop(g, a)?;
        let h = g.add(x, a)?;
        let n = self.norm_ff.forward(g, h)?;
        let f = self.ff.forward(g, n, ctx)?;
        let f = ctx.drop(g, f)?;
        Ok((g.add(h, f)?, weights))
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

pub struct DecoderLayerOutput {
    pub hidden: Var,
    pub self_attn: Option<Tensor>,
    pub cross_attn: Option<Tensor>,
}

impl DecoderLayer {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                norm_self: LayerNorm::new(b, "norm_self", dim)?,
                self_attn: MultiHeadAttention::new(b, "self_attn", dim, dim, heads)?,
                norm_cross: LayerNorm::new(b, "norm_cross", dim)?,
                cross_attn: MultiHeadAttention::new(b, "cross_attn", dim, memory_dim, heads)?,
                norm_ff: LayerNorm::new(b, "norm_ff", dim)?,
                ff: FeedForward::new(b, "ff", dim, ffn)?,
            })
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        ctx: &mut Ctx,
    ) -> Result<DecoderLayerOutput> {
        let n = self.norm_self.forward(g, x)?;
        let (a, self_w) = self.self_attn.forward(g, n, n, true, ctx)?;
        let a = ctx.drop(g, a)?;
        let h = g.add(x, a)?;
        let n = self.norm_cross.forward(g, h)?;
        let (c, cross_w) = self.cross_attn.forward(g, n, memory, false, ctx)?;
        let c = ctx.drop(g, c)?;
        let h = g.add(h, c)?;
        let n = self.norm_ff.forward(g, h)?;
        let f = self.ff.forward(g, n, ctx)?;
        let f = ctx.drop(g, f)?;
        Ok(DecoderLayerOutput {
            hidden: g.add(h, f)?,
            self_attn: self_w,
            cross_attn: cross_w,
        })
    }
}
