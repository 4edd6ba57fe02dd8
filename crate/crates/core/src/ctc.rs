//! GRU encoder and connectionist temporal classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Linear};
use neuroseq_autodiff::{log_sum_exp, CustomOp, Graph, ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GruConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            bidirectional: false,
        }
    }
}

impl GruConfig {
    pub fn output_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

/// One GRU direction, gates ordered `(reset, update, candidate)`:
///
/// ```text
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(b: &mut Builder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        b.scoped(name, |b| {
            Ok(Self {
                w_input: b.param("w_input", &[input, 3 * hidden], Init::Uniform(bound))?,
                b_input: b.param("b_input", &[1, 3 * hidden], Init::Uniform(bound))?,
                w_hidden: b.param("w_hidden", &[hidden, 3 * hidden], Init::Uniform(bound))?,
                b_hidden: b.param("b_hidden", &[1, 3 * hidden], Init::Uniform(bound))?,
                hidden,
            })
        })
    }

    /// Runs over the rows of `x` (forward in time, or backward if `reverse`)
    /// and returns the hidden states in original time order, `L x hidden`.
    pub fn forward(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let len = g.shape(x)[0];
        let hd = self.hidden;
        let wi = g.param(self.w_input);
        let bi = g.param(self.b_input);
        let wh = g.param(self.w_hidden);
        let bh = g.param(self.b_hidden);
        let proj = g.matmul(x, wi)?;
        let proj = g.add_row(proj, bi)?;
        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let xt = g.slice_rows(proj, t, t + 1)?;
            let hp = g.matmul(h, wh)?;
            let hp = g.add_row(hp, bh)?;
            let xr = g.slice_cols(xt, 0, hd)?;
            let hr = g.slice_cols(hp, 0, hd)?;
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let xz = g.slice_cols(xt, hd, 2 * hd)?;
            let hz = g.slice_cols(hp, hd, 2 * hd)?;
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let xn = g.slice_cols(xt, 2 * hd, 3 * hd)?;
            let hn = g.slice_cols(hp, 2 * hd, 3 * hd)?;
            let rhn = g.mul(r, hn)?;
            let n = g.add(xn, rhn)?;
            let n = g.tanh(n);
            let keep = g.affine(z, -1.0, 1.0);
            let a = g.mul(keep, n)?;
            let c = g.mul(z, h)?;
            h = g.add(a, c)?;
            states[t] = h;
        }
        Ok(g.concat_rows(&states)?)
    }
}

/// Stacked (optionally bidirectional) GRU.
#[derive(Clone, Debug)]
pub struct Gru {
    pub config: GruConfig,
    layers: Vec<(GruCell, Option<GruCell>)>,
}

impl Gru {
    pub fn new(b: &mut Builder, config: &GruConfig, input: usize) -> Result<Self> {
        if config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config("GRU width and depth must be positive".into()));
        }
        b.scoped("gru", |b| {
            let mut layers = Vec::with_capacity(config.layers);
            let mut width = input;
            for i in 0..config.layers {
                let fwd = GruCell::new(b, &format!("layer{i}.fwd"), width, config.hidden)?;
                let bwd = if config.bidirectional {
                    Some(GruCell::new(b, &format!("layer{i}.bwd"), width, config.hidden)?)
                } else {
                    None
                };
                layers.push((fwd, bwd));
                width = config.output_dim();
            }
            Ok(Self {
                config: config.clone(),
                layers,
            })
        })
    }

    /// Per-layer outputs, `L x output_dim` each.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (fwd, bwd) in &self.layers {
            let f = fwd.forward(g, h, false)?;
            h = match bwd {
                Some(cell) => {
                    let r = cell.forward(g, h, true)?;
                    g.concat_cols(&[f, r])?
                }
                None => f,
            };
            outs.push(h);
        }
        Ok(outs)
    }
}

/// GRU states to per-frame class logits (phonemes plus blank).
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub readout: Linear,
}

impl CtcHead {
    pub fn new(b: &mut Builder, input: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            readout: Linear::new(b, "ctc_head", input, classes, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.readout.forward(g, states)
    }
}

/// Minimum frames needed to emit `target`: its length plus one blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Log-space forward variables; `alpha[t][s]` over the blank-extended target.
fn forward_vars(lp: &Tensor, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (len, s_len) = (lp.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; len];
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..len {
        for s in 0..s_len {
            let mut terms = vec![alpha[t - 1][s]];
            if s >= 1 {
                terms.push(alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                terms.push(alpha[t - 1][s - 2]);
            }
            alpha[t][s] = log_sum_exp(&terms) + lp.get(t, ext[s]);
        }
    }
    alpha
}

fn backward_vars(lp: &Tensor, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (len, s_len) = (lp.rows(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; len];
    beta[len - 1][s_len - 1] = lp.get(len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[len - 1][s_len - 2] = lp.get(len - 1, ext[s_len - 2]);
    }
    for t in (0..len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![beta[t + 1][s]];
            if s + 1 < s_len {
                terms.push(beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s] != blank && ext[s] != ext[s + 2] {
                terms.push(beta[t + 1][s + 2]);
            }
            beta[t][s] = log_sum_exp(&terms) + lp.get(t, ext[s]);
        }
    }
    beta
}

fn check_inputs(lp: &Tensor, target: &[usize], blank: usize) -> Result<()> {
    if lp.rows() == 0 {
        return Err(neuroseq_autodiff::Error::EmptyInput { op: "ctc_loss" }.into());
    }
    let v = lp.cols();
    if blank >= v {
        return Err(Error::InvalidTarget(format!("blank {blank} outside {v} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= v || y == blank) {
        return Err(Error::InvalidTarget(format!("CTC target contains {bad}")));
    }
    let required = min_frames(target);
    if lp.rows() < required {
        return Err(Error::InfeasibleAlignment {
            frames: lp.rows(),
            required,
        });
    }
    Ok(())
}

/// `-log p(target | log_probs)` by the forward algorithm, `log_probs` being
/// `L x V` per-frame log-probabilities.
pub fn ctc_neg_log_likelihood(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    check_inputs(log_probs, target, blank)?;
    let ext = extended(target, blank);
    let alpha = forward_vars(log_probs, &ext, blank);
    let last = &alpha[log_probs.rows() - 1];
    let s_len = ext.len();
    let tail: Vec<f64> = if s_len > 1 {
        vec![last[s_len - 1], last[s_len - 2]]
    } else {
        vec![last[0]]
    };
    Ok(-log_sum_exp(&tail))
}

struct CtcBackward {
    grad: Tensor,
}

impl CustomOp for CtcBackward {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad_out.item();
        vec![Some(self.grad.map(|v| v * s))]
    }
}

/// CTC loss node on the graph. `log_probs` must hold per-frame
/// log-probabilities (typically a `log_softmax_rows` output).
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let lp = g.value(log_probs).clone();
    check_inputs(&lp, target, blank)?;
    let ext = extended(target, blank);
    let alpha = forward_vars(&lp, &ext, blank);
    let beta = backward_vars(&lp, &ext, blank);
    let (len, s_len) = (lp.rows(), ext.len());
    let last = &alpha[len - 1];
    let log_p = if s_len > 1 {
        log_sum_exp(&[last[s_len - 1], last[s_len - 2]])
    } else {
        last[0]
    };
    let mut grad = Tensor::zeros(lp.shape());
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); lp.cols()];
    for t in 0..len {
        per_class.iter_mut().for_each(Vec::clear);
        for s in 0..s_len {
            per_class[ext[s]].push(alpha[t][s] + beta[t][s]);
        }
        for (k, terms) in per_class.iter().enumerate() {
            if !terms.is_empty() {
                let occupancy = log_sum_exp(terms) - lp.get(t, k) - log_p;
                grad.set(t, k, -occupancy.exp());
            }
        }
    }
    Ok(g.custom(&[log_probs], Tensor::scalar(-log_p), Box::new(CtcBackward { grad })))
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode(scores: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for k in scores.argmax_rows() {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
