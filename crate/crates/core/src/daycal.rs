//! Per-day calibration of the latent sequence.
//!
//! * NHS ("hammer and scalpel"): a day-specific affine map `X W_d + b_d`
//!   blended by a per-day gate with a feature-wise modulation `X * gamma_d +
//!   beta_d`, where `(gamma_d, beta_d)` come from a small shared MLP applied to
//!   a learned day embedding; the blend passes through `phi`.
//! * Linear: the affine map alone.
//! * None: identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Linear};
use neuroseq_autodiff::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayCalKind {
    Nhs,
    Linear,
    None,
}

impl std::str::FromStr for DayCalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nhs" => Ok(Self::Nhs),
            "linear" => Ok(Self::Linear),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown day calibration {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DayCalConfig {
    pub kind: DayCalKind,
    pub embed_dim: usize,
    pub scalpel_hidden: usize,
    pub phi: Phi,
}

impl Default for DayCalConfig {
    fn default() -> Self {
        Self {
            kind: DayCalKind::Nhs,
            embed_dim: 16,
            scalpel_hidden: 32,
            phi: Phi::Gelu,
        }
    }
}

#[derive(Clone, Debug)]
struct DayParams {
    hammer_w: ParamId,
    hammer_b: ParamId,
    embedding: Option<ParamId>,
    gate: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Scalpel {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct DayCalibration {
    pub config: DayCalConfig,
    dim: usize,
    days: BTreeMap<usize, DayParams>,
    scalpel: Option<Scalpel>,
}

/// Parameter counts reported by [`DayCalibration::audit`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationAudit {
    pub kind: DayCalKind,
    pub days: Vec<usize>,
    pub per_day: usize,
    pub shared: usize,
    pub total: usize,
}

impl DayCalibration {
    pub fn new(b: &mut Builder, config: &DayCalConfig, dim: usize, days: &[usize]) -> Result<Self> {
        let mut out = Self {
            config: config.clone(),
            dim,
            days: BTreeMap::new(),
            scalpel: None,
        };
        if config.kind == DayCalKind::None {
            return Ok(out);
        }
        b.scoped("daycal", |b| {
            for &d in days {
                let params = b.scoped(&format!("day{d}"), |b| {
                    Ok(DayParams {
                        hammer_w: b.param("hammer_w", &[dim, dim], Init::Identity)?,
                        hammer_b: b.param("hammer_b", &[1, dim], Init::Zeros)?,
                        embedding: if config.kind == DayCalKind::Nhs {
                            Some(b.param("embedding", &[1, config.embed_dim], Init::Normal(1.0))?)
                        } else {
                            None
                        },
                        gate: if config.kind == DayCalKind::Nhs {
                            Some(b.param("gate", &[1, 1], Init::Zeros)?)
                        } else {
                            None
                        },
                    })
                })?;
                out.days.insert(d, params);
            }
            if config.kind == DayCalKind::Nhs {
                out.scalpel = Some(b.scoped("scalpel", |b| {
                    Ok(Scalpel {
                        hidden: Linear::new(b, "hidden", config.embed_dim, config.scalpel_hidden, true)?,
                        // Zero output layer: gamma = 1 and beta = 0 at initialization.
                        out: Linear::with_init(
                            b,
                            "out",
                            config.scalpel_hidden,
                            2 * dim,
                            Init::Zeros,
                            Init::Zeros,
                        )?,
                    })
                })?);
            }
            Ok(())
        })?;
        Ok(out)
    }

    pub fn kind(&self) -> DayCalKind {
        self.config.kind
    }

    pub fn days(&self) -> Vec<usize> {
        self.days.keys().copied().collect()
    }

    pub fn has_day(&self, day: usize) -> bool {
        self.config.kind == DayCalKind::None || self.days.contains_key(&day)
    }

    fn day(&self, day: usize) -> Result<&DayParams> {
        self.days.get(&day).ok_or(Error::CalibrationMissing { day })
    }

    /// Applies the configured transform for `day`; unknown days are an error.
    pub fn forward(&self, g: &mut Graph, x: Var, day: usize) -> Result<Var> {
        match self.config.kind {
            DayCalKind::None => Ok(x),
            DayCalKind::Linear => self.hammer(g, x, day),
            DayCalKind::Nhs => self.nhs(g, x, day),
        }
    }

    fn hammer(&self, g: &mut Graph, x: Var, day: usize) -> Result<Var> {
        let p = self.day(day)?;
        let w = g.param(p.hammer_w);
        let b = g.param(p.hammer_b);
        let h = g.matmul(x, w)?;
        Ok(g.add_row(h, b)?)
    }

    /// `(gamma_d, beta_d)` as `1 x D` rows.
    fn modulation(&self, g: &mut Graph, day: usize) -> Result<(Var, Var)> {
        let p = self.day(day)?;
        let scalpel = self.scalpel.as_ref().expect("NHS calibration has a scalpel");
        let e = g.param(p.embedding.expect("NHS day has an embedding"));
        let h = scalpel.hidden.forward(g, e)?;
        let h = g.gelu(h);
        let film = scalpel.out.forward(g, h)?;
        let gamma = g.slice_cols(film, 0, self.dim)?;
        let gamma = g.affine(gamma, 1.0, 1.0);
        let beta = g.slice_cols(film, self.dim, 2 * self.dim)?;
        Ok((gamma, beta))
    }

    fn nhs(&self, g: &mut Graph, x: Var, day: usize) -> Result<Var> {
        let hammer = self.hammer(g, x, day)?;
        let (gamma, beta) = self.modulation(g, day)?;
        let scaled = g.mul_row(x, gamma)?;
        let scalpel = g.add_row(scaled, beta)?;
        let logit = g.param(self.day(day)?.gate.expect("NHS day has a gate"));
        let gate = g.sigmoid(logit);
        let rest = g.affine(gate, -1.0, 1.0);
        let a = g.scale_by(hammer, gate)?;
        let s = g.scale_by(scalpel, rest)?;
        let blended = g.add(a, s)?;
        Ok(match self.config.phi {
            Phi::Gelu => g.gelu(blended),
            Phi::Identity => blended,
        })
    }

    /// Gate value `g_d` for `day` (NHS only).
    pub fn gate_value(&self, store: &ParamStore, day: usize) -> Result<Option<f64>> {
        Ok(self
            .day(day)?
            .gate
            .map(|id| neuroseq_autodiff::sigmoid(store.value(id).item())))
    }

    pub fn audit(&self, store: &ParamStore) -> CalibrationAudit {
        let per_day = self.days.values().next().map_or(0, |p| {
            [Some(p.hammer_w), Some(p.hammer_b), p.embedding, p.gate]
                .into_iter()
                .flatten()
                .map(|id| store.value(id).len())
                .sum()
        });
        let shared = store.numel_with_prefix("daycal.scalpel.");
        CalibrationAudit {
            kind: self.config.kind,
            days: self.days(),
            per_day,
            shared,
            total: per_day * self.days.len() + shared,
        }
    }
}
