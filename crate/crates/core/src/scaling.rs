//! Data-scaling sweep: retrain on nested fractions of the training split
//! and fit a power law to test PER against training-set size.

use serde::{Deserialize, Serialize};

use crate::dataset::{prepare, subsample_fraction, Dataset, Example};
use crate::error::{Error, Result};
use crate::eval::{evaluate, LENGTH_CAP};
use crate::metrics::{fit_scaling, Aggregation, ScalingFit, ScalingPoint};
use crate::model::ModelConfig;
use crate::train::{days_of, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fractions left out of the fit (still trained and reported).
    pub exclude_fractions: Vec<f64>,
    /// Training-set sizes to extrapolate to.
    pub targets: Vec<f64>,
    pub n_boot: usize,
    pub level: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.05, 0.10, 0.25, 0.50, 0.75, 1.0],
            seeds: vec![0, 1, 2],
            exclude_fractions: Vec::new(),
            targets: vec![5000.0, 10000.0],
            n_boot: 2000,
            level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCell {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    /// Test PER of the best-validation checkpoint, in percent.
    pub test_per: f64,
    pub val_per: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub cells: Vec<ScalingCell>,
    pub points: Vec<ScalingPoint>,
    pub fit: ScalingFit,
}

impl ScalingReport {
    /// `fraction,seed,n_train,test_per,val_per` per cell.
    pub fn csv(&self) -> String {
        let mut s = String::from("fraction,seed,n_train,test_per,val_per\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{},{}\n", c.fraction, c.seed, c.n_train, c.test_per, c.val_per));
        }
        s
    }
}

/// Trains one (fraction, seed) cell and scores it on `test`.
pub fn run_cell(
    train: &Dataset,
    val: &[Example],
    test: &[Example],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    fraction: f64,
    seed: u64,
) -> Result<ScalingCell> {
    let subset = subsample_fraction(train, fraction, seed)?;
    let examples = prepare(&subset);
    let words = &train.header.words;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let trainer = Trainer::stage1(model_cfg, &cfg, days_of(&examples), words)?;
    let data = TrainData {
        train: &examples,
        val,
        words,
    };
    let mut out = trainer.fit(&data, |_| {})?;
    let model = out.best.model()?;
    let report = evaluate(&model, &out.best.store, test, words, LENGTH_CAP)?;
    Ok(ScalingCell {
        fraction,
        seed,
        n_train: examples.len(),
        test_per: 100.0 * report.per(Aggregation::Pooled),
        val_per: 100.0 * out.best.best_metric.unwrap_or(f64::NAN),
    })
}

/// Groups cells by training-set size and fits the power law.
pub fn fit_cells(cells: Vec<ScalingCell>, cfg: &ScalingConfig, seed: u64) -> Result<ScalingReport> {
    let mut sorted = cells.clone();
    sorted.sort_by(|a, b| a.fraction.total_cmp(&b.fraction).then(a.seed.cmp(&b.seed)));
    // Every seed of a fraction keeps the same per-day counts, hence one N.
    let mut points: Vec<ScalingPoint> = Vec::new();
    let mut excluded = Vec::new();
    for (i, c) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1].fraction == c.fraction {
            points.last_mut().expect("previous fraction").errors.push(c.test_per);
            continue;
        }
        points.push(ScalingPoint {
            n: c.n_train as f64,
            errors: vec![c.test_per],
        });
        if cfg.exclude_fractions.contains(&c.fraction) {
            excluded.push(c.n_train as f64);
        }
    }
    if points.len() < 2 {
        return Err(Error::Config("scaling needs at least two fractions".into()));
    }
    let fit = fit_scaling(&points, &excluded, &cfg.targets, cfg.n_boot, cfg.level, seed)?;
    Ok(ScalingReport { cells, points, fit })
}
