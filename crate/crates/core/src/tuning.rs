//! Incremental architecture growth plus a grid over learning and dropout
//! rates, scored by validation MSE.

use std::io::Write;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CandidatePool, ObservationSet};
use crate::error::{LseError, Result};
use crate::seeding::derive_seed;
use crate::surrogate::{train_on_arrays, MinorHyperparams, NetworkArchitecture, TrainingOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub learning_rates: Vec<f64>,
    pub dropout_rates: Vec<f64>,
}

impl TuningGrid {
    pub fn new(learning_rates: Vec<f64>, dropout_rates: Vec<f64>) -> Result<Self> {
        if learning_rates.is_empty() || dropout_rates.is_empty() {
            return Err(LseError::invalid("tuning grid lists must be non-empty"));
        }
        for &lr in &learning_rates {
            MinorHyperparams::new(lr, 0.0)?;
        }
        for &p in &dropout_rates {
            MinorHyperparams::new(1.0, p)?;
        }
        Ok(Self {
            learning_rates,
            dropout_rates,
        })
    }

    pub fn cells(&self) -> Vec<MinorHyperparams> {
        self.learning_rates
            .iter()
            .flat_map(|&learning_rate| {
                self.dropout_rates
                    .iter()
                    .map(move |&dropout_rate| MinorHyperparams {
                        learning_rate,
                        dropout_rate,
                    })
            })
            .collect()
    }
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-2, 5e-3, 1e-3],
            dropout_rates: vec![0.01, 0.05, 0.1],
        }
    }
}

/// Upper limits on architecture growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthCaps {
    pub max_layers: usize,
    pub max_width: usize,
}

impl Default for GrowthCaps {
    fn default() -> Self {
        Self {
            max_layers: 4,
            max_width: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub architecture: NetworkArchitecture,
    pub minor: MinorHyperparams,
    /// `+inf` when training diverged.
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub best_arch: NetworkArchitecture,
    pub best_minor: MinorHyperparams,
    pub validation_mse: f64,
    pub evaluated: Vec<TuningRecord>,
}

/// Current architecture, then doubled width, then one extra layer. Candidates
/// past the caps are dropped; the current one is always kept.
pub fn propose_major(current: NetworkArchitecture, caps: GrowthCaps) -> Vec<NetworkArchitecture> {
    let mut out = vec![current];
    let wider = NetworkArchitecture {
        width: current.width * 2,
        ..current
    };
    if wider.width <= caps.max_width {
        out.push(wider);
    }
    let deeper = NetworkArchitecture {
        layers: current.layers + 1,
        ..current
    };
    if deeper.layers <= caps.max_layers {
        out.push(deeper);
    }
    out
}

/// Seeded 80/20 split of observation positions into (train, validation).
pub fn validation_split(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((len as f64) * 0.2).round().max(1.0) as usize;
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

pub fn tune(
    data: &ObservationSet,
    pool: &CandidatePool,
    current: NetworkArchitecture,
    grid: &TuningGrid,
    caps: GrowthCaps,
    options: &TrainingOptions,
    seed: u64,
) -> Result<TuningResult> {
    if data.len() < 5 {
        return Err(LseError::InsufficientData {
            needed: 5,
            got: data.len(),
        });
    }
    let (train_pos, val_pos) = validation_split(data.len(), derive_seed(seed, 0));
    let train = data.subset(&train_pos);
    let val = data.subset(&val_pos);
    let x_train = pool.points().select(Axis(0), &train.indices());
    let y_train = Array1::from(train.values());
    let x_val = pool.points().select(Axis(0), &val.indices());
    let y_val = Array1::from(val.values());

    let jobs: Vec<(NetworkArchitecture, MinorHyperparams)> = propose_major(current, caps)
        .into_iter()
        .flat_map(|arch| grid.cells().into_iter().map(move |m| (arch, m)))
        .collect();

    let train_seed = derive_seed(seed, 1);
    let evaluated: Vec<TuningRecord> = jobs
        .par_iter()
        .map(|&(architecture, minor)| {
            let val_mse = match train_on_arrays(
                x_train.view(),
                y_train.view(),
                architecture,
                minor,
                options,
                train_seed,
            ) {
                Ok(model) => {
                    let pred = model.predict(x_val.view());
                    let mse = (&pred - &y_val)
                        .mapv(|e| e * e)
                        .mean()
                        .unwrap_or(f64::INFINITY);
                    if mse.is_finite() {
                        mse
                    } else {
                        f64::INFINITY
                    }
                }
                Err(LseError::Divergence { epoch }) => {
                    log::debug!("candidate {architecture:?} {minor:?} diverged at epoch {epoch}");
                    f64::INFINITY
                }
                Err(e) => {
                    log::warn!("candidate {architecture:?} {minor:?} failed: {e}");
                    f64::INFINITY
                }
            };
            TuningRecord {
                architecture,
                minor,
                val_mse,
            }
        })
        .collect();

    // first strict minimum in job order, independent of scheduling
    let best =
        evaluated
            .iter()
            .filter(|r| r.val_mse.is_finite())
            .fold(None::<&TuningRecord>, |acc, r| match acc {
                Some(b) if b.val_mse <= r.val_mse => Some(b),
                _ => Some(r),
            });
    match best {
        Some(b) => Ok(TuningResult {
            best_arch: b.architecture,
            best_minor: b.minor,
            validation_mse: b.val_mse,
            evaluated: evaluated.clone(),
        }),
        None => Err(LseError::TuningFailed { records: evaluated }),
    }
}

pub fn write_tuning_csv<W: Write>(records: &[TuningRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layers",
        "width",
        "learning_rate",
        "dropout_rate",
        "val_mse",
    ])?;
    for r in records {
        w.write_record([
            r.architecture.layers.to_string(),
            r.architecture.width.to_string(),
            r.minor.learning_rate.to_string(),
            r.minor.dropout_rate.to_string(),
            r.val_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
