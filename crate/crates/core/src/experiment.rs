//! End-to-end active level-set estimation runs.
//!
//! Each repetition builds (or loads) the pool, resolves the ground-truth
//! partition, seeds the observation set with a Latin hypercube design and
//! then alternates fit → classify → score → select → query until the
//! budget is spent. One trace record is emitted after the initial design
//! and one after every batch; the last record reflects a model trained on
//! all queried data.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    acq_explicit_entropy, acq_explicit_mi_with, acq_explicit_varratio, acq_implicit_entropy,
    acq_implicit_mi, acq_implicit_varratio, select_batch, AcquisitionScores, IndicatorMode,
};
use crate::benchmarks::{build_pool, load_csv_pool, Benchmark, BenchmarkSpec, NoisyOracle};
use crate::domain::{
    calibrate_threshold, classify, f1_scores, implicit_ratio_from_h, latin_hypercube, snap_to_pool,
    CandidatePool, LevelSetEstimate, ObservationSet, ThresholdSpec,
};
use crate::error::{LseError, Result};
use crate::gp::{gp_fit_mle, gp_posterior, straddle_with_scale, GpFitOptions, GpHyperparameters};
use crate::seeding::derive_seed;
use crate::surrogate::{
    mc_predict, mean_prediction, train_bnn, MinorHyperparams, NetworkArchitecture, TrainingOptions,
};
use crate::tuning::{tune, GrowthCaps, TuningGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exphlse,
    Imphlse,
    Straddle,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exphlse => "exphlse",
            Method::Imphlse => "imphlse",
            Method::Straddle => "straddle",
            Method::Random => "random",
        }
    }

    fn uses_gp(self) -> bool {
        matches!(self, Method::Straddle)
    }

    /// `10 d` for the network-based methods, 1 for the GP baseline.
    pub fn default_batch_size(self, dim: usize) -> usize {
        if self.uses_gp() {
            1
        } else {
            10 * dim
        }
    }
}

impl FromStr for Method {
    type Err = LseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exphlse" => Ok(Method::Exphlse),
            "imphlse" => Ok(Method::Imphlse),
            "straddle" => Ok(Method::Straddle),
            "random" => Ok(Method::Random),
            other => Err(LseError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdVariant {
    #[default]
    Explicit,
    Implicit,
}

/// Scoring rule for the network-based methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Mi,
    Entropy,
    Varratio,
}

/// Flat key/value run description; unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub benchmark: Option<Benchmark>,
    pub dim: Option<usize>,
    pub pool_size: Option<usize>,
    pub pool_csv: Option<PathBuf>,
    /// Seed of the benchmark pool; defaults to `seed`. The pool is shared by
    /// all repetitions.
    pub pool_seed: Option<u64>,
    pub noise_std: f64,
    pub threshold_variant: ThresholdVariant,
    /// `h` for explicit runs, `l` for implicit ones. When absent the level
    /// is calibrated from `super_fraction`.
    pub threshold: Option<f64>,
    pub super_fraction: f64,
    pub budget: usize,
    pub batch_size: Option<usize>,
    pub init_count: Option<usize>,
    pub mc_passes: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub acquisition: Criterion,
    /// Noise level for the soft per-pass indicator (explicit criteria only).
    pub indicator_noise: Option<f64>,
    pub epochs: usize,
    /// Tune every `tune_stride` iterations; 0 disables tuning.
    pub tune_stride: usize,
    pub learning_rates: Vec<f64>,
    pub dropout_rates: Vec<f64>,
    pub initial_layers: usize,
    pub initial_width: usize,
    pub max_layers: usize,
    pub max_width: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub gp_restarts: usize,
    pub gp_max_iterations: usize,
    pub straddle_scale: f64,
    /// Wall-clock column is written as 0 unless enabled, keeping traces
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid = TuningGrid::default();
        let arch = NetworkArchitecture::default();
        let caps = GrowthCaps::default();
        Self {
            method: Method::Exphlse,
            benchmark: None,
            dim: None,
            pool_size: None,
            pool_csv: None,
            pool_seed: None,
            noise_std: 0.0,
            threshold_variant: ThresholdVariant::Explicit,
            threshold: None,
            super_fraction: 0.2,
            budget: 0,
            batch_size: None,
            init_count: None,
            mc_passes: 50,
            repetitions: 1,
            seed: 0,
            acquisition: Criterion::Mi,
            indicator_noise: None,
            epochs: TrainingOptions::default().epochs,
            tune_stride: 1,
            learning_rates: grid.learning_rates,
            dropout_rates: grid.dropout_rates,
            initial_layers: arch.layers,
            initial_width: arch.width,
            max_layers: caps.max_layers,
            max_width: caps.max_width,
            learning_rate: 1e-2,
            dropout_rate: 0.05,
            gp_restarts: GpFitOptions::default().restarts,
            gp_max_iterations: GpFitOptions::default().max_iterations,
            straddle_scale: crate::gp::STRADDLE_SCALE,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| LseError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative pool paths are taken from the config file's directory
        if let (Some(csv), Some(dir)) = (&cfg.pool_csv, path.as_ref().parent()) {
            if csv.is_relative() {
                cfg.pool_csv = Some(dir.join(csv));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LseError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LseError::Config(m));
        match (&self.benchmark, &self.pool_csv) {
            (Some(_), Some(_)) => return bad("set either benchmark or pool_csv, not both".into()),
            (None, None) => return bad("one of benchmark or pool_csv is required".into()),
            (Some(_), None) if self.dim.unwrap_or(0) == 0 => {
                return bad("benchmark runs need dim >= 1".into())
            }
            _ => {}
        }
        if self.pool_size == Some(0) {
            return bad("pool_size must be >= 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.super_fraction) {
            return bad("super_fraction must lie in [0, 1]".into());
        }
        if let (ThresholdVariant::Implicit, Some(l)) = (self.threshold_variant, self.threshold) {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("implicit threshold ratio {l} outside [0, 1]"));
            }
        }
        match (self.method, self.threshold_variant) {
            (Method::Exphlse | Method::Straddle, ThresholdVariant::Implicit) => {
                return bad(format!(
                    "{} needs an explicit threshold",
                    self.method.name()
                ))
            }
            (Method::Imphlse, ThresholdVariant::Explicit) => {
                return bad("imphlse needs an implicit threshold".into())
            }
            _ => {}
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1".into());
        }
        if matches!(self.init_count, Some(n) if n < 2) {
            return bad("init_count must be >= 2".into());
        }
        if self.mc_passes == 0 || self.repetitions == 0 || self.epochs == 0 {
            return bad("mc_passes, repetitions and epochs must be >= 1".into());
        }
        TuningGrid::new(self.learning_rates.clone(), self.dropout_rates.clone())
            .map_err(|e| LseError::Config(e.to_string()))?;
        NetworkArchitecture::new(self.initial_layers, self.initial_width)
            .map_err(|e| LseError::Config(e.to_string()))?;
        if self.max_layers < self.initial_layers || self.max_width < self.initial_width {
            return bad("growth caps must not be below the initial architecture".into());
        }
        MinorHyperparams::new(self.learning_rate, self.dropout_rate)
            .map_err(|e| LseError::Config(e.to_string()))?;
        if self.method.uses_gp() && self.gp_restarts == 0 {
            return bad("gp_restarts must be >= 1".into());
        }
        if let Some(s) = self.indicator_noise {
            if !(s > 0.0) {
                return bad("indicator_noise must be positive".into());
            }
        }
        Ok(())
    }

    fn training_options(&self) -> TrainingOptions {
        TrainingOptions {
            epochs: self.epochs,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub n_sampled: usize,
    pub f1_super: f64,
    pub f1_sub: f64,
    pub resolved_threshold: f64,
    pub wall_seconds: f64,
    /// Indices added since the previous record (the initial design for record 0).
    pub chosen: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTrace {
    pub method: Method,
    pub repetition: usize,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    /// Surrogate prediction behind the last record.
    pub final_prediction: Vec<f64>,
    pub final_estimate: LevelSetEstimate,
    pub truth_estimate: LevelSetEstimate,
}

/// Pool plus ground-truth partition shared by all repetitions of a run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub pool: CandidatePool,
    pub threshold: ThresholdSpec,
    pub truth: LevelSetEstimate,
}

pub fn prepare_problem(config: &ExperimentConfig) -> Result<Problem> {
    let pool = match (&config.benchmark, &config.pool_csv) {
        (Some(name), None) => {
            let d = config.dim.unwrap_or(1);
            let spec = BenchmarkSpec {
                name: *name,
                d,
                pool_size: config.pool_size.unwrap_or(10_000 * d),
                noise_std: config.noise_std,
                seed: config.pool_seed.unwrap_or(config.seed),
            };
            build_pool(&spec)?
        }
        (None, Some(path)) => load_csv_pool(path)?,
        _ => {
            return Err(LseError::Config(
                "need exactly one of benchmark or pool_csv".into(),
            ))
        }
    };
    let values = pool
        .truth()
        .ok_or_else(|| LseError::invalid("pool has no ground truth"))?
        .to_vec();
    let threshold = match (config.threshold_variant, config.threshold) {
        (ThresholdVariant::Explicit, Some(h)) => ThresholdSpec::Explicit(h),
        (ThresholdVariant::Explicit, None) => {
            ThresholdSpec::Explicit(calibrate_threshold(&values, config.super_fraction)?)
        }
        (ThresholdVariant::Implicit, Some(l)) => ThresholdSpec::implicit(l)?,
        (ThresholdVariant::Implicit, None) => {
            let h = calibrate_threshold(&values, config.super_fraction)?;
            ThresholdSpec::implicit(implicit_ratio_from_h(&values, h)?)?
        }
    };
    let truth = classify(&values, threshold)?;
    Ok(Problem {
        pool,
        threshold,
        truth,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentTrace>> {
    config.validate()?;
    let problem = prepare_problem(config)?;
    run_on_problem(config, &problem)
}

pub fn run_on_problem(
    config: &ExperimentConfig,
    problem: &Problem,
) -> Result<Vec<ExperimentTrace>> {
    let d = problem.pool.dim();
    let init = config
        .init_count
        .unwrap_or(if config.pool_csv.is_some() {
            5 * d
        } else {
            3 * d
        })
        .max(2);
    if init + config.budget > problem.pool.len() {
        return Err(LseError::Capacity {
            requested: init + config.budget,
            available: problem.pool.len(),
        });
    }
    (0..config.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(config, problem, rep, init))
        .collect()
}

enum Fit {
    Network {
        prediction: Vec<f64>,
        ensemble: crate::surrogate::PredictionEnsemble,
    },
    Gp {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
}

impl Fit {
    fn prediction(&self) -> &[f64] {
        match self {
            Fit::Network { prediction, .. } => prediction,
            Fit::Gp { mu, .. } => mu,
        }
    }
}

struct RunState {
    arch: NetworkArchitecture,
    minor: MinorHyperparams,
    gp_hyper: Option<GpHyperparameters>,
}

fn run_repetition(
    config: &ExperimentConfig,
    problem: &Problem,
    repetition: usize,
    init: usize,
) -> Result<ExperimentTrace> {
    let started = Instant::now();
    let seed = derive_seed(config.seed, repetition as u64);
    let pool = &problem.pool;
    let elapsed = || {
        if config.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let mut oracle = NoisyOracle::new(config.noise_std, derive_seed(seed, 2))?;
    let mut select_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let design = latin_hypercube(init, &lhs_bounds(pool), derive_seed(seed, 1))?;
    let initial = snap_to_pool(&design, pool, &HashSet::new())?;
    let mut observations = ObservationSet::new(pool.len());
    for &i in &initial {
        observations.insert(i, oracle.query(pool, i)?)?;
    }

    let batch = config
        .batch_size
        .unwrap_or_else(|| config.method.default_batch_size(pool.dim()));
    let mut state = RunState {
        arch: NetworkArchitecture::new(config.initial_layers, config.initial_width)?,
        minor: MinorHyperparams::new(config.learning_rate, config.dropout_rate)?,
        gp_hyper: None,
    };
    let mut records = Vec::new();
    let mut chosen = initial;
    let mut iteration = 0;
    let mut remaining = config.budget;

    loop {
        let fit = fit_model(config, pool, &observations, &mut state, iteration, seed)
            .map_err(|e| e.at_iteration(iteration))?;
        let estimate =
            classify(fit.prediction(), problem.threshold).map_err(|e| e.at_iteration(iteration))?;
        let f1 = f1_scores(&estimate, &problem.truth)?;
        records.push(IterationRecord {
            iteration,
            n_sampled: observations.len(),
            f1_super: f1.f1_super,
            f1_sub: f1.f1_sub,
            resolved_threshold: estimate.resolved_threshold(),
            wall_seconds: elapsed(),
            chosen: std::mem::take(&mut chosen),
        });
        log::info!(
            "{} rep {repetition} iter {iteration}: n={} f1_super={:.4} f1_sub={:.4}",
            config.method.name(),
            observations.len(),
            f1.f1_super,
            f1.f1_sub
        );
        if remaining == 0 {
            return Ok(ExperimentTrace {
                method: config.method,
                repetition,
                seed,
                records,
                final_prediction: fit.prediction().to_vec(),
                final_estimate: estimate,
                truth_estimate: problem.truth.clone(),
            });
        }
        let k = batch.min(remaining);
        let mask = observations.mask();
        let picks = select(config, problem, &fit, k, &mask, &mut select_rng)
            .map_err(|e| e.at_iteration(iteration))?;
        for &i in &picks {
            observations.insert(i, oracle.query(pool, i)?)?;
        }
        remaining -= picks.len();
        chosen = picks;
        iteration += 1;
    }
}

/// LHS needs non-degenerate bounds; zero-width pool dimensions get a unit box.
fn lhs_bounds(pool: &CandidatePool) -> Vec<(f64, f64)> {
    pool.bounds()
        .iter()
        .map(|&(lo, hi)| if hi > lo { (lo, hi) } else { (lo, lo + 1.0) })
        .collect()
}

fn fit_model(
    config: &ExperimentConfig,
    pool: &CandidatePool,
    observations: &ObservationSet,
    state: &mut RunState,
    iteration: usize,
    seed: u64,
) -> Result<Fit> {
    let iter_seed = derive_seed(seed, 1000 + iteration as u64);
    if config.method.uses_gp() {
        let idx = observations.indices();
        let x = pool.points().select(Axis(0), &idx);
        let options = GpFitOptions {
            restarts: config.gp_restarts,
            max_iterations: config.gp_max_iterations,
            fixed_noise: None,
        };
        let model = gp_fit_mle(
            &x,
            &observations.values(),
            pool.bounds(),
            &options,
            state.gp_hyper.as_ref(),
            iter_seed,
        )?;
        state.gp_hyper = Some(model.hyperparameters().clone());
        let (mu, sigma) = gp_posterior(&model, pool.points())?;
        return Ok(Fit::Gp { mu, sigma });
    }

    let options = config.training_options();
    let tune_now =
        config.tune_stride > 0 && iteration % config.tune_stride == 0 && observations.len() >= 5;
    if tune_now {
        let grid = TuningGrid::new(config.learning_rates.clone(), config.dropout_rates.clone())?;
        let caps = GrowthCaps {
            max_layers: config.max_layers,
            max_width: config.max_width,
        };
        let result = tune(
            observations,
            pool,
            state.arch,
            &grid,
            caps,
            &options,
            derive_seed(iter_seed, 1),
        )?;
        log::debug!(
            "tuned at iteration {iteration}: {:?} {:?} val_mse={}",
            result.best_arch,
            result.best_minor,
            result.validation_mse
        );
        state.arch = result.best_arch;
        state.minor = result.best_minor;
    }
    let model = train_bnn(
        observations,
        pool,
        state.arch,
        state.minor,
        &options,
        derive_seed(iter_seed, 2),
    )?;
    let ensemble = mc_predict(&model, pool, config.mc_passes, derive_seed(iter_seed, 3))?;
    Ok(Fit::Network {
        prediction: mean_prediction(&ensemble).to_vec(),
        ensemble,
    })
}

fn select(
    config: &ExperimentConfig,
    problem: &Problem,
    fit: &Fit,
    k: usize,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let scores: AcquisitionScores = match (config.method, fit, problem.threshold) {
        (Method::Random, _, _) => {
            let mut free: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
            if k > free.len() {
                return Err(LseError::Capacity {
                    requested: k,
                    available: free.len(),
                });
            }
            free.shuffle(rng);
            free.truncate(k);
            return Ok(free);
        }
        (Method::Exphlse, Fit::Network { ensemble, .. }, ThresholdSpec::Explicit(h)) => {
            match (config.acquisition, config.indicator_noise) {
                (Criterion::Mi, None) => acq_explicit_mi_with(ensemble, h, IndicatorMode::Hard)?,
                (Criterion::Mi, Some(noise_std)) => {
                    acq_explicit_mi_with(ensemble, h, IndicatorMode::Soft { noise_std })?
                }
                (Criterion::Entropy, _) => acq_explicit_entropy(ensemble, h),
                (Criterion::Varratio, _) => acq_explicit_varratio(ensemble, h),
            }
        }
        (Method::Imphlse, Fit::Network { ensemble, .. }, ThresholdSpec::Implicit(l)) => {
            match config.acquisition {
                Criterion::Mi => acq_implicit_mi(ensemble, l)?,
                Criterion::Entropy => acq_implicit_entropy(ensemble, l)?,
                Criterion::Varratio => acq_implicit_varratio(ensemble, l)?,
            }
        }
        (Method::Straddle, Fit::Gp { mu, sigma }, ThresholdSpec::Explicit(h)) => {
            straddle_with_scale(mu, sigma, h, config.straddle_scale)?
        }
        (method, _, threshold) => {
            return Err(LseError::Config(format!(
                "{} cannot run with threshold {threshold:?}",
                method.name()
            )))
        }
    };
    select_batch(&scores, k, mask)
}

/// One row of the trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub method: String,
    pub repetition: usize,
    pub iteration: usize,
    pub n_sampled: usize,
    pub f1_super: f64,
    pub f1_sub: f64,
    pub threshold: f64,
    pub wall_seconds: f64,
}

pub fn trace_rows(traces: &[ExperimentTrace]) -> Vec<TraceRow> {
    traces
        .iter()
        .flat_map(|t| {
            t.records.iter().map(move |r| TraceRow {
                method: t.method.name().to_string(),
                repetition: t.repetition,
                iteration: r.iteration,
                n_sampled: r.n_sampled,
                f1_super: r.f1_super,
                f1_sub: r.f1_sub,
                threshold: r.resolved_threshold,
                wall_seconds: r.wall_seconds,
            })
        })
        .collect()
}

pub fn write_trace_rows<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "method",
            "repetition",
            "iteration",
            "n_sampled",
            "f1_super",
            "f1_sub",
            "threshold",
            "wall_seconds",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(traces: &[ExperimentTrace], path: impl AsRef<Path>) -> Result<()> {
    if traces.is_empty() {
        return Err(LseError::invalid("no traces to write"));
    }
    let file = std::fs::File::create(path)?;
    write_trace_rows(&trace_rows(traces), std::io::BufWriter::new(file))
}

pub fn read_trace_rows<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let rows: std::result::Result<Vec<TraceRow>, csv::Error> = reader.deserialize().collect();
    Ok(rows?)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    read_trace_rows(std::fs::File::open(path)?)
}

pub use crate::plot::{emit_plot, render_svg, summarize, CurvePoint, MethodCurve};
