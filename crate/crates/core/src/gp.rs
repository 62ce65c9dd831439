//! Gaussian-process baseline: Matérn 5/2 ARD kernel, multi-start
//! maximum-likelihood fitting and the Straddle score.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acquisition::AcquisitionScores;
use crate::error::{LseError, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Jitter fractions of the signal variance tried, in order, when the
/// covariance fails to factorize.
const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

pub const STRADDLE_SCALE: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperparameters {
    /// Per-dimension lengthscales in raw input units.
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Pin the noise variance instead of fitting it.
    pub fixed_noise: Option<f64>,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iterations: 100,
            fixed_noise: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    hyper: GpHyperparameters,
    x: DMatrix<f64>,
    y_mean: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    log_marginal_likelihood: f64,
    restart_likelihoods: Vec<f64>,
}

fn matern52(r: f64) -> f64 {
    (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
}

fn to_dmatrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| x[[i, k]])
}

fn scaled_distance(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((p, q), l)| {
            let d = (p - q) / l;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

fn kernel_matrix(x: &[Vec<f64>], hyper: &GpHyperparameters) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_variance;
        for j in 0..i {
            let v = hyper.signal_variance
                * matern52(scaled_distance(&x[i], &x[j], &hyper.lengthscales));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `k + noise * I`, escalating jitter on failure.
fn factorize(mut k: DMatrix<f64>, noise: f64, signal: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    if let Some(c) = k.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let mut prev = 0.0;
    for &frac in &JITTER_LADDER {
        let jitter = frac * signal.max(f64::MIN_POSITIVE);
        for i in 0..n {
            k[(i, i)] += jitter - prev;
        }
        prev = jitter;
        if let Some(c) = k.clone().cholesky() {
            return Ok((c, jitter));
        }
    }
    Err(LseError::Numerical {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

struct Objective<'a> {
    x: Vec<Vec<f64>>,
    y: &'a DVector<f64>,
    dim: usize,
    fixed_noise: Option<f64>,
}

impl Objective<'_> {
    fn unpack(&self, theta: &[f64]) -> GpHyperparameters {
        GpHyperparameters {
            lengthscales: theta[..self.dim].iter().map(|v| v.exp()).collect(),
            signal_variance: theta[self.dim].exp(),
            noise_variance: self
                .fixed_noise
                .unwrap_or_else(|| theta[self.dim + 1].exp()),
        }
    }

    /// Log marginal likelihood and its gradient in log-parameter space.
    fn evaluate(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let hyper = self.unpack(theta);
        let kf = kernel_matrix(&self.x, &hyper);
        let (chol, _) = factorize(kf.clone(), hyper.noise_variance, hyper.signal_variance).ok()?;
        let alpha = chol.solve(self.y);
        let n = self.y.len() as f64;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let lml = -0.5 * self.y.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        if !lml.is_finite() {
            return None;
        }
        // W = alpha alpha^T - K^-1
        let w = &alpha * alpha.transpose() - chol.inverse();
        let mut grad = vec![0.0; theta.len()];
        let npts = self.x.len();
        for i in 0..npts {
            for j in 0..i {
                let r = scaled_distance(&self.x[i], &self.x[j], &hyper.lengthscales);
                let common =
                    hyper.signal_variance * 5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp();
                let wij = w[(i, j)];
                for k in 0..self.dim {
                    let d = (self.x[i][k] - self.x[j][k]) / hyper.lengthscales[k];
                    // symmetric pair counted twice, times the 1/2 prefactor
                    grad[k] += wij * common * d * d;
                }
                grad[self.dim] += wij * kf[(i, j)];
            }
            grad[self.dim] += 0.5 * w[(i, i)] * kf[(i, i)];
        }
        if self.fixed_noise.is_none() {
            grad[self.dim + 1] = 0.5 * hyper.noise_variance * w.trace();
        }
        Some((lml, grad))
    }
}

fn clamp_into(theta: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((t, l), h) in theta.iter_mut().zip(lo).zip(hi) {
        *t = t.clamp(*l, *h);
    }
}

/// Projected gradient ascent with a backtracking step size.
fn ascend(
    obj: &Objective,
    mut theta: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    iters: usize,
) -> (Vec<f64>, f64) {
    clamp_into(&mut theta, lo, hi);
    let Some((mut value, mut grad)) = obj.evaluate(&theta) else {
        return (theta, f64::NEG_INFINITY);
    };
    let mut step = 0.1;
    for _ in 0..iters {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t + step * g / norm)
                .collect();
            clamp_into(&mut cand, lo, hi);
            if let Some((v, g)) = obj.evaluate(&cand) {
                if v > value {
                    let gain = v - value;
                    theta = cand;
                    value = v;
                    grad = g;
                    step *= 1.5;
                    improved = gain > 1e-9 * value.abs().max(1.0);
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-10 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    (theta, value)
}

impl GpModel {
    /// Conditions a GP with fixed hyper-parameters on `(x, y)`.
    pub fn with_hyperparameters(
        x: &Array2<f64>,
        y: &[f64],
        hyper: GpHyperparameters,
    ) -> Result<Self> {
        Self::condition(to_dmatrix(x), y, hyper, Vec::new())
    }

    fn condition(
        x: DMatrix<f64>,
        y: &[f64],
        hyper: GpHyperparameters,
        restart_likelihoods: Vec<f64>,
    ) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(LseError::invalid("GP inputs and targets differ in length"));
        }
        if hyper.lengthscales.len() != x.ncols()
            || hyper.lengthscales.iter().any(|&l| !(l > 0.0))
            || !(hyper.signal_variance > 0.0)
            || !(hyper.noise_variance >= 0.0)
        {
            return Err(LseError::invalid("invalid GP hyper-parameters"));
        }
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let k = kernel_matrix(&rows(&x), &hyper);
        let (chol, jitter) = factorize(k, hyper.noise_variance, hyper.signal_variance)?;
        let alpha = chol.solve(&yc);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let log_marginal_likelihood = -0.5 * yc.dot(&alpha)
            - log_det
            - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            hyper,
            x,
            y_mean,
            chol,
            alpha,
            jitter,
            log_marginal_likelihood,
            restart_likelihoods,
        })
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// Converged likelihood of every restart, in restart order.
    pub fn restart_likelihoods(&self) -> &[f64] {
        &self.restart_likelihoods
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// Multi-start maximum-likelihood fit. `bounds` set the input ranges used to
/// draw initial lengthscales. `warm_start`, when given, is tried in
/// addition to the random restarts.
pub fn gp_fit_mle(
    x: &Array2<f64>,
    y: &[f64],
    bounds: &[(f64, f64)],
    options: &GpFitOptions,
    warm_start: Option<&GpHyperparameters>,
    seed: u64,
) -> Result<GpModel> {
    let n = y.len();
    if n < 2 {
        return Err(LseError::InsufficientData { needed: 2, got: n });
    }
    if x.nrows() != n || x.ncols() != bounds.len() {
        return Err(LseError::invalid("GP data shape does not match bounds"));
    }
    if options.restarts == 0 && warm_start.is_none() {
        return Err(LseError::invalid("GP fit needs at least one restart"));
    }
    let dim = bounds.len();
    let xm = to_dmatrix(x);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let y_var = {
        let v = yc.dot(&yc) / n as f64;
        if v > 1e-12 {
            v
        } else {
            1.0
        }
    };
    let ranges: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { hi - lo } else { 1.0 })
        .collect();

    let obj = Objective {
        x: rows(&xm),
        y: &yc,
        dim,
        fixed_noise: options.fixed_noise,
    };
    let n_params = dim + 1 + options.fixed_noise.is_none() as usize;
    let mut lo = Vec::with_capacity(n_params);
    let mut hi = Vec::with_capacity(n_params);
    for r in &ranges {
        lo.push((1e-3 * r).ln());
        hi.push((1e2 * r).ln());
    }
    lo.push((1e-6 * y_var).ln());
    hi.push((1e4 * y_var).ln());
    if options.fixed_noise.is_none() {
        lo.push((1e-10f64).ln());
        hi.push((10.0 * y_var).ln());
    }

    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..options.restarts {
        let mut theta: Vec<f64> = ranges
            .iter()
            .map(|r| (r * 10f64.powf(rng.gen_range(-2.0..=1.0))).ln())
            .collect();
        theta.push(y_var.ln());
        if options.fixed_noise.is_none() {
            theta.push((1e-2 * y_var).ln());
        }
        starts.push(theta);
    }
    if let Some(w) = warm_start {
        if w.lengthscales.len() == dim {
            let mut theta: Vec<f64> = w.lengthscales.iter().map(|l| l.ln()).collect();
            theta.push(w.signal_variance.ln());
            if options.fixed_noise.is_none() {
                theta.push(w.noise_variance.max(1e-10).ln());
            }
            starts.push(theta);
        }
    }

    let results: Vec<(Vec<f64>, f64)> = starts
        .into_par_iter()
        .map(|theta| ascend(&obj, theta, &lo, &hi, options.max_iterations))
        .collect();
    let likelihoods: Vec<f64> = results.iter().map(|r| r.1).collect();
    let best = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, v)) if v >= r.1 => acc,
            _ => Some((i, r.1)),
        });
    let Some((best_idx, _)) = best else {
        return Err(LseError::Numerical {
            jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
        });
    };
    let hyper = obj.unpack(&results[best_idx].0);
    GpModel::condition(xm, y, hyper, likelihoods)
}

/// Posterior mean and standard deviation of the latent function.
pub fn gp_posterior(model: &GpModel, points: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.ncols() != model.x.ncols() {
        return Err(LseError::invalid(
            "query dimension does not match GP inputs",
        ));
    }
    let train = rows(&model.x);
    let hyper = &model.hyper;
    let m = points.nrows();
    let mut kstar = DMatrix::zeros(train.len(), m);
    for (q, p) in points.outer_iter().enumerate() {
        let p: Vec<f64> = p.to_vec();
        for (i, t) in train.iter().enumerate() {
            kstar[(i, q)] =
                hyper.signal_variance * matern52(scaled_distance(t, &p, &hyper.lengthscales));
        }
    }
    let mu = kstar.transpose() * &model.alpha;
    let v = model
        .chol
        .l()
        .solve_lower_triangular(&kstar)
        .ok_or(LseError::Numerical {
            jitter: model.jitter,
        })?;
    let mut means = Vec::with_capacity(m);
    let mut sds = Vec::with_capacity(m);
    for q in 0..m {
        means.push(mu[q] + model.y_mean);
        let explained: f64 = v.column(q).iter().map(|e| e * e).sum();
        sds.push((hyper.signal_variance - explained).max(0.0).sqrt());
    }
    Ok((means, sds))
}

/// `scale * sigma - |mu - h|`.
pub fn straddle_with_scale(
    mu: &[f64],
    sigma: &[f64],
    h: f64,
    scale: f64,
) -> Result<AcquisitionScores> {
    if mu.len() != sigma.len() {
        return Err(LseError::invalid(
            "mean and deviation vectors differ in length",
        ));
    }
    Ok(AcquisitionScores::new(
        mu.iter()
            .zip(sigma)
            .map(|(m, s)| scale * s - (m - h).abs())
            .collect(),
    ))
}

pub fn straddle(mu: &[f64], sigma: &[f64], h: f64) -> Result<AcquisitionScores> {
    straddle_with_scale(mu, sigma, h, STRADDLE_SCALE)
}
