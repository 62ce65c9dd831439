//! Synthetic test functions, benchmark pools, noisy oracles and CSV pools.

use std::f64::consts::{E, PI};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::CandidatePool;
use crate::error::{LseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Ackley,
    Levy,
    Alpine1,
}

impl Benchmark {
    /// Per-coordinate canonical box.
    pub fn domain(self) -> (f64, f64) {
        match self {
            Benchmark::Ackley => (-32.768, 32.768),
            Benchmark::Levy | Benchmark::Alpine1 => (-10.0, 10.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Ackley => "ackley",
            Benchmark::Levy => "levy",
            Benchmark::Alpine1 => "alpine1",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = LseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ackley" => Ok(Benchmark::Ackley),
            "levy" => Ok(Benchmark::Levy),
            "alpine1" | "alpine" => Ok(Benchmark::Alpine1),
            other => Err(LseError::invalid(format!("unknown benchmark {other:?}"))),
        }
    }
}

/// `sin(pi * x)`, exactly zero at integers.
fn sin_pi(x: f64) -> f64 {
    let r = x - 2.0 * (x / 2.0).round();
    if r == r.trunc() {
        0.0
    } else {
        (PI * r).sin()
    }
}

fn ackley(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let cos = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / d;
    // grouped so the optimum evaluates to exactly zero
    20.0 * (1.0 - (-0.2 * sq.sqrt()).exp()) + (E - cos.exp())
}

fn levy(x: &[f64]) -> f64 {
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let d = w.len();
    let s1 = sin_pi(w[0]);
    let mut total = s1 * s1;
    for &wi in &w[..d - 1] {
        let s = (PI * wi + 1.0).sin();
        total += (wi - 1.0) * (wi - 1.0) * (1.0 + 10.0 * s * s);
    }
    let wd = w[d - 1];
    let s = sin_pi(2.0 * wd);
    total + (wd - 1.0) * (wd - 1.0) * (1.0 + s * s)
}

fn alpine1(x: &[f64]) -> f64 {
    x.iter().map(|v| (v * v.sin() + 0.1 * v).abs()).sum()
}

/// Noiseless value of a benchmark at `x`.
pub fn eval_benchmark(name: Benchmark, x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(LseError::invalid(
            "benchmark input must have at least one coordinate",
        ));
    }
    let (lo, hi) = name.domain();
    if let Some(k) = x.iter().position(|&v| !(v >= lo && v <= hi)) {
        return Err(LseError::invalid(format!(
            "{name}: coordinate {k} = {} outside [{lo}, {hi}]",
            x[k]
        )));
    }
    Ok(match name {
        Benchmark::Ackley => ackley(x),
        Benchmark::Levy => levy(x),
        Benchmark::Alpine1 => alpine1(x),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: Benchmark,
    pub d: usize,
    pub pool_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// Pool of `10000 * d` points, noiseless oracle.
    pub fn new(name: Benchmark, d: usize, seed: u64) -> Self {
        Self {
            name,
            d,
            pool_size: 10_000 * d,
            noise_std: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.pool_size == 0 {
            return Err(LseError::invalid(
                "benchmark needs d >= 1 and pool_size >= 1",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(LseError::invalid(
                "noise_std must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Uniform random pool over the canonical box with the noiseless truth.
pub fn build_pool(spec: &BenchmarkSpec) -> Result<CandidatePool> {
    spec.validate()?;
    let (lo, hi) = spec.name.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = Array2::from_shape_simple_fn((spec.pool_size, spec.d), || rng.gen_range(lo..=hi));
    let truth: Result<Vec<f64>> = points
        .outer_iter()
        .map(|row| eval_benchmark(spec.name, row.as_slice().expect("standard layout")))
        .collect();
    CandidatePool::new(points, vec![(lo, hi); spec.d], Some(Array1::from(truth?)))
}

/// Reveals `truth + N(0, noise_std^2)` at pool points.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl NoisyOracle {
    pub fn new(noise_std: f64, seed: u64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(LseError::invalid(
                "noise_std must be finite and non-negative",
            ));
        }
        let noise = if noise_std > 0.0 {
            Some(Normal::new(0.0, noise_std).map_err(|e| LseError::invalid(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn query(&mut self, pool: &CandidatePool, index: usize) -> Result<f64> {
        let truth = pool
            .truth()
            .ok_or_else(|| LseError::invalid("pool has no ground truth to query"))?;
        let value = *truth
            .get(index)
            .ok_or_else(|| LseError::invalid(format!("index {index} out of range")))?;
        Ok(match &self.noise {
            Some(n) => value + n.sample(&mut self.rng),
            None => value,
        })
    }
}

/// Reads a pool from CSV: header row, feature columns, final column `y`.
/// Row and column numbers in errors are 1-based over data rows and fields.
pub fn load_csv_pool(path: impl AsRef<Path>) -> Result<CandidatePool> {
    let file = std::fs::File::open(path)?;
    read_csv_pool(file)
}

pub fn read_csv_pool<R: Read>(input: R) -> Result<CandidatePool> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let width = headers.len();
    if width < 2 || headers.get(width - 1).map(str::trim) != Some("y") {
        return Err(LseError::MissingColumn("y".into()));
    }
    let d = width - 1;
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| LseError::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(LseError::Parse {
                row,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| LseError::Parse {
                row,
                column: c + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(LseError::Parse {
                    row,
                    column: c + 1,
                    message: "non-finite value".into(),
                });
            }
            if c < d {
                data.push(v);
            } else {
                truth.push(v);
            }
        }
    }
    if truth.is_empty() {
        return Err(LseError::invalid("pool file has no data rows"));
    }
    let points = Array2::from_shape_vec((truth.len(), d), data)
        .map_err(|e| LseError::invalid(e.to_string()))?;
    CandidatePool::from_points(points, Some(Array1::from(truth)))
}

/// Writes `x1,...,xd,y`; requires the pool to carry ground truth.
pub fn write_csv_pool<W: Write>(pool: &CandidatePool, out: W) -> Result<()> {
    let truth = pool
        .truth()
        .ok_or_else(|| LseError::invalid("pool has no ground truth to write"))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=pool.dim()).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (row, y) in pool.points().outer_iter().zip(truth.iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_minima_are_exactly_zero() {
        for d in [1, 2, 5, 10] {
            assert_eq!(
                eval_benchmark(Benchmark::Ackley, &vec![0.0; d]).unwrap(),
                0.0
            );
            assert_eq!(eval_benchmark(Benchmark::Levy, &vec![1.0; d]).unwrap(), 0.0);
            assert_eq!(
                eval_benchmark(Benchmark::Alpine1, &vec![0.0; d]).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn reference_values() {
        // Ackley(1, 1): 20(1 - e^{-0.2}) + e - e^{1}
        let a = eval_benchmark(Benchmark::Ackley, &[1.0, 1.0]).unwrap();
        assert!((a - 20.0 * (1.0 - (-0.2f64).exp())).abs() < 1e-12);
        // Alpine1 at (pi/2): |pi/2 + 0.1 pi/2|
        let v = eval_benchmark(Benchmark::Alpine1, &[PI / 2.0]).unwrap();
        assert!((v - 1.1 * PI / 2.0).abs() < 1e-12);
        // Levy in 1-D at x = 5: w = 2, sin^2(2 pi) + 1 * (1 + sin^2(4 pi)) = 1
        assert!((eval_benchmark(Benchmark::Levy, &[5.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        assert!(eval_benchmark(Benchmark::Levy, &[10.5]).is_err());
        assert!(eval_benchmark(Benchmark::Ackley, &[-33.0, 0.0]).is_err());
        assert!(eval_benchmark(Benchmark::Alpine1, &[]).is_err());
    }

    #[test]
    fn pools_are_reproducible_and_valid() {
        let spec = BenchmarkSpec {
            pool_size: 20_000,
            ..BenchmarkSpec::new(Benchmark::Ackley, 2, 42)
        };
        let a = build_pool(&spec).unwrap();
        let b = build_pool(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20_000);
        assert!(a.truth().unwrap().iter().all(|v| v.is_finite()));
        assert!(a.points().iter().all(|v| (-32.768..=32.768).contains(v)));
    }

    #[test]
    fn default_pool_size_scales_with_dimension() {
        assert_eq!(
            BenchmarkSpec::new(Benchmark::Levy, 10, 0).pool_size,
            100_000
        );
    }

    #[test]
    fn oracle_noise_level() {
        let pool = CandidatePool::new(
            Array2::zeros((1, 1)),
            vec![(0.0, 1.0)],
            Some(Array1::from(vec![3.0])),
        )
        .unwrap();
        let sigma = 0.5;
        let mut oracle = NoisyOracle::new(sigma, 9).unwrap();
        let draws: Vec<f64> = (0..1000).map(|_| oracle.query(&pool, 0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / 1000.0;
        let sd = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 999.0).sqrt();
        assert!((sd - sigma).abs() < 0.2 * sigma, "sd {sd}");
        let mut exact = NoisyOracle::new(0.0, 9).unwrap();
        assert_eq!(exact.query(&pool, 0).unwrap(), 3.0);
    }

    #[test]
    fn csv_small_file() {
        let text = "x1,x2,y\n0,1,2\n1,2,3\n4,5,6\n";
        let pool = read_csv_pool(text.as_bytes()).unwrap();
        assert_eq!((pool.len(), pool.dim()), (3, 2));
        assert_eq!(pool.bounds(), &[(0.0, 4.0), (1.0, 5.0)]);
        assert_eq!(pool.truth().unwrap().to_vec(), vec![2.0, 3.0, 6.0]);
    }

    #[test]
    fn csv_reports_bad_cell() {
        let text = "x1,x2,y\n0,1,2\nabc,2,3\n4,5,6\n";
        match read_csv_pool(text.as_bytes()) {
            Err(LseError::Parse { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_requires_y_column() {
        assert!(matches!(
            read_csv_pool("x1,x2,z\n0,1,2\n".as_bytes()),
            Err(LseError::MissingColumn(_))
        ));
    }

    #[test]
    fn csv_file_with_796_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proteins.csv");
        let mut text = String::new();
        let d = 12;
        let header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        text.push_str(&header.join(","));
        text.push_str(",y\n");
        for i in 0..796 {
            let row: Vec<String> = (0..d)
                .map(|k| format!("{:.3}", ((i * 31 + k * 7) % 97) as f64 / 97.0))
                .collect();
            text.push_str(&row.join(","));
            text.push_str(&format!(",{}\n", 500.0 + (i % 90) as f64));
        }
        std::fs::write(&path, text).unwrap();
        let pool = load_csv_pool(&path).unwrap();
        assert_eq!(pool.len(), 796);
        assert_eq!(pool.dim(), d);
    }

    #[test]
    fn csv_round_trip_of_generated_pool() {
        let spec = BenchmarkSpec {
            pool_size: 25,
            ..BenchmarkSpec::new(Benchmark::Levy, 3, 1)
        };
        let pool = build_pool(&spec).unwrap();
        let mut buf = Vec::new();
        write_csv_pool(&pool, &mut buf).unwrap();
        let back = read_csv_pool(buf.as_slice()).unwrap();
        assert_eq!(back.points(), pool.points());
        assert_eq!(back.truth(), pool.truth());
    }
}
