//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion reports a PASS/FAIL line even when an earlier one fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lse_core::acquisition::{
    acq_explicit_mi, acq_implicit_mi, explicit_terms, implicit_g_values, implicit_terms,
    IndicatorMode,
};
use lse_core::benchmarks::Benchmark;
use lse_core::domain::{classify, ThresholdSpec};
use lse_core::experiment::{
    run_experiment, ExperimentConfig, ExperimentTrace, Method, ThresholdVariant,
};
use lse_core::gp::{gp_posterior, GpHyperparameters, GpModel};
use lse_core::surrogate::{DropoutSurrogate, NetworkArchitecture, PredictionEnsemble};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Random ensemble; half of them use small integers so ties are common.
fn random_ensemble(rng: &mut ChaCha8Rng, max_m: usize, max_n: usize) -> Array2<f64> {
    let m = rng.gen_range(1..=max_m);
    let n = rng.gen_range(1..=max_n);
    if rng.gen_bool(0.5) {
        Array2::from_shape_simple_fn((m, n), || rng.gen_range(0..6) as f64)
    } else {
        Array2::from_shape_simple_fn((m, n), || rng.gen_range(-3.0..10.0))
    }
}

fn oracle_ensembles() -> Vec<(Array2<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ratios = [0.0, 0.5, 0.9, 1.0];
    (0..100)
        .map(|i| (random_ensemble(&mut rng, 10, 200), ratios[i % ratios.len()]))
        .collect()
}

/// Substitutes pass j's value at x into the mean-field predictions and
/// counts points above `l` times the resulting maximum.
fn brute_force_cardinalities(passes: &Array2<f64>, ratio: f64, x: usize) -> Vec<usize> {
    let (m, n) = passes.dim();
    let mu: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|j| passes[[j, i]]).sum::<f64>() / m as f64)
        .collect();
    (0..m)
        .map(|j| {
            let mut field = mu.clone();
            field[x] = passes[[j, x]];
            let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            field.iter().filter(|&&v| v > ratio * max).count()
        })
        .collect()
}

fn empirical_entropy(values: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for v in values {
        *counts.entry(*v).or_insert(0usize) += 1;
    }
    let total = values.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut q_mismatch = 0usize;
    for (passes, ratio) in oracle_ensembles() {
        let ens = PredictionEnsemble::from_passes(passes.clone()).unwrap();
        let fast = acq_implicit_mi(&ens, ratio).unwrap();
        for x in 0..passes.ncols() {
            let q = brute_force_cardinalities(&passes, ratio, x);
            if implicit_g_values(&ens, ratio, x).unwrap().q_values != q {
                q_mismatch += 1;
            }
            worst = worst.max((fast.scores[x] - empirical_entropy(&q)).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        q_mismatch == 0 && worst <= 1e-12 && elapsed < Duration::from_secs(10),
        format!(
            "q mismatches {q_mismatch}, max score error {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst_term = 0.0f64;
    let mut worst_mi = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (passes, ratio) in oracle_ensembles() {
        let ens = PredictionEnsemble::from_passes(passes.clone()).unwrap();
        let imp = implicit_terms(&ens, ratio).unwrap();
        worst_term = imp
            .expected_entropy
            .iter()
            .fold(worst_term, |w, v| w.max(v.abs()));
        let h = rng.gen_range(-3.0..10.0);
        let exp = explicit_terms(&ens, h, IndicatorMode::Hard).unwrap();
        worst_term = exp
            .expected_entropy
            .iter()
            .fold(worst_term, |w, v| w.max(v.abs()));
        let mi = acq_explicit_mi(&ens, h);
        let m = passes.nrows() as f64;
        for x in 0..passes.ncols() {
            let p = passes.column(x).iter().filter(|&&v| v > h).count() as f64 / m;
            let entropy = if p == 0.0 || p == 1.0 {
                0.0
            } else {
                -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
            };
            worst_mi = worst_mi.max((mi.scores[x] - entropy).abs());
        }
    }
    outcome(
        worst_term < 1e-15 && worst_mi <= 1e-12,
        format!("max |expected entropy| {worst_term:.2e}, max MI error {worst_mi:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0usize;
    let (mut max_exp, mut max_imp_ratio) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let passes = random_ensemble(&mut rng, 12, 60);
        let m = passes.nrows() as f64;
        let ens = PredictionEnsemble::from_passes(passes).unwrap();
        let h = rng.gen_range(-3.0..10.0);
        let l = rng.gen_range(0.0..=1.0);
        for s in acq_explicit_mi(&ens, h).scores {
            max_exp = max_exp.max(s);
            if !(0.0..=std::f64::consts::LN_2 + 1e-12).contains(&s) {
                violations += 1;
            }
        }
        for s in acq_implicit_mi(&ens, l).unwrap().scores {
            if m > 1.0 {
                max_imp_ratio = max_imp_ratio.max(s / m.ln());
            }
            if !(s >= 0.0 && s <= m.ln() + 1e-12) {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations; max explicit {max_exp:.6}, max implicit/ln M {max_imp_ratio:.6}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for net in 0..20 {
        let layers = rng.gen_range(1..=3);
        let width = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=3);
        let rows = rng.gen_range(3..=12);
        let dropout = [0.0, 0.1, 0.3][net % 3];
        let arch = NetworkArchitecture::new(layers, width).unwrap();
        let mut model = DropoutSurrogate::initialize(arch, d, dropout, net as u64).unwrap();
        // fresh biases are exactly 0, which can park a unit on the ReLU kink
        let random: Vec<f64> = model
            .parameters()
            .iter()
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        model.set_parameters(&random).unwrap();
        let x = Array2::from_shape_simple_fn((rows, d), || rng.gen_range(-2.0..2.0));
        let y = ndarray::Array1::from_shape_simple_fn(rows, || rng.gen_range(-1.0..1.0));
        let masks = model.sample_masks(rows, &mut rng);
        let (_, grad) = model.loss_and_gradient(x.view(), y.view(), &masks);
        let analytic = grad.flatten();
        let base = model.parameters();
        let step = 1e-5;
        let mut numeric = vec![0.0; base.len()];
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + step;
            model.set_parameters(&p).unwrap();
            let up = model.loss_and_gradient(x.view(), y.view(), &masks).0;
            p[k] = base[k] - step;
            model.set_parameters(&p).unwrap();
            let down = model.loss_and_gradient(x.view(), y.view(), &masks).0;
            numeric[k] = (up - down) / (2.0 * step);
        }
        model.set_parameters(&base).unwrap();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / norm_a.max(norm_n).max(1e-12);
        worst = worst.max(rel);
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 20 networks"),
    )
}

fn ackley_config(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        benchmark: Some(Benchmark::Ackley),
        dim: Some(2),
        pool_size: Some(2000),
        super_fraction: 0.2,
        threshold_variant: if method == Method::Imphlse {
            ThresholdVariant::Implicit
        } else {
            ThresholdVariant::Explicit
        },
        init_count: Some(6),
        batch_size: Some(10),
        budget: 120,
        mc_passes: 50,
        repetitions: 3,
        seed: 1,
        tune_stride: 4,
        learning_rates: vec![1e-2, 3e-3],
        dropout_rates: vec![0.05, 0.1],
        initial_layers: 2,
        initial_width: 64,
        max_layers: 3,
        max_width: 256,
        ..Default::default()
    }
}

fn final_f1_super(traces: &[ExperimentTrace]) -> Vec<f64> {
    traces
        .iter()
        .map(|t| t.records.last().unwrap().f1_super)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let exp = final_f1_super(&run_experiment(&ackley_config(Method::Exphlse)).unwrap());
    let rnd = final_f1_super(&run_experiment(&ackley_config(Method::Random)).unwrap());
    let imp = final_f1_super(&run_experiment(&ackley_config(Method::Imphlse)).unwrap());
    let elapsed = start.elapsed();
    let (me, mr, mi) = (mean(&exp), mean(&rnd), mean(&imp));
    outcome(
        me >= 0.85 && me >= mr + 0.05 && mi >= 0.75 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "exphlse {me:.3} {exp:.3?}, random {mr:.3} {rnd:.3?}, imphlse {mi:.3} {imp:.3?}, {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=100);
        let values: Vec<f64> = if rng.gen_bool(0.3) {
            (0..n).map(|_| rng.gen_range(0..8) as f64).collect()
        } else {
            (0..n).map(|_| rng.gen_range(0.0..50.0)).collect()
        };
        let l = if rng.gen_bool(0.2) {
            [0.0, 1.0][rng.gen_range(0..2)]
        } else {
            rng.gen_range(0.0..=1.0)
        };
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let imp = classify(&values, ThresholdSpec::Implicit(l)).unwrap();
        let exp = classify(&values, ThresholdSpec::Explicit(l * max)).unwrap();
        if imp.membership() != exp.membership() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 1000 vectors"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let x: Array2<f64> = Array2::from_shape_simple_fn((30, 2), || rng.gen_range(-5.0..5.0));
    let y: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r[0].sin() * r[1].cos() + 0.1 * r[0])
        .collect();
    let hyper = GpHyperparameters {
        lengthscales: vec![1.5, 1.5],
        signal_variance: 1.0,
        noise_variance: 0.0,
    };
    let model = GpModel::with_hyperparameters(&x, &y, hyper).unwrap();
    let (mu, _) = gp_posterior(&model, &x).unwrap();
    let interp = mu
        .iter()
        .zip(&y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let traces = run_experiment(&ackley_config(Method::Straddle)).unwrap();
    let fractions: Vec<f64> = traces
        .iter()
        .map(|t| {
            let f: Vec<f64> = t.records.iter().map(|r| r.f1_super).collect();
            let steps = f.len() - 1;
            f.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / steps as f64
        })
        .collect();
    let monotone = mean(&fractions);
    let finals = final_f1_super(&traces);
    outcome(
        interp <= 1e-6 && monotone >= 0.8,
        format!(
            "interpolation error {interp:.2e}; straddle monotone fraction {monotone:.3} {fractions:.3?}, final f1_super {finals:.3?}"
        ),
    )
}

fn best_time<F: FnMut()>(mut f: F) -> f64 {
    (0..5)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        PredictionEnsemble::from_passes(Array2::from_shape_simple_fn((50, n), || {
            rng.gen_range(0.0..10.0)
        }))
        .unwrap()
    };
    let small = make(50_000, &mut rng);
    let large = make(100_000, &mut rng);
    let exp_ratio = best_time(|| {
        std::hint::black_box(acq_explicit_mi(&large, 5.0));
    }) / best_time(|| {
        std::hint::black_box(acq_explicit_mi(&small, 5.0));
    });
    let imp_ratio = best_time(|| {
        std::hint::black_box(acq_implicit_mi(&large, 0.8).unwrap());
    }) / best_time(|| {
        std::hint::black_box(acq_implicit_mi(&small, 0.8).unwrap());
    });
    outcome(
        exp_ratio <= 2.5 && imp_ratio <= 3.0,
        format!("explicit x{exp_ratio:.2}, implicit x{imp_ratio:.2} for 50k -> 100k"),
    )
}

fn run_cli(config: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_lse"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--seed", "42"])
        .status()
        .expect("launch lse");
    assert!(status.success(), "lse run failed: {status}");
    std::fs::read(out.join("traces.csv")).expect("traces.csv written")
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "method = \"exphlse\"\nbenchmark = \"levy\"\ndim = 2\npool_size = 400\n\
         budget = 30\nbatch_size = 10\nmc_passes = 20\nrepetitions = 2\nepochs = 300\n\
         tune_stride = 2\nlearning_rates = [1e-2, 3e-3]\ndropout_rates = [0.05]\n\
         initial_width = 32\nmax_width = 64\nmax_layers = 2\n",
    )
    .unwrap();
    let a = run_cli(&config, &dir.path().join("a"));
    let b = run_cli(&config, &dir.path().join("b"));
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    outcome(
        a == b && rows == 9,
        format!("{} bytes, {rows} lines, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("implicit fast path matches brute-force oracle", criterion_1),
        ("hard-mode expected entropy vanishes", criterion_2),
        ("information bounds", criterion_3),
        ("backprop gradient check", criterion_4),
        ("desk-scale Ackley-2 F1", criterion_5),
        ("explicit/implicit classification consistency", criterion_6),
        ("GP interpolation and Straddle trace", criterion_7),
        ("scoring cost scales linearly", criterion_8),
        ("lse run is byte-reproducible", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} - {name}: {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
