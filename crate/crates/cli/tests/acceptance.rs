//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints a PASS/FAIL line; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use ccl_cli::commands::{simulate, ResultRow, RESULTS_FILE};
use ccl_cli::config::LoadedConfig;
use ccl_core::continual::{run_continual, Learner};
use ccl_core::dsi::{solve, SufficientStats};
use ccl_core::linalg::Matrix;
use ccl_core::models::{softmax, Architecture, BlackBoxHandle, Classifier};
use ccl_core::oracle::ridge_oracle;
use ccl_core::sampler::{
    decode_khot, encode_khot, rrf, sample_entropy, sample_mixup, sample_replay, sample_rr, BaseStrategy, KHotRrf,
    Strategy,
};
use ccl_core::seed::rng_for;
use ccl_core::{ClassId, Dataset, FeatureVector, LabeledSample, PlaceClassSet};
use rand::seq::index::sample;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const BATCH_REL_TOL: f64 = 1e-8;
const FT_DROP_MIN: f64 = 0.20;
const SPEARMAN_ALPHA: f64 = 0.05;
const KHOT_MAX_BITS: usize = 128;
const STATS_BYTES_D100_C100: usize = 160_024;
const GRAD_REL_TOL: f64 = 1e-4;
const SIMPLEX_TOL: f64 = 1e-9;

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

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one variate is enough here.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn batch_equivalence() -> Outcome {
    let mut rng = rng_for(1, &[0xacc]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=64);
        let c = rng.random_range(1..=16);
        let n = rng.random_range(1..=512);
        let parts = [2usize, 4, 8][rng.random_range(0..3)];
        let lambda = [1e-4, 1e-3, 1e-1][rng.random_range(0..3)];
        let x = Matrix::from_fn(n, d, |_, _| gaussian(&mut rng));
        let y = Matrix::from_fn(n, c, |_, _| gaussian(&mut rng));
        let owner: Vec<usize> = (0..n).map(|_| rng.random_range(0..parts)).collect();
        let mut shards = vec![SufficientStats::zeros(d, c); parts];
        for r in 0..n {
            shards[owner[r]].accumulate(x.row(r), y.row(r)).unwrap();
        }
        let merged = shards
            .iter()
            .skip(1)
            .fold(shards[0].clone(), |acc, s| acc.merge(s).unwrap());
        let w = solve(&merged, lambda).unwrap();
        let oracle = ridge_oracle(&x, &y, lambda).unwrap();
        let rel = w.weights().frobenius_distance(&oracle) / oracle.frobenius_norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    outcome(
        worst <= BATCH_REL_TOL,
        format!("100 instances, worst relative Frobenius error {worst:.3e} (tol {BATCH_REL_TOL:e})"),
    )
}

fn zero_forgetting() -> Outcome {
    let config = LoadedConfig::defaults();
    let mut exact = true;
    let mut drops = Vec::new();
    let mut drift = 0.0;
    for seed in 0..5 {
        let cc = config.continual_config(seed);
        drift = cc.drift_magnitude;
        let report = run_continual(&cc).unwrap();
        for r in report.rows.iter().filter(|r| r.learner == Learner::Analytic) {
            exact &= r.batch_agreement == Some(1.0);
        }
        let first = report.row(1, Learner::FineTune).unwrap().first_session_accuracy;
        let last = report
            .row(cc.num_sessions, Learner::FineTune)
            .unwrap()
            .first_session_accuracy;
        drops.push(first - last);
    }
    let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    outcome(
        exact && mean_drop >= FT_DROP_MIN && drift >= 0.3,
        format!(
            "analytic argmax matches batch refit at every session: {exact}; FT session-1 drop {:.1} points (min {:.0}, drift {drift})",
            100.0 * mean_drop,
            100.0 * FT_DROP_MIN
        ),
    )
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho with a two-sided p-value from the t approximation.
fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let rho = sxy / (sxx * syy).sqrt();
    if rho.abs() >= 1.0 {
        return (rho.signum(), 0.0);
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).unwrap();
    (rho, 2.0 * (1.0 - dist.cdf(t.abs())))
}

fn strategy_ordering(rows: &[ResultRow], strategies: &[Strategy], n_values: &[usize]) -> Outcome {
    let last_stage = rows.iter().map(|r| r.stage).max().unwrap();
    let finals: Vec<&ResultRow> = rows.iter().filter(|r| r.stage == last_stage).collect();
    let mut means: BTreeMap<(Strategy, usize), (f64, usize)> = BTreeMap::new();
    for r in &finals {
        let m = means.entry((r.strategy, r.n)).or_default();
        m.0 += r.top1;
        m.1 += 1;
    }
    let mean = |s: Strategy, n: usize| {
        let (sum, k) = means[&(s, n)];
        sum / k as f64
    };
    let mut ok = true;
    let mut notes = Vec::new();

    for &s in strategies {
        let pts: Vec<&&ResultRow> = finals.iter().filter(|r| r.strategy == s).collect();
        let xs: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = pts.iter().map(|r| r.top1).collect();
        let (rho, p) = spearman(&xs, &ys);
        let good = rho > 0.0 && p < SPEARMAN_ALPHA;
        ok &= good;
        notes.push(format!("{} rho={rho:.2} p={p:.1e}", s.name()));
    }
    let us_lowest = n_values.iter().all(|&n| {
        strategies
            .iter()
            .filter(|&&s| s != Strategy::Uniform)
            .all(|&s| mean(Strategy::Uniform, n) < mean(s, n))
    });
    let n_max = *n_values.iter().max().unwrap();
    let n_min = *n_values.iter().min().unwrap();
    let replay_top = strategies
        .iter()
        .filter(|&&s| s != Strategy::Replay)
        .all(|&s| mean(Strategy::Replay, n_max) > mean(s, n_max));
    let entropy_small = mean(Strategy::Entropy, n_min) >= mean(Strategy::ReciprocalRank, n_min);
    ok &= us_lowest && replay_top && entropy_small;
    outcome(
        ok,
        format!(
            "(a) {}; (b) US lowest at every N: {us_lowest}; (c) Replay highest at N={n_max}: {replay_top} ({:.3}); (d) Entropy {:.3} >= RR {:.3} at N={n_min}: {entropy_small}",
            notes.join(", "),
            mean(Strategy::Replay, n_max),
            mean(Strategy::Entropy, n_min),
            mean(Strategy::ReciprocalRank, n_min),
        ),
    )
}

fn khot_bound() -> Outcome {
    let (d, k) = (100, 10);
    let mut rng = rng_for(4, &[0xacc]);
    let mut bits_ok = true;
    let mut round_trip = true;
    for _ in 0..10_000 {
        let indices = sample(&mut rng, d, k).into_vec();
        let code = KHotRrf::new(indices, d).unwrap();
        let bits = encode_khot(&code, d).unwrap();
        bits_ok &= bits.len_bits() == 70 && bits.len_bits() <= KHOT_MAX_BITS;
        round_trip &= decode_khot(&bits, k, d).unwrap() == code;
    }
    outcome(
        bits_ok && round_trip,
        format!("D=100, k=10: 70 bits every time: {bits_ok}; 10,000 round trips exact: {round_trip}"),
    )
}

fn message_size() -> Outcome {
    let (d, c) = (100, 100);
    let mut rng = rng_for(5, &[0xacc]);
    let mut lens = Vec::new();
    for n in [10usize, 100_000] {
        let mut stats = SufficientStats::zeros(d, c);
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; c];
        for _ in 0..n {
            x.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            y.iter_mut().for_each(|v| *v = rng.random());
            stats.accumulate(&x, &y).unwrap();
        }
        lens.push(stats.serialize().len());
    }
    outcome(
        lens.iter().all(|&l| l == STATS_BYTES_D100_C100),
        format!("D=C=100: {} bytes at n=10, {} bytes at n=100000", lens[0], lens[1]),
    )
}

fn teacher(d: usize, c: usize, seed: u64) -> Classifier {
    Classifier::init(Architecture::new(d, 8, c), seed).unwrap()
}

fn sampler_algebra() -> Outcome {
    let mut rng = rng_for(6, &[0xacc]);

    let mut codomain = true;
    for i in 0..10_000 {
        let d = rng.random_range(1..=128);
        // Every fourth vector is quantized so ties occur.
        let x: Vec<f64> = (0..d)
            .map(|_| {
                let v: f64 = rng.random_range(-5.0..5.0);
                if i % 4 == 0 {
                    v.round()
                } else {
                    v
                }
            })
            .collect();
        let mut r = rrf(&x);
        r.sort_by(|a, b| b.total_cmp(a));
        codomain &= r.iter().enumerate().all(|(j, v)| *v == 1.0 / (j + 1) as f64);
    }

    let mut mixup = true;
    for trial in 0..50 {
        let d = rng.random_range(2..=16);
        let c = rng.random_range(2..=12);
        let classes = PlaceClassSet::numbered(c).unwrap();
        let n = rng.random_range(1..=8);
        let r = rng.random_range(1..=n);
        let count = rng.random_range(1..=c);
        let covered: Vec<usize> = sample(&mut rng, c, count).into_vec();
        let mut samples = Vec::new();
        for &k in &covered {
            for _ in 0..rng.random_range(r..=r + 3) {
                let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
                samples.push(LabeledSample {
                    x: FeatureVector::new(x).unwrap(),
                    y: ClassId(k),
                });
            }
        }
        let retained = Dataset::new(classes, samples).unwrap();
        let model = teacher(d, c, trial);
        let base = if trial % 2 == 0 {
            BaseStrategy::ReciprocalRank
        } else {
            BaseStrategy::Entropy
        };
        let out = sample_mixup(&retained, &mut BlackBoxHandle::new(&model), n, r, base, trial).unwrap();
        let replayed = sample_replay(&retained, &mut BlackBoxHandle::new(&model), r).unwrap();
        mixup &= out.len() == n * covered.len();
        mixup &= replayed.len() == r * covered.len() && out[..replayed.len()] == replayed[..];
    }

    let mut dominance = true;
    for trial in 0..50 {
        let d = rng.random_range(2..=16);
        let c = rng.random_range(2..=12);
        let n = rng.random_range(1..=20);
        let factor = rng.random_range(1.0..6.0);
        let model = teacher(d, c, 100 + trial);
        let chosen = sample_entropy(&mut BlackBoxHandle::new(&model), n, d, factor, trial).unwrap();
        // Rebuild the candidate pool and score it independently.
        let pool = ((n as f64 * factor).ceil() as usize).max(n);
        let candidates = sample_rr(pool, d, trial).unwrap();
        let entropy = |x: &FeatureVector| {
            let p = softmax(&model.logits(x.as_slice()).unwrap(), 1.0);
            -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
        };
        let chosen_max = chosen.iter().map(|s| entropy(&s.x)).fold(f64::NEG_INFINITY, f64::max);
        let rejected_min = candidates
            .iter()
            .filter(|x| !chosen.iter().any(|s| &s.x == *x))
            .map(entropy)
            .fold(f64::INFINITY, f64::min);
        dominance &= chosen.len() == n && chosen_max <= rejected_min + 1e-12;
    }

    outcome(
        codomain && mixup && dominance,
        format!("rrf codomain on 10,000 vectors: {codomain}; Mixup decomposition: {mixup}; entropy dominance: {dominance}"),
    )
}

fn numerical_sanity() -> Outcome {
    let mut rng = rng_for(7, &[0xacc]);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let d = rng.random_range(1..=6);
        let h = rng.random_range(1..=5);
        let c = rng.random_range(2..=5);
        let arch = if trial % 5 == 0 {
            Architecture::linear(d, c)
        } else {
            Architecture::new(d, h, c)
        };
        let model = Classifier::init(arch, trial).unwrap();
        let m = rng.random_range(1..=6);
        let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ts: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let temperature = [1.0, 2.0][trial as usize % 2];
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let targets: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
        let (_, grad) = model.loss_and_gradient(&inputs, &targets, temperature).unwrap();
        let params = model.parameters();
        let eps = 1e-6;
        let mut fd = vec![0.0; params.len()];
        let mut probe = model.clone();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += eps;
            probe.set_parameters(&p).unwrap();
            let plus = probe.loss_and_gradient(&inputs, &targets, temperature).unwrap().0;
            p[i] -= 2.0 * eps;
            probe.set_parameters(&p).unwrap();
            let minus = probe.loss_and_gradient(&inputs, &targets, temperature).unwrap().0;
            fd[i] = (plus - minus) / (2.0 * eps);
        }
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = grad
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        worst = worst.max(diff / scale);
    }

    let mut simplex = true;
    for _ in 0..10_000 {
        let c = rng.random_range(1..=64);
        let spread = [1.0, 10.0, 300.0][rng.random_range(0..3)];
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-spread..spread)).collect();
        let p = softmax(&z, 1.0);
        let sum: f64 = p.iter().sum();
        simplex &= (sum - 1.0).abs() <= SIMPLEX_TOL && p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0);
    }
    outcome(
        worst <= GRAD_REL_TOL && simplex,
        format!("50 gradient checks, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:e}); 10,000 softmax simplex checks: {simplex}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut timed = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        o.detail = format!("{} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        results.push((name, o));
    };

    timed("1 DSI batch equivalence", &mut batch_equivalence);
    timed("2 zero forgetting", &mut zero_forgetting);

    let config = LoadedConfig::defaults();
    let seeds: Vec<u64> = (0..5).collect();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    timed("3 transfer strategy ordering", &mut || {
        let out = simulate(&config, first.path(), &seeds, 1).unwrap();
        rows = out.rows;
        strategy_ordering(&rows, &config.strategies(), &config.config.sweep.n_values)
    });
    timed("4 k-hot encoding bound", &mut khot_bound);
    timed("5 message size invariance", &mut message_size);
    timed("6 sampler algebra", &mut sampler_algebra);
    timed("7 numerical sanity", &mut numerical_sanity);
    timed("8 determinism", &mut || {
        simulate(&config, second.path(), &seeds, 2).unwrap();
        let a = std::fs::read(first.path().join(RESULTS_FILE)).unwrap();
        let b = std::fs::read(second.path().join(RESULTS_FILE)).unwrap();
        outcome(
            a == b,
            format!("two simulate runs (1 and 2 workers), results.csv {} bytes, identical: {}", a.len(), a == b),
        )
    });

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
