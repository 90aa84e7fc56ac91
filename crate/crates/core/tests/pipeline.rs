use std::collections::BTreeSet;

use ccl_core::ccl::{forgetting_report, make_scenario, run_scenario, CclConfig, ScenarioData};
use ccl_core::dsi::{dsi_session_run, DsiConfig, SufficientStats};
use ccl_core::linalg::Matrix;
use ccl_core::models::{load_checkpoint, save_checkpoint, train_supervised, Architecture, BlackBoxHandle, TrainConfig};
use ccl_core::oracle::ridge_oracle;
use ccl_core::partition::{assign_combinatorial, GridSpec, PartitionPattern};
use ccl_core::sampler::{
    read_pseudo_set_csv, reconstruct_pseudo_set, write_pseudo_set_csv, ReconstructionContext, SamplerConfig, Strategy,
};
use ccl_core::seed::rng_for;
use ccl_core::synthgen::{build_world, generate_session, SessionSpec};
use ccl_core::{ClassId, Dataset, PseudoSample};
use rand::Rng;

fn small_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        epochs: 20,
        batch_size: 8,
        temperature: 1.0,
        seed: 0,
    }
}

fn sessions(classes: usize, dim: usize, count: usize, per_class: usize, seed: u64) -> (Vec<Dataset>, Dataset) {
    let world = build_world(classes, dim, 50.0, seed).unwrap();
    let make = |t: usize, n: usize, s: u64| generate_session(&world, &SessionSpec::all_classes(&world, t as u64, 0.1, n, s)).unwrap();
    let train = (0..count).map(|t| make(t, per_class, 1)).collect();
    (train, make(count, 4, 2))
}

#[test]
fn scenario_runs_end_to_end_and_is_repeatable() {
    let (train, test) = sessions(12, 12, 6, 6, 3);
    let universe = train[0].class_set().clone();
    let scenario = make_scenario(2, 6, 4, &universe, 3).unwrap();
    let config = CclConfig {
        sampler: SamplerConfig {
            n_per_class: 2,
            strategy: Strategy::Mixup,
            khot_k: Some(4),
            ..SamplerConfig::default()
        },
        hidden_dim: 8,
        train: small_train(),
        ..CclConfig::default()
    };
    let run = || {
        let data = ScenarioData::from_sessions(&scenario, &train, test.clone()).unwrap();
        run_scenario(&scenario, data, &config).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    assert_eq!(first.len(), 4);
    assert_eq!(first[0].kt_cost_samples, 0);
    for r in &first[1..] {
        assert!(r.kt_cost_samples > 0);
        assert!(r.kt_cost_bytes > r.kt_cost_samples);
        assert!((0.0..=1.0).contains(&r.top1()));
    }
    let forgetting = forgetting_report(&first, &scenario.class_assignment).unwrap();
    assert_eq!(forgetting[0].forgetting, 0.0);
}

#[test]
fn robots_agree_with_a_central_ridge_fit() {
    let (d, c) = (6, 4);
    let mut rng = rng_for(11, &[]);
    let streams: Vec<Vec<PseudoSample>> = (0..3)
        .map(|_| {
            (0..25)
                .map(|_| {
                    let class = rng.random_range(0..c);
                    let x: Vec<f64> = (0..d).map(|j| rng.random::<f64>() + if j == class { 2.0 } else { 0.0 }).collect();
                    let mut p = vec![0.02; c];
                    p[class] = 1.0 - 0.02 * (c - 1) as f64;
                    PseudoSample {
                        x: ccl_core::FeatureVector::new(x).unwrap(),
                        soft: ccl_core::PredictionDistribution::new(p).unwrap(),
                    }
                })
                .collect()
        })
        .collect();
    let config = DsiConfig::default_for(c);
    let outcome = dsi_session_run(&streams, d, c, &config).unwrap();
    assert_eq!(outcome.report.total_message_bytes, 3 * SufficientStats::encoded_len(d, c));

    let admitted: Vec<&PseudoSample> = streams.iter().flatten().filter(|s| s.soft.entropy() < config.tau).collect();
    assert_eq!(admitted.len() as u64, outcome.report.total_admitted);
    let x = Matrix::from_fn(admitted.len(), d, |i, j| admitted[i].x.as_slice()[j]);
    let y = Matrix::from_fn(admitted.len(), c, |i, j| admitted[i].soft.as_slice()[j]);
    let oracle = ridge_oracle(&x, &y, config.lambda).unwrap();
    let rel = outcome.model.weights().frobenius_distance(&oracle) / oracle.frobenius_norm();
    assert!(rel < 1e-8, "{rel}");

    let wire = outcome.global.serialize();
    assert_eq!(SufficientStats::deserialize(&wire).unwrap(), outcome.global);
}

#[test]
fn pseudo_sets_and_checkpoints_survive_disk() {
    let (train, _) = sessions(6, 8, 1, 10, 5);
    let model = train_supervised(&train[0], Architecture::new(8, 6, 6), &small_train()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let ckpt = dir.path().join("teacher.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();
    for s in train[0].samples() {
        assert_eq!(model.predict(&s.x).unwrap(), restored.predict(&s.x).unwrap());
    }

    for (strategy, khot_k) in [(Strategy::ReciprocalRank, Some(3)), (Strategy::Entropy, None), (Strategy::Replay, None)] {
        let config = SamplerConfig {
            n_per_class: 2,
            strategy,
            khot_k,
            seed: 9,
            ..SamplerConfig::default()
        };
        let context = ReconstructionContext {
            teacher_retained: Some(&train[0]),
            classes_covered: 6,
            ..ReconstructionContext::default()
        };
        let set = reconstruct_pseudo_set(&mut BlackBoxHandle::new(&restored), &config, &context).unwrap();
        assert_eq!(set.len(), 12);
        let path = dir.path().join(format!("{strategy}.csv"));
        write_pseudo_set_csv(&set, &path).unwrap();
        let back = read_pseudo_set_csv(&path).unwrap();
        assert_eq!(back.samples, set.samples, "{strategy}");
        assert_eq!(back.codes, set.codes, "{strategy}");
    }
}

#[test]
fn pattern_labels_match_point_lookup() {
    let mut rng = rng_for(21, &[]);
    let points: Vec<(f64, f64)> = (0..2000).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..50.0))).collect();
    let base = GridSpec::new([0.0, 0.0, 100.0, 50.0], 5, 10).unwrap();
    let pattern = PartitionPattern {
        grids: vec![base.clone(), base.shifted(5.0, 5.0)],
        min_samples_per_class: 5,
    };
    let assignment = pattern.build(&points).unwrap();
    let mut seen = BTreeSet::new();
    for (p, label) in points.iter().zip(&assignment.labels) {
        assert_eq!(assign_combinatorial(*p, &assignment.partition), *label);
        if let Some(ClassId(k)) = label {
            seen.insert(*k);
        }
    }
    assert_eq!(seen.len(), assignment.class_set.len());
    assert!(assignment.class_set.len() > 50);
}
