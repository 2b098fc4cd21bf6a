use fairexit::dataset::{generate_synthetic, DatasetSpec, LabeledInstance, Split};
use fairexit::inference::{
    decide, decide_batch, evaluate_policy, evaluate_trace, sweep_theta, theta_grid, EarlyExitPolicy,
};
use fairexit::metrics::per_exit_report;
use fairexit::model::{ExitTrace, ModelConfig, MultiExitNet};
use fairexit::prelude::{train, TrainConfig};
use proptest::prelude::*;

fn data() -> Split {
    generate_synthetic(&DatasetSpec {
        n_train: 300,
        n_val: 100,
        n_test: 300,
        ..DatasetSpec::default()
    })
    .unwrap()
}

/// Untrained net with output layers scaled up so confidences spread over
/// the whole `[1/N, 1]` range.
fn sharp_net(seed: u64, scale: f64) -> MultiExitNet {
    let mut net = MultiExitNet::init(ModelConfig {
        input_dim: 8,
        block_width: 16,
        head_hidden: 8,
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    for h in net.heads_mut() {
        h.out.w = h.out.w.scale(scale);
    }
    net
}

fn test_set() -> Vec<LabeledInstance> {
    data().test
}

#[test]
fn worked_example_exits_at_the_first_confident_classifier() {
    let trace = ExitTrace {
        logits: vec![vec![0.0, 0.0]; 4],
        probs: vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.3, 0.7], vec![0.4, 0.6]],
        confidences: vec![0.9, 0.5, 0.7, 0.6],
        features: vec![vec![]; 4],
    };
    let d = decide(&trace, &EarlyExitPolicy::earliest(0.85));
    assert_eq!((d.exit, d.prediction, d.confidence), (0, 0, 0.9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exit_index_never_decreases_with_theta(seed in 0u64..1000, scale in 1.0f64..20.0) {
        let net = sharp_net(seed, scale);
        let trace = net.trace_instances(&test_set()).unwrap();
        let mut prev: Option<Vec<usize>> = None;
        for theta in theta_grid(21) {
            let exits: Vec<usize> = decide_batch(&trace, &EarlyExitPolicy::earliest(theta))
                .unwrap()
                .iter()
                .map(|d| d.exit)
                .collect();
            if let Some(p) = &prev {
                prop_assert!(p.iter().zip(&exits).all(|(a, b)| a <= b));
            }
            prev = Some(exits);
        }
    }

    #[test]
    fn extreme_thresholds_pin_the_exit(seed in 0u64..1000, scale in 1.0f64..20.0) {
        let net = sharp_net(seed, scale);
        let data = test_set();
        let per_exit = per_exit_report(&net, &data, 2).unwrap();
        let never = evaluate_policy(&net, &data, 2, &EarlyExitPolicy::earliest(1.0 + 1e-9)).unwrap();
        prop_assert_eq!(&never.report, per_exit.last().unwrap());
        let always = evaluate_policy(&net, &data, 2, &EarlyExitPolicy::earliest(0.5)).unwrap();
        prop_assert_eq!(&always.report, &per_exit[0]);
        prop_assert_eq!(always.usage[0], 1.0);
    }

    #[test]
    fn usage_is_a_probability_vector(seed in 0u64..1000, theta in 0.0f64..1.0) {
        let net = sharp_net(seed, 8.0);
        let r = evaluate_policy(&net, &test_set(), 2, &EarlyExitPolicy::earliest(theta)).unwrap();
        prop_assert!(r.usage.iter().all(|&u| (0.0..=1.0).contains(&u)));
        prop_assert!((r.usage.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn fixed_and_final_modes_match_per_exit_reports() {
    let net = sharp_net(1, 5.0);
    let data = test_set();
    let per_exit = per_exit_report(&net, &data, 2).unwrap();
    for (k, want) in per_exit.iter().enumerate() {
        let r = evaluate_policy(&net, &data, 2, &EarlyExitPolicy::fixed_exit(k)).unwrap();
        assert_eq!(&r.report, want);
    }
    let last = evaluate_policy(&net, &data, 2, &EarlyExitPolicy::final_only()).unwrap();
    assert_eq!(&last.report, per_exit.last().unwrap());
    assert!(evaluate_policy(&net, &data, 2, &EarlyExitPolicy::fixed_exit(4)).is_err());
}

#[test]
fn sweep_rows_are_sorted_deterministic_and_anchored() {
    let net = sharp_net(2, 5.0);
    let data = test_set();
    let rows = sweep_theta(&net, &data, 2, &[1.0, 0.85, 0.0, 0.85]).unwrap();
    let thetas: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    assert_eq!(thetas, vec![0.0, 0.85, 0.85, 1.0]);
    assert_eq!(rows[1], rows[2]);
    let per_exit = per_exit_report(&net, &data, 2).unwrap();
    assert_eq!(rows[0].eo, per_exit[0].eo);
    assert_eq!(rows[0].accuracy, per_exit[0].accuracy);
    assert!(sweep_theta(&net, &data, 2, &[]).is_err());
    assert!(sweep_theta(&net, &data, 2, &[1.5]).is_err());
}

#[test]
fn early_exit_eo_lies_within_the_per_exit_range_after_training() {
    let split = generate_synthetic(&DatasetSpec::default()).unwrap();
    let model = ModelConfig {
        input_dim: split.input_dim(),
        ..ModelConfig::default()
    };
    let net = train(MultiExitNet::init(model).unwrap(), &split, &TrainConfig::default()).unwrap().net;
    let per_exit = per_exit_report(&net, &split.test, 2).unwrap();
    let trace = net.trace_instances(&split.test).unwrap();
    let ee = evaluate_trace(&trace, &split.test, 2, 2, &EarlyExitPolicy::default()).unwrap();
    let lo = per_exit.iter().map(|r| r.eo).fold(f64::INFINITY, f64::min);
    let hi = per_exit.iter().map(|r| r.eo).fold(f64::NEG_INFINITY, f64::max);
    assert!(lo <= ee.report.eo && ee.report.eo <= hi, "{} outside [{lo}, {hi}]", ee.report.eo);
}
