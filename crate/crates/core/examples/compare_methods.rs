//! Runs each fairness method on one seed and prints a comparison table.

use fairexit::cli::{run_seed, ExperimentConfig, PolicyConfig};
use fairexit::prelude::*;

fn main() -> fairexit::Result<()> {
    let methods = [
        (FairnessMethod::None, 0.0),
        (FairnessMethod::Hsic { bandwidth: Bandwidth::Median }, 5.0),
        (FairnessMethod::MmdDistill { bandwidth: Bandwidth::Median }, 3.0),
        (FairnessMethod::Adversarial { hidden: 16, reversal_strength: 1.0 }, 1.0),
    ];
    println!("{:<14} {:>7} {:>7} {:>7} {:>7}", "method", "acc", "eo", "ee acc", "ee eo");
    for (method, lambda) in methods {
        let cfg = ExperimentConfig {
            dataset: Some(DatasetSpec::default()),
            train: TrainConfig {
                method,
                weights: LossWeights::for_exits(4, lambda),
                ..TrainConfig::default()
            },
            policy: PolicyConfig {
                tune_on_validation: true,
                ..PolicyConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let r = run_seed(&cfg, 0, "example")?.record;
        let last = r.per_exit.last().expect("at least one exit");
        println!(
            "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.method, last.accuracy, last.eo, r.early_exit.accuracy, r.early_exit.eo
        );
    }
    Ok(())
}
