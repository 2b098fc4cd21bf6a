//! Trains a four-exit network with the HSIC penalty and prints every exit
//! alongside the early-exit operating point.

use fairexit::metrics::exit_label;
use fairexit::prelude::*;

fn main() -> fairexit::Result<()> {
    let split = generate_synthetic(&DatasetSpec::default())?;
    let net = MultiExitNet::init(ModelConfig {
        input_dim: split.input_dim(),
        ..ModelConfig::default()
    })?;
    let config = TrainConfig {
        method: FairnessMethod::Hsic { bandwidth: Bandwidth::Median },
        weights: LossWeights::for_exits(4, 5.0),
        ..TrainConfig::default()
    };
    let out = train(net, &split, &config)?;
    println!("kept epoch {}", out.selected_epoch + 1);
    for (k, r) in per_exit_report(&out.net, &split.test, split.n_groups)?.iter().enumerate() {
        println!("{:>6}  acc {:6.2}  eo {:6.2}", exit_label(k, 4), r.accuracy, r.eo);
    }
    let ee = evaluate_policy(&out.net, &split.test, split.n_groups, &EarlyExitPolicy::earliest(DEFAULT_THETA))?;
    println!("    EE  acc {:6.2}  eo {:6.2}  usage {:.2?}", ee.report.accuracy, ee.report.eo, ee.usage);
    Ok(())
}
