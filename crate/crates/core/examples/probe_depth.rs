//! Trains a conventional single-exit network, then fits a fresh head on
//! each frozen block. Deeper blocks are usually both more accurate and less
//! fair.

use fairexit::cli::format_probe_table;
use fairexit::prelude::*;
use fairexit::trainer::Selection;

fn main() -> fairexit::Result<()> {
    let split = generate_synthetic(&DatasetSpec::default())?;
    let net = MultiExitNet::init(ModelConfig {
        input_dim: split.input_dim(),
        internal_heads: false,
        ..ModelConfig::default()
    })?;
    let config = TrainConfig {
        weights: LossWeights::for_exits(1, 0.0),
        selection: Selection::LastEpoch,
        ..TrainConfig::default()
    };
    let trained = train(net, &split, &config)?.net;
    let outcome = probe_frozen_backbone(&trained, &split, &ProbeConfig::default())?;
    print!("{}", format_probe_table(&outcome));
    Ok(())
}
