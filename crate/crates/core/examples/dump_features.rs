//! Writes per-exit features of a briefly trained network as TSV.
//!
//! cargo run --example dump_features > features.tsv

use fairexit::cli::cmd_dump_features;
use fairexit::prelude::*;

fn main() -> fairexit::Result<()> {
    let split = generate_synthetic(&DatasetSpec {
        n_train: 700,
        n_val: 100,
        n_test: 200,
        ..DatasetSpec::default()
    })?;
    let net = MultiExitNet::init(ModelConfig {
        input_dim: split.input_dim(),
        ..ModelConfig::default()
    })?;
    let net = train(net, &split, &TrainConfig { epochs: 5, ..TrainConfig::default() })?.net;
    cmd_dump_features(&net, &split.test, std::io::stdout().lock())
}
