//! Sweeps the exit threshold of a multi-exit network and marks the θ that
//! the validation split would select.

use fairexit::inference::{select_theta, theta_grid, write_frontier_csv};
use fairexit::prelude::*;

fn main() -> fairexit::Result<()> {
    let split = generate_synthetic(&DatasetSpec::default())?;
    let net = MultiExitNet::init(ModelConfig {
        input_dim: split.input_dim(),
        ..ModelConfig::default()
    })?;
    let net = train(net, &split, &TrainConfig { epochs: 10, ..TrainConfig::default() })?.net;
    let grid = theta_grid(21);
    let val = sweep_theta(&net, &split.val, split.n_groups, &grid)?;
    let chosen = select_theta(&val).map(|i| val[i].theta);
    let test = sweep_theta(&net, &split.test, split.n_groups, &grid)?;
    write_frontier_csv(std::io::stdout().lock(), &test, None)?;
    if let Some(theta) = chosen {
        println!("validation picks theta = {theta}");
    }
    Ok(())
}
