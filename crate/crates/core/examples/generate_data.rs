//! Generates the synthetic biased dataset and reports how strongly the
//! sensitive attribute predicts the target in each split.
//!
//! cargo run --example generate_data -- /tmp/fairexit-data

use fairexit::cli::cmd_generate_data;
use fairexit::dataset::{DatasetSpec, LabeledInstance};

fn agreement(data: &[LabeledInstance]) -> f64 {
    data.iter().filter(|i| i.target == i.sensitive).count() as f64 / data.len() as f64
}

fn main() -> fairexit::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    let spec = DatasetSpec::default();
    let split = cmd_generate_data(&spec, &out)?;
    println!("bias_corr {} leak_strength {}", spec.bias_corr, spec.leak_strength);
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        println!("{name:>5}: {:>5} rows, P(y = a) = {:.3}", part.len(), agreement(part));
    }
    println!("wrote {out}/{{train,val,test}}.csv");
    Ok(())
}
