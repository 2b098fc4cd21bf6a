//! Equalized odds and demographic parity on a small hand-made example.

use fairexit::metrics::{demographic_parity_gap, equalized_odds, EoVariant};

fn main() -> fairexit::Result<()> {
    // Group 1 has TPR 0.9 and FPR 0.3, group 0 has TPR 0.7 and FPR 0.1.
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut groups = Vec::new();
    for (group, target, pred, count) in [
        (1, 1, 1, 9),
        (1, 1, 0, 1),
        (1, 0, 1, 3),
        (1, 0, 0, 7),
        (0, 1, 1, 7),
        (0, 1, 0, 3),
        (0, 0, 1, 1),
        (0, 0, 0, 9),
    ] {
        for _ in 0..count {
            preds.push(pred);
            targets.push(target);
            groups.push(group);
        }
    }
    for variant in [EoVariant::Paper, EoVariant::SplitAbs] {
        println!("EO ({variant:?}) = {:.1}", equalized_odds(&preds, &targets, &groups, 2, 2, variant)?);
    }
    println!("DP gap = {:.1}", demographic_parity_gap(&preds, &groups, 1)?);
    Ok(())
}
