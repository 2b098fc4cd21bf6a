//! Checks tape gradients of a small network's weighted cross-entropy
//! against central finite differences.

use fairexit::numkit::{finite_diff_check, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> fairexit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 16, 5);
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let point = [random(&mut rng, 5, 8), random(&mut rng, 1, 8), random(&mut rng, 8, 3)];
    let check = finite_diff_check(
        |tape, v| {
            let xv = tape.constant(x.clone());
            let h = tape.affine(xv, v[0], v[1])?;
            let h = tape.relu(h);
            let logits = tape.matmul(h, v[2])?;
            tape.cross_entropy(logits, &labels)
        },
        &point,
        1e-6,
    )?;
    println!(
        "max relative error {:.2e}, closest relu input to the kink {:.2e}",
        check.max_rel_error, check.min_relu_margin
    );
    Ok(())
}
