use super::matrix::Matrix;
use crate::error::{Error, Result};

pub(crate) fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if bandwidth > 0.0 && bandwidth.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "kernel bandwidth must be positive and finite, got {bandwidth}"
        )))
    }
}

/// Pairwise squared distances between rows; exactly symmetric with a zero
/// diagonal.
pub fn sq_dists(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

pub fn sq_dists_cross(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::dim(
            "sq_dists_cross",
            format!("{} columns against {}", x.cols(), y.cols()),
        ));
    }
    let mut out = Matrix::zeros(x.rows(), y.rows());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
        }
    }
    Ok(out)
}

/// `K[i,j] = exp(-‖xᵢ − xⱼ‖² / (2·bandwidth²))`.
pub fn gaussian_kernel_matrix(x: &Matrix, bandwidth: f64) -> Result<Matrix> {
    check_bandwidth(bandwidth)?;
    let c = -1.0 / (2.0 * bandwidth * bandwidth);
    Ok(sq_dists(x).map(|d| (c * d).exp()))
}

pub fn gaussian_cross_kernel(x: &Matrix, y: &Matrix, bandwidth: f64) -> Result<Matrix> {
    check_bandwidth(bandwidth)?;
    let c = -1.0 / (2.0 * bandwidth * bandwidth);
    Ok(sq_dists_cross(x, y)?.map(|d| (c * d).exp()))
}

/// Median of the pairwise Euclidean distances between distinct rows of the
/// stacked inputs. Falls back to 1.0 when the median is zero or undefined.
pub fn median_bandwidth(parts: &[&Matrix]) -> f64 {
    let rows: Vec<&[f64]> = parts
        .iter()
        .flat_map(|m| (0..m.rows()).map(move |r| m.row(r)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_all_ones() {
        let x = Matrix::from_rows(&[[0.3, -1.0], [0.3, -1.0], [0.3, -1.0]]).unwrap();
        let k = gaussian_kernel_matrix(&x, 0.7).unwrap();
        assert_eq!(k, Matrix::filled(3, 3, 1.0));
    }

    #[test]
    fn two_points_by_hand() {
        let d: f64 = 1.5;
        let sigma: f64 = 0.8;
        let x = Matrix::from_rows(&[[0.0, 0.0], [d, 0.0]]).unwrap();
        let k = gaussian_kernel_matrix(&x, sigma).unwrap();
        let expected = (-d * d / (2.0 * sigma * sigma)).exp();
        assert!((k.get(0, 1) - expected).abs() < 1e-15);
        assert_eq!(k.get(0, 1), k.get(1, 0));
        assert_eq!(k.get(0, 0), 1.0);
        assert_eq!(k.get(1, 1), 1.0);
    }

    #[test]
    fn rejects_bad_bandwidth() {
        let x = Matrix::zeros(2, 2);
        for bw in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                gaussian_kernel_matrix(&x, bw),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn median_of_simple_set() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        // distances 1, 3, 2
        assert_eq!(median_bandwidth(&[&x]), 2.0);
        let c = Matrix::filled(4, 2, 5.0);
        assert_eq!(median_bandwidth(&[&c]), 1.0);
    }
}
