//! Two-sample discrepancy statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

fn check(a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.rows() == 0 || b.rows() == 0 || a.numel() == 0 || b.numel() == 0 {
        return Err(Error::invalid("two-sample statistic on an empty set"));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::ShapeMismatch {
            op: "two-sample statistic",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.row_len())
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Mean of `f(a_i, b_j)` over all pairs. Row sums run in parallel and are
/// combined sequentially, so the result does not depend on thread count.
fn pair_mean(a: &Tensor, b: &Tensor, f: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> f64 {
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            (0..b.rows()).map(|j| f(x, b.row(j))).sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / (a.rows() * b.rows()) as f64
}

/// Energy distance `2 E|A-B| - E|A-A'| - E|B-B'|`, V-statistic form.
///
/// The V-statistic is a squared distance between empirical characteristic
/// functions, so it is nonnegative and vanishes exactly for identical sets.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let ab = pair_mean(a, b, dist);
    let aa = pair_mean(a, a, dist);
    let bb = pair_mean(b, b, dist);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Median pairwise distance over the pooled sample (at most 2000 points).
pub fn median_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let pooled = Tensor::concat_rows(&[a.clone(), b.clone()])?;
    let n = pooled.rows().min(2000);
    let stride = pooled.rows() / n;
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push(dist(pooled.row(i * stride), pooled.row(j * stride)));
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2])
}

/// Biased squared MMD with an RBF kernel; bandwidth from the median
/// heuristic when `bandwidth` is `None`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    check(a, b)?;
    let h = match bandwidth {
        Some(h) => h,
        None => median_distance(a, b)?,
    };
    let gamma = 1.0 / (2.0 * h * h).max(1e-300);
    let k = move |x: &[f64], y: &[f64]| {
        let d = dist(x, y);
        (-gamma * d * d).exp()
    };
    Ok((pair_mean(a, a, k) + pair_mean(b, b, k) - 2.0 * pair_mean(a, b, k)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(mmd_rbf(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn two_point_masses() {
        let a = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let b = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(energy_distance(&a, &b).unwrap(), 6.0);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let a = Tensor::zeros(&[0, 2]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(energy_distance(&a, &b).unwrap_err().is_invalid_argument());
        assert!(energy_distance(&b, &Tensor::zeros(&[2, 3])).is_err());
    }
}
