//! Alignment and representation quality measures.

use crate::data::PhaseAnnotation;
use crate::error::{ensure, Result, TccError};
use crate::tensor::{sq_dist, Tensor};

/// Index of the row of `v` closest to `q`; ties go to the lowest index.
pub fn nearest_row(q: &[f64], v: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..v.rows() {
        let d = sq_dist(q, v.row(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Nearest row of `v` for every row of `u`.
pub fn nearest_rows(u: &Tensor, v: &Tensor) -> Vec<usize> {
    (0..u.rows()).map(|i| nearest_row(u.row(i), v)).collect()
}

fn check_pair(u: &Tensor, v: &Tensor) -> Result<()> {
    ensure!(
        u.shape().len() == 2 && v.shape().len() == 2 && u.cols() == v.cols(),
        Shape,
        "embedding shapes {:?} and {:?} are incompatible",
        u.shape(),
        v.shape()
    );
    ensure!(u.rows() >= 1 && v.rows() >= 1, Contract, "embeddings must be nonempty");
    Ok(())
}

/// Fraction of frames of `u` whose nearest neighbor in `v` maps back to them.
pub fn cycle_consistency_fraction(u: &Tensor, v: &Tensor) -> Result<f64> {
    check_pair(u, v)?;
    let fwd = nearest_rows(u, v);
    let back = nearest_rows(v, u);
    let hits = fwd.iter().enumerate().filter(|&(i, &j)| back[j] == i).count();
    Ok(hits as f64 / u.rows() as f64)
}

/// Kendall's tau of nearest-neighbor retrieval from `u` into `v`.
///
/// Every unordered frame pair `(i, j)` of `u` retrieves `(p, q)` in `v`; the
/// pair is concordant when `(i − j)(p − q) > 0`, and discordant otherwise
/// (including `p == q`).
pub fn kendalls_tau(u: &Tensor, v: &Tensor) -> Result<f64> {
    check_pair(u, v)?;
    let n = u.rows();
    ensure!(n >= 2, Contract, "Kendall's tau needs at least 2 query frames, got {n}");
    let nn = nearest_rows(u, v);
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            if nn[j] > nn[i] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}

/// `target[i][e] = (i − key_events[e]) / N`.
pub fn phase_progression_targets(annotation: &PhaseAnnotation, n: usize) -> Result<Tensor> {
    ensure!(n >= 1, Contract, "sequence length must be positive");
    if let Some(&bad) = annotation.key_events.iter().find(|&&e| e >= n) {
        return Err(TccError::Contract(format!(
            "key event {bad} beyond sequence length {n}"
        )));
    }
    let e = annotation.key_events.len();
    let mut data = Vec::with_capacity(n * e);
    for i in 0..n {
        for &k in &annotation.key_events {
            data.push((i as f64 - k as f64) / n as f64);
        }
    }
    Tensor::matrix(n, e, data)
}

/// Coefficient of determination `1 − Σ(y − ŷ)² / Σ(y − ȳ)²`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    ensure!(
        y.len() == y_hat.len(),
        Shape,
        "r_squared: {} targets vs {} predictions",
        y.len(),
        y_hat.len()
    );
    ensure!(y.len() >= 2, Contract, "r_squared needs at least 2 values");
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(TccError::Undefined("r_squared of constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn cycle_fraction_examples() {
        let u = col(&[0.0, 1.0, 3.0]);
        assert_eq!(cycle_consistency_fraction(&u, &u).unwrap(), 1.0);
        let u = col(&[0.0, 5.0]);
        let v = col(&[1.0]);
        assert_eq!(cycle_consistency_fraction(&u, &v).unwrap(), 0.5);
    }

    #[test]
    fn tau_examples() {
        let u = col(&[0.0, 1.0, 2.5, 4.0]);
        assert_eq!(kendalls_tau(&u, &u).unwrap(), 1.0);
        let rev = col(&[4.0, 2.5, 1.0, 0.0]);
        assert_eq!(kendalls_tau(&u, &rev).unwrap(), -1.0);
        assert!(kendalls_tau(&col(&[1.0]), &u).is_err());
    }

    #[test]
    fn repeated_retrieval_is_discordant() {
        let u = col(&[0.0, 0.1]);
        let v = col(&[0.0, 9.0]);
        assert_eq!(kendalls_tau(&u, &v).unwrap(), -1.0);
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&y, &[3.0, 2.0, 1.0]).unwrap(), -3.0);
        assert!(matches!(
            r_squared(&[1.0, 1.0], &[1.0, 2.0]),
            Err(TccError::Undefined(_))
        ));
    }

    #[test]
    fn progression_targets() {
        let ann = PhaseAnnotation {
            key_events: vec![0, 10, 19],
            phase_labels: (0..20).map(|i| usize::from(i >= 10)).collect(),
        };
        let t = phase_progression_targets(&ann, 20).unwrap();
        assert_eq!(t.get(5, 1), -0.25);
        assert_eq!(t.get(10, 1), 0.0);
        for i in 1..20 {
            for e in 0..3 {
                assert!((t.get(i, e) - t.get(i - 1, e) - 1.0 / 20.0).abs() < 1e-15);
            }
        }
        assert!(phase_progression_targets(&ann, 15).is_err());
    }
}
