//! Frame correspondences between embedded sequences and the tools built on
//! them: similarity matrices, anomaly scores and label transfer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, TccError};
use crate::metrics::nearest_row;
use crate::tensor::{pairwise_sq_dist, sq_dist, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Nn,
    Dtw,
}

impl std::str::FromStr for AlignMode {
    type Err = TccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(AlignMode::Nn),
            "dtw" => Ok(AlignMode::Dtw),
            _ => Err(TccError::Contract(format!("unknown alignment mode {s:?}"))),
        }
    }
}

/// Frame pairs `(i, j)` from the first sequence to the second, with the
/// Euclidean embedding distance of each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub mode: AlignMode,
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl AlignmentResult {
    /// Sum of squared pair distances; the quantity DTW minimizes.
    pub fn sq_cost(&self) -> f64 {
        self.distances.iter().map(|d| d * d).sum()
    }

    /// One `"i j distance"` line per pair.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (&(i, j), d) in self.pairs.iter().zip(&self.distances) {
            writeln!(s, "{i} {j} {d}").unwrap();
        }
        s
    }
}

fn check_nonempty(u: &Tensor, v: &Tensor) -> Result<()> {
    ensure!(
        u.shape().len() == 2 && v.shape().len() == 2 && u.cols() == v.cols(),
        Shape,
        "embedding shapes {:?} and {:?} are incompatible",
        u.shape(),
        v.shape()
    );
    ensure!(
        u.rows() >= 1 && v.rows() >= 1,
        Contract,
        "alignment of an empty sequence"
    );
    Ok(())
}

/// Nearest neighbor in `v` for every frame of `u`.
pub fn nn_align(u: &Tensor, v: &Tensor) -> Result<AlignmentResult> {
    check_nonempty(u, v)?;
    let mut pairs = Vec::with_capacity(u.rows());
    let mut distances = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let j = nearest_row(u.row(i), v);
        pairs.push((i, j));
        distances.push(sq_dist(u.row(i), v.row(j)).sqrt());
    }
    Ok(AlignmentResult {
        mode: AlignMode::Nn,
        pairs,
        distances,
    })
}

/// Dynamic time warping over squared embedding distances.
///
/// `band`, when given, restricts cells to `|i·(M−1)/(N−1) − j| ≤ band`
/// (a Sakoe-Chiba band along the rescaled diagonal). During backtracking ties
/// prefer the diagonal step, then a step in `i`, then a step in `j`.
pub fn dtw_align(u: &Tensor, v: &Tensor, band: Option<usize>) -> Result<AlignmentResult> {
    check_nonempty(u, v)?;
    let (n, m) = (u.rows(), v.rows());
    let cost = pairwise_sq_dist(u, v)?;
    let inside = |i: usize, j: usize| match band {
        None => true,
        Some(w) => {
            let center = if n > 1 {
                i as f64 * (m - 1) as f64 / (n - 1) as f64
            } else {
                0.0
            };
            (center - j as f64).abs() <= w as f64 + 1e-9
        }
    };
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            if !inside(i, j) {
                continue;
            }
            let c = cost.get(i, j);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = best.min(acc[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    best = best.min(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    best = best.min(acc[i * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = prev + c;
        }
    }
    ensure!(
        acc[n * m - 1].is_finite(),
        Contract,
        "band {band:?} leaves no path from (0, 0) to ({}, {})",
        n - 1,
        m - 1
    );

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            acc[(i - 1) * m + j - 1]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    let distances = path.iter().map(|&(i, j)| cost.get(i, j).sqrt()).collect();
    Ok(AlignmentResult {
        mode: AlignMode::Dtw,
        pairs: path,
        distances,
    })
}

/// `exp(−‖u_i − v_j‖²)` for every frame pair.
pub fn similarity_matrix(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_nonempty(u, v)?;
    Ok(pairwise_sq_dist(u, v)?.map(|d| (-d).exp()))
}

/// Header `"N M"` followed by `N` rows of `M` space-separated values.
pub fn similarity_to_text(sim: &Tensor) -> String {
    let mut s = format!("{} {}\n", sim.rows(), sim.cols());
    for i in 0..sim.rows() {
        let row: Vec<String> = sim.row(i).iter().map(|x| x.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Parse the text written by [`similarity_to_text`].
pub fn similarity_from_text(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TccError::Contract("empty similarity file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| TccError::Contract(format!("bad header {header:?}")))
        })
        .collect::<Result<_>>()?;
    ensure!(dims.len() == 2, Contract, "header must be \"N M\", got {header:?}");
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for line in lines.take(dims[0]) {
        for t in line.split_whitespace() {
            data.push(
                t.parse::<f64>()
                    .map_err(|_| TccError::Contract(format!("bad value {t:?}")))?,
            );
        }
    }
    Tensor::matrix(dims[0], dims[1], data)
}

/// Distance from each query frame to the closest frame of any reference.
pub fn anomaly_score(query: &Tensor, refs: &[&Tensor]) -> Result<Vec<f64>> {
    ensure!(
        !refs.is_empty(),
        Contract,
        "anomaly scoring needs at least one reference"
    );
    for r in refs {
        check_nonempty(query, r)?;
    }
    Ok((0..query.rows())
        .map(|i| {
            let q = query.row(i);
            refs.iter()
                .flat_map(|r| (0..r.rows()).map(move |j| sq_dist(q, r.row(j))))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Carry per-frame values of the source (second) sequence over to the target
/// (first) sequence along `alignment`.
///
/// When a target frame is matched more than once, the lowest-distance match
/// wins (the earliest on ties).
pub fn transfer_labels<T: Clone>(
    alignment: &AlignmentResult,
    source_labels: &[T],
    target_len: usize,
) -> Result<Vec<T>> {
    let mut best: Vec<Option<(f64, usize)>> = vec![None; target_len];
    for (&(i, j), &d) in alignment.pairs.iter().zip(&alignment.distances) {
        ensure!(
            i < target_len,
            Contract,
            "alignment refers to target frame {i} of {target_len}"
        );
        ensure!(
            j < source_labels.len(),
            Contract,
            "alignment refers to source frame {j} of {}",
            source_labels.len()
        );
        if best[i].is_none_or(|(bd, _)| d < bd) {
            best[i] = Some((d, j));
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(i, b)| {
            b.map(|(_, j)| source_labels[j].clone())
                .ok_or_else(|| TccError::Contract(format!("target frame {i} is not covered by the alignment")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn nn_examples() {
        let u = col(&[0.0, 1.0, 2.0]);
        let a = nn_align(&u, &u).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let a = nn_align(&u, &col(&[7.0])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn dtw_identity_is_diagonal() {
        let u = col(&[0.0, 1.0, 2.0, 5.0]);
        let a = dtw_align(&u, &u, None).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(a.sq_cost(), 0.0);
    }

    #[test]
    fn dtw_stretches_over_duplicates() {
        let u = col(&[0.0, 1.0, 2.0]);
        let v = col(&[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let a = dtw_align(&u, &v, None).unwrap();
        assert_eq!(a.sq_cost(), 0.0);
        let js: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        assert_eq!(js, vec![0, 1, 2, 3, 4, 5]);
        // labels of u carried onto v by aligning v against u
        let back = dtw_align(&v, &u, None).unwrap();
        let labels = transfer_labels(&back, &["a", "b", "c"], 6).unwrap();
        assert_eq!(labels, vec!["a", "a", "b", "b", "c", "c"]);
    }

    #[test]
    fn dtw_band_limits_path() {
        let u = col(&[0.0, 1.0, 2.0, 3.0]);
        let v = col(&[3.0, 2.0, 1.0, 0.0]);
        let free = dtw_align(&u, &v, None).unwrap();
        let banded = dtw_align(&u, &v, Some(0)).unwrap();
        assert_eq!(banded.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(free.sq_cost() <= banded.sq_cost());
    }

    #[test]
    fn similarity_values() {
        let u = col(&[0.0, 1.0]);
        let s = similarity_matrix(&u, &u).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(1, 1), 1.0);
        let far = similarity_matrix(&col(&[0.0]), &col(&[1e3])).unwrap();
        assert_eq!(far.get(0, 0), 0.0);
        let back = similarity_from_text(&similarity_to_text(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn anomaly_examples() {
        let q = Tensor::from_rows(&[[3.0, 0.0], [1.0, 1.0]]).unwrap();
        let r = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let r2 = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let s = anomaly_score(&q, &[&r, &r2]).unwrap();
        assert_eq!(s, vec![2.23606797749979, 0.0]);
        assert_eq!(anomaly_score(&q, &[&r]).unwrap()[0], 3.0);
        assert!(anomaly_score(&q, &[]).is_err());
    }

    #[test]
    fn transfer_identity_and_constant() {
        let u = col(&[0.0, 1.0, 2.0]);
        let a = nn_align(&u, &u).unwrap();
        assert_eq!(transfer_labels(&a, &[5, 6, 7], 3).unwrap(), vec![5, 6, 7]);
        let a = nn_align(&u, &col(&[0.5])).unwrap();
        assert_eq!(transfer_labels(&a, &[9], 3).unwrap(), vec![9, 9, 9]);
        assert!(transfer_labels(&a, &[9], 4).is_err());
    }
}
