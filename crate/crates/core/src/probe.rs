//! Linear models fitted on frozen embeddings.
//!
//! Phase classification uses multinomial logistic regression with an L2
//! penalty on standardized features; phase progression uses closed-form ridge
//! regression.

use nalgebra::DMatrix;

use crate::error::{ensure, Result, TccError};
use crate::tensor::{gemm, softmax_into, Tensor};

pub const DEFAULT_L2: f64 = 1e-4;
pub const DEFAULT_RIDGE: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-6;
const MAX_STEPS: usize = 10_000;

/// Per-dimension standardization using training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let inv_std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                // constant columns are centered but left unscaled
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Multinomial logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub scaler: Standardizer,
    /// `d × C`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub steps: usize,
    pub grad_norm: f64,
}

struct Objective<'a> {
    x: &'a Tensor,
    labels: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Objective<'_> {
    /// Loss and gradient at `theta = [W (d×C) row-major | b (C)]`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (n, d, c) = (self.x.rows(), self.x.cols(), self.classes);
        let (w, b) = theta.split_at(d * c);
        let mut logits = vec![0.0; n * c];
        gemm(self.x.data(), n, d, false, w, d, c, false, &mut logits, false);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &mut logits[i * c..(i + 1) * c];
            row.iter_mut().zip(b).for_each(|(l, bb)| *l += bb);
            let p = &mut probs[i * c..(i + 1) * c];
            softmax_into(row, p);
            loss -= p[self.labels[i]].max(1e-300).ln();
            p[self.labels[i]] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        probs.iter_mut().for_each(|p| *p *= inv_n);
        let (gw, gb) = grad.split_at_mut(d * c);
        gemm(self.x.data(), n, d, true, &probs, n, c, false, gw, false);
        for (g, wi) in gw.iter_mut().zip(w) {
            *g += self.l2 * wi;
        }
        gb.iter_mut().for_each(|g| *g = 0.0);
        for row in probs.chunks(c) {
            for (g, p) in gb.iter_mut().zip(row) {
                *g += p;
            }
        }
        let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() * 0.5 * self.l2;
        loss * inv_n + reg
    }
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1] / n` by power iteration.
fn gram_spectral_radius(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 1.0;
    for _ in 0..100 {
        let mut xv = vec![0.0; n];
        for (i, out) in xv.iter_mut().enumerate() {
            *out = x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
        }
        let mut w = vec![0.0; d + 1];
        for (i, s) in xv.iter().enumerate() {
            for (acc, a) in w.iter_mut().zip(x.row(i)) {
                *acc += a * s;
            }
            w[d] += s;
        }
        w.iter_mut().for_each(|a| *a /= n as f64);
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        lambda = norm;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Fit multinomial logistic regression with an L2 penalty on the weights.
///
/// Features are standardized with the training statistics. Optimization is
/// accelerated gradient descent with restarts, stopping once the gradient
/// norm drops below 1e-6 or after 10 000 steps. Starting from zero weights
/// makes the result a deterministic function of the data.
pub fn fit_linear_classifier(x: &Tensor, labels: &[usize], l2: f64) -> Result<LinearClassifier> {
    ensure!(
        x.shape().len() == 2 && x.rows() == labels.len(),
        Shape,
        "{} labels for feature matrix {:?}",
        labels.len(),
        x.shape()
    );
    ensure!(l2 >= 0.0, Contract, "l2 must be >= 0");
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(TccError::Degenerate(format!(
            "classifier needs at least 2 classes, labels contain {distinct}"
        )));
    }
    ensure!(
        x.rows() >= distinct,
        Contract,
        "{} samples for {} classes",
        x.rows(),
        distinct
    );

    let scaler = Standardizer::fit(x);
    let xs = scaler.apply(x);
    let d = xs.cols();
    let obj = Objective {
        x: &xs,
        labels,
        classes,
        l2,
    };
    let lipschitz = 0.5 * gram_spectral_radius(&xs) + l2;
    let step = 1.0 / lipschitz;

    let dim = d * classes + classes;
    let mut theta = vec![0.0; dim];
    let mut prev = theta.clone();
    let mut look = theta.clone();
    let mut grad = vec![0.0; dim];
    let mut momentum = 1.0f64;
    let mut steps = 0;
    let mut grad_norm = f64::INFINITY;
    let mut last_loss = f64::INFINITY;
    while steps < MAX_STEPS {
        obj.eval(&look, &mut grad);
        prev.copy_from_slice(&theta);
        for ((t, l), g) in theta.iter_mut().zip(&look).zip(&grad) {
            *t = l - step * g;
        }
        steps += 1;
        let loss = obj.eval(&theta, &mut grad);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < GRAD_TOL {
            break;
        }
        if loss > last_loss {
            // restart momentum
            momentum = 1.0;
            look.copy_from_slice(&theta);
        } else {
            let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next;
            for ((l, t), p) in look.iter_mut().zip(&theta).zip(&prev) {
                *l = t + beta * (t - p);
            }
            momentum = next;
        }
        last_loss = loss;
    }
    let (w, b) = theta.split_at(d * classes);
    Ok(LinearClassifier {
        scaler,
        weight: Tensor::matrix(d, classes, w.to_vec())?,
        bias: b.to_vec(),
        steps,
        grad_norm,
    })
}

impl LinearClassifier {
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let xs = self.scaler.apply(x);
        let (n, d, c) = (xs.rows(), xs.cols(), self.bias.len());
        let mut logits = vec![0.0; n * c];
        gemm(
            xs.data(),
            n,
            d,
            false,
            self.weight.data(),
            d,
            c,
            false,
            &mut logits,
            false,
        );
        logits
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] + self.bias[k] > row[best] + self.bias[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Fraction of rows of `x` classified as their label.
pub fn classify_accuracy(model: &LinearClassifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    ensure!(
        x.rows() == labels.len() && !labels.is_empty(),
        Shape,
        "accuracy needs one label per row"
    );
    let pred = model.predict(x);
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Affine least-squares model with a ridge penalty on the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    /// `d × E`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn fit_linear_regressor(x: &Tensor, targets: &Tensor, ridge: f64) -> Result<LinearRegressor> {
    ensure!(
        x.shape().len() == 2 && targets.shape().len() == 2 && x.rows() == targets.rows(),
        Shape,
        "features {:?} and targets {:?} disagree",
        x.shape(),
        targets.shape()
    );
    ensure!(x.rows() >= 1, Contract, "regression needs samples");
    ensure!(ridge >= 0.0, Contract, "ridge must be >= 0");
    let (n, d, e) = (x.rows(), x.cols(), targets.cols());
    let xm = DMatrix::from_row_slice(n, d, x.data());
    let ym = DMatrix::from_row_slice(n, e, targets.data());
    let x_mean = xm.row_mean();
    let y_mean = ym.row_mean();
    let mut xc = xm.clone();
    let mut yc = ym.clone();
    for mut r in xc.row_iter_mut() {
        r -= &x_mean;
    }
    for mut r in yc.row_iter_mut() {
        r -= &y_mean;
    }
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * &yc;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| TccError::Degenerate(format!("ridge solve failed: {e}")))?,
    };
    let b = y_mean - x_mean * &w;
    let mut wdata = Vec::with_capacity(d * e);
    for i in 0..d {
        for j in 0..e {
            wdata.push(w[(i, j)]);
        }
    }
    Ok(LinearRegressor {
        weight: Tensor::matrix(d, e, wdata)?,
        bias: (0..e).map(|j| b[j]).collect(),
    })
}

impl LinearRegressor {
    pub fn predict(&self, x: &Tensor) -> Tensor {
        let (n, d, e) = (x.rows(), x.cols(), self.bias.len());
        let mut out = vec![0.0; n * e];
        gemm(x.data(), n, d, false, self.weight.data(), d, e, false, &mut out, false);
        for row in out.chunks_mut(e) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Tensor::matrix(n, e, out).expect("shape from inputs")
    }
}

/// Mean R² over target columns.
pub fn mean_r_squared(model: &LinearRegressor, x: &Tensor, targets: &Tensor) -> Result<f64> {
    let pred = model.predict(x);
    let e = targets.cols();
    let mut total = 0.0;
    for j in 0..e {
        let y: Vec<f64> = (0..targets.rows()).map(|i| targets.get(i, j)).collect();
        let yh: Vec<f64> = (0..pred.rows()).map(|i| pred.get(i, j)).collect();
        total += crate::metrics::r_squared(&y, &yh)?;
    }
    Ok(total / e as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn separable_toy_set() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [0.2, 0.1], [0.1, 0.3], [3.0, 3.0], [3.2, 2.9], [2.8, 3.1]]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let m = fit_linear_classifier(&x, &y, DEFAULT_L2).unwrap();
        assert_eq!(classify_accuracy(&m, &x, &y).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            fit_linear_classifier(&x, &[1, 1, 1], DEFAULT_L2),
            Err(TccError::Degenerate(_))
        ));
    }

    #[test]
    fn deterministic_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(60, 3, &mut rng);
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a = fit_linear_classifier(&x, &y, DEFAULT_L2).unwrap();
        let b = fit_linear_classifier(&x, &y, DEFAULT_L2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn converges_on_overlapping_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(200, 4, &mut rng);
        let y: Vec<usize> = (0..200)
            .map(|i| usize::from(x.get(i, 0) + 0.5 * x.get(i, 1) > 0.3 * (i % 3) as f64))
            .collect();
        let m = fit_linear_classifier(&x, &y, 1e-2).unwrap();
        assert!(
            m.grad_norm < GRAD_TOL,
            "grad norm {} after {} steps",
            m.grad_norm,
            m.steps
        );
    }

    #[test]
    fn random_labels_near_chance() {
        // held-out accuracy of labels independent of X, averaged over draws
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = gaussian(400, 5, &mut rng);
            let y: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
            let m = fit_linear_classifier(&x, &y, DEFAULT_L2).unwrap();
            let xt = gaussian(400, 5, &mut rng);
            let yt: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
            accs.push(classify_accuracy(&m, &xt, &yt).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn exact_linear_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(50, 3, &mut rng);
        let t: Vec<f64> = (0..50)
            .flat_map(|i| {
                let r = x.row(i);
                [1.0 + 2.0 * r[0] - r[2], -0.5 * r[1]]
            })
            .collect();
        let t = Tensor::matrix(50, 2, t).unwrap();
        let m = fit_linear_regressor(&x, &t, DEFAULT_RIDGE).unwrap();
        assert!((mean_r_squared(&m, &x, &t).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noise_targets_near_zero_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(2000, 3, &mut rng);
        let t = Tensor::matrix(
            2000,
            1,
            (0..2000).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .unwrap();
        let m = fit_linear_regressor(&x, &t, DEFAULT_RIDGE).unwrap();
        let xt = gaussian(2000, 3, &mut rng);
        let tt = Tensor::matrix(
            2000,
            1,
            (0..2000).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .unwrap();
        let r2 = mean_r_squared(&m, &xt, &tt).unwrap();
        assert!(r2.abs() < 0.02, "r2 {r2}");
    }

    #[test]
    fn ridge_matches_unregularized_when_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(100, 4, &mut rng);
        let t = gaussian(100, 2, &mut rng);
        let a = fit_linear_regressor(&x, &t, 1e-6).unwrap();
        let b = fit_linear_regressor(&x, &t, 0.0).unwrap();
        for (p, q) in a.weight.data().iter().zip(b.weight.data()) {
            assert!((p - q).abs() < 1e-6);
        }
        for (p, q) in a.bias.iter().zip(&b.bias) {
            assert!((p - q).abs() < 1e-6);
        }
    }
}
