//! Differentiable cycle-consistency losses.
//!
//! For a frame `u_i` of `U`, its soft nearest neighbor in `V` is
//! `ṽ = Σ_j α_j v_j` with `α = softmax_j(−‖u_i − v_j‖²)`. Cycling back,
//! the logits `−‖ṽ − u_k‖²` over frames of `U` are scored either as an
//! `N`-way classification of `i` or, for the regression variants, through
//! the mean `μ` and variance `σ²` of `β = softmax_k(−‖ṽ − u_k‖²)`:
//!
//! ```text
//! regression:      (i − μ)² / σ² + λ · log σ
//! regression_mse:  (i − μ)²
//! ```
//!
//! All functions record onto a [`Tape`] and are differentiable with respect to
//! both embedding sets. The per-row functions evaluate every requested query
//! frame in one batched pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::embedder::{EmbedderParams, LayerVars};
use crate::error::{ensure, Result, TccError};
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TccVariant {
    Classification,
    Regression,
    RegressionMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TccConfig {
    pub variant: TccVariant,
    /// Weight of the `log σ` term.
    pub lambda: f64,
    /// Lower clamp on `σ²`.
    pub variance_floor: f64,
    pub frames_per_seq: usize,
    /// Distances are divided by this before every softmax.
    pub temperature: f64,
}

impl Default for TccConfig {
    fn default() -> Self {
        Self {
            variant: TccVariant::Regression,
            lambda: 0.001,
            variance_floor: 1e-6,
            frames_per_seq: 20,
            temperature: 1.0,
        }
    }
}

impl TccConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0, Contract, "lambda must be >= 0, got {}", self.lambda);
        ensure!(
            self.variance_floor > 0.0,
            Contract,
            "variance_floor must be > 0, got {}",
            self.variance_floor
        );
        ensure!(self.frames_per_seq >= 1, Contract, "frames_per_seq must be >= 1");
        ensure!(self.temperature > 0.0, Contract, "temperature must be > 0");
        Ok(())
    }
}

/// Soft nearest neighbor of `u` (a `d`-vector or `1×d` row) among the rows of `v`.
///
/// Returns `(ṽ, α)` with `ṽ` shaped like `u`.
pub fn soft_nearest_neighbor<'t>(u: &Var<'t>, v: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = u.shape();
    let d = *shape
        .last()
        .ok_or_else(|| TccError::Shape("query must not be a scalar".into()))?;
    let m = v.shape().first().copied().unwrap_or(0);
    ensure!(m >= 1, Shape, "soft nearest neighbor over an empty set");
    let q = u.reshape(&[1, d])?;
    let alpha = q.pairwise_sq_dist(v)?.neg().softmax()?;
    let v_tilde = alpha.matmul(v)?.reshape(&shape)?;
    Ok((v_tilde, alpha.reshape(&[m])?))
}

fn check_rows(n: usize, rows: &[usize]) -> Result<()> {
    if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
        return Err(TccError::Contract(format!("frame index {bad} out of range 0..{n}")));
    }
    Ok(())
}

/// Logits `−‖ṽ_r − u_k‖² / τ` for each query row `r`: shape `|rows| × N`.
fn cycle_back_logits<'t>(u: &Var<'t>, v: &Var<'t>, rows: &[usize], temperature: f64) -> Result<Var<'t>> {
    let n = u.shape()[0];
    check_rows(n, rows)?;
    ensure!(v.shape()[0] >= 1, Shape, "cycle through an empty sequence");
    let q = u.select_rows(rows)?;
    let alpha = q.pairwise_sq_dist(v)?.scale(-1.0 / temperature).softmax()?;
    let v_tilde = alpha.matmul(v)?;
    Ok(v_tilde.pairwise_sq_dist(u)?.scale(-1.0 / temperature))
}

/// Per-row cycle-back classification loss `−log ŷ_i`.
pub fn classification_rows<'t>(u: &Var<'t>, v: &Var<'t>, rows: &[usize], temperature: f64) -> Result<Var<'t>> {
    let n = u.shape()[0];
    let logp = cycle_back_logits(u, v, rows, temperature)?.log_softmax()?;
    let picks: Vec<usize> = rows.iter().enumerate().map(|(r, &i)| r * n + i).collect();
    Ok(logp.gather(&picks)?.neg())
}

/// Per-row `(loss, μ, σ²)` of cycle-back regression. With `mse` the loss is
/// `(i − μ)²` alone. The returned `σ²` is already clamped to `variance_floor`.
pub fn regression_rows<'t>(
    u: &Var<'t>,
    v: &Var<'t>,
    rows: &[usize],
    lambda: f64,
    variance_floor: f64,
    temperature: f64,
    mse: bool,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let tape = u.tape();
    let n = u.shape()[0];
    let beta = cycle_back_logits(u, v, rows, temperature)?.softmax()?;
    let r = rows.len();
    let positions: Vec<f64> = (0..r).flat_map(|_| (0..n).map(|k| k as f64)).collect();
    let k = tape.constant(Tensor::matrix(r, n, positions)?);
    let mu = beta.mul(&k)?.sum_rows();
    let centered = k.sub_col(&mu)?;
    let var = beta
        .mul(&centered.mul(&centered)?)?
        .sum_rows()
        .clamp_min(variance_floor);
    let target = tape.constant(Tensor::vector(rows.iter().map(|&i| i as f64).collect()));
    let err = target.sub(&mu)?;
    let sq = err.mul(&err)?;
    let loss = if mse {
        sq
    } else {
        sq.div(&var)?.add(&var.ln().scale(0.5 * lambda))?
    };
    Ok((loss, mu, var))
}

/// Cycle-back classification loss for query frame `i`.
pub fn cycle_back_classification<'t>(u: &Var<'t>, v: &Var<'t>, i: usize) -> Result<Var<'t>> {
    Ok(classification_rows(u, v, &[i], 1.0)?.sum())
}

/// Cycle-back regression `(loss, μ, σ²)` for query frame `i`.
pub fn cycle_back_regression<'t>(
    u: &Var<'t>,
    v: &Var<'t>,
    i: usize,
    lambda: f64,
    variance_floor: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let (l, m, s) = regression_rows(u, v, &[i], lambda, variance_floor, 1.0, false)?;
    Ok((l.sum(), m.sum(), s.sum()))
}

/// `(i − μ)²` for query frame `i`.
pub fn cycle_back_regression_mse<'t>(u: &Var<'t>, v: &Var<'t>, i: usize) -> Result<Var<'t>> {
    let (l, _, _) = regression_rows(u, v, &[i], 0.0, 1e-6, 1.0, true)?;
    Ok(l.sum())
}

/// Per-row loss of the configured variant for every frame of `u`.
pub fn cycle_losses<'t>(u: &Var<'t>, v: &Var<'t>, config: &TccConfig) -> Result<Var<'t>> {
    let rows: Vec<usize> = (0..u.shape()[0]).collect();
    match config.variant {
        TccVariant::Classification => classification_rows(u, v, &rows, config.temperature),
        TccVariant::Regression | TccVariant::RegressionMse => Ok(regression_rows(
            u,
            v,
            &rows,
            config.lambda,
            config.variance_floor,
            config.temperature,
            config.variant == TccVariant::RegressionMse,
        )?
        .0),
    }
}

/// Sorted frame indices: `count` drawn uniformly without replacement, or all
/// frames when the sequence is shorter.
pub fn sample_frames(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut idx = sample(rng, len, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Summed loss of one ordered pair and its gradients with respect to both
/// embedding sets, evaluated on a private tape.
fn pair_terms(u: &Tensor, v: &Tensor, config: &TccConfig) -> Result<(f64, Tensor, Tensor)> {
    let tape = Tape::new();
    let uv = tape.leaf(u.clone());
    let vv = tape.leaf(v.clone());
    let total = cycle_losses(&uv, &vv, config)?.sum();
    let g = tape.backward(&total)?;
    Ok((total.item(), g.wrt(&uv), g.wrt(&vv)))
}

/// Mean cycle-consistency loss over all ordered pairs of `batch`.
///
/// Each sequence contributes `frames_per_seq` sampled frames (drawn once per
/// call from `seed`); for every ordered pair `(A, B)` with `A ≠ B` every
/// sampled frame of `A` is cycled through `B`. The mean is over all
/// `(pair, frame)` terms. Pair terms are evaluated in parallel and reduced in
/// pair order.
pub fn tcc_batch_loss<'t>(
    tape: &'t Tape,
    vars: &LayerVars<'t>,
    params: &EmbedderParams,
    batch: &[&FeatureSequence],
    config: &TccConfig,
    seed: u64,
) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Vec<usize>> = batch
        .iter()
        .map(|s| sample_frames(s.len(), config.frames_per_seq, &mut rng))
        .collect();
    tcc_batch_loss_with_frames(tape, vars, params, batch, &frames, config)
}

/// [`tcc_batch_loss`] with explicit per-sequence frame selections.
pub fn tcc_batch_loss_with_frames<'t>(
    tape: &'t Tape,
    vars: &LayerVars<'t>,
    params: &EmbedderParams,
    batch: &[&FeatureSequence],
    frames: &[Vec<usize>],
    config: &TccConfig,
) -> Result<Var<'t>> {
    config.validate()?;
    ensure!(
        batch.len() >= 2,
        Contract,
        "cycle-consistency needs at least 2 sequences, got {}",
        batch.len()
    );
    ensure!(
        frames.len() == batch.len(),
        Contract,
        "one frame selection per sequence"
    );
    let emb = batch
        .iter()
        .zip(frames)
        .map(|(s, idx)| params.embed_frames_on(vars, tape, s, idx))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<Tensor> = emb.iter().map(Var::value).collect();
    embedding_pairs_loss(tape, &emb, &values, config)
}

/// Mean loss over all ordered pairs of already-embedded sequences.
pub fn embedding_pairs_loss<'t>(
    tape: &'t Tape,
    emb: &[Var<'t>],
    values: &[Tensor],
    config: &TccConfig,
) -> Result<Var<'t>> {
    let n = emb.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let terms = par::map(&pairs, |&(a, b)| pair_terms(&values[a], &values[b], config))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let count: usize = pairs.iter().map(|&(a, _)| values[a].rows()).sum();
    let scale = 1.0 / count as f64;
    let mut grads: Vec<Tensor> = values.iter().map(|v| Tensor::zeros(v.shape())).collect();
    let mut total = 0.0;
    for (&(a, b), (sum, ga, gb)) in pairs.iter().zip(&terms) {
        total += sum;
        grads[a].add_assign(ga);
        grads[b].add_assign(gb);
    }
    let parts = emb.iter().zip(grads).map(|(e, g)| (*e, g.map(|x| x * scale))).collect();
    tape.external_scalar(total * scale, parts)
}

/// Value of [`tcc_batch_loss`] without keeping gradients.
pub fn tcc_batch_loss_value(
    params: &EmbedderParams,
    batch: &[&FeatureSequence],
    config: &TccConfig,
    seed: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    Ok(tcc_batch_loss(&tape, &vars, params, batch, config, seed)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{init_params, EmbedderConfig};
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn split_joint(p: Var<'_>, n: usize, m: usize, d: usize) -> Result<(Var<'_>, Var<'_>)> {
        let u = p.gather(&(0..n * d).collect::<Vec<_>>())?.reshape(&[n, d])?;
        let v = p.gather(&(n * d..(n + m) * d).collect::<Vec<_>>())?.reshape(&[m, d])?;
        Ok((u, v))
    }

    fn rows(data: &[&[f64]]) -> Tensor {
        Tensor::from_rows(data).unwrap()
    }

    fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn snn_single_frame() {
        let tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![0.3, -0.2]));
        let v = tape.leaf(rows(&[&[1.0, 2.0]]));
        let (vt, a) = soft_nearest_neighbor(&u, &v).unwrap();
        assert_eq!(a.value().data(), &[1.0]);
        assert_eq!(vt.value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn snn_two_frames() {
        let tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let v = tape.leaf(rows(&[&[0.0, 0.0], &[2.0, 0.0]]));
        let (vt, a) = soft_nearest_neighbor(&u, &v).unwrap();
        // e^0 / (e^0 + e^-4)
        let a0 = 1.0 / (1.0 + (-4.0f64).exp());
        let a = a.value();
        assert!((a.data()[0] - a0).abs() < 1e-15);
        assert!((a.data()[0] - 0.9820).abs() < 5e-5);
        assert!((a.data()[1] - 0.0180).abs() < 5e-5);
        assert!((vt.value().data()[0] - 2.0 * (1.0 - a0)).abs() < 1e-15);
        assert!((vt.value().data()[0] - 0.0360).abs() < 5e-5);
        assert_eq!(vt.value().data()[1], 0.0);
    }

    #[test]
    fn snn_equidistant() {
        let tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![0.0]));
        let v = tape.leaf(rows(&[&[-1.5], &[1.5], &[4.0]]));
        let a = soft_nearest_neighbor(&u, &v).unwrap().1.value();
        assert_eq!(a.data()[0], a.data()[1]);
    }

    #[test]
    fn snn_empty_is_shape_error() {
        let tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![0.0]));
        let v = tape.leaf(Tensor::zeros(&[0, 1]));
        assert!(matches!(soft_nearest_neighbor(&u, &v), Err(TccError::Shape(_))));
    }

    #[test]
    fn classification_examples() {
        let tape = Tape::new();
        let u = tape.leaf(rows(&[&[0.7, 0.1]]));
        let v = tape.leaf(rows(&[&[0.0, 0.0], &[3.0, 1.0]]));
        assert_eq!(cycle_back_classification(&u, &v, 0).unwrap().item(), 0.0);

        let u = tape.leaf(rows(&[&[0.0], &[10.0]]));
        let loss = cycle_back_classification(&u, &u, 0).unwrap().item();
        assert!((0.0..1e-40).contains(&loss), "{loss}");
        assert!(matches!(
            cycle_back_classification(&u, &u, 2),
            Err(TccError::Contract(_))
        ));
    }

    #[test]
    fn regression_symmetric_example() {
        let tape = Tape::new();
        let u = tape.leaf(rows(&[&[0.0], &[1.0], &[2.0]]));
        let (loss, mu, var) = cycle_back_regression(&u, &u, 1, 0.001, 1e-6).unwrap();
        assert!((mu.item() - 1.0).abs() < 1e-15);

        // scalar oracle: α over {0,1,2} from u=1, ṽ = Σ α_j j, β from ṽ
        let sm = |d: [f64; 3]| {
            let e: Vec<f64> = d.iter().map(|x| (-x).exp()).collect();
            let z: f64 = e.iter().sum();
            [e[0] / z, e[1] / z, e[2] / z]
        };
        let alpha = sm([1.0, 0.0, 1.0]);
        let vt = alpha[1] + 2.0 * alpha[2];
        let beta = sm([vt * vt, (vt - 1.0).powi(2), (vt - 2.0).powi(2)]);
        let m = beta[1] + 2.0 * beta[2];
        let s2 = beta[0] * m * m + beta[1] * (1.0 - m).powi(2) + beta[2] * (2.0 - m).powi(2);
        let expected = (1.0 - m).powi(2) / s2 + 0.001 * 0.5 * s2.ln();
        assert!((beta[0] - 0.2119).abs() < 5e-5 && (beta[1] - 0.5761).abs() < 5e-5);
        assert!((var.item() - s2).abs() < 1e-12);
        assert!((var.item() - 0.4238).abs() < 1e-4, "var = {}", var.item());
        assert!((loss.item() - expected).abs() < 1e-12);
        assert!((loss.item() + 0.000429).abs() < 5e-7);
    }

    #[test]
    fn regression_one_hot_hits_floor() {
        let tape = Tape::new();
        let u = tape.leaf(rows(&[&[0.0], &[100.0], &[200.0]]));
        let (loss, mu, var) = cycle_back_regression(&u, &u, 1, 0.001, 1e-6).unwrap();
        assert_eq!(var.item(), 1e-6);
        assert_eq!(mu.item(), 1.0);
        assert!(loss.item().is_finite());
        let g = tape.backward(&loss).unwrap();
        assert!(g.wrt(&u).all_finite());
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let u = tape.leaf(rows(&[&[0.0], &[1.0], &[2.0]]));
        assert!(cycle_back_regression_mse(&u, &u, 1).unwrap().item().abs() < 1e-28);

        // i = 0: μ from β at the soft neighbor of u_0
        let sm = |d: [f64; 3]| {
            let e: Vec<f64> = d.iter().map(|x| (-x).exp()).collect();
            let z: f64 = e.iter().sum();
            [e[0] / z, e[1] / z, e[2] / z]
        };
        let alpha = sm([0.0, 1.0, 4.0]);
        let vt = alpha[1] + 2.0 * alpha[2];
        let beta = sm([vt * vt, (vt - 1.0).powi(2), (vt - 2.0).powi(2)]);
        let m = beta[1] + 2.0 * beta[2];
        let loss = cycle_back_regression_mse(&u, &u, 0).unwrap().item();
        assert!((loss - m * m).abs() < 1e-12);
        // hand evaluation: α = (0.7214, 0.2654, 0.0132), ṽ = 0.2918,
        // β = (0.5820, 0.3838, 0.0343)
        assert!((m - 0.4523).abs() < 1e-4, "mu = {m}");

        let peaked = tape.leaf(rows(&[&[0.0], &[50.0], &[100.0]]));
        assert!(cycle_back_regression_mse(&peaked, &peaked, 2).unwrap().item() < 1e-12);
    }

    #[test]
    fn batched_rows_match_single_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ut, vt) = (random(5, 3, &mut rng), random(4, 3, &mut rng));
        let tape = Tape::new();
        let (u, v) = (tape.leaf(ut), tape.leaf(vt));
        let cfg = TccConfig::default();
        let all = cycle_losses(&u, &v, &cfg).unwrap().value();
        for i in 0..5 {
            let single = cycle_back_regression(&u, &v, i, cfg.lambda, cfg.variance_floor)
                .unwrap()
                .0
                .item();
            assert!((all.data()[i] - single).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..6 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let d = rng.random_range(1..=4);
            let ut = random(n, d, &mut rng);
            let vt = random(m, d, &mut rng);
            let i = rng.random_range(0..n);
            let joint = Tensor::vector([ut.data(), vt.data()].concat());
            for k in 0..3 {
                let rep = grad_check(
                    |_, p| {
                        let (u, v) = split_joint(p, n, m, d)?;
                        match k {
                            0 => cycle_back_classification(&u, &v, i),
                            1 => Ok(cycle_back_regression(&u, &v, i, 0.001, 1e-6)?.0),
                            _ => cycle_back_regression_mse(&u, &v, i),
                        }
                    },
                    &joint,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(rep.passed, "trial {trial} loss {k}: {rep:?}");
            }
        }
    }

    #[test]
    fn sample_frames_sorted_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_frames(100, 20, &mut rng);
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_frames(7, 20, &mut rng), (0..7).collect::<Vec<_>>());
    }

    fn toy_batch(count: usize, seed: u64) -> Vec<FeatureSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|s| {
                let n = rng.random_range(6..10);
                FeatureSequence::new(format!("s{s}"), random(n, 3, &mut rng), 20.0, None).unwrap()
            })
            .collect()
    }

    fn toy_params() -> EmbedderParams {
        let cfg = EmbedderConfig {
            input_dim: 3,
            context_frames: 2,
            context_stride: 2,
            hidden_sizes: vec![6],
            embedding_dim: 4,
        };
        init_params(&cfg, 1).unwrap()
    }

    #[test]
    fn batch_loss_is_seeded_and_needs_two() {
        let batch = toy_batch(3, 0);
        let refs: Vec<&FeatureSequence> = batch.iter().collect();
        let p = toy_params();
        let cfg = TccConfig {
            frames_per_seq: 5,
            ..Default::default()
        };
        let a = tcc_batch_loss_value(&p, &refs, &cfg, 9).unwrap();
        let b = tcc_batch_loss_value(&p, &refs, &cfg, 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(matches!(
            tcc_batch_loss_value(&p, &refs[..1], &cfg, 9),
            Err(TccError::Contract(_))
        ));
    }

    #[test]
    fn batch_loss_counts_ordered_pairs() {
        let batch = toy_batch(4, 1);
        let refs: Vec<&FeatureSequence> = batch.iter().collect();
        let p = toy_params();
        let cfg = TccConfig {
            frames_per_seq: 5,
            ..Default::default()
        };
        let frames: Vec<Vec<usize>> = vec![(0..5).collect(); 4];
        let tape = Tape::new();
        let vars = p.register(&tape);
        let loss = tcc_batch_loss_with_frames(&tape, &vars, &p, &refs, &frames, &cfg)
            .unwrap()
            .item();

        let embs: Vec<Tensor> = refs.iter().map(|s| p.embed_frames(s, &frames[0]).unwrap()).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..4 {
            for b in 0..4 {
                if a == b {
                    continue;
                }
                pairs += 1;
                let t = Tape::new();
                let u = t.constant(embs[a].clone());
                let v = t.constant(embs[b].clone());
                total += cycle_losses(&u, &v, &cfg).unwrap().sum().item();
            }
        }
        assert_eq!(pairs, 12);
        assert!((loss - total / (12.0 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_matches_direct_loss() {
        let seq = toy_batch(1, 4).remove(0);
        let twin = FeatureSequence {
            id: "twin".into(),
            ..seq.clone()
        };
        let p = toy_params();
        let cfg = TccConfig {
            frames_per_seq: 100,
            ..Default::default()
        };
        let loss = tcc_batch_loss_value(&p, &[&seq, &twin], &cfg, 0).unwrap();
        let e = p.embed_sequence(&seq).unwrap();
        let t = Tape::new();
        let u = t.constant(e);
        let direct = cycle_losses(&u, &u, &cfg).unwrap().mean().item();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_gradient_matches_single_tape() {
        let batch = toy_batch(3, 2);
        let refs: Vec<&FeatureSequence> = batch.iter().collect();
        let p = toy_params();
        let cfg = TccConfig {
            frames_per_seq: 4,
            ..Default::default()
        };
        let frames: Vec<Vec<usize>> = vec![vec![0, 2, 3, 5]; 3];

        let tape = Tape::new();
        let vars = p.register(&tape);
        let loss = tcc_batch_loss_with_frames(&tape, &vars, &p, &refs, &frames, &cfg).unwrap();
        let g1 = vars.flat_grad(&tape.backward(&loss).unwrap());

        let tape = Tape::new();
        let vars = p.register(&tape);
        let emb: Vec<Var<'_>> = refs
            .iter()
            .map(|s| p.embed_frames_on(&vars, &tape, s, &frames[0]).unwrap())
            .collect();
        let mut terms = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    terms.push(cycle_losses(&emb[a], &emb[b], &cfg).unwrap().sum());
                }
            }
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = total.add(t).unwrap();
        }
        let mean = total.scale(1.0 / 24.0);
        assert!((mean.item() - loss.item()).abs() < 1e-12);
        let g2 = vars.flat_grad(&tape.backward(&mean).unwrap());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
