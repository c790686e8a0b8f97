//! Central finite-difference checking of tape gradients, plus a suite that
//! runs the check over random instances of every training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{combined_loss, npairs_loss, sal_loss_on, SalHead, Triplet};
use crate::data::FeatureSequence;
use crate::embedder::{init_params, EmbedderConfig, EmbedderParams, LayerVars};
use crate::error::{ensure, Result};
use crate::losses::{classification_rows, regression_rows};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Components whose analytic and numeric magnitudes both fall below this are
/// not compared.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component, if any component was compared.
    pub worst_index: Option<usize>,
    pub compared: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compare the reverse-mode gradient of `f` at `params` against central
/// differences with the given `step`.
///
/// `f` receives a fresh tape and the parameters as a leaf and must return a
/// scalar on that tape.
pub fn grad_check<F>(f: F, params: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    ensure!(
        step > 0.0,
        Contract,
        "finite-difference step must be positive, got {step}"
    );

    let tape = Tape::new();
    let p = tape.leaf(params.clone());
    let loss = f(&tape, p)?;
    let analytic = tape.backward(&loss)?.wrt(&p);

    let eval = |x: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let p = tape.leaf(x.clone());
        Ok(f(&tape, p)?.item())
    };

    let mut worst = 0.0f64;
    let mut worst_index = None;
    let mut compared = 0;
    let mut probe = params.clone();
    for k in 0..params.len() {
        let orig = params.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;

        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[k];
        let scale = a.abs().max(numeric.abs());
        if scale <= MAGNITUDE_FLOOR {
            continue;
        }
        compared += 1;
        let rel = (a - numeric).abs() / scale;
        // NaN errors must win so a broken gradient is never reported as passing
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(rel <= worst) {
            worst = rel;
            worst_index = Some(k);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        compared,
        tol,
        passed: worst < tol,
    })
}

/// Losses covered by [`loss_suite`].
pub const SUITE_LOSSES: [&str; 6] = [
    "cycle_back_classification",
    "cycle_back_regression",
    "cycle_back_regression_mse",
    "npairs",
    "sal",
    "combined",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub loss: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `U` (`n × d`) and `V` (`m × d`) stored back to back in one flat leaf.
fn split_uv(p: Var<'_>, n: usize, m: usize, d: usize) -> Result<(Var<'_>, Var<'_>)> {
    let u = p.gather(&(0..n * d).collect::<Vec<_>>())?.reshape(&[n, d])?;
    let v = p.gather(&(n * d..(n + m) * d).collect::<Vec<_>>())?.reshape(&[m, d])?;
    Ok((u, v))
}

fn check_one(loss: &str, rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<GradCheckReport> {
    let n = rng.random_range(2..=8);
    let m = rng.random_range(2..=8);
    let d = rng.random_range(1..=6);
    let uv = Tensor::vector(uniform(rng, (n + m) * d));
    let all: Vec<usize> = (0..n).collect();
    match loss {
        "cycle_back_classification" => grad_check(
            |_, p| {
                let (u, v) = split_uv(p, n, m, d)?;
                Ok(classification_rows(&u, &v, &all, 1.0)?.sum())
            },
            &uv,
            step,
            tol,
        ),
        "cycle_back_regression" | "cycle_back_regression_mse" => {
            let mse = loss.ends_with("mse");
            grad_check(
                |_, p| {
                    let (u, v) = split_uv(p, n, m, d)?;
                    Ok(regression_rows(&u, &v, &all, 1e-3, 1e-6, 1.0, mse)?.0.sum())
                },
                &uv,
                step,
                tol,
            )
        }
        "npairs" => {
            let ap = Tensor::vector(uniform(rng, 2 * n * d));
            grad_check(
                |_, p| {
                    let (a, b) = split_uv(p, n, n, d)?;
                    npairs_loss(&a, &b)
                },
                &ap,
                step,
                tol,
            )
        }
        "combined" => {
            let k = n.min(m);
            let w = [0.25, 0.5, 0.75][rng.random_range(0..3)];
            grad_check(
                |_, p| {
                    let (u, v) = split_uv(p, n, m, d)?;
                    let rows: Vec<usize> = (0..k).collect();
                    let tcc = regression_rows(&u, &v, &all, 1e-3, 1e-6, 1.0, false)?.0.mean();
                    let tcn = npairs_loss(&u.select_rows(&rows)?, &v.select_rows(&rows)?)?;
                    combined_loss(&tcc, &tcn, w)
                },
                &uv,
                step,
                tol,
            )
        }
        "sal" => {
            let cfg = EmbedderConfig {
                input_dim: d,
                context_frames: rng.random_range(1..=2),
                context_stride: rng.random_range(1..=3),
                hidden_sizes: vec![rng.random_range(2..=6)],
                embedding_dim: rng.random_range(1..=6),
            };
            let hidden = [rng.random_range(2..=6), rng.random_range(2..=6)];
            let len = rng.random_range(3..=8);
            let frames = Tensor::matrix(len, d, uniform(rng, len * d))?;
            let seq = FeatureSequence::new("g", frames, 20.0, None)?;
            let triplets: Vec<Triplet> = (0..4)
                .map(|_| {
                    let mut f = rand::seq::index::sample(rng, len, 3).into_vec();
                    let shuffled = rng.random_bool(0.75);
                    if shuffled {
                        f.swap(0, 1);
                    } else {
                        f.sort_unstable();
                    }
                    Triplet {
                        frames: [f[0], f[1], f[2]],
                        shuffled,
                    }
                })
                .collect();
            let base = init_params(&cfg, rng.random())?;
            let head = SalHead::init(cfg.embedding_dim, &hidden, rng.random());
            // nonzero biases keep pre-activations off the ReLU kink
            let theta: Vec<f64> = [base.flat(), head.flat()]
                .concat()
                .into_iter()
                .map(|x| x + rng.random_range(-0.3..0.3))
                .collect();
            let hdims = SalHead::layer_dims(cfg.embedding_dim, &hidden);
            let split = cfg.param_count();
            grad_check(
                |tape, p| {
                    let params = EmbedderParams::from_flat(&cfg, &p.value().data()[..split])?;
                    let (enc, off) = LayerVars::slice(p, 0, &cfg.layer_dims())?;
                    let (hv, _) = LayerVars::slice(p, off, &hdims)?;
                    sal_loss_on(tape, &enc, &params, &hv, &seq, &triplets)
                },
                &Tensor::vector(theta),
                step,
                tol,
            )
        }
        other => Err(crate::TccError::Contract(format!("unknown loss {other:?}"))),
    }
}

/// Check every loss in [`SUITE_LOSSES`] on `instances` random problems with
/// `N, M ≤ 8` and `d ≤ 6`.
pub fn loss_suite(instances: usize, seed: u64, step: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    SUITE_LOSSES
        .iter()
        .enumerate()
        .map(|(k, &loss)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let mut worst = 0.0f64;
            let mut passed = true;
            for _ in 0..instances {
                let rep = check_one(loss, &mut rng, step, tol)?;
                worst = worst.max(rep.max_rel_error);
                passed &= rep.passed;
            }
            Ok(SuiteEntry {
                loss,
                instances,
                max_rel_error: worst,
                passed,
            })
        })
        .collect()
}
