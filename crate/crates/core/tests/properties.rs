use proptest::prelude::*;

use tcc::align::{dtw_align, nn_align};
use tcc::gradcheck::grad_check;
use tcc::losses::{cycle_losses, TccConfig, TccVariant};
use tcc::metrics::{kendalls_tau, r_squared};
use tcc::tape::{Tape, Var};
use tcc::tensor::{pairwise_sq_dist, softmax, sq_dist};
use tcc::Tensor;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-2.0..2.0f64, n * cols).prop_map(move |d| Tensor::matrix(n, cols, d).unwrap())
    })
}

/// Values on a half-integer grid so translations and sign flips stay exact.
fn grid_matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-6i32..=6, n * cols)
            .prop_map(move |d| Tensor::matrix(n, cols, d.into_iter().map(|x| x as f64 * 0.5).collect()).unwrap())
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=4usize).prop_flat_map(move |d| (matrix(2..=max, d), matrix(2..=max, d)))
}

fn grid_pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=3usize).prop_flat_map(move |d| (grid_matrix(1..=max, d), grid_matrix(1..=max, d)))
}

/// Reverse the coordinate order, flip the sign of the first coordinate and
/// shift every coordinate by `shift`.
fn isometry(t: &Tensor, shift: f64) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|i| {
            let mut r: Vec<f64> = t.row(i).iter().rev().cloned().collect();
            r[0] = -r[0];
            r.iter().map(|x| x + shift).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn diagonal_cost(u: &Tensor, v: &Tensor) -> f64 {
    (0..u.rows()).fold(0.0, |acc, i| acc + sq_dist(u.row(i), v.row(i)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(x in matrix(1..=6, 5), c in -50.0..50.0f64) {
        let a = softmax(&x).unwrap();
        let b = softmax(&x.map(|v| v + c)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        for i in 0..a.rows() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_distances_are_symmetric((u, v) in pair(8)) {
        let ab = pairwise_sq_dist(&u, &v).unwrap();
        let ba = pairwise_sq_dist(&v, &u).unwrap();
        prop_assert_eq!(ab, ba.transpose());
        let aa = pairwise_sq_dist(&u, &u).unwrap();
        for i in 0..u.rows() {
            prop_assert!(aa.get(i, i).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_translation_invariant(
        (u, v) in pair(8),
        shift in -3.0..3.0f64,
        variant in prop_oneof![
            Just(TccVariant::Classification),
            Just(TccVariant::Regression),
            Just(TccVariant::RegressionMse),
        ],
    ) {
        let cfg = TccConfig { variant, ..TccConfig::default() };
        let eval = |u: &Tensor, v: &Tensor| {
            let tape = Tape::new();
            cycle_losses(&tape.leaf(u.clone()), &tape.leaf(v.clone()), &cfg).unwrap().item()
        };
        let base = eval(&u, &v);
        let moved = eval(&u.map(|x| x + shift), &v.map(|x| x + shift));
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0), "{} vs {}", base, moved);
    }

    #[test]
    fn alignment_is_isometry_invariant((u, v) in grid_pair(8), shift in -4i32..=4) {
        let s = shift as f64 * 0.5;
        let (iu, iv) = (isometry(&u, s), isometry(&v, s));
        prop_assert_eq!(nn_align(&u, &v).unwrap().pairs, nn_align(&iu, &iv).unwrap().pairs);
        prop_assert_eq!(dtw_align(&u, &v, None).unwrap().pairs, dtw_align(&iu, &iv, None).unwrap().pairs);
        prop_assert_eq!(kendalls_tau(&u, &v).ok(), kendalls_tau(&iu, &iv).ok());
    }

    #[test]
    fn dtw_path_is_bounded_and_beats_the_diagonal((u, v) in grid_pair(10)) {
        let (n, m) = (u.rows(), v.rows());
        let r = dtw_align(&u, &v, None).unwrap();
        prop_assert!(r.pairs.len() >= n.max(m) && r.pairs.len() < n + m);
        if n == m {
            let cost = r.pairs.iter().fold(0.0, |acc, &(i, j)| acc + sq_dist(u.row(i), v.row(j)));
            prop_assert!(cost <= diagonal_cost(&u, &v));
        }
    }

    #[test]
    fn r_squared_is_affine_invariant(
        y in prop::collection::vec(-5.0..5.0f64, 3..20),
        noise in prop::collection::vec(-1.0..1.0f64, 20),
        a in prop_oneof![-3.0..-0.5f64, 0.5..3.0f64],
        b in -10.0..10.0f64,
    ) {
        let var = y.iter().map(|x| x * x).sum::<f64>() - y.iter().sum::<f64>().powi(2) / y.len() as f64;
        prop_assume!(var > 1e-3);
        let y_hat: Vec<f64> = y.iter().zip(&noise).map(|(p, e)| p + e).collect();
        let t = |s: &[f64]| s.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let r0 = r_squared(&y, &y_hat).unwrap();
        let r1 = r_squared(&t(&y), &t(&y_hat)).unwrap();
        prop_assert!((r0 - r1).abs() < 1e-9 * r0.abs().max(1.0));
    }
}

type Op = for<'t> fn(&'t Tape, Var<'t>) -> tcc::Result<Var<'t>>;

fn primitive_ops() -> Vec<(&'static str, Op)> {
    vec![
        ("softmax", |_, x| Ok(x.softmax()?.mul(&x)?.sum())),
        ("log_softmax", |_, x| Ok(x.log_softmax()?.mul(&x)?.sum())),
        ("pairwise_sq_dist", |_, x| {
            Ok(x.pairwise_sq_dist(&x.scale(0.5).add_scalar(0.3))?.sum())
        }),
        ("matmul", |_, x| {
            Ok(x.matmul(&x.reshape(&[x.shape()[1], x.shape()[0]])?)?.exp().mean())
        }),
        ("exp_ln", |_, x| Ok(x.mul(&x)?.add_scalar(1.0).ln().exp().sum())),
        ("sum_rows_sub_col", |_, x| {
            let c = x.sum_rows();
            Ok(x.sub_col(&c)?.mul(&x)?.sum())
        }),
        ("div", |_, x| Ok(x.div(&x.mul(&x)?.add_scalar(1.0))?.sum())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_gradients_match_finite_differences(x in (1..=8usize, 1..=8usize).prop_flat_map(|(n, d)| matrix(n..=n, d))) {
        for (name, op) in primitive_ops() {
            let report = grad_check(op, &x, 1e-5, 1e-4).unwrap();
            prop_assert!(report.passed, "{}: {:?}", name, report);
        }
    }
}
