use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::linalg::Matrix;

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Random matrix whose entries stay at least `gap` away from zero.
fn random_off_kink(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Matrix {
    random(rng, r, c).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

#[test]
fn linear_identity_input() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::identity(2));
    let w = t.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = t.param(Matrix::zeros(1, 2));
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));
}

#[test]
fn linear_zero_weight_broadcasts_bias() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[1.0, -3.0], &[0.5, 9.0], &[2.0, 2.0]]));
    let w = t.param(Matrix::zeros(2, 2));
    let b = t.param(Matrix::row_vector(&[5.0, 6.0]));
    let y = t.linear(x, w, b).unwrap();
    for i in 0..3 {
        assert_eq!(t.value(y).row(i), &[5.0, 6.0]);
    }
}

#[test]
fn linear_weight_gradient_is_column_sums_of_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, 3, 4);
    let w = random(&mut rng, 4, 2);
    let b = random(&mut rng, 1, 2);
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.linear(v[0], v[1], v[2])?;
        Ok(t.sum(y))
    };
    let grads = analytic_grads(&f, &[x.clone(), w.clone(), b.clone()]).unwrap();
    let col_sums = x.column_means().scale(3.0);
    for a in 0..4 {
        for k in 0..2 {
            assert_abs_diff_eq!(grads[1][(a, k)], col_sums[(0, a)], epsilon = 1e-12);
        }
    }
    let report = grad_check(f, &[x, w, b], 1e-4, 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn linear_shape_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::zeros(2, 3));
    let w = t.param(Matrix::zeros(2, 2));
    let b = t.param(Matrix::zeros(1, 2));
    assert!(matches!(t.linear(x, w, b), Err(Error::Shape { .. })));
    let w = t.param(Matrix::zeros(3, 2));
    let b = t.param(Matrix::zeros(1, 3));
    assert!(matches!(t.linear(x, w, b), Err(Error::Shape { .. })));
}

#[test]
fn relu_values_and_mask() {
    let mut t = Tape::new();
    let x = t.param(m(&[&[-1.0, 2.0]]));
    let y = t.relu(x);
    assert_eq!(t.value(y).as_slice(), &[0.0, 2.0]);

    let mut t = Tape::new();
    let x = t.param(m(&[&[-1.0, -0.5], &[-3.0, -2.0]]));
    let y = t.relu(x);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.value(y).as_slice().iter().all(|&v| v == 0.0));
    assert!(t.grad(x).as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_is_positive_indicator() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_off_kink(&mut rng, 4, 5, 1e-3);
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let y = t.relu(xv);
    let s = t.sum(y);
    t.backward(s).unwrap();
    let expected = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    assert_eq!(t.grad(xv), &expected);
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]);
        let y = t.exp(y);
        Ok(t.sum(y))
    };
    assert!(grad_check(f, &[x], 1e-4, 1e-4).unwrap().passed);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut t = Tape::new();
    let x = t.param(m(&[&[3.0, 3.0, 3.0]]));
    let g = t.param(Matrix::filled(1, 3, 1.0));
    let l = t.param(Matrix::zeros(1, 3));
    let y = t.layer_norm(x, g, l, 1e-5).unwrap();
    assert_eq!(t.value(y).as_slice(), &[0.0, 0.0, 0.0]);
}

#[test]
fn layer_norm_symmetric_standardization() {
    let mut t = Tape::new();
    let x = t.param(m(&[&[0.0, 2.0]]));
    let g = t.param(Matrix::filled(1, 2, 1.0));
    let l = t.param(Matrix::zeros(1, 2));
    let y = t.layer_norm(x, g, l, 1e-12).unwrap();
    assert_abs_diff_eq!(t.value(y)[(0, 0)], -1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(t.value(y)[(0, 1)], 1.0, epsilon = 1e-9);
}

#[test]
fn layer_norm_rejects_nonpositive_epsilon() {
    let mut t = Tape::new();
    let x = t.param(Matrix::zeros(1, 2));
    let g = t.param(Matrix::filled(1, 2, 1.0));
    let l = t.param(Matrix::zeros(1, 2));
    assert!(t.layer_norm(x, g, l, 0.0).is_err());
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let x = random(&mut rng, 4, 6);
        let g = random(&mut rng, 1, 6);
        let l = random(&mut rng, 1, 6);
        let w = random(&mut rng, 6, 1);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = t.constant(w.clone());
            let z = t.matmul(y, wv)?;
            let z = t.sigmoid(z);
            Ok(t.sum(z))
        };
        let report = grad_check(f, &[x, g, l], 1e-4, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn logsumexp_examples() {
    let mut t = Tape::new();
    let x = t.param(m(&[&[0.0, 0.0], &[1000.0, 1000.0], &[3.0, -1.0]]));
    let y = t.row_logsumexp(x);
    let v = t.value(y);
    assert_abs_diff_eq!(v[(0, 0)], std::f64::consts::LN_2, epsilon = 1e-15);
    assert_abs_diff_eq!(v[(1, 0)], 1000.0 + std::f64::consts::LN_2, epsilon = 1e-12);
    assert!(v[(2, 0)] - 3.0 >= 0.0 && v[(2, 0)] - 3.0 <= std::f64::consts::LN_2);

    let s = t.sum(y);
    t.backward(s).unwrap();
    let g = t.grad(x);
    assert_abs_diff_eq!(g[(0, 0)], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(g[(1, 1)], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(g[(2, 0)] + g[(2, 1)], 1.0, epsilon = 1e-15);
}

#[test]
fn mean_subset_examples() {
    let mut t = Tape::new();
    let x = t.param(Matrix::column_vector(&[1.0, 2.0, 3.0]));
    let y = t.reduce_mean_subset(x, &[0, 2]).unwrap();
    assert_eq!(t.value(y).item(), 2.0);
    let all = t.reduce_mean_subset(x, &[0, 1, 2]).unwrap();
    assert_eq!(t.value(all).item(), 2.0);
    assert!(matches!(t.reduce_mean_subset(x, &[]), Err(Error::EmptyIndexSet(_))));
    assert!(matches!(
        t.reduce_mean_subset(x, &[3]),
        Err(Error::IndexOutOfRange { .. })
    ));
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).as_slice(), &[0.5, 0.0, 0.5]);
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let z = t.param(Matrix::scalar(0.0));
    let s = t.sigmoid(z);
    let sp = t.softplus(z);
    assert_eq!(t.value(s).item(), 0.5);
    assert_abs_diff_eq!(t.value(sp).item(), std::f64::consts::LN_2, epsilon = 1e-15);
    match t.log(z) {
        Err(Error::Domain { op, row, col, .. }) => {
            assert_eq!((op, row, col), ("log", 0, 0));
        }
        other => panic!("expected domain error, got {other:?}"),
    }
    assert_eq!(softplus(800.0), 800.0);
    assert!(softplus(-800.0) >= 0.0);
    assert_eq!(sigmoid(-1000.0), 0.0);
    assert_eq!(sigmoid(1000.0), 1.0);
}

#[test]
fn backward_of_sum_is_ones_and_independent_leaf_is_zero() {
    let mut t = Tape::new();
    let x = t.param(Matrix::filled(2, 3, 0.7));
    let y = t.param(Matrix::filled(2, 2, 1.3));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x), &Matrix::filled(2, 3, 1.0));
    assert_eq!(t.grad(y), &Matrix::zeros(2, 2));
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::new();
    let x = t.param(Matrix::filled(2, 2, 1.0));
    assert!(matches!(t.backward(x), Err(Error::NonScalarRoot { rows: 2, cols: 2 })));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::DoubleBackward)));
    t.reset_grads();
    assert_eq!(t.grad(x), &Matrix::zeros(2, 2));
    t.backward(s).unwrap();
    assert_eq!(t.grad(x), &Matrix::filled(2, 2, 1.0));
}

#[test]
fn grads_are_zero_before_backward() {
    let mut t = Tape::new();
    let x = t.param(Matrix::filled(2, 2, 1.0));
    let y = t.exp(x);
    assert_eq!(t.grad(x), &Matrix::zeros(2, 2));
    assert_eq!(t.grad(y), &Matrix::zeros(2, 2));
}

#[test]
fn tape_order_is_topological() {
    let mut t = Tape::new();
    let x = t.param(Matrix::filled(3, 2, 0.3));
    let w = t.param(Matrix::filled(2, 2, 0.1));
    let b = t.param(Matrix::zeros(1, 2));
    let h = t.linear(x, w, b).unwrap();
    let h = t.relu(h);
    let l = t.row_logsumexp(h);
    let r = t.reduce_mean_subset(l, &[0, 1]).unwrap();
    for v in [h, l, r] {
        for p in t.parents(v) {
            assert!(p.index() < v.index());
        }
    }
}

#[test]
fn grad_check_quadratic_form_passes() {
    let a = m(&[&[2.0, 0.5, 0.0], &[0.5, 1.0, -0.3], &[0.0, -0.3, 3.0]]);
    let x = m(&[&[0.3], &[-1.2], &[0.8]]);
    let a2 = a.clone();
    let f = move |t: &mut Tape, v: &[Var]| {
        let av = t.constant(a2.clone());
        let ax = t.matmul(av, v[0])?;
        let q = t.mul(ax, v[0])?;
        Ok(t.sum(q))
    };
    let grads = analytic_grads(&f, &[x.clone()]).unwrap();
    // ∇ xᵀAx = 2Ax for symmetric A
    let expected = a.matmul(&x).unwrap().scale(2.0);
    for i in 0..3 {
        assert_abs_diff_eq!(grads[0][(i, 0)], expected[(i, 0)], epsilon = 1e-12);
    }
    let report = grad_check(f, &[x], 1e-4, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn grad_check_wrong_gradient_fails() {
    let x = m(&[&[0.4, -0.7]]);
    let f = |t: &mut Tape, v: &[Var]| {
        let e = t.exp(v[0]);
        Ok(t.sum(e))
    };
    let wrong = vec![x.map(|v| 2.0 * v.exp())];
    let report = grad_check_against(&f, &[x], &wrong, 1e-4, 1e-4).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.4);
}

#[test]
fn grad_check_constant_function() {
    let x = m(&[&[0.4, -0.7], &[1.0, 2.0]]);
    let f = |t: &mut Tape, _v: &[Var]| Ok(t.constant(Matrix::scalar(3.5)));
    let grads = analytic_grads(&f, &[x.clone()]).unwrap();
    assert_eq!(grads[0], Matrix::zeros(2, 2));
    assert!(grad_check(f, &[x], 1e-4, 1e-6).unwrap().passed);
}

#[test]
fn grad_check_rejects_nonpositive_step() {
    let f = |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]));
    assert!(grad_check(f, &[Matrix::zeros(1, 1)], 0.0, 1e-6).is_err());
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(&mut rng, 5, 3);
    let neighbors = std::rc::Rc::new(vec![vec![1, 2], vec![0], vec![0, 3], vec![2], vec![]]);
    let f = move |t: &mut Tape, v: &[Var]| {
        let h = t.neighbor_sum(v[0], neighbors.clone(), 1.5)?;
        let s = t.segment_mean(h, &[0, 2, 5])?;
        let l = t.row_logsumexp(s);
        let picked = t.select_entries(h, &[0, 1, 2, 0, 1])?;
        let a = t.sum(l);
        let b = t.mean(picked)?;
        let c = t.clamp(b, -0.1, 0.1);
        let d = t.add(a, c)?;
        Ok(t.scale(d, 0.5))
    };
    let report = grad_check(f, &[x], 1e-4, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn group_mean_and_row_normalize() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[1.0], &[2.0], &[6.0]]));
    let g = t.group_mean(x, vec![vec![0, 2], vec![1]]).unwrap();
    assert_eq!(t.value(g).as_slice(), &[3.5, 2.0]);
    assert!(t.group_mean(x, vec![vec![]]).is_err());
    let r = t.constant(m(&[&[3.0, 4.0]]));
    let n = t.row_normalize(r, 1e-300).unwrap();
    assert_abs_diff_eq!(t.value(n).as_slice()[0], 0.6, epsilon = 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 4, 3);
    let f = |t: &mut Tape, v: &[Var]| {
        let n = t.row_normalize(v[0], 1e-12)?;
        let w = t.constant(m(&[&[1.0], &[-2.0], &[0.5]]));
        let col = t.matmul(n, w)?;
        let sq = t.mul(col, col)?;
        let g = t.group_mean(sq, vec![vec![0, 1, 3], vec![2, 3]])?;
        Ok(t.sum(g))
    };
    let report = grad_check(f, &[x], 1e-4, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 6, 4);
    let w = random(&mut rng, 4, 4);
    let run = || {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.param(w.clone());
        let bv = t.param(Matrix::zeros(1, 4));
        let h = t.linear(xv, wv, bv).unwrap();
        let g = t.param(Matrix::filled(1, 4, 1.0));
        let l = t.param(Matrix::zeros(1, 4));
        let h = t.layer_norm(h, g, l, 1e-5).unwrap();
        let e = t.row_logsumexp(h);
        let s = t.sum(e);
        t.backward(s).unwrap();
        (t.grad(xv).clone(), t.grad(wv).clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(
        a1.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        a2.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(b1, b2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logsumexp_shift_identity(
        row in proptest::collection::vec(-20.0f64..20.0, 1..6),
        c in -500.0f64..500.0,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&row));
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let xs = t.constant(Matrix::row_vector(&shifted));
        let a = t.row_logsumexp(x);
        let b = t.row_logsumexp(xs);
        let diff = t.value(b).item() - (t.value(a).item() + c);
        prop_assert!(diff.abs() <= 1e-12 * (1.0 + c.abs()));
    }

    #[test]
    fn elementwise_ops_match_finite_differences(seed in 0u64..1_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 3, 3);
        let pos = x.map(|v| v.abs() + 0.1);
        for op in [UnaryOp::Exp, UnaryOp::Softplus, UnaryOp::Sigmoid, UnaryOp::Neg] {
            let f = move |t: &mut Tape, v: &[Var]| {
                let y = t.unary(op, v[0])?;
                let y = t.row_logsumexp(y);
                Ok(t.sum(y))
            };
            let r = grad_check(f, &[x.clone()], 1e-4, 1e-4).unwrap();
            prop_assert!(r.passed, "{:?}: {:?}", op, r);
        }
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.log(v[0])?;
            let y = t.row_logsumexp(y);
            Ok(t.sum(y))
        };
        let r = grad_check(f, &[pos], 1e-4, 1e-4).unwrap();
        prop_assert!(r.passed, "log: {:?}", r);
    }
}
