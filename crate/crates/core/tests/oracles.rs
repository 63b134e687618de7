//! Operators checked against dense or brute-force references.

mod common;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdnet_core::linops::{CirculantOp, Resolvent};
use pdnet_core::pdnet::{build_feature_operator, layer_forward, FeatureDesign, LayerParams, Position};
use pdnet_core::prox::{dprox_dsigma, prox_l1, prox_l1_conjugate, soft_threshold, subgrad_r};

use common::{brute_convolve, dense_circulant, dense_solve, max_abs_diff};

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)))
}

#[test]
fn convolution_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (shape, kshape) in [
        ((8, 8), (3, 3)),
        ((6, 9), (2, 4)),
        ((7, 5), (5, 1)),
        ((1, 16), (1, 3)),
        ((4, 4), (4, 4)),
    ] {
        let kernel = Array2::from_shape_fn(kshape, |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
        let op = CirculantOp::new(kernel.clone(), shape).unwrap();
        let fast = op.apply(Array1::from_iter(x.iter().copied()).view()).unwrap();
        let slow = Array1::from_iter(brute_convolve(&kernel, &x).iter().copied());
        assert!(max_abs_diff(&fast, &slow) < 1e-12, "{shape:?} {kshape:?}");
    }
}

#[test]
fn centred_box_blur_by_hand() {
    let op = CirculantOp::uniform(3, (4, 4)).unwrap();
    let mut x = Array1::zeros(16);
    x[5] = 9.0;
    let y = op.apply(x.view()).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let expected = if (0..=2).contains(&r) && (0..=2).contains(&c) {
                1.0
            } else {
                0.0
            };
            assert!((y[r * 4 + c] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn adjoint_and_normal_match_dense_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kernel = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
    let op = CirculantOp::new(kernel.clone(), (5, 6)).unwrap();
    let a = dense_circulant(&kernel, (5, 6));
    for _ in 0..5 {
        let x = random_vec(&mut rng, 30);
        let y = random_vec(&mut rng, 30);
        assert!(max_abs_diff(&op.apply_adjoint(y.view()).unwrap(), &a.t().dot(&y)) < 1e-12);
        assert!(max_abs_diff(&op.apply_normal(x.view()).unwrap(), &a.t().dot(&a.dot(&x))) < 1e-12);
        let lhs = op.apply(x.view()).unwrap().dot(&y);
        let rhs = x.dot(&op.apply_adjoint(y.view()).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn resolvent_tau_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kernel = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..1.0));
    let op = CirculantOp::new(kernel.clone(), (6, 6)).unwrap();
    let a = dense_circulant(&kernel, (6, 6));
    let ata = a.t().dot(&a);
    let x = random_vec(&mut rng, 36);
    let tau = 0.7;
    let h = 1e-5;
    let solve = |t: f64| dense_solve(&(&ata * t + Array2::<f64>::eye(36)), &x);
    let res = Resolvent::new(&op, tau).unwrap();

    let fd_b = (solve(tau + h) - solve(tau - h)) / (2.0 * h);
    assert!(max_abs_diff(&res.apply_tau_derivative(x.view()).unwrap(), &fd_b) < 1e-8);

    let fd_c = (solve(tau + h) * (tau + h) - solve(tau - h) * (tau - h)) / (2.0 * h);
    assert!(max_abs_diff(&res.apply_scaled_tau_derivative(x.view()).unwrap(), &fd_c) < 1e-8);
}

#[test]
fn resolvent_with_zero_tau_is_identity() {
    let op = CirculantOp::uniform(3, (5, 5)).unwrap();
    let x = Array1::from_iter((0..25).map(|i| i as f64));
    let out = Resolvent::new(&op, 0.0).unwrap().apply(x.view()).unwrap();
    assert!(max_abs_diff(&out, &x) < 1e-12);
    assert!(Resolvent::new(&op, -1.0).is_err());
}

/// `argmin_y 1/2 (y - v)^2 + t |y|` over a fine grid.
fn grid_prox(v: f64, t: f64) -> f64 {
    let step = 1e-4;
    let mut best = (f64::INFINITY, 0.0);
    let mut y = -10.0;
    while y <= 10.0 {
        let f = 0.5 * (y - v) * (y - v) + t * y.abs();
        if f < best.0 {
            best = (f, y);
        }
        y += step;
    }
    best.1
}

#[test]
fn soft_threshold_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let v = rng.random_range(-5.0..5.0);
        let t = rng.random_range(0.01..3.0);
        assert!((soft_threshold(v, t) - grid_prox(v, t)).abs() < 2e-4, "v {v} t {t}");
    }
}

#[test]
fn prox_hand_values_and_ties() {
    let v = Array1::from(vec![3.0, -3.0, 0.5, 1.0, -1.0]);
    assert_eq!(prox_l1(v.view(), 1.0).unwrap().to_vec(), vec![2.0, -2.0, 0.0, 0.0, 0.0]);
    assert_eq!(
        prox_l1_conjugate(v.view(), 2.0).unwrap().to_vec(),
        vec![1.0, -1.0, 0.5, 1.0, -1.0]
    );
    assert!(prox_l1(v.view(), 0.0).is_err());

    // Exactly on a boundary both selections are zero.
    let (r2, r3) = subgrad_r(
        Array1::from(vec![2.0, -2.0]).view(),
        Array1::from(vec![1.0, -1.0]).view(),
        0.5,
    )
    .unwrap();
    assert_eq!(r2.to_vec(), vec![0.0, 0.0]);
    assert_eq!(r3.to_vec(), vec![0.0, 0.0]);
}

#[test]
fn threshold_derivative_matches_finite_differences() {
    let v = Array1::from(vec![2.5, -4.0, 0.1, -0.3, 7.0]);
    let sigma = 0.8;
    let h = 1e-6;
    let d = dprox_dsigma(v.view(), sigma).unwrap();
    let plus = prox_l1(v.view(), 1.0 / (sigma + h)).unwrap();
    let minus = prox_l1(v.view(), 1.0 / (sigma - h)).unwrap();
    let fd = (plus - minus) / (2.0 * h);
    assert!(max_abs_diff(&d, &fd) < 1e-7, "{d} vs {fd}");
}

#[test]
fn layer_matches_textbook_primal_dual_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let design = FeatureDesign::parse("f3s1n2+f6s6n1", 6).unwrap();
    let (l, _) = build_feature_operator(&design, 5, 0.4).unwrap();
    let op = CirculantOp::uniform(3, (6, 6)).unwrap();
    let a = dense_circulant(&op.kernel().clone(), (6, 6));
    let (tau, sigma) = (0.6, 0.9);
    let params = LayerParams::new(tau, sigma, l.clone());
    let z = random_vec(&mut rng, 36);
    let x = random_vec(&mut rng, 36);
    let y = random_vec(&mut rng, l.nrows()) * 2.0;

    let (x_out, y_out, _) = layer_forward(&params, &op, z.view(), x.view(), y.view(), Position::Middle).unwrap();

    // y+ = clip(y + sigma L x); x+ = (tau A^T A + I)^-1 (x + tau A^T z - tau L^T y+)
    let y_ref = (&y + &(l.dot(&x) * sigma)).mapv(|v| v.clamp(-1.0, 1.0));
    let rhs = &x + &(a.t().dot(&z) * tau) - &(l.t().dot(&y_ref) * tau);
    let system = a.t().dot(&a) * tau + Array2::<f64>::eye(36);
    let x_ref = dense_solve(&system, &rhs);
    assert!(max_abs_diff(&y_out.unwrap(), &y_ref) < 1e-12);
    assert!(max_abs_diff(&x_out, &x_ref) < 1e-12);
}
