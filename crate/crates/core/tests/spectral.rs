mod common;

use common::{dense_eigenvalues, dominant, random_instance, rng, symmetric_with_spectrum};
use rand::Rng;
use swa_core::flatness::{self, dense_hessian, hvp, lambda_max, trace_hutchinson, DEFAULT_HVP_EPSILON as EPS};
use swa_core::model::{Objective, Quadratic};
use swa_core::{GroupMask, ParamVector};

#[test]
fn hessian_vector_products_are_symmetric() {
    let mut r = rng(31);
    for _ in 0..10 {
        let inst = random_instance(&mut r);
        let w = ParamVector::new(inst.weights.clone(), inst.spec.layout()).unwrap();
        let obj = inst.spec.objective(&inst.batch);
        let draw = |r: &mut dyn rand::RngCore| w.with_values((0..w.len()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let (u, v) = (draw(&mut r), draw(&mut r));
        let uhv = swa_core::param::dot(&u, &hvp(&obj, &w, &v, EPS).unwrap()).unwrap();
        let vhu = swa_core::param::dot(&v, &hvp(&obj, &w, &u, EPS).unwrap()).unwrap();
        assert!((uhv - vhu).abs() <= 1e-5 * uhv.abs().max(vhu.abs()).max(1.0), "{uhv} vs {vhu}");
    }
}

#[test]
fn power_iteration_matches_dense_eigensolver_on_quadratics() {
    let mut r = rng(32);
    for _ in 0..20 {
        let n = r.random_range(2..=30);
        let mut eigs: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        eigs[0] = if r.random_bool(0.5) { 5.0 } else { -5.0 };
        let q = Quadratic::new(symmetric_with_spectrum(&eigs, &mut r), n).unwrap();
        let w = q.point(vec![0.3; n]).unwrap();
        let expected = dominant(&dense_eigenvalues(&q.matrix, n));
        let p = lambda_max(&q, &w, &GroupMask::all(&w), 1e-6, 500, EPS, 1).unwrap();
        assert!(p.converged);
        assert!((p.lambda - expected).abs() <= 1e-4 * expected.abs(), "{} vs {expected}", p.lambda);
    }
}

#[test]
fn dense_hessian_of_a_quadratic_is_its_matrix() {
    let mut r = rng(33);
    let eigs: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
    let q = Quadratic::new(symmetric_with_spectrum(&eigs, &mut r), 6).unwrap();
    let w = q.point(vec![1.0; 6]).unwrap();
    let (h, idx) = dense_hessian(&q, &w, &GroupMask::all(&w), EPS).unwrap();
    assert_eq!(idx, (0..6).collect::<Vec<_>>());
    assert!(common::max_rel_diff(&h, &q.matrix) < 1e-8);
}

#[test]
fn hutchinson_is_unbiased_over_repeated_runs() {
    let mut r = rng(34);
    let eigs: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..4.0)).collect();
    let exact: f64 = eigs.iter().sum();
    let q = Quadratic::new(symmetric_with_spectrum(&eigs, &mut r), 10).unwrap();
    let w = q.point(vec![0.0; 10]).unwrap();
    let mask = GroupMask::all(&w);
    let runs: Vec<f64> = (0..50)
        .map(|s| trace_hutchinson(&q, &w, &mask, 100, EPS, s).unwrap().trace)
        .collect();
    let mean = runs.iter().sum::<f64>() / 50.0;
    let sd = (runs.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
    assert!((mean - exact).abs() <= 3.0 * sd / 50f64.sqrt(), "{mean} vs {exact}");
}

#[test]
fn flatness_estimates_on_a_small_net_agree_with_its_dense_hessian() {
    let spec = swa_core::model::ModelSpec::new(
        vec![2, 4, 2],
        swa_core::model::Activation::Tanh,
        swa_core::model::LossKind::SoftmaxCrossEntropy,
        0.0,
    )
    .unwrap();
    let data = swa_core::data::two_moons(80, 0.2, 3).unwrap();
    let batch = data.train_batch().unwrap();
    let obj = spec.objective(&batch);
    let w = spec.init(3);
    let mask = GroupMask::all(&w);
    let (h, idx) = dense_hessian(&obj, &w, &mask, EPS).unwrap();
    let n = idx.len();
    let eigs = dense_eigenvalues(&h, n);
    let p = lambda_max(&obj, &w, &mask, 1e-8, 2000, EPS, 1).unwrap();
    assert!((p.lambda - dominant(&eigs)).abs() <= 1e-4 * dominant(&eigs).abs());
    let t = trace_hutchinson(&obj, &w, &mask, 1000, EPS, 2).unwrap();
    let exact: f64 = (0..n).map(|i| h[i * n + i]).sum();
    assert!((t.trace - exact).abs() <= 3.0 * t.stderr, "{} +- {} vs {exact}", t.trace, t.stderr);
    assert!(obj.loss(&w).unwrap().is_finite());
}

#[test]
fn excluded_groups_do_not_contribute() {
    let spec = swa_core::model::ModelSpec::new(
        vec![2, 3, 2],
        swa_core::model::Activation::Tanh,
        swa_core::model::LossKind::SoftmaxCrossEntropy,
        0.0,
    )
    .unwrap();
    let data = swa_core::data::two_moons(40, 0.2, 4).unwrap();
    let batch = data.train_batch().unwrap();
    let obj = spec.objective(&batch);
    let w = spec.init(4);
    let mask = GroupMask::excluding(&w, &["layer0.weight".to_string()]).unwrap();
    let (full, _) = dense_hessian(&obj, &w, &GroupMask::all(&w), EPS).unwrap();
    let (sub, idx) = dense_hessian(&obj, &w, &mask, EPS).unwrap();
    let n = w.len();
    let expected: Vec<f64> = idx.iter().flat_map(|&i| idx.iter().map(move |&j| (i, j))).map(|(i, j)| full[i * n + j]).collect();
    assert!(common::max_rel_diff(&sub, &expected) < 1e-6);
    let p = flatness::lambda_max(&obj, &w, &mask, 1e-8, 2000, EPS, 5).unwrap();
    let e = dominant(&dense_eigenvalues(&sub, idx.len()));
    assert!((p.lambda - e).abs() <= 1e-4 * e.abs());
}
