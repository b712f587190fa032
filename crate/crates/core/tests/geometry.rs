mod common;

use common::*;
use dmcr_core::eval::*;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

/// Kernel-form CKA: `HSIC(K, L) / sqrt(HSIC(K, K)·HSIC(L, L))` with linear kernels.
fn hsic_cka(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let m = a.ncols();
    let h = DMatrix::<f64>::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    let k = na(a).transpose() * na(a);
    let l = na(b).transpose() * na(b);
    let hsic = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x * &h * y * &h).trace();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

#[test]
fn cka_matches_kernel_form() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let a = normal(5, 30, 1.0, &mut r);
        let b = normal(3, 30, 1.0, &mut r) + a.slice(ndarray::s![..3, ..]);
        let got = linear_cka(a.view(), b.view()).unwrap();
        assert!((got - hsic_cka(&a, &b)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn cka_ignores_rotation_scale_and_shift() {
    let mut r = rng(3);
    let a = normal(4, 25, 1.0, &mut r);
    let q = na(&normal(4, 4, 1.0, &mut r)).qr().q();
    let rotated = Array2::from_shape_fn((4, 25), |(i, j)| 3.0 * (&q * na(&a))[(i, j)] + 1.5);
    assert!((linear_cka(a.view(), rotated.view()).unwrap() - 1.0).abs() < 1e-12);
}

fn class_mean(z: &Array2<f64>, labels: &[usize], k: usize) -> Array1<f64> {
    z.select(Axis(1), &columns(labels, k)).mean_axis(Axis(1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_scatter_splits_into_within_and_between(seed in 0u64..10_000, k in 1usize..5) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..4 * k + 3).map(|i| i % k).collect();
        let z = normal(3, labels.len(), 2.0, &mut r);
        let (sw, sb, st) = scatter_traces(z.view(), &labels);
        prop_assert!((sw + sb - st).abs() <= 1e-9 * st.max(1.0));
        // Independent within-class trace from explicit class means.
        let direct: f64 = z
            .columns()
            .into_iter()
            .zip(&labels)
            .map(|(c, &l)| (&c - &class_mean(&z, &labels, l)).mapv(|v| v * v).sum())
            .sum();
        prop_assert!((sw - direct).abs() <= 1e-9 * direct.max(1.0));
        let w = wccr(z.view(), &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
    }
}

#[test]
fn orthogonal_class_subspaces_pass_the_structure_check() {
    // Class k lives on coordinates {2k, 2k+1} with both directions equally used.
    let (k, d) = (3, 8);
    let mut z = Array2::zeros((d, 6 * k));
    let mut labels = Vec::new();
    for c in 0..k {
        for s in 0..6 {
            let j = c * 6 + s;
            let angle = s as f64 * std::f64::consts::PI / 3.0;
            z[[2 * c, j]] = angle.cos();
            z[[2 * c + 1, j]] = angle.sin();
            labels.push(c);
        }
    }
    let halves = vec![z.clone(), z.clone()];
    let report = check_structure(&halves, &[labels.clone(), labels.clone()], Some(&[2, 2, 2]), &StructureTolerances::default()).unwrap();
    assert!(report.pass);
    assert!(report.within_node_max_cos < 1e-12 && report.cross_node_max_cos < 1e-12);

    let model = fit_subspace_model(z.view(), &labels, k, 0.95).unwrap();
    assert_eq!(classify_all(&model, z.view()), labels);
}

#[test]
fn collapsed_classes_fail_the_structure_check() {
    let labels = vec![0, 0, 0, 1, 1, 1];
    let mut z = Array2::zeros((4, 6));
    for j in 0..6 {
        z[[0, j]] = 1.0;
        z[[1, j]] = if labels[j] == 0 { 0.1 } else { -0.1 };
    }
    let report = check_structure(std::slice::from_ref(&z), std::slice::from_ref(&labels), Some(&[2, 2]), &StructureTolerances::default()).unwrap();
    assert!(!report.pass);
    assert!(!report.orthogonal_within);
    assert_eq!(iidr(z.view(), &labels), f64::INFINITY);
    assert!(wccr(z.view(), &labels).unwrap() < 1e-15);
}
