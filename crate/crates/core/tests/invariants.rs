use ndarray::{Array1, Array2};
use proptest::prelude::*;

use redunet::data::synth_subspace_mixture;
use redunet::{
    build_redunet, classify, coding_rate, compression_matrix, expansion_matrix, fit_subspaces,
    forward_batch, forward_sample, normalize_classwise, rate_reduction, recover_covariance,
    BuildConfig, ClassId, LabelAssignment, MembershipEstimate, ReduNetModel, SampleMatrix,
};

fn small_model(seed: u64) -> (ReduNetModel, SampleMatrix, LabelAssignment) {
    let (x, l) = synth_subspace_mixture(8, 3, 2, &[12, 9, 15], 0.05, seed).unwrap();
    let cfg = BuildConfig {
        depth: 6,
        ..BuildConfig::default()
    };
    let (model, _) = build_redunet(&x, &l, &cfg).unwrap();
    (model, x, l)
}

fn matrix(d: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, d * n)
        .prop_map(move |v| Array2::from_shape_vec((d, n), v).unwrap())
}

#[test]
fn coding_rate_matches_closed_form_in_two_dimensions() {
    // 2x2 determinant by hand.
    let z = SampleMatrix::new(ndarray::arr2(&[[1.0, 0.5, -0.2], [0.0, 0.3, 0.9]])).unwrap();
    let eps = 0.5;
    let alpha = 2.0 / (3.0 * eps * eps);
    let g = z.data().dot(&z.data().t());
    let a = 1.0 + alpha * g[[0, 0]];
    let d = 1.0 + alpha * g[[1, 1]];
    let b = alpha * g[[0, 1]];
    let expected = 0.5 * (a * d - b * b).ln();
    assert!((coding_rate(&z, eps).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn expansion_is_inverse_scaled() {
    let sigma = ndarray::arr2(&[[2.0, 0.5], [0.5, 1.0]]);
    let alpha = 1.5;
    let e = expansion_matrix(&sigma, alpha).unwrap();
    let m = Array2::<f64>::eye(2) + &sigma * alpha;
    let check = m.dot(&e) / alpha;
    for ((i, j), v) in check.indexed_iter() {
        let want = if i == j { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn batch_forward_is_bit_identical_to_single() {
    let (model, x, _) = small_model(3);
    let batch = forward_batch(&model, &x).unwrap();
    for i in 0..x.len() {
        let single = forward_sample(&model, x.column(i)).unwrap();
        assert_eq!(single.view(), batch.column(i));
    }
}

#[test]
fn trained_model_fits_its_training_data() {
    let (model, x, l) = small_model(5);
    let subs = fit_subspaces(&model, 2).unwrap();
    let acc = redunet::evaluate(&model, &subs, &x, &l).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn classwise_normalization_sets_class_energy(z in matrix(5, 9), split in 1usize..8) {
        let labels: Vec<ClassId> = (0..9).map(|i| ClassId(u32::from(i >= split))).collect();
        let labels = LabelAssignment::new(labels).unwrap();
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3));
        let zm = SampleMatrix::new(z.clone()).unwrap();
        match normalize_classwise(&zm, &labels) {
            Ok(n) => {
                for (pos, members) in labels.members().iter().enumerate() {
                    let energy: f64 = members.iter().map(|&i| n.column(i).dot(&n.column(i))).sum();
                    prop_assert!((energy - labels.counts()[pos] as f64).abs() < 1e-9);
                }
            }
            Err(_) => {
                let dead = labels.members().iter().any(|m| m.iter().all(|&i| z.column(i).iter().all(|v| *v == 0.0)));
                prop_assert!(dead);
            }
        }
    }

    #[test]
    fn membership_is_a_distribution(norms in prop::collection::vec(0.0f64..1e3, 1..12), lambda in 0.1f64..1e3) {
        let est = MembershipEstimate::from_norms(&norms, lambda);
        let total: f64 = est.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(est.probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let smallest = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(norms[est.argmax()], smallest);
    }

    #[test]
    fn recovery_inverts_compression(g in matrix(4, 6), alpha in 0.05f64..5.0) {
        let sigma = g.dot(&g.t()) / 6.0;
        let c = compression_matrix(&sigma, alpha).unwrap();
        let back = recover_covariance(&c, alpha).unwrap();
        let worst = (&back - &sigma).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(worst < 1e-9, "worst {}", worst);
    }

    #[test]
    fn rate_reduction_is_nonnegative(z in matrix(4, 10)) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3));
        let labels = LabelAssignment::new((0..10).map(|i| ClassId(i % 3)).collect()).unwrap();
        let zm = SampleMatrix::new(z).unwrap();
        let dr = rate_reduction(&zm, &labels, 0.5).unwrap();
        prop_assert!(dr >= -1e-12);
    }

    #[test]
    fn forward_is_scale_invariant(v in prop::collection::vec(-2.0f64..2.0, 8), c in 1e-3f64..1e3) {
        let (model, _, _) = small_model(11);
        let x = Array1::from(v);
        prop_assume!(x.dot(&x) > 1e-6);
        let a = forward_sample(&model, x.view()).unwrap();
        let b = forward_sample(&model, (&x * c).view()).unwrap();
        prop_assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
        let worst = (&a - &b).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        prop_assert!(worst < 1e-10, "worst {}", worst);
    }

    #[test]
    fn classification_ignores_positive_scale(v in prop::collection::vec(-2.0f64..2.0, 8), c in 1e-4f64..1e4) {
        let (model, _, _) = small_model(13);
        let subs = fit_subspaces(&model, 2).unwrap();
        let z = Array1::from(v);
        prop_assume!(z.dot(&z) > 1e-6);
        prop_assert_eq!(
            classify(z.view(), &subs).unwrap(),
            classify((&z * c).view(), &subs).unwrap()
        );
    }
}
