use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rdnpc_core::dictionary::{
    self, approximation_residuals, c_pe_of_matrix, estimate_eps_star, estimate_k_psi,
    estimate_k_w, estimate_lipschitz, fit_coefficients, g_dagger, g_dagger_inf_norm, Dictionary,
    DictionaryDescriptor, OmegaBox,
};
use rdnpc_core::lifting::Trajectory;
use rdnpc_core::plant::builtin_plant;
use rdnpc_core::seed;
use rdnpc_core::Error;

fn p1_data(len: usize, seed: u64) -> Trajectory {
    builtin_plant("P1").unwrap().collect(len, seed).unwrap()
}

/// Features of P1's dictionary written out by hand: (xi_1^2, xi_2, u) with
/// xi_k = (y_k, y_{k+1}).
fn p1_features_by_hand(traj: &Trajectory) -> (DMatrix<f64>, DVector<f64>) {
    let y = &traj.outputs()[0];
    let n = traj.len();
    let psi = DMatrix::from_fn(3, n, |row, k| match row {
        0 => y[k] * y[k],
        1 => y[k + 1],
        _ => traj.inputs()[k][0],
    });
    let v = DVector::from_fn(n, |k, _| y[k + 2]);
    (psi, v)
}

#[test]
fn p1_coefficients_recovered() {
    let data = p1_data(200, 11);
    let dict = Dictionary::default_for(&builtin_plant("P1").unwrap()).unwrap();
    let g = fit_coefficients(&dict, &data).unwrap();

    let (psi, v) = p1_features_by_hand(&data);
    let normal = &psi * psi.transpose();
    let oracle = normal.lu().solve(&(&psi * v)).unwrap();
    for (j, expected) in [0.2, 0.8, 1.0].iter().enumerate() {
        assert!((oracle[j] - expected).abs() < 1e-8, "oracle coefficient {j}");
        assert!((g[(0, j)] - expected).abs() < 1e-8, "fitted coefficient {j}: {}", g[(0, j)]);
    }
}

#[test]
fn zero_targets_give_zero_coefficients() {
    let inputs: Vec<DVector<f64>> = (0..20).map(|k| DVector::from_element(1, (k as f64).sin())).collect();
    let traj = Trajectory::new(inputs, vec![vec![0.0; 22]], vec![2]).unwrap();
    let dict = Dictionary::new(1, 2, DictionaryDescriptor::Monomial { exponents: vec![vec![1, 0, 0], vec![2, 0, 0]] }).unwrap();
    let g = fit_coefficients(&dict, &traj).unwrap();
    assert_eq!(g.amax(), 0.0);
}

#[test]
fn rank_deficient_features_are_named() {
    let data = p1_data(60, 2);
    let dict = Dictionary::new(
        1,
        2,
        DictionaryDescriptor::Monomial { exponents: vec![vec![0, 0, 1], vec![1, 0, 0], vec![0, 0, 1]] },
    )
    .unwrap();
    match fit_coefficients(&dict, &data) {
        Err(Error::RankDeficient(msg)) => assert!(msg.contains("xi2"), "{msg}"),
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn p2_has_positive_mismatch_within_envelope() {
    let plant = builtin_plant("P2").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let data = plant.collect(300, 5).unwrap();
    let g = fit_coefficients(&dict, &data).unwrap();
    assert!(approximation_residuals(&dict, &g, &data).unwrap().amax() > 0.0);

    let validation = plant.collect(300, 6).unwrap();
    let eps = estimate_eps_star(&dict, &g, &validation).unwrap();
    let envelope = validation.outputs()[0][..validation.len()]
        .iter()
        .map(|y| (0.1 * y.sin()).abs())
        .fold(0.0, f64::max);
    assert!(eps > 0.0);
    assert!(eps <= 1.5 * envelope, "eps* {eps} vs envelope {envelope}");
}

#[test]
fn p1_eps_star_reported_as_zero() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let g = fit_coefficients(&dict, &p1_data(200, 1)).unwrap();
    let held_out = p1_data(200, 99);
    let residual = approximation_residuals(&dict, &g, &held_out).unwrap();
    assert!(residual.amax() <= 1e-8, "{}", residual.amax());
    assert_eq!(estimate_eps_star(&dict, &g, &held_out).unwrap(), 0.0);
}

#[test]
fn constant_zero_validation_gives_zero_eps() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let zero = Trajectory::new(vec![DVector::zeros(1); 10], vec![vec![0.0; 12]], vec![2]).unwrap();
    let g = DMatrix::from_row_slice(1, 3, &[0.3, -1.0, 2.0]);
    assert_eq!(estimate_eps_star(&dict, &g, &zero).unwrap(), 0.0);
}

fn xi_box(m: usize, half_widths: &[f64]) -> OmegaBox {
    let mut lower = vec![-1.0; m];
    let mut upper = vec![1.0; m];
    lower.extend(half_widths.iter().map(|h| -h));
    upper.extend(half_widths.iter().copied());
    OmegaBox::new(m, lower, upper).unwrap()
}

#[test]
fn lipschitz_examples() {
    let omega = xi_box(1, &[2.0, 2.0]);
    let k = estimate_lipschitz(|_, xi| xi * -3.0, &omega, 500, 4).unwrap();
    assert!((3.0 * (1.0 - 1e-9)..=3.75 * (1.0 + 1e-9)).contains(&k), "{k}");
    let k = estimate_lipschitz(|_, _| DVector::from_element(1, 7.0), &omega, 500, 4).unwrap();
    assert_eq!(k, 0.0);

    let square = Dictionary::new(1, 1, DictionaryDescriptor::Monomial { exponents: vec![vec![0, 2]] }).unwrap();
    let k = estimate_k_psi(&square, &xi_box(1, &[2.0]), 4000, 9).unwrap();
    assert!((3.9..=5.0).contains(&k), "{k}");

    let flat = OmegaBox::new(1, vec![-1.0, 0.0], vec![1.0, 0.0]).unwrap();
    assert!(matches!(estimate_k_psi(&square, &flat, 10, 0), Err(Error::Precondition(_))));
}

#[test]
fn lipschitz_certificate_holds_on_fresh_pairs() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let omega = OmegaBox::from_data(&p1_data(200, 3)).unwrap();
    let k_psi = estimate_k_psi(&dict, &omega, 4000, 1).unwrap();
    let phi = plant.phi_oracle().unwrap();
    let k_xi = estimate_lipschitz(phi, &omega, 4000, 2).unwrap();
    let mut rng = seed::rng(12345);
    for _ in 0..1000 {
        let (u, a) = omega.sample(&mut rng);
        let (_, b) = omega.sample(&mut rng);
        let dx = (&a - &b).amax();
        let d_psi = (dict.evaluate(&u, &a).unwrap() - dict.evaluate(&u, &b).unwrap()).amax();
        let d_phi = (phi(&u, &a) - phi(&u, &b)).amax();
        assert!(d_psi <= k_psi * dx + 1e-15);
        assert!(d_phi <= k_xi * dx + 1e-15);
    }
}

#[test]
fn k_w_examples() {
    // Psi = Xi, G = I: delta(omega) = -omega exactly.
    let identity_dict = Dictionary::new(
        2,
        2,
        DictionaryDescriptor::Monomial { exponents: vec![vec![0, 0, 1, 0], vec![0, 0, 0, 1]] },
    )
    .unwrap();
    let plant = builtin_plant("P3").unwrap();
    let data = plant.collect(100, 1).unwrap();
    // P3 has n = 3; use a two-channel d = (1, 1) trajectory instead.
    let _ = data;
    let inputs: Vec<DVector<f64>> = (0..50).map(|k| DVector::from_vec(vec![(k as f64).sin(), (k as f64).cos()])).collect();
    let outputs = vec![(0..51).map(|k| (0.3 * k as f64).sin()).collect(), (0..51).map(|k| (0.7 * k as f64).cos()).collect()];
    let traj = Trajectory::new(inputs, outputs, vec![1, 1]).unwrap();
    let k_w = estimate_k_w(&identity_dict, &DMatrix::identity(2, 2), None, &traj, 0.01, 500, 3).unwrap();
    assert!((1.0..=1.25).contains(&k_w), "{k_w}");

    assert_eq!(estimate_k_w(&identity_dict, &DMatrix::identity(2, 2), None, &traj, 0.01, 0, 3).unwrap(), 0.0);
    assert_eq!(estimate_k_w(&identity_dict, &DMatrix::identity(2, 2), None, &traj, 0.0, 10, 3).unwrap(), 0.0);
}

#[test]
fn k_w_stays_bounded_as_noise_shrinks() {
    let plant = builtin_plant("P2").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let data = plant.collect(200, 8).unwrap();
    let g = fit_coefficients(&dict, &data).unwrap();
    let ks: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|w| estimate_k_w(&dict, &g, plant.phi_oracle(), &data, *w, 2000, 5).unwrap())
        .collect();
    let (lo, hi) = ks.iter().fold((f64::MAX, 0.0f64), |(l, h), k| (l.min(*k), h.max(*k)));
    assert!(lo > 0.0 && hi / lo <= 3.0, "{ks:?}");
}

#[test]
fn c_pe_matches_eigenvalue_oracle() {
    let mut rng = seed::rng(77);
    use rand::Rng;
    for _ in 0..20 {
        let m = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let eig = SymmetricEigen::new(&m * m.transpose());
        let lambda_min = eig.eigenvalues.min();
        let c = c_pe_of_matrix(&m).unwrap();
        assert!((c - 1.0 / lambda_min).abs() <= 1e-10 * c.max(1.0), "{c} vs {}", 1.0 / lambda_min);
    }
    let rank_one = DMatrix::from_fn(3, 5, |i, j| (i + 1) as f64 * (j + 1) as f64);
    match c_pe_of_matrix(&rank_one) {
        Err(Error::RankDeficient(msg)) => assert!(msg.contains("sigma_min")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn compute_c_pe_on_p1_data() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let data = p1_data(200, 4);
    let report = dictionary::compute_c_pe(&data, &dict, 6, 2).unwrap();
    assert!(report.c_pe.is_finite() && report.c_pe > 0.0);
    // xi_2 at k+1 equals G Psi_k: one exact relation per block shift.
    assert_eq!(report.rows, 3 * 8 + 2);
    assert_eq!(report.rank, report.rows - 7 - 1);
}

#[test]
fn constants_chain_on_p2() {
    let plant = builtin_plant("P2").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let fit = plant.collect(300, 21).unwrap();
    let validation = plant.collect(300, 22).unwrap();
    let g = fit_coefficients(&dict, &fit).unwrap();
    let eps = estimate_eps_star(&dict, &g, &validation).unwrap();
    let gd = g_dagger(&g).unwrap();
    let bound = g_dagger_inf_norm(&g).unwrap() * eps;
    let residuals = approximation_residuals(&dict, &g, &validation).unwrap();
    for k in 0..validation.len() {
        let e_hat = &gd * residuals.column(k);
        assert!(e_hat.amax() <= bound, "sample {k}");
    }
}

#[test]
fn independence_check() {
    let plant = builtin_plant("P3").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let omega = OmegaBox::from_data(&plant.collect(200, 1).unwrap()).unwrap();
    assert_eq!(dictionary::check_independence(&dict, &omega, 200, 1).unwrap(), 20);
    let dup = Dictionary::new(1, 1, DictionaryDescriptor::Monomial { exponents: vec![vec![1, 1], vec![1, 1]] }).unwrap();
    let omega = xi_box(1, &[1.0]);
    assert!(dictionary::check_independence(&dup, &omega, 50, 1).is_err());
}

proptest! {
    #[test]
    fn g_dagger_norm_invariant_under_row_permutation(
        entries in proptest::collection::vec(-2.0f64..2.0, 8),
        swap in any::<bool>(),
    ) {
        let g = DMatrix::from_row_slice(2, 4, &entries);
        prop_assume!(g.clone().svd(false, false).singular_values.min() > 1e-3);
        let mut p = g.clone();
        if swap {
            p.swap_rows(0, 1);
        }
        let a = g_dagger_inf_norm(&g).unwrap();
        let b = g_dagger_inf_norm(&p).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }
}
