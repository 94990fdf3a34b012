use nalgebra::DVector;
use proptest::prelude::*;
use rdnpc_core::dictionary::Dictionary;
use rdnpc_core::lifting::{
    add_noise, build_hankel, is_persistently_exciting, lift_sequence,
    nominal_representation_residual, Trajectory,
};
use rdnpc_core::plant::{builtin_plant, PlantState};
use rdnpc_core::Error;

mod common;

use common::{exact_rank, integer_seq};

#[test]
fn bareiss_oracle_sanity() {
    assert_eq!(exact_rank(2, 3, &[1, 2, 3, 2, 4, 6]), 1);
    assert_eq!(exact_rank(3, 3, &[2, 0, 1, 1, 1, 0, 0, 3, 5]), 3);
}

proptest! {
    #[test]
    fn pe_verdict_matches_exact_rank(
        eta in 1usize..=2,
        len in 2usize..=12,
        depth in 1usize..=4,
        raw in proptest::collection::vec(-3i64..=3, 24),
    ) {
        prop_assume!(depth <= len);
        let values = &raw[..eta * len];
        let seq = integer_seq(values, eta);
        let h = build_hankel(&seq, depth).unwrap();
        let entries: Vec<i64> = h.matrix().row_iter()
            .flat_map(|r| r.iter().map(|v| *v as i64).collect::<Vec<_>>())
            .collect();
        let rank = exact_rank(h.matrix().nrows(), h.matrix().ncols(), &entries);
        let cert = is_persistently_exciting(&seq, depth).unwrap();
        prop_assert_eq!(cert.rank, rank);
        prop_assert_eq!(cert.satisfied, rank == eta * depth);
    }

    #[test]
    fn hankel_shift_structure(
        values in proptest::collection::vec(-5.0f64..5.0, 4..20),
        depth in 1usize..4,
    ) {
        prop_assume!(depth < values.len());
        let seq: Vec<DVector<f64>> = values.iter().map(|v| DVector::from_element(1, *v)).collect();
        let h = build_hankel(&seq, depth).unwrap();
        let shifted = build_hankel(&seq[1..], depth).unwrap();
        for c in 0..shifted.width() {
            prop_assert_eq!(h.matrix().column(c + 1), shifted.matrix().column(c));
        }
    }

    #[test]
    fn rank_bound_and_pe_monotonicity(
        values in proptest::collection::vec(-5.0f64..5.0, 4..30),
        depth in 1usize..6,
    ) {
        prop_assume!(depth <= values.len());
        let seq: Vec<DVector<f64>> = values.iter().map(|v| DVector::from_element(1, *v)).collect();
        let cert = is_persistently_exciting(&seq, depth).unwrap();
        prop_assert!(cert.rank <= depth.min(values.len() - depth + 1));
        if cert.satisfied {
            for lower in 1..depth {
                prop_assert!(is_persistently_exciting(&seq, lower).unwrap().satisfied);
            }
        }
    }

    #[test]
    fn noise_never_exceeds_bound(w_star in 0.0f64..0.5, seed in any::<u64>()) {
        let plant = builtin_plant("P3").unwrap();
        let clean = plant.collect(30, 1).unwrap();
        let noisy = add_noise(&clean, w_star, seed).unwrap();
        for (a, b) in noisy.outputs().iter().zip(clean.outputs()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= w_star);
            }
        }
    }
}

#[test]
fn impulse_lift() {
    let plant = builtin_plant("P1").unwrap();
    let mut inputs = vec![DVector::zeros(1); 4];
    inputs[0][0] = 1.0;
    let traj = plant.simulate(&PlantState::zeros(2), &inputs).unwrap();
    let xi = lift_sequence(&traj, 1..2).unwrap();
    assert_eq!(xi[0].0.as_slice(), &[0.0, 1.0]);
    let zero = Trajectory::new(vec![DVector::zeros(1); 3], vec![vec![0.0; 5]], vec![2]).unwrap();
    assert!(lift_sequence(&zero, 0..4).unwrap().iter().all(|x| x.0.amax() == 0.0));
}

fn p1_window(seed: u64, horizon: usize) -> Trajectory {
    let plant = builtin_plant("P1").unwrap();
    let warm = plant.excitation(20, 0.1, seed);
    let mut x = PlantState::zeros(2);
    for u in &warm {
        x = plant.step(&x, u).unwrap();
    }
    plant.simulate(&x, &plant.excitation(horizon, 0.1, seed + 1000)).unwrap()
}

#[test]
fn nominal_representation_holds_for_p1() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let data = plant.collect(200, 3).unwrap();
    for seed in 0..5 {
        let test = p1_window(seed, 6);
        let r = nominal_representation_residual(&data, &dict, &test, 6).unwrap();
        assert!(r <= 1e-8, "seed {seed}: residual {r}");
    }
}

#[test]
fn representation_rejects_non_trajectories() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let data = plant.collect(200, 3).unwrap();
    let test = p1_window(7, 6);
    let mut outputs = test.outputs().to_vec();
    outputs[0][4] += 1.0;
    let fake = Trajectory::new(test.inputs().to_vec(), outputs, vec![2]).unwrap();
    let r = nominal_representation_residual(&data, &dict, &fake, 6).unwrap();
    assert!(r > 1e-3, "{r}");

    let zero = Trajectory::new(vec![DVector::zeros(1); 6], vec![vec![0.0; 8]], vec![2]).unwrap();
    assert!(nominal_representation_residual(&data, &dict, &zero, 6).unwrap() < 1e-14);
}

#[test]
fn representation_requires_excitation() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let data = plant.simulate(&PlantState::zeros(2), &vec![DVector::zeros(1); 100]).unwrap();
    let test = p1_window(1, 6);
    assert!(matches!(
        nominal_representation_residual(&data, &dict, &test, 6),
        Err(Error::Precondition(_))
    ));
}
