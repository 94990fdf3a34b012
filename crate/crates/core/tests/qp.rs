use nalgebra::{DMatrix, DVector};
use rdnpc_core::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use rdnpc_core::seed;

mod common;

use common::{qp_oracle_gap, random_qp};

#[test]
fn random_feasible_qps_match_active_set_oracle() {
    let mut rng = seed::rng(2024);
    let settings = QpSettings::default();
    let mut worst_kkt: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for trial in 0..200 {
        let qp = random_qp(&mut rng, 30);
        let sol = solve_qp(&qp, &settings).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "trial {trial}");
        worst_kkt = worst_kkt.max(sol.kkt.max());
        let gap = qp_oracle_gap(&qp, &sol).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        worst_gap = worst_gap.max(gap);
    }
    assert!(worst_kkt <= 1e-8, "worst KKT residual {worst_kkt:.2e}");
    assert!(worst_gap <= 1e-8, "worst objective gap {worst_gap:.2e}");
}

#[test]
fn kkt_residuals_are_recomputed_from_data() {
    let qp = QpProblem::new(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-2.0, 0.0]))
        .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::from_element(1, 0.5));
    let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
    assert!((sol.x[0] - 0.5).abs() < 1e-10);
    assert!((sol.ineq_multipliers[0] - 1.0).abs() < 1e-8);
    let again = qp.kkt_residuals(&sol.x, &sol.eq_multipliers, &sol.ineq_multipliers);
    assert_eq!(again, sol.kkt);
}
