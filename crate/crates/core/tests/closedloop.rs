use rdnpc_core::closedloop::{
    estimate_beta, run_cell, run_closed_loop, verify_lemma1, CellRuns, ClosedLoopSetup,
    ExperimentOptions, RunSummary,
};
use rdnpc_core::dictionary::{Dictionary, EstimationOptions};
use rdnpc_core::npc::{NpcConfig, NpcStatus};
use rdnpc_core::plant::{builtin_plant, InputBox};

fn quick_estimation() -> EstimationOptions {
    EstimationOptions {
        lipschitz_samples: 1000,
        kw_trials: 500,
        seed: 0,
    }
}

#[test]
fn nominal_run_converges_with_decreasing_lyapunov() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        estimation: quick_estimation(),
        ..Default::default()
    };
    let setup = ClosedLoopSetup::prepare(&plant, &dict, NpcConfig::new(1, 6), &opts, 1).unwrap();
    assert_eq!(setup.constants.eps_star, 0.0);
    let rec = run_closed_loop(&setup, &[0.5, 0.0], 7, 40).unwrap();
    assert!(rec.completed());
    assert_eq!(rec.steps.len(), 20);
    let last = rec.steps.last().unwrap();
    assert!(last.xi_norm() <= 1e-6, "final |Xi| = {}", last.xi_norm());
    for w in rec.steps.windows(2) {
        if w[0].xi_norm() < 1e-6 {
            break;
        }
        assert!(w[1].lyapunov <= w[0].lyapunov + 1e-9, "V increased at t = {}", w[1].t);
    }
    for s in &rec.steps {
        assert!(s.lemma1_min_margin() >= 0.0 || s.lemma1.iter().all(|c| c.measured <= 1e-8));
        assert!(s.lemma1.iter().all(|c| c.measured <= 1e-7), "t = {}", s.t);
    }
}

#[test]
fn equilibrium_start_applies_zero_inputs() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        estimation: quick_estimation(),
        ..Default::default()
    };
    let setup = ClosedLoopSetup::prepare(&plant, &dict, NpcConfig::new(1, 6), &opts, 2).unwrap();
    let rec = run_closed_loop(&setup, &[0.0, 0.0], 3, 10).unwrap();
    assert!(rec.completed());
    for s in &rec.steps {
        assert!(s.applied.iter().all(|u| u.amax() == 0.0), "t = {}", s.t);
        assert!(s.xi.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn runs_are_deterministic() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        w_star: 1e-3,
        estimation: quick_estimation(),
        ..Default::default()
    };
    let run = || {
        let setup = ClosedLoopSetup::prepare(&plant, &dict, NpcConfig::new(1, 6), &opts, 5).unwrap();
        run_closed_loop(&setup, &[0.5, 0.0], 9, 12).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.same_trajectory(&b));
}

#[test]
fn applied_inputs_and_windows_are_consistent() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        w_star: 1e-3,
        estimation: quick_estimation(),
        ..Default::default()
    };
    let setup = ClosedLoopSetup::prepare(&plant, &dict, NpcConfig::new(1, 6), &opts, 6).unwrap();
    let rec = run_closed_loop(&setup, &[0.3, 0.1], 4, 20).unwrap();
    assert!(rec.completed());
    for w in rec.steps.windows(2) {
        assert_eq!(w[1].t - w[0].t, 2);
        assert_eq!(w[0].applied, w[0].solution.first_inputs());
        // The next solve's past window holds exactly the applied inputs.
        assert_eq!(&w[1].solution.u_bar[..2], &w[0].applied[..]);
        let noisy = w[0].xi_noisy.as_ref().unwrap();
        assert_eq!(&w[1].solution.y_bar[0][..2], &noisy[..]);
    }
}

#[test]
fn noisy_run_respects_deviation_bound() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        w_star: 1e-2,
        estimation: quick_estimation(),
        ..Default::default()
    };
    let setup = ClosedLoopSetup::prepare(&plant, &dict, NpcConfig::new(1, 6), &opts, 8).unwrap();
    let rec = run_closed_loop(&setup, &[0.5, 0.0], 11, 40).unwrap();
    assert!(rec.completed(), "status {:?}", rec.final_status);
    let checks = verify_lemma1(&rec, &plant, &setup.constants).unwrap();
    let online: usize = rec.steps.iter().map(|s| s.lemma1.len()).sum();
    assert_eq!(checks.len(), online);
    // The bound that accounts for noise in the measured past window holds
    // everywhere; the plain bound does not (see README).
    let worst = checks.iter().map(|c| c.window_margin()).fold(f64::INFINITY, f64::min);
    assert!(worst >= 0.0, "worst margin {worst}");
    assert!(checks.iter().all(|c| c.window_bound >= c.bound));
}

#[test]
fn tiny_input_box_halts_with_status() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let mut cfg = NpcConfig::new(1, 6);
    cfg.input_box = InputBox::symmetric(1, 1e-3);
    let opts = ExperimentOptions {
        estimation: quick_estimation(),
        ..Default::default()
    };
    let setup = ClosedLoopSetup::prepare(&plant, &dict, cfg, &opts, 3).unwrap();
    let rec = run_closed_loop(&setup, &[2.0, 1.0], 1, 20).unwrap();
    assert_eq!(rec.final_status, NpcStatus::Infeasible);
    assert_eq!(rec.steps.len(), 1);
    assert!(rec.steps[0].solution.certificate.is_some());
}

#[test]
fn record_csv_columns() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        estimation: quick_estimation(),
        ..Default::default()
    };
    let setup = ClosedLoopSetup::prepare(&plant, &dict, NpcConfig::new(1, 6), &opts, 1).unwrap();
    let rec = run_closed_loop(&setup, &[0.1, 0.0], 1, 6).unwrap();
    let mut buf = Vec::new();
    rec.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,xi_norm,J,V,alpha_l1,sigma_inf,feasible,lemma1_min_margin,solve_ms"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn beta_estimate_needs_enough_runs_and_flags_failures() {
    let summary = |seed, plateau, completed| RunSummary {
        seed,
        eps_star: 0.0,
        w_star: 0.0,
        completed,
        steps: 10,
        feasible_steps: if completed { 10 } else { 3 },
        terminal_xi_norm: 0.0,
        plateau,
        contraction: 0.5,
        lemma1_min_margin: 0.0,
        window_min_margin: 0.0,
        lemma1_checks: 0,
    };
    let few = CellRuns {
        eps_star: 0.0,
        w_star: 0.0,
        runs: (0..3).map(|s| summary(s, 0.0, true)).collect(),
    };
    assert!(estimate_beta(&[few], 1.0).is_err());
    assert!(estimate_beta(&[], 1.0).is_err());
    let cells: Vec<CellRuns> = [(0.0, 0.0), (1e-3, 1.0), (1e-2, 2.0)]
        .iter()
        .map(|&(w, p)| CellRuns {
            eps_star: 0.0,
            w_star: w,
            runs: (0..5).map(|s| summary(s, p * (1.0 + s as f64), w != 1e-2 || s > 0)).collect(),
        })
        .collect();
    let mut cells = cells;
    for c in &mut cells {
        for r in &mut c.runs {
            r.w_star = c.w_star;
        }
    }
    let report = estimate_beta(&cells, 1.0).unwrap();
    assert_eq!(report.cells[0].beta_hat, 0.0);
    assert_eq!(report.cells[1].beta_hat, 3.0);
    assert!(report.cells[2].flagged);
    assert!((report.cells[2].feasibility_rate - 43.0 / 50.0).abs() < 1e-12);
    let v = &report.verdicts[0];
    assert_eq!(v.axis, "w_star");
    assert_eq!(v.values, vec![0.0, 1e-3]);
    assert!(v.non_decreasing);
}

#[test]
fn small_cell_runs_in_parallel() {
    let plant = builtin_plant("P1").unwrap();
    let dict = Dictionary::default_for(&plant).unwrap();
    let opts = ExperimentOptions {
        w_star: 1e-3,
        estimation: quick_estimation(),
        ..Default::default()
    };
    let (cell, records) =
        run_cell(&plant, &dict, &NpcConfig::new(1, 6), &opts, &[0.5, 0.0], 20, &[1, 2, 3]).unwrap();
    assert_eq!(records.len(), 3);
    assert!(cell.runs.iter().all(|r| r.completed));
    assert!(cell.runs.iter().all(|r| r.terminal_xi_norm < 0.1));
}
