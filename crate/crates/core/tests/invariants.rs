use obstacle_mfg::continuation::{run_continuation, EpsilonSchedule};
use obstacle_mfg::diagnostics::estimate_report;
use obstacle_mfg::grid::{GridField, PeriodicGrid};
use obstacle_mfg::model::{translate_potential, HamiltonianSpec, ModelSpec, PotentialTerm};
use obstacle_mfg::penalized::{newton_solve, SolverOptions};
use obstacle_mfg::CouplingSpec;

fn two_mode_model(dims: usize) -> ModelSpec {
    let terms = if dims == 1 {
        vec![PotentialTerm::new(vec![1], 0.8), PotentialTerm::new(vec![2], 0.3).with_phase(0.4)]
    } else {
        vec![PotentialTerm::new(vec![1, 0], 0.6), PotentialTerm::new(vec![1, 1], 0.3).with_phase(0.4)]
    };
    ModelSpec::new(dims, HamiltonianSpec::new(terms, 1.5), CouplingSpec::Logarithmic)
}

#[test]
fn grid_aligned_translation_permutes_solution() {
    for sizes in [vec![64usize], vec![16, 16]] {
        let grid = PeriodicGrid::new(&sizes).unwrap();
        let model = two_mode_model(grid.dims());
        let steps: Vec<usize> = if grid.dims() == 1 { vec![5] } else { vec![3, 2] };
        let shift: Vec<f64> = steps.iter().zip(&sizes).map(|(&k, &n)| k as f64 / n as f64).collect();
        let moved = ModelSpec { hamiltonian: translate_potential(&model.hamiltonian, &shift), ..model.clone() };
        let opts = SolverOptions::default();
        let a = newton_solve(&model, 0.05, &GridField::constant(&grid, 0.0), &opts).unwrap();
        let b = newton_solve(&moved, 0.05, &GridField::constant(&grid, 0.0), &opts).unwrap();
        assert!(a.converged && b.converged);
        let mut worst = 0.0f64;
        for i in 0..grid.len() {
            let mut j = grid.shift(i, 0, steps[0] as isize);
            if grid.dims() == 2 {
                j = grid.shift(j, 1, steps[1] as isize);
            }
            worst = worst.max((a.u.values[i] - b.u.values[j]).abs());
        }
        assert!(worst < 1e-11, "{sizes:?}: {worst:e}");
        let ra = estimate_report(&model, &a);
        let rb = estimate_report(&moved, &b);
        for ((name, x), (_, y)) in ra.scalars().iter().zip(rb.scalars()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn report_scalars_are_permutation_invariant() {
    let grid = PeriodicGrid::new(&[48]).unwrap();
    let model = two_mode_model(1);
    let s = newton_solve(&model, 0.05, &GridField::constant(&grid, 0.0), &SolverOptions::default()).unwrap();
    let shifted = |f: &GridField| GridField {
        grid: grid.clone(),
        values: (0..grid.len()).map(|i| f.values[grid.shift(i, 0, 7)]).collect(),
    };
    let mut t = s.clone();
    t.u = shifted(&s.u);
    t.theta = shifted(&s.theta);
    let ra = estimate_report(&model, &s);
    let rb = estimate_report(&model, &t);
    for ((name, x), (_, y)) in ra.scalars().iter().zip(rb.scalars()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{name}: {x} vs {y}");
    }
}

#[test]
fn penalized_solution_self_converges() {
    let model = two_mode_model(1);
    let solve = |n: usize| {
        let g = PeriodicGrid::new(&[n]).unwrap();
        newton_solve(&model, 0.05, &GridField::constant(&g, 0.0), &SolverOptions::default()).unwrap()
    };
    let (coarse, mid, fine) = (solve(128), solve(256), solve(512));
    let gap = |a: &GridField, b: &GridField| {
        let rb = b.restrict(b.values.len() / a.values.len()).unwrap();
        a.values.iter().zip(&rb.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let e1 = gap(&coarse.u, &mid.u);
    let e2 = gap(&mid.u, &fine.u);
    let order = (e1 / e2).log2();
    assert!(order >= 1.8, "observed order {order} ({e1:e}, {e2:e})");
}

#[test]
fn continuation_is_bitwise_deterministic() {
    let grid = PeriodicGrid::new(&[64]).unwrap();
    let model = two_mode_model(1);
    let run = || run_continuation(&model, &grid, &EpsilonSchedule::default(), &SolverOptions::default(), 3).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.schedule_trace, b.schedule_trace);
    assert_eq!(a.u, b.u);
}

#[test]
fn max_u_plus_decays_linearly() {
    let grid = PeriodicGrid::new(&[128]).unwrap();
    let model = two_mode_model(1);
    let sol = run_continuation(&model, &grid, &EpsilonSchedule::default(), &SolverOptions::default(), 0).unwrap();
    let eps: Vec<f64> = sol.solutions.iter().map(|s| s.epsilon).collect();
    let tops: Vec<f64> = sol.solutions.iter().map(|s| s.u.max().max(0.0)).collect();
    let fit = obstacle_mfg::continuation::log_log_slope(&eps, &tops);
    assert!(fit.slope >= 0.9, "{fit:?}");
    for s in &sol.solutions {
        let (beta, top) = obstacle_mfg::continuation::penalty_size(s);
        assert!(beta <= top / s.epsilon + 1e-15);
    }
}
