use shiftcalc::basis::Grid;
use shiftcalc::measure::DensityModel;
use shiftcalc::mollify::*;
use shiftcalc::process::{Collision, JumpRule};

fn halving() -> StepControl {
    StepControl::Halving { tol: 1e-9, max_depth: 12, max_unresolved: 64 }
}

fn batch(model: &Collision, count: usize) -> (Grid, Vec<BatchPath>) {
    let g = Grid::new(1.0, 5, 3, 4).unwrap();
    let dens = DensityModel::gaussian(4, 1.0).unwrap();
    (g, select_batch(model, &dens, g, 1.5, 0.5, count, 21, 100_000).unwrap())
}

#[test]
fn flow_composes_and_is_homogeneous() {
    let model = Collision::pair(0.1, 0.05).unwrap();
    let (g, b) = batch(&model, 2);
    let pair = MollifierPair::new(8, 4).unwrap();
    for bp in &b {
        let r = composition_check(&model, &pair, &bp.path, 0.5, 0.75, default_step(&g), halving()).unwrap();
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn a_minus_y_is_the_flow() {
    let model = Collision::new(2, 0.1, 0.05, JumpRule::Kick { kappa: 0.5 }).unwrap();
    let (g, b) = batch(&model, 1);
    let pair = MollifierPair::new(4, 4).unwrap();
    let st = flow_solve(&model, &pair, &b[0].path, 1.0, default_step(&g), halving()).unwrap();
    assert!(st.phi[0].iter().all(|&v| v == 0.0));
    for s in [0.25, 0.5, 1.0] {
        let (a, y) = approx_processes(&model, &pair, &b[0].path, &st, s).unwrap();
        let phi = st.at(s).unwrap();
        for i in 0..4 {
            assert!((a[i] - y[i] - phi[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn rk4_is_fourth_order_before_the_first_jump() {
    let model = Collision::pair(0.1, 0.05).unwrap();
    let (g, b) = batch(&model, 1);
    let first = b[0].jump_times.iter().copied().find(|&t| t > 0.0).unwrap();
    let s_end = (first / g.step()).floor() * g.step();
    let pair = MollifierPair::new(8, 4).unwrap();
    let r = order_study(&model, &pair, &b[0].path, s_end, 1.0 / 512.0, 4).unwrap();
    assert!((r.observed_order - 4.0).abs() <= 0.5, "{r:?}");
}

#[test]
fn kick_errors_reach_the_ode_floor_away_from_jumps() {
    let model = Collision::new(2, 0.1, 0.05, JumpRule::Kick { kappa: 0.5 }).unwrap();
    let (_, b) = batch(&model, 10);
    let r = convergence_report(&model, &[4, 8], &b, 1.5, 0.5, halving(), 0).unwrap();
    assert!(r.strictly_decreasing, "{r:?}");
    assert!(r.rows.iter().all(|row| row.max_error <= r.resolution), "{r:?}");
}

#[test]
fn error_at_a_jump_time_does_not_shrink() {
    let g = Grid::new(1.0, 5, 3, 4).unwrap();
    let model = Collision::pair(0.1, 0.05).unwrap();
    let path = engineered_crossing(g, 0.1, 0.5, (0.3, -0.2)).unwrap();
    let r = negative_control(&model, &path, 0.5, &[4, 8, 16], halving()).unwrap();
    assert!(!r.converges, "{r:?}");
}
