use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use shiftcalc::basis::{Grid, PiecewisePath};
use shiftcalc::mc::replica_rng;
use shiftcalc::process::*;

fn random_path(grid: Grid, seed: u64, spread: f64) -> PiecewisePath {
    let mut rng = replica_rng(seed, 0);
    let x0 = (0..grid.dim).map(|j| if j % 2 == 0 { spread * rng.random::<f64>() } else { rng.sample(StandardNormal) }).collect();
    let c = (0..grid.basis_len()).map(|_| rng.sample(StandardNormal)).collect();
    PiecewisePath::from_coeffs(grid, x0, c).unwrap()
}

/// Same path with particle blocks `(q_i, p_i)` relabelled by `perm`.
fn relabel(path: &PiecewisePath, perm: &[usize]) -> PiecewisePath {
    let d = path.dim();
    let mut knots = vec![0.0; path.knots().len()];
    for k in 0..path.knots().len() / d {
        let row = path.knot(k);
        for (new, &old) in perm.iter().enumerate() {
            knots[k * d + 2 * new] = row[2 * old];
            knots[k * d + 2 * new + 1] = row[2 * old + 1];
        }
    }
    PiecewisePath::from_knots(*path.grid(), knots).unwrap()
}

fn states(path: &PiecewisePath, traj: &Trajectory, k: usize) -> Vec<[f64; 2]> {
    let (w, a) = (path.knot(k), traj.knot(k));
    let mut s: Vec<[f64; 2]> = (0..path.dim() / 2).map(|i| [w[2 * i] + a[2 * i], w[2 * i + 1] + a[2 * i + 1]]).collect();
    s.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
    s
}

#[test]
fn identity_has_no_drift() {
    let g = Grid::new(1.0, 3, 2, 2).unwrap();
    let p = random_path(g, 1, 1.0);
    let t = Identity.trajectory(&PathView::of(&p)).unwrap();
    assert!(t.a.iter().all(|&v| v == 0.0) && t.jumps.is_empty());
}

#[test]
fn switching_change_of_variable() {
    let m = Switching::new(0.5, 0.1).unwrap();
    for x in [-1.0, 0.01, 0.05, 0.09, 0.3, 2.0] {
        let h = 1e-6;
        let fd = (m.psi(x + h) - m.psi(x - h)) / (2.0 * h);
        assert!((fd - 1.0 / m.sigma(x)).abs() < 1e-6, "psi' at {x}");
        assert!((m.psi_inv(m.psi(x)) - x).abs() < 1e-12);
        assert!((m.exact_sensitivity(x, x) - 1.0).abs() < 1e-15);
    }
}

#[test]
fn kick_changes_momenta_by_kappa() {
    let kappa = 0.5;
    let m = Collision::new(2, 0.1, 0.05, JumpRule::Kick { kappa }).unwrap();
    let g = Grid::new(1.0, 5, 2, 4).unwrap();
    for seed in 0..40 {
        let p = random_path(g, seed, 0.3);
        let t = m.trajectory(&PathView::of(&p)).unwrap();
        for j in &t.jumps {
            assert_eq!(j.delta[0], 0.0);
            assert_eq!(j.delta[2], 0.0);
            assert!((j.delta[1].abs() - kappa).abs() < 1e-15 && j.delta[1] == -j.delta[3]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn collision_is_exchangeable(seed in any::<u64>(), rot in 1usize..4) {
        let n = 4;
        let m = Collision::new(n, 0.1, 0.05, JumpRule::Swap).unwrap();
        let g = Grid::new(1.0, 4, 2, 2 * n).unwrap();
        let p = random_path(g, seed, 0.5);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let q = relabel(&p, &perm);
        let (tp, tq) = (m.trajectory(&PathView::of(&p)).unwrap(), m.trajectory(&PathView::of(&q)).unwrap());
        prop_assert_eq!(tp.jumps.len(), tq.jumps.len());
        for (a, b) in tp.jumps.iter().zip(&tq.jumps) {
            prop_assert_eq!(a.time, b.time);
        }
        for k in 0..g.n_knots() {
            let (sa, sb) = (states(&p, &tp, k), states(&q, &tq, k));
            for (x, y) in sa.iter().zip(&sb) {
                prop_assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jump_times_ignore_initial_momenta(seed in any::<u64>(), dp in -2.0f64..2.0) {
        let m = Collision::pair(0.1, 0.05).unwrap();
        let g = Grid::new(1.0, 5, 2, 4).unwrap();
        let p = random_path(g, seed, 0.3);
        let mut x0 = p.x0().to_vec();
        x0[1] += dp;
        x0[3] -= 0.5 * dp;
        let q = PiecewisePath::from_coeffs(g, x0, p.coeffs().to_vec()).unwrap();
        let ta: Vec<f64> = m.trajectory(&PathView::of(&p)).unwrap().jumps.iter().map(|j| j.time).collect();
        let tb: Vec<f64> = m.trajectory(&PathView::of(&q)).unwrap().jumps.iter().map(|j| j.time).collect();
        prop_assert_eq!(ta, tb);
    }

    #[test]
    fn flows_are_temporally_homogeneous(seed in any::<u64>(), shift in 1usize..8) {
        let g = Grid::new(1.0, 4, 3, 4).unwrap();
        let p = random_path(g, seed, 0.3);
        let v = shift as f64 * g.step();
        let models: [Box<dyn ProcessModel>; 3] = [
            Box::new(Identity),
            Box::new(Collision::pair(0.1, 0.05).unwrap()),
            Box::new(Collision::new(2, 0.1, 0.05, JumpRule::Kick { kappa: 0.5 }).unwrap()),
        ];
        for m in &models {
            prop_assert!(homogeneity_defect(m.as_ref(), &p, v).unwrap() <= 1e-12);
        }
        let g1 = Grid::new(1.0, 4, 3, 1).unwrap();
        let s = Switching::new(0.5, 0.1).unwrap();
        prop_assert!(homogeneity_defect(&s, &random_path(g1, seed, 1.0), v).unwrap() <= 1e-12);
    }

    #[test]
    fn jump_times_are_orthogonal_to_jumps(seed in any::<u64>()) {
        let g = Grid::new(1.0, 5, 2, 4).unwrap();
        let m = Collision::pair(0.1, 0.05).unwrap();
        if let Some(d) = jv_defect(&m, &random_path(g, seed, 0.3), 1e-6).unwrap() {
            prop_assert!(d <= 1e-12, "{}", d);
        }
    }

    #[test]
    fn shifts_compose(seed in any::<u64>(), u in 1usize..5, v in 1usize..5) {
        let g = Grid::new(1.0, 4, 3, 1).unwrap();
        let s = Switching::new(0.5, 0.1).unwrap();
        let d = cocycle_defect(&s, &random_path(g, seed, 1.0), u as f64 * g.step(), v as f64 * g.step()).unwrap();
        prop_assert!(d <= 1e-9, "{}", d);
    }
}

