use proptest::prelude::*;

use shiftcalc::basis::Grid;
use shiftcalc::mc::replica_rng;
use shiftcalc::measure::{BaseDensity, ParticleDensity};
use shiftcalc::particles::*;
use shiftcalc::process::{Collision, JumpRule, PathView, ProcessModel};

fn sampler() -> InitialSampler {
    InitialSampler::new(&InitialLaw::Particle(ParticleDensity::new(BaseDensity::Sine { amplitude: 0.3, k: 1 }, 0.5, 4).unwrap()))
}

fn ensemble(n: usize, params: &EnsembleParams, seed: u64) -> ParticleEnsemble {
    let g = Grid::new(1.0, 5, 2, 2 * n).unwrap();
    simulate_ensemble(n, params, &sampler(), g, &mut replica_rng(seed, 0)).unwrap()
}

#[test]
fn two_particles_are_the_pair_model() {
    let pair = Collision::pair(0.1, 0.05).unwrap();
    for seed in 0..20 {
        let e = ensemble(2, &EnsembleParams::default(), seed);
        assert_eq!(e.traj, pair.trajectory(&PathView::of(&e.path)).unwrap());
    }
}

#[test]
fn mean_position_ignores_collisions() {
    // jumps only touch momenta, so (q, mu_t) is the average of the driving q's
    let f = EmpiricalFunctional::mean_position();
    let e = ensemble(8, &EnsembleParams::default(), 3);
    assert!(!e.traj.jumps.is_empty());
    for t in [0.0, 0.25, 0.5, 1.0] {
        let w = e.path.eval(t);
        let mean = (0..8).map(|i| w[2 * i]).sum::<f64>() / 8.0;
        assert!((empirical_value(&e, &f, t).unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn collisions_conserve_total_momentum() {
    for rule in [JumpRule::Swap, JumpRule::Kick { kappa: 0.5 }] {
        let params = EnsembleParams { rule, ..Default::default() };
        let e = ensemble(6, &params, 9);
        assert!(!e.traj.jumps.is_empty());
        for k in 0..e.path.grid().n_knots() {
            let w = e.path.knot(k);
            let total: f64 = (0..6).map(|i| e.state(k, i)[1]).sum();
            let driving: f64 = (0..6).map(|i| w[2 * i + 1]).sum();
            assert!((total - driving).abs() < 1e-12);
        }
    }
}

#[test]
fn swap_exchanges_momenta_at_each_jump() {
    let e = ensemble(4, &EnsembleParams::default(), 5);
    for j in &e.traj.jumps {
        let (a, b) = j.pair;
        assert_eq!(j.delta[2 * a], 0.0);
        assert!((j.delta[2 * a + 1] + j.delta[2 * b + 1]).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn functional_ignores_labels(states in proptest::collection::vec((0.0f64..1.0, -3.0f64..3.0), 1..10), rot in 0usize..10) {
        let f = EmpiricalFunctional::standard();
        let s: Vec<[f64; 2]> = states.iter().map(|&(q, p)| [q, p]).collect();
        let mut r = s.clone();
        let k = rot % r.len();
        r.rotate_left(k);
        prop_assert!((f.eval_states(&s) - f.eval_states(&r)).abs() < 1e-12);
    }

    #[test]
    fn modulus_is_monotone(seed in any::<u64>(), n in 1usize..6) {
        let e = ensemble(n, &EnsembleParams::default(), seed);
        let step = e.path.grid().step();
        let deltas: Vec<f64> = (1..6).map(|k| k as f64 * step).collect();
        let f = EmpiricalFunctional::standard();
        let all = modulus_gamma(&e, &f, &deltas, 1.0, StartWindow::All).unwrap();
        let zero = modulus_gamma(&e, &f, &deltas, 1.0, StartWindow::Zero).unwrap();
        for w in all.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for (z, a) in zero.iter().zip(&all) {
            prop_assert!(*z >= 0.0 && z <= a);
        }
    }
}
