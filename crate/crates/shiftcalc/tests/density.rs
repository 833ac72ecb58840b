use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use shiftcalc::basis::{Grid, PiecewisePath};
use shiftcalc::density::*;
use shiftcalc::mc::{replica_rng, McParams};
use shiftcalc::measure::DensityModel;
use shiftcalc::process::{Identity, Switching};

fn random_path(grid: Grid, seed: u64) -> PiecewisePath {
    let mut rng = replica_rng(seed, 0);
    let x0 = (0..grid.dim).map(|_| rng.sample(StandardNormal)).collect();
    let c = (0..grid.basis_len()).map(|_| rng.sample(StandardNormal)).collect();
    PiecewisePath::from_coeffs(grid, x0, c).unwrap()
}

#[test]
fn identity_quadrature_oracle() {
    let g = Grid::new(1.0, 4, 2, 1).unwrap();
    let dens = DensityModel::gaussian(1, 1.0).unwrap();
    let r = identity_quadrature_check(&dens, g, 0.25, f64::cos, McParams::new(40_000, 17)).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn switching_pushforward_small_sample() {
    let g = Grid::new(1.0, 4, 2, 1).unwrap();
    let dens = DensityModel::gaussian(1, 1.0).unwrap();
    let m = Switching::new(0.5, 0.1).unwrap();
    let fs: Vec<PathFunctional> = standard_battery();
    let out = pushforward_check(&m, &dens, g, 0.25, &fs, GradientForm::Diagonal, McParams::new(20_000, 18)).unwrap();
    for r in out.reports.iter().chain([&out.normalization]) {
        assert!(r.z.abs() <= 4.0, "{r:?}");
    }
}

#[test]
fn identity_cocycle_is_exact() {
    let g = Grid::new(1.0, 4, 3, 1).unwrap();
    let dens = DensityModel::gaussian(1, 1.0).unwrap();
    let r = cocycle_check(&Identity, &dens, g, 0.25, 0.5, 1e-10, McParams::new(100, 19)).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn extrapolation_reproduces_quadratics() {
    let ts = [0.02, 0.01, 0.005];
    let w = extrapolation_weights(&ts);
    for (k, target) in [(0, 1.0), (1, 0.0), (2, 0.0)] {
        let s: f64 = w.iter().zip(&ts).map(|(w, t)| w * t.powi(k)).sum();
        assert!((s - target).abs() < 1e-9, "power {k}: {s}");
    }
}

#[test]
fn rstar_of_the_bump_at_its_centre() {
    let dens = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
    let r = rstar_estimate(&dens, &[0.02, 0.01, 0.005], &[0.0], 0.2, McParams::new(200_000, 20)).unwrap();
    assert!((r.analytic + 1.0).abs() < 1e-12);
    assert!(r.pass, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // for X = W the density is the plain ratio m(W_{-t}) / m(W_0)
    #[test]
    fn identity_density_is_the_initial_ratio(seed in any::<u64>(), k in 1usize..16) {
        let g = Grid::new(1.0, 4, 2, 2).unwrap();
        let dens = DensityModel::gaussian(2, 1.0).unwrap();
        let p = random_path(g, seed);
        let t = k as f64 * g.step();
        for form in [GradientForm::Diagonal, GradientForm::Determinant] {
            let e = omega_density(&Identity, &dens, &p, t, form).unwrap();
            let want = dens.eval(&p.eval(-t)) / dens.eval(p.x0());
            prop_assert!((e.omega - want).abs() <= 1e-10 * want.max(1.0));
            prop_assert_eq!(e.grad_product, 1.0);
        }
    }

    #[test]
    fn omega_and_rho_agree(seed in any::<u64>()) {
        let g = Grid::new(1.0, 4, 2, 1).unwrap();
        let dens = DensityModel::gaussian(1, 1.0).unwrap();
        let m = Switching::new(0.5, 0.1).unwrap();
        let p = random_path(g, seed);
        let a = omega_density(&m, &dens, &p, 0.25, GradientForm::Diagonal).unwrap();
        let b = rho_density(&m, &dens, &p, 0.25, GradientForm::Diagonal).unwrap();
        prop_assert_eq!(a, b);
    }
}
