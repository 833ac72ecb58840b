use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use shiftcalc::basis::*;
use shiftcalc::mc::{replica_rng, McEstimate};
use shiftcalc::measure::DensityModel;

fn random_path(grid: Grid, seed: u64) -> PiecewisePath {
    let mut rng = replica_rng(seed, 0);
    let x0 = (0..grid.dim).map(|_| rng.sample(StandardNormal)).collect();
    let c = (0..grid.basis_len()).map(|_| rng.sample(StandardNormal)).collect();
    PiecewisePath::from_coeffs(grid, x0, c).unwrap()
}

// Levy-Ciesielski: standard normal coefficients give Brownian increments.
#[test]
fn sampled_increments_have_brownian_variance() {
    let g = Grid::new(1.0, 4, 2, 1).unwrap();
    let dens = DensityModel::gaussian(1, 1.0).unwrap();
    let (a, b) = (0.25, 0.75);
    let xs: Vec<f64> = (0..20_000)
        .map(|i| {
            let p = brownian_sample(g, &dens, &mut replica_rng(5, i)).unwrap();
            let d = p.eval(b)[0] - p.eval(a)[0];
            d * d
        })
        .collect();
    let est = McEstimate::from_samples(&xs, 5);
    assert!((est.mean - (b - a)).abs() < 4.0 * est.stderr, "{est:?}");
}

#[test]
fn basis_algebra_holds_on_a_small_set() {
    let r = basis_algebra_check(2, 1, 2, 20, 3, 1e-10).unwrap();
    assert!(r.pass, "{r:?}");
    assert_eq!(r.indices, IndexSet::window(2, 2, 1).unwrap().len());
}

#[test]
fn basis_elements_are_unit_vectors_in_h() {
    let g = Grid::new(1.0, 3, 2, 2).unwrap();
    for i in 0..g.basis_len() {
        let h = HElement::basis(g, &g.index_at(i)).unwrap();
        assert!((h.norm_sq() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coefficients_roundtrip(m in 1u32..5, r in 1u32..3, dim in 1usize..3, seed in any::<u64>()) {
        let g = Grid::new(1.0, m, r, dim).unwrap();
        let p = random_path(g, seed);
        for i in 0..g.basis_len() {
            let c = p.coeff(&g.index_at(i)).unwrap();
            prop_assert!((c - p.coeffs()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_is_idempotent(m in 2u32..5, r in 1u32..3, seed in any::<u64>()) {
        let g = Grid::new(1.0, m, r, 1).unwrap();
        let p = random_path(g, seed);
        let once = project_path(&p, m - 1, r);
        let twice = project_path(&once, m - 1, r);
        for (a, b) in once.knots().iter().zip(twice.knots()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn jump_integrals_sum_to_zero(m in 1u32..5, seed in any::<u64>()) {
        let g = Grid::new(1.0, m, 2, 2).unwrap();
        prop_assert!(zero_sum_check(&random_path(g, seed)) <= 1e-10);
    }

    #[test]
    fn h_inner_product_is_bilinear(seed in any::<u64>(), a in -3.0f64..3.0) {
        let g = Grid::new(1.0, 3, 2, 2).unwrap();
        let u = HElement::from_path(&random_path(g, seed));
        let v = HElement::from_path(&random_path(g, seed ^ 1));
        let w = HElement::from_path(&random_path(g, seed ^ 2));
        let lhs = u.scale(a).add(&v).inner(&w);
        let rhs = a * u.inner(&w) + v.inner(&w);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        prop_assert!((u.inner(&v) - v.inner(&u)).abs() < 1e-12);
    }
}
