use proptest::prelude::*;

use shiftcalc::basis::{brownian_sample, BasisIndex, Grid, HElement};
use shiftcalc::malliavin::*;
use shiftcalc::mc::{replica_rng, McParams};
use shiftcalc::measure::DensityModel;

fn setup() -> (Grid, DensityModel) {
    (Grid::new(1.0, 4, 2, 2).unwrap(), DensityModel::bump(&[(-1.0, 1.0), (-1.0, 1.0)]).unwrap())
}

#[test]
fn coefficient_gradient_is_the_basis_element() {
    let (g, dens) = setup();
    let idx = BasisIndex::haar(0, 1, 2, 1);
    let w = brownian_sample(g, &dens, &mut replica_rng(1, 0)).unwrap();
    let d = gradient(&CylindricalFunctional::coefficient(idx), &w).unwrap();
    assert_eq!(d, HElement::basis(g, &idx).unwrap());
    // delta(H_i) is the coefficient itself
    assert_eq!(divergence(&d, &w, &dens).unwrap(), w.coeff(&idx).unwrap());
}

#[test]
fn duality_battery_small_sample() {
    let (g, dens) = setup();
    for (i, (phi, h)) in duality_battery(g).unwrap().iter().enumerate() {
        let r = duality_check(phi, h, &dens, g, McParams::new(20_000, 30 + i as u64)).unwrap();
        assert!(r.z.abs() <= 4.0, "{r:?}");
    }
}

#[test]
fn product_rule_is_exact() {
    let (g, dens) = setup();
    let dirs = product_rule_directions(g).unwrap();
    let r = product_rule_check(&dirs, &dens, g, 1e-10, McParams::new(100, 2)).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn cameron_martin_small_sample() {
    let g = Grid::new(1.0, 6, 2, 1).unwrap();
    let dens = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
    let h = cameron_martin_direction(g).unwrap();
    for r in cameron_martin_check(&cameron_martin_battery(), &h, &dens, McParams::new(20_000, 4)).unwrap() {
        assert!(r.z.abs() <= 4.0, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn divergence_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, i in 0usize..64, j in 0usize..64) {
        let (g, dens) = setup();
        let w = brownian_sample(g, &dens, &mut replica_rng(seed, 0)).unwrap();
        let u = HElement::basis(g, &g.index_at(i % g.basis_len())).unwrap().add(&HElement::initial(g, 0));
        let v = HElement::basis(g, &g.index_at(j % g.basis_len())).unwrap();
        let lhs = divergence(&u.scale(a).add(&v), &w, &dens).unwrap();
        let rhs = a * divergence(&u, &w, &dens).unwrap() + divergence(&v, &w, &dens).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn cm_factors_compose(seed in any::<u64>(), a in -0.3f64..0.3, b in -0.3f64..0.3) {
        let g = Grid::new(1.0, 4, 2, 1).unwrap();
        let dens = DensityModel::gaussian(1, 1.0).unwrap();
        let w = brownian_sample(g, &dens, &mut replica_rng(seed, 0)).unwrap();
        let h = HElement::basis(g, &g.index_at(1)).unwrap().scale(a).add(&HElement::initial(g, 0).scale(b));
        let k = HElement::basis(g, &g.index_at(3)).unwrap().scale(b);
        prop_assert!(cm_group_defect(&w, &h, &k, &dens).unwrap() <= 1e-9);
    }

    #[test]
    fn battery_gradients_match_differences(x in proptest::collection::vec(-0.8f64..0.8, 4)) {
        let (g, _) = setup();
        for (phi, _) in duality_battery(g).unwrap() {
            let args = &x[..phi.arity()];
            prop_assert!(phi.gradient_fd_gap(args, 1e-6) < 1e-6, "{}", phi.name);
        }
    }
}
