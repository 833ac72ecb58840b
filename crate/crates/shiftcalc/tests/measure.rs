use proptest::prelude::*;

use shiftcalc::mc::replica_rng;
use shiftcalc::measure::*;

fn ks_stat(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn bump_samples_follow_the_marginal() {
    let m = DensityModel::bump(&[(-1.0, 1.0), (0.0, 2.0)]).unwrap();
    let mut rng = replica_rng(11, 0);
    let xs: Vec<Vec<f64>> = (0..5000).map(|_| m.sample(&mut rng).unwrap()).collect();
    for j in 0..2 {
        let d = ks_stat(xs.iter().map(|x| x[j]).collect(), |x| m.marginal_cdf(j, x));
        // 1% critical value is 1.63 / sqrt(n)
        assert!(d < 1.63 / (5000f64).sqrt(), "coordinate {j}: {d}");
    }
}

#[test]
fn particle_factor_sampler_matches_its_cdf() {
    let m = ParticleDensity::new(BaseDensity::Sine { amplitude: 0.3, k: 1 }, 0.5, 4).unwrap();
    let inv = InverseCdf::new(|x| m.factor(x), 4096);
    let mut rng = replica_rng(12, 0);
    let xs: Vec<f64> = (0..5000).map(|_| inv.sample(&mut rng)).collect();
    let gl_cdf = |x: f64| {
        let k = 2000;
        let h = x / k as f64;
        (0..k).map(|i| m.factor((i as f64 + 0.5) * h) * h).sum::<f64>()
    };
    let total = gl_cdf(1.0);
    let d = ks_stat(xs, |x| gl_cdf(x) / total);
    assert!(d < 1.63 / (5000f64).sqrt(), "{d}");
}

#[test]
fn bump_conditions_hold() {
    let r = DensityModel::bump(&[(-1.0, 1.0), (0.0, 1.0)]).unwrap().check_conditions().unwrap();
    assert!(r.normalization_error < 1e-8, "{r:?}");
    assert!(r.min_interior_value > 0.0 && r.log_grad_moment.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_agrees_with_eval(x in -0.9f64..0.9, y in -0.9f64..0.9) {
        let m = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
        let r = m.ratio(&[x], &[y]);
        prop_assert!((r - m.eval(&[x]) / m.eval(&[y])).abs() <= 1e-9 * r.max(1.0));
    }

    #[test]
    fn particle_density_is_a_product(x in proptest::collection::vec(0.01f64..0.99, 3)) {
        let m = ParticleDensity::new(BaseDensity::Sine { amplitude: 0.3, k: 1 }, 0.5, 3).unwrap();
        let prod: f64 = x.iter().map(|&v| m.factor(v)).product();
        prop_assert!((m.eval(&x).unwrap() - prod).abs() <= 1e-12 * prod);
    }

    #[test]
    fn particle_gradient_matches_differences(x in proptest::collection::vec(0.05f64..0.95, 2)) {
        let m = ParticleDensity::new(BaseDensity::Sine { amplitude: 0.3, k: 1 }, 0.5, 2).unwrap();
        let g = m.grad(&x).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (m.eval(&up).unwrap() - m.eval(&dn).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() < 1e-6);
        }
    }
}
