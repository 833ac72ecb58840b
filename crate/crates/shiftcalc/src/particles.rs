//! `n`-particle systems driven by the pairwise collision model, functionals
//! of the empirical measure and the modulus `gamma_n(delta)` behind the
//! relative-compactness argument.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::basis::{Grid, PiecewisePath};
use crate::error::{Error, Result};
use crate::mc::{map_replicas, McEstimate, McParams, VerificationReport};
use crate::measure::{InverseCdf, ParticleDensity};
use crate::process::{Collision, JumpRule, PathView, ProcessModel, Trajectory};
use crate::quad::{normal_pdf, GaussLegendre};

/// Initial law of the positions; velocity bands start standard normal.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    /// `m_n`, a product of one-particle factors.
    Particle(ParticleDensity),
    /// Every particle at the same position.
    Point(f64),
}

/// Sampler for an [`InitialLaw`], built once per scan.
#[derive(Debug, Clone)]
pub struct InitialSampler {
    inv: Option<InverseCdf>,
    point: f64,
}

impl InitialSampler {
    pub fn new(law: &InitialLaw) -> Self {
        match law {
            InitialLaw::Particle(m) => {
                let m = m.clone();
                Self { inv: Some(InverseCdf::new(move |x| m.factor(x), 4096)), point: 0.0 }
            }
            InitialLaw::Point(x) => Self { inv: None, point: *x },
        }
    }

    fn position<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.inv {
            Some(inv) => inv.sample(rng),
            None => self.point,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleParams {
    pub eps: f64,
    pub refractory: f64,
    pub rule: JumpRule,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self { eps: 0.1, refractory: 0.05, rule: JumpRule::Swap }
    }
}

/// One simulated system: the driving path, its collision trajectory and
/// the exclusion flag.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub n: usize,
    pub path: PiecewisePath,
    pub traj: Trajectory,
    /// Two pairs wanted to jump in the same grid step, or the jump budget
    /// overflowed.
    pub excluded: bool,
}

impl ParticleEnsemble {
    /// `(q_i, p_i)` of particle `i` at knot `k`.
    pub fn state(&self, k: usize, i: usize) -> [f64; 2] {
        let w = self.path.knot(k);
        let a = self.traj.knot(k);
        [w[2 * i] + a[2 * i], w[2 * i + 1] + a[2 * i + 1]]
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.traj.jumps.iter().map(|j| j.time).collect()
    }
}

pub fn collision_for(n: usize, params: &EnsembleParams) -> Result<Collision> {
    Collision::new(n, params.eps, params.refractory, params.rule)
}

/// Simulates the `n`-particle system from a given driving path.
pub fn ensemble_from_path(n: usize, params: &EnsembleParams, path: PiecewisePath) -> Result<ParticleEnsemble> {
    let model = collision_for(n, params)?;
    if path.dim() != 2 * n {
        return Err(Error::InvalidParameter(format!("{n} particles need a path of dimension {}", 2 * n)));
    }
    let traj = model.trajectory(&PathView::of(&path))?;
    let excluded = traj.is_exceptional();
    Ok(ParticleEnsemble { n, path, traj, excluded })
}

/// Draws the initial configuration and Haar coefficients, then simulates.
pub fn simulate_ensemble<R: Rng + ?Sized>(
    n: usize,
    params: &EnsembleParams,
    init: &InitialSampler,
    grid: Grid,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    if n == 0 || n > 32 {
        return Err(Error::InvalidParameter(format!("particle count {n} outside 1..=32")));
    }
    if grid.dim != 2 * n {
        return Err(Error::InvalidParameter(format!("{n} particles need grid dimension {}", 2 * n)));
    }
    let mut x0 = Vec::with_capacity(2 * n);
    for _ in 0..n {
        x0.push(init.position(rng));
        x0.push(rng.sample(StandardNormal));
    }
    let coeffs = (0..grid.basis_len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let path = PiecewisePath::from_coeffs(grid, x0, coeffs)?;
    ensemble_from_path(n, params, path)
}

type StateFn = Box<dyn Fn(&[f64; 2]) -> f64 + Send + Sync>;
type OuterFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `F(mu) = phi((g_1, mu), ..., (g_k, mu))` with the norms entering the
/// `diam(D)/n` term of the modulus bound.
pub struct EmpiricalFunctional {
    pub name: String,
    gs: Vec<StateFn>,
    phi: OuterFn,
    /// `sup |F|`.
    pub f_norm: f64,
    /// `sup |grad phi|`.
    pub grad_phi_norm: f64,
    /// `sup |grad g_j|` for each `j`.
    pub grad_g_norms: Vec<f64>,
}

impl std::fmt::Debug for EmpiricalFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmpiricalFunctional").field("name", &self.name).finish()
    }
}

impl EmpiricalFunctional {
    pub fn new(
        name: impl Into<String>,
        gs: Vec<StateFn>,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        f_norm: f64,
        grad_phi_norm: f64,
        grad_g_norms: Vec<f64>,
    ) -> Self {
        Self { name: name.into(), gs, phi: Box::new(phi), f_norm, grad_phi_norm, grad_g_norms }
    }

    /// `tanh((sin q, mu))`.
    pub fn standard() -> Self {
        Self::new("tanh(<sin q, mu>)", vec![Box::new(|x| x[0].sin())], |v| v[0].tanh(), 1.0, 1.0, vec![1.0])
    }

    /// `(q, mu)`, the mean position.
    pub fn mean_position() -> Self {
        Self::new("<q, mu>", vec![Box::new(|x| x[0])], |v| v[0], f64::INFINITY, 1.0, vec![1.0])
    }

    /// Value at the empirical measure of the given particle states.
    pub fn eval_states(&self, states: &[[f64; 2]]) -> f64 {
        let n = states.len() as f64;
        let moments: Vec<f64> = self.gs.iter().map(|g| states.iter().map(g).sum::<f64>() / n).collect();
        (self.phi)(&moments)
    }

    /// `diam(D)/n * 4 ||f|| ||grad phi|| sum_j ||grad g_j||`.
    pub fn diam_term(&self, n: usize, diam: f64) -> f64 {
        diam / n as f64 * 4.0 * self.f_norm * self.grad_phi_norm * self.grad_g_norms.iter().sum::<f64>()
    }
}

/// `F(mu_t)` with `mu_t = (1/n) sum_i delta_{X_i(t)}`; `t` on the grid.
pub fn empirical_value(ens: &ParticleEnsemble, f: &EmpiricalFunctional, t: f64) -> Result<f64> {
    let k = ens.path.grid().knot_of(t)?;
    Ok(value_at_knot(ens, f, k))
}

fn value_at_knot(ens: &ParticleEnsemble, f: &EmpiricalFunctional, k: usize) -> f64 {
    let states: Vec<[f64; 2]> = (0..ens.n).map(|i| ens.state(k, i)).collect();
    f.eval_states(&states)
}

/// Start times over which `gamma` takes its supremum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StartWindow {
    /// Every grid time with `t + delta` inside the window.
    All,
    /// `t = 0` only.
    Zero,
}

/// `gamma(delta) = sup_{t, 0 <= u <= delta} (F(mu_{t+u}) - F(mu_t))^2` over
/// grid times in `[0, horizon]`, for each `delta` (grid multiples).
pub fn modulus_gamma(
    ens: &ParticleEnsemble,
    f: &EmpiricalFunctional,
    deltas: &[f64],
    horizon: f64,
    starts: StartWindow,
) -> Result<Vec<f64>> {
    let g = ens.path.grid();
    let k0 = g.knot_of(0.0)?;
    let k1 = g.knot_of(horizon)?;
    let vals: Vec<f64> = (k0..=k1).map(|k| value_at_knot(ens, f, k)).collect();
    let mut out = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let lag = (d / g.step()).round() as usize;
        if (lag as f64 * g.step() - d).abs() > 1e-9 {
            return Err(Error::NonGridShift(d));
        }
        let last_start = match starts {
            StartWindow::All => vals.len() - 1,
            StartWindow::Zero => 0,
        };
        let mut best = 0.0f64;
        for a in 0..=last_start {
            for b in a..=(a + lag).min(vals.len() - 1) {
                best = best.max((vals[b] - vals[a]).powi(2));
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanEntry {
    pub n: usize,
    pub delta: f64,
    pub estimate: McEstimate,
    pub excluded: usize,
    pub diam_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompactnessScan {
    pub functional: String,
    pub entries: Vec<ScanEntry>,
    /// For each `n`: the table decreases as `delta` decreases.
    pub decreasing: Vec<(usize, bool)>,
    pub all_nonnegative: bool,
}

/// `E[gamma_n(delta)]` over `(n, delta)`, initial positions from `m_n`.
#[allow(clippy::too_many_arguments)]
pub fn compactness_scan(
    ns: &[usize],
    deltas: &[f64],
    f: &EmpiricalFunctional,
    params: &EnsembleParams,
    law: impl Fn(usize) -> Result<InitialLaw>,
    grid_of: impl Fn(usize) -> Result<Grid>,
    horizon: f64,
    mc: McParams,
) -> Result<CompactnessScan> {
    let mut entries = Vec::new();
    let mut decreasing = Vec::new();
    for &n in ns {
        let grid = grid_of(n)?;
        let sampler = InitialSampler::new(&law(n)?);
        let rows: Vec<Result<Option<Vec<f64>>>> = map_replicas(mc, |_, rng| {
            let ens = simulate_ensemble(n, params, &sampler, grid, rng)?;
            if ens.excluded {
                return Ok(None);
            }
            modulus_gamma(&ens, f, deltas, horizon, StartWindow::All).map(Some)
        });
        let rows: Vec<Option<Vec<f64>>> = rows.into_iter().collect::<Result<_>>()?;
        let kept: Vec<&Vec<f64>> = rows.iter().flatten().collect();
        let excluded = rows.len() - kept.len();
        let mut means = Vec::new();
        for (i, &d) in deltas.iter().enumerate() {
            let col: Vec<f64> = kept.iter().map(|r| r[i]).collect();
            let est = McEstimate::from_samples(&col, mc.seed);
            means.push((d, est.mean));
            entries.push(ScanEntry { n, delta: d, estimate: est, excluded, diam_term: f.diam_term(n, 1.0) });
        }
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        decreasing.push((n, means.windows(2).all(|w| w[0].1 < w[1].1)));
    }
    let all_nonnegative = entries.iter().all(|e| e.estimate.mean >= 0.0);
    Ok(CompactnessScan { functional: f.name.clone(), entries, decreasing, all_nonnegative })
}

/// `E[max_{0 <= k <= steps} S_k^2]` for a Gaussian random walk with unit
/// step variance, `S_0 = 0`, by Nystrom propagation of the killed density
/// on `[-a, a]` and `E[M^2] = int 2a P(M > a) da`.
pub fn discrete_walk_max_sq(steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    let gl = GaussLegendre::new(16);
    let a_max = 7.0 * (steps as f64).sqrt() + 4.0;
    let survive = |a: f64| -> f64 {
        let (xs, ws) = gl.composite_rule(-a, a, (a.ceil() as usize).max(2));
        let kernel: Vec<Vec<f64>> =
            xs.iter().map(|&x| xs.iter().zip(&ws).map(|(&y, &w)| w * normal_pdf(x - y)).collect()).collect();
        let mut u: Vec<f64> = xs.iter().map(|&x| normal_pdf(x)).collect();
        for _ in 1..steps {
            u = kernel.iter().map(|row| row.iter().zip(&u).map(|(k, v)| k * v).sum()).collect();
        }
        u.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>()
    };
    gl.composite(0.0, a_max, 16, |a| 2.0 * a * (1.0 - survive(a).min(1.0)))
}

/// `E[sup_{[0,1]} |W|^2]` from the reflection-principle series
/// `P(sup |W| < a) = (4/pi) sum_k (-1)^k / (2k+1) exp(-(2k+1)^2 pi^2 / (8 a^2))`.
pub fn reflection_sup_sq() -> f64 {
    use std::f64::consts::PI;
    let below = |a: f64| -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        // the series converges slowly for small a; there the complement is
        // bounded by 2 P(|W_1| >= a) and the probability is negligible
        if a < 0.15 {
            return 0.0;
        }
        let mut s = 0.0;
        for k in 0..200 {
            let m = (2 * k + 1) as f64;
            let term = (-m * m * PI * PI / (8.0 * a * a)).exp() / m;
            s += if k % 2 == 0 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (4.0 / PI * s).clamp(0.0, 1.0)
    };
    GaussLegendre::new(20).composite(0.0, 10.0, 200, |a| 2.0 * a * (1.0 - below(a)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleParticleOracle {
    pub delta: f64,
    pub report: VerificationReport,
    /// Exact grid value `step * E[max_{k <= delta/step} S_k^2]`.
    pub discrete_oracle: f64,
    /// Continuous-time value `delta * E[sup_{[0,1]} |W|^2]`, an upper bound.
    pub reflection_bound: f64,
    /// The same samples against `reflection_bound`; off by the grid bias.
    pub reflection: VerificationReport,
}

/// One free particle, `F(mu) = (q, mu)`, start window `{0}`: the grid
/// modulus against both the discrete oracle and the continuous
/// reflection value.
pub fn single_particle_oracle(grid: Grid, delta: f64, mc: McParams) -> Result<SingleParticleOracle> {
    if grid.dim != 2 {
        return Err(Error::InvalidParameter("one particle needs grid dimension 2".into()));
    }
    let f = EmpiricalFunctional::mean_position();
    let params = EnsembleParams::default();
    let sampler = InitialSampler::new(&InitialLaw::Point(0.5));
    let rows: Vec<Result<f64>> = map_replicas(mc, |_, rng| {
        let ens = simulate_ensemble(1, &params, &sampler, grid, rng)?;
        Ok(modulus_gamma(&ens, &f, &[delta], delta, StartWindow::Zero)?[0])
    });
    let samples: Vec<f64> = rows.into_iter().collect::<Result<_>>()?;
    let steps = (delta / grid.step()).round() as usize;
    let discrete_oracle = grid.step() * discrete_walk_max_sq(steps);
    let report = VerificationReport::against_exact(format!("gamma_1({delta}) start 0"), &samples, discrete_oracle, mc.seed);
    let reflection_bound = delta * reflection_sup_sq();
    let reflection = VerificationReport::against_exact(format!("gamma_1({delta}) reflection"), &samples, reflection_bound, mc.seed);
    Ok(SingleParticleOracle { delta, report, discrete_oracle, reflection_bound, reflection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::replica_rng;

    #[test]
    fn diam_term_example() {
        let f = EmpiricalFunctional::new("unit", vec![Box::new(|x| x[0])], |v| v[0], 1.0, 1.0, vec![1.0]);
        assert!((f.diam_term(10, 1.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_particle_never_jumps() {
        let g = Grid::new(1.0, 4, 2, 2).unwrap();
        let s = InitialSampler::new(&InitialLaw::Point(0.5));
        let ens = simulate_ensemble(1, &EnsembleParams::default(), &s, g, &mut replica_rng(1, 0)).unwrap();
        assert!(ens.traj.jumps.is_empty());
        assert!(ens.traj.a.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn walk_oracle_small_cases() {
        assert!((discrete_walk_max_sq(1) - 1.0).abs() < 1e-8);
        // max(a, b) = (a + b)/2 + |a - b|/2 and |S_1^2 - S_2^2| = |Z_2| |2 Z_1 + Z_2|
        let exact = 1.5 + (2.0 + (0.2f64).sqrt().asin()) / std::f64::consts::PI;
        assert!((discrete_walk_max_sq(2) - exact).abs() < 1e-6, "{}", discrete_walk_max_sq(2));
        // Monte Carlo with 2e6 walks gives 24.213 +- 0.017
        assert!((discrete_walk_max_sq(16) - 24.21).abs() < 0.06, "{}", discrete_walk_max_sq(16));
    }

    #[test]
    fn modulus_is_monotone_in_delta() {
        let g = Grid::new(1.0, 5, 2, 8).unwrap();
        let m = ParticleDensity::new(crate::measure::BaseDensity::Sine { amplitude: 0.3, k: 1 }, 0.5, 4).unwrap();
        let s = InitialSampler::new(&InitialLaw::Particle(m));
        let f = EmpiricalFunctional::standard();
        for seed in 0..20 {
            let ens = simulate_ensemble(4, &EnsembleParams::default(), &s, g, &mut replica_rng(seed, 0)).unwrap();
            let d = [0.0, 1.0 / 32.0, 1.0 / 16.0, 0.25, 0.5];
            let v = modulus_gamma(&ens, &f, &d, 1.0, StartWindow::All).unwrap();
            assert_eq!(v[0], 0.0);
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
