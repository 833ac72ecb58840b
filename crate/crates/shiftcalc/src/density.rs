//! Time-shift densities `omega_{-t}` and `rho_{-t}` and the Monte Carlo
//! identities they satisfy.
//!
//! `omega_{-t}(W) = m(X_{-t} - Y_{-t}) / m(W_0) * prod_i |e + grad A_{-t} - grad Y_{-t}|_i`
//! is the density of the law of `W^{-t}` relative to that of `W`; it gives
//! `E[phi(W^t)] = E[phi(W) omega_{-t}(W)]`.

use serde::Serialize;

use crate::basis::{brownian_sample, Grid, PiecewisePath};
use crate::error::{Error, Result};
use crate::mc::{map_replicas, McEstimate, McParams, VerificationReport};
use crate::measure::DensityModel;
use crate::process::{
    jacobian_w0, shift_flow, x_knots, y_process, PathView, ProcessModel, Trajectory, FD_STEP,
};

/// Which determinant replaces the Jacobian of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// Product of the diagonal entries, as in the density formula.
    Diagonal,
    /// `|det|` of the full Jacobian; a diagnostic for models whose
    /// Jacobian is not diagonal.
    Determinant,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEvaluation {
    pub omega: f64,
    pub m_ratio: f64,
    pub grad_product: f64,
    pub exceptional: bool,
}

/// Shared ingredients of `omega` and `rho` at time `-t`.
struct Parts {
    x: Vec<f64>,
    y: Vec<f64>,
    /// `d (A - Y)_i / d x_j`.
    jac: nalgebra::DMatrix<f64>,
    exceptional: bool,
}

fn parts(model: &dyn ProcessModel, path: &PiecewisePath, t: f64, h: f64) -> Result<Parts> {
    let g = path.grid();
    let s = -t;
    let k = g.knot_of(s)?;
    let (xs, traj) = x_knots(model, path)?;
    let d = g.dim;
    let x = xs[k * d..(k + 1) * d].to_vec();
    let a = traj.knot(k).to_vec();
    let y = y_process(model, path, s, &a)?;
    let j = jacobian_w0(model, path, s, h)?;
    let mut jac = j.matrix;
    if !model.anchored() {
        // grad Y by central differences of the fixed point on translated paths
        for col in 0..d {
            let mut e = vec![0.0; d];
            e[col] = h;
            let pp = translate(path, &e)?;
            e[col] = -h;
            let pm = translate(path, &e)?;
            let ap = crate::process::a_and_y(model, &pp, s)?.1;
            let am = crate::process::a_and_y(model, &pm, s)?.1;
            for row in 0..d {
                jac[(row, col)] -= (ap[row] - am[row]) / (2.0 * h);
            }
        }
    }
    Ok(Parts { x, y, jac, exceptional: j.exceptional || traj.is_exceptional() })
}

fn translate(path: &PiecewisePath, by: &[f64]) -> Result<PiecewisePath> {
    let d = path.dim();
    let knots = path.knots().iter().enumerate().map(|(i, w)| w + by[i % d]).collect();
    PiecewisePath::from_knots(*path.grid(), knots)
}

fn assemble(density: &DensityModel, path: &PiecewisePath, p: &Parts, form: GradientForm) -> DensityEvaluation {
    let d = p.x.len();
    let shifted: Vec<f64> = p.x.iter().zip(&p.y).map(|(x, y)| x - y).collect();
    let m_ratio = density.ratio(&shifted, path.x0());
    let grad_product = match form {
        GradientForm::Diagonal => (0..d).map(|i| (1.0 + p.jac[(i, i)]).abs()).product(),
        GradientForm::Determinant => {
            let full = nalgebra::DMatrix::identity(d, d) + &p.jac;
            full.determinant().abs()
        }
    };
    DensityEvaluation { omega: m_ratio * grad_product, m_ratio, grad_product, exceptional: p.exceptional }
}

/// `omega_{-t}(W)`; `t` must be a grid multiple with `-t` in the window.
pub fn omega_density(
    model: &dyn ProcessModel,
    density: &DensityModel,
    path: &PiecewisePath,
    t: f64,
    form: GradientForm,
) -> Result<DensityEvaluation> {
    if t == 0.0 {
        return Ok(DensityEvaluation { omega: 1.0, m_ratio: 1.0, grad_product: 1.0, exceptional: false });
    }
    let p = parts(model, path, t, FD_STEP)?;
    Ok(assemble(density, path, &p, form))
}

/// `rho_{-t}(X)` from the process side: the driving path is kept alongside
/// `X`, so `u^{-1}(X) = W` is available and
/// `rho = m(X_{-t} - Y_{-t}) / m(W_0) * prod |grad X_{-t} - grad Y_{-t}|_i`
/// with `grad X = e + grad A`.
pub fn rho_density(
    model: &dyn ProcessModel,
    density: &DensityModel,
    path: &PiecewisePath,
    t: f64,
    form: GradientForm,
) -> Result<DensityEvaluation> {
    if t == 0.0 {
        return Ok(DensityEvaluation { omega: 1.0, m_ratio: 1.0, grad_product: 1.0, exceptional: false });
    }
    // grad X - grad Y = e + grad (A - Y), the same matrix as for omega
    let p = parts(model, path, t, FD_STEP)?;
    Ok(assemble(density, path, &p, form))
}

/// Jump-decomposed form for piecewise-constant anchored models:
/// `grad A_{-t} = -sum_{tau in (-t, 0]} grad Delta A_tau` for `t > 0`
/// (and `+sum over (0, -t]` for `t < 0`), each jump gradient taken by
/// central differences of the matching jump in the two probes.
pub fn omega_jump_form(
    model: &dyn ProcessModel,
    density: &DensityModel,
    path: &PiecewisePath,
    t: f64,
) -> Result<DensityEvaluation> {
    if !model.a_piecewise_constant() || !model.anchored() {
        return Err(Error::Unsupported("jump form needs an anchored piecewise-constant model".into()));
    }
    let h = FD_STEP;
    let d = path.dim();
    let s = -t;
    let (lo, hi, sign) = if s < 0.0 { (s, 0.0, -1.0) } else { (0.0, s, 1.0) };
    let view = PathView::of(path);
    let base = model.trajectory(&view)?;
    let k = path.grid().knot_of(s)?;
    let x: Vec<f64> = (0..d).map(|i| view.value(k, i) + base.knot(k)[i]).collect();
    let mut diag = vec![1.0; d];
    let mut exceptional = base.is_exceptional();
    let mut e = vec![0.0; d];
    let in_window = |tr: &Trajectory| -> Vec<Vec<f64>> {
        tr.jumps.iter().filter(|j| j.time > lo && j.time <= hi).map(|j| j.delta.clone()).collect()
    };
    for col in 0..d {
        e[col] = h;
        let tp = model.trajectory(&view.translated(&e))?;
        e[col] = -h;
        let tm = model.trajectory(&view.translated(&e))?;
        e[col] = 0.0;
        let (jp, jm) = (in_window(&tp), in_window(&tm));
        if jp.len() != jm.len() || tp.jumps.len() != tm.jumps.len() {
            exceptional = true;
            continue;
        }
        let sum: f64 = jp.iter().zip(&jm).map(|(a, b)| (a[col] - b[col]) / (2.0 * h)).sum();
        diag[col] += sign * sum;
    }
    let m_ratio = density.ratio(&x, path.x0());
    let grad_product = diag.iter().map(|v| v.abs()).product();
    Ok(DensityEvaluation { omega: m_ratio * grad_product, m_ratio, grad_product, exceptional })
}

/// A path functional; it may read the model trajectory of its argument
/// (for jump counts and the like).
pub struct PathFunctional {
    pub name: String,
    #[allow(clippy::type_complexity)]
    f: Box<dyn Fn(&PiecewisePath, &Trajectory) -> f64 + Send + Sync>,
}

impl PathFunctional {
    pub fn new(name: impl Into<String>, f: impl Fn(&PiecewisePath, &Trajectory) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Box::new(f) }
    }

    pub fn eval(&self, path: &PiecewisePath, traj: &Trajectory) -> f64 {
        (self.f)(path, traj)
    }
}

impl std::fmt::Debug for PathFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PathFunctional").field("name", &self.name).finish()
    }
}

/// Standard battery used by the pushforward experiments: the constant, a
/// bounded function of `W_0`, a function of increments and a functional
/// mixing the jump count with a value of `X`.
pub fn standard_battery() -> Vec<PathFunctional> {
    vec![
        PathFunctional::new("one", |_, _| 1.0),
        PathFunctional::new("initial", |p, _| {
            let x = p.x0();
            (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp() * (1.0 + x[0]).cos()
        }),
        PathFunctional::new("increments", |p, _| {
            let a = p.eval_coord(0.5, 0) - p.eval_coord(-0.5, 0);
            let b = p.eval_coord(0.25, p.dim() - 1) - p.eval_coord(0.0, p.dim() - 1);
            (a + 0.5 * b).cos()
        }),
        PathFunctional::new("jumps-and-state", |p, tr| {
            let n = tr.jumps_between(-0.25, 0.25) as f64;
            let g = p.grid();
            let k = g.knot_of(0.25).expect("0.25 lies on the grid");
            let x = p.knot(k)[p.dim() - 1] + tr.knot(k)[p.dim() - 1];
            x.sin() / (1.0 + n)
        }),
    ]
}

/// Per-replica diagnostics written to the optional CSV output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaRecord {
    pub index: usize,
    pub omega: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PushforwardOutcome {
    pub reports: Vec<VerificationReport>,
    /// `E[omega_{-t}] = 1`.
    pub normalization: VerificationReport,
    #[serde(skip)]
    pub replicas: Vec<ReplicaRecord>,
}

/// Exclusion budget for exceptional samples.
pub const MAX_EXCLUSION_RATE: f64 = 0.005;

/// `E[phi(W^t)] = E[phi(W) omega_{-t}(W)]` on common replicas for each
/// functional, plus the normalization `E[omega_{-t}] = 1`.
pub fn pushforward_check(
    model: &dyn ProcessModel,
    density: &DensityModel,
    grid: Grid,
    t: f64,
    functionals: &[PathFunctional],
    form: GradientForm,
    mc: McParams,
) -> Result<PushforwardOutcome> {
    let per: Vec<Result<Option<(Vec<(f64, f64)>, f64)>>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let om = omega_density(model, density, &w, t, form)?;
        if om.exceptional {
            return Ok(None);
        }
        let (_, tr) = x_knots(model, &w)?;
        let sh = shift_flow(model, &w, t)?;
        let (_, trs) = x_knots(model, &sh.path)?;
        if tr.is_exceptional() || trs.is_exceptional() {
            return Ok(None);
        }
        let pairs = functionals.iter().map(|f| (f.eval(&sh.path, &trs), f.eval(&w, &tr) * om.omega)).collect();
        Ok(Some((pairs, om.omega)))
    });
    let mut rows: Vec<Option<(Vec<(f64, f64)>, f64)>> = Vec::with_capacity(per.len());
    for r in per {
        rows.push(r?);
    }
    let name = model.name();
    let reports = functionals
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pairs: Vec<Option<(f64, f64)>> = rows.iter().map(|r| r.as_ref().map(|(p, _)| p[i])).collect();
            VerificationReport::paired(format!("pushforward {name} t={t} {}", f.name), &pairs, mc.seed)
        })
        .collect();
    let norm_pairs: Vec<Option<(f64, f64)>> = rows.iter().map(|r| r.as_ref().map(|(_, om)| (1.0, *om))).collect();
    let normalization = VerificationReport::paired(format!("normalization {name} t={t}"), &norm_pairs, mc.seed);
    let replicas = rows
        .iter()
        .enumerate()
        .map(|(index, r)| ReplicaRecord {
            index,
            omega: r.as_ref().map(|(_, om)| *om).unwrap_or(f64::NAN),
            excluded: r.is_none(),
        })
        .collect();
    Ok(PushforwardOutcome { reports, normalization, replicas })
}

/// Identity model with `phi(W) = g(W_0)`: both sides of the pushforward
/// identity estimated on common replicas, and the exact value
/// `int g(x) (m * N(0, t))(x) dx` by quadrature for a centred Gaussian `m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureOracleReport {
    pub lhs: VerificationReport,
    pub rhs: VerificationReport,
    pub exact: f64,
    pub pass: bool,
}

pub fn identity_quadrature_check(
    density: &DensityModel,
    grid: Grid,
    t: f64,
    g: impl Fn(f64) -> f64 + Sync + Send + Copy,
    mc: McParams,
) -> Result<QuadratureOracleReport> {
    use crate::measure::Profile;
    if grid.dim != 1 {
        return Err(Error::InvalidParameter("the quadrature oracle is one-dimensional".into()));
    }
    let exact = match density.profile() {
        Profile::Gaussian { sd } => crate::quad::gaussian_expectation((sd * sd + t.abs()).sqrt(), g),
        _ => {
            // int g(x) int m(x + z) N(0, t)(dz) dx on the box
            let (a, b) = density.domain()[0];
            let gl = crate::quad::GaussLegendre::new(20);
            gl.composite(a - 10.0 * t.abs().sqrt(), b + 10.0 * t.abs().sqrt(), 200, |x| {
                g(x) * crate::quad::gaussian_expectation(t.abs().sqrt(), |z| density.eval(&[x + z]))
            })
        }
    };
    let model = crate::process::Identity;
    let rows: Vec<Result<(f64, f64)>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let om = omega_density(&model, density, &w, t, GradientForm::Diagonal)?;
        let k = grid.knot_of(t)?;
        Ok((g(w.knot(k)[0]), g(w.x0()[0]) * om.omega))
    });
    let mut l = Vec::with_capacity(rows.len());
    let mut r = Vec::with_capacity(rows.len());
    for row in rows {
        let (a, b) = row?;
        l.push(a);
        r.push(b);
    }
    let lhs = VerificationReport::against_exact("oracle lhs E[g(W_t)]", &l, exact, mc.seed);
    let rhs = VerificationReport::against_exact("oracle rhs E[g(W_0) omega]", &r, exact, mc.seed);
    let pass = lhs.pass && rhs.pass;
    Ok(QuadratureOracleReport { lhs, rhs, exact, pass })
}

/// Pathwise `omega_{-(s+t)}(W)` against `omega_{-t}(W) omega_{-s}(W^{-t})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CocycleSample {
    pub direct: f64,
    pub composed: f64,
    pub relative_defect: f64,
    pub exceptional: bool,
}

pub fn cocycle_sample(
    model: &dyn ProcessModel,
    density: &DensityModel,
    path: &PiecewisePath,
    s: f64,
    t: f64,
) -> Result<CocycleSample> {
    let direct = omega_density(model, density, path, s + t, GradientForm::Diagonal)?;
    let first = omega_density(model, density, path, t, GradientForm::Diagonal)?;
    let shifted = shift_flow(model, path, -t)?;
    let second = omega_density(model, density, &shifted.path, s, GradientForm::Diagonal)?;
    let composed = first.omega * second.omega;
    let scale = direct.omega.abs().max(composed.abs());
    let relative_defect = if scale == 0.0 { 0.0 } else { (direct.omega - composed).abs() / scale };
    Ok(CocycleSample {
        direct: direct.omega,
        composed,
        relative_defect,
        exceptional: direct.exceptional || first.exceptional || second.exceptional,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CocycleReport {
    pub name: String,
    pub paths: usize,
    pub excluded: usize,
    pub max_relative_defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Cocycle defect over `mc.replicas` sampled paths.
pub fn cocycle_check(
    model: &dyn ProcessModel,
    density: &DensityModel,
    grid: Grid,
    s: f64,
    t: f64,
    tolerance: f64,
    mc: McParams,
) -> Result<CocycleReport> {
    let rows: Vec<Result<CocycleSample>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        cocycle_sample(model, density, &w, s, t)
    });
    let mut max = 0.0f64;
    let mut excluded = 0;
    for r in rows {
        let r = r?;
        if r.exceptional {
            excluded += 1;
            continue;
        }
        max = max.max(r.relative_defect);
    }
    Ok(CocycleReport {
        name: format!("cocycle {} s={s} t={t}", model.name()),
        paths: mc.replicas,
        excluded,
        max_relative_defect: max,
        tolerance,
        pass: max <= tolerance,
    })
}

/// A test function on `F` for the pairing identity.
pub struct StateFunction {
    pub name: String,
    #[allow(clippy::type_complexity)]
    f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl StateFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Box::new(f) }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// `E[f(X_t) g(X_0)] = E[f(X_0) g(X_{-t}) rho_{-t}(X)]` on common replicas.
pub fn pairing_check(
    model: &dyn ProcessModel,
    density: &DensityModel,
    grid: Grid,
    pairs: &[(StateFunction, StateFunction)],
    t: f64,
    form: GradientForm,
    mc: McParams,
) -> Result<Vec<VerificationReport>> {
    let d = grid.dim;
    let rows: Vec<Result<Option<Vec<(f64, f64)>>>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let rho = rho_density(model, density, &w, t, form)?;
        if rho.exceptional {
            return Ok(None);
        }
        let (x, _) = x_knots(model, &w)?;
        let at = |s: f64| -> Result<&[f64]> {
            let k = grid.knot_of(s)?;
            Ok(&x[k * d..(k + 1) * d])
        };
        let (xt, x0, xm) = (at(t)?, at(0.0)?, at(-t)?);
        Ok(Some(pairs.iter().map(|(f, g)| (f.eval(xt) * g.eval(x0), f.eval(x0) * g.eval(xm) * rho.omega)).collect()))
    });
    let mut table = Vec::with_capacity(rows.len());
    for r in rows {
        table.push(r?);
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, (f, g))| {
            let col: Vec<Option<(f64, f64)>> = table.iter().map(|r| r.as_ref().map(|v| v[i])).collect();
            VerificationReport::paired(format!("pairing {} t={t} f={} g={}", model.name(), f.name, g.name), &col, mc.seed)
        })
        .collect())
}

/// The standard `(f, g)` pairs: constants, and two bounded smooth pairs.
pub fn standard_pairs() -> Vec<(StateFunction, StateFunction)> {
    vec![
        (StateFunction::new("one", |_| 1.0), StateFunction::new("one", |_| 1.0)),
        (
            StateFunction::new("gauss", |x| (-x.iter().map(|v| v * v).sum::<f64>()).exp()),
            StateFunction::new("cos", |x| x[0].cos()),
        ),
        (
            StateFunction::new("atan", |x| x[x.len() - 1].atan()),
            StateFunction::new("bump", |x| 1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>())),
        ),
    ]
}

/// Estimates of `r* = (1/2) Laplacian m / m` at `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RStarReport {
    pub ts: Vec<f64>,
    pub estimates: Vec<McEstimate>,
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub analytic: f64,
    pub relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Weights `w_i` with `sum_i w_i f(t_i) = p(0)` for the interpolating
/// polynomial `p` through the nodes.
pub fn extrapolation_weights(ts: &[f64]) -> Vec<f64> {
    (0..ts.len())
        .map(|i| {
            ts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &tj)| tj / (tj - ts[i]))
                .product()
        })
        .collect()
}

/// `(1/t)(E[m(x + W_t)] / m(x) - 1)` for each `t` on common normal draws,
/// polynomially extrapolated to `t = 0`.
pub fn rstar_estimate(density: &DensityModel, ts: &[f64], x: &[f64], tolerance: f64, mc: McParams) -> Result<RStarReport> {
    use rand_distr::{Distribution, StandardNormal};
    if ts.len() < 2 || ts.iter().any(|&t| t <= 0.0) {
        return Err(Error::InvalidParameter("extrapolation needs at least two positive times".into()));
    }
    let analytic = density.half_laplacian_ratio(x)?;
    let d = x.len();
    let rows: Vec<Vec<f64>> = map_replicas(mc, |_, rng| {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        ts.iter()
            .map(|&t| {
                let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + t.sqrt() * b).collect();
                (density.ratio(&y, x) - 1.0) / t
            })
            .collect()
    });
    let weights = extrapolation_weights(ts);
    let estimates: Vec<McEstimate> = (0..ts.len())
        .map(|i| McEstimate::from_samples(&rows.iter().map(|r| r[i]).collect::<Vec<_>>(), mc.seed))
        .collect();
    let combined: Vec<f64> = rows.iter().map(|r| r.iter().zip(&weights).map(|(v, w)| v * w).sum()).collect();
    let ex = McEstimate::from_samples(&combined, mc.seed);
    let relative_error = if analytic != 0.0 { ((ex.mean - analytic) / analytic).abs() } else { ex.mean.abs() };
    Ok(RStarReport {
        ts: ts.to_vec(),
        estimates,
        extrapolated: ex.mean,
        extrapolated_stderr: ex.stderr,
        analytic,
        relative_error,
        tolerance,
        pass: relative_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::Identity;

    #[test]
    fn bump_ratio_example() {
        let m = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
        let g = Grid::new(1.0, 3, 2, 1).unwrap();
        let knots: Vec<f64> = (0..g.n_knots()).map(|k| if g.knot_time(k) <= -0.5 { 0.2 } else { 0.0 }).collect();
        let p = PiecewisePath::from_knots(g, knots).unwrap();
        let o = omega_density(&Identity, &m, &p, 0.5, GradientForm::Diagonal).unwrap();
        assert!((o.omega - (1.0f64 - 1.0 / 0.96).exp()).abs() < 1e-12);
        assert_eq!(omega_density(&Identity, &m, &p, 0.0, GradientForm::Diagonal).unwrap().omega, 1.0);
    }

    #[test]
    fn richardson_weights() {
        let w = extrapolation_weights(&[0.02, 0.01, 0.005]);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((w[1] + 2.0).abs() < 1e-12);
        assert!((w[2] - 8.0 / 3.0).abs() < 1e-12);
    }
}
