//! Mollified approximations of `A` and `Y`: the kernels `g_n` (time) and
//! `gamma_n` (space), the smoothed processes `B_{n,s}`, `C_{n,s}`, and the
//! ODE flow `phi' = C'_{n,0}(phi 1 + W_{. + s})` that produces the
//! continuous approximations `A_n = D_n + B_{n,0}(W^{n,.})`,
//! `Y_n = B_{n,0}(W^{n,.})`.
//!
//! `C'_{n,0}` is evaluated by moving the time derivative onto `g_n`. For a
//! piecewise-constant `A` summation by parts turns it into
//! `sum_k g_n(-tau_k) Delta A_{tau_k}`; for continuous `A` the integral
//! `int A_u g_n'(-u) du` is done segment by segment.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::{brownian_sample, Grid, PiecewisePath};
use crate::error::{Error, Result};
use crate::mc::{map_items, replica_rng};
use crate::measure::{bump_norm, DensityModel};
use crate::process::{shift_path, PathView, ProcessModel, Trajectory};
use crate::quad::GaussLegendre;

fn f(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

fn f_prime(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let w = 1.0 - u * u;
        f(u) * (-2.0 * u / (w * w))
    }
}

fn gamma_half(d: usize) -> f64 {
    let mut x = if d % 2 == 0 { 1.0 } else { 0.5 };
    let mut g = if d % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    while x < d as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Dimensions up to which the spatial convolution uses the `3^d` stencil.
pub const STENCIL_MAX_DIM: usize = 4;
/// Node count of the Monte Carlo spatial rule in higher dimension.
pub const MC_NODES: usize = 64;

/// `g_n(s) = n f(n s) / c` on `(-1/n, 1/n)` and
/// `gamma_n(x) = n^{3d} f(n^3 |x|) / c_d` on the ball of radius `1/n^3`,
/// with `f(u) = exp(-1 / (1 - u^2))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MollifierPair {
    pub n: u32,
    pub dim: usize,
    /// `int f` over `(-1, 1)`.
    pub c_time: f64,
    /// `int f(|x|) dx` over the unit ball of `R^dim`.
    pub c_space: f64,
    /// Spatial quadrature nodes and weights (weights sum to one).
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Time,
    Space,
}

impl MollifierPair {
    pub fn new(n: u32, dim: usize) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::InvalidParameter("mollifier index and dimension must be positive".into()));
        }
        let gl = GaussLegendre::new(20);
        let sphere = 2.0 * std::f64::consts::PI.powf(dim as f64 / 2.0) / gamma_half(dim);
        let c_space = sphere * gl.composite(0.0, 1.0, 40, |r| f(r) * r.powi(dim as i32 - 1));
        let mut pair = Self { n, dim, c_time: bump_norm(), c_space, nodes: Vec::new(), weights: Vec::new() };
        pair.build_rule();
        Ok(pair)
    }

    pub fn time_radius(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn space_radius(&self) -> f64 {
        (self.n as f64).powi(-3)
    }

    fn build_rule(&mut self) {
        let rho = self.space_radius();
        let d = self.dim;
        if d <= STENCIL_MAX_DIM {
            let pts = [-2.0 * rho / 3.0, 0.0, 2.0 * rho / 3.0];
            let total = 3usize.pow(d as u32);
            for mut code in 0..total {
                let mut x = vec![0.0; d];
                for xi in x.iter_mut() {
                    *xi = pts[code % 3];
                    code /= 3;
                }
                let w = self.space(&x);
                if w > 0.0 {
                    self.nodes.push(x);
                    self.weights.push(w);
                }
            }
        } else {
            // rejection draws from gamma_n, fixed seed per (n, d)
            let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f_6c6c ^ ((self.n as u64) << 8) ^ d as u64);
            while self.nodes.len() < MC_NODES {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-rho..rho)).collect();
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt() / rho;
                if rng.random::<f64>() < f(r) / f(0.0) {
                    self.nodes.push(x);
                    self.weights.push(1.0);
                }
            }
        }
        let s: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= s);
    }

    /// `g_n(s)`.
    pub fn time(&self, s: f64) -> f64 {
        let n = self.n as f64;
        n * f(n * s) / self.c_time
    }

    /// `g_n'(s)`.
    pub fn time_deriv(&self, s: f64) -> f64 {
        let n = self.n as f64;
        n * n * f_prime(n * s) / self.c_time
    }

    /// `int_{-inf}^s g_n`.
    pub fn time_cdf(&self, s: f64) -> f64 {
        let u = s * self.n as f64;
        if u <= -1.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let gl = GaussLegendre::new(20);
        if u <= 0.0 {
            gl.composite(-1.0, u, 16, f) / self.c_time
        } else {
            1.0 - gl.composite(u, 1.0, 16, f) / self.c_time
        }
    }

    /// `gamma_n(x)`.
    pub fn space(&self, x: &[f64]) -> f64 {
        let n3 = (self.n as f64).powi(3);
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt() * n3;
        n3.powi(self.dim as i32) * f(r) / self.c_space
    }

    pub fn eval(&self, which: Kernel, arg: &[f64]) -> f64 {
        match which {
            Kernel::Time => self.time(arg[0]),
            Kernel::Space => self.space(arg),
        }
    }

    fn node_radius(&self) -> f64 {
        self.nodes.iter().flat_map(|x| x.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn check_model(model: &dyn ProcessModel) -> Result<()> {
    if !model.anchored() {
        return Err(Error::Unsupported(format!("{} is not anchored; Y is not available in closed form", model.name())));
    }
    Ok(())
}

/// Local window of a view sufficient for kernels centred at `c`.
fn local_bounds(model: &dyn ProcessModel, pair: &MollifierPair, view: &PathView, c: f64) -> (f64, f64) {
    let r = pair.time_radius();
    let lo = (c - r).min(0.0) - model.lookback() - 2.0 * view.step;
    let hi = (c + r).max(0.0) + view.step;
    (lo, hi)
}

/// Which time integral of `A` against the kernel.
#[derive(Clone, Copy)]
enum Weight {
    /// `int A_u g_n(c - u) du`.
    Value,
    /// `int A_u g_n'(c - u) du`.
    Deriv,
}

fn time_integral(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    view: &PathView,
    traj: &Trajectory,
    c: f64,
    weight: Weight,
) -> Vec<f64> {
    let d = view.dim;
    let r = pair.time_radius();
    let mut out = vec![0.0; d];
    if model.a_piecewise_constant() {
        match weight {
            Weight::Deriv => {
                for j in &traj.jumps {
                    let g = pair.time(c - j.time);
                    if g != 0.0 {
                        for (o, dl) in out.iter_mut().zip(&j.delta) {
                            *o += g * dl;
                        }
                    }
                }
            }
            Weight::Value => {
                // piece i covers [t_{i-1}, t_i) with t_{-1} = -inf
                let mut lo_cdf = 1.0;
                for (i, piece) in traj.pieces.iter().enumerate() {
                    let hi_cdf = if i < traj.jumps.len() { pair.time_cdf(c - traj.jumps[i].time) } else { 0.0 };
                    let w = lo_cdf - hi_cdf;
                    if w != 0.0 {
                        for (o, p) in out.iter_mut().zip(piece) {
                            *o += w * p;
                        }
                    }
                    lo_cdf = hi_cdf;
                }
            }
        }
        return out;
    }
    let gl = GaussLegendre::new(8);
    let (a, b) = (c - r, c + r);
    let mut p = a;
    while p < b {
        let next_knot = view.t0 + ((p - view.t0) / view.step).floor() * view.step + view.step;
        let q = next_knot.min(b);
        if q <= p {
            break;
        }
        for dim in 0..d {
            out[dim] += gl.integrate(p, q, |u| {
                let k = match weight {
                    Weight::Value => pair.time(c - u),
                    Weight::Deriv => pair.time_deriv(c - u),
                };
                if k == 0.0 {
                    0.0
                } else {
                    model.a_at(view, traj, u)[dim] * k
                }
            });
        }
        p = q;
    }
    out
}

/// Spatially and temporally smoothed `A` of `view`, centred at view time `c`.
fn smoothed(model: &dyn ProcessModel, pair: &MollifierPair, view: &PathView, c: f64, weight: Weight) -> Result<Vec<f64>> {
    let d = view.dim;
    let r = pair.time_radius();
    let covers_zero = c - r <= 0.0 && 0.0 <= c + r;
    let quiet_ok = matches!(weight, Weight::Deriv) || covers_zero;
    if quiet_ok && model.quiet(view, c - r, c + r, pair.node_radius()) {
        return Ok(vec![0.0; d]);
    }
    let (lo, hi) = local_bounds(model, pair, view, c);
    let local = view.local(lo, hi);
    let mut out = vec![0.0; d];
    for (y, w) in pair.nodes.iter().zip(&pair.weights) {
        let v = local.translated(y);
        let traj = model.trajectory(&v)?;
        let part = time_integral(model, pair, &v, &traj, c, weight);
        for (o, p) in out.iter_mut().zip(part) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// `(B_{n,s}, C_{n,s})` at `path`. `Y` vanishes for anchored models, so
/// the smoothed `Y` does too and `C = B`.
pub fn smoothed_process(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    path: &PiecewisePath,
    s: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_model(model)?;
    let view = PathView::of(path);
    let b = smoothed(model, pair, &view, s, Weight::Value)?;
    Ok((b.clone(), b))
}

/// `C'_{n,0}(W_{. + s} + phi 1)`.
pub fn flow_rhs(model: &dyn ProcessModel, pair: &MollifierPair, path: &PiecewisePath, s: f64, phi: &[f64]) -> Result<Vec<f64>> {
    let view = PathView::shifted(path, s, phi);
    smoothed(model, pair, &view, 0.0, Weight::Deriv)
}

/// `B_{n,0}(W_{. + s} + phi 1)`.
pub fn b_at_zero(model: &dyn ProcessModel, pair: &MollifierPair, path: &PiecewisePath, s: f64, phi: &[f64]) -> Result<Vec<f64>> {
    let view = PathView::shifted(path, s, phi);
    smoothed(model, pair, &view, 0.0, Weight::Value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "control", rename_all = "snake_case")]
pub enum StepControl {
    /// Plain RK4 at the base step.
    Fixed,
    /// Each step is compared against two half steps; on disagreement above
    /// `tol` the step is split, at most `max_depth` times. A sub-step that
    /// still disagrees at the finest level straddles an isolated
    /// discontinuity of the right-hand side in `s`; it is accepted and
    /// counted, and more than `max_unresolved` of them reject the solve.
    Halving { tol: f64, max_depth: u32, max_unresolved: usize },
}

impl StepControl {
    pub fn default_halving() -> Self {
        StepControl::Halving { tol: 1e-9, max_depth: 12, max_unresolved: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub steps: usize,
    pub rhs_evals: usize,
    pub splits: usize,
    /// Finest-level sub-steps accepted across a discontinuity.
    pub unresolved: usize,
    pub max_step_error: f64,
    pub max_unresolved_error: f64,
}

/// `D_{n,s} = phi(s)` on the grid `s = k h`, `k = 0..`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MollifiedFlowState {
    pub n: u32,
    pub h: f64,
    pub times: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub stats: SolverStats,
}

impl MollifiedFlowState {
    /// `phi` at a multiple of `h`.
    pub fn at(&self, s: f64) -> Result<&[f64]> {
        let k = (s / self.h).round();
        if (k * self.h - s).abs() > 1e-9 * self.h.max(1.0) || k < 0.0 || k as usize >= self.phi.len() {
            return Err(Error::InvalidParameter(format!("time {s} is not on the solved grid")));
        }
        Ok(&self.phi[k as usize])
    }

    pub fn last(&self) -> &[f64] {
        self.phi.last().expect("state holds phi(0)")
    }
}

/// Base RK4 step for a path grid: a quarter of the knot spacing.
pub fn default_step(grid: &Grid) -> f64 {
    grid.step() / 4.0
}

struct Solver<'a> {
    model: &'a dyn ProcessModel,
    pair: &'a MollifierPair,
    path: &'a PiecewisePath,
    control: StepControl,
    stats: SolverStats,
}

impl Solver<'_> {
    fn rhs(&mut self, s: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.stats.rhs_evals += 1;
        flow_rhs(self.model, self.pair, self.path, s, y)
    }

    fn rk4(&mut self, s: f64, y: &[f64], h: f64) -> Result<Vec<f64>> {
        let axpy = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
        let k1 = self.rhs(s, y)?;
        let k2 = self.rhs(s + 0.5 * h, &axpy(y, &k1, 0.5 * h))?;
        let k3 = self.rhs(s + 0.5 * h, &axpy(y, &k2, 0.5 * h))?;
        let k4 = self.rhs(s + h, &axpy(y, &k3, h))?;
        Ok((0..y.len()).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
    }

    fn advance(&mut self, s: f64, y: &[f64], h: f64, depth: u32) -> Result<Vec<f64>> {
        self.stats.steps += 1;
        let StepControl::Halving { tol, max_depth, max_unresolved } = self.control else {
            return self.rk4(s, y, h);
        };
        let full = self.rk4(s, y, h)?;
        let mid = self.rk4(s, y, 0.5 * h)?;
        let two = self.rk4(s + 0.5 * h, &mid, 0.5 * h)?;
        let err = full.iter().zip(&two).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err <= tol {
            self.stats.max_step_error = self.stats.max_step_error.max(err);
            return Ok(two);
        }
        if depth >= max_depth {
            self.stats.unresolved += 1;
            self.stats.max_unresolved_error = self.stats.max_unresolved_error.max(err);
            if self.stats.unresolved > max_unresolved {
                return Err(Error::StepRejected { s, error: err, tolerance: tol });
            }
            return Ok(two);
        }
        self.stats.splits += 1;
        let y_mid = self.advance(s, y, 0.5 * h, depth + 1)?;
        self.advance(s + 0.5 * h, &y_mid, 0.5 * h, depth + 1)
    }
}

/// Solves `phi' = C'_{n,0}(phi 1 + W_{. + s})`, `phi(0) = 0`, on
/// `[0, s_end]` with base step `h`.
pub fn flow_solve(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    path: &PiecewisePath,
    s_end: f64,
    h: f64,
    control: StepControl,
) -> Result<MollifiedFlowState> {
    check_model(model)?;
    if !(h > 0.0) || s_end < 0.0 {
        return Err(Error::InvalidParameter(format!("flow needs h > 0 and s_end >= 0, got {h} and {s_end}")));
    }
    let g = path.grid();
    if s_end + pair.time_radius() + g.step() > g.end() {
        return Err(Error::InvalidParameter(format!(
            "flow up to {s_end} with kernel radius {} leaves the path window ending at {}",
            pair.time_radius(),
            g.end()
        )));
    }
    let steps = (s_end / h).round() as usize;
    let mut solver = Solver { model, pair, path, control, stats: SolverStats::default() };
    let mut phi = vec![vec![0.0; path.dim()]];
    let mut times = vec![0.0];
    for k in 0..steps {
        let s = k as f64 * h;
        let next = solver.advance(s, &phi[k], h, 0)?;
        phi.push(next);
        times.push((k + 1) as f64 * h);
    }
    Ok(MollifiedFlowState { n: pair.n, h, times, phi, stats: solver.stats })
}

/// `(A_{n,s}, Y_{n,s})` with `A_n - Y_n = phi(s)`.
pub fn approx_processes(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    path: &PiecewisePath,
    state: &MollifiedFlowState,
    s: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let phi = state.at(s)?;
    let y = b_at_zero(model, pair, path, s, phi)?;
    let a = phi.iter().zip(&y).map(|(p, y)| p + y).collect();
    Ok((a, y))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Flow composition `D_{n,s+v}(W) = D_{n,s}(W) + D_{n,v}(W^{n,s})`, with
/// `W^{n,s}` rebuilt as a path on the grid (so `s` must be a knot time).
/// Also returns the temporal-homogeneity defect of `X_n`:
/// `X_{n,s+v}(W)` against `X_{n,v}(W^{n,s})`, both measured in the first
/// coordinate block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionReport {
    pub n: u32,
    pub s: f64,
    pub v: f64,
    pub composition_defect: f64,
    pub homogeneity_defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn composition_check(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    path: &PiecewisePath,
    s: f64,
    v: f64,
    h: f64,
    control: StepControl,
) -> Result<CompositionReport> {
    let g = *path.grid();
    g.knot_of(s)?;
    let whole = flow_solve(model, pair, path, s + v, h, control)?;
    let phi_s = whole.at(s)?.to_vec();
    let moved = shift_path(path, s, &phi_s)?;
    let rest = flow_solve(model, pair, &moved, v, h, control)?;
    let composed: Vec<f64> = phi_s.iter().zip(rest.last()).map(|(a, b)| a + b).collect();
    let composition_defect = sup_diff(whole.last(), &composed);
    // X_{n,u} = W_u + A_{n,u}
    let (a_whole, _) = approx_processes(model, pair, path, &whole, s + v)?;
    let (a_rest, _) = approx_processes(model, pair, &moved, &rest, v)?;
    let x_whole: Vec<f64> = (0..g.dim).map(|j| path.eval_coord(s + v, j) + a_whole[j]).collect();
    let x_rest: Vec<f64> = (0..g.dim).map(|j| moved.eval_coord(v, j) + a_rest[j]).collect();
    let homogeneity_defect = sup_diff(&x_whole, &x_rest);
    let tol = match control {
        StepControl::Halving { tol, .. } => tol,
        StepControl::Fixed => 1e-9,
    };
    let tolerance = 10.0 * tol * (s + v).max(1.0) / h;
    Ok(CompositionReport {
        n: pair.n,
        s,
        v,
        composition_defect,
        homogeneity_defect,
        tolerance,
        pass: composition_defect <= tolerance && homogeneity_defect <= tolerance,
    })
}

/// Differences of `phi(s_end)` under successive halving of a fixed RK4
/// step. `observed_order` is the least-squares slope of `-log2` of the
/// differences against the halving level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub n: u32,
    pub steps: Vec<f64>,
    pub differences: Vec<f64>,
    /// `log2` of each successive ratio.
    pub ratio_orders: Vec<f64>,
    pub observed_order: f64,
}

/// Runs the halving ladder `h, h/2, ..., h/2^(levels-1)`; needs three
/// levels or more. The bump kernels make coarse steps pre-asymptotic,
/// so `h` should sit well below the kernel's time radius.
pub fn order_study(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    path: &PiecewisePath,
    s_end: f64,
    h: f64,
    levels: usize,
) -> Result<OrderReport> {
    if levels < 3 {
        return Err(Error::InvalidParameter(format!("order study needs at least 3 levels, got {levels}")));
    }
    let hs: Vec<f64> = (0..levels).map(|k| h / (1u64 << k) as f64).collect();
    let mut ends = Vec::new();
    for &hh in &hs {
        ends.push(flow_solve(model, pair, path, s_end, hh, StepControl::Fixed)?.last().to_vec());
    }
    let differences: Vec<f64> = ends.windows(2).map(|w| sup_diff(&w[0], &w[1])).collect();
    let ratio_orders = differences.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let ys: Vec<f64> = differences.iter().map(|d| -d.log2()).collect();
    let k = ys.len() as f64;
    let xbar = (k - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / k;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        sxy += dx * (y - ybar);
        sxx += dx * dx;
    }
    Ok(OrderReport { n: pair.n, steps: hs, differences, ratio_orders, observed_order: sxy / sxx })
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: u32,
    /// Median over paths of `max_s |phi(s) - A_s|`.
    pub median_error: f64,
    pub max_error: f64,
    /// Median over the gradient subset of `max_s |grad_{W0}(phi(s) - A_s)|`.
    pub median_grad_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub model: String,
    pub paths: usize,
    pub margin: f64,
    pub s_points: usize,
    pub rows: Vec<ConvergenceRow>,
    /// Ten times the ODE tolerance; medians below it count as converged.
    pub resolution: f64,
    /// `1 - last / first` of the median errors.
    pub relative_drop: f64,
    pub strictly_decreasing: bool,
}

/// A batch path with its jump times and the admissible evaluation times.
#[derive(Debug, Clone)]
pub struct BatchPath {
    pub path: PiecewisePath,
    pub jump_times: Vec<f64>,
    pub s_list: Vec<f64>,
}

/// First `count` sampled paths with at least one jump in
/// `(margin, s_end - margin)` and none within `margin` of time zero; each
/// gets the knot times in `[0, s_end]` at least `margin` from every jump,
/// and must keep at least one of them after a forward jump.
pub fn select_batch(
    model: &dyn ProcessModel,
    density: &DensityModel,
    grid: Grid,
    s_end: f64,
    margin: f64,
    count: usize,
    seed: u64,
    max_draws: usize,
) -> Result<Vec<BatchPath>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..max_draws {
        if out.len() == count {
            break;
        }
        let mut rng = replica_rng(seed, i as u64);
        let path = brownian_sample(grid, density, &mut rng)?;
        let traj = model.trajectory(&PathView::of(&path))?;
        if traj.is_exceptional() {
            continue;
        }
        let times: Vec<f64> = traj.jumps.iter().map(|j| j.time).collect();
        let inside = times.iter().any(|&t| t > margin && t < s_end - margin);
        let near_zero = times.iter().any(|&t| t.abs() < margin);
        if !inside || near_zero {
            continue;
        }
        let s_list: Vec<f64> = (0..grid.n_knots())
            .map(|k| grid.knot_time(k))
            .filter(|&s| s >= 0.0 && s <= s_end + 1e-12 && times.iter().all(|&t| (t - s).abs() >= margin))
            .collect();
        let first = times.iter().copied().find(|&t| t > 0.0).unwrap_or(f64::INFINITY);
        if !s_list.iter().any(|&s| s > first) {
            continue;
        }
        out.push(BatchPath { path, jump_times: times, s_list });
    }
    if out.len() < count {
        return Err(Error::Sampler(format!("only {} of {count} batch paths found in {max_draws} draws", out.len())));
    }
    Ok(out)
}

fn path_error(model: &dyn ProcessModel, state: &MollifiedFlowState, path: &PiecewisePath, s_list: &[f64]) -> Result<f64> {
    let traj = model.trajectory(&PathView::of(path))?;
    let g = path.grid();
    let mut worst = 0.0f64;
    for &s in s_list {
        let a = traj.knot(g.knot_of(s)?);
        worst = worst.max(sup_diff(state.at(s)?, a));
    }
    Ok(worst)
}

fn translate_path(path: &PiecewisePath, j: usize, by: f64) -> Result<PiecewisePath> {
    let d = path.dim();
    let knots = path.knots().iter().enumerate().map(|(i, w)| if i % d == j { w + by } else { *w }).collect();
    PiecewisePath::from_knots(*path.grid(), knots)
}

/// `max_s max_j |d/dW0_j (phi_j(s) - A_{s,j})|` by central differences.
fn grad_error(
    model: &dyn ProcessModel,
    pair: &MollifierPair,
    bp: &BatchPath,
    s_end: f64,
    h: f64,
    control: StepControl,
) -> Result<f64> {
    const FD: f64 = 1e-6;
    let d = bp.path.dim();
    let mut worst = 0.0f64;
    for j in 0..d {
        let pp = translate_path(&bp.path, j, FD)?;
        let pm = translate_path(&bp.path, j, -FD)?;
        let sp = flow_solve(model, pair, &pp, s_end, h, control)?;
        let sm = flow_solve(model, pair, &pm, s_end, h, control)?;
        let tp = model.trajectory(&PathView::of(&pp))?;
        let tm = model.trajectory(&PathView::of(&pm))?;
        if tp.jumps.len() != tm.jumps.len() {
            continue;
        }
        let g = bp.path.grid();
        for &s in &bp.s_list {
            let k = g.knot_of(s)?;
            let dphi = (sp.at(s)?[j] - sm.at(s)?[j]) / (2.0 * FD);
            let da = (tp.knot(k)[j] - tm.knot(k)[j]) / (2.0 * FD);
            worst = worst.max((dphi - da).abs());
        }
    }
    Ok(worst)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Error of `A_n - Y_n` against `A - Y` at admissible times, per `n`.
pub fn convergence_report(
    model: &dyn ProcessModel,
    ns: &[u32],
    batch: &[BatchPath],
    s_end: f64,
    margin: f64,
    control: StepControl,
    grad_paths: usize,
) -> Result<ConvergenceReport> {
    let mut rows = Vec::with_capacity(ns.len());
    let dim = batch.first().map(|b| b.path.dim()).unwrap_or(1);
    for &n in ns {
        let pair = MollifierPair::new(n, dim)?;
        let errs: Vec<Result<f64>> = map_items(batch, |_, bp| {
            let h = default_step(bp.path.grid());
            let st = flow_solve(model, &pair, &bp.path, s_end, h, control)?;
            path_error(model, &st, &bp.path, &bp.s_list)
        });
        let errs: Vec<f64> = errs.into_iter().collect::<Result<_>>()?;
        let grads = if grad_paths > 0 {
            let sub = &batch[..grad_paths.min(batch.len())];
            let g: Vec<Result<f64>> = map_items(sub, |_, bp| {
                let h = default_step(bp.path.grid());
                grad_error(model, &pair, bp, s_end, h, control)
            });
            Some(median(g.into_iter().collect::<Result<Vec<_>>>()?))
        } else {
            None
        };
        rows.push(ConvergenceRow {
            n,
            median_error: median(errs.clone()),
            max_error: errs.iter().cloned().fold(0.0, f64::max),
            median_grad_error: grads,
        });
    }
    // medians at or below the ODE resolution cannot be ordered
    let resolution = match control {
        StepControl::Halving { tol, .. } => 10.0 * tol,
        StepControl::Fixed => 0.0,
    };
    let strictly_decreasing = rows
        .windows(2)
        .all(|w| w[1].median_error < w[0].median_error || w[0].median_error.max(w[1].median_error) <= resolution);
    let relative_drop = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if a.median_error > 0.0 => 1.0 - b.median_error / a.median_error,
        _ => 0.0,
    };
    Ok(ConvergenceReport {
        model: model.name(),
        paths: batch.len(),
        margin,
        s_points: batch.iter().map(|b| b.s_list.len()).sum(),
        rows,
        resolution,
        relative_drop,
        strictly_decreasing,
    })
}

/// Error at a jump time for each `n`; convergence there is not expected.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegativeControl {
    pub tau: f64,
    pub errors: Vec<(u32, f64)>,
    /// Largest-n error below a tenth of the smallest-n error.
    pub converges: bool,
}

pub fn negative_control(
    model: &dyn ProcessModel,
    path: &PiecewisePath,
    tau: f64,
    ns: &[u32],
    control: StepControl,
) -> Result<NegativeControl> {
    let g = path.grid();
    let k = g.knot_of(tau)?;
    let traj = model.trajectory(&PathView::of(path))?;
    let a = traj.knot(k).to_vec();
    let mut errors = Vec::with_capacity(ns.len());
    for &n in ns {
        let pair = MollifierPair::new(n, path.dim())?;
        let st = flow_solve(model, &pair, path, tau, default_step(g), control)?;
        errors.push((n, sup_diff(st.at(tau)?, &a)));
    }
    let converges = match (errors.first(), errors.last()) {
        (Some(f), Some(l)) if errors.len() > 1 => l.1 < 0.1 * f.1,
        _ => false,
    };
    Ok(NegativeControl { tau, errors, converges })
}

/// Two-particle path whose gap `q_1 - q_2` falls linearly through `eps` at
/// the knot time `tau` (frac exactly one), with distinct velocity bands.
pub fn engineered_crossing(grid: Grid, eps: f64, tau: f64, p: (f64, f64)) -> Result<PiecewisePath> {
    if grid.dim != 4 {
        return Err(Error::InvalidParameter("engineered crossing needs the two-particle layout".into()));
    }
    let kt = grid.knot_of(tau)?;
    let slope = 0.5;
    let mut knots = Vec::with_capacity(grid.n_knots() * 4);
    for k in 0..grid.n_knots() {
        let gap = if k == kt { eps } else { eps + slope * (grid.knot_time(kt) - grid.knot_time(k)) };
        knots.extend_from_slice(&[0.5 * gap, p.0, -0.5 * gap, p.1]);
    }
    // keep the far past well separated so nothing else fires
    PiecewisePath::from_knots(grid, knots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{Collision, Identity, JumpRule};

    #[test]
    fn kernels_are_normalized() {
        let p = MollifierPair::new(4, 1).unwrap();
        let gl = GaussLegendre::new(20);
        assert!((gl.composite(-0.25, 0.25, 8, |s| p.time(s)) - 1.0).abs() < 1e-8);
        assert_eq!(p.time(0.25), 0.0);
        assert!((p.time_cdf(0.0) - 0.5).abs() < 1e-12);
        let r = p.space_radius();
        assert!((gl.composite(-r, r, 8, |x| p.space(&[x])) - 1.0).abs() < 1e-8);
        let one = MollifierPair::new(1, 1).unwrap();
        assert!((one.time(0.0) - (-1f64).exp() / bump_norm()).abs() < 1e-15);
        let s: f64 = MollifierPair::new(2, 4).unwrap().weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_flow_is_trivial() {
        let g = Grid::new(1.0, 4, 2, 1).unwrap();
        let w = PiecewisePath::zero(g);
        let p = MollifierPair::new(4, 1).unwrap();
        let st = flow_solve(&Identity, &p, &w, 0.5, default_step(&g), StepControl::default_halving()).unwrap();
        assert!(st.phi.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn kick_flow_reaches_the_kick() {
        let g = Grid::new(1.0, 5, 2, 4).unwrap();
        let path = engineered_crossing(g, 0.1, 0.25, (0.3, -0.2)).unwrap();
        let m = Collision::new(2, 0.1, 0.05, JumpRule::Kick { kappa: 0.7 }).unwrap();
        let p = MollifierPair::new(8, 4).unwrap();
        let st = flow_solve(&m, &p, &path, 0.5, default_step(&g), StepControl::default_halving()).unwrap();
        let end = st.last();
        assert!((end[1] - 0.7).abs() < 1e-6, "{end:?}");
        assert!((end[3] + 0.7).abs() < 1e-6);
        assert_eq!(end[0], 0.0);
    }
}
