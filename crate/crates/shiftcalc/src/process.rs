//! Temporally homogeneous models `X = W + A`, the time-shift flow
//! `W^v = W_{.+v} + (A_v - Y_v) 1` and initial-value gradients.
//!
//! Models read paths through a [`PathView`]: knots on a uniform grid with an
//! arbitrary time origin plus a constant offset. Grid-aligned shifts of a
//! view only relabel knots, and every model below uses purely local,
//! label-relative arithmetic, so homogeneity on grid shifts holds to the
//! last bit wherever the computation does not reach the window edge.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::{brownian_sample, Grid, PiecewisePath};
use crate::mc::{map_replicas, McParams};
use crate::measure::DensityModel;
use crate::error::{Error, Result};
use crate::quad::GaussLegendre;

/// Read-only window onto a piecewise-linear path: knot `k` sits at time
/// `t0 + k * step` and carries `knots[k*dim..(k+1)*dim] + offset`. Outside
/// the knots the path is constant.
#[derive(Debug, Clone)]
pub struct PathView<'a> {
    pub t0: f64,
    pub step: f64,
    pub dim: usize,
    pub knots: &'a [f64],
    pub offset: Vec<f64>,
}

impl<'a> PathView<'a> {
    pub fn of(path: &'a PiecewisePath) -> Self {
        let g = path.grid();
        Self { t0: g.start(), step: g.step(), dim: g.dim, knots: path.knots(), offset: vec![0.0; g.dim] }
    }

    /// `W_{. + s} + offset`: the same knots relabelled in time.
    pub fn shifted(path: &'a PiecewisePath, s: f64, offset: &[f64]) -> Self {
        let mut v = Self::of(path);
        v.t0 -= s;
        v.offset.copy_from_slice(offset);
        v
    }

    /// Adds a constant to the path.
    pub fn translated(&self, by: &[f64]) -> Self {
        let mut v = self.clone();
        for (o, b) in v.offset.iter_mut().zip(by) {
            *o += b;
        }
        v
    }

    /// Smallest sub-view whose knots cover `[lo, hi]` (view time).
    pub fn local(&self, lo: f64, hi: f64) -> PathView<'a> {
        let n = self.n_knots();
        let a = (((lo - self.t0) / self.step).floor().max(0.0) as usize).min(n - 1);
        let b = (((hi - self.t0) / self.step).ceil().max(0.0) as usize).min(n - 1).max(a);
        PathView {
            t0: self.t0 + a as f64 * self.step,
            step: self.step,
            dim: self.dim,
            knots: &self.knots[a * self.dim..(b + 1) * self.dim],
            offset: self.offset.clone(),
        }
    }

    pub fn n_knots(&self) -> usize {
        self.knots.len() / self.dim
    }

    pub fn n_segments(&self) -> usize {
        self.n_knots() - 1
    }

    #[inline]
    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.knots[k * self.dim + j] + self.offset[j]
    }

    /// Value at knot position `k + frac`, clamped to the knot range.
    #[inline]
    pub fn at(&self, k: isize, frac: f64, j: usize) -> f64 {
        let last = self.n_segments() as isize;
        if k < 0 {
            return self.value(0, j);
        }
        if k >= last {
            return self.value(last as usize, j);
        }
        let a = self.value(k as usize, j);
        let b = self.value(k as usize + 1, j);
        a + frac * (b - a)
    }

    /// Knot position of time `s`.
    pub fn position(&self, s: f64) -> f64 {
        (s - self.t0) / self.step
    }

    pub fn eval(&self, s: f64, j: usize) -> f64 {
        let p = self.position(s);
        let k = p.floor();
        self.at(k as isize, p - k, j)
    }

    /// Knot position of time zero.
    pub fn zero(&self) -> f64 {
        self.position(0.0)
    }

    pub fn time_of(&self, k: usize, frac: f64) -> f64 {
        self.t0 + (k as f64 + frac) * self.step
    }
}

/// One jump of `A` at `tau = t0 + (segment + frac) * step`, `frac in (0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Jump {
    pub segment: usize,
    pub frac: f64,
    pub time: f64,
    /// Particle pair whose collision triggered the jump.
    pub pair: (usize, usize),
    /// `A_tau - A_{tau-}`.
    pub delta: Vec<f64>,
}

/// `A` evaluated on a view.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    /// `A` at every knot of the view, row-major.
    pub a: Vec<f64>,
    /// Jumps in time order.
    pub jumps: Vec<Jump>,
    /// For piecewise-constant `A`: the value on each piece; piece `i` starts
    /// at jump `i - 1` (piece 0 extends to minus infinity).
    pub pieces: Vec<Vec<f64>>,
    /// Crossings dropped because another pair crossed at the same instant.
    pub suppressed: usize,
    /// Too many crossings to process; the sample must be discarded.
    pub overflow: bool,
}

impl Trajectory {
    pub fn knot(&self, k: usize) -> &[f64] {
        &self.a[k * self.dim..(k + 1) * self.dim]
    }

    /// Whether the sample should be excluded from Monte Carlo estimates.
    pub fn is_exceptional(&self) -> bool {
        self.suppressed > 0 || self.overflow
    }

    pub fn jumps_between(&self, lo: f64, hi: f64) -> usize {
        self.jumps.iter().filter(|j| j.time > lo && j.time <= hi).count()
    }
}

/// Smooth drift or pure jump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Smooth,
    Jump,
}

/// A process model `X = W + A(W)`.
pub trait ProcessModel: Send + Sync {
    fn name(&self) -> String;

    fn kind(&self) -> ModelKind;

    /// Dimension of `F` the model needs, if it is fixed.
    fn dim(&self) -> Option<usize>;

    /// How far into the past the model reads when deciding a jump.
    fn lookback(&self) -> f64 {
        0.0
    }

    /// `A_0 = 0` for every path, which forces `Y = 0`.
    fn anchored(&self) -> bool {
        true
    }

    fn a_piecewise_constant(&self) -> bool {
        self.kind() == ModelKind::Jump
    }

    /// True only if no translate of `view` by a constant of sup-norm at
    /// most `radius` can have a jump with time in `[lo, hi]`. A
    /// conservative shortcut for smoothing kernels; `false` is always safe.
    fn quiet(&self, _view: &PathView, _lo: f64, _hi: f64, _radius: f64) -> bool {
        false
    }

    /// `A` on the knots of `view`, anchored at view time zero.
    fn trajectory(&self, view: &PathView) -> Result<Trajectory>;

    /// `A_s` at an arbitrary view time `s`.
    fn a_at(&self, view: &PathView, traj: &Trajectory, s: f64) -> Vec<f64>;
}

fn check_dim(model: &dyn ProcessModel, dim: usize) -> Result<()> {
    match model.dim() {
        Some(d) if d != dim => Err(Error::InvalidParameter(format!(
            "model {} needs dimension {d}, path has {dim}",
            model.name()
        ))),
        _ => Ok(()),
    }
}

/// Value of a piecewise-constant trajectory at knot position `p`.
fn piece_at(traj: &Trajectory, p: f64) -> &[f64] {
    let i = traj.jumps.partition_point(|j| (j.segment as f64 + j.frac) <= p);
    &traj.pieces[i]
}

/// `X = W`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl ProcessModel for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Smooth
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn trajectory(&self, view: &PathView) -> Result<Trajectory> {
        Ok(Trajectory {
            dim: view.dim,
            a: vec![0.0; view.knots.len()],
            jumps: Vec::new(),
            pieces: vec![vec![0.0; view.dim]],
            suppressed: 0,
            overflow: false,
        })
    }

    fn a_at(&self, view: &PathView, _: &Trajectory, _: f64) -> Vec<f64> {
        vec![0.0; view.dim]
    }

    fn quiet(&self, _: &PathView, _: f64, _: f64, _: f64) -> bool {
        true
    }
}

/// Switching medium: the first coordinate moves with speed
/// `sigma(x) = 1 + a * smoothstep(x / eps)`, i.e. slower or faster once
/// `x_1 > 0`. `X_1` is the exact Stratonovich flow
/// `X_1(s) = Psi^{-1}(Psi(W_1(0)) + W_1(s) - W_1(0))` with `Psi' = 1/sigma`;
/// the other coordinates follow `W`.
#[derive(Debug, Clone)]
pub struct Switching {
    pub a: f64,
    pub eps: f64,
    /// `Psi(eps)`.
    psi_eps: f64,
    gl: GaussLegendre,
}

impl Switching {
    pub fn new(a: f64, eps: f64) -> Result<Self> {
        if !(a > -1.0 && a.is_finite()) {
            return Err(Error::InvalidParameter(format!("switching strength a = {a} must exceed -1")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("smoothing width eps = {eps} must be positive")));
        }
        let mut s = Self { a, eps, psi_eps: 0.0, gl: GaussLegendre::new(20) };
        s.psi_eps = s.gl.integrate(0.0, eps, |y| 1.0 / s.sigma(y));
        Ok(s)
    }

    pub fn sigma(&self, x: f64) -> f64 {
        let u = (x / self.eps).clamp(0.0, 1.0);
        1.0 + self.a * u * u * (3.0 - 2.0 * u)
    }

    pub fn psi(&self, x: f64) -> f64 {
        if x <= 0.0 {
            x
        } else if x < self.eps {
            self.gl.integrate(0.0, x, |y| 1.0 / self.sigma(y))
        } else {
            self.psi_eps + (x - self.eps) / (1.0 + self.a)
        }
    }

    pub fn psi_inv(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return y;
        }
        if y >= self.psi_eps {
            return self.eps + (y - self.psi_eps) * (1.0 + self.a);
        }
        // Newton from the linear guess, safeguarded by bisection on [0, eps]
        let (mut lo, mut hi) = (0.0, self.eps);
        let mut x = y * self.eps / self.psi_eps;
        for _ in 0..100 {
            let f = self.psi(x) - y;
            if f == 0.0 {
                break;
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = x - f * self.sigma(x);
            if (next - x).abs() <= 1e-16 * x.abs() {
                x = next;
                break;
            }
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            x = next;
        }
        x
    }

    fn x1(&self, w_s: f64, w_0: f64) -> f64 {
        self.psi_inv(self.psi(w_0) + (w_s - w_0))
    }

    /// `dX_1(s) / dx_1 = sigma(X_1(s)) / sigma(x_1)`.
    pub fn exact_sensitivity(&self, x_s: f64, x_0: f64) -> f64 {
        self.sigma(x_s) / self.sigma(x_0)
    }
}

impl ProcessModel for Switching {
    fn name(&self) -> String {
        format!("switching(a={}, eps={})", self.a, self.eps)
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Smooth
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn trajectory(&self, view: &PathView) -> Result<Trajectory> {
        let d = view.dim;
        let w0 = view.eval(0.0, 0);
        let mut a = vec![0.0; view.knots.len()];
        for k in 0..view.n_knots() {
            let w = view.value(k, 0);
            a[k * d] = self.x1(w, w0) - w;
        }
        Ok(Trajectory { dim: d, a, jumps: Vec::new(), pieces: Vec::new(), suppressed: 0, overflow: false })
    }

    fn a_at(&self, view: &PathView, _: &Trajectory, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; view.dim];
        let w = view.eval(s, 0);
        out[0] = self.x1(w, view.eval(0.0, 0)) - w;
        out
    }
}

/// What happens to the velocity bands at a collision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum JumpRule {
    /// Exchange the current `p` values of the colliding pair.
    Swap,
    /// Push the bands apart by `kappa` in the direction of the relative
    /// position, independently of the current `p` values.
    Kick { kappa: f64 },
}

/// `n` particles in one space dimension, each carrying a position `q_i`
/// and a velocity band `p_i`; coordinates are ordered
/// `(q_1, p_1, q_2, p_2, ...)`. A collision is a down-crossing of
/// `|q_i - q_j|` through `eps` (positions are read from `W` since `A` has no
/// `q` part) such that the pair stayed farther apart than `eps` during the
/// preceding `refractory` time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Collision {
    pub particles: usize,
    pub eps: f64,
    pub refractory: f64,
    pub rule: JumpRule,
    pub max_jumps: usize,
}

/// Crossings past this count mark a path as pathological.
pub const DEFAULT_MAX_JUMPS: usize = 10_000;

impl Collision {
    pub fn new(particles: usize, eps: f64, refractory: f64, rule: JumpRule) -> Result<Self> {
        if particles < 1 {
            return Err(Error::InvalidParameter("collision model needs at least one particle".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) || !(refractory >= 0.0 && refractory.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "collision radius {eps} must be positive and refractory gap {refractory} non-negative"
            )));
        }
        Ok(Self { particles, eps, refractory, rule, max_jumps: DEFAULT_MAX_JUMPS })
    }

    /// Two particles with the swap rule.
    pub fn pair(eps: f64, refractory: f64) -> Result<Self> {
        Self::new(2, eps, refractory, JumpRule::Swap)
    }

    #[inline]
    fn gap(&self, view: &PathView, k: isize, frac: f64, i: usize, j: usize) -> f64 {
        view.at(k, frac, 2 * i) - view.at(k, frac, 2 * j)
    }

    /// Fraction in `(0, 1]` at which `|D|` enters `[-eps, eps]` on the
    /// segment from `d0` to `d1`. The two branches are mirror images, so
    /// relabelling the pair gives the identical number.
    fn entry(&self, d0: f64, d1: f64) -> Option<f64> {
        let e = self.eps;
        if d0 > e && d1 <= e {
            Some((d0 - e) / (d0 - d1))
        } else if d0 < -e && d1 >= -e {
            Some((-e - d0) / (d1 - d0))
        } else {
            None
        }
    }

    /// `|D| > eps` throughout `[tau - refractory, tau)`.
    fn armed(&self, view: &PathView, k: usize, frac: f64, i: usize, j: usize) -> bool {
        if self.refractory == 0.0 {
            return true;
        }
        let off = frac - self.refractory / view.step;
        let fl = off.floor();
        let base = k as isize + fl as isize;
        let mut prev = self.gap(view, base, off - fl, i, j);
        if prev.abs() <= self.eps {
            return false;
        }
        for m in (base + 1)..=(k as isize) {
            let cur = self.gap(view, m, 0.0, i, j);
            if cur.abs() <= self.eps || cur.signum() != prev.signum() {
                return false;
            }
            prev = cur;
        }
        true
    }

    /// `A_p` after a jump, given the value before (forward in time), or the
    /// value before, given the value after (backward).
    fn apply(&self, view: &PathView, k: usize, frac: f64, pair: (usize, usize), a: &mut [f64], forward: bool) {
        let (i, j) = pair;
        let (pi, pj) = (2 * i + 1, 2 * j + 1);
        match self.rule {
            JumpRule::Swap => {
                // the swap is an involution, so both directions agree
                let wi = view.at(k as isize, frac, pi);
                let wj = view.at(k as isize, frac, pj);
                let xi = wi + a[pi];
                let xj = wj + a[pj];
                a[pi] = xj - wi;
                a[pj] = xi - wj;
            }
            JumpRule::Kick { kappa } => {
                let s = self.gap(view, k as isize, frac, i, j).signum();
                let sign = if forward { 1.0 } else { -1.0 };
                a[pi] += sign * kappa * s;
                a[pj] -= sign * kappa * s;
            }
        }
    }
}

/// `(k, frac) > z` for `frac in (0, 1]`, exact when `z` is an integer.
fn after(k: usize, frac: f64, z: f64) -> bool {
    let zf = z.floor();
    let kf = k as f64;
    kf > zf || (kf == zf && frac > z - zf)
}

impl ProcessModel for Collision {
    fn name(&self) -> String {
        let rule = match self.rule {
            JumpRule::Swap => "swap".to_string(),
            JumpRule::Kick { kappa } => format!("kick {kappa}"),
        };
        format!("collision(n={}, eps={}, refractory={}, {rule})", self.particles, self.eps, self.refractory)
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Jump
    }

    fn dim(&self) -> Option<usize> {
        Some(2 * self.particles)
    }

    fn lookback(&self) -> f64 {
        self.refractory
    }

    fn trajectory(&self, view: &PathView) -> Result<Trajectory> {
        check_dim(self, view.dim)?;
        let n = self.particles;
        let d = view.dim;
        let mut found: Vec<(usize, f64, (usize, usize))> = Vec::new();
        let mut suppressed = 0usize;
        let mut overflow = false;
        let mut in_segment: Vec<(f64, (usize, usize))> = Vec::new();
        'segments: for k in 0..view.n_segments() {
            in_segment.clear();
            for i in 0..n {
                for j in (i + 1)..n {
                    let d0 = self.gap(view, k as isize, 0.0, i, j);
                    let d1 = self.gap(view, k as isize + 1, 0.0, i, j);
                    let Some(frac) = self.entry(d0, d1) else { continue };
                    if self.armed(view, k, frac, i, j) {
                        in_segment.push((frac, (i, j)));
                    }
                }
            }
            // crossing times are read from W alone, so distinct pairs fire in
            // time order; only coincident times are ambiguous
            in_segment.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (idx, &(frac, pair)) in in_segment.iter().enumerate() {
                let tied = idx > 0 && in_segment[idx - 1].0 == frac;
                if tied {
                    suppressed += 1;
                    continue;
                }
                found.push((k, frac, pair));
                if found.len() > self.max_jumps {
                    overflow = true;
                    break 'segments;
                }
            }
        }

        let z = view.zero();
        let first_fwd = found.iter().position(|&(k, f, _)| after(k, f, z)).unwrap_or(found.len());
        let mut pieces = vec![vec![0.0; d]; found.len() + 1];
        let mut cur = vec![0.0; d];
        for (idx, &(k, frac, pair)) in found.iter().enumerate().skip(first_fwd) {
            self.apply(view, k, frac, pair, &mut cur, true);
            pieces[idx + 1].copy_from_slice(&cur);
        }
        cur.fill(0.0);
        for idx in (0..first_fwd).rev() {
            let (k, frac, pair) = found[idx];
            self.apply(view, k, frac, pair, &mut cur, false);
            pieces[idx].copy_from_slice(&cur);
        }
        let jumps: Vec<Jump> = found
            .iter()
            .enumerate()
            .map(|(idx, &(k, frac, pair))| Jump {
                segment: k,
                frac,
                time: view.time_of(k, frac),
                pair,
                delta: pieces[idx + 1].iter().zip(&pieces[idx]).map(|(x, y)| x - y).collect(),
            })
            .collect();
        let mut traj = Trajectory { dim: d, a: Vec::with_capacity(view.knots.len()), jumps, pieces, suppressed, overflow };
        let mut p = 0usize;
        for knot in 0..view.n_knots() {
            // a jump in segment k (position in (k, k+1]) is in force from knot k+1
            while p < traj.jumps.len() && traj.jumps[p].segment < knot {
                p += 1;
            }
            let v = traj.pieces[p].clone();
            traj.a.extend_from_slice(&v);
        }
        Ok(traj)
    }

    fn a_at(&self, view: &PathView, traj: &Trajectory, s: f64) -> Vec<f64> {
        piece_at(traj, view.position(s)).to_vec()
    }

    fn quiet(&self, view: &PathView, lo: f64, hi: f64, radius: f64) -> bool {
        // a translate moves each gap by at most 2 * radius, so widen the
        // entry test by that much on every segment that can host the jump
        let slack = 2.0 * radius * (1.0 + 1e-12) + 1e-15;
        let e = self.eps;
        let last = view.n_segments() as isize;
        let a = (view.position(lo).floor() as isize - 1).max(0);
        let b = (view.position(hi).ceil() as isize).min(last - 1);
        for k in a..=b {
            for i in 0..self.particles {
                for j in (i + 1)..self.particles {
                    let d0 = self.gap(view, k, 0.0, i, j);
                    let d1 = self.gap(view, k + 1, 0.0, i, j);
                    if (d0 > e - slack && d1 <= e + slack) || (d0 < -e + slack && d1 >= -e - slack) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// `W^v` on the grid of the base path.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPath {
    pub v: f64,
    /// `A_v - Y_v`.
    pub offset: Vec<f64>,
    pub path: PiecewisePath,
}

/// `W_{. + v} + offset` on the grid of `path`; `v` must be a grid multiple.
/// Knots that fall outside the window repeat the end value.
pub fn shift_path(path: &PiecewisePath, v: f64, offset: &[f64]) -> Result<PiecewisePath> {
    let g = *path.grid();
    let k = g.shift_knots(v)?;
    let d = g.dim;
    let last = g.n_segments() as isize;
    let mut knots = Vec::with_capacity(g.n_knots() * d);
    for i in 0..g.n_knots() as isize {
        let src = (i + k).clamp(0, last) as usize;
        for j in 0..d {
            knots.push(path.knots()[src * d + j] + offset[j]);
        }
    }
    PiecewisePath::from_knots(g, knots)
}

/// `A` and `Y` of `model` at grid time `v` on `path`.
pub fn a_and_y(model: &dyn ProcessModel, path: &PiecewisePath, v: f64) -> Result<(Vec<f64>, Vec<f64>, Trajectory)> {
    let view = PathView::of(path);
    let traj = model.trajectory(&view)?;
    let k = path.grid().knot_of(v)?;
    let a = traj.knot(k).to_vec();
    let y = y_process(model, path, v, &a)?;
    Ok((a, y, traj))
}

/// The flow `W^v = W_{.+v} + (A_v - Y_v) 1`.
pub fn shift_flow(model: &dyn ProcessModel, path: &PiecewisePath, v: f64) -> Result<ShiftedPath> {
    check_dim(model, path.dim())?;
    let (a, y, _) = a_and_y(model, path, v)?;
    let offset: Vec<f64> = a.iter().zip(&y).map(|(a, y)| a - y).collect();
    Ok(ShiftedPath { v, path: shift_path(path, v, &offset)?, offset })
}

/// Solves `Y_v = A_0(W_{.+v} + (A_v - Y_v) 1)` by fixed-point iteration
/// from `Y = 0`. For anchored models `A_0` vanishes identically and the
/// first iterate is already the solution; the residual is still checked.
pub fn y_process(model: &dyn ProcessModel, path: &PiecewisePath, v: f64, a_v: &[f64]) -> Result<Vec<f64>> {
    const MAX_ITER: usize = 50;
    let d = path.dim();
    let mut y = vec![0.0; d];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let offset: Vec<f64> = a_v.iter().zip(&y).map(|(a, y)| a - y).collect();
        let view = PathView::shifted(path, v, &offset);
        let traj = model.trajectory(&view)?;
        let next = model.a_at(&view, &traj, 0.0);
        residual = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        y = next;
        if residual <= 1e-12 {
            return Ok(y);
        }
    }
    Err(Error::FixedPoint { iterations: MAX_ITER, residual })
}

/// `X` on the knots of `path`.
pub fn x_knots(model: &dyn ProcessModel, path: &PiecewisePath) -> Result<(Vec<f64>, Trajectory)> {
    let traj = model.trajectory(&PathView::of(path))?;
    let x = path.knots().iter().zip(&traj.a).map(|(w, a)| w + a).collect();
    Ok((x, traj))
}

/// Diagonal of `nabla_{W_0} A_s` by central differences, with the
/// exceptional-set flag raised when the two probes see different jump
/// counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradW0 {
    pub diag: Vec<f64>,
    pub exceptional: bool,
}

/// Default step for the initial-value finite differences.
pub const FD_STEP: f64 = 1e-6;

/// `d/dx_j A_s(W - W_0 1 + x 1)` at `x = W_0` for every `j`.
pub fn grad_w0(model: &dyn ProcessModel, path: &PiecewisePath, s: f64, h: f64) -> Result<GradW0> {
    let jac = jacobian_w0(model, path, s, h)?;
    let d = path.dim();
    Ok(GradW0 { diag: (0..d).map(|j| jac.matrix[(j, j)]).collect(), exceptional: jac.exceptional })
}

/// Full matrix `d A_{s,i} / d x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianW0 {
    pub matrix: DMatrix<f64>,
    pub exceptional: bool,
}

pub fn jacobian_w0(model: &dyn ProcessModel, path: &PiecewisePath, s: f64, h: f64) -> Result<JacobianW0> {
    check_dim(model, path.dim())?;
    let d = path.dim();
    let k = path.grid().knot_of(s)?;
    let base = PathView::of(path);
    let lo = s.min(0.0) - model.lookback() - 2.0 * base.step;
    let hi = s.max(0.0) + base.step;
    let view = base.local(lo, hi);
    let kk = k - ((view.t0 - base.t0) / base.step).round() as usize;
    let mut matrix = DMatrix::zeros(d, d);
    let mut exceptional = false;
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = h;
        let tp = model.trajectory(&view.translated(&e))?;
        e[j] = -h;
        let tm = model.trajectory(&view.translated(&e))?;
        e[j] = 0.0;
        if tp.jumps.len() != tm.jumps.len() || tp.is_exceptional() || tm.is_exceptional() {
            exceptional = true;
        }
        for i in 0..d {
            matrix[(i, j)] = (tp.knot(kk)[i] - tm.knot(kk)[i]) / (2.0 * h);
        }
    }
    Ok(JacobianW0 { matrix, exceptional })
}

/// Finite-difference gradient of the first jump time after `lo` with
/// respect to `W_0`, for the orthogonality condition on jump models.
pub fn jump_time_gradient(model: &dyn ProcessModel, path: &PiecewisePath, lo: f64, h: f64) -> Result<Option<Vec<f64>>> {
    let view = PathView::of(path);
    let d = path.dim();
    let first = |v: &PathView| -> Result<Option<f64>> {
        Ok(model.trajectory(v)?.jumps.iter().find(|j| j.time > lo).map(|j| j.time))
    };
    let mut e = vec![0.0; d];
    let mut g = vec![0.0; d];
    for j in 0..d {
        e[j] = h;
        let p = first(&view.translated(&e))?;
        e[j] = -h;
        let m = first(&view.translated(&e))?;
        e[j] = 0.0;
        match (p, m) {
            (Some(p), Some(m)) => g[j] = (p - m) / (2.0 * h),
            _ => return Ok(None),
        }
    }
    Ok(Some(g))
}

/// `max_k |<grad_{W_0} tau_k, Delta A_{tau_k}>|` over all jumps, with the
/// jump-time gradient by central differences. `None` when a probe changes
/// the jump count or hits an exceptional path. For anchored models `Y = 0`,
/// so `Delta (A - Y) = Delta A`.
pub fn jv_defect(model: &dyn ProcessModel, path: &PiecewisePath, h: f64) -> Result<Option<f64>> {
    let view = PathView::of(path);
    let base = model.trajectory(&view)?;
    if base.is_exceptional() {
        return Ok(None);
    }
    let d = path.dim();
    let mut grads = vec![vec![0.0; d]; base.jumps.len()];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = h;
        let tp = model.trajectory(&view.translated(&e))?;
        e[j] = -h;
        let tm = model.trajectory(&view.translated(&e))?;
        e[j] = 0.0;
        if tp.jumps.len() != base.jumps.len() || tm.jumps.len() != base.jumps.len() || tp.is_exceptional() || tm.is_exceptional() {
            return Ok(None);
        }
        for (k, g) in grads.iter_mut().enumerate() {
            g[j] = (tp.jumps[k].time - tm.jumps[k].time) / (2.0 * h);
        }
    }
    Ok(Some(
        grads
            .iter()
            .zip(&base.jumps)
            .map(|(g, jump)| g.iter().zip(&jump.delta).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max),
    ))
}

/// `max_s |X_s(W^v) - X_{s+v}(W)|` over grid times `s` where both sides and
/// the model's look-back stay inside the window.
pub fn homogeneity_defect(model: &dyn ProcessModel, path: &PiecewisePath, v: f64) -> Result<f64> {
    let g = *path.grid();
    let sh = shift_flow(model, path, v)?;
    let (x, _) = x_knots(model, path)?;
    let (xv, _) = x_knots(model, &sh.path)?;
    let kv = g.shift_knots(v)?;
    let margin = ((model.lookback() / g.step()).ceil() as isize) + 2;
    let d = g.dim;
    let last = g.n_segments() as isize;
    let mut worst = 0.0f64;
    for k in 0..=last {
        let src = k + kv;
        if k < margin || src < margin || k > last || src > last {
            continue;
        }
        for j in 0..d {
            let a = xv[k as usize * d + j];
            let b = x[src as usize * d + j];
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// `max_s |(W^u)^v - W^{u+v}|` over the interior knots.
pub fn cocycle_defect(model: &dyn ProcessModel, path: &PiecewisePath, u: f64, v: f64) -> Result<f64> {
    let g = *path.grid();
    let wu = shift_flow(model, path, u)?;
    let wuv = shift_flow(model, &wu.path, v)?;
    let direct = shift_flow(model, path, u + v)?;
    let ku = g.shift_knots(u)?;
    let kv = g.shift_knots(v)?;
    let margin = ((model.lookback() / g.step()).ceil() as isize) + 2;
    let last = g.n_segments() as isize;
    let d = g.dim;
    let mut worst = 0.0f64;
    for k in 0..=last {
        let ok = |i: isize| i >= margin && i <= last;
        if !(ok(k) && ok(k + kv) && ok(k + ku + kv) && ok(k + ku)) {
            continue;
        }
        for j in 0..d {
            let a = wuv.path.knots()[k as usize * d + j];
            let b = direct.path.knots()[k as usize * d + j];
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowReport {
    pub model: String,
    pub paths: usize,
    pub shifts: Vec<f64>,
    pub max_homogeneity_defect: f64,
    pub homogeneity_tolerance: f64,
    /// Largest (jv) defect over paths where every probe kept the jump
    /// count; `None` for smooth models.
    pub max_jv_defect: Option<f64>,
    pub jv_checked: usize,
    pub jv_skipped: usize,
    pub jv_tolerance: f64,
    pub pass: bool,
}

/// Homogeneity defect on grid shifts over `mc.replicas` Brownian paths and,
/// for jump models, the (jv) orthogonality defect on the same paths.
pub fn flow_check(
    model: &dyn ProcessModel,
    density: &DensityModel,
    grid: Grid,
    shifts: &[f64],
    homogeneity_tolerance: f64,
    jv_tolerance: f64,
    mc: McParams,
) -> Result<FlowReport> {
    let jump = model.kind() == ModelKind::Jump;
    let rows: Vec<Result<(f64, Option<f64>)>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let mut worst = 0.0f64;
        for &v in shifts {
            worst = worst.max(homogeneity_defect(model, &w, v)?);
        }
        let jv = if jump { jv_defect(model, &w, FD_STEP)? } else { None };
        Ok((worst, jv))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let max_h = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let jv: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
    let max_jv = jump.then(|| jv.iter().copied().fold(0.0, f64::max));
    let jv_skipped = if jump { rows.len() - jv.len() } else { 0 };
    let pass = max_h <= homogeneity_tolerance && max_jv.is_none_or(|x| x <= jv_tolerance && !jv.is_empty());
    Ok(FlowReport {
        model: model.name(),
        paths: rows.len(),
        shifts: shifts.to_vec(),
        max_homogeneity_defect: max_h,
        homogeneity_tolerance,
        max_jv_defect: max_jv,
        jv_checked: jv.len(),
        jv_skipped,
        jv_tolerance,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Grid;

    fn path_from(grid: Grid, f: impl Fn(f64, usize) -> f64) -> PiecewisePath {
        let mut knots = Vec::new();
        for k in 0..grid.n_knots() {
            let s = grid.knot_time(k);
            for j in 0..grid.dim {
                knots.push(f(s, j));
            }
        }
        PiecewisePath::from_knots(grid, knots).unwrap()
    }

    #[test]
    fn psi_roundtrip() {
        let m = Switching::new(0.5, 0.1).unwrap();
        for &x in &[-1.0, 0.0, 0.01, 0.05, 0.099, 0.1, 0.3, 2.0] {
            assert!((m.psi_inv(m.psi(x)) - x).abs() < 1e-14, "{x}");
        }
    }

    #[test]
    fn switching_stays_put_on_the_left() {
        let g = Grid::new(1.0, 4, 2, 1).unwrap();
        let p = path_from(g, |s, _| -1.0 + 0.1 * s.sin());
        let m = Switching::new(0.5, 0.1).unwrap();
        let t = m.trajectory(&PathView::of(&p)).unwrap();
        assert!(t.a.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_crossing_swaps_bands() {
        let g = Grid::new(1.0, 4, 2, 4).unwrap();
        // q1 - q2 goes from 0.5 at s = -2 to -0.5 at s = 1; crossing of +eps at s = -0.5 + 0.1*...
        let p = path_from(g, |s, j| match j {
            0 => 0.5 * (-(s + 0.5) / 1.5),
            1 => 1.0,
            2 => 0.0,
            _ => -2.0,
        });
        let m = Collision::pair(0.1, 0.0).unwrap();
        let t = m.trajectory(&PathView::of(&p)).unwrap();
        assert_eq!(t.jumps.len(), 1);
        let j = &t.jumps[0];
        assert!((j.time + 0.8).abs() < 1e-12);
        // the jump lies before 0, so A is zero after it and the swap shows before it
        assert_eq!(t.a[g.zero_knot() * 4..g.zero_knot() * 4 + 4], [0.0; 4]);
        let x_before = &t.knot(0);
        assert_eq!(x_before[0], 0.0);
        assert_eq!(x_before[2], 0.0);
        assert!((x_before[1] + 1.0 - (-2.0)).abs() < 1e-15);
        assert!((j.delta[1] - 3.0).abs() < 1e-15 && (j.delta[3] + 3.0).abs() < 1e-15);
        assert_eq!(j.delta[0], 0.0);
    }

    #[test]
    fn no_crossing_no_jump() {
        let g = Grid::new(1.0, 3, 2, 4).unwrap();
        let p = path_from(g, |s, j| if j == 0 { 1.0 + 0.1 * s } else { 0.0 });
        let m = Collision::pair(0.1, 0.05).unwrap();
        let t = m.trajectory(&PathView::of(&p)).unwrap();
        assert!(t.jumps.is_empty() && t.a.iter().all(|&a| a == 0.0));
    }
}
