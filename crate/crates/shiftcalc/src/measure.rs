//! Initial densities `m` on `F` and the particle densities `m_n`.
//!
//! Every [`DensityModel`] is a product of one-dimensional profiles, one per
//! coordinate, each living on its own interval. That keeps the log-gradient,
//! the Laplacian ratio and the sampler coordinate-wise and exact.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quad::GaussLegendre;

/// `int_{-1}^{1} exp(-1/(1-u^2)) du`.
pub fn bump_norm() -> f64 {
    static Z: OnceLock<f64> = OnceLock::new();
    *Z.get_or_init(|| GaussLegendre::new(20).composite(-1.0, 1.0, 200, bump_raw))
}

fn bump_raw(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// `exp(-1/z)` for `z > 0`, zero otherwise.
fn edge(z: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else {
        (-1.0 / z).exp()
    }
}

/// Smooth step from 0 at `z <= 0` to 1 at `z >= 1`.
fn smooth_step(z: f64) -> f64 {
    let a = edge(z);
    let b = edge(1.0 - z);
    a / (a + b)
}

/// One-dimensional profile shapes in the normalized coordinate `u in (-1, 1)`
/// (or `u in R` for the Gaussian).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `exp(-1/(1-u^2))`.
    Bump,
    /// `cos^2(pi u / 2)`; log-gradient in `L^Q` only for `Q < 3`.
    CosSquared,
    /// Flat on `|u| <= width`, smooth decay to zero at `|u| = 1`.
    Plateau { width: f64 },
    /// Centred normal with standard deviation `sd`, unbounded support.
    Gaussian { sd: f64 },
}

/// Product density `m(x) = prod_j p((x_j - c_j) / h_j) / h_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityModel {
    profile: Profile,
    /// One interval per coordinate; infinite for the Gaussian.
    domain: Vec<(f64, f64)>,
    q_exponent: f64,
    /// Maximum of the one-dimensional profile density at unit scale.
    peak: f64,
}

/// Outcome of the admissibility checks run at construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub normalization_error: f64,
    pub min_interior_value: f64,
    pub max_boundary_value: f64,
    pub log_grad_moment: f64,
    pub q_exponent: f64,
}

impl DensityModel {
    /// Smooth bump on `box_`; admissible for every `Q`.
    pub fn bump(box_: &[(f64, f64)]) -> Result<Self> {
        Self::build(Profile::Bump, box_.to_vec(), 4.0)
    }

    /// `cos^2` profile; the declared `q` must stay below 3.
    pub fn cos_squared(box_: &[(f64, f64)], q: f64) -> Result<Self> {
        Self::build(Profile::CosSquared, box_.to_vec(), q)
    }

    /// Uniform on the inner fraction `width` of each side with smooth edges.
    pub fn plateau(box_: &[(f64, f64)], width: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&width) {
            return Err(Error::InvalidParameter(format!("plateau width {width} must lie in [0, 1)")));
        }
        Self::build(Profile::Plateau { width }, box_.to_vec(), 4.0)
    }

    /// Standard product Gaussian with standard deviation `sd`, centred at 0.
    pub fn gaussian(dim: usize, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::InvalidParameter(format!("Gaussian sd {sd} must be positive")));
        }
        let domain = vec![(f64::NEG_INFINITY, f64::INFINITY); dim];
        Self::build(Profile::Gaussian { sd }, domain, 4.0)
    }

    /// Builds from a profile, validating the domain and running
    /// [`DensityModel::check_conditions`].
    pub fn build(profile: Profile, domain: Vec<(f64, f64)>, q_exponent: f64) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::InvalidParameter("density needs at least one coordinate".into()));
        }
        if !(q_exponent > 1.0) {
            return Err(Error::InvalidParameter(format!("Q = {q_exponent} must exceed 1")));
        }
        let bounded = !matches!(profile, Profile::Gaussian { .. });
        for &(a, b) in &domain {
            if bounded && !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidParameter(format!("box side ({a}, {b}) must be bounded and non-empty")));
            }
        }
        if matches!(profile, Profile::CosSquared) && q_exponent >= 3.0 {
            return Err(Error::InvalidParameter(format!(
                "cos^2 profile has log-gradient in L^Q only for Q < 3 (declared Q = {q_exponent})"
            )));
        }
        let peak = match profile {
            Profile::Bump => (-1.0f64).exp() / bump_norm(),
            Profile::CosSquared => 1.0,
            Profile::Plateau { width } => 1.0 / (1.0 + width),
            Profile::Gaussian { sd } => 1.0 / (sd * (2.0 * PI).sqrt()),
        };
        let model = Self { profile, domain, q_exponent, peak };
        model.check_conditions()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    pub fn q_exponent(&self) -> f64 {
        self.q_exponent
    }

    /// `(u, du/dx)` for coordinate `j`.
    fn local(&self, j: usize, x: f64) -> (f64, f64) {
        match self.profile {
            Profile::Gaussian { .. } => (x, 1.0),
            _ => {
                let (a, b) = self.domain[j];
                let s = 2.0 / (b - a);
                (s * (x - 0.5 * (a + b)), s)
            }
        }
    }

    /// Profile density in `u`, integrating to one over its support.
    fn p(&self, u: f64) -> f64 {
        match self.profile {
            Profile::Bump => bump_raw(u) / bump_norm(),
            Profile::CosSquared => {
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (0.5 * PI * u).cos().powi(2)
                }
            }
            Profile::Plateau { width } => {
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    smooth_step((1.0 - u.abs()) / (1.0 - width)) / (1.0 + width)
                }
            }
            Profile::Gaussian { sd } => (-0.5 * (u / sd).powi(2)).exp() / (sd * (2.0 * PI).sqrt()),
        }
    }

    /// `d/du log p` on the open support.
    fn dlogp(&self, u: f64) -> f64 {
        match self.profile {
            Profile::Bump => -2.0 * u / (1.0 - u * u).powi(2),
            Profile::CosSquared => -PI * (0.5 * PI * u).tan(),
            Profile::Plateau { width } => {
                let z = (1.0 - u.abs()) / (1.0 - width);
                if z >= 1.0 {
                    return 0.0;
                }
                let s = smooth_step(z);
                let dz = (1.0 - s) * (1.0 / (z * z) + 1.0 / ((1.0 - z) * (1.0 - z)));
                -u.signum() * dz / (1.0 - width)
            }
            Profile::Gaussian { sd } => -u / (sd * sd),
        }
    }

    /// `d^2/du^2 log p` on the open support.
    fn d2logp(&self, u: f64) -> f64 {
        match self.profile {
            Profile::Bump => {
                let w = 1.0 - u * u;
                -2.0 / (w * w) - 8.0 * u * u / (w * w * w)
            }
            Profile::CosSquared => -0.5 * PI * PI / (0.5 * PI * u).cos().powi(2),
            Profile::Plateau { width } => {
                if (1.0 - u.abs()) / (1.0 - width) >= 1.0 {
                    return 0.0;
                }
                let h = 1e-5 * (1.0 - u.abs()).min(1.0 - width);
                (self.dlogp(u + h) - self.dlogp(u - h)) / (2.0 * h)
            }
            Profile::Gaussian { sd } => -1.0 / (sd * sd),
        }
    }

    fn inside(&self, j: usize, x: f64) -> bool {
        let (a, b) = self.domain[j];
        x > a && x < b
    }

    /// `m(x)`; zero off the open box.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut v = 1.0;
        for (j, &xj) in x.iter().enumerate() {
            if !self.inside(j, xj) {
                return 0.0;
            }
            let (u, s) = self.local(j, xj);
            v *= self.p(u) * s;
        }
        v
    }

    /// `m(x) / m(y)`, computed from log-profiles where both are positive so
    /// that tiny bump values do not underflow the ratio.
    pub fn ratio(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.dim() {
            if !self.inside(j, x[j]) {
                return 0.0;
            }
            if !self.inside(j, y[j]) {
                return f64::INFINITY;
            }
            acc += self.log_profile(j, x[j]) - self.log_profile(j, y[j]);
        }
        acc.exp()
    }

    fn log_profile(&self, j: usize, x: f64) -> f64 {
        let (u, _) = self.local(j, x);
        match self.profile {
            Profile::Bump => -1.0 / (1.0 - u * u),
            Profile::Gaussian { sd } => -0.5 * (u / sd).powi(2),
            _ => self.p(u).ln(),
        }
    }

    /// `grad m / m`; errors off the open box.
    pub fn log_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        x.iter()
            .enumerate()
            .map(|(j, &xj)| {
                if !self.inside(j, xj) {
                    return Err(Error::DomainViolation(format!("coordinate {j} = {xj} outside the support")));
                }
                let (u, s) = self.local(j, xj);
                Ok(self.dlogp(u) * s)
            })
            .collect()
    }

    /// `(1/2) Laplacian m / m = (1/2) sum_j [(log p)'' + (log p)'^2]`.
    pub fn half_laplacian_ratio(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            if !self.inside(j, xj) {
                return Err(Error::DomainViolation(format!("coordinate {j} = {xj} outside the support")));
            }
            let (u, s) = self.local(j, xj);
            let g = self.dlogp(u);
            acc += 0.5 * s * s * (self.d2logp(u) + g * g);
        }
        Ok(acc)
    }

    /// Exact draw from `m`. Coordinates are independent, so rejection
    /// against the uniform law runs per side with the profile maximum as
    /// envelope; the Gaussian is drawn directly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        const BUDGET: usize = 100_000;
        (0..self.dim())
            .map(|j| {
                if let Profile::Gaussian { sd } = self.profile {
                    return Ok(sd * rng.sample::<f64, _>(StandardNormal));
                }
                for _ in 0..BUDGET {
                    let u = 2.0 * rng.random::<f64>() - 1.0;
                    let p = self.p(u);
                    if p > self.peak * (1.0 + 1e-12) {
                        return Err(Error::EnvelopeViolation { value: p, envelope: self.peak });
                    }
                    if rng.random::<f64>() * self.peak < p {
                        let (a, b) = self.domain[j];
                        return Ok(0.5 * (a + b) + 0.5 * (b - a) * u);
                    }
                }
                Err(Error::Sampler(format!("rejection budget of {BUDGET} draws exhausted")))
            })
            .collect()
    }

    /// Marginal distribution function of coordinate `j`.
    pub fn marginal_cdf(&self, j: usize, x: f64) -> f64 {
        if let Profile::Gaussian { sd } = self.profile {
            return normal_cdf(x / sd);
        }
        let (a, b) = self.domain[j];
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return 1.0;
        }
        let (u, _) = self.local(j, x);
        GaussLegendre::new(20).composite(-1.0, u, 64, |v| self.p(v)).clamp(0.0, 1.0)
    }

    /// Normalization, positivity inside, decay at the boundary and the
    /// `L^Q(m)` moment of the log-gradient. Each is checked on the
    /// one-dimensional profile, which suffices for a product.
    pub fn check_conditions(&self) -> Result<ConditionReport> {
        let gl = GaussLegendre::new(20);
        let (lo, hi) = match self.profile {
            Profile::Gaussian { sd } => (-12.0 * sd, 12.0 * sd),
            _ => (-1.0, 1.0),
        };
        let total = gl.composite(lo, hi, 200, |u| self.p(u));
        let normalization_error = (total - 1.0).abs();
        if normalization_error > 1e-8 {
            return Err(Error::Quadrature(format!("profile integrates to {total}")));
        }
        let probes: Vec<f64> = (1..200).map(|k| lo + (hi - lo) * k as f64 / 200.0).collect();
        let min_interior_value = probes.iter().map(|&u| self.p(u)).fold(f64::INFINITY, f64::min);
        if !(min_interior_value > 0.0) {
            return Err(Error::InvalidParameter("density vanishes inside its box".into()));
        }
        let max_boundary_value = match self.profile {
            Profile::Gaussian { .. } => 0.0,
            _ => self.p(1.0 - 1e-9).max(self.p(-1.0 + 1e-9)),
        };
        if max_boundary_value > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "density does not decay at the boundary (value {max_boundary_value:e})"
            )));
        }
        // moment over a slightly trimmed support; the admissible profiles
        // make the trimmed tail negligible
        let q = self.q_exponent;
        let trim = match self.profile {
            Profile::Gaussian { .. } => 0.0,
            _ => 1e-6,
        };
        let log_grad_moment =
            gl.composite(lo + trim, hi - trim, 400, |u| self.dlogp(u).abs().powf(q) * self.p(u)) * self.dim() as f64;
        if !log_grad_moment.is_finite() {
            return Err(Error::Quadrature("log-gradient moment is not finite".into()));
        }
        Ok(ConditionReport { normalization_error, min_interior_value, max_boundary_value, log_grad_moment, q_exponent: q })
    }
}

/// Standard normal distribution function (Abramowitz-Stegun 7.1.26 is too
/// coarse here, so this integrates the density).
pub fn normal_cdf(z: f64) -> f64 {
    if z < -12.0 {
        return 0.0;
    }
    if z > 12.0 {
        return 1.0;
    }
    let gl = GaussLegendre::new(20);
    if z <= 0.0 {
        gl.composite(-12.0, z, 48, crate::quad::normal_pdf)
    } else {
        1.0 - gl.composite(z, 12.0, 48, crate::quad::normal_pdf)
    }
}

/// Base density `d` on `D = (0, 1)` for the particle system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDensity {
    Uniform,
    /// `1 + amplitude * sin(2 pi k x)`.
    Sine { amplitude: f64, k: u32 },
}

impl BaseDensity {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            BaseDensity::Uniform => 1.0,
            BaseDensity::Sine { amplitude, k } => 1.0 + amplitude * (2.0 * PI * k as f64 * x).sin(),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            BaseDensity::Uniform => 0.0,
            BaseDensity::Sine { amplitude, k } => {
                let w = 2.0 * PI * k as f64;
                amplitude * w * (w * x).cos()
            }
        }
    }

    pub fn deriv2(&self, x: f64) -> f64 {
        match *self {
            BaseDensity::Uniform => 0.0,
            BaseDensity::Sine { amplitude, k } => {
                let w = 2.0 * PI * k as f64;
                -amplitude * w * w * (w * x).sin()
            }
        }
    }

    /// `(log d)'`.
    pub fn h1(&self, x: f64) -> f64 {
        self.deriv(x) / self.eval(x)
    }

    /// `(log d)''`.
    pub fn h2(&self, x: f64) -> f64 {
        let d = self.eval(x);
        let d1 = self.deriv(x);
        self.deriv2(x) / d - d1 * d1 / (d * d)
    }
}

/// `m_n(x) = prod_i d(x_i)^{1/n} / ||d^{1/n}||_1^n` on `(0, 1)^n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleDensity {
    pub base: BaseDensity,
    /// Constant with `c <= d <= 1/c` and `|d'| <= 1/c`.
    pub c: f64,
    pub n: usize,
    /// `||d^{1/n}||_1`.
    norm1: f64,
}

const PANELS: usize = 64;

impl ParticleDensity {
    pub fn new(base: BaseDensity, c: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("particle count must be positive".into()));
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::InvalidParameter(format!("constant c = {c} must lie in (0, 1]")));
        }
        let probes = (0..=2000).map(|k| k as f64 / 2000.0);
        for x in probes {
            let d = base.eval(x);
            if d < c || d > 1.0 / c || base.deriv(x).abs() > 1.0 / c {
                return Err(Error::InvalidParameter(format!(
                    "base density violates c <= d <= 1/c, |d'| <= 1/c at x = {x} (c = {c})"
                )));
            }
        }
        let gl = GaussLegendre::new(20);
        let inv_n = 1.0 / n as f64;
        let norm1 = gl.composite(0.0, 1.0, PANELS, |x| base.eval(x).powf(inv_n));
        Ok(Self { base, c, n, norm1 })
    }

    /// `||d^{1/n}||_1^n`.
    pub fn norm(&self) -> f64 {
        self.norm1.powi(self.n as i32)
    }

    /// One-particle factor `q(x) = d(x)^{1/n} / ||d^{1/n}||_1`, a probability
    /// density on `(0, 1)`.
    pub fn factor(&self, x: f64) -> f64 {
        self.base.eval(x).powf(1.0 / self.n as f64) / self.norm1
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::InvalidParameter(format!("expected {} coordinates, got {}", self.n, x.len())));
        }
        if let Some(v) = x.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::DomainViolation(format!("particle position {v} outside (0, 1)")));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(x.iter().map(|&v| self.factor(v)).product())
    }

    /// `grad m_n = m_n (1/n) ((log d)'(x_i))_i`.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.eval(x)?;
        let inv_n = 1.0 / self.n as f64;
        Ok(x.iter().map(|&v| m * inv_n * self.base.h1(v)).collect())
    }

    /// `(1/2) Laplacian m_n = m_n (1/n) sum_i [h''/2 + h'^2/(2n)]`, `h = log d`.
    pub fn half_laplacian(&self, x: &[f64]) -> Result<f64> {
        let m = self.eval(x)?;
        let inv_n = 1.0 / self.n as f64;
        let s: f64 = x.iter().map(|&v| 0.5 * self.base.h2(v) + 0.5 * inv_n * self.base.h1(v).powi(2)).sum();
        Ok(m * inv_n * s)
    }

    /// `(lower, value, upper)` of the sandwich
    /// `(1 + L/n)^n <= ||d^{1/n}||_1^n <= (1 + L/n + L2/n^2)^n`,
    /// `L = int log d`, `L2 = int (log d)^2`.
    pub fn sandwich(&self) -> (f64, f64, f64) {
        let (l1, l2) = log_moments(&self.base);
        let nf = self.n as f64;
        let lower = (1.0 + l1 / nf).powf(nf);
        let upper = (1.0 + l1 / nf + l2 / (nf * nf)).powf(nf);
        (lower, self.norm(), upper)
    }
}

/// `(int log d, int (log d)^2)` over `(0, 1)`.
fn log_moments(base: &BaseDensity) -> (f64, f64) {
    let gl = GaussLegendre::new(20);
    let l1 = gl.composite(0.0, 1.0, PANELS, |x| base.eval(x).ln());
    let l2 = gl.composite(0.0, 1.0, PANELS, |x| base.eval(x).ln().powi(2));
    (l1, l2)
}

/// Per-`n` entries of [`particle_density_bounds`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleBoundRow {
    pub n: usize,
    pub sup_grad: f64,
    pub grad_energy: f64,
    pub abs_half_laplacian: f64,
    /// Standard error of `abs_half_laplacian` (zero when computed by
    /// tensor quadrature).
    pub abs_half_laplacian_stderr: f64,
    pub grad_bound: f64,
    pub grad_bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleBoundsReport {
    pub c: f64,
    pub c0: f64,
    pub n0: usize,
    pub rows: Vec<ParticleBoundRow>,
    pub grad_energy_decreasing: bool,
    /// `int |(1/2) (log d)''|`, the right-hand side of the `limsup` bound.
    pub laplacian_limit_bound: f64,
    /// `int (1/2) (log d)''`, the limit of the signed integral.
    pub laplacian_signed_limit: f64,
}

/// Lower bound constants for `||d^{1/n}||_1^n >= c0`, `n >= n0`, read off
/// the sandwich: the lower side `(1 + L/n)^n` increases in `n` once
/// `1 + L/n > 0`, so `n0` is the first such `n` and `c0` its value there.
pub fn lower_constants(base: &BaseDensity) -> (f64, usize) {
    let (l1, _) = log_moments(base);
    let mut n0 = 1usize;
    while 1.0 + l1 / n0 as f64 <= 0.0 {
        n0 += 1;
    }
    let nf = n0 as f64;
    ((1.0 + l1 / nf).powf(nf), n0)
}

/// Quadrature and Monte Carlo evaluation of the gradient and Laplacian
/// bounds for each `n` in `ns`. `mc_samples` and `seed` drive the
/// `int |(1/2) Laplacian m_n|` estimate for `n > 4`.
pub fn particle_density_bounds(
    base: BaseDensity,
    c: f64,
    ns: &[usize],
    mc_samples: usize,
    seed: u64,
) -> Result<ParticleBoundsReport> {
    let (c0, n0) = lower_constants(&base);
    let gl = GaussLegendre::new(20);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let pd = ParticleDensity::new(base, c, n)?;
        let inv_n = 1.0 / n as f64;
        let q = |x: f64| pd.factor(x);
        // int |grad m_n|^2 = (1/n^2) sum_i int q(x_i)^2 h'(x_i)^2 prod_{j != i} q(x_j)^2
        let a = gl.composite(0.0, 1.0, PANELS, |x| q(x).powi(2) * base.h1(x).powi(2));
        let b = gl.composite(0.0, 1.0, PANELS, |x| q(x).powi(2));
        let grad_energy = inv_n * a * b.powi(n as i32 - 1);
        let sup_grad = sup_grad_norm(&pd);
        let (abs_half_laplacian, abs_half_laplacian_stderr) = abs_half_laplacian(&pd, mc_samples, seed)?;
        let grad_bound = (n as f64).powf(-0.5) / (c0 * c.powi(3));
        rows.push(ParticleBoundRow {
            n,
            sup_grad,
            grad_energy,
            abs_half_laplacian,
            abs_half_laplacian_stderr,
            grad_bound,
            grad_bound_holds: n < n0 || sup_grad <= grad_bound,
        });
    }
    let grad_energy_decreasing = rows.windows(2).all(|w| w[1].grad_energy < w[0].grad_energy);
    let laplacian_limit_bound = gl.composite(0.0, 1.0, PANELS, |x| (0.5 * base.h2(x)).abs());
    let laplacian_signed_limit = gl.composite(0.0, 1.0, PANELS, |x| 0.5 * base.h2(x));
    Ok(ParticleBoundsReport { c, c0, n0, rows, grad_energy_decreasing, laplacian_limit_bound, laplacian_signed_limit })
}

/// `sup_x |grad m_n(x)|`. The log of `|grad m_n|^2` separates into a sum of
/// one-particle terms plus `log sum_i h'(x_i)^2`, so coordinate ascent over
/// a fine grid from a symmetric start converges quickly; all particles share
/// the maximizer up to the coupling through the sum.
fn sup_grad_norm(pd: &ParticleDensity) -> f64 {
    let grid: Vec<f64> = (1..2000).map(|k| k as f64 / 2000.0).collect();
    let n = pd.n;
    let objective = |x: &[f64]| -> f64 {
        let m: f64 = x.iter().map(|&v| pd.factor(v)).product();
        let s: f64 = x.iter().map(|&v| pd.base.h1(v).powi(2)).sum();
        m * s.sqrt() / n as f64
    };
    let mut best = 0.0f64;
    // starts: all particles at the density mode, or all at the steepest point
    let starts = [
        grid.iter().copied().fold((0.0, f64::MIN), |acc, x| if pd.factor(x) > acc.1 { (x, pd.factor(x)) } else { acc }).0,
        grid.iter()
            .copied()
            .fold((0.0, f64::MIN), |acc, x| {
                let v = pd.factor(x) * pd.base.h1(x).abs();
                if v > acc.1 { (x, v) } else { acc }
            })
            .0,
    ];
    for &s0 in &starts {
        let mut x = vec![s0; n];
        let mut val = objective(&x);
        for _ in 0..20 {
            let before = val;
            for i in 0..n {
                let mut best_v = x[i];
                for &g in &grid {
                    x[i] = g;
                    let v = objective(&x);
                    if v > val {
                        val = v;
                        best_v = g;
                    }
                }
                x[i] = best_v;
            }
            if val <= before * (1.0 + 1e-12) {
                break;
            }
        }
        best = best.max(val);
    }
    best
}

/// `int |(1/2) Laplacian m_n| = E|S|` with `S = (1/n) sum_i [h''/2 + h'^2/(2n)]`
/// under i.i.d. particles with density `q`. Tensor Gauss-Legendre for
/// `n <= 4`, inverse-CDF Monte Carlo otherwise.
fn abs_half_laplacian(pd: &ParticleDensity, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let n = pd.n;
    let inv_n = 1.0 / n as f64;
    let term = |x: f64| 0.5 * pd.base.h2(x) + 0.5 * inv_n * pd.base.h1(x).powi(2);
    if n <= 4 {
        let panels = match n {
            1 => 256,
            2 => 48,
            3 => 12,
            _ => 5,
        };
        let (xs, ws) = GaussLegendre::new(12).composite_rule(0.0, 1.0, panels);
        let qw: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| w * pd.factor(x)).collect();
        let tv: Vec<f64> = xs.iter().map(|&x| term(x)).collect();
        let len = xs.len();
        let mut idx = vec![0usize; n];
        let mut acc = 0.0;
        loop {
            let mut w = 1.0;
            let mut s = 0.0;
            for &k in &idx {
                w *= qw[k];
                s += tv[k];
            }
            acc += w * (inv_n * s).abs();
            let mut p = 0;
            while p < n {
                idx[p] += 1;
                if idx[p] < len {
                    break;
                }
                idx[p] = 0;
                p += 1;
            }
            if p == n {
                break;
            }
        }
        return Ok((acc, 0.0));
    }
    if samples < 2 {
        return Err(Error::InvalidParameter("Monte Carlo evaluation needs at least 2 samples".into()));
    }
    let table = InverseCdf::new(|x| pd.factor(x), 4096);
    let params = crate::mc::McParams::new(samples, seed);
    let vals = crate::mc::map_replicas(params, |_, rng| {
        let s: f64 = (0..n).map(|_| term(table.sample(rng))).sum();
        (inv_n * s).abs()
    });
    let est = crate::mc::McEstimate::from_samples(&vals, seed);
    Ok((est.mean, est.stderr))
}

/// Tabulated inverse distribution function of a positive density on
/// `(0, 1)`, with linear interpolation between cells.
#[derive(Debug, Clone)]
pub struct InverseCdf {
    cdf: Vec<f64>,
}

impl InverseCdf {
    pub fn new<F: Fn(f64) -> f64>(density: F, cells: usize) -> Self {
        let gl = GaussLegendre::new(8);
        let h = 1.0 / cells as f64;
        let mut cdf = Vec::with_capacity(cells + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for k in 0..cells {
            acc += gl.integrate(k as f64 * h, (k + 1) as f64 * h, &density);
            cdf.push(acc);
        }
        for v in &mut cdf {
            *v /= acc;
        }
        Self { cdf }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let cells = self.cdf.len() - 1;
        let k = self.cdf.partition_point(|&c| c <= p).clamp(1, cells);
        let (lo, hi) = (self.cdf[k - 1], self.cdf[k]);
        let frac = if hi > lo { (p - lo) / (hi - lo) } else { 0.5 };
        ((k - 1) as f64 + frac) / cells as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>()).clamp(1e-12, 1.0 - 1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::replica_rng;

    #[test]
    fn bump_log_grad_and_norm() {
        let m = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
        assert_eq!(m.log_grad(&[0.0]).unwrap()[0], 0.0);
        assert!((m.log_grad(&[0.5]).unwrap()[0] + 1.777_777_777_8).abs() < 1e-9);
        assert!((bump_norm() - 0.443_993_816).abs() < 1e-8);
        assert!((m.half_laplacian_ratio(&[0.0]).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn log_grad_matches_finite_differences() {
        let boxes = [(-1.0, 1.0), (0.0, 3.0)];
        let models = [
            DensityModel::bump(&boxes).unwrap(),
            DensityModel::cos_squared(&boxes, 2.5).unwrap(),
            DensityModel::plateau(&boxes, 0.4).unwrap(),
        ];
        let mut rng = replica_rng(3, 0);
        for m in &models {
            for _ in 0..100 {
                let x = m.sample(&mut rng).unwrap();
                let g = m.log_grad(&x).unwrap();
                for j in 0..2 {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (m.eval(&xp).ln() - m.eval(&xm).ln()) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-6 * (1.0 + g[j].abs()), "{:?} {fd} {}", m.profile(), g[j]);
                }
            }
        }
    }

    #[test]
    fn cos_squared_rejects_large_q() {
        assert!(DensityModel::cos_squared(&[(-1.0, 1.0)], 3.0).is_err());
    }

    #[test]
    fn plateau_is_flat_inside() {
        let m = DensityModel::plateau(&[(-1.0, 1.0)], 0.5).unwrap();
        assert_eq!(m.half_laplacian_ratio(&[0.2]).unwrap(), 0.0);
        assert!((m.eval(&[0.1]) - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn ratio_matches_eval() {
        let m = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
        let r = m.ratio(&[0.2], &[0.0]);
        assert!((r - (1.0f64 - 1.0 / 0.96).exp()).abs() < 1e-14);
        assert!((r - 0.959_18).abs() < 1e-5);
    }

    #[test]
    fn particle_density_examples() {
        let u = ParticleDensity::new(BaseDensity::Uniform, 0.5, 5).unwrap();
        assert!((u.eval(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap() - 1.0).abs() < 1e-14);
        let s = BaseDensity::Sine { amplitude: 0.3, k: 1 };
        let p1 = ParticleDensity::new(s, 0.5, 1).unwrap();
        assert!((p1.eval(&[0.3]).unwrap() - s.eval(0.3)).abs() < 1e-12);
        for n in 4..=16 {
            let (lo, v, hi) = ParticleDensity::new(s, 0.5, n).unwrap().sandwich();
            assert!(lo <= v && v <= hi, "{n}: {lo} {v} {hi}");
        }
        assert!(ParticleDensity::new(s, 0.5, 2).unwrap().eval(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn inverse_cdf_of_uniform() {
        let t = InverseCdf::new(|_| 1.0, 100);
        assert!((t.quantile(0.25) - 0.25).abs() < 1e-12);
    }
}
