//! Finite-dimensional Malliavin calculus on the Haar span: cylindrical
//! functionals, the gradient `D`, the divergence `delta`, the
//! Cameron-Martin factor and the L2 (Ogawa-type) integral.

use std::sync::Arc;

use serde::Serialize;

use crate::basis::{brownian_sample, BasisIndex, Grid, HElement, PiecewisePath};
use crate::error::{Error, Result};
use crate::mc::{map_replicas, McParams, VerificationReport};
use crate::measure::DensityModel;

type Outer = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type OuterGrad = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `phi(W) = F(<H_i1, dW>, ..., <e_j1, W_0>, ...)` with an analytic
/// gradient of `F`. Arguments are ordered: basis coefficients first, then
/// initial coordinates.
#[derive(Clone)]
pub struct CylindricalFunctional {
    pub name: String,
    pub indices: Vec<BasisIndex>,
    pub coords: Vec<usize>,
    outer: Outer,
    grad: OuterGrad,
}

impl std::fmt::Debug for CylindricalFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylindricalFunctional")
            .field("name", &self.name)
            .field("indices", &self.indices)
            .field("coords", &self.coords)
            .finish()
    }
}

impl CylindricalFunctional {
    pub fn new(
        name: impl Into<String>,
        indices: Vec<BasisIndex>,
        coords: Vec<usize>,
        outer: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), indices, coords, outer: Arc::new(outer), grad: Arc::new(grad) }
    }

    /// The constant functional `c`.
    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), vec![], vec![], move |_| c, |_| vec![])
    }

    /// `<H_index, dW>`.
    pub fn coefficient(index: BasisIndex) -> Self {
        Self::new(format!("<{index}, dW>"), vec![index], vec![], |x| x[0], |_| vec![1.0])
    }

    /// `<e_j, W_0>`.
    pub fn initial(j: usize) -> Self {
        Self::new(format!("x{j}"), vec![], vec![j], |x| x[0], |_| vec![1.0])
    }

    pub fn arity(&self) -> usize {
        self.indices.len() + self.coords.len()
    }

    /// Arguments of the outer function at `path`.
    pub fn args(&self, path: &PiecewisePath) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.arity());
        for idx in &self.indices {
            out.push(path.coeff(idx)?);
        }
        for &j in &self.coords {
            if j >= path.dim() {
                return Err(Error::InvalidParameter(format!("initial coordinate {j} out of range")));
            }
            out.push(path.x0()[j]);
        }
        Ok(out)
    }

    pub fn outer(&self, args: &[f64]) -> f64 {
        (self.outer)(args)
    }

    pub fn outer_grad(&self, args: &[f64]) -> Vec<f64> {
        (self.grad)(args)
    }

    pub fn eval(&self, path: &PiecewisePath) -> Result<f64> {
        Ok(self.outer(&self.args(path)?))
    }

    /// Largest gap between the analytic gradient and central differences
    /// of the outer function at `args`.
    pub fn gradient_fd_gap(&self, args: &[f64], eps: f64) -> f64 {
        let g = self.outer_grad(args);
        let mut x = args.to_vec();
        let mut worst = 0.0f64;
        for i in 0..args.len() {
            x[i] = args[i] + eps;
            let p = self.outer(&x);
            x[i] = args[i] - eps;
            let m = self.outer(&x);
            x[i] = args[i];
            worst = worst.max((g[i] - (p - m) / (2.0 * eps)).abs());
        }
        worst
    }
}

/// `D phi = sum_i f_i (H_i, 0) + sum_j f_j (0, e_j)` at `path`.
pub fn gradient(phi: &CylindricalFunctional, path: &PiecewisePath) -> Result<HElement> {
    let grid = *path.grid();
    let g = phi.outer_grad(&phi.args(path)?);
    let mut h = HElement::zero(grid);
    for (k, idx) in phi.indices.iter().enumerate() {
        let i = grid
            .dense_index(idx)
            .ok_or_else(|| Error::InvalidParameter(format!("{idx:?} lies outside the path's index table")))?;
        h.step[i] += g[k];
    }
    for (k, &j) in phi.coords.iter().enumerate() {
        h.init[j] += g[phi.indices.len() + k];
    }
    Ok(h)
}

fn check_grid(h: &HElement, path: &PiecewisePath) -> Result<()> {
    if h.grid != *path.grid() {
        return Err(Error::Unsupported("direction and path live on different grids".into()));
    }
    Ok(())
}

/// `delta(f, y) = int <f, dW> - <y, grad m / m (W_0)>` for deterministic `h`.
pub fn divergence(h: &HElement, path: &PiecewisePath, density: &DensityModel) -> Result<f64> {
    check_grid(h, path)?;
    let stoch: f64 = h.step.iter().zip(path.coeffs()).map(|(a, b)| a * b).sum();
    let lg = density.log_grad(path.x0())?;
    let drift: f64 = h.init.iter().zip(&lg).map(|(a, b)| a * b).sum();
    Ok(stoch - drift)
}

/// A random direction `a(W) xi` with cylindrical `a` and deterministic `xi`.
#[derive(Debug, Clone)]
pub struct RandomDirection {
    pub a: CylindricalFunctional,
    pub xi: HElement,
}

impl RandomDirection {
    pub fn at(&self, path: &PiecewisePath) -> Result<HElement> {
        Ok(self.xi.scale(self.a.eval(path)?))
    }
}

/// Product rule: `delta(a xi) = a delta(xi) - <D a, xi>`.
pub fn divergence_random(u: &RandomDirection, path: &PiecewisePath, density: &DensityModel) -> Result<f64> {
    let a = u.a.eval(path)?;
    let da = gradient(&u.a, path)?;
    Ok(a * divergence(&u.xi, path, density)? - da.inner(&u.xi))
}

/// Divergence of `sum_k a_k xi_k` computed componentwise,
/// `sum_i (u_i <kappa_i, dW> - <D u_i, kappa_i>)` over the Haar table and
/// the initial coordinates. Independent of the product-rule route.
pub fn divergence_componentwise(field: &[RandomDirection], path: &PiecewisePath, density: &DensityModel) -> Result<f64> {
    let grid = *path.grid();
    let lg = density.log_grad(path.x0())?;
    let mut u = HElement::zero(grid);
    let mut grads = Vec::with_capacity(field.len());
    for term in field {
        check_grid(&term.xi, path)?;
        u = u.add(&term.at(path)?);
        grads.push(gradient(&term.a, path)?);
    }
    let mut acc = 0.0;
    for i in 0..grid.basis_len() {
        let du_i: f64 = field.iter().zip(&grads).map(|(t, g)| t.xi.step[i] * g.step[i]).sum();
        acc += u.step[i] * path.coeffs()[i] - du_i;
    }
    for j in 0..grid.dim {
        let du_j: f64 = field.iter().zip(&grads).map(|(t, g)| t.xi.init[j] * g.init[j]).sum();
        acc += -u.init[j] * lg[j] - du_j;
    }
    Ok(acc)
}

/// `beta_{jh} = -delta(h)`.
pub fn log_derivative(h: &HElement, path: &PiecewisePath, density: &DensityModel) -> Result<f64> {
    Ok(-divergence(h, path, density)?)
}

/// `(e_j 1_{[s1, s2)}, 0)` for grid points `s1 < s2`.
pub fn indicator_direction(grid: Grid, j: usize, s1: f64, s2: f64) -> Result<HElement> {
    grid.knot_of(s1)?;
    grid.knot_of(s2)?;
    if s1 >= s2 || j >= grid.dim {
        return Err(Error::InvalidParameter("indicator needs s1 < s2 and a valid coordinate".into()));
    }
    let ramp = |s: f64| (s.clamp(s1, s2) - s1) - (0f64.clamp(s1, s2) - s1);
    let d = grid.dim;
    let mut knots = vec![0.0; grid.n_knots() * d];
    for k in 0..grid.n_knots() {
        knots[k * d + j] = ramp(grid.knot_time(k));
    }
    let p = PiecewisePath::from_knots(grid, knots)?;
    Ok(HElement::from_path(&p))
}

/// Cameron-Martin factor with a flag for a vanishing density at `x - y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CmFactor {
    pub value: f64,
    pub outside_support: bool,
}

/// `E_{(f,y)}(W) = exp(int <f, dW> - |f|^2 / 2) m(W_0 - y) / m(W_0)`, the
/// density of the law of `W + j(f, y)` against that of `W`.
pub fn cameron_martin_factor(path: &PiecewisePath, h: &HElement, density: &DensityModel) -> Result<CmFactor> {
    check_grid(h, path)?;
    let stoch: f64 = h.step.iter().zip(path.coeffs()).map(|(a, b)| a * b).sum();
    let energy: f64 = h.step.iter().map(|a| a * a).sum();
    let back: Vec<f64> = path.x0().iter().zip(&h.init).map(|(x, y)| x - y).collect();
    let ratio = density.ratio(&back, path.x0());
    if ratio == 0.0 {
        return Ok(CmFactor { value: 0.0, outside_support: true });
    }
    Ok(CmFactor { value: (stoch - 0.5 * energy).exp() * ratio, outside_support: false })
}

/// Relative defect of `E_h (E_g o S_{-h}) = E_{h+g}` at `path`.
pub fn cm_group_defect(path: &PiecewisePath, h: &HElement, g: &HElement, density: &DensityModel) -> Result<f64> {
    let eh = cameron_martin_factor(path, h, density)?;
    let back = path.add_scaled(h, -1.0);
    let eg = cameron_martin_factor(&back, g, density)?;
    let ehg = cameron_martin_factor(path, &h.add(g), density)?;
    let lhs = eh.value * eg.value;
    let scale = lhs.abs().max(ehg.value.abs());
    Ok(if scale == 0.0 { 0.0 } else { (lhs - ehg.value).abs() / scale })
}

/// A functional of the whole path for Cameron-Martin tests.
pub struct ShiftFunctional {
    pub name: String,
    #[allow(clippy::type_complexity)]
    f: Box<dyn Fn(&PiecewisePath) -> f64 + Send + Sync>,
}

impl ShiftFunctional {
    pub fn new(name: impl Into<String>, f: impl Fn(&PiecewisePath) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Box::new(f) }
    }

    pub fn eval(&self, path: &PiecewisePath) -> f64 {
        (self.f)(path)
    }
}

/// `E[phi(W + j(h))] = E[phi(W) E_h(W)]` on common replicas.
pub fn cameron_martin_check(
    functionals: &[ShiftFunctional],
    h: &HElement,
    density: &DensityModel,
    mc: McParams,
) -> Result<Vec<VerificationReport>> {
    let grid = h.grid;
    let rows: Vec<Result<Vec<(f64, f64)>>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let shifted = w.add_scaled(h, 1.0);
        let e = cameron_martin_factor(&w, h, density)?;
        Ok(functionals.iter().map(|f| (f.eval(&shifted), f.eval(&w) * e.value)).collect())
    });
    let mut table = Vec::with_capacity(rows.len());
    for r in rows {
        table.push(r?);
    }
    Ok(functionals
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let col: Vec<Option<(f64, f64)>> = table.iter().map(|r| Some(r[i])).collect();
            VerificationReport::paired(format!("cameron-martin {}", f.name), &col, mc.seed)
        })
        .collect())
}

/// Direction of a duality test: deterministic or `a xi`.
#[derive(Debug, Clone)]
pub enum Direction {
    Fixed(HElement),
    Random(RandomDirection),
}

/// `E[delta(h) phi]` against `E[<h, D phi>_H]` on common replicas.
pub fn duality_check(
    phi: &CylindricalFunctional,
    h: &Direction,
    density: &DensityModel,
    grid: Grid,
    mc: McParams,
) -> Result<VerificationReport> {
    let rows: Vec<Result<(f64, f64)>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let v = phi.eval(&w)?;
        let dphi = gradient(phi, &w)?;
        let (div, hv) = match h {
            Direction::Fixed(x) => (divergence(x, &w, density)?, x.clone()),
            Direction::Random(u) => (divergence_random(u, &w, density)?, u.at(&w)?),
        };
        Ok((div * v, hv.inner(&dphi)))
    });
    let mut pairs = Vec::with_capacity(rows.len());
    for r in rows {
        pairs.push(Some(r?));
    }
    Ok(VerificationReport::paired(format!("duality phi={}", phi.name), &pairs, mc.seed))
}

/// `sum_i <u, kappa_i> <kappa_i, dW> - <u_init, grad m / m>` over the
/// truncated basis (the path's own table).
pub fn l2_integral(field: &[RandomDirection], path: &PiecewisePath, density: &DensityModel) -> Result<f64> {
    let grid = *path.grid();
    let mut u = HElement::zero(grid);
    for term in field {
        check_grid(&term.xi, path)?;
        u = u.add(&term.at(path)?);
    }
    let stoch: f64 = u.step.iter().zip(path.coeffs()).map(|(a, b)| a * b).sum();
    let lg = density.log_grad(path.x0())?;
    let drift: f64 = u.init.iter().zip(&lg).map(|(a, b)| a * b).sum();
    Ok(stoch - drift)
}

/// `trace(D u) = sum_i <D <u, kappa_i>, kappa_i>` by central differences
/// along each basis direction the coefficients depend on.
pub fn trace_gradient(field: &[RandomDirection], path: &PiecewisePath, eps: f64) -> Result<f64> {
    let grid = *path.grid();
    let mut dirs: Vec<HElement> = Vec::new();
    let mut seen_step = std::collections::BTreeSet::new();
    let mut seen_init = std::collections::BTreeSet::new();
    for term in field {
        for idx in &term.a.indices {
            if let Some(i) = grid.dense_index(idx) {
                if seen_step.insert(i) {
                    let mut h = HElement::zero(grid);
                    h.step[i] = 1.0;
                    dirs.push(h);
                }
            }
        }
        for &j in &term.a.coords {
            if seen_init.insert(j) {
                dirs.push(HElement::initial(grid, j));
            }
        }
    }
    let mut acc = 0.0;
    for k in &dirs {
        let plus = path.add_scaled(k, eps);
        let minus = path.add_scaled(k, -eps);
        let mut up = HElement::zero(grid);
        let mut down = HElement::zero(grid);
        for term in field {
            up = up.add(&term.at(&plus)?);
            down = down.add(&term.at(&minus)?);
        }
        acc += (up.inner(k) - down.inner(k)) / (2.0 * eps);
    }
    Ok(acc)
}

/// Standard duality battery on a two-dimensional grid.
pub fn duality_battery(grid: Grid) -> Result<Vec<(CylindricalFunctional, Direction)>> {
    if grid.dim < 2 {
        return Err(Error::InvalidParameter("the duality battery needs two coordinates".into()));
    }
    let h1 = BasisIndex::constant(0, 0);
    let h2 = BasisIndex::haar(0, 0, 1, 1);
    let h3 = BasisIndex::haar(-1, 1, 2, 0);
    let h4 = BasisIndex::haar(0, 2, 3, 1);
    let b = |i: &BasisIndex| HElement::basis(grid, i);
    let e1 = HElement::initial(grid, 0);
    Ok(vec![
        (CylindricalFunctional::constant(1.0), Direction::Fixed(b(&h1)?)),
        (CylindricalFunctional::coefficient(h1), Direction::Fixed(b(&h1)?)),
        (
            CylindricalFunctional::new(
                "exp(-x0^2) cos(c2)",
                vec![h2],
                vec![0],
                |v| (-v[1] * v[1]).exp() * v[0].cos(),
                |v| {
                    let e = (-v[1] * v[1]).exp();
                    vec![-e * v[0].sin(), -2.0 * v[1] * e * v[0].cos()]
                },
            ),
            Direction::Fixed(e1.clone()),
        ),
        (
            CylindricalFunctional::new(
                "sin(c1 + c3)",
                vec![h1, h3],
                vec![],
                |v| (v[0] + v[1]).sin(),
                |v| vec![(v[0] + v[1]).cos(); 2],
            ),
            Direction::Fixed(b(&h1)?.add(&b(&h3)?.scale(0.5))),
        ),
        (
            CylindricalFunctional::new(
                "tanh(x0) cos(c2)",
                vec![h2],
                vec![0],
                |v| v[1].tanh() * v[0].cos(),
                |v| {
                    let t = v[1].tanh();
                    vec![-t * v[0].sin(), (1.0 - t * t) * v[0].cos()]
                },
            ),
            Direction::Fixed(b(&h2)?.add(&e1)),
        ),
        (
            CylindricalFunctional::new("sin(c4)", vec![h4], vec![], |v| v[0].sin(), |v| vec![v[0].cos()]),
            Direction::Random(RandomDirection {
                a: CylindricalFunctional::new("cos(c4)", vec![h4], vec![], |v| v[0].cos(), |v| vec![-v[0].sin()]),
                xi: b(&h4)?,
            }),
        ),
    ])
}

/// Bump profile `exp(1 - 1/(1 - x^2))` on `(-1, 1)`, zero outside.
fn bump_weight(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - x * x)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductRuleReport {
    pub directions: usize,
    pub paths: usize,
    /// Largest gap between the product-rule and componentwise divergence,
    /// per direction and for the summed field.
    pub max_defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Random directions for the product-rule check: multi-entry `xi` with
/// initial-value parts, so the two routes share no arithmetic.
pub fn product_rule_directions(grid: Grid) -> Result<Vec<RandomDirection>> {
    if grid.dim < 2 {
        return Err(Error::InvalidParameter("the product-rule directions need two coordinates".into()));
    }
    let h1 = BasisIndex::constant(0, 0);
    let h2 = BasisIndex::haar(0, 0, 1, 1);
    let h3 = BasisIndex::haar(-1, 1, 2, 0);
    let b = |i: &BasisIndex| HElement::basis(grid, i);
    Ok(vec![
        RandomDirection {
            a: CylindricalFunctional::new("cos(c1)", vec![h1], vec![], |v| v[0].cos(), |v| vec![-v[0].sin()]),
            xi: b(&h1)?.add(&b(&h2)?.scale(-0.7)).add(&HElement::initial(grid, 1).scale(0.4)),
        },
        RandomDirection {
            a: CylindricalFunctional::new(
                "tanh(x0) c3",
                vec![h3],
                vec![0],
                |v| v[1].tanh() * v[0],
                |v| vec![v[1].tanh(), (1.0 - v[1].tanh().powi(2)) * v[0]],
            ),
            xi: b(&h3)?.scale(1.3).add(&HElement::initial(grid, 0)).add(&b(&h2)?.scale(0.2)),
        },
        RandomDirection {
            a: CylindricalFunctional::new(
                "exp(-c2^2)",
                vec![h2],
                vec![],
                |v| (-v[0] * v[0]).exp(),
                |v| vec![-2.0 * v[0] * (-v[0] * v[0]).exp()],
            ),
            xi: b(&h2)?.add(&b(&h1)?.scale(0.5)),
        },
    ])
}

/// Product-rule divergence of each direction, and of their sum by
/// linearity, against the componentwise route on `mc.replicas` paths.
pub fn product_rule_check(
    directions: &[RandomDirection],
    density: &DensityModel,
    grid: Grid,
    tolerance: f64,
    mc: McParams,
) -> Result<ProductRuleReport> {
    let rows: Vec<Result<f64>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(grid, density, rng)?;
        let mut worst = 0.0f64;
        let mut sum = 0.0;
        for u in directions {
            let a = divergence_random(u, &w, density)?;
            let b = divergence_componentwise(std::slice::from_ref(u), &w, density)?;
            worst = worst.max((a - b).abs());
            sum += a;
        }
        let whole = divergence_componentwise(directions, &w, density)?;
        Ok(worst.max((sum - whole).abs()))
    });
    let max_defect = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    Ok(ProductRuleReport {
        directions: directions.len(),
        paths: mc.replicas,
        max_defect,
        tolerance,
        pass: max_defect <= tolerance,
    })
}

/// Three functionals for the Cameron-Martin check on a one-dimensional
/// bump. Each carries a bump factor in `W_0` so that it vanishes outside
/// the support and keeps `phi^2 m(x - y)^2 / m(x)` integrable.
pub fn cameron_martin_battery() -> Vec<ShiftFunctional> {
    vec![
        ShiftFunctional::new("bump(x0)", |p| bump_weight(p.x0()[0])),
        ShiftFunctional::new("bump(x0) cos(W_0.5 - W_-0.5)", |p| {
            bump_weight(p.x0()[0]) * (p.eval_coord(0.5, 0) - p.eval_coord(-0.5, 0)).cos()
        }),
        ShiftFunctional::new("bump(x0) atan(W_0.25)", |p| bump_weight(p.x0()[0]) * p.eval_coord(0.25, 0).atan()),
    ]
}

/// Direction used by the Cameron-Martin experiment.
pub fn cameron_martin_direction(grid: Grid) -> Result<HElement> {
    let f = HElement::basis(grid, &BasisIndex::constant(0, 0))?
        .scale(0.5)
        .add(&HElement::basis(grid, &BasisIndex::haar(-1, 1, 1, 0))?.scale(-0.3));
    Ok(f.add(&HElement::initial(grid, 0).scale(0.2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::replica_rng;

    fn setup() -> (Grid, DensityModel, PiecewisePath) {
        let g = Grid::new(1.0, 4, 2, 1).unwrap();
        let m = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
        let mut rng = replica_rng(3, 0);
        let w = brownian_sample(g, &m, &mut rng).unwrap();
        (g, m, w)
    }

    #[test]
    fn gradient_of_linear_functionals() {
        let (g, _, w) = setup();
        let d = gradient(&CylindricalFunctional::initial(0), &w).unwrap();
        assert_eq!(d, HElement::initial(g, 0));
        let idx = BasisIndex::haar(0, 1, 2, 0);
        let d = gradient(&CylindricalFunctional::coefficient(idx), &w).unwrap();
        assert_eq!(d, HElement::basis(g, &idx).unwrap());
    }

    #[test]
    fn divergence_examples() {
        let (g, m, w) = setup();
        let mut at = w.clone();
        let mut knots = at.knots().to_vec();
        let shift = 0.5 - at.x0()[0];
        knots.iter_mut().for_each(|k| *k += shift);
        at = PiecewisePath::from_knots(g, knots).unwrap();
        let d = divergence(&HElement::initial(g, 0), &at, &m).unwrap();
        assert!((d - 1.777_777_777_777_8).abs() < 1e-9);
        let idx = BasisIndex::constant(0, 0);
        let d = divergence(&HElement::basis(g, &idx).unwrap(), &w, &m).unwrap();
        assert!((d - w.coeff(&idx).unwrap()).abs() < 1e-15);
        let ind = indicator_direction(g, 0, -0.5, 0.25).unwrap();
        let d = divergence(&ind, &w, &m).unwrap();
        assert!((d - (w.eval_coord(0.25, 0) - w.eval_coord(-0.5, 0))).abs() < 1e-12);
    }

    #[test]
    fn cm_factor_example() {
        let g = Grid::new(1.0, 2, 1, 1).unwrap();
        let m = DensityModel::bump(&[(-1.0, 1.0)]).unwrap();
        let idx = BasisIndex::constant(-1, 0);
        let i = g.dense_index(&idx).unwrap();
        let mut coeffs = vec![0.0; g.basis_len()];
        coeffs[i] = 0.3;
        let w = PiecewisePath::from_coeffs(g, vec![0.1], coeffs).unwrap();
        let h = HElement::basis(g, &idx).unwrap();
        let e = cameron_martin_factor(&w, &h, &m).unwrap();
        assert!((e.value - (-0.2f64).exp()).abs() < 1e-12);
        assert_eq!(cameron_martin_factor(&w, &HElement::zero(g), &m).unwrap().value, 1.0);
    }

    #[test]
    fn l2_integral_minus_divergence_is_trace() {
        let (g, m, w) = setup();
        let idx = BasisIndex::constant(0, 0);
        let field = vec![RandomDirection { a: CylindricalFunctional::coefficient(idx), xi: HElement::basis(g, &idx).unwrap() }];
        let l2 = l2_integral(&field, &w, &m).unwrap();
        let div = divergence_random(&field[0], &w, &m).unwrap();
        assert!((l2 - div - 1.0).abs() < 1e-12);
        assert!((trace_gradient(&field, &w, 1e-5).unwrap() - 1.0).abs() < 1e-8);
    }
}
