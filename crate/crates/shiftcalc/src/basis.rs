//! Haar system on two-sided time, Levy-Ciesielski paths and the pathwise
//! integrals built from them.
//!
//! Time is cut into blocks `[b t, (b+1) t)`. Inside each block and for each
//! coordinate of `F = R^dim` the system consists of the constant
//! `t^{-1/2}` and the Haar functions of levels `0..m`, which is `2^m`
//! functions per block and coordinate. A window with parameter `r` covers
//! `[-r t, (r-1) t]`, i.e. the blocks `b = -r ..= r-2`.
//!
//! A [`PiecewisePath`] is the initial value plus a coefficient table on that
//! window; it is piecewise linear with knots every `t / 2^m` and constant
//! outside the window.

use rand::Rng;
use rand_distr::StandardNormal;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mc::{map_replicas, McParams};
use crate::measure::DensityModel;

/// Resolution and extent of a path: block length `t`, level `m`, window
/// parameter `r` and the dimension of `F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub t: f64,
    pub m: u32,
    pub r: u32,
    pub dim: usize,
}

impl Grid {
    pub fn new(t: f64, m: u32, r: u32, dim: usize) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("block length t = {t} must be positive")));
        }
        if r == 0 || dim == 0 || m > 24 {
            return Err(Error::InvalidParameter(format!(
                "grid needs r >= 1, dim >= 1 and m <= 24 (got m = {m}, r = {r}, dim = {dim})"
            )));
        }
        Ok(Self { t, m, r, dim })
    }

    /// Knot spacing `t / 2^m`.
    pub fn step(&self) -> f64 {
        self.t / self.per_block() as f64
    }

    pub fn per_block(&self) -> usize {
        1usize << self.m
    }

    pub fn n_blocks(&self) -> usize {
        2 * self.r as usize - 1
    }

    pub fn first_block(&self) -> i32 {
        -(self.r as i32)
    }

    pub fn last_block(&self) -> i32 {
        self.r as i32 - 2
    }

    pub fn start(&self) -> f64 {
        -(self.r as f64) * self.t
    }

    pub fn end(&self) -> f64 {
        (self.r as f64 - 1.0) * self.t
    }

    pub fn n_segments(&self) -> usize {
        self.n_blocks() * self.per_block()
    }

    pub fn n_knots(&self) -> usize {
        self.n_segments() + 1
    }

    /// Index of the knot at time 0.
    pub fn zero_knot(&self) -> usize {
        self.r as usize * self.per_block()
    }

    pub fn knot_time(&self, k: usize) -> f64 {
        (k as f64 - self.zero_knot() as f64) * self.step()
    }

    /// Number of basis functions in `I(m, r)`: `dim * (2r - 1) * 2^m`.
    pub fn basis_len(&self) -> usize {
        self.dim * self.n_segments()
    }

    /// `v / step` as an integer, or an error if `v` is off the grid.
    pub fn shift_knots(&self, v: f64) -> Result<isize> {
        let q = v / self.step();
        let k = q.round();
        if (q - k).abs() > 1e-9 * q.abs().max(1.0) {
            return Err(Error::NonGridShift(v));
        }
        Ok(k as isize)
    }

    /// Knot index of a grid time inside the window.
    pub fn knot_of(&self, s: f64) -> Result<usize> {
        let k = self.shift_knots(s)? + self.zero_knot() as isize;
        if k < 0 || k as usize >= self.n_knots() {
            return Err(Error::InvalidParameter(format!("time {s} outside the window")));
        }
        Ok(k as usize)
    }

    /// Position of `idx` in the dense coefficient table, ordered by
    /// (block, level, position, coordinate).
    pub fn dense_index(&self, idx: &BasisIndex) -> Option<usize> {
        if idx.coord >= self.dim || idx.block < self.first_block() || idx.block > self.last_block() {
            return None;
        }
        if let Level::Haar(l) = idx.level {
            if l >= self.m {
                return None;
            }
        }
        let q = idx.q()?;
        let b = (idx.block - self.first_block()) as usize;
        Some((b * self.per_block() + q - 1) * self.dim + idx.coord)
    }

    /// Inverse of [`Grid::dense_index`].
    pub fn index_at(&self, i: usize) -> BasisIndex {
        let coord = i % self.dim;
        let rest = i / self.dim;
        let q = rest % self.per_block() + 1;
        let block = (rest / self.per_block()) as i32 + self.first_block();
        let (level, position) = if q == 1 {
            (Level::Constant, 1)
        } else {
            let l = usize::BITS - 1 - (q - 1).leading_zeros();
            (Level::Haar(l), (q - (1 << l)) as u32)
        };
        BasisIndex { block, level, position, coord }
    }
}

/// Level of a basis function: the block constant `D_1` or a Haar level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Constant,
    Haar(u32),
}

/// One function `H_i = D_q(. - b t) f_coord` of the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisIndex {
    /// Block `b`; the support lies in `[b t, (b+1) t)`.
    pub block: i32,
    pub level: Level,
    /// `k` in `1..=2^level` (always 1 for the constant).
    pub position: u32,
    pub coord: usize,
}

impl std::fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.level {
            Level::Constant => write!(f, "H[b={} const j={}]", self.block, self.coord),
            Level::Haar(l) => write!(f, "H[b={} l={} k={} j={}]", self.block, l, self.position, self.coord),
        }
    }
}

impl BasisIndex {
    pub fn constant(block: i32, coord: usize) -> Self {
        Self { block, level: Level::Constant, position: 1, coord }
    }

    pub fn haar(block: i32, level: u32, position: u32, coord: usize) -> Self {
        Self { block, level: Level::Haar(level), position, coord }
    }

    /// Local number `q` within the block: 1 for the constant, `2^l + k`
    /// for level `l` and position `k`. `None` for an invalid position.
    pub fn q(&self) -> Option<usize> {
        match self.level {
            Level::Constant => (self.position == 1).then_some(1),
            Level::Haar(l) => {
                let k = self.position as usize;
                (k >= 1 && k <= 1 << l).then_some((1 << l) + k)
            }
        }
    }

    pub fn level_number(&self) -> u32 {
        match self.level {
            Level::Constant => 0,
            Level::Haar(l) => l,
        }
    }

    /// Support `[a, b)`.
    pub fn support(&self, t: f64) -> (f64, f64) {
        let base = self.block as f64 * t;
        match self.level {
            Level::Constant => (base, base + t),
            Level::Haar(l) => {
                let w = t / (1u64 << l) as f64;
                let k = self.position as f64;
                (base + (k - 1.0) * w, base + k * w)
            }
        }
    }

    pub fn amplitude(&self, t: f64) -> f64 {
        match self.level {
            Level::Constant => t.powf(-0.5),
            Level::Haar(l) => t.powf(-0.5) * 2f64.powf(0.5 * l as f64),
        }
    }

    /// The step function `H_i` as an `F`-valued [`StepFn`].
    pub fn step_fn(&self, t: f64, dim: usize) -> StepFn {
        let (a, b) = self.support(t);
        let amp = self.amplitude(t);
        let mut unit = vec![0.0; dim];
        match self.level {
            Level::Constant => {
                unit[self.coord] = amp;
                StepFn::new(vec![a, b], unit, dim)
            }
            Level::Haar(_) => {
                let mut vals = vec![0.0; 2 * dim];
                vals[self.coord] = amp;
                vals[dim + self.coord] = -amp;
                StepFn::new(vec![a, 0.5 * (a + b), b], vals, dim)
            }
        }
    }
}

/// Value of `H_index` at time `s` (the coordinate direction is implicit).
pub fn haar_eval(index: &BasisIndex, t: f64, s: f64) -> f64 {
    let (a, b) = index.support(t);
    if s < a || s >= b {
        return 0.0;
    }
    let amp = index.amplitude(t);
    match index.level {
        Level::Constant => amp,
        Level::Haar(_) => {
            if s < 0.5 * (a + b) {
                amp
            } else {
                -amp
            }
        }
    }
}

/// Which family an [`IndexSet`] enumerates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexSetKind {
    /// `I(m, r)`.
    Window { m: u32, r: u32 },
    /// `J(m)`, the union over `r`, truncated at `r_max`.
    AllWindows { m: u32, r_max: u32 },
    /// `I(r)`, the union over `m`, truncated at `m_max`.
    AllLevels { r: u32, m_max: u32 },
}

#[derive(Debug, Clone)]
pub struct IndexSet {
    pub kind: IndexSetKind,
    pub indices: Vec<BasisIndex>,
}

impl IndexSet {
    pub fn window(dim: usize, m: u32, r: u32) -> Result<Self> {
        let grid = Grid::new(1.0, m, r, dim)?;
        let indices = (0..grid.basis_len()).map(|i| grid.index_at(i)).collect();
        Ok(Self { kind: IndexSetKind::Window { m, r }, indices })
    }

    /// The nested unions are finite once truncated, and the truncation is
    /// the largest member of the union.
    pub fn all_windows(dim: usize, m: u32, r_max: u32) -> Result<Self> {
        let mut s = Self::window(dim, m, r_max)?;
        s.kind = IndexSetKind::AllWindows { m, r_max };
        Ok(s)
    }

    pub fn all_levels(dim: usize, r: u32, m_max: u32) -> Result<Self> {
        let mut s = Self::window(dim, m_max, r)?;
        s.kind = IndexSetKind::AllLevels { r, m_max };
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BasisIndex> {
        self.indices.iter()
    }
}

/// Piecewise-constant `F`-valued function: `values[k]` on
/// `[breaks[k], breaks[k+1])`, zero outside `[breaks[0], breaks[last])`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFn {
    breaks: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
}

impl StepFn {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>, dim: usize) -> Self {
        assert!(breaks.len() >= 2 || values.is_empty(), "step function needs two breaks");
        assert_eq!(values.len(), (breaks.len().saturating_sub(1)) * dim, "value table size");
        assert!(breaks.windows(2).all(|w| w[0] < w[1]), "breaks must increase");
        Self { breaks, values, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    fn piece(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Right-continuous value at `s`.
    pub fn value(&self, s: f64, out: &mut [f64]) {
        out.fill(0.0);
        if self.breaks.len() < 2 || s < self.breaks[0] || s >= *self.breaks.last().unwrap() {
            return;
        }
        let k = self.breaks.partition_point(|&b| b <= s) - 1;
        out.copy_from_slice(self.piece(k));
    }

    /// Left limit at `s`.
    pub fn left_limit(&self, s: f64, out: &mut [f64]) {
        out.fill(0.0);
        if self.breaks.len() < 2 || s <= self.breaks[0] || s > *self.breaks.last().unwrap() {
            return;
        }
        let k = self.breaks.partition_point(|&b| b < s) - 1;
        out.copy_from_slice(self.piece(k));
    }
}

/// `int <V, dU>` over `[u, v]` with the averaging convention for jumps:
/// interior jumps of `U` are weighted by `(V(w-) + V(w)) / 2`, a jump at
/// `u` by `V(u) / 2` and a jump at `v` by `V(v-) / 2`.
pub fn stieltjes_average(v: &StepFn, u: &StepFn, window: (f64, f64)) -> f64 {
    assert_eq!(v.dim, u.dim, "dimension mismatch");
    let (a, b) = window;
    let d = v.dim;
    let (mut ul, mut ur, mut vl, mut vr) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut acc = 0.0;
    for &w in u.breaks.iter().filter(|&&w| w >= a && w <= b) {
        u.left_limit(w, &mut ul);
        u.value(w, &mut ur);
        let weight: &[f64] = if w == a {
            v.value(w, &mut vr);
            &vr
        } else if w == b {
            v.left_limit(w, &mut vl);
            &vl
        } else {
            v.left_limit(w, &mut vl);
            v.value(w, &mut vr);
            // V(w-) + V(w); the common factor 1/2 is applied below
            for (l, r) in vl.iter_mut().zip(&vr) {
                *l += r;
            }
            &vl
        };
        let jump_dot: f64 = weight.iter().zip(ur.iter().zip(&ul)).map(|(x, (r, l))| x * (r - l)).sum();
        acc += 0.5 * jump_dot;
    }
    acc
}

/// `int <V, dH_index>` over `window`.
pub fn jump_integral(v: &StepFn, index: &BasisIndex, t: f64, window: (f64, f64)) -> f64 {
    stieltjes_average(v, &index.step_fn(t, v.dim), window)
}

/// Two-sided piecewise-linear path at level `(m, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    grid: Grid,
    x0: Vec<f64>,
    coeffs: Vec<f64>,
    knots: Vec<f64>,
}

impl PiecewisePath {
    /// Path `x0 + sum_i coeffs[i] int_0^. H_i`.
    pub fn from_coeffs(grid: Grid, x0: Vec<f64>, coeffs: Vec<f64>) -> Result<Self> {
        if x0.len() != grid.dim || coeffs.len() != grid.basis_len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} initial values and {} coefficients, got {} and {}",
                grid.dim,
                grid.basis_len(),
                x0.len(),
                coeffs.len()
            )));
        }
        let knots = synthesize(&grid, &x0, &coeffs);
        Ok(Self { grid, x0, coeffs, knots })
    }

    /// Path through the given knot values (row-major, `n_knots x dim`).
    pub fn from_knots(grid: Grid, knots: Vec<f64>) -> Result<Self> {
        if knots.len() != grid.n_knots() * grid.dim {
            return Err(Error::InvalidParameter(format!(
                "expected {} knot values, got {}",
                grid.n_knots() * grid.dim,
                knots.len()
            )));
        }
        let z = grid.zero_knot() * grid.dim;
        let x0 = knots[z..z + grid.dim].to_vec();
        let coeffs = analyze(&grid, &knots);
        Ok(Self { grid, x0, coeffs, knots })
    }

    pub fn zero(grid: Grid) -> Self {
        Self::from_coeffs(grid, vec![0.0; grid.dim], vec![0.0; grid.basis_len()]).expect("sizes match")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot(&self, k: usize) -> &[f64] {
        &self.knots[k * self.grid.dim..(k + 1) * self.grid.dim]
    }

    /// Coordinate `j` at time `s`; constant outside the window.
    pub fn eval_coord(&self, s: f64, j: usize) -> f64 {
        let d = self.grid.dim;
        let p = s / self.grid.step() + self.grid.zero_knot() as f64;
        let last = self.grid.n_segments();
        if p <= 0.0 {
            return self.knots[j];
        }
        if p >= last as f64 {
            return self.knots[last * d + j];
        }
        let k = p.floor() as usize;
        let frac = p - k as f64;
        let a = self.knots[k * d + j];
        let b = self.knots[(k + 1) * d + j];
        a + frac * (b - a)
    }

    pub fn eval(&self, s: f64) -> Vec<f64> {
        (0..self.grid.dim).map(|j| self.eval_coord(s, j)).collect()
    }

    /// `<H_index, dW>`: the stored coefficient when the index belongs to the
    /// table, otherwise the exact Stieltjes sum of path increments.
    pub fn coeff(&self, index: &BasisIndex) -> Result<f64> {
        if let Level::Haar(l) = index.level {
            if l >= self.grid.m {
                return Err(Error::ResolutionMismatch { index_level: l, path_level: self.grid.m });
            }
        }
        if index.coord >= self.grid.dim {
            return Err(Error::InvalidParameter(format!("coordinate {} out of range", index.coord)));
        }
        match self.grid.dense_index(index) {
            Some(i) => Ok(self.coeffs[i]),
            None => Ok(self.coeff_from_increments(index)),
        }
    }

    /// Stieltjes sum `int H_index dW` from path values alone.
    pub fn coeff_from_increments(&self, index: &BasisIndex) -> f64 {
        let t = self.grid.t;
        let (a, b) = index.support(t);
        let amp = index.amplitude(t);
        let j = index.coord;
        match index.level {
            Level::Constant => amp * (self.eval_coord(b, j) - self.eval_coord(a, j)),
            Level::Haar(_) => {
                let mid = 0.5 * (a + b);
                let wa = self.eval_coord(a, j);
                let wm = self.eval_coord(mid, j);
                let wb = self.eval_coord(b, j);
                amp * ((wm - wa) - (wb - wm))
            }
        }
    }

    /// Derivative of the path as a step function on the knot grid.
    pub fn velocity(&self) -> StepFn {
        let g = &self.grid;
        let d = g.dim;
        let breaks: Vec<f64> = (0..g.n_knots()).map(|k| g.knot_time(k)).collect();
        let h = g.step();
        let mut vals = Vec::with_capacity(g.n_segments() * d);
        for k in 0..g.n_segments() {
            for j in 0..d {
                vals.push((self.knots[(k + 1) * d + j] - self.knots[k * d + j]) / h);
            }
        }
        StepFn::new(breaks, vals, d)
    }

    /// `W + eps * j(h)`: coefficients and initial value shifted along `h`.
    pub fn add_scaled(&self, h: &HElement, eps: f64) -> Self {
        assert_eq!(h.grid, self.grid, "direction lives on a different grid");
        let x0 = self.x0.iter().zip(&h.init).map(|(a, b)| a + eps * b).collect();
        let coeffs = self.coeffs.iter().zip(&h.step).map(|(a, b)| a + eps * b).collect();
        Self::from_coeffs(self.grid, x0, coeffs).expect("sizes match")
    }

    /// Sum of squared coefficients.
    pub fn coeff_energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// `int |dW/ds|^2 ds` over the window from the knot increments.
    pub fn derivative_energy(&self) -> f64 {
        let d = self.grid.dim;
        let h = self.grid.step();
        self.knots
            .windows(2 * d)
            .step_by(d)
            .map(|w| (0..d).map(|j| (w[d + j] - w[j]).powi(2)).sum::<f64>() / h)
            .sum()
    }
}

/// Inverse Haar transform: knot values from `x0` and the coefficient table.
fn synthesize(grid: &Grid, x0: &[f64], coeffs: &[f64]) -> Vec<f64> {
    let d = grid.dim;
    let pb = grid.per_block();
    let sqrt_t = grid.t.sqrt();
    let mut incs = vec![0.0; grid.n_segments() * d];
    let mut cur = vec![0.0; pb];
    let mut next = vec![0.0; pb];
    for b in 0..grid.n_blocks() {
        for j in 0..d {
            let c = |q: usize| coeffs[(b * pb + q - 1) * d + j];
            cur[0] = c(1) * sqrt_t;
            for l in 0..grid.m {
                let n = 1usize << l;
                let h = 0.5 * sqrt_t * 2f64.powf(-0.5 * l as f64);
                for k in 0..n {
                    let total = cur[k];
                    let detail = h * c(n + k + 1);
                    next[2 * k] = 0.5 * total + detail;
                    next[2 * k + 1] = 0.5 * total - detail;
                }
                cur[..2 * n].copy_from_slice(&next[..2 * n]);
            }
            for k in 0..pb {
                incs[(b * pb + k) * d + j] = cur[k];
            }
        }
    }
    let nk = grid.n_knots();
    let z = grid.zero_knot();
    let mut knots = vec![0.0; nk * d];
    knots[z * d..(z + 1) * d].copy_from_slice(x0);
    for k in z..grid.n_segments() {
        for j in 0..d {
            knots[(k + 1) * d + j] = knots[k * d + j] + incs[k * d + j];
        }
    }
    for k in (0..z).rev() {
        for j in 0..d {
            knots[k * d + j] = knots[(k + 1) * d + j] - incs[k * d + j];
        }
    }
    knots
}

/// Forward Haar transform: coefficient table from knot values.
fn analyze(grid: &Grid, knots: &[f64]) -> Vec<f64> {
    let d = grid.dim;
    let pb = grid.per_block();
    let inv_sqrt_t = 1.0 / grid.t.sqrt();
    let mut coeffs = vec![0.0; grid.basis_len()];
    let mut cur = vec![0.0; pb];
    for b in 0..grid.n_blocks() {
        for j in 0..d {
            for k in 0..pb {
                let g = b * pb + k;
                cur[k] = knots[(g + 1) * d + j] - knots[g * d + j];
            }
            let mut width = pb;
            for l in (0..grid.m).rev() {
                let n = 1usize << l;
                let amp = inv_sqrt_t * 2f64.powf(0.5 * l as f64);
                debug_assert_eq!(width, 2 * n);
                for k in 0..n {
                    let left = cur[2 * k];
                    let right = cur[2 * k + 1];
                    coeffs[(b * pb + n + k) * d + j] = amp * (left - right);
                    cur[k] = left + right;
                }
                width = n;
            }
            coeffs[(b * pb) * d + j] = inv_sqrt_t * cur[0];
        }
    }
    coeffs
}

/// `pi_{m,r} W`: keeps `x0` and the coefficients in `I(m, r)`. Levels and
/// windows beyond the path's own are a no-op.
pub fn project_path(path: &PiecewisePath, m: u32, r: u32) -> PiecewisePath {
    let g = path.grid;
    if m >= g.m && r >= g.r {
        return path.clone();
    }
    let ng = Grid { m: m.min(g.m), r: r.min(g.r), ..g };
    let coeffs = (0..ng.basis_len())
        .map(|i| {
            let idx = ng.index_at(i);
            g.dense_index(&idx).map(|k| path.coeffs[k]).unwrap_or(0.0)
        })
        .collect();
    PiecewisePath::from_coeffs(ng, path.x0.clone(), coeffs).expect("sizes match")
}

/// Brownian path: `x0` drawn from `density`, coefficients i.i.d. `N(0, 1)`.
pub fn brownian_sample<R: Rng + ?Sized>(grid: Grid, density: &DensityModel, rng: &mut R) -> Result<PiecewisePath> {
    if density.dim() != grid.dim {
        return Err(Error::InvalidParameter(format!(
            "density dimension {} differs from grid dimension {}",
            density.dim(),
            grid.dim
        )));
    }
    let x0 = density.sample(rng)?;
    let coeffs = (0..grid.basis_len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    PiecewisePath::from_coeffs(grid, x0, coeffs)
}

/// `sum_i <H_i, dW> <H_i, dW'>` over `I(m, r)` of the path's grid, where
/// `<H_i, dW'> = int <H_i, d(dW/ds)>` uses the jump averaging convention.
/// Vanishes by antisymmetry of `<H_i, dH_j>`.
pub fn zero_sum_check(path: &PiecewisePath) -> f64 {
    let g = path.grid;
    let vel = path.velocity();
    let window = (g.start(), g.end());
    (0..g.basis_len())
        .map(|i| {
            let idx = g.index_at(i);
            let c = path.coeffs[i];
            if c == 0.0 {
                return 0.0;
            }
            c * stieltjes_average(&idx.step_fn(g.t, g.dim), &vel, window)
        })
        .sum()
}

/// `int <u, v> ds` for two step functions of the same dimension.
pub fn l2_inner(u: &StepFn, v: &StepFn) -> f64 {
    assert_eq!(u.dim, v.dim, "dimension mismatch");
    let mut cuts: Vec<f64> = u.breaks.iter().chain(&v.breaks).copied().collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let (mut a, mut b) = (vec![0.0; u.dim], vec![0.0; u.dim]);
    cuts.windows(2)
        .map(|w| {
            u.value(w[0], &mut a);
            v.value(w[0], &mut b);
            (w[1] - w[0]) * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisAlgebraReport {
    pub m: u32,
    pub r: u32,
    pub indices: usize,
    /// `max |int H_i H_j - delta_ij|`.
    pub orthonormality_defect: f64,
    /// `max |<H_i, dH_j> + <H_j, dH_i>|`.
    pub antisymmetry_defect: f64,
    pub paths: usize,
    /// `max |sum_i <H_i, dW> <H_i, dW'>|` over the projected paths.
    pub zero_sum_defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Orthonormality and jump-integral antisymmetry over `I(m, r)` with
/// `t = 1`, and the zero-sum identity on `paths` Brownian paths sampled two
/// levels finer and projected to `(m, r)`.
pub fn basis_algebra_check(m: u32, r: u32, dim: usize, paths: usize, seed: u64, tolerance: f64) -> Result<BasisAlgebraReport> {
    let g = Grid::new(1.0, m, r, dim)?;
    let window = (g.start(), g.end());
    let steps: Vec<StepFn> = (0..g.basis_len()).map(|i| g.index_at(i).step_fn(g.t, dim)).collect();
    let (mut ortho, mut anti) = (0.0f64, 0.0f64);
    for i in 0..steps.len() {
        for j in i..steps.len() {
            let delta = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((l2_inner(&steps[i], &steps[j]) - delta).abs());
            let s = stieltjes_average(&steps[i], &steps[j], window) + stieltjes_average(&steps[j], &steps[i], window);
            anti = anti.max(s.abs());
        }
    }
    let fine = Grid::new(1.0, m + 2, r, dim)?;
    let density = DensityModel::gaussian(dim, 1.0)?;
    let sums: Vec<Result<f64>> = map_replicas(McParams::new(paths, seed), |_, rng| {
        let w = brownian_sample(fine, &density, rng)?;
        Ok(zero_sum_check(&project_path(&w, m, r)).abs())
    });
    let zero_sum = sums.into_iter().collect::<Result<Vec<f64>>>()?.into_iter().fold(0.0, f64::max);
    Ok(BasisAlgebraReport {
        m,
        r,
        indices: steps.len(),
        orthonormality_defect: ortho,
        antisymmetry_defect: anti,
        paths,
        zero_sum_defect: zero_sum,
        tolerance,
        pass: ortho <= tolerance && anti <= tolerance && zero_sum <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionLevel {
    pub m: u32,
    /// `sqrt(E[sup |W - pi_m W|^2])`.
    pub rms_sup_error: f64,
    /// Ratio to the next finer level's error.
    pub ratio_to_next: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionStudy {
    pub reference_m: u32,
    pub paths: usize,
    pub levels: Vec<ProjectionLevel>,
    pub target_ratio: f64,
    pub relative_tolerance: f64,
    pub pass: bool,
}

/// RMS sup-norm reconstruction error of `pi_{m, r} W` for `m` in `levels`,
/// with `W` sampled at `reference_m`. Both paths are linear between the
/// reference knots, so the sup is attained there.
pub fn projection_study(
    levels: &[u32],
    r: u32,
    dim: usize,
    reference_m: u32,
    relative_tolerance: f64,
    mc: McParams,
) -> Result<ProjectionStudy> {
    let fine = Grid::new(1.0, reference_m, r, dim)?;
    let density = DensityModel::gaussian(dim, 1.0)?;
    let rows: Vec<Result<Vec<f64>>> = map_replicas(mc, |_, rng| {
        let w = brownian_sample(fine, &density, rng)?;
        Ok(levels
            .iter()
            .map(|&m| {
                let p = project_path(&w, m, r);
                (0..fine.n_knots())
                    .flat_map(|k| {
                        let s = fine.knot_time(k);
                        let (w, p) = (&w, &p);
                        (0..dim).map(move |j| (w.knot(k)[j] - p.eval_coord(s, j)).abs())
                    })
                    .fold(0.0, f64::max)
            })
            .collect())
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let rms: Vec<f64> = (0..levels.len()).map(|i| (rows.iter().map(|r| r[i] * r[i]).sum::<f64>() / n).sqrt()).collect();
    let target = std::f64::consts::SQRT_2;
    let mut pass = true;
    let levels = levels
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let ratio = rms.get(i + 1).map(|next| rms[i] / next);
            if let Some(q) = ratio {
                pass &= (q / target - 1.0).abs() <= relative_tolerance;
            }
            ProjectionLevel { m, rms_sup_error: rms[i], ratio_to_next: ratio }
        })
        .collect();
    Ok(ProjectionStudy { reference_m, paths: mc.replicas, levels, target_ratio: target, relative_tolerance, pass })
}

/// Cameron-Martin direction `(f, y)`: `f` as coefficients against the
/// Haar table of `grid`, `y` a vector of `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct HElement {
    pub grid: Grid,
    pub step: Vec<f64>,
    pub init: Vec<f64>,
}

impl HElement {
    pub fn zero(grid: Grid) -> Self {
        Self { grid, step: vec![0.0; grid.basis_len()], init: vec![0.0; grid.dim] }
    }

    /// `(H_index, 0)`.
    pub fn basis(grid: Grid, index: &BasisIndex) -> Result<Self> {
        let i = grid
            .dense_index(index)
            .ok_or_else(|| Error::InvalidParameter(format!("{index:?} is not in I(m, r)")))?;
        let mut h = Self::zero(grid);
        h.step[i] = 1.0;
        Ok(h)
    }

    /// `(0, e_j)`.
    pub fn initial(grid: Grid, j: usize) -> Self {
        let mut h = Self::zero(grid);
        h.init[j] = 1.0;
        h
    }

    /// `<., .>_H = <f, g>_{L^2} + <x, y>_F`; the Haar table is orthonormal.
    pub fn inner(&self, other: &HElement) -> f64 {
        let a: f64 = self.step.iter().zip(&other.step).map(|(x, y)| x * y).sum();
        let b: f64 = self.init.iter().zip(&other.init).map(|(x, y)| x * y).sum();
        a + b
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    pub fn add(&self, other: &HElement) -> HElement {
        HElement {
            grid: self.grid,
            step: self.step.iter().zip(&other.step).map(|(a, b)| a + b).collect(),
            init: self.init.iter().zip(&other.init).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> HElement {
        HElement {
            grid: self.grid,
            step: self.step.iter().map(|a| c * a).collect(),
            init: self.init.iter().map(|a| c * a).collect(),
        }
    }

    /// `j(f, x) = x 1 + int_0^. f`.
    pub fn embed(&self) -> PiecewisePath {
        PiecewisePath::from_coeffs(self.grid, self.init.clone(), self.step.clone()).expect("sizes match")
    }

    /// `j^{-1}` of a path at the same grid.
    pub fn from_path(path: &PiecewisePath) -> Self {
        Self { grid: path.grid, step: path.coeffs.clone(), init: path.x0.clone() }
    }

    /// `f` as an explicit step function.
    pub fn step_fn(&self) -> StepFn {
        self.embed().velocity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: u32, r: u32, dim: usize) -> Grid {
        Grid::new(1.0, m, r, dim).unwrap()
    }

    #[test]
    fn haar_values_match_definitions() {
        let d1 = BasisIndex::constant(0, 0);
        assert_eq!(haar_eval(&d1, 1.0, 0.5), 1.0);
        let d2 = BasisIndex::haar(0, 0, 1, 0);
        assert_eq!(haar_eval(&d2, 1.0, 0.75), -1.0);
        assert_eq!(haar_eval(&d2, 1.0, 0.25), 1.0);
        let d3 = BasisIndex::haar(0, 1, 1, 0);
        assert_eq!(haar_eval(&d3, 1.0, 0.6), 0.0);
        assert!((haar_eval(&d3, 1.0, 0.1) - 2f64.sqrt()).abs() < 1e-15);
        let d = BasisIndex::haar(0, 2, 3, 0);
        assert!((haar_eval(&d, 4.0, 2.2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn index_set_sizes() {
        let s = IndexSet::window(2, 3, 2).unwrap();
        assert_eq!(s.len(), 2 * 3 * 8);
        let s1 = IndexSet::window(1, 3, 1).unwrap();
        assert_eq!(s1.len(), 8);
        for idx in s.iter() {
            let (a, b) = idx.support(1.0);
            assert!(a >= -2.0 && b <= 1.0);
        }
    }

    #[test]
    fn dense_index_roundtrip() {
        let g = grid(4, 3, 3);
        for i in 0..g.basis_len() {
            let idx = g.index_at(i);
            assert_eq!(g.dense_index(&idx), Some(i));
        }
    }

    #[test]
    fn linear_path_coefficients() {
        let g = grid(3, 1, 1);
        // W(s) = s on [-1, 0]
        let knots: Vec<f64> = (0..g.n_knots()).map(|k| g.knot_time(k)).collect();
        let p = PiecewisePath::from_knots(g, knots).unwrap();
        assert!((p.coeff(&BasisIndex::constant(-1, 0)).unwrap() - 1.0).abs() < 1e-14);
        assert!(p.coeff(&BasisIndex::haar(-1, 0, 1, 0)).unwrap().abs() < 1e-14);
        // W(s) = s on [0, 1]: outside the window the path is constant
        let g2 = grid(3, 2, 1);
        let knots: Vec<f64> = (0..g2.n_knots()).map(|k| g2.knot_time(k)).collect();
        let p2 = PiecewisePath::from_knots(g2, knots).unwrap();
        assert!((p2.coeff(&BasisIndex::constant(0, 0)).unwrap() - 1.0).abs() < 1e-14);
        assert!(p2.coeff(&BasisIndex::haar(0, 0, 1, 0)).unwrap().abs() < 1e-14);
    }

    #[test]
    fn resolution_mismatch_is_reported() {
        let p = PiecewisePath::zero(grid(2, 1, 1));
        let e = p.coeff(&BasisIndex::haar(-1, 2, 1, 0)).unwrap_err();
        assert!(matches!(e, Error::ResolutionMismatch { index_level: 2, path_level: 2 }));
    }

    #[test]
    fn synthesis_and_analysis_are_inverse() {
        let g = grid(4, 2, 2);
        let coeffs: Vec<f64> = (0..g.basis_len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let p = PiecewisePath::from_coeffs(g, vec![0.3, -0.2], coeffs.clone()).unwrap();
        let q = PiecewisePath::from_knots(g, p.knots().to_vec()).unwrap();
        for (a, b) in coeffs.iter().zip(q.coeffs()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(q.x0(), &[0.3, -0.2]);
    }

    #[test]
    fn projection_keeps_coarse_knots() {
        let g = grid(5, 2, 1);
        let coeffs: Vec<f64> = (0..g.basis_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let p = PiecewisePath::from_coeffs(g, vec![0.1], coeffs).unwrap();
        let q = project_path(&p, 3, 2);
        assert_eq!(q.grid().m, 3);
        for k in 0..q.grid().n_knots() {
            let s = q.grid().knot_time(k);
            assert!((p.eval_coord(s, 0) - q.knot(k)[0]).abs() < 1e-12);
        }
        assert_eq!(project_path(&q, 3, 2), q);
        assert_eq!(project_path(&p, 7, 4), p);
    }

    #[test]
    fn antisymmetry_on_small_set() {
        let g = grid(3, 1, 1);
        let w = (g.start(), g.end());
        for i in 0..g.basis_len() {
            for j in 0..g.basis_len() {
                let hi = g.index_at(i).step_fn(1.0, 1);
                let hj = g.index_at(j).step_fn(1.0, 1);
                let s = stieltjes_average(&hi, &hj, w) + stieltjes_average(&hj, &hi, w);
                assert!(s.abs() < 1e-12, "{i} {j}: {s}");
            }
        }
    }
}
