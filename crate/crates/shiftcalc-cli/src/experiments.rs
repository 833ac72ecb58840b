//! The experiment catalog and one runner per id.

use serde::{Deserialize, Serialize};
use serde_json::json;

use shiftcalc::basis::{basis_algebra_check, projection_study, Grid};
use shiftcalc::density::{
    cocycle_check, identity_quadrature_check, pairing_check, pushforward_check, rstar_estimate, standard_battery,
    standard_pairs, GradientForm, PathFunctional, MAX_EXCLUSION_RATE,
};
use shiftcalc::malliavin::{
    cameron_martin_battery, cameron_martin_check, cameron_martin_direction, duality_battery, duality_check,
    product_rule_check, product_rule_directions,
};
use shiftcalc::mc::{McParams, VerificationReport};
use shiftcalc::measure::{particle_density_bounds, BaseDensity, ParticleDensity};
use shiftcalc::mollify::{
    composition_check, convergence_report, default_step, engineered_crossing, negative_control, order_study,
    select_batch, MollifierPair, StepControl,
};
use shiftcalc::particles::{
    compactness_scan, single_particle_oracle, EmpiricalFunctional, EnsembleParams, InitialLaw,
};
use shiftcalc::process::{flow_check, JumpRule, ProcessModel};

use crate::config::{config_err, ConfigResult, DensitySpec, ExperimentConfig, ModelSpec, RuleSpec};
use crate::report::{num, CheckRecord, CsvTable, ExperimentOutput, RunError};

pub struct ExperimentInfo {
    pub id: &'static str,
    /// Topic the experiment exercises.
    pub tag: &'static str,
    pub summary: &'static str,
}

pub const CATALOG: [ExperimentInfo; 10] = [
    ExperimentInfo {
        id: "verify-cameron-martin",
        tag: "quasi-invariance",
        summary: "shifted expectations against the Cameron-Martin weight",
    },
    ExperimentInfo { id: "verify-duality", tag: "gradient/divergence", summary: "E[delta(h) phi] = E[<h, D phi>] and the product rule" },
    ExperimentInfo {
        id: "verify-pushforward",
        tag: "time-shift density",
        summary: "E[phi(W^t)] = E[phi omega_{-t}], normalization and the Gaussian quadrature oracle",
    },
    ExperimentInfo {
        id: "verify-cocycle",
        tag: "flow cocycle",
        summary: "cocycle identity of omega, temporal homogeneity and jump-time orthogonality",
    },
    ExperimentInfo { id: "verify-pairing", tag: "pairing identity", summary: "E[f(X_t) g(X_0)] = E[f(X_0) g(X_{-t}) rho_{-t}]" },
    ExperimentInfo { id: "rstar", tag: "small-time limit", summary: "extrapolated r* against (1/2) Laplacian m / m" },
    ExperimentInfo {
        id: "mollify-study",
        tag: "mollified flow",
        summary: "RK4 flow composition, order, convergence and the jump-time negative control",
    },
    ExperimentInfo { id: "basis-algebra", tag: "haar system", summary: "orthonormality, antisymmetry, zero-sum and projection convergence" },
    ExperimentInfo {
        id: "particles-compactness",
        tag: "particle compactness",
        summary: "E[gamma_n(delta)] scan and the single-particle oracle",
    },
    ExperimentInfo { id: "mn-bounds", tag: "particle densities", summary: "gradient, energy and Laplacian bounds for m_n" },
];

pub fn info(id: &str) -> Option<&'static ExperimentInfo> {
    CATALOG.iter().find(|e| e.id == id)
}

/// Runs the configured experiment. `tables` asks for the CSV tables, which
/// can be large for per-replica diagnostics.
pub fn run_experiment(cfg: &ExperimentConfig, tables: bool) -> Result<ExperimentOutput, RunError> {
    let mc = McParams::new(cfg.mc.replicas, cfg.mc.seed);
    match cfg.experiment.as_str() {
        "basis-algebra" => basis_algebra(cfg, mc),
        "verify-cameron-martin" => cameron_martin(cfg, mc),
        "verify-duality" => duality(cfg, mc),
        "verify-pushforward" => pushforward(cfg, mc, tables),
        "verify-cocycle" => cocycle(cfg, mc),
        "verify-pairing" => pairing(cfg, mc),
        "rstar" => rstar(cfg, mc),
        "mollify-study" => mollify(cfg, mc),
        "particles-compactness" => particles(cfg, mc),
        "mn-bounds" => mn_bounds(cfg, mc),
        other => Err(config_err(format!("experiment: unknown id `{other}`")).into()),
    }
}

fn verification_table(name: &str, reports: &[&VerificationReport]) -> CsvTable {
    let mut t = CsvTable::new(name, &["check", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "diff_stderr", "z", "excluded", "pass"]);
    for r in reports {
        t.push(vec![
            r.name.clone(),
            num(r.lhs.mean),
            num(r.lhs.stderr),
            num(r.rhs.mean),
            num(r.rhs.stderr),
            num(r.diff.stderr),
            num(r.z),
            r.excluded.to_string(),
            r.pass.to_string(),
        ]);
    }
    t
}

fn check(r: &VerificationReport) -> CheckRecord {
    CheckRecord::new(r.name.clone(), r.pass, r.excluded, r)
}

fn density_dim(spec: &DensitySpec, default: usize) -> usize {
    spec.fixed_dim().unwrap_or(default)
}

// ---------------------------------------------------------------- basis

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct BasisParams {
    m: u32,
    r: u32,
    dim: usize,
    paths: usize,
    tolerance: f64,
    levels: Vec<u32>,
    projection_r: u32,
    reference_m: u32,
    ratio_tolerance: f64,
}

impl Default for BasisParams {
    fn default() -> Self {
        Self {
            m: 3,
            r: 1,
            dim: 2,
            paths: 100,
            tolerance: 1e-10,
            levels: vec![3, 4, 5, 6, 7],
            projection_r: 1,
            reference_m: 12,
            ratio_tolerance: 0.2,
        }
    }
}

fn basis_algebra(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: BasisParams = cfg.params()?;
    if p.levels.iter().any(|&m| m >= p.reference_m) {
        return Err(config_err("params.levels: every level must lie below reference_m").into());
    }
    let alg = basis_algebra_check(p.m, p.r, p.dim, p.paths, mc.seed, p.tolerance)?;
    let proj = projection_study(&p.levels, p.projection_r, 1, p.reference_m, p.ratio_tolerance, mc)?;
    let mut table = CsvTable::new("projection", &["m", "rms_sup_error", "ratio_to_next"]);
    for l in &proj.levels {
        table.push(vec![l.m.to_string(), num(l.rms_sup_error), l.ratio_to_next.map(num).unwrap_or_default()]);
    }
    Ok(ExperimentOutput {
        checks: vec![
            CheckRecord::new(format!("basis algebra I({}, {})", p.m, p.r), alg.pass, 0, &alg),
            CheckRecord::new("projection convergence", proj.pass, 0, &proj),
        ],
        tables: vec![table],
    })
}

// ---------------------------------------------------------- malliavin

fn cameron_martin(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let _: Empty = cfg.params()?;
    let spec = cfg.density_spec()?;
    let dim = density_dim(spec, 1);
    let density = spec.build(dim)?;
    let grid = cfg.grid_spec()?.build(dim)?;
    let h = cameron_martin_direction(grid).map_err(|e| config_err(format!("grid: {e}")))?;
    let reports = cameron_martin_check(&cameron_martin_battery(), &h, &density, mc)?;
    Ok(ExperimentOutput {
        checks: reports.iter().map(check).collect(),
        tables: vec![verification_table("cameron_martin", &reports.iter().collect::<Vec<_>>())],
    })
}

#[derive(Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct DualityParams {
    product_rule_paths: usize,
    product_rule_tolerance: f64,
}

impl Default for DualityParams {
    fn default() -> Self {
        Self { product_rule_paths: 200, product_rule_tolerance: 1e-10 }
    }
}

fn duality(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: DualityParams = cfg.params()?;
    let spec = cfg.density_spec()?;
    let dim = density_dim(spec, 2);
    let density = spec.build(dim)?;
    let grid = cfg.grid_spec()?.build(dim)?;
    let battery = duality_battery(grid).map_err(|e| config_err(format!("grid: {e}")))?;
    let mut reports = Vec::with_capacity(battery.len());
    for (phi, h) in &battery {
        reports.push(duality_check(phi, h, &density, grid, mc)?);
    }
    let dirs = product_rule_directions(grid).map_err(|e| config_err(format!("grid: {e}")))?;
    let pr = product_rule_check(&dirs, &density, grid, p.product_rule_tolerance, McParams::new(p.product_rule_paths, mc.seed))?;
    let mut checks: Vec<CheckRecord> = reports.iter().map(check).collect();
    checks.push(CheckRecord::new("product rule", pr.pass, 0, &pr));
    Ok(ExperimentOutput { checks, tables: vec![verification_table("duality", &reports.iter().collect::<Vec<_>>())] })
}

// ------------------------------------------------------------- density

fn form_name(f: GradientForm) -> &'static str {
    match f {
        GradientForm::Diagonal => "diagonal",
        GradientForm::Determinant => "determinant",
    }
}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct PushforwardParams {
    shifts: Vec<f64>,
    functionals: Vec<String>,
    /// Forms that decide the outcome.
    forms: Vec<GradientFormSpec>,
    /// Forms reported alongside; skipped in dimension one where they agree.
    diagnostic_forms: Vec<GradientFormSpec>,
    quadrature: bool,
}

#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum GradientFormSpec {
    Diagonal,
    Determinant,
}

impl From<GradientFormSpec> for GradientForm {
    fn from(f: GradientFormSpec) -> Self {
        match f {
            GradientFormSpec::Diagonal => GradientForm::Diagonal,
            GradientFormSpec::Determinant => GradientForm::Determinant,
        }
    }
}

impl Default for PushforwardParams {
    fn default() -> Self {
        Self {
            shifts: vec![0.25, 0.5],
            functionals: vec!["initial".into(), "increments".into(), "jumps-and-state".into()],
            forms: vec![GradientFormSpec::Diagonal],
            diagnostic_forms: vec![GradientFormSpec::Determinant],
            quadrature: true,
        }
    }
}

/// Built models with their density and grid.
struct Setup {
    spec: ModelSpec,
    model: Box<dyn ProcessModel>,
    density: shiftcalc::measure::DensityModel,
    grid: Grid,
}

fn setups(cfg: &ExperimentConfig) -> ConfigResult<Vec<Setup>> {
    let gs = cfg.grid_spec()?;
    let ds = cfg.density_spec()?;
    cfg.require_models()?
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let dim = spec.dim();
            if let Some(d) = ds.fixed_dim() {
                if d != dim {
                    return Err(config_err(format!("models[{i}]: needs dimension {dim}, the density has {d}")));
                }
            }
            Ok(Setup { spec: *spec, model: spec.build(i)?, density: ds.build(dim)?, grid: gs.build(dim)? })
        })
        .collect()
}

fn forms_for(dim: usize, forms: &[GradientFormSpec], diagnostic: &[GradientFormSpec]) -> Vec<(GradientForm, bool)> {
    let mut out: Vec<(GradientForm, bool)> = forms.iter().map(|&f| (f.into(), false)).collect();
    for &f in diagnostic {
        let f: GradientForm = f.into();
        // the two forms coincide for a 1x1 Jacobian
        if dim > 1 && !out.iter().any(|(g, _)| *g == f) {
            out.push((f, true));
        }
    }
    out
}

fn pushforward(cfg: &ExperimentConfig, mc: McParams, tables: bool) -> Result<ExperimentOutput, RunError> {
    let p: PushforwardParams = cfg.params()?;
    let setups = setups(cfg)?;
    let all = standard_battery();
    let mut functionals: Vec<PathFunctional> = Vec::new();
    for (i, name) in p.functionals.iter().enumerate() {
        let f = all.iter().position(|f| &f.name == name);
        match f {
            Some(k) => functionals.push(standard_battery().swap_remove(k)),
            None => return Err(config_err(format!("params.functionals[{i}]: unknown functional `{name}`")).into()),
        }
    }
    for (i, &t) in p.shifts.iter().enumerate() {
        for s in &setups {
            s.grid.knot_of(-t).map_err(|e| config_err(format!("params.shifts[{i}]: {e}")))?;
        }
    }
    let mut out = ExperimentOutput::default();
    let mut summary = Vec::new();
    let mut replicas = CsvTable::new("replicas", &["model", "t", "form", "index", "omega", "excluded"]);
    for s in &setups {
        let name = s.model.name();
        for &t in &p.shifts {
            for (form, diagnostic) in forms_for(s.grid.dim, &p.forms, &p.diagnostic_forms) {
                let o = pushforward_check(s.model.as_ref(), &s.density, s.grid, t, &functionals, form, mc)?;
                let tag = |c: CheckRecord| {
                    let mut c = CheckRecord { name: format!("{} [{}]", c.name, form_name(form)), ..c };
                    if diagnostic {
                        c = c.diagnostic();
                    }
                    c
                };
                for r in &o.reports {
                    out.checks.push(tag(check(r)));
                }
                out.checks.push(tag(check(&o.normalization)));
                let rate = o.normalization.exclusion_rate();
                out.checks.push(tag(CheckRecord::new(
                    format!("exclusion rate {name} t={t}"),
                    rate <= MAX_EXCLUSION_RATE,
                    o.normalization.excluded,
                    json!({ "rate": rate, "limit": MAX_EXCLUSION_RATE }),
                )));
                summary.extend(o.reports.clone());
                summary.push(o.normalization.clone());
                if tables {
                    for r in &o.replicas {
                        replicas.push(vec![
                            name.clone(),
                            num(t),
                            form_name(form).into(),
                            r.index.to_string(),
                            num(r.omega),
                            r.excluded.to_string(),
                        ]);
                    }
                }
            }
            if p.quadrature && s.spec.kind() == "identity" && s.grid.dim == 1 {
                let q = identity_quadrature_check(&s.density, s.grid, t, f64::cos, mc)?;
                out.checks.push(CheckRecord::new(format!("quadrature oracle t={t} g=cos"), q.pass, q.lhs.excluded, &q));
            }
        }
    }
    out.tables.push(verification_table("pushforward", &summary.iter().collect::<Vec<_>>()));
    if tables {
        out.tables.push(replicas);
    }
    Ok(out)
}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct CocycleParams {
    s: f64,
    t: f64,
    paths: usize,
    /// Model kinds whose cocycle identity is checked.
    cocycle_kinds: Vec<String>,
    identity_tolerance: f64,
    tolerance: f64,
    /// Grid shifts for the homogeneity check; one step, `t/4` and `t/2` by
    /// default.
    flow_shifts: Option<Vec<f64>>,
    flow_tolerance: f64,
    jv_tolerance: f64,
}

impl Default for CocycleParams {
    fn default() -> Self {
        Self {
            s: 0.25,
            t: 0.5,
            paths: 200,
            cocycle_kinds: vec!["identity".into(), "switching".into()],
            identity_tolerance: 1e-10,
            tolerance: 1e-6,
            flow_shifts: None,
            flow_tolerance: 1e-12,
            jv_tolerance: 1e-12,
        }
    }
}

fn cocycle(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: CocycleParams = cfg.params()?;
    let setups = setups(cfg)?;
    let paths = McParams::new(p.paths, mc.seed);
    let mut out = ExperimentOutput::default();
    let mut table = CsvTable::new("flow", &["model", "check", "value", "tolerance", "pass"]);
    for s in &setups {
        let kind = s.spec.kind();
        if p.cocycle_kinds.iter().any(|k| k == kind) {
            let tol = if kind == "identity" { p.identity_tolerance } else { p.tolerance };
            let r = cocycle_check(s.model.as_ref(), &s.density, s.grid, p.s, p.t, tol, paths)?;
            table.push(vec![s.model.name(), "cocycle".into(), num(r.max_relative_defect), num(tol), r.pass.to_string()]);
            out.checks.push(CheckRecord::new(r.name.clone(), r.pass, r.excluded, &r));
        }
        let shifts = p.flow_shifts.clone().unwrap_or_else(|| vec![s.grid.step(), s.grid.t / 4.0, s.grid.t / 2.0]);
        let f = flow_check(s.model.as_ref(), &s.density, s.grid, &shifts, p.flow_tolerance, p.jv_tolerance, paths)?;
        table.push(vec![s.model.name(), "homogeneity".into(), num(f.max_homogeneity_defect), num(p.flow_tolerance), (f.max_homogeneity_defect <= p.flow_tolerance).to_string()]);
        if let Some(jv) = f.max_jv_defect {
            table.push(vec![s.model.name(), "jv".into(), num(jv), num(p.jv_tolerance), (jv <= p.jv_tolerance).to_string()]);
        }
        out.checks.push(CheckRecord::new(format!("flow {}", f.model), f.pass, f.jv_skipped, &f));
    }
    out.tables.push(table);
    Ok(out)
}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct PairingParams {
    t: f64,
    forms: Vec<GradientFormSpec>,
    diagnostic_forms: Vec<GradientFormSpec>,
}

impl Default for PairingParams {
    fn default() -> Self {
        Self { t: 0.25, forms: vec![GradientFormSpec::Diagonal], diagnostic_forms: vec![GradientFormSpec::Determinant] }
    }
}

fn pairing(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: PairingParams = cfg.params()?;
    let setups = setups(cfg)?;
    for s in &setups {
        s.grid.knot_of(p.t).map_err(|e| config_err(format!("params.t: {e}")))?;
        s.grid.knot_of(-p.t).map_err(|e| config_err(format!("params.t: {e}")))?;
    }
    let mut out = ExperimentOutput::default();
    let mut all = Vec::new();
    for s in &setups {
        for (form, diagnostic) in forms_for(s.grid.dim, &p.forms, &p.diagnostic_forms) {
            let reports = pairing_check(s.model.as_ref(), &s.density, s.grid, &standard_pairs(), p.t, form, mc)?;
            for r in &reports {
                let mut c = check(r);
                c.name = format!("{} [{}]", c.name, form_name(form));
                out.checks.push(if diagnostic { c.diagnostic() } else { c });
            }
            all.extend(reports);
        }
    }
    out.tables.push(verification_table("pairing", &all.iter().collect::<Vec<_>>()));
    Ok(out)
}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct RStarParams {
    ts: Vec<f64>,
    x: Vec<f64>,
    tolerance: f64,
}

impl Default for RStarParams {
    fn default() -> Self {
        Self { ts: vec![0.02, 0.01, 0.005], x: vec![0.0], tolerance: 0.2 }
    }
}

fn rstar(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: RStarParams = cfg.params()?;
    let spec = cfg.density_spec()?;
    let density = spec.build(density_dim(spec, p.x.len()))?;
    if density.dim() != p.x.len() {
        return Err(config_err(format!("params.x: {} coordinates for a density of dimension {}", p.x.len(), density.dim())).into());
    }
    let r = rstar_estimate(&density, &p.ts, &p.x, p.tolerance, mc).map_err(|e| match e {
        shiftcalc::Error::InvalidParameter(m) => RunError::Config(config_err(format!("params.ts: {m}"))),
        other => other.into(),
    })?;
    let mut table = CsvTable::new("rstar", &["t", "estimate", "stderr"]);
    for (t, e) in r.ts.iter().zip(&r.estimates) {
        table.push(vec![num(*t), num(e.mean), num(e.stderr)]);
    }
    table.push(vec!["0".into(), num(r.extrapolated), num(r.extrapolated_stderr)]);
    Ok(ExperimentOutput { checks: vec![CheckRecord::new("r* extrapolated to t = 0", r.pass, 0, &r)], tables: vec![table] })
}

// ------------------------------------------------------------- mollify

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct MollifyParams {
    ns: Vec<u32>,
    paths: usize,
    s_end: f64,
    margin: f64,
    grad_paths: usize,
    max_draws: usize,
    tol: f64,
    max_depth: u32,
    max_unresolved: usize,
    composition_n: u32,
    composition_s: f64,
    composition_v: f64,
    order_n: u32,
    order_target: f64,
    order_tolerance: f64,
    order_step: f64,
    order_levels: usize,
    negative_tau: f64,
    negative_p: [f64; 2],
}

impl Default for MollifyParams {
    fn default() -> Self {
        Self {
            ns: vec![4, 8, 16],
            paths: 100,
            s_end: 1.5,
            margin: 0.5,
            grad_paths: 3,
            max_draws: 100_000,
            tol: 1e-9,
            max_depth: 12,
            max_unresolved: 64,
            composition_n: 8,
            composition_s: 0.5,
            composition_v: 0.75,
            order_n: 8,
            order_target: 4.0,
            order_tolerance: 0.5,
            order_step: 1.0 / 512.0,
            order_levels: 4,
            negative_tau: 0.5,
            negative_p: [0.3, -0.2],
        }
    }
}

fn mollify(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: MollifyParams = cfg.params()?;
    let setups = setups(cfg)?;
    let control = StepControl::Halving { tol: p.tol, max_depth: p.max_depth, max_unresolved: p.max_unresolved };
    let mut out = ExperimentOutput::default();
    let mut table = CsvTable::new("mollify", &["model", "n", "median_error", "max_error", "median_grad_error"]);
    for s in &setups {
        let ModelSpec::Collision { eps, particles: 2, .. } = s.spec else {
            return Err(config_err(format!("models: the mollification study runs on two-particle collision models, got {}", s.model.name())).into());
        };
        let model = s.model.as_ref();
        let name = model.name();
        let batch = select_batch(model, &s.density, s.grid, p.s_end, p.margin, p.paths, mc.seed, p.max_draws)?;
        let h = default_step(&s.grid);

        let pair = MollifierPair::new(p.composition_n, s.grid.dim)?;
        let c = composition_check(model, &pair, &batch[0].path, p.composition_s, p.composition_v, h, control)?;
        out.checks.push(CheckRecord::new(format!("flow composition {name}"), c.pass, 0, &c));

        // the order is measured on the smooth stretch before the first
        // forward jump; the right-hand side is discontinuous across it
        let first = batch[0].jump_times.iter().copied().find(|&t| t > 0.0).unwrap_or(p.s_end);
        let step = s.grid.step();
        let mut s_order = (first / step).floor() * step;
        if s_order >= first {
            s_order -= step;
        }
        let s_order = s_order.min(p.s_end);
        let pair = MollifierPair::new(p.order_n, s.grid.dim)?;
        let o = order_study(model, &pair, &batch[0].path, s_order, p.order_step, p.order_levels)?;
        let order_pass = (o.observed_order - p.order_target).abs() <= p.order_tolerance;
        out.checks.push(CheckRecord::new(
            format!("rk4 order {name}"),
            order_pass,
            0,
            json!({ "report": o, "s_end": s_order, "target": p.order_target, "tolerance": p.order_tolerance }),
        ));

        let conv = convergence_report(model, &p.ns, &batch, p.s_end, p.margin, control, p.grad_paths)?;
        for r in &conv.rows {
            table.push(vec![name.clone(), r.n.to_string(), num(r.median_error), num(r.max_error), r.median_grad_error.map(num).unwrap_or_default()]);
        }
        out.checks.push(CheckRecord::new(format!("A_n - Y_n convergence {name}"), conv.strictly_decreasing, 0, &conv));

        let path = engineered_crossing(s.grid, eps, p.negative_tau, (p.negative_p[0], p.negative_p[1]))?;
        let neg = negative_control(model, &path, p.negative_tau, &p.ns, control)?;
        out.checks.push(CheckRecord::new(format!("negative control at a jump {name}"), !neg.converges, 0, &neg));
    }
    out.tables.push(table);
    Ok(out)
}

// ----------------------------------------------------------- particles

#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct BaseSpec {
    amplitude: f64,
    k: u32,
}

impl BaseSpec {
    fn build(self) -> BaseDensity {
        if self.amplitude == 0.0 {
            BaseDensity::Uniform
        } else {
            BaseDensity::Sine { amplitude: self.amplitude, k: self.k }
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct ParticlesParams {
    ns: Vec<usize>,
    deltas: Vec<f64>,
    horizon: f64,
    eps: f64,
    refractory: f64,
    rule: RuleSpec,
    kappa: Option<f64>,
    base: BaseSpec,
    c: f64,
    diam: f64,
    oracle_deltas: Vec<f64>,
    oracle_replicas: usize,
}

impl Default for ParticlesParams {
    fn default() -> Self {
        Self {
            ns: vec![2, 4, 8],
            deltas: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 0.25],
            horizon: 1.0,
            eps: 0.1,
            refractory: 0.05,
            rule: RuleSpec::Swap,
            kappa: None,
            base: BaseSpec { amplitude: 0.3, k: 1 },
            c: 0.5,
            diam: 1.0,
            oracle_deltas: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 0.25],
            oracle_replicas: 200_000,
        }
    }
}

fn particles(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: ParticlesParams = cfg.params()?;
    let gs = cfg.grid_spec()?;
    let rule = match (p.rule, p.kappa) {
        (RuleSpec::Swap, None) => JumpRule::Swap,
        (RuleSpec::Kick, Some(kappa)) => JumpRule::Kick { kappa },
        _ => return Err(config_err("params.kappa: given exactly when the rule is kick").into()),
    };
    let params = EnsembleParams { eps: p.eps, refractory: p.refractory, rule };
    let base = p.base.build();
    for &n in &p.ns {
        ParticleDensity::new(base, p.c, n).map_err(|e| config_err(format!("params.base: {e}")))?;
        gs.build(2 * n)?;
    }
    let f = EmpiricalFunctional::standard();
    let scan = compactness_scan(
        &p.ns,
        &p.deltas,
        &f,
        &params,
        |n| Ok(InitialLaw::Particle(ParticleDensity::new(base, p.c, n)?)),
        |n| Grid::new(gs.t, gs.m, gs.r, 2 * n),
        p.horizon,
        mc,
    )?;
    let mut out = ExperimentOutput::default();
    let mut table = CsvTable::new("compactness", &["n", "delta", "estimate", "stderr", "diam_term", "excluded"]);
    for e in &scan.entries {
        table.push(vec![e.n.to_string(), num(e.delta), num(e.estimate.mean), num(e.estimate.stderr), num(f.diam_term(e.n, p.diam)), e.excluded.to_string()]);
    }
    for &(n, dec) in &scan.decreasing {
        let rows: Vec<_> = scan.entries.iter().filter(|e| e.n == n).collect();
        let excluded = rows.first().map(|e| e.excluded).unwrap_or(0);
        out.checks.push(CheckRecord::new(
            format!("E[gamma_{n}(delta)] decreases as delta shrinks"),
            dec,
            excluded,
            json!({ "functional": scan.functional, "rows": rows, "diam_term": f.diam_term(n, p.diam) }),
        ));
    }
    out.checks.push(CheckRecord::new("modulus table non-negative", scan.all_nonnegative, 0, json!({ "entries": scan.entries.len() })));
    let grid1 = gs.build(2)?;
    let mut oracle = CsvTable::new(
        "single_particle",
        &["delta", "estimate", "stderr", "discrete_oracle", "z_discrete", "reflection_bound", "z_reflection"],
    );
    for &d in &p.oracle_deltas {
        let o = single_particle_oracle(grid1, d, McParams::new(p.oracle_replicas, mc.seed))?;
        oracle.push(vec![
            num(d),
            num(o.report.lhs.mean),
            num(o.report.lhs.stderr),
            num(o.discrete_oracle),
            num(o.report.z),
            num(o.reflection_bound),
            num(o.reflection.z),
        ]);
        out.checks.push(CheckRecord::new(format!("single particle reflection oracle delta={d}"), o.reflection.pass, 0, &o.reflection));
        // the grid sup sits below the continuous one; the exact grid value
        // shows the estimator itself is right
        out.checks.push(CheckRecord::new(format!("single particle discrete-walk oracle delta={d}"), o.report.pass, 0, &o).diagnostic());
    }
    out.tables.push(table);
    out.tables.push(oracle);
    Ok(out)
}

#[derive(Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct MnParams {
    base: BaseSpec,
    c: f64,
    ns: Vec<usize>,
    laplacian_tolerance: f64,
}

impl Default for MnParams {
    fn default() -> Self {
        Self { base: BaseSpec { amplitude: 0.3, k: 1 }, c: 0.5, ns: vec![4, 8, 16], laplacian_tolerance: 0.05 }
    }
}

fn mn_bounds(cfg: &ExperimentConfig, mc: McParams) -> Result<ExperimentOutput, RunError> {
    let p: MnParams = cfg.params()?;
    if p.ns.is_empty() {
        return Err(config_err("params.ns: at least one particle count").into());
    }
    ParticleDensity::new(p.base.build(), p.c, 1).map_err(|e| config_err(format!("params.base: {e}")))?;
    let r = particle_density_bounds(p.base.build(), p.c, &p.ns, mc.replicas, mc.seed)?;
    let mut table = CsvTable::new(
        "mn_bounds",
        &["n", "sup_grad", "grad_bound", "grad_energy", "abs_half_laplacian", "abs_half_laplacian_stderr"],
    );
    for row in &r.rows {
        table.push(vec![
            row.n.to_string(),
            num(row.sup_grad),
            num(row.grad_bound),
            num(row.grad_energy),
            num(row.abs_half_laplacian),
            num(row.abs_half_laplacian_stderr),
        ]);
    }
    let last = r.rows.last().expect("ns is not empty");
    let rel = (last.abs_half_laplacian - r.laplacian_limit_bound).abs() / r.laplacian_limit_bound;
    let checks = vec![
        CheckRecord::new(
            "gradient bound",
            r.rows.iter().all(|x| x.grad_bound_holds),
            0,
            json!({ "c0": r.c0, "n0": r.n0, "rows": r.rows }),
        ),
        CheckRecord::new("gradient energy decreasing", r.grad_energy_decreasing, 0, json!({ "rows": r.rows })),
        CheckRecord::new(
            format!("|half Laplacian| at n={} near its limit", last.n),
            rel <= p.laplacian_tolerance,
            0,
            json!({
                "value": last.abs_half_laplacian,
                "stderr": last.abs_half_laplacian_stderr,
                "limit": r.laplacian_limit_bound,
                "signed_limit": r.laplacian_signed_limit,
                "relative_error": rel,
                "tolerance": p.laplacian_tolerance,
            }),
        ),
    ];
    Ok(ExperimentOutput { checks, tables: vec![table] })
}
