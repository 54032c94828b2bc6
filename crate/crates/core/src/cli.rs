//! Experiment configuration and the `validate`, `solve`, `verify` and
//! `simulate` workflows behind the command line tool.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintKind, ConstraintSet, Halfspace};
use crate::dual::{kkt_check, DualConfig, DualControl};
use crate::error::{Error, Result};
use crate::fixedpoint::{
    apply_psi, log_fixed_point, one_period_value, solve_fixed_point, theoretical_bounds, BoundBox, NodePaths,
    OnePeriodValue, SeedSchedule, SolverConfig,
};
use crate::grid::ValueGrid;
use crate::market::{validate_model, Bounds, Cells, Coefficients, FactorDynamics, FactorModel, Shape, ValidationReport};
use crate::policy_sim::{
    closed_form_applies, policy_gamma1, policy_log, rollout, value_bounds_check, verify_martingale_d, BoundsCheck,
    Continuation, PeriodStat, PeriodicPolicy, RolloutConfig,
};
use crate::primal::SearchConfig;
use crate::utility::{HFunction, UtilityMode, UtilitySpec};

/// Relative floor on standard errors, for estimates without sampling noise.
const ROUNDOFF: f64 = 1e-10;

pub const A_STAR_FILE: &str = "A_star.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const VERIFY_REPORT_FILE: &str = "verify_report.json";
pub const ROLLOUT_FILE: &str = "rollout.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub constraint: ConstraintConfig,
    pub utility: UtilityConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    #[default]
    Constant,
    Affine { y_min: f64, y_max: f64 },
    Sigmoid { center: f64, width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub kappa: f64,
    pub mean: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub r_bar: f64,
    pub r_lower: f64,
    pub m0: f64,
    pub kappa0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub shape: ShapeConfig,
    pub r0: f64,
    #[serde(default)]
    pub r1: f64,
    pub mu0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1: Option<Vec<f64>>,
    /// Rows of `sigma0`.
    pub sigma0: Vec<Vec<f64>>,
    #[serde(default)]
    pub vol_mod: f64,
    pub factor: FactorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    Unconstrained,
    NoShort,
    BorrowCap { a: f64 },
    NoShortAndBorrowCap { a: f64 },
    /// `null` entries are infinite.
    Box { lo: Vec<Option<f64>>, hi: Vec<Option<f64>> },
    Halfspaces { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    Power,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HConfig {
    Constant { value: f64 },
    Sigmoid { lo: f64, hi: f64, center: f64, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    pub mode: ModeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub gamma: f64,
    pub rho: f64,
    pub tau: f64,
    pub m: f64,
    pub h: HConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleConfig {
    Frozen,
    Rotating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    pub y0: f64,
    pub x0: f64,
    pub grid_nodes: usize,
    /// Half-width of the factor grid in stationary standard deviations.
    pub grid_width: f64,
    pub paths: usize,
    /// Euler steps per evaluation period.
    pub steps: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub schedule: ScheduleConfig,
    pub dual_stride: usize,
    pub periods: usize,
    pub verify_periods: usize,
    pub rollout_paths: usize,
    pub kkt_tol: f64,
    pub budget_tol: f64,
    pub log_cap: f64,
    pub validation_samples: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        NumericsConfig {
            y0: 0.0,
            x0: 1.0,
            grid_nodes: 41,
            grid_width: 5.0,
            paths: 1 << 14,
            steps: 64,
            tol: 1e-4,
            max_iter: 200,
            schedule: ScheduleConfig::Frozen,
            dual_stride: 10,
            periods: 8,
            verify_periods: 4,
            rollout_paths: 1 << 14,
            kkt_tol: 1e-8,
            budget_tol: 1e-6,
            log_cap: 50.0,
            validation_samples: 201,
        }
    }
}

impl NumericsConfig {
    fn check(&self) -> Result<()> {
        let positive = [
            ("x0", self.x0),
            ("grid_width", self.grid_width),
            ("tol", self.tol),
            ("kkt_tol", self.kkt_tol),
            ("budget_tol", self.budget_tol),
            ("log_cap", self.log_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("numerics.{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("grid_nodes", self.grid_nodes),
            ("paths", self.paths),
            ("steps", self.steps),
            ("max_iter", self.max_iter),
            ("periods", self.periods),
            ("verify_periods", self.verify_periods),
            ("rollout_paths", self.rollout_paths),
            ("validation_samples", self.validation_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("numerics.{name} must be at least 1")));
            }
        }
        if !self.y0.is_finite() {
            return Err(Error::Config("numerics.y0 must be finite".into()));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_reader(File::open(path)?)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn matrix(rows: &[Vec<f64>], n: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{name} must be {n} x {n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn vector(v: &[f64], n: usize, name: &str) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::Config(format!("{name} must have length {n}, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn build_model(m: &ModelConfig) -> Result<FactorModel> {
    let n = m.mu0.len();
    if n == 0 {
        return Err(Error::Config("model.mu0 must be nonempty".into()));
    }
    let shape = match m.shape {
        ShapeConfig::Constant => Shape::Constant,
        ShapeConfig::Affine { y_min, y_max } => Shape::Affine { y_min, y_max },
        ShapeConfig::Sigmoid { center, width } => Shape::Sigmoid { center, width },
    };
    let coeffs = Coefficients {
        shape,
        r0: m.r0,
        r1: m.r1,
        mu0: vector(&m.mu0, n, "model.mu0")?,
        mu1: match &m.mu1 {
            Some(v) => vector(v, n, "model.mu1")?,
            None => DVector::zeros(n),
        },
        sigma0: matrix(&m.sigma0, n, "model.sigma0")?,
        vol_mod: m.vol_mod,
    };
    let q = match &m.q {
        Some(v) => vector(v, n, "model.q")?,
        None => DVector::zeros(n),
    };
    let factor = FactorDynamics { kappa: m.factor.kappa, mean: m.factor.mean, beta: m.factor.beta };
    let bounds = m.bounds.map(|b| Bounds { r_bar: b.r_bar, r_lower: b.r_lower, m0: b.m0, kappa0: b.kappa0 });
    FactorModel::new(coeffs, factor, q, bounds)
}

fn build_constraint(c: &ConstraintConfig, n: usize) -> Result<ConstraintSet> {
    let kind = match c {
        ConstraintConfig::Unconstrained => ConstraintKind::Unconstrained,
        ConstraintConfig::NoShort => ConstraintKind::NoShort,
        ConstraintConfig::BorrowCap { a } => ConstraintKind::BorrowCap { a: *a },
        ConstraintConfig::NoShortAndBorrowCap { a } => ConstraintKind::NoShortAndBorrowCap { a: *a },
        ConstraintConfig::Box { lo, hi } => {
            let conv = |v: &[Option<f64>], inf: f64, name: &str| -> Result<DVector<f64>> {
                if v.len() != n {
                    return Err(Error::Config(format!("constraint.{name} must have length {n}")));
                }
                Ok(DVector::from_iterator(n, v.iter().map(|x| x.unwrap_or(inf))))
            };
            ConstraintKind::Box { lo: conv(lo, f64::NEG_INFINITY, "lo")?, hi: conv(hi, f64::INFINITY, "hi")? }
        }
        ConstraintConfig::Halfspaces { normals, offsets } => {
            if normals.len() != offsets.len() {
                return Err(Error::Config("constraint.normals and constraint.offsets differ in length".into()));
            }
            let hs = normals
                .iter()
                .zip(offsets)
                .map(|(nv, &offset)| Ok(Halfspace { normal: vector(nv, n, "constraint normal")?, offset }))
                .collect::<Result<Vec<_>>>()?;
            ConstraintKind::HalfspaceIntersection(hs)
        }
    };
    ConstraintSet::new(kind, n)
}

fn build_spec(u: &UtilityConfig) -> Result<UtilitySpec> {
    let mode = match (u.mode, u.alpha) {
        (ModeConfig::Power, Some(alpha)) => UtilityMode::Power { alpha },
        (ModeConfig::Power, None) => return Err(Error::Config("utility.alpha is required in power mode".into())),
        (ModeConfig::Log, None) => UtilityMode::Log,
        (ModeConfig::Log, Some(_)) => return Err(Error::Config("utility.alpha must be absent in log mode".into())),
    };
    let h = match u.h {
        HConfig::Constant { value } => HFunction::Constant(value),
        HConfig::Sigmoid { lo, hi, center, width } => HFunction::Sigmoid { lo, hi, center, width },
    };
    UtilitySpec::new(mode, u.gamma, u.rho, u.tau, u.m, h).map_err(|e| match e {
        Error::Domain(msg) => Error::Config(msg),
        other => other,
    })
}

/// A parsed and validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: FactorModel,
    pub k: ConstraintSet,
    pub spec: UtilitySpec,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.numerics.check()?;
        let model = build_model(&config.model)?;
        let k = build_constraint(&config.constraint, model.n)?;
        let spec = build_spec(&config.utility)?;
        Ok(Experiment { config, model, k, spec })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Experiment::new(ExperimentConfig::load(path)?)
    }

    /// Applies command line overrides of the path count and the seed.
    pub fn with_overrides(mut config: ExperimentConfig, paths: Option<usize>, seed: Option<u64>) -> Result<Self> {
        if let Some(p) = paths {
            config.numerics.paths = p;
            config.numerics.rollout_paths = p;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        Experiment::new(config)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let n = &self.config.numerics;
        let mut cfg = SolverConfig::new(n.y0, n.paths, self.config.seed);
        cfg.grid_nodes = n.grid_nodes;
        cfg.grid_width = n.grid_width;
        cfg.steps = n.steps;
        cfg.tol = n.tol;
        cfg.max_iter = n.max_iter;
        cfg.schedule = match n.schedule {
            ScheduleConfig::Frozen => SeedSchedule::Frozen,
            ScheduleConfig::Rotating => SeedSchedule::Rotating,
        };
        cfg.dual_stride = n.dual_stride;
        cfg
    }

    fn rollout_config(&self, periods: usize) -> RolloutConfig {
        let n = &self.config.numerics;
        RolloutConfig {
            paths: n.rollout_paths,
            steps_per_period: n.steps,
            periods,
            seed: self.config.seed.wrapping_add(1),
            x0: n.x0,
            y0: n.y0,
            log_cap: n.log_cap,
        }
    }

    fn is_log(&self) -> bool {
        self.spec.mode == UtilityMode::Log
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_a_star(path: &Path, a: &ValueGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["y", "A"])?;
    for (y, v) in a.nodes().iter().zip(a.values()) {
        w.write_record([y.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_a_star(path: &Path) -> Result<ValueGrid> {
    let mut r = csv::Reader::from_path(path)?;
    let mut ys = Vec::new();
    let mut vs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("malformed row in {}", path.display())))
        };
        ys.push(parse(0)?);
        vs.push(parse(1)?);
    }
    ValueGrid::new(ys, vs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeDuality {
    pub y: f64,
    pub primal: f64,
    pub primal_se: f64,
    pub dual: f64,
    pub dual_se: f64,
    pub combined_se: f64,
    pub gap: f64,
    pub budget: f64,
    pub dual_sweeps: usize,
}

impl From<&OnePeriodValue> for NodeDuality {
    fn from(v: &OnePeriodValue) -> Self {
        NodeDuality {
            y: v.y,
            primal: v.primal_raw,
            primal_se: v.primal_se,
            dual: v.dual_raw,
            dual_se: v.dual_se,
            combined_se: v.combined_se(),
            gap: v.gap(),
            budget: v.budget,
            dual_sweeps: v.dual_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: ModeConfig,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub contraction_constant: f64,
    pub contraction_estimate: Option<f64>,
    pub posterior_error_bound: f64,
    pub mc_tolerance: f64,
    pub bounds: BoundBox,
    pub a_star_in_bounds: bool,
    pub c_star: Option<f64>,
    pub sup_norm_steps: Vec<f64>,
    pub duality: Vec<NodeDuality>,
}

struct PolicyRow {
    y: f64,
    pi: DVector<f64>,
    nu: Option<DVector<f64>>,
    eta: Option<f64>,
    lambda: Option<f64>,
}

fn write_policy(path: &Path, n: usize, rows: &[PolicyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["y".to_string()];
    header.extend((1..=n).map(|i| format!("pi_{i}")));
    header.extend((1..=n).map(|i| format!("nu_{i}")));
    header.push("eta".into());
    header.push("lambda".into());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let mut rec = vec![r.y.to_string()];
        rec.extend(r.pi.iter().map(|v| v.to_string()));
        match &r.nu {
            Some(nu) => rec.extend(nu.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat(String::new()).take(n)),
        }
        rec.push(opt(r.eta));
        rec.push(opt(r.lambda));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn control_at(duals: &[OnePeriodValue], y: f64) -> Option<&DualControl> {
    duals.iter().find(|d| d.y == y).and_then(|d| d.control.as_ref())
}

/// Closed-form `(pi, nu)` at every node, when available.
fn closed_forms(exp: &Experiment, cells: &Cells) -> Result<Option<Vec<(DVector<f64>, DVector<f64>)>>> {
    if !closed_form_applies(&exp.model, &exp.spec) {
        return Ok(None);
    }
    let out = cells
        .nodes()
        .iter()
        .map(|&y| match exp.spec.mode {
            UtilityMode::Log => policy_log(&exp.model, &exp.k, y),
            UtilityMode::Power { alpha } => policy_gamma1(&exp.model, &exp.k, alpha, y),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(out))
}

pub fn cmd_validate(exp: &Experiment) -> ValidationReport {
    let n = &exp.config.numerics;
    let half = n.grid_width * exp.model.factor.spread(exp.spec.tau);
    let mean = exp.model.factor.mean;
    let samples = ValueGrid::uniform_nodes(mean - half, mean + half, n.validation_samples.max(2));
    validate_model(&exp.model, &exp.spec, &samples)
}

/// Solves for the fixed point and writes `A_star.csv`, `policy.csv` and `run_report.json`.
pub fn cmd_solve(exp: &Experiment, out: &Path) -> Result<RunReport> {
    fs::create_dir_all(out)?;
    let cfg = exp.solver_config();
    let cells = cfg.grid(&exp.model, exp.spec.tau)?;
    let forms = closed_forms(exp, &cells)?;
    let n = exp.model.n;
    let (report, a_star, rows) = if exp.is_log() {
        let fp = log_fixed_point(&exp.model, &exp.k, &exp.spec, &cfg)?;
        let duality = cells
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, &y)| NodeDuality {
                y,
                primal: fp.primal_growth[i],
                primal_se: fp.primal_growth_se[i],
                dual: fp.growth[i],
                dual_se: fp.growth_se[i],
                combined_se: fp.growth_se[i].hypot(fp.primal_growth_se[i]),
                gap: fp.growth[i] - fp.primal_growth[i],
                budget: 1.0,
                dual_sweeps: 0,
            })
            .collect();
        let forms = forms.expect("log mode always has closed forms");
        let rows = cells
            .nodes()
            .iter()
            .zip(forms)
            .zip(&fp.controls)
            .map(|((&y, (pi, nu)), ctrl)| PolicyRow { y, pi, nu: Some(nu), eta: Some(ctrl.eta_at(y)), lambda: Some(ctrl.lambda) })
            .collect::<Vec<_>>();
        let in_bounds = fp.a_star.values().iter().all(|&v| fp.bounds.contains(v, fp.posterior_error_bound));
        let report = RunReport {
            mode: ModeConfig::Log,
            seed: exp.config.seed,
            iterations: fp.iterations,
            converged: true,
            contraction_constant: crate::fixedpoint::contraction_constant(&exp.model, &exp.spec)?,
            contraction_estimate: None,
            posterior_error_bound: fp.posterior_error_bound,
            mc_tolerance: 3.0 * fp.growth_se.iter().chain(&fp.primal_growth_se).cloned().fold(0.0, f64::max),
            bounds: fp.bounds,
            a_star_in_bounds: in_bounds,
            c_star: Some(fp.c_star),
            sup_norm_steps: Vec::new(),
            duality,
        };
        (report, fp.a_star, rows)
    } else {
        let fp = solve_fixed_point(&exp.model, &exp.k, &exp.spec, &cfg)?;
        let slack = fp.mc_tolerance + fp.posterior_error_bound;
        let rows = cells
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let ctrl = control_at(&fp.duals, y);
                let (pi, nu) = match &forms {
                    Some(f) => (f[i].0.clone(), Some(f[i].1.clone())),
                    None => (fp.policies[i][i].clone(), ctrl.map(|c| c.nu_at(y).clone())),
                };
                PolicyRow { y, pi, nu, eta: ctrl.map(|c| c.eta_at(y)), lambda: ctrl.map(|c| c.lambda) }
            })
            .collect::<Vec<_>>();
        let report = RunReport {
            mode: ModeConfig::Power,
            seed: exp.config.seed,
            iterations: fp.iterations,
            converged: fp.converged,
            contraction_constant: fp.contraction_constant,
            contraction_estimate: Some(fp.contraction_estimate),
            posterior_error_bound: fp.posterior_error_bound,
            mc_tolerance: fp.mc_tolerance,
            bounds: fp.bounds,
            a_star_in_bounds: fp.a_star.values().iter().all(|&v| fp.bounds.contains(v, slack)),
            c_star: None,
            sup_norm_steps: fp.sup_norm_steps.clone(),
            duality: fp.duals.iter().map(NodeDuality::from).collect(),
        };
        (report, fp.a_star, rows)
    };
    write_a_star(&out.join(A_STAR_FILE), &a_star)?;
    write_policy(&out.join(POLICY_FILE), n, &rows)?;
    write_json(&out.join(RUN_REPORT_FILE), &report)?;
    Ok(report)
}

/// Policy and continuation value implied by a solved `A*`.
pub fn build_policy(exp: &Experiment, a: &ValueGrid) -> Result<(PeriodicPolicy, Continuation)> {
    let cells = Cells::new(a.nodes().to_vec())?;
    let spec = &exp.spec;
    if exp.is_log() {
        let c = (1.0 - spec.gamma) / ((spec.rho * spec.tau).exp() - 1.0);
        return Ok((PeriodicPolicy::log(&exp.model, &exp.k, cells)?, Continuation::Log { a: a.clone(), c }));
    }
    let alpha = spec.power_alpha()?;
    let policy = if closed_form_applies(&exp.model, spec) {
        PeriodicPolicy::gamma1(&exp.model, &exp.k, alpha, cells)?
    } else {
        let cfg = exp.solver_config();
        let mut paths = NodePaths::new(&exp.model, cells.clone(), cfg.sim(spec.tau, cfg.seed)?);
        let sweep = apply_psi(&exp.model, &exp.k, spec, a, &mut paths, cfg.seed, None, &SearchConfig::default())?;
        PeriodicPolicy::new(cells, sweep.policies)?
    };
    Ok((policy, Continuation::Power(a.clone())))
}

fn read_mc_tolerance(dir: &Path) -> Result<f64> {
    let path = dir.join(RUN_REPORT_FILE);
    if !path.exists() {
        return Ok(0.0);
    }
    let v: serde_json::Value = serde_json::from_reader(File::open(path)?)?;
    Ok(v.get("mc_tolerance").and_then(|x| x.as_f64()).unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl VerifyCheck {
    fn new(name: &str, passed: bool, value: f64, threshold: f64, detail: String) -> Self {
        VerifyCheck { name: name.into(), passed, value, threshold, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub policy_scale: f64,
    pub checks: Vec<VerifyCheck>,
    pub martingale: Vec<PeriodStat>,
    pub value_bounds: BoundsCheck,
}

/// Runs the verification checks against solved artifacts in `artifacts`.
pub fn cmd_verify(exp: &Experiment, artifacts: &Path, out: &Path, policy_scale: f64) -> Result<VerifyReport> {
    fs::create_dir_all(out)?;
    let a = read_a_star(&artifacts.join(A_STAR_FILE))?;
    let num = &exp.config.numerics;
    let mut checks = Vec::new();

    let bounds = theoretical_bounds(&exp.model, &exp.spec)?;
    let slack = read_mc_tolerance(artifacts)? + num.tol;
    let worst = a
        .values()
        .iter()
        .map(|&v| (bounds.lower - v).max(v - bounds.upper))
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(VerifyCheck::new(
        "a_star_bounds",
        worst <= slack,
        worst,
        slack,
        format!("A* in [{}, {}]", bounds.lower, bounds.upper),
    ));

    let cells = Cells::new(a.nodes().to_vec())?;
    if let Some(forms) = closed_forms(exp, &cells)? {
        let mut ctrl = DualControl::zero(&cells, exp.model.n);
        ctrl.nu = forms.iter().map(|f| f.1.clone()).collect();
        let pis: Vec<_> = forms.into_iter().map(|f| f.0).collect();
        let kkt = kkt_check(&exp.k, &ctrl, &pis, num.kkt_tol);
        let worst = kkt.nodes.iter().map(|n| n.distance_to_k.max(n.complementarity)).fold(0.0, f64::max);
        checks.push(VerifyCheck::new("kkt", kkt.passed, worst, num.kkt_tol, "closed-form policy at every node".into()));
    }

    let cfg = exp.solver_config();
    let sim = cfg.sim(exp.spec.tau, cfg.seed)?;
    let v = one_period_value(&exp.model, &exp.k, &exp.spec, &a, num.y0, &sim, true, &cfg.search, &DualConfig::default())?;
    let budget_err = (v.budget - 1.0).abs();
    checks.push(VerifyCheck::new("budget", budget_err <= num.budget_tol, budget_err, num.budget_tol, format!("y = {}", num.y0)));
    let se = v.combined_se() + ROUNDOFF * (1.0 + v.primal_raw.abs());
    let no_gap = exp.is_log() || exp.spec.gamma == 1.0;
    let gap_ok = if no_gap { v.gap().abs() <= 3.0 * se } else { v.gap() >= -3.0 * se };
    checks.push(VerifyCheck::new(
        "duality_gap",
        gap_ok,
        v.gap(),
        3.0 * se,
        format!("primal {} dual {} ({})", v.primal_raw, v.dual_raw, if no_gap { "two-sided" } else { "weak duality" }),
    ));

    let (policy, cont) = build_policy(exp, &a)?;
    let policy = policy.scaled(policy_scale);
    let res = rollout(&exp.model, &exp.spec, &policy, &cont, &exp.rollout_config(num.verify_periods))?;
    let stats = verify_martingale_d(&res, slack)?;
    let worst = stats.iter().map(|s| (s.mean.abs() - s.band) / s.std_err).fold(f64::NEG_INFINITY, f64::max);
    checks.push(VerifyCheck::new(
        "martingale",
        stats.iter().all(|s| s.martingale),
        worst,
        3.0,
        "largest |mean increment| beyond the A* band, in standard errors".into(),
    ));
    let min_wealth = res.min_wealth();
    checks.push(VerifyCheck::new("positivity", min_wealth > 0.0, min_wealth, 0.0, "smallest simulated wealth".into()));
    let vb = value_bounds_check(&exp.model, &exp.spec, num.x0, res.value_estimate, 3.0 * res.value_se + num.tol)?;
    checks.push(VerifyCheck::new("value_bounds", vb.passed, vb.estimate, vb.tolerance, format!("V in [{}, {}]", vb.lower, vb.upper)));

    let report = VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        policy_scale,
        checks,
        martingale: stats,
        value_bounds: vb,
    };
    write_json(&out.join(VERIFY_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub paths: usize,
    pub periods: usize,
    pub x0: f64,
    pub y0: f64,
    pub policy_scale: f64,
    pub objective: f64,
    pub objective_se: f64,
    pub tail_bound: f64,
    pub value_estimate: f64,
    pub value_se: f64,
    pub min_wealth: f64,
    pub martingale: Vec<PeriodStat>,
    pub supermartingale: bool,
    pub value_bounds: BoundsCheck,
}

/// Rolls out the solved policy and writes `rollout.csv` and `summary.json`.
pub fn cmd_simulate(exp: &Experiment, artifacts: &Path, out: &Path, policy_scale: f64) -> Result<SimulationSummary> {
    fs::create_dir_all(out)?;
    let a = read_a_star(&artifacts.join(A_STAR_FILE))?;
    let num = &exp.config.numerics;
    let (policy, cont) = build_policy(exp, &a)?;
    let policy = policy.scaled(policy_scale);
    let res = rollout(&exp.model, &exp.spec, &policy, &cont, &exp.rollout_config(num.periods))?;
    let stats = verify_martingale_d(&res, read_mc_tolerance(artifacts)? + num.tol)?;
    let vb = value_bounds_check(&exp.model, &exp.spec, num.x0, res.value_estimate, 3.0 * res.value_se + num.tol)?;
    res.write_csv(BufWriter::new(File::create(out.join(ROLLOUT_FILE))?))?;
    let summary = SimulationSummary {
        paths: res.paths,
        periods: res.periods,
        x0: num.x0,
        y0: num.y0,
        policy_scale,
        objective: res.objective,
        objective_se: res.objective_se,
        tail_bound: res.tail_bound,
        value_estimate: res.value_estimate,
        value_se: res.value_se,
        min_wealth: res.min_wealth(),
        supermartingale: stats.iter().all(|s| s.supermartingale),
        martingale: stats,
        value_bounds: vb,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
