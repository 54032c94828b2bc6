//! The dynamic-programming operator on the factor grid, its fixed point and
//! the closed-form bounds.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dual::{log_dual_control, log_dual_growth, DualConfig, DualControl, DualEvaluation, DualProblem};
use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::market::{Cells, FactorModel, PathStats, SimConfig};
use crate::primal::{myopic_policy, search_policy, PrimalData, SearchConfig};
use crate::reduce::pair_moments;
use crate::utility::{LocalUtility, ModifiedUtility, UtilityMode, UtilitySpec};

/// Seed used for the Monte Carlo sweep `k` of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedSchedule {
    /// The same paths at every sweep.
    #[default]
    Frozen,
    /// A fresh, deterministically derived seed at every sweep.
    Rotating,
}

impl SeedSchedule {
    pub fn seed(&self, base: u64, sweep: usize) -> u64 {
        match self {
            SeedSchedule::Frozen => base,
            SeedSchedule::Rotating => splitmix(base ^ (sweep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub y0: f64,
    pub grid_nodes: usize,
    /// Half-width of the grid in factor standard deviations.
    pub grid_width: f64,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub schedule: SeedSchedule,
    /// Dual problems are solved at every `dual_stride`-th node of the final iterate (0 disables).
    pub dual_stride: usize,
    pub search: SearchConfig,
    pub dual: DualConfig,
}

impl SolverConfig {
    pub fn new(y0: f64, paths: usize, seed: u64) -> Self {
        SolverConfig {
            y0,
            grid_nodes: 41,
            grid_width: 5.0,
            paths,
            steps: 64,
            seed,
            tol: 1e-4,
            max_iter: 200,
            schedule: SeedSchedule::Frozen,
            dual_stride: 10,
            search: SearchConfig::default(),
            dual: DualConfig::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.grid_nodes == 0 || !(self.grid_width > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 || !self.y0.is_finite() {
            return Err(Error::Config("grid nodes, grid width, tolerance and iteration cap must be positive".into()));
        }
        SimConfig::new(self.seed, self.paths, self.steps, 1.0).map(|_| ())
    }

    /// Factor grid centred at `y0`.
    pub fn grid(&self, model: &FactorModel, tau: f64) -> Result<Cells> {
        let s = model.factor.spread(tau);
        let h = self.grid_width * s;
        Cells::new(ValueGrid::uniform_nodes(self.y0 - h, self.y0 + h, self.grid_nodes))
    }

    pub fn sim(&self, tau: f64, seed: u64) -> Result<SimConfig> {
        SimConfig::new(seed, self.paths, self.steps, tau)
    }
}

/// `(lower, upper)` bounds of the fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundBox {
    pub lower: f64,
    pub upper: f64,
}

impl BoundBox {
    pub fn contains(&self, v: f64, slack: f64) -> bool {
        v >= self.lower - slack && v <= self.upper + slack
    }
}

fn geometric(num_exp: f64, decay: f64, tau: f64) -> Result<f64> {
    let den = 1.0 - (-decay * tau).exp();
    if !(den > 0.0) {
        return Err(Error::Domain(format!("bound denominator vanishes (rate {decay})")));
    }
    Ok((num_exp * tau).exp() / den)
}

/// Closed-form bounds on the fixed point for power and logarithmic utility.
pub fn theoretical_bounds(model: &FactorModel, spec: &UtilitySpec) -> Result<BoundBox> {
    let b = model.bounds;
    let (rho, tau, gamma, m) = (spec.rho, spec.tau, spec.gamma, spec.m);
    match spec.mode {
        UtilityMode::Power { alpha } => {
            let x = alpha * (1.0 - gamma);
            let za = model.zeta(alpha)?;
            let zx = model.zeta(x)?;
            let safe = geometric(b.r_lower * alpha - rho, rho - b.r_lower * x, tau)?;
            let growth = geometric(za - rho, rho - zx, tau)?;
            Ok(if alpha > 0.0 {
                BoundBox { lower: m * safe, upper: growth }
            } else {
                BoundBox { lower: m * growth, upper: safe }
            })
        }
        UtilityMode::Log => {
            let e = (rho * tau).exp();
            if !(e > 1.0) {
                return Err(Error::Domain("logarithmic bounds need rho > 0".into()));
            }
            let factor = (e - gamma) / (e - 1.0).powi(2);
            let tail = (-rho * tau).exp() / (1.0 - (-rho * tau).exp());
            Ok(BoundBox {
                lower: factor * b.r_lower * tau + (m - rho * tau * gamma) * tail,
                upper: factor * (b.r_bar + 0.5 * b.m0) * tau + (1.0 - rho * tau * gamma) * tail,
            })
        }
    }
}

/// Lipschitz constant `exp(-(rho - zeta(alpha (1 - gamma))) tau)` of the operator.
pub fn contraction_constant(model: &FactorModel, spec: &UtilitySpec) -> Result<f64> {
    let rate = match spec.mode {
        UtilityMode::Power { alpha } => spec.rho - model.zeta(alpha * (1.0 - spec.gamma))?,
        UtilityMode::Log => spec.rho,
    };
    let c = (-rate * spec.tau).exp();
    if !(c < 1.0) {
        return Err(Error::Domain(format!("operator is not a contraction: constant {c} >= 1")));
    }
    Ok(c)
}

/// Terminal utilities along the paths of `stats`.
pub(crate) fn local_utilities(mu: &ModifiedUtility, stats: &PathStats) -> Vec<LocalUtility> {
    (0..stats.count).map(|p| mu.at(stats.path(p).y_end)).collect()
}

/// One-period values at a single start point.
#[derive(Debug, Clone)]
pub struct OnePeriodValue {
    pub y: f64,
    /// Best sample mean of `h_A(X_tau, Y_tau)` over cell-constant policies in `K`.
    pub primal_raw: f64,
    pub primal_se: f64,
    /// Estimated dual functional at the dual optimum found.
    pub dual_raw: f64,
    pub dual_se: f64,
    pub budget: f64,
    /// `alpha e^{-rho tau}` times the raw values.
    pub primal: f64,
    pub dual: f64,
    pub policy: Vec<DVector<f64>>,
    pub control: Option<DualControl>,
    pub dual_sweeps: usize,
}

impl OnePeriodValue {
    pub fn combined_se(&self) -> f64 {
        self.primal_se.hypot(self.dual_se)
    }

    /// `dual_raw - primal_raw`; weak duality makes this nonnegative up to noise.
    pub fn gap(&self) -> f64 {
        self.dual_raw - self.primal_raw
    }
}

/// Primal and (optionally) dual one-period value of `h_A` at `y` with paths from `sim`.
#[allow(clippy::too_many_arguments)]
pub fn one_period_value(
    model: &FactorModel,
    k: &ConstraintSet,
    spec: &UtilitySpec,
    a: &ValueGrid,
    y: f64,
    sim: &SimConfig,
    with_dual: bool,
    search: &SearchConfig,
    dual: &DualConfig,
) -> Result<OnePeriodValue> {
    let cells = Cells::new(a.nodes().to_vec())?;
    let stats = PathStats::build(model, &cells, y, sim)?;
    match spec.mode {
        UtilityMode::Power { alpha } => {
            let mu = ModifiedUtility::new(spec, a.clone())?;
            let utils = local_utilities(&mu, &stats);
            let start = myopic_policy(model, k, &cells, 1.0 - alpha)?;
            period_value_power(model, k, spec, &cells, &stats, &utils, y, &start, with_dual, search, dual)
        }
        UtilityMode::Log => period_value_log(model, k, spec, &cells, &stats, y),
    }
}

#[allow(clippy::too_many_arguments)]
fn period_value_power(
    model: &FactorModel,
    k: &ConstraintSet,
    spec: &UtilitySpec,
    cells: &Cells,
    stats: &PathStats,
    utils: &[LocalUtility],
    y: f64,
    start: &[DVector<f64>],
    with_dual: bool,
    search: &SearchConfig,
    dual: &DualConfig,
) -> Result<OnePeriodValue> {
    let alpha = spec.power_alpha()?;
    let scale = alpha * (-spec.rho * spec.tau).exp();
    let data = PrimalData::new(model, stats);
    let primal = search_policy(k, &data, utils, start, search)?;
    let mut out = OnePeriodValue {
        y,
        primal_raw: primal.value.mean,
        primal_se: primal.value.std_err(),
        dual_raw: f64::NAN,
        dual_se: f64::NAN,
        budget: f64::NAN,
        primal: scale * primal.value.mean,
        dual: f64::NAN,
        policy: primal.pi,
        control: None,
        dual_sweeps: 0,
    };
    if with_dual {
        let problem = DualProblem { model, k, cells, stats, utils };
        let res = problem.minimize(dual)?;
        let DualEvaluation { value, std_err, budget, .. } = res.evaluation;
        out.dual_raw = value;
        out.dual_se = std_err;
        out.budget = budget;
        out.dual = scale * value;
        out.control = Some(res.control);
        out.dual_sweeps = res.sweeps;
    }
    Ok(out)
}

fn period_value_log(
    model: &FactorModel,
    k: &ConstraintSet,
    spec: &UtilitySpec,
    cells: &Cells,
    stats: &PathStats,
    y: f64,
) -> Result<OnePeriodValue> {
    let ctrl = log_dual_control(model, k, cells, 1.0)?;
    let growth = log_dual_growth(model, k, stats, &ctrl.nu)?;
    let policy = cells
        .nodes()
        .iter()
        .zip(&ctrl.nu)
        .map(|(&yj, nu)| Ok(crate::constraints::fictitious_portfolio(&model.sharpe_theta(yj)?, &model.sigma(yj), nu, 1.0)?))
        .collect::<Result<Vec<_>>>()?;
    let lx = PrimalData::new(model, stats).log_wealth(&policy);
    let [p] = pair_moments::<1, _>(stats.count, |i| Ok([lx[i]]))?;
    let scale = (1.0 - spec.gamma * (-spec.rho * spec.tau).exp()) / ((spec.rho * spec.tau).exp() - 1.0);
    Ok(OnePeriodValue {
        y,
        primal_raw: p.mean,
        primal_se: p.std_err(),
        dual_raw: growth.mean,
        dual_se: growth.std_err(),
        budget: 1.0,
        primal: scale * p.mean,
        dual: scale * growth.mean,
        policy,
        control: Some(ctrl),
        dual_sweeps: 0,
    })
}

/// One application of the operator: values and optimizing policies per node.
#[derive(Debug, Clone)]
pub struct PsiSweep {
    pub values: ValueGrid,
    /// Three standard errors of each node value.
    pub tolerance: Vec<f64>,
    pub policies: Vec<Vec<DVector<f64>>>,
}

/// Frozen reduced paths for every grid node.
pub struct NodePaths {
    pub cells: Cells,
    seed: u64,
    cache: Vec<Option<PathStats>>,
    sim: SimConfig,
}

const CACHE_BYTES: usize = 1 << 30;

impl NodePaths {
    pub fn new(model: &FactorModel, cells: Cells, sim: SimConfig) -> Self {
        let n = model.n;
        let estimate = cells.len() * sim.count * 12 * (8 + 2 * n) * 8;
        let cache = if estimate <= CACHE_BYTES { vec![None; cells.len()] } else { Vec::new() };
        NodePaths { cells, seed: sim.seed, cache, sim }
    }

    fn with<T>(&mut self, model: &FactorModel, node: usize, seed: u64, f: impl FnOnce(&PathStats) -> Result<T>) -> Result<T> {
        let y = self.cells.nodes()[node];
        if seed != self.seed {
            self.seed = seed;
            for c in self.cache.iter_mut() {
                *c = None;
            }
        }
        let sim = self.sim.with_seed(seed);
        if self.cache.is_empty() {
            return f(&PathStats::build(model, &self.cells, y, &sim)?);
        }
        if self.cache[node].is_none() {
            self.cache[node] = Some(PathStats::build(model, &self.cells, y, &sim)?);
        }
        f(self.cache[node].as_ref().unwrap())
    }
}

/// Applies the operator to `a` node by node; the result is clamped at zero.
#[allow(clippy::too_many_arguments)]
pub fn apply_psi(
    model: &FactorModel,
    k: &ConstraintSet,
    spec: &UtilitySpec,
    a: &ValueGrid,
    paths: &mut NodePaths,
    seed: u64,
    warm: Option<&[Vec<DVector<f64>>]>,
    search: &SearchConfig,
) -> Result<PsiSweep> {
    let alpha = spec.power_alpha()?;
    let scale = alpha * (-spec.rho * spec.tau).exp();
    let mu = ModifiedUtility::new(spec, a.clone())?;
    let cells = paths.cells.clone();
    let myopic = myopic_policy(model, k, &cells, 1.0 - alpha)?;
    let mut values = Vec::with_capacity(cells.len());
    let mut tolerance = Vec::with_capacity(cells.len());
    let mut policies = Vec::with_capacity(cells.len());
    for node in 0..cells.len() {
        let start = warm.map_or(&myopic[..], |w| &w[node][..]);
        let res = paths.with(model, node, seed, |stats| {
            let utils = local_utilities(&mu, stats);
            let data = PrimalData::new(model, stats);
            search_policy(k, &data, &utils, start, search)
        })?;
        values.push((scale * res.value.mean).max(0.0));
        tolerance.push(3.0 * scale.abs() * res.value.std_err());
        policies.push(res.pi);
    }
    Ok(PsiSweep { values: ValueGrid::new(cells.nodes().to_vec(), values)?, tolerance, policies })
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub a_star: ValueGrid,
    pub iterations: usize,
    pub sup_norm_steps: Vec<f64>,
    /// Largest measured ratio of consecutive steps.
    pub contraction_estimate: f64,
    pub contraction_constant: f64,
    pub posterior_error_bound: f64,
    pub bounds: BoundBox,
    /// Largest three-standard-error band of the last sweep.
    pub mc_tolerance: f64,
    pub seeds: Vec<u64>,
    pub policies: Vec<Vec<DVector<f64>>>,
    pub converged: bool,
    /// One-period values with duals at the nodes selected by `dual_stride`.
    pub duals: Vec<OnePeriodValue>,
}

/// Banach iteration of the operator from the constant lower bound.
pub fn solve_fixed_point(model: &FactorModel, k: &ConstraintSet, spec: &UtilitySpec, cfg: &SolverConfig) -> Result<FixedPointResult> {
    cfg.check()?;
    let c = contraction_constant(model, spec)?;
    let bounds = theoretical_bounds(model, spec)?;
    let cells = cfg.grid(model, spec.tau)?;
    let mut paths = NodePaths::new(model, cells.clone(), cfg.sim(spec.tau, cfg.seed)?);
    let mut a = ValueGrid::constant(cells.nodes().to_vec(), bounds.lower.max(0.0))?;
    let mut steps = Vec::new();
    let mut seeds = Vec::new();
    let mut warm: Option<Vec<Vec<DVector<f64>>>> = None;
    let mut last = None;
    let mut posterior = f64::INFINITY;
    let mut converged = false;
    for sweep in 0..cfg.max_iter {
        let seed = cfg.schedule.seed(cfg.seed, sweep);
        seeds.push(seed);
        let next = apply_psi(model, k, spec, &a, &mut paths, seed, warm.as_deref(), &cfg.search)?;
        let d = next.values.distance(&a);
        steps.push(d);
        a = next.values.clone();
        warm = Some(next.policies.clone());
        last = Some(next);
        posterior = d * c / (1.0 - c);
        if posterior <= cfg.tol {
            converged = true;
            break;
        }
    }
    let last = last.expect("at least one sweep");
    if !converged {
        return Err(Error::Numerical(format!(
            "fixed point iteration hit the cap of {} sweeps (a-posteriori bound {posterior})",
            cfg.max_iter
        )));
    }
    let contraction_estimate = steps
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let mut duals = Vec::new();
    if cfg.dual_stride > 0 {
        let mu = ModifiedUtility::new(spec, a.clone())?;
        let seed = *seeds.last().unwrap();
        for node in (0..cells.len()).step_by(cfg.dual_stride) {
            let y = cells.nodes()[node];
            let start = &last.policies[node];
            let v = paths.with(model, node, seed, |stats| {
                let utils = local_utilities(&mu, stats);
                period_value_power(model, k, spec, &cells, stats, &utils, y, start, true, &cfg.search, &cfg.dual)
            })?;
            duals.push(v);
        }
    }
    Ok(FixedPointResult {
        a_star: a,
        iterations: steps.len(),
        contraction_estimate,
        sup_norm_steps: steps,
        contraction_constant: c,
        posterior_error_bound: posterior,
        bounds,
        mc_tolerance: last.tolerance.iter().cloned().fold(0.0, f64::max),
        seeds,
        policies: last.policies,
        converged,
        duals,
    })
}

/// Measured `d(Psi(A1), Psi(A2)) / d(A1, A2)` on common paths.
pub fn measure_contraction(
    model: &FactorModel,
    k: &ConstraintSet,
    spec: &UtilitySpec,
    a1: &ValueGrid,
    a2: &ValueGrid,
    cfg: &SolverConfig,
) -> Result<f64> {
    let cells = Cells::new(a1.nodes().to_vec())?;
    let mut paths = NodePaths::new(model, cells, cfg.sim(spec.tau, cfg.seed)?);
    let p1 = apply_psi(model, k, spec, a1, &mut paths, cfg.seed, None, &cfg.search)?;
    let p2 = apply_psi(model, k, spec, a2, &mut paths, cfg.seed, Some(&p1.policies), &cfg.search)?;
    let d = a1.distance(a2);
    if d == 0.0 {
        return Err(Error::Domain("contraction ratio needs distinct arguments".into()));
    }
    Ok(p1.values.distance(&p2.values) / d)
}

#[derive(Debug, Clone)]
pub struct LogFixedPoint {
    pub a_star: ValueGrid,
    pub c_star: f64,
    /// Dual growth bound `sup E[log X_tau]` per node.
    pub growth: Vec<f64>,
    /// `E[log X_tau]` of the closed-form policy per node.
    pub primal_growth: Vec<f64>,
    pub growth_se: Vec<f64>,
    pub primal_growth_se: Vec<f64>,
    pub iterations: usize,
    pub posterior_error_bound: f64,
    pub bounds: BoundBox,
    pub policies: Vec<Vec<DVector<f64>>>,
    pub controls: Vec<DualControl>,
}

/// Fixed point of the affine logarithmic operator
/// `A -> c1 G + e^{-rho tau} (E[h(Y_tau) + A(Y_tau)] - rho tau gamma)`.
pub fn log_fixed_point(model: &FactorModel, k: &ConstraintSet, spec: &UtilitySpec, cfg: &SolverConfig) -> Result<LogFixedPoint> {
    if spec.mode != UtilityMode::Log {
        return Err(Error::Config("logarithmic fixed point needs log mode".into()));
    }
    cfg.check()?;
    let (rho, tau, gamma) = (spec.rho, spec.tau, spec.gamma);
    let c = contraction_constant(model, spec)?;
    let bounds = theoretical_bounds(model, spec)?;
    let cells = cfg.grid(model, tau)?;
    let sim = cfg.sim(tau, cfg.seed)?;
    let nodes = cells.nodes().to_vec();
    let probe = ValueGrid::constant(nodes.clone(), 0.0)?;
    let c1 = (1.0 - gamma * (-rho * tau).exp()) / ((rho * tau).exp() - 1.0);
    let mut growth = Vec::new();
    let mut growth_se = Vec::new();
    let mut primal_growth = Vec::new();
    let mut primal_growth_se = Vec::new();
    let mut weights = Vec::new();
    let mut h_mean = Vec::new();
    let mut policies = Vec::new();
    let mut controls = Vec::new();
    for &y in &nodes {
        let stats = PathStats::build(model, &cells, y, &sim)?;
        let v = period_value_log(model, k, spec, &cells, &stats, y)?;
        let mut w = vec![0.0; nodes.len()];
        let mut hm = 0.0;
        for p in 0..stats.count {
            let ye = stats.path(p).y_end;
            let (i, t) = probe.stencil(ye);
            w[i] += 1.0 - t;
            if nodes.len() > 1 {
                w[i + 1] += t;
            }
            hm += spec.h.eval(ye);
        }
        let inv = 1.0 / stats.count as f64;
        weights.push(w.into_iter().map(|x| x * inv).collect::<Vec<_>>());
        h_mean.push(hm * inv);
        growth.push(v.dual_raw);
        growth_se.push(v.dual_se);
        primal_growth.push(v.primal_raw);
        primal_growth_se.push(v.primal_se);
        policies.push(v.policy);
        controls.push(v.control.expect("log value carries its control"));
    }
    let disc = (-rho * tau).exp();
    let mut a = vec![bounds.lower; nodes.len()];
    let mut iterations = 0;
    let mut posterior = f64::INFINITY;
    while iterations < 100_000 {
        iterations += 1;
        let next: Vec<f64> = (0..nodes.len())
            .map(|i| {
                let cont: f64 = weights[i].iter().zip(&a).map(|(w, v)| w * v).sum();
                c1 * growth[i] + disc * (h_mean[i] + cont - rho * tau * gamma)
            })
            .collect();
        let d = next.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        a = next;
        posterior = d * c / (1.0 - c);
        if posterior <= cfg.tol.min(1e-12) || d == 0.0 {
            break;
        }
    }
    Ok(LogFixedPoint {
        a_star: ValueGrid::new(nodes, a)?,
        c_star: (1.0 - gamma) / ((rho * tau).exp() - 1.0),
        growth,
        primal_growth,
        growth_se,
        primal_growth_se,
        iterations,
        posterior_error_bound: posterior,
        bounds,
        policies,
        controls,
    })
}
