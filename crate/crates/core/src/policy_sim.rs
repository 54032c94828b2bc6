//! Periodic policies, multi-period rollouts and the martingale diagnostics of
//! the verification argument.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constraints::{fictitious_portfolio, nu_star_weighted, ConstraintKind, ConstraintSet};
use crate::dual::{DualControl, DualProblem};
use crate::error::{Error, Result};
use crate::fixedpoint::{theoretical_bounds, BoundBox};
use crate::grid::ValueGrid;
use crate::market::{Cells, FactorModel, PathStats, PathStream, SimConfig};
use crate::reduce::{chunked, pair_moments, Moments};
use crate::utility::{ModifiedUtility, UtilityMode, UtilitySpec};

const BINDING_SET_MAX_N: usize = 16;
const BINDING_EPS: f64 = 1e-12;

/// Solves the borrowing-cap problem `max pi^T e - R pi^T S pi / 2` over
/// `{1^T pi <= a}` (and `pi >= 0` when `no_short`) by enumerating the set of
/// held assets. Returns `(pi, nu)` with `nu = R S pi - e`, which equals a common
/// value `phi <= 0` on the held assets.
fn binding_set(sst: &DMatrix<f64>, e: &DVector<f64>, a: f64, risk: f64, no_short: bool) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = e.len();
    let subsets: Vec<Vec<usize>> = if no_short {
        (0u32..(1 << n)).map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect()).collect()
    } else {
        vec![(0..n).collect()]
    };
    for s in subsets {
        let k = s.len();
        let (sol_e, sol_1) = if k == 0 {
            (DVector::zeros(0), DVector::zeros(0))
        } else {
            let sub = DMatrix::from_fn(k, k, |i, j| sst[(s[i], s[j])]);
            let chol = sub.cholesky()?;
            let es = DVector::from_fn(k, |i, _| e[s[i]]);
            (chol.solve(&es), chol.solve(&DVector::from_element(k, 1.0)))
        };
        let phi_cap = if k == 0 { f64::NAN } else { (a * risk - sol_e.sum()) / sol_1.sum() };
        for phi in [0.0, phi_cap] {
            if !phi.is_finite() || phi > BINDING_EPS {
                continue;
            }
            let mut pi = DVector::zeros(n);
            for (i, &idx) in s.iter().enumerate() {
                pi[idx] = (sol_e[i] + phi * sol_1[i]) / risk;
            }
            let mut nu = sst * &pi * risk - e;
            for &i in &s {
                nu[i] = phi;
            }
            let total = pi.sum();
            let scale = 1.0 + a.abs() + pi.amax();
            if total > a + BINDING_EPS * scale {
                continue;
            }
            if phi != 0.0 && (total - a).abs() > BINDING_EPS * scale {
                continue;
            }
            if no_short {
                if s.iter().any(|&i| pi[i] < -BINDING_EPS * scale) {
                    continue;
                }
                let nscale = 1.0 + nu.amax();
                if (0..n).any(|i| !s.contains(&i) && nu[i] < phi - BINDING_EPS * nscale) {
                    continue;
                }
                for &i in &s {
                    pi[i] = pi[i].max(0.0);
                }
            }
            return Some((pi, nu));
        }
    }
    None
}

/// Pointwise optimum `(pi, nu)` for relative risk aversion `risk`; `nu`
/// minimizes `|theta + sigma^{-1} nu|^2 + 2 risk delta(nu)`.
fn closed_form(model: &FactorModel, k: &ConstraintSet, y: f64, risk: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let theta = model.sharpe_theta(y)?;
    let sigma = model.sigma(y);
    let special = match k.kind {
        ConstraintKind::NoShortAndBorrowCap { a } if k.n <= BINDING_SET_MAX_N => Some((a, true)),
        ConstraintKind::BorrowCap { a } => Some((a, false)),
        _ => None,
    };
    if let Some((a, no_short)) = special {
        let sst = &sigma * sigma.transpose();
        if let Some(sol) = binding_set(&sst, &model.excess(y), a, risk, no_short) {
            return Ok(sol);
        }
    }
    let nu = nu_star_weighted(k, &theta, &sigma, 2.0 * risk)?;
    Ok((fictitious_portfolio(&theta, &sigma, &nu, risk)?, nu))
}

/// Whether the pointwise formulas give the optimal one-period policy: always for
/// logarithmic utility, and for power utility with `gamma = 1` when the factor
/// is independent of the traded noise or the coefficients are constant.
pub fn closed_form_applies(model: &FactorModel, spec: &UtilitySpec) -> bool {
    match spec.mode {
        UtilityMode::Log => true,
        UtilityMode::Power { .. } => {
            spec.gamma == 1.0 && (model.q.iter().all(|&q| q == 0.0) || model.coeffs.shape == crate::market::Shape::Constant)
        }
    }
}

/// Optimal portfolio and constraint parameter for power utility with `gamma = 1`.
pub fn policy_gamma1(model: &FactorModel, k: &ConstraintSet, alpha: f64, y: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(alpha < 1.0) || alpha == 0.0 {
        return Err(Error::Domain(format!("alpha = {alpha} must lie in (-inf, 0) or (0, 1)")));
    }
    closed_form(model, k, y, 1.0 - alpha)
}

/// Optimal portfolio and constraint parameter for logarithmic utility.
pub fn policy_log(model: &FactorModel, k: &ConstraintSet, y: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    closed_form(model, k, y, 1.0)
}

/// Stationary periodic policy: the portfolio used in a period depends on the
/// grid node nearest to the factor at the period start and on the current cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicPolicy {
    pub cells: Cells,
    /// `tables[start][cell]`.
    pub tables: Vec<Vec<DVector<f64>>>,
}

impl PeriodicPolicy {
    pub fn new(cells: Cells, tables: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        if tables.len() != cells.len() || tables.iter().any(|t| t.len() != cells.len()) {
            return Err(Error::Config("policy tables must be square in the grid size".into()));
        }
        Ok(PeriodicPolicy { cells, tables })
    }

    /// Pure feedback policy `y -> pi(y)` evaluated at the nodes.
    pub fn markov(cells: Cells, per_cell: Vec<DVector<f64>>) -> Result<Self> {
        let tables = vec![per_cell; cells.len()];
        PeriodicPolicy::new(cells, tables)
    }

    pub fn gamma1(model: &FactorModel, k: &ConstraintSet, alpha: f64, cells: Cells) -> Result<Self> {
        let per = cells.nodes().iter().map(|&y| Ok(policy_gamma1(model, k, alpha, y)?.0)).collect::<Result<_>>()?;
        PeriodicPolicy::markov(cells, per)
    }

    pub fn log(model: &FactorModel, k: &ConstraintSet, cells: Cells) -> Result<Self> {
        let per = cells.nodes().iter().map(|&y| Ok(policy_log(model, k, y)?.0)).collect::<Result<_>>()?;
        PeriodicPolicy::markov(cells, per)
    }

    pub fn risk_free(cells: Cells, n: usize) -> Result<Self> {
        let per = vec![DVector::zeros(n); cells.len()];
        PeriodicPolicy::markov(cells, per)
    }

    /// Every portfolio multiplied by `f`.
    pub fn scaled(&self, f: f64) -> Self {
        PeriodicPolicy {
            cells: self.cells.clone(),
            tables: self.tables.iter().map(|t| t.iter().map(|p| p * f).collect()).collect(),
        }
    }

    /// Largest distance of a tabulated portfolio to `K`.
    pub fn max_distance(&self, k: &ConstraintSet) -> f64 {
        self.tables.iter().flatten().map(|p| k.distance(p)).fold(0.0, f64::max)
    }
}

/// Continuation value `V(x, y)` used in `D_n`.
#[derive(Debug, Clone, PartialEq)]
pub enum Continuation {
    /// `e^{-rho alpha gamma tau} A(y) x^{alpha (1 - gamma)} / alpha`.
    Power(ValueGrid),
    /// `A(y) + C log x`.
    Log { a: ValueGrid, c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub paths: usize,
    pub steps_per_period: usize,
    pub periods: usize,
    pub seed: u64,
    pub x0: f64,
    pub y0: f64,
    pub log_cap: f64,
}

impl RolloutConfig {
    pub fn check(&self) -> Result<()> {
        if self.paths == 0 || self.steps_per_period == 0 || self.periods == 0 || !(self.x0 > 0.0) || !self.y0.is_finite() {
            return Err(Error::Config("rollout needs paths, steps, periods >= 1 and x0 > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodStat {
    pub period: usize,
    pub mean: f64,
    pub std_err: f64,
    /// Shift of the mean attributable to the tolerance on `A`.
    pub band: f64,
    pub martingale: bool,
    pub supermartingale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub paths: usize,
    pub periods: usize,
    /// `paths x (periods + 1)` wealth at the evaluation dates.
    pub wealth: Vec<f64>,
    pub factor: Vec<f64>,
    /// `paths x (periods + 1)` values of `D_n`.
    pub d: Vec<f64>,
    pub objective: f64,
    pub objective_se: f64,
    /// Bound on the neglected tail of the objective beyond the last period.
    pub tail_bound: f64,
    /// Mean of `D_N`, an estimate of `V(x0, y0)` for the optimal policy.
    pub value_estimate: f64,
    pub value_se: f64,
    /// Mean of `|dD_n / dA|` per date, for a uniform perturbation of `A`.
    pub sensitivity: Vec<f64>,
}

impl RolloutResult {
    /// Smallest simulated wealth over all paths and dates.
    pub fn min_wealth(&self) -> f64 {
        self.wealth.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// One row per path and date: `path, period, y, wealth, ratio, d`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "period", "y", "wealth", "ratio", "d"])?;
        let np = self.periods + 1;
        for p in 0..self.paths {
            for n in 0..np {
                let (x, y, d) = self.at(p, n);
                let ratio = if n == 0 { String::new() } else { (x / self.wealth[p * np + n - 1]).to_string() };
                w.write_record([p.to_string(), n.to_string(), y.to_string(), x.to_string(), ratio, d.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn at(&self, p: usize, n: usize) -> (f64, f64, f64) {
        let i = p * (self.periods + 1) + n;
        (self.wealth[i], self.factor[i], self.d[i])
    }
}

struct CellCoef {
    b0: f64,
    b1: f64,
    quad: f64,
    w: Vec<f64>,
}

fn moments_of(values: &[f64]) -> Result<Moments> {
    let [m] = pair_moments::<1, _>(values.len(), |p| Ok([values[p]]))?;
    Ok(m)
}

/// Simulates the periodic policy over `periods` evaluation dates and records `D_n`.
pub fn rollout(
    model: &FactorModel,
    spec: &UtilitySpec,
    policy: &PeriodicPolicy,
    cont: &Continuation,
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    cfg.check()?;
    let (rho, tau, gamma) = (spec.rho, spec.tau, spec.gamma);
    let n = model.n;
    let c = &model.coeffs;
    let coef: Vec<Vec<CellCoef>> = policy
        .tables
        .iter()
        .map(|t| {
            t.iter()
                .map(|pi| CellCoef {
                    b0: pi.dot(&model.e0),
                    b1: pi.dot(&model.e1),
                    quad: pi.dot(&(&model.sst * pi)),
                    w: (c.sigma0.transpose() * pi).iter().cloned().collect(),
                })
                .collect()
        })
        .collect();
    let dt = tau / cfg.steps_per_period as f64;
    let np = cfg.periods + 1;
    let reward = |lratio: f64, y: f64| -> f64 {
        match spec.mode {
            UtilityMode::Power { alpha } => (alpha * lratio).exp() * spec.h.eval(y) / alpha,
            UtilityMode::Log => lratio + spec.h.eval(y),
        }
    };
    let continuation = |lx: f64, y: f64| -> f64 {
        match (cont, spec.mode) {
            (Continuation::Power(a), UtilityMode::Power { alpha }) => {
                (-rho * alpha * gamma * tau).exp() * a.eval(y) * (alpha * (1.0 - gamma) * lx).exp() / alpha
            }
            (Continuation::Log { a, c }, _) => a.eval(y) + c * lx,
            _ => f64::NAN,
        }
    };
    let parts = chunked(cfg.paths, |range| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut wealth = Vec::with_capacity(range.len() * np);
        let mut factor = Vec::with_capacity(range.len() * np);
        let mut ds = Vec::with_capacity(range.len() * np);
        let mut dw1 = vec![0.0; n];
        for p in range {
            let mut stream = PathStream::new(cfg.seed, p, dt);
            let mut y = cfg.y0;
            let mut lx = cfg.x0.ln();
            let mut sum = 0.0;
            wealth.push(cfg.x0);
            factor.push(y);
            ds.push(continuation(lx, y));
            for period in 1..np {
                let start = policy.cells.locate(y);
                let l0 = lx;
                for _ in 0..cfg.steps_per_period {
                    let s = c.shape.eval(y);
                    let g = c.scale(s);
                    let cc = &coef[start][policy.cells.locate(y)];
                    let dw2 = stream.step(&mut dw1);
                    let mut diff = 0.0;
                    for i in 0..n {
                        diff += cc.w[i] * dw1[i];
                    }
                    lx += (c.r0 + c.r1 * s + cc.b0 + cc.b1 * s - 0.5 * g * g * cc.quad) * dt + g * diff;
                    y = model.factor_step(y, &dw1, dw2, dt);
                }
                if (lx - cfg.x0.ln()).abs() > cfg.log_cap {
                    return Err(Error::Numerical(format!("|log X| exceeded {} on path {p}", cfg.log_cap)));
                }
                let t = period as f64 * tau;
                let lratio = lx - gamma * (rho * tau + l0);
                sum += (-rho * t).exp() * reward(lratio, y);
                wealth.push(lx.exp());
                factor.push(y);
                ds.push(sum + (-rho * t).exp() * continuation(lx, y));
            }
        }
        Ok((wealth, factor, ds))
    });
    let mut res = RolloutResult {
        paths: cfg.paths,
        periods: cfg.periods,
        wealth: Vec::with_capacity(cfg.paths * np),
        factor: Vec::with_capacity(cfg.paths * np),
        d: Vec::with_capacity(cfg.paths * np),
        objective: 0.0,
        objective_se: 0.0,
        tail_bound: 0.0,
        value_estimate: 0.0,
        value_se: 0.0,
        sensitivity: Vec::with_capacity(np),
    };
    for part in parts {
        let (w, f, d) = part?;
        res.wealth.extend(w);
        res.factor.extend(f);
        res.d.extend(d);
    }
    let last = |v: &Vec<f64>| -> Vec<f64> { (0..cfg.paths).map(|p| v[p * np + cfg.periods]).collect() };
    let d_last = last(&res.d);
    let x_last = last(&res.wealth);
    let objective: Vec<f64> = d_last
        .iter()
        .zip(&x_last)
        .zip(last(&res.factor))
        .map(|((d, x), y)| d - (-rho * cfg.periods as f64 * tau).exp() * continuation(x.ln(), y))
        .collect();
    let obj = moments_of(&objective)?;
    let val = moments_of(&d_last)?;
    res.objective = obj.mean;
    res.objective_se = obj.std_err();
    res.value_estimate = val.mean;
    res.value_se = val.std_err();
    for date in 0..np {
        let disc = (-rho * date as f64 * tau).exp();
        let s = match spec.mode {
            UtilityMode::Power { alpha } => {
                let beta = alpha * (1.0 - gamma);
                let mean = (0..cfg.paths).map(|p| res.wealth[p * np + date].powf(beta)).sum::<f64>() / cfg.paths as f64;
                disc * (-rho * alpha * gamma * tau).exp() / alpha.abs() * mean
            }
            UtilityMode::Log => disc,
        };
        res.sensitivity.push(s);
    }
    let decay = (-rho * cfg.periods as f64 * tau).exp();
    let b = theoretical_bounds(model, spec)?;
    res.tail_bound = match spec.mode {
        UtilityMode::Power { alpha } => {
            let beta = alpha * (1.0 - gamma);
            let coef = (-rho * alpha * gamma * tau).exp() / alpha.abs() * b.lower.abs().max(b.upper.abs());
            let growth = moments_of(&x_last.iter().map(|x| x.powf(beta)).collect::<Vec<_>>())?;
            decay * coef * growth.mean
        }
        UtilityMode::Log => {
            let cst = (1.0 - gamma) / ((rho * tau).exp() - 1.0);
            let lg = moments_of(&x_last.iter().map(|x| x.ln().abs()).collect::<Vec<_>>())?;
            decay * (b.lower.abs().max(b.upper.abs()) + cst * lg.mean)
        }
    };
    Ok(res)
}

/// Mean and standard error of `D_{n+1} - D_n` for every period. With a positive
/// `a_tolerance` the three-standard-error band is widened by the shift that a
/// uniform error of that size in `A` can cause.
pub fn verify_martingale_d(res: &RolloutResult, a_tolerance: f64) -> Result<Vec<PeriodStat>> {
    let np = res.periods + 1;
    (0..res.periods)
        .map(|n| {
            let inc: Vec<f64> = (0..res.paths).map(|p| res.d[p * np + n + 1] - res.d[p * np + n]).collect();
            let m = moments_of(&inc)?;
            let se = m.std_err();
            let band = a_tolerance * (res.sensitivity[n] + res.sensitivity[n + 1]);
            Ok(PeriodStat {
                period: n + 1,
                mean: m.mean,
                std_err: se,
                band,
                martingale: m.mean.abs() <= 3.0 * se + band,
                supermartingale: m.mean <= 3.0 * se + band,
            })
        })
        .collect()
}

/// Bounds on the value function at `x0`.
pub fn value_bounds(model: &FactorModel, spec: &UtilitySpec, x0: f64) -> Result<BoundBox> {
    let b = theoretical_bounds(model, spec)?;
    Ok(match spec.mode {
        UtilityMode::Power { alpha } => {
            let k = (-spec.rho * spec.tau * spec.gamma * alpha).exp() * x0.powf(alpha * (1.0 - spec.gamma)) / alpha;
            if alpha > 0.0 {
                BoundBox { lower: k * b.lower, upper: k * b.upper }
            } else {
                BoundBox { lower: k * b.upper, upper: k * b.lower }
            }
        }
        UtilityMode::Log => {
            let cst = (1.0 - spec.gamma) / ((spec.rho * spec.tau).exp() - 1.0);
            BoundBox { lower: b.lower + cst * x0.ln(), upper: b.upper + cst * x0.ln() }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsCheck {
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `lower <= estimate <= upper` with slack `tolerance`.
pub fn value_bounds_check(model: &FactorModel, spec: &UtilitySpec, x0: f64, estimate: f64, tolerance: f64) -> Result<BoundsCheck> {
    let b = value_bounds(model, spec, x0)?;
    Ok(BoundsCheck {
        lower: b.lower,
        upper: b.upper,
        estimate,
        tolerance,
        passed: b.contains(estimate, tolerance),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSample {
    /// Optimal one-period gross return `X_tau / X_0` per path.
    pub ratios: Vec<f64>,
    pub y_end: Vec<f64>,
    /// Sample mean of `ratio Z / B`.
    pub budget: Moments,
}

/// Samples the optimal one-period ratio `x*(lambda Z / B, Y_tau)` through the dual.
pub fn optimal_ratio_sampler(
    model: &FactorModel,
    k: &ConstraintSet,
    mu_star: &ModifiedUtility,
    ctrl: &DualControl,
    y_start: f64,
    sim: &SimConfig,
) -> Result<RatioSample> {
    let stats = PathStats::build(model, &ctrl.cells, y_start, sim)?;
    let utils: Vec<_> = (0..stats.count).map(|p| mu_star.at(stats.path(p).y_end)).collect();
    let problem = DualProblem { model, k, cells: &ctrl.cells, stats: &stats, utils: &utils };
    let ld = problem.log_deflators(&ctrl.nu, &ctrl.eta)?;
    let ratios = ld
        .iter()
        .zip(&utils)
        .map(|(l, u)| u.inverse_marginal(ctrl.lambda * l.exp()))
        .collect::<Result<Vec<_>>>()?;
    let [budget] = pair_moments::<1, _>(ld.len(), |p| Ok([ratios[p] * ld[p].exp()]))?;
    Ok(RatioSample {
        ratios,
        y_end: (0..stats.count).map(|p| stats.path(p).y_end).collect(),
        budget,
    })
}
