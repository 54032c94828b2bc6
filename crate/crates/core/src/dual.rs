//! Dual problem over cell-constant constraint and completion parameters.
//!
//! For a control `(nu, eta, lambda)` the deflator `Z^{nu,eta}_tau / B^nu_tau`
//! is evaluated from the per-cell path records and the dual functional
//! `L = E[Phi(lambda Z / B, Y_tau)] + lambda` is minimized by coordinate descent.

use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;

use crate::constraints::{nu_star_log, nu_star_weighted, ConstraintSet, Delta};
use crate::error::{Error, Result};
use crate::market::{Cells, FactorModel, PathStats, StatLayout};
use crate::reduce::{chunked, pair_moments, Moments};
use crate::utility::LocalUtility;

const LAMBDA_TOL: f64 = 1e-12;
const LAMBDA_MAX_ITER: usize = 200;
const ETA_BACKTRACK: usize = 12;

/// Feedback dual control: `nu` and `eta` constant on the cells around `nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualControl {
    pub cells: Cells,
    pub nu: Vec<DVector<f64>>,
    pub eta: Vec<f64>,
    pub lambda: f64,
}

impl DualControl {
    pub fn zero(cells: &Cells, n: usize) -> Self {
        DualControl {
            cells: cells.clone(),
            nu: vec![DVector::zeros(n); cells.len()],
            eta: vec![0.0; cells.len()],
            lambda: 1.0,
        }
    }

    pub fn nu_at(&self, y: f64) -> &DVector<f64> {
        &self.nu[self.cells.locate(y)]
    }

    pub fn eta_at(&self, y: f64) -> f64 {
        self.eta[self.cells.locate(y)]
    }

    /// Uniform bounds `(max |nu|, max |eta|, max delta(nu))`; `None` if some `nu` leaves the barrier cone.
    pub fn sup_norms(&self, k: &ConstraintSet) -> Option<(f64, f64, f64)> {
        let mut out = (0.0f64, 0.0f64, 0.0f64);
        for (nu, eta) in self.nu.iter().zip(&self.eta) {
            let d = k.support(nu).finite()?;
            out = (out.0.max(nu.norm()), out.1.max(eta.abs()), out.2.max(d));
        }
        Some(out)
    }

    /// Header record `lambda,<value>`, then `y,nu_1..nu_n,eta` per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["lambda".to_string(), format!("{:e}", self.lambda)])?;
        let n = self.nu.first().map_or(0, |v| v.len());
        let mut header = vec!["y".to_string()];
        header.extend((1..=n).map(|i| format!("nu_{i}")));
        header.push("eta".into());
        w.write_record(&header)?;
        for ((y, nu), eta) in self.cells.nodes().iter().zip(&self.nu).zip(&self.eta) {
            let mut row = vec![format!("{y:e}")];
            row.extend(nu.iter().map(|v| format!("{v:e}")));
            row.push(format!("{eta:e}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualEvaluation {
    pub value: f64,
    pub std_err: f64,
    pub budget: f64,
    pub paths_used: usize,
}

/// `sigma(y)^{-1} (mu(y) - r(y) 1 + nu)`.
pub fn theta_nu(model: &FactorModel, y: f64, nu: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(model.sharpe_theta(y)? + model.sigma_inv(y) * nu)
}

/// Coefficients of one cell's contribution to `log(Z / B)`.
#[derive(Debug, Clone, Copy)]
struct CellTerms {
    vt0: f64,
    vt1: f64,
    vv: f64,
    delta: f64,
    eta: f64,
}

/// Frozen reduced paths for one start value plus the terminal utilities.
pub struct DualProblem<'a> {
    pub model: &'a FactorModel,
    pub k: &'a ConstraintSet,
    pub cells: &'a Cells,
    pub stats: &'a PathStats,
    pub utils: &'a [LocalUtility],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConfig {
    pub sweeps: usize,
    pub rel_tol: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig { sweeps: 30, rel_tol: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOutcome {
    pub control: DualControl,
    pub evaluation: DualEvaluation,
    pub sweeps: usize,
    pub converged: bool,
}

impl<'a> DualProblem<'a> {
    fn terms(&self, nu: &[DVector<f64>], eta: &[f64]) -> Result<Vec<CellTerms>> {
        let m = self.model;
        nu.iter()
            .zip(eta)
            .map(|(nu, &eta)| {
                let delta = match self.k.support(nu) {
                    Delta::Finite(d) => d,
                    Delta::Infinite => return Err(Error::Domain(format!("nu = {nu} is outside the barrier cone"))),
                };
                let v = &m.sigma0_inv * nu;
                Ok(CellTerms { vt0: v.dot(&m.theta0), vt1: v.dot(&m.theta1), vv: v.norm_squared(), delta, eta })
            })
            .collect()
    }

    /// Per-path `log(Z_tau / B_tau)`.
    pub fn log_deflators(&self, nu: &[DVector<f64>], eta: &[f64]) -> Result<Vec<f64>> {
        let terms = self.terms(nu, eta)?;
        let vs: Vec<DVector<f64>> = nu.iter().map(|nu| &self.model.sigma0_inv * nu).collect();
        let layout = self.stats.layout;
        let n = layout.n;
        let parts = chunked(self.stats.count, |range| {
            range
                .map(|p| {
                    let view = self.stats.path(p);
                    let mut ld = -view.r_int;
                    for (j, rec) in view.entries() {
                        let c = &terms[j];
                        let wig = &rec[layout.wig()..layout.wig() + n];
                        let mut vw = 0.0;
                        for i in 0..n {
                            vw += vs[j][i] * wig[i];
                        }
                        ld -= rec[StatLayout::THW]
                            + vw
                            + 0.5 * rec[StatLayout::THTH]
                            + c.vt0 * rec[StatLayout::IG2]
                            + c.vt1 * rec[StatLayout::IG2S]
                            + 0.5 * c.vv * rec[StatLayout::IG2]
                            + c.delta * rec[StatLayout::T];
                        ld += c.eta * rec[StatLayout::W2] - 0.5 * c.eta * c.eta * rec[StatLayout::T];
                    }
                    ld
                })
                .collect::<Vec<_>>()
        });
        Ok(parts.into_iter().flatten().collect())
    }

    /// `(E[x* D], E[x* D / RRA])` at multiplier `lambda`.
    fn budget(&self, ld: &[f64], lambda: f64) -> Result<(f64, f64)> {
        let [b, s] = pair_moments::<2, _>(ld.len(), |p| {
            let d = ld[p].exp();
            let u = &self.utils[p];
            let x = u.inverse_marginal(lambda * d)?;
            Ok([x * d, x * d / u.rra(x)])
        })?;
        Ok((b.mean, s.mean))
    }

    /// Multiplier with `E[x*(lambda Z / B) Z / B] = 1`, by safeguarded Newton in `log lambda`.
    pub fn solve_lambda(&self, ld: &[f64]) -> Result<f64> {
        // exact when the continuation term vanishes, a starting point otherwise
        let [g] = pair_moments::<1, _>(ld.len(), |p| {
            let u = &self.utils[p];
            Ok([((ld[p] - u.h.ln()) / (u.alpha - 1.0) + ld[p]).exp()])
        })?;
        let alpha = self.utils.first().map_or(0.5, |u| u.alpha);
        let mut l = (1.0 - alpha) * g.mean.ln();
        if !l.is_finite() {
            l = 0.0;
        }
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..LAMBDA_MAX_ITER {
            let (b, s) = self.budget(ld, l.exp())?;
            let f = b.ln();
            if (b - 1.0).abs() <= LAMBDA_TOL {
                return Ok(l.exp());
            }
            if f > 0.0 {
                lo = lo.max(l);
            } else {
                hi = hi.min(l);
            }
            let slope = -s / b;
            let mut next = l - f / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = match (lo.is_finite(), hi.is_finite()) {
                    (true, true) => 0.5 * (lo + hi),
                    (true, false) => lo + 1.0,
                    (false, true) => hi - 1.0,
                    (false, false) => l,
                };
            }
            if (next - l).abs() <= 4.0 * f64::EPSILON * (1.0 + l.abs()) {
                return Ok(next.exp());
            }
            l = next;
        }
        Err(Error::Numerical("multiplier search did not converge".into()))
    }

    /// Estimates `L(nu, eta, lambda)` and the budget statistic.
    pub fn evaluate(&self, ld: &[f64], lambda: f64) -> Result<DualEvaluation> {
        let [phi, b] = pair_moments::<2, _>(ld.len(), |p| {
            let d = ld[p].exp();
            let (phi, x) = self.utils[p].legendre(lambda * d)?;
            Ok([phi, x * d])
        })?;
        Ok(DualEvaluation {
            value: phi.mean + lambda,
            std_err: phi.std_err(),
            budget: b.mean,
            paths_used: ld.len(),
        })
    }

    /// Value with `lambda` re-solved.
    fn profile(&self, nu: &[DVector<f64>], eta: &[f64]) -> Result<(Vec<f64>, f64, DualEvaluation)> {
        let ld = self.log_deflators(nu, eta)?;
        let lambda = self.solve_lambda(&ld)?;
        let ev = self.evaluate(&ld, lambda)?;
        Ok((ld, lambda, ev))
    }

    /// Dual functional for a full control (its stored `lambda` is used as is).
    pub fn dual_objective(&self, ctrl: &DualControl) -> Result<DualEvaluation> {
        let ld = self.log_deflators(&ctrl.nu, &ctrl.eta)?;
        self.evaluate(&ld, ctrl.lambda)
    }

    /// Per cell: `sum x* u T`, `sum x* u T RRA`, `dL/deta`, `d2L/deta2`.
    fn cell_sums(&self, ld: &[f64], lambda: f64, eta: &[f64]) -> Result<Vec<[f64; 4]>> {
        let cells = eta.len();
        let parts = chunked(ld.len(), |range| -> Result<Vec<[f64; 4]>> {
            let mut acc = vec![[0.0; 4]; cells];
            for p in range {
                let u = lambda * ld[p].exp();
                let lu = &self.utils[p];
                let x = lu.inverse_marginal(u)?;
                let rra = lu.rra(x);
                let xu = x * u;
                for (j, rec) in self.stats.path(p).entries() {
                    let t = rec[StatLayout::T];
                    let g = rec[StatLayout::W2] - eta[j] * t;
                    let a = &mut acc[j];
                    a[0] += xu * t;
                    a[1] += xu * t * rra;
                    a[2] -= xu * g;
                    a[3] += xu * ((1.0 / rra - 1.0) * g * g + t);
                }
            }
            Ok(acc)
        });
        let mut total = vec![[0.0; 4]; cells];
        for part in parts {
            for (t, a) in total.iter_mut().zip(part?) {
                for i in 0..4 {
                    t[i] += a[i];
                }
            }
        }
        let scale = 1.0 / ld.len() as f64;
        for t in total.iter_mut() {
            for v in t.iter_mut() {
                *v *= scale;
            }
        }
        Ok(total)
    }

    fn node_nu(&self, risk: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.cells
            .nodes()
            .iter()
            .zip(risk)
            .map(|(&y, &r)| nu_star_weighted(self.k, &self.model.sharpe_theta(y)?, &self.model.sigma(y), 2.0 * r))
            .collect()
    }

    /// Coordinate descent over `nu`, `eta` and `lambda`.
    pub fn minimize(&self, cfg: &DualConfig) -> Result<DualOutcome> {
        let cells = self.cells.len();
        let alpha = self.utils.first().map_or(0.5, |u| u.alpha);
        let mut nu = self.node_nu(&vec![1.0 - alpha; cells])?;
        let mut eta = vec![0.0; cells];
        let (mut ld, mut lambda, mut ev) = self.profile(&nu, &eta)?;
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < cfg.sweeps {
            sweeps += 1;
            let before = ev.value;

            let sums = self.cell_sums(&ld, lambda, &eta)?;
            let risk: Vec<f64> = sums
                .iter()
                .map(|s| if s[0] > 0.0 { s[1] / s[0] } else { 1.0 - alpha })
                .collect();
            let cand = self.node_nu(&risk)?;
            for t in [1.0, 0.5, 0.25] {
                let trial: Vec<DVector<f64>> = nu.iter().zip(&cand).map(|(a, b)| a * (1.0 - t) + b * t).collect();
                let (l2, lam2, ev2) = self.profile(&trial, &eta)?;
                if ev2.value < ev.value {
                    (nu, ld, lambda, ev) = (trial, l2, lam2, ev2);
                    break;
                }
            }

            let sums = self.cell_sums(&ld, lambda, &eta)?;
            let step: Vec<f64> = sums
                .iter()
                .map(|s| if s[3] > 0.0 { -s[2] / s[3] } else { -s[2] })
                .collect();
            if step.iter().any(|s| *s != 0.0) {
                let mut t = 1.0;
                for _ in 0..ETA_BACKTRACK {
                    let trial: Vec<f64> = eta.iter().zip(&step).map(|(e, s)| e + t * s).collect();
                    let (l2, lam2, ev2) = self.profile(&nu, &trial)?;
                    if ev2.value < ev.value {
                        (eta, ld, lambda, ev) = (trial, l2, lam2, ev2);
                        break;
                    }
                    t *= 0.5;
                }
            }

            if before - ev.value <= cfg.rel_tol * ev.value.abs().max(1e-300) {
                converged = true;
                break;
            }
        }
        Ok(DualOutcome {
            control: DualControl { cells: self.cells.clone(), nu, eta, lambda },
            evaluation: ev,
            sweeps,
            converged,
        })
    }
}

/// Growth rate bound of the logarithmic problem for a cell-constant `nu`:
/// per-path `int r + sum_cells (delta T + |theta^nu|^2 dt / 2)`.
pub fn log_dual_growth(model: &FactorModel, k: &ConstraintSet, stats: &PathStats, nu: &[DVector<f64>]) -> Result<Moments> {
    let problem_terms: Vec<CellTerms> = nu
        .iter()
        .map(|nu| {
            let delta = k
                .support(nu)
                .finite()
                .ok_or_else(|| Error::Domain(format!("nu = {nu} is outside the barrier cone")))?;
            let v = &model.sigma0_inv * nu;
            Ok(CellTerms { vt0: v.dot(&model.theta0), vt1: v.dot(&model.theta1), vv: v.norm_squared(), delta, eta: 0.0 })
        })
        .collect::<Result<_>>()?;
    let [m] = pair_moments::<1, _>(stats.count, |p| {
        let view = stats.path(p);
        let mut g = view.r_int;
        for (j, rec) in view.entries() {
            let c = &problem_terms[j];
            g += c.delta * rec[StatLayout::T]
                + 0.5 * rec[StatLayout::THTH]
                + c.vt0 * rec[StatLayout::IG2]
                + c.vt1 * rec[StatLayout::IG2S]
                + 0.5 * c.vv * rec[StatLayout::IG2];
        }
        Ok([g])
    })?;
    Ok(m)
}

/// Dual control of the logarithmic problem: `nu = nu*_log` per node, `eta = 0`, `lambda = 1 / x`.
pub fn log_dual_control(model: &FactorModel, k: &ConstraintSet, cells: &Cells, x0: f64) -> Result<DualControl> {
    let nu = cells
        .nodes()
        .iter()
        .map(|&y| nu_star_log(k, &model.sharpe_theta(y)?, &model.sigma(y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DualControl {
        cells: cells.clone(),
        eta: vec![0.0; nu.len()],
        nu,
        lambda: 1.0 / x0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktNode {
    pub y: f64,
    pub distance_to_k: f64,
    pub complementarity: f64,
    pub feasible: bool,
    pub complementary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub passed: bool,
    pub tol: f64,
    pub nodes: Vec<KktNode>,
}

/// Checks `pi(y) in K` and `delta(nu(y)) + pi(y)^T nu(y) = 0` at every node.
pub fn kkt_check(k: &ConstraintSet, ctrl: &DualControl, policy: &[DVector<f64>], tol: f64) -> KktReport {
    let nodes: Vec<KktNode> = ctrl
        .cells
        .nodes()
        .iter()
        .zip(&ctrl.nu)
        .zip(policy)
        .map(|((&y, nu), pi)| {
            let distance_to_k = k.distance(pi);
            let complementarity = match k.support(nu) {
                Delta::Finite(d) => (d + pi.dot(nu)).abs(),
                Delta::Infinite => f64::INFINITY,
            };
            KktNode {
                y,
                distance_to_k,
                complementarity,
                feasible: distance_to_k <= tol,
                complementary: complementarity <= tol,
            }
        })
        .collect();
    KktReport { passed: nodes.iter().all(|n| n.feasible && n.complementary), tol, nodes }
}
