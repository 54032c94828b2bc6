//! Stochastic factor market: coefficients, standing assumptions and path simulation.

mod cells;
mod coefficients;
mod paths;

pub use cells::{Cells, PathStats, PathView, StatLayout};
pub use coefficients::{Certificate, Coefficients, Shape};
pub use paths::{
    simulate_factor, simulate_wealth_density, PathSet, PathStream, SimConfig, WealthDensity,
};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::utility::{UtilityMode, UtilitySpec};

/// Factor dynamics `dY = kappa (mean - Y) dt + beta dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorDynamics {
    pub kappa: f64,
    pub mean: f64,
    pub beta: f64,
}

impl FactorDynamics {
    #[inline]
    pub fn drift(&self, y: f64) -> f64 {
        self.kappa * (self.mean - y)
    }

    /// Standard deviation used to size the factor grid: stationary when
    /// mean-reverting, otherwise the spread accumulated over `horizon`.
    pub fn spread(&self, horizon: f64) -> f64 {
        if self.kappa > 0.0 {
            self.beta.abs() / (2.0 * self.kappa).sqrt()
        } else {
            self.beta.abs() * horizon.sqrt()
        }
    }
}

/// Global bounds entering the standing assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub r_bar: f64,
    pub r_lower: f64,
    pub m0: f64,
    pub kappa0: f64,
}

#[derive(Debug, Clone)]
pub struct FactorModel {
    pub n: usize,
    pub coeffs: Coefficients,
    pub factor: FactorDynamics,
    pub q: DVector<f64>,
    pub bounds: Bounds,
    pub(crate) sigma0_inv: DMatrix<f64>,
    pub(crate) sst: DMatrix<f64>,
    pub(crate) theta0: DVector<f64>,
    pub(crate) theta1: DVector<f64>,
    pub(crate) e0: DVector<f64>,
    pub(crate) e1: DVector<f64>,
    pub(crate) q_perp: f64,
}

impl FactorModel {
    /// Builds a model; missing bounds are taken from the family certificate.
    pub fn new(
        coeffs: Coefficients,
        factor: FactorDynamics,
        q: DVector<f64>,
        bounds: Option<Bounds>,
    ) -> Result<Self> {
        coeffs.check()?;
        let n = coeffs.dim();
        if q.len() != n {
            return Err(Error::Config(format!("q has length {} but n = {n}", q.len())));
        }
        let qn = q.norm_squared();
        if !(qn <= 1.0 + 1e-12) {
            return Err(Error::Config(format!("|q| = {} exceeds 1", qn.sqrt())));
        }
        if factor.beta == 0.0 || !factor.beta.is_finite() {
            return Err(Error::Config("factor volatility beta must be nonzero".into()));
        }
        if !(factor.kappa >= 0.0) || !factor.mean.is_finite() {
            return Err(Error::Config("factor mean reversion needs kappa >= 0".into()));
        }
        let sigma0_inv = coeffs
            .sigma0
            .clone()
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularSigma(f64::NAN))?;
        let ones = DVector::from_element(n, 1.0);
        let e0 = &coeffs.mu0 - &ones * coeffs.r0;
        let e1 = &coeffs.mu1 - &ones * coeffs.r1;
        let theta0 = &sigma0_inv * &e0;
        let theta1 = &sigma0_inv * &e1;
        let sst = &coeffs.sigma0 * coeffs.sigma0.transpose();
        let cert = coeffs.certificate(&sigma0_inv);
        let bounds = bounds.unwrap_or(Bounds {
            r_bar: cert.r_sup,
            r_lower: cert.r_inf,
            m0: cert.theta_sq_sup,
            kappa0: cert.kappa0,
        });
        Ok(FactorModel {
            n,
            coeffs,
            factor,
            q_perp: (1.0 - qn).max(0.0).sqrt(),
            q,
            bounds,
            sigma0_inv,
            sst,
            theta0,
            theta1,
            e0,
            e1,
        })
    }

    pub fn certificate(&self) -> Certificate {
        self.coeffs.certificate(&self.sigma0_inv)
    }

    pub fn r(&self, y: f64) -> f64 {
        self.coeffs.r(y)
    }

    pub fn mu(&self, y: f64) -> DVector<f64> {
        self.coeffs.mu(y)
    }

    pub fn sigma(&self, y: f64) -> DMatrix<f64> {
        self.coeffs.sigma(y)
    }

    pub fn sigma_inv(&self, y: f64) -> DMatrix<f64> {
        &self.sigma0_inv / self.coeffs.scale(self.coeffs.shape.eval(y))
    }

    /// Excess drift `mu(y) - r(y) 1`.
    pub fn excess(&self, y: f64) -> DVector<f64> {
        let s = self.coeffs.shape.eval(y);
        &self.e0 + &self.e1 * s
    }

    /// Sharpe ratio `sigma(y)^{-1} (mu(y) - r(y) 1)`.
    pub fn sharpe_theta(&self, y: f64) -> Result<DVector<f64>> {
        let s = self.coeffs.shape.eval(y);
        let g = self.coeffs.scale(s);
        if !(g > 0.0) {
            return Err(Error::SingularSigma(y));
        }
        Ok((&self.theta0 + &self.theta1 * s) / g)
    }

    /// `zeta(x) = r_bar x + x M0 / (2 (1 - x))` for `x < 1`.
    pub fn zeta(&self, x: f64) -> Result<f64> {
        zeta(self.bounds.r_bar, self.bounds.m0, x)
    }
}

pub fn zeta(r_bar: f64, m0: f64, x: f64) -> Result<f64> {
    if !(x < 1.0) {
        return domain(format!("zeta needs x < 1, got {x}"));
    }
    Ok(r_bar * x + x * m0 / (2.0 * (1.0 - x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    NotFalsified,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub lhs: f64,
    pub rhs: f64,
    pub worst_y: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }
}

fn sampled_worst(samples: &[f64], f: impl Fn(f64) -> f64) -> (f64, Option<f64>) {
    let mut worst = f64::NEG_INFINITY;
    let mut at = None;
    for &y in samples {
        let v = f(y);
        if v > worst || at.is_none() {
            worst = v;
            at = Some(y);
        }
    }
    (worst, at)
}

/// Checks an upper bound `value(y) <= bound` via certificate and samples.
fn bound_check(
    name: &str,
    certified_sup: Option<f64>,
    bound: f64,
    samples: &[f64],
    value: impl Fn(f64) -> f64,
) -> Check {
    let slack = 1e-12 * bound.abs().max(1.0);
    let (worst, at) = sampled_worst(samples, value);
    let sample_ok = at.is_none() || worst <= bound + slack;
    let status = match certified_sup {
        _ if !sample_ok => Status::Fail,
        Some(sup) if sup <= bound + slack => Status::Pass,
        Some(_) => Status::Fail,
        None => Status::NotFalsified,
    };
    let lhs = match certified_sup {
        Some(sup) => sup.max(worst),
        None => worst,
    };
    Check {
        name: name.to_string(),
        status,
        lhs,
        rhs: bound,
        worst_y: at,
        detail: format!(
            "sup = {lhs} ({}), bound = {bound}",
            if certified_sup.is_some() { "certified" } else { "sampled" }
        ),
    }
}

fn flip(mut c: Check) -> Check {
    c.lhs = -c.lhs;
    c.rhs = -c.rhs;
    c.detail = format!("inf = {}, bound = {}", c.lhs, c.rhs);
    c
}

/// Checks the standing assumptions on the model and the utility.
pub fn validate_model(model: &FactorModel, spec: &UtilitySpec, y_samples: &[f64]) -> ValidationReport {
    let cert = model.certificate();
    let b = model.bounds;
    let mut checks = Vec::new();

    match spec.mode {
        UtilityMode::Power { alpha } => {
            let x = alpha * (1.0 - spec.gamma);
            let z = model.zeta(x).unwrap_or(f64::INFINITY);
            let rhs = z.max(0.0);
            checks.push(Check {
                name: "rho > max(zeta(alpha(1-gamma)), 0)".into(),
                status: if spec.rho > rhs { Status::Pass } else { Status::Fail },
                lhs: spec.rho,
                rhs,
                worst_y: None,
                detail: format!("rho = {} vs max(zeta({x}) = {z}, 0) = {rhs}", spec.rho),
            });
            let za = model.zeta(alpha).unwrap_or(f64::INFINITY);
            checks.push(Check {
                name: "zeta(alpha) finite".into(),
                status: if za.is_finite() { Status::Pass } else { Status::Fail },
                lhs: za,
                rhs: f64::INFINITY,
                worst_y: None,
                detail: format!("zeta({alpha}) = {za}"),
            });
        }
        UtilityMode::Log => checks.push(Check {
            name: "rho > 0".into(),
            status: if spec.rho > 0.0 { Status::Pass } else { Status::Fail },
            lhs: spec.rho,
            rhs: 0.0,
            worst_y: None,
            detail: format!("rho = {}", spec.rho),
        }),
    }

    let qn = model.q.norm();
    checks.push(Check {
        name: "|q| <= 1".into(),
        status: if qn <= 1.0 + 1e-12 { Status::Pass } else { Status::Fail },
        lhs: qn,
        rhs: 1.0,
        worst_y: None,
        detail: format!("|q| = {qn}"),
    });
    checks.push(bound_check("r <= r_bar", Some(cert.r_sup), b.r_bar, y_samples, |y| model.r(y)));
    checks.push(flip(bound_check("r >= r_lower", Some(-cert.r_inf), -b.r_lower, y_samples, |y| -model.r(y))));
    checks.push(bound_check("|theta|^2 <= M0", Some(cert.theta_sq_sup), b.m0, y_samples, |y| {
        model.sharpe_theta(y).map(|t| t.norm_squared()).unwrap_or(f64::INFINITY)
    }));
    let mut kappa = flip(bound_check(
        "sigma sigma^T >= kappa0 I",
        Some(-cert.kappa0),
        -b.kappa0,
        y_samples,
        |y| {
            let s = model.sigma(y);
            -(&s * s.transpose())
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        },
    ));
    if !(b.kappa0 > 0.0) {
        kappa.status = Status::Fail;
        kappa.detail = format!("kappa0 = {} must be positive", b.kappa0);
    }
    checks.push(kappa);

    let (h_lo, h_hi) = spec.h.range();
    checks.push(Check {
        name: "0 < m < 1".into(),
        status: if spec.m > 0.0 && spec.m < 1.0 { Status::Pass } else { Status::Fail },
        lhs: spec.m,
        rhs: 1.0,
        worst_y: None,
        detail: format!("m = {}", spec.m),
    });
    checks.push(bound_check("h <= 1", Some(h_hi), 1.0, y_samples, |y| spec.h.eval(y)));
    checks.push(flip(bound_check("h >= m", Some(-h_lo), -spec.m, y_samples, |y| -spec.h.eval(y))));

    let passed = checks.iter().all(|c| c.status != Status::Fail);
    ValidationReport { passed, checks }
}
