//! Brownian streams, factor paths and the log-Euler wealth/density simulator.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FactorModel;
use crate::constraints::{ConstraintSet, Delta};
use crate::error::{Error, Result};
use crate::reduce::chunked;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub count: usize,
    pub steps: usize,
    pub horizon: f64,
}

impl SimConfig {
    pub fn new(seed: u64, count: usize, steps: usize, horizon: f64) -> Result<Self> {
        let cfg = SimConfig { seed, count, steps, horizon };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.count == 0 || self.steps == 0 || !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "simulation needs count >= 1, steps >= 1 and a positive horizon, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SimConfig { seed, ..*self }
    }
}

/// Gaussian increments of one path.
///
/// Paths `2k` and `2k + 1` share the ChaCha stream `k` of `seed`; the odd path
/// negates the traded Brownian motion `W1` (antithetic pair) and keeps `W2`.
/// Adding paths never changes existing ones.
pub struct PathStream {
    rng: ChaCha8Rng,
    sign: f64,
    sqdt: f64,
}

impl PathStream {
    pub fn new(seed: u64, path: usize, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((path / 2) as u64);
        PathStream {
            rng,
            sign: if path % 2 == 0 { 1.0 } else { -1.0 },
            sqdt: dt.sqrt(),
        }
    }

    /// Fills `dw1` and returns `dw2` for the next step.
    #[inline]
    pub fn step(&mut self, dw1: &mut [f64]) -> f64 {
        for x in dw1.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *x = self.sign * self.sqdt * z;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sqdt * z
    }
}

impl FactorModel {
    /// One Euler step of the factor.
    #[inline]
    pub fn factor_step(&self, y: f64, dw1: &[f64], dw2: f64, dt: f64) -> f64 {
        let mut qw = 0.0;
        for (qi, wi) in self.q.iter().zip(dw1) {
            qw += qi * wi;
        }
        y + self.factor.drift(y) * dt + self.factor.beta * (qw + self.q_perp * dw2)
    }
}

/// Materialized factor paths with their Brownian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub count: usize,
    pub n: usize,
    pub steps: usize,
    /// `count x (steps + 1)` factor values, row-major by path.
    pub y_paths: Vec<f64>,
    /// `count x steps x n`.
    pub w1_increments: Vec<f64>,
    /// `count x steps`.
    pub w2_increments: Vec<f64>,
}

impl PathSet {
    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y_paths[path * (self.steps + 1) + step]
    }

    pub fn w1(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.steps + step) * self.n;
        &self.w1_increments[i..i + self.n]
    }

    pub fn w2(&self, path: usize, step: usize) -> f64 {
        self.w2_increments[path * self.steps + step]
    }

    /// One row per path and step: `path,step,t,y,dw1_1..dw1_n,dw2`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".into(), "t".into(), "y".into()];
        header.extend((1..=self.n).map(|i| format!("dw1_{i}")));
        header.push("dw2".into());
        w.write_record(&header)?;
        for p in 0..self.count {
            for t in 0..self.steps {
                let mut row = vec![p.to_string(), t.to_string(), (t as f64 * self.dt).to_string(), self.y(p, t).to_string()];
                row.extend(self.w1(p, t).iter().map(|v| v.to_string()));
                row.push(self.w2(p, t).to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Euler paths of the factor started at `y0`.
pub fn simulate_factor(model: &FactorModel, y0: f64, cfg: &SimConfig) -> Result<PathSet> {
    cfg.check()?;
    let n = model.n;
    let dt = cfg.dt();
    let parts = chunked(cfg.count, |range| {
        let mut ys = Vec::with_capacity(range.len() * (cfg.steps + 1));
        let mut w1 = Vec::with_capacity(range.len() * cfg.steps * n);
        let mut w2 = Vec::with_capacity(range.len() * cfg.steps);
        let mut dw1 = vec![0.0; n];
        for p in range {
            let mut stream = PathStream::new(cfg.seed, p, dt);
            let mut y = y0;
            ys.push(y);
            for _ in 0..cfg.steps {
                let dw2 = stream.step(&mut dw1);
                w1.extend_from_slice(&dw1);
                w2.push(dw2);
                y = model.factor_step(y, &dw1, dw2, dt);
                ys.push(y);
            }
        }
        (ys, w1, w2)
    });
    let mut set = PathSet {
        seed: cfg.seed,
        dt,
        horizon: cfg.horizon,
        count: cfg.count,
        n,
        steps: cfg.steps,
        y_paths: Vec::with_capacity(cfg.count * (cfg.steps + 1)),
        w1_increments: Vec::with_capacity(cfg.count * cfg.steps * n),
        w2_increments: Vec::with_capacity(cfg.count * cfg.steps),
    };
    for (ys, w1, w2) in parts {
        set.y_paths.extend(ys);
        set.w1_increments.extend(w1);
        set.w2_increments.extend(w2);
    }
    Ok(set)
}

/// Terminal values of the log-Euler wealth, density and fictitious bond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WealthDensity {
    pub log_x: f64,
    pub log_z: f64,
    pub log_b: f64,
}

impl WealthDensity {
    pub fn x(&self) -> f64 {
        self.log_x.exp()
    }

    /// `Z / B`.
    pub fn deflator(&self) -> f64 {
        (self.log_z - self.log_b).exp()
    }
}

/// Feedback maps evaluated at the current factor value.
pub type Feedback<'a> = &'a (dyn Fn(f64) -> DVector<f64> + Sync);
pub type ScalarFeedback<'a> = &'a (dyn Fn(f64) -> f64 + Sync);

/// Simulates `log X`, `log Z^{nu,eta}` and `log B^nu` along the stored paths
/// with `X_0 = Z_0 = B_0 = 1`.
pub fn simulate_wealth_density(
    model: &FactorModel,
    k: &ConstraintSet,
    paths: &PathSet,
    policy: Feedback<'_>,
    nu: Feedback<'_>,
    eta: ScalarFeedback<'_>,
    log_cap: f64,
) -> Result<Vec<WealthDensity>> {
    let dt = paths.dt;
    let parts = chunked(paths.count, |range| -> Result<Vec<WealthDensity>> {
        let mut out = Vec::with_capacity(range.len());
        for p in range {
            let (mut lx, mut lz, mut lb) = (0.0, 0.0, 0.0);
            for t in 0..paths.steps {
                let y = paths.y(p, t);
                let dw1 = DVector::from_column_slice(paths.w1(p, t));
                let dw2 = paths.w2(p, t);
                let r = model.r(y);
                let sigma = model.sigma(y);
                let pi = policy(y);
                let spi = sigma.transpose() * &pi;
                lx += (r + pi.dot(&model.excess(y)) - 0.5 * spi.norm_squared()) * dt + spi.dot(&dw1);
                let v = nu(y);
                let delta = match k.support(&v) {
                    Delta::Finite(d) => d,
                    Delta::Infinite => {
                        return Err(Error::Numerical(format!("nu({y}) is outside the barrier cone")))
                    }
                };
                let th = model.sharpe_theta(y)? + model.sigma_inv(y) * &v;
                let e = eta(y);
                lb += (r + delta) * dt;
                lz += -th.dot(&dw1) + e * dw2 - 0.5 * (th.norm_squared() + e * e) * dt;
                if lx.abs() > log_cap {
                    return Err(Error::Numerical(format!(
                        "|log X| exceeded {log_cap} on path {p}; the policy explodes"
                    )));
                }
            }
            out.push(WealthDensity { log_x: lx, log_z: lz, log_b: lb });
        }
        Ok(out)
    });
    let mut all = Vec::with_capacity(paths.count);
    for part in parts {
        all.extend(part?);
    }
    Ok(all)
}
