//! One-period primal search over portfolios that are constant on the cells of
//! the factor grid.

use nalgebra::{DMatrix, DVector};

use crate::constraints::{fictitious_portfolio, nu_star_weighted, ConstraintKind, ConstraintSet};
use crate::error::{Error, Result};
use crate::market::{Cells, FactorModel, PathStats, StatLayout};
use crate::reduce::{chunked, pair_moments, Moments};
use crate::utility::LocalUtility;

const QP_MAX_ITER: usize = 5_000;
const QP_TOL: f64 = 1e-14;
const BACKTRACK: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub max_iter: usize,
    pub step_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_iter: 200, step_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct PrimalResult {
    /// Portfolio per cell of the grid.
    pub pi: Vec<DVector<f64>>,
    /// Sample mean of the terminal reward over antithetic pairs.
    pub value: Moments,
    pub iterations: usize,
}

/// Myopic starting portfolio per cell with relative risk aversion `risk`.
pub fn myopic_policy(model: &FactorModel, k: &ConstraintSet, cells: &Cells, risk: f64) -> Result<Vec<DVector<f64>>> {
    cells
        .nodes()
        .iter()
        .map(|&y| {
            let theta = model.sharpe_theta(y)?;
            let sigma = model.sigma(y);
            let nu = nu_star_weighted(k, &theta, &sigma, 2.0 * risk)?;
            Ok(k.project(&fictitious_portfolio(&theta, &sigma, &nu, risk)?))
        })
        .collect()
}

/// Per-record drift and exposure data `a = e0 T + e1 S1 + sigma0 WG` and `G2`.
pub(crate) struct PrimalData<'a> {
    stats: &'a PathStats,
    n: usize,
    a: Vec<f64>,
    sst: DMatrix<f64>,
}

impl<'a> PrimalData<'a> {
    pub(crate) fn new(model: &FactorModel, stats: &'a PathStats) -> Self {
        let n = model.n;
        let mut a = vec![0.0; stats.entries() * n];
        for p in 0..stats.count {
            let view = stats.path(p);
            for (k, (_, rec)) in view.entries().enumerate() {
                let wg = &rec[stats.layout.wg()..stats.layout.wg() + n];
                let out = &mut a[(view.first + k) * n..(view.first + k + 1) * n];
                for i in 0..n {
                    let mut s = model.e0[i] * rec[StatLayout::T] + model.e1[i] * rec[StatLayout::S1];
                    for j in 0..n {
                        s += model.coeffs.sigma0[(i, j)] * wg[j];
                    }
                    out[i] = s;
                }
            }
        }
        PrimalData { stats, n, a, sst: model.sst.clone() }
    }

    /// `log X_tau` of path `p` for per-cell portfolios `pi` with `quad[j] = pi_j^T sigma0 sigma0^T pi_j`.
    #[inline]
    fn log_x(&self, p: usize, pi: &[DVector<f64>], quad: &[f64]) -> f64 {
        let view = self.stats.path(p);
        let mut lx = view.r_int;
        for (k, (j, rec)) in view.entries().enumerate() {
            let a = &self.a[(view.first + k) * self.n..(view.first + k + 1) * self.n];
            let mut lin = 0.0;
            for i in 0..self.n {
                lin += pi[j][i] * a[i];
            }
            lx += lin - 0.5 * rec[StatLayout::G2] * quad[j];
        }
        lx
    }

    fn quads(&self, pi: &[DVector<f64>]) -> Vec<f64> {
        pi.iter().map(|p| p.dot(&(&self.sst * p))).collect()
    }

    /// Per-path `log X` for a policy.
    pub(crate) fn log_wealth(&self, pi: &[DVector<f64>]) -> Vec<f64> {
        let quad = self.quads(pi);
        (0..self.stats.count).map(|p| self.log_x(p, pi, &quad)).collect()
    }

    /// Mean terminal reward over antithetic pairs.
    pub(crate) fn objective(&self, utils: &[LocalUtility], pi: &[DVector<f64>]) -> Result<Moments> {
        let quad = self.quads(pi);
        let [m] = pair_moments::<1, _>(self.stats.count, |p| {
            let v = utils[p].profile(self.log_x(p, pi, &quad)).0;
            if v.is_finite() {
                Ok([v])
            } else {
                Err(Error::Numerical(format!("terminal reward overflow on path {p}")))
            }
        })?;
        Ok(m)
    }

    /// Gradient and Hessian of the mean reward in the visited-cell variables.
    fn derivatives(&self, utils: &[LocalUtility], pi: &[DVector<f64>], vars: &[Option<usize>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let quad = self.quads(pi);
        let sp: Vec<DVector<f64>> = pi.iter().map(|p| &self.sst * p).collect();
        let parts = chunked(self.stats.count, |range| {
            let mut grad = DVector::zeros(dim);
            let mut hess = DMatrix::zeros(dim, dim);
            let mut g2w = vec![0.0; pi.len()];
            let mut idx = Vec::new();
            let mut gs: Vec<f64> = Vec::new();
            for p in range {
                let view = self.stats.path(p);
                let (_, mx, rra) = utils[p].profile(self.log_x(p, pi, &quad));
                idx.clear();
                gs.clear();
                for (k, (j, rec)) in view.entries().enumerate() {
                    let v = vars[j].expect("visited cell has a variable");
                    let a = &self.a[(view.first + k) * n..(view.first + k + 1) * n];
                    let g2 = rec[StatLayout::G2];
                    for i in 0..n {
                        let g = a[i] - g2 * sp[j][i];
                        grad[v * n + i] += mx * g;
                        idx.push(v * n + i);
                        gs.push(g);
                    }
                    g2w[j] += mx * g2;
                }
                let c = mx * (1.0 - rra);
                for (x, &ix) in idx.iter().enumerate() {
                    for (z, &iz) in idx.iter().enumerate() {
                        hess[(ix, iz)] += c * gs[x] * gs[z];
                    }
                }
            }
            (grad, hess, g2w)
        });
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        let mut g2w = vec![0.0; pi.len()];
        for (g, h, w) in parts {
            grad += g;
            hess += h;
            for (t, s) in g2w.iter_mut().zip(w) {
                *t += s;
            }
        }
        let scale = 1.0 / self.stats.count as f64;
        for (j, v) in vars.iter().enumerate() {
            if let Some(v) = v {
                for i in 0..n {
                    for l in 0..n {
                        hess[(v * n + i, v * n + l)] -= g2w[j] * self.sst[(i, l)];
                    }
                }
            }
        }
        (grad * scale, hess * scale)
    }
}

fn gather(pi: &[DVector<f64>], vars: &[Option<usize>], n: usize, dim: usize) -> DVector<f64> {
    let mut x = DVector::zeros(dim);
    for (j, v) in vars.iter().enumerate() {
        if let Some(v) = v {
            x.rows_mut(v * n, n).copy_from(&pi[j]);
        }
    }
    x
}

fn scatter(x: &DVector<f64>, base: &[DVector<f64>], vars: &[Option<usize>], n: usize) -> Vec<DVector<f64>> {
    base.iter()
        .zip(vars)
        .map(|(p, v)| match v {
            Some(v) => x.rows(v * n, n).into_owned(),
            None => p.clone(),
        })
        .collect()
}

fn project_blocks(k: &ConstraintSet, x: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = x.clone();
    for b in 0..x.len() / n {
        let p = k.project(&x.rows(b * n, n).into_owned());
        out.rows_mut(b * n, n).copy_from(&p);
    }
    out
}

/// `argmax_{z in K^cells} g^T (z - x) - (z - x)^T Q (z - x) / 2` for positive definite `Q`.
fn newton_target(k: &ConstraintSet, x: &DVector<f64>, g: &DVector<f64>, q: &DMatrix<f64>, n: usize) -> Option<DVector<f64>> {
    let chol = q.clone().cholesky()?;
    let free = x + chol.solve(g);
    if matches!(k.kind, ConstraintKind::Unconstrained) {
        return Some(free);
    }
    let lip = q.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max);
    let step = 1.0 / lip;
    let grad = |z: &DVector<f64>| q * (z - x) - g;
    let mut z = project_blocks(k, x, n);
    let mut w = z.clone();
    let mut t = 1.0f64;
    for _ in 0..QP_MAX_ITER {
        let z_new = project_blocks(k, &(&w - grad(&w) * step), n);
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        w = &z_new + (&z_new - &z) * ((t - 1.0) / t_new);
        let moved = (&z_new - &z).amax();
        z = z_new;
        t = t_new;
        if moved <= QP_TOL * (1.0 + z.amax()) {
            break;
        }
    }
    Some(z)
}

/// Maximizes the sample mean of `h_A(X_tau, Y_tau)` over cell-constant
/// portfolios in `K` by projected Newton steps with backtracking and a
/// projected-gradient fallback.
pub(crate) fn search_policy(
    k: &ConstraintSet,
    data: &PrimalData<'_>,
    utils: &[LocalUtility],
    start: &[DVector<f64>],
    cfg: &SearchConfig,
) -> Result<PrimalResult> {
    let n = data.n;
    let visited = data.stats.visited(start.len());
    let mut vars = vec![None; start.len()];
    let mut dim = 0;
    for (j, v) in visited.iter().enumerate() {
        if *v {
            vars[j] = Some(dim / n);
            dim += n;
        }
    }
    let mut pi: Vec<DVector<f64>> = start.iter().map(|p| k.project(p)).collect();
    let mut best = data.objective(utils, &pi)?;
    let mut iterations = 0;
    if dim == 0 {
        return Ok(PrimalResult { pi, value: best, iterations });
    }
    let mut x = gather(&pi, &vars, n, dim);
    while iterations < cfg.max_iter {
        iterations += 1;
        let (g, h) = data.derivatives(utils, &pi, &vars, dim);
        let mut q = -h;
        let eig = q.symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, u), v| (l.min(*v), u.max(*v)));
        let floor = 1e-10 * hi.max(1e-300);
        if lo < floor {
            for i in 0..dim {
                q[(i, i)] += floor - lo;
            }
        }
        let mut moved = None;
        if let Some(z) = newton_target(k, &x, &g, &q, n) {
            moved = line_search(data, utils, &pi, &vars, n, &x, &(z - &x), best.mean)?;
        }
        if moved.is_none() {
            let lip = q.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max);
            let d = project_blocks(k, &(&x + &g / lip), n) - &x;
            moved = line_search(data, utils, &pi, &vars, n, &x, &d, best.mean)?;
        }
        let Some((x_new, m)) = moved else { break };
        let step = (&x_new - &x).amax();
        let gain = m.mean - best.mean;
        x = x_new;
        pi = scatter(&x, &pi, &vars, n);
        best = m;
        if step <= cfg.step_tol || gain <= 1e-15 * best.mean.abs() {
            break;
        }
    }
    Ok(PrimalResult { pi, value: best, iterations })
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    data: &PrimalData<'_>,
    utils: &[LocalUtility],
    base: &[DVector<f64>],
    vars: &[Option<usize>],
    n: usize,
    x: &DVector<f64>,
    d: &DVector<f64>,
    current: f64,
) -> Result<Option<(DVector<f64>, Moments)>> {
    if d.amax() == 0.0 {
        return Ok(None);
    }
    let mut t = 1.0;
    for _ in 0..BACKTRACK {
        let cand = x + d * t;
        match data.objective(utils, &scatter(&cand, base, vars, n)) {
            Ok(m) if m.mean > current => return Ok(Some((cand, m))),
            Ok(_) | Err(Error::Numerical(_)) => {}
            Err(e) => return Err(e),
        }
        t *= 0.5;
    }
    Ok(None)
}
