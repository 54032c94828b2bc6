//! Convex constraint sets: support function, barrier cone, projection and the
//! pointwise dual minimizations over the constraint parameter.

use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PROJECTION_TOL: f64 = 1e-10;
const PROJECTION_MAX_ITER: usize = 100_000;
const NU_STATIONARITY: f64 = 1e-12;
const NU_MAX_ITER: usize = 200_000;

/// `normal^T pi <= offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    Unconstrained,
    /// `pi >= 0`.
    NoShort,
    /// `1^T pi <= a`.
    BorrowCap { a: f64 },
    /// `pi >= 0`, `1^T pi <= a`.
    NoShortAndBorrowCap { a: f64 },
    /// `lo <= pi <= hi` componentwise; infinite entries allowed.
    Box { lo: DVector<f64>, hi: DVector<f64> },
    HalfspaceIntersection(Vec<Halfspace>),
}

/// Value of the support function, with `+inf` kept as a separate case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delta {
    Finite(f64),
    Infinite,
}

impl Delta {
    pub fn finite(self) -> Option<f64> {
        match self {
            Delta::Finite(v) => Some(v),
            Delta::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Delta::Finite(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub kind: ConstraintKind,
    pub n: usize,
    /// Lower bound of the support function (zero because every kind contains the origin).
    pub delta0: f64,
}

impl ConstraintSet {
    pub fn new(kind: ConstraintKind, n: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if n == 0 {
            return bad("constraint dimension must be positive".into());
        }
        match &kind {
            ConstraintKind::BorrowCap { a } | ConstraintKind::NoShortAndBorrowCap { a } => {
                if !(*a >= 0.0) || !a.is_finite() {
                    return bad(format!("borrowing cap a = {a} must be finite and nonnegative"));
                }
            }
            ConstraintKind::Box { lo, hi } => {
                if lo.len() != n || hi.len() != n {
                    return bad("box bounds have the wrong length".into());
                }
                if lo.iter().zip(hi.iter()).any(|(l, h)| !(*l <= 0.0 && 0.0 <= *h)) {
                    return bad("box must contain the origin (lo <= 0 <= hi)".into());
                }
            }
            ConstraintKind::HalfspaceIntersection(hs) => {
                if hs.is_empty() {
                    return bad("halfspace intersection needs at least one halfspace".into());
                }
                for h in hs {
                    if h.normal.len() != n || h.normal.norm() == 0.0 || !h.normal.iter().all(|v| v.is_finite()) {
                        return bad("halfspace normals must be finite, nonzero and of length n".into());
                    }
                    if !(h.offset >= 0.0) || !h.offset.is_finite() {
                        return bad("halfspace offsets must be finite and nonnegative so that 0 is in K".into());
                    }
                }
            }
            ConstraintKind::Unconstrained | ConstraintKind::NoShort => {}
        }
        Ok(ConstraintSet { kind, n, delta0: 0.0 })
    }

    /// `delta(x | K) = sup_{pi in K} (-pi^T x)`.
    pub fn support(&self, x: &DVector<f64>) -> Delta {
        use ConstraintKind::*;
        match &self.kind {
            Unconstrained => {
                if x.iter().all(|v| *v == 0.0) {
                    Delta::Finite(0.0)
                } else {
                    Delta::Infinite
                }
            }
            NoShort => {
                if x.iter().all(|v| *v >= 0.0) {
                    Delta::Finite(0.0)
                } else {
                    Delta::Infinite
                }
            }
            BorrowCap { a } => {
                let c = -x[0];
                if c >= 0.0 && x.iter().all(|v| *v == x[0]) {
                    Delta::Finite(a * c)
                } else {
                    Delta::Infinite
                }
            }
            NoShortAndBorrowCap { a } => {
                let worst = x.iter().fold(0.0f64, |m, v| m.max(-v));
                Delta::Finite(a * worst)
            }
            Box { lo, hi } => {
                let mut total = 0.0;
                for i in 0..self.n {
                    let xi = x[i];
                    let term = if xi > 0.0 {
                        -lo[i] * xi
                    } else if xi < 0.0 {
                        -hi[i] * xi
                    } else {
                        0.0
                    };
                    if !term.is_finite() {
                        return Delta::Infinite;
                    }
                    total += term;
                }
                Delta::Finite(total)
            }
            HalfspaceIntersection(hs) => halfspace_support(hs, x),
        }
    }

    pub fn in_barrier_cone(&self, x: &DVector<f64>) -> bool {
        self.support(x).is_finite()
    }

    /// Euclidean projection onto `K`.
    pub fn project(&self, pi: &DVector<f64>) -> DVector<f64> {
        use ConstraintKind::*;
        match &self.kind {
            Unconstrained => pi.clone(),
            NoShort => pi.map(|v| v.max(0.0)),
            BorrowCap { a } => {
                let ones = DVector::from_element(self.n, 1.0);
                project_halfspace(pi, &ones, *a)
            }
            NoShortAndBorrowCap { a } => {
                let clipped = pi.map(|v| v.max(0.0));
                if clipped.sum() <= *a {
                    clipped
                } else {
                    project_simplex(pi, *a)
                }
            }
            Box { lo, hi } => DVector::from_fn(self.n, |i, _| pi[i].clamp(lo[i], hi[i])),
            HalfspaceIntersection(hs) => dykstra(hs, pi),
        }
    }

    pub fn distance(&self, pi: &DVector<f64>) -> f64 {
        (pi - self.project(pi)).norm()
    }

    /// `argmin_x t delta(x) + |x - v|^2 / 2`; the result always lies in the barrier cone.
    pub fn prox_support(&self, v: &DVector<f64>, t: f64) -> DVector<f64> {
        use ConstraintKind::*;
        match &self.kind {
            Unconstrained => DVector::zeros(self.n),
            NoShort => v.map(|x| x.max(0.0)),
            BorrowCap { a } => {
                let c = (-(v.sum() + t * a) / self.n as f64).max(0.0);
                DVector::from_element(self.n, -c)
            }
            Box { lo, hi } => DVector::from_fn(self.n, |i, _| {
                let x = v[i];
                if x > -t * lo[i] {
                    x + t * lo[i]
                } else if x < -t * hi[i] {
                    x + t * hi[i]
                } else {
                    0.0
                }
            }),
            // Moreau: prox of t * support of (-K) is v - t P_{-K}(v / t) = v + t P_K(-v / t).
            NoShortAndBorrowCap { .. } | HalfspaceIntersection(_) => {
                if t == 0.0 {
                    return v.clone();
                }
                v + self.project(&(-v / t)) * t
            }
        }
    }
}

/// Support function through its dual: `min sum l_i b_i` over `l >= 0` with
/// `sum l_i n_i = -x`. The equality is solved to the LP tolerance, so points
/// on the boundary of the barrier cone up to rounding stay finite.
fn halfspace_support(hs: &[Halfspace], x: &DVector<f64>) -> Delta {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let weights: Vec<_> = hs.iter().map(|h| lp.add_var(h.offset, (0.0, f64::INFINITY))).collect();
    for i in 0..x.len() {
        let row: Vec<_> = weights.iter().zip(hs).map(|(w, h)| (*w, h.normal[i])).collect();
        lp.add_constraint(&row, ComparisonOp::Eq, -x[i]);
    }
    match lp.solve() {
        Ok(SolveOutcome::Solution(s)) => Delta::Finite(s.objective().max(0.0)),
        _ => Delta::Infinite,
    }
}

fn project_halfspace(z: &DVector<f64>, normal: &DVector<f64>, offset: f64) -> DVector<f64> {
    let excess = normal.dot(z) - offset;
    if excess <= 0.0 {
        z.clone()
    } else {
        z - normal * (excess / normal.norm_squared())
    }
}

/// Projection onto `{x >= 0, 1^T x = a}` by sorting.
fn project_simplex(v: &DVector<f64>, a: f64) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().cloned().collect();
    u.sort_by(|x, y| y.total_cmp(x));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let cand = (cum - a) / (j + 1) as f64;
        if uj - cand > 0.0 {
            shift = cand;
        }
    }
    v.map(|x| (x - shift).max(0.0))
}

/// Dykstra's alternating projections onto an intersection of halfspaces.
fn dykstra(hs: &[Halfspace], pi: &DVector<f64>) -> DVector<f64> {
    if hs.iter().all(|h| h.normal.dot(pi) <= h.offset) {
        return pi.clone();
    }
    let mut x = pi.clone();
    let mut corr: Vec<DVector<f64>> = vec![DVector::zeros(pi.len()); hs.len()];
    for _ in 0..PROJECTION_MAX_ITER {
        let prev = x.clone();
        for (h, p) in hs.iter().zip(corr.iter_mut()) {
            let z = &x + &*p;
            let y = project_halfspace(&z, &h.normal, h.offset);
            *p = z - &y;
            x = y;
        }
        if (&x - prev).amax() <= PROJECTION_TOL {
            break;
        }
    }
    x
}

pub fn support_delta(k: &ConstraintSet, x: &DVector<f64>) -> Delta {
    k.support(x)
}

pub fn in_barrier_cone(k: &ConstraintSet, x: &DVector<f64>) -> bool {
    k.in_barrier_cone(x)
}

pub fn project_k(k: &ConstraintSet, pi: &DVector<f64>) -> DVector<f64> {
    k.project(pi)
}

/// `|theta + sigma^{-1} nu|^2 + weight * delta(nu)`, infinite outside the barrier cone.
pub fn nu_objective(k: &ConstraintSet, theta: &DVector<f64>, sigma_inv: &DMatrix<f64>, weight: f64, nu: &DVector<f64>) -> f64 {
    match k.support(nu) {
        Delta::Finite(d) => (theta + sigma_inv * nu).norm_squared() + weight * d,
        Delta::Infinite => f64::INFINITY,
    }
}

/// Unique minimizer of `|theta + sigma^{-1} nu|^2 + weight * delta(nu)` over the
/// barrier cone, by accelerated proximal gradient with step `1/L`.
pub fn nu_star_weighted(k: &ConstraintSet, theta: &DVector<f64>, sigma: &DMatrix<f64>, weight: f64) -> Result<DVector<f64>> {
    if !(weight >= 0.0) {
        return Err(Error::Domain(format!("support weight {weight} must be nonnegative")));
    }
    let n = theta.len();
    if matches!(k.kind, ConstraintKind::Unconstrained) {
        return Ok(DVector::zeros(n));
    }
    let s_inv = sigma.clone().try_inverse().ok_or(Error::SingularSigma(f64::NAN))?;
    let h = s_inv.transpose() * &s_inv;
    let lip = 2.0 * h.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max);
    let step = 1.0 / lip;
    let lin = s_inv.transpose() * theta * 2.0;
    let grad = |x: &DVector<f64>| &lin + &h * x * 2.0;
    let pg = |x: &DVector<f64>| k.prox_support(&(x - grad(x) * step), weight * step);

    let mut x = DVector::zeros(n);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let scale = 1.0 + lin.amax();
    for _ in 0..NU_MAX_ITER {
        let x_new = pg(&y);
        if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            // momentum points uphill: restart
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        x = x_new;
        t = t_new;
        if (&x - pg(&x)).amax() * lip <= NU_STATIONARITY * scale {
            return Ok(x);
        }
    }
    Err(Error::Numerical("nu* solver hit its iteration cap".into()))
}

/// Constraint parameter of the logarithmic example: weight 2.
pub fn nu_star_log(k: &ConstraintSet, theta: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    nu_star_weighted(k, theta, sigma, 2.0)
}

/// Constraint parameter of the `gamma = 1` power example: weight `2 (1 - alpha)`.
pub fn nu_star_power_gamma1(k: &ConstraintSet, theta: &DVector<f64>, sigma: &DMatrix<f64>, alpha: f64) -> Result<DVector<f64>> {
    if !(alpha < 1.0) || alpha == 0.0 {
        return Err(Error::Domain(format!("alpha = {alpha} must lie in (-inf, 0) or (0, 1)")));
    }
    nu_star_weighted(k, theta, sigma, 2.0 * (1.0 - alpha))
}

/// Portfolio of the fictitious market `sigma^{-T} theta^nu / risk_aversion`.
pub fn fictitious_portfolio(theta: &DVector<f64>, sigma: &DMatrix<f64>, nu: &DVector<f64>, risk_aversion: f64) -> Result<DVector<f64>> {
    let s_inv = sigma.clone().try_inverse().ok_or(Error::SingularSigma(f64::NAN))?;
    Ok(s_inv.transpose() * (theta + &s_inv * nu) / risk_aversion)
}
