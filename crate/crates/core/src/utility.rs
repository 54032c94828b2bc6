//! Modified utility `h_A(x, y) = x^a h(y) / a + A(y) x^{a(1 - g)} / a`, its
//! marginal, inverse marginal and convex conjugate.

use crate::error::{domain, Error, Result};
use crate::grid::ValueGrid;

const INVERSE_MAX_ITER: usize = 200;

/// Evaluation weight `h(y)` with values in `[m, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum HFunction {
    Constant(f64),
    /// `lo + (hi - lo) (1 + tanh((y - center) / width)) / 2`.
    Sigmoid { lo: f64, hi: f64, center: f64, width: f64 },
}

impl HFunction {
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            HFunction::Constant(c) => c,
            HFunction::Sigmoid { lo, hi, center, width } => {
                lo + (hi - lo) * 0.5 * (1.0 + ((y - center) / width).tanh())
            }
        }
    }

    /// Closed interval containing the image.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            HFunction::Constant(c) => (c, c),
            HFunction::Sigmoid { lo, hi, .. } => (lo.min(hi), lo.max(hi)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityMode {
    Power { alpha: f64 },
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    pub mode: UtilityMode,
    pub gamma: f64,
    pub rho: f64,
    pub tau: f64,
    pub m: f64,
    pub h: HFunction,
}

impl UtilitySpec {
    pub fn new(mode: UtilityMode, gamma: f64, rho: f64, tau: f64, m: f64, h: HFunction) -> Result<Self> {
        if let UtilityMode::Power { alpha } = mode {
            if !(alpha < 1.0) || alpha == 0.0 || !alpha.is_finite() {
                return Err(Error::Config(format!("alpha = {alpha} must lie in (-inf, 0) or (0, 1)")));
            }
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma = {gamma} must lie in (0, 1]")));
        }
        if !(tau > 0.0) || !tau.is_finite() || !rho.is_finite() {
            return Err(Error::Config(format!("need tau > 0 and finite rho, got tau = {tau}, rho = {rho}")));
        }
        if !m.is_finite() {
            return Err(Error::Config("m must be finite".into()));
        }
        if let HFunction::Sigmoid { width, .. } = h {
            if !(width > 0.0) {
                return Err(Error::Config("sigmoid width must be positive".into()));
            }
        }
        Ok(UtilitySpec { mode, gamma, rho, tau, m, h })
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.mode {
            UtilityMode::Power { alpha } => Some(alpha),
            UtilityMode::Log => None,
        }
    }

    pub fn power_alpha(&self) -> Result<f64> {
        self.alpha()
            .ok_or_else(|| Error::Config("operation needs power utility".into()))
    }
}

/// `h_A` frozen at one factor value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalUtility {
    pub alpha: f64,
    pub gamma: f64,
    pub h: f64,
    pub a: f64,
}

impl LocalUtility {
    #[inline]
    pub fn beta(&self) -> f64 {
        self.alpha * (1.0 - self.gamma)
    }

    #[inline]
    fn c2(&self) -> f64 {
        self.a * (1.0 - self.gamma)
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let lx = x.ln();
        (self.h * (self.alpha * lx).exp() + self.a * (self.beta() * lx).exp()) / self.alpha
    }

    /// `(h_A(x), x h_A'(x), relative risk aversion)` at `x = e^lx`.
    #[inline]
    pub fn profile(&self, lx: f64) -> (f64, f64, f64) {
        let p1 = self.h * (self.alpha * lx).exp();
        let p2 = if self.a == 0.0 { 0.0 } else { self.a * (self.beta() * lx).exp() };
        let m = p1 + (1.0 - self.gamma) * p2;
        let rra = ((1.0 - self.alpha) * p1 + (1.0 - self.beta()) * (1.0 - self.gamma) * p2) / m;
        ((p1 + p2) / self.alpha, m, rra)
    }

    /// Both marginal terms at `x`.
    #[inline]
    fn terms(&self, lx: f64) -> (f64, f64) {
        let t1 = self.h * ((self.alpha - 1.0) * lx).exp();
        let t2 = if self.c2() == 0.0 { 0.0 } else { self.c2() * ((self.beta() - 1.0) * lx).exp() };
        (t1, t2)
    }

    #[inline]
    pub fn marginal(&self, x: f64) -> f64 {
        let (t1, t2) = self.terms(x.ln());
        t1 + t2
    }

    #[inline]
    pub fn second(&self, x: f64) -> f64 {
        let (t1, t2) = self.terms(x.ln());
        ((self.alpha - 1.0) * t1 + (self.beta() - 1.0) * t2) / x
    }

    /// Arrow-Pratt relative risk aversion `-x h_A'' / h_A'`.
    #[inline]
    pub fn rra(&self, x: f64) -> f64 {
        let (t1, t2) = self.terms(x.ln());
        ((1.0 - self.alpha) * t1 + (1.0 - self.beta()) * t2) / (t1 + t2)
    }

    /// `h_A(x) - x h_A'(x)`.
    #[inline]
    pub fn ell(&self, x: f64) -> f64 {
        let lx = x.ln();
        (1.0 / self.alpha - 1.0) * self.h * (self.alpha * lx).exp()
            + (1.0 / self.alpha - (1.0 - self.gamma)) * self.a * (self.beta() * lx).exp()
    }

    /// Solves `h_A'(x) = u` by Newton's method in `log x` inside the bracket
    /// given by the two power terms. `log h_A'(e^z)` is convex and decreasing in
    /// `z`, so iterates started at the left end of the bracket increase
    /// monotonically to the root.
    pub fn inverse_marginal(&self, u: f64) -> Result<f64> {
        if !(u > 0.0) || !u.is_finite() {
            return domain(format!("inverse marginal needs u > 0, got {u}"));
        }
        let lu = u.ln();
        let lh = self.h.ln();
        let z1 = (lu - lh) / (self.alpha - 1.0);
        if self.c2() == 0.0 {
            return Ok(z1.exp());
        }
        let beta = self.beta();
        let lc = self.c2().ln();
        let z2 = (lu - lc) / (beta - 1.0);
        let ln2 = std::f64::consts::LN_2;
        let mut lo = z1.max(z2);
        let mut hi = (z1 + ln2 / (1.0 - self.alpha)).max(z2 + ln2 / (1.0 - beta));
        let f = |z: f64| {
            let a = lh + (self.alpha - 1.0) * z;
            let b = lc + (beta - 1.0) * z;
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let val = m + (ea + eb).ln() - lu;
            let slope = ((self.alpha - 1.0) * ea + (beta - 1.0) * eb) / (ea + eb);
            (val, slope)
        };
        let mut z = lo;
        for _ in 0..INVERSE_MAX_ITER {
            let (fz, df) = f(z);
            if fz > 0.0 {
                lo = lo.max(z);
            } else {
                hi = hi.min(z);
            }
            if fz.abs() <= 1e-14 {
                return Ok(z.exp());
            }
            let mut next = z - fz / df;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - z).abs() <= 1e-15 * (1.0 + z.abs()) {
                return Ok(next.exp());
            }
            z = next;
        }
        Err(Error::Numerical(format!("inverse marginal did not converge at u = {u}")))
    }

    /// Convex conjugate `Phi(u) = sup_x h_A(x) - u x` and its maximizer.
    pub fn legendre(&self, u: f64) -> Result<(f64, f64)> {
        let x = self.inverse_marginal(u)?;
        Ok((self.ell(x), x))
    }

    /// `d x*(u) / du = 1 / h_A''(x*)`.
    #[inline]
    pub fn dx_du(&self, x: f64) -> f64 {
        1.0 / self.second(x)
    }
}

/// Conjugate of the logarithm: `Phi(u) = -log u - 1`, `x* = 1 / u`.
pub fn log_legendre(u: f64) -> Result<(f64, f64)> {
    if !(u > 0.0) {
        return domain(format!("log conjugate needs u > 0, got {u}"));
    }
    Ok((-u.ln() - 1.0, 1.0 / u))
}

/// `h_A` with a grid-valued continuation function `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedUtility {
    pub spec: UtilitySpec,
    pub a: ValueGrid,
    alpha: f64,
}

impl ModifiedUtility {
    pub fn new(spec: &UtilitySpec, a: ValueGrid) -> Result<Self> {
        let alpha = spec.power_alpha()?;
        if !a.is_nonnegative() {
            return domain("A must be nonnegative");
        }
        Ok(ModifiedUtility { spec: spec.clone(), a, alpha })
    }

    #[inline]
    pub fn at(&self, y: f64) -> LocalUtility {
        LocalUtility {
            alpha: self.alpha,
            gamma: self.spec.gamma,
            h: self.spec.h.eval(y),
            a: self.a.eval(y),
        }
    }

    pub fn h_a(&self, x: f64, y: f64) -> Result<f64> {
        positive(x)?;
        Ok(self.at(y).value(x))
    }

    pub fn marginal(&self, x: f64, y: f64) -> Result<f64> {
        positive(x)?;
        Ok(self.at(y).marginal(x))
    }

    pub fn inverse_marginal(&self, u: f64, y: f64) -> Result<f64> {
        self.at(y).inverse_marginal(u)
    }

    pub fn legendre(&self, u: f64, y: f64) -> Result<(f64, f64)> {
        self.at(y).legendre(u)
    }

    pub fn ell(&self, x: f64, y: f64) -> Result<f64> {
        positive(x)?;
        Ok(self.at(y).ell(x))
    }

    /// Growth constants `(kappa1, rho1)` with `0 < h_A(x) <= kappa1 (1 + x^rho1)`, for `alpha in (0, 1)`.
    pub fn growth_constants(&self) -> Option<(f64, f64)> {
        (self.alpha > 0.0).then(|| (2.0 / self.alpha * self.a.sup().max(1.0), self.alpha))
    }

    /// `max(r^{alpha - 1}, r^{alpha (1 - gamma) - 1})`, which bounds `h_A'(r x) / h_A'(x)` for `r > 1`.
    pub fn scaled_marginal_factor(&self, ratio: f64) -> f64 {
        let beta = self.alpha * (1.0 - self.spec.gamma);
        ratio.powf(self.alpha - 1.0).max(ratio.powf(beta - 1.0))
    }
}

fn positive(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        domain(format!("wealth must be positive, got {x}"))
    }
}
