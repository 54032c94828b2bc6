//! Built-in coefficient families.
//!
//! Every family is written as
//! `r(y) = r0 + r1 s(y)`, `mu(y) = mu0 + mu1 s(y)`, `sigma(y) = (1 + v s(y)) sigma0`
//! for a scalar shape `s`. The image of `s` is a known interval, which gives
//! exact global bounds on the rate, the Sharpe ratio and the non-degeneracy
//! constant without sampling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// `s = 0`.
    Constant,
    /// `s(y) = clamp(y, y_min, y_max)`.
    Affine { y_min: f64, y_max: f64 },
    /// `s(y) = tanh((y - center) / width)`.
    Sigmoid { center: f64, width: f64 },
}

impl Shape {
    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            Shape::Constant => 0.0,
            Shape::Affine { y_min, y_max } => y.clamp(y_min, y_max),
            Shape::Sigmoid { center, width } => ((y - center) / width).tanh(),
        }
    }

    /// Closed interval containing the image of `s`.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            Shape::Constant => (0.0, 0.0),
            Shape::Affine { y_min, y_max } => (y_min, y_max),
            Shape::Sigmoid { .. } => (-1.0, 1.0),
        }
    }

    fn check(&self) -> Result<()> {
        match *self {
            Shape::Constant => Ok(()),
            Shape::Affine { y_min, y_max } if y_min.is_finite() && y_max.is_finite() && y_min <= y_max => Ok(()),
            Shape::Sigmoid { center, width } if center.is_finite() && width.is_finite() && width > 0.0 => Ok(()),
            _ => Err(Error::Config(format!("invalid coefficient shape {self:?}"))),
        }
    }
}

/// Analytic global bounds of a coefficient family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub r_sup: f64,
    pub r_inf: f64,
    pub theta_sq_sup: f64,
    pub kappa0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub shape: Shape,
    pub r0: f64,
    pub r1: f64,
    pub mu0: DVector<f64>,
    pub mu1: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub vol_mod: f64,
}

impl Coefficients {
    pub fn constant(r: f64, mu: DVector<f64>, sigma: DMatrix<f64>) -> Self {
        let n = mu.len();
        Coefficients {
            shape: Shape::Constant,
            r0: r,
            r1: 0.0,
            mu0: mu,
            mu1: DVector::zeros(n),
            sigma0: sigma,
            vol_mod: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.shape.check()?;
        let n = self.dim();
        if n == 0 || self.mu1.len() != n || self.sigma0.nrows() != n || self.sigma0.ncols() != n {
            return Err(Error::Config(format!(
                "coefficient dimensions disagree: mu0 {}, mu1 {}, sigma0 {}x{}",
                n,
                self.mu1.len(),
                self.sigma0.nrows(),
                self.sigma0.ncols()
            )));
        }
        let finite = [self.r0, self.r1, self.vol_mod].iter().all(|v| v.is_finite())
            && self.mu0.iter().chain(self.mu1.iter()).all(|v| v.is_finite())
            && self.sigma0.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("non-finite coefficient".into()));
        }
        let (lo, hi) = self.shape.range();
        if 1.0 + self.vol_mod * lo <= 0.0 || 1.0 + self.vol_mod * hi <= 0.0 {
            return Err(Error::Config(format!(
                "volatility modulation {} makes sigma vanish on the shape range",
                self.vol_mod
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn scale(&self, s: f64) -> f64 {
        1.0 + self.vol_mod * s
    }

    pub fn r(&self, y: f64) -> f64 {
        self.r0 + self.r1 * self.shape.eval(y)
    }

    pub fn mu(&self, y: f64) -> DVector<f64> {
        let s = self.shape.eval(y);
        &self.mu0 + &self.mu1 * s
    }

    pub fn sigma(&self, y: f64) -> DMatrix<f64> {
        &self.sigma0 * self.scale(self.shape.eval(y))
    }

    /// Exact bounds over the shape range.
    ///
    /// The Sharpe norm `|a + b s| / (1 + v s)` is quasi-convex in `s`, so its
    /// supremum over an interval sits at an endpoint.
    pub fn certificate(&self, sigma0_inv: &DMatrix<f64>) -> Certificate {
        let (lo, hi) = self.shape.range();
        let ones = DVector::from_element(self.dim(), 1.0);
        let a = sigma0_inv * (&self.mu0 - &ones * self.r0);
        let b = sigma0_inv * (&self.mu1 - &ones * self.r1);
        let theta_sq = |s: f64| (&a + &b * s).norm_squared() / self.scale(s).powi(2);
        let sst = &self.sigma0 * self.sigma0.transpose();
        let eig_min = sst
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Certificate {
            r_sup: self.r0 + (self.r1 * lo).max(self.r1 * hi),
            r_inf: self.r0 + (self.r1 * lo).min(self.r1 * hi),
            theta_sq_sup: theta_sq(lo).max(theta_sq(hi)),
            kappa0: eig_min * self.scale(lo).powi(2).min(self.scale(hi).powi(2)),
        }
    }
}
