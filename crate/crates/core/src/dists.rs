//! Scalar Gaussian and Gamma distributions: KL divergences, moments,
//! natural parameters, and the Gaussian moments of a rectified input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, std_normal_cdf, std_normal_pdf};

/// Univariate normal distribution parameterized by mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::InvalidParameter(format!("mean {mean} is not finite")));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance {variance} must be positive and finite"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn precision(&self) -> f64 {
        1.0 / self.variance
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * ((2.0 * std::f64::consts::PI * self.variance).ln() + d * d / self.variance)
    }
}

/// Gamma distribution in the shape/rate parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gamma1D {
    pub shape: f64,
    pub rate: f64,
}

impl Gamma1D {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma shape {shape} and rate {rate} must be positive and finite"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }
}

/// Canonical form of a Gaussian: `eta = mean / variance`, `lambda = 1 / variance`.
///
/// `lambda` may be negative: ratios of Gaussian densities are still of this
/// form even when they are not normalizable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaturalGaussian {
    pub eta: f64,
    pub lambda: f64,
}

impl std::ops::Add for NaturalGaussian {
    type Output = NaturalGaussian;

    fn add(self, rhs: Self) -> Self {
        NaturalGaussian {
            eta: self.eta + rhs.eta,
            lambda: self.lambda + rhs.lambda,
        }
    }
}

impl std::ops::Sub for NaturalGaussian {
    type Output = NaturalGaussian;

    fn sub(self, rhs: Self) -> Self {
        NaturalGaussian {
            eta: self.eta - rhs.eta,
            lambda: self.lambda - rhs.lambda,
        }
    }
}

pub fn to_natural(g: Gaussian1D) -> NaturalGaussian {
    let lambda = 1.0 / g.variance;
    NaturalGaussian {
        eta: g.mean * lambda,
        lambda,
    }
}

pub fn from_natural(n: NaturalGaussian) -> Result<Gaussian1D> {
    if !(n.lambda > 0.0) {
        return Err(Error::NonPositivePrecision(n.lambda));
    }
    let variance = 1.0 / n.lambda;
    Ok(Gaussian1D {
        mean: n.eta * variance,
        variance,
    })
}

/// `KL[q || p]` between two univariate Gaussians, in nats.
pub fn gaussian_kl(q: Gaussian1D, p: Gaussian1D) -> f64 {
    let ratio = q.variance / p.variance;
    let d = q.mean - p.mean;
    // ratio - 1 - ln(ratio) loses everything to cancellation near ratio = 1
    let log_ratio = ratio.ln();
    let spread = if (ratio - 1.0).abs() < 1e-4 {
        let u = ratio - 1.0;
        u * u * (0.5 - u / 3.0 + u * u / 4.0 - u * u * u / 5.0)
    } else {
        ratio - 1.0 - log_ratio
    };
    0.5 * (spread + d * d / p.variance)
}

/// `KL[q || p]` between two Gamma distributions (shape/rate), in nats.
pub fn gamma_kl(q: Gamma1D, p: Gamma1D) -> f64 {
    (q.shape - p.shape) * digamma(q.shape) - ln_gamma(q.shape)
        + ln_gamma(p.shape)
        + p.shape * (q.rate / p.rate).ln()
        + q.shape * (p.rate - q.rate) / q.rate
}

/// `(E[x], E[ln x])` under a Gamma distribution.
pub fn gamma_moments(g: Gamma1D) -> (f64, f64) {
    (g.shape / g.rate, digamma(g.shape) - g.rate.ln())
}

/// First and second raw moments of `max(z, 0)` for `z ~ N(mean, var)`.
pub fn relu_moments(pre_mean: f64, pre_var: f64) -> (f64, f64) {
    debug_assert!(pre_var >= 0.0);
    if pre_var <= 0.0 {
        let r = pre_mean.max(0.0);
        return (r, r * r);
    }
    let s = pre_var.sqrt();
    let r = pre_mean / s;
    let cdf = std_normal_cdf(r);
    let pdf = std_normal_pdf(r);
    let mean = pre_mean * cdf + s * pdf;
    let second = (pre_mean * pre_mean + pre_var) * cdf + pre_mean * s * pdf;
    (mean, second)
}
