//! Variance-function families and the arc-length distance along `(t, V(t))`.
//!
//! The distance between two means `a` and `b` is the squared length of the
//! curve traced by the variance function between them,
//!
//! ```text
//! d_V(a, b) = ( ∫_a^b sqrt(1 + V'(t)^2) dt )^2
//! ```
//!
//! Dispersion never enters `d_V`. Closed-form antiderivatives are used for the
//! gaussian, poisson, binomial and gamma families; the others go through
//! adaptive Gauss–Kronrod quadrature.

use std::fmt;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadratureConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    Gaussian,
    Binomial,
    Poisson,
    Gamma,
    InverseGaussian,
    Quasi,
}

/// A user supplied link. `mu_eta` is `dμ/dη`.
#[derive(Debug, Clone, Copy)]
pub struct CustomLink {
    pub name: &'static str,
    pub link: fn(f64) -> f64,
    pub inverse: fn(f64) -> f64,
    pub mu_eta: fn(f64) -> f64,
}

impl PartialEq for CustomLink {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    Identity,
    Logit,
    Log,
    Inverse,
    Custom(CustomLink),
}

const MAX_LOG_ETA: f64 = 700.0;

impl Link {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            "log" => Ok(Link::Log),
            "inverse" => Ok(Link::Inverse),
            other => Err(Error::InvalidArgument(format!("unknown link `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logit => "logit",
            Link::Log => "log",
            Link::Inverse => "inverse",
            Link::Custom(c) => c.name,
        }
    }

    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
            Link::Inverse => 1.0 / mu,
            Link::Custom(c) => (c.link)(mu),
        }
    }

    pub fn inverse(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Link::Log => eta.min(MAX_LOG_ETA).exp(),
            Link::Inverse => 1.0 / eta,
            Link::Custom(c) => (c.inverse)(eta),
        }
    }

    /// Derivative of the inverse link, `dμ/dη`.
    pub fn mu_eta(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let mu = self.inverse(eta);
                (mu * (1.0 - mu)).max(f64::MIN_POSITIVE)
            }
            Link::Log => eta.min(MAX_LOG_ETA).exp().max(f64::MIN_POSITIVE),
            Link::Inverse => -1.0 / (eta * eta),
            Link::Custom(c) => (c.mu_eta)(eta),
        }
    }
}

/// `V(μ) = scale · μ^power`, the variance function of a quasi family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerVariance {
    pub scale: f64,
    pub power: f64,
}

/// Closed interval of admissible means; `None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanDomain {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl MeanDomain {
    pub fn contains(&self, mu: f64) -> bool {
        mu.is_finite() && self.lower.is_none_or(|l| mu >= l) && self.upper.is_none_or(|u| mu <= u)
    }

    pub fn contains_interior(&self, mu: f64) -> bool {
        mu.is_finite() && self.lower.is_none_or(|l| mu > l) && self.upper.is_none_or(|u| mu < u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Family {
    kind: FamilyKind,
    link: Link,
    dispersion: f64,
    quasi: Option<PowerVariance>,
}

impl Family {
    fn new(kind: FamilyKind, link: Link) -> Self {
        Self {
            kind,
            link,
            dispersion: 1.0,
            quasi: None,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(FamilyKind::Gaussian, Link::Identity)
    }

    pub fn binomial() -> Self {
        Self::new(FamilyKind::Binomial, Link::Logit)
    }

    pub fn poisson() -> Self {
        Self::new(FamilyKind::Poisson, Link::Log)
    }

    pub fn gamma() -> Self {
        Self::new(FamilyKind::Gamma, Link::Log)
    }

    /// Inverse gaussian with the usual `V(μ) = μ³`.
    pub fn inverse_gaussian() -> Self {
        Self::new(FamilyKind::InverseGaussian, Link::Log)
    }

    pub fn quasi(variance: PowerVariance, link: Link) -> Result<Self> {
        if !(variance.scale > 0.0) || !variance.power.is_finite() || variance.power < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "quasi variance needs scale > 0 and power >= 0, got {variance:?}"
            )));
        }
        Ok(Self {
            quasi: Some(variance),
            ..Self::new(FamilyKind::Quasi, link)
        })
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn with_dispersion(mut self, dispersion: f64) -> Self {
        self.dispersion = dispersion;
        self
    }

    /// Parses `gaussian`, `binomial`, `poisson`, `gamma`, `inverse-gaussian`,
    /// with an optional link override.
    pub fn parse(name: &str, link: Option<&str>) -> Result<Self> {
        let family = match name {
            "gaussian" | "normal" => Self::gaussian(),
            "binomial" => Self::binomial(),
            "poisson" => Self::poisson(),
            "gamma" => Self::gamma(),
            "inverse-gaussian" | "inverse_gaussian" => Self::inverse_gaussian(),
            other => return Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        };
        match link {
            Some(l) => Ok(family.with_link(Link::parse(l)?)),
            None => Ok(family),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion
    }

    pub fn power_variance(&self) -> Option<PowerVariance> {
        self.quasi
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Binomial => "binomial",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Gamma => "gamma",
            FamilyKind::InverseGaussian => "inverse-gaussian",
            FamilyKind::Quasi => "quasi",
        }
    }

    pub fn is_canonical(&self) -> bool {
        matches!(
            (self.kind, self.link),
            (FamilyKind::Gaussian, Link::Identity)
                | (FamilyKind::Binomial, Link::Logit)
                | (FamilyKind::Poisson, Link::Log)
        )
    }

    pub fn domain(&self) -> MeanDomain {
        match self.kind {
            FamilyKind::Gaussian => MeanDomain {
                lower: None,
                upper: None,
            },
            FamilyKind::Binomial => MeanDomain {
                lower: Some(0.0),
                upper: Some(1.0),
            },
            FamilyKind::Poisson | FamilyKind::Gamma | FamilyKind::InverseGaussian => MeanDomain {
                lower: Some(0.0),
                upper: None,
            },
            FamilyKind::Quasi => {
                let pv = self.quasi.expect("quasi family carries its variance");
                if pv.power == 0.0 {
                    MeanDomain {
                        lower: None,
                        upper: None,
                    }
                } else {
                    MeanDomain {
                        lower: Some(0.0),
                        upper: None,
                    }
                }
            }
        }
    }

    pub fn check_mean(&self, mu: f64, index: Option<usize>) -> Result<()> {
        if self.domain().contains(mu) {
            Ok(())
        } else {
            Err(Error::Domain {
                family: self.name().to_string(),
                value: mu,
                index,
            })
        }
    }

    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Binomial => mu * (1.0 - mu),
            FamilyKind::Poisson => mu,
            FamilyKind::Gamma => mu * mu,
            FamilyKind::InverseGaussian => mu * mu * mu,
            FamilyKind::Quasi => {
                let pv = self.quasi.expect("quasi family carries its variance");
                pv.scale * mu.powf(pv.power)
            }
        }
    }

    pub fn variance_deriv(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.0,
            FamilyKind::Binomial => 1.0 - 2.0 * mu,
            FamilyKind::Poisson => 1.0,
            FamilyKind::Gamma => 2.0 * mu,
            FamilyKind::InverseGaussian => 3.0 * mu * mu,
            FamilyKind::Quasi => {
                let pv = self.quasi.expect("quasi family carries its variance");
                if pv.power == 0.0 {
                    0.0
                } else {
                    pv.scale * pv.power * mu.powf(pv.power - 1.0)
                }
            }
        }
    }

    /// Unit deviance `d(y, μ)`, summing to the model deviance.
    pub fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => (y - mu) * (y - mu),
            FamilyKind::Binomial => 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu))),
            FamilyKind::Poisson => 2.0 * (xlogy(y, y / mu) - (y - mu)),
            FamilyKind::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
            FamilyKind::InverseGaussian => (y - mu) * (y - mu) / (mu * mu * y),
            FamilyKind::Quasi => {
                // 2 ∫_μ^y (y - t) / V(t) dt
                if y == mu {
                    return 0.0;
                }
                let (lo, hi) = if mu < y { (mu, y) } else { (y, mu) };
                let sign = if mu < y { 1.0 } else { -1.0 };
                let cfg = QuadratureConfig {
                    abs_tol: 1e-12,
                    rel_tol: 1e-12,
                    max_intervals: 200,
                };
                match integrate(|t| (y - t) / self.variance(t), lo, hi, &cfg) {
                    Ok(r) => 2.0 * sign * r.value,
                    Err(_) => f64::NAN,
                }
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name(), self.link.name())
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMethod {
    ClosedForm,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult {
    pub arc_length: f64,
    pub d_v: f64,
    pub method: DistanceMethod,
    pub abs_error_estimate: f64,
}

impl DistanceResult {
    fn closed(length: f64) -> Self {
        Self {
            arc_length: length,
            d_v: length * length,
            method: DistanceMethod::ClosedForm,
            abs_error_estimate: 0.0,
        }
    }
}

/// `∫ sqrt(1 + u²) du = (u sqrt(1 + u²) + asinh u) / 2`.
fn sqrt_one_plus_sq_antiderivative(u: f64) -> f64 {
    0.5 * (u * u.mul_add(u, 1.0).sqrt() + u.asinh())
}

fn check_pair(family: &Family, a: f64, b: f64) -> Result<()> {
    family.check_mean(a, None)?;
    family.check_mean(b, None)
}

/// Arc length and `d_V` between two means, closed form where one exists.
pub fn distance(family: &Family, a: f64, b: f64) -> Result<DistanceResult> {
    check_pair(family, a, b)?;
    if a == b {
        return Ok(DistanceResult::closed(0.0));
    }
    let length = match family.kind() {
        FamilyKind::Gaussian => (b - a).abs(),
        FamilyKind::Poisson => std::f64::consts::SQRT_2 * (b - a).abs(),
        FamilyKind::Binomial => {
            // u = 1 - 2t, du = -2 dt
            0.5 * (sqrt_one_plus_sq_antiderivative(1.0 - 2.0 * a) - sqrt_one_plus_sq_antiderivative(1.0 - 2.0 * b))
                .abs()
        }
        FamilyKind::Gamma => {
            0.5 * (sqrt_one_plus_sq_antiderivative(2.0 * b) - sqrt_one_plus_sq_antiderivative(2.0 * a)).abs()
        }
        FamilyKind::InverseGaussian | FamilyKind::Quasi => return quadrature_distance(family, a, b),
    };
    Ok(DistanceResult::closed(length))
}

/// Same as [`distance`] but always integrates numerically.
pub fn quadrature_distance(family: &Family, a: f64, b: f64) -> Result<DistanceResult> {
    check_pair(family, a, b)?;
    if a == b {
        return Ok(DistanceResult::closed(0.0));
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let r = integrate(
        |t| {
            let d = family.variance_deriv(t);
            d.mul_add(d, 1.0).sqrt()
        },
        lo,
        hi,
        &QuadratureConfig::default(),
    )?;
    Ok(DistanceResult {
        arc_length: r.value,
        d_v: r.value * r.value,
        method: DistanceMethod::Quadrature,
        abs_error_estimate: r.abs_error,
    })
}

pub fn arc_length(family: &Family, a: f64, b: f64) -> Result<f64> {
    distance(family, a, b).map(|d| d.arc_length)
}

pub fn d_v(family: &Family, a: f64, b: f64) -> Result<f64> {
    distance(family, a, b).map(|d| d.d_v)
}

/// `Σ_i d_V(y_i, μ_i)`; domain errors carry the offending element index.
pub fn sum_dv(family: &Family, y: &[f64], mu: &[f64]) -> Result<f64> {
    if y.len() != mu.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            found: mu.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&yi, &mi)) in y.iter().zip(mu).enumerate() {
        total += d_v(family, yi, mi).map_err(|e| match e {
            Error::Domain { family, value, .. } => Error::Domain {
                family,
                value,
                index: Some(i),
            },
            other => other,
        })?;
    }
    Ok(total)
}

/// `Σ_i d_V(y_i, c)` for a constant mean, used for the R² denominators.
pub fn sum_dv_to_constant(family: &Family, y: &[f64], c: f64) -> Result<f64> {
    let mu = vec![c; y.len()];
    sum_dv(family, y, &mu)
}
