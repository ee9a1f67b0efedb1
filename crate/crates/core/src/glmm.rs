//! Random-intercept GLMM by adaptive Gauss–Hermite quadrature, and the
//! variance-function coefficients of determination.
//!
//! Each group's marginal likelihood `∫ Π_j f(y_ij | η_ij + u) φ(u; 0, τ²) du` is
//! integrated with Gauss–Hermite nodes centred at the posterior mode of `u` and
//! scaled by the curvature there. One node is the Laplace approximation.

use statrs::function::gamma::ln_gamma;

use crate::design::DesignData;
use crate::error::{Error, Result};
use crate::glm::{fit_glm, GlmFit};
use crate::lmm::nakagawa_components;
use crate::optim::{minimize_bfgs, BfgsOptions};
use crate::stats::{mean, population_variance, trigamma};
use crate::varfun::{sum_dv, sum_dv_to_constant, Family, FamilyKind, Link};

pub const DEFAULT_NODES: usize = 15;
const LOG_TAU2_BOUNDS: (f64, f64) = (-20.0, 10.0);
const INNER_MAX_ITER: usize = 100;

/// Gauss–Hermite rule for the weight `exp(−x²)`, nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let half = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Conditional log-density of one observation and its first two derivatives
/// in the linear predictor.
#[derive(Debug, Clone, Copy)]
struct Conditional {
    kind: FamilyKind,
    /// σ² for the gaussian family.
    dispersion: f64,
}

impl Conditional {
    #[inline]
    fn eval(&self, y: f64, eta: f64, constant: f64) -> (f64, f64, f64) {
        match self.kind {
            FamilyKind::Binomial => {
                let mu = Link::Logit.inverse(eta);
                let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                (y * eta - softplus, y - mu, -mu * (1.0 - mu))
            }
            FamilyKind::Poisson => {
                let mu = eta.min(700.0).exp();
                (y * eta - mu - constant, y - mu, -mu)
            }
            FamilyKind::Gaussian => {
                let r = y - eta;
                let phi = self.dispersion;
                (-0.5 * (2.0 * std::f64::consts::PI * phi).ln() - r * r / (2.0 * phi), r / phi, -1.0 / phi)
            }
            _ => unreachable!("family checked at fit time"),
        }
    }
}

struct GroupData {
    y: Vec<f64>,
    constant: Vec<f64>,
    rows: Vec<usize>,
}

struct Model<'a> {
    design: &'a DesignData,
    groups: Vec<GroupData>,
    kind: FamilyKind,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

struct GroupMode {
    mode: f64,
    /// −h''(mode)
    curvature: f64,
    log_lik: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'a> Model<'a> {
    fn new(design: &'a DesignData, family: &Family, nodes: usize) -> Self {
        let groups = design
            .group_rows()
            .into_iter()
            .map(|rows| {
                let y: Vec<f64> = rows.iter().map(|&r| design.y[r]).collect();
                let constant = y
                    .iter()
                    .map(|&v| if family.kind() == FamilyKind::Poisson { ln_gamma(v + 1.0) } else { 0.0 })
                    .collect();
                GroupData { y, constant, rows }
            })
            .collect();
        let (x, w) = gauss_hermite(nodes);
        let log_weights = x.iter().zip(&w).map(|(x, w)| w.ln() + x * x).collect();
        Self {
            design,
            groups,
            kind: family.kind(),
            nodes: x,
            log_weights,
        }
    }

    fn p(&self) -> usize {
        self.design.p()
    }

    fn unpack(&self, theta: &[f64]) -> (Vec<f64>, f64, Conditional) {
        let p = self.p();
        let beta = theta[..p].to_vec();
        let tau2 = theta[p].exp();
        let dispersion = if self.kind == FamilyKind::Gaussian { theta[p + 1].exp() } else { 1.0 };
        (
            beta,
            tau2,
            Conditional {
                kind: self.kind,
                dispersion,
            },
        )
    }

    fn h(&self, g: &GroupData, eta: &[f64], cond: &Conditional, tau2: f64, u: f64) -> (f64, f64, f64) {
        let mut f = -u * u / (2.0 * tau2);
        let mut d1 = -u / tau2;
        let mut d2 = -1.0 / tau2;
        for (k, &r) in g.rows.iter().enumerate() {
            let (a, b, c) = cond.eval(g.y[k], eta[r] + u, g.constant[k]);
            f += a;
            d1 += b;
            d2 += c;
        }
        (f, d1, d2)
    }

    fn group_mode(&self, gi: usize, eta: &[f64], cond: &Conditional, tau2: f64) -> Result<GroupMode> {
        let g = &self.groups[gi];
        let mut u = 0.0;
        let (mut f, mut d1, mut d2) = self.h(g, eta, cond, tau2, u);
        let mut converged = false;
        for _ in 0..INNER_MAX_ITER {
            let step = -d1 / d2;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..50 {
                let cand = u + t * step;
                let (fc, d1c, d2c) = self.h(g, eta, cond, tau2, cand);
                if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                    u = cand;
                    f = fc;
                    d1 = d1c;
                    d2 = d2c;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::InnerDivergence { group: gi });
            }
            if (t * step).abs() <= 1e-12 * (1.0 + u.abs()) || d1 == 0.0 {
                converged = true;
                break;
            }
        }
        if !converged || !(d2 < 0.0) {
            return Err(Error::InnerDivergence { group: gi });
        }
        let curvature = -d2;
        let scale = (2.0 / curvature).sqrt();
        let log_terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.log_weights)
            .map(|(&z, &lw)| {
                if z == 0.0 {
                    lw + f
                } else {
                    lw + self.h(g, eta, cond, tau2, u + scale * z).0
                }
            })
            .collect();
        let log_lik = scale.ln() - 0.5 * (2.0 * std::f64::consts::PI * tau2).ln() + log_sum_exp(&log_terms);
        Ok(GroupMode {
            mode: u,
            curvature,
            log_lik,
        })
    }

    fn modes(&self, theta: &[f64]) -> Result<Vec<GroupMode>> {
        let (beta, tau2, cond) = self.unpack(theta);
        let eta = self.design.linear_predictor(&beta);
        (0..self.groups.len()).map(|gi| self.group_mode(gi, &eta, &cond, tau2)).collect()
    }

    fn loglik(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.modes(theta)?.iter().map(|m| m.log_lik).sum())
    }

    /// Per-group derivative of the joint log-density at the reported modes.
    fn mode_gradients(&self, theta: &[f64], modes: &[f64]) -> Vec<f64> {
        let (beta, tau2, cond) = self.unpack(theta);
        let eta = self.design.linear_predictor(&beta);
        self.groups
            .iter()
            .zip(modes)
            .map(|(g, &u)| self.h(g, &eta, &cond, tau2, u).1)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmmFit {
    pub family: Family,
    pub beta: Vec<f64>,
    pub tau2: f64,
    /// Residual variance for the gaussian family.
    pub dispersion: Option<f64>,
    /// Posterior mode of each random intercept.
    pub u_mode: Vec<f64>,
    /// Curvature −h'' at each mode.
    pub u_curvature: Vec<f64>,
    /// `Xβ̂ + offset`.
    pub eta_f: Vec<f64>,
    /// `Xβ̂` without the offset.
    pub xbeta: Vec<f64>,
    pub eta_r: Vec<f64>,
    pub loglik: f64,
    pub nodes: usize,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    /// Largest |gradient| of the joint log-density at the modes.
    pub max_mode_gradient: f64,
    /// The `τ² = 0` boundary won the likelihood comparison.
    pub at_boundary: bool,
}

impl GlmmFit {
    /// β, τ², and σ² for the gaussian family.
    pub fn n_params(&self) -> usize {
        self.p + 1 + usize::from(self.dispersion.is_some())
    }

    pub fn fitted_mean(&self) -> Vec<f64> {
        let link = self.family.link();
        self.eta_f.iter().zip(&self.eta_r).map(|(f, r)| link.inverse(f + r)).collect()
    }
}

fn check_family(family: &Family) -> Result<()> {
    match (family.kind(), family.link()) {
        (FamilyKind::Binomial, Link::Logit) | (FamilyKind::Poisson, Link::Log) | (FamilyKind::Gaussian, Link::Identity) => {
            Ok(())
        }
        _ => Err(Error::Unsupported(format!("GLMM fitting for {family}"))),
    }
}

/// Fits the random-intercept GLMM by maximising the adaptive Gauss–Hermite
/// approximation to the marginal likelihood.
pub fn fit_glmm(design: &DesignData, family: &Family, nodes: usize) -> Result<GlmmFit> {
    check_family(family)?;
    if nodes == 0 || nodes > 50 || nodes.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("quadrature nodes must be odd and within 1..=50, got {nodes}")));
    }
    let glm = fit_glm(design, family)?;
    let model = Model::new(design, family, nodes);
    let p = design.p();
    let gaussian = family.kind() == FamilyKind::Gaussian;

    let mut start: Vec<f64> = glm.beta.clone();
    start.push(0.0);
    if gaussian {
        start.push((glm.deviance / design.n() as f64).ln());
    }
    // Pick a starting variance from a coarse scan.
    let mut best_start = (f64::NEG_INFINITY, 0.0);
    for s in [-3.0, -1.5, 0.0, 1.0] {
        let mut t = start.clone();
        t[p] = s;
        if gaussian {
            // split the residual variance
            t[p + 1] = (glm.deviance / design.n() as f64 / (1.0 + s.exp())).max(1e-12).ln();
        }
        if let Ok(ll) = model.loglik(&t) {
            if ll > best_start.0 {
                best_start = (ll, s);
                start = t;
            }
        }
    }

    let mut lower = vec![f64::NEG_INFINITY; start.len()];
    let mut upper = vec![f64::INFINITY; start.len()];
    lower[p] = LOG_TAU2_BOUNDS.0;
    upper[p] = LOG_TAU2_BOUNDS.1;
    let objective = |theta: &[f64]| -> f64 {
        match model.loglik(theta) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };
    let opt = minimize_bfgs(
        objective,
        &start,
        &lower,
        &upper,
        &BfgsOptions {
            max_iter: 500,
            ..BfgsOptions::default()
        },
    )?;
    let theta = opt.x;
    let modes = model.modes(&theta)?;
    let loglik: f64 = modes.iter().map(|m| m.log_lik).sum();

    let n = design.n();
    if glm.loglik >= loglik {
        let xbeta: Vec<f64> = glm.eta.iter().zip(&design.offset).map(|(e, o)| e - o).collect();
        let dispersion = gaussian.then(|| glm.deviance / n as f64);
        return Ok(GlmmFit {
            family: *family,
            beta: glm.beta.clone(),
            tau2: 0.0,
            dispersion,
            u_mode: vec![0.0; design.m()],
            u_curvature: vec![f64::INFINITY; design.m()],
            eta_f: glm.eta.clone(),
            xbeta,
            eta_r: vec![0.0; n],
            loglik: glm.loglik,
            nodes,
            n,
            p,
            m: design.m(),
            max_mode_gradient: 0.0,
            at_boundary: true,
        });
    }

    let (beta, tau2, cond) = model.unpack(&theta);
    let u_mode: Vec<f64> = modes.iter().map(|m| m.mode).collect();
    let max_mode_gradient = model
        .mode_gradients(&theta, &u_mode)
        .iter()
        .fold(0.0f64, |a, g| a.max(g.abs()));
    let eta_f = design.linear_predictor(&beta);
    let xbeta = eta_f.iter().zip(&design.offset).map(|(e, o)| e - o).collect();
    let eta_r = design.group_index.iter().map(|&g| u_mode[g]).collect();
    Ok(GlmmFit {
        family: *family,
        beta,
        tau2,
        dispersion: gaussian.then_some(cond.dispersion),
        u_curvature: modes.iter().map(|m| m.curvature).collect(),
        u_mode,
        eta_f,
        xbeta,
        eta_r,
        loglik,
        nodes,
        n,
        p,
        m: design.m(),
        max_mode_gradient,
        at_boundary: false,
    })
}

/// Adaptive-quadrature log-likelihood at given parameters. `dispersion` is
/// σ² and only read for the gaussian family.
pub fn agq_loglik(
    design: &DesignData,
    family: &Family,
    nodes: usize,
    beta: &[f64],
    tau2: f64,
    dispersion: f64,
) -> Result<f64> {
    check_family(family)?;
    let model = Model::new(design, family, nodes);
    let mut theta = beta.to_vec();
    theta.push(tau2.ln());
    if family.kind() == FamilyKind::Gaussian {
        theta.push(dispersion.ln());
    }
    model.loglik(&theta)
}

fn dv_denominator(family: &Family, y: &[f64]) -> Result<f64> {
    let d = sum_dv_to_constant(family, y, mean(y))?;
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::ZeroDenominator("variance-function total"))
    }
}

/// Fixed-effects share from the GLM that drops the random intercept:
/// `1 − Σ d_V(y, g⁻¹(η̃^F)) / Σ d_V(y, ȳ)`.
pub fn r2_f_glmm(fixed_only: &GlmFit, y: &[f64]) -> Result<f64> {
    let family = &fixed_only.family;
    let link = family.link();
    let mu: Vec<f64> = fixed_only.eta.iter().map(|&e| link.inverse(e)).collect();
    Ok(1.0 - sum_dv(family, y, &mu)? / dv_denominator(family, y)?)
}

/// Whole-model share with posterior-mode random intercepts plugged in:
/// `1 − Σ d_V(y, g⁻¹(η̂^F + η̂^R)) / Σ d_V(y, ȳ)`.
pub fn r2_m_glmm(fit: &GlmmFit, y: &[f64]) -> Result<f64> {
    let family = &fit.family;
    Ok(1.0 - sum_dv(family, y, &fit.fitted_mean())? / dv_denominator(family, y)?)
}

pub use crate::lmm::r2_r as r2_r_glmm;

/// Observation-level variance on the link scale for the comparator R².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsVarianceApprox {
    #[default]
    Lognormal,
    Delta,
    Trigamma,
}

impl ObsVarianceApprox {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lognormal" => Ok(Self::Lognormal),
            "delta" => Ok(Self::Delta),
            "trigamma" => Ok(Self::Trigamma),
            other => Err(Error::InvalidArgument(format!("unknown approximation `{other}`"))),
        }
    }
}

/// Nakagawa-style marginal and conditional R² on the link scale.
///
/// For poisson/log, the mean count `λ̄ = exp(β̂₀ + mean offset + τ̂²/2)` comes from
/// `null_fit`, the intercept-only mixed model on the same data.
pub fn nakagawa_glmm(fit: &GlmmFit, approx: ObsVarianceApprox, null_fit: Option<&GlmmFit>) -> Result<(f64, f64)> {
    let fixed_var = population_variance(&fit.xbeta);
    let resid_var = match (fit.family.kind(), fit.family.link()) {
        (FamilyKind::Binomial, Link::Logit) => std::f64::consts::PI.powi(2) / 3.0,
        (FamilyKind::Poisson, Link::Log) => {
            let null = null_fit.ok_or_else(|| {
                Error::InvalidArgument("poisson comparator needs the intercept-only mixed model".into())
            })?;
            let offset_mean = mean(&null.eta_f) - mean(&null.xbeta);
            let lambda = (null.beta[0] + offset_mean + null.tau2 / 2.0).exp();
            match approx {
                ObsVarianceApprox::Lognormal => (1.0 / lambda).ln_1p(),
                ObsVarianceApprox::Delta => 1.0 / lambda,
                ObsVarianceApprox::Trigamma => trigamma(lambda),
            }
        }
        (FamilyKind::Gaussian, Link::Identity) => fit.dispersion.unwrap_or(1.0),
        _ => return Err(Error::Unsupported(format!("comparator R² for {}", fit.family))),
    };
    Ok(nakagawa_components(fixed_var, fit.tau2, resid_var))
}

/// AIC and BIC counting β, τ², and σ² for the gaussian family.
pub fn glmm_ic(fit: &GlmmFit) -> (f64, f64) {
    information_criteria(fit.loglik, fit.n_params(), fit.n)
}

pub fn information_criteria(loglik: f64, k: usize, n: usize) -> (f64, f64) {
    let k = k as f64;
    (-2.0 * loglik + 2.0 * k, -2.0 * loglik + (n as f64).ln() * k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, parse_formula, Column, Dataset};
    use crate::glm::r2_v;
    use crate::lmm::{fit_lmm, Method};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal, Poisson};

    #[test]
    fn hermite_rules_integrate_polynomials() {
        for n in [1usize, 3, 15, 25, 49] {
            let (x, w) = gauss_hermite(n);
            let sp = std::f64::consts::PI.sqrt();
            assert!((w.iter().sum::<f64>() - sp).abs() < 1e-13, "n={n}");
            if n >= 3 {
                let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
                assert!((m2 - sp / 2.0).abs() < 1e-13);
                let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
                assert!((m4 - 3.0 * sp / 4.0).abs() < 1e-12);
            }
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    fn clustered(kind: FamilyKind, m: usize, k: usize, tau: f64, beta: f64, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (mut y, mut x, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..m {
            let u = tau * normal.sample(&mut rng);
            for j in 0..k {
                let xv = if j % 2 == 0 { 1.0 } else { -1.0 };
                let eta = u + beta * xv;
                let yv = match kind {
                    FamilyKind::Binomial => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())),
                    FamilyKind::Poisson => Poisson::new(eta.exp()).unwrap().sample(&mut rng),
                    _ => eta + normal.sample(&mut rng),
                };
                y.push(yv);
                x.push(xv);
                g.push(format!("{i:03}"));
            }
        }
        Dataset::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x)),
            ("g".into(), Column::categorical(&g)),
        ])
        .unwrap()
    }

    #[test]
    fn gaussian_agrees_with_lmm() {
        let data = clustered(FamilyKind::Gaussian, 12, 6, 1.0, 0.7, 4);
        let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let lmm = fit_lmm(&d, Method::Ml).unwrap();
        for nodes in [1, 5] {
            let g = fit_glmm(&d, &Family::gaussian(), nodes).unwrap();
            assert!((g.loglik - lmm.loglik).abs() < 1e-6, "{} vs {}", g.loglik, lmm.loglik);
            assert!((g.tau2 - lmm.tau2).abs() < 1e-5, "{} vs {}", g.tau2, lmm.tau2);
            for (a, b) in g.beta.iter().zip(&lmm.beta) {
                assert!((a - b).abs() < 1e-5);
            }
            let (aic_g, _) = glmm_ic(&g);
            let (aic_l, _) = information_criteria(lmm.loglik, lmm.n_params(), lmm.n);
            assert!((aic_g - aic_l).abs() < 1e-4);
        }
    }

    #[test]
    fn modes_are_stationary() {
        for kind in [FamilyKind::Binomial, FamilyKind::Poisson] {
            let data = clustered(kind, 20, 8, 1.0, 0.5, 8);
            let fam = if kind == FamilyKind::Binomial { Family::binomial() } else { Family::poisson() };
            let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
            let fit = fit_glmm(&d, &fam, 15).unwrap();
            assert!(!fit.at_boundary);
            assert!(fit.max_mode_gradient <= 1e-8, "{}", fit.max_mode_gradient);
            for (g, rows) in d.group_rows().iter().enumerate() {
                assert!(rows.iter().all(|&r| fit.eta_r[r] == fit.u_mode[g]));
            }
        }
    }

    #[test]
    fn node_count_stability() {
        for kind in [FamilyKind::Binomial, FamilyKind::Poisson] {
            let data = clustered(kind, 50, 8, 1.0, 1.0, 21);
            let fam = if kind == FamilyKind::Binomial { Family::binomial() } else { Family::poisson() };
            let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
            let a = fit_glmm(&d, &fam, 15).unwrap();
            let b = fit_glmm(&d, &fam, 25).unwrap();
            assert!((a.loglik - b.loglik).abs() < 1e-3, "{kind:?}: {} vs {}", a.loglik, b.loglik);
        }
    }

    #[test]
    fn no_between_group_variation_hits_boundary() {
        // every group holds the same responses and covariates
        let pattern = [(0.0, 1.0), (1.0, 1.0), (1.0, -1.0), (0.0, -1.0), (1.0, 1.0), (0.0, -1.0)];
        let (mut y, mut x, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..10 {
            for &(yv, xv) in &pattern {
                y.push(yv);
                x.push(xv);
                g.push(i.to_string());
            }
        }
        let data = Dataset::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x)),
            ("g".into(), Column::categorical(&g)),
        ])
        .unwrap();
        let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let fam = Family::binomial();
        let fit = fit_glmm(&d, &fam, 15).unwrap();
        let glm = fit_glm(&d, &fam).unwrap();
        assert!(fit.tau2 <= 0.01);
        assert!((fit.loglik - glm.loglik).abs() < 1e-4);
        assert_eq!(r2_m_glmm(&fit, &d.y).unwrap(), r2_f_glmm(&glm, &d.y).unwrap());
    }

    #[test]
    fn r2_f_is_r2_v_of_fixed_only_fit() {
        for (kind, fam) in [(FamilyKind::Binomial, Family::binomial()), (FamilyKind::Poisson, Family::poisson())] {
            let data = clustered(kind, 15, 6, 1.0, 0.8, 2);
            let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
            let glm = fit_glm(&d, &fam).unwrap();
            let a = r2_f_glmm(&glm, &d.y).unwrap();
            let b = r2_v(&glm, &d.y).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
        let data = clustered(FamilyKind::Binomial, 15, 6, 1.0, 0.8, 2);
        let d = build_design(&data, &parse_formula("y ~ 1 + (1|g)").unwrap()).unwrap();
        let glm = fit_glm(&d, &Family::binomial()).unwrap();
        assert!(r2_f_glmm(&glm, &d.y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gaussian_r2_m_is_euclidean() {
        let data = clustered(FamilyKind::Gaussian, 10, 5, 1.0, 1.0, 6);
        let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let fit = fit_glmm(&d, &Family::gaussian(), 1).unwrap();
        let ybar = mean(&d.y);
        let num: f64 = d.y.iter().zip(fit.eta_f.iter().zip(&fit.eta_r)).map(|(y, (f, r))| (y - f - r).powi(2)).sum();
        let den: f64 = d.y.iter().map(|y| (y - ybar).powi(2)).sum();
        assert!((r2_m_glmm(&fit, &d.y).unwrap() - (1.0 - num / den)).abs() < 1e-12);
    }

    #[test]
    fn comparator_arithmetic() {
        let (m, c) = nakagawa_components(0.0, 0.0, std::f64::consts::PI.powi(2) / 3.0);
        assert_eq!((m, c), (0.0, 0.0));
        let (m, _) = nakagawa_components(1.0, 1.0, std::f64::consts::PI.powi(2) / 3.0);
        assert!((m - 1.0 / (2.0 + std::f64::consts::PI.powi(2) / 3.0)).abs() < 1e-15);
        let (aic, bic) = information_criteria(-100.0, 3, 100);
        assert_eq!(aic, 206.0);
        assert!((bic - (200.0 + 100f64.ln() * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = clustered(FamilyKind::Poisson, 5, 4, 0.5, 0.0, 1);
        let d = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        assert!(matches!(fit_glmm(&d, &Family::poisson(), 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(fit_glmm(&d, &Family::gamma(), 15), Err(Error::Unsupported(_))));
    }
}
