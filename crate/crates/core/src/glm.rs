//! Fixed-effects GLM fitted by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::design::DesignData;
use crate::error::{Error, Result};
use crate::stats::mean;
use crate::varfun::{sum_dv, sum_dv_to_constant, Family, FamilyKind};

const MAX_ITER: usize = 100;
const DEVIANCE_TOL: f64 = 1e-10;
const SCORE_TOL: f64 = 1e-8;
const BINOMIAL_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub family: Family,
    pub beta: Vec<f64>,
    /// Linear predictor including the offset.
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    /// `NaN` for quasi families.
    pub loglik: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub n: usize,
    pub p: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Some fitted probability sits within 1e-10 of 0 or 1.
    pub separation: bool,
}

/// Solves `min Σ w_i (z_i − x_i'β)²` by Householder QR on `√w X`.
pub(crate) fn weighted_least_squares(x: &DMatrix<f64>, z: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut xs = x.clone();
    let mut zs = DVector::from_column_slice(z);
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        xs.row_mut(i).scale_mut(s);
        zs[i] *= s;
    }
    let qr = xs.qr();
    let r = qr.r();
    let diag_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..p).any(|j| !(r[(j, j)].abs() > 1e-12 * diag_max)) {
        return Err(Error::RankDeficient {
            term: "weighted design".into(),
        });
    }
    qr.q_tr_mul(&mut zs);
    r.solve_upper_triangular(&zs.rows(0, p).into_owned())
        .ok_or_else(|| Error::RankDeficient {
            term: "weighted design".into(),
        })
}

fn check_response(family: &Family, y: &[f64]) -> Result<()> {
    for (i, &v) in y.iter().enumerate() {
        let ok = match family.kind() {
            FamilyKind::Gaussian => v.is_finite(),
            FamilyKind::Binomial => (0.0..=1.0).contains(&v),
            FamilyKind::Poisson => v >= 0.0 && v.is_finite(),
            FamilyKind::Gamma | FamilyKind::InverseGaussian => v > 0.0 && v.is_finite(),
            FamilyKind::Quasi => family.domain().contains(v),
        };
        if !ok {
            return Err(Error::Domain {
                family: family.name().into(),
                value: v,
                index: Some(i),
            });
        }
    }
    Ok(())
}

fn clamp_mean(family: &Family, mu: f64) -> f64 {
    match family.kind() {
        FamilyKind::Binomial => mu.clamp(BINOMIAL_EPS, 1.0 - BINOMIAL_EPS),
        FamilyKind::Gaussian => mu,
        _ => mu.max(f64::MIN_POSITIVE),
    }
}

fn initial_mean(family: &Family, y: f64) -> f64 {
    match family.kind() {
        FamilyKind::Binomial => (y + 0.5) / 2.0,
        FamilyKind::Poisson => y + 0.1,
        FamilyKind::Gaussian => y,
        FamilyKind::Quasi if family.domain().lower.is_none() => y,
        _ => y.max(1e-3),
    }
}

fn deviance(family: &Family, y: &[f64], mu: &[f64]) -> f64 {
    y.iter().zip(mu).map(|(&y, &m)| family.unit_deviance(y, m)).sum()
}

/// Maximised log-likelihood given fitted means. Dispersion, where the family
/// has one, is set to `deviance / n`.
pub fn family_loglik(family: &Family, y: &[f64], mu: &[f64], dev: f64) -> f64 {
    let n = y.len() as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    match family.kind() {
        FamilyKind::Gaussian => -0.5 * n * (ln2pi + (dev / n).ln() + 1.0),
        FamilyKind::Binomial => y
            .iter()
            .zip(mu)
            .map(|(&y, &m)| {
                let a = if y > 0.0 { y * m.ln() } else { 0.0 };
                let b = if y < 1.0 { (1.0 - y) * (1.0 - m).ln() } else { 0.0 };
                a + b
            })
            .sum(),
        FamilyKind::Poisson => y
            .iter()
            .zip(mu)
            .map(|(&y, &m)| {
                let a = if y > 0.0 { y * m.ln() } else { 0.0 };
                a - m - ln_gamma(y + 1.0)
            })
            .sum(),
        FamilyKind::Gamma => {
            let shape = n / dev;
            y.iter()
                .zip(mu)
                .map(|(&y, &m)| {
                    shape * (shape / m).ln() + (shape - 1.0) * y.ln() - shape * y / m - ln_gamma(shape)
                })
                .sum()
        }
        FamilyKind::InverseGaussian => {
            let phi = dev / n;
            y.iter()
                .zip(mu)
                .map(|(&y, &m)| -0.5 * ((2.0 * std::f64::consts::PI * phi * y.powi(3)).ln() + (y - m).powi(2) / (phi * m * m * y)))
                .sum()
        }
        FamilyKind::Quasi => f64::NAN,
    }
}

fn score_norm(family: &Family, x: &DMatrix<f64>, y: &[f64], eta: &[f64], mu: &[f64]) -> f64 {
    let link = family.link();
    let mut score = DVector::zeros(x.ncols());
    for i in 0..y.len() {
        let g = (y[i] - mu[i]) * link.mu_eta(eta[i]) / family.variance(mu[i]);
        score.axpy(g, &x.row(i).transpose(), 1.0);
    }
    score.norm()
}

struct Irls {
    beta: DVector<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    deviance: f64,
    iterations: usize,
    converged: bool,
}

fn irls(x: &DMatrix<f64>, y: &[f64], offset: &[f64], family: &Family) -> Result<Irls> {
    let n = y.len();
    let link = family.link();
    let mut mu: Vec<f64> = y.iter().map(|&v| initial_mean(family, v)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| link.link(m)).collect();
    let mut beta: Option<DVector<f64>> = None;
    let mut dev = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut polish = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let mut w = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let d = link.mu_eta(eta[i]);
            let v = family.variance(mu[i]).max(f64::MIN_POSITIVE);
            w.push((d * d / v).max(1e-300));
            z.push(eta[i] - offset[i] + (y[i] - mu[i]) / d);
        }
        let mut candidate = weighted_least_squares(x, &z, &w)?;
        let mut halvings = 0;
        let (new_eta, new_mu, new_dev) = loop {
            let lp = x * &candidate;
            let e: Vec<f64> = lp.iter().zip(offset).map(|(a, o)| a + o).collect();
            let m: Vec<f64> = e.iter().map(|&v| clamp_mean(family, link.inverse(v))).collect();
            let d = deviance(family, y, &m);
            let worse = !d.is_finite() || (beta.is_some() && d > dev * (1.0 + 1e-12) + 1e-12);
            match (&beta, worse) {
                (Some(old), true) if halvings < 30 => {
                    candidate = (&candidate + old) * 0.5;
                    halvings += 1;
                }
                (_, true) if !d.is_finite() => {
                    return Err(Error::NonConvergence {
                        what: "IRLS (non-finite deviance)".into(),
                        iterations,
                    })
                }
                _ => break (e, m, d),
            }
        };
        let change = (new_dev - dev).abs() / (new_dev.abs() + 0.1);
        beta = Some(candidate);
        eta = new_eta;
        mu = new_mu;
        dev = new_dev;
        if change <= DEVIANCE_TOL {
            converged = true;
            if score_norm(family, x, y, &eta, &mu) <= SCORE_TOL || polish >= 3 {
                break;
            }
            polish += 1;
        }
    }
    Ok(Irls {
        beta: beta.expect("at least one iteration"),
        eta,
        mu,
        deviance: dev,
        iterations,
        converged,
    })
}

/// Fits `g(E y) = Xβ + offset` by IRLS with step-halving.
pub fn fit_glm(design: &DesignData, family: &Family) -> Result<GlmFit> {
    let y = &design.y;
    check_response(family, y)?;
    let n = design.n();
    let p = design.p();
    if n <= p {
        return Err(Error::InvalidModel(format!("need n > p (n = {n}, p = {p})")));
    }
    let fit = irls(&design.x, y, &design.offset, family)?;
    let null_deviance = if design.offset.iter().all(|&o| o == 0.0) {
        let ybar = mean(y);
        y.iter().map(|&v| family.unit_deviance(v, ybar)).sum()
    } else {
        let ones = DMatrix::from_element(n, 1, 1.0);
        irls(&ones, y, &design.offset, family)?.deviance
    };
    let separation = family.kind() == FamilyKind::Binomial && fit.mu.iter().any(|&m| !(1e-10..=1.0 - 1e-10).contains(&m));
    Ok(GlmFit {
        family: *family,
        beta: fit.beta.iter().copied().collect(),
        loglik: family_loglik(family, y, &fit.mu, fit.deviance),
        eta: fit.eta,
        mu: fit.mu,
        deviance: fit.deviance,
        null_deviance,
        n,
        p,
        iterations: fit.iterations,
        converged: fit.converged,
        separation,
    })
}

/// Variance-function R², `1 − Σ d_V(y, μ̂) / Σ d_V(y, ȳ)`.
pub fn r2_v(fit: &GlmFit, y: &[f64]) -> Result<f64> {
    r2_dv(&fit.family, y, &fit.mu)
}

/// `1 − Σ d_V(y, μ) / Σ d_V(y, ȳ)` for any fitted means.
pub fn r2_dv(family: &Family, y: &[f64], mu: &[f64]) -> Result<f64> {
    let denom = sum_dv_to_constant(family, y, mean(y))?;
    if !(denom > 0.0) {
        return Err(Error::ZeroDenominator("variance-function total"));
    }
    Ok(1.0 - sum_dv(family, y, mu)? / denom)
}

/// Deviance-based Kullback–Leibler R², `1 − D / D_null`.
pub fn r2_kl(fit: &GlmFit) -> Result<f64> {
    if fit.family.kind() == FamilyKind::Quasi {
        return Err(Error::Unsupported("R_KL² needs a likelihood family".into()));
    }
    if !(fit.null_deviance > 0.0) {
        return Err(Error::ZeroDenominator("null deviance"));
    }
    Ok(1.0 - fit.deviance / fit.null_deviance)
}

/// Degrees-of-freedom adjustment `1 − (1 − r²)·df_total/df_resid`.
pub fn adjust(r2: f64, df_resid: i64, df_total: i64) -> Result<f64> {
    if df_resid <= 0 {
        return Err(Error::InvalidArgument(format!("residual degrees of freedom must be positive, got {df_resid}")));
    }
    if df_resid > df_total {
        return Err(Error::InvalidArgument(format!(
            "residual degrees of freedom {df_resid} exceed total {df_total}"
        )));
    }
    Ok(r2 - (1.0 - r2) * ((df_total - df_resid) as f64 / df_resid as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, parse_formula, Column, Dataset};
    use crate::stats::total_sum_of_squares;
    use rand::{Rng, SeedableRng};

    fn dataset(y: Vec<f64>, x: Vec<f64>) -> Dataset {
        let g: Vec<String> = (0..y.len()).map(|i| (i % 4).to_string()).collect();
        Dataset::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x)),
            ("g".into(), Column::categorical(&g)),
        ])
        .unwrap()
    }

    fn random_data(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 + v + rng.random::<f64>()).collect();
        (y, x, x2)
    }

    #[test]
    fn gaussian_matches_ols() {
        let (y, x, _) = random_data(1, 40);
        let d = build_design(&dataset(y.clone(), x.clone()), &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let fit = fit_glm(&d, &Family::gaussian()).unwrap();
        // normal equations in closed form for a single regressor
        let n = y.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((fit.beta[1] - slope).abs() < 1e-10);
        assert!((fit.beta[0] - (my - slope * mx)).abs() < 1e-10);
        let r2 = 1.0 - fit.deviance / total_sum_of_squares(&y);
        assert!((r2_v(&fit, &y).unwrap() - r2).abs() < 1e-12);
        assert!((r2_kl(&fit).unwrap() - r2).abs() < 1e-12);
    }

    #[test]
    fn intercept_only_canonical_fit_is_the_mean() {
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let d = build_design(&dataset(y.clone(), vec![0.0; 8]), &parse_formula("y ~ 1 + (1|g)").unwrap()).unwrap();
        let fit = fit_glm(&d, &Family::binomial()).unwrap();
        for m in &fit.mu {
            assert!((m - 0.625).abs() < 1e-12);
        }
        assert!(r2_v(&fit, &y).unwrap().abs() < 1e-12);
        assert!(r2_kl(&fit).unwrap().abs() < 1e-12);
    }

    #[test]
    fn poisson_offset_intercept() {
        // y mean 4 with exposure 2: exp(β₀)·2 = 4
        let y = vec![3.0, 5.0, 4.0, 2.0, 6.0, 4.0];
        let data = dataset(y, vec![0.0; 6]).with_column("e", Column::Numeric(vec![2.0; 6])).unwrap();
        let d = build_design(&data, &parse_formula("y ~ 1 + (1|g) + offset(log(e))").unwrap()).unwrap();
        let fit = fit_glm(&d, &Family::poisson()).unwrap();
        assert!((fit.beta[0] - 2f64.ln()).abs() < 1e-10);
        assert!((fit.deviance - fit.null_deviance).abs() < 1e-9);
    }

    #[test]
    fn score_vanishes_at_convergence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                let p = 1.0 / (1.0 + (-(0.3 + 1.2 * v)).exp());
                if rng.random::<f64>() < p { 1.0 } else { 0.0 }
            })
            .collect();
        let d = build_design(&dataset(y.clone(), x), &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let fam = Family::binomial();
        let fit = fit_glm(&d, &fam).unwrap();
        assert!(fit.converged && !fit.separation);
        assert!(score_norm(&fam, &d.x, &y, &fit.eta, &fit.mu) <= 1e-8);
        for (e, m) in fit.eta.iter().zip(&fit.mu) {
            assert_eq!(*m, fam.link().inverse(*e));
        }
        assert!(fit.deviance <= fit.null_deviance);
        let r = r2_kl(&fit).unwrap();
        assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn separation_is_flagged_not_fatal() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let d = build_design(&dataset(y.clone(), x), &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let fit = fit_glm(&d, &Family::binomial()).unwrap();
        assert!(fit.separation);
        assert!(r2_v(&fit, &y).unwrap() > 0.99);
    }

    #[test]
    fn binomial_toy_r2_v() {
        let r = r2_dv(&Family::binomial(), &[1.0, 0.0], &[0.75, 0.25]).unwrap();
        // 1 − 2·0.098497 / (2·0.329358)
        assert!((r - 0.7009).abs() < 1e-4, "{r}");
    }

    #[test]
    fn kl_examples() {
        let (y, x, _) = random_data(2, 10);
        let d = build_design(&dataset(y, x), &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
        let mut fit = fit_glm(&d, &Family::gaussian()).unwrap();
        fit.deviance = 0.0;
        assert_eq!(r2_kl(&fit).unwrap(), 1.0);
        fit.null_deviance = 0.0;
        assert!(r2_kl(&fit).is_err());
        // Poisson saturated fit: deviance zero at μ̂ = y
        let p = Family::poisson();
        assert_eq!(p.unit_deviance(1.0, 1.0) + p.unit_deviance(3.0, 3.0), 0.0);
    }

    #[test]
    fn adjustment_arithmetic() {
        let a = adjust(0.5, 99, 100).unwrap();
        assert!((a - (1.0 - 0.5 * 100.0 / 99.0)).abs() < 1e-15);
        assert!((a - 0.494949).abs() < 1e-6);
        assert_eq!(adjust(0.3, 50, 50).unwrap(), 0.3);
        assert!(adjust(0.3, 0, 50).is_err());
        assert!(adjust(0.3, 60, 50).is_err());
    }

    #[test]
    fn rejects_out_of_domain_response() {
        let d = build_design(
            &dataset(vec![0.0, 2.0, 1.0, 0.0, 1.0], vec![1.0, 2.0, 3.0, 4.0, 5.0]),
            &parse_formula("y ~ x + (1|g)").unwrap(),
        )
        .unwrap();
        assert!(matches!(fit_glm(&d, &Family::binomial()), Err(Error::Domain { index: Some(1), .. })));
    }

    #[test]
    fn adding_a_column_never_lowers_r2() {
        for seed in 0..10 {
            let (y, x, x2) = random_data(100 + seed, 30);
            let y: Vec<f64> = y.iter().map(|v| v.round().max(0.0)).collect();
            let data = dataset(y.clone(), x).with_column("x2", Column::Numeric(x2)).unwrap();
            let small = build_design(&data, &parse_formula("y ~ x + (1|g)").unwrap()).unwrap();
            let big = build_design(&data, &parse_formula("y ~ x + x2 + (1|g)").unwrap()).unwrap();
            for fam in [Family::gaussian(), Family::poisson()] {
                let a = fit_glm(&small, &fam).unwrap();
                let b = fit_glm(&big, &fam).unwrap();
                assert!(r2_kl(&b).unwrap() >= r2_kl(&a).unwrap() - 1e-12);
                if fam.kind() == FamilyKind::Gaussian {
                    assert!(r2_v(&b, &y).unwrap() >= r2_v(&a, &y).unwrap() - 1e-12);
                }
            }
        }
    }
}
