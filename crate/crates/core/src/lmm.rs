//! Random-intercept linear mixed model
//!
//! ```text
//! y_ij = x_ij'β + offset_ij + u_i + ε_ij,   u_i ~ N(0, τ²),  ε_ij ~ N(0, σ²)
//! ```
//!
//! fitted by ML or REML, and the conditional-shrinkage coefficients of
//! determination built on it.
//!
//! With `γ = τ²/σ²` the marginal covariance of group `i` is `σ²(I + γJ)` whose
//! inverse is `σ⁻²(I − c_i J)`, `c_i = γ/(1 + n_i γ)`. β is obtained by GLS and
//! σ² in closed form for each γ, so the likelihood is searched over `log γ`
//! alone, with the `τ² = 0` boundary compared explicitly.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignData;
use crate::error::{Error, Result};
use crate::stats::{mean, population_variance, total_sum_of_squares};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Ml,
    Reml,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    /// Random-intercept variance per observation (constant here).
    pub tau2_ij: Vec<f64>,
    /// `Xβ̂ + offset`.
    pub eta_f: Vec<f64>,
    /// `Xβ̂` without the offset.
    pub xbeta: Vec<f64>,
    /// Group BLUP broadcast to observations.
    pub eta_r: Vec<f64>,
    /// BLUP per group.
    pub blup: Vec<f64>,
    pub loglik: f64,
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub m: usize,
}

impl LmmFit {
    /// Number of estimated parameters: β plus σ² and τ².
    pub fn n_params(&self) -> usize {
        self.p + 2
    }
}

struct Profile<'a> {
    design: &'a DesignData,
    rows: Vec<Vec<usize>>,
    y: Vec<f64>,
    method: Method,
}

struct Point {
    loglik: f64,
    /// d loglik / d log γ (zero at γ = 0).
    dlog_gamma: f64,
    beta: DVector<f64>,
    /// r'(I − cJ)r
    quad: f64,
}

impl<'a> Profile<'a> {
    fn new(design: &'a DesignData, method: Method) -> Self {
        let y = design.y.iter().zip(&design.offset).map(|(y, o)| y - o).collect();
        Self {
            design,
            rows: design.group_rows(),
            y,
            method,
        }
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn p(&self) -> usize {
        self.design.p()
    }

    /// GLS quantities at variance ratio `gamma`.
    fn solve(&self, gamma: f64) -> Result<(DVector<f64>, f64, Vec<f64>, DMatrix<f64>)> {
        let x = &self.design.x;
        let p = self.p();
        // Whitening by (I − d_i J) with (I − d_i J)² = I − c_i J.
        let mut xs = x.clone();
        let mut ys = DVector::from_column_slice(&self.y);
        for rows in &self.rows {
            let ni = rows.len() as f64;
            let d = (1.0 - 1.0 / (1.0 + ni * gamma).sqrt()) / ni;
            if d == 0.0 {
                continue;
            }
            for j in 0..p {
                let s: f64 = rows.iter().map(|&r| x[(r, j)]).sum();
                for &r in rows {
                    xs[(r, j)] -= d * s;
                }
            }
            let s: f64 = rows.iter().map(|&r| self.y[r]).sum();
            for &r in rows {
                ys[r] -= d * s;
            }
        }
        let qr = xs.qr();
        let r = qr.r();
        if (0..p).any(|j| r[(j, j)] == 0.0 || !r[(j, j)].is_finite()) {
            return Err(Error::RankDeficient {
                term: "fixed effects".into(),
            });
        }
        let mut qty = ys;
        qr.q_tr_mul(&mut qty);
        let rhs = qty.rows(0, p).into_owned();
        let beta = r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::RankDeficient {
                term: "fixed effects".into(),
            })?;
        let resid: Vec<f64> = (0..self.n())
            .map(|i| self.y[i] - (x.row(i) * &beta)[(0, 0)])
            .collect();
        let sums: Vec<f64> = self.rows.iter().map(|rows| rows.iter().map(|&r| resid[r]).sum()).collect();
        let mut quad: f64 = resid.iter().map(|r| r * r).sum();
        for (rows, e) in self.rows.iter().zip(&sums) {
            let ni = rows.len() as f64;
            quad -= gamma / (1.0 + ni * gamma) * e * e;
        }
        Ok((beta, quad.max(0.0), sums, r))
    }

    fn eval(&self, gamma: f64) -> Result<Point> {
        let n = self.n() as f64;
        let p = self.p();
        let (beta, quad, sums, r) = self.solve(gamma)?;
        let log_det_v: f64 = self.rows.iter().map(|rows| (rows.len() as f64 * gamma).ln_1p()).sum();
        let mut dquad = 0.0; // -d(quad)/dγ
        let mut dlogdet_v = 0.0;
        for (rows, e) in self.rows.iter().zip(&sums) {
            let ni = rows.len() as f64;
            let a = 1.0 + ni * gamma;
            dquad += e * e / (a * a);
            dlogdet_v += ni / a;
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let (loglik, dgamma) = match self.method {
            Method::Ml => {
                let ll = -0.5 * n * ((two_pi * quad / n).ln() + 1.0) - 0.5 * log_det_v;
                let d = 0.5 * n * dquad / quad - 0.5 * dlogdet_v;
                (ll, d)
            }
            Method::Reml => {
                let dof = n - p as f64;
                let log_det_xhx: f64 = (0..p).map(|j| 2.0 * r[(j, j)].abs().ln()).sum();
                let x = &self.design.x;
                let mut dtrace = 0.0;
                for rows in &self.rows {
                    let ni = rows.len() as f64;
                    let a = 1.0 + ni * gamma;
                    let s = DVector::from_fn(p, |j, _| rows.iter().map(|&row| x[(row, j)]).sum());
                    let z = r.tr_solve_lower_triangular(&s).unwrap_or_else(|| DVector::zeros(p));
                    dtrace += z.norm_squared() / (a * a);
                }
                let ll = -0.5 * dof * ((two_pi * quad / dof).ln() + 1.0) - 0.5 * log_det_v - 0.5 * log_det_xhx;
                let d = 0.5 * dof * dquad / quad - 0.5 * dlogdet_v + 0.5 * dtrace;
                (ll, d)
            }
        };
        Ok(Point {
            loglik,
            dlog_gamma: gamma * dgamma,
            beta,
            quad,
        })
    }

    fn sigma2(&self, quad: f64) -> f64 {
        match self.method {
            Method::Ml => quad / self.n() as f64,
            Method::Reml => quad / (self.n() - self.p()) as f64,
        }
    }
}

const LOG_GAMMA_MIN: f64 = -15.0;
const LOG_GAMMA_MAX: f64 = 16.0;
const GRID_STEP: f64 = 0.5;
const MAX_ITER: usize = 500;

/// Root of `d loglik / d log γ` on `[lo, hi]` where the derivative changes
/// sign from positive to negative.
fn refine(profile: &Profile, mut lo: f64, mut hi: f64) -> Result<f64> {
    let mut iterations = 0;
    while hi - lo > 1e-13 * (1.0 + lo.abs()) {
        iterations += 1;
        if iterations > MAX_ITER {
            return Err(Error::NonConvergence {
                what: "variance ratio search".into(),
                iterations: MAX_ITER,
            });
        }
        let mid = 0.5 * (lo + hi);
        let d = profile.eval(mid.exp())?.dlog_gamma;
        if d > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fits the random-intercept LMM.
pub fn fit_lmm(design: &DesignData, method: Method) -> Result<LmmFit> {
    let n = design.n();
    let p = design.p();
    if n <= p + 1 {
        return Err(Error::InvalidModel(format!("need n > p + 1 observations (n = {n}, p = {p})")));
    }
    let profile = Profile::new(design, method);
    let sst = total_sum_of_squares(&profile.y);
    let boundary = profile.eval(0.0)?;
    if boundary.quad <= 1e-24 * sst.max(f64::MIN_POSITIVE) || boundary.quad == 0.0 {
        return Err(Error::ZeroResidualVariance);
    }

    let steps = ((LOG_GAMMA_MAX - LOG_GAMMA_MIN) / GRID_STEP).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| LOG_GAMMA_MIN + GRID_STEP * k as f64).collect();
    let mut values = Vec::with_capacity(grid.len());
    for &t in &grid {
        values.push(profile.eval(t.exp())?);
    }
    let best = (0..grid.len())
        .max_by(|&a, &b| values[a].loglik.total_cmp(&values[b].loglik))
        .expect("grid is nonempty");

    let interior = if values[best].dlog_gamma > 0.0 {
        if best + 1 < grid.len() && values[best + 1].dlog_gamma <= 0.0 {
            Some(refine(&profile, grid[best], grid[best + 1])?)
        } else if best + 1 == grid.len() {
            return Err(Error::ZeroResidualVariance);
        } else {
            Some(grid[best])
        }
    } else if best > 0 && values[best - 1].dlog_gamma > 0.0 {
        Some(refine(&profile, grid[best - 1], grid[best])?)
    } else if best == 0 {
        None
    } else {
        Some(grid[best])
    };

    let (gamma, point) = match interior {
        Some(t) => {
            let pt = profile.eval(t.exp())?;
            if boundary.loglik >= pt.loglik {
                (0.0, boundary)
            } else {
                (t.exp(), pt)
            }
        }
        None => (0.0, boundary),
    };

    let sigma2 = profile.sigma2(point.quad);
    let var_y = sst / n as f64;
    if !(sigma2 > 1e-12 * var_y) {
        return Err(Error::ZeroResidualVariance);
    }
    let tau2 = gamma * sigma2;
    let beta: Vec<f64> = point.beta.iter().copied().collect();
    let xbeta: Vec<f64> = (&design.x * &point.beta).iter().copied().collect();
    let eta_f: Vec<f64> = xbeta.iter().zip(&design.offset).map(|(a, o)| a + o).collect();
    let blup: Vec<f64> = profile
        .rows
        .iter()
        .map(|rows| {
            let ni = rows.len() as f64;
            let resid_mean = rows.iter().map(|&r| design.y[r] - eta_f[r]).sum::<f64>() / ni;
            tau2 / (tau2 + sigma2 / ni) * resid_mean
        })
        .collect();
    let eta_r = design.group_index.iter().map(|&g| blup[g]).collect();
    Ok(LmmFit {
        beta,
        sigma2,
        tau2,
        tau2_ij: vec![tau2; n],
        eta_f,
        xbeta,
        eta_r,
        blup,
        loglik: point.loglik,
        method,
        n,
        p,
        m: design.m(),
    })
}

/// Log-likelihood (or REML criterion) at given variance components with β
/// at its GLS estimate.
pub fn loglik_at(design: &DesignData, method: Method, sigma2: f64, tau2: f64) -> Result<f64> {
    let profile = Profile::new(design, method);
    let gamma = tau2 / sigma2;
    let (_, quad, _, r) = profile.solve(gamma)?;
    let n = design.n() as f64;
    let p = design.p();
    let log_det_v: f64 = profile.rows.iter().map(|rows| (rows.len() as f64 * gamma).ln_1p()).sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(match method {
        Method::Ml => -0.5 * (n * ln2pi + n * sigma2.ln() + log_det_v + quad / sigma2),
        Method::Reml => {
            let dof = n - p as f64;
            let log_det_xhx: f64 = (0..p).map(|j| 2.0 * r[(j, j)].abs().ln()).sum();
            -0.5 * (dof * ln2pi + dof * sigma2.ln() + log_det_v + log_det_xhx + quad / sigma2)
        }
    })
}

/// Expected squared residual of one observation given the data, with the
/// random intercept integrated over its conditional distribution:
/// `[σ²/(σ²+τ²)]·{τ² + [σ²/(σ²+τ²)]·(y − η^F)²}`.
pub fn per_obs_unexplained(y: f64, eta_f: f64, sigma2: f64, tau2: f64) -> f64 {
    debug_assert!(sigma2 > 0.0);
    let shrink = sigma2 / (sigma2 + tau2);
    let r = y - eta_f;
    shrink * (tau2 + shrink * r * r)
}

fn check_len(fit_n: usize, y: &[f64]) -> Result<()> {
    if fit_n != y.len() {
        return Err(Error::LengthMismatch {
            expected: fit_n,
            found: y.len(),
        });
    }
    Ok(())
}

fn sst_nonzero(y: &[f64]) -> Result<f64> {
    let sst = total_sum_of_squares(y);
    if sst > 0.0 {
        Ok(sst)
    } else {
        Err(Error::ZeroDenominator("total sum of squares"))
    }
}

/// Share of variation explained by the fixed effects, `1 − Σ(y − η̂^F)²/SST`.
pub fn r2_f_lmm(fit: &LmmFit, y: &[f64]) -> Result<f64> {
    check_len(fit.n, y)?;
    let sst = sst_nonzero(y)?;
    let sse: f64 = y.iter().zip(&fit.eta_f).map(|(y, e)| (y - e) * (y - e)).sum();
    Ok(1.0 - sse / sst)
}

/// Share of variation explained by fixed and random effects together.
pub fn r2_m_lmm(fit: &LmmFit, y: &[f64]) -> Result<f64> {
    check_len(fit.n, y)?;
    r2_m_from_parts(y, &fit.eta_f, fit.sigma2, &fit.tau2_ij)
}

pub fn r2_m_from_parts(y: &[f64], eta_f: &[f64], sigma2: f64, tau2_ij: &[f64]) -> Result<f64> {
    let sst = sst_nonzero(y)?;
    let unexplained: f64 = y
        .iter()
        .zip(eta_f)
        .zip(tau2_ij)
        .map(|((&y, &e), &t)| per_obs_unexplained(y, e, sigma2, t))
        .sum();
    Ok(1.0 - unexplained / sst)
}

/// Random-effects share, `R_M² − R_F²`. Negative values are returned as is.
pub fn r2_r(rm: f64, rf: f64) -> f64 {
    rm - rf
}

/// Xu's Ω², `1 − σ̃²/σ̂₀²`. The residual variance `σ̃²` is estimated from the
/// conditional residuals `y − η̂^F − η̂^R` (BLUPs included) and `σ̂₀² = SST/n`
/// is the variance of the response about its mean.
///
/// With σ̂² from the likelihood in place of σ̃², balanced ML fits make this
/// coincide with `R_M²` exactly; the residual form is the one that overfits
/// as groups shrink.
pub fn xu_omega2(fit: &LmmFit, y: &[f64]) -> Result<f64> {
    check_len(fit.n, y)?;
    let n = y.len() as f64;
    let rss: f64 = y
        .iter()
        .zip(fit.eta_f.iter().zip(&fit.eta_r))
        .map(|(y, (f, r))| (y - f - r).powi(2))
        .sum();
    omega2_ratio(rss / n, total_sum_of_squares(y) / n)
}

/// `1 − σ̂²/σ̂₀²` for given residual variances.
pub fn omega2_ratio(sigma2: f64, null_sigma2: f64) -> Result<f64> {
    if !(null_sigma2 > 0.0) {
        return Err(Error::ZeroDenominator("null model residual variance"));
    }
    Ok(1.0 - sigma2 / null_sigma2)
}

/// Marginal and conditional R² from variance components.
pub fn nakagawa_components(fixed_var: f64, tau2: f64, resid_var: f64) -> (f64, f64) {
    let total = fixed_var + tau2 + resid_var;
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    (fixed_var / total, (fixed_var + tau2) / total)
}

/// Nakagawa-style marginal and conditional R² for the LMM.
pub fn nakagawa_lmm(fit: &LmmFit) -> (f64, f64) {
    nakagawa_components(population_variance(&fit.xbeta), fit.tau2, fit.sigma2)
}

/// Mean of the response minus offset; handy for diagnostics.
pub fn adjusted_response_mean(design: &DesignData) -> f64 {
    let adj: Vec<f64> = design.y.iter().zip(&design.offset).map(|(y, o)| y - o).collect();
    mean(&adj)
}
