//! Seeded Monte-Carlo studies for the mixed-model coefficients of
//! determination, summarised by medians over replicates.
//!
//! Every replicate draws from its own ChaCha stream keyed on
//! `(seed, beta index, replicate)`, so results do not depend on which other
//! replicates run or on how work is spread over threads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, parse_formula, Column, Dataset, DesignData};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, r2_kl, r2_v};
use crate::glmm::{fit_glmm, nakagawa_glmm, r2_f_glmm, r2_m_glmm, ObsVarianceApprox};
use crate::lmm::{fit_lmm, nakagawa_lmm, r2_f_lmm, r2_m_lmm, xu_omega2, Method};
use crate::stats::{format_sig10, median};
use crate::varfun::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Lmm,
    Logistic,
    LoglinearPoisson,
    LoglinearNegbin,
}

impl Study {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lmm" => Ok(Self::Lmm),
            "logistic" => Ok(Self::Logistic),
            "loglinear-poisson" | "poisson" => Ok(Self::LoglinearPoisson),
            "loglinear-negbin" | "negbin" => Ok(Self::LoglinearNegbin),
            other => Err(Error::InvalidArgument(format!("unknown study `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lmm => "lmm",
            Self::Logistic => "logistic",
            Self::LoglinearPoisson => "loglinear-poisson",
            Self::LoglinearNegbin => "loglinear-negbin",
        }
    }

    /// Family used to analyse the simulated responses. Overdispersed counts
    /// are still analysed with the poisson variance function.
    pub fn family(self) -> Family {
        match self {
            Self::Lmm => Family::gaussian(),
            Self::Logistic => Family::binomial(),
            Self::LoglinearPoisson | Self::LoglinearNegbin => Family::poisson(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    X1,
    X2,
}

impl Covariate {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x1" => Ok(Self::X1),
            "x2" => Ok(Self::X2),
            other => Err(Error::InvalidArgument(format!("unknown covariate `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::X1 => "x1",
            Self::X2 => "x2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    R2M,
    R2F,
    NakagawaConditional,
    NakagawaMarginal,
    XuOmega2,
    /// GLM with the group as a fixed factor.
    R2VGrouped,
    R2KlGrouped,
    /// GLM with the group dropped.
    R2VFixed,
    R2KlFixed,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Self::R2M => "r2_m",
            Self::R2F => "r2_f",
            Self::NakagawaConditional => "nakagawa_conditional",
            Self::NakagawaMarginal => "nakagawa_marginal",
            Self::XuOmega2 => "xu_omega2",
            Self::R2VGrouped => "r2_v_grouped",
            Self::R2KlGrouped => "r2_kl_grouped",
            Self::R2VFixed => "r2_v_fixed",
            Self::R2KlFixed => "r2_kl_fixed",
        }
    }

    /// Measures reported for a study, in output order.
    pub fn for_study(study: Study, benchmarks: bool) -> Vec<Measure> {
        let mut v = vec![Self::R2M, Self::R2F, Self::NakagawaConditional, Self::NakagawaMarginal];
        if study == Study::Lmm {
            v.push(Self::XuOmega2);
        }
        if benchmarks {
            v.extend([Self::R2VGrouped, Self::R2KlGrouped, Self::R2VFixed, Self::R2KlFixed]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub study: Study,
    pub n_obs: usize,
    pub m: usize,
    pub beta_grid: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    /// Standard deviation of the group intercepts.
    pub random_sd: f64,
    /// Models fitted to each replicate, one per covariate.
    pub covariates: Vec<Covariate>,
    /// Number of successes `r` for the negative-binomial counts.
    pub negbin_size: f64,
    pub nodes: usize,
    pub lmm_method: Method,
    /// Fixed-effects GLM benchmarks (`R_V²`, `R_KL²`).
    pub benchmarks: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Keep every replicate's values in the result.
    pub keep_raw: bool,
}

impl SimConfig {
    /// Defaults matching each study's design: 200 observations in 50 groups
    /// for the linear study, 400 observations otherwise.
    pub fn new(study: Study) -> Self {
        let (n_obs, random_sd) = match study {
            Study::Lmm => (200, 1.0),
            Study::Logistic => (400, 1.0),
            Study::LoglinearPoisson | Study::LoglinearNegbin => (400, 0.5),
        };
        Self {
            study,
            n_obs,
            m: 50,
            beta_grid: parse_beta_grid("0:2:0.25").expect("default grid"),
            replicates: 200,
            seed: 42,
            random_sd,
            covariates: vec![Covariate::X1, Covariate::X2],
            negbin_size: 1.0,
            nodes: crate::glmm::DEFAULT_NODES,
            lmm_method: Method::Ml,
            benchmarks: study != Study::Lmm,
            threads: None,
            keep_raw: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n_obs == 0 || !self.n_obs.is_multiple_of(self.m) {
            return Err(Error::InvalidArgument(format!(
                "{} observations cannot be split evenly into {} groups",
                self.n_obs, self.m
            )));
        }
        if self.n_obs / self.m < 2 {
            return Err(Error::InvalidArgument("each group needs at least two observations".into()));
        }
        if self.beta_grid.is_empty() || self.beta_grid.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("beta grid must be nonempty and finite".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be positive".into()));
        }
        if !self.random_sd.is_finite() || self.random_sd < 0.0 {
            return Err(Error::InvalidArgument("random-effect sd must be nonnegative".into()));
        }
        if !(self.negbin_size > 0.0) {
            return Err(Error::InvalidArgument("negative-binomial size must be positive".into()));
        }
        if self.covariates.is_empty() {
            return Err(Error::InvalidArgument("at least one covariate model is required".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("thread count must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `start:stop:step` (stop included when hit within 1e-12) or a
/// comma-separated list.
pub fn parse_beta_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("invalid beta grid `{text}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
            return Err(bad());
        }
        let mut grid = Vec::new();
        let mut k = 0u32;
        loop {
            let v = start + f64::from(k) * step;
            if (v - stop).abs() <= 1e-12 {
                grid.push(stop);
                break;
            }
            if v > stop {
                break;
            }
            grid.push(v);
            k += 1;
            if k > 1_000_000 {
                return Err(bad());
            }
        }
        Ok(grid)
    } else {
        let grid: Vec<f64> = text.split(',').map(num).collect::<Result<_>>()?;
        if grid.is_empty() || grid.iter().any(|b| !b.is_finite()) {
            return Err(bad());
        }
        Ok(grid)
    }
}

/// Identifies one simulated data set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateKey {
    pub beta_index: usize,
    pub replicate: usize,
}

fn stream(seed: u64, key: ReplicateKey) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((key.beta_index as u64) << 32) | key.replicate as u64);
    rng
}

/// Draws the shared structure of every study and returns the response
/// sampler's inputs: group labels, `x1`, `x2`, and each group's intercept.
fn skeleton(config: &SimConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = config.n_obs / config.m;
    let width = (config.m.max(2) - 1).to_string().len();
    let mut g = Vec::with_capacity(config.n_obs);
    let mut x1 = Vec::with_capacity(config.n_obs);
    let mut x2 = Vec::with_capacity(config.n_obs);
    let mut mu = Vec::with_capacity(config.n_obs);
    for i in 0..config.m {
        let z: f64 = rng.sample(StandardNormal);
        let mu_i = config.random_sd * z;
        for j in 0..k {
            g.push(format!("{i:0width$}"));
            x1.push(if j < k / 2 { 1.0 } else { -1.0 });
            x2.push(rng.sample(StandardNormal));
            mu.push(mu_i);
        }
    }
    (g, x1, x2, mu)
}

fn assemble(y: Vec<f64>, x1: Vec<f64>, x2: Vec<f64>, g: Vec<String>) -> Dataset {
    Dataset::new(vec![
        ("y".into(), Column::Numeric(y)),
        ("x1".into(), Column::Numeric(x1)),
        ("x2".into(), Column::Numeric(x2)),
        ("g".into(), Column::categorical(&g)),
    ])
    .expect("columns of equal length")
}

/// `y = μ_i + β·x1 + ε` with `ε ~ N(0, 1)`.
pub fn generate_lmm(config: &SimConfig, beta: f64, key: ReplicateKey) -> Dataset {
    let mut rng = stream(config.seed, key);
    let (g, x1, x2, mu) = skeleton(config, &mut rng);
    let y = mu
        .iter()
        .zip(&x1)
        .map(|(m, x)| {
            let e: f64 = rng.sample(StandardNormal);
            m + x * beta + e
        })
        .collect();
    assemble(y, x1, x2, g)
}

/// Bernoulli responses with mean `1/(1 + exp(−μ_i − β·x1))`.
pub fn generate_logistic(config: &SimConfig, beta: f64, key: ReplicateKey) -> Dataset {
    let mut rng = stream(config.seed, key);
    let (g, x1, x2, mu) = skeleton(config, &mut rng);
    let y = mu
        .iter()
        .zip(&x1)
        .map(|(m, x)| {
            let p = 1.0 / (1.0 + (-m - x * beta).exp());
            f64::from(rng.random::<f64>() < p)
        })
        .collect();
    assemble(y, x1, x2, g)
}

fn poisson_draw(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("finite positive rate").sample(rng)
}

/// Poisson counts with mean `exp(μ_i + β·x1)`, or negative-binomial failure
/// counts before `r` successes with success probability
/// `1/(1 + exp(−μ_i − β·x1))`, drawn as a gamma–poisson mixture.
pub fn generate_loglinear(config: &SimConfig, beta: f64, key: ReplicateKey) -> Dataset {
    let mut rng = stream(config.seed, key);
    let (g, x1, x2, mu) = skeleton(config, &mut rng);
    let negbin = config.study == Study::LoglinearNegbin;
    let y = mu
        .iter()
        .zip(&x1)
        .map(|(m, x)| {
            let eta = m + x * beta;
            if negbin {
                // (1 − p)/p = exp(−η)
                let scale = (-eta).exp();
                let lambda = Gamma::new(config.negbin_size, scale).expect("positive gamma parameters").sample(&mut rng);
                poisson_draw(&mut rng, lambda)
            } else {
                poisson_draw(&mut rng, eta.exp())
            }
        })
        .collect();
    assemble(y, x1, x2, g)
}

pub fn generate(config: &SimConfig, beta: f64, key: ReplicateKey) -> Dataset {
    match config.study {
        Study::Lmm => generate_lmm(config, beta, key),
        Study::Logistic => generate_logistic(config, beta, key),
        Study::LoglinearPoisson | Study::LoglinearNegbin => generate_loglinear(config, beta, key),
    }
}

/// One replicate's value of one measure under one covariate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateValue {
    pub beta_index: usize,
    pub replicate: usize,
    pub model: Covariate,
    pub measure: Measure,
    /// `None` when the fit or the measure failed.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub beta: f64,
    pub measure: Measure,
    pub model: Covariate,
    /// `None` when every replicate failed.
    pub median: Option<f64>,
    pub n_ok: usize,
    pub n_fail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub rows: Vec<SummaryRow>,
    /// Some grid point lost more than 5% of its replicates to failures.
    pub flagged: bool,
    pub raw: Option<Vec<ReplicateValue>>,
}

impl SimResult {
    pub fn median(&self, beta: f64, model: Covariate, measure: Measure) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.beta == beta && r.model == model && r.measure == measure)
            .and_then(|r| r.median)
    }

    /// Tidy CSV with ten significant digits in the median column.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["study", "beta", "measure", "model", "median", "n_ok", "n_fail"])?;
        for r in &self.rows {
            w.write_record([
                self.config.study.name().to_string(),
                format!("{}", r.beta),
                r.measure.name().to_string(),
                r.model.name().to_string(),
                r.median.map(format_sig10).unwrap_or_else(|| "NA".into()),
                r.n_ok.to_string(),
                r.n_fail.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Formulas {
    by_covariate: Vec<(Covariate, crate::design::ModelSpec)>,
    null: crate::design::ModelSpec,
}

impl Formulas {
    fn new(config: &SimConfig) -> Self {
        let family = config.study.family();
        let spec = |f: &str| parse_formula(f).expect("static formula").with_family(family);
        Self {
            by_covariate: config
                .covariates
                .iter()
                .map(|&c| (c, spec(&format!("y ~ {} + (1|g)", c.name()))))
                .collect(),
            null: spec("y ~ 1 + (1|g)"),
        }
    }
}

type Values = Vec<(Measure, Option<f64>)>;

fn benchmark_values(design: &DesignData, family: &Family) -> Values {
    let mut out = Vec::with_capacity(4);
    let grouped = design.with_group_as_fixed("g").and_then(|d| fit_glm(&d, family));
    match grouped {
        Ok(fit) => {
            out.push((Measure::R2VGrouped, r2_v(&fit, &design.y).ok()));
            out.push((Measure::R2KlGrouped, r2_kl(&fit).ok()));
        }
        Err(_) => out.extend([(Measure::R2VGrouped, None), (Measure::R2KlGrouped, None)]),
    }
    match fit_glm(design, family) {
        Ok(fit) => {
            out.push((Measure::R2VFixed, r2_v(&fit, &design.y).ok()));
            out.push((Measure::R2KlFixed, r2_kl(&fit).ok()));
        }
        Err(_) => out.extend([(Measure::R2VFixed, None), (Measure::R2KlFixed, None)]),
    }
    out
}

fn lmm_values(config: &SimConfig, design: &DesignData) -> Values {
    let Ok(fit) = fit_lmm(design, config.lmm_method) else {
        return Vec::new();
    };
    let (marg, cond) = nakagawa_lmm(&fit);
    let mut v = vec![
        (Measure::R2M, r2_m_lmm(&fit, &design.y).ok()),
        (Measure::R2F, r2_f_lmm(&fit, &design.y).ok()),
        (Measure::NakagawaConditional, Some(cond)),
        (Measure::NakagawaMarginal, Some(marg)),
        (Measure::XuOmega2, xu_omega2(&fit, &design.y).ok()),
    ];
    if config.benchmarks {
        v.extend(benchmark_values(design, &Family::gaussian()));
    }
    v
}

fn glmm_values(config: &SimConfig, design: &DesignData, null: Option<&crate::glmm::GlmmFit>) -> Values {
    let family = config.study.family();
    let Ok(fit) = fit_glmm(design, &family, config.nodes) else {
        return Vec::new();
    };
    let fixed_only = fit_glm(design, &family);
    let nak = match family.kind() {
        crate::varfun::FamilyKind::Poisson => null.and_then(|n| nakagawa_glmm(&fit, ObsVarianceApprox::Lognormal, Some(n)).ok()),
        _ => nakagawa_glmm(&fit, ObsVarianceApprox::Lognormal, None).ok(),
    };
    let mut v = vec![
        (Measure::R2M, r2_m_glmm(&fit, &design.y).ok()),
        (Measure::R2F, fixed_only.ok().and_then(|f| r2_f_glmm(&f, &design.y).ok())),
        (Measure::NakagawaConditional, nak.map(|x| x.1)),
        (Measure::NakagawaMarginal, nak.map(|x| x.0)),
    ];
    if config.benchmarks {
        v.extend(benchmark_values(design, &family));
    }
    v
}

/// Generates one data set and evaluates every configured measure under each
/// covariate model.
pub fn run_replicate(config: &SimConfig, key: ReplicateKey) -> Vec<ReplicateValue> {
    let formulas = Formulas::new(config);
    run_replicate_with(config, &formulas, key)
}

fn run_replicate_with(config: &SimConfig, formulas: &Formulas, key: ReplicateKey) -> Vec<ReplicateValue> {
    let beta = config.beta_grid[key.beta_index];
    let data = generate(config, beta, key);
    let measures = Measure::for_study(config.study, config.benchmarks);
    let null_design = build_design(&data, &formulas.null).ok();
    // the poisson comparator needs the intercept-only mixed model
    let glmm_null = match (config.study, null_design.as_ref()) {
        (Study::LoglinearPoisson | Study::LoglinearNegbin, Some(d)) => fit_glmm(d, &config.study.family(), config.nodes).ok(),
        _ => None,
    };
    let mut out = Vec::with_capacity(measures.len() * formulas.by_covariate.len());
    for (cov, spec) in &formulas.by_covariate {
        let values = match build_design(&data, spec) {
            Ok(design) => match config.study {
                Study::Lmm => lmm_values(config, &design),
                _ => glmm_values(config, &design, glmm_null.as_ref()),
            },
            Err(_) => Vec::new(),
        };
        for &measure in &measures {
            let value = values
                .iter()
                .find(|(m, _)| *m == measure)
                .and_then(|(_, v)| *v)
                .filter(|v| v.is_finite());
            out.push(ReplicateValue {
                beta_index: key.beta_index,
                replicate: key.replicate,
                model: *cov,
                measure,
                value,
            });
        }
    }
    out
}

/// Runs every replicate at every grid point and reduces to medians. The
/// reduction sees replicate values in key order, so the result is identical
/// for any thread count.
pub fn run_study(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let formulas = Formulas::new(config);
    let keys: Vec<ReplicateKey> = (0..config.beta_grid.len())
        .flat_map(|b| (0..config.replicates).map(move |r| ReplicateKey { beta_index: b, replicate: r }))
        .collect();
    let work = || -> Vec<Vec<ReplicateValue>> {
        keys.par_iter().map(|&k| run_replicate_with(config, &formulas, k)).collect()
    };
    let per_replicate = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let raw: Vec<ReplicateValue> = per_replicate.into_iter().flatten().collect();

    let measures = Measure::for_study(config.study, config.benchmarks);
    let mut rows = Vec::new();
    let mut flagged = false;
    for (bi, &beta) in config.beta_grid.iter().enumerate() {
        for &model in &config.covariates {
            for &measure in &measures {
                let values: Vec<Option<f64>> = raw
                    .iter()
                    .filter(|v| v.beta_index == bi && v.model == model && v.measure == measure)
                    .map(|v| v.value)
                    .collect();
                let ok: Vec<f64> = values.iter().flatten().copied().collect();
                let n_fail = values.len() - ok.len();
                if n_fail as f64 > 0.05 * config.replicates as f64 {
                    flagged = true;
                }
                rows.push(SummaryRow {
                    beta,
                    measure,
                    model,
                    median: median(&ok),
                    n_ok: ok.len(),
                    n_fail,
                });
            }
        }
    }
    Ok(SimResult {
        config: config.clone(),
        rows,
        flagged,
        raw: config.keep_raw.then_some(raw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, population_variance};

    fn small(study: Study) -> SimConfig {
        SimConfig {
            n_obs: 40,
            m: 10,
            replicates: 3,
            beta_grid: vec![0.0, 1.0],
            ..SimConfig::new(study)
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_beta_grid("0:2:0.5").unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(parse_beta_grid("0:1:0.1").unwrap().len(), 11);
        assert_eq!(*parse_beta_grid("0:1:0.1").unwrap().last().unwrap(), 1.0);
        assert_eq!(parse_beta_grid("0:1:0.3").unwrap().len(), 4);
        assert_eq!(parse_beta_grid("0, 0.5,2").unwrap(), vec![0.0, 0.5, 2.0]);
        for bad in ["0:1", "0:1:0", "1:0:0.5", "a", ""] {
            assert!(parse_beta_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn lmm_design_layout() {
        let config = SimConfig {
            n_obs: 200,
            m: 10,
            ..SimConfig::new(Study::Lmm)
        };
        let d = generate_lmm(&config, 1.0, ReplicateKey { beta_index: 0, replicate: 0 });
        let x1 = d.numeric("x1").unwrap();
        for i in 0..10 {
            let block = &x1[i * 20..(i + 1) * 20];
            assert_eq!(block.iter().filter(|&&v| v == 1.0).count(), 10);
        }
    }

    #[test]
    fn lmm_pooled_variance() {
        // var(y) = β² + 1 + 1 at β = 1
        let config = SimConfig::new(Study::Lmm);
        let mut pooled = Vec::new();
        for r in 0..200 {
            let d = generate_lmm(&config, 1.0, ReplicateKey { beta_index: 0, replicate: r });
            pooled.extend_from_slice(d.numeric("y").unwrap());
        }
        assert!((population_variance(&pooled) - 3.0).abs() < 0.1);
    }

    #[test]
    fn lmm_null_correlation() {
        let config = SimConfig::new(Study::Lmm);
        let mut cors = Vec::new();
        for r in 0..100 {
            let d = generate_lmm(&config, 0.0, ReplicateKey { beta_index: 0, replicate: r });
            let (y, x) = (d.numeric("y").unwrap(), d.numeric("x1").unwrap());
            let (my, mx) = (mean(y), mean(x));
            let sxy: f64 = y.iter().zip(x).map(|(a, b)| (a - my) * (b - mx)).sum();
            let sxx: f64 = x.iter().map(|b| (b - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
            cors.push(sxy / (sxx * syy).sqrt());
        }
        assert!(median(&cors).unwrap().abs() < 0.03);
    }

    #[test]
    fn logistic_generation() {
        let mut config = SimConfig::new(Study::Logistic);
        config.random_sd = 0.0;
        let mut pooled = Vec::new();
        for r in 0..20 {
            let d = generate_logistic(&config, 0.0, ReplicateKey { beta_index: 0, replicate: r });
            pooled.extend_from_slice(d.numeric("y").unwrap());
        }
        assert!((mean(&pooled) - 0.5).abs() < 0.02);

        config.random_sd = 1.0;
        let mut pooled = Vec::new();
        for r in 0..20 {
            let d = generate_logistic(&config, 1.0, ReplicateKey { beta_index: 0, replicate: r });
            pooled.extend_from_slice(d.numeric("y").unwrap());
        }
        assert!((mean(&pooled) - 0.5).abs() < 0.03);

        let d = generate_logistic(&config, 40.0, ReplicateKey { beta_index: 0, replicate: 0 });
        let (y, x) = (d.numeric("y").unwrap(), d.numeric("x1").unwrap());
        let top: Vec<f64> = y.iter().zip(x).filter(|(_, &x)| x == 1.0).map(|(y, _)| *y).collect();
        assert!(mean(&top) > 0.99);
    }

    #[test]
    fn loglinear_generation() {
        let mut config = SimConfig::new(Study::LoglinearPoisson);
        config.random_sd = 0.0;
        let mut pooled = Vec::new();
        for r in 0..20 {
            let d = generate_loglinear(&config, 0.0, ReplicateKey { beta_index: 0, replicate: r });
            pooled.extend_from_slice(d.numeric("y").unwrap());
        }
        assert!((mean(&pooled) - 1.0).abs() < 0.05);

        // within-group ratio of means between the x1 halves is e^{2β}
        config.random_sd = 0.5;
        let (mut hi, mut lo) = (0.0, 0.0);
        for r in 0..50 {
            let d = generate_loglinear(&config, 1.0, ReplicateKey { beta_index: 0, replicate: r });
            for (y, x) in d.numeric("y").unwrap().iter().zip(d.numeric("x1").unwrap()) {
                if *x > 0.0 {
                    hi += y;
                } else {
                    lo += y;
                }
            }
        }
        let ratio = hi / lo;
        let target = 2f64.exp();
        assert!((ratio / target - 1.0).abs() < 0.1, "{ratio}");

        // geometric failures at p = 1/2 have mean 1
        let mut config = SimConfig::new(Study::LoglinearNegbin);
        config.random_sd = 0.0;
        let mut pooled = Vec::new();
        for r in 0..50 {
            let d = generate_loglinear(&config, 0.0, ReplicateKey { beta_index: 0, replicate: r });
            pooled.extend_from_slice(d.numeric("y").unwrap());
        }
        assert!((mean(&pooled) - 1.0).abs() < 0.05);
    }

    #[test]
    fn replicate_streams_are_independent_of_grid_size() {
        let a = SimConfig {
            replicates: 2,
            ..small(Study::Lmm)
        };
        let b = SimConfig {
            replicates: 5,
            beta_grid: vec![0.0, 1.0, 2.0],
            ..small(Study::Lmm)
        };
        let key = ReplicateKey { beta_index: 1, replicate: 1 };
        assert_eq!(generate(&a, 1.0, key), generate(&b, 1.0, key));
        let ra = run_study(&SimConfig { keep_raw: true, ..a }).unwrap();
        let rb = run_study(&SimConfig { keep_raw: true, ..b }).unwrap();
        let pick = |r: &SimResult| -> Vec<ReplicateValue> {
            r.raw.as_ref().unwrap().iter().filter(|v| v.beta_index == 1 && v.replicate == 1).cloned().collect()
        };
        assert_eq!(pick(&ra), pick(&rb));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        for study in [Study::Lmm, Study::Logistic, Study::LoglinearNegbin] {
            let one = run_study(&SimConfig { threads: Some(1), ..small(study) }).unwrap();
            let many = run_study(&SimConfig { threads: Some(3), ..small(study) }).unwrap();
            assert_eq!(one.rows, many.rows);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            one.write_csv(&mut a).unwrap();
            many.write_csv(&mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn summary_shape() {
        let config = small(Study::LoglinearPoisson);
        let res = run_study(&config).unwrap();
        let per = Measure::for_study(config.study, config.benchmarks).len();
        assert_eq!(res.rows.len(), 2 * 2 * per);
        for r in &res.rows {
            assert_eq!(r.n_ok + r.n_fail, 3);
        }
        assert!(res.median(1.0, Covariate::X1, Measure::R2M).is_some());
    }

    #[test]
    fn rejects_uneven_groups() {
        let config = SimConfig {
            n_obs: 41,
            ..small(Study::Lmm)
        };
        assert!(matches!(run_study(&config), Err(Error::InvalidArgument(_))));
    }
}
