//! Per-model R² panels and multi-model comparison tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::design::{build_design, Column, Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::glm::{adjust, fit_glm, r2_kl, r2_v};
use crate::glmm::{
    fit_glmm, glmm_ic, information_criteria, nakagawa_glmm, r2_f_glmm, r2_m_glmm, ObsVarianceApprox, DEFAULT_NODES,
};
use crate::lmm::{fit_lmm, nakagawa_lmm, r2_f_lmm, r2_m_lmm, r2_r, xu_omega2, Method};
use crate::stats::format_sig10;
use crate::varfun::{FamilyKind, Link};

/// Largest tolerated gap between `R_F²` and `R_V²` of the same fixed-only GLM.
const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Variance-component estimation for gaussian models.
    pub method: Method,
    /// Quadrature nodes for non-gaussian models.
    pub nodes: usize,
    /// Refit as a GLM with the group as a fixed factor for `R_V²` and `R_KL²`.
    pub benchmarks: bool,
    pub approx: ObsVarianceApprox,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            method: Method::Ml,
            nodes: DEFAULT_NODES,
            benchmarks: false,
            approx: ObsVarianceApprox::Lognormal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Report {
    pub label: String,
    pub formula: String,
    pub family: String,
    /// `lmm-ml`, `lmm-reml`, or `glmm-agq<nodes>`.
    pub fitter: String,
    pub n: usize,
    /// Fixed-effect coefficients including the intercept.
    pub p: usize,
    pub m: usize,
    pub loglik: f64,
    pub tau2: f64,
    /// Residual variance of gaussian models.
    pub sigma2: Option<f64>,
    pub r2_m: f64,
    pub r2_f: f64,
    pub r2_r: f64,
    pub r2_m_adj: f64,
    pub r2_f_adj: f64,
    pub r2_r_adj: f64,
    pub nakagawa_marginal: f64,
    pub nakagawa_conditional: f64,
    pub xu_omega2: Option<f64>,
    pub r2_v: Option<f64>,
    pub r2_v_adj: Option<f64>,
    pub r2_kl: Option<f64>,
    pub r2_kl_adj: Option<f64>,
    pub aic: f64,
    pub bic: f64,
}

impl R2Report {
    /// Field order used by every tabular output.
    pub const COLUMNS: [&'static str; 26] = [
        "label",
        "formula",
        "family",
        "fitter",
        "n",
        "p",
        "m",
        "loglik",
        "tau2",
        "sigma2",
        "r2_m",
        "r2_f",
        "r2_r",
        "r2_m_adj",
        "r2_f_adj",
        "r2_r_adj",
        "nakagawa_marginal",
        "nakagawa_conditional",
        "xu_omega2",
        "r2_v",
        "r2_v_adj",
        "r2_kl",
        "r2_kl_adj",
        "aic",
        "bic",
        "status",
    ];

    /// Field values as text, numbers with ten significant digits, missing
    /// values as `None`.
    pub fn fields(&self) -> Vec<Option<String>> {
        let f = |x: f64| Some(format_sig10(x));
        let o = |x: Option<f64>| x.map(format_sig10);
        vec![
            Some(self.label.clone()),
            Some(self.formula.clone()),
            Some(self.family.clone()),
            Some(self.fitter.clone()),
            Some(self.n.to_string()),
            Some(self.p.to_string()),
            Some(self.m.to_string()),
            f(self.loglik),
            f(self.tau2),
            o(self.sigma2),
            f(self.r2_m),
            f(self.r2_f),
            f(self.r2_r),
            f(self.r2_m_adj),
            f(self.r2_f_adj),
            f(self.r2_r_adj),
            f(self.nakagawa_marginal),
            f(self.nakagawa_conditional),
            o(self.xu_omega2),
            o(self.r2_v),
            o(self.r2_v_adj),
            o(self.r2_kl),
            o(self.r2_kl_adj),
            f(self.aic),
            f(self.bic),
            Some("ok".into()),
        ]
    }

    /// JSON object with snake_case keys and numbers as ten-significant-digit
    /// strings; missing values are `null`.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        for (k, v) in Self::COLUMNS.iter().zip(self.fields()) {
            if *k == "status" {
                continue;
            }
            let v = match (*k, v) {
                ("n" | "p" | "m", Some(s)) => Value::from(s.parse::<u64>().expect("count")),
                (_, Some(s)) => Value::String(s),
                (_, None) => Value::Null,
            };
            obj.insert((*k).to_string(), v);
        }
        Value::Object(obj)
    }
}

/// Mixed-model adjustment: one variance component on top of the `p`
/// fixed coefficients.
fn adjust_mixed(r2: f64, n: usize, p: usize) -> Result<f64> {
    adjust(r2, n as i64 - p as i64 - 1, n as i64 - 1)
}

/// Fits one mixed model and fills every panel field. Errors carry `label`.
pub fn analyze_model(data: &Dataset, spec: &ModelSpec, options: &AnalysisOptions, label: &str) -> Result<R2Report> {
    analyze_inner(data, spec, options, label).map_err(|e| e.labeled(label))
}

fn analyze_inner(data: &Dataset, spec: &ModelSpec, options: &AnalysisOptions, label: &str) -> Result<R2Report> {
    let design = build_design(data, spec)?;
    let family = spec.family;
    let (n, p, m) = (design.n(), design.p(), design.m());
    let y = &design.y;

    let (benchmark_v, benchmark_kl) = if options.benchmarks {
        let grouped = design.with_group_as_fixed(&spec.group)?;
        let fit = fit_glm(&grouped, &family)?;
        let df = (n as i64 - grouped.p() as i64, n as i64 - 1);
        let v = r2_v(&fit, y)?;
        let kl = r2_kl(&fit)?;
        ((Some(v), Some(adjust(v, df.0, df.1)?)), (Some(kl), Some(adjust(kl, df.0, df.1)?)))
    } else {
        ((None, None), (None, None))
    };

    let gaussian_identity = family.kind() == FamilyKind::Gaussian && family.link() == Link::Identity;
    let (fitter, loglik, tau2, sigma2, r2_m, r2_f, nakagawa, xu, (aic, bic));
    if gaussian_identity {
        let fit = fit_lmm(&design, options.method)?;
        fitter = match options.method {
            Method::Ml => "lmm-ml".to_string(),
            Method::Reml => "lmm-reml".to_string(),
        };
        loglik = fit.loglik;
        tau2 = fit.tau2;
        sigma2 = Some(fit.sigma2);
        r2_m = r2_m_lmm(&fit, y)?;
        r2_f = r2_f_lmm(&fit, y)?;
        nakagawa = nakagawa_lmm(&fit);
        xu = Some(xu_omega2(&fit, y)?);
        (aic, bic) = information_criteria(fit.loglik, fit.n_params(), n);
    } else {
        let fit = fit_glmm(&design, &family, options.nodes)?;
        let fixed_only = fit_glm(&design, &family)?;
        fitter = format!("glmm-agq{}", options.nodes);
        loglik = fit.loglik;
        tau2 = fit.tau2;
        sigma2 = fit.dispersion;
        r2_m = r2_m_glmm(&fit, y)?;
        r2_f = r2_f_glmm(&fixed_only, y)?;
        let identity_gap = (r2_f - r2_v(&fixed_only, y)?).abs();
        if identity_gap > IDENTITY_TOL {
            return Err(Error::InvalidModel(format!(
                "fixed-effects share differs from the fixed-only GLM's variance-function R² by {identity_gap:e}"
            )));
        }
        let null = if family.kind() == FamilyKind::Poisson {
            Some(fit_glmm(&design.intercept_only(), &family, options.nodes)?)
        } else {
            None
        };
        nakagawa = nakagawa_glmm(&fit, options.approx, null.as_ref())?;
        xu = None;
        (aic, bic) = glmm_ic(&fit);
    }

    let r2_m_adj = adjust_mixed(r2_m, n, p)?;
    let r2_f_adj = adjust_mixed(r2_f, n, p)?;
    Ok(R2Report {
        label: label.to_string(),
        formula: spec.to_string(),
        family: family.to_string(),
        fitter,
        n,
        p,
        m,
        loglik,
        tau2,
        sigma2,
        r2_m,
        r2_f,
        r2_r: r2_r(r2_m, r2_f),
        r2_m_adj,
        r2_f_adj,
        r2_r_adj: r2_r(r2_m_adj, r2_f_adj),
        nakagawa_marginal: nakagawa.0,
        nakagawa_conditional: nakagawa.1,
        xu_omega2: xu,
        r2_v: benchmark_v.0,
        r2_v_adj: benchmark_v.1,
        r2_kl: benchmark_kl.0,
        r2_kl_adj: benchmark_kl.1,
        aic,
        bic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub formula: String,
    pub report: Option<R2Report>,
    pub error: Option<String>,
}

/// Row indices of the preferred models; ties go to the earliest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Highlights {
    pub best_aic: Option<usize>,
    pub best_bic: Option<usize>,
    pub best_r2_m_adj: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub highlights: Highlights,
}

fn pick<F: Fn(&R2Report) -> f64>(rows: &[TableRow], key: F, larger_is_better: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        let Some(r) = &row.report else { continue };
        let v = key(r);
        if !v.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, b)) => {
                if larger_is_better {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Analyses each labelled model. Failures are recorded on their row and the
/// remaining models still run. Rows keep the input order.
pub fn compare_models(data: &Dataset, specs: &[(String, ModelSpec)], options: &AnalysisOptions) -> Result<ComparisonTable> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no models to compare".into()));
    }
    let rows: Vec<TableRow> = specs
        .par_iter()
        .map(|(label, spec)| match analyze_inner(data, spec, options, label) {
            Ok(report) => TableRow {
                label: label.clone(),
                formula: spec.to_string(),
                report: Some(report),
                error: None,
            },
            Err(e) => TableRow {
                label: label.clone(),
                formula: spec.to_string(),
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let highlights = Highlights {
        best_aic: pick(&rows, |r| r.aic, false),
        best_bic: pick(&rows, |r| r.bic, false),
        best_r2_m_adj: pick(&rows, |r| r.r2_m_adj, true),
    };
    Ok(ComparisonTable { rows, highlights })
}

fn row_fields(row: &TableRow) -> Vec<Option<String>> {
    match &row.report {
        Some(r) => r.fields(),
        None => {
            let mut v = vec![None; R2Report::COLUMNS.len()];
            v[0] = Some(row.label.clone());
            v[1] = Some(row.formula.clone());
            v[R2Report::COLUMNS.len() - 1] = Some(format!("error: {}", row.error.as_deref().unwrap_or("unknown")));
            v
        }
    }
}

fn tsv_cell(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = R2Report::COLUMNS.join("\t");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row_fields(row)
                .into_iter()
                .map(|c| c.map(|s| tsv_cell(&s)).unwrap_or_else(|| "NA".into()))
                .collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Aligned markdown table:
    /// values to four decimals with the adjusted value in parentheses, and
    /// `*` marking the preferred model per criterion.
    pub fn to_markdown(&self) -> String {
        let header = [
            "Model", "R_M² (adj)", "Nakagawa cond.", "R_F² (adj)", "Nakagawa marg.", "R_R²", "Xu Ω²", "AIC", "BIC",
            "R_V² (adj)", "R_KL² (adj)",
        ];
        let d4 = |x: f64| format!("{x:.4}");
        let pair = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => format!("{} ({})", d4(a), d4(b)),
            _ => "NA".into(),
        };
        let star = |idx: Option<usize>, i: usize| if idx == Some(i) { "*" } else { "" };
        let mut body: Vec<Vec<String>> = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let cells = match &row.report {
                Some(r) => vec![
                    row.label.clone(),
                    format!("{}{}", pair(Some(r.r2_m), Some(r.r2_m_adj)), star(self.highlights.best_r2_m_adj, i)),
                    d4(r.nakagawa_conditional),
                    pair(Some(r.r2_f), Some(r.r2_f_adj)),
                    d4(r.nakagawa_marginal),
                    d4(r.r2_r),
                    r.xu_omega2.map(d4).unwrap_or_else(|| "NA".into()),
                    format!("{:.1}{}", r.aic, star(self.highlights.best_aic, i)),
                    format!("{:.1}{}", r.bic, star(self.highlights.best_bic, i)),
                    pair(r.r2_v, r.r2_v_adj),
                    pair(r.r2_kl, r.r2_kl_adj),
                ],
                None => {
                    let mut v = vec![row.label.clone()];
                    v.push(format!("failed: {}", row.error.as_deref().unwrap_or("unknown").replace('|', "/")));
                    v.resize(header.len(), String::new());
                    v
                }
            };
            body.push(cells);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|r| r[c].chars().count())
                    .chain(std::iter::once(header[c].chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: Vec<String>| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = line(header.iter().map(|s| s.to_string()).collect());
        out.push_str(&format!(
            "|{}|\n",
            widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
        ));
        for cells in body {
            out.push_str(&line(cells));
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let label = |i: Option<usize>| i.map(|i| Value::String(self.rows[i].label.clone())).unwrap_or(Value::Null);
        let models: Vec<Value> = self
            .rows
            .iter()
            .map(|row| match &row.report {
                Some(r) => r.to_json(),
                None => json!({
                    "label": row.label,
                    "formula": row.formula,
                    "error": row.error,
                }),
            })
            .collect();
        json!({
            "models": models,
            "highlights": {
                "best_aic": label(self.highlights.best_aic),
                "best_bic": label(self.highlights.best_bic),
                "best_r2_m_adj": label(self.highlights.best_r2_m_adj),
            }
        })
    }
}

/// Appends `name` holding the residuals of `column` regressed on the levels
/// of `by`, which amounts to centring within each level.
pub fn residualize(data: &Dataset, column: &str, by: &str, name: &str) -> Result<Dataset> {
    if data.names().iter().any(|n| n == name) {
        return Err(Error::InvalidArgument(format!("column `{name}` already exists")));
    }
    let values = data.numeric(column)?.to_vec();
    let codes: Vec<usize> = match data.column(by)? {
        Column::Categorical { codes, .. } => codes.clone(),
        Column::Numeric(v) => {
            let mut levels: Vec<f64> = v.clone();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            v.iter()
                .map(|x| levels.binary_search_by(|l| l.total_cmp(x)).expect("level present"))
                .collect()
        }
    };
    let k = codes.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&c, &v) in codes.iter().zip(&values) {
        sums[c] += v;
        counts[c] += 1;
    }
    let resid = codes
        .iter()
        .zip(&values)
        .map(|(&c, &v)| v - sums[c] / counts[c] as f64)
        .collect();
    data.clone().with_column(name, Column::Numeric(resid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::parse_formula;
    use crate::varfun::Family;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn corn_like(seed: u64, n_per: usize) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let (mut y, mut nit, mut b, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for region in 0..4 {
            let u = 2.0 * z.sample(&mut rng);
            let centre = 70.0 + 3.0 * region as f64;
            for j in 0..n_per {
                let level = ["N0", "N1", "N2", "N3", "N4"][j % 5];
                let nv = (j % 5) as f64;
                let bv = centre + 2.0 * z.sample(&mut rng);
                y.push(100.0 + u + 1.5 * nv - 0.4 * (bv - 70.0) + 0.05 * (bv - 70.0).powi(2) + z.sample(&mut rng));
                nit.push(level.to_string());
                b.push(bv);
                g.push(format!("R{region}"));
            }
        }
        Dataset::new(vec![
            ("yield".into(), Column::Numeric(y)),
            ("N".into(), Column::categorical(&nit)),
            ("B".into(), Column::Numeric(b)),
            ("region".into(), Column::categorical(&g)),
        ])
        .unwrap()
    }

    fn spec(f: &str) -> ModelSpec {
        parse_formula(f).unwrap()
    }

    #[test]
    fn intercept_only_gaussian() {
        let data = corn_like(1, 40);
        let r = analyze_model(&data, &spec("yield ~ 1 + (1|region)"), &AnalysisOptions::default(), "null").unwrap();
        assert!(r.r2_f.abs() < 1e-12);
        assert!((r.r2_r - r.r2_m).abs() < 1e-12);
        assert!((r.r2_r - (r.r2_m - r.r2_f)).abs() <= 1e-12);
    }

    #[test]
    fn nested_models_do_not_lose_r2_m() {
        let data = corn_like(3, 60);
        let specs: Vec<(String, ModelSpec)> = ["yield ~ N + (1|region)", "yield ~ N + B + (1|region)", "yield ~ N + B + B^2 + (1|region)"]
            .iter()
            .map(|f| (f.to_string(), spec(f)))
            .collect();
        let options = AnalysisOptions {
            benchmarks: true,
            ..AnalysisOptions::default()
        };
        let table = compare_models(&data, &specs, &options).unwrap();
        let r2: Vec<f64> = table.rows.iter().map(|r| r.report.as_ref().unwrap().r2_m).collect();
        assert!(r2.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{r2:?}");
        for row in &table.rows {
            let r = row.report.as_ref().unwrap();
            assert!(r.r2_m_adj <= r.r2_m && r.r2_f_adj <= r.r2_f);
            assert!(r.r2_v.is_some() && r.r2_kl_adj.is_some() && r.xu_omega2.is_some());
        }
        assert!(table.highlights.best_aic.is_some());
    }

    #[test]
    fn identical_specs_identical_rows_and_first_wins_ties() {
        let data = corn_like(5, 20);
        let s = spec("yield ~ B + (1|region)");
        let table = compare_models(&data, &[("a".into(), s.clone()), ("b".into(), s)], &AnalysisOptions::default()).unwrap();
        let (a, b) = (table.rows[0].report.clone().unwrap(), table.rows[1].report.clone().unwrap());
        assert_eq!(R2Report { label: "b".into(), ..a }, b);
        assert_eq!(table.highlights.best_aic, Some(0));
        assert_eq!(table.highlights.best_r2_m_adj, Some(0));
    }

    #[test]
    fn signal_wins_aic_and_failures_are_isolated() {
        let data = corn_like(7, 40);
        let specs = vec![
            ("null".to_string(), spec("yield ~ 1 + (1|region)")),
            ("bad".to_string(), spec("yield ~ missing + (1|region)")),
            ("N".to_string(), spec("yield ~ N + (1|region)")),
        ];
        let table = compare_models(&data, &specs, &AnalysisOptions::default()).unwrap();
        assert_eq!(table.highlights.best_aic, Some(2));
        assert!(table.rows[1].report.is_none() && table.rows[1].error.as_ref().unwrap().contains("missing"));
        let tsv = table.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().nth(2).unwrap().ends_with("missing`"));
        let md = table.to_markdown();
        assert!(md.contains("failed"));
        let json = table.to_json();
        assert_eq!(json["highlights"]["best_aic"], "N");
    }

    #[test]
    fn zero_random_variance_collapses_components() {
        // identical group compositions give τ̂² = 0
        let pattern = [1.0, 3.0, 2.0, 5.0, 4.0, 6.0];
        let (mut y, mut x, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..5 {
            for (j, &v) in pattern.iter().enumerate() {
                y.push(v);
                x.push(j as f64);
                g.push(i.to_string());
            }
        }
        let data = Dataset::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x)),
            ("g".into(), Column::categorical(&g)),
        ])
        .unwrap();
        let r = analyze_model(&data, &spec("y ~ x + (1|g)"), &AnalysisOptions::default(), "t").unwrap();
        assert_eq!(r.tau2, 0.0);
        assert!((r.r2_m - r.r2_f).abs() < 1e-12);
        assert!((r.nakagawa_conditional - r.nakagawa_marginal).abs() < 1e-12);
    }

    #[test]
    fn glmm_report_and_json_round_trip() {
        let data = crate::sim::generate(
            &crate::sim::SimConfig {
                n_obs: 120,
                m: 12,
                ..crate::sim::SimConfig::new(crate::sim::Study::LoglinearPoisson)
            },
            1.0,
            crate::sim::ReplicateKey { beta_index: 0, replicate: 0 },
        );
        let s = spec("y ~ x1 + (1|g)").with_family(Family::poisson());
        let options = AnalysisOptions {
            benchmarks: true,
            ..AnalysisOptions::default()
        };
        let r = analyze_model(&data, &s, &options, "pois").unwrap();
        assert!(r.xu_omega2.is_none() && r.r2_v.is_some());
        let text = serde_json::to_string(&r).unwrap();
        let back: R2Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let j = r.to_json();
        assert_eq!(j["r2_m"], Value::String(format_sig10(r.r2_m)));
        assert_eq!(j["xu_omega2"], Value::Null);
        assert_eq!(j["n"], 120);
    }

    #[test]
    fn errors_carry_the_label() {
        let data = corn_like(1, 10);
        let err = analyze_model(&data, &spec("yield ~ nope + (1|region)"), &AnalysisOptions::default(), "m7").unwrap_err();
        assert!(err.to_string().contains("m7"));
    }

    #[test]
    fn residualize_centres_within_levels() {
        let data = corn_like(2, 15);
        let out = residualize(&data, "B", "region", "B_r").unwrap();
        let r = out.numeric("B_r").unwrap();
        for level in 0..4 {
            let s: f64 = r[level * 15..(level + 1) * 15].iter().sum();
            assert!(s.abs() < 1e-9);
        }
        assert!(residualize(&data, "B", "region", "B").is_err());
    }
}
