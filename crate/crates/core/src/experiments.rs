//! Analytic bias formulas, efficiency oracles and the repeated-sampling
//! studies (coverage bias at the Laplace model, Poisson regression with
//! outliers, variance ordering across the Cressie-Read family).

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cressie_read::gelr;
use crate::data::{
    contaminated_poisson, laplace_draws, ContaminationConfig, Dataset, ExponentialFamilyModel, ParametricModel, Prior,
};
use crate::error::{CrelError, Result};
use crate::estimating::{m_estimate, psi_huber, psi_mean, psi_median, psi_ml_score, psi_tukey, EstimatingFunction, PsiKind};
use crate::expansion::{compute_tensors, g_tensor, gelr_expansion};
use crate::posterior::{
    posterior_cdf_at, posterior_quantile, sample_parametric_posterior, sample_posterior_from,
    GridPosterior, PosteriorConfig,
};
use crate::rng;
use crate::stats::{integrate, mean, median, norm_pdf, norm_quantile, variance};

// stream tags, one per study
const TAG_TABLE1: u64 = 0x7ab1e1;
const TAG_TABLE3: u64 = 0x7ab1e3;
const TAG_THM5: u64 = 0x7e05;
const TAG_WILKS: u64 = 0x3111c5;
const TAG_VALIDITY: u64 = 0x7a11d;
const TAG_EXPANSION: u64 = 0xe8a2;
const TAG_CANCEL: u64 = 0xca2ce1;

/// Plug-in bias terms at one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasReport {
    pub alpha: f64,
    pub bias_coverage: f64,
    pub bias_quantile: f64,
    pub r_term: f64,
    pub rstar_term: f64,
    pub eff_inv: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CrelError::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn check_eff(eff_inv: f64) -> Result<()> {
    // allow rounding just below the Cramer-Rao bound
    if eff_inv >= 1.0 - 1e-9 && eff_inv.is_finite() {
        Ok(())
    } else {
        Err(CrelError::Domain(format!("inverse efficiency must be at least 1, got {eff_inv}")))
    }
}

/// `phi(z) z (sqrt(eff_inv) - 1)` with `z = Phi^{-1}(alpha)`.
pub fn bias_coverage(alpha: f64, eff_inv: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_eff(eff_inv)?;
    let z = norm_quantile(alpha);
    Ok(norm_pdf(z) * z * (eff_inv.max(1.0).sqrt() - 1.0))
}

/// `z sqrt(var_ml) (sqrt(eff_inv) - 1)`.
pub fn bias_quantile(alpha: f64, eff_inv: f64, var_ml: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_eff(eff_inv)?;
    if !(var_ml > 0.0) {
        return Err(CrelError::Domain(format!("ML variance must be positive, got {var_ml}")));
    }
    Ok(norm_quantile(alpha) * var_ml.sqrt() * (eff_inv.max(1.0).sqrt() - 1.0))
}

fn scalar_score(model: &ParametricModel, x: f64) -> Result<f64> {
    match model {
        ParametricModel::Laplace { scale } => Ok(x.signum() / scale),
        ParametricModel::NormalLocation { sigma } => Ok(x / (sigma * sigma)),
        _ => Err(CrelError::Domain("efficiency needs a scalar location model".into())),
    }
}

fn scalar_psi(psi: &EstimatingFunction, model: &ParametricModel, x: f64) -> Result<f64> {
    match psi.kind() {
        PsiKind::MlScore(m) => scalar_score(m, x),
        _ => psi.value_at(x, 0.0).map_err(|_| {
            CrelError::Domain(format!("efficiency of `{}` under {model:?} is not available", psi.label()))
        }),
    }
}

/// Asymptotic variance of the M-estimator over that of the ML estimator,
/// `(Omega / V^2) I_F`, with `Omega = E psi^2` and `V = E[psi s]` (which equals
/// `-E dpsi/dtheta` for smooth `psi` and stays valid for the median).
/// Integrals are computed by adaptive quadrature at location 0.
pub fn asymptotic_efficiency_inv(psi: &EstimatingFunction, model: &ParametricModel) -> Result<f64> {
    let info = model
        .fisher_information()
        .ok_or_else(|| CrelError::Domain("efficiency needs a scalar location model".into()))?;
    let dens = |x: f64| model.standard_density(x).unwrap_or(0.0);
    let unit = match model {
        ParametricModel::Laplace { scale } => *scale,
        ParametricModel::NormalLocation { sigma } => *sigma,
        _ => unreachable!(),
    };
    let width = 60.0 * unit;
    // unit-spaced breaks keep the adaptive rule from skipping the mass
    let mut breaks: Vec<f64> = (-60..=60).map(|k| k as f64 * unit).collect();
    match psi.kind() {
        PsiKind::Huber { c } => breaks.extend([-c, *c]),
        PsiKind::Tukey { k } => breaks.extend([-k, *k]),
        _ => {}
    }
    // probe the integrand once so a bad psi/model pairing fails early
    scalar_psi(psi, model, 1.0)?;
    let sq = |x: f64| scalar_psi(psi, model, x).map_or(f64::NAN, |p| p * p * dens(x));
    let cross = |x: f64| {
        let p = scalar_psi(psi, model, x).unwrap_or(f64::NAN);
        p * scalar_score(model, x).unwrap_or(f64::NAN) * dens(x)
    };
    let omega = integrate(&sq, -width, width, &breaks, 1e-12)?;
    let v = integrate(&cross, -width, width, &breaks, 1e-12)?;
    if v.abs() < 1e-300 {
        return Err(CrelError::Quadrature("psi is uncorrelated with the score".into()));
    }
    Ok(omega / (v * v) * info)
}

struct PlugIns {
    n: f64,
    theta_m: f64,
    theta_ml: f64,
    nu_inv11: f64,
    l_inv11: f64,
    l11: f64,
    l111: f64,
    g111: f64,
    xi_m: f64,
    xi_ml: f64,
}

fn plug_ins(data: &Dataset, psi: &EstimatingFunction, model: &ParametricModel, prior: &Prior) -> Result<PlugIns> {
    let theta_m = m_estimate(psi, data)?.theta_hat;
    let theta_ml = model.ml_fit(data)?;
    let t = compute_tensors(data, psi, &theta_m)?;
    let l2 = model.info2(data, &theta_ml)?;
    let l_inv = l2.clone().try_inverse().ok_or_else(|| CrelError::Singular("information matrix".into()))?;
    let l3 = model.info3(data, &theta_ml)?;
    Ok(PlugIns {
        n: data.n() as f64,
        theta_m: theta_m[0],
        theta_ml: theta_ml[0],
        nu_inv11: t.nu_inv[(0, 0)],
        l_inv11: l_inv[(0, 0)],
        l11: l2[(0, 0)],
        l111: l3[[0, 0, 0]],
        g111: g_tensor(&t)[[0, 0, 0]],
        xi_m: prior.grad_xi(&theta_m)[0],
        xi_ml: prior.grad_xi(&theta_ml)[0],
    })
}

/// First-order coverage term at the fitted quantities:
/// `sqrt(n)(theta_M - theta_ML)/sqrt(L^11) + (sqrt(nu^11/L^11) - 1) z`.
pub fn r_term(data: &Dataset, psi: &EstimatingFunction, model: &ParametricModel, prior: &Prior, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let p = plug_ins(data, psi, model, prior)?;
    Ok(r_from(&p, norm_quantile(alpha)))
}

fn r_from(p: &PlugIns, z: f64) -> f64 {
    p.n.sqrt() * (p.theta_m - p.theta_ml) / p.l_inv11.sqrt() + ((p.nu_inv11 / p.l_inv11).sqrt() - 1.0) * z
}

/// Higher-order coverage term for an orthogonal first component: `r_term`
/// plus the prior-gradient and cubic `G`/`L` corrections. Under
/// orthogonality `L_11 = 1/L^11` and `nu_11 = 1/nu^11`.
pub fn rstar_term(
    data: &Dataset,
    psi: &EstimatingFunction,
    model: &ParametricModel,
    prior: &Prior,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let p = plug_ins(data, psi, model, prior)?;
    let z = norm_quantile(alpha);
    let l11 = 1.0 / p.l_inv11;
    let ratio = p.nu_inv11 / p.l_inv11; // L_11 / nu_11
    let rn = p.n.sqrt();
    let prior_part = (p.xi_m * ratio - p.xi_ml) / (rn * l11.sqrt());
    let cubic = (p.g111 * ratio * ratio - p.l111 / 3.0) * (1.0 + 0.5 * z * z) / (rn * l11);
    Ok(r_from(&p, z) + prior_part + cubic)
}

/// `(G_111 - L_111 / 3) / L_11` for the ML score of `model`, whose limit
/// vanishes by the second and third Bartlett identities.
pub fn cancellation_term(data: &Dataset, model: &ParametricModel) -> Result<f64> {
    let psi = psi_ml_score(model.clone());
    let p = plug_ins(data, &psi, model, &Prior::Flat { dim: model.dim(data) })?;
    Ok((p.g111 - p.l111 / 3.0) / p.l11)
}

/// All bias terms at one level, with `eff_inv` from quadrature and the ML
/// variance `L^11 / n`.
pub fn bias_report(
    data: &Dataset,
    psi: &EstimatingFunction,
    model: &ParametricModel,
    prior: &Prior,
    alpha: f64,
) -> Result<BiasReport> {
    let eff_inv = asymptotic_efficiency_inv(psi, model)?;
    let p = plug_ins(data, psi, model, prior)?;
    Ok(BiasReport {
        alpha,
        bias_coverage: bias_coverage(alpha, eff_inv)?,
        bias_quantile: bias_quantile(alpha, eff_inv, p.l_inv11 / p.n)?,
        r_term: r_term(data, psi, model, prior, alpha)?,
        rstar_term: rstar_term(data, psi, model, prior, alpha)?,
        eff_inv,
    })
}

/// How posterior quantiles are obtained in the studies.
#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorMethod {
    /// Random-walk Metropolis with the given settings; reference posteriors
    /// use four times the chain length and burn-in.
    Mcmc(PosteriorConfig),
    /// Trapezoidal quadrature on a grid (scalar parameters only).
    Grid { nodes: usize },
}

impl PosteriorMethod {
    fn reference(&self) -> Self {
        match self {
            Self::Mcmc(c) => Self::Mcmc(PosteriorConfig { chain_length: 4 * c.chain_length, burn_in: 4 * c.burn_in, ..c.clone() }),
            g => g.clone(),
        }
    }
}

/// Quantiles (one per `alpha`) and a CDF evaluator for one posterior.
enum Fitted {
    Draws(crate::posterior::PosteriorSample),
    Grid(GridPosterior),
}

impl Fitted {
    fn quantile(&self, component: usize, alpha: f64) -> Result<f64> {
        match self {
            Self::Draws(s) => Ok(posterior_quantile(s, component, alpha)?.value),
            Self::Grid(g) => g.quantile(alpha),
        }
    }

    fn cdf(&self, component: usize, t: f64) -> f64 {
        match self {
            Self::Draws(s) => posterior_cdf_at(s, component, t),
            Self::Grid(g) => g.cdf_at(t),
        }
    }
}

fn fit_gel(
    data: &Dataset,
    psi: &EstimatingFunction,
    prior: &Prior,
    gamma: f64,
    method: &PosteriorMethod,
    seed: u64,
    start: &DVector<f64>,
) -> Result<Fitted> {
    match method {
        PosteriorMethod::Mcmc(c) => Ok(Fitted::Draws(sample_posterior_from(data, psi, prior, &c.with_seed(seed), gamma, start)?)),
        PosteriorMethod::Grid { nodes } => Ok(Fitted::Grid(GridPosterior::gel(data, psi, prior, gamma, *nodes)?)),
    }
}

fn fit_parametric(data: &Dataset, model: &ParametricModel, prior: &Prior, method: &PosteriorMethod, seed: u64) -> Result<Fitted> {
    match method.reference() {
        PosteriorMethod::Mcmc(c) => Ok(Fitted::Draws(sample_parametric_posterior(data, model, prior, &c.with_seed(seed))?)),
        PosteriorMethod::Grid { nodes } => Ok(Fitted::Grid(GridPosterior::parametric(data, model, prior, nodes)?)),
    }
}

/// One table cell: a statistic aggregated by the median over replications.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageCell {
    pub psi: String,
    pub gamma: f64,
    pub parameter: String,
    pub alpha: f64,
    pub median: f64,
    /// Replications that contributed.
    pub replications: usize,
    /// Replications where this cell failed.
    pub failures: usize,
    /// Per-replication values, in replication order (`NaN` for failures).
    pub values: Vec<f64>,
}

/// A simulated table with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageResult {
    pub title: String,
    pub statistic: String,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub gammas: Vec<f64>,
    pub psis: Vec<String>,
    pub cells: Vec<CoverageCell>,
    /// Replications lost entirely (data or reference posterior failed).
    pub failed_replications: usize,
}

impl CoverageResult {
    pub fn cell(&self, psi: &str, gamma: f64, parameter: &str, alpha: f64) -> Option<&CoverageCell> {
        self.cells
            .iter()
            .find(|c| c.psi == psi && c.gamma == gamma && c.parameter == parameter && c.alpha == alpha)
    }

    pub fn provenance(&self) -> String {
        format!(
            "# {}\n# statistic={} seed={} M={} n={} gammas={} psis={}\n",
            self.title,
            self.statistic,
            self.seed,
            self.m,
            self.n,
            join(&self.gammas),
            self.psis.join(";")
        )
    }

    /// Fraction of cells with more than 10% failed replications.
    pub fn failed_cell_fraction(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        let bad = self.cells.iter().filter(|c| c.failures * 10 > self.m).count();
        bad as f64 / self.cells.len() as f64
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.provenance().as_bytes())?;
        writeln!(w, "psi,gamma,parameter,alpha,median,replications,failures")?;
        for c in &self.cells {
            writeln!(w, "{},{},{},{},{},{},{}", c.psi, c.gamma, c.parameter, c.alpha, c.median, c.replications, c.failures)?;
        }
        Ok(())
    }

    /// Aligned text with one row per (parameter, alpha) and one column per
    /// (psi, gamma); values are scaled by `scale` (100 for powers of 10^-2).
    pub fn to_text(&self, scale: f64) -> String {
        let mut cols: Vec<(String, f64)> = Vec::new();
        let mut rows: Vec<(String, f64)> = Vec::new();
        for c in &self.cells {
            if !cols.iter().any(|(p, g)| *p == c.psi && *g == c.gamma) {
                cols.push((c.psi.clone(), c.gamma));
            }
            if !rows.iter().any(|(p, a)| *p == c.parameter && *a == c.alpha) {
                rows.push((c.parameter.clone(), c.alpha));
            }
        }
        let labels: Vec<String> = cols.iter().map(|(p, g)| format!("{p}/{}", short_gamma(*g))).collect();
        let w = labels.iter().map(|l| l.len() + 2).max().unwrap_or(0).max(10);
        let mut out = self.provenance();
        let _ = write!(out, "{:<10}{:>7}", "param", "alpha");
        for l in &labels {
            let _ = write!(out, "{l:>w$}");
        }
        out.push('\n');
        for (par, a) in &rows {
            let _ = write!(out, "{par:<10}{a:>7}");
            for (p, g) in &cols {
                match self.cell(p, *g, par, *a) {
                    Some(c) => {
                        let _ = write!(out, "{:>w$.2}", c.median * scale);
                    }
                    None => {
                        let _ = write!(out, "{:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Gamma rounded to four decimals with trailing zeros dropped.
fn short_gamma(g: f64) -> String {
    let s = format!("{g:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn median_finite(values: &[f64]) -> (f64, usize) {
    let mut ok: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    ok.sort_by(f64::total_cmp);
    let m = if ok.is_empty() { f64::NAN } else { median(&ok) };
    (m, ok.len())
}

/// Settings for the coverage study at the Normal-Laplace model.
#[derive(Clone, Debug, PartialEq)]
pub struct Table1Config {
    pub m: usize,
    pub n: usize,
    /// `(psi, gamma)` columns.
    pub cells: Vec<(EstimatingFunction, f64)>,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub method: PosteriorMethod,
}

impl Table1Config {
    /// The published layout: mean, Huber and biweight at gamma in {0, -1} and
    /// the median once (its GELR does not depend on gamma).
    pub fn published_layout(m: usize, seed: u64, method: PosteriorMethod) -> Self {
        let huber = psi_huber(1.345).expect("valid constant");
        let tukey = psi_tukey(4.685).expect("valid constant");
        Self {
            m,
            n: 110,
            cells: vec![
                (psi_mean(), 0.0),
                (psi_mean(), -1.0),
                (psi_median(), 0.0),
                (huber.clone(), 0.0),
                (huber, -1.0),
                (tukey.clone(), 0.0),
                (tukey, -1.0),
            ],
            alphas: vec![0.25, 0.5, 0.75, 0.95, 0.99],
            seed,
            method,
        }
    }
}

/// Coverage bias of GEL posterior quantiles at the true posterior. Per
/// replication: `theta ~ N(0,1)`, `x_i ~ Laplace(theta, 1)`, the GEL posterior
/// and the parametric Laplace posterior (prior N(0,1)) are fitted, and the
/// bias `rho(q_alpha) - alpha` is recorded, where `q_alpha` is the GEL
/// quantile and `rho` the parametric posterior CDF. Cells report the median.
pub fn coverage_simulation(cfg: &Table1Config) -> Result<CoverageResult> {
    if cfg.m == 0 || cfg.n < 2 {
        return Err(CrelError::Domain("need at least one replication and two observations".into()));
    }
    for &a in &cfg.alphas {
        check_alpha(a)?;
    }
    let prior = Prior::normal(vec![0.0], vec![1.0])?;
    let model = ParametricModel::Laplace { scale: 1.0 };
    let k = cfg.cells.len() * cfg.alphas.len();
    let per_rep: Vec<Option<Vec<f64>>> = (0..cfg.m)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, &[TAG_TABLE1, r as u64]);
            let theta: f64 = rng.sample(StandardNormal);
            let data = Dataset::univariate(laplace_draws(&mut rng, cfg.n, theta, 1.0)).ok()?;
            let reference =
                fit_parametric(&data, &model, &prior, &cfg.method, rng::derive_seed(cfg.seed, &[TAG_TABLE1, r as u64, 0])).ok()?;
            let mut out = Vec::with_capacity(k);
            for (ci, (psi, gamma)) in cfg.cells.iter().enumerate() {
                let seed = rng::derive_seed(cfg.seed, &[TAG_TABLE1, r as u64, 1 + ci as u64]);
                let fitted = m_estimate(psi, &data)
                    .and_then(|est| fit_gel(&data, psi, &prior, *gamma, &cfg.method, seed, &est.theta_hat));
                for &a in &cfg.alphas {
                    let v = fitted
                        .as_ref()
                        .ok()
                        .and_then(|f| f.quantile(0, a).ok())
                        .map_or(f64::NAN, |q| reference.cdf(0, q) - a);
                    out.push(v);
                }
            }
            Some(out)
        })
        .collect();
    Ok(assemble(
        "coverage bias of GEL posterior quantiles at the Normal-Laplace model",
        "median of rho(q_alpha) - alpha",
        cfg.m,
        cfg.n,
        cfg.seed,
        &cfg.cells,
        &[(String::from("theta"), 0)],
        &cfg.alphas,
        &per_rep,
    ))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    title: &str,
    statistic: &str,
    m: usize,
    n: usize,
    seed: u64,
    cells: &[(EstimatingFunction, f64)],
    params: &[(String, usize)],
    alphas: &[f64],
    per_rep: &[Option<Vec<f64>>],
) -> CoverageResult {
    let mut out = Vec::new();
    let mut idx = 0;
    for (psi, gamma) in cells {
        for (pname, _) in params {
            for &a in alphas {
                let values: Vec<f64> = per_rep.iter().map(|r| r.as_ref().map_or(f64::NAN, |v| v[idx])).collect();
                let (med, used) = median_finite(&values);
                out.push(CoverageCell {
                    psi: psi.label(),
                    gamma: *gamma,
                    parameter: pname.clone(),
                    alpha: a,
                    median: med,
                    replications: used,
                    failures: m - used,
                    values,
                });
                idx += 1;
            }
        }
    }
    let mut gammas: Vec<f64> = Vec::new();
    let mut psis: Vec<String> = Vec::new();
    for (p, g) in cells {
        if !gammas.contains(g) {
            gammas.push(*g);
        }
        if !psis.contains(&p.label()) {
            psis.push(p.label());
        }
    }
    CoverageResult {
        title: title.into(),
        statistic: statistic.into(),
        m,
        n,
        seed,
        gammas,
        psis,
        cells: out,
        failed_replications: per_rep.iter().filter(|r| r.is_none()).count(),
    }
}

/// Which data the reference Poisson posterior conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceMode {
    /// The outlier-free responses drawn alongside the contaminated ones.
    Clean,
    /// The contaminated responses themselves.
    Contaminated,
}

/// Settings for the Poisson regression study.
#[derive(Clone, Debug, PartialEq)]
pub struct Table3Config {
    pub m: usize,
    pub n: usize,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub beta: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub c: f64,
    pub contamination: ContaminationConfig,
    pub reference: ReferenceMode,
    pub seed: u64,
    pub chain: PosteriorConfig,
}

impl Table3Config {
    pub fn published(m: usize, seed: u64, chain: PosteriorConfig) -> Self {
        Self {
            m,
            n: 120,
            gammas: vec![-1.0, -0.5, -2.0 / 3.0, 0.0],
            alphas: vec![0.025, 0.5, 0.975],
            beta: vec![0.5, 2.2, 1.2],
            prior_mean: vec![0.5, 2.2, 1.2],
            c: 1.6,
            contamination: ContaminationConfig::default(),
            reference: ReferenceMode::Clean,
            seed,
            chain,
        }
    }
}

/// Median absolute difference between GEL posterior quantiles of `beta_1`,
/// `beta_2` (classical and robust GLM scores) and the Poisson regression
/// posterior quantiles, over replications of the contaminated design.
pub fn glm_accuracy_simulation(cfg: &Table3Config) -> Result<CoverageResult> {
    if cfg.m == 0 {
        return Err(CrelError::Domain("need at least one replication".into()));
    }
    if cfg.beta.len() != 3 || cfg.prior_mean.len() != 3 {
        return Err(CrelError::Domain("the regression has three coefficients".into()));
    }
    for &a in &cfg.alphas {
        check_alpha(a)?;
    }
    cfg.contamination.validate()?;
    let prior = Prior::normal(cfg.prior_mean.clone(), vec![1.0; 3])?;
    let beta = DVector::from_vec(cfg.beta.clone());
    let classical = crate::estimating::psi_glm(crate::estimating::Link::Log, crate::estimating::VarianceFn::Poisson);
    let robust = crate::estimating::psi_glm_robust(cfg.c, crate::estimating::Link::Log, crate::estimating::VarianceFn::Poisson)?;
    let mut cells = Vec::new();
    for psi in [&classical, &robust] {
        for &g in &cfg.gammas {
            cells.push((psi.clone(), g));
        }
    }
    let params = [(String::from("beta1"), 1usize), (String::from("beta2"), 2usize)];
    let model = ParametricModel::PoissonRegression;
    let per_rep: Vec<Option<Vec<f64>>> = (0..cfg.m)
        .into_par_iter()
        .map(|r| {
            let sim = contaminated_poisson(cfg.n, &beta, &cfg.contamination, rng::derive_seed(cfg.seed, &[TAG_TABLE3, r as u64])).ok()?;
            let ref_data = match cfg.reference {
                ReferenceMode::Clean => &sim.clean,
                ReferenceMode::Contaminated => &sim.data,
            };
            let ref_method = PosteriorMethod::Mcmc(cfg.chain.clone());
            let reference =
                fit_parametric(ref_data, &model, &prior, &ref_method, rng::derive_seed(cfg.seed, &[TAG_TABLE3, r as u64, 0])).ok()?;
            let ref_q: Vec<Vec<f64>> = params
                .iter()
                .map(|(_, j)| cfg.alphas.iter().map(|&a| reference.quantile(*j, a).unwrap_or(f64::NAN)).collect())
                .collect();
            let mut out = Vec::new();
            for (ci, (psi, gamma)) in cells.iter().enumerate() {
                let seed = rng::derive_seed(cfg.seed, &[TAG_TABLE3, r as u64, 1 + ci as u64]);
                let fitted = m_estimate(psi, &sim.data).and_then(|est| {
                    fit_gel(&sim.data, psi, &prior, *gamma, &PosteriorMethod::Mcmc(cfg.chain.clone()), seed, &est.theta_hat)
                });
                for (pi, (_, j)) in params.iter().enumerate() {
                    for (ai, &a) in cfg.alphas.iter().enumerate() {
                        let v = fitted
                            .as_ref()
                            .ok()
                            .and_then(|f| f.quantile(*j, a).ok())
                            .map_or(f64::NAN, |q| (q - ref_q[pi][ai]).abs());
                        out.push(v);
                    }
                }
            }
            Some(out)
        })
        .collect();
    let title = format!(
        "Poisson regression with outliers; reference posterior on {} data",
        match cfg.reference {
            ReferenceMode::Clean => "clean",
            ReferenceMode::Contaminated => "contaminated",
        }
    );
    Ok(assemble(&title, "median |q_gel - q_ref|", cfg.m, cfg.n, cfg.seed, &cells, &params, &cfg.alphas, &per_rep))
}

/// Per-gamma variances of the posterior quantile on paired datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceStudy {
    pub gammas: Vec<f64>,
    pub alpha: f64,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    /// `quantiles[g][r]`: quantile for gamma `g` on replication `r`.
    pub quantiles: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    /// Replications dropped because some gamma failed.
    pub failures: usize,
}

impl VarianceStudy {
    /// `Var_i - Var_j` and its standard error from the paired per-replication
    /// contributions `(q_i - mean_i)^2 - (q_j - mean_j)^2`.
    pub fn variance_difference(&self, i: usize, j: usize) -> (f64, f64) {
        let (a, b) = (&self.quantiles[i], &self.quantiles[j]);
        let (ma, mb) = (mean(a), mean(b));
        let m = a.len() as f64;
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma).powi(2) - (y - mb).powi(2)).collect();
        (mean(&d) * m / (m - 1.0), (variance(&d) / m).sqrt())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "# variance of the posterior quantile across gamma, paired datasets\n# seed={} M={} n={} alpha={} gammas={} psis=mean",
            self.seed,
            self.m,
            self.n,
            self.alpha,
            join(&self.gammas)
        )?;
        writeln!(w, "gamma,variance,diff_vs_gamma0,se_diff")?;
        let zero = self.gammas.iter().position(|&g| g == 0.0);
        for (i, g) in self.gammas.iter().enumerate() {
            let (d, se) = zero.map_or((f64::NAN, f64::NAN), |z| self.variance_difference(i, z));
            writeln!(w, "{g},{},{d},{se}", self.variances[i])?;
        }
        Ok(())
    }
}

/// Variance of the posterior `alpha`-quantile of the mean for each gamma,
/// with every gamma evaluated on the same datasets (flat prior).
pub fn theorem5_variance_study(
    family: ExponentialFamilyModel,
    n: usize,
    m: usize,
    gammas: &[f64],
    alpha: f64,
    seed: u64,
    method: &PosteriorMethod,
) -> Result<VarianceStudy> {
    check_alpha(alpha)?;
    if m < 2 || gammas.is_empty() {
        return Err(CrelError::Domain("need at least two replications and one gamma".into()));
    }
    let psi = psi_mean();
    let prior = Prior::Flat { dim: 1 };
    let rows: Vec<Option<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[TAG_THM5, r as u64]);
            let data = Dataset::univariate(family.sample(n, 1.0, &mut rng)).ok()?;
            let start = DVector::from_element(1, mean(data.values()));
            // common random numbers across gamma for the sampler
            let chain_seed = rng::derive_seed(seed, &[TAG_THM5, r as u64, 1]);
            gammas
                .iter()
                .map(|&g| fit_gel(&data, &psi, &prior, g, method, chain_seed, &start).ok()?.quantile(0, alpha).ok())
                .collect()
        })
        .collect();
    let kept: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    let quantiles: Vec<Vec<f64>> = (0..gammas.len()).map(|g| kept.iter().map(|r| r[g]).collect()).collect();
    if kept.len() < 2 {
        return Err(CrelError::Degenerate("fewer than two replications succeeded".into()));
    }
    let variances = quantiles.iter().map(|q| variance(q)).collect();
    Ok(VarianceStudy {
        gammas: gammas.to_vec(),
        alpha,
        n,
        m,
        seed,
        quantiles,
        variances,
        failures: m - kept.len(),
    })
}

/// GELR of the mean at the true value for `N(0, 1)` samples of size `n`.
pub fn wilks_study(n: usize, reps: usize, gamma: f64, seed: u64) -> Result<Vec<f64>> {
    let psi = psi_mean();
    let zero = DVector::from_element(1, 0.0);
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[TAG_WILKS, r as u64]);
            let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let d = Dataset::univariate(xs)?;
            Ok(gelr(&d, &psi, &zero, gamma)?.value)
        })
        .collect()
}

/// `rho(theta_true)`: GEL posterior CDF at the true value, with
/// `theta ~ N(0,1)`, Laplace(theta, 1) data and a N(0,1) prior.
pub fn validity_study(
    n: usize,
    reps: usize,
    psi: &EstimatingFunction,
    gamma: f64,
    method: &PosteriorMethod,
    seed: u64,
) -> Result<Vec<f64>> {
    let prior = Prior::normal(vec![0.0], vec![1.0])?;
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[TAG_VALIDITY, r as u64]);
            let theta: f64 = rng.sample(StandardNormal);
            let data = Dataset::univariate(laplace_draws(&mut rng, n, theta, 1.0))?;
            let start = m_estimate(psi, &data)?.theta_hat;
            let f = fit_gel(&data, psi, &prior, gamma, method, rng::derive_seed(seed, &[TAG_VALIDITY, r as u64, 1]), &start)?;
            Ok(f.cdf(0, theta))
        })
        .collect()
}

/// Mean absolute error of the first- and second-order GELR expansions at
/// the true mean for Exponential(1) samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemainderRow {
    pub n: usize,
    pub order1: f64,
    pub order2: f64,
}

pub fn expansion_remainder_study(ns: &[usize], reps: usize, gamma: f64, seed: u64) -> Result<Vec<RemainderRow>> {
    let psi = psi_mean();
    let exp = rand_distr::Exp::new(1.0).expect("unit rate");
    let theta = DVector::from_element(1, 1.0);
    ns.iter()
        .map(|&n| {
            let errs: Vec<(f64, f64)> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = rng::stream(seed, &[TAG_EXPANSION, n as u64, r as u64]);
                    let d = Dataset::univariate((0..n).map(|_| exp.sample(&mut rng)).collect())?;
                    let exact = gelr(&d, &psi, &theta, gamma)?;
                    if !exact.hull_ok {
                        return Err(CrelError::Hull);
                    }
                    let values = psi.evaluate_all(&d, &theta)?;
                    let mom = crate::expansion::PsiMoments::from_psi(&values)?;
                    let bar = psi.mean_value(&d, &theta)?;
                    let e1 = gelr_expansion(&mom, &bar, gamma, 1)?;
                    let e2 = gelr_expansion(&mom, &bar, gamma, 2)?;
                    Ok(((exact.value - e1).abs(), (exact.value - e2).abs()))
                })
                .collect::<Result<_>>()?;
            let o1: Vec<f64> = errs.iter().map(|e| e.0).collect();
            let o2: Vec<f64> = errs.iter().map(|e| e.1).collect();
            Ok(RemainderRow { n, order1: mean(&o1), order2: mean(&o2) })
        })
        .collect()
}

/// `cancellation_term` over replications of `N(0, 1)` data under the
/// Normal(mu, sigma) model.
pub fn cancellation_study(n: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    let model = ParametricModel::Normal;
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[TAG_CANCEL, n as u64, r as u64]);
            let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            cancellation_term(&Dataset::univariate(xs)?, &model)
        })
        .collect()
}

/// Replication means of `r_term` at the Laplace model with Laplace(0,1)
/// data; `E(R) phi(z)` should match `bias_coverage`.
pub fn r_term_study(
    psi: &EstimatingFunction,
    n: usize,
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let model = ParametricModel::Laplace { scale: 1.0 };
    let prior = Prior::Flat { dim: 1 };
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[TAG_TABLE1, 0xbeef, r as u64]);
            let d = Dataset::univariate(laplace_draws(&mut rng, n, 0.0, 1.0))?;
            r_term(&d, psi, &model, &prior, alpha)
        })
        .collect()
}

/// Analytic bias table at the Laplace model for several inverse efficiencies.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTable {
    pub alphas: Vec<f64>,
    /// `(column label, eff_inv)`.
    pub columns: Vec<(String, f64)>,
    /// `values[row][col]` in natural units.
    pub values: Vec<Vec<f64>>,
}

impl AnalyticTable {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# analytic coverage bias at the Laplace model (deterministic)")?;
        let header: Vec<String> = self.columns.iter().map(|(l, e)| format!("{l} (eff_inv={e:.5})")).collect();
        writeln!(w, "alpha,{}", header.join(","))?;
        for (a, row) in self.alphas.iter().zip(&self.values) {
            writeln!(w, "{a},{}", join(row).replace(';', ","))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# analytic coverage bias at the Laplace model, in powers of 10^-2\n");
        let _ = write!(out, "{:>7}", "alpha");
        for (l, _) in &self.columns {
            let _ = write!(out, "{l:>22}");
        }
        out.push('\n');
        let _ = write!(out, "{:>7}", "eff_inv");
        for (_, e) in &self.columns {
            let _ = write!(out, "{e:>22.5}");
        }
        out.push('\n');
        for (a, row) in self.alphas.iter().zip(&self.values) {
            let _ = write!(out, "{a:>7}");
            for v in row {
                let _ = write!(out, "{:>22.2}", v * 100.0);
            }
            out.push('\n');
        }
        out
    }
}

/// Inverse efficiency implied for the Huber and biweight columns of the
/// published analytic table (ratio 4.18 / 8.87 of the mean column).
pub const PUBLISHED_ROBUST_EFF_INV: f64 = 1.4285;

/// Coverage bias for the mean (eff_inv = 2), Huber and biweight (quadrature)
/// and the published robust constant.
pub fn analytic_bias_table() -> Result<AnalyticTable> {
    let laplace = ParametricModel::Laplace { scale: 1.0 };
    let columns = vec![
        ("mean".to_string(), asymptotic_efficiency_inv(&psi_mean(), &laplace)?),
        ("huber(1.345)".to_string(), asymptotic_efficiency_inv(&psi_huber(1.345)?, &laplace)?),
        ("tukey(4.685)".to_string(), asymptotic_efficiency_inv(&psi_tukey(4.685)?, &laplace)?),
        ("robust (published)".to_string(), PUBLISHED_ROBUST_EFF_INV),
    ];
    let alphas = vec![0.25, 0.5, 0.75, 0.95, 0.99];
    let values = alphas
        .iter()
        .map(|&a| columns.iter().map(|(_, e)| bias_coverage(a, *e)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(AnalyticTable { alphas, columns, values })
}
