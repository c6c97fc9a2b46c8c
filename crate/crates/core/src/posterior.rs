//! GEL posterior: log-posterior assembly, random-walk Metropolis sampling and
//! posterior summaries.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cressie_read::gelr;
use crate::data::{Dataset, ParametricModel, Prior};
use crate::error::{CrelError, Result};
use crate::estimating::{m_estimate, EstimatingFunction};
use crate::expansion::compute_tensors;
use crate::rng;

const TARGET_ACCEPTANCE: f64 = 0.3;

/// Proposal standard deviations: derived from the estimated posterior
/// covariance, or fixed per component.
#[derive(Clone, Debug, PartialEq)]
pub enum ProposalScale {
    Auto,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorConfig {
    /// Total iterations including burn-in.
    pub chain_length: usize,
    pub burn_in: usize,
    pub proposal_scale: ProposalScale,
    /// Tune the proposal scale during burn-in towards acceptance 0.3.
    pub adapt: bool,
    pub seed: u64,
    pub thin: usize,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self { chain_length: 50_000, burn_in: 5_000, proposal_scale: ProposalScale::Auto, adapt: true, seed: 0, thin: 1 }
    }
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.chain_length {
            return Err(CrelError::Domain(format!(
                "burn_in ({}) must be smaller than chain_length ({})",
                self.burn_in, self.chain_length
            )));
        }
        if self.thin == 0 {
            return Err(CrelError::Domain("thin must be at least 1".into()));
        }
        if let ProposalScale::Fixed(s) = &self.proposal_scale {
            if s.is_empty() || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(CrelError::Domain("proposal scales must be positive".into()));
            }
        }
        Ok(())
    }

    /// Same settings with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Retained draws and chain diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    /// `m x d`, one retained draw per row.
    pub draws: DMatrix<f64>,
    pub acceptance_rate: f64,
    pub ess: Vec<f64>,
    pub log_post_trace: Vec<f64>,
    /// Inner-solve failures over the whole chain (treated as rejections).
    pub failures: usize,
}

impl PosteriorSample {
    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let m = self.draws.nrows();
        &self.draws.as_slice()[j * m..(j + 1) * m]
    }

    /// CSV with columns `iteration, theta1..thetad, log_post`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let d = self.draws.ncols();
        let mut header = String::from("iteration");
        for j in 1..=d {
            header.push_str(&format!(",theta{j}"));
        }
        header.push_str(",log_post");
        writeln!(w, "{header}")?;
        for i in 0..self.len() {
            let mut line = i.to_string();
            for j in 0..d {
                line.push_str(&format!(",{}", self.draws[(i, j)]));
            }
            line.push_str(&format!(",{}", self.log_post_trace[i]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// A posterior quantile with its batch-means Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileEstimate {
    pub level: f64,
    pub value: f64,
    pub mc_se: f64,
}

/// Log target evaluation. `failed` marks an inner-solve failure, which the
/// sampler treats as a rejection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetValue {
    pub value: f64,
    pub failed: bool,
}

impl TargetValue {
    fn ok(value: f64) -> Self {
        Self { value, failed: false }
    }
}

/// Unnormalised log density over the parameter space.
pub trait LogTarget {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &DVector<f64>) -> TargetValue;
}

/// `exp(-gelr/2 + xi)`.
pub struct GelPosterior<'a> {
    pub data: &'a Dataset,
    pub psi: &'a EstimatingFunction,
    pub prior: &'a Prior,
    pub gamma: f64,
}

impl LogTarget for GelPosterior<'_> {
    fn dim(&self) -> usize {
        self.psi.dim(self.data)
    }

    fn log_density(&self, theta: &DVector<f64>) -> TargetValue {
        match gelr(self.data, self.psi, theta, self.gamma) {
            Ok(g) if g.hull_ok => TargetValue::ok(-0.5 * g.value + self.prior.xi(theta)),
            Ok(_) => TargetValue::ok(f64::NEG_INFINITY),
            Err(_) => TargetValue { value: f64::NEG_INFINITY, failed: true },
        }
    }
}

/// Parametric posterior `exp(log L + xi)`.
pub struct ParametricPosterior<'a> {
    pub data: &'a Dataset,
    pub model: &'a ParametricModel,
    pub prior: &'a Prior,
}

impl LogTarget for ParametricPosterior<'_> {
    fn dim(&self) -> usize {
        self.model.dim(self.data)
    }

    fn log_density(&self, theta: &DVector<f64>) -> TargetValue {
        if let ParametricModel::Normal = self.model {
            if theta[1] <= 0.0 {
                return TargetValue::ok(f64::NEG_INFINITY);
            }
        }
        let v = self.model.log_likelihood(self.data, theta) + self.prior.xi(theta);
        TargetValue::ok(if v.is_nan() { f64::NEG_INFINITY } else { v })
    }
}

/// `-gelr(theta)/2 + xi(theta)`; `-inf` outside the hull or when the inner
/// solve fails.
pub fn log_posterior(data: &Dataset, psi: &EstimatingFunction, prior: &Prior, theta: &DVector<f64>, gamma: f64) -> f64 {
    GelPosterior { data, psi, prior, gamma }.log_density(theta).value
}

/// Random-walk Metropolis with Gaussian proposals `theta + s L z`, where `L`
/// is a lower-triangular factor and `s` is tuned during burn-in only.
pub fn run_metropolis(
    target: &impl LogTarget,
    start: &DVector<f64>,
    proposal_factor: &DMatrix<f64>,
    config: &PosteriorConfig,
) -> Result<PosteriorSample> {
    config.validate()?;
    let d = target.dim();
    if start.len() != d || proposal_factor.shape() != (d, d) {
        return Err(CrelError::Domain("start point or proposal factor has the wrong dimension".into()));
    }
    let mut rng = rng::stream(config.seed, &[0x6d63_6d63]);
    let mut theta = start.clone();
    let mut current = target.log_density(&theta);
    if !current.value.is_finite() {
        return Err(CrelError::Sampler("log posterior is not finite at the starting point".into()));
    }
    let keep = (config.chain_length - config.burn_in) / config.thin;
    let mut draws = DMatrix::zeros(keep, d);
    let mut trace = Vec::with_capacity(keep);
    let mut log_scale = 0.0f64;
    let mut batch_accepts = 0usize;
    let mut batches = 0usize;
    let mut accepted_after = 0usize;
    let mut failures = 0usize;
    let mut burn_failures = 0usize;
    const BATCH: usize = 50;

    for iter in 0..config.chain_length {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: f64 = rng.random();
        let cand = &theta + proposal_factor * z * log_scale.exp();
        let prop = target.log_density(&cand);
        if prop.failed {
            failures += 1;
            if iter < config.burn_in {
                burn_failures += 1;
            }
        }
        let accept = prop.value.is_finite() && u.ln() < prop.value - current.value;
        if accept {
            theta = cand;
            current = prop;
        }
        if iter < config.burn_in {
            batch_accepts += usize::from(accept);
            if config.adapt && (iter + 1) % BATCH == 0 {
                batches += 1;
                let rate = batch_accepts as f64 / BATCH as f64;
                log_scale += (rate - TARGET_ACCEPTANCE) * 2.0 / (batches as f64).sqrt();
                log_scale = log_scale.clamp(-10.0, 10.0);
                batch_accepts = 0;
            }
            if iter + 1 == config.burn_in && burn_failures * 2 > config.burn_in {
                return Err(CrelError::Sampler(format!(
                    "{burn_failures} of {} burn-in proposals failed the inner solve",
                    config.burn_in
                )));
            }
        } else {
            accepted_after += usize::from(accept);
            let k = iter - config.burn_in;
            if k % config.thin == 0 && k / config.thin < keep {
                draws.set_row(k / config.thin, &theta.transpose());
                trace.push(current.value);
            }
        }
    }
    let acceptance_rate = accepted_after as f64 / (config.chain_length - config.burn_in) as f64;
    let ess = (0..d).map(|j| effective_sample_size(draws.column(j).as_slice())).collect();
    Ok(PosteriorSample { draws, acceptance_rate, ess, log_post_trace: trace, failures })
}

fn scale_from_curvature(target: &impl LogTarget, start: &DVector<f64>) -> Vec<f64> {
    // distance at which the log target drops by 1/2 along each axis, averaged over both sides
    let f0 = target.log_density(start).value;
    (0..start.len())
        .map(|j| {
            let side = |sign: f64| -> f64 {
                let base = 1e-3 * start[j].abs().max(1.0);
                let drop = |t: f64| {
                    let mut th = start.clone();
                    th[j] += sign * t;
                    let v = target.log_density(&th).value;
                    !(v > f0 - 0.5)
                };
                let mut hi = base;
                while !drop(hi) && hi < 1e6 {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if drop(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            };
            0.5 * (side(1.0) + side(-1.0))
        })
        .collect()
}

/// Proposal factor for a GEL posterior at the M-estimate: `2.4/sqrt(d)` times
/// the Cholesky factor of `K^{-1}/n` when the tensors are available, otherwise
/// a diagonal scale from the curvature of the log target.
pub fn auto_proposal(
    target: &impl LogTarget,
    data: &Dataset,
    psi: Option<&EstimatingFunction>,
    start: &DVector<f64>,
) -> DMatrix<f64> {
    let d = start.len();
    let c = 2.4 / (d as f64).sqrt();
    if let Some(psi) = psi {
        if let Ok(t) = compute_tensors(data, psi, start) {
            return &t.tau * (c / (data.n() as f64).sqrt());
        }
    }
    DMatrix::from_diagonal(&DVector::from_vec(scale_from_curvature(target, start)).scale(c))
}

fn proposal_for(config: &PosteriorConfig, auto: impl FnOnce() -> DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    match &config.proposal_scale {
        ProposalScale::Auto => Ok(auto()),
        ProposalScale::Fixed(s) => {
            if s.len() != d {
                return Err(CrelError::Domain(format!("need {d} proposal scales, got {}", s.len())));
            }
            Ok(DMatrix::from_diagonal(&DVector::from_vec(s.clone())))
        }
    }
}

/// Sample the GEL posterior starting from the M-estimate.
pub fn sample_posterior(
    data: &Dataset,
    psi: &EstimatingFunction,
    prior: &Prior,
    config: &PosteriorConfig,
    gamma: f64,
) -> Result<PosteriorSample> {
    config.validate()?;
    let start = m_estimate(psi, data)?.theta_hat;
    sample_posterior_from(data, psi, prior, config, gamma, &start)
}

/// Sample the GEL posterior from a given (already computed) M-estimate.
pub fn sample_posterior_from(
    data: &Dataset,
    psi: &EstimatingFunction,
    prior: &Prior,
    config: &PosteriorConfig,
    gamma: f64,
    start: &DVector<f64>,
) -> Result<PosteriorSample> {
    let target = GelPosterior { data, psi, prior, gamma };
    let factor = proposal_for(config, || auto_proposal(&target, data, Some(psi), start), start.len())?;
    run_metropolis(&target, start, &factor, config)
}

/// Sample the parametric posterior starting from the ML estimate.
pub fn sample_parametric_posterior(
    data: &Dataset,
    model: &ParametricModel,
    prior: &Prior,
    config: &PosteriorConfig,
) -> Result<PosteriorSample> {
    let start = model.ml_fit(data)?;
    let target = ParametricPosterior { data, model, prior };
    let auto = || {
        let d = start.len();
        let info = model.info2(data, &start).ok().and_then(|l| l.cholesky()).map(|c| c.inverse());
        match info.and_then(|inv| inv.cholesky()) {
            Some(c) => c.l() * (2.4 / (d as f64).sqrt() / (data.n() as f64).sqrt()),
            None => DMatrix::from_diagonal(
                &DVector::from_vec(scale_from_curvature(&target, &start)).scale(2.4 / (d as f64).sqrt()),
            ),
        }
    };
    let factor = proposal_for(config, auto, start.len())?;
    run_metropolis(&target, &start, &factor, config)
}

/// Posterior of a scalar parameter tabulated on a uniform grid, with the CDF
/// obtained by the trapezoidal rule. An alternative to sampling when `d = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPosterior {
    theta: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridPosterior {
    /// Tabulate `target` on `nodes` points. The support is found by stepping
    /// out from `center` in steps of `scale / 4` until the log density falls
    /// 40 below its running maximum or becomes `-inf`.
    pub fn new(target: &impl LogTarget, center: f64, scale: f64, nodes: usize) -> Result<Self> {
        if target.dim() != 1 {
            return Err(CrelError::Domain("grid posterior needs a scalar parameter".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) || nodes < 3 {
            return Err(CrelError::Domain("grid posterior needs a positive scale and at least 3 nodes".into()));
        }
        let f = |t: f64| target.log_density(&DVector::from_element(1, t)).value;
        let f0 = f(center);
        if !f0.is_finite() {
            return Err(CrelError::Sampler("log posterior is not finite at the grid center".into()));
        }
        let step = 0.25 * scale;
        let edge = |sign: f64| {
            let mut best = f0;
            let mut k = 1.0;
            loop {
                let t = center + sign * k * step;
                let v = f(t);
                if !v.is_finite() || v < best - 40.0 || k >= 2000.0 {
                    return t;
                }
                best = best.max(v);
                k += 1.0;
            }
        };
        let (lo, hi) = (edge(-1.0), edge(1.0));
        let h = (hi - lo) / (nodes - 1) as f64;
        let theta: Vec<f64> = (0..nodes).map(|i| lo + i as f64 * h).collect();
        let logs: Vec<f64> = theta.iter().map(|&t| f(t)).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = logs.iter().map(|&l| if l.is_finite() { (l - top).exp() } else { 0.0 }).collect();
        let mut cdf = vec![0.0; nodes];
        for i in 1..nodes {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
        }
        let total = cdf[nodes - 1];
        if !(total > 0.0) {
            return Err(CrelError::Degenerate("posterior mass vanishes on the grid".into()));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(Self { theta, cdf })
    }

    /// GEL posterior on a grid centred at the M-estimate.
    pub fn gel(data: &Dataset, psi: &EstimatingFunction, prior: &Prior, gamma: f64, nodes: usize) -> Result<Self> {
        let start = m_estimate(psi, data)?.theta_hat;
        let target = GelPosterior { data, psi, prior, gamma };
        let scale = scale_from_curvature(&target, &start)[0];
        Self::new(&target, start[0], scale, nodes)
    }

    /// Parametric posterior on a grid centred at the ML estimate.
    pub fn parametric(data: &Dataset, model: &ParametricModel, prior: &Prior, nodes: usize) -> Result<Self> {
        let start = model.ml_fit(data)?;
        let target = ParametricPosterior { data, model, prior };
        let scale = scale_from_curvature(&target, &start)[0];
        Self::new(&target, start[0], scale, nodes)
    }

    pub fn cdf_at(&self, t: f64) -> f64 {
        let (x, c) = (&self.theta, &self.cdf);
        if t <= x[0] {
            return 0.0;
        }
        if t >= x[x.len() - 1] {
            return 1.0;
        }
        let i = x.partition_point(|&v| v <= t) - 1;
        let w = (t - x[i]) / (x[i + 1] - x[i]);
        c[i] + w * (c[i + 1] - c[i])
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CrelError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let (x, c) = (&self.theta, &self.cdf);
        let i = c.partition_point(|&v| v < alpha).clamp(1, c.len() - 1);
        let span = c[i] - c[i - 1];
        let w = if span > 0.0 { (alpha - c[i - 1]) / span } else { 0.0 };
        Ok(x[i - 1] + w * (x[i] - x[i - 1]))
    }
}

fn batch_count(m: usize) -> usize {
    ((m as f64).sqrt() as usize).clamp(2, 50).min(m)
}

fn batch_se(values: &[f64]) -> f64 {
    let b = values.len() as f64;
    (crate::stats::variance(values) / b).sqrt()
}

fn check_component(sample: &PosteriorSample, component: usize) -> Result<&[f64]> {
    if component >= sample.draws.ncols() {
        return Err(CrelError::Domain(format!("component {component} out of range")));
    }
    let xs = sample.component(component);
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return Err(CrelError::Degenerate(format!("component {component} has no variation")));
    }
    Ok(xs)
}

/// Interpolated order-statistic quantile with a batch-means standard error.
pub fn posterior_quantile(sample: &PosteriorSample, component: usize, alpha: f64) -> Result<QuantileEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CrelError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let xs = check_component(sample, component)?;
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let value = crate::stats::sorted_quantile(&sorted, alpha);
    let b = batch_count(xs.len());
    let len = xs.len() / b;
    let qs: Vec<f64> = (0..b)
        .map(|k| {
            let mut chunk = xs[k * len..(k + 1) * len].to_vec();
            chunk.sort_by(f64::total_cmp);
            crate::stats::sorted_quantile(&chunk, alpha)
        })
        .collect();
    let mc_se = batch_se(&qs).max(f64::EPSILON * value.abs().max(1.0));
    Ok(QuantileEstimate { level: alpha, value, mc_se })
}

/// Posterior mean with a batch-means standard error, as `(mean, mc_se)`.
pub fn posterior_mean(sample: &PosteriorSample, component: usize) -> Result<(f64, f64)> {
    let xs = check_component(sample, component)?;
    let b = batch_count(xs.len());
    let len = xs.len() / b;
    let means: Vec<f64> = (0..b).map(|k| crate::stats::mean(&xs[k * len..(k + 1) * len])).collect();
    Ok((crate::stats::mean(xs), batch_se(&means)))
}

/// Fraction of retained draws whose component lies strictly below `t`.
pub fn posterior_cdf_at(sample: &PosteriorSample, component: usize, t: f64) -> f64 {
    let xs = sample.component(component);
    xs.iter().filter(|&&x| x < t).count() as f64 / xs.len() as f64
}

/// Effective sample size from the initial positive sequence of
/// autocorrelation pairs.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let m = xs.len();
    if m < 4 {
        return m as f64;
    }
    let mean = crate::stats::mean(xs);
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let c0 = c.iter().map(|v| v * v).sum::<f64>() / m as f64;
    if c0 == 0.0 {
        return 0.0;
    }
    let acf = |lag: usize| c[..m - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (m as f64 * c0);
    let mut sum = 0.0;
    let mut lag = 1;
    while lag + 1 < m {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let tau = (1.0 + 2.0 * sum).max(1.0 / m as f64);
    (m as f64 / tau).min(m as f64)
}
