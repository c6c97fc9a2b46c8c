//! M-estimating functions and M-estimation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma_ur;

use crate::data::{Dataset, ParametricModel};
use crate::error::{CrelError, Result};

/// GLM link function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Log,
    Identity,
}

/// GLM variance function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceFn {
    /// `V(mu) = mu`.
    Poisson,
    /// `V(mu) = 1`.
    Constant,
}

impl Link {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(Self::Log),
            "identity" => Ok(Self::Identity),
            _ => Err(CrelError::Parse(format!("unknown link `{s}`"))),
        }
    }

    fn mu(self, eta: f64) -> f64 {
        match self {
            Self::Log => eta.exp(),
            Self::Identity => eta,
        }
    }

    /// `d mu / d eta` as a function of `mu`.
    fn dmu(self, mu: f64) -> f64 {
        match self {
            Self::Log => mu,
            Self::Identity => 1.0,
        }
    }

    fn d2mu(self, mu: f64) -> f64 {
        match self {
            Self::Log => mu,
            Self::Identity => 0.0,
        }
    }
}

impl VarianceFn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "poisson" | "mu" => Ok(Self::Poisson),
            "constant" | "gaussian" => Ok(Self::Constant),
            _ => Err(CrelError::Parse(format!("unknown variance function `{s}`"))),
        }
    }

    fn v(self, mu: f64) -> f64 {
        match self {
            Self::Poisson => mu,
            Self::Constant => 1.0,
        }
    }

    fn dv(self) -> f64 {
        match self {
            Self::Poisson => 1.0,
            Self::Constant => 0.0,
        }
    }
}

/// The estimating-function families.
#[derive(Clone, Debug, PartialEq)]
pub enum PsiKind {
    Mean,
    Median,
    Huber { c: f64 },
    Tukey { k: f64 },
    Glm { link: Link, variance: VarianceFn },
    RobustGlm { c: f64, link: Link, variance: VarianceFn },
    MlScore(ParametricModel),
}

/// An estimating function `psi(x_i, theta)` in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatingFunction {
    kind: PsiKind,
}

pub fn psi_mean() -> EstimatingFunction {
    EstimatingFunction { kind: PsiKind::Mean }
}

pub fn psi_median() -> EstimatingFunction {
    EstimatingFunction { kind: PsiKind::Median }
}

pub fn psi_huber(c: f64) -> Result<EstimatingFunction> {
    if !(c > 0.0) {
        return Err(CrelError::Domain(format!("Huber constant must be positive, got {c}")));
    }
    Ok(EstimatingFunction { kind: PsiKind::Huber { c } })
}

pub fn psi_tukey(k: f64) -> Result<EstimatingFunction> {
    if !(k > 0.0) {
        return Err(CrelError::Domain(format!("biweight constant must be positive, got {k}")));
    }
    Ok(EstimatingFunction { kind: PsiKind::Tukey { k } })
}

pub fn psi_glm(link: Link, variance: VarianceFn) -> EstimatingFunction {
    EstimatingFunction { kind: PsiKind::Glm { link, variance } }
}

pub fn psi_glm_robust(c: f64, link: Link, variance: VarianceFn) -> Result<EstimatingFunction> {
    if !(c > 0.0) {
        return Err(CrelError::Domain(format!("Huber constant must be positive, got {c}")));
    }
    Ok(EstimatingFunction { kind: PsiKind::RobustGlm { c, link, variance } })
}

pub fn psi_ml_score(model: ParametricModel) -> EstimatingFunction {
    EstimatingFunction { kind: PsiKind::MlScore(model) }
}

pub fn huber(u: f64, c: f64) -> f64 {
    u.clamp(-c, c)
}

pub fn tukey(u: f64, k: f64) -> f64 {
    if u.abs() <= k {
        let t = 1.0 - (u / k).powi(2);
        u * t * t
    } else {
        0.0
    }
}

fn tukey_deriv(u: f64, k: f64) -> f64 {
    if u.abs() <= k {
        let t = 1.0 - (u / k).powi(2);
        t * t - 4.0 * (u / k).powi(2) * t
    } else {
        0.0
    }
}

/// Poisson CDF `P(Y <= k)`.
fn poisson_cdf(k: f64, mu: f64) -> f64 {
    if k < 0.0 {
        0.0
    } else {
        gamma_ur(k + 1.0, mu)
    }
}

/// `E[clip(Y, a, b)]` for `Y ~ Poisson(mu)`, `a < b`.
fn poisson_clipped_mean(mu: f64, a: f64, b: f64) -> f64 {
    let lower = if a >= 0.0 { a * poisson_cdf(a.floor(), mu) } else { 0.0 };
    let j1 = if a >= 0.0 { a.floor() + 1.0 } else { 0.0 };
    let j2 = b.ceil() - 1.0;
    let upper = b * (1.0 - poisson_cdf(b.ceil() - 1.0, mu));
    let middle = if j2 >= j1 { mu * (poisson_cdf(j2 - 1.0, mu) - poisson_cdf(j1 - 2.0, mu)) } else { 0.0 };
    lower + middle + upper
}

/// Above this mean the incomplete-gamma sums get slow and lose accuracy.
const POISSON_EDGEWORTH_MU: f64 = 1e4;

/// `E[psi_c((Y - mu)/sqrt(V(mu)))]` under the working model at `mu`.
pub fn expected_huber_residual(c: f64, mu: f64, variance: VarianceFn) -> f64 {
    match variance {
        // symmetric Gaussian residual
        VarianceFn::Constant => 0.0,
        VarianceFn::Poisson => {
            if mu <= 0.0 {
                return 0.0;
            }
            let s = mu.sqrt();
            if mu > POISSON_EDGEWORTH_MU {
                // one-term Edgeworth: the skewness 1/sqrt(mu) times E[psi_c(Z) He3(Z)] / 6
                let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
                return -c * phi / (3.0 * s);
            }
            let m = poisson_clipped_mean(mu, mu - c * s, mu + c * s);
            (m - mu) / s
        }
    }
}

impl EstimatingFunction {
    pub fn kind(&self) -> &PsiKind {
        &self.kind
    }

    /// Short identifier used in tables and file names.
    pub fn label(&self) -> String {
        match &self.kind {
            PsiKind::Mean => "mean".into(),
            PsiKind::Median => "median".into(),
            PsiKind::Huber { c } => format!("huber({c})"),
            PsiKind::Tukey { k } => format!("tukey({k})"),
            PsiKind::Glm { .. } => "glm".into(),
            PsiKind::RobustGlm { c, .. } => format!("robust-glm({c})"),
            PsiKind::MlScore(_) => "ml-score".into(),
        }
    }

    /// Parse `mean`, `median`, `huber[:c]`, `tukey[:k]`, `glm`, `robust-glm[:c]`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let num = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse::<f64>().map_err(|_| CrelError::Parse(format!("bad tuning constant `{a}`")))
            })
        };
        match name {
            "mean" => Ok(psi_mean()),
            "median" => Ok(psi_median()),
            "huber" => psi_huber(num(1.345)?),
            "tukey" | "biweight" => psi_tukey(num(4.685)?),
            "glm" => Ok(psi_glm(Link::Log, VarianceFn::Poisson)),
            "robust-glm" => psi_glm_robust(num(1.6)?, Link::Log, VarianceFn::Poisson),
            _ => Err(CrelError::Parse(format!("unknown estimating function `{spec}`"))),
        }
    }

    pub fn is_smooth(&self) -> bool {
        match &self.kind {
            PsiKind::Median => false,
            PsiKind::MlScore(m) => !matches!(m, ParametricModel::Laplace { .. }),
            _ => true,
        }
    }

    fn is_glm(&self) -> bool {
        matches!(self.kind, PsiKind::Glm { .. } | PsiKind::RobustGlm { .. })
    }

    pub fn dim(&self, data: &Dataset) -> usize {
        match &self.kind {
            PsiKind::Glm { .. } | PsiKind::RobustGlm { .. } => data.design().map_or(0, |x| x.ncols()),
            PsiKind::MlScore(m) => m.dim(data),
            _ => 1,
        }
    }

    fn check(&self, data: &Dataset, theta: &DVector<f64>) -> Result<()> {
        if self.is_glm() || matches!(self.kind, PsiKind::MlScore(ParametricModel::PoissonRegression)) {
            data.glm_parts()?;
        }
        let d = self.dim(data);
        if theta.len() != d {
            return Err(CrelError::Schema(format!(
                "`{}` needs a parameter of length {d}, got {}",
                self.label(),
                theta.len()
            )));
        }
        Ok(())
    }

    fn scalar(&self, x: f64, theta: f64) -> f64 {
        let u = x - theta;
        match &self.kind {
            PsiKind::Mean => u,
            PsiKind::Median => {
                if u <= 0.0 {
                    0.5
                } else {
                    -0.5
                }
            }
            PsiKind::Huber { c } => huber(u, *c),
            PsiKind::Tukey { k } => tukey(u, *k),
            _ => unreachable!("scalar psi"),
        }
    }

    fn scalar_deriv(&self, x: f64, theta: f64) -> f64 {
        let u = x - theta;
        match &self.kind {
            PsiKind::Mean => -1.0,
            PsiKind::Huber { c } => {
                if u.abs() <= *c {
                    -1.0
                } else {
                    0.0
                }
            }
            PsiKind::Tukey { k } => -tukey_deriv(u, *k),
            _ => unreachable!("smooth scalar psi"),
        }
    }

    /// Scalar value `psi(x, theta)` for the univariate location families.
    pub fn value_at(&self, x: f64, theta: f64) -> Result<f64> {
        match &self.kind {
            PsiKind::Mean | PsiKind::Median | PsiKind::Huber { .. } | PsiKind::Tukey { .. } => {
                Ok(self.scalar(x, theta))
            }
            _ => Err(CrelError::Schema(format!("`{}` is not a scalar location function", self.label()))),
        }
    }

    /// All `psi(x_i, theta)` as the rows of an `n x d` matrix.
    pub fn evaluate_all(&self, data: &Dataset, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(data, theta)?;
        let n = data.n();
        match &self.kind {
            PsiKind::Mean | PsiKind::Median | PsiKind::Huber { .. } | PsiKind::Tukey { .. } => {
                let t = theta[0];
                Ok(DMatrix::from_iterator(n, 1, data.values().iter().map(|&x| self.scalar(x, t))))
            }
            PsiKind::Glm { link, variance } => {
                let (y, x) = data.glm_parts()?;
                let eta = x * theta;
                let mut out = x.clone();
                for i in 0..n {
                    let mu = link.mu(eta[i]);
                    let g = (y[i] - mu) * link.dmu(mu) / variance.v(mu);
                    out.row_mut(i).scale_mut(g);
                }
                Ok(out)
            }
            PsiKind::RobustGlm { c, link, variance } => {
                let (y, x) = data.glm_parts()?;
                let eta = x * theta;
                let d = x.ncols();
                let mut out = x.clone();
                let mut correction = DVector::zeros(d);
                for i in 0..n {
                    let mu = link.mu(eta[i]);
                    let sv = variance.v(mu).sqrt();
                    let w = link.dmu(mu) / sv;
                    let r = (y[i] - mu) / sv;
                    correction += x.row(i).transpose() * (expected_huber_residual(*c, mu, *variance) * w);
                    out.row_mut(i).scale_mut(huber(r, *c) * w);
                }
                correction /= n as f64;
                for i in 0..n {
                    let mut row = out.row_mut(i);
                    row -= correction.transpose();
                }
                Ok(out)
            }
            PsiKind::MlScore(model) => {
                let d = model.dim(data);
                let mut out = DMatrix::zeros(n, d);
                for i in 0..n {
                    out.set_row(i, &model.score(data, i, theta).transpose());
                }
                Ok(out)
            }
        }
    }

    /// `psi(x_i, theta)` for a single observation.
    pub fn evaluate(&self, data: &Dataset, i: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.kind {
            PsiKind::RobustGlm { .. } => Ok(self.evaluate_all(data, theta)?.row(i).transpose()),
            _ => {
                self.check(data, theta)?;
                match &self.kind {
                    PsiKind::Glm { link, variance } => {
                        let (y, x) = data.glm_parts()?;
                        let xi = x.row(i).transpose();
                        let mu = link.mu(xi.dot(theta));
                        Ok(xi * ((y[i] - mu) * link.dmu(mu) / variance.v(mu)))
                    }
                    PsiKind::MlScore(model) => Ok(model.score(data, i, theta)),
                    _ => Ok(DVector::from_element(1, self.scalar(data.values()[i], theta[0]))),
                }
            }
        }
    }

    /// `(1/n) sum_i psi(x_i, theta)`.
    pub fn mean_value(&self, data: &Dataset, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.evaluate_all(data, theta)?;
        Ok(m.row_mean().transpose())
    }

    /// `d psi(x_i, theta) / d theta` (rows index psi components).
    pub fn jacobian(&self, data: &Dataset, i: usize, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.is_smooth() {
            return Err(CrelError::NonSmooth(self.label()));
        }
        self.check(data, theta)?;
        match &self.kind {
            PsiKind::Glm { link, variance } => {
                let (y, x) = data.glm_parts()?;
                let xi = x.row(i).transpose();
                let mu = link.mu(xi.dot(theta));
                let (m1, m2, v) = (link.dmu(mu), link.d2mu(mu), variance.v(mu));
                // d/d eta of (y - mu) m1 / v
                let g = -m1 * m1 / v + (y[i] - mu) * (m2 / v - m1 * m1 * variance.dv() / (v * v));
                Ok(&xi * xi.transpose() * g)
            }
            PsiKind::RobustGlm { .. } => {
                let all = numeric_jacobian(theta, |t| self.evaluate_all(data, t).map(|m| m.row(i).transpose()))?;
                Ok(all)
            }
            PsiKind::MlScore(model) => Ok(model.obs_hessian(data, i, theta)),
            _ => Ok(DMatrix::from_element(1, 1, self.scalar_deriv(data.values()[i], theta[0]))),
        }
    }

    /// `(1/n) sum_i d psi(x_i, theta) / d theta`.
    pub fn mean_jacobian(&self, data: &Dataset, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.is_smooth() {
            return Err(CrelError::NonSmooth(self.label()));
        }
        if let PsiKind::RobustGlm { .. } = self.kind {
            return numeric_jacobian(theta, |t| self.mean_value(data, t));
        }
        let d = self.dim(data);
        let mut acc = DMatrix::zeros(d, d);
        for i in 0..data.n() {
            acc += self.jacobian(data, i, theta)?;
        }
        Ok(acc / data.n() as f64)
    }
}

impl fmt::Display for EstimatingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Central-difference step for coordinate value `t`.
pub fn fd_step(t: f64) -> f64 {
    1e-5 * t.abs().max(1.0)
}

/// Central-difference jacobian of a vector function; column `r` holds the
/// derivative in `theta_r`.
pub fn numeric_jacobian(
    theta: &DVector<f64>,
    f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let mut cols = Vec::with_capacity(d);
    for r in 0..d {
        let h = fd_step(theta[r]);
        let mut tp = theta.clone();
        tp[r] += h;
        let mut tm = theta.clone();
        tm[r] -= h;
        cols.push((f(&tp)? - f(&tm)?) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Result of solving `sum_i psi(x_i, theta) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MEstimate {
    pub theta_hat: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Root of the estimating equation: sort-based for the median-type scores,
/// damped Newton otherwise.
pub fn solve_m_estimate(psi: &EstimatingFunction, data: &Dataset, theta0: &DVector<f64>) -> Result<MEstimate> {
    if theta0.iter().any(|t| !t.is_finite()) {
        return Err(CrelError::Domain("starting point must be finite".into()));
    }
    let sort_based = matches!(psi.kind, PsiKind::Median | PsiKind::MlScore(ParametricModel::Laplace { .. }));
    if sort_based {
        let t = DVector::from_element(1, crate::stats::median(data.values()));
        let res = psi.evaluate_all(data, &t)?.row_sum().amax();
        return Ok(MEstimate { theta_hat: t, residual_norm: res, iterations: 0 });
    }
    let n = data.n() as f64;
    let sum = |t: &DVector<f64>| -> Result<DVector<f64>> { Ok(psi.mean_value(data, t)? * n) };
    let mut theta = theta0.clone();
    let mut g = sum(&theta)?;
    let scale = psi.evaluate_all(data, &theta)?.amax().max(1.0);
    let tol = 1e-10 * n * scale;
    for iter in 0..200 {
        let res = g.amax();
        if res <= tol {
            return Ok(MEstimate { theta_hat: theta, residual_norm: res, iterations: iter });
        }
        let jac = psi.mean_jacobian(data, &theta)? * n;
        let step = match jac.clone().lu().solve(&(-&g)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            // flat region of a redescending score: move by a gradient step on |g|^2
            _ => -(jac.transpose() * &g) / (jac.norm_squared() + 1.0),
        };
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand = &theta + &step * t;
            let gc = sum(&cand)?;
            if gc.iter().all(|v| v.is_finite()) && gc.norm() < g.norm() * (1.0 - 1e-4 * t) {
                theta = cand;
                g = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let res = g.amax();
            if res <= 1e-8 * n * scale {
                return Ok(MEstimate { theta_hat: theta, residual_norm: res, iterations: iter });
            }
            return Err(CrelError::Convergence { iterations: iter, residual: res });
        }
    }
    let res = g.amax();
    if res <= 1e-8 * n * scale {
        return Ok(MEstimate { theta_hat: theta, residual_norm: res, iterations: 200 });
    }
    Err(CrelError::Convergence { iterations: 200, residual: res })
}

/// M-estimate from a data-driven start: the sample median for location
/// scores, the Poisson maximum likelihood fit for GLM scores and the model's
/// own fit for likelihood scores.
pub fn m_estimate(psi: &EstimatingFunction, data: &Dataset) -> Result<MEstimate> {
    let start = match &psi.kind {
        PsiKind::Glm { .. } | PsiKind::RobustGlm { .. } => ParametricModel::PoissonRegression.ml_fit(data)?,
        PsiKind::MlScore(model) => model.ml_fit(data)?,
        _ => DVector::from_element(1, crate::stats::median(data.values())),
    };
    solve_m_estimate(psi, data, &start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{contaminated_poisson, ContaminationConfig};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Exp, Normal, Poisson};

    fn one(x: f64) -> Dataset {
        Dataset::univariate(vec![x]).unwrap()
    }

    fn th(t: f64) -> DVector<f64> {
        DVector::from_element(1, t)
    }

    fn val(psi: &EstimatingFunction, x: f64, t: f64) -> f64 {
        psi.evaluate(&one(x), 0, &th(t)).unwrap()[0]
    }

    #[test]
    fn scalar_values() {
        assert_eq!(val(&psi_mean(), 2.0, 0.5), 1.5);
        assert_eq!(val(&psi_mean(), 0.7, 0.7), 0.0);
        assert_eq!(val(&psi_median(), 1.0, 2.0), 0.5);
        assert_eq!(val(&psi_median(), 3.0, 2.0), -0.5);
        assert_eq!(val(&psi_median(), 2.0, 2.0), 0.5);
        let h = psi_huber(1.345).unwrap();
        assert_eq!(val(&h, 2.0, 0.0), 1.345);
        assert!((val(&h, 0.3, 0.0) - 0.3).abs() < 1e-15);
        assert_eq!(val(&h, -5.0, 0.0), -1.345);
        let t = psi_tukey(4.685).unwrap();
        assert_eq!(val(&t, 5.0, 0.0), 0.0);
        assert!((val(&t, 1.0, 0.0) - 0.9109563).abs() < 1e-7);
        assert_eq!(val(&t, 0.0, 0.0), 0.0);
        assert!((val(&t, 1e-3, 0.0) - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn invalid_tuning_constants() {
        assert!(matches!(psi_huber(0.0), Err(CrelError::Domain(_))));
        assert!(matches!(psi_tukey(-1.0), Err(CrelError::Domain(_))));
        assert!(matches!(psi_glm_robust(0.0, Link::Log, VarianceFn::Poisson), Err(CrelError::Domain(_))));
    }

    #[test]
    fn median_jacobian_unavailable() {
        let r = psi_median().jacobian(&one(1.0), 0, &th(0.0));
        assert!(matches!(r, Err(CrelError::NonSmooth(_))));
    }

    #[test]
    fn glm_requires_design() {
        let r = psi_glm(Link::Log, VarianceFn::Poisson).evaluate_all(&one(1.0), &th(0.0));
        assert!(matches!(r, Err(CrelError::Schema(_))));
    }

    #[test]
    fn m_estimates() {
        let d = Dataset::univariate(vec![-1.0, 0.0, 2.0]).unwrap();
        let m = solve_m_estimate(&psi_mean(), &d, &th(0.0)).unwrap();
        assert!((m.theta_hat[0] - 1.0 / 3.0).abs() < 1e-12);
        let d5 = Dataset::univariate(vec![5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(solve_m_estimate(&psi_median(), &d5, &th(0.0)).unwrap().theta_hat[0], 3.0);
        let sym = Dataset::univariate(vec![-0.5, -0.2, 0.1, 0.4, 0.7]).unwrap();
        let hub = solve_m_estimate(&psi_huber(1.345).unwrap(), &sym, &th(0.0)).unwrap();
        assert!((hub.theta_hat[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn huber_and_tukey_m_estimates_are_roots() {
        let mut r = rng::stream(3, &[]);
        let xs: Vec<f64> = (0..200).map(|_| Exp::new(1.0).unwrap().sample(&mut r)).collect();
        let d = Dataset::univariate(xs).unwrap();
        for psi in [psi_huber(1.345).unwrap(), psi_tukey(4.685).unwrap()] {
            let med = crate::stats::median(d.values());
            let m = solve_m_estimate(&psi, &d, &th(med)).unwrap();
            assert!(m.residual_norm <= 1e-8 * 200.0, "{psi}: {}", m.residual_norm);
        }
    }

    #[test]
    fn glm_log_link_summand() {
        let beta = DVector::from_vec(vec![0.3, -0.2]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 4.0, 0.0]);
        let d = Dataset::glm(y.clone(), x.clone()).unwrap();
        let psi = psi_glm(Link::Log, VarianceFn::Poisson);
        let v = psi.evaluate_all(&d, &beta).unwrap();
        for i in 0..3 {
            let mu = x.row(i).transpose().dot(&beta).exp();
            for j in 0..2 {
                assert!((v[(i, j)] - (y[i] - mu) * x[(i, j)]).abs() < 1e-12);
            }
        }
        let mu_y = DVector::from_fn(3, |i, _| x.row(i).transpose().dot(&beta).exp());
        let at_mu = Dataset::glm(mu_y, x).unwrap();
        assert!(psi.evaluate_all(&at_mu, &beta).unwrap().amax() < 1e-12);
    }

    #[test]
    fn clipped_poisson_mean_matches_finite_sum() {
        for &mu in &[0.3f64, 1.7, 6.0, 40.0, 250.0] {
            for &c in &[0.5, 1.6, 3.0] {
                let s: f64 = mu.sqrt();
                let upper = (mu + 10.0 * s).ceil() as u64 + 20;
                let mut p = (-mu).exp();
                let mut acc = 0.0;
                for y in 0..=upper {
                    if y > 0 {
                        p *= mu / y as f64;
                    }
                    acc += huber((y as f64 - mu) / s, c) * p;
                }
                let closed = expected_huber_residual(c, mu, VarianceFn::Poisson);
                assert!((acc - closed).abs() < 1e-10, "mu {mu} c {c}: {acc} vs {closed}");
            }
        }
    }

    #[test]
    fn large_mean_huber_residual_is_continuous() {
        for &c in &[1.0, 1.6, 2.5] {
            let below = expected_huber_residual(c, POISSON_EDGEWORTH_MU * 0.999, VarianceFn::Poisson);
            let above = expected_huber_residual(c, POISSON_EDGEWORTH_MU * 1.001, VarianceFn::Poisson);
            assert!((below - above).abs() < 2e-3 * below.abs(), "c {c}: {below} vs {above}");
        }
    }

    fn clean_glm(n: usize, seed: u64) -> (Dataset, DVector<f64>) {
        let beta = DVector::from_vec(vec![0.5, 0.6, 0.3]);
        let cfg = ContaminationConfig { clean_fraction: 1.0, ..Default::default() };
        (contaminated_poisson(n, &beta, &cfg, seed).unwrap().data, beta)
    }

    #[test]
    fn robust_glm_limit_is_classical() {
        let (d, beta) = clean_glm(80, 1);
        let a = psi_glm_robust(1e6, Link::Log, VarianceFn::Poisson).unwrap().evaluate_all(&d, &beta).unwrap();
        let b = psi_glm(Link::Log, VarianceFn::Poisson).evaluate_all(&d, &beta).unwrap();
        assert!((a - b).amax() < 1e-6);
    }

    #[test]
    fn smooth_jacobians_match_finite_differences() {
        let mut r = rng::stream(17, &[]);
        let scalar = [psi_mean(), psi_huber(1.345).unwrap(), psi_tukey(4.685).unwrap()];
        for _ in 0..100 {
            let x: f64 = r.random::<f64>() * 8.0 - 4.0;
            let t: f64 = r.random::<f64>() * 2.0 - 1.0;
            for psi in &scalar {
                let d = one(x);
                let a = psi.jacobian(&d, 0, &th(t)).unwrap()[(0, 0)];
                let num = numeric_jacobian(&th(t), |tt| psi.evaluate(&d, 0, tt)).unwrap()[(0, 0)];
                // skip points within a step of a kink
                let u = x - t;
                let near_kink = match psi.kind() {
                    PsiKind::Huber { c } => (u.abs() - c).abs() < 1e-4,
                    PsiKind::Tukey { k } => (u.abs() - k).abs() < 1e-4,
                    _ => false,
                };
                if !near_kink {
                    assert!((a - num).abs() <= 1e-5 * a.abs().max(1e-3), "{psi} at u={u}: {a} vs {num}");
                }
            }
        }
        let (d, beta) = clean_glm(60, 2);
        let psi = psi_glm(Link::Log, VarianceFn::Poisson);
        for i in 0..5 {
            let a = psi.jacobian(&d, i, &beta).unwrap();
            let num = numeric_jacobian(&beta, |t| psi.evaluate(&d, i, t)).unwrap();
            assert!((&a - &num).amax() <= 1e-5 * a.amax());
        }
        for link in [Link::Log, Link::Identity] {
            for var in [VarianceFn::Poisson, VarianceFn::Constant] {
                let psi = psi_glm(link, var);
                let b = if link == Link::Identity { DVector::from_vec(vec![4.0, 0.5, 0.2]) } else { beta.clone() };
                let a = psi.jacobian(&d, 3, &b).unwrap();
                let num = numeric_jacobian(&b, |t| psi.evaluate(&d, 3, t)).unwrap();
                assert!((&a - &num).amax() <= 1e-5 * a.amax().max(1.0), "{link:?} {var:?}");
            }
        }
    }

    #[test]
    fn glm_m_estimate_solves_score() {
        let (d, beta) = clean_glm(120, 5);
        let psi = psi_glm_robust(1.6, Link::Log, VarianceFn::Poisson).unwrap();
        let m = solve_m_estimate(&psi, &d, &beta).unwrap();
        assert!(m.residual_norm <= 1e-8 * 120.0);
    }

    #[test]
    fn unbiasedness_monte_carlo() {
        const N: usize = 100_000;
        let bound = |vals: &[f64]| {
            let m = crate::stats::mean(vals);
            let sd = crate::stats::variance(vals).sqrt();
            (m, 3.0 * sd / (N as f64).sqrt())
        };
        // symmetric location families at a symmetric model
        let mut r = rng::stream(23, &[]);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..N).map(|_| nd.sample(&mut r)).collect();
        for psi in [psi_mean(), psi_median(), psi_huber(1.345).unwrap(), psi_tukey(4.685).unwrap()] {
            let vals: Vec<f64> = xs.iter().map(|&x| psi.value_at(x, 0.0).unwrap()).collect();
            let (m, b) = bound(&vals);
            assert!(m.abs() <= b, "{psi}: {m} > {b}");
        }
        // GLM families: single observation at fixed covariates, many draws
        let x: DMatrix<f64> = DMatrix::from_row_slice(4, 2, &[1.0, -0.5, 1.0, 0.0, 1.0, 0.4, 1.0, 1.2]);
        let beta = DVector::from_vec(vec![0.4, 0.8]);
        let mus: Vec<f64> = (0..4).map(|i| f64::exp(x.row(i).transpose().dot(&beta))).collect();
        for psi in [psi_glm(Link::Log, VarianceFn::Poisson), psi_glm_robust(1.6, Link::Log, VarianceFn::Poisson).unwrap()]
        {
            let mut sums = vec![Vec::with_capacity(N / 4); 2];
            for _ in 0..N / 4 {
                let y = DVector::from_fn(4, |i, _| Poisson::new(mus[i]).unwrap().sample(&mut r));
                let d = Dataset::glm(y, x.clone()).unwrap();
                let s = psi.mean_value(&d, &beta).unwrap();
                sums[0].push(s[0]);
                sums[1].push(s[1]);
            }
            for comp in &sums {
                let m = crate::stats::mean(comp);
                let b = 3.0 * crate::stats::variance(comp).sqrt() / (comp.len() as f64).sqrt();
                assert!(m.abs() <= b, "{psi}: {m} > {b}");
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(EstimatingFunction::parse("huber").unwrap(), psi_huber(1.345).unwrap());
        assert_eq!(EstimatingFunction::parse("tukey:3").unwrap(), psi_tukey(3.0).unwrap());
        assert!(matches!(EstimatingFunction::parse("foo"), Err(CrelError::Parse(_))));
    }

    proptest! {
        #[test]
        fn huber_approaches_mean(u in -50.0f64..50.0) {
            prop_assert_eq!(huber(u, 1e3), u);
        }

        #[test]
        fn median_m_estimate_is_sample_median(xs in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let d = Dataset::univariate(xs.clone()).unwrap();
            let m = solve_m_estimate(&psi_median(), &d, &th(0.0)).unwrap();
            prop_assert_eq!(m.theta_hat[0], crate::stats::median(&xs));
        }
    }
}
