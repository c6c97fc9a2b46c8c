//! Datasets, parametric reference models, priors and the data-generating
//! processes of the simulation studies.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, Uniform};

use crate::error::{CrelError, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor3;

/// Observations plus, for regression problems, a response and a design matrix.
///
/// For GLM data `obs` holds the response in column 0 followed by the design
/// columns, so that a row of `obs` is a complete observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    obs: DMatrix<f64>,
    response: Option<DVector<f64>>,
    design: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(obs: DMatrix<f64>) -> Result<Self> {
        if obs.nrows() == 0 || obs.ncols() == 0 {
            return Err(CrelError::Schema("dataset must have at least one row and column".into()));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(CrelError::Schema("dataset contains non-finite entries".into()));
        }
        Ok(Self { obs, response: None, design: None })
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(DMatrix::from_vec(n, 1, values))
    }

    pub fn glm(response: DVector<f64>, design: DMatrix<f64>) -> Result<Self> {
        let n = response.len();
        if design.nrows() != n {
            return Err(CrelError::Schema(format!(
                "response has {n} rows but design has {}",
                design.nrows()
            )));
        }
        if n <= design.ncols() {
            return Err(CrelError::Schema(format!(
                "need more observations ({n}) than coefficients ({})",
                design.ncols()
            )));
        }
        let mut obs = DMatrix::zeros(n, design.ncols() + 1);
        obs.set_column(0, &response);
        obs.view_mut((0, 1), (n, design.ncols())).copy_from(&design);
        let mut ds = Self::new(obs)?;
        ds.response = Some(response);
        ds.design = Some(design);
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.obs.nrows()
    }

    pub fn p(&self) -> usize {
        self.obs.ncols()
    }

    pub fn obs(&self) -> &DMatrix<f64> {
        &self.obs
    }

    /// Contiguous view of column `j` of the observations.
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.obs.as_slice()[j * n..(j + 1) * n]
    }

    /// The observations of a univariate dataset.
    pub fn values(&self) -> &[f64] {
        self.column(0)
    }

    pub fn is_univariate(&self) -> bool {
        self.p() == 1 && self.response.is_none()
    }

    pub fn response(&self) -> Option<&DVector<f64>> {
        self.response.as_ref()
    }

    pub fn design(&self) -> Option<&DMatrix<f64>> {
        self.design.as_ref()
    }

    /// Response and design of a GLM dataset.
    pub fn glm_parts(&self) -> Result<(&DVector<f64>, &DMatrix<f64>)> {
        match (&self.response, &self.design) {
            (Some(y), Some(x)) => Ok((y, x)),
            _ => Err(CrelError::Schema("dataset has no response/design columns".into())),
        }
    }

    /// Same design with a different response vector.
    pub fn with_response(&self, response: DVector<f64>) -> Result<Self> {
        let (_, x) = self.glm_parts()?;
        Self::glm(response, x.clone())
    }

    /// Parse delimited text with a header row. A header of the form
    /// `y,x1,..,xd` yields a GLM dataset; anything else is read as plain
    /// observation columns.
    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| CrelError::Parse(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CrelError::Parse(e.to_string()))?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| CrelError::Parse(format!("row {}: cannot parse `{s}`", line + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                return Err(CrelError::Parse(format!(
                    "row {} has {} fields, header has {}",
                    line + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CrelError::Parse("no data rows".into()));
        }
        let n = rows.len();
        let p = header.len();
        let mat = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let is_glm = p >= 2
            && header[0].eq_ignore_ascii_case("y")
            && header[1..].iter().enumerate().all(|(j, h)| h.eq_ignore_ascii_case(&format!("x{}", j + 1)));
        if is_glm {
            let y = mat.column(0).into_owned();
            let x = mat.columns(1, p - 1).into_owned();
            Self::glm(y, x)
        } else {
            Self::new(mat)
        }
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }
}

/// Empirical CDF `F_n(t) = #{x_i <= t} / n` of the first observation column.
pub fn ecdf(data: &Dataset, t: f64) -> f64 {
    let xs = data.values();
    xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64
}

pub(crate) fn laplace_draws(rng: &mut impl Rng, n: usize, location: f64, scale: f64) -> Vec<f64> {
    let exp = Exp::new(1.0).expect("unit rate");
    (0..n)
        .map(|_| {
            let e: f64 = exp.sample(rng);
            if rng.random::<bool>() {
                location + scale * e
            } else {
                location - scale * e
            }
        })
        .collect()
}

/// `n` i.i.d. Laplace(`theta`, 1) draws.
pub fn generate_laplace(n: usize, theta: f64, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, &[0x1a91_ace]);
    Dataset::univariate(laplace_draws(&mut rng, n, theta, 1.0)).expect("finite draws")
}

/// Outlier process for the Poisson regression study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContaminationConfig {
    pub clean_fraction: f64,
    pub outlier_mean: f64,
    pub outlier_spread: f64,
    /// Treat `outlier_spread` as a variance rather than a standard deviation.
    pub spread_is_variance: bool,
}

impl Default for ContaminationConfig {
    fn default() -> Self {
        Self { clean_fraction: 0.9, outlier_mean: 42.5, outlier_spread: 0.01, spread_is_variance: true }
    }
}

impl ContaminationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clean_fraction > 0.0 && self.clean_fraction <= 1.0) {
            return Err(CrelError::Domain(format!(
                "clean_fraction must lie in (0, 1], got {}",
                self.clean_fraction
            )));
        }
        if !(self.outlier_spread >= 0.0) {
            return Err(CrelError::Domain("outlier_spread must be nonnegative".into()));
        }
        Ok(())
    }

    fn outlier_sd(&self) -> f64 {
        if self.spread_is_variance {
            self.outlier_spread.sqrt()
        } else {
            self.outlier_spread
        }
    }
}

/// A contaminated Poisson regression sample together with its clean counterpart
/// (the Poisson responses that the outliers replaced).
#[derive(Clone, Debug)]
pub struct ContaminatedPoisson {
    pub data: Dataset,
    pub clean: Dataset,
    pub outlier: Vec<bool>,
}

/// Intercept plus two covariates, `x1 ~ N(3, 0.7)` and `x2 ~ U(1, 1.5)`, each
/// recentred and rescaled to mean 0 and variance 1.
pub fn standardized_design(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(3.0, 0.7).expect("valid normal");
    let unif = Uniform::new(1.0, 1.5).expect("valid range");
    let x1: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| unif.sample(rng)).collect();
    let standardize = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / n as f64;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        v.iter().map(|x| (x - m) / s).collect()
    };
    let (z1, z2) = (standardize(&x1), standardize(&x2));
    DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => z1[i],
        _ => z2[i],
    })
}

/// Responses for a fixed design: Poisson(exp(x'beta)) with probability
/// `clean_fraction`, otherwise a rounded, nonnegative Normal outlier.
pub fn contaminated_responses(
    design: &DMatrix<f64>,
    beta: &DVector<f64>,
    config: &ContaminationConfig,
    rng: &mut impl Rng,
) -> Result<ContaminatedPoisson> {
    config.validate()?;
    let n = design.nrows();
    let eta = design * beta;
    let outlier_dist = Normal::new(config.outlier_mean, config.outlier_sd())
        .map_err(|e| CrelError::Domain(e.to_string()))?;
    let mut y = DVector::zeros(n);
    let mut clean_y = DVector::zeros(n);
    let mut outlier = vec![false; n];
    for i in 0..n {
        let mu = eta[i].exp();
        let pois = Poisson::new(mu).map_err(|e| CrelError::Domain(format!("Poisson mean {mu}: {e}")))?;
        let clean: f64 = pois.sample(rng);
        let u: f64 = rng.random();
        let o: f64 = outlier_dist.sample(rng);
        clean_y[i] = clean;
        if u < config.clean_fraction {
            y[i] = clean;
        } else {
            y[i] = o.round().max(0.0);
            outlier[i] = true;
        }
    }
    Ok(ContaminatedPoisson {
        data: Dataset::glm(y, design.clone())?,
        clean: Dataset::glm(clean_y, design.clone())?,
        outlier,
    })
}

/// Design and responses drawn from one seed.
pub fn contaminated_poisson(
    n: usize,
    beta: &DVector<f64>,
    config: &ContaminationConfig,
    seed: u64,
) -> Result<ContaminatedPoisson> {
    let mut rng = rng::stream(seed, &[0x9015_5011]);
    let design = standardized_design(n, &mut rng);
    contaminated_responses(&design, beta, config, &mut rng)
}

pub fn generate_contaminated_poisson(
    n: usize,
    beta: &DVector<f64>,
    config: &ContaminationConfig,
    seed: u64,
) -> Result<Dataset> {
    Ok(contaminated_poisson(n, beta, config, seed)?.data)
}

/// Parametric models that serve as the "true" likelihood in the accuracy
/// studies.
#[derive(Clone, Debug, PartialEq)]
pub enum ParametricModel {
    /// Location model with density `exp(-|x - theta| / b) / (2b)`.
    Laplace { scale: f64 },
    /// Normal location model with known standard deviation.
    NormalLocation { sigma: f64 },
    /// Normal with `theta = (mu, sigma)`.
    Normal,
    /// Poisson log-linear regression on a GLM dataset.
    PoissonRegression,
}

impl ParametricModel {
    pub fn dim(&self, data: &Dataset) -> usize {
        match self {
            Self::Laplace { .. } | Self::NormalLocation { .. } => 1,
            Self::Normal => 2,
            Self::PoissonRegression => data.design().map_or(0, |x| x.ncols()),
        }
    }

    fn check(&self, data: &Dataset, theta: &DVector<f64>) -> Result<()> {
        let d = self.dim(data);
        if matches!(self, Self::PoissonRegression) {
            data.glm_parts()?;
        }
        if theta.len() != d {
            return Err(CrelError::Domain(format!("parameter has length {}, model needs {d}", theta.len())));
        }
        if let Self::Normal = self {
            if theta[1] <= 0.0 {
                return Err(CrelError::Domain("normal scale must be positive".into()));
            }
        }
        Ok(())
    }

    /// Log density of a scalar observation; `None` for regression models.
    pub fn scalar_log_density(&self, x: f64, theta: &DVector<f64>) -> Option<f64> {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        match self {
            Self::Laplace { scale } => Some(-(x - theta[0]).abs() / scale - (2.0 * scale).ln()),
            Self::NormalLocation { sigma } => {
                Some(-0.5 * ((x - theta[0]) / sigma).powi(2) - sigma.ln() - 0.5 * ln2pi)
            }
            Self::Normal => Some(-0.5 * ((x - theta[0]) / theta[1]).powi(2) - theta[1].ln() - 0.5 * ln2pi),
            Self::PoissonRegression => None,
        }
    }

    pub fn log_density(&self, data: &Dataset, i: usize, theta: &DVector<f64>) -> f64 {
        match self {
            Self::PoissonRegression => {
                let (y, x) = data.glm_parts().expect("GLM dataset");
                let eta = x.row(i).dot(&theta.transpose());
                y[i] * eta - eta.exp() - ln_factorial(y[i])
            }
            _ => self.scalar_log_density(data.values()[i], theta).expect("scalar model"),
        }
    }

    pub fn log_likelihood(&self, data: &Dataset, theta: &DVector<f64>) -> f64 {
        match self {
            Self::Laplace { scale } => {
                let t = theta[0];
                let n = data.n() as f64;
                -data.values().iter().map(|x| (x - t).abs()).sum::<f64>() / scale - n * (2.0 * scale).ln()
            }
            _ => (0..data.n()).map(|i| self.log_density(data, i, theta)).sum(),
        }
    }

    /// Gradient of the log density of observation `i`.
    pub fn score(&self, data: &Dataset, i: usize, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Laplace { scale } => {
                let r = data.values()[i] - theta[0];
                DVector::from_element(1, r.signum() / scale)
            }
            Self::NormalLocation { sigma } => {
                DVector::from_element(1, (data.values()[i] - theta[0]) / sigma.powi(2))
            }
            Self::Normal => {
                let (mu, s) = (theta[0], theta[1]);
                let r = data.values()[i] - mu;
                DVector::from_vec(vec![r / (s * s), -1.0 / s + r * r / s.powi(3)])
            }
            Self::PoissonRegression => {
                let (y, x) = data.glm_parts().expect("GLM dataset");
                let xi = x.row(i).transpose();
                let mu = xi.dot(theta).exp();
                xi * (y[i] - mu)
            }
        }
    }

    /// Hessian of the log density of observation `i` (zero almost everywhere
    /// for the Laplace model).
    pub fn obs_hessian(&self, data: &Dataset, i: usize, theta: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Self::Laplace { .. } => DMatrix::zeros(1, 1),
            Self::NormalLocation { sigma } => DMatrix::from_element(1, 1, -1.0 / sigma.powi(2)),
            Self::Normal => {
                let (mu, s) = (theta[0], theta[1]);
                let r = data.values()[i] - mu;
                let a = -1.0 / (s * s);
                let b = -2.0 * r / s.powi(3);
                let c = 1.0 / (s * s) - 3.0 * r * r / s.powi(4);
                DMatrix::from_row_slice(2, 2, &[a, b, b, c])
            }
            Self::PoissonRegression => {
                let (_, x) = data.glm_parts().expect("GLM dataset");
                let xi = x.row(i).transpose();
                let mu = xi.dot(theta).exp();
                -(&xi * xi.transpose()) * mu
            }
        }
    }

    /// `L_rs = -(1/n) d^2 log L / d theta_r d theta_s`.
    ///
    /// The Laplace log likelihood has zero curvature almost everywhere, so the
    /// expected information `1/b^2` is used instead.
    pub fn info2(&self, data: &Dataset, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(data, theta)?;
        let d = self.dim(data);
        Ok(match self {
            Self::Laplace { scale } => DMatrix::from_element(1, 1, 1.0 / (scale * scale)),
            _ => {
                let mut acc = DMatrix::zeros(d, d);
                for i in 0..data.n() {
                    acc -= self.obs_hessian(data, i, theta);
                }
                acc / data.n() as f64
            }
        })
    }

    /// `L_rst = -(1/n) d^3 log L / d theta_r d theta_s d theta_t`.
    pub fn info3(&self, data: &Dataset, theta: &DVector<f64>) -> Result<Tensor3> {
        self.check(data, theta)?;
        let n = data.n() as f64;
        Ok(match self {
            Self::Laplace { .. } | Self::NormalLocation { .. } => Tensor3::zeros(1),
            Self::Normal => {
                let (mu, s) = (theta[0], theta[1]);
                let xs = data.values();
                let m1 = xs.iter().map(|x| x - mu).sum::<f64>() / n;
                let m2 = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
                // third derivatives of log f for (mu, sigma)
                let d_mmm = 0.0;
                let d_mms = 2.0 / s.powi(3);
                let d_mss = 6.0 * m1 / s.powi(4);
                let d_sss = -2.0 / s.powi(3) + 12.0 * m2 / s.powi(5);
                Tensor3::from_fn(2, |a, b, c| {
                    -match a + b + c {
                        0 => d_mmm,
                        1 => d_mms,
                        2 => d_mss,
                        _ => d_sss,
                    }
                })
            }
            Self::PoissonRegression => {
                let (_, x) = data.glm_parts()?;
                let d = x.ncols();
                let mut t = Tensor3::zeros(d);
                for i in 0..data.n() {
                    let xi = x.row(i);
                    let mu = xi.transpose().dot(theta).exp();
                    for r in 0..d {
                        for s in 0..d {
                            for u in 0..d {
                                t[[r, s, u]] += mu * xi[r] * xi[s] * xi[u] / n;
                            }
                        }
                    }
                }
                t
            }
        })
    }

    /// Expected per-observation Fisher information for the scalar location
    /// models.
    pub fn fisher_information(&self) -> Option<f64> {
        match self {
            Self::Laplace { scale } => Some(1.0 / (scale * scale)),
            Self::NormalLocation { sigma } => Some(1.0 / (sigma * sigma)),
            _ => None,
        }
    }

    /// Density of a scalar location model at `x` for true location 0.
    pub fn standard_density(&self, x: f64) -> Option<f64> {
        self.scalar_log_density(x, &DVector::from_element(self.scalar_dim(), 0.0)).map(f64::exp)
    }

    fn scalar_dim(&self) -> usize {
        match self {
            Self::Normal => 2,
            _ => 1,
        }
    }

    /// Maximum likelihood estimate.
    pub fn ml_fit(&self, data: &Dataset) -> Result<DVector<f64>> {
        match self {
            Self::Laplace { .. } => Ok(DVector::from_element(1, crate::stats::median(data.values()))),
            Self::NormalLocation { .. } => Ok(DVector::from_element(1, crate::stats::mean(data.values()))),
            Self::Normal => {
                let xs = data.values();
                let m = crate::stats::mean(xs);
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
                Ok(DVector::from_vec(vec![m, v.sqrt()]))
            }
            Self::PoissonRegression => poisson_regression_fit(data),
        }
    }
}

fn ln_factorial(y: f64) -> f64 {
    statrs::function::gamma::ln_gamma(y + 1.0)
}

fn poisson_regression_fit(data: &Dataset) -> Result<DVector<f64>> {
    let (y, x) = data.glm_parts()?;
    let d = x.ncols();
    let mut beta = DVector::zeros(d);
    beta[0] = (y.mean().max(0.5)).ln();
    let model = ParametricModel::PoissonRegression;
    for iter in 0..200 {
        let mut grad = DVector::zeros(d);
        let mut info = DMatrix::zeros(d, d);
        for i in 0..data.n() {
            grad += model.score(data, i, &beta);
            info -= model.obs_hessian(data, i, &beta);
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or_else(|| CrelError::Singular("Poisson information matrix".into()))?
            .solve(&grad);
        let ll0 = model.log_likelihood(data, &beta);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let ll = model.log_likelihood(data, &cand);
            if ll.is_finite() && ll >= ll0 - 1e-12 * ll0.abs() {
                beta = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(CrelError::Convergence { iterations: iter, residual: grad.amax() });
            }
        }
        if step.amax() * t < 1e-10 {
            return Ok(beta);
        }
    }
    Err(CrelError::Convergence { iterations: 200, residual: f64::NAN })
}

/// Log prior `xi = log pi` with derivatives.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    /// Improper uniform prior; `xi = 0`.
    Flat { dim: usize },
    /// Independent normal components.
    Normal { mean: DVector<f64>, sd: DVector<f64> },
}

impl Prior {
    pub fn normal(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != sd.len() || sd.iter().any(|s| !(*s > 0.0)) {
            return Err(CrelError::Domain("normal prior needs matching means and positive sds".into()));
        }
        Ok(Self::Normal { mean: DVector::from_vec(mean), sd: DVector::from_vec(sd) })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Flat { dim } => *dim,
            Self::Normal { mean, .. } => mean.len(),
        }
    }

    pub fn xi(&self, theta: &DVector<f64>) -> f64 {
        match self {
            Self::Flat { .. } => 0.0,
            Self::Normal { mean, sd } => (0..mean.len())
                .map(|j| {
                    let z = (theta[j] - mean[j]) / sd[j];
                    -0.5 * z * z - sd[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum(),
        }
    }

    pub fn grad_xi(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Flat { dim } => DVector::zeros(*dim),
            Self::Normal { mean, sd } => {
                DVector::from_fn(mean.len(), |j, _| -(theta[j] - mean[j]) / (sd[j] * sd[j]))
            }
        }
    }

    pub fn hess_xi(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Self::Flat { dim } => DMatrix::zeros(*dim, *dim),
            Self::Normal { sd, .. } => DMatrix::from_diagonal(&sd.map(|s| -1.0 / (s * s))),
        }
    }

    /// Prior mode; the origin for the flat prior, where every point is stationary.
    pub fn mode(&self) -> DVector<f64> {
        match self {
            Self::Flat { dim } => DVector::zeros(*dim),
            Self::Normal { mean, .. } => mean.clone(),
        }
    }
}

/// One-parameter exponential families in mean parametrisation, with `x = U(y) = y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExponentialFamilyModel {
    /// Exponential distribution; natural parameter `-rate`.
    Exponential,
    /// Poisson counts; natural parameter `log mean`.
    Poisson,
    /// Normal with unit variance; natural parameter equal to the mean.
    NormalUnitVariance,
}

impl ExponentialFamilyModel {
    pub fn sufficient_stat(&self, y: f64) -> f64 {
        y
    }

    pub fn log_partition(&self, natural: f64) -> f64 {
        match self {
            Self::Exponential => -(-natural).ln(),
            Self::Poisson => natural.exp(),
            Self::NormalUnitVariance => 0.5 * natural * natural,
        }
    }

    /// `theta = Gamma'(natural)`.
    pub fn mean_param(&self, natural: f64) -> f64 {
        match self {
            Self::Exponential => -1.0 / natural,
            Self::Poisson => natural.exp(),
            Self::NormalUnitVariance => natural,
        }
    }

    pub fn natural_param(&self, mean: f64) -> f64 {
        match self {
            Self::Exponential => -1.0 / mean,
            Self::Poisson => mean.ln(),
            Self::NormalUnitVariance => mean,
        }
    }

    /// Log-likelihood score in the mean parametrisation reduces to `U(y) - theta`.
    pub fn score(&self, y: f64, mean: f64) -> f64 {
        self.sufficient_stat(y) - self.mean_param(self.natural_param(mean))
    }

    pub fn sample(&self, n: usize, mean: f64, rng: &mut StreamRng) -> Vec<f64> {
        match self {
            Self::Exponential => {
                let d = Exp::new(1.0 / mean).expect("positive mean");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Self::Poisson => {
                let d = Poisson::new(mean).expect("positive mean");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Self::NormalUnitVariance => {
                let d = Normal::new(mean, 1.0).expect("finite mean");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }

    /// Standardised third and fourth moments `(skewness, kurtosis)` at `mean`.
    pub fn standardized_moments(&self, mean: f64) -> (f64, f64) {
        match self {
            Self::Exponential => (2.0, 9.0),
            Self::Poisson => (1.0 / mean.sqrt(), 3.0 + 1.0 / mean),
            Self::NormalUnitVariance => (0.0, 3.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_counts() {
        let d = Dataset::univariate(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(ecdf(&d, 2.5), 0.5);
        assert_eq!(ecdf(&d, 0.0), 0.0);
        assert_eq!(ecdf(&d, 4.0), 1.0);
        assert_eq!(ecdf(&d, 2.0), 0.5);
    }

    #[test]
    fn laplace_generator_is_deterministic() {
        let a = generate_laplace(1, 0.0, 11);
        let b = generate_laplace(1, 0.0, 11);
        assert_eq!(a, b);
        assert_ne!(generate_laplace(5, 0.0, 11), generate_laplace(5, 0.0, 12));
    }

    #[test]
    fn laplace_median_concentrates() {
        let d = generate_laplace(100_000, 3.0, 5);
        let med = crate::stats::median(d.values());
        // asymptotic sd of the median is 1/sqrt(n)
        assert!((med - 3.0).abs() < 3.0 / (100_000f64).sqrt(), "median {med}");
    }

    #[test]
    fn contamination_share_and_clean_case() {
        let beta = DVector::from_vec(vec![0.5, 2.2, 1.2]);
        let s = contaminated_poisson(10_000, &beta, &ContaminationConfig::default(), 3).unwrap();
        let share = s.outlier.iter().filter(|&&o| o).count() as f64 / 10_000.0;
        assert!((share - 0.1).abs() < 0.01, "share {share}");
        for (i, &o) in s.outlier.iter().enumerate() {
            let y = s.data.response().unwrap()[i];
            assert!(y >= 0.0 && y.fract() == 0.0);
            if o {
                assert!((y - 42.0).abs() <= 1.0);
            }
        }
        let cfg = ContaminationConfig { clean_fraction: 1.0, ..Default::default() };
        let c = contaminated_poisson(500, &beta, &cfg, 3).unwrap();
        assert!(c.outlier.iter().all(|o| !o));
        assert_eq!(c.data.response(), c.clean.response());
    }

    #[test]
    fn design_is_standardized() {
        let mut rng = rng::stream(1, &[]);
        let x = standardized_design(120, &mut rng);
        for j in 1..3 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let m = crate::stats::mean(&col);
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 120.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_contamination_rejected() {
        let cfg = ContaminationConfig { clean_fraction: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(CrelError::Domain(_))));
    }

    #[test]
    fn csv_loader_detects_glm_columns() {
        let text = "y,x1,x2\n1,1,0.5\n0,1,-0.2\n3,1,1.1\n";
        let d = Dataset::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(d.design().unwrap().ncols(), 2);
        assert_eq!(d.response().unwrap()[2], 3.0);
        let u = Dataset::from_csv_reader("x\n-1\n0\n2\n".as_bytes()).unwrap();
        assert!(u.is_univariate());
        assert!(matches!(Dataset::from_csv_reader("x\nfoo\n".as_bytes()), Err(CrelError::Parse(_))));
    }

    #[test]
    fn glm_dataset_requires_more_rows_than_columns() {
        let r = Dataset::glm(DVector::from_vec(vec![1.0, 2.0]), DMatrix::from_element(2, 2, 1.0));
        assert!(matches!(r, Err(CrelError::Schema(_))));
    }

    fn numeric_info2(model: &ParametricModel, data: &Dataset, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = theta.len();
        let n = data.n() as f64;
        let f = |t: &DVector<f64>| -model.log_likelihood(data, t) / n;
        DMatrix::from_fn(d, d, |r, s| {
            let hr = 1e-4 * theta[r].abs().max(1.0);
            let hs = 1e-4 * theta[s].abs().max(1.0);
            let shift = |a: f64, b: f64| {
                let mut t = theta.clone();
                t[r] += a;
                t[s] += b;
                f(&t)
            };
            (shift(hr, hs) - shift(hr, -hs) - shift(-hr, hs) + shift(-hr, -hs)) / (4.0 * hr * hs)
        })
    }

    #[test]
    fn analytic_information_matches_numeric_hessian() {
        let mut rng = rng::stream(9, &[]);
        let xs: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
        let data = Dataset::univariate(xs).unwrap();
        for _ in 0..10 {
            let theta = DVector::from_vec(vec![rng.random::<f64>(), 0.8 + rng.random::<f64>()]);
            let a = ParametricModel::Normal.info2(&data, &theta).unwrap();
            let b = numeric_info2(&ParametricModel::Normal, &data, &theta);
            assert!((&a - &b).amax() <= 1e-5 * a.amax(), "{a} vs {b}");
        }
        let beta = DVector::from_vec(vec![0.5, 0.4, 0.2]);
        let s = contaminated_poisson(100, &beta, &ContaminationConfig { clean_fraction: 1.0, ..Default::default() }, 2)
            .unwrap();
        let model = ParametricModel::PoissonRegression;
        let a = model.info2(&s.data, &beta).unwrap();
        let b = numeric_info2(&model, &s.data, &beta);
        assert!((&a - &b).amax() <= 1e-5 * a.amax());
    }

    #[test]
    fn normal_info3_matches_numeric_derivative_of_info2() {
        let data = Dataset::univariate(vec![-1.0, 0.3, 0.9, 2.5, 1.1]).unwrap();
        let theta = DVector::from_vec(vec![0.4, 1.3]);
        let t3 = ParametricModel::Normal.info3(&data, &theta).unwrap();
        let h = 1e-5;
        for u in 0..2 {
            let mut tp = theta.clone();
            tp[u] += h;
            let mut tm = theta.clone();
            tm[u] -= h;
            let dp = ParametricModel::Normal.info2(&data, &tp).unwrap();
            let dm = ParametricModel::Normal.info2(&data, &tm).unwrap();
            for r in 0..2 {
                for s in 0..2 {
                    let num = (dp[(r, s)] - dm[(r, s)]) / (2.0 * h);
                    assert!((num - t3[[r, s, u]]).abs() < 1e-6 * (1.0 + num.abs()));
                }
            }
        }
    }

    #[test]
    fn exponential_family_score_identity() {
        for fam in [ExponentialFamilyModel::Exponential, ExponentialFamilyModel::Poisson, ExponentialFamilyModel::NormalUnitVariance] {
            for &(y, m) in &[(0.3, 1.7), (2.0, 0.4), (5.0, 5.0)] {
                assert!((fam.score(y, m) - (y - m)).abs() < 1e-12);
                let nat = fam.natural_param(m);
                let h = 1e-6;
                let numeric = (fam.log_partition(nat + h) - fam.log_partition(nat - h)) / (2.0 * h);
                assert!((numeric - m).abs() < 1e-6 * m.max(1.0));
            }
        }
    }

    #[test]
    fn normal_prior_mode_is_stationary() {
        let p = Prior::normal(vec![0.5, 2.2, 1.2], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(p.grad_xi(&p.mode()).amax() < 1e-12);
        let h = p.hess_xi(&p.mode());
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn poisson_fit_solves_score_equation() {
        let beta = DVector::from_vec(vec![0.5, 0.8, 0.3]);
        let s = contaminated_poisson(150, &beta, &ContaminationConfig { clean_fraction: 1.0, ..Default::default() }, 4)
            .unwrap();
        let fit = ParametricModel::PoissonRegression.ml_fit(&s.data).unwrap();
        let mut g = DVector::zeros(3);
        for i in 0..150 {
            g += ParametricModel::PoissonRegression.score(&s.data, i, &fit);
        }
        assert!(g.amax() < 1e-6, "score {g}");
        assert!((&fit - &beta).amax() < 0.3);
    }
}
