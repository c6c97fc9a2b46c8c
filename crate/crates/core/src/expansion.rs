//! Moment tensors and higher-order expansions of the GELR statistic and of
//! the posterior quantile.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, Prior};
use crate::error::{CrelError, Result};
use crate::estimating::{fd_step, EstimatingFunction};
use crate::stats::norm_quantile;
use crate::tensor::{Tensor3, Tensor4};

/// Quartic-term coefficients of the higher-order GELR expansion.
pub fn h_coeffs(gamma: f64) -> (f64, f64) {
    if (gamma + 1.0).abs() < 1e-12 {
        (0.75, 0.25)
    } else {
        let g2 = gamma * gamma;
        ((4.0 - g2) / 4.0, (2.0 - g2) / 4.0)
    }
}

/// Cross-product moments of a matrix of estimating function values.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiMoments {
    pub n: usize,
    /// `omega_kl = (1/n) sum_i psi_i^k psi_i^l`.
    pub omega: DMatrix<f64>,
    pub omega_inv: DMatrix<f64>,
    pub alpha3: Tensor3,
    pub alpha4: Tensor4,
}

impl PsiMoments {
    pub fn from_psi(psi: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = psi.shape();
        let nf = n as f64;
        let omega = psi.transpose() * psi / nf;
        let omega_inv = spd_inverse(&omega, "cross-product matrix")?;
        let mut alpha3 = Tensor3::zeros(d);
        let mut alpha4 = Tensor4::zeros(d);
        for i in 0..n {
            let p = psi.row(i);
            for j in 0..d {
                for k in j..d {
                    for l in k..d {
                        let pjkl = p[j] * p[k] * p[l];
                        alpha3[[j, k, l]] += pjkl / nf;
                        for m in l..d {
                            alpha4[[j, k, l, m]] += pjkl * p[m] / nf;
                        }
                    }
                }
            }
        }
        Ok(Self { n, omega, omega_inv, alpha3: fill_sorted3(alpha3), alpha4: fill_sorted4(alpha4) })
    }
}

fn fill_sorted3(t: Tensor3) -> Tensor3 {
    Tensor3::from_fn(t.dim(), |a, b, c| {
        let mut i = [a, b, c];
        i.sort_unstable();
        t[i]
    })
}

fn fill_sorted4(t: Tensor4) -> Tensor4 {
    Tensor4::from_fn(t.dim(), |a, b, c, e| {
        let mut i = [a, b, c, e];
        i.sort_unstable();
        t[i]
    })
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .cholesky()
        .ok_or_else(|| CrelError::Singular(format!("{what} is not positive definite")))?
        .inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(CrelError::Singular(format!("{what} is numerically singular")));
    }
    Ok(inv)
}

/// All moment and derivative tensors at a parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTensors {
    pub n: usize,
    pub theta: DVector<f64>,
    pub psi_bar: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub omega_inv: DMatrix<f64>,
    /// `v1[(k, r)] = v^k_r = -(1/n) sum_i d psi_i^k / d theta_r`.
    pub v1: DMatrix<f64>,
    /// `v2[[k, r, s]] = v^k_rs`.
    pub v2: Tensor3,
    /// `omega_deriv[[k, l, t]] = d omega^{kl} / d theta_t`.
    pub omega_deriv: Tensor3,
    pub alpha3: Tensor3,
    pub alpha4: Tensor4,
    /// `K = V' Omega^{-1} V`.
    pub k: DMatrix<f64>,
    /// `nu^{rs}`, the elements of `K^{-1}`.
    pub nu_inv: DMatrix<f64>,
    /// Lower Cholesky factor of `K^{-1}`.
    pub tau: DMatrix<f64>,
}

impl MomentTensors {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn moments(&self) -> PsiMoments {
        PsiMoments {
            n: self.n,
            omega: self.omega.clone(),
            omega_inv: self.omega_inv.clone(),
            alpha3: self.alpha3.clone(),
            alpha4: self.alpha4.clone(),
        }
    }
}

/// Build every tensor at `theta`. Derivatives of the jacobian and of
/// `Omega^{-1}` are taken by central differences.
pub fn compute_tensors(data: &Dataset, psi: &EstimatingFunction, theta: &DVector<f64>) -> Result<MomentTensors> {
    let d = theta.len();
    let values = psi.evaluate_all(data, theta)?;
    let m = PsiMoments::from_psi(&values)?;
    let psi_bar = values.row_mean().transpose();
    let v1 = -psi.mean_jacobian(data, theta)?;

    let mut v2 = Tensor3::zeros(d);
    let mut omega_deriv = Tensor3::zeros(d);
    for s in 0..d {
        let h = fd_step(theta[s]);
        let mut tp = theta.clone();
        tp[s] += h;
        let mut tm = theta.clone();
        tm[s] -= h;
        let jp = psi.mean_jacobian(data, &tp)?;
        let jm = psi.mean_jacobian(data, &tm)?;
        let op = PsiMoments::from_psi(&psi.evaluate_all(data, &tp)?)?.omega_inv;
        let om = PsiMoments::from_psi(&psi.evaluate_all(data, &tm)?)?.omega_inv;
        for k in 0..d {
            for r in 0..d {
                v2[[k, r, s]] = -(jp[(k, r)] - jm[(k, r)]) / (2.0 * h);
                omega_deriv[[k, r, s]] = (op[(k, r)] - om[(k, r)]) / (2.0 * h);
            }
        }
    }
    let v2 = v2.symmetrized_tail();
    let omega_deriv = omega_deriv.symmetrized_head();

    let k = v1.transpose() * &m.omega_inv * &v1;
    let k = (&k + k.transpose()) * 0.5;
    let nu_inv = spd_inverse(&k, "empirical information matrix")?;
    let nu_inv = (&nu_inv + nu_inv.transpose()) * 0.5;
    let tau = nu_inv
        .clone()
        .cholesky()
        .ok_or_else(|| CrelError::Singular("inverse information has no Cholesky factor".into()))?
        .l();
    Ok(MomentTensors {
        n: data.n(),
        theta: theta.clone(),
        psi_bar,
        omega: m.omega,
        omega_inv: m.omega_inv,
        v1,
        v2,
        omega_deriv,
        alpha3: m.alpha3,
        alpha4: m.alpha4,
        k,
        nu_inv,
        tau,
    })
}

/// Expansion of the GELR statistic in powers of `psi_bar`, truncated after
/// `order` terms (1, 2 or 3), on the scale of the statistic itself.
pub fn gelr_expansion(moments: &PsiMoments, psi_bar: &DVector<f64>, gamma: f64, order: u8) -> Result<f64> {
    if !(1..=3).contains(&order) {
        return Err(CrelError::Domain(format!("expansion order must be 1, 2 or 3, got {order}")));
    }
    let d = psi_bar.len();
    let a = &moments.omega_inv * psi_bar;
    let mut value = psi_bar.dot(&a);
    if order >= 2 {
        let mut cubic = 0.0;
        for k in 0..d {
            for l in 0..d {
                for m in 0..d {
                    cubic += a[k] * a[l] * a[m] * moments.alpha3[[k, l, m]];
                }
            }
        }
        value += 2.0 / 3.0 * cubic;
    }
    if order >= 3 {
        let (h1, h2) = h_coeffs(gamma);
        let pi = DVector::from_fn(d, |t, _| {
            let mut s = 0.0;
            for k in 0..d {
                for l in 0..d {
                    s += moments.alpha3[[t, k, l]] * a[k] * a[l];
                }
            }
            s
        });
        let mut quart = 0.0;
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        quart += a[j] * a[k] * a[l] * a[m] * moments.alpha4[[j, k, l, m]];
                    }
                }
            }
        }
        value += h1 * pi.dot(&(&moments.omega_inv * &pi)) - h2 * quart;
    }
    Ok(moments.n as f64 * value)
}

/// Cubic coefficient tensor `G_rst`, symmetrised over its indices.
pub fn g_tensor(t: &MomentTensors) -> Tensor3 {
    let d = t.dim();
    let v = &t.v1;
    let w = &t.omega_inv;
    // omega^{kl} omega^{km} omega^{lm} alpha_klm, contracted as written
    let c = Tensor3::from_fn(d, |k, l, m| w[(k, l)] * w[(k, m)] * w[(l, m)] * t.alpha3[[k, l, m]]);
    let g = Tensor3::from_fn(d, |r, s, u| {
        let mut a = 0.0;
        let mut b = 0.0;
        let mut cc = 0.0;
        for k in 0..d {
            for l in 0..d {
                a += v[(k, r)] * t.v2[[l, s, u]] * w[(k, l)];
                b += v[(k, r)] * v[(l, s)] * t.omega_deriv[[k, l, u]];
                for m in 0..d {
                    cc += v[(k, r)] * v[(l, s)] * v[(m, u)] * c[[k, l, m]];
                }
            }
        }
        a + b - 2.0 / 3.0 * cc
    });
    g.symmetrized()
}

/// Quartic coefficient tensor `J_rstw(gamma)`, symmetrised over its indices.
pub fn j_tensor(t: &MomentTensors, gamma: f64) -> Tensor4 {
    let d = t.dim();
    let (h1, h2) = h_coeffs(gamma);
    let v = &t.v1;
    let w = &t.omega_inv;
    // B_jklm = h1 sum_oq alpha_jko omega^oq alpha_lmq - h2 alpha_jklm
    let mut aw = Tensor3::zeros(d);
    for j in 0..d {
        for k in 0..d {
            for q in 0..d {
                let mut s = 0.0;
                for o in 0..d {
                    s += t.alpha3[[j, k, o]] * w[(o, q)];
                }
                aw[[j, k, q]] = s;
            }
        }
    }
    // D_klm = sum_j omega^jk omega^jl omega^kl omega^km B_jklm
    let mut dd = Tensor3::zeros(d);
    for j in 0..d {
        for k in 0..d {
            for l in 0..d {
                for m in 0..d {
                    let mut b = -h2 * t.alpha4[[j, k, l, m]];
                    if h1 != 0.0 {
                        let mut s = 0.0;
                        for q in 0..d {
                            s += aw[[j, k, q]] * t.alpha3[[l, m, q]];
                        }
                        b += h1 * s;
                    }
                    dd[[k, l, m]] += w[(j, k)] * w[(j, l)] * w[(k, l)] * w[(k, m)] * b;
                }
            }
        }
    }
    let mut j4 = Tensor4::zeros(d);
    for r in 0..d {
        for s in 0..d {
            for u in 0..d {
                for x in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        let vv = v[(k, r)] * v[(k, s)];
                        for l in 0..d {
                            let vvv = vv * v[(l, u)];
                            for m in 0..d {
                                acc += vvv * v[(m, x)] * dd[[k, l, m]];
                            }
                        }
                    }
                    j4[[r, s, u, x]] = acc;
                }
            }
        }
    }
    j4.symmetrized()
}

/// `G`, `J` and the `h` coefficients at a given `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionCoeffs {
    pub g: Tensor3,
    pub j: Tensor4,
    pub h1: f64,
    pub h2: f64,
}

impl ExpansionCoeffs {
    pub fn new(t: &MomentTensors, gamma: f64) -> Self {
        let (h1, h2) = h_coeffs(gamma);
        Self { g: g_tensor(t), j: j_tensor(t, gamma), h1, h2 }
    }

    pub fn zeros(d: usize) -> Self {
        Self { g: Tensor3::zeros(d), j: Tensor4::zeros(d), h1: 0.0, h2: 0.0 }
    }
}

/// First-order posterior quantile `theta_1 + Phi^{-1}(alpha) sqrt(nu^{11}/n)`.
pub fn quantile_expansion_first(theta_hat: &DVector<f64>, t: &MomentTensors, alpha: f64, n: usize) -> f64 {
    theta_hat[0] + norm_quantile(alpha) * (t.nu_inv[(0, 0)] / n as f64).sqrt()
}

/// Standardised pivot `sqrt(n) (theta_01 - theta_1) / sqrt(nu^{11})`.
pub fn z_n(theta01: f64, theta_hat: &DVector<f64>, t: &MomentTensors, n: usize) -> f64 {
    (n as f64).sqrt() * (theta01 - theta_hat[0]) / t.nu_inv[(0, 0)].sqrt()
}

/// Coefficients of the cubic `Z(eta) = c0 + eta + c2 eta^2 + c3 eta^3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZPolynomial {
    pub c0: f64,
    pub c2: f64,
    pub c3: f64,
}

impl ZPolynomial {
    pub fn eval(&self, eta: f64) -> f64 {
        self.c0 + eta + self.c2 * eta * eta + self.c3 * eta * eta * eta
    }

    fn deriv(&self, eta: f64) -> f64 {
        1.0 + 2.0 * self.c2 * eta + 3.0 * self.c3 * eta * eta
    }

    /// Interval around zero on which `Z` is increasing.
    fn monotone_interval(&self) -> (f64, f64) {
        const BIG: f64 = 1e6;
        let (a, b, c) = (3.0 * self.c3, 2.0 * self.c2, 1.0);
        let mut crit: Vec<f64> = if a.abs() < 1e-300 {
            if b != 0.0 {
                vec![-c / b]
            } else {
                vec![]
            }
        } else {
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                vec![]
            } else {
                let sq = disc.sqrt();
                vec![(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
            }
        };
        crit.retain(|x| x.is_finite());
        let lo = crit.iter().copied().filter(|&x| x < 0.0).fold(-BIG, f64::max);
        let hi = crit.iter().copied().filter(|&x| x > 0.0).fold(BIG, f64::min);
        (lo, hi)
    }

    /// Root of `Z(eta) = target` on the increasing branch through zero.
    pub fn solve(&self, target: f64) -> Result<f64> {
        let (mut lo, mut hi) = self.monotone_interval();
        if !(self.eval(lo) <= target && target <= self.eval(hi)) {
            return Err(CrelError::Expansion(format!(
                "quantile equation has no root on the monotone branch [{lo:.3}, {hi:.3}] (c0={:.3e}, c2={:.3e}, c3={:.3e})",
                self.c0, self.c2, self.c3
            )));
        }
        let mut x = (target - self.c0).clamp(lo, hi);
        for _ in 0..200 {
            let f = self.eval(x) - target;
            if f.abs() <= 1e-14 * (1.0 + target.abs()) {
                break;
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let dx = self.deriv(x);
            let nx = x - f / dx;
            x = if dx > 0.0 && nx > lo && nx < hi { nx } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        Ok(x)
    }
}

/// Builds the quantile polynomial from the tensors, coefficients and prior.
pub fn z_polynomial(t: &MomentTensors, coeffs: &ExpansionCoeffs, prior: &Prior, n: usize) -> ZPolynomial {
    let d = t.dim();
    let tau = &t.tau;
    let rn = (n as f64).sqrt();
    let mut t3 = 0.0;
    let mut t3b = 0.0;
    for r in 0..d {
        for s in 0..d {
            for u in 0..d {
                let g = coeffs.g[[r, s, u]];
                t3 += tau[(r, 0)] * tau[(s, 0)] * tau[(u, 0)] * g;
                let mut tail = 0.0;
                for a in 1..d {
                    tail += tau[(s, a)] * tau[(u, a)];
                }
                t3b += tau[(r, 0)] * tail * g;
            }
        }
    }
    let m0 = prior.mode();
    let xi2 = prior.hess_xi(&m0);
    let mut p1 = 0.0;
    for r in 0..d {
        for s in 0..d {
            p1 += tau[(r, 0)] * (t.theta[s] - m0[s]) * xi2[(r, s)];
        }
    }
    let mut t4 = 0.0;
    for r in 0..d {
        for s in 0..d {
            for u in 0..d {
                for w in 0..d {
                    t4 += tau[(r, 0)] * tau[(s, 0)] * tau[(u, 0)] * tau[(w, 0)] * coeffs.j[[r, s, u, w]];
                }
            }
        }
    }
    ZPolynomial { c0: t3 / rn + 1.5 * t3b / rn - p1 / rn, c2: t3 / (2.0 * rn), c3: t4 / (2.0 * n as f64) }
}

/// Higher-order posterior quantile at level `alpha`: solves `Z(eta) =
/// Phi^{-1}(alpha)` and maps back to `theta_1 + sqrt(nu^{11}/n) eta`.
/// `t` must be evaluated at the M-estimate `theta_hat`.
pub fn quantile_expansion_higher(
    theta_hat: &DVector<f64>,
    t: &MomentTensors,
    coeffs: &ExpansionCoeffs,
    prior: &Prior,
    alpha: f64,
    n: usize,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CrelError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let poly = z_polynomial(t, coeffs, prior, n);
    let eta = poly.solve(norm_quantile(alpha))?;
    Ok(theta_hat[0] + t.tau[(0, 0)] * eta / (n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ParametricModel;
    use crate::estimating::{psi_huber, psi_mean, psi_ml_score, solve_m_estimate};
    use crate::rng;
    use crate::stats;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_data(n: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, &[]);
        let nd = Normal::new(0.0, 1.0).unwrap();
        Dataset::univariate((0..n).map(|_| nd.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn h_table() {
        assert_eq!(h_coeffs(0.0), (1.0, 0.5));
        assert_eq!(h_coeffs(-1.0), (0.75, 0.25));
        assert_eq!(h_coeffs(-2.0), (0.0, -0.5));
        for g in [-3.0, -2.0, -1.0, -2.0 / 3.0, -0.5, 0.0, 1.0, 2.5] {
            let (h1, h2) = h_coeffs(g);
            assert!((h1 - h2 - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_psi_tensors() {
        let d = normal_data(40, 1);
        let xs = d.values();
        let m = stats::mean(xs);
        let t = compute_tensors(&d, &psi_mean(), &DVector::from_element(1, m)).unwrap();
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 40.0;
        assert!((t.omega[(0, 0)] - var).abs() < 1e-12);
        assert!((t.v1[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((t.k[(0, 0)] - 1.0 / var).abs() < 1e-10);
        assert!((t.tau[(0, 0)] - t.nu_inv[(0, 0)].sqrt()).abs() < 1e-14);
        assert!(t.v2[[0, 0, 0]].abs() < 1e-8);
        // d omega^{11}/d theta vanishes at the mean
        assert!(t.omega_deriv[[0, 0, 0]].abs() < 1e-6);
    }

    #[test]
    fn scaled_psi_leaves_k_unchanged() {
        let d = normal_data(30, 2);
        let th = DVector::from_element(1, 0.1);
        let a = compute_tensors(&d, &psi_mean(), &th).unwrap();
        let doubled = psi_ml_score(ParametricModel::NormalLocation { sigma: 0.5f64.sqrt() });
        let b = compute_tensors(&d, &doubled, &th).unwrap();
        assert!((a.k[(0, 0)] - b.k[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn multivariate_cholesky_identity() {
        let beta = DVector::from_vec(vec![0.5, 0.6, 0.3]);
        let cfg = crate::data::ContaminationConfig { clean_fraction: 1.0, ..Default::default() };
        let s = crate::data::contaminated_poisson(100, &beta, &cfg, 7).unwrap();
        let psi = crate::estimating::psi_glm(crate::estimating::Link::Log, crate::estimating::VarianceFn::Poisson);
        let fit = solve_m_estimate(&psi, &s.data, &beta).unwrap().theta_hat;
        let t = compute_tensors(&s.data, &psi, &fit).unwrap();
        assert!((&t.tau * t.tau.transpose() - &t.nu_inv).amax() < 1e-10);
        assert!((&t.k * &t.nu_inv - DMatrix::identity(3, 3)).amax() < 1e-8);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.tau[(i, j)] == 0.0, j > i);
            }
        }
        let g = g_tensor(&t);
        assert!(g.max_abs_diff(&g.symmetrized()) < 1e-10);
    }

    #[test]
    fn gelr_expansion_scalar_cases() {
        let d = normal_data(50, 3);
        let t = compute_tensors(&d, &psi_mean(), &DVector::from_element(1, 0.2)).unwrap();
        let m = t.moments();
        for order in 1..=3 {
            assert_eq!(gelr_expansion(&m, &DVector::zeros(1), 0.0, order).unwrap(), 0.0);
        }
        let pb = t.psi_bar[0];
        let o1 = gelr_expansion(&m, &t.psi_bar, 0.0, 1).unwrap();
        assert!((o1 - 50.0 * pb * pb / t.omega[(0, 0)]).abs() < 1e-10);
        assert!(gelr_expansion(&m, &t.psi_bar, 0.0, 4).is_err());
    }

    #[test]
    fn el_and_et_third_order_gap() {
        let mut r = rng::stream(4, &[]);
        let psi = DMatrix::from_fn(60, 2, |_, _| r.random::<f64>() * 2.0 - 0.9);
        let m = PsiMoments::from_psi(&psi).unwrap();
        let pb = psi.row_mean().transpose();
        let el = gelr_expansion(&m, &pb, 0.0, 3).unwrap();
        let et = gelr_expansion(&m, &pb, -1.0, 3).unwrap();
        let a = &m.omega_inv * &pb;
        let pi = DVector::from_fn(2, |t, _| (0..60).map(|i| psi[(i, t)] * psi.row(i).dot(&a.transpose()).powi(2)).sum::<f64>() / 60.0);
        let quart = (0..60).map(|i| psi.row(i).dot(&a.transpose()).powi(4)).sum::<f64>() / 60.0;
        let expected = 60.0 * (0.25 * pi.dot(&(&m.omega_inv * &pi)) - 0.25 * quart);
        assert!((el - et - expected).abs() < 1e-12 * el.abs().max(1.0));
    }

    fn random_tensors(d: usize, seed: u64) -> MomentTensors {
        let mut r = rng::stream(seed, &[]);
        let psi = DMatrix::from_fn(50, d, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let m = PsiMoments::from_psi(&psi).unwrap();
        let v1 = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } + 0.3 * (r.random::<f64>() - 0.5));
        let k = v1.transpose() * &m.omega_inv * &v1;
        let nu_inv = k.clone().try_inverse().unwrap();
        let r1: Vec<f64> = (0..d * d * d).map(|_| r.random::<f64>()).collect();
        let r2: Vec<f64> = (0..d * d * d).map(|_| r.random::<f64>()).collect();
        let tau = nu_inv.clone().cholesky().unwrap().l();
        MomentTensors {
            n: 50,
            theta: DVector::zeros(d),
            psi_bar: DVector::zeros(d),
            omega: m.omega,
            omega_inv: m.omega_inv,
            v1,
            v2: Tensor3::from_fn(d, |a, b, c| r1[(a * d + b) * d + c]).symmetrized_tail(),
            omega_deriv: Tensor3::from_fn(d, |a, b, c| r2[(a * d + b) * d + c]).symmetrized_head(),
            alpha3: m.alpha3,
            alpha4: m.alpha4,
            k,
            nu_inv,
            tau,
        }
    }

    fn naive_j(t: &MomentTensors, gamma: f64) -> Tensor4 {
        let d = t.dim();
        let (h1, h2) = h_coeffs(gamma);
        let v = &t.v1;
        let w = &t.omega_inv;
        Tensor4::from_fn(d, |r, s, u, x| {
            let mut acc = 0.0;
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        for m in 0..d {
                            let mut inner = 0.0;
                            for o in 0..d {
                                for q in 0..d {
                                    inner += t.alpha3[[j, k, o]] * w[(o, q)] * t.alpha3[[l, m, q]];
                                }
                            }
                            acc += v[(k, r)] * v[(k, s)] * v[(l, u)] * v[(m, x)]
                                * w[(j, k)] * w[(j, l)] * w[(k, l)] * w[(k, m)]
                                * (h1 * inner - h2 * t.alpha4[[j, k, l, m]]);
                        }
                    }
                }
            }
            acc
        })
        .symmetrized()
    }

    #[test]
    fn j_contraction_matches_naive_loops() {
        for gamma in [0.0, -1.0, -2.0, -0.5] {
            let t = random_tensors(3, 11);
            let fast = j_tensor(&t, gamma);
            let slow = naive_j(&t, gamma);
            let scale = slow.as_slice().iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(fast.max_abs_diff(&slow) <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn j_at_minus_two_has_no_h1_part() {
        let t = random_tensors(2, 12);
        let j = j_tensor(&t, -2.0);
        let mut only_h2 = t.clone();
        only_h2.alpha3 = Tensor3::zeros(2);
        let j2 = j_tensor(&only_h2, -2.0);
        assert!(j.max_abs_diff(&j2) < 1e-14);
    }

    #[test]
    fn first_order_quantile() {
        let d = normal_data(10, 5);
        let mut t = compute_tensors(&d, &psi_mean(), &DVector::from_element(1, 0.0)).unwrap();
        t.nu_inv[(0, 0)] = 1.0;
        let th = DVector::from_element(1, 0.3);
        assert_eq!(quantile_expansion_first(&th, &t, 0.5, 100), 0.3);
        assert!((quantile_expansion_first(&th, &t, 0.975, 100) - 0.3 - 0.195996).abs() < 1e-6);
        let s = quantile_expansion_first(&th, &t, 0.1, 100) + quantile_expansion_first(&th, &t, 0.9, 100);
        assert!((s - 0.6).abs() < 1e-14);
        assert_eq!(z_n(0.3, &th, &t, 100), 0.0);
        assert!((z_n(0.3 + 0.1, &th, &t, 100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn higher_reduces_to_first_without_corrections() {
        let d = normal_data(80, 6);
        let m = stats::mean(d.values());
        let th = DVector::from_element(1, m);
        let t = compute_tensors(&d, &psi_mean(), &th).unwrap();
        let prior = Prior::Flat { dim: 1 };
        for a in [0.025, 0.3, 0.5, 0.9] {
            let h = quantile_expansion_higher(&th, &t, &ExpansionCoeffs::zeros(1), &prior, a, 80).unwrap();
            assert!((h - quantile_expansion_first(&th, &t, a, 80)).abs() < 1e-12);
        }
    }

    #[test]
    fn conjugate_normal_quantiles() {
        let n = 200;
        let d = normal_data(n, 7);
        let xs = d.values();
        let xbar = stats::mean(xs);
        let s2 = stats::variance(xs);
        let th = DVector::from_element(1, xbar);
        let t = compute_tensors(&d, &psi_mean(), &th).unwrap();
        let prior = Prior::normal(vec![0.5], vec![1.0]).unwrap();
        let coeffs = ExpansionCoeffs::new(&t, 0.0);
        let prec = n as f64 / s2 + 1.0;
        let post_mean = (n as f64 * xbar / s2 + 0.5) / prec;
        for a in [0.025, 0.5, 0.975] {
            let exact = post_mean + norm_quantile(a) / prec.sqrt();
            let approx = quantile_expansion_higher(&th, &t, &coeffs, &prior, a, n).unwrap();
            assert!((approx - exact).abs() < 5.0 / n as f64, "alpha {a}: {approx} vs {exact}");
        }
    }

    #[test]
    fn gamma_gap_is_order_one_over_n() {
        let d = normal_data(300, 8);
        let psi = psi_huber(1.345).unwrap();
        let fit = solve_m_estimate(&psi, &d, &DVector::from_element(1, 0.0)).unwrap().theta_hat;
        let t = compute_tensors(&d, &psi, &fit).unwrap();
        let prior = Prior::Flat { dim: 1 };
        let q0 = quantile_expansion_higher(&fit, &t, &ExpansionCoeffs::new(&t, 0.0), &prior, 0.9, 300).unwrap();
        let q2 = quantile_expansion_higher(&fit, &t, &ExpansionCoeffs::new(&t, -2.0), &prior, 0.9, 300).unwrap();
        assert!((q0 - q2).abs() < 3.0 / 300.0);
    }

    #[test]
    fn polynomial_root_on_monotone_branch() {
        let p = ZPolynomial { c0: 0.1, c2: -0.05, c3: 0.01 };
        let x = p.solve(1.2).unwrap();
        assert!((p.eval(x) - 1.2).abs() < 1e-12);
        let bad = ZPolynomial { c0: 0.0, c2: -1.0, c3: 0.0 };
        assert!(matches!(bad.solve(2.0), Err(CrelError::Expansion(_))));
    }
}
