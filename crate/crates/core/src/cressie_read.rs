//! The inner Cressie-Read problem: Lagrange multipliers, weights and the GELR
//! statistic.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::data::{ecdf, Dataset};
use crate::error::{CrelError, Result};
use crate::estimating::{EstimatingFunction, PsiKind};

const BRANCH_EPS: f64 = 1e-6;
const MAX_ITER: usize = 200;

/// Which closed form of the weight formula applies at a given `gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Branch {
    /// Empirical likelihood, `gamma = 0`: `w_i ∝ 1/(1 + u_i)`.
    El,
    /// Exponential tilting, `gamma = -1`: `w_i ∝ exp(u_i)`.
    Et,
    /// General member: `w_i ∝ (1 + u_i)^q` with `q = -1/(gamma + 1)`.
    Power { q: f64 },
}

impl Branch {
    pub fn of(gamma: f64) -> Self {
        if gamma.abs() < BRANCH_EPS {
            Self::El
        } else if (gamma + 1.0).abs() < BRANCH_EPS {
            Self::Et
        } else {
            Self::Power { q: -1.0 / (gamma + 1.0) }
        }
    }

    fn log_weight(self, u: f64) -> f64 {
        match self {
            Self::El => -u.ln_1p(),
            Self::Et => u,
            Self::Power { q } => q * u.ln_1p(),
        }
    }

    /// Dual objective contribution (shifted so that it vanishes at `u = 0`).
    fn dual(self, u: f64) -> f64 {
        match self {
            Self::El => -u.ln_1p(),
            Self::Et => u.exp_m1(),
            Self::Power { q } => ((q + 1.0) * u.ln_1p()).exp_m1() / (q * (q + 1.0)),
        }
    }

    /// First and second derivatives of `dual` in `u`.
    fn dual_derivs(self, u: f64) -> (f64, f64) {
        match self {
            Self::El => {
                let a = 1.0 / (1.0 + u);
                (-a, a * a)
            }
            Self::Et => {
                let e = u.exp();
                (e, e)
            }
            Self::Power { q } => {
                let l = u.ln_1p();
                ((q * l).exp() / q, ((q - 1.0) * l).exp())
            }
        }
    }

    fn lower_bound(self, n: usize) -> Option<f64> {
        match self {
            Self::Et => None,
            Self::El => Some((1.0 / n as f64).max(1e-10)),
            Self::Power { .. } => Some(1e-10),
        }
    }
}

/// Solution of the inner dual problem.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSolution {
    pub gamma: f64,
    pub lambda: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub in_domain: bool,
}

/// Normalised Cressie-Read weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CRWeights {
    pub weights: DVector<f64>,
    pub gamma: f64,
}

/// Value of the GELR statistic; `+inf` with `hull_ok = false` when zero lies
/// outside the convex hull of the estimating function values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GelrValue {
    pub value: f64,
    pub hull_ok: bool,
}

impl GelrValue {
    pub fn infeasible() -> Self {
        Self { value: f64::INFINITY, hull_ok: false }
    }
}

fn rank(psi: &DMatrix<f64>) -> usize {
    let scale = psi.amax();
    if scale == 0.0 {
        return 0;
    }
    let sv = (psi / scale).singular_values();
    let tol = 1e-10 * (psi.nrows().max(psi.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Whether zero is interior to the convex hull of the rows of `psi`.
/// Matrices whose rows are all zero count as feasible.
pub fn convex_hull_check(psi: &DMatrix<f64>) -> bool {
    let (n, d) = psi.shape();
    if psi.iter().all(|&v| v == 0.0) {
        return true;
    }
    if d == 1 {
        return psi.iter().any(|&v| v > 0.0) && psi.iter().any(|&v| v < 0.0);
    }
    if rank(psi) < d {
        return false;
    }
    // max t subject to w_i >= t, sum w_i psi_i = 0, sum w_i = 1
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let t = lp.add_var(1.0, (-1.0, 1.0));
    let w: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    for &wi in &w {
        lp.add_constraint([(wi, 1.0), (t, -1.0)], ComparisonOp::Ge, 0.0);
    }
    for j in 0..d {
        let col = psi.column(j);
        let s = col.amax();
        if s == 0.0 {
            continue;
        }
        lp.add_constraint(w.iter().enumerate().map(|(i, &wi)| (wi, col[i] / s)), ComparisonOp::Eq, 0.0);
    }
    lp.add_constraint(w.iter().map(|&wi| (wi, 1.0)), ComparisonOp::Eq, 1.0);
    // guard against solver panics on degenerate point sets
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| lp.solve())) {
        Ok(Ok(sol)) => sol.objective() > 1e-10,
        _ => false,
    }
}

struct Dual<'a> {
    psi: &'a DMatrix<f64>,
    branch: Branch,
    floor: Option<f64>,
}

impl Dual<'_> {
    fn u(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.psi * lambda
    }

    fn feasible(&self, u: &DVector<f64>) -> bool {
        match self.floor {
            Some(f) => u.iter().all(|&ui| 1.0 + ui > f),
            None => u.iter().all(|ui| ui.is_finite()),
        }
    }

    fn value(&self, u: &DVector<f64>) -> f64 {
        u.iter().map(|&ui| self.branch.dual(ui)).sum()
    }

    fn grad_hess(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.psi.ncols();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for (i, &ui) in u.iter().enumerate() {
            let (f1, f2) = self.branch.dual_derivs(ui);
            for a in 0..d {
                let pa = self.psi[(i, a)];
                g[a] += f1 * pa;
                for b in 0..=a {
                    h[(a, b)] += f2 * pa * self.psi[(i, b)];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        (g, h)
    }

    /// `||sum_i w_i psi_i||_inf` with normalised weights.
    fn residual(&self, u: &DVector<f64>) -> f64 {
        let w = normalized_weights(self.branch, u);
        (self.psi.transpose() * w).amax()
    }
}

fn normalized_weights(branch: Branch, u: &DVector<f64>) -> DVector<f64> {
    let lw = u.map(|ui| branch.log_weight(ui));
    let m = lw.max();
    let e = lw.map(|l| (l - m).exp());
    let s = e.sum();
    e / s
}

fn newton(psi: &DMatrix<f64>, gamma: f64) -> Result<LambdaSolution> {
    let (n, d) = psi.shape();
    let branch = Branch::of(gamma);
    let dual = Dual { psi, branch, floor: branch.lower_bound(n) };
    let tol = 1e-10 * psi.amax().max(1.0);
    let mut lambda = DVector::zeros(d);
    let mut u = dual.u(&lambda);
    let mut f = dual.value(&u);
    let mut best = f64::INFINITY;
    for iter in 0..MAX_ITER {
        let res = dual.residual(&u);
        best = best.min(res);
        if res <= tol {
            return Ok(LambdaSolution { gamma, lambda, residual_norm: res, iterations: iter, in_domain: true });
        }
        let (g, h) = dual.grad_hess(&u);
        let step = match h.clone().cholesky() {
            Some(c) => -c.solve(&g),
            None => match h.clone().lu().solve(&g) {
                Some(s) => -s,
                None => return Err(CrelError::Convergence { iterations: iter, residual: best }),
            },
        };
        let slope = g.dot(&step);
        // near the optimum the decrease in the dual is below rounding level
        let flat = slope.abs() <= 1e-12 * (1.0 + f.abs());
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-16 {
            let cand = &lambda + &step * t;
            let uc = dual.u(&cand);
            if dual.feasible(&uc) {
                let fc = dual.value(&uc);
                let ok = if flat {
                    dual.residual(&uc) < res
                } else {
                    fc <= f + 1e-4 * t * slope.min(0.0)
                };
                if fc.is_finite() && ok {
                    lambda = cand;
                    u = uc;
                    f = fc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        // a sign-constant psi * lambda with lambda != 0 separates zero from the hull
        if moved && lambda.amax() > 0.0 && (u.iter().all(|&ui| ui >= 0.0) || u.iter().all(|&ui| ui <= 0.0)) {
            return Err(CrelError::Hull);
        }
        if !moved {
            // rounding floor reached; accept a near-converged point
            if res <= 100.0 * tol {
                return Ok(LambdaSolution { gamma, lambda, residual_norm: res, iterations: iter, in_domain: true });
            }
            return Err(CrelError::Convergence { iterations: iter, residual: best });
        }
    }
    let res = dual.residual(&u);
    if res <= tol {
        return Ok(LambdaSolution { gamma, lambda, residual_norm: res, iterations: MAX_ITER, in_domain: true });
    }
    Err(CrelError::Convergence { iterations: MAX_ITER, residual: best.min(res) })
}

/// Solve the dual problem for `lambda_gamma` given the `n x d` matrix of
/// estimating function values.
pub fn solve_lambda(psi: &DMatrix<f64>, gamma: f64) -> Result<LambdaSolution> {
    if !gamma.is_finite() {
        return Err(CrelError::Domain(format!("gamma must be finite, got {gamma}")));
    }
    if psi.nrows() == 0 || psi.iter().any(|v| !v.is_finite()) {
        return Err(CrelError::Domain("estimating function values must be finite".into()));
    }
    if psi.ncols() == 1 && !convex_hull_check(psi) {
        return Err(CrelError::Hull);
    }
    match newton(psi, gamma) {
        Ok(s) => Ok(s),
        Err(CrelError::Hull) => Err(CrelError::Hull),
        Err(e) => {
            if psi.ncols() > 1 && !convex_hull_check(psi) {
                Err(CrelError::Hull)
            } else {
                Err(e)
            }
        }
    }
}

/// Weights implied by a multiplier solution, normalised to sum to one.
pub fn weights_from_lambda(psi: &DMatrix<f64>, solution: &LambdaSolution) -> CRWeights {
    let u = psi * &solution.lambda;
    CRWeights { weights: normalized_weights(Branch::of(solution.gamma), &u), gamma: solution.gamma }
}

/// `-2 sum_i log(n w_i)` from a matrix of estimating function values.
pub fn gelr_from_psi(psi: &DMatrix<f64>, gamma: f64) -> Result<GelrValue> {
    let sol = match solve_lambda(psi, gamma) {
        Ok(s) => s,
        Err(CrelError::Hull) => return Ok(GelrValue::infeasible()),
        Err(e) => return Err(e),
    };
    let u = psi * &sol.lambda;
    let branch = Branch::of(gamma);
    let lw = u.map(|ui| branch.log_weight(ui));
    let m = lw.max();
    let lse = m + lw.map(|l| (l - m).exp()).sum().ln();
    let n = psi.nrows() as f64;
    let value = -2.0 * lw.iter().map(|l| l - lse + n.ln()).sum::<f64>();
    Ok(GelrValue { value: value.max(0.0), hull_ok: true })
}

/// The GELR statistic at `theta`.
pub fn gelr(data: &Dataset, psi: &EstimatingFunction, theta: &DVector<f64>, gamma: f64) -> Result<GelrValue> {
    let m = psi.evaluate_all(data, theta)?;
    gelr_from_psi(&m, gamma)
}

/// Closed form of the GELR statistic for the median score, shared by every
/// member of the family.
pub fn gelr_median_closed_form(data: &Dataset, theta: f64) -> GelrValue {
    let f = ecdf(data, theta);
    if f <= 0.0 || f >= 1.0 {
        return GelrValue::infeasible();
    }
    let n = data.n() as f64;
    let value = -2.0 * (n * f * (0.5 / f).ln() + n * (1.0 - f) * (0.5 / (1.0 - f)).ln());
    GelrValue { value: value.max(0.0), hull_ok: true }
}

/// One point of a profile curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfilePoint {
    pub theta: f64,
    pub gelr: f64,
    /// Laplace log-likelihood ratio `2 sum(|x_i - theta| - |x_i - median|)`.
    pub parametric: Option<f64>,
}

/// GELR over a grid of scalar parameter values, optionally with the Laplace
/// parametric curve for overlay. Infeasible points carry `+inf`.
pub fn profile_curve(
    data: &Dataset,
    psi: &EstimatingFunction,
    grid: &[f64],
    gamma: f64,
    laplace_overlay: bool,
) -> Result<Vec<ProfilePoint>> {
    if psi.dim(data) != 1 {
        return Err(CrelError::Schema("profile curves need a scalar parameter".into()));
    }
    let med = crate::stats::median(data.values());
    grid.iter()
        .map(|&t| {
            let g = match psi.kind() {
                PsiKind::Median if gamma.abs() < BRANCH_EPS => gelr_median_closed_form(data, t),
                _ => gelr(data, psi, &DVector::from_element(1, t), gamma)?,
            };
            let parametric = laplace_overlay
                .then(|| 2.0 * data.values().iter().map(|x| (x - t).abs() - (x - med).abs()).sum::<f64>());
            Ok(ProfilePoint { theta: t, gelr: g.value, parametric })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimating::{psi_mean, psi_median};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn hull_examples() {
        assert!(convex_hull_check(&col(&[-1.0, 0.0, 2.0])));
        assert!(!convex_hull_check(&col(&[1.0, 2.0, 3.0])));
        assert!(!convex_hull_check(&col(&[0.0, 1.0, 2.0])));
        assert!(convex_hull_check(&DMatrix::zeros(4, 2)));
        let simplex = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        assert!(convex_hull_check(&simplex));
        let shifted = simplex.map(|v| v + 2.0);
        assert!(!convex_hull_check(&shifted));
        // 0 on an edge
        let edge = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
        assert!(!convex_hull_check(&edge));
    }

    #[test]
    fn el_fixture() {
        let psi = col(&[-1.0, 0.0, 2.0]);
        let s = solve_lambda(&psi, 0.0).unwrap();
        assert!((s.lambda[0] - 0.25).abs() < 1e-10);
        let w = weights_from_lambda(&psi, &s).weights;
        for (a, b) in w.iter().zip([4.0 / 9.0, 1.0 / 3.0, 2.0 / 9.0]) {
            assert!((a - b).abs() < 1e-10);
        }
        let g = gelr_from_psi(&psi, 0.0).unwrap();
        assert!((g.value - 0.2355660713).abs() < 1e-8, "{}", g.value);
    }

    #[test]
    fn et_fixture() {
        let psi = col(&[-1.0, 0.0, 2.0]);
        let s = solve_lambda(&psi, -1.0).unwrap();
        assert!((s.lambda[0] + 2f64.ln() / 3.0).abs() < 1e-10);
        let w = weights_from_lambda(&psi, &s).weights;
        let e: Vec<f64> = [-1.0, 0.0, 2.0].iter().map(|p: &f64| (-p * 2f64.ln() / 3.0).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in w.iter().zip(e.iter().map(|v| v / s)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_mean_gives_zero_lambda() {
        let psi = col(&[-1.0, 0.5, 0.5]);
        for g in [-2.0, -1.0, -0.5, 0.0, 1.0] {
            let s = solve_lambda(&psi, g).unwrap();
            assert_eq!(s.lambda[0], 0.0);
            let w = weights_from_lambda(&psi, &s).weights;
            assert!(w.iter().all(|&wi| (wi - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn hull_failure_is_sentinel() {
        let d = Dataset::univariate(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(solve_lambda(&col(&[1.0, 2.0]), 0.0), Err(CrelError::Hull)));
        let g = gelr(&d, &psi_mean(), &DVector::from_element(1, 10.0), 0.0).unwrap();
        assert_eq!(g, GelrValue::infeasible());
        let g2 = DMatrix::from_row_slice(3, 2, &[3.0, 1.0, 2.0, 2.0, 1.0, 3.0]);
        for gamma in [-2.0, -1.0, -0.5, 0.0, 1.0] {
            assert_eq!(gelr_from_psi(&g2, gamma).unwrap(), GelrValue::infeasible(), "{gamma}");
            assert_eq!(gelr_from_psi(&(-&g2), gamma).unwrap(), GelrValue::infeasible(), "{gamma}");
        }
    }

    #[test]
    fn median_closed_form_examples() {
        let d = Dataset::univariate(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(gelr_median_closed_form(&d, 2.5).value.abs() < 1e-14);
        assert!((gelr_median_closed_form(&d, 1.5).value - 1.0464963).abs() < 1e-6);
        assert!(!gelr_median_closed_form(&d, 0.0).hull_ok);
        assert!(!gelr_median_closed_form(&d, 4.0).hull_ok);
    }

    #[test]
    fn gelr_vanishes_at_m_estimate() {
        let mut r = rng::stream(2, &[]);
        let xs: Vec<f64> = (0..50).map(|_| r.random::<f64>() * 3.0).collect();
        let d = Dataset::univariate(xs.clone()).unwrap();
        let m = crate::stats::mean(&xs);
        for g in [-2.0, -1.0, -0.5, 0.0, 0.7] {
            let v = gelr(&d, &psi_mean(), &DVector::from_element(1, m), g).unwrap();
            assert!(v.value.abs() < 1e-10);
        }
    }

    #[test]
    fn profile_minimum_at_median() {
        let d = crate::data::generate_laplace(60, 0.0, 8);
        let med = crate::stats::median(d.values());
        let grid: Vec<f64> = (0..41).map(|i| med - 1.0 + i as f64 * 0.05).collect();
        let curve = profile_curve(&d, &psi_median(), &grid, 0.0, true).unwrap();
        let min = curve.iter().map(|p| p.gelr).fold(f64::INFINITY, f64::min);
        assert!(min.abs() < 1e-12);
        let at = curve.iter().find(|p| (p.theta - med).abs() < 1e-9).unwrap();
        assert!(at.gelr.abs() < 1e-12 && at.parametric.unwrap().abs() < 1e-12);
    }

    fn random_psi(r: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
        let mut m = DMatrix::from_fn(n, d, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let mean = m.row_mean();
        for i in 0..n {
            let mut row = m.row_mut(i);
            row -= &mean;
        }
        // small offset keeps zero inside the hull but away from the centre
        m.add_scalar(0.05)
    }

    #[test]
    fn constraint_residuals_on_random_instances() {
        let mut r = rng::stream(31, &[]);
        for _ in 0..200 {
            let d = 1 + (r.random::<u32>() % 3) as usize;
            let psi = random_psi(&mut r, 30, d);
            for g in [-2.0, -1.0, -0.5, 0.0, 1.0] {
                let s = solve_lambda(&psi, g).unwrap();
                let w = weights_from_lambda(&psi, &s).weights;
                assert!((w.sum() - 1.0).abs() <= 1e-12);
                assert!(w.iter().all(|&v| v >= 0.0));
                assert!((psi.transpose() * &w).amax() <= 1e-8);
                if g == 0.0 {
                    assert!((&psi * &s.lambda).iter().all(|u| 1.0 + u >= 1.0 / 30.0));
                }
            }
        }
    }

    #[test]
    fn gamma_continuity() {
        let mut r = rng::stream(37, &[]);
        let psi = random_psi(&mut r, 25, 2);
        let w = |g: f64| weights_from_lambda(&psi, &solve_lambda(&psi, g).unwrap()).weights;
        let el = w(0.0);
        let et = w(-1.0);
        for e in [1e-4, -1e-4] {
            assert!((w(e) - &el).amax() <= 1e-3);
            assert!((w(-1.0 + e) - &et).amax() <= 1e-3);
        }
    }

    proptest! {
        #[test]
        fn gelr_invariances(seed in 0u64..1000, g in prop::sample::select(vec![-2.0, -1.0, -0.5, 0.0])) {
            let mut r = rng::stream(seed, &[]);
            let psi = random_psi(&mut r, 20, 2);
            let base = gelr_from_psi(&psi, g).unwrap().value;
            prop_assert!(base >= -1e-10);
            let mut rows: Vec<usize> = (0..20).collect();
            rows.reverse();
            let perm = psi.select_rows(&rows);
            prop_assert!((gelr_from_psi(&perm, g).unwrap().value - base).abs() < 1e-8);
            let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, -0.4, 1.5]);
            let lin = &psi * a;
            prop_assert!((gelr_from_psi(&lin, g).unwrap().value - base).abs() < 1e-8);
        }

        #[test]
        fn median_closed_form_matches_solver(seed in 0u64..1000, g in prop::sample::select(vec![-2.0, -1.0, -2.0/3.0, 0.0])) {
            let mut r = rng::stream(seed, &[1]);
            let n = 5 + (r.random::<u32>() % 60) as usize;
            let xs: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 10.0).collect();
            let d = Dataset::univariate(xs).unwrap();
            let t = r.random::<f64>() * 10.0;
            let closed = gelr_median_closed_form(&d, t);
            let numeric = gelr(&d, &psi_median(), &DVector::from_element(1, t), g).unwrap();
            prop_assert_eq!(closed.hull_ok, numeric.hull_ok);
            if closed.hull_ok {
                prop_assert!((closed.value - numeric.value).abs() < 1e-6);
            }
        }
    }
}
