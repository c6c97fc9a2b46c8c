//! Small statistical helpers shared by the inference and simulation code.

use crate::error::{CrelError, Result};
use statrs::distribution::{ContinuousCDF, Normal};

fn standard_normal() -> Normal {
    Normal::standard()
}

pub fn norm_cdf(z: f64) -> f64 {
    standard_normal().cdf(z)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile. Infinite at 0 and 1.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    standard_normal().inverse_cdf(p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Median after a total-order sort; NaNs sort last.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Quantile of sorted data with linear interpolation between adjacent order
/// statistics (position `(m - 1) * alpha`).
pub fn sorted_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let h = (m - 1) as f64 * alpha.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(m - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Kolmogorov-Smirnov distance between the sample and a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / m).max((i as f64 + 1.0) / m - f)
    })
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Adaptive Simpson quadrature over `[a, b]` split at `breaks`.
///
/// Kinks and jumps of the integrand (clipping points, cusps of the density,
/// sign changes) should be passed as breakpoints.
pub fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> Result<f64> {
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += simpson_segment(f, w[0], w[1], tol / (pts.len() as f64))?;
    }
    if !total.is_finite() {
        return Err(CrelError::Quadrature("integral is not finite".into()));
    }
    Ok(total)
}

fn simpson_segment(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    // one-sided values, so a jump located exactly at a breakpoint is harmless
    let nudge = 1e-13 * (b - a);
    let fa = f(a + nudge);
    let fb = f(b - nudge);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    // halving stops at rounding level relative to the whole segment
    let floor = f64::EPSILON * whole.abs();
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol.max(floor), floor, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    floor: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(CrelError::Quadrature(format!("non-finite integrand near {m}")));
    }
    // converged, or the refinement no longer changes the value beyond rounding
    if delta.abs() <= 15.0 * tol || delta.abs() <= 1e-14 * (left + right).abs() {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(CrelError::Quadrature(format!(
            "recursion limit reached on [{a}, {b}] (error estimate {delta:e})"
        )));
    }
    Ok(simpson_recurse(f, a, m, fa, flm, fm, left, (0.5 * tol).max(floor), floor, depth - 1)?
        + simpson_recurse(f, m, b, fm, frm, fb, right, (0.5 * tol).max(floor), floor, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_values() {
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        assert_eq!(norm_quantile(0.5), 0.0);
        assert!((norm_cdf(norm_quantile(0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sorted_quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sorted_quantile(&v, 0.0), 1.0);
        assert_eq!(sorted_quantile(&v, 1.0), 4.0);
        assert!((sorted_quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn simpson_integrates_gaussian_and_kinks() {
        let g = integrate(&|x: f64| norm_pdf(x), -12.0, 12.0, &[], 1e-12).unwrap();
        assert!((g - 1.0).abs() < 1e-10);
        let k = integrate(&|x: f64| x.abs(), -1.0, 2.0, &[0.0], 1e-12).unwrap();
        assert!((k - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_statistic(&s, |x| x) <= 0.0005 + 1e-12);
    }
}
