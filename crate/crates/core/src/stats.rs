//! Small statistics helpers: ordinary least squares with confidence
//! intervals on the slope, and mean confidence intervals for Monte Carlo
//! estimates.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Result of a univariate least-squares fit y = intercept + slope * x.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    /// Two-sided 95% confidence interval for the slope.
    pub slope_ci95: (f64, f64),
    pub r_squared: f64,
    pub points: usize,
}

impl FitResult {
    /// True when the entire 95% CI for the slope lies at or below `bound`.
    pub fn slope_at_most(&self, bound: f64) -> bool {
        self.slope_ci95.1 <= bound
    }

    /// True when the entire 95% CI for the slope lies at or above `bound`.
    pub fn slope_at_least(&self, bound: f64) -> bool {
        self.slope_ci95.0 >= bound
    }
}

/// Ordinary least squares fit with a Student-t confidence interval on the
/// slope. Needs at least three points for the t interval; with exactly two
/// the CI degenerates to the point estimate.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(Error::Precondition(format!(
            "fit needs matched samples, got {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let m = x.len();
    if m < 2 {
        return Err(Error::Precondition("fit needs at least two points".into()));
    }
    let mx = x.iter().sum::<f64>() / m as f64;
    let my = y.iter().sum::<f64>() / m as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("fit abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (intercept + slope * a);
            e * e
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    if m == 2 {
        return Ok(FitResult {
            slope,
            intercept,
            slope_se: 0.0,
            slope_ci95: (slope, slope),
            r_squared,
            points: m,
        });
    }
    let df = (m - 2) as f64;
    let se = (ss_res / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Degenerate(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(FitResult {
        slope,
        intercept,
        slope_se: se,
        slope_ci95: (slope - t * se, slope + t * se),
        r_squared,
        points: m,
    })
}

/// Sample mean with a 95% confidence half-width (Student-t).
pub fn mean_ci95(samples: &[f64]) -> Result<(f64, f64)> {
    let m = samples.len();
    if m == 0 {
        return Err(Error::Precondition("mean of an empty sample".into()));
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return Ok((mean, 0.0));
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (m - 1) as f64)
        .map_err(|e| Error::Degenerate(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * (var / m as f64).sqrt()))
}

/// True when two mean estimates with 95% half-widths have overlapping CIs.
pub fn ci_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    (a.0 - b.0).abs() <= a.1 + b.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_zero_residual() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept).abs() < 1e-12);
        assert!(fit.slope_se < 1e-12);
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn noisy_line_ci_contains_truth() {
        // Deterministic pseudo-noise, slope 3 intercept -1.
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 3.0 * v - 1.0 + ((v * 12.9898).sin() * 0.3))
            .collect();
        let fit = ols_fit(&x, &y).unwrap();
        assert!(fit.slope_ci95.0 <= 3.0 && 3.0 <= fit.slope_ci95.1);
    }

    #[test]
    fn mean_ci_shrinks_with_samples() {
        let a: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let b: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        let (ma, wa) = mean_ci95(&a).unwrap();
        let (mb, wb) = mean_ci95(&b).unwrap();
        assert!((ma - 0.5).abs() < 1e-12 && (mb - 0.5).abs() < 1e-12);
        assert!(wb < wa);
        assert!(ci_overlap((ma, wa), (mb, wb)));
    }
}
