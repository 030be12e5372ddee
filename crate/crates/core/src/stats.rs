//! Small statistics helpers.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Moment skewness `m3 / m2^{3/2}`.
pub fn skewness(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Moment excess kurtosis `m4 / m2² − 3`.
pub fn excess_kurtosis(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Least-squares slope of `y` on `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slope {
    pub slope: f64,
    pub std_error: f64,
    pub intercept: f64,
}

pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<Slope> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("regression needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("regressor has no spread".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let std_error = if x.len() > 2 {
        let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(Slope { slope, std_error, intercept })
}

/// Mean and batch-means standard error of a series.
pub fn batch_means(v: &[f64], batches: usize) -> (f64, f64) {
    let m = mean(v);
    let b = batches.max(2).min(v.len());
    if b < 2 {
        return (m, f64::NAN);
    }
    let size = v.len() / b;
    let bm: Vec<f64> = (0..b).map(|k| mean(&v[k * size..(k + 1) * size])).collect();
    (m, sd(&bm) / (b as f64).sqrt())
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(x)
}

/// Kolmogorov distance between the empirical CDF of `v` and N(0,1).
pub fn ks_normal(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = std_normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 99% Kolmogorov band `1.628 / √n`.
pub fn ks_band_99(n: usize) -> f64 {
    1.627_62 / (n as f64).sqrt()
}

/// Point `index` of the Halton sequence in `[0,1)^dim`.
pub fn halton(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    (0..dim)
        .map(|k| {
            let base = PRIMES[k % PRIMES.len()];
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = [100.0f64, 200.0, 400.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [100.0f64, 200.0, 400.0].iter().map(|v| (3.0 * v.powf(-0.5)).ln()).collect();
        let s = ols_slope(&x, &y).unwrap();
        assert_abs_diff_eq!(s.slope, -0.5, epsilon = 1e-12);
        assert!(s.std_error < 1e-10);
    }

    #[test]
    fn moments_of_symmetric_sample() {
        let v = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert_abs_diff_eq!(skewness(&v), 0.0);
        assert_abs_diff_eq!(excess_kurtosis(&v), 1.7 - 3.0, epsilon = 1e-12);
    }

    #[test]
    fn halton_first_points() {
        assert_eq!(halton(1, 2), vec![0.5, 1.0 / 3.0]);
        assert_eq!(halton(2, 2), vec![0.25, 2.0 / 3.0]);
    }
}
