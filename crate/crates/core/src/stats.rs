//! Small statistical toolkit used by the diagnostics and the test suites.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size entering the asymptotic distribution.
    pub n_eff: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    // the series converges slowly near zero, where the survival is 1 anyway
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value of a KS statistic `d` with Stephens' small-sample
/// correction.
pub fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let sn = n_eff.sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)
}

/// One-sample KS test against the uniform law on `[a, b]`.
pub fn ks_uniform(samples: &[f64], a: f64, b: f64) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::param("samples", "KS test needs at least one sample"));
    }
    if !(b > a) {
        return Err(Error::param("b", "upper bound must exceed lower bound"));
    }
    let mut x: Vec<f64> = samples.iter().map(|v| ((v - a) / (b - a)).clamp(0.0, 1.0)).collect();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let i = i as f64;
            ((i + 1.0) / n - u).max(u - i / n)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
        n_eff: n,
    })
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("samples", "KS test needs two nonempty samples"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let n_eff = (n * m) as f64 / (n + m) as f64;
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n_eff),
        n_eff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::param("x", "linear fit needs at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::param("x", "abscissae are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
        slope_stderr,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and its standard error under independence.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Delete-one jackknife: the full-sample estimate and its standard error.
pub fn jackknife<T, F: Fn(&[T]) -> f64>(data: &[T], estimator: F) -> (f64, f64)
where
    T: Clone,
{
    let n = data.len();
    let full = estimator(data);
    if n < 2 {
        return (full, 0.0);
    }
    let mut buf: Vec<T> = Vec::with_capacity(n - 1);
    let leave: Vec<f64> = (0..n)
        .map(|i| {
            buf.clear();
            buf.extend_from_slice(&data[..i]);
            buf.extend_from_slice(&data[i + 1..]);
            estimator(&buf)
        })
        .collect();
    let m = mean(&leave);
    let var = leave.iter().map(|v| (v - m).powi(2)).sum::<f64>() * (n as f64 - 1.0) / n as f64;
    (full, var.sqrt())
}

/// Mean of a correlated series with a batch-means standard error.
pub fn batch_means(v: &[f64], batches: usize) -> (f64, f64) {
    let b = batches.max(2).min(v.len().max(1));
    let size = v.len() / b;
    if size == 0 {
        return mean_stderr(v);
    }
    let means: Vec<f64> = v.chunks_exact(size).take(b).map(mean).collect();
    (mean(v), mean_stderr(&means).1)
}
