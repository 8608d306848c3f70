//! Small statistics toolkit: means, least-squares slopes and bootstrap intervals.

use rand::Rng as _;
use serde::Serialize;

use crate::rng::Rng;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, std_err: f64::NAN, samples: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean, std_err: (var / n as f64).sqrt(), samples: n }
    }

    /// Lower end of the `z`-sigma interval.
    pub fn lower(&self, z: f64) -> f64 {
        self.mean - z * self.std_err
    }

    pub fn upper(&self, z: f64) -> f64 {
        self.mean + z * self.std_err
    }
}

/// Ordinary least-squares fit `y ≈ slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Fit a line; `None` with fewer than two distinct abscissae.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LineFit { slope, intercept: my - slope * mx })
}

/// Percentile interval for `statistic` over `resamples` bootstrap resamples of `data`.
///
/// Resamples whose statistic is not finite are skipped; the interval is `None` when fewer
/// than half survive.
pub fn bootstrap_ci<T: Clone>(
    data: &[T],
    resamples: usize,
    level: f64,
    rng: &mut Rng,
    statistic: impl Fn(&[T]) -> Option<f64>,
) -> Option<(f64, f64)> {
    if data.is_empty() || resamples == 0 {
        return None;
    }
    let mut stats = Vec::with_capacity(resamples);
    let mut buf = Vec::with_capacity(data.len());
    for _ in 0..resamples {
        buf.clear();
        buf.extend((0..data.len()).map(|_| data[rng.gen_range(0..data.len())].clone()));
        if let Some(s) = statistic(&buf).filter(|s| s.is_finite()) {
            stats.push(s);
        }
    }
    if stats.len() * 2 < resamples {
        return None;
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| stats[((q * (stats.len() - 1) as f64).round() as usize).min(stats.len() - 1)];
    Some((pick(alpha), pick(1.0 - alpha)))
}

/// Number of bootstrap resamples used by the estimators.
pub const BOOTSTRAP_RESAMPLES: usize = 200;
