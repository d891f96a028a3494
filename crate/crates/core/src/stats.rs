//! Small statistical utilities shared by the fitters, the sampler, and the
//! study harness.

/// Mean of a slice; NaN for empty input.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation; NaN for fewer than 2 points.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Empirical quantile with linear interpolation (type-7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Equal-tail interval of the given level from raw draws.
pub fn equal_tail_interval(draws: &[f64], level: f64) -> (f64, f64) {
    let mut s = draws.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let a = (1.0 - level) / 2.0;
    (quantile(&s, a), quantile(&s, 1.0 - a))
}

/// Geometric mean of positive draws.
pub fn geometric_mean(xs: &[f64]) -> f64 {
    mean(&xs.iter().map(|x| x.ln()).collect::<Vec<_>>()).exp()
}

/// Monte Carlo standard error of the chain mean by the batch-means method.
/// Robust to autocorrelation; returns NaN for very short chains.
pub fn batch_means_se(draws: &[f64], n_batches: usize) -> f64 {
    let n = draws.len();
    if n < 2 * n_batches || n_batches < 2 {
        return f64::NAN;
    }
    let bs = n / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| mean(&draws[b * bs..(b + 1) * bs]))
        .collect();
    sample_sd(&means) / (n_batches as f64).sqrt()
}

/// One-sample Kolmogorov-Smirnov test against an analytic CDF.
/// Returns `(statistic, asymptotic p-value)`.
pub fn ks_test<F: Fn(f64) -> f64>(draws: &[f64], cdf: F) -> (f64, f64) {
    let mut s = draws.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i as f64 + 1.0) / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..101 {
        let kf = k as f64;
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Jarque-Bera normality statistic; asymptotically chi-squared(2) under
/// normality. The 1% critical value is about 9.21.
pub fn jarque_bera(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in xs {
        let d = x - m;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    n / 6.0 * (skew * skew + 0.25 * (kurt - 3.0) * (kurt - 3.0))
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert_eq!(quantile(&s, 0.5), 2.5);
    }

    #[test]
    fn ks_accepts_matching_distribution() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let (_, p) = ks_test(&draws, |x| normal.cdf(x));
        assert!(p > 0.01, "p = {p}");
        // and rejects a shifted one
        let (_, p_bad) = ks_test(&draws, |x| normal.cdf(x - 0.5));
        assert!(p_bad < 1e-6);
    }

    #[test]
    fn jarque_bera_separates_normal_from_heavy_tails() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let normal: Vec<f64> = (0..8000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(jarque_bera(&normal) < 9.21);
        let heavy: Vec<f64> = normal.iter().map(|&x: &f64| (1.2 * x).tan()).collect();
        assert!(jarque_bera(&heavy) > 9.21);
    }
}
