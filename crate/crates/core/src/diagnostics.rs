//! Small statistical helpers: moments, Kolmogorov-Smirnov tests and
//! batch-means Monte Carlo standard errors.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean of independent values.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Row-major `d x d` sample covariance of row-major `rows x d` data.
pub fn covariance(data: &[f64], d: usize) -> Vec<f64> {
    let n = data.len() / d;
    let mut m = vec![0.0; d];
    for row in data.chunks_exact(d) {
        crate::linalg::axpy(1.0, row, &mut m);
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in data.chunks_exact(d) {
        for a in 0..d {
            let da = row[a] - m[a];
            for b in 0..d {
                cov[a * d + b] += da * (row[b] - m[b]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n as f64 - 1.0);
    cov
}

/// One-sample KS statistic against Uniform(0,1).
pub fn ks_uniform_statistic(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let lo = u - i as f64 / n;
            let hi = (i as f64 + 1.0) / n - u;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Two-sample KS statistic.
pub fn ks_two_sample_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic p-value of a KS statistic with effective sample size `n`
/// (Stephens' small-sample correction).
pub fn ks_pvalue(stat: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * stat;
    kolmogorov_survival(lambda)
}

/// p-value of a two-sample KS statistic.
pub fn ks_two_sample_pvalue(stat: f64, na: usize, nb: usize) -> f64 {
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let sn = ne.sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * stat)
}

fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Batch-means estimate of the Monte Carlo standard error of a chain mean,
/// using `floor(sqrt(n))` batches.
pub fn batch_means_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    let batches = (n as f64).sqrt().floor().max(2.0) as usize;
    let size = n / batches;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&xs[b * size..(b + 1) * size]))
        .collect();
    (variance(&means) / batches as f64).sqrt()
}
