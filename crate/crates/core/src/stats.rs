//! Small deterministic reductions shared by losses, estimators and metrics.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divisor `n`), two-pass.
pub fn var_pop(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn std_pop(xs: &[f64]) -> f64 {
    var_pop(xs).sqrt()
}

/// Standard error of the mean using the unbiased variance.
pub fn std_err(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    (var_pop(xs) * n / (n - 1.0)).sqrt() / n.sqrt()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log((1/n) sum exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Self-normalized weighted mean and standard deviation per coordinate of
/// row-major `points`.
pub fn weighted_moments(points: &[f64], dim: usize, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let mut m = vec![0.0; dim];
    for (row, w) in points.chunks_exact(dim).zip(weights) {
        for j in 0..dim {
            m[j] += w * row[j];
        }
    }
    for v in &mut m {
        *v /= total;
    }
    let mut var = vec![0.0; dim];
    for (row, w) in points.chunks_exact(dim).zip(weights) {
        for j in 0..dim {
            let c = row[j] - m[j];
            var[j] += w * c * c;
        }
    }
    let sd = var.into_iter().map(|v| (v / total).sqrt()).collect();
    (m, sd)
}
