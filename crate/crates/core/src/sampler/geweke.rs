use crate::error::{Error, Result};

/// Geweke convergence z-score comparing the first `frac_a` and last
/// `frac_b` of a chain. Segment variances of the mean come from
/// non-overlapping batch means with `floor(sqrt(n))` batches.
pub fn geweke_z(series: &[f64], frac_a: f64, frac_b: f64) -> Result<f64> {
    let n = series.len();
    if n < 50 {
        return Err(Error::InvalidArgument(format!(
            "Geweke diagnostic needs at least 50 draws, got {n}"
        )));
    }
    if !(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "segment fractions {frac_a} and {frac_b} are invalid"
        )));
    }
    let n_a = ((frac_a * n as f64).floor() as usize).max(2);
    let n_b = ((frac_b * n as f64).floor() as usize).max(2);
    let a = &series[..n_a];
    let b = &series[n - n_b..];
    let (mean_a, var_a) = mean_and_batch_variance(a);
    let (mean_b, var_b) = mean_and_batch_variance(b);
    let denom = (var_a + var_b).sqrt();
    if denom.is_nan() || denom <= 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate("chain segment has zero variance".into()));
    }
    Ok((mean_a - mean_b) / denom)
}

/// Segment mean and the batch-means estimate of its variance.
fn mean_and_batch_variance(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let n_batches = ((n as f64).sqrt().floor() as usize).max(2);
    let size = n / n_batches;
    let batch_means: Vec<f64> = x
        .chunks_exact(size)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let bm = batch_means.iter().sum::<f64>() / n_batches as f64;
    let var_bm =
        batch_means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (mean, var_bm / n_batches as f64)
}
