//! Spatial and temporal dependence diagnostics and accuracy metrics.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::distance_matrix;
use crate::data::Dataset;
use crate::dnc::LatentEstimate;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MoranResult {
    pub i: f64,
    /// `-1 / (S - 1)`.
    pub expected: f64,
    /// Randomization-variance z score; `None` below four locations.
    pub z: Option<f64>,
    /// Two-sided normal p-value.
    pub p_value: Option<f64>,
    pub alpha: f64,
}

impl MoranResult {
    pub fn significant(&self) -> Option<bool> {
        self.p_value.map(|p| p < self.alpha)
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn moran_statistic(z: &[f64], w: &DMatrix<f64>, s0: f64) -> f64 {
    let n = z.len();
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                num += w[(i, j)] * z[i] * z[j];
            }
        }
    }
    let den: f64 = z.iter().map(|v| v * v).sum();
    n as f64 / s0 * num / den
}

fn exp_weights(distances: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = distances.map(|d| (-d).exp());
    w.fill_diagonal(0.0);
    w
}

fn centered(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("Moran's I needs at least two locations".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if z.iter().all(|v| v.abs() <= 1e-14 * scale) {
        return Err(Error::Degenerate("values are constant".into()));
    }
    Ok(z)
}

/// Moran's I with weights `exp(-d_ij)` (zero diagonal, no row
/// normalization) and a normal approximation under randomization.
pub fn morans_i(values: &[f64], distances: &DMatrix<f64>, alpha: f64) -> Result<MoranResult> {
    let n = values.len();
    if distances.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "{n} values with a {}x{} distance matrix",
            distances.nrows(),
            distances.ncols()
        )));
    }
    let z = centered(values)?;
    let w = exp_weights(distances);
    let s0 = w.sum();
    let i = moran_statistic(&z, &w, s0);
    let nf = n as f64;
    let expected = -1.0 / (nf - 1.0);

    let (z_score, p_value) = if n >= 4 {
        let mut s1 = 0.0;
        for a in 0..n {
            for b in 0..n {
                s1 += (w[(a, b)] + w[(b, a)]).powi(2);
            }
        }
        s1 *= 0.5;
        let s2: f64 = (0..n)
            .map(|a| (w.row(a).sum() + w.column(a).sum()).powi(2))
            .sum();
        let m2: f64 = z.iter().map(|v| v * v).sum::<f64>() / nf;
        let m4: f64 = z.iter().map(|v| v.powi(4)).sum::<f64>() / nf;
        let b2 = m4 / (m2 * m2);
        let e_i2 = (nf * ((nf * nf - 3.0 * nf + 3.0) * s1 - nf * s2 + 3.0 * s0 * s0)
            - b2 * ((nf * nf - nf) * s1 - 2.0 * nf * s2 + 6.0 * s0 * s0))
            / ((nf - 1.0) * (nf - 2.0) * (nf - 3.0) * s0 * s0);
        let var = e_i2 - expected * expected;
        if var > 0.0 {
            let zs = (i - expected) / var.sqrt();
            let p = 2.0 * (1.0 - standard_normal().cdf(zs.abs()));
            (Some(zs), Some(p.clamp(0.0, 1.0)))
        } else {
            (None, None)
        }
    } else {
        (None, None)
    };
    Ok(MoranResult {
        i,
        expected,
        z: z_score,
        p_value,
        alpha,
    })
}

/// Two-sided permutation p-value `(1 + #{|I* - E| >= |I - E|}) / (1 + n_perm)`.
pub fn moran_permutation<R: Rng + ?Sized>(
    values: &[f64],
    distances: &DMatrix<f64>,
    n_perm: usize,
    rng: &mut R,
) -> Result<f64> {
    let observed = morans_i(values, distances, 0.05)?;
    let w = exp_weights(distances);
    let s0 = w.sum();
    let mut z = centered(values)?;
    let dev = (observed.i - observed.expected).abs();
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        z.shuffle(rng);
        let i = moran_statistic(&z, &w, s0);
        if (i - observed.expected).abs() >= dev - 1e-12 {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + n_perm) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcfResult {
    /// Autocorrelations at lags `0..=max_lag`.
    pub values: Vec<f64>,
    /// `z_{1 - α/2} / sqrt(n)`.
    pub bound: f64,
}

/// Sample autocorrelation with denominator `n` about the overall mean.
pub fn acf(series: &[f64], max_lag: usize, alpha: f64) -> Result<AcfResult> {
    let n = series.len();
    if n <= max_lag {
        return Err(Error::InvalidArgument(format!(
            "series of length {n} is too short for lag {max_lag}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("significance level {alpha} outside (0, 1)")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0: f64 = dev.iter().map(|v| v * v).sum();
    if c0 <= 0.0 {
        return Err(Error::Degenerate("series is constant".into()));
    }
    let values = (0..=max_lag)
        .map(|k| (0..n - k).map(|t| dev[t] * dev[t + k]).sum::<f64>() / c0)
        .collect();
    let bound = standard_normal().inverse_cdf(1.0 - alpha / 2.0) / (n as f64).sqrt();
    Ok(AcfResult { values, bound })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    /// Percent; `None` when every truth is zero.
    pub mape: Option<f64>,
    /// Rows left out of MAPE because the truth is zero.
    pub mape_skipped: usize,
    pub rmse: f64,
    /// Variance of the absolute errors about the MAE.
    pub vae: f64,
    /// `1 - SSE / SST`; `None` when the truths are constant.
    pub r2: Option<f64>,
}

impl MetricsReport {
    /// Flat `key=value` block.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        format!(
            "n={}\nmae={}\nmape={}\nmape_skipped={}\nrmse={}\nvae={}\nr2={}\n",
            self.n,
            self.mae,
            opt(self.mape),
            self.mape_skipped,
            self.rmse,
            self.vae,
            opt(self.r2)
        )
    }
}

pub fn metrics(truth: &[f64], estimate: &[f64]) -> Result<MetricsReport> {
    let n = truth.len();
    if n == 0 || estimate.len() != n {
        return Err(Error::InvalidArgument(format!(
            "metrics need equal nonempty inputs, got {n} and {}",
            estimate.len()
        )));
    }
    let nf = n as f64;
    let abs_err: Vec<f64> = truth.iter().zip(estimate).map(|(y, e)| (y - e).abs()).collect();
    let mae = abs_err.iter().sum::<f64>() / nf;
    let rmse = (abs_err.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let vae = abs_err.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / nf;
    let (mut ape_sum, mut kept) = (0.0, 0usize);
    for (y, e) in truth.iter().zip(&abs_err) {
        if *y != 0.0 {
            ape_sum += e / y.abs();
            kept += 1;
        }
    }
    let mape = (kept > 0).then(|| 100.0 * ape_sum / kept as f64);
    let mean_y = truth.iter().sum::<f64>() / nf;
    let sst: f64 = truth.iter().map(|y| (y - mean_y).powi(2)).sum();
    let sse: f64 = abs_err.iter().map(|e| e * e).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);
    Ok(MetricsReport {
        n,
        mae,
        mape,
        mape_skipped: n - kept,
        rmse,
        vae,
        r2,
    })
}

/// Share of absolute percentage errors in `[0, 3)`, `[3, 5)`, `[5, 10)` and
/// `[10, ∞)` percent; zero truths are skipped.
pub fn ape_brackets(truth: &[f64], estimate: &[f64]) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for (y, e) in truth.iter().zip(estimate) {
        if *y == 0.0 {
            continue;
        }
        let ape = 100.0 * ((y - e) / y).abs();
        let k = if ape < 3.0 {
            0
        } else if ape < 5.0 {
            1
        } else if ape < 10.0 {
            2
        } else {
            3
        };
        counts[k] += 1;
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| c as f64 / total)
}

/// How replicated observations in a cell are reduced to one value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CellSummary {
    #[default]
    Mean,
    Median,
}

impl CellSummary {
    fn apply(self, values: &mut [f64]) -> f64 {
        match self {
            CellSummary::Mean => values.iter().sum::<f64>() / values.len() as f64,
            CellSummary::Median => {
                values.sort_by(f64::total_cmp);
                let n = values.len();
                if n % 2 == 1 {
                    values[n / 2]
                } else {
                    0.5 * (values[n / 2 - 1] + values[n / 2])
                }
            }
        }
    }
}

/// Moran's I per time slice.
#[derive(Debug)]
pub struct SliceMoran {
    pub time_index: usize,
    pub n_locations: usize,
    pub result: Result<MoranResult>,
}

/// Moran's I of one observation-level quantity per time slice, after
/// reducing each cell to a single value.
pub fn moran_by_time(
    dataset: &Dataset,
    values: &[f64],
    distances: &DMatrix<f64>,
    alpha: f64,
    summary: CellSummary,
) -> Result<Vec<SliceMoran>> {
    if values.len() != dataset.n_obs() {
        return Err(Error::Dimension(format!(
            "{} values for {} observations",
            values.len(),
            dataset.n_obs()
        )));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (obs, &v) in dataset.observations.iter().zip(values) {
        cells.entry((obs.time_index, obs.location_index)).or_default().push(v);
    }
    let mut out = Vec::new();
    for t in 0..dataset.n_times {
        let slice: Vec<(usize, f64)> = cells
            .range((t, 0)..(t + 1, 0))
            .map(|(&(_, loc), vals)| (loc, summary.apply(&mut vals.clone())))
            .collect();
        if slice.is_empty() {
            continue;
        }
        let locs: Vec<usize> = slice.iter().map(|s| s.0).collect();
        let vals: Vec<f64> = slice.iter().map(|s| s.1).collect();
        let d = DMatrix::from_fn(locs.len(), locs.len(), |a, b| distances[(locs[a], locs[b])]);
        out.push(SliceMoran {
            time_index: t,
            n_locations: locs.len(),
            result: morans_i(&vals, &d, alpha),
        });
    }
    Ok(out)
}

/// ACF of one location's monthly averages.
#[derive(Debug)]
pub struct LocationAcf {
    pub location: usize,
    pub result: Result<AcfResult>,
}

pub fn acf_by_location(
    dataset: &Dataset,
    values: &[f64],
    max_lag: usize,
    alpha: f64,
) -> Result<Vec<LocationAcf>> {
    if values.len() != dataset.n_obs() {
        return Err(Error::Dimension(format!(
            "{} values for {} observations",
            values.len(),
            dataset.n_obs()
        )));
    }
    let mut cells: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (obs, &v) in dataset.observations.iter().zip(values) {
        let e = cells.entry((obs.location_index, obs.time_index)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok((0..dataset.n_locations())
        .map(|loc| {
            let series: Vec<f64> = cells
                .range((loc, 0)..(loc + 1, 0))
                .map(|(_, (s, c))| s / *c as f64)
                .collect();
            LocationAcf {
                location: loc,
                result: acf(&series, max_lag, alpha),
            }
        })
        .collect())
}

/// Observation residuals `y - x'β̂ - v̂`.
pub fn residuals(dataset: &Dataset, beta: &[f64], v_hat: &LatentEstimate) -> Result<Vec<f64>> {
    if beta.len() != dataset.n_covariates() + 1 {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} covariates plus intercept",
            beta.len(),
            dataset.n_covariates()
        )));
    }
    if v_hat.n_times > 0 && v_hat.mean.len() != dataset.n_locations() * v_hat.n_times {
        return Err(Error::Dimension("latent estimate does not match the dataset".into()));
    }
    Ok(dataset
        .observations
        .iter()
        .map(|o| {
            let xb = beta[0] + o.covariates.iter().zip(&beta[1..]).map(|(x, b)| x * b).sum::<f64>();
            o.response - xb - v_hat.at(o.location_index, o.time_index)
        })
        .collect())
}

#[derive(Debug)]
pub struct ResidualDiagnostics {
    pub residuals: Vec<f64>,
    pub moran: Vec<SliceMoran>,
    pub acf: Vec<LocationAcf>,
}

/// Residuals with their per-time Moran table and per-location ACF table.
pub fn residual_diagnostics(
    dataset: &Dataset,
    beta: &[f64],
    v_hat: &LatentEstimate,
    alpha: f64,
    max_lag: usize,
) -> Result<ResidualDiagnostics> {
    let residuals = residuals(dataset, beta, v_hat)?;
    let distances = distance_matrix(&dataset.locations);
    let moran = moran_by_time(dataset, &residuals, &distances, alpha, CellSummary::Mean)?;
    let acf = acf_by_location(dataset, &residuals, max_lag, alpha)?;
    Ok(ResidualDiagnostics {
        residuals,
        moran,
        acf,
    })
}

/// Fraction of assessable slices that are significant.
pub fn share_significant(slices: &[SliceMoran]) -> Option<f64> {
    let flags: Vec<bool> = slices
        .iter()
        .filter_map(|s| s.result.as_ref().ok().and_then(MoranResult::significant))
        .collect();
    (!flags.is_empty()).then(|| flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn naive_moran(x: &[f64], d: &DMatrix<f64>) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let (mut num, mut w_sum, mut den) = (0.0, 0.0, 0.0);
        for i in 0..n {
            den += (x[i] - mean) * (x[i] - mean);
            for j in 0..n {
                if i != j {
                    let w = (-d[(i, j)]).exp();
                    w_sum += w;
                    num += w * (x[i] - mean) * (x[j] - mean);
                }
            }
        }
        n as f64 / w_sum * num / den
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)))
            .collect();
        DMatrix::from_fn(n, n, |i, j| {
            ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
        })
    }

    #[test]
    fn two_point_antisymmetric() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.7, 0.0]);
        let r = morans_i(&[1.0, -1.0], &d, 0.05).unwrap();
        assert_eq!(r.i, -1.0);
        assert!(r.z.is_none());
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [3usize, 10, 57] {
            let d = random_points(n, &mut rng);
            let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let r = morans_i(&x, &d, 0.05).unwrap();
            assert!((r.i - naive_moran(&x, &d)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_values_rejected() {
        let d = DMatrix::from_element(3, 3, 1.0);
        assert!(matches!(morans_i(&[2.0; 3], &d, 0.05), Err(Error::Degenerate(_))));
    }

    #[test]
    fn null_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_points(100, &mut rng);
        let vals: Vec<f64> = (0..500)
            .map(|_| {
                let x: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
                morans_i(&x, &d, 0.05).unwrap().i
            })
            .collect();
        let m = vals.iter().sum::<f64>() / 500.0;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!((m + 1.0 / 99.0).abs() < 3.0 * sd / 500f64.sqrt());
    }

    #[test]
    fn clustered_values_are_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_points(60, &mut rng);
        // Value equals distance to a corner plus noise: strong positive autocorrelation.
        let x: Vec<f64> = (0..60).map(|i| d[(0, i)] + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
        let r = morans_i(&x, &d, 0.01).unwrap();
        assert_eq!(r.significant(), Some(true));
        let p = moran_permutation(&x, &d, 199, &mut rng).unwrap();
        assert!(p <= 0.01);
    }

    #[test]
    fn acf_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let r = acf(&x, 20, 0.01).unwrap();
        assert_eq!(r.values[0], 1.0);
        let inside = r.values[1..].iter().filter(|v| v.abs() < 3.0 / 100.0).count();
        assert!(inside >= 20);
        assert!((r.bound - 2.5758 / 100.0).abs() < 1e-4);

        let mut ar = vec![0.0f64; 100_000];
        for t in 1..ar.len() {
            ar[t] = 0.5 * ar[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let r = acf(&ar, 1, 0.05).unwrap();
        assert!((r.values[1] - 0.5).abs() < 0.01);
        assert!(acf(&[1.0; 10], 2, 0.05).is_err());
        assert!(acf(&[1.0, 2.0], 2, 0.05).is_err());
    }

    #[test]
    fn metrics_hand_computed() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mae, m.mape, m.rmse, m.vae, m.r2), (0.0, Some(0.0), 0.0, 0.0, Some(1.0)));
        let m = metrics(&[100.0], &[110.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.vae), (10.0, 10.0, 0.0));
        assert!((m.mape.unwrap() - 10.0).abs() < 1e-12);
        let m = metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.mape.unwrap() - 100.0).abs() < 1e-12);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.vae - 0.25).abs() < 1e-12);
        let m = metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.mape_skipped, 1);
        assert!((m.mape.unwrap() - 50.0).abs() < 1e-12);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn brackets() {
        let b = ape_brackets(&[100.0, 100.0, 100.0, 100.0], &[101.0, 104.0, 93.0, 80.0]);
        assert_eq!(b, [0.25, 0.25, 0.25, 0.25]);
    }

    proptest! {
        #[test]
        fn metric_identities(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let (y, e): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = metrics(&y, &e).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12);
            let n = y.len() as f64;
            let errs: Vec<f64> = y.iter().zip(&e).map(|(a, b)| (a - b).abs()).collect();
            let mse = errs.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!((m.rmse * m.rmse - mse).abs() < 1e-9 * mse.max(1.0));
            let vae = errs.iter().map(|x| (x - m.mae).powi(2)).sum::<f64>() / n;
            prop_assert!((m.vae - vae).abs() < 1e-12 * vae.max(1.0));
        }

        #[test]
        fn acf_bounded(x in proptest::collection::vec(-5.0f64..5.0, 10..60)) {
            if let Ok(r) = acf(&x, 5, 0.05) {
                prop_assert!((r.values[0] - 1.0).abs() < 1e-12);
                prop_assert!(r.values.iter().all(|v| v.abs() <= 1.0 + 1e-12));
            }
        }
    }
}
