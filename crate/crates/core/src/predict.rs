//! Plug-in kriging of the latent field and the response at new locations
//! and times, per subset, with median combination across subsets.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::{nearest, vincenty_km, DecayGrid, GridTables, SpatialInverse};
use crate::data::{Dataset, Location};
use crate::diagnostics::{ape_brackets, metrics, MetricsReport};
use crate::dnc::SubsetFit;
use crate::error::{Error, Result};
use crate::rng::chain_rng;
use crate::sampler::ModelVariant;

/// Coincidence radius (km) for the temporal-only model, whose locations are
/// mutually independent.
const SAME_PLACE_KM: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub location: Location,
    /// Month relative to the training time origin; may lie outside the
    /// training window.
    pub time_index: i64,
    pub covariates: Vec<f64>,
}

/// Posterior summaries of one subset needed for prediction.
#[derive(Clone, Debug)]
pub struct SubsetPredictor {
    pub subset_index: usize,
    pub variant: ModelVariant,
    pub covariate_names: Vec<String>,
    pub beta: DVector<f64>,
    pub sigma_eps2: f64,
    pub sigma_v2: f64,
    /// Snapped decays (absent axes are `None`).
    pub phi_s: Option<f64>,
    pub phi_t: Option<f64>,
    locations: Vec<Location>,
    n_times: usize,
    precision: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    /// `Σ_t^{-1} V̂ P`, `T x m`: the latent weights of the kriging mean.
    alpha: DMatrix<f64>,
    beta_draws: DMatrix<f64>,
    sigma_eps2_draws: Vec<f64>,
}

/// Builds one predictor per fit, with decays at the grid points nearest
/// to their posterior means.
///
/// `inverse` selects the subset precision: the diagonal block of the full
/// inverse (as used in fitting) or the subset's own inverse.
pub fn build_predictors(
    fits: &[SubsetFit],
    training: &Dataset,
    grid: &DecayGrid,
    inverse: SpatialInverse,
) -> Result<Vec<SubsetPredictor>> {
    let first = fits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subset fits".into()))?;
    let variant = first.chain.meta.variant;
    let names = &first.chain.names;
    let k = names
        .iter()
        .position(|n| n == "sigma_eps2")
        .ok_or_else(|| Error::Data("chain has no `sigma_eps2` column".into()))?;
    if k == 0 || names[0] != "intercept" {
        return Err(Error::Data("chain does not start with the intercept".into()));
    }
    let covariate_names: Vec<String> = names[1..k].to_vec();
    if covariate_names != training.covariate_names {
        return Err(Error::Data(format!(
            "fit covariates {:?} do not match dataset covariates {:?}",
            covariate_names, training.covariate_names
        )));
    }

    let snap_s = |f: &SubsetFit| {
        f.mean_of("phi_s")
            .map(|v| grid.spatial[nearest(&grid.spatial, v)])
    };
    let snap_t = |f: &SubsetFit| {
        f.mean_of("phi_t")
            .map(|v| grid.temporal[nearest(&grid.temporal, v)])
    };
    let distinct = |vals: Vec<Option<f64>>| -> Option<Vec<f64>> {
        let mut v: Vec<f64> = vals.into_iter().flatten().collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        (!v.is_empty()).then_some(v)
    };
    let s_vals = distinct(fits.iter().map(snap_s).collect());
    let t_vals = distinct(fits.iter().map(snap_t).collect());

    let tables = if variant.has_latent() {
        let assignments: Vec<Vec<usize>> = fits.iter().map(|f| f.locations.clone()).collect();
        let latent_times = if variant.has_temporal() { training.n_times } else { 1 };
        Some(GridTables::build(
            &training.locations,
            &assignments,
            latent_times,
            s_vals.as_deref(),
            t_vals.as_deref(),
            inverse,
        )?)
    } else {
        None
    };

    fits.iter()
        .enumerate()
        .map(|(q, f)| {
            if f.chain.names != *names {
                return Err(Error::Data(format!("subset {} has different parameters", f.subset_index)));
            }
            let m = f.locations.len();
            let phi_s = snap_s(f);
            let phi_t = snap_t(f);
            let (precision, r_inv, n_times, alpha) = match &tables {
                Some(tables) => {
                    let is = match (&s_vals, phi_s) {
                        (Some(v), Some(p)) => v.iter().position(|x| *x == p).unwrap_or(0),
                        _ => 0,
                    };
                    let it = match (&t_vals, phi_t) {
                        (Some(v), Some(p)) => v.iter().position(|x| *x == p).unwrap_or(0),
                        _ => 0,
                    };
                    let precision = tables.spatial[is].subsets[q].precision.clone();
                    let r_inv = tables.temporal[it].inv.clone();
                    let t = tables.n_times;
                    if f.chain.v_mean.len() != m * t {
                        return Err(Error::Dimension(format!(
                            "subset {} has {} latent values, expected {}",
                            f.subset_index,
                            f.chain.v_mean.len(),
                            m * t
                        )));
                    }
                    let v_mat = DMatrix::from_column_slice(t, m, f.chain.v_mean.as_slice());
                    let alpha = &r_inv * v_mat * &precision;
                    (precision, r_inv, t, alpha)
                }
                None => (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), 0, DMatrix::zeros(0, 0)),
            };
            let beta_draws = f.chain.draws.columns(0, k).into_owned();
            Ok(SubsetPredictor {
                subset_index: f.subset_index,
                variant,
                covariate_names: covariate_names.clone(),
                beta: f.sample_mean.rows(0, k).into_owned(),
                sigma_eps2: f.sample_mean[k],
                sigma_v2: f.mean_of("sigma_v2").unwrap_or(0.0),
                phi_s,
                phi_t,
                locations: f.locations.iter().map(|&i| training.locations[i].clone()).collect(),
                n_times,
                precision,
                r_inv,
                alpha,
                beta_draws,
                sigma_eps2_draws: f.chain.draws.column(k).iter().copied().collect(),
            })
        })
        .collect()
}

/// Latent prediction of one subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentPrediction {
    pub mean: f64,
    pub var: f64,
    /// True when a negative variance was floored at zero.
    pub floored: bool,
}

/// Kriging mean `Σ'(P ⊗ Σ_t^{-1}) V̂` and variance
/// `σ_v² (1 - Σ'(P ⊗ Σ_t^{-1}) Σ'^T)` with `Σ' = c_s ⊗ c_t`.
pub fn predict_v_subset(pred: &SubsetPredictor, query: &Query) -> LatentPrediction {
    if !pred.variant.has_latent() {
        return LatentPrediction {
            mean: 0.0,
            var: 0.0,
            floored: false,
        };
    }
    let c_s = DVector::from_iterator(
        pred.locations.len(),
        pred.locations.iter().map(|loc| {
            let d = vincenty_km(loc, &query.location);
            match pred.phi_s {
                Some(phi) => (-phi * d).exp(),
                None => f64::from(u8::from(d < SAME_PLACE_KM)),
            }
        }),
    );
    let c_t = match pred.phi_t {
        Some(phi) => DVector::from_fn(pred.n_times, |j, _| {
            (-phi * (j as f64 - query.time_index as f64).abs()).exp()
        }),
        None => DVector::from_element(1, 1.0),
    };
    let mean = (c_t.transpose() * &pred.alpha * &c_s)[(0, 0)];
    let qs = (c_s.transpose() * &pred.precision * &c_s)[(0, 0)];
    let qt = (c_t.transpose() * &pred.r_inv * &c_t)[(0, 0)];
    let var = pred.sigma_v2 * (1.0 - qs * qt);
    LatentPrediction {
        mean,
        var: var.max(0.0),
        floored: var < 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetPrediction {
    pub v_mean: f64,
    pub v_var: f64,
    pub y_mean: f64,
    pub y_var: f64,
    pub floored: bool,
}

fn design_row(pred: &SubsetPredictor, query: &Query) -> Result<DVector<f64>> {
    if query.covariates.len() != pred.covariate_names.len() {
        return Err(Error::Dimension(format!(
            "query has {} covariates, model expects {}",
            query.covariates.len(),
            pred.covariate_names.len()
        )));
    }
    let mut x = Vec::with_capacity(query.covariates.len() + 1);
    x.push(1.0);
    x.extend_from_slice(&query.covariates);
    Ok(DVector::from_vec(x))
}

/// `y` mean `x'β̂ + v_mean` and variance `v_var + σ̂_ε²`.
pub fn predict_y_subset(pred: &SubsetPredictor, query: &Query) -> Result<SubsetPrediction> {
    let x = design_row(pred, query)?;
    let v = predict_v_subset(pred, query);
    Ok(SubsetPrediction {
        v_mean: v.mean,
        v_var: v.var,
        y_mean: x.dot(&pred.beta) + v.mean,
        y_var: v.var + pred.sigma_eps2,
        floored: v.floored,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub per_subset: Vec<SubsetPrediction>,
    pub combined_v: f64,
    pub combined_y: f64,
    /// Square root of the median subset variance of `y`.
    pub combined_sd: f64,
    pub n_floored: usize,
}

/// Median with the lower-middle element for even counts.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub fn predict_combined(preds: &[SubsetPredictor], query: &Query) -> Result<PredictionRecord> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no subset predictors".into()));
    }
    let per_subset = preds
        .iter()
        .map(|p| predict_y_subset(p, query))
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&SubsetPrediction) -> f64| lower_median(&per_subset.iter().map(f).collect::<Vec<_>>());
    Ok(PredictionRecord {
        combined_v: pick(|s| s.v_mean),
        combined_y: pick(|s| s.y_mean),
        combined_sd: pick(|s| s.y_var).sqrt(),
        n_floored: per_subset.iter().filter(|s| s.floored).count(),
        per_subset,
    })
}

/// Posterior-predictive variant: each subset contributes `n_draws` values of
/// `x'β + v + ε`, with `β` and `σ_ε²` resampled from the retained draws and
/// `v` from the plug-in kriging law. The combined value is the lower median
/// of the pooled draws.
pub fn predict_combined_draws<R: Rng + ?Sized>(
    preds: &[SubsetPredictor],
    query: &Query,
    n_draws: usize,
    rng: &mut R,
) -> Result<PredictionRecord> {
    if preds.is_empty() || n_draws == 0 {
        return Err(Error::InvalidArgument("need predictors and at least one draw".into()));
    }
    let mut pooled = Vec::with_capacity(preds.len() * n_draws);
    let mut per_subset = Vec::with_capacity(preds.len());
    for p in preds {
        let x = design_row(p, query)?;
        let v = predict_v_subset(p, query);
        let l = p.beta_draws.nrows();
        let draws: Vec<f64> = (0..n_draws)
            .map(|_| {
                let r = rng.random_range(0..l);
                let xb = p.beta_draws.row(r).transpose().dot(&x);
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                xb + v.mean + v.var.sqrt() * z1 + p.sigma_eps2_draws[r].sqrt() * z2
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n_draws as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n_draws.max(2) - 1) as f64;
        pooled.extend_from_slice(&draws);
        per_subset.push(SubsetPrediction {
            v_mean: v.mean,
            v_var: v.var,
            y_mean: mean,
            y_var: var,
            floored: v.floored,
        });
    }
    Ok(PredictionRecord {
        combined_v: lower_median(&per_subset.iter().map(|s| s.v_mean).collect::<Vec<_>>()),
        combined_y: lower_median(&pooled),
        combined_sd: lower_median(&per_subset.iter().map(|s| s.y_var).collect::<Vec<_>>()).sqrt(),
        n_floored: per_subset.iter().filter(|s| s.floored).count(),
        per_subset,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    PlugIn,
    Draws { n_draws: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct BatchPrediction {
    pub records: Vec<PredictionRecord>,
    pub truths: Vec<f64>,
    pub metrics: MetricsReport,
    /// `(location index in the test set, metrics)`.
    pub per_location: Vec<(usize, MetricsReport)>,
    /// `(time index in the test set, metrics)`.
    pub per_time: Vec<(usize, MetricsReport)>,
    /// Shares of APE in `<3%`, `3-5%`, `5-10%`, `>=10%`.
    pub ape_brackets: [f64; 4],
    pub n_floored: usize,
}

/// Predicts every observation of `test`. `time_offset` is added to test
/// time indices to express them relative to the training origin.
pub fn predict_batch(
    preds: &[SubsetPredictor],
    test: &Dataset,
    time_offset: i64,
    mode: PredictMode,
) -> Result<BatchPrediction> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subset predictors".into()))?;
    if test.covariate_names != first.covariate_names {
        return Err(Error::Data(format!(
            "test covariates {:?} do not match the fit {:?}",
            test.covariate_names, first.covariate_names
        )));
    }
    if test.n_obs() == 0 {
        return Err(Error::Data("test set is empty; metrics are undefined".into()));
    }
    let records = test
        .observations
        .par_iter()
        .enumerate()
        .map(|(k, obs)| {
            let query = Query {
                location: test.locations[obs.location_index].clone(),
                time_index: obs.time_index as i64 + time_offset,
                covariates: obs.covariates.clone(),
            };
            match mode {
                PredictMode::PlugIn => predict_combined(preds, &query),
                PredictMode::Draws { n_draws, seed } => {
                    predict_combined_draws(preds, &query, n_draws, &mut chain_rng(seed, k as u64))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<f64> = test.observations.iter().map(|o| o.response).collect();
    let fitted: Vec<f64> = records.iter().map(|r| r.combined_y).collect();

    let group = |key: &dyn Fn(usize) -> usize| -> Result<Vec<(usize, MetricsReport)>> {
        let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for i in 0..truths.len() {
            let g = groups.entry(key(i)).or_default();
            g.0.push(truths[i]);
            g.1.push(fitted[i]);
        }
        groups
            .into_iter()
            .map(|(k, (y, f))| Ok((k, metrics(&y, &f)?)))
            .collect()
    };
    let per_location = group(&|i| test.observations[i].location_index)?;
    let per_time = group(&|i| test.observations[i].time_index)?;

    Ok(BatchPrediction {
        metrics: metrics(&truths, &fitted)?,
        ape_brackets: ape_brackets(&truths, &fitted),
        n_floored: records.iter().map(|r| r.n_floored).sum(),
        per_location,
        per_time,
        truths,
        records,
    })
}

impl BatchPrediction {
    /// One row per test observation; per-subset means are appended as
    /// `y_mean_q<k>` columns when `per_subset` is set.
    pub fn write_csv(&self, path: impl AsRef<Path>, test: &Dataset, time_offset: i64, per_subset: bool) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["location_id", "lat", "lon", "time_index", "truth", "mean", "sd", "ape"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let q = self.records.first().map_or(0, |r| r.per_subset.len());
        if per_subset {
            header.extend((0..q).map(|k| format!("y_mean_q{k}")));
        }
        w.write_record(&header)?;
        for ((obs, rec), y) in test.observations.iter().zip(&self.records).zip(&self.truths) {
            let loc = &test.locations[obs.location_index];
            let ape = if *y != 0.0 {
                (100.0 * ((y - rec.combined_y) / y).abs()).to_string()
            } else {
                "NA".into()
            };
            let mut row = vec![
                loc.id.clone(),
                loc.lat.to_string(),
                loc.lon.to_string(),
                (obs.time_index as i64 + time_offset).to_string(),
                y.to_string(),
                rec.combined_y.to_string(),
                rec.combined_sd.to_string(),
                ape,
            ];
            if per_subset {
                row.extend(rec.per_subset.iter().map(|s| s.y_mean.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
