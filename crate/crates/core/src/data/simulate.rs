use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{time_trend_value, Dataset, Location, Observation};
use crate::covariance::{chol_psd, distance_matrix, exp_correlation, lag_matrix, DecayGrid};
use crate::error::{Error, Result, ResultExt};

/// Generating parameters of the space-time model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueParams {
    /// Intercept first, then one coefficient per covariate column.
    pub beta: Vec<f64>,
    pub sigma_eps2: f64,
    pub sigma_v2: f64,
    pub phi_s: f64,
    pub phi_t: f64,
}

impl TrueParams {
    /// London estimates with decays as reported (off the default grid).
    pub fn london_estimates() -> Self {
        TrueParams {
            beta: vec![9.675, 0.982, -0.646, -0.319, 0.066],
            sigma_eps2: 0.043,
            sigma_v2: 0.083,
            phi_s: 2.402,
            phi_t: 0.528,
        }
    }

    /// Decays moved to the nearest grid values.
    pub fn snapped(mut self, grid: &DecayGrid) -> Self {
        self.phi_s = grid.spatial[grid.nearest_spatial(self.phi_s)];
        self.phi_t = grid.temporal[grid.nearest_temporal(self.phi_t)];
        self
    }
}

impl Default for TrueParams {
    /// London estimates snapped to the default grid (`φ_s = 2.4`, `φ_t = 0.6`).
    fn default() -> Self {
        TrueParams::london_estimates().snapped(&DecayGrid::default())
    }
}

/// Covariate columns of a simulated dataset: optional linear and quadratic
/// time trend, followed by `n_gaussian` standard normal columns `x1, x2, …`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CovariateSpec {
    pub time_trend: bool,
    pub n_gaussian: usize,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            time_trend: true,
            n_gaussian: 2,
        }
    }
}

impl CovariateSpec {
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.time_trend {
            names.push("time_linear".to_string());
            names.push("time_quadratic".to_string());
        }
        names.extend((1..=self.n_gaussian).map(|k| format!("x{k}")));
        names
    }
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub n_locations: usize,
    pub n_times: usize,
    /// Poisson mean of the replicate count per cell.
    pub mean_replicates: f64,
    pub params: TrueParams,
    pub covariates: CovariateSpec,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub seed: u64,
    /// Decay grid the true decays must lie on.
    pub grid: DecayGrid,
    /// `(location, time)` cells forced to have no observations.
    pub empty_cells: Vec<(usize, usize)>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_locations: 30,
            n_times: 24,
            mean_replicates: 3.0,
            params: TrueParams::default(),
            covariates: CovariateSpec::default(),
            lat_range: (51.50, 51.52),
            lon_range: (-0.14, -0.11),
            seed: 1,
            grid: DecayGrid::default(),
            empty_cells: Vec::new(),
        }
    }
}

/// Generating parameters together with the realized latent field.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTruth {
    pub params: TrueParams,
    /// Location-major latent values, `v[i * n_times + j]`.
    pub v: Vec<f64>,
    pub n_times: usize,
    pub seed: u64,
}

impl SimulationTruth {
    pub fn v_at(&self, location: usize, time: usize) -> f64 {
        self.v[location * self.n_times + time]
    }

    /// Flat `key=value` record; coefficients are listed as `beta_0`, `beta_1`, ….
    pub fn write_kv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for (k, b) in self.params.beta.iter().enumerate() {
            text.push_str(&format!("beta_{k}={b}\n"));
        }
        text.push_str(&format!("sigma_eps2={}\n", self.params.sigma_eps2));
        text.push_str(&format!("sigma_v2={}\n", self.params.sigma_v2));
        text.push_str(&format!("phi_s={}\n", self.params.phi_s));
        text.push_str(&format!("phi_t={}\n", self.params.phi_t));
        text.push_str(&format!("seed={}\n", self.seed));
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Latent field as `location_id,time_index,v`.
    pub fn write_v_csv(&self, path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["location_id", "time_index", "v"])?;
        for (i, loc) in dataset.locations.iter().enumerate() {
            for j in 0..self.n_times {
                w.write_record([
                    loc.id.clone(),
                    (j as i64 + dataset.time_origin).to_string(),
                    self.v_at(i, j).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Draws a dataset from the space-time model:
/// locations uniform in the configured box, replicate counts Poisson,
/// `V ~ N(0, σ_v² Σ_s ⊗ Σ_t)` and `y = x'β + v + ε`.
pub fn simulate(cfg: &SimulationConfig) -> Result<(Dataset, SimulationTruth)> {
    let (s, t) = (cfg.n_locations, cfg.n_times);
    let p = &cfg.params;
    if s == 0 || t == 0 {
        return Err(Error::InvalidArgument("need at least one location and one time point".into()));
    }
    if !(cfg.mean_replicates >= 0.0 && cfg.mean_replicates.is_finite()) {
        return Err(Error::InvalidArgument("mean replicates must be nonnegative".into()));
    }
    if !(p.sigma_eps2 >= 0.0 && p.sigma_v2 >= 0.0) {
        return Err(Error::InvalidArgument("variances must be nonnegative".into()));
    }
    let names = cfg.covariates.names();
    if p.beta.len() != names.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} coefficients for {} covariates plus intercept",
            p.beta.len(),
            names.len()
        )));
    }
    cfg.grid.validate()?;
    if !cfg.grid.contains(p.phi_s, p.phi_t) {
        return Err(Error::InvalidArgument(format!(
            "true decays ({}, {}) are not on the grid",
            p.phi_s, p.phi_t
        )));
    }
    for &(i, j) in &cfg.empty_cells {
        if i >= s || j >= t {
            return Err(Error::InvalidArgument(format!("empty cell ({i}, {j}) out of range")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let locations: Vec<Location> = (0..s)
        .map(|i| {
            Location::new(
                format!("loc{i:04}"),
                rng.random_range(cfg.lat_range.0..=cfg.lat_range.1),
                rng.random_range(cfg.lon_range.0..=cfg.lon_range.1),
            )
        })
        .collect();

    let z = DMatrix::from_fn(t, s, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v_mat = if p.sigma_v2 > 0.0 {
        let ls = chol_psd(&exp_correlation(&distance_matrix(&locations), p.phi_s))
            .context_with(|| "spatial covariance of simulated locations".into())?
            .l();
        let lt = chol_psd(&exp_correlation(&lag_matrix(t), p.phi_t))
            .context_with(|| "temporal covariance".into())?
            .l();
        lt * z * ls.transpose() * p.sigma_v2.sqrt()
    } else {
        DMatrix::zeros(t, s)
    };
    // Column i of v_mat is location i, so column-major storage is location-major.
    let v: Vec<f64> = v_mat.as_slice().to_vec();

    let poisson = (cfg.mean_replicates > 0.0)
        .then(|| Poisson::new(cfg.mean_replicates))
        .transpose()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sigma_eps = p.sigma_eps2.sqrt();
    let mut observations = Vec::new();
    for i in 0..s {
        for j in 0..t {
            let k = match &poisson {
                Some(d) => d.sample(&mut rng) as usize,
                None => 0,
            };
            if cfg.empty_cells.contains(&(i, j)) {
                continue;
            }
            for _ in 0..k {
                let mut covariates = Vec::with_capacity(names.len());
                if cfg.covariates.time_trend {
                    let (lin, quad) = time_trend_value(j as f64, t);
                    covariates.push(lin);
                    covariates.push(quad);
                }
                for _ in 0..cfg.covariates.n_gaussian {
                    covariates.push(rng.sample::<f64, _>(StandardNormal));
                }
                let mean = p.beta[0]
                    + covariates
                        .iter()
                        .zip(&p.beta[1..])
                        .map(|(x, b)| x * b)
                        .sum::<f64>();
                let eps: f64 = rng.sample(StandardNormal);
                observations.push(Observation {
                    location_index: i,
                    time_index: j,
                    response: mean + v[i * t + j] + sigma_eps * eps,
                    covariates,
                });
            }
        }
    }

    let dataset = Dataset::new(locations, t, observations, names)?;
    let truth = SimulationTruth {
        params: p.clone(),
        v,
        n_times: t,
        seed: cfg.seed,
    };
    Ok((dataset, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_design, read_dataset, CsvSchema};

    fn small(seed: u64) -> SimulationConfig {
        SimulationConfig {
            n_locations: 6,
            n_times: 5,
            mean_replicates: 2.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_snap_to_grid() {
        let p = TrueParams::default();
        assert_eq!((p.sigma_eps2, p.sigma_v2), (0.043, 0.083));
        assert_eq!((p.phi_s, p.phi_t), (2.4, 0.6));
        let raw = TrueParams::london_estimates();
        assert_eq!((raw.phi_s, raw.phi_t), (2.402, 0.528));
    }

    #[test]
    fn noiseless_limit() {
        let mut cfg = small(3);
        cfg.params.sigma_v2 = 0.0;
        cfg.params.sigma_eps2 = 0.0;
        let (ds, _) = simulate(&cfg).unwrap();
        assert!(ds.n_obs() > 0);
        for obs in &ds.observations {
            let xb = cfg.params.beta[0]
                + obs.covariates.iter().zip(&cfg.params.beta[1..]).map(|(x, b)| x * b).sum::<f64>();
            assert!((obs.response - xb).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_variance_matches() {
        let cfg = SimulationConfig {
            n_locations: 5,
            n_times: 4,
            mean_replicates: 6000.0,
            seed: 11,
            ..Default::default()
        };
        let (ds, truth) = simulate(&cfg).unwrap();
        assert!(ds.n_obs() > 100_000);
        let resid: Vec<f64> = ds
            .observations
            .iter()
            .map(|o| {
                let xb = cfg.params.beta[0]
                    + o.covariates.iter().zip(&cfg.params.beta[1..]).map(|(x, b)| x * b).sum::<f64>();
                o.response - xb - truth.v_at(o.location_index, o.time_index)
            })
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 0.043 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn csv_round_trip() {
        let (ds, _) = simulate(&small(5)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv_to(&mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_cells_have_no_rows() {
        let mut cfg = small(9);
        cfg.empty_cells = vec![(0, 0), (2, 3)];
        let (ds, _) = simulate(&cfg).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let d = build_design(&ds, &all).unwrap();
        assert_eq!(d.k_diag[0], 0);
        assert_eq!(d.k_diag[2 * 5 + 3], 0);
    }

    #[test]
    fn deterministic_and_validated() {
        let a = simulate(&small(4)).unwrap();
        let b = simulate(&small(4)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let mut bad = small(4);
        bad.params.phi_s = 2.402;
        assert!(simulate(&bad).is_err());
        let mut bad = small(4);
        bad.params.beta.pop();
        assert!(simulate(&bad).is_err());
    }

    #[test]
    fn truth_files() {
        let (ds, truth) = simulate(&small(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        truth.write_kv(dir.path().join("truth.txt")).unwrap();
        truth.write_v_csv(dir.path().join("v.csv"), &ds).unwrap();
        let kv = std::fs::read_to_string(dir.path().join("truth.txt")).unwrap();
        assert!(kv.contains("phi_s=2.4\n"));
        let v = std::fs::read_to_string(dir.path().join("v.csv")).unwrap();
        assert_eq!(v.lines().count(), 1 + 6 * 5);
    }
}
