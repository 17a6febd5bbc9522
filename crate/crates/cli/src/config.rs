//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stgp_core::covariance::regular_grid;
use stgp_core::data::CovariateSpec;
use stgp_core::{CsvSchema, DecayGrid, McmcConfig, ModelVariant, Priors, SimulationConfig, SpatialInverse, TrueParams};

use crate::CliError;

/// Every recognized key with its default; an empty default means unset.
const KEYS: &[(&str, &str)] = &[
    ("data", ""),
    ("test", ""),
    ("out", "stgp_out"),
    ("fit_dir", ""),
    ("truth", ""),
    ("seed", "1"),
    ("subsets", "1"),
    ("variant", "spatiotemporal"),
    ("iterations", "22000"),
    ("burn_in", "2000"),
    ("thin", "10"),
    ("phi_exponent_literal", "false"),
    ("prior_c", "10000"),
    ("prior_a", "2"),
    ("prior_lambda", "1"),
    ("grid_spatial", "1.0:3.0:0.2"),
    ("grid_temporal", "0.2:1.0:0.2"),
    ("spatial_inverse", "schur"),
    ("col_location", "location_id"),
    ("col_lat", "lat"),
    ("col_lon", "lon"),
    ("col_time", "time_index"),
    ("col_response", "response"),
    ("covariates", ""),
    ("time_origin", ""),
    ("log1p", ""),
    ("time_trend", "false"),
    ("sim_locations", "30"),
    ("sim_times", "24"),
    ("sim_mean_replicates", "3"),
    ("sim_lat_range", "51.50,51.52"),
    ("sim_lon_range", "-0.14,-0.11"),
    ("sim_beta", "9.675,0.982,-0.646,-0.319,0.066"),
    ("sim_sigma_eps2", "0.043"),
    ("sim_sigma_v2", "0.083"),
    ("sim_phi_s", "2.4"),
    ("sim_phi_t", "0.6"),
    ("sim_gaussian_covariates", "2"),
    ("sim_time_trend", "true"),
    ("holdout_months", "0"),
    ("holdout_locations", "0"),
    ("predict_mode", "plugin"),
    ("n_draws", "200"),
    ("per_subset", "false"),
    ("mode", "raw"),
    ("alpha", "0.05"),
    ("max_lag", "12"),
    ("cell_summary", "mean"),
    ("workers", ""),
];

/// Resolved settings: defaults, then the config file, then overrides.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(usage(format!("unknown configuration key `{key}`"))),
        }
    }

    pub fn apply(&mut self, pairs: Vec<(String, String)>) -> Result<(), CliError> {
        for (k, v) in pairs {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply(parse_kv(&text, &path.display().to_string())?)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| usage(format!("`{key}={}`: {e}", self.raw(key))))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        (!self.raw(key).is_empty()).then(|| PathBuf::from(self.raw(key)))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| usage(format!("`{key}` is required (set it in the config or with --{})", key.replace('_', "-"))))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    fn reals(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.list(key)
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| usage(format!("`{key}`: `{s}`: {e}"))))
            .collect()
    }

    fn range(&self, key: &str) -> Result<(f64, f64), CliError> {
        match self.reals(key)?.as_slice() {
            [a, b] if a < b => Ok((*a, *b)),
            _ => Err(usage(format!("`{key}` must be two increasing numbers `lo,hi`"))),
        }
    }

    /// `start:stop:step` or an explicit comma list.
    fn axis(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let raw = self.raw(key);
        let parts: Vec<&str> = raw.split(':').collect();
        if parts.len() == 3 {
            let p = parts
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("`{key}={raw}`: {e}")))?;
            if !(p[2] > 0.0 && p[1] >= p[0]) {
                return Err(usage(format!("`{key}={raw}`: need start <= stop and step > 0")));
            }
            Ok(regular_grid(p[0], p[1], p[2]))
        } else {
            self.reals(key)
        }
    }

    pub fn grid(&self) -> Result<DecayGrid, CliError> {
        Ok(DecayGrid::new(self.axis("grid_spatial")?, self.axis("grid_temporal")?)?)
    }

    pub fn priors(&self) -> Result<Priors, CliError> {
        Ok(Priors {
            c: self.get("prior_c")?,
            a: self.get("prior_a")?,
            lambda: self.get("prior_lambda")?,
            grid: self.grid()?,
        })
    }

    pub fn mcmc(&self) -> Result<McmcConfig, CliError> {
        let cfg = McmcConfig {
            iterations: self.get("iterations")?,
            burn_in: self.get("burn_in")?,
            thin: self.get("thin")?,
            seed: self.get("seed")?,
            variant: self.get::<ModelVariant>("variant")?,
            phi_exponent_literal: self.get("phi_exponent_literal")?,
            keep_v_draws: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn spatial_inverse(&self) -> Result<SpatialInverse, CliError> {
        match self.raw("spatial_inverse") {
            "schur" => Ok(SpatialInverse::BlockSchur),
            "direct" => Ok(SpatialInverse::Direct),
            other => Err(usage(format!("`spatial_inverse={other}`: expected schur or direct"))),
        }
    }

    pub fn schema(&self) -> Result<CsvSchema, CliError> {
        let covariates = self.list("covariates");
        Ok(CsvSchema {
            location_id: self.raw("col_location").into(),
            lat: self.raw("col_lat").into(),
            lon: self.raw("col_lon").into(),
            time_index: self.raw("col_time").into(),
            response: self.raw("col_response").into(),
            covariates: (!covariates.is_empty()).then_some(covariates),
            time_origin: self.optional("time_origin")?,
            n_times: None,
        })
    }

    pub fn simulation(&self) -> Result<SimulationConfig, CliError> {
        let grid = self.grid()?;
        let covariates = CovariateSpec {
            time_trend: self.get("sim_time_trend")?,
            n_gaussian: self.get("sim_gaussian_covariates")?,
        };
        let beta = self.reals("sim_beta")?;
        if beta.len() != covariates.names().len() + 1 {
            return Err(usage(format!(
                "`sim_beta` has {} values; the covariate set {:?} needs {}",
                beta.len(),
                covariates.names(),
                covariates.names().len() + 1
            )));
        }
        Ok(SimulationConfig {
            n_locations: self.get("sim_locations")?,
            n_times: self.get("sim_times")?,
            mean_replicates: self.get("sim_mean_replicates")?,
            params: TrueParams {
                beta,
                sigma_eps2: self.get("sim_sigma_eps2")?,
                sigma_v2: self.get("sim_sigma_v2")?,
                phi_s: self.get("sim_phi_s")?,
                phi_t: self.get("sim_phi_t")?,
            },
            covariates,
            lat_range: self.range("sim_lat_range")?,
            lon_range: self.range("sim_lon_range")?,
            seed: self.get("seed")?,
            grid,
            empty_cells: Vec::new(),
        })
    }

    /// Echo of every key, preceded by a version stamp.
    pub fn echo(&self, command: &str) -> String {
        let mut s = format!("# stgp {} {command}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        assert_eq!(c.grid().unwrap().n_points(), 55);
        assert_eq!(c.mcmc().unwrap().n_retained(), 2000);
        assert!(c.simulation().is_ok());
        assert!(c.path("data").is_none());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply(parse_kv("# comment\nseed = 7\n\ngrid_spatial=1,2\n", "test").unwrap())
            .unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.grid().unwrap().spatial, vec![1.0, 2.0]);
        assert!(matches!(c.set("nope", "1"), Err(CliError::Usage(_))));
        assert!(parse_kv("novalue", "t").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("subsets", "4").unwrap();
        let mut d = RunConfig::default();
        d.apply(parse_kv(&c.echo("fit"), "echo").unwrap()).unwrap();
        assert_eq!(d.raw("subsets"), "4");
        assert!(c.echo("fit").starts_with("# stgp "));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut c = RunConfig::default();
        c.set("iterations", "abc").unwrap();
        assert!(matches!(c.mcmc(), Err(CliError::Usage(_))));
        let mut c = RunConfig::default();
        c.set("sim_beta", "1,2").unwrap();
        assert!(matches!(c.simulation(), Err(CliError::Usage(_))));
    }
}
