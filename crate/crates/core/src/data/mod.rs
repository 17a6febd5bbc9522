//! Panel datasets of (location, month, replicate) observations.
//!
//! A [`Dataset`] holds `S` locations, `T` monthly time points and `N`
//! observations; each space-time cell may carry any number of replicates,
//! including none. Time indices are 0-based offsets from
//! [`Dataset::time_origin`], so temporal lags are raw month differences.

mod design;
mod partition;
mod simulate;

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

pub use design::{build_design, time_trend_covariates, time_trend_value, DesignBundle};
pub use partition::{partition_locations, Partition};
pub use simulate::{simulate, CovariateSpec, SimulationConfig, SimulationTruth, TrueParams};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub id: String,
    /// Degrees north, in [-90, 90].
    pub lat: f64,
    /// Degrees east, in [-180, 180].
    pub lon: f64,
}

impl Location {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Self {
        Location {
            id: id.into(),
            lat,
            lon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Data(format!(
                "location `{}` has coordinates ({}, {}) outside the valid range",
                self.id, self.lat, self.lon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub location_index: usize,
    pub time_index: usize,
    /// Log price per square meter in the housing application.
    pub response: f64,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub n_times: usize,
    pub observations: Vec<Observation>,
    pub covariate_names: Vec<String>,
    /// Raw time value that maps to `time_index == 0`.
    pub time_origin: i64,
}

impl Dataset {
    pub fn new(
        locations: Vec<Location>,
        n_times: usize,
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            locations,
            n_times,
            observations,
            covariate_names,
            time_origin: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_time_origin(mut self, origin: i64) -> Self {
        self.time_origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_times == 0 {
            return Err(Error::Data("dataset has no time points".into()));
        }
        let mut seen = HashMap::with_capacity(self.locations.len());
        for (i, loc) in self.locations.iter().enumerate() {
            loc.validate()?;
            if let Some(prev) = seen.insert(loc.id.as_str(), i) {
                return Err(Error::Data(format!(
                    "duplicate location id `{}` at positions {prev} and {i}",
                    loc.id
                )));
            }
        }
        let m = self.covariate_names.len();
        for (row, obs) in self.observations.iter().enumerate() {
            if obs.location_index >= self.locations.len() {
                return Err(Error::Row {
                    row,
                    message: format!("location index {} out of range", obs.location_index),
                });
            }
            if obs.time_index >= self.n_times {
                return Err(Error::Row {
                    row,
                    message: format!(
                        "time index {} not below T = {}",
                        obs.time_index, self.n_times
                    ),
                });
            }
            if !obs.response.is_finite() {
                return Err(Error::Row {
                    row,
                    message: "non-finite response".into(),
                });
            }
            if obs.covariates.len() != m {
                return Err(Error::Row {
                    row,
                    message: format!("expected {m} covariates, found {}", obs.covariates.len()),
                });
            }
            if obs.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Row {
                    row,
                    message: "non-finite covariate".into(),
                });
            }
        }
        Ok(())
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Replicate counts `k_ij`, laid out location-major (`i * T + j`).
    pub fn replicate_counts(&self) -> Vec<usize> {
        let mut k = vec![0; self.n_locations() * self.n_times];
        for obs in &self.observations {
            k[obs.location_index * self.n_times + obs.time_index] += 1;
        }
        k
    }

    pub fn location_index(&self, id: &str) -> Option<usize> {
        self.locations.iter().position(|l| l.id == id)
    }

    /// Appends linear and quadratic time-trend columns computed against a
    /// reference span of `span` months (normally the training `T`).
    pub fn with_time_trend(&self, span: usize) -> Dataset {
        let mut out = self.clone();
        out.covariate_names.push("time_linear".into());
        out.covariate_names.push("time_quadratic".into());
        for obs in &mut out.observations {
            let (lin, quad) = time_trend_value(obs.time_index as f64, span);
            obs.covariates.push(lin);
            obs.covariates.push(quad);
        }
        out
    }

    /// Replaces the named covariate columns by `ln(1 + x)`.
    pub fn log1p_covariates(&self, names: &[String]) -> Result<Dataset> {
        let mut out = self.clone();
        for name in names {
            let col = self
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            for (row, obs) in out.observations.iter_mut().enumerate() {
                let v = obs.covariates[col];
                if v <= -1.0 {
                    return Err(Error::Row {
                        row,
                        message: format!("log1p of {v} in column `{name}`"),
                    });
                }
                obs.covariates[col] = v.ln_1p();
            }
        }
        Ok(out)
    }

    /// Restricts the dataset to the given locations (in the given order).
    pub fn select_locations(&self, keep: &[usize]) -> Dataset {
        let mut remap = vec![usize::MAX; self.n_locations()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        Dataset {
            locations: keep.iter().map(|&i| self.locations[i].clone()).collect(),
            n_times: self.n_times,
            observations: self
                .observations
                .iter()
                .filter(|o| remap[o.location_index] != usize::MAX)
                .map(|o| Observation {
                    location_index: remap[o.location_index],
                    ..o.clone()
                })
                .collect(),
            covariate_names: self.covariate_names.clone(),
            time_origin: self.time_origin,
        }
    }

    /// Splits observations by a predicate into (matching, rest), keeping the
    /// location list and time axis of `self` in both halves.
    pub fn split_observations<F>(&self, mut pred: F) -> (Dataset, Dataset)
    where
        F: FnMut(&Observation) -> bool,
    {
        let (a, b): (Vec<_>, Vec<_>) = self.observations.iter().cloned().partition(|o| pred(o));
        let mut left = self.clone();
        left.observations = a;
        let mut right = self.clone();
        right.observations = b;
        (left, right)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "location_id".to_string(),
            "lat".into(),
            "lon".into(),
            "time_index".into(),
            "response".into(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for obs in &self.observations {
            let loc = &self.locations[obs.location_index];
            let mut rec = vec![
                loc.id.clone(),
                loc.lat.to_string(),
                loc.lon.to_string(),
                (obs.time_index as i64 + self.time_origin).to_string(),
                obs.response.to_string(),
            ];
            rec.extend(obs.covariates.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Column mapping for CSV ingestion.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub location_id: String,
    pub lat: String,
    pub lon: String,
    pub time_index: String,
    pub response: String,
    /// Covariate columns; `None` takes every remaining column in file order.
    pub covariates: Option<Vec<String>>,
    /// Raw time value mapped to index 0; defaults to the smallest value seen.
    pub time_origin: Option<i64>,
    /// Fixes `T`; defaults to the largest shifted index plus one.
    pub n_times: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            location_id: "location_id".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            time_index: "time_index".into(),
            response: "response".into(),
            covariates: None,
            time_origin: None,
            n_times: None,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_id = col(&schema.location_id)?;
    let c_lat = col(&schema.lat)?;
    let c_lon = col(&schema.lon)?;
    let c_time = col(&schema.time_index)?;
    let c_resp = col(&schema.response)?;
    let fixed = [c_id, c_lat, c_lon, c_time, c_resp];
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|c| !fixed.contains(c)).collect(),
    };
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut locations: Vec<Location> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<(usize, i64, f64, Vec<f64>)> = Vec::new();

    for (i, rec) in rdr.records().enumerate() {
        // Header is line 1, so the first data record is row 2 of the file.
        let row = i + 2;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            let s = field(c);
            if s.is_empty() {
                return Err(Error::Row {
                    row,
                    message: format!("empty value in column `{}`", &headers[c]),
                });
            }
            let v: f64 = s.parse().map_err(|_| Error::Row {
                row,
                message: format!("cannot parse `{s}` in column `{}`", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("non-finite value in column `{}`", &headers[c]),
                });
            }
            Ok(v)
        };
        let id = field(c_id).to_string();
        if id.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty location id".into(),
            });
        }
        let lat = number(c_lat)?;
        let lon = number(c_lon)?;
        let t_str = field(c_time);
        let t: i64 = t_str.parse().map_err(|_| Error::Row {
            row,
            message: format!("time index `{t_str}` is not an integer"),
        })?;
        let y = number(c_resp)?;
        let covs = cov_cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;

        let loc_idx = match by_id.get(&id) {
            Some(&idx) => {
                let l = &locations[idx];
                if (l.lat - lat).abs() > 1e-9 || (l.lon - lon).abs() > 1e-9 {
                    return Err(Error::Row {
                        row,
                        message: format!("location `{id}` repeated with conflicting coordinates"),
                    });
                }
                idx
            }
            None => {
                let loc = Location::new(id.clone(), lat, lon);
                loc.validate().map_err(|e| Error::Row {
                    row,
                    message: e.to_string(),
                })?;
                locations.push(loc);
                by_id.insert(id, locations.len() - 1);
                locations.len() - 1
            }
        };
        raw.push((loc_idx, t, y, covs));
    }

    let origin = match schema.time_origin {
        Some(o) => o,
        None => raw.iter().map(|r| r.1).min().unwrap_or(0),
    };
    let mut observations = Vec::with_capacity(raw.len());
    let mut max_t = 0usize;
    for (i, (loc, t, y, covs)) in raw.into_iter().enumerate() {
        let shifted = t - origin;
        if shifted < 0 {
            return Err(Error::Row {
                row: i + 2,
                message: format!("time index {t} precedes the time origin {origin}"),
            });
        }
        let shifted = shifted as usize;
        max_t = max_t.max(shifted);
        observations.push(Observation {
            location_index: loc,
            time_index: shifted,
            response: y,
            covariates: covs,
        });
    }
    let n_times = match schema.n_times {
        Some(n) => {
            if !observations.is_empty() && max_t >= n {
                return Err(Error::Data(format!(
                    "time index {max_t} (after shifting) exceeds configured T = {n}"
                )));
            }
            n
        }
        None => max_t + 1,
    };
    Ok(Dataset::new(locations, n_times, observations, covariate_names)?.with_time_origin(origin))
}
