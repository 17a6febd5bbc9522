//! Gibbs sampling of one subset's powered-likelihood posterior.
//!
//! With power `p = 1` on the full dataset this is the ordinary full-data
//! sampler. Decay parameters live on a finite grid and are drawn from their
//! exact discrete conditional.

mod geweke;
mod steps;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

pub use geweke::geweke_z;
pub use steps::{
    beta_conditional, gibbs_step_beta, gibbs_step_phi, gibbs_step_sigma_eps, gibbs_step_sigma_v,
    gibbs_step_v_location, gibbs_sweep_v, latent_quadratic, phi_log_posterior, sample_log_weights,
    sigma_eps_conditional, sigma_v_conditional, v_joint_conditional, v_location_conditional,
    GaussianConditional, InvGamma, SamplerState, SubsetModel,
};

use crate::covariance::{DecayGrid, GridTables, SpatialInverse};
use crate::data::Location;
use crate::error::{Error, Result, ResultExt};
use crate::rng::ChainRng;

/// Hyperparameters: `β ~ N(0, c I)`, variances `IG(a, λ)`, decays uniform on
/// the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Priors {
    pub c: f64,
    pub a: f64,
    pub lambda: f64,
    pub grid: DecayGrid,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            c: 1e4,
            a: 2.0,
            lambda: 1.0,
            grid: DecayGrid::default(),
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("a", self.a), ("lambda", self.lambda)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("prior {name} must be positive")));
            }
        }
        self.grid.validate()
    }
}

/// Which latent structure is included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// Regression only.
    Hedonic,
    /// Independent temporal processes per location.
    Temporal,
    /// Purely spatial process, one latent value per location.
    Spatial,
    #[default]
    SpatioTemporal,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Hedonic,
        ModelVariant::Temporal,
        ModelVariant::Spatial,
        ModelVariant::SpatioTemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Hedonic => "hedonic",
            ModelVariant::Temporal => "temporal",
            ModelVariant::Spatial => "spatial",
            ModelVariant::SpatioTemporal => "spatiotemporal",
        }
    }

    pub fn has_latent(self) -> bool {
        self != ModelVariant::Hedonic
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, ModelVariant::Spatial | ModelVariant::SpatioTemporal)
    }

    pub fn has_temporal(self) -> bool {
        matches!(self, ModelVariant::Temporal | ModelVariant::SpatioTemporal)
    }

    /// Names of the scalar parameters recorded in a chain.
    pub fn parameter_names(self, coefficient_names: &[String]) -> Vec<String> {
        let mut names = coefficient_names.to_vec();
        names.push("sigma_eps2".into());
        if self.has_latent() {
            names.push("sigma_v2".into());
        }
        if self.has_spatial() {
            names.push("phi_s".into());
        }
        if self.has_temporal() {
            names.push("phi_t".into());
        }
        names
    }

    /// Grid tables for this variant (`None` for the hedonic model).
    pub fn tables(
        self,
        locations: &[Location],
        assignments: &[Vec<usize>],
        n_times: usize,
        grid: &DecayGrid,
        inverse: SpatialInverse,
    ) -> Result<Option<GridTables>> {
        if !self.has_latent() {
            return Ok(None);
        }
        grid.validate()?;
        let latent_times = if self.has_temporal() { n_times } else { 1 };
        GridTables::build(
            locations,
            assignments,
            latent_times,
            self.has_spatial().then_some(grid.spatial.as_slice()),
            self.has_temporal().then_some(grid.temporal.as_slice()),
            inverse,
        )
        .map(Some)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hedonic" => Ok(ModelVariant::Hedonic),
            "temporal" => Ok(ModelVariant::Temporal),
            "spatial" => Ok(ModelVariant::Spatial),
            "spatiotemporal" | "spatio-temporal" => Ok(ModelVariant::SpatioTemporal),
            other => Err(Error::InvalidArgument(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    /// Use `-p Q / σ_v²` instead of `-p Q / (2 σ_v²)` in the decay conditional.
    pub phi_exponent_literal: bool,
    /// Keep every retained latent draw, not only the running mean.
    pub keep_v_draws: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 22_000,
            burn_in: 2_000,
            thin: 10,
            seed: 1,
            variant: ModelVariant::SpatioTemporal,
            phi_exponent_literal: false,
            keep_v_draws: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thinning interval must be at least 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidArgument(format!(
                "burn-in {} must be smaller than {} iterations",
                self.burn_in, self.iterations
            )));
        }
        if self.n_retained() == 0 {
            return Err(Error::InvalidArgument("configuration retains no draws".into()));
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin.max(1)
    }
}

/// Geweke score of one parameter; `None` when the series is degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct GewekeEntry {
    pub name: String,
    pub z: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainMeta {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub p: f64,
    pub variant: ModelVariant,
    pub geweke: Vec<GewekeEntry>,
    /// False when any assessable parameter has `|z| > 1.96`.
    pub converged: bool,
}

/// Retained draws of one subset chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    /// One row per retained draw.
    pub draws: DMatrix<f64>,
    pub v_mean: DVector<f64>,
    pub v_var: DVector<f64>,
    pub v_draws: Option<Vec<DVector<f64>>>,
    pub meta: ChainMeta,
}

impl Chain {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.draws.column(k).iter().copied().collect())
    }

    /// Most frequent `(φ_s, φ_t)` pair among the draws; absent axes are `None`.
    pub fn phi_mode(&self) -> Option<(Option<f64>, Option<f64>)> {
        let s = self.column("phi_s");
        let t = self.column("phi_t");
        if s.is_none() && t.is_none() {
            return None;
        }
        modal_pair(s.as_deref(), t.as_deref(), self.n_draws())
    }

    /// Writes the draws with one column per parameter.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_draws_csv(path, &self.names, &self.draws)
    }
}

type DecayPair = (Option<f64>, Option<f64>);

/// Most frequent pair across aligned columns (first in order on ties).
pub fn modal_pair(s: Option<&[f64]>, t: Option<&[f64]>, n: usize) -> Option<DecayPair> {
    let mut counts: Vec<(DecayPair, usize)> = Vec::new();
    for i in 0..n {
        let key = (s.map(|c| c[i]), t.map(|c| c[i]));
        match counts.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += 1,
            None => counts.push((key, 1)),
        }
    }
    let mut best: Option<(DecayPair, usize)> = None;
    for (k, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k)
}

pub fn write_draws_csv(path: impl AsRef<Path>, names: &[String], draws: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for r in 0..draws.nrows() {
        w.write_record(draws.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_draws_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Row {
                row: i + 2,
                message: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        for field in rec.iter() {
            values.push(field.parse::<f64>().map_err(|e| Error::Row {
                row: i + 2,
                message: format!("`{field}`: {e}"),
            })?);
        }
        rows += 1;
    }
    Ok((names.clone(), DMatrix::from_row_slice(rows, names.len(), &values)))
}

/// Geweke report over every column of `draws`.
pub fn geweke_report(names: &[String], draws: &DMatrix<f64>) -> (Vec<GewekeEntry>, bool) {
    let entries: Vec<GewekeEntry> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let series: Vec<f64> = draws.column(k).iter().copied().collect();
            GewekeEntry {
                name: name.clone(),
                z: geweke_z(&series, 0.1, 0.5).ok(),
            }
        })
        .collect();
    let converged = entries.iter().all(|e| e.z.is_none_or(|z| z.abs() <= 1.96));
    (entries, converged)
}

/// Runs one chain, sweeping `β → σ_ε² → V → σ_v² → (φ_s, φ_t)` and keeping
/// every `thin`-th draw after burn-in.
pub fn run_subset_chain(
    model: &SubsetModel,
    priors: &Priors,
    tables: Option<&GridTables>,
    cfg: &McmcConfig,
    rng: &mut ChainRng,
) -> Result<Chain> {
    priors.validate()?;
    cfg.validate()?;
    if cfg.variant != model.variant {
        return Err(Error::InvalidArgument(format!(
            "model built for `{}` but configuration asks for `{}`",
            model.variant, cfg.variant
        )));
    }
    let tables = match (model.variant.has_latent(), tables) {
        (false, _) => None,
        (true, Some(t)) => {
            model.check_tables(t)?;
            Some(t)
        }
        (true, None) => {
            return Err(Error::InvalidArgument("latent model requires grid tables".into()))
        }
    };

    let names = model.variant.parameter_names(&model.design.column_names);
    let d = names.len();
    let n_keep = cfg.n_retained();
    let g = model.n_latent();
    let mut draws = DMatrix::zeros(n_keep, d);
    let mut v_mean = DVector::zeros(g);
    let mut v_m2 = DVector::zeros(g);
    let mut v_draws = cfg.keep_v_draws.then(|| Vec::with_capacity(n_keep));

    let mut state = SamplerState::initial(model, tables)
        .context_with(|| "least-squares initialization".into())?;
    let mut kept = 0;
    for it in 0..cfg.iterations {
        sweep(model, priors, tables, cfg, &mut state, rng)
            .context_with(|| format!("iteration {it}"))?;
        let post = it + 1;
        if post > cfg.burn_in && (post - cfg.burn_in).is_multiple_of(cfg.thin) && kept < n_keep {
            let row = record(model, tables, &state);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite draw at iteration {it}")));
            }
            draws.row_mut(kept).copy_from_slice(&row);
            kept += 1;
            if g > 0 {
                let delta = &state.v - &v_mean;
                v_mean += &delta / kept as f64;
                v_m2 += delta.component_mul(&(&state.v - &v_mean));
            }
            if let Some(store) = v_draws.as_mut() {
                store.push(state.v.clone());
            }
        }
    }
    let v_var = if kept > 1 {
        v_m2 / (kept - 1) as f64
    } else {
        DVector::zeros(g)
    };
    let (geweke, converged) = geweke_report(&names, &draws);
    Ok(Chain {
        names,
        draws,
        v_mean,
        v_var,
        v_draws,
        meta: ChainMeta {
            iterations: cfg.iterations,
            burn_in: cfg.burn_in,
            thin: cfg.thin,
            seed: cfg.seed,
            p: model.p,
            variant: model.variant,
            geweke,
            converged,
        },
    })
}

fn sweep(
    model: &SubsetModel,
    priors: &Priors,
    tables: Option<&GridTables>,
    cfg: &McmcConfig,
    state: &mut SamplerState,
    rng: &mut ChainRng,
) -> Result<()> {
    state.beta = gibbs_step_beta(model, priors, state, rng)?;
    state.sigma_eps2 = gibbs_step_sigma_eps(model, priors, state, rng)?;
    if let Some(tables) = tables {
        gibbs_sweep_v(model, tables, state, rng)?;
        state.sigma_v2 = gibbs_step_sigma_v(model, priors, tables, state, rng)?;
        let (s, t) = gibbs_step_phi(model, tables, state, cfg.phi_exponent_literal, rng)?;
        state.phi_s = s;
        state.phi_t = t;
    }
    Ok(())
}

fn record(model: &SubsetModel, tables: Option<&GridTables>, state: &SamplerState) -> Vec<f64> {
    let mut row: Vec<f64> = state.beta.iter().copied().collect();
    row.push(state.sigma_eps2);
    if let Some(t) = tables {
        row.push(state.sigma_v2);
        if model.variant.has_spatial() {
            row.push(t.spatial[state.phi_s].phi.unwrap_or(f64::NAN));
        }
        if model.variant.has_temporal() {
            row.push(t.temporal[state.phi_t].phi.unwrap_or(f64::NAN));
        }
    }
    row
}
