//! Full conditional distributions of the powered-likelihood subset posterior
//! and the corresponding Gibbs updates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{ModelVariant, Priors};
use crate::covariance::{chol_psd, kron_quadratic, CholeskyFactor, GridTables};
use crate::data::DesignBundle;
use crate::error::{Error, Result};

/// Subset design with the power `p` applied to its likelihood.
#[derive(Clone, Debug)]
pub struct SubsetModel {
    pub design: DesignBundle,
    /// Position of this subset in the grid tables.
    pub subset: usize,
    pub p: f64,
    pub variant: ModelVariant,
    xtx: DMatrix<f64>,
}

impl SubsetModel {
    /// Wraps a subset design; the spatial variant collapses time so each
    /// location carries a single latent value.
    pub fn new(design: DesignBundle, subset: usize, p: f64, variant: ModelVariant) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidArgument(format!("likelihood power {p} must be positive")));
        }
        if design.n_obs() == 0 {
            return Err(Error::Data("subset has no observations".into()));
        }
        let design = if variant == ModelVariant::Spatial {
            design.collapse_time()
        } else {
            design
        };
        let xtx = design.x.transpose() * &design.x;
        Ok(SubsetModel {
            design,
            subset,
            p,
            variant,
            xtx,
        })
    }

    pub fn n_latent(&self) -> usize {
        if self.variant.has_latent() {
            self.design.n_cells()
        } else {
            0
        }
    }

    /// Checks that `tables` were built for this subset's layout.
    pub fn check_tables(&self, tables: &GridTables) -> Result<()> {
        let m = self.design.n_locations();
        if self.subset >= tables.n_subsets()
            || tables.subset_sizes[self.subset] != m
            || tables.n_times != self.design.n_times
        {
            return Err(Error::Dimension(format!(
                "tables do not match subset {} with {m} locations and {} latent times",
                self.subset, self.design.n_times
            )));
        }
        Ok(())
    }

    /// `y - X β`.
    fn fixed_residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.design.y - &self.design.x * beta
    }
}

/// Current values of all unknowns; decays are stored as grid indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub beta: DVector<f64>,
    pub sigma_eps2: f64,
    pub sigma_v2: f64,
    pub phi_s: usize,
    pub phi_t: usize,
    /// Location-major latent field of the subset.
    pub v: DVector<f64>,
}

impl SamplerState {
    /// Least-squares `β`, unit variances, grid-midpoint decays and `V = 0`.
    pub fn initial(model: &SubsetModel, tables: Option<&GridTables>) -> Result<Self> {
        let xty = model.design.x.transpose() * &model.design.y;
        let beta = chol_psd(&model.xtx)?.solve_vec(&xty);
        let (phi_s, phi_t) = match tables {
            Some(t) => (t.spatial.len() / 2, t.temporal.len() / 2),
            None => (0, 0),
        };
        Ok(SamplerState {
            beta,
            sigma_eps2: 1.0,
            sigma_v2: 1.0,
            phi_s,
            phi_t,
            v: DVector::zeros(model.n_latent()),
        })
    }

    /// `B V` restricted to the model's rows (zero without a latent field).
    fn latent_at_rows(&self, model: &SubsetModel) -> DVector<f64> {
        if self.v.is_empty() {
            DVector::zeros(model.design.n_obs())
        } else {
            model.design.scatter(&self.v)
        }
    }
}

/// Gaussian in information form.
#[derive(Clone, Debug)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianConditional {
    fn from_information(precision: DMatrix<f64>, eta: &DVector<f64>) -> Result<(Self, CholeskyFactor)> {
        let chol = chol_psd(&precision)?;
        let mean = chol.solve_vec(eta);
        Ok((GaussianConditional { mean, precision }, chol))
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(chol_psd(&self.precision)?.inverse())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = chol_psd(&self.precision)?;
        Ok(draw_with(&self.mean, &chol, rng))
    }
}

fn draw_with<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &CholeskyFactor,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol.solve_lt(&z)
}

/// Inverse gamma with density proportional to `x^{-shape-1} exp(-scale / x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let gamma = Gamma::new(self.shape, 1.0 / self.scale).map_err(|e| {
            Error::Numerical(format!(
                "inverse gamma({}, {}): {e}",
                self.shape, self.scale
            ))
        })?;
        Ok(1.0 / gamma.sample(rng))
    }

    /// Defined for `shape > 1`.
    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }
}

fn beta_posterior(
    model: &SubsetModel,
    priors: &Priors,
    state: &SamplerState,
) -> Result<(GaussianConditional, CholeskyFactor)> {
    let w = model.p / state.sigma_eps2;
    let k = model.xtx.nrows();
    let precision = &model.xtx * w + DMatrix::identity(k, k) / priors.c;
    let target = &model.design.y - state.latent_at_rows(model);
    let eta = model.design.x.transpose() * target * w;
    GaussianConditional::from_information(precision, &eta)
}

/// `β | rest ~ N(Λ^{-1} p X^T (y - BV) / σ_ε², Λ^{-1})` with
/// `Λ = p X^T X / σ_ε² + I / c`.
pub fn beta_conditional(
    model: &SubsetModel,
    priors: &Priors,
    state: &SamplerState,
) -> Result<GaussianConditional> {
    Ok(beta_posterior(model, priors, state)?.0)
}

pub fn gibbs_step_beta<R: Rng + ?Sized>(
    model: &SubsetModel,
    priors: &Priors,
    state: &SamplerState,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let (cond, chol) = beta_posterior(model, priors, state)?;
    Ok(draw_with(&cond.mean, &chol, rng))
}

/// `σ_ε² | rest ~ IG(a + p N_q / 2, p ||y - Xβ - BV||² / 2 + λ)`.
pub fn sigma_eps_conditional(model: &SubsetModel, priors: &Priors, state: &SamplerState) -> InvGamma {
    let r = model.fixed_residual(&state.beta) - state.latent_at_rows(model);
    InvGamma {
        shape: priors.a + model.p * model.design.n_obs() as f64 / 2.0,
        scale: model.p * r.norm_squared() / 2.0 + priors.lambda,
    }
}

pub fn gibbs_step_sigma_eps<R: Rng + ?Sized>(
    model: &SubsetModel,
    priors: &Priors,
    state: &SamplerState,
    rng: &mut R,
) -> Result<f64> {
    sigma_eps_conditional(model, priors, state).sample(rng)
}

/// `V^T (P ⊗ R^{-1}) V` at the current decays.
pub fn latent_quadratic(model: &SubsetModel, tables: &GridTables, state: &SamplerState) -> Result<f64> {
    let p = &tables.spatial[state.phi_s].subsets[model.subset].precision;
    let r_inv = &tables.temporal[state.phi_t].inv;
    kron_quadratic(p, r_inv, &state.v)
}

/// `σ_v² | rest ~ IG(a + p G_q / 2, p V^T (P ⊗ R^{-1}) V / 2 + λ)`.
pub fn sigma_v_conditional(
    model: &SubsetModel,
    priors: &Priors,
    tables: &GridTables,
    state: &SamplerState,
) -> Result<InvGamma> {
    let q = latent_quadratic(model, tables, state)?;
    Ok(InvGamma {
        shape: priors.a + model.p * state.v.len() as f64 / 2.0,
        scale: model.p * q / 2.0 + priors.lambda,
    })
}

pub fn gibbs_step_sigma_v<R: Rng + ?Sized>(
    model: &SubsetModel,
    priors: &Priors,
    tables: &GridTables,
    state: &SamplerState,
    rng: &mut R,
) -> Result<f64> {
    sigma_v_conditional(model, priors, tables, state)?.sample(rng)
}

/// Unnormalized log posterior of every decay pair, flattened as
/// `spatial_index * n_temporal + temporal_index`:
/// `-(pT/2) log|Σ_s(q)| - (p m_q/2) log|Σ_t| - p Q / (2 σ_v²)`,
/// where `Q = V^T (P ⊗ Σ_t^{-1}) V`. With `literal` the last term is
/// `-p Q / σ_v²`.
pub fn phi_log_posterior(
    model: &SubsetModel,
    tables: &GridTables,
    state: &SamplerState,
    literal: bool,
) -> Result<Vec<f64>> {
    let m = model.design.n_locations();
    let t = model.design.n_times;
    let p = model.p;
    // Column i holds location i's latent block.
    let v_mat = DMatrix::from_column_slice(t, m, state.v.as_slice());
    let quad_weight = if literal {
        p / state.sigma_v2
    } else {
        p / (2.0 * state.sigma_v2)
    };
    let nt = tables.temporal.len();
    let mut out = vec![0.0; tables.spatial.len() * nt];
    for (it, temporal) in tables.temporal.iter().enumerate() {
        let cross = v_mat.transpose() * (&temporal.inv * &v_mat);
        for (is, spatial) in tables.spatial.iter().enumerate() {
            let sub = &spatial.subsets[model.subset];
            let q = sub.precision.component_mul(&cross).sum();
            out[is * nt + it] = -(p * t as f64 / 2.0) * sub.logdet
                - (p * m as f64 / 2.0) * temporal.logdet
                - quad_weight * q;
        }
    }
    Ok(out)
}

/// Draws an index with probability proportional to `exp(log_weights)`.
pub fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("every grid point has zero posterior weight".into()));
    }
    let weights: Vec<f64> = log_weights
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { (v - max).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(0))
}

pub fn gibbs_step_phi<R: Rng + ?Sized>(
    model: &SubsetModel,
    tables: &GridTables,
    state: &SamplerState,
    literal: bool,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let lp = phi_log_posterior(model, tables, state, literal)?;
    let k = sample_log_weights(&lp, rng)?;
    let nt = tables.temporal.len();
    Ok((k / nt, k % nt))
}

/// Per-cell data terms `p B^T (y - Xβ) / σ_ε²` and `p k / σ_ε²`.
fn latent_data_terms(model: &SubsetModel, state: &SamplerState) -> (DVector<f64>, Vec<f64>) {
    let w = model.p / state.sigma_eps2;
    let eta = model.design.gather(&model.fixed_residual(&state.beta)) * w;
    let prec = model.design.k_diag.iter().map(|&k| k as f64 * w).collect();
    (eta, prec)
}

fn location_conditional_with(
    model: &SubsetModel,
    tables: &GridTables,
    state: &SamplerState,
    loc: usize,
    data_eta: &DVector<f64>,
    data_prec: &[f64],
) -> Result<(GaussianConditional, CholeskyFactor)> {
    let m = model.design.n_locations();
    let t = model.design.n_times;
    let cond = &tables.spatial[state.phi_s].subsets[model.subset].conditionals;
    let r_inv = &tables.temporal[state.phi_t].inv;

    let mut mu_c = DVector::zeros(t);
    for j in 0..m {
        let w = cond.weights[(loc, j)];
        if j != loc && w != 0.0 {
            mu_c.axpy(w, &state.v.rows(j * t, t), 1.0);
        }
    }
    let prior_scale = 1.0 / (cond.scale[loc] * state.sigma_v2);
    let mut precision = r_inv * prior_scale;
    for j in 0..t {
        precision[(j, j)] += data_prec[loc * t + j];
    }
    let eta = r_inv * mu_c * prior_scale + data_eta.rows(loc * t, t);
    GaussianConditional::from_information(precision, &eta)
}

/// Conditional of one location's latent block given the rest of the subset,
/// data and parameters.
pub fn v_location_conditional(
    model: &SubsetModel,
    tables: &GridTables,
    state: &SamplerState,
    loc: usize,
) -> Result<GaussianConditional> {
    if loc >= model.design.n_locations() {
        return Err(Error::InvalidArgument(format!("location {loc} out of range")));
    }
    let (eta, prec) = latent_data_terms(model, state);
    Ok(location_conditional_with(model, tables, state, loc, &eta, &prec)?.0)
}

pub fn gibbs_step_v_location<R: Rng + ?Sized>(
    model: &SubsetModel,
    tables: &GridTables,
    state: &SamplerState,
    loc: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let cond = v_location_conditional(model, tables, state, loc)?;
    cond.sample(rng)
}

/// One sweep over the subset's locations, updating `state.v` in place.
pub fn gibbs_sweep_v<R: Rng + ?Sized>(
    model: &SubsetModel,
    tables: &GridTables,
    state: &mut SamplerState,
    rng: &mut R,
) -> Result<()> {
    let t = model.design.n_times;
    let (eta, prec) = latent_data_terms(model, state);
    for loc in 0..model.design.n_locations() {
        let (cond, chol) = location_conditional_with(model, tables, state, loc, &eta, &prec)?;
        let draw = draw_with(&cond.mean, &chol, rng);
        state.v.rows_mut(loc * t, t).copy_from(&draw);
    }
    Ok(())
}

/// Joint conditional of the whole latent field, formed densely
/// (`G x G`); intended as a reference for small subsets.
pub fn v_joint_conditional(
    model: &SubsetModel,
    tables: &GridTables,
    state: &SamplerState,
) -> Result<GaussianConditional> {
    let p = &tables.spatial[state.phi_s].subsets[model.subset].precision;
    let r_inv = &tables.temporal[state.phi_t].inv;
    let mut precision = p.kronecker(r_inv) / state.sigma_v2;
    let (eta, prec) = latent_data_terms(model, state);
    for (c, d) in prec.iter().enumerate() {
        precision[(c, c)] += d;
    }
    Ok(GaussianConditional::from_information(precision, &eta)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{DecayGrid, SpatialInverse};
    use crate::data::{build_design, simulate, Dataset, SimulationConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(s: usize, t: usize, grid: DecayGrid) -> (Dataset, SubsetModel, GridTables) {
        let cfg = SimulationConfig {
            n_locations: s,
            n_times: t,
            mean_replicates: 2.0,
            seed: 17,
            grid: grid.clone(),
            params: crate::data::TrueParams::default().snapped(&grid),
            ..Default::default()
        };
        let (ds, _) = simulate(&cfg).unwrap();
        let all: Vec<usize> = (0..s).collect();
        let design = build_design(&ds, &all).unwrap();
        let model = SubsetModel::new(design, 0, 1.0, ModelVariant::SpatioTemporal).unwrap();
        let tables = ModelVariant::SpatioTemporal
            .tables(&ds.locations, &[all], t, &grid, SpatialInverse::BlockSchur)
            .unwrap()
            .unwrap();
        (ds, model, tables)
    }

    fn state_for(model: &SubsetModel) -> SamplerState {
        SamplerState {
            beta: DVector::from_element(model.design.n_coefficients(), 0.1),
            sigma_eps2: 0.5,
            sigma_v2: 0.3,
            phi_s: 0,
            phi_t: 0,
            v: DVector::from_fn(model.n_latent(), |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.1),
        }
    }

    #[test]
    fn beta_flat_prior_is_least_squares() {
        let (_, model, _) = fixture(4, 3, DecayGrid::default());
        let priors = Priors {
            c: 1e12,
            ..Default::default()
        };
        let mut state = state_for(&model);
        state.v.fill(0.0);
        state.sigma_eps2 = 1.0;
        let cond = beta_conditional(&model, &priors, &state).unwrap();
        let x = &model.design.x;
        let ols = (x.transpose() * x).try_inverse().unwrap() * x.transpose() * &model.design.y;
        assert!((cond.mean - ols).amax() < 1e-6);
    }

    #[test]
    fn beta_zero_response_has_zero_mean() {
        let (_, mut model, _) = fixture(3, 2, DecayGrid::default());
        model.design.y.fill(0.0);
        let mut state = state_for(&model);
        state.v.fill(0.0);
        let cond = beta_conditional(&model, &Priors::default(), &state).unwrap();
        assert!(cond.mean.amax() < 1e-12);
    }

    #[test]
    fn beta_draw_moments() {
        let (_, model, _) = fixture(3, 3, DecayGrid::default());
        let priors = Priors::default();
        let state = state_for(&model);
        let cond = beta_conditional(&model, &priors, &state).unwrap();
        let cov = cond.covariance().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let k = cond.mean.len();
        let mut sum = DVector::zeros(k);
        let mut sq = DVector::zeros(k);
        for _ in 0..n {
            let b = gibbs_step_beta(&model, &priors, &state, &mut rng).unwrap();
            sum += &b;
            sq += b.component_mul(&b);
        }
        for j in 0..k {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let se = (cov[(j, j)] / n as f64).sqrt();
            assert!((mean - cond.mean[j]).abs() < 3.0 * se + 1e-12, "coef {j}");
            let var_se = cov[(j, j)] * (2.0 / n as f64).sqrt();
            assert!((var - cov[(j, j)]).abs() < 3.0 * var_se);
        }
    }

    #[test]
    fn sigma_eps_moment_oracle() {
        let design = DesignBundle {
            locations: vec![0],
            n_times: 4,
            column_names: vec!["intercept".into()],
            y: DVector::from_element(4, 1.0),
            x: DMatrix::from_element(4, 1, 1.0),
            cell_index: vec![0, 1, 2, 3],
            k_diag: vec![1, 1, 1, 1],
        };
        let model = SubsetModel::new(design, 0, 1.0, ModelVariant::Hedonic).unwrap();
        let state = SamplerState {
            beta: DVector::zeros(1),
            sigma_eps2: 1.0,
            sigma_v2: 1.0,
            phi_s: 0,
            phi_t: 0,
            v: DVector::zeros(0),
        };
        let ig = sigma_eps_conditional(&model, &Priors::default(), &state);
        assert_eq!((ig.shape, ig.scale), (4.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| ig.sample(&mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Var of IG(4, 3) is 9 / (9 * 2) = 0.5.
        let se = (0.5 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn zero_residual_sigma_eps() {
        let (_, model, _) = fixture(3, 2, DecayGrid::default());
        let mut state = state_for(&model);
        let x = &model.design.x;
        // Make the data exactly x β + B v.
        let mut m2 = model.clone();
        m2.design.y = x * &state.beta + m2.design.scatter(&state.v);
        state.sigma_eps2 = 2.0;
        let ig = sigma_eps_conditional(&m2, &Priors::default(), &state);
        assert!((ig.shape - (2.0 + m2.design.n_obs() as f64 / 2.0)).abs() < 1e-12);
        assert!((ig.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn powered_likelihood_equals_replicated_data() {
        let (ds, model, _) = fixture(4, 3, DecayGrid::default());
        let priors = Priors::default();
        let state = state_for(&model);
        for p in [2usize, 3, 5] {
            let mut rep = ds.clone();
            rep.observations = ds
                .observations
                .iter()
                .flat_map(|o| std::iter::repeat_n(o.clone(), p))
                .collect();
            let all: Vec<usize> = (0..4).collect();
            let rep_model = SubsetModel::new(
                build_design(&rep, &all).unwrap(),
                0,
                1.0,
                ModelVariant::SpatioTemporal,
            )
            .unwrap();
            let mut powered = model.clone();
            powered.p = p as f64;
            let a = beta_conditional(&powered, &priors, &state).unwrap();
            let b = beta_conditional(&rep_model, &priors, &state).unwrap();
            assert!((&a.mean - &b.mean).amax() < 1e-10);
            assert!((&a.precision - &b.precision).amax() / b.precision.amax() < 1e-12);
            let a = sigma_eps_conditional(&powered, &priors, &state);
            let b = sigma_eps_conditional(&rep_model, &priors, &state);
            assert!((a.shape - b.shape).abs() < 1e-10);
            assert!((a.scale - b.scale).abs() / b.scale < 1e-10);
        }
    }

    #[test]
    fn sigma_v_cases() {
        let grid = DecayGrid::new(vec![2.0], vec![0.5]).unwrap();
        let (_, model, mut tables) = fixture(3, 4, grid);
        let priors = Priors::default();
        let mut state = state_for(&model);
        let g = model.n_latent() as f64;

        let v = state.v.clone();
        state.v.fill(0.0);
        let ig = sigma_v_conditional(&model, &priors, &tables, &state).unwrap();
        assert_eq!((ig.shape, ig.scale), (2.0 + g / 2.0, 1.0));

        state.v = v;
        let p = &tables.spatial[0].subsets[0].precision;
        let dense = p.kronecker(&tables.temporal[0].inv);
        let q_dense = (state.v.transpose() * &dense * &state.v)[(0, 0)];
        let q = latent_quadratic(&model, &tables, &state).unwrap();
        assert!((q - q_dense).abs() < 1e-10);

        tables.spatial[0].subsets[0].precision = DMatrix::identity(3, 3);
        tables.temporal[0].inv = DMatrix::identity(4, 4);
        state.v.fill(1.0);
        let ig = sigma_v_conditional(&model, &priors, &tables, &state).unwrap();
        assert_eq!((ig.shape, ig.scale), (2.0 + g / 2.0, g / 2.0 + 1.0));
    }

    #[test]
    fn phi_single_point_and_frequencies() {
        let grid = DecayGrid::new(vec![2.0], vec![0.5]).unwrap();
        let (_, model, tables) = fixture(3, 4, grid);
        let state = state_for(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(gibbs_step_phi(&model, &tables, &state, false, &mut rng).unwrap(), (0, 0));

        let lw = [3f64.ln(), 0.0];
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_log_weights(&lw, &mut rng).unwrap() == 0)
            .count() as f64;
        let se = (0.75 * 0.25 / n as f64).sqrt();
        assert!((hits / n as f64 - 0.75).abs() < 3.0 * se);
        assert!(sample_log_weights(&[f64::NEG_INFINITY; 2], &mut rng).is_err());
    }

    #[test]
    fn phi_uniform_when_tables_identical() {
        let grid = DecayGrid::new(vec![1.0, 2.0], vec![0.5, 0.7]).unwrap();
        let (_, model, mut tables) = fixture(3, 3, grid);
        let s0 = tables.spatial[0].clone();
        tables.spatial[1].subsets = s0.subsets;
        let t0 = tables.temporal[0].clone();
        tables.temporal[1].inv = t0.inv;
        tables.temporal[1].logdet = t0.logdet;
        let mut state = state_for(&model);
        state.v.fill(0.0);
        let lp = phi_log_posterior(&model, &tables, &state, false).unwrap();
        assert!(lp.iter().all(|v| (v - lp[0]).abs() < 1e-12));
    }

    #[test]
    fn phi_literal_doubles_quadratic_term() {
        let grid = DecayGrid::new(vec![2.0], vec![0.5]).unwrap();
        let (_, model, tables) = fixture(3, 3, grid);
        let state = state_for(&model);
        let half = phi_log_posterior(&model, &tables, &state, false).unwrap()[0];
        let lit = phi_log_posterior(&model, &tables, &state, true).unwrap()[0];
        let q = latent_quadratic(&model, &tables, &state).unwrap();
        assert!(((half - lit) - q / (2.0 * state.sigma_v2)).abs() < 1e-10);
    }

    #[test]
    fn single_location_conditional_is_marginal_prior() {
        let grid = DecayGrid::new(vec![2.0], vec![0.5]).unwrap();
        let (_, model, tables) = fixture(1, 4, grid);
        let mut state = state_for(&model);
        state.sigma_eps2 = 1e12;
        let cond = v_location_conditional(&model, &tables, &state, 0).unwrap();
        let cov = cond.covariance().unwrap();
        let prior = &tables.temporal[0].corr * state.sigma_v2;
        assert!((cov - prior).amax() < 1e-6);
        assert!(cond.mean.amax() < 1e-6);
    }

    #[test]
    fn location_conditional_matches_dense_joint() {
        let grid = DecayGrid::new(vec![2.0], vec![0.5]).unwrap();
        let (_, model, tables) = fixture(3, 4, grid);
        let state = state_for(&model);
        let joint = v_joint_conditional(&model, &tables, &state).unwrap();
        for loc in 0..3 {
            let c = v_location_conditional(&model, &tables, &state, loc).unwrap();
            // The block precision equals the joint precision's diagonal block.
            let block = joint.precision.view((loc * 4, loc * 4), (4, 4));
            assert!((&c.precision - block).amax() < 1e-10);
            // Mean: Λ_ii^{-1}(η_i - Σ_{j≠i} Λ_ij v_j).
            let mut eta = &joint.precision * &joint.mean;
            for j in 0..3 {
                if j != loc {
                    let lij = joint.precision.view((loc * 4, j * 4), (4, 4));
                    let r = lij * state.v.rows(j * 4, 4);
                    let mut e = eta.rows_mut(loc * 4, 4);
                    e -= r;
                }
            }
            let expect = block.into_owned().try_inverse().unwrap() * eta.rows(loc * 4, 4);
            assert!((&c.mean - expect).amax() < 1e-9);
        }
    }
}
