//! Divide-and-conquer fitting: subset chains under powered likelihoods,
//! Wasserstein-barycenter (WASP) combination of the global parameters and
//! stacking of the latent field.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::covariance::SpatialInverse;
use crate::data::{build_design, Dataset, Partition};
use crate::error::{Error, Result, ResultExt};
use crate::rng::chain_rng;
use crate::sampler::{
    geweke_report, read_draws_csv, run_subset_chain, Chain, ChainMeta, GewekeEntry, McmcConfig,
    ModelVariant, Priors, SubsetModel,
};

/// One subset's chain with the moments used by the WASP transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetFit {
    pub subset_index: usize,
    /// Global location indices in subset-local order.
    pub locations: Vec<usize>,
    pub chain: Chain,
    pub p: f64,
    pub sample_mean: DVector<f64>,
    /// Sample covariance (denominator `L - 1`), ridged when singular.
    pub sample_cov: DMatrix<f64>,
    /// Ridge added to the diagonal of `sample_cov` (0 when none).
    pub ridge: f64,
}

impl SubsetFit {
    pub fn new(subset_index: usize, locations: Vec<usize>, chain: Chain) -> Result<Self> {
        let (sample_mean, mut sample_cov) = draw_moments(&chain.draws)?;
        let ridge = ridge_if_singular(&sample_cov);
        if ridge > 0.0 {
            for i in 0..sample_cov.nrows() {
                sample_cov[(i, i)] += ridge;
            }
        }
        Ok(SubsetFit {
            subset_index,
            locations,
            p: chain.meta.p,
            chain,
            sample_mean,
            sample_cov,
            ridge,
        })
    }

    /// Latent points per location in this fit's `v_mean`.
    pub fn latent_times(&self) -> usize {
        if self.locations.is_empty() {
            0
        } else {
            self.chain.v_mean.len() / self.locations.len()
        }
    }

    /// Posterior mean of a named parameter.
    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let k = self.chain.names.iter().position(|n| n == name)?;
        Some(self.sample_mean[k])
    }

    /// Writes `chain.csv`, `v_mean.csv` and `meta.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.chain.write_csv(dir.join("chain.csv"))?;

        let path = dir.join("v_mean.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["location_id", "time_index", "v_mean", "v_var"])?;
        let t = self.latent_times();
        for (i, &loc) in self.locations.iter().enumerate() {
            for j in 0..t {
                w.write_record([
                    dataset.locations[loc].id.clone(),
                    (j as i64 + dataset.time_origin).to_string(),
                    self.chain.v_mean[i * t + j].to_string(),
                    self.chain.v_var[i * t + j].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let m = &self.chain.meta;
        let mut text = format!(
            "subset_index={}\np={}\nvariant={}\niterations={}\nburn_in={}\nthin={}\nseed={}\nconverged={}\nridge={}\n",
            self.subset_index, self.p, m.variant, m.iterations, m.burn_in, m.thin, m.seed, m.converged, self.ridge
        );
        for g in &m.geweke {
            let z = g.z.map_or("NA".to_string(), |z| z.to_string());
            text.push_str(&format!("geweke_{}={z}\n", g.name));
        }
        let path = dir.join("meta.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a fit written by [`SubsetFit::save`]; `locations` are the
    /// subset's global indices in the order used for fitting.
    pub fn load(dir: impl AsRef<Path>, dataset: &Dataset, locations: Vec<usize>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.txt");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let kv: HashMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: missing `{k}`", meta_path.display())))
        };
        let parse = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: `{k}`: {e}", meta_path.display())))
        };
        let subset_index = parse("subset_index")? as usize;
        let p = parse("p")?;
        let variant: ModelVariant = get("variant")?.parse()?;

        let (names, draws) = read_draws_csv(dir.join("chain.csv"))?;
        let (geweke, converged): (Vec<GewekeEntry>, bool) = geweke_report(&names, &draws);

        let path = dir.join("v_mean.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let pos: HashMap<usize, usize> =
            locations.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let mut rows: Vec<(usize, i64, f64, f64)> = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row_err = |m: String| Error::Row { row: k + 2, message: m };
            let id = rec.get(0).unwrap_or_default();
            let g = dataset
                .location_index(id)
                .ok_or_else(|| row_err(format!("unknown location `{id}`")))?;
            let local = *pos
                .get(&g)
                .ok_or_else(|| row_err(format!("location `{id}` is not in subset {subset_index}")))?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or_default()
                    .parse::<f64>()
                    .map_err(|e| row_err(format!("column {c}: {e}")))
            };
            rows.push((local, num(1)? as i64, num(2)?, num(3)?));
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let v_mean = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
        let v_var = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.3));
        if !locations.is_empty() && !rows.len().is_multiple_of(locations.len()) {
            return Err(Error::Data(format!(
                "{}: {} latent rows for {} locations",
                path.display(),
                rows.len(),
                locations.len()
            )));
        }

        let chain = Chain {
            names,
            draws,
            v_mean,
            v_var,
            v_draws: None,
            meta: ChainMeta {
                iterations: parse("iterations")? as usize,
                burn_in: parse("burn_in")? as usize,
                thin: parse("thin")? as usize,
                seed: parse("seed")? as u64,
                p,
                variant,
                geweke,
                converged,
            },
        };
        SubsetFit::new(subset_index, locations, chain)
    }
}

/// Column means and sample covariance (denominator `L - 1`; zero for one draw).
pub fn draw_moments(draws: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (l, d) = draws.shape();
    if l == 0 {
        return Err(Error::InvalidArgument("chain has no draws".into()));
    }
    let mean = DVector::from_fn(d, |j, _| draws.column(j).mean());
    if l == 1 {
        return Ok((mean, DMatrix::zeros(d, d)));
    }
    let mut centered = draws.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (l - 1) as f64;
    Ok((mean, cov))
}

/// `1e-10 * trace / d` when the smallest eigenvalue is not clearly positive.
fn ridge_if_singular(cov: &DMatrix<f64>) -> f64 {
    let d = cov.nrows();
    if d == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min > 1e-12 * max.abs() && min > 0.0 {
        return 0.0;
    }
    let trace = cov.trace();
    if trace > 0.0 {
        1e-10 * trace / d as f64
    } else {
        1e-10
    }
}

/// Timing of the pipeline phases.
#[derive(Clone, Debug, Default)]
pub struct PhaseTimes {
    pub designs: Duration,
    pub tables: Duration,
    pub sampling: Duration,
}

#[derive(Clone, Debug)]
pub struct DncFit {
    pub fits: Vec<SubsetFit>,
    pub times: PhaseTimes,
}

/// Runs every subset chain (in parallel) with power `p_q = N / N_q`.
/// Subset `q` draws from the random stream `(cfg.seed, q)`.
pub fn fit_dnc(
    dataset: &Dataset,
    partition: &Partition,
    priors: &Priors,
    cfg: &McmcConfig,
) -> Result<DncFit> {
    fit_dnc_with(dataset, partition, priors, cfg, SpatialInverse::BlockSchur)
}

/// The full-data sampler: one chain on every location with `p = 1` and the
/// directly inverted spatial correlation.
pub fn fit_full(dataset: &Dataset, priors: &Priors, cfg: &McmcConfig) -> Result<SubsetFit> {
    let partition = Partition::whole(dataset.n_locations());
    let mut out = fit_dnc_with(dataset, &partition, priors, cfg, SpatialInverse::Direct)?;
    Ok(out.fits.remove(0))
}

/// [`fit_dnc`] with an explicit choice of subset spatial precision:
/// `BlockSchur` takes the diagonal blocks of the full inverse, `Direct`
/// inverts each subset's own correlation block.
pub fn fit_dnc_with(
    dataset: &Dataset,
    partition: &Partition,
    priors: &Priors,
    cfg: &McmcConfig,
    inverse: SpatialInverse,
) -> Result<DncFit> {
    priors.validate()?;
    cfg.validate()?;
    partition.validate(dataset.n_locations())?;
    let n = dataset.n_obs();
    if n == 0 {
        return Err(Error::Data("dataset has no observations".into()));
    }

    let start = Instant::now();
    let designs = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(q, set)| build_design(dataset, set).context_with(|| format!("subset {q}")))
        .collect::<Result<Vec<_>>>()?;
    for (q, d) in designs.iter().enumerate() {
        if d.n_obs() == 0 {
            return Err(Error::Data(format!("subset {q} has no observations")));
        }
    }
    let t_designs = start.elapsed();

    let start = Instant::now();
    let tables = cfg.variant.tables(
        &dataset.locations,
        &partition.assignments,
        dataset.n_times,
        &priors.grid,
        inverse,
    )?;
    let t_tables = start.elapsed();

    let start = Instant::now();
    let fits = designs
        .into_par_iter()
        .enumerate()
        .map(|(q, design)| {
            let p = n as f64 / design.n_obs() as f64;
            let locations = design.locations.clone();
            let model = SubsetModel::new(design, q, p, cfg.variant)?;
            let mut rng = chain_rng(cfg.seed, q as u64);
            let chain = run_subset_chain(&model, priors, tables.as_ref(), cfg, &mut rng)?;
            SubsetFit::new(q, locations, chain)
        })
        .enumerate()
        .map(|(q, r)| r.context_with(|| format!("subset {q}")))
        .collect::<Result<Vec<_>>>()?;
    let t_sampling = start.elapsed();

    Ok(DncFit {
        fits,
        times: PhaseTimes {
            designs: t_designs,
            tables: t_tables,
            sampling: t_sampling,
        },
    })
}

/// Symmetric square root with eigenvalues clipped at zero.
pub fn matrix_sqrt_psd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    eigen_power(sigma, 0.5)
}

fn eigen_power(sigma: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::Dimension(format!(
            "square root of a {}x{} matrix",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let scale = sigma.amax().max(f64::MIN_POSITIVE);
    if (sigma - sigma.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let vals = eig.eigenvalues.map(|v| {
        if v > 0.0 {
            v.powf(power)
        } else if power > 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    });
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("inverse square root of a singular matrix".into()));
    }
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    crate::covariance::symmetrize(&mut out);
    Ok(out)
}

/// Pooled WASP draws with the barycenter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedPosterior {
    pub names: Vec<String>,
    /// `Σ L_q x d` transformed draws, subset by subset.
    pub draws: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Centers and rescales each subset's draws onto the averaged moments:
/// `θ̂ = μ̄ + Σ̄^{1/2} Σ̂_q^{-1/2} (θ - μ̂_q)`.
pub fn wasp_combine(fits: &[SubsetFit]) -> Result<CombinedPosterior> {
    let first = fits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subset fits to combine".into()))?;
    let names = first.chain.names.clone();
    let d = names.len();
    for f in fits {
        if f.chain.names != names {
            return Err(Error::Dimension(format!(
                "subset {} has parameters {:?}, expected {:?}",
                f.subset_index, f.chain.names, names
            )));
        }
    }
    let q = fits.len() as f64;
    let mean = fits
        .iter()
        .fold(DVector::zeros(d), |acc, f| acc + &f.sample_mean)
        / q;
    let cov = fits
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, f| acc + &f.sample_cov)
        / q;
    let root = matrix_sqrt_psd(&cov)?;

    let total: usize = fits.iter().map(|f| f.chain.n_draws()).sum();
    let mut draws = DMatrix::zeros(total, d);
    let mut row = 0;
    for f in fits {
        let inv_root = eigen_power(&f.sample_cov, -0.5)
            .context_with(|| format!("subset {} covariance", f.subset_index))?;
        let map = &root * inv_root;
        for l in 0..f.chain.n_draws() {
            let theta = f.chain.draws.row(l).transpose();
            let out = &mean + &map * (theta - &f.sample_mean);
            draws.row_mut(row).copy_from(&out.transpose());
            row += 1;
        }
    }
    Ok(CombinedPosterior {
        names,
        draws,
        mean,
        cov,
    })
}

/// Linear-interpolation empirical quantile (`{1,2,3,4}` at 0.25 gives 1.75).
pub fn empirical_quantile(values: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {gamma} outside (0, 1)")));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * gamma;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Per-parameter `γ` quantile of the pooled WASP draws.
pub fn wasp_quantile(combined: &CombinedPosterior, gamma: f64) -> Result<Vec<f64>> {
    (0..combined.draws.ncols())
        .map(|j| {
            let col: Vec<f64> = combined.draws.column(j).iter().copied().collect();
            empirical_quantile(&col, gamma)
        })
        .collect()
}

impl CombinedPosterior {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::sampler::write_draws_csv(path, &self.names, &self.draws)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.draws.column(k).iter().copied().collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior mean and central 95% interval per parameter.
pub fn summarize(combined: &CombinedPosterior) -> Result<Vec<SummaryRow>> {
    let lower = wasp_quantile(combined, 0.025)?;
    let upper = wasp_quantile(combined, 0.975)?;
    Ok(combined
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| SummaryRow {
            name: name.clone(),
            mean: combined.draws.column(j).mean(),
            lower: lower[j],
            upper: upper[j],
        })
        .collect())
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "mean", "q2.5", "q97.5"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.mean.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Latent field estimate over all locations, location-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEstimate {
    /// Latent points per location (1 for a purely spatial field, 0 without one).
    pub n_times: usize,
    pub mean: DVector<f64>,
}

impl LatentEstimate {
    pub fn at(&self, location: usize, time: usize) -> f64 {
        match self.n_times {
            0 => 0.0,
            1 => self.mean[location],
            t => self.mean[location * t + time],
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["location_id", "time_index", "v_hat"])?;
        for (i, loc) in dataset.locations.iter().enumerate() {
            for j in 0..self.n_times {
                w.write_record([
                    loc.id.clone(),
                    (j as i64 + dataset.time_origin).to_string(),
                    self.mean[i * self.n_times + j].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Places each subset's posterior mean of `V` into the global layout.
pub fn stack_v(fits: &[SubsetFit], n_locations: usize) -> Result<LatentEstimate> {
    let t = fits.first().map_or(0, SubsetFit::latent_times);
    if fits.iter().any(|f| f.latent_times() != t) {
        return Err(Error::Dimension("subsets disagree on latent times".into()));
    }
    let mut mean = DVector::zeros(n_locations * t);
    let mut covered = vec![false; n_locations];
    for f in fits {
        if f.chain.v_mean.len() != f.locations.len() * t {
            return Err(Error::Dimension(format!(
                "subset {} has {} latent values for {} locations",
                f.subset_index,
                f.chain.v_mean.len(),
                f.locations.len()
            )));
        }
        for (i, &g) in f.locations.iter().enumerate() {
            if g >= n_locations || covered[g] {
                return Err(Error::InvalidArgument(format!(
                    "location {g} is out of range or appears in two subsets"
                )));
            }
            covered[g] = true;
            mean.rows_mut(g * t, t)
                .copy_from(&f.chain.v_mean.rows(i * t, t));
        }
    }
    if let Some(g) = covered.iter().position(|c| !c) {
        return Err(Error::InvalidArgument(format!("location {g} is not covered by any subset")));
    }
    Ok(LatentEstimate { n_times: t, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ChainMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn chain_from(draws: DMatrix<f64>, v_mean: DVector<f64>) -> Chain {
        let d = draws.ncols();
        Chain {
            names: (0..d).map(|j| format!("p{j}")).collect(),
            draws,
            v_var: DVector::zeros(v_mean.len()),
            v_mean,
            v_draws: None,
            meta: ChainMeta {
                iterations: 0,
                burn_in: 0,
                thin: 1,
                seed: 0,
                p: 1.0,
                variant: ModelVariant::SpatioTemporal,
                geweke: vec![],
                converged: true,
            },
        }
    }

    fn gaussian_draws(n: usize, mean: &[f64], root: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mean.len();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = root * z + DVector::from_column_slice(mean);
            out.row_mut(i).copy_from(&x.transpose());
        }
        out
    }

    #[test]
    fn sqrt_cases() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&eye).unwrap() - &eye).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&asym).is_err());
    }

    #[test]
    fn quantile_convention() {
        assert_eq!(empirical_quantile(&[4.0, 1.0, 3.0, 2.0], 0.25).unwrap(), 1.75);
        assert!(empirical_quantile(&[1.0], 1.0).is_err());
        assert_eq!(empirical_quantile(&[5.0], 0.3).unwrap(), 5.0);
    }

    #[test]
    fn single_subset_is_identity() {
        let root = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.2, 0.0, -0.3, 0.1, 0.05]);
        let draws = gaussian_draws(400, &[1.0, -2.0, 0.3], &root, 1);
        let fit = SubsetFit::new(0, vec![0], chain_from(draws.clone(), DVector::zeros(0))).unwrap();
        let c = wasp_combine(&[fit]).unwrap();
        assert!((c.draws - draws).amax() < 1e-9);
    }

    #[test]
    fn identical_subsets_keep_moments() {
        let root = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 0.3]);
        let draws = gaussian_draws(300, &[2.0, 1.0], &root, 2);
        let a = SubsetFit::new(0, vec![0], chain_from(draws.clone(), DVector::zeros(0))).unwrap();
        let b = SubsetFit::new(1, vec![1], chain_from(draws, DVector::zeros(0))).unwrap();
        let c = wasp_combine(&[a.clone(), b]).unwrap();
        let (m, s) = draw_moments(&c.draws).unwrap();
        assert!((m - &a.sample_mean).amax() < 1e-9);
        // Pooled covariance of two identical copies uses denominator 2L - 1.
        let scale = (2.0 * 300.0 - 2.0) / (2.0 * 300.0 - 1.0);
        assert!((s - &a.sample_cov * scale).amax() < 1e-9);
    }

    #[test]
    fn gaussian_closure() {
        let root = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.4]);
        let sigma = &root * root.transpose();
        let fits: Vec<SubsetFit> = [[0.0, 1.0], [1.0, 3.0], [2.0, -1.0]]
            .iter()
            .enumerate()
            .map(|(q, mu)| {
                let d = gaussian_draws(20_000, mu, &root, 10 + q as u64);
                SubsetFit::new(q, vec![q], chain_from(d, DVector::zeros(0))).unwrap()
            })
            .collect();
        let c = wasp_combine(&fits).unwrap();
        let (m, s) = draw_moments(&c.draws).unwrap();
        let mu_bar = fits.iter().fold(DVector::zeros(2), |a, f| a + &f.sample_mean) / 3.0;
        assert!((&m - &mu_bar).amax() < 1e-9);
        assert!((m - DVector::from_vec(vec![1.0, 1.0])).amax() < 0.02);
        assert!((s - sigma).amax() < 0.01);
    }

    #[test]
    fn singular_covariance_is_ridged() {
        let mut draws = gaussian_draws(100, &[0.0, 0.0], &DMatrix::identity(2, 2), 3);
        draws.column_mut(1).fill(2.4);
        let fit = SubsetFit::new(0, vec![0], chain_from(draws.clone(), DVector::zeros(0))).unwrap();
        assert!(fit.ridge > 0.0);
        let c = wasp_combine(&[fit]).unwrap();
        assert!((c.draws - draws).amax() < 1e-9);
    }

    #[test]
    fn summary_of_one_draw() {
        let draws = DMatrix::from_row_slice(1, 2, &[1.5, -0.5]);
        let fit = SubsetFit::new(0, vec![0], chain_from(draws, DVector::zeros(0))).unwrap();
        let rows = summarize(&wasp_combine(&[fit]).unwrap()).unwrap();
        assert_eq!(rows[0].mean, 1.5);
        assert_eq!((rows[1].lower, rows[1].upper), (-0.5, -0.5));
    }

    #[test]
    fn stacking() {
        let d = DMatrix::from_element(2, 1, 0.0);
        let a = SubsetFit::new(0, vec![2, 0], chain_from(d.clone(), DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]))).unwrap();
        let b = SubsetFit::new(1, vec![1], chain_from(d.clone(), DVector::from_vec(vec![5.0, 6.0]))).unwrap();
        let v = stack_v(&[a.clone(), b.clone()], 3).unwrap();
        assert_eq!(v.mean.as_slice(), &[3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);
        assert_eq!(v, stack_v(&[b.clone(), a], 3).unwrap());
        assert!(stack_v(&[b], 3).is_err());
    }

    proptest! {
        #[test]
        fn sqrt_reconstructs(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose();
            let r = matrix_sqrt_psd(&s).unwrap();
            prop_assert!((&r * &r - &s).amax() < 1e-9);
        }
    }
}
