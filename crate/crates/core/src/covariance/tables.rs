use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{
    block_diag_of_inverse, distance_matrix, exp_correlation, invert_spd, lag_matrix, logdet_psd,
    DecayGrid,
};
use crate::data::{Dataset, Location, Partition};
use crate::error::{Error, Result, ResultExt};

/// How the per-subset spatial precision is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpatialInverse {
    /// Diagonal block of the inverse of the full correlation matrix.
    #[default]
    BlockSchur,
    /// Inverse of the subset's own correlation block.
    Direct,
}

/// Prior conditional of one location's latent block given the other
/// locations of its subset, read off the spatial precision `P`:
/// mean weights `-P_ij / P_ii` and spatial scale `1 / P_ii`.
#[derive(Clone, Debug)]
pub struct LocationConditionals {
    /// Row `i` holds the weights of location `i` (zero on the diagonal).
    pub weights: DMatrix<f64>,
    pub scale: Vec<f64>,
}

impl LocationConditionals {
    pub fn from_precision(p: &DMatrix<f64>) -> Result<Self> {
        let n = p.nrows();
        let mut weights = DMatrix::zeros(n, n);
        let mut scale = Vec::with_capacity(n);
        for i in 0..n {
            let pii = p[(i, i)];
            if !(pii.is_finite() && pii > 0.0) {
                return Err(Error::Numerical(format!(
                    "non-positive precision diagonal at location {i}"
                )));
            }
            for j in 0..n {
                if j != i {
                    weights[(i, j)] = -p[(i, j)] / pii;
                }
            }
            scale.push(1.0 / pii);
        }
        Ok(LocationConditionals { weights, scale })
    }
}

/// Spatial quantities of one subset at one decay value.
#[derive(Clone, Debug)]
pub struct SubsetSpatial {
    /// Spatial precision used in quadratic forms.
    pub precision: DMatrix<f64>,
    /// `log |Σ_s(q)|` of the subset's own correlation block.
    pub logdet: f64,
    pub conditionals: LocationConditionals,
}

#[derive(Clone, Debug)]
pub struct SpatialTable {
    /// `None` when locations are treated as independent.
    pub phi: Option<f64>,
    pub subsets: Vec<SubsetSpatial>,
}

#[derive(Clone, Debug)]
pub struct TemporalTable {
    /// `None` when time points are treated as independent.
    pub phi: Option<f64>,
    pub corr: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    pub logdet: f64,
}

/// Precomputed factorizations for every decay value on the grid, shared by
/// all subset chains.
#[derive(Clone, Debug)]
pub struct GridTables {
    pub spatial: Vec<SpatialTable>,
    pub temporal: Vec<TemporalTable>,
    pub subset_sizes: Vec<usize>,
    pub n_times: usize,
}

impl GridTables {
    /// Builds the tables for the subsets in `assignments` (global location
    /// indices into `locations`). A `None` axis yields a single identity
    /// table for that axis.
    pub fn build(
        locations: &[Location],
        assignments: &[Vec<usize>],
        n_times: usize,
        spatial_grid: Option<&[f64]>,
        temporal_grid: Option<&[f64]>,
        inverse: SpatialInverse,
    ) -> Result<Self> {
        if n_times == 0 {
            return Err(Error::InvalidArgument("no time points".into()));
        }
        if assignments.is_empty() || assignments.iter().any(|a| a.is_empty()) {
            return Err(Error::InvalidArgument("empty subset in table layout".into()));
        }
        let subset_sizes: Vec<usize> = assignments.iter().map(Vec::len).collect();

        let spatial = match spatial_grid {
            None => vec![identity_spatial(&subset_sizes)?],
            Some(grid) => {
                let ordered: Vec<Location> = assignments
                    .iter()
                    .flatten()
                    .map(|&i| {
                        locations.get(i).cloned().ok_or_else(|| {
                            Error::InvalidArgument(format!("location index {i} out of range"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let dist = distance_matrix(&ordered);
                grid.par_iter()
                    .map(|&phi| {
                        spatial_table(&dist, &subset_sizes, phi, inverse)
                            .context_with(|| format!("spatial decay {phi}"))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        let temporal = match temporal_grid {
            None => {
                let eye = DMatrix::identity(n_times, n_times);
                vec![TemporalTable {
                    phi: None,
                    corr: eye.clone(),
                    inv: eye,
                    logdet: 0.0,
                }]
            }
            Some(grid) => {
                let lags = lag_matrix(n_times);
                grid.par_iter()
                    .map(|&phi| {
                        temporal_table(&lags, phi).context_with(|| format!("temporal decay {phi}"))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        Ok(GridTables {
            spatial,
            temporal,
            subset_sizes,
            n_times,
        })
    }

    pub fn n_subsets(&self) -> usize {
        self.subset_sizes.len()
    }

    pub fn n_points(&self) -> usize {
        self.spatial.len() * self.temporal.len()
    }
}

fn identity_spatial(sizes: &[usize]) -> Result<SpatialTable> {
    let subsets = sizes
        .iter()
        .map(|&m| {
            let precision = DMatrix::identity(m, m);
            Ok(SubsetSpatial {
                conditionals: LocationConditionals::from_precision(&precision)?,
                precision,
                logdet: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SpatialTable { phi: None, subsets })
}

fn spatial_table(
    dist: &DMatrix<f64>,
    sizes: &[usize],
    phi: f64,
    inverse: SpatialInverse,
) -> Result<SpatialTable> {
    let corr = exp_correlation(dist, phi);
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &m in sizes {
        offsets.push(start);
        start += m;
    }
    let block = |k: usize| {
        corr.view((offsets[k], offsets[k]), (sizes[k], sizes[k]))
            .into_owned()
    };
    let precisions = match inverse {
        SpatialInverse::BlockSchur => block_diag_of_inverse(&corr, sizes)?,
        SpatialInverse::Direct => (0..sizes.len())
            .map(|k| invert_spd(&block(k)))
            .collect::<Result<_>>()?,
    };
    let subsets = precisions
        .into_iter()
        .enumerate()
        .map(|(k, precision)| {
            Ok(SubsetSpatial {
                logdet: logdet_psd(&block(k))?,
                conditionals: LocationConditionals::from_precision(&precision)?,
                precision,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SpatialTable {
        phi: Some(phi),
        subsets,
    })
}

fn temporal_table(lags: &DMatrix<f64>, phi: f64) -> Result<TemporalTable> {
    let corr = exp_correlation(lags, phi);
    let chol = super::chol_psd(&corr)?;
    Ok(TemporalTable {
        phi: Some(phi),
        inv: chol.inverse(),
        logdet: chol.logdet(),
        corr,
    })
}

/// Full space-time tables on `grid` for the given partition.
pub fn build_grid_tables(
    dataset: &Dataset,
    partition: &Partition,
    grid: &DecayGrid,
) -> Result<GridTables> {
    grid.validate()?;
    partition.validate(dataset.n_locations())?;
    GridTables::build(
        &dataset.locations,
        &partition.assignments,
        dataset.n_times,
        Some(&grid.spatial),
        Some(&grid.temporal),
        SpatialInverse::BlockSchur,
    )
}
