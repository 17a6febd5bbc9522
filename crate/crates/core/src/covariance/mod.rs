//! Separable space-time covariance: geodesic distances, exponential
//! kernels, Kronecker algebra, factorizations and precomputed grid tables.

mod geodesic;
mod linalg;
mod tables;

use nalgebra::{DMatrix, DVector};

pub use geodesic::{
    distance_matrix, great_circle_km, lag_matrix, vincenty_inverse, vincenty_km, MEAN_RADIUS_KM,
    WGS84_A_KM, WGS84_F,
};
pub(crate) use linalg::symmetrize;
pub use linalg::{block_diag_of_inverse, chol_psd, invert_spd, logdet_psd, CholeskyFactor};
pub use tables::{
    build_grid_tables, GridTables, LocationConditionals, SpatialInverse, SpatialTable,
    SubsetSpatial, TemporalTable,
};

use crate::error::{Error, Result};

/// Entrywise `exp(-phi * d)`.
pub fn exp_correlation(distances: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    distances.map(|d| (-phi * d).exp())
}

/// Applies `(A ⊗ B)` to `x` without forming the Kronecker product.
///
/// `x` is indexed location-major (`i * nb + j`, `A` is `na x na` over the
/// outer index and `B` is `nb x nb` over the inner one). Passing inverse
/// factors computes `(A ⊗ B)^{-1} x = (A^{-1} ⊗ B^{-1}) x`.
pub fn kron_pair_solve(
    a_inv: &DMatrix<f64>,
    b_inv: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (na, nb) = (a_inv.nrows(), b_inv.nrows());
    if !a_inv.is_square() || !b_inv.is_square() || x.len() != na * nb {
        return Err(Error::Dimension(format!(
            "kron of {}x{} and {}x{} applied to length {}",
            a_inv.nrows(),
            a_inv.ncols(),
            b_inv.nrows(),
            b_inv.ncols(),
            x.len()
        )));
    }
    // Column i of w is the inner block of outer index i.
    let w = DMatrix::from_column_slice(nb, na, x.as_slice());
    let y = b_inv * w * a_inv.transpose();
    Ok(DVector::from_column_slice(y.as_slice()))
}

/// `x^T (A ⊗ B) x`.
pub fn kron_quadratic(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    Ok(x.dot(&kron_pair_solve(a, b, x)?))
}

/// Conditional law of one group of locations given another under a
/// separable prior `Σ_s ⊗ Σ_t`.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    /// `Σ12 Σ22^{-1}`, `n1 x n2`.
    pub weights: DMatrix<f64>,
    /// Conditional mean, `T x n1` (column per conditioned location).
    pub mean: DMatrix<f64>,
    /// Spatial factor of the conditional covariance; the full covariance is
    /// `spatial_cov ⊗ Σ_t`.
    pub spatial_cov: DMatrix<f64>,
}

/// Conditions the first block on the second, using the Kronecker identity
/// `(Σ12 ⊗ Σ_t)(Σ22^{-1} ⊗ Σ_t^{-1}) = (Σ12 Σ22^{-1}) ⊗ I_T`, so only the
/// spatial blocks are handled densely.
///
/// `z2` is `T x n2`, one column per conditioning location.
pub fn conditional_gaussian(
    s11: &DMatrix<f64>,
    s12: &DMatrix<f64>,
    s22_inv: &DMatrix<f64>,
    z2: &DMatrix<f64>,
) -> Result<ConditionalGaussian> {
    let n1 = s11.nrows();
    let n2 = s22_inv.nrows();
    if !s11.is_square()
        || !s22_inv.is_square()
        || s12.nrows() != n1
        || s12.ncols() != n2
        || z2.ncols() != n2
    {
        return Err(Error::Dimension(format!(
            "conditional blocks {}x{}, {}x{}, {}x{} with z2 {}x{}",
            s11.nrows(),
            s11.ncols(),
            s12.nrows(),
            s12.ncols(),
            s22_inv.nrows(),
            s22_inv.ncols(),
            z2.nrows(),
            z2.ncols()
        )));
    }
    let weights = s12 * s22_inv;
    let mean = z2 * weights.transpose();
    let spatial_cov = s11 - &weights * s12.transpose();
    Ok(ConditionalGaussian {
        weights,
        mean,
        spatial_cov,
    })
}

/// Discrete supports of the spatial and temporal decay parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayGrid {
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
}

impl Default for DecayGrid {
    /// `φ_s ∈ {1.0, 1.2, …, 3.0}` per km and `φ_t ∈ {0.2, 0.4, …, 1.0}` per month.
    fn default() -> Self {
        DecayGrid {
            spatial: regular_grid(1.0, 3.0, 0.2),
            temporal: regular_grid(0.2, 1.0, 0.2),
        }
    }
}

/// Inclusive evenly spaced values, rounded to 12 decimals.
pub fn regular_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
        .collect()
}

impl DecayGrid {
    pub fn new(spatial: Vec<f64>, temporal: Vec<f64>) -> Result<Self> {
        let g = DecayGrid { spatial, temporal };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("spatial", &self.spatial), ("temporal", &self.temporal)] {
            if axis.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} decay grid is empty")));
            }
            if axis.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "{name} decay grid must be positive"
                )));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} decay grid must be strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.spatial.len() * self.temporal.len()
    }

    pub fn nearest_spatial(&self, phi: f64) -> usize {
        nearest(&self.spatial, phi)
    }

    pub fn nearest_temporal(&self, phi: f64) -> usize {
        nearest(&self.temporal, phi)
    }

    pub fn contains(&self, phi_s: f64, phi_t: f64) -> bool {
        let on = |axis: &[f64], v: f64| axis.iter().any(|g| (g - v).abs() < 1e-9);
        on(&self.spatial, phi_s) && on(&self.temporal, phi_t)
    }
}

/// Index of the grid value closest to `v` (first one on ties).
pub fn nearest(axis: &[f64], v: f64) -> usize {
    axis.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bd), (i, g)| {
            let d = (g - v).abs();
            if d < bd {
                (i, d)
            } else {
                (bi, bd)
            }
        })
        .0
}
