use nalgebra::{DMatrix, DVector};

use super::Dataset;
use crate::error::{Error, Result};

/// Response vector, design matrix and the observation-to-cell map `B` for
/// one subset of locations.
///
/// Latent cells are laid out location-major: cell `i * n_times + j` is
/// subset-local location `i` at latent time `j`.
#[derive(Clone, Debug)]
pub struct DesignBundle {
    /// Global location indices, in subset-local order.
    pub locations: Vec<usize>,
    /// Latent time points per location (1 when time is collapsed).
    pub n_times: usize,
    pub column_names: Vec<String>,
    pub y: DVector<f64>,
    /// `N_q x (m + 1)`, leading column of ones.
    pub x: DMatrix<f64>,
    pub cell_index: Vec<usize>,
    /// Replicate count per latent cell.
    pub k_diag: Vec<usize>,
}

impl DesignBundle {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_cells(&self) -> usize {
        self.locations.len() * self.n_times
    }

    pub fn n_coefficients(&self) -> usize {
        self.x.ncols()
    }

    /// Maps every observation of a location onto a single latent cell, for
    /// models whose latent process is purely spatial.
    pub fn collapse_time(mut self) -> DesignBundle {
        let t = self.n_times;
        for c in &mut self.cell_index {
            *c /= t;
        }
        self.k_diag = self.k_diag.chunks(t).map(|ch| ch.iter().sum()).collect();
        self.n_times = 1;
        self
    }

    /// `B v`: latent value of each observation's cell.
    pub fn scatter(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_obs(), self.cell_index.iter().map(|&c| v[c]))
    }

    /// `B^T r`: per-cell sums of an observation-level vector.
    pub fn gather(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_cells());
        for (row, &c) in self.cell_index.iter().enumerate() {
            out[c] += r[row];
        }
        out
    }

    /// Half-open row range of each subset-local location (rows are sorted by
    /// location, so each location's observations are contiguous).
    pub fn location_rows(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.n_locations()];
        let mut start = 0;
        for (i, range) in ranges.iter_mut().enumerate() {
            let mut end = start;
            while end < self.cell_index.len() && self.cell_index[end] / self.n_times == i {
                end += 1;
            }
            *range = start..end;
            start = end;
        }
        ranges
    }
}

/// Builds the subset design. Rows are ordered by subset-local location rank,
/// then time, then replicate (input order within a cell).
pub fn build_design(dataset: &Dataset, subset: &[usize]) -> Result<DesignBundle> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("empty subset".into()));
    }
    let s = dataset.n_locations();
    let t = dataset.n_times;
    let mut local = vec![usize::MAX; s];
    for (rank, &i) in subset.iter().enumerate() {
        if i >= s {
            return Err(Error::InvalidArgument(format!(
                "location index {i} out of range for {s} locations"
            )));
        }
        if local[i] != usize::MAX {
            return Err(Error::InvalidArgument(format!("location {i} repeated in subset")));
        }
        local[i] = rank;
    }
    let mut rows: Vec<(usize, usize)> = dataset
        .observations
        .iter()
        .enumerate()
        .filter(|(_, o)| local[o.location_index] != usize::MAX)
        .map(|(k, o)| (local[o.location_index] * t + o.time_index, k))
        .collect();
    rows.sort_by_key(|&(cell, k)| (cell, k));

    let n = rows.len();
    let p = dataset.n_covariates() + 1;
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut cell_index = Vec::with_capacity(n);
    let mut k_diag = vec![0; subset.len() * t];
    for (r, &(cell, k)) in rows.iter().enumerate() {
        let obs = &dataset.observations[k];
        y[r] = obs.response;
        x[(r, 0)] = 1.0;
        for (j, v) in obs.covariates.iter().enumerate() {
            x[(r, j + 1)] = *v;
        }
        cell_index.push(cell);
        k_diag[cell] += 1;
    }
    let mut column_names = vec!["intercept".to_string()];
    column_names.extend(dataset.covariate_names.iter().cloned());
    Ok(DesignBundle {
        locations: subset.to_vec(),
        n_times: t,
        column_names,
        y,
        x,
        cell_index,
        k_diag,
    })
}

/// Linear trend `t / (span - 1)` (0 when `span == 1`) and its square.
pub fn time_trend_value(t: f64, span: usize) -> (f64, f64) {
    let lin = if span <= 1 { 0.0 } else { t / (span - 1) as f64 };
    (lin, lin * lin)
}

/// Per-month (linear, quadratic) trend covariates for `0..n_times`.
pub fn time_trend_covariates(n_times: usize) -> Vec<(f64, f64)> {
    (0..n_times)
        .map(|t| time_trend_value(t as f64, n_times))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Location, Observation};

    fn obs(loc: usize, t: usize, y: f64) -> Observation {
        Observation {
            location_index: loc,
            time_index: t,
            response: y,
            covariates: vec![y * 10.0],
        }
    }

    fn small() -> Dataset {
        Dataset::new(
            vec![Location::new("a", 51.0, 0.0), Location::new("b", 51.1, 0.0)],
            3,
            vec![
                obs(1, 0, 1.0),
                obs(0, 2, 2.0),
                obs(0, 0, 3.0),
                obs(0, 2, 4.0),
                obs(0, 2, 5.0),
                obs(0, 2, 6.0),
            ],
            vec!["c".into()],
        )
        .unwrap()
    }

    #[test]
    fn full_subset_counts() {
        let d = build_design(&small(), &[0, 1]).unwrap();
        assert_eq!(d.n_obs(), 6);
        assert_eq!(d.k_diag.iter().sum::<usize>(), 6);
        assert!(d.x.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_cells_and_replicate_grouping() {
        let d = build_design(&small(), &[0, 1]).unwrap();
        // cells: (a,0)=1, (a,1)=0, (a,2)=4, (b,0)=1, (b,1)=0, (b,2)=0
        assert_eq!(d.k_diag, vec![1, 0, 4, 1, 0, 0]);
        assert_eq!(&d.cell_index[1..5], &[2, 2, 2, 2]);
        // replicate order follows input order within the cell
        assert_eq!(d.y.as_slice(), &[3.0, 2.0, 4.0, 5.0, 6.0, 1.0]);
        assert_eq!(d.x[(0, 1)], 30.0);
    }

    #[test]
    fn subset_order_is_local_rank() {
        let d = build_design(&small(), &[1, 0]).unwrap();
        assert_eq!(d.y[0], 1.0);
        assert_eq!(d.cell_index[0], 0);
        assert_eq!(d.cell_index[1], 3);
        let rows = d.location_rows();
        assert_eq!(rows, vec![0..1, 1..6]);
    }

    #[test]
    fn collapse_time_sums_cells() {
        let d = build_design(&small(), &[0, 1]).unwrap().collapse_time();
        assert_eq!(d.n_times, 1);
        assert_eq!(d.k_diag, vec![5, 1]);
        assert_eq!(d.cell_index, vec![0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn scatter_gather_adjoint() {
        let d = build_design(&small(), &[0, 1]).unwrap();
        let v = DVector::from_fn(6, |i, _| i as f64 + 0.5);
        let r = DVector::from_fn(6, |i, _| (i * i) as f64);
        let lhs = d.scatter(&v).dot(&r);
        let rhs = v.dot(&d.gather(&r));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_subsets() {
        assert!(build_design(&small(), &[]).is_err());
        assert!(build_design(&small(), &[2]).is_err());
        assert!(build_design(&small(), &[0, 0]).is_err());
    }

    #[test]
    fn trend_values() {
        assert_eq!(time_trend_covariates(2), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(time_trend_covariates(1), vec![(0.0, 0.0)]);
        let trend = time_trend_covariates(106);
        assert!((trend[79].0 - 0.752).abs() < 1e-3);
        for (l, q) in &trend {
            assert_eq!(*q, l * l);
        }
        // 0.982 u - 0.646 u^2 peaks near u = 0.760, i.e. around month 80.
        let peak: f64 = 0.982 / (2.0 * 0.646);
        assert!((peak - 0.760).abs() < 1e-3);
        assert_eq!((peak * 105.0).round(), 80.0);
    }
}
