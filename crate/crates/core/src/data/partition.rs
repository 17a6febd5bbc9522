use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Disjoint assignment of location indices to `Q` subsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    /// Location indices per subset, ascending within each subset.
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Shuffles location indices with `seed`, then slices them into `q`
/// contiguous runs. The first `q - 1` subsets receive `floor(S / q)`
/// locations and the last takes the remainder (983 locations into 20
/// subsets gives nineteen of 49 and one of 52).
pub fn partition_locations(dataset: &Dataset, q: usize, seed: u64) -> Result<Partition> {
    let s = dataset.n_locations();
    if q == 0 {
        return Err(Error::InvalidArgument("number of subsets must be positive".into()));
    }
    if q > s {
        return Err(Error::InvalidArgument(format!(
            "cannot split {s} locations into {q} subsets"
        )));
    }
    let mut order: Vec<usize> = (0..s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = s / q;
    let mut assignments = Vec::with_capacity(q);
    let mut start = 0;
    for k in 0..q {
        let end = if k + 1 == q { s } else { start + base };
        let mut set = order[start..end].to_vec();
        set.sort_unstable();
        assignments.push(set);
        start = end;
    }
    Ok(Partition { assignments, seed })
}

impl Partition {
    /// Single subset holding every location.
    pub fn whole(n_locations: usize) -> Self {
        Partition {
            assignments: vec![(0..n_locations).collect()],
            seed: 0,
        }
    }

    pub fn n_subsets(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Concatenation of all subsets, i.e. the location order under which
    /// subset blocks are contiguous.
    pub fn ordering(&self) -> Vec<usize> {
        self.assignments.iter().flatten().copied().collect()
    }

    pub fn validate(&self, n_locations: usize) -> Result<()> {
        let mut seen = vec![false; n_locations];
        for (q, set) in self.assignments.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidArgument(format!("subset {q} is empty")));
            }
            for &i in set {
                if i >= n_locations {
                    return Err(Error::InvalidArgument(format!(
                        "subset {q} references location {i} of {n_locations}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!(
                        "location {i} assigned to more than one subset"
                    )));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "location {i} is not assigned to any subset"
            )));
        }
        Ok(())
    }

    /// Writes `location_id,subset_index` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["location_id", "subset_index"])?;
        for (q, set) in self.assignments.iter().enumerate() {
            for &i in set {
                w.write_record([dataset.locations[i].id.as_str(), &q.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Partition> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut assignments: Vec<Vec<usize>> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or("");
            let q: usize = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Row {
                    row: row + 2,
                    message: "bad subset index".into(),
                })?;
            let loc = dataset.location_index(id).ok_or_else(|| Error::Row {
                row: row + 2,
                message: format!("unknown location `{id}`"),
            })?;
            if assignments.len() <= q {
                assignments.resize(q + 1, Vec::new());
            }
            assignments[q].push(loc);
        }
        for set in &mut assignments {
            set.sort_unstable();
        }
        let p = Partition {
            assignments,
            seed: 0,
        };
        p.validate(dataset.n_locations())?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Location;
    use proptest::prelude::*;

    fn dataset(s: usize) -> Dataset {
        let locs = (0..s)
            .map(|i| Location::new(format!("L{i}"), 51.0 + i as f64 * 1e-3, 0.0))
            .collect();
        Dataset::new(locs, 1, vec![], vec![]).unwrap()
    }

    #[test]
    fn london_split_sizes() {
        let p = partition_locations(&dataset(983), 20, 7).unwrap();
        let sizes = p.sizes();
        assert_eq!(sizes.iter().filter(|&&n| n == 49).count(), 19);
        assert_eq!(sizes[19], 52);
    }

    #[test]
    fn single_subset_is_identity() {
        let p = partition_locations(&dataset(10), 1, 3).unwrap();
        assert_eq!(p.assignments, vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = dataset(50);
        assert_eq!(
            partition_locations(&ds, 4, 11).unwrap(),
            partition_locations(&ds, 4, 11).unwrap()
        );
        assert_ne!(
            partition_locations(&ds, 4, 11).unwrap(),
            partition_locations(&ds, 4, 12).unwrap()
        );
    }

    #[test]
    fn rejects_bad_q() {
        let ds = dataset(5);
        assert!(partition_locations(&ds, 0, 1).is_err());
        assert!(partition_locations(&ds, 6, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = dataset(12);
        let p = partition_locations(&ds, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.csv");
        p.write_csv(&path, &ds).unwrap();
        let back = Partition::read_csv(&path, &ds).unwrap();
        assert_eq!(back.assignments, p.assignments);
    }

    proptest! {
        #[test]
        fn is_set_partition(s in 1usize..200, q_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let q = 1 + ((s - 1) as f64 * q_frac) as usize;
            let p = partition_locations(&dataset(s), q, seed).unwrap();
            prop_assert_eq!(p.n_subsets(), q);
            prop_assert!(p.validate(s).is_ok());
            let sizes = p.sizes();
            for &n in &sizes[..q - 1] {
                prop_assert_eq!(n, s / q);
            }
            prop_assert_eq!(sizes[q - 1], s / q + s % q);
        }
    }
}
