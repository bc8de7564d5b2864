//! Text-distance matrix between old and new classes and neighbor-pair
//! selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RapfError, Result};
use crate::store::UNIT_NORM_TOL;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborPair {
    pub old: u32,
    pub new: u32,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborPairSet {
    pub threshold: f64,
    pub pairs: Vec<NeighborPair>,
}

impl NeighborPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct old classes in pair order.
    pub fn old_classes(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for p in &self.pairs {
            if !out.contains(&p.old) {
                out.push(p.old);
            }
        }
        out
    }

    /// Keeps at most one pair per old and per new class, closest first.
    /// Ties break by (old, new) order.
    pub fn one_to_one(&self) -> NeighborPairSet {
        let mut sorted = self.pairs.clone();
        sorted.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.old.cmp(&b.old))
                .then(a.new.cmp(&b.new))
        });
        let mut used_old = Vec::new();
        let mut used_new = Vec::new();
        let mut pairs = Vec::new();
        for p in sorted {
            if !used_old.contains(&p.old) && !used_new.contains(&p.new) {
                used_old.push(p.old);
                used_new.push(p.new);
                pairs.push(p);
            }
        }
        pairs.sort_by_key(|p| (p.old, p.new));
        NeighborPairSet {
            threshold: self.threshold,
            pairs,
        }
    }
}

/// Euclidean distances between unit text embeddings, old classes as rows and
/// new classes as columns.
pub fn text_distance_matrix(old: &[DVector<f64>], new: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    for (which, set) in [("old", old), ("new", new)] {
        for (i, t) in set.iter().enumerate() {
            let n = t.norm();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(RapfError::Contract(format!(
                    "{which} text embedding {i} has norm {n}"
                )));
            }
        }
    }
    Ok(DMatrix::from_fn(old.len(), new.len(), |i, j| {
        (&old[i] - &new[j]).norm()
    }))
}

/// All `(old, new)` pairs with distance strictly below `alpha`, row-major.
pub fn select_pairs(
    distances: &DMatrix<f64>,
    alpha: f64,
    old_ids: &[u32],
    new_ids: &[u32],
) -> Result<NeighborPairSet> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(RapfError::Config(format!(
            "threshold {alpha} outside (0, 2]"
        )));
    }
    if distances.shape() != (old_ids.len(), new_ids.len()) {
        return Err(RapfError::Contract(
            "distance matrix shape does not match ids".into(),
        ));
    }
    let mut pairs = Vec::new();
    for (i, &old) in old_ids.iter().enumerate() {
        for (j, &new) in new_ids.iter().enumerate() {
            let distance = distances[(i, j)];
            if distance < alpha {
                pairs.push(NeighborPair { old, new, distance });
            }
        }
    }
    Ok(NeighborPairSet {
        threshold: alpha,
        pairs,
    })
}
