use serde::{Deserialize, Serialize};

use crate::neighbors::NeighborPairSet;

/// Counts of (true class, predicted class) over the seen classes, both axes
/// ordered as `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<u32>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    /// Fraction of correct predictions over the listed true classes.
    pub fn accuracy_over(&self, class_ids: &[u32]) -> f64 {
        let (mut hit, mut total) = (0u64, 0u64);
        for &c in class_ids {
            let i = self.index_of(c).expect("class not in confusion matrix");
            hit += self.counts[i][i];
            total += self.counts[i].iter().sum::<u64>();
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Test samples of `from` classes predicted as one of the `to` classes.
    pub fn cross_count(&self, from: &[u32], to: &[u32]) -> u64 {
        let to_idx: Vec<usize> = to.iter().filter_map(|&c| self.index_of(c)).collect();
        from.iter()
            .filter_map(|&c| self.index_of(c))
            .map(|i| to_idx.iter().map(|&j| self.counts[i][j]).sum::<u64>())
            .sum()
    }
}

/// Accuracy curve of one class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Row `t` holds the accuracy on each task `s <= t` after training task `t`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub per_task_avg: Vec<f64>,
    pub avg: f64,
    pub last: f64,
    pub confusion: Vec<Confusion>,
    pub pair_log: Vec<NeighborPairSet>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl RunMetrics {
    pub fn from_parts(
        accuracy_matrix: Vec<Vec<f64>>,
        confusion: Vec<Confusion>,
        pair_log: Vec<NeighborPairSet>,
    ) -> Self {
        let per_task_avg: Vec<f64> = accuracy_matrix.iter().map(|row| mean(row)).collect();
        let avg = mean(&per_task_avg);
        let last = per_task_avg.last().copied().unwrap_or(0.0);
        Self {
            accuracy_matrix,
            per_task_avg,
            avg,
            last,
            confusion,
            pair_log,
        }
    }
}

/// Means over class orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg: f64,
    pub last: f64,
    pub per_task_avg: Vec<f64>,
}

impl Aggregate {
    pub fn over<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Self {
        let runs: Vec<&RunMetrics> = runs.into_iter().collect();
        let n = runs.len() as f64;
        let tasks = runs.first().map_or(0, |r| r.per_task_avg.len());
        let per_task_avg = (0..tasks)
            .map(|t| runs.iter().map(|r| r.per_task_avg[t]).sum::<f64>() / n)
            .collect();
        Self {
            avg: runs.iter().map(|r| r.avg).sum::<f64>() / n,
            last: runs.iter().map(|r| r.last).sum::<f64>() / n,
            per_task_avg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_identities() {
        let m = RunMetrics::from_parts(vec![vec![0.9], vec![0.8, 0.6]], vec![], vec![]);
        assert!((m.per_task_avg[1] - 0.7).abs() < 1e-15);
        assert!((m.avg - 0.8).abs() < 1e-15);
        assert_eq!(m.last, m.per_task_avg[1]);
        let single = RunMetrics::from_parts(vec![vec![0.55]], vec![], vec![]);
        assert_eq!(single.avg, single.last);
    }

    #[test]
    fn confusion_queries() {
        let c = Confusion {
            classes: vec![4, 2, 9],
            counts: vec![vec![3, 1, 0], vec![0, 4, 0], vec![2, 0, 2]],
        };
        assert_eq!(c.accuracy_over(&[4]), 0.75);
        assert_eq!(c.accuracy_over(&[4, 2, 9]), 9.0 / 12.0);
        assert_eq!(c.cross_count(&[4, 9], &[2]), 1);
        assert_eq!(c.cross_count(&[9], &[4, 2]), 2);
    }
}
