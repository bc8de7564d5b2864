use super::{Confusion, TaskStream};
use crate::adapter::{AdapterState, TextSlice};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::store::EmbeddingSource;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Accuracy on each task `0..=upto_task`.
    pub row: Vec<f64>,
    pub confusion: Confusion,
}

/// Scores the test split of every seen class against all seen classes. No
/// task identity is used: the prediction is the argmax of cosine similarity.
pub fn evaluate(
    state: &AdapterState,
    stream: &TaskStream,
    source: &dyn EmbeddingSource,
    upto_task: usize,
    exec: Exec,
) -> Result<Evaluation> {
    let seen = stream.seen(upto_task);
    let texts = TextSlice::from_catalog(source.catalog(), &seen);
    let counts = par::map_range(exec, seen.len(), |i| {
        let mut row = vec![0u64; seen.len()];
        for v in source.test_vectors(seen[i]) {
            row[state.predict(&v, &texts)?] += 1;
        }
        Ok(row)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let confusion = Confusion {
        classes: seen,
        counts,
    };
    let row = stream.tasks[..=upto_task]
        .iter()
        .map(|classes| confusion.accuracy_over(classes))
        .collect();
    Ok(Evaluation { row, confusion })
}
