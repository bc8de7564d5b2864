use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{RapfError, Result};
use crate::rng::{self, tag};

/// A seeded class order cut into a base task and equally sized increments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub base_size: usize,
    pub inc_size: usize,
    pub class_order: Vec<u32>,
    pub tasks: Vec<Vec<u32>>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=task`, in stream order.
    pub fn seen(&self, task: usize) -> Vec<u32> {
        self.tasks[..=task].iter().flatten().copied().collect()
    }

    /// Classes of tasks `0..task`.
    pub fn old(&self, task: usize) -> Vec<u32> {
        self.tasks[..task].iter().flatten().copied().collect()
    }

    pub fn task_of(&self, class_id: u32) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class_id))
    }
}

/// Shuffles `0..num_classes` with `order_seed` and splits it into tasks.
///
/// `base_size == num_classes` gives a single task. Otherwise the classes left
/// after the base task must divide evenly into `inc_size`.
pub fn build_task_stream(
    num_classes: usize,
    base_size: usize,
    inc_size: usize,
    order_seed: u64,
) -> Result<TaskStream> {
    if base_size == 0 || inc_size == 0 {
        return Err(RapfError::Config(
            "base and increment sizes must be >= 1".into(),
        ));
    }
    if base_size > num_classes {
        return Err(RapfError::Config(format!(
            "base size {base_size} exceeds the {num_classes} classes"
        )));
    }
    let rest = num_classes - base_size;
    if !rest.is_multiple_of(inc_size) {
        return Err(RapfError::Config(format!(
            "{rest} classes after the base task do not split into tasks of {inc_size}"
        )));
    }
    let mut class_order: Vec<u32> = (0..num_classes as u32).collect();
    class_order.shuffle(&mut rng::stream(order_seed, &[tag::CLASS_ORDER]));
    let mut tasks = vec![class_order[..base_size].to_vec()];
    tasks.extend(
        class_order[base_size..]
            .chunks(inc_size)
            .map(<[u32]>::to_vec),
    );
    Ok(TaskStream {
        base_size,
        inc_size,
        class_order,
        tasks,
    })
}
