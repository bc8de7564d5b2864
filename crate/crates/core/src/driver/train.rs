//! Per-task training and post-task finalization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ProtocolConfig, TaskStream};
use crate::adapter::{loss_and_grad, lr_at, AdapterState, Batch, HingeItem, LossReport, TextSlice};
use crate::error::{RapfError, Result};
use crate::fusion::{fuse, FusionConfig, FusionSummary};
use crate::neighbors::{select_pairs, text_distance_matrix, NeighborPair, NeighborPairSet};
use crate::par;
use crate::rng::{self, tag};
use crate::stats::ClassStats;
use crate::store::EmbeddingSource;

/// Fitted Gaussian models keyed by class id.
pub type StatsBank = BTreeMap<u32, ClassStats>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainLog {
    pub pairs: NeighborPairSet,
    /// Mean per-iteration losses of each epoch.
    pub epoch_losses: Vec<LossReport>,
    /// Accuracy over seen classes on the current task's real train data,
    /// measured after the last epoch and before fusion.
    pub train_accuracy: f64,
}

/// Splits `total` replay features uniformly over `classes`; the remainder goes
/// one each to the lowest class ids.
pub fn replay_allocation(total: usize, classes: &[u32]) -> Vec<(u32, usize)> {
    if classes.is_empty() {
        return Vec::new();
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let share = total / sorted.len();
    let extra = total % sorted.len();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, share + usize::from(i < extra)))
        .collect()
}

/// Neighbor pairs for `task`, honoring the random-pairs and one-to-one
/// switches.
pub fn task_pairs(
    stream: &TaskStream,
    task: usize,
    source: &dyn EmbeddingSource,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<NeighborPairSet> {
    let old = stream.old(task);
    let new = &stream.tasks[task];
    if old.is_empty() {
        return Ok(NeighborPairSet {
            threshold: config.alpha,
            pairs: Vec::new(),
        });
    }
    let catalog = source.catalog();
    let old_t: Vec<DVector<f64>> = old.iter().map(|&c| catalog.text_f64(c)).collect();
    let new_t: Vec<DVector<f64>> = new.iter().map(|&c| catalog.text_f64(c)).collect();
    let dist = text_distance_matrix(&old_t, &new_t)?;
    let mut set = select_pairs(&dist, config.alpha, &old, new)?;
    if config.strict_one_to_one {
        set = set.one_to_one();
    }
    if config.ablation.random_pairs {
        let all: Vec<NeighborPair> = old
            .iter()
            .enumerate()
            .flat_map(|(i, &o)| new.iter().enumerate().map(move |(j, &n)| (i, j, o, n)))
            .map(|(i, j, old, new)| NeighborPair {
                old,
                new,
                distance: dist[(i, j)],
            })
            .collect();
        let mut rng = rng::stream(seed, &[tag::RANDOM_PAIRS, task as u64]);
        let mut pairs: Vec<NeighborPair> =
            all.choose_multiple(&mut rng, set.len()).copied().collect();
        pairs.sort_by_key(|p| (p.old, p.new));
        set.pairs = pairs;
    }
    Ok(set)
}

/// Trains the adapter on one task.
///
/// Old classes are represented only by features drawn from `bank`; real train
/// embeddings are read for the current task's classes alone.
pub fn train_task(
    state: &mut AdapterState,
    task: usize,
    stream: &TaskStream,
    source: &dyn EmbeddingSource,
    bank: &StatsBank,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<TaskTrainLog> {
    let current = &stream.tasks[task];
    let seen = stream.seen(task);
    let old = stream.old(task);
    if let Some(missing) = old.iter().find(|c| !bank.contains_key(c)) {
        return Err(RapfError::Contract(format!(
            "no fitted statistics for old class {missing}"
        )));
    }

    let mut real: Vec<(DVector<f64>, u32)> = Vec::new();
    for &c in current {
        real.extend(source.train_vectors(c).into_iter().map(|v| (v, c)));
    }
    if real.is_empty() {
        return Err(RapfError::Data(format!(
            "task {task} has no train embeddings"
        )));
    }

    let pairs = task_pairs(stream, task, source, config, seed)?;
    let hinge_classes = if config.ablation.no_hinge {
        Vec::new()
    } else {
        pairs.old_classes()
    };
    let texts = TextSlice::from_catalog(source.catalog(), &seen);
    let replay = replay_allocation(config.replay_per_epoch, &old);

    state.reset_optimizer();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config.base_lr, &config.milestones, config.lr_gamma);
        let ep = epoch as u64;
        let t = task as u64;

        let mut replay_rng = rng::stream(seed, &[tag::REPLAY, t, ep]);
        let mut generated: Vec<(DVector<f64>, u32)> = Vec::with_capacity(config.replay_per_epoch);
        for &(c, n) in &replay {
            generated.extend(
                bank[&c]
                    .draw_many(&mut replay_rng, n)
                    .into_iter()
                    .map(|v| (v, c)),
            );
        }
        let mut order: Vec<(bool, usize)> = (0..real.len())
            .map(|i| (true, i))
            .chain((0..generated.len()).map(|i| (false, i)))
            .collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, t, ep]));
        let mut hinge_rng = rng::stream(seed, &[tag::HINGE, t, ep]);

        let mut sum = LossReport::default();
        let mut iterations = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (features, labels) = chunk
                .iter()
                .map(|&(is_real, i)| {
                    let (v, c) = if is_real { &real[i] } else { &generated[i] };
                    (v.clone(), *c)
                })
                .unzip();
            let mut hinge = Vec::new();
            for &c in &hinge_classes {
                let samples = bank[&c].draw_many(&mut hinge_rng, config.pair_samples_per_iter);
                for p in pairs.pairs.iter().filter(|p| p.old == c) {
                    hinge.extend(samples.iter().map(|f| HingeItem {
                        feature: f.clone(),
                        old_class: c,
                        new_class: p.new,
                    }));
                }
            }
            let batch = Batch {
                features,
                labels,
                hinge,
            };
            let (report, grad) = loss_and_grad(state, &batch, &texts, config.margin, config.exec)?;
            state.adam_step(&grad, lr, &config.adam)?;
            sum.ce += report.ce;
            sum.hinge += report.hinge;
            sum.total += report.total;
            iterations += 1;
        }
        let n = iterations as f64;
        epoch_losses.push(LossReport {
            ce: sum.ce / n,
            hinge: sum.hinge / n,
            total: sum.total / n,
        });
    }

    let correct = par::map_chunks(config.exec, &real, 64, |chunk| {
        chunk
            .iter()
            .map(|(v, c)| Ok(usize::from(texts.ids()[state.predict(v, &texts)?] == *c)))
            .sum::<Result<usize>>()
    })
    .into_iter()
    .sum::<Result<usize>>()?;

    Ok(TaskTrainLog {
        pairs,
        epoch_losses,
        train_accuracy: correct as f64 / real.len() as f64,
    })
}

/// Whether the fusion step runs after `task`.
pub fn fusion_applies(task: usize, config: &ProtocolConfig) -> bool {
    !config.ablation.no_fusion && (task > 0 || config.fuse_first_task)
}

/// Fuses the freshly trained weight with the weight the task started from.
pub fn finalize_task(
    state: &mut AdapterState,
    w_before_task: &DMatrix<f64>,
    task: usize,
    config: &ProtocolConfig,
) -> Result<Option<FusionSummary>> {
    if !fusion_applies(task, config) {
        return Ok(None);
    }
    let cfg = FusionConfig {
        bias_b: config.bias_b,
        decompose: !config.ablation.fusion_no_decompose,
        zero_change_epsilon: config.zero_change_epsilon,
    };
    let (weight, trace) = fuse(w_before_task, &state.weight, &cfg)?;
    state.weight = weight;
    Ok(Some(trace.summary()))
}

/// Fits class models for `classes` from their raw train embeddings.
pub fn fit_stats(
    classes: &[u32],
    source: &dyn EmbeddingSource,
    config: &ProtocolConfig,
    bank: &mut StatsBank,
) -> Result<()> {
    let fitted = par::map_range(config.exec, classes.len(), |i| {
        let c = classes[i];
        ClassStats::fit(c, &source.train_vectors(c), config.shrinkage)
    });
    for s in fitted {
        let s = s?;
        bank.insert(s.class_id, s);
    }
    Ok(())
}
