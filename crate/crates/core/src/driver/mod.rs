//! Runs the incremental protocol over a task stream: per-task training with
//! Gaussian replay and neighbor hinge pairs, post-task fusion, statistics
//! fitting, evaluation and reporting.

mod eval;
mod metrics;
mod stream;
mod train;

pub use eval::{evaluate, Evaluation};
pub use metrics::{Aggregate, Confusion, RunMetrics};
pub use stream::{build_task_stream, TaskStream};
pub use train::{
    finalize_task, fit_stats, fusion_applies, replay_allocation, task_pairs, train_task, StatsBank,
    TaskTrainLog,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdamConfig, AdapterState, LossReport};
use crate::error::{RapfError, Result};
use crate::fusion::FusionSummary;
use crate::par::{self, Exec};
use crate::store::{load_store, EmbeddingSource, EmbeddingStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_hinge: bool,
    pub random_pairs: bool,
    pub no_fusion: bool,
    pub fusion_no_decompose: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_hinge: false,
        random_pairs: false,
        no_fusion: false,
        fusion_no_decompose: false,
    };
    /// Adapter fine-tuning with Gaussian replay only.
    pub const BASELINE: Ablation = Ablation {
        no_hinge: true,
        no_fusion: true,
        ..Self::FULL
    };
    pub const HINGE: Ablation = Ablation {
        no_fusion: true,
        ..Self::FULL
    };
    pub const HINGE_RANDOM: Ablation = Ablation {
        random_pairs: true,
        no_fusion: true,
        ..Self::FULL
    };
    pub const HINGE_FUSION_NO_DECOMPOSE: Ablation = Ablation {
        fusion_no_decompose: true,
        ..Self::FULL
    };
}

/// Everything that determines a run apart from file locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub base_size: usize,
    pub inc_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub alpha: f64,
    pub margin: f64,
    pub tau: f64,
    pub bias_b: f64,
    pub replay_per_epoch: usize,
    pub pair_samples_per_iter: usize,
    pub batch_size: usize,
    pub shrinkage: f64,
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
    pub fuse_first_task: bool,
    pub strict_one_to_one: bool,
    pub zero_change_epsilon: f64,
    pub adam: AdamConfig,
    /// Results do not depend on this, so it stays out of reports.
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            base_size: 10,
            inc_size: 10,
            epochs: 15,
            base_lr: 0.001,
            milestones: vec![4, 10],
            lr_gamma: 0.1,
            alpha: 0.65,
            margin: 0.1,
            tau: 0.01,
            bias_b: 0.0,
            replay_per_epoch: 2000,
            pair_samples_per_iter: 20,
            batch_size: 64,
            shrinkage: 0.1,
            seeds: vec![0, 1, 2],
            ablation: Ablation::default(),
            fuse_first_task: false,
            strict_one_to_one: false,
            zero_change_epsilon: 1e-12,
            adam: AdamConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RapfError::Config(m.to_owned()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("learning rate must be > 0");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones must be strictly increasing");
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return fail("alpha must lie in (0, 2]");
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return fail("margin must be >= 0");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return fail("temperature must be > 0");
        }
        if !(0.0..=1.0).contains(&self.bias_b) {
            return fail("bias_b must lie in [0, 1]");
        }
        if self.shrinkage.is_nan() || self.shrinkage < 0.0 {
            return fail("shrinkage must be >= 0");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        Ok(())
    }
}

/// A complete run request: input store, protocol and report destination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub emb: PathBuf,
    #[serde(flatten)]
    pub protocol: ProtocolConfig,
    /// Not echoed: a report does not depend on where it is written.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub classes: Vec<u32>,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<LossReport>,
    pub fusion: Option<FusionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub class_order: Vec<u32>,
    pub metrics: RunMetrics,
    pub tasks: Vec<TaskLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }
}

fn in_task<T>(seed: u64, task: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| RapfError::Run {
        seed,
        task,
        source: Box::new(e),
    })
}

/// Runs the whole protocol for one class order.
pub fn run_seed(
    source: &dyn EmbeddingSource,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<SeedReport> {
    let catalog = source.catalog();
    let stream = in_task(
        seed,
        0,
        build_task_stream(catalog.len(), config.base_size, config.inc_size, seed),
    )?;
    let mut state = in_task(seed, 0, AdapterState::identity(catalog.dim(), config.tau))?;
    let mut bank = StatsBank::new();
    let mut matrix = Vec::new();
    let mut confusion = Vec::new();
    let mut pair_log = Vec::new();
    let mut tasks = Vec::new();

    for t in 0..stream.num_tasks() {
        let w_before = state.weight.clone();
        let log = in_task(
            seed,
            t,
            train_task(&mut state, t, &stream, source, &bank, config, seed),
        )?;
        let fusion = in_task(seed, t, finalize_task(&mut state, &w_before, t, config))?;
        in_task(
            seed,
            t,
            fit_stats(&stream.tasks[t], source, config, &mut bank),
        )?;
        let eval = in_task(seed, t, evaluate(&state, &stream, source, t, config.exec))?;

        matrix.push(eval.row);
        confusion.push(eval.confusion);
        pair_log.push(log.pairs);
        tasks.push(TaskLog {
            task: t,
            classes: stream.tasks[t].clone(),
            train_accuracy: log.train_accuracy,
            epoch_losses: log.epoch_losses,
            fusion,
        });
    }
    Ok(SeedReport {
        seed,
        class_order: stream.class_order,
        metrics: RunMetrics::from_parts(matrix, confusion, pair_log),
        tasks,
    })
}

fn check_store(source: &dyn EmbeddingSource, partial: &[u32]) -> Result<()> {
    if let Some(&c) = partial.first() {
        return Err(RapfError::Data(format!(
            "store is partial: class {c} ({}) lacks 2 train / 1 test records ({} such classes)",
            source.catalog().name(c),
            partial.len()
        )));
    }
    Ok(())
}

/// Runs every seed of `config` on `source` (seeds may run concurrently) and
/// averages Avg/Last over them.
pub fn run_protocol(
    source: &dyn EmbeddingSource,
    config: &ProtocolConfig,
    echo: serde_json::Value,
) -> Result<RunReport> {
    config.validate()?;
    let seeds = par::map_range(config.exec, config.seeds.len(), |i| {
        run_seed(source, config, config.seeds[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::over(seeds.iter().map(|s| &s.metrics));
    Ok(RunReport {
        config: echo,
        seeds,
        aggregate,
    })
}

/// Runs an in-memory store, rejecting partial stores.
pub fn run_store(store: &EmbeddingStore, config: &ProtocolConfig) -> Result<RunReport> {
    check_store(store, &store.partial_classes())?;
    let echo = serde_json::to_value(config).expect("config is serializable");
    run_protocol(store, config, echo)
}

fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_json()).map_err(|e| RapfError::io(path, e))
}

/// Loads the store, runs the protocol and writes the JSON report if an
/// output path is set.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    let store = load_store(&config.emb)?;
    check_store(&store, &store.partial_classes())?;
    let echo = serde_json::to_value(config).expect("config is serializable");
    let report = run_protocol(&store, &config.protocol, echo)?;
    if let Some(out) = &config.out {
        write_report(&report, out)?;
    }
    Ok(report)
}
