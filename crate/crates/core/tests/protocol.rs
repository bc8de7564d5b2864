use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use rapf::driver::{
    build_task_stream, evaluate, finalize_task, fit_stats, run_seed, run_store, train_task,
    Ablation, ProtocolConfig, StatsBank,
};
use rapf::store::{make_synthetic, SynthSpec};
use rapf::{AdapterState, ClassCatalog, EmbeddingSource, EmbeddingStore, Exec, RapfError};

fn separable() -> EmbeddingStore {
    make_synthetic(&SynthSpec {
        train_per_class: 60,
        test_per_class: 20,
        intra_class_spread: 0.2,
        visual_offset: 0.8,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(base: usize, inc: usize) -> ProtocolConfig {
    ProtocolConfig {
        base_size: base,
        inc_size: inc,
        epochs: 15,
        replay_per_epoch: 200,
        batch_size: 32,
        seeds: vec![0],
        ..ProtocolConfig::default()
    }
}

#[test]
fn first_task_is_plain_fine_tuning() {
    let store = separable();
    let config = quick(10, 10);
    let stream = build_task_stream(20, 10, 10, 0).unwrap();
    let mut state = AdapterState::identity(32, config.tau).unwrap();
    let log = train_task(
        &mut state,
        0,
        &stream,
        &store,
        &StatsBank::new(),
        &config,
        0,
    )
    .unwrap();
    assert!(log.pairs.is_empty());
    assert_eq!(log.epoch_losses.len(), 15);
    assert!(log
        .epoch_losses
        .iter()
        .all(|l| l.hinge == 0.0 && l.total == l.ce));
    assert!(log.epoch_losses.last().unwrap().ce < log.epoch_losses[0].ce);
}

#[test]
fn second_task_trains_with_replay_and_pairs() {
    let store = separable();
    let stream = build_task_stream(20, 10, 10, 0).unwrap();
    for ablation in [Ablation::FULL, Ablation::BASELINE] {
        let config = ProtocolConfig {
            ablation,
            ..quick(10, 10)
        };
        let mut state = AdapterState::identity(32, config.tau).unwrap();
        let mut bank = StatsBank::new();
        train_task(&mut state, 0, &stream, &store, &bank, &config, 0).unwrap();
        fit_stats(&stream.tasks[0], &store, &config, &mut bank).unwrap();
        let log = train_task(&mut state, 1, &stream, &store, &bank, &config, 0).unwrap();
        assert!(
            log.train_accuracy > 0.95,
            "train accuracy {}",
            log.train_accuracy
        );
        assert!(!log.pairs.is_empty());
        if ablation.no_hinge {
            assert!(log
                .epoch_losses
                .iter()
                .all(|l| l.hinge == 0.0 && l.total == l.ce));
        } else {
            assert!(log.epoch_losses.iter().any(|l| l.hinge > 0.0));
        }
    }
}

#[test]
fn old_classes_need_statistics() {
    let store = separable();
    let config = quick(10, 10);
    let stream = build_task_stream(20, 10, 10, 0).unwrap();
    let mut state = AdapterState::identity(32, config.tau).unwrap();
    let err = train_task(
        &mut state,
        1,
        &stream,
        &store,
        &StatsBank::new(),
        &config,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, RapfError::Contract(_)));
}

#[test]
fn finalize_respects_switches() {
    let mut config = quick(10, 10);
    let w_before = DMatrix::<f64>::identity(4, 4) * 2.0;
    let trained = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 * 0.1);

    config.ablation = Ablation {
        no_fusion: true,
        ..Ablation::FULL
    };
    let mut state = AdapterState::from_weight(trained.clone(), 0.01).unwrap();
    assert!(finalize_task(&mut state, &w_before, 3, &config)
        .unwrap()
        .is_none());
    assert_eq!(state.weight, trained);

    config.ablation = Ablation::FULL;
    assert!(finalize_task(&mut state, &w_before, 0, &config)
        .unwrap()
        .is_none());
    config.fuse_first_task = true;
    let mut unchanged = AdapterState::from_weight(w_before.clone(), 0.01).unwrap();
    let summary = finalize_task(&mut unchanged, &w_before, 0, &config)
        .unwrap()
        .unwrap();
    assert!(summary.zero_change);
    assert!((&unchanged.weight - &w_before).amax() < 1e-9);
}

#[test]
fn identity_adapter_is_perfect_without_spread() {
    let store = make_synthetic(&SynthSpec {
        train_per_class: 3,
        test_per_class: 4,
        intra_class_spread: 1e-9,
        ..SynthSpec::default()
    })
    .unwrap();
    let stream = build_task_stream(20, 5, 5, 3).unwrap();
    let state = AdapterState::identity(32, 0.01).unwrap();
    let eval = evaluate(&state, &stream, &store, 3, Exec::Parallel).unwrap();
    assert_eq!(eval.row, vec![1.0; 4]);
    for (t, classes) in stream.tasks.iter().enumerate() {
        assert_eq!(eval.row[t], eval.confusion.accuracy_over(classes));
    }
    let total: u64 = eval.confusion.counts.iter().flatten().sum();
    assert_eq!(total, 80);
}

#[test]
fn single_task_stream_has_avg_equal_last() {
    let store = separable();
    let report = run_store(
        &store,
        &ProtocolConfig {
            epochs: 2,
            ..quick(20, 5)
        },
    )
    .unwrap();
    let m = &report.seeds[0].metrics;
    assert_eq!(m.accuracy_matrix.len(), 1);
    assert_eq!(m.avg, m.last);
    assert_eq!(m.last, m.per_task_avg[0]);
}

#[test]
fn metrics_are_recomputable() {
    let store = separable();
    let report = run_store(
        &store,
        &ProtocolConfig {
            epochs: 3,
            seeds: vec![4, 5],
            ..quick(5, 5)
        },
    )
    .unwrap();
    for seed in &report.seeds {
        let m = &seed.metrics;
        for (t, row) in m.accuracy_matrix.iter().enumerate() {
            assert_eq!(row.len(), t + 1);
            assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!((m.per_task_avg[t] - row.iter().sum::<f64>() / row.len() as f64).abs() < 1e-15);
            for (s, acc) in row.iter().enumerate() {
                assert_eq!(*acc, m.confusion[t].accuracy_over(&seed.tasks[s].classes));
            }
        }
        assert!((m.avg - m.per_task_avg.iter().sum::<f64>() / 4.0).abs() < 1e-15);
        assert_eq!(m.last, m.per_task_avg[3]);
        assert!(seed.tasks[1..].iter().all(|t| t.fusion.is_some()));
        assert!(seed.tasks[0].fusion.is_none());
    }
    let mean_last = report.seeds.iter().map(|s| s.metrics.last).sum::<f64>() / 2.0;
    assert!((report.aggregate.last - mean_last).abs() < 1e-15);
}

#[test]
fn execution_mode_does_not_change_results() {
    let store = separable();
    let config = ProtocolConfig {
        epochs: 3,
        seeds: vec![0, 1],
        ..quick(5, 5)
    };
    let par = run_store(
        &store,
        &ProtocolConfig {
            exec: Exec::Parallel,
            ..config.clone()
        },
    )
    .unwrap();
    let seq = run_store(
        &store,
        &ProtocolConfig {
            exec: Exec::Sequential,
            ..config
        },
    )
    .unwrap();
    assert_eq!(par.to_json(), seq.to_json());
}

#[test]
fn partial_store_is_rejected() {
    let full = separable();
    let records = full
        .records()
        .iter()
        .filter(|r| r.class_id != 7)
        .cloned()
        .collect();
    let partial = EmbeddingStore::new(full.catalog().clone(), records).unwrap();
    let err = run_store(&partial, &quick(10, 10)).unwrap_err();
    assert!(matches!(err, RapfError::Data(m) if m.contains("class 7")));
}

#[test]
fn failures_carry_seed_and_task() {
    let store = separable();
    let err = run_store(
        &store,
        &ProtocolConfig {
            seeds: vec![9],
            ..quick(7, 5)
        },
    )
    .unwrap_err();
    assert!(
        matches!(err, RapfError::Config(_) | RapfError::Run { seed: 9, .. }),
        "{err:?}"
    );
}

/// Records every train-split read made through it.
struct Audited<'a> {
    inner: &'a EmbeddingStore,
    train_reads: Mutex<Vec<u32>>,
}

impl EmbeddingSource for Audited<'_> {
    fn catalog(&self) -> &ClassCatalog {
        self.inner.catalog()
    }

    fn train_vectors(&self, class_id: u32) -> Vec<DVector<f64>> {
        self.train_reads.lock().unwrap().push(class_id);
        self.inner.train_vectors(class_id)
    }

    fn test_vectors(&self, class_id: u32) -> Vec<DVector<f64>> {
        self.inner.test_vectors(class_id)
    }
}

#[test]
fn old_train_records_are_never_reread() {
    let store = separable();
    let audited = Audited {
        inner: &store,
        train_reads: Mutex::new(Vec::new()),
    };
    let config = ProtocolConfig {
        epochs: 2,
        exec: Exec::Sequential,
        ..quick(5, 5)
    };
    run_seed(&audited, &config, 11).unwrap();
    let stream = build_task_stream(20, 5, 5, 11).unwrap();
    let reads = audited.train_reads.into_inner().unwrap();
    let tasks: Vec<usize> = reads.iter().map(|&c| stream.task_of(c).unwrap()).collect();
    assert!(
        tasks.windows(2).all(|w| w[0] <= w[1]),
        "task order {tasks:?}"
    );
    // once for training, once for fitting statistics
    for c in 0..20 {
        assert_eq!(reads.iter().filter(|&&r| r == c).count(), 2, "class {c}");
    }
}

/// Two tasks of ten on a store where new-task training can disturb old
/// classes.
fn confusable_two_task() -> (EmbeddingStore, ProtocolConfig) {
    let store = make_synthetic(&SynthSpec {
        train_per_class: 500,
        intra_class_spread: 0.8,
        visual_offset: 1.5,
        modality_gap: 1.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = ProtocolConfig {
        base_size: 10,
        inc_size: 10,
        replay_per_epoch: 300,
        batch_size: 32,
        seeds: (0..5).collect(),
        ..ProtocolConfig::default()
    };
    (store, config)
}

#[test]
fn fusion_does_not_lower_last_accuracy_on_two_tasks() {
    let (store, config) = confusable_two_task();
    let full = run_store(&store, &config).unwrap();
    let no_fusion = run_store(
        &store,
        &ProtocolConfig {
            ablation: Ablation::HINGE,
            ..config
        },
    )
    .unwrap();
    assert!(
        full.aggregate.last >= no_fusion.aggregate.last,
        "full {} vs no fusion {}",
        full.aggregate.last,
        no_fusion.aggregate.last
    );
}

#[test]
fn full_method_beats_baseline_on_two_tasks() {
    let (store, config) = confusable_two_task();
    let full = run_store(&store, &config).unwrap();
    let baseline = run_store(
        &store,
        &ProtocolConfig {
            ablation: Ablation::BASELINE,
            ..config
        },
    )
    .unwrap();
    assert!(
        full.aggregate.last > baseline.aggregate.last,
        "full {} vs baseline {}",
        full.aggregate.last,
        baseline.aggregate.last
    );
}
