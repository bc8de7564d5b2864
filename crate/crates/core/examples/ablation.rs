//! Last/Avg of the ablation ladder on a confusable synthetic stream.
//!
//! `cargo run --release -p rapf --example ablation [seeds]`

use rapf::driver::{run_store, Ablation, ProtocolConfig};
use rapf::store::{make_synthetic, SynthSpec};

fn main() -> rapf::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let store = make_synthetic(&SynthSpec {
        train_per_class: 500,
        intra_class_spread: 0.8,
        visual_offset: 1.5,
        modality_gap: 1.0,
        ..SynthSpec::default()
    })?;
    let base = ProtocolConfig {
        base_size: 5,
        inc_size: 5,
        replay_per_epoch: 300,
        batch_size: 32,
        seeds: (0..seeds).collect(),
        ..ProtocolConfig::default()
    };
    let ladder = [
        ("baseline", Ablation::BASELINE),
        ("+hinge (random pairs)", Ablation::HINGE_RANDOM),
        ("+hinge", Ablation::HINGE),
        (
            "+hinge +fusion w/o SVD",
            Ablation::HINGE_FUSION_NO_DECOMPOSE,
        ),
        ("full", Ablation::FULL),
    ];
    println!(
        "{:<24} {:>7} {:>7} {:>7}",
        "variant", "avg", "last", "task-0"
    );
    for (name, ablation) in ladder {
        let report = run_store(
            &store,
            &ProtocolConfig {
                ablation,
                ..base.clone()
            },
        )?;
        let task0 = report
            .seeds
            .iter()
            .map(|s| s.metrics.accuracy_matrix.last().unwrap()[0])
            .sum::<f64>()
            / report.seeds.len() as f64;
        println!(
            "{name:<24} {:>7.4} {:>7.4} {task0:>7.4}",
            report.aggregate.avg, report.aggregate.last
        );
    }
    Ok(())
}
