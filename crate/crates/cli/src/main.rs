//! `rapf` command line: synthesize embedding stores, run the incremental
//! protocol, and inspect store files.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rapf::driver::{run, Ablation, ProtocolConfig, RunConfig};
use rapf::neighbors::text_distance_matrix;
use rapf::store::{load_store, make_synthetic, save_store, SynthSpec};
use rapf::{EmbeddingStore, Exec, Split};

#[derive(Parser)]
#[command(
    name = "rapf",
    version,
    about = "Class-incremental learning over frozen embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic embedding store
    Synth(SynthArgs),
    /// Run the incremental protocol on a store
    Run(RunArgs),
    /// Print a store summary and a histogram of text distances
    Inspect {
        path: PathBuf,
        /// Threshold reported alongside the histogram
        #[arg(long, default_value_t = 0.65)]
        alpha: f64,
        /// Histogram bin width
        #[arg(long, default_value_t = 0.1)]
        bin: f64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    /// Fraction of classes placed in close text-space pairs
    #[arg(long, default_value_t = 0.5)]
    confusable: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pair_distance: f64,
    #[arg(long, default_value_t = 0.9)]
    min_separation: f64,
    #[arg(long, default_value_t = 1.0)]
    image_scale: f64,
    /// Norm of the per-class image offset from the text direction
    #[arg(long, default_value_t = 0.0)]
    visual_offset: f64,
    /// Norm of the offset shared by all image embeddings
    #[arg(long, default_value_t = 0.0)]
    modality_gap: f64,
    #[arg(long, default_value_t = 1)]
    modes: usize,
    #[arg(long, default_value_t = 0.0)]
    mode_spread: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long, default_value_t = 10)]
    base: usize,
    #[arg(long, default_value_t = 10)]
    inc: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "4,10")]
    milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr_gamma: f64,
    #[arg(long, default_value_t = 0.65)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 0.0)]
    bias_b: f64,
    #[arg(long, default_value_t = 2000)]
    replay_per_epoch: usize,
    #[arg(long, default_value_t = 20)]
    pair_samples: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    shrinkage: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    no_hinge: bool,
    #[arg(long)]
    random_pairs: bool,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    fusion_no_decompose: bool,
    #[arg(long)]
    fuse_first_task: bool,
    #[arg(long)]
    strict_one_to_one: bool,
    /// Run on the calling thread only; results are identical
    #[arg(long)]
    sequential: bool,
    /// Report path; the report goes to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> RunConfig {
        RunConfig {
            emb: self.emb,
            protocol: ProtocolConfig {
                base_size: self.base,
                inc_size: self.inc,
                epochs: self.epochs,
                base_lr: self.lr,
                milestones: self.milestones,
                lr_gamma: self.lr_gamma,
                alpha: self.alpha,
                margin: self.margin,
                tau: self.tau,
                bias_b: self.bias_b,
                replay_per_epoch: self.replay_per_epoch,
                pair_samples_per_iter: self.pair_samples,
                batch_size: self.batch_size,
                shrinkage: self.shrinkage,
                seeds: self.seeds,
                ablation: Ablation {
                    no_hinge: self.no_hinge,
                    random_pairs: self.random_pairs,
                    no_fusion: self.no_fusion,
                    fusion_no_decompose: self.fusion_no_decompose,
                },
                fuse_first_task: self.fuse_first_task,
                strict_one_to_one: self.strict_one_to_one,
                exec: if self.sequential {
                    Exec::Sequential
                } else {
                    Exec::Parallel
                },
                ..ProtocolConfig::default()
            },
            out: self.out,
        }
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: args.classes,
        dim: args.dim,
        train_per_class: args.train,
        test_per_class: args.test,
        intra_class_spread: args.spread,
        confusable_fraction: args.confusable,
        seed: args.seed,
        pair_distance: args.pair_distance,
        min_separation: args.min_separation,
        image_scale: args.image_scale,
        visual_offset: args.visual_offset,
        modality_gap: args.modality_gap,
        modes_per_class: args.modes,
        mode_spread: args.mode_spread,
    };
    let store = make_synthetic(&spec)?;
    save_store(&store, &args.out)?;
    eprintln!(
        "wrote {} classes, {} records (d={}) to {}",
        store.catalog().len(),
        store.records().len(),
        store.catalog().dim(),
        args.out.display()
    );
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let config = args.into_config();
    let report = run(&config).with_context(|| format!("running {}", config.emb.display()))?;
    match &config.out {
        Some(path) => eprintln!(
            "avg {:.4} last {:.4} over {} seed(s); report in {}",
            report.aggregate.avg,
            report.aggregate.last,
            report.seeds.len(),
            path.display()
        ),
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn histogram(store: &EmbeddingStore, alpha: f64, bin: f64) -> Result<String> {
    anyhow::ensure!(bin > 0.0, "bin width must be positive");
    let catalog = store.catalog();
    let texts: Vec<_> = (0..catalog.len() as u32)
        .map(|c| catalog.text_f64(c))
        .collect();
    let dist = text_distance_matrix(&texts, &texts)?;
    let bins = (2.0 / bin).ceil() as usize;
    let mut counts = vec![0usize; bins];
    let mut below = 0;
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            let d = dist[(i, j)];
            counts[((d / bin) as usize).min(bins - 1)] += 1;
            below += usize::from(d < alpha);
        }
    }
    let widest = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::from("text distance histogram (class pairs):\n");
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let bar = "#".repeat((n * 40).div_ceil(widest));
        out += &format!(
            "  [{:.2}, {:.2})  {n:>6}  {bar}\n",
            k as f64 * bin,
            (k + 1) as f64 * bin
        );
    }
    out += &format!("pairs closer than {alpha}: {below}\n");
    Ok(out)
}

fn inspect(path: PathBuf, alpha: f64, bin: f64) -> Result<()> {
    let store = load_store(&path)?;
    let catalog = store.catalog();
    let count = |s| {
        (0..catalog.len() as u32)
            .map(|c| store.count(c, s))
            .sum::<usize>()
    };
    println!("{}", path.display());
    println!("  dim {}  classes {}", catalog.dim(), catalog.len());
    println!(
        "  records {}  train {}  test {}",
        store.records().len(),
        count(Split::Train),
        count(Split::Test)
    );
    let partial = store.partial_classes();
    if !partial.is_empty() {
        println!("  classes without 2 train / 1 test records: {partial:?}");
    }
    for c in 0..catalog.len().min(10) as u32 {
        println!(
            "  {c:>4}  {:<24} train {:>6} test {:>6}",
            catalog.name(c),
            store.count(c, Split::Train),
            store.count(c, Split::Test)
        );
    }
    if catalog.len() > 10 {
        println!("  ... {} more", catalog.len() - 10);
    }
    print!("{}", histogram(&store, alpha, bin)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => synth(args),
        Command::Run(args) => run_cmd(args),
        Command::Inspect { path, alpha, bin } => inspect(path, alpha, bin),
    }
}
