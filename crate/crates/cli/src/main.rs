//! `gates` — train, evaluate, prune, and profile channel-gated CNNs.
//!
//! Exit codes: 0 success, 1 validation failure (bad arguments, configs,
//! or input files), 2 runtime failure (training/evaluation aborted,
//! equivalence check failed).

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use gates_core::checkpoint::load_gated;
use gates_core::config::{DatasetConfig, TrainConfig};
use gates_core::data;
use gates_core::infer::{Combine, InferenceStrategy, DEFAULT_TAU};
use gates_core::losses::LossKind;
use gates_core::network::{GateKind, Granularity};
use gates_core::prune::{export_pruned_network, save_pruned, verify_pruned_equivalence, DEFAULT_VERIFY_TOL};
use gates_core::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "gates", version, about = "Channel gating for small CNNs: training, inference strategies, pruning, FLOPs accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated network from a JSON config file.
    Train {
        /// Path to the JSON training config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's evaluation split.
    Eval {
        /// Path to a gated-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset descriptor: inline JSON or a path to a JSON file.
        #[arg(long)]
        data: String,
        /// How gates behave at inference time.
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Gate-open threshold for the threshold strategy.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f32,
        /// Number of stochastic passes for the ensemble strategy.
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Seed for stochastic strategies.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation batch size.
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Export a deterministic pruned network and verify it against the
    /// thresholded original.
    Prune {
        /// Path to a gated-model checkpoint (data-independent gates).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep channels whose gate probability exceeds tau.
        #[arg(long)]
        tau: f32,
        /// Number of random inputs for the equivalence check.
        #[arg(long, default_value_t = 100)]
        verify: usize,
        /// Where to write the pruned checkpoint (default: pruned.ckpt
        /// next to the input checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-layer FLOPs table as CSV on stdout.
    Report {
        /// Path to a gated-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the 2x2 grid {layer, channel} x {batch, per-gate} from one
    /// base config and emit a comparison CSV.
    Ablation {
        /// Path to the base JSON training config.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the four runs and comparison.csv (default: the
        /// base config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Strategy {
    /// Sample gates stochastically, one pass.
    Stochastic,
    /// Open a gate iff its probability exceeds tau.
    Threshold,
    /// Run the full network.
    AllOn,
    /// Average logits over k stochastic passes.
    Ensemble,
}

/// Failures carry the exit code distinction: bad user input vs a run
/// that started and went wrong.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

fn validation(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = cap_threads() {
        eprintln!("error: {}", f.message());
        return ExitCode::from(f.code());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// GATES_THREADS caps the rayon pool (data-parallel convolutions).
fn cap_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("GATES_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| Failure::Validation(format!("GATES_THREADS must be a positive integer, got '{raw}'")))?;
    if n == 0 {
        return Err(Failure::Validation("GATES_THREADS must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("failed to size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Eval { checkpoint, data, strategy, tau, k, seed, batch_size } => {
            cmd_eval(&checkpoint, &data, strategy, tau, k, seed, batch_size)
        }
        Command::Prune { checkpoint, tau, verify, out } => cmd_prune(&checkpoint, tau, verify, out),
        Command::Report { checkpoint } => cmd_report(&checkpoint),
        Command::Ablation { config, out } => cmd_ablation(&config, out),
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::load(path).map_err(validation)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate().map_err(validation)?;
    Ok(cfg)
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config, seed, out)?;
    let outcome = train(&cfg).map_err(runtime)?;
    let line = serde_json::json!({
        "out_dir": cfg.out_dir,
        "final_checkpoint": outcome.final_checkpoint,
        "best_checkpoint": outcome.best_checkpoint,
        "summary": outcome.summary,
    });
    println!("{line}");
    Ok(())
}

/// A dataset descriptor is inline JSON when it parses as such, else a
/// path to a JSON file.
fn load_dataset_arg(desc: &str) -> Result<(data::Dataset, data::Dataset), Failure> {
    let parsed: Result<DatasetConfig, _> = serde_json::from_str(desc);
    let cfg = match parsed {
        Ok(cfg) => cfg,
        Err(inline_err) => {
            let path = Path::new(desc);
            if !path.exists() {
                return Err(Failure::Validation(format!(
                    "--data is neither inline JSON ({inline_err}) nor an existing file: {desc}"
                )));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Validation(format!("reading {desc}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("parsing {desc}: {e}")))?
        }
    };
    data::load(&cfg).map_err(validation)
}

fn cmd_eval(
    checkpoint: &Path,
    desc: &str,
    strategy: Strategy,
    tau: f32,
    k: usize,
    seed: u64,
    batch_size: usize,
) -> Result<(), Failure> {
    let (net, mut store) = load_gated(checkpoint).map_err(validation)?;
    let (_, eval_split) = load_dataset_arg(desc)?;
    let strategy = match strategy {
        Strategy::Stochastic => InferenceStrategy::Stochastic { seed },
        Strategy::Threshold => InferenceStrategy::Threshold { tau },
        Strategy::AllOn => InferenceStrategy::AllOn,
        Strategy::Ensemble => InferenceStrategy::Ensemble { k, combine: Combine::MeanLogits, seed },
    };
    let metrics = evaluate(&net, &mut store, &eval_split, &strategy, batch_size, 0).map_err(runtime)?;
    let max_flops = net.flops.max_flops();
    let line = serde_json::json!({
        "samples": eval_split.len(),
        "top1": metrics.top1,
        "mean_flops": metrics.mean_flops,
        "max_flops": max_flops,
        "flops_ratio": metrics.mean_flops / max_flops as f64,
    });
    println!("{line}");
    Ok(())
}

fn cmd_prune(checkpoint: &Path, tau: f32, verify: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
        return Err(Failure::Validation(format!("--tau must be in [0, 1], got {tau}")));
    }
    if verify == 0 {
        return Err(Failure::Validation("--verify must be >= 1".into()));
    }
    let (net, mut store) = load_gated(checkpoint).map_err(validation)?;
    let pruned = export_pruned_network(&net, &store, tau).map_err(runtime)?;
    let report = verify_pruned_equivalence(&net, &mut store, &pruned, tau, verify, DEFAULT_VERIFY_TOL, 0)
        .map_err(runtime)?;
    let out_path = out.unwrap_or_else(|| checkpoint.with_file_name("pruned.ckpt"));
    save_pruned(&out_path, &pruned).map_err(runtime)?;
    let line = serde_json::json!({
        "out": out_path,
        "tau": tau,
        "original_max_flops": net.flops.max_flops(),
        "pruned_max_flops": pruned.flops.max_flops(),
        "flops_ratio": pruned.flops.max_flops() as f64 / net.flops.max_flops() as f64,
        "verify_inputs": report.inputs_checked,
        "max_abs_diff": report.max_abs_diff,
        "tolerance": report.tolerance,
        "pass": report.pass,
    });
    println!("{line}");
    if !report.pass {
        return Err(Failure::Runtime(format!(
            "pruned network diverges from the thresholded original: max |diff| {} > {}",
            report.max_abs_diff, report.tolerance
        )));
    }
    Ok(())
}

fn cmd_report(checkpoint: &Path) -> Result<(), Failure> {
    let (net, store) = load_gated(checkpoint).map_err(validation)?;
    // Expected cost uses the mean gate probability per site for
    // data-independent gates. Data-dependent probabilities are functions
    // of the input, so without data the static maximum is reported.
    let site_p: Vec<f64> = match net.kind() {
        GateKind::Independent => {
            let p = net.gate_probabilities(&store).map_err(runtime)?;
            net.registry
                .sites
                .iter()
                .map(|s| {
                    let slice = &p[s.gates.clone()];
                    slice.iter().map(|&v| v as f64).sum::<f64>() / slice.len() as f64
                })
                .collect()
        }
        GateKind::Dependent | GateKind::None => vec![1.0; net.registry.sites.len()],
    };
    let expected = net.flops.expected_layer_flops(&site_p).map_err(runtime)?;

    println!("layer_id,cin,cout,kh,kw,hout,wout,max_flops,expected_flops");
    for (conv, exp) in net.flops.convs.iter().zip(&expected) {
        println!(
            "{},{},{},{},{},{},{},{},{}",
            conv.layer_id, conv.cin, conv.cout, conv.kh, conv.kw, conv.hout, conv.wout,
            conv.max_cost(),
            exp
        );
    }
    let floor = net.flops.ungated_floor;
    let expected_total = floor as f64 + expected.iter().sum::<f64>();
    println!("ungated_floor,,,,,,,{floor},{floor}");
    println!("total,,,,,,,{},{}", net.flops.max_flops(), expected_total);
    Ok(())
}

fn cmd_ablation(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let base = load_config(config, None, None)?;
    let root = out.unwrap_or_else(|| base.out_dir.clone());
    let grid = [
        (Granularity::Layer, LossKind::Batch),
        (Granularity::Layer, LossKind::Aig),
        (Granularity::Channel, LossKind::Batch),
        (Granularity::Channel, LossKind::Aig),
    ];
    let mut rows = Vec::new();
    for (granularity, loss_kind) in grid {
        let gran_name = match granularity {
            Granularity::Layer => "layer",
            Granularity::Channel => "channel",
        };
        let loss_name = match loss_kind {
            LossKind::Batch => "batch",
            LossKind::Flops => "flops",
            LossKind::Aig => "aig",
        };
        let mut cfg = base.clone();
        cfg.gate_granularity = granularity;
        cfg.loss_kind = loss_kind;
        // Per-gate targets are re-derived per cell: a layer-gated run has
        // far fewer gates than a channel-gated one.
        cfg.aig_targets = None;
        cfg.out_dir = root.join(format!("{gran_name}_{loss_name}"));
        cfg.validate().map_err(validation)?;
        eprintln!("ablation: training {gran_name} x {loss_name}");
        let outcome = train(&cfg).map_err(runtime)?;
        rows.push((gran_name, loss_name, outcome.summary));
    }

    std::fs::create_dir_all(&root).map_err(|e| runtime(format!("creating {}: {e}", root.display())))?;
    let csv_path = root.join("comparison.csv");
    let mut csv = String::from("granularity,loss_kind,accuracy,flops_ratio,mean_activation,fraction_polarized\n");
    for (gran, loss, s) in &rows {
        csv.push_str(&format!(
            "{gran},{loss},{},{},{},{}\n",
            s.final_accuracy, s.flops_ratio, s.mean_activation, s.fraction_polarized
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| runtime(format!("writing {}: {e}", csv_path.display())))?;
    let line = serde_json::json!({ "comparison": csv_path, "runs": rows.len() });
    println!("{line}");
    Ok(())
}
