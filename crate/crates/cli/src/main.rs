use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prq_core::checkpoint::Checkpoint;
use prq_core::data::histogram;
use prq_core::metrics::{
    builtin_arch, compression_report, render_table, ArchDescriptor, CompressionPolicy,
};
use prq_core::pipelines::{evaluate, run_pipeline, NoObserver, Pipeline, TrainConfig};
use prq_core::quant::{build_level_set, levels_csv, QuantConfig};
use prq_core::report::{epochs_csv, RunReport};
use prq_core::shift::compare_all_pairs;

#[derive(Parser)]
#[command(
    name = "prq",
    version,
    about = "Filter pruning and APoT quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-precision baseline training.
    Train(RunArgs),
    /// Quantized training with per-epoch soft filter pruning.
    Spq(RunArgs),
    /// Staged permanent pruning, then quantization-aware training.
    Ppq(RunArgs),
    /// Accuracy of a checkpoint on the configured validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Run the forward pass through the configured quantizers.
        #[arg(long)]
        quantized: bool,
    },
    /// Print an APoT level set as CSV.
    Levels {
        #[arg(long)]
        bits: u32,
        #[arg(long, default_value_t = 2)]
        k: u32,
        #[arg(long)]
        signed: bool,
        #[arg(long, default_value_t = 1.0)]
        alpha: f32,
    },
    /// Model size and BOPs of an architecture, baseline against a compression policy.
    Metrics {
        /// Builtin architecture name.
        #[arg(long, conflicts_with = "arch_file")]
        arch: Option<String>,
        /// TOML architecture descriptor.
        #[arg(long)]
        arch_file: Option<PathBuf>,
        /// TOML compression policy (default: 30% conv pruning, 4-bit, first/last 8-bit).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Exhaustively check shift-and-add products against exact multiplication.
    VerifyShift {
        #[arg(long)]
        b: u32,
        #[arg(long, default_value_t = 2)]
        k: u32,
        /// Use a signed weight level set.
        #[arg(long)]
        signed_weights: bool,
        #[arg(long, default_value_t = 1.0)]
        weight_alpha: f32,
        #[arg(long, default_value_t = 1.0)]
        act_alpha: f32,
    },
    /// Histogram of one layer's full-precision weights as CSV.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for checkpoint.pqck, report.json and epochs.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(pipeline: Pipeline, args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (net, train, outcome) = run_pipeline(pipeline, &cfg, &mut NoObserver)?;
    let report = RunReport::build(
        pipeline,
        &cfg,
        &net,
        &outcome.records,
        train.normalization,
        train.image_size(),
    )?;
    fs::create_dir_all(&args.out)?;
    outcome.checkpoint.save(&args.out.join("checkpoint.pqck"))?;
    fs::write(args.out.join("report.json"), report.to_json()?)?;
    fs::write(args.out.join("epochs.csv"), epochs_csv(&outcome.records))?;
    if let Some(last) = outcome.records.last() {
        println!(
            "{}: {} epochs, train acc {:.4}, eval acc {:.4}, pruned {:.3}",
            pipeline.name(),
            outcome.records.len(),
            last.train_acc,
            last.eval_acc,
            last.pruned_fraction
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn metrics(
    arch: Option<String>,
    arch_file: Option<PathBuf>,
    policy: Option<PathBuf>,
    json: bool,
) -> Result<()> {
    let arch = match (arch, arch_file) {
        (Some(name), None) => builtin_arch(&name)?,
        (None, Some(path)) => ArchDescriptor::from_toml(&fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        _ => bail!("give exactly one of --arch or --arch-file"),
    };
    let policy = match policy {
        Some(path) => CompressionPolicy::from_toml(&fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => CompressionPolicy::compressed(),
    };
    let report = compression_report(&arch, &CompressionPolicy::baseline(), &policy)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render_table(&report));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run(Pipeline::Baseline, &a),
        Command::Spq(a) => run(Pipeline::Spq, &a),
        Command::Ppq(a) => run(Pipeline::Ppq, &a),
        Command::Eval {
            checkpoint,
            config,
            quantized,
        } => (|| {
            let cfg = load_config(&config)?;
            let mut net = Checkpoint::load(&checkpoint)?.to_network()?;
            if quantized {
                net.set_quant(
                    cfg.quant.weight_config(),
                    cfg.quant.act_config(),
                    cfg.first_last_bits,
                )?;
            }
            let (_, val) = cfg.data.load()?;
            let acc = evaluate(&mut net, &val, quantized)?;
            println!("accuracy {acc:.4} on {} samples", val.len());
            Ok(())
        })(),
        Command::Levels {
            bits,
            k,
            signed,
            alpha,
        } => (|| {
            let cfg = QuantConfig {
                signed,
                ..QuantConfig::unsigned(bits, k)
            };
            print!("{}", levels_csv(&build_level_set(&cfg, alpha)?));
            Ok(())
        })(),
        Command::Metrics {
            arch,
            arch_file,
            policy,
            json,
        } => metrics(arch, arch_file, policy, json),
        Command::VerifyShift {
            b,
            k,
            signed_weights,
            weight_alpha,
            act_alpha,
        } => (|| {
            let wcfg = QuantConfig {
                signed: signed_weights,
                ..QuantConfig::unsigned(b, k)
            };
            let weights = build_level_set(&wcfg, weight_alpha)?;
            let acts = build_level_set(&QuantConfig::unsigned(b, k), act_alpha)?;
            let report = compare_all_pairs(&weights, acts.levels())?;
            print!("{}", report.render());
            if report.mismatches > 0 {
                bail!(
                    "{} mismatching pairs, first {:?}",
                    report.mismatches,
                    report.first_mismatch
                );
            }
            Ok(())
        })(),
        Command::Hist {
            checkpoint,
            layer,
            bins,
            out,
        } => (|| {
            let ck = Checkpoint::load(&checkpoint)?;
            let h = histogram(ck.layer_weights(&layer)?.data(), bins)?;
            match out {
                Some(path) => fs::write(path, h.to_csv())?,
                None => print!("{}", h.to_csv()),
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
