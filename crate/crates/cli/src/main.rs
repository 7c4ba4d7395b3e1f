use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acenet::config::{NetworkConfig, TrainConfig};
use acenet::data::{SynthConfig, CLASS_NAMES};
use acenet::gradcheck::{parse_groups, run_suite};
use acenet::network::build_network;
use acenet::train::LOG_HEADER;
use acenet::{checkpoint, dataset, eval, inspect, metrics, train, Error, Result};
use clap::{Parser, Subcommand};

/// Toy human parsing with skeleton-guided channel affinity and
/// boundary-guided spatial affinity.
#[derive(Parser)]
#[command(name = "acenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a split of synthetic stick-figure samples.
    GenData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed_base: u64,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// all, primitives, nnops, lcm, gem or losses.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train a network and write a checkpoint plus `train.log`.
    Train {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Evaluate a checkpoint on a split and write a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle_inject: bool,
    },
    /// Dump the affinity matrices and predictions for one sample directory.
    InspectAffinity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn gen_data(root: &Path, split: &str, count: usize, seed_base: u64) -> Result<()> {
    let seeds = dataset::generate_split(root, split, count, seed_base, &SynthConfig::default())?;
    println!("wrote {} samples to {}", seeds.len(), root.join(split).display());
    Ok(())
}

fn gradcheck(module: &str, seeds: usize) -> Result<()> {
    let groups = parse_groups(module)?;
    let results = run_suite(&groups, seeds)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<11} {:<24} seeds={:<3} max_rel_err={:.3e}", r.group.to_string(), r.name, r.seeds, r.worst);
        worst = worst.max(r.worst);
    }
    if worst > 1e-4 {
        return Err(Error::Contract(format!("gradient check failed: worst relative error {worst:.3e} > 1e-4")));
    }
    println!("all {} checks within 1e-4", results.len());
    Ok(())
}

fn run_train(net_path: &Path, train_path: &Path, data: &Path, out: &Path, split: &str) -> Result<()> {
    let net_cfg = NetworkConfig::load(net_path)?;
    let train_cfg = TrainConfig::load(train_path)?;
    let net = build_network(&net_cfg)?;
    let samples = dataset::load_split(data, split)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("train.cfg"), train_cfg.render())?;
    let mut log = BufWriter::new(File::create(out.join("train.log"))?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut io_err = None;
    let outcome = train::train(&net, &train_cfg, &samples, net.init_params(train_cfg.seed), |row| {
        if let Err(e) = writeln!(log, "{row}") {
            io_err.get_or_insert(e);
        }
        if row.iter % 50 == 0 || row.iter + 1 == train_cfg.total_iters {
            println!("{row}");
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    checkpoint::save(out, &net_cfg, &outcome.params)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, split: &str, report: &Path, oracle: bool) -> Result<()> {
    let (net_cfg, params) = checkpoint::load(ckpt)?;
    let net = build_network(&net_cfg)?;
    let samples = dataset::load_split(data, split)?;
    let (m, _) = eval::evaluate(&net, &params, &samples, oracle)?;
    metrics::write_report(report, &m, &CLASS_NAMES)?;
    println!("mIoU={:.4} pixel_acc={:.4} mean_acc={:.4}", m.miou, m.pixel_acc, m.mean_acc);
    Ok(())
}

fn run_inspect(ckpt: &Path, sample: &Path, out: &Path) -> Result<()> {
    let (net_cfg, params) = checkpoint::load(ckpt)?;
    let net = build_network(&net_cfg)?;
    let s = dataset::read_sample(sample)?;
    let dump = inspect::inspect_affinity(&net, &params, &s, out)?;
    if let Some(a) = &dump.channel {
        println!("A {:?} max row deviation {:.2e}", a.shape(), inspect::stochastic_deviation(a, 1));
    }
    if let Some(g) = &dump.spatial {
        println!("G {:?} max column deviation {:.2e}", g.shape(), inspect::stochastic_deviation(g, 0));
    }
    println!("dumps written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    // usage mistakes are configuration errors (exit 1); help and version exit 0
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData { root, split, count, seed_base } => gen_data(root, split, *count, *seed_base),
        Command::Gradcheck { module, seeds } => gradcheck(module, *seeds),
        Command::Train { net, train, data, out, split } => run_train(net, train, data, out, split),
        Command::Eval { ckpt, data, split, report, oracle_inject } => {
            run_eval(ckpt, data, split, report, *oracle_inject)
        }
        Command::InspectAffinity { ckpt, sample, out } => run_inspect(ckpt, sample, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
