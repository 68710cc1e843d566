use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mtadapt::adapter::{param_count, AdapterConfig, AdapterVariant};
use mtadapt::experiment::{
    adapter_params, eval_checkpoint, expected_adapter_params, merge_checkpoint, prepare_model, run_experiment,
    run_sweep, threads_from_env,
};
use mtadapt::gradcheck::{default_backward, run_suite, TOLERANCE};
use mtadapt::report::render_table;
use mtadapt::tasks::TaskKind;
use mtadapt::{Error, ExperimentConfig};

/// Train, evaluate and merge low-rank adapters on a small transformer.
#[derive(Parser)]
#[command(name = "mtadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write checkpoints, traces and a report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Evaluate a checkpoint on the test split of its task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on another task kind (bracket or pair).
        #[arg(long)]
        task: Option<String>,
    },
    /// Fold adapters into the base weights and write a plain checkpoint.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        /// Variants to check; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variant: Option<Vec<String>>,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train over a grid of ranks and variants.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<usize>,
        /// Variants to sweep; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variant: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Count adapter parameters for a config, or for a single d × k layer.
    ParamCount {
        #[arg(long, conflicts_with_all = ["variant", "rank", "d", "k"])]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn parse_variants(names: Option<Vec<String>>) -> Result<Vec<AdapterVariant>> {
    match names {
        None => Ok(AdapterVariant::ALL.to_vec()),
        Some(names) => names.iter().map(|n| Ok(n.parse::<AdapterVariant>()?)).collect(),
    }
}

fn load_config(path: &Path, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out, seeds } => {
            let cfg = load_config(&config, seeds)?;
            let outcome = run_experiment(&cfg, &out, threads_from_env())?;
            for (seed, m) in &outcome.per_seed {
                println!("seed {seed}: mcc {:.4} accuracy {:.4}", m.mcc, m.accuracy);
            }
            print!("{}", render_table(std::slice::from_ref(&outcome.row)));
            eprintln!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, task } => {
            let kind = match task.as_deref() {
                None => None,
                Some("bracket") => Some(TaskKind::Bracket),
                Some("pair") => Some(TaskKind::Pair),
                Some(other) => return Err(Error::Config(format!("unknown task {other:?}")).into()),
            };
            let m = eval_checkpoint(&checkpoint, kind)?;
            println!("mcc {:.6} accuracy {:.6} n {}", m.mcc, m.accuracy, m.n);
        }
        Command::Merge { checkpoint, out } => {
            let model = merge_checkpoint(&checkpoint, &out)?;
            println!("merged {} tensors into {}", model.named_tensors().len(), out.display());
        }
        Command::GradCheck { variant, cases, seed } => {
            let variants = parse_variants(variant)?;
            let rows = run_suite(&variants, cases, seed, &default_backward)?;
            let mut ok = true;
            for r in &rows {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<16} {:<24} {:.3e} {verdict}", r.component, r.tensor, r.max_rel_err);
                ok &= r.passed();
            }
            println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "FAILED" });
            return Ok(ok);
        }
        Command::Sweep {
            config,
            ranks,
            variant,
            out,
            seeds,
        } => {
            let cfg = load_config(&config, seeds)?;
            let variants = parse_variants(variant)?;
            let cells = run_sweep(&cfg, &variants, &ranks, Some(&out), threads_from_env())?;
            let rows: Vec<_> = cells.iter().map(|c| c.row.clone()).collect();
            print!("{}", render_table(&rows));
            let failed = cells.iter().filter(|c| c.failed()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", cells.len());
                return Ok(false);
            }
        }
        Command::ParamCount {
            config,
            variant,
            rank,
            d,
            k,
        } => {
            if let Some(path) = config {
                let cfg = load_config(&path, None)?;
                let model = prepare_model(&cfg, cfg.seeds[0])?;
                let trainable = model.trainable_params();
                let total = model.total_params();
                println!("adapter params   {}", adapter_params(&model));
                println!("formula          {}", expected_adapter_params(&cfg)?);
                println!("trainable params {trainable}");
                println!("total params     {total}");
                println!("trainable share  {:.4}%", 100.0 * trainable as f64 / total as f64);
            } else {
                let (Some(v), Some(r), Some(d), Some(k)) = (variant, rank, d, k) else {
                    bail!(Error::Config("give --config, or all of --variant --rank --d --k".into()));
                };
                let cfg = AdapterConfig::new(v.parse()?, r, 1.0);
                cfg.validate_for(d, k)?;
                println!("{}", param_count(&cfg, d, k));
            }
        }
    }
    Ok(true)
}

/// 2: invalid configuration, 3: numerical abort, 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) | Some(Error::NonFinite(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
