use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modnet::composite::Topology;
use modnet::experiment::{
    base_checkpoint_path, cmd_resume, cmd_train, cmd_train_module, cmd_transfer_compare, cmd_viz, load_datasets, plot_svg,
    ExperimentConfig, LearningCurve,
};
use modnet::Error;

#[derive(Parser)]
#[command(name = "modnet", version, about = "Compose frozen pre-trained networks with trainable modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides the config's `out`.
    #[arg(long, env = "MODNET_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the base network on the source task.
    Train {
        #[command(flatten)]
        common: Common,
        /// Seeds to train; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Train the configured module beside the frozen pre-trained base
        /// instead of the base itself.
        #[arg(long)]
        module: bool,
    },
    /// Continue base training from a checkpoint.
    Resume {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare transfer topologies over per-class data sizes.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long = "per-class", value_delimiter = ',')]
        per_class: Vec<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        topology: Vec<Topology>,
    },
    /// Render filter galleries by gradient ascent on the input.
    Viz {
        #[command(flatten)]
        common: Common,
        /// Network to visualize; defaults to the module checkpoint of
        /// `--seed` when one exists, else the base checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw learning curves from a CSV as SVG.
    Plot {
        /// curves.csv written by `transfer`.
        #[arg(long)]
        csv: PathBuf,
        /// Defaults to the CSV path with an `.svg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::BadMagic { .. }
        | Error::Truncated(_)
        | Error::CountMismatch { .. }
        | Error::InsufficientClass { .. }
        | Error::Imbalance(_)
        | Error::VersionMismatch { .. }
        | Error::Checksum
        | Error::Corrupt(_)
        | Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::Shape(_) | Error::Contract(_) => 1,
    }
}

fn load(common: &Common) -> modnet::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> modnet::Result<()> {
    match cli.command {
        Command::Train { common, seed, module } => {
            let (cfg, out) = load(&common)?;
            let data = load_datasets(&cfg)?;
            let seeds = if seed.is_empty() { cfg.seeds.clone() } else { seed };
            for s in seeds {
                let r = if module {
                    cmd_train_module(&cfg, &data, s, &out)?
                } else {
                    cmd_train(&cfg, &data, s, &out)?
                };
                println!(
                    "seed {s}: step {} test accuracy {:.4} -> {}",
                    r.step,
                    r.test_accuracy,
                    r.checkpoint.display()
                );
            }
        }
        Command::Resume { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let data = load_datasets(&cfg)?;
            let r = cmd_resume(&cfg, &data, &checkpoint, &out)?;
            println!(
                "seed {}: step {} test accuracy {:.4} -> {}",
                r.seed,
                r.step,
                r.test_accuracy,
                r.checkpoint.display()
            );
        }
        Command::Transfer {
            common,
            seed,
            per_class,
            repeats,
            topology,
        } => {
            let (mut cfg, out) = load(&common)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if !per_class.is_empty() {
                cfg.transfer.per_class = per_class;
            }
            if let Some(r) = repeats {
                cfg.transfer.repeats = r;
            }
            if !topology.is_empty() {
                cfg.transfer.topologies = topology;
            }
            cfg.validate()?;
            let data = load_datasets(&cfg)?;
            let result = cmd_transfer_compare(&cfg, &data, &out)?;
            println!("{:<12} {:>9} {:>10}", "topology", "per_class", "final acc");
            for ((t, pc), acc) in result.curve.mean_finals() {
                println!("{:<12} {pc:>9} {acc:>10.4}", t.as_str());
            }
            println!("curves: {}", out.join("curves.csv").display());
        }
        Command::Viz {
            common,
            checkpoint,
            seed,
        } => {
            let (cfg, out) = load(&common)?;
            let ck = checkpoint.unwrap_or_else(|| {
                let module = out.join(format!("module_seed{seed}.ckpt"));
                if module.exists() {
                    module
                } else {
                    base_checkpoint_path(&out, seed)
                }
            });
            let dir = out.join("viz");
            let entries = cmd_viz(&cfg, &ck, seed, &dir)?;
            for e in &entries {
                println!(
                    "{} layer {} filter {}: {} steps, objective {:.4} -> {:.4}",
                    e.module, e.layer, e.filter, e.steps, e.objective_start, e.objective_end
                );
            }
            println!("{} images in {}", entries.len(), dir.display());
        }
        Command::Plot { csv, out } => {
            let curve = LearningCurve::load(&csv)?;
            curve.validate()?;
            let out = out.unwrap_or_else(|| csv.with_extension("svg"));
            modnet::files::write_atomic(&out, plot_svg(&curve).as_bytes())?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
