use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mtan::checkpoint::Checkpoint;
use mtan::config::{default_out_root, TrainConfig};
use mtan::data::generate_sample;
use mtan::gradcheck::{run_suite, Check};
use mtan::tasks::MetricReport;
use mtan::train::{self, compare_header, compare_row, report_csv, Run};
use mtan::viz::first_block_images;

#[derive(Parser)]
#[command(name = "mtan", version, about = "Multi-task attention networks on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Run a single check, e.g. conv2d or mtan_model.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write first-block attention masks and features as PGM images.
    DumpMasks {
        #[arg(long)]
        ckpt: PathBuf,
        /// Validation sample number.
        #[arg(long)]
        sample: u64,
        #[arg(long)]
        out: PathBuf,
        /// Channels to dump per map.
        #[arg(long, default_value_t = 4)]
        channels: usize,
    },
    /// Train several configs and print a comparison table as CSV.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure the user can fix by changing the invocation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let stem = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    TrainConfig::parse(&text, default_out_root().join(stem))
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn print_report(report: &MetricReport) {
    print!("{}", report_csv(report));
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, resume } => {
            let config = read_config(&config)?;
            let outcome = match resume {
                Some(ckpt) => train::resume(&ckpt, Some(config.out_dir.clone()))?,
                None => train::train(config)?,
            };
            eprintln!(
                "trained {} steps; artifacts in {}",
                outcome.run.step_count(),
                outcome.out_dir.display()
            );
            print_report(&outcome.report);
        }
        Command::Eval { ckpt } => {
            let checkpoint =
                Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let run = Run::from_checkpoint(&checkpoint)?;
            print_report(&run.evaluate()?);
        }
        Command::Gradcheck {
            module,
            instances,
            seed,
        } => {
            let only = match module {
                Some(name) => Some(Check::from_name(&name).ok_or_else(|| {
                    let known: Vec<&str> = Check::ALL.iter().map(|c| c.name()).collect();
                    usage(format!("unknown module {name:?}; known: {}", known.join(", ")))
                })?),
                None => None,
            };
            let reports = run_suite(only, instances, instances, seed)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:<20} instances={:<3} max_rel_err={:.3e} tol={:.0e} refined={:<3} {}",
                    r.check.name(),
                    r.instances,
                    r.max_rel_err,
                    r.tolerance,
                    r.refined,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient checks exceeded tolerance");
            }
        }
        Command::DumpMasks {
            ckpt,
            sample,
            out,
            channels,
        } => {
            let checkpoint =
                Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let run = Run::from_checkpoint(&checkpoint)?;
            let val = &run.split().val;
            let index = val.start + sample;
            if index >= val.end {
                return Err(usage(format!(
                    "sample {sample} out of range; the validation split has {} samples",
                    val.end - val.start
                )));
            }
            let image = generate_sample(&run.config().scene, index)?.image;
            let images = first_block_images(run.model(), &image, channels)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (name, bytes) in &images {
                let path = out.join(name);
                fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!("wrote {} images to {}", images.len(), out.display());
        }
        Command::Compare { configs, out } => {
            let configs = configs.iter().map(|p| read_config(p)).collect::<Result<Vec<_>>>()?;
            let rows = train::compare(configs)?;
            let mut table = compare_header() + "\n";
            for row in &rows {
                table += &compare_row(row);
                table.push('\n');
            }
            print!("{table}");
            if let Some(path) = out {
                fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
