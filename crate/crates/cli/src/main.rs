use std::path::PathBuf;
use std::process::ExitCode;

use ccad_pipeline::{pipeline, PipelineError, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ccad",
    version,
    about = "Diffusion-based anomaly detection with a compressed feature bank"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set max_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set variant=<f|c|v>`.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Shorthand for `--set data_root=<dir>`.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Shorthand for `--set work_dir=<dir>`.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic defect dataset under `data_root`.
    SynthData(Common),
    /// Extract training features and write the coarse bank.
    BuildBank(Common),
    /// Train the denoiser (needs the bank).
    Train(Common),
    /// Reconstruct the test images.
    Reconstruct(Common),
    /// Anomaly maps and image scores from stored reconstructions.
    Score(Common),
    /// Reconstruct, score and write the metric report.
    Evaluate(Common),
    /// Render the stored report as Markdown.
    Report(Common),
}

fn load_config(c: &Common) -> Result<RunConfig, PipelineError> {
    let base = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut sets = Vec::new();
    if let Some(v) = &c.variant {
        sets.push(format!("variant={}", v.to_lowercase()));
    }
    if let Some(d) = &c.data_root {
        sets.push(format!("data_root={}", serde_json::to_string(d)?));
    }
    if let Some(d) = &c.work_dir {
        sets.push(format!("work_dir={}", serde_json::to_string(d)?));
    }
    sets.extend(c.set.iter().cloned());
    base.with_overrides(&sets)
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::SynthData(c) => {
            let m = pipeline::synth_data(&load_config(&c)?)?;
            for cat in &m.categories {
                println!(
                    "{}: {} train, {} test images",
                    cat.name,
                    cat.train.len(),
                    cat.test.len()
                );
            }
        }
        Command::BuildBank(c) => {
            let cfg = load_config(&c)?;
            let b = pipeline::build_bank(&cfg)?;
            println!("bank: {} rows x {} -> {}", b.xi, b.d, cfg.paths().bank.display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let log = pipeline::train(&cfg)?;
            let n = 50.min(log.losses.len());
            if let Some((a, b)) = log.loss_ends(n) {
                println!(
                    "trained {} steps; mean loss first {n}: {a:.4}, last {n}: {b:.4}",
                    log.steps
                );
            }
        }
        Command::Reconstruct(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::reconstruct(&cfg)?;
            println!(
                "reconstructed {} images -> {}",
                r.dim(0)?,
                cfg.paths().reconstructions.display()
            );
        }
        Command::Score(c) => {
            for s in pipeline::score(&load_config(&c)?)? {
                println!("{}\t{}\t{:.6}", s.name, u8::from(s.anomalous), s.score);
            }
        }
        Command::Evaluate(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::evaluate(&cfg)?;
            let m = &r.metrics;
            println!(
                "image AUROC {:.4}  pixel AUROC {:.4}  -> {}",
                m.class_auroc,
                m.pixel_auroc,
                cfg.paths().report.display()
            );
        }
        Command::Report(c) => print!("{}", pipeline::report(&load_config(&c)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
