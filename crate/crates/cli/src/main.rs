use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hrpinn::experiment::{
    compare_models, generate_data, run_experiment, write_report, ExperimentConfig, ExperimentReport, REPORT_FILE,
};

/// Overrides the output directory when `--out` is absent.
const OUTPUT_ENV: &str = "HRPINN_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "hrpinn", version, about = "Train and compare hybrid recurrent physics-informed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write reference trajectories (or battery discharges) as CSV.
    Generate(Common),
    /// Train and evaluate one model on one seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Model label to run, e.g. PHRPINN or PHRPINN-fast. Defaults to the first model.
        #[arg(long)]
        model: Option<String>,
    },
    /// Run every (model, seed) pair in the config.
    Sweep(Common),
    /// Recompute aggregates and rankings from an existing report.
    Report {
        /// Directory holding report.csv.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the sweep; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        if let Some(env) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(env);
        }
        if let Some(dir) = &config.output_dir {
            return dir.clone();
        }
        let stem = config.name.clone().unwrap_or_else(|| config.system_label());
        Path::new("runs").join(stem)
    }
}

fn select_model(config: &mut ExperimentConfig, wanted: Option<&str>) -> Result<()> {
    let Some(wanted) = wanted else {
        config.models.truncate(1);
        return Ok(());
    };
    let pos = config.models.iter().position(|m| {
        let full = format!("{}-{}", m.label(), m.projection_setting().name());
        m.label().eq_ignore_ascii_case(wanted) || full.eq_ignore_ascii_case(wanted)
    });
    match pos {
        Some(i) => {
            config.models = vec![config.models.swap_remove(i)];
            Ok(())
        }
        None => {
            let known: Vec<String> = config.models.iter().map(|m| m.label()).collect();
            bail!("no model {wanted:?} in config (have {})", known.join(", "))
        }
    }
}

fn print_summary(report: &ExperimentReport) {
    println!("{:<20} {:<8} {:>5} {:>4} {:>12} {:>12} {:>12}", "model", "proj", "runs", "div", "mae", "mean_viol", "final_loss");
    for a in report.aggregates() {
        println!(
            "{:<20} {:<8} {:>5} {:>4} {:>12.4e} {:>12.4e} {:>12.4e}",
            a.model, a.projection, a.runs, a.diverged, a.mae.0, a.mean_viol.0, a.final_loss.0
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let config = common.load()?;
            let dir = common.out_dir(&config);
            for path in generate_data(&config, &dir)? {
                println!("{}", path.display());
            }
        }
        Command::Train { common, model } => {
            let mut config = common.load()?;
            config.seeds.truncate(1);
            if config.system.is_some() {
                select_model(&mut config, model.as_deref())?;
            } else if model.is_some() {
                bail!("--model does not apply to battery configs");
            }
            let dir = common.out_dir(&config);
            let report = run_experiment(&config, Some(&dir), common.threads)?;
            print!("{}", report.to_csv());
        }
        Command::Sweep(common) => {
            let config = common.load()?;
            let dir = common.out_dir(&config);
            let report = run_experiment(&config, Some(&dir), common.threads)?;
            print_summary(&report);
            eprintln!("wrote {}", dir.join(REPORT_FILE).display());
        }
        Command::Report { dir } => {
            let path = dir.join(REPORT_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report = ExperimentReport::from_csv(&text)?;
            write_report(&dir, &report)?;
            print_summary(&report);
            if report.models().len() >= 2 {
                let cmp = compare_models(&report);
                for r in &cmp.rankings {
                    if let Some(best) = cmp.best(r.metric) {
                        println!("best {:<10} {best}", r.metric);
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
