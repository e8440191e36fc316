use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use poal::data::{gen_synthetic, serialize_libsvm, SyntheticSpec};
use poal::harness::{read_summary, run_experiment, write_report, ExperimentConfig, SummaryView, SUMMARY_FILE};

#[derive(Parser)]
#[command(name = "poal", version, about = "Active learning with out-of-distribution pools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-arc dataset as LIBSVM text.
    GenSynthetic {
        /// TOML file with generator parameters; missing keys take defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary of one report directory or of every report below it.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn gen(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: SyntheticSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let ds = gen_synthetic(&spec)?;
    fs::write(out, serialize_libsvm(&ds)).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} rows ({} OOD) to {}", ds.len(), ds.ood_count(), out.display());
    Ok(())
}

fn run(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let result = run_experiment(&cfg)?;
    write_report(&result, out)?;
    let s = &result.summary;
    println!(
        "{}: AUBC {:.4} +/- {:.4} over {} trials",
        s.strategy, s.aubc_mean, s.aubc_sd, s.trials
    );
    Ok(())
}

fn collect(dir: &Path, found: &mut Vec<(PathBuf, SummaryView)>) -> Result<()> {
    if dir.join(SUMMARY_FILE).is_file() {
        found.push((dir.to_path_buf(), read_summary(dir)?));
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        collect(&child, found)?;
    }
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    let mut found = Vec::new();
    collect(input, &mut found)?;
    if found.is_empty() {
        bail!("no {SUMMARY_FILE} under {}", input.display());
    }
    println!("{:<28} {:>6} {:>10} {:>10}  directory", "strategy", "trials", "aubc_mean", "aubc_sd");
    for (dir, s) in found {
        let shown = dir.strip_prefix(input).unwrap_or(&dir);
        let shown = if shown.as_os_str().is_empty() { Path::new(".") } else { shown };
        println!(
            "{:<28} {:>6} {:>10.4} {:>10.4}  {}",
            s.strategy,
            s.trials,
            s.aubc_mean,
            s.aubc_sd,
            shown.display()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::GenSynthetic { spec, out } => gen(&spec, &out),
        Command::Run { config, out } => run(&config, &out),
        Command::Report { input } => report(&input),
    }
}
