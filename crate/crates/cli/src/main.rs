use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qcpr::scenario::{builtin, builtin_scenarios, run_scenario, ExperimentConfig, RunManifest};

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

/// Twin-beam noise-reduced phase retrieval: scenario runner.
#[derive(Parser)]
#[command(name = "qcpr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in scenarios.
    List,
    /// Print the JSON config of a built-in scenario.
    Show { name: String },
    /// Run a scenario from a JSON config file or a built-in name.
    Run {
        /// Path to a config file, or the name of a built-in scenario.
        config: String,
        /// Output directory (default: the config's `run.output_dir`, else
        /// `runs/<name>`).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Master seed, overriding `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Print nothing on success.
        #[arg(long)]
        quiet: bool,
    },
}

fn load(target: &str) -> qcpr::Result<ExperimentConfig> {
    let path = Path::new(target);
    if path.exists() {
        ExperimentConfig::load(path)
    } else {
        builtin(target)
    }
}

fn report(manifest: &RunManifest, dir: &Path) {
    println!("{}: {} ({} files in {})", manifest.name, manifest.status, manifest.files.len(), dir.display());
    if let Some(csv) = manifest.file("results.csv") {
        println!("results.csv sha256 {}", csv.sha256);
    }
    println!(
        "compute {:.1} s, total {:.1} s on {} threads",
        manifest.timings.compute_s, manifest.timings.total_s, manifest.threads
    );
}

fn run(config: String, output_dir: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>, quiet: bool) -> ExitCode {
    let mut config = match load(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Some(seed) = seed {
        config.run.seed = seed;
    }
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(CONFIG_ERROR);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(RUNTIME_ERROR);
        }
    }
    let dir = output_dir
        .or_else(|| config.run.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&config.name));
    match run_scenario(&config, &dir) {
        Ok(manifest) => {
            if !quiet {
                report(&manifest, &dir);
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            if failure.manifest.is_some() {
                eprintln!("partial manifest written to {}", dir.join("manifest.json").display());
            }
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for c in builtin_scenarios() {
                println!("{:<22} {}", c.name, c.description);
            }
            ExitCode::SUCCESS
        }
        Command::Show { name } => match builtin(&name) {
            Ok(c) => {
                println!("{}", c.to_json());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(CONFIG_ERROR)
            }
        },
        Command::Run { config, output_dir, seed, threads, quiet } => run(config, output_dir, seed, threads, quiet),
    }
}
