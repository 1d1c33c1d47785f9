use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use intertwine::config::{Check, FamilyName, ManifoldName, RunConfig, Task};
use intertwine::run::{run, write_outputs};
use intertwine::verify::builtin_test_functions;

/// Worker threads for intra-task parallelism; all cores when unset.
const WORKERS_ENV: &str = "INTERTWINE_WORKERS";

#[derive(Parser)]
#[command(
    name = "intertwine",
    version,
    about = "Certified spectral-gap bounds and inequality checks for diffusions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every task in a run configuration.
    Run {
        config: PathBuf,
        /// Output directory, overriding `output` in the configuration.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Parse and validate a configuration without running it.
    Validate { config: PathBuf },
    /// List built-in manifolds, twist families, tasks, checks and test functions.
    ListBuiltins,
}

fn configure_workers() -> Result<(), String> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn names<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| {
            serde_json::to_value(i)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn list_builtins() {
    use FamilyName as F;
    use ManifoldName as M;
    println!(
        "manifolds: {}",
        names(&[
            M::Euclidean,
            M::Circle,
            M::FlatTorus,
            M::Sphere2,
            M::HyperbolicHalfPlane,
            M::Interval,
            M::UserChart
        ])
    );
    println!(
        "twist families: {}",
        names(&[
            F::Identity,
            F::Scalar,
            F::ExpPoly,
            F::ConstantMatrix,
            F::Diagonal,
            F::Shear,
            F::UserMatrix
        ])
    );
    println!("tasks (execution order): {}", names(&Task::ORDER));
    println!("verify checks: {}", names(&Check::ALL));
    println!("test functions (1D): {}", builtin_test_functions(1).join("; "));
    println!("test functions (2D): {}", builtin_test_functions(2).join("; "));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match cli.command {
        Command::ListBuiltins => {
            list_builtins();
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match RunConfig::from_path(&config).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                println!("ok: {} task(s)", c.tasks.len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run { config, output } => {
            let cfg = match RunConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let out = match run(&cfg) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let dir = output.or_else(|| cfg.output.as_ref().map(PathBuf::from));
            match &dir {
                Some(d) => {
                    if let Err(e) = write_outputs(&out, d) {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                    eprintln!("wrote {}", d.join("report.json").display());
                }
                None => match out.report.to_json() {
                    Ok(j) => println!("{j}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                },
            }
            for t in &out.report.tasks {
                let secs = out.report.wall_clock.get(t.task.name()).copied().unwrap_or(0.0);
                match &t.error {
                    Some(e) => eprintln!("{:<10} {:?} ({secs:.2}s): {e}", t.task.name(), t.status),
                    None => eprintln!("{:<10} {:?} ({secs:.2}s)", t.task.name(), t.status),
                }
            }
            ExitCode::from(out.report.exit_code() as u8)
        }
    }
}
