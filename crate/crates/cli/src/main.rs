use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fedsa_cli::bench::{self, Preset, BENCH_SEEDS};
use fedsa_cli::run::{self, RunOptions};
use fedsa_core::fed::Execution;
use fedsa_core::gradcheck::GradcheckOptions;

#[derive(Parser)]
#[command(name = "fedsa", version, about = "Federated learning with semantic anchors: experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment(s) described by a TOML config and write a metrics CSV.
    Run {
        config: PathBuf,
        /// Run only this seed instead of the config's `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics file (default: `output_path` from the config, else <dir>/<config stem>.csv).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override a config key, e.g. `--override lambda2=1.0`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Train clients one after another instead of concurrently.
        #[arg(long)]
        serial: bool,
        /// Also log every protocol message as JSON lines into this directory.
        #[arg(long)]
        replay_dir: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Scale analytic gradients by this factor (detector self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Run a bundled preset over five seeds and summarize final accuracy.
    Bench {
        /// statistical, model-het or ablation
        preset: Preset,
        /// Output directory (default: $FEDSA_OUTPUT_DIR or the current directory).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        serial: bool,
    },
}

fn execution(serial: bool) -> Execution {
    if serial {
        Execution::Serial
    } else {
        Execution::Parallel
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            output,
            overrides,
            serial,
            replay_dir,
        } => {
            let opts = RunOptions {
                seed,
                output,
                overrides,
                execution: execution(serial),
                replay_dir,
            };
            for path in run::cmd_run(&config, &opts)? {
                println!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Gradcheck {
            seed,
            instances,
            inject_fault,
        } => run::cmd_gradcheck(
            GradcheckOptions {
                instances,
                seed,
                fault: inject_fault,
            },
            &mut std::io::stdout(),
        ),
        Command::Bench { preset, output, serial } => {
            let summary = bench::run_bench(preset, &BENCH_SEEDS, execution(serial))?;
            let dir = output.unwrap_or_else(run::default_output_dir);
            bench::write_bench(&summary, &dir)?;
            print!("{}", summary.render());
            println!("wrote {}", dir.join(format!("bench-{preset}.csv")).display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
