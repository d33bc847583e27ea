use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wmsn_cli::{cmd_lifetime, cmd_routes, cmd_run, cmd_validate, CliError, GlobalOpts};

/// Dual-radio sensor network simulator.
#[derive(Parser)]
#[command(name = "wmsn", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fail on the first invariant violation.
    #[arg(long, global = true)]
    strict: bool,
    /// Where `run` writes its files (default ./out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Warn about unknown scenario keys instead of rejecting them.
    #[arg(long, global = true)]
    lax_keys: bool,
    /// Run up to this many scenario files in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenarios and write metrics.json, nodes.csv, images.csv and routes.csv.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
    /// Battery lifetime of a duty-cycle profile.
    Lifetime {
        /// mAh, or "2xAA".
        #[arg(long, default_value = "2xAA")]
        capacity: String,
        /// state=fraction, repeatable. States are "mcu:soc" or active, idle, sleep, wifi_on, wifi_off.
        #[arg(long)]
        profile: Vec<String>,
        /// state=from:to:points, varies one fraction and rescales the rest.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Converge routing alone and compare every route with BFS hop counts.
    Routes { scenario: PathBuf },
    /// Parse and validate a scenario without running it.
    Validate { scenario: PathBuf },
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = cli.global;
    let opts = GlobalOpts { seed: g.seed, strict: g.strict, out_dir: g.out_dir, lax_keys: g.lax_keys, jobs: g.jobs };
    match cli.command {
        Command::Run { scenarios } => {
            let mut code = 0;
            for result in cmd_run(&scenarios, &opts) {
                match result {
                    Ok(s) => {
                        warn(&s.warnings);
                        let t = &s.metrics.totals;
                        println!(
                            "{}: {} images ({} complete), {:.6} mAh consumed -> {}",
                            s.scenario.display(),
                            t.images_triggered,
                            t.images_complete,
                            t.consumed_mah,
                            s.out_dir.display()
                        );
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        code = code.max(e.exit_code());
                    }
                }
            }
            ExitCode::from(code as u8)
        }
        Command::Lifetime { capacity, profile, sweep } => match cmd_lifetime(&capacity, &profile, sweep.as_deref()) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Routes { scenario } => match cmd_routes(&scenario, &opts) {
            Ok((table, warnings)) => {
                print!("{table}");
                warn(&warnings);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Validate { scenario } => match cmd_validate(&scenario, &opts) {
            Ok(warnings) => {
                warn(&warnings);
                println!("{}: ok", scenario.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
