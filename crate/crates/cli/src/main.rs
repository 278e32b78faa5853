use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcwave::coarse::Scheme;
use mcwave::experiment::{load_config, run, Overrides};
use mcwave::Error;

#[derive(Parser)]
#[command(name = "mcwave", version, about = "Multicontinuum wave experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a builtin (example1..example4, uniform).
    Run {
        config: String,
        /// Number of coarse blocks per axis (H = 1/n).
        #[arg(long = "H", value_name = "n")]
        n_h: Option<usize>,
        /// Scheme to run; repeat for several (implicit, explicit, scheme1, scheme2).
        #[arg(long = "scheme", alias = "schemes", value_name = "s")]
        schemes: Vec<Scheme>,
        #[arg(long)]
        threads: Option<usize>,
        /// Use the 400x400 fine grid.
        #[arg(long)]
        full: bool,
        /// A blowup is the expected outcome: exit 0 when it happens.
        #[arg(long)]
        expect_blowup: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Unsupported(_) | Error::Io { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_NUMERIC),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run { config, n_h, schemes, threads, full, expect_blowup, out } = cli.command;
    let mut loaded = match load_config(&config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Err(e) = loaded.apply(&Overrides { n_h, schemes, threads, full, out }) {
        return fail(e);
    }
    let report = match run(&loaded.config) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let mut blown = false;
    for (scheme, at) in &report.blowups {
        match at {
            Some(n) => {
                blown = true;
                println!("{scheme}: blowup at step {n}");
            }
            None => println!("{scheme}: ok"),
        }
    }
    println!("artifacts in {}", report.dir.display());
    match (blown, expect_blowup) {
        (false, false) | (true, true) => ExitCode::SUCCESS,
        (true, false) => {
            eprintln!("error: unexpected blowup (pass --expect-blowup if intended)");
            ExitCode::from(EXIT_NUMERIC)
        }
        (false, true) => {
            eprintln!("error: --expect-blowup given but every scheme stayed bounded");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
