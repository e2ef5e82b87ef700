use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use difflocal::harness::{
    cmd_reproduce, cmd_simulate, cmd_sweep, cmd_theory, desk_profile, Figure, HarnessError,
    Overrides, RunConfiguration, TheoryModeSetting,
};

/// Diffusion learning with local updates and partial participation.
#[derive(Parser, Debug)]
#[command(name = "difflocal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; the built-in desk profile when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Expectation mode for the theory engine: auto, exact or monte-carlo.
    #[arg(long, global = true)]
    theory_mode: Option<TheoryModeSetting>,

    /// Monte-Carlo pattern samples for the theory engine.
    #[arg(long, global = true)]
    samples: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run the simulation and write trajectory.csv and summary.json.
    Simulate,
    /// Evaluate the steady-state MSD expression and write theory.json.
    Theory,
    /// Run every value of the configured [sweep] section.
    Sweep,
    /// Simulated learning curve against the theory line.
    #[command(name = "reproduce-fig2")]
    ReproduceFig2,
    /// Uniform participation q in {0.1, 0.5, 0.9} at T = 1.
    #[command(name = "reproduce-fig4")]
    ReproduceFig4,
    /// Full participation with T in {2, 5, 10}.
    #[command(name = "reproduce-fig5")]
    ReproduceFig5,
}

fn load(cli: &Cli) -> Result<RunConfiguration, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfiguration::load(path)?,
        None => desk_profile(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        theory_mode: cli.theory_mode,
        samples: cli.samples,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load(cli)?;
    let dir = cfg.output.directory.display();
    match cli.command {
        Command::Simulate => {
            let s = cmd_simulate(&cfg)?;
            println!(
                "simulated MSD {:.4e} ({:.2} dB) over {} blocks x {} repetitions",
                s.msd, s.msd_db, s.blocks, s.repetitions
            );
            if !s.stationary {
                println!("warning: steady-state window is not stationary; consider more blocks");
            }
            if let (Some(t), Some(gap)) = (&s.theory, s.relative_gap) {
                println!(
                    "theory MSD    {:.4e} ({:.2} dB), relative gap {:.3}",
                    t.msd, t.msd_db, gap
                );
            }
            println!("wrote {dir}/trajectory.csv and {dir}/summary.json");
        }
        Command::Theory => {
            let t = cmd_theory(&cfg)?;
            println!(
                "theory MSD {:.4e} ({:.2} dB), spectral radius {:.6}, {} {}",
                t.msd,
                t.msd_db,
                t.spectral_radius,
                t.patterns,
                if t.monte_carlo {
                    "sampled patterns"
                } else {
                    "enumerated patterns"
                }
            );
            println!("wrote {dir}/theory.json");
        }
        Command::Sweep => {
            for p in cmd_sweep(&cfg)? {
                match p.theory {
                    Some(t) => println!("{:>10}  MSD {:.4e}  theory {:.4e}", p.value, p.msd, t),
                    None => println!("{:>10}  MSD {:.4e}", p.value, p.msd),
                }
            }
            println!("wrote {dir}/sweep.json and {dir}/sweep_curves.csv");
        }
        Command::ReproduceFig2 | Command::ReproduceFig4 | Command::ReproduceFig5 => {
            let figure = match cli.command {
                Command::ReproduceFig2 => Figure::Fig2,
                Command::ReproduceFig4 => Figure::Fig4,
                _ => Figure::Fig5,
            };
            let outcome = cmd_reproduce(&cfg, figure)?;
            for p in &outcome.points {
                let theory = p
                    .theory
                    .map(|t| format!("  theory {:.2} dB", db(t)))
                    .unwrap_or_default();
                let conv = p
                    .convergence_block
                    .map(|b| b.to_string())
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:>6}  MSD {:.2} dB{theory}  converged by block {conv}",
                    p.value, p.msd_db
                );
            }
            for (name, held) in &outcome.checks {
                println!("{} {name}", if *held { "ok  " } else { "FAIL" });
            }
            println!("wrote {dir}/{0}.csv and {dir}/{0}.json", figure.name());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
