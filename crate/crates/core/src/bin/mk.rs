use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use melnikov::cli::{run, CliError, Command, Scenario};

/// Melnikov analysis and simulation of two-zone planar Hamiltonian systems.
#[derive(Parser, Debug)]
#[command(name = "mk", version)]
struct Args {
    /// sweep | roots | cycles | simulate | verify | classify
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(Command::ALL))]
    command: String,
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Start from a built-in preset; scenario keys override it.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
}

fn load(args: &Args) -> Result<Scenario, CliError> {
    let mut scenario = match (&args.scenario, &args.preset) {
        (Some(path), preset) => {
            let src = fs::read_to_string(path).map_err(|e| CliError::Scenario(format!("{}: {e}", path.display())))?;
            let mut s = Scenario::parse(&src)?;
            if let Some(p) = preset {
                let base = Scenario::preset(p)?;
                if s.system == Default::default() {
                    s.system = base.system;
                } else {
                    s.system.preset = Some(p.clone());
                }
            }
            s
        }
        (None, Some(p)) => Scenario::preset(p)?,
        (None, None) => return Err(CliError::Scenario("either --scenario or --preset is required".into())),
    };
    if let Some(e) = args.epsilon {
        scenario.simulation.epsilon = Some(e);
    }
    if let Some(g) = args.grid {
        scenario.analysis.grid = Some(g);
    }
    Ok(scenario)
}

fn write_outputs(args: &Args, artifacts: &[melnikov::cli::Artifact]) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for a in artifacts {
        let path = args.out.join(&a.name);
        fs::write(&path, &a.contents).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command: Command = args.command.parse().expect("clap restricts the values");
    let outcome = load(&args).and_then(|s| run(command, &s));
    match outcome {
        Ok(artifacts) => match write_outputs(&args, &artifacts) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{}", serde_json::json!({ "status": 3, "kind": "io", "message": format!("{e:#}") }));
                ExitCode::from(3)
            }
        },
        Err(e) => {
            let report = e.report();
            eprintln!("{report}");
            let _ = fs::create_dir_all(&args.out).and_then(|_| fs::write(args.out.join("error.json"), format!("{report:#}\n")));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
