use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsa_core::pipeline::{self, ExperimentConfig, PipelineError, RunDir, RUN_DIR_ENV};

fn defaults_help() -> String {
    format!(
        "Configuration is one TOML document; omitted fields take the defaults below.\n\
         Any field can be overridden with --set section.field=value (TOML syntax for the value).\n\n\
         Exit codes: 0 ok, 2 config error, 3 missing or mismatched artifact, 4 numerical failure.\n\n\
         Defaults:\n\n{}",
        ExperimentConfig::default().to_toml()
    )
}

#[derive(Parser)]
#[command(name = "lsa-probe", version, about = "Membership inference for diffusion models by adversarial stability probing")]
#[command(after_long_help = defaults_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set attack.steps=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory [default: $LSAP_RUN_DIR, then `output_dir`, then ./run].
    #[arg(long, global = true, env = RUN_DIR_ENV)]
    run_dir: Option<PathBuf>,
    /// Worker threads for per-sample stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and manifest.
    GenData,
    /// Train the toy denoiser on the member split.
    Train,
    /// Calibrate the degradation threshold on dev nonmembers.
    Calibrate,
    /// Score members and eval nonmembers with the probe.
    Attack,
    /// Score the baselines at matched compute.
    Baseline,
    /// Compute AUC and TPR endpoints for every score file.
    Evaluate,
    /// Run the timestep, budget and metric ablation grids.
    Sweep,
    /// Render the run report from the evaluation.
    Report,
    /// Every stage from gen-data to report.
    Run,
    /// Print the resolved config.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(w) = cli.common.workers {
        config.workers = w;
    }
    let dir = RunDir::resolve(cli.common.run_dir.as_deref(), &config);
    let json = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).unwrap());
    match cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&dir, &config)?;
            println!("wrote {} clips to {}", m.clips.len(), dir.corpus().display());
        }
        Command::Train => {
            let s = pipeline::train(&dir, &config)?;
            println!(
                "final loss {:.4e}; member ε-MSE {:.4e}, nonmember ε-MSE {:.4e}",
                s.final_loss, s.member_loss, s.nonmember_loss
            );
        }
        Command::Calibrate => {
            let c = pipeline::calibrate(&dir, &config)?;
            println!("tau = {:.6e} ({}, {} values)", c.tau, c.fingerprint, c.values.len());
        }
        Command::Attack => {
            let r = pipeline::attack(&dir, &config)?;
            println!("scored {} clips", r.len());
        }
        Command::Baseline => {
            let p = pipeline::baseline(&dir, &config)?;
            json(serde_json::to_value(p).unwrap());
        }
        Command::Evaluate => {
            let e = pipeline::evaluate(&dir, &config)?;
            for a in &e.attacks {
                println!("{:<26} AUC {:.3} [{:.3}, {:.3}]", a.attack, a.auc.point, a.auc.lower, a.auc.upper);
            }
        }
        Command::Sweep => {
            let s = pipeline::sweep(&dir, &config)?;
            for c in &s.cells {
                println!(
                    "{:<8} {:<12} AUC {:.3}  p {:.3e}  holm {}  brackets {}",
                    c.axis,
                    c.value,
                    c.auc.point,
                    c.p_value,
                    if c.holm_reject { "reject" } else { "keep" },
                    if c.brackets_valid { "ok" } else { "INVALID" }
                );
            }
        }
        Command::Report => print!("{}", pipeline::report(&dir, &config)?.render()),
        Command::Run => print!("{}", pipeline::run_all(&dir, &config)?.render()),
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
