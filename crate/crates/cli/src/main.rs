//! Command line front end. `LINFLOW_LOG={error,warn,info,debug}` controls
//! logging; see the subcommand help for flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use linflow_cli::config::{load_config, ExperimentConfig, FormatConfig};
use linflow_cli::manifest::read_manifest;
use linflow_cli::report::{all_passed, resolve_selectors, run_checks, LabeledChecks, Report};
use linflow_cli::reproduce::{reproduce_k_sweep, reproduce_three_stage, PredictionJson};
use linflow_cli::runner::simulate;
use linflow_cli::CliError;

#[derive(Parser)]
#[command(
    name = "linflow",
    version,
    about = "Gradient flow and gradient descent on deep linear networks with a width-one bottleneck"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `run.flow.t_max=50` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace every seed in the config (target and init).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured flow and/or descent, write trajectories and
    /// reports, exit 0 only if every requested check passes.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (defaults to the config's `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict output to one format.
        #[arg(long, value_parser = ["csv", "json"])]
        format: Option<String>,
    },
    /// Print the predicted limit of the configured initial state as JSON.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-check a recorded trajectory against the invariants and bounds.
    Verify {
        /// Trajectory file (CSV, or JSON by extension).
        trajectory: PathBuf,
        /// Manifest with the run's context; defaults to `manifest.json`
        /// next to the trajectory.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated checks (default `all`).
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
        /// Where to write `report.json` (defaults to the trajectory's
        /// directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Treat the run as gradient descent (loosens per-step tolerances).
        #[arg(long)]
        gd: bool,
    },
    /// Regenerate the survey figures' data files.
    Reproduce {
        /// Which figure: `k_sweep`, `three_stage`, or `all`.
        #[arg(value_parser = ["k_sweep", "three_stage", "all"])]
        figure: String,
        /// Output directory.
        #[arg(long, default_value = "figures")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LINFLOW_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is usage (3).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Simulate { config, out, format } => {
            let cfg = read_config(&config, format.as_deref())?;
            let outcome = simulate(&cfg, out.as_deref())?;
            for f in &outcome.files {
                println!("{}", f.display());
            }
            Ok(if outcome.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Predict { config } => {
            let cfg = read_config(&config, None)?;
            let target = cfg.target.build()?;
            let init = cfg.init.build(&target)?;
            let prediction = linflow::theory::predict_limit(&target, &init.state)
                .map_err(|e| match e {
                    linflow::theory::TheoryError::AmbiguousIndicator { .. } => {
                        CliError::Ambiguous(e.to_string())
                    }
                    other => CliError::Run(other.to_string()),
                })?;
            let json = serde_json::to_string(&PredictionJson::from(&prediction))
                .expect("prediction serializes");
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { trajectory, manifest, checks, out, gd } => {
            verify(&trajectory, manifest.as_deref(), &checks, out.as_deref(), gd)
        }
        Command::Reproduce { figure, out } => {
            if figure == "k_sweep" || figure == "all" {
                reproduce_k_sweep(&out.join("k_sweep"))?;
            }
            if figure == "three_stage" || figure == "all" {
                reproduce_three_stage(&out.join("three_stage"))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn read_config(args: &ConfigArgs, format: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.config.display())))?;
    let mut cfg = load_config(&text, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.target.set_seed(seed);
        cfg.init.set_seed(seed);
    }
    match format {
        Some("csv") => cfg.output.formats = vec![FormatConfig::Csv],
        Some("json") => cfg.output.formats = vec![FormatConfig::Json],
        _ => {}
    }
    Ok(cfg)
}

fn verify(
    trajectory: &Path,
    manifest: Option<&Path>,
    checks: &[String],
    out: Option<&Path>,
    gd: bool,
) -> Result<ExitCode, CliError> {
    let traj = linflow_cli::csvio::read_trajectory(trajectory)?;
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trajectory.with_file_name("manifest.json"));
    let m = read_manifest(&manifest_path)?;

    // Sample-level checks see the target only through its singular values,
    // so a diagonal stand-in with the recorded spectrum is equivalent.
    let ctx = &m.context;
    let target = linflow::model::target_from_factors(
        nalgebra::DMatrix::<f64>::identity(ctx.d_y, ctx.d_y),
        nalgebra::DVector::from_vec(ctx.sv.clone()),
        nalgebra::DMatrix::<f64>::identity(ctx.d_x, ctx.d_x),
        &Default::default(),
    )
    .map_err(|e| CliError::Format(format!("manifest context: {e}")))?;

    let requested: Vec<String> =
        if checks.is_empty() { vec!["all".into()] } else { checks.to_vec() };
    let selectors = resolve_selectors(&requested)?;
    let outcomes = run_checks(&target, ctx.depth, &traj, &selectors, gd)?;
    let passed = all_passed(&outcomes);
    for c in &outcomes {
        println!("{:?} {} [{}]", c.status, c.name, c.detail);
    }

    let report = Report {
        passed,
        checks: vec![LabeledChecks { run: if gd { "gd" } else { "flow" }.into(), outcomes }],
        comparison: None,
    };
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trajectory.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;

    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
