//! Executes a parsed config: builds the target and initial condition, runs
//! the requested flow and/or descent, applies checks, and writes the
//! trajectory, manifest, and report files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use linflow::dynamics::{gd_run, integrate_coords};
use linflow::init::balanced_stack;
use linflow::model::{TargetSpec, Trajectory};

use crate::config::{ExperimentConfig, FormatConfig, ResolvedInit, RunConfig};
use crate::csvio::{emit_csv, TrajectoryJson};
use crate::manifest::{config_hash, RunContext, RunManifest, RunRecord, SeedTrail, ARTIFACT_VERSION};
use crate::report::{all_passed, compare_runs, resolve_selectors, CheckOutcome, LabeledChecks, Report};
use crate::CliError;

pub struct SimulateOutcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

struct FinishedRun {
    kind: &'static str,
    traj: Trajectory<f64>,
}

/// Runs one experiment into `out_dir` (which overrides `output.dir` when
/// given). Returns whether all requested checks passed.
pub fn simulate(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<SimulateOutcome, CliError> {
    let start = Instant::now();
    let target = config.target.build()?;
    let net = config.network.build(&target)?;
    let depth = net.depth();
    let init = config.init.build(&target)?;
    let selectors = resolve_selectors(&config.checks)?;

    let mut runs: Vec<FinishedRun> = Vec::new();
    match &config.run {
        RunConfig::Flow(f) => {
            runs.push(run_flow(&target, &init, depth, f)?);
        }
        RunConfig::Gd(g) => {
            runs.push(run_gd(&target, &net, &init, g)?);
        }
        RunConfig::Both { flow, gd } => {
            runs.push(run_flow(&target, &init, depth, flow)?);
            runs.push(run_gd(&target, &net, &init, gd)?);
        }
    }

    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;

    // Trajectory files first, manifest last, so a complete manifest implies
    // complete data files.
    let mut files = Vec::new();
    let single = runs.len() == 1;
    for run in &runs {
        let stem = if single { "trajectory".to_string() } else { format!("trajectory_{}", run.kind) };
        for format in &config.output.formats {
            let path = match format {
                FormatConfig::Csv => {
                    let p = dir.join(format!("{stem}.csv"));
                    write_file(&p, &emit_csv(&run.traj, (target.d_y(), target.d_x())))?;
                    p
                }
                FormatConfig::Json => {
                    let p = dir.join(format!("{stem}.json"));
                    let json = serde_json::to_string_pretty(&TrajectoryJson::from_trajectory(&run.traj))
                        .expect("trajectory serializes");
                    write_file(&p, &json)?;
                    p
                }
            };
            files.push(path);
        }
    }

    let mut labeled: Vec<LabeledChecks> = Vec::new();
    let mut flat: Vec<CheckOutcome> = Vec::new();
    for run in &runs {
        if selectors.is_empty() {
            continue;
        }
        let outcomes =
            crate::report::run_checks(&target, depth, &run.traj, &selectors, run.kind == "gd")?;
        flat.extend(outcomes.iter().cloned());
        labeled.push(LabeledChecks { run: run.kind.into(), outcomes });
    }
    let passed = all_passed(&flat);

    let comparison = match &runs[..] {
        [a, b] => compare_runs(&a.traj, &b.traj),
        _ => None,
    };
    if !labeled.is_empty() || comparison.is_some() {
        let report = Report { passed, checks: labeled, comparison };
        let p = dir.join("report.json");
        write_file(&p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
        files.push(p);
    }

    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        config_hash: config_hash(config),
        seeds: SeedTrail { target: config.target.seed(), init: config.init.seed() },
        wall_time_ms: start.elapsed().as_millis() as u64,
        context: RunContext {
            depth,
            d_y: target.d_y(),
            d_x: target.d_x(),
            sv: target.sv().iter().copied().collect(),
        },
        runs: runs
            .iter()
            .map(|r| RunRecord {
                kind: r.kind.into(),
                end: r.traj.meta.end,
                steps: r.traj.meta.steps,
                samples: r.traj.samples.len(),
            })
            .collect(),
        checks: flat,
        files: files
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    write_file(
        &manifest_path,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    files.push(manifest_path);

    Ok(SimulateOutcome { passed, files })
}

fn run_flow(
    target: &TargetSpec<f64>,
    init: &ResolvedInit,
    depth: usize,
    cfg: &crate::config::FlowConfig,
) -> Result<FinishedRun, CliError> {
    let traj = integrate_coords(target, &init.state, depth, &cfg.build())
        .map_err(|e| CliError::Run(e.to_string()))?;
    Ok(FinishedRun { kind: "flow", traj })
}

fn run_gd(
    target: &TargetSpec<f64>,
    net: &linflow::model::NetworkSpec,
    init: &ResolvedInit,
    cfg: &crate::config::GdRunConfig,
) -> Result<FinishedRun, CliError> {
    let stack = match &init.stack {
        Some(s) => s.clone(),
        None => balanced_stack(net, &init.u0, &init.v0, init.s0, init.stack_seed)
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    let (traj, _) = gd_run(target, &stack, &cfg.build()).map_err(|e| CliError::Run(e.to_string()))?;
    Ok(FinishedRun { kind: "gd", traj })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
