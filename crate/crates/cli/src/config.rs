//! Experiment configuration: the JSON schema, dotted-path overrides, and
//! construction of the core objects a run needs.
//!
//! Parsing is fail-closed: every struct rejects unknown keys, so a typo in
//! a config file is an error rather than a silently ignored setting.
//! Network widths are listed input first (`d_0, ..., d_N`); a network
//! written elsewhere with the output first, say `(5, 4, 1, 10, 5, 3, 8)`,
//! is entered here as `[8, 3, 5, 10, 1, 4, 5]`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use linflow::dynamics::{
    GdConfig, IntegratorConfig, Method, StageEvent, StopCondition,
};
use linflow::init::{k_cancel_directions, KCancelSpec};
use linflow::model::{
    target_from_factors, CoordState, NetworkSpec, TargetSpec, TargetSpecJson, Tolerances,
};
use linflow::rng::{random_decreasing_sv, random_orthogonal, seeded};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetConfig,
    pub network: NetworkConfig,
    pub init: InitConfig,
    #[serde(default)]
    pub run: RunConfig,
    /// Check selectors: any of `invariants`, `envelope`, `stage1`, `stage2`,
    /// `stage3`, `zero_limit`, `t1`, or `all`.
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetConfig {
    Random(RandomTarget),
    FromFactors(TargetSpecJson),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTarget {
    pub d_y: usize,
    pub d_x: usize,
    /// Explicit singular values, decreasing. Exactly one of `sv` and
    /// `sv_range` must be present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sv: Option<Vec<f64>>,
    /// Draw `d` decreasing singular values from `[lo, hi]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sv_range: Option<SvRange>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvRange {
    pub d: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Layer widths, input first.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    KCancel(KCancelConfig),
    Explicit(ExplicitInit),
    StackFile(StackFileInit),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KCancelConfig {
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub seed: u64,
    pub s0: f64,
}

/// Start from explicit ambient directions `u0`, `v0` (normalized here) at
/// scale `s0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitInit {
    pub u0: Vec<f64>,
    pub v0: Vec<f64>,
    pub s0: f64,
}

/// Start gradient descent from layer matrices stored in a JSON file:
/// an array of row-major matrices, first layer first. Flow runs project
/// the stack onto its induced rank-one weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackFileInit {
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunConfig {
    Flow(FlowConfig),
    Gd(GdRunConfig),
    Both { flow: FlowConfig, gd: GdRunConfig },
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::Flow(FlowConfig::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub method: MethodConfig,
    pub t_max: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Largest step the adaptive method may take; zero or negative lifts
    /// the cap entirely (needed by polynomial-decay runs, where the step
    /// must grow without bound).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub stops: Vec<StopConfig>,
    pub record_at: Vec<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let d = IntegratorConfig::<f64>::default();
        Self {
            method: MethodConfig::Rk45,
            t_max: d.t_max,
            rtol: d.rtol,
            atol: d.atol,
            dt_max: None,
            max_steps: None,
            stops: Vec::new(),
            record_at: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    Rk45,
    Rk4Fixed { dt: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopConfig {
    Converged { eps: f64 },
    SBelow { eps: f64 },
    Stage(StageConfig),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageConfig {
    AbNonneg,
    QReachesS,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdRunConfig {
    pub lr: f64,
    pub steps: usize,
    pub record_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_stop: Option<f64>,
    pub divergence_factor: f64,
}

impl Default for GdRunConfig {
    fn default() -> Self {
        let d = GdConfig::<f64>::default();
        Self {
            lr: d.lr,
            steps: d.steps,
            record_every: d.record_every,
            grad_stop: None,
            divergence_factor: d.divergence_factor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<FormatConfig>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), formats: vec![FormatConfig::Csv] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatConfig {
    Csv,
    Json,
}

// ---------------------------------------------------------------------------
// Loading and overrides
// ---------------------------------------------------------------------------

/// Parses a config, applying `--override key.path=value` entries to the raw
/// JSON before deserialization so they face the same unknown-key policy.
pub fn load_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad JSON: {e}")))?;
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn apply_override(root: &mut serde_json::Value, entry: &str) -> Result<(), CliError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{entry}' is not KEY=VALUE")))?;
    // Values parse as JSON when they can (numbers, bools, arrays); anything
    // else is taken as a bare string.
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("override '{path}': '{seg}' is not an object field"))
        })?;
        if last {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split never yields zero segments");
}

// ---------------------------------------------------------------------------
// Construction of core objects
// ---------------------------------------------------------------------------

impl TargetConfig {
    pub fn build(&self) -> Result<TargetSpec<f64>, CliError> {
        let tol = Tolerances::default();
        match self {
            TargetConfig::FromFactors(json) => {
                json.into_target(&tol).map_err(|e| CliError::Config(e.to_string()))
            }
            TargetConfig::Random(r) => {
                let mut rng = seeded(r.seed, "target");
                let sv = match (&r.sv, &r.sv_range) {
                    (Some(values), None) => DVector::from_vec(values.clone()),
                    (None, Some(range)) => {
                        random_decreasing_sv(&mut rng, range.d, range.lo, range.hi)
                    }
                    _ => {
                        return Err(CliError::Config(
                            "random target needs exactly one of 'sv' and 'sv_range'".into(),
                        ))
                    }
                };
                let u = random_orthogonal(&mut rng, r.d_y);
                let v = random_orthogonal(&mut rng, r.d_x);
                target_from_factors(u, sv, v, &tol).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            TargetConfig::Random(r) => Some(r.seed),
            TargetConfig::FromFactors(_) => None,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let TargetConfig::Random(r) = self {
            r.seed = seed;
        }
    }
}

impl NetworkConfig {
    pub fn build(&self, target: &TargetSpec<f64>) -> Result<NetworkSpec, CliError> {
        let net = NetworkSpec::new(self.widths.clone())
            .map_err(|e| CliError::Config(e.to_string()))?;
        net.matches_target(target).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(net)
    }
}

/// A fully resolved initial condition: coordinates for flow runs plus the
/// ambient directions a balanced stack is grown from.
pub struct ResolvedInit {
    pub state: CoordState<f64>,
    pub u0: DVector<f64>,
    pub v0: DVector<f64>,
    pub s0: f64,
    /// Seed used to place hidden-layer directions when growing a balanced
    /// stack from the directions.
    pub stack_seed: u64,
    /// Layer matrices straight from a stack file, when that is the source.
    pub stack: Option<linflow::model::LayerStack<f64>>,
}

impl InitConfig {
    pub fn build(&self, target: &TargetSpec<f64>) -> Result<ResolvedInit, CliError> {
        match self {
            InitConfig::KCancel(c) => {
                let spec = KCancelSpec { k: c.k, rho: c.rho, seed: c.seed, s0: c.s0 };
                let init = k_cancel_directions(target, &spec)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok(ResolvedInit {
                    state: init.state,
                    u0: init.u0,
                    v0: init.v0,
                    s0: c.s0,
                    stack_seed: c.seed,
                    stack: None,
                })
            }
            InitConfig::Explicit(e) => {
                if e.u0.len() != target.d_y() || e.v0.len() != target.d_x() {
                    return Err(CliError::Config(format!(
                        "explicit init needs u0 of length {} and v0 of length {}",
                        target.d_y(),
                        target.d_x()
                    )));
                }
                let mut u0 = DVector::from_vec(e.u0.clone());
                let mut v0 = DVector::from_vec(e.v0.clone());
                for (name, x) in [("u0", &mut u0), ("v0", &mut v0)] {
                    let n = x.norm();
                    if n <= 0.0 || !n.is_finite() {
                        return Err(CliError::Config(format!("{name} has no direction")));
                    }
                    *x /= n;
                }
                if e.s0 <= 0.0 {
                    return Err(CliError::Config("s0 must be positive".into()));
                }
                let a = target.u().transpose() * &u0;
                let b = target.v().transpose() * &v0;
                Ok(ResolvedInit {
                    state: CoordState::new(e.s0, a, b),
                    u0,
                    v0,
                    s0: e.s0,
                    stack_seed: 0,
                    stack: None,
                })
            }
            InitConfig::StackFile(f) => {
                let text = std::fs::read_to_string(&f.path).map_err(|e| {
                    CliError::Io(format!("stack file '{}': {e}", f.path))
                })?;
                let rows: Vec<Vec<Vec<f64>>> = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("stack file: {e}")))?;
                let layers: Vec<nalgebra::DMatrix<f64>> = rows
                    .iter()
                    .map(|m| {
                        let nrows = m.len();
                        let ncols = m.first().map_or(0, |r| r.len());
                        if m.iter().any(|r| r.len() != ncols) || nrows == 0 || ncols == 0 {
                            return Err(CliError::Config("ragged layer matrix".into()));
                        }
                        Ok(nalgebra::DMatrix::from_fn(nrows, ncols, |i, j| m[i][j]))
                    })
                    .collect::<Result<_, _>>()?;
                let stack = linflow::model::LayerStack::new(layers)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let w = linflow::model::induced_weight(&stack);
                // Mild rank tolerance: file-borne stacks carry storage
                // roundoff, but the reduced flow still needs an essentially
                // rank-one product.
                let tol = Tolerances { rank_tol: 1e-6, ..Default::default() };
                let r = linflow::model::rank_one_svd(&w, &tol)
                    .map_err(|e| CliError::Config(format!("stack file: {e}")))?;
                let (u0, v0) = r.dirs.ok_or_else(|| {
                    CliError::Config("stack file: induced weight is zero".into())
                })?;
                let s0 = r.s;
                let a = target.u().transpose() * &u0;
                let b = target.v().transpose() * &v0;
                Ok(ResolvedInit {
                    state: CoordState::new(s0, a, b),
                    u0,
                    v0,
                    s0,
                    stack_seed: 0,
                    stack: Some(stack),
                })
            }
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            InitConfig::KCancel(c) => Some(c.seed),
            _ => None,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let InitConfig::KCancel(c) = self {
            c.seed = seed;
        }
    }
}

impl FlowConfig {
    pub fn build(&self) -> IntegratorConfig<f64> {
        let mut cfg = IntegratorConfig::default();
        cfg.method = match self.method {
            MethodConfig::Rk45 => Method::Rk45,
            MethodConfig::Rk4Fixed { dt } => Method::Rk4Fixed { dt },
        };
        cfg.t_max = self.t_max;
        cfg.rtol = self.rtol;
        cfg.atol = self.atol;
        match self.dt_max {
            Some(dt) if dt > 0.0 => cfg.dt_max = dt,
            Some(_) => cfg.dt_max = f64::INFINITY,
            None => {}
        }
        if let Some(n) = self.max_steps {
            cfg.max_steps = n;
        }
        cfg.stops = self
            .stops
            .iter()
            .map(|s| match *s {
                StopConfig::Converged { eps } => StopCondition::Converged { eps },
                StopConfig::SBelow { eps } => StopCondition::SBelow { eps },
                StopConfig::Stage(StageConfig::AbNonneg) => {
                    StopCondition::Stage(StageEvent::AbNonneg)
                }
                StopConfig::Stage(StageConfig::QReachesS) => {
                    StopCondition::Stage(StageEvent::QReachesS)
                }
            })
            .collect();
        cfg.record_at = self.record_at.clone();
        cfg
    }
}

impl GdRunConfig {
    pub fn build(&self) -> GdConfig<f64> {
        GdConfig {
            lr: self.lr,
            steps: self.steps,
            record_every: self.record_every,
            grad_stop: self.grad_stop,
            divergence_factor: self.divergence_factor,
            ..Default::default()
        }
    }
}
