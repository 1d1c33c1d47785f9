//! Run configuration: TOML in, validated library objects out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::SmoothField;
use crate::geometry::{ChartDomain, ManifoldSpec};
use crate::model::{ModelSpec, Region};
use crate::pathsim::TransportMode;
use crate::semigroup::DEFAULT_DELTA;
use crate::spectral::{GapGrid, OptimizeBudget};
use crate::twistcalc::{BoundMode, Twist, TwistFamily, TwistSpec, DEFAULT_CONDITION_BOUND, DEFAULT_TILDE_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Bound,
    Gap,
    Optimize,
    Simulate,
    Intertwine,
    Verify,
}

impl Task {
    /// Execution order, independent of the order tasks are listed in.
    pub const ORDER: [Task; 6] = [
        Task::Bound,
        Task::Gap,
        Task::Optimize,
        Task::Simulate,
        Task::Intertwine,
        Task::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Bound => "bound",
            Task::Gap => "gap",
            Task::Optimize => "optimize",
            Task::Simulate => "simulate",
            Task::Intertwine => "intertwine",
            Task::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldName {
    Euclidean,
    Circle,
    FlatTorus,
    Sphere2,
    HyperbolicHalfPlane,
    Interval,
    UserChart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl GridConfig {
    pub fn region(&self) -> Region {
        Region::new(&self.lower, &self.upper, &self.points)
    }

    pub fn gap_grid(&self) -> GapGrid {
        GapGrid::new(&self.lower, &self.upper, &self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub manifold: ManifoldName,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub period: Option<f64>,
    #[serde(default)]
    pub pole_margin: Option<f64>,
    /// Endpoints for `interval`.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    /// Metric entries for `user-chart`.
    #[serde(default)]
    pub metric: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub domain: Option<DomainConfig>,
    pub potential: String,
    pub region: GridConfig,
    #[serde(default)]
    pub reference_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub periodic: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    Identity,
    Scalar,
    /// `λ = exp(p0 x + p1 x² + …)` in the first coordinate.
    ExpPoly,
    ConstantMatrix,
    Diagonal,
    Shear,
    UserMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistConfig {
    pub family: FamilyName,
    #[serde(default)]
    pub lambda: Option<String>,
    #[serde(default)]
    pub degree: Option<usize>,
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub diagonal: Option<Vec<String>>,
    #[serde(default)]
    pub expr: Option<String>,
    #[serde(default)]
    pub entries: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub parameters: Option<Vec<f64>>,
    #[serde(default = "default_mode")]
    pub mode: BoundMode,
    #[serde(default)]
    pub condition_bound: Option<f64>,
    #[serde(default)]
    pub tilde_epsilon: Option<f64>,
}

fn default_mode() -> BoundMode {
    BoundMode::Plain
}

impl Default for TwistConfig {
    fn default() -> Self {
        TwistConfig {
            family: FamilyName::Identity,
            lambda: None,
            degree: None,
            matrix: None,
            diagonal: None,
            expr: None,
            entries: None,
            parameters: None,
            mode: BoundMode::Plain,
            condition_bound: None,
            tilde_epsilon: None,
        }
    }
}

fn required<T: Clone>(v: &Option<T>, field: &str, family: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("twist.{field} is required for family `{family}`")))
}

impl TwistConfig {
    pub fn spec(&self) -> Result<TwistSpec> {
        let mut spec = match self.family {
            FamilyName::Identity => TwistSpec::identity(),
            FamilyName::Scalar => TwistSpec::new(
                TwistFamily::Scalar {
                    lambda: required(&self.lambda, "lambda", "scalar")?,
                },
                vec![],
            ),
            FamilyName::ExpPoly => TwistSpec::scalar_exp_poly(required(&self.degree, "degree", "exp-poly")?),
            FamilyName::ConstantMatrix => TwistSpec::new(
                TwistFamily::ConstantMatrix {
                    matrix: required(&self.matrix, "matrix", "constant-matrix")?,
                },
                vec![],
            ),
            FamilyName::Diagonal => TwistSpec::new(
                TwistFamily::Diagonal {
                    entries: required(&self.diagonal, "diagonal", "diagonal")?,
                },
                vec![],
            ),
            FamilyName::Shear => TwistSpec::new(
                TwistFamily::Shear {
                    expr: required(&self.expr, "expr", "shear")?,
                },
                vec![],
            ),
            FamilyName::UserMatrix => TwistSpec::new(
                TwistFamily::UserMatrix {
                    entries: required(&self.entries, "entries", "user-matrix")?,
                },
                vec![],
            ),
        };
        if let Some(p) = &self.parameters {
            spec.parameters = p.clone();
        }
        spec.condition_bound = self.condition_bound.unwrap_or(DEFAULT_CONDITION_BOUND);
        Ok(spec)
    }

    pub fn tilde_epsilon(&self) -> f64 {
        self.tilde_epsilon.unwrap_or(DEFAULT_TILDE_EPSILON)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub t: f64,
    pub h: f64,
    pub n: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Start point; the region midpoint when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub test_function: Option<String>,
    #[serde(default = "default_record_paths")]
    pub record_paths: usize,
    #[serde(default = "default_transport")]
    pub transport: TransportMode,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_record_paths() -> usize {
    8
}

fn default_transport() -> TransportMode {
    TransportMode::Deformed
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    /// Discretization grid; the model region when absent.
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_true")]
    pub refine: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_evaluations")]
    pub evaluations_per_start: usize,
    #[serde(default = "default_restart_scale")]
    pub restart_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_restarts() -> usize {
    OptimizeBudget::default().restarts
}

fn default_evaluations() -> usize {
    OptimizeBudget::default().evaluations_per_start
}

fn default_restart_scale() -> f64 {
    OptimizeBudget::default().restart_scale
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let b = OptimizeBudget::default();
        OptimizeConfig {
            restarts: b.restarts,
            evaluations_per_start: b.evaluations_per_start,
            restart_scale: b.restart_scale,
            seed: b.seed,
        }
    }
}

impl OptimizeConfig {
    pub fn budget(&self) -> OptimizeBudget {
        OptimizeBudget {
            restarts: self.restarts,
            evaluations_per_start: self.evaluations_per_start,
            restart_scale: self.restart_scale,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Poincare,
    BrascampLieb,
    AsymmetricBl,
    Concentration,
    PhiDecay,
    MatrixLemma,
    Gronwall,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::Poincare,
        Check::BrascampLieb,
        Check::AsymmetricBl,
        Check::Concentration,
        Check::PhiDecay,
        Check::MatrixLemma,
        Check::Gronwall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Poincare => "poincare",
            Check::BrascampLieb => "brascamp-lieb",
            Check::AsymmetricBl => "asymmetric-bl",
            Check::Concentration => "concentration",
            Check::PhiDecay => "phi-decay",
            Check::MatrixLemma => "matrix-lemma",
            Check::Gronwall => "gronwall",
        }
    }

    pub fn needs_seed(self) -> bool {
        matches!(self, Check::PhiDecay | Check::Gronwall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_checks")]
    pub checks: Vec<Check>,
    /// Test functions for the variance inequalities; built-ins when absent.
    #[serde(default)]
    pub functions: Option<Vec<String>>,
    #[serde(default)]
    pub asymmetric_pairs: Option<Vec<[String; 2]>>,
    #[serde(default)]
    pub lipschitz_functions: Option<Vec<String>>,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_phi_function")]
    pub phi_function: String,
    #[serde(default = "default_phi_times")]
    pub phi_times: Vec<f64>,
    /// Outer quadrature grid for φ(t); a coarse copy of the region when absent.
    #[serde(default)]
    pub phi_grid: Option<GridConfig>,
    #[serde(default = "default_matrix_dim")]
    pub matrix_dim: usize,
    #[serde(default = "default_matrix_trials")]
    pub matrix_trials: usize,
    #[serde(default = "default_gronwall_paths")]
    pub gronwall_paths: usize,
}

fn default_checks() -> Vec<Check> {
    vec![
        Check::Poincare,
        Check::BrascampLieb,
        Check::MatrixLemma,
        Check::Gronwall,
    ]
}

fn default_radii() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

fn default_phi_function() -> String {
    "x".into()
}

fn default_phi_times() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}

fn default_matrix_dim() -> usize {
    8
}

fn default_matrix_trials() -> usize {
    1000
}

fn default_gronwall_paths() -> usize {
    1000
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            checks: default_checks(),
            functions: None,
            asymmetric_pairs: None,
            lipschitz_functions: None,
            radii: default_radii(),
            phi_function: default_phi_function(),
            phi_times: default_phi_times(),
            phi_grid: None,
            matrix_dim: default_matrix_dim(),
            matrix_trials: default_matrix_trials(),
            gronwall_paths: default_gronwall_paths(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub output: Option<String>,
    pub model: ModelConfig,
    #[serde(default)]
    pub twist: TwistConfig,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub gap: Option<GapConfig>,
    #[serde(default)]
    pub optimize: Option<OptimizeConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

/// Library objects built from a validated configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ModelSpec,
    pub twist_spec: TwistSpec,
    pub twist: Twist,
    pub mode: BoundMode,
    pub x0: Vec<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn has(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }

    fn needs_seed(&self) -> bool {
        self.has(Task::Simulate)
            || self.has(Task::Intertwine)
            || (self.has(Task::Verify) && self.verify_config().checks.iter().any(|c| c.needs_seed()))
    }

    pub fn verify_config(&self) -> VerifyConfig {
        self.verify.clone().unwrap_or_default()
    }

    pub fn gap_grid(&self) -> GapGrid {
        self.gap
            .as_ref()
            .and_then(|g| g.grid.as_ref())
            .unwrap_or(&self.model.region)
            .gap_grid()
    }

    pub fn manifold(&self) -> Result<ManifoldSpec> {
        let m = &self.model;
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| Error::Config(format!("model.{field} is required for this manifold")))
        };
        let mut spec = match m.manifold {
            ManifoldName::Euclidean => ManifoldSpec::euclidean(m.dim.unwrap_or(1)),
            ManifoldName::Circle => ManifoldSpec::circle(m.radius.unwrap_or(1.0)),
            ManifoldName::FlatTorus => {
                ManifoldSpec::flat_torus(m.dim.unwrap_or(2), m.period.unwrap_or(2.0 * std::f64::consts::PI))
            }
            ManifoldName::Sphere2 => ManifoldSpec::sphere2_with(m.radius.unwrap_or(1.0), m.pole_margin.unwrap_or(0.1)),
            ManifoldName::HyperbolicHalfPlane => ManifoldSpec::hyperbolic_half_plane(),
            ManifoldName::Interval => ManifoldSpec::interval(need(m.a, "a")?, need(m.b, "b")?),
            ManifoldName::UserChart => {
                let metric = m
                    .metric
                    .as_ref()
                    .ok_or_else(|| Error::Config("model.metric is required for user-chart".into()))?;
                let n = metric.len();
                let domain = match &m.domain {
                    Some(d) => domain_from(d, n)?,
                    None => ChartDomain::unbounded(n),
                };
                return ManifoldSpec::user_chart(metric, domain);
            }
        };
        if let Some(d) = &m.domain {
            let n = spec.dim();
            spec = spec.with_domain(domain_from(d, n)?);
        }
        Ok(spec)
    }

    /// Checks every invariant and builds the model and twist.
    pub fn validate(&self) -> Result<Prepared> {
        if self.tasks.is_empty() {
            return Err(Error::Config("`tasks` must list at least one task".into()));
        }
        let manifold = self.manifold()?;
        let region = self.model.region.region();
        let mut model = ModelSpec::new(manifold, &self.model.potential, region)
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        if let Some(mass) = self.model.reference_mass {
            model = model.with_reference_mass(mass);
        }
        let dim = model.dim();
        let twist_spec = self.twist.spec()?;
        let twist = Twist::compile(&twist_spec, dim).map_err(|e| Error::Config(format!("twist: {e}")))?;
        let eps = self.twist.tilde_epsilon();
        if !(eps > 0.0) {
            return Err(Error::Config("twist.tilde_epsilon must be positive".into()));
        }
        if self.has(Task::Gap) || self.has(Task::Optimize) {
            let g = self.gap_grid();
            if g.lower.len() != dim || g.upper.len() != dim || g.points.len() != dim {
                return Err(Error::Config(format!("gap.grid must have dimension {dim}")));
            }
        }
        if self.needs_seed() && self.simulation.as_ref().and_then(|s| s.seed).is_none() {
            return Err(Error::Config(
                "simulation.seed is required by the requested Monte-Carlo tasks".into(),
            ));
        }
        let lo = &model.region.lower;
        let hi = &model.region.upper;
        let mut x0: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        if let Some(s) = &self.simulation {
            if !(s.t >= 0.0) || !(s.h > 0.0) || s.n == 0 {
                return Err(Error::Config("simulation needs t >= 0, h > 0 and n >= 1".into()));
            }
            if let Some(p) = &s.x0 {
                if p.len() != dim {
                    return Err(Error::Config(format!("simulation.x0 must have {dim} coordinates")));
                }
                x0 = p.clone();
            }
            if let Some(f) = &s.test_function {
                SmoothField::parse(f, dim).map_err(|e| Error::Config(format!("simulation.test_function: {e}")))?;
            }
        }
        if (self.has(Task::Simulate) || self.has(Task::Intertwine)) && self.simulation.is_none() {
            return Err(Error::Config(
                "[simulation] is required by simulate and intertwine".into(),
            ));
        }
        if self.has(Task::Intertwine) && self.simulation.as_ref().is_some_and(|s| s.test_function.is_none()) {
            return Err(Error::Config(
                "simulation.test_function is required by intertwine".into(),
            ));
        }
        if self.has(Task::Verify) {
            let v = self.verify_config();
            if v.checks.is_empty() {
                return Err(Error::Config("verify.checks must not be empty".into()));
            }
            let parse = |s: &str, field: &str| {
                SmoothField::parse(s, dim)
                    .map(|_| ())
                    .map_err(|e| Error::Config(format!("verify.{field}: {e}")))
            };
            for f in v.functions.iter().flatten() {
                parse(f, "functions")?;
            }
            for pair in v.asymmetric_pairs.iter().flatten() {
                parse(&pair[0], "asymmetric_pairs")?;
                parse(&pair[1], "asymmetric_pairs")?;
            }
            for f in v.lipschitz_functions.iter().flatten() {
                parse(f, "lipschitz_functions")?;
            }
            parse(&v.phi_function, "phi_function")?;
            if v.checks.iter().any(|c| matches!(c, Check::PhiDecay | Check::Gronwall)) && self.simulation.is_none() {
                return Err(Error::Config(
                    "[simulation] is required by phi-decay and gronwall".into(),
                ));
            }
        }
        Ok(Prepared {
            model,
            twist_spec,
            twist,
            mode: self.twist.mode,
            x0,
        })
    }
}

fn domain_from(d: &DomainConfig, n: usize) -> Result<ChartDomain> {
    let periodic = d.periodic.clone().unwrap_or_else(|| vec![false; n]);
    if d.lower.len() != n || d.upper.len() != n || periodic.len() != n {
        return Err(Error::Config(format!("model.domain must have dimension {n}")));
    }
    Ok(ChartDomain {
        lower: d.lower.clone(),
        upper: d.upper.clone(),
        periodic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = r#"
tasks = ["gap", "bound"]

[model]
manifold = "euclidean"
potential = "x^2/2"
region = { lower = [-8.0], upper = [8.0], points = [401] }
"#;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_toml(OU).unwrap();
        assert_eq!(c.tasks, vec![Task::Gap, Task::Bound]);
        assert_eq!(c.twist.family, FamilyName::Identity);
        let p = c.validate().unwrap();
        assert_eq!(p.model.dim(), 1);
        assert_eq!(p.x0, vec![0.0]);
    }

    #[test]
    fn empty_tasks_rejected() {
        let c = RunConfig::from_toml(&OU.replace(r#"["gap", "bound"]"#, "[]")).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_field_reports_location() {
        let e = RunConfig::from_toml(&format!("{OU}\n[twist]\nfamily = \"identity\"\nbogus = 1\n")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn bad_expression_rejected() {
        let c = RunConfig::from_toml(&OU.replace("x^2/2", "x^^2")).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_required_for_monte_carlo() {
        let text = OU.replace(r#"["gap", "bound"]"#, r#"["simulate"]"#) + "[simulation]\nt = 0.1\nh = 0.01\nn = 4\n";
        let c = RunConfig::from_toml(&text).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("seed"));
        let c = RunConfig::from_toml(&(text + "seed = 3\n")).unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn json_echo_round_trips() {
        let text = OU.to_string()
            + "[twist]\nfamily = \"exp-poly\"\ndegree = 2\nmode = \"tilde\"\n[verify]\nchecks = [\"poincare\", \"phi-decay\"]\n[simulation]\nt = 0.5\nh = 0.01\nn = 10\nseed = 7\n";
        let c = RunConfig::from_toml(&text).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
