//! Task runner behind the command-line interface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Check, RunConfig, Task};
use crate::error::{Error, Result};
use crate::expr::SmoothField;
use crate::geometry::ChartPoint;
use crate::linalg;
use crate::model::{rho_inf, Infimum, Region};
use crate::pathsim::{simulate_path, transport, TransportMode};
use crate::semigroup::{estimate_p, intertwining_residual, IntertwiningResult, MCEstimate, SimSettings};
use crate::spectral::{
    discretize, gap_with_refinement, optimize_twist, GapReport, OptimizeResult, SOUNDNESS_TOLERANCE,
};
use crate::twistcalc::{bound_scan_with, BoundOptions, BoundReport, Twist};
use crate::verify::{self, InequalityReport, VarianceKind, Verdict};

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Ok,
    /// A hypothesis gate rejected the twist or the model.
    GateViolation,
    /// At least one verification item failed.
    VerificationFailed,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: Task,
    pub status: TaskStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSection {
    pub rho: Infimum,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSection {
    pub report: GapReport,
    /// `bound / λ₁` when a bound was computed in the same run.
    pub gap_ratio: Option<f64>,
    pub sound: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSection {
    pub x0: Vec<f64>,
    pub transport: TransportMode,
    pub recorded_paths: usize,
    pub exited_paths: usize,
    pub estimate: Option<MCEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEnvironment {
    pub region: Region,
    pub seed: Option<u64>,
    pub t: Option<f64>,
    pub h: Option<f64>,
    pub n: Option<usize>,
    pub quadrature_tolerance: f64,
    pub phi_bias_allowance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySection {
    pub environment: VerifyEnvironment,
    pub reports: Vec<InequalityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub intertwine: String,
    pub report_format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub versions: Versions,
    pub tasks: Vec<TaskRecord>,
    pub bound: Option<BoundSection>,
    pub gap: Option<GapSection>,
    pub optimize: Option<OptimizeResult>,
    pub simulate: Option<SimulateSection>,
    pub intertwine: Option<IntertwiningResult>,
    pub verify: Option<VerifySection>,
    pub success: bool,
    /// Seconds per task; the only field that varies between identical runs.
    pub wall_clock: BTreeMap<String, f64>,
}

impl RunReport {
    /// 0 on success, 1 on a failed check or gate, 2 on any other task error.
    pub fn exit_code(&self) -> i32 {
        if self
            .tasks
            .iter()
            .any(|t| matches!(t.status, TaskStatus::GateViolation | TaskStatus::VerificationFailed))
        {
            1
        } else if self.tasks.iter().any(|t| t.status == TaskStatus::Error) {
            2
        } else {
            0
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

/// CSV series produced alongside the report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tables {
    pub bounds: String,
    pub spectrum: String,
    pub phi: String,
    pub paths: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub tables: Tables,
}

fn classify(e: &Error) -> TaskStatus {
    match e {
        Error::Mode(_) | Error::TwistSingular { .. } => TaskStatus::GateViolation,
        _ => TaskStatus::Error,
    }
}

fn bounds_header() -> String {
    "source,mode,family,parameters,rho_b,rho_tilde_b,defect_norm,asymmetry,max_condition\n".into()
}

fn bounds_row(out: &mut String, source: &str, r: &BoundReport) {
    let p: Vec<String> = r.parameters.iter().map(|v| v.to_string()).collect();
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let _ = writeln!(
        out,
        "{source},{:?},{},\"{}\",{},{},{},{},{}",
        r.mode,
        r.twist_family,
        p.join(" "),
        opt(r.rho_b),
        r.rho_tilde_b,
        r.defect_norm,
        r.asymmetry,
        r.max_condition
    );
}

/// Executes the configured tasks in the fixed order.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let prepared = config.validate()?;
    let model = &prepared.model;
    let mode = prepared.mode;
    let mut twist = prepared.twist.clone();
    let mut tables = Tables {
        bounds: bounds_header(),
        ..Default::default()
    };
    let mut report = RunReport {
        config: config.clone(),
        versions: Versions {
            intertwine: env!("CARGO_PKG_VERSION").into(),
            report_format: REPORT_FORMAT,
        },
        tasks: vec![],
        bound: None,
        gap: None,
        optimize: None,
        simulate: None,
        intertwine: None,
        verify: None,
        success: true,
        wall_clock: BTreeMap::new(),
    };
    let bound_opts = BoundOptions {
        tilde_epsilon: config.twist.tilde_epsilon(),
        ..Default::default()
    };
    let sim = config.simulation.clone();
    let settings = sim
        .as_ref()
        .map(|s| SimSettings::new(s.t, s.h, s.n, s.seed.unwrap_or(0)));
    let x0 = ChartPoint::new(&prepared.x0);

    for task in Task::ORDER {
        if !config.has(task) {
            continue;
        }
        let started = Instant::now();
        let outcome: Result<TaskStatus> = match task {
            Task::Bound => (|| {
                let rho = rho_inf(model)?;
                let r = bound_scan_with(model, &twist, mode, &bound_opts)?;
                bounds_row(&mut tables.bounds, "bound", &r);
                report.bound = Some(BoundSection { rho, report: r });
                Ok(TaskStatus::Ok)
            })(),
            Task::Gap => (|| {
                let grid = config.gap_grid();
                let refine = config.gap.as_ref().is_none_or(|g| g.refine);
                let (g, spectrum) = gap_with_refinement(model, &grid, refine)?;
                let d = discretize(model, &grid)?;
                let mut csv = String::new();
                let names: Vec<String> = (0..model.dim()).map(|i| format!("x{i}")).collect();
                let _ = writeln!(csv, "{},eigenfunction", names.join(","));
                for (k, v) in spectrum.eigvec.iter().enumerate() {
                    let p: Vec<String> = d.node(k).iter().map(|c| c.to_string()).collect();
                    let _ = writeln!(csv, "{},{v}", p.join(","));
                }
                tables.spectrum = csv;
                let bound = report.bound.as_ref().map(|b| b.report.bound());
                report.gap = Some(GapSection {
                    gap_ratio: bound.map(|b| b / g.lambda1),
                    sound: bound.map(|b| b <= g.lambda1 + SOUNDNESS_TOLERANCE),
                    report: g,
                });
                Ok(TaskStatus::Ok)
            })(),
            Task::Optimize => (|| {
                let budget = config.optimize.clone().unwrap_or_default().budget();
                let r = optimize_twist(model, &prepared.twist_spec, mode, &budget, &config.gap_grid())?;
                bounds_row(&mut tables.bounds, "optimize", &r.report);
                twist = twist.with_parameters(&r.parameters);
                let status = if r.sound {
                    TaskStatus::Ok
                } else {
                    TaskStatus::VerificationFailed
                };
                report.optimize = Some(r);
                Ok(status)
            })(),
            Task::Simulate => (|| {
                let sim = sim.as_ref().expect("validated");
                let s = settings.expect("validated");
                let mut csv = String::from("path,step,t");
                for i in 0..model.dim() {
                    let _ = write!(csv, ",x{i}");
                }
                csv.push_str(",transport_norm\n");
                let tw = (sim.transport == TransportMode::TwistedDeformed).then_some(&twist);
                let mut exited = 0;
                for i in 0..sim.record_paths as u64 {
                    let path = simulate_path(model, &x0, s.t, s.h, s.seed, i)?;
                    exited += usize::from(path.exited);
                    let maps = transport(model, &path, sim.transport, tw)?;
                    for (k, (p, w)) in path.points.iter().zip(&maps.maps).enumerate() {
                        let coords: Vec<String> = p.iter().map(|c| c.to_string()).collect();
                        let _ = writeln!(
                            csv,
                            "{i},{k},{},{},{}",
                            path.times[k],
                            coords.join(","),
                            linalg::operator_norm(w)
                        );
                    }
                }
                tables.paths = csv;
                let estimate = match &sim.test_function {
                    Some(f) => Some(estimate_p(model, &SmoothField::parse(f, model.dim())?, &x0, &s)?),
                    None => None,
                };
                report.simulate = Some(SimulateSection {
                    x0: prepared.x0.clone(),
                    transport: sim.transport,
                    recorded_paths: sim.record_paths,
                    exited_paths: exited,
                    estimate,
                });
                Ok(TaskStatus::Ok)
            })(),
            Task::Intertwine => (|| {
                let sim = sim.as_ref().expect("validated");
                let f = SmoothField::parse(sim.test_function.as_deref().expect("validated"), model.dim())?;
                let r = intertwining_residual(model, &twist, mode, &f, &x0, &settings.expect("validated"), sim.delta)?;
                let status = if r.pass {
                    TaskStatus::Ok
                } else {
                    TaskStatus::VerificationFailed
                };
                report.intertwine = Some(r);
                Ok(status)
            })(),
            Task::Verify => (|| {
                let (section, phi) = run_verify(config, model, &twist, mode, &prepared.x0)?;
                tables.phi = phi;
                let status = if section
                    .reports
                    .iter()
                    .any(|r| r.verdict == Verdict::HypothesisViolation)
                {
                    TaskStatus::GateViolation
                } else if section.reports.iter().all(|r| r.pass) {
                    TaskStatus::Ok
                } else {
                    TaskStatus::VerificationFailed
                };
                report.verify = Some(section);
                Ok(status)
            })(),
        };
        let (status, error) = match outcome {
            Ok(s) => (s, None),
            Err(e) => (classify(&e), Some(e.to_string())),
        };
        report
            .wall_clock
            .insert(task.name().into(), started.elapsed().as_secs_f64());
        report.tasks.push(TaskRecord { task, status, error });
    }
    report.success = report.exit_code() == 0;
    Ok(RunOutput { report, tables })
}

fn run_verify(
    config: &RunConfig,
    model: &crate::model::ModelSpec,
    twist: &Twist,
    mode: crate::twistcalc::BoundMode,
    x0: &[f64],
) -> Result<(VerifySection, String)> {
    let v = config.verify_config();
    let dim = model.dim();
    let sim = config.simulation.as_ref();
    let parse = |s: &str| SmoothField::parse(s, dim);
    let functions = v
        .functions
        .clone()
        .unwrap_or_else(|| verify::builtin_test_functions(dim));
    let mut reports = Vec::new();
    let mut phi = String::new();
    for check in &v.checks {
        match check {
            Check::Poincare | Check::BrascampLieb => {
                let kind = if *check == Check::Poincare {
                    VarianceKind::Poincare
                } else {
                    VarianceKind::BrascampLieb
                };
                for f in &functions {
                    reports.push(verify::check_variance_inequality(model, twist, &parse(f)?, kind, mode)?);
                }
            }
            Check::AsymmetricBl => {
                let pairs = v
                    .asymmetric_pairs
                    .clone()
                    .unwrap_or_else(|| vec![["x".into(), "x".into()], ["x".into(), "sin(x)".into()]]);
                for [f, g] in &pairs {
                    reports.push(verify::check_asymmetric_bl(model, &parse(f)?, &parse(g)?)?);
                }
            }
            Check::Concentration => {
                let fs = v
                    .lipschitz_functions
                    .clone()
                    .unwrap_or_else(|| vec!["x".into(), "tanh(x)".into()]);
                for f in &fs {
                    match verify::check_concentration(model, &parse(f)?, &v.radii) {
                        Ok(r) => reports.extend(r),
                        Err(e @ Error::Precondition(_)) => reports.push(InequalityReport::violation(
                            &format!("concentration[{f}]"),
                            verify::Method::Quadrature,
                            e.to_string(),
                        )),
                        Err(e) => return Err(e),
                    }
                }
            }
            Check::PhiDecay => {
                let s = sim.expect("validated");
                let outer = match &v.phi_grid {
                    Some(g) => g.region(),
                    None => coarse(&model.region),
                };
                let r = verify::check_phi_decay(
                    model,
                    twist,
                    mode,
                    &parse(&v.phi_function)?,
                    &v.phi_times,
                    &outer,
                    s.n,
                    s.h,
                    s.seed.unwrap_or(0),
                )?;
                phi.push_str("t,phi,envelope,tolerance,pass\n");
                for (t, item) in v.phi_times.iter().zip(&r) {
                    let _ = writeln!(phi, "{t},{},{},{},{}", item.lhs, item.rhs, item.tolerance, item.pass);
                }
                reports.extend(r);
            }
            Check::MatrixLemma => {
                let seed = sim.and_then(|s| s.seed).unwrap_or(0);
                reports.push(verify::check_matrix_lemma(v.matrix_dim, v.matrix_trials, seed)?);
            }
            Check::Gronwall => {
                let s = sim.expect("validated");
                reports.push(verify::check_gronwall(
                    model,
                    &ChartPoint::new(x0),
                    s.t,
                    s.h,
                    v.gronwall_paths,
                    s.seed.unwrap_or(0),
                )?);
            }
        }
    }
    let environment = VerifyEnvironment {
        region: model.region.clone(),
        seed: sim.and_then(|s| s.seed),
        t: sim.map(|s| s.t),
        h: sim.map(|s| s.h),
        n: sim.map(|s| s.n),
        quadrature_tolerance: verify::QUADRATURE_TOLERANCE,
        phi_bias_allowance: verify::PHI_BIAS_ALLOWANCE,
    };
    Ok((VerifySection { environment, reports }, phi))
}

/// At most nine nodes per axis over the same box.
fn coarse(r: &Region) -> Region {
    let pts: Vec<usize> = r.points.iter().map(|&p| p.min(9)).collect();
    Region::new(&r.lower, &r.upper, &pts)
}

/// Writes `report.json` and the non-empty CSV tables into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), out.report.to_json()?)?;
    for (name, body) in [
        ("bounds.csv", &out.tables.bounds),
        ("spectrum.csv", &out.tables.spectrum),
        ("phi.csv", &out.tables.phi),
        ("paths.csv", &out.tables.paths),
    ] {
        if body.lines().nth(1).is_some() {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(extra: &str, tasks: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            "tasks = {tasks}\n[model]\nmanifold = \"euclidean\"\npotential = \"x^2/2\"\nregion = {{ lower = [-8.0], upper = [8.0], points = [401] }}\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn ou_bound_and_gap() {
        let out = run(&config("", r#"["gap", "bound"]"#)).unwrap();
        let r = &out.report;
        assert_eq!(r.tasks[0].task, Task::Bound);
        assert!((r.bound.as_ref().unwrap().report.bound() - 1.0).abs() < 1e-9);
        let g = r.gap.as_ref().unwrap();
        assert!((g.report.lambda1 - 1.0).abs() < 1e-2);
        assert!((g.gap_ratio.unwrap() - 1.0).abs() < 1e-2);
        assert_eq!(r.exit_code(), 0);
        assert!(out.tables.spectrum.lines().count() > 400);
    }

    #[test]
    fn shear_plain_is_gate_violation() {
        let c = RunConfig::from_toml(
            "tasks = [\"bound\"]\n[model]\nmanifold = \"euclidean\"\ndim = 2\npotential = \"(x^2+y^2)/2\"\nregion = { lower = [-1.0, -1.0], upper = [1.0, 1.0], points = [5, 5] }\n[twist]\nfamily = \"shear\"\nexpr = \"x\"\n",
        )
        .unwrap();
        let out = run(&c).unwrap();
        assert_eq!(out.report.tasks[0].status, TaskStatus::GateViolation);
        assert_eq!(out.report.exit_code(), 1);
    }

    #[test]
    fn deterministic_apart_from_wall_clock() {
        let c = config(
            "[simulation]\nt = 0.2\nh = 0.01\nn = 200\nseed = 5\nx0 = [0.3]\ntest_function = \"sin(x)\"\n[verify]\nchecks = [\"poincare\", \"gronwall\", \"matrix-lemma\"]\ngronwall_paths = 20\nmatrix_trials = 20\n",
            r#"["bound", "simulate", "intertwine", "verify"]"#,
        );
        let mut a = run(&c).unwrap().report;
        let mut b = run(&c).unwrap().report;
        a.wall_clock.clear();
        b.wall_clock.clear();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.exit_code(), 0, "{:?}", a.tasks);
        let echo: RunConfig = serde_json::from_str(&serde_json::to_string(&a.config).unwrap()).unwrap();
        assert_eq!(echo, c);
    }
}
