//! Inequality checks against quadrature, Monte-Carlo and matrix oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::SmoothField;
use crate::geometry::ChartPoint;
use crate::linalg;
use crate::model::{rho_inf, ModelSpec, Region};
use crate::pathsim::{stream_path, Noise, TimeGrid};
use crate::semigroup::{estimate_phi, SimSettings};
use crate::spectral::integrate_mu;
use crate::twistcalc::{bound_scan, twist_eval_raw, BoundMode, BoundReport, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Quadrature,
    MonteCarlo,
    Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The inequality's hypothesis does not hold; nothing was compared.
    HypothesisViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub verdict: Verdict,
    pub method: Method,
    pub truncation_warning: bool,
    pub note: Option<String>,
}

impl InequalityReport {
    pub fn compare(name: &str, lhs: f64, rhs: f64, tolerance: f64, method: Method) -> Self {
        let pass = lhs <= rhs + tolerance;
        // Differences at rounding level are equality cases.
        let mut slack = rhs - lhs;
        if slack.abs() <= 64.0 * f64::EPSILON * lhs.abs().max(rhs.abs()).max(1.0) {
            slack = 0.0;
        }
        InequalityReport {
            name: name.to_string(),
            lhs,
            rhs,
            slack,
            tolerance,
            pass,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            method,
            truncation_warning: false,
            note: None,
        }
    }

    pub fn violation(name: &str, method: Method, note: String) -> Self {
        InequalityReport {
            name: name.to_string(),
            lhs: f64::NAN,
            rhs: f64::NAN,
            slack: f64::NAN,
            tolerance: 0.0,
            pass: false,
            verdict: Verdict::HypothesisViolation,
            method,
            truncation_warning: false,
            note: Some(note),
        }
    }

    fn with_truncation(mut self, flag: bool) -> Self {
        self.truncation_warning = flag;
        self
    }

    fn with_note(mut self, note: String) -> Self {
        self.note = Some(note);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceKind {
    Poincare,
    BrascampLieb,
}

/// Relative tolerance applied to quadrature comparisons.
pub const QUADRATURE_TOLERANCE: f64 = 1e-6;

fn frame_gradient(model: &ModelSpec, f: &SmoothField, x: &[f64]) -> Result<DVector<f64>> {
    let d = DVector::from_vec(f.gradient(x, &[]));
    if model.manifold.is_flat_identity() {
        return Ok(d);
    }
    Ok(model.manifold.local(x)?.frame.transpose() * d)
}

/// Runs the bound scan for `mode`; gate failures become violation notes.
fn gated_bound(model: &ModelSpec, twist: &Twist, mode: BoundMode) -> Result<std::result::Result<BoundReport, String>> {
    match bound_scan(model, twist, mode) {
        Ok(r) => Ok(Ok(r)),
        Err(e @ Error::Mode(_)) | Err(e @ Error::TwistSingular { .. }) => Ok(Err(e.to_string())),
        Err(e) => Err(e),
    }
}

fn variance(model: &ModelSpec, f: &SmoothField) -> Result<(f64, bool)> {
    let r = &model.region;
    let m1 = integrate_mu(model, r, |x| f.value(x, &[]))?;
    let m2 = integrate_mu(model, r, |x| (f.value(x, &[]) - m1.value).powi(2))?;
    Ok((m2.value, m2.truncation_warning))
}

/// Poincaré or generalized Brascamp–Lieb inequality for `f`, with the
/// operator given by the twisted potential of `twist` in `mode`.
pub fn check_variance_inequality(
    model: &ModelSpec,
    twist: &Twist,
    f: &SmoothField,
    kind: VarianceKind,
    mode: BoundMode,
) -> Result<InequalityReport> {
    let name = format!(
        "{}-{}[{}]",
        match kind {
            VarianceKind::Poincare => "poincare",
            VarianceKind::BrascampLieb => "brascamp-lieb",
        },
        match mode {
            BoundMode::Plain => "plain",
            BoundMode::Tilde => "tilde",
        },
        f.source
    );
    let bound = match gated_bound(model, twist, mode)? {
        Ok(b) => b,
        Err(note) => return Ok(InequalityReport::violation(&name, Method::Quadrature, note)),
    };
    let (lhs, trunc) = variance(model, f)?;
    let region = &model.region;
    let rhs = match kind {
        VarianceKind::Poincare => {
            let rho = bound.bound();
            if !(rho > 0.0) {
                return Ok(InequalityReport::violation(
                    &name,
                    Method::Quadrature,
                    format!("certified bound {rho} is not positive"),
                ));
            }
            let e = integrate_mu(model, region, |x| {
                frame_gradient(model, f, x).map_or(f64::NAN, |g| g.norm_squared())
            })?;
            e.value / rho
        }
        VarianceKind::BrascampLieb => {
            let nodes = region.nodes();
            let vals: Vec<std::result::Result<f64, String>> = nodes
                .par_iter()
                .map(|x| {
                    let geom = model.manifold.local(x).map_err(|e| e.to_string())?;
                    let ev = twist_eval_raw(model, twist, x, &geom).map_err(|e| e.to_string())?;
                    let op = match mode {
                        BoundMode::Plain => ev.s_b_symmetric(),
                        BoundMode::Tilde => ev.tilde_operator(),
                    };
                    let chol = nalgebra::Cholesky::new(op)
                        .ok_or_else(|| format!("operator is not positive definite at {x:?}"))?;
                    let df = frame_gradient(model, f, x).map_err(|e| e.to_string())?;
                    Ok(df.dot(&chol.solve(&df)))
                })
                .collect();
            if let Some(Err(note)) = vals.iter().find(|v| v.is_err()) {
                return Ok(InequalityReport::violation(&name, Method::Quadrature, note.clone()));
            }
            let table: Vec<f64> = vals.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            let lookup = |x: &[f64]| {
                nodes
                    .binary_search_by(|p| p.as_slice().partial_cmp(x).unwrap_or(std::cmp::Ordering::Less))
                    .map_or(f64::NAN, |k| table[k])
            };
            integrate_mu(model, region, lookup)?.value
        }
    };
    let tol = QUADRATURE_TOLERANCE * rhs.abs().max(1.0);
    Ok(InequalityReport::compare(&name, lhs, rhs, tol, Method::Quadrature).with_truncation(trunc))
}

fn grid_sup(model: &ModelSpec, region: &Region, f: &SmoothField) -> Result<(f64, Vec<f64>)> {
    let nodes = region.nodes();
    let norms: Vec<f64> = nodes
        .par_iter()
        .map(|x| frame_gradient(model, f, x).map(|g| g.norm()))
        .collect::<Result<_>>()?;
    let (k, v) = norms
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, v)| if v > a.1 { (i, v) } else { a });
    Ok((v, nodes[k].clone()))
}

/// `|Cov_μ(f, g)| ≤ (1/ρ) ‖dg‖∞ ∫|df| dμ`.
pub fn check_asymmetric_bl(model: &ModelSpec, f: &SmoothField, g: &SmoothField) -> Result<InequalityReport> {
    let name = format!("asymmetric-brascamp-lieb[{}, {}]", f.source, g.source);
    let rho = rho_inf(model)?.value;
    if !(rho > 0.0) {
        return Ok(InequalityReport::violation(
            &name,
            Method::Quadrature,
            format!("rho = {rho} is not positive"),
        ));
    }
    let r = &model.region;
    let mf = integrate_mu(model, r, |x| f.value(x, &[]))?;
    let mg = integrate_mu(model, r, |x| g.value(x, &[]))?;
    let cov = integrate_mu(model, r, |x| {
        (f.value(x, &[]) - mf.value) * (g.value(x, &[]) - mg.value)
    })?;
    let l1 = integrate_mu(model, r, |x| frame_gradient(model, f, x).map_or(f64::NAN, |d| d.norm()))?;
    let (sup_dg, _) = grid_sup(model, r, g)?;
    let lhs = cov.value.abs();
    let rhs = sup_dg * l1.value / rho;
    let tol = QUADRATURE_TOLERANCE * rhs.abs().max(1.0);
    Ok(InequalityReport::compare(&name, lhs, rhs, tol, Method::Quadrature).with_truncation(cov.truncation_warning))
}

/// `μ(|f - μ(f)| > r) ≤ 2 exp(-ρ r²/2)` for a 1-Lipschitz `f`.
pub fn check_concentration(model: &ModelSpec, f: &SmoothField, radii: &[f64]) -> Result<Vec<InequalityReport>> {
    let rho = rho_inf(model)?.value;
    if !(rho > 0.0) {
        return Ok(vec![InequalityReport::violation(
            &format!("concentration[{}]", f.source),
            Method::Quadrature,
            format!("rho = {rho} is not positive"),
        )]);
    }
    let r = &model.region;
    let (lip, witness) = grid_sup(model, r, f)?;
    if lip > 1.0 + 1e-8 {
        return Err(Error::Precondition(format!(
            "`{}` is not 1-Lipschitz: |df| = {lip} at {witness:?}",
            f.source
        )));
    }
    let mean = integrate_mu(model, r, |x| f.value(x, &[]))?;
    radii
        .iter()
        .map(|&rad| {
            let tail = integrate_mu(model, r, |x| {
                if (f.value(x, &[]) - mean.value).abs() > rad {
                    1.0
                } else {
                    0.0
                }
            })?;
            let rhs = 2.0 * (-rho * rad * rad / 2.0).exp();
            let name = format!("concentration[{}, r={rad}]", f.source);
            Ok(
                InequalityReport::compare(&name, tail.value, rhs, 0.0, Method::Quadrature)
                    .with_truncation(tail.truncation_warning),
            )
        })
        .collect()
}

/// Allowance for the bias of squared Monte-Carlo estimates in φ(t).
pub const PHI_BIAS_ALLOWANCE: f64 = 0.05;

/// `φ(t) ≤ e^{-2ρ t} φ(0)` with `ρ = ρ_B` or `ρ̃_B` by mode.
#[allow(clippy::too_many_arguments)]
pub fn check_phi_decay(
    model: &ModelSpec,
    twist: &Twist,
    mode: BoundMode,
    f: &SmoothField,
    times: &[f64],
    outer: &Region,
    n: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<InequalityReport>> {
    let label = |t: f64| {
        format!(
            "phi-decay-{}[{}, t={t}]",
            if mode == BoundMode::Plain { "plain" } else { "tilde" },
            f.source
        )
    };
    let bound = match gated_bound(model, twist, mode)? {
        Ok(b) => b,
        Err(note) => return Ok(vec![InequalityReport::violation(&label(0.0), Method::MonteCarlo, note)]),
    };
    let rho = bound.bound();
    let phi0 = integrate_mu(model, outer, |x| {
        frame_gradient(model, f, x).map_or(f64::NAN, |g| g.norm_squared())
    })?;
    times
        .iter()
        .map(|&t| {
            let rhs = (-2.0 * rho * t).exp() * phi0.value;
            if t == 0.0 {
                return Ok(InequalityReport::compare(
                    &label(t),
                    phi0.value,
                    rhs,
                    0.0,
                    Method::Quadrature,
                ));
            }
            let est = estimate_phi(model, twist, f, outer, &SimSettings::new(t, h.min(t), n, seed))?;
            let tol = 3.0 * est.stderr + PHI_BIAS_ALLOWANCE * rhs.abs();
            Ok(
                InequalityReport::compare(&label(t), est.value, rhs, tol, Method::MonteCarlo)
                    .with_truncation(phi0.truncation_warning)
                    .with_note(format!(
                        "rho = {rho}; stderr = {:.3e}; squared-estimator bias = {:.3e}; exit fraction = {:.3e}",
                        est.stderr, est.bias, est.exit_fraction
                    )),
            )
        })
        .collect()
}

/// `0 ≤ D^{-1} - (C + D)^{-1}` for random PSD `C` and PD `D` of dimension up
/// to `dim`.
pub fn check_matrix_lemma(dim: usize, trials: usize, seed: u64) -> Result<InequalityReport> {
    if dim == 0 {
        return Err(Error::Config("matrix lemma needs dimension at least 1".into()));
    }
    let mut rng = crate::rng::path_stream(seed, 0);
    let mut worst = f64::INFINITY;
    for trial in 0..trials {
        let n = rng.random_range(1..=dim);
        let rank = if trial == 0 { 0 } else { rng.random_range(0..=n) };
        let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = gauss(rank, n);
        let b = gauss(n, n);
        let c = a.transpose() * a;
        let d = b.transpose() * b + DMatrix::identity(n, n) * 0.1;
        let inv = |m: DMatrix<f64>| {
            nalgebra::Cholesky::new(linalg::symmetric_part(&m))
                .map(|ch| ch.inverse())
                .ok_or_else(|| Error::Numeric("Cholesky failed in matrix lemma".into()))
        };
        let diff = inv(d.clone())? - inv(c + d)?;
        let lmin = nalgebra::SymmetricEigen::new(linalg::symmetric_part(&diff))
            .eigenvalues
            .min();
        worst = worst.min(lmin);
    }
    Ok(InequalityReport::compare(
        &format!("matrix-lemma[dim<={dim}, trials={trials}]"),
        -worst,
        0.0,
        1e-10,
        Method::Matrix,
    ))
}

/// Pathwise `‖W_t‖ ≤ e^{-ρ t}` along simulated paths, up to `1 + 10 h t`.
pub fn check_gronwall(
    model: &ModelSpec,
    x0: &ChartPoint,
    t: f64,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<InequalityReport> {
    let rho = rho_inf(model)?.value;
    model.manifold.check(x0)?;
    let grid = TimeGrid::new(t, h)?;
    let he = grid.h();
    let worst: Vec<(f64, bool)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut m = 0.0f64;
            let e = stream_path(
                model,
                x0.as_slice(),
                grid,
                Noise::Brownian,
                seed,
                i,
                Some(true),
                |k, _, w| {
                    if let Some(w) = w {
                        m = m.max(linalg::operator_norm(w) * (rho * grid.time(k)).exp());
                    }
                },
            )?;
            Ok((m, e.exited))
        })
        .collect::<Result<_>>()?;
    let lhs = worst.iter().map(|w| w.0).fold(0.0, f64::max);
    let exits = worst.iter().filter(|w| w.1).count();
    let rhs = 1.0 + 10.0 * he * t;
    Ok(
        InequalityReport::compare(&format!("gronwall[rho={rho}]"), lhs, rhs, 0.0, Method::MonteCarlo)
            .with_note(format!("{n} paths, {exits} truncated at chart exit")),
    )
}

/// Smooth, rapidly decaying or slowly growing test functions.
pub fn builtin_test_functions(dim: usize) -> Vec<String> {
    let one = [
        "x",
        "x^2",
        "sin(x)",
        "cos(2*x)",
        "exp(-x^2)",
        "tanh(x)",
        "x^3 - x",
        "exp(x/2)",
        "sin(x)*exp(-x^2/4)",
        "1/(1 + x^2)",
    ];
    if dim == 1 {
        return one.iter().map(|s| s.to_string()).collect();
    }
    let two = [
        "x",
        "y",
        "x*y",
        "x^2 - y^2",
        "sin(x + y)",
        "exp(-(x^2 + y^2))",
        "tanh(x - 2*y)",
        "x^3 + y",
        "cos(x)*sin(y)",
        "1/(1 + x^2 + y^2)",
    ];
    two.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldSpec;
    use crate::twistcalc::TwistSpec;

    fn ou() -> ModelSpec {
        ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-10.0, 10.0, 2001)).unwrap()
    }

    fn field(s: &str, d: usize) -> SmoothField {
        SmoothField::parse(s, d).unwrap()
    }

    #[test]
    fn ou_brascamp_lieb_equality() {
        let id = Twist::compile(&TwistSpec::identity(), 1).unwrap();
        let r = check_variance_inequality(&ou(), &id, &field("x", 1), VarianceKind::BrascampLieb, BoundMode::Plain)
            .unwrap();
        assert!(r.pass);
        assert!((r.lhs - 1.0).abs() < 1e-8 && (r.rhs - 1.0).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_variance() {
        let id = Twist::compile(&TwistSpec::identity(), 1).unwrap();
        let r =
            check_variance_inequality(&ou(), &id, &field("3", 1), VarianceKind::Poincare, BoundMode::Plain).unwrap();
        assert!(r.pass);
        assert!(r.lhs.abs() < 1e-14 && r.rhs == 0.0);
    }

    #[test]
    fn plain_gate_reports_violation() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "(x^2+y^2)/2",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[5, 5]),
        )
        .unwrap();
        let t = Twist::compile(&TwistSpec::shear("x"), 2).unwrap();
        let r = check_variance_inequality(&m, &t, &field("x", 2), VarianceKind::Poincare, BoundMode::Plain).unwrap();
        assert_eq!(r.verdict, Verdict::HypothesisViolation);
        assert!(!r.pass);
    }

    #[test]
    fn stein_identity() {
        let r = check_asymmetric_bl(&ou(), &field("x", 1), &field("sin(x)", 1)).unwrap();
        assert!((r.lhs - (-0.5f64).exp()).abs() < 1e-6, "{r:?}");
        assert!((r.rhs - 1.0).abs() < 1e-6);
        assert!(r.pass);
    }

    #[test]
    fn concentration_needs_lipschitz() {
        assert!(matches!(
            check_concentration(&ou(), &field("x^2", 1), &[1.0]),
            Err(Error::Precondition(_))
        ));
        let r = check_concentration(&ou(), &field("x", 1), &[0.0, 1.0]).unwrap();
        assert!(r.iter().all(|r| r.pass));
        assert!((r[1].lhs - 0.3173).abs() < 5e-3, "{:?}", r[1]);
    }

    #[test]
    fn matrix_lemma_scalar_and_batch() {
        let r = check_matrix_lemma(1, 50, 1).unwrap();
        assert!(r.pass);
        let r = check_matrix_lemma(8, 200, 2).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn gronwall_flat_is_equality() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "0",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[3, 3]),
        )
        .unwrap();
        let r = check_gronwall(&m, &ChartPoint::new(&[0.0, 0.0]), 0.5, 0.01, 20, 3).unwrap();
        assert!(r.pass);
        assert_eq!(r.lhs, 1.0);
    }
}
