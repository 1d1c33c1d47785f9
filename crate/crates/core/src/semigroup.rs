//! Monte-Carlo estimators for `P_t f`, `⟨Q_t α, v⟩`, `⟨Q^B_t α, v⟩` and the
//! intertwining residual, with common random numbers across estimators.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, SmoothField};
use crate::geometry::ChartPoint;
use crate::linalg;
use crate::model::{ModelSpec, Region};
use crate::pathsim::{stream_path, Noise, TimeGrid};
use crate::twistcalc::{bound_scan_with, BoundMode, BoundOptions, Twist};

/// Monte-Carlo settings shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub t: f64,
    pub h: f64,
    pub n: usize,
    pub seed: u64,
    pub noise: Noise,
}

impl SimSettings {
    pub fn new(t: f64, h: f64, n: usize, seed: u64) -> Self {
        SimSettings {
            t,
            h,
            n,
            seed,
            noise: Noise::Brownian,
        }
    }

    fn grid(&self) -> Result<TimeGrid> {
        if self.n < 2 {
            return Err(Error::Config(format!("need at least 2 paths, got {}", self.n)));
        }
        TimeGrid::new(self.t, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub exit_fraction: f64,
    pub seed: u64,
    pub t: f64,
    pub h: f64,
}

/// 1-form `α = Σ α_i dx^i` given by coordinate-component expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct OneForm {
    pub components: Vec<Expr>,
}

impl OneForm {
    pub fn parse(components: &[&str], dim: usize) -> Result<Self> {
        if components.len() != dim {
            return Err(Error::Config(format!("1-form needs {dim} components")));
        }
        let components = components
            .iter()
            .map(|s| SmoothField::parse(s, dim).map(|f| f.expr))
            .collect::<Result<Vec<_>>>()?;
        Ok(OneForm { components })
    }

    /// Exact form `df`.
    pub fn exact(f: &SmoothField) -> Self {
        OneForm {
            components: f.grad.clone(),
        }
    }

    pub fn zero(dim: usize) -> Self {
        OneForm {
            components: vec![Expr::Const(0.0); dim],
        }
    }

    fn coordinates(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.components.len(), self.components.iter().map(|c| c.eval(x, &[])))
    }

    /// Frame components `Eᵀ α`.
    pub fn frame_components(&self, model: &ModelSpec, x: &[f64]) -> Result<DVector<f64>> {
        let a = self.coordinates(x);
        if model.manifold.is_flat_identity() {
            return Ok(a);
        }
        Ok(model.manifold.local(x)?.frame.transpose() * a)
    }
}

fn estimate_from(samples: &[f64], exited: usize, s: &SimSettings) -> Result<MCEstimate> {
    if exited == samples.len() {
        return Err(Error::Degenerate("every path left the chart domain".into()));
    }
    let (value, stderr) = linalg::mean_stderr(samples);
    Ok(MCEstimate {
        value,
        stderr,
        n_paths: samples.len(),
        exit_fraction: exited as f64 / samples.len() as f64,
        seed: s.seed,
        t: s.t,
        h: s.h,
    })
}

fn start(model: &ModelSpec, x: &ChartPoint) -> Result<Vec<f64>> {
    model.manifold.check(x)?;
    let mut p = x.as_slice().to_vec();
    model.manifold.domain.wrap(&mut p);
    Ok(p)
}

/// `P_t f(x) = E[f(X_t) 1_{t<τ}]`.
pub fn estimate_p(model: &ModelSpec, f: &SmoothField, x: &ChartPoint, s: &SimSettings) -> Result<MCEstimate> {
    let grid = s.grid()?;
    let x0 = start(model, x)?;
    let out: Vec<(f64, bool)> = (0..s.n as u64)
        .into_par_iter()
        .map(|i| {
            let e = stream_path(model, &x0, grid, s.noise, s.seed, i, None, |_, _, _| {})?;
            Ok(if e.exited {
                (0.0, true)
            } else {
                (f.value(&e.x, &[]), false)
            })
        })
        .collect::<Result<_>>()?;
    let exited = out.iter().filter(|o| o.1).count();
    let vals: Vec<f64> = out.into_iter().map(|o| o.0).collect();
    estimate_from(&vals, exited, s)
}

/// Per-path `⟨α(X_t), W v⟩` (or `W^B v`) in frame components.
fn q_sample(
    model: &ModelSpec,
    twist: Option<(&Twist, &DMatrix<f64>)>,
    x0: &[f64],
    grid: TimeGrid,
    s: &SimSettings,
    i: u64,
) -> Result<Option<(Vec<f64>, DMatrix<f64>)>> {
    let e = stream_path(model, x0, grid, s.noise, s.seed, i, Some(true), |_, _, _| {})?;
    if e.exited {
        return Ok(None);
    }
    let mut w = e.w.expect("deformed transport requested");
    if let Some((tw, right)) = twist {
        tw.bstar_inverse(&e.x)?;
        w = tw.bstar(&e.x).transpose() * w * right;
    }
    Ok(Some((e.x, w)))
}

/// `⟨Q_t α, v⟩(x)` or, with a twist, `⟨Q^B_t α, v⟩(x)`.
pub fn estimate_q(
    model: &ModelSpec,
    twist: Option<&Twist>,
    alpha: &OneForm,
    x: &ChartPoint,
    v: &[f64],
    s: &SimSettings,
) -> Result<MCEstimate> {
    let grid = s.grid()?;
    let x0 = start(model, x)?;
    let n = model.dim();
    if v.len() != n || alpha.components.len() != n {
        return Err(Error::Config("vector and 1-form must match the model dimension".into()));
    }
    let v = DVector::from_column_slice(v);
    let right = match twist {
        Some(t) => Some(t.bstar_inverse(&x0)?.0.transpose()),
        None => None,
    };
    let tw = twist.zip(right.as_ref());
    let out: Vec<(f64, bool)> = (0..s.n as u64)
        .into_par_iter()
        .map(|i| {
            Ok(match q_sample(model, tw, &x0, grid, s, i)? {
                None => (0.0, true),
                Some((xt, w)) => (alpha.frame_components(model, &xt)?.dot(&(w * &v)), false),
            })
        })
        .collect::<Result<_>>()?;
    let exited = out.iter().filter(|o| o.1).count();
    let vals: Vec<f64> = out.into_iter().map(|o| o.0).collect();
    estimate_from(&vals, exited, s)
}

/// Componentwise comparison of `(B*)^{-1} dP_t f` with `Q^B_t((B*)^{-1} df)`
/// at one point, in frame components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntertwiningResult {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub residual: Vec<f64>,
    /// Standard error of the per-path residual.
    pub stderr: Vec<f64>,
    pub tolerance: Vec<f64>,
    pub pass: bool,
    pub exit_fraction: f64,
    pub n_paths: usize,
    pub delta: f64,
    pub t: f64,
    pub h: f64,
    pub seed: u64,
}

/// Default finite-difference step for `dP_t f`.
pub const DEFAULT_DELTA: f64 = 1e-2;
/// Bias floor in the residual acceptance rule.
pub const RESIDUAL_FLOOR: f64 = 1e-2;

/// Both sides driven by the same random streams: path `i` from `x`, and from
/// `x ± δ e_a` for every coordinate `a`, share stream `(seed, i)`.
pub fn intertwining_residual(
    model: &ModelSpec,
    twist: &Twist,
    mode: BoundMode,
    f: &SmoothField,
    x: &ChartPoint,
    s: &SimSettings,
    delta: f64,
) -> Result<IntertwiningResult> {
    let opts = BoundOptions {
        refine: false,
        ..Default::default()
    };
    bound_scan_with(model, twist, mode, &opts)?;
    let grid = s.grid()?;
    let n = model.dim();
    let x0 = start(model, x)?;
    if !(delta > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut shifted = Vec::with_capacity(2 * n);
    for a in 0..n {
        for sign in [1.0, -1.0] {
            let mut y = x0.clone();
            y[a] += sign * delta;
            model.manifold.domain.check(&y)?;
            model.manifold.domain.wrap(&mut y);
            shifted.push(y);
        }
    }
    let (b0_inv, _) = twist.bstar_inverse(&x0)?;
    let frame0_t = if model.manifold.is_flat_identity() {
        DMatrix::identity(n, n)
    } else {
        model.manifold.local(&x0)?.frame.transpose()
    };
    let left_map = &b0_inv * frame0_t;
    let right = b0_inv.transpose();
    let form = OneForm::exact(f);

    // A path index counts only if every one of its streams stays in the chart.
    let per_path: Vec<Option<(DVector<f64>, DVector<f64>)>> = (0..s.n as u64)
        .into_par_iter()
        .map(|i| {
            let mut coord = DVector::zeros(n);
            for a in 0..n {
                let mut val = [0.0; 2];
                for (k, v) in val.iter_mut().enumerate() {
                    let e = stream_path(model, &shifted[2 * a + k], grid, s.noise, s.seed, i, None, |_, _, _| {})?;
                    if e.exited {
                        return Ok(None);
                    }
                    *v = f.value(&e.x, &[]);
                }
                coord[a] = (val[0] - val[1]) / (2.0 * delta);
            }
            let Some((xt, wb)) = q_sample(model, Some((twist, &right)), &x0, grid, s, i)? else {
                return Ok(None);
            };
            let (bx_inv, _) = twist.bstar_inverse(&xt)?;
            let a = bx_inv * form.frame_components(model, &xt)?;
            Ok(Some((&left_map * coord, wb.transpose() * a)))
        })
        .collect::<Result<_>>()?;

    let kept: Vec<&(DVector<f64>, DVector<f64>)> = per_path.iter().flatten().collect();
    let exited = per_path.len() - kept.len();
    if kept.len() < 2 {
        return Err(Error::Degenerate(
            "fewer than two paths stayed in the chart domain".into(),
        ));
    }
    let mut lhs = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut residual = vec![0.0; n];
    let mut stderr = vec![0.0; n];
    for a in 0..n {
        let l: Vec<f64> = kept.iter().map(|p| p.0[a]).collect();
        let r: Vec<f64> = kept.iter().map(|p| p.1[a]).collect();
        let d: Vec<f64> = kept.iter().map(|p| p.0[a] - p.1[a]).collect();
        lhs[a] = linalg::mean_stderr(&l).0;
        rhs[a] = linalg::mean_stderr(&r).0;
        let (m, se) = linalg::mean_stderr(&d);
        residual[a] = m;
        stderr[a] = se;
    }
    let tolerance: Vec<f64> = stderr.iter().map(|se| (3.0 * se).max(RESIDUAL_FLOOR)).collect();
    let pass = residual.iter().zip(&tolerance).all(|(r, t)| r.abs() <= *t);
    Ok(IntertwiningResult {
        lhs,
        rhs,
        residual,
        stderr,
        tolerance,
        pass,
        exit_fraction: exited as f64 / s.n as f64,
        n_paths: s.n,
        delta,
        t: s.t,
        h: s.h,
        seed: s.seed,
    })
}

/// `φ(t) = ∫ |Q^B_t((B*)^{-1} df)|²_B dμ` by quadrature over a coarse grid
/// of squared Monte-Carlo estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    /// Upward bias of the squared estimator, `Σ w_x Σ_a se_a²`.
    pub bias: f64,
    pub exit_fraction: f64,
}

pub fn estimate_phi(
    model: &ModelSpec,
    twist: &Twist,
    f: &SmoothField,
    grid_region: &Region,
    s: &SimSettings,
) -> Result<PhiEstimate> {
    let (nodes, weights, _) = crate::spectral::mu_weights(model, grid_region)?;
    let n = model.dim();
    let form = OneForm::exact(f);
    let mut value = 0.0;
    let mut var = 0.0;
    let mut bias = 0.0;
    let mut exits = 0usize;
    for (x, w) in nodes.iter().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        let grid = s.grid()?;
        let (b0_inv, _) = twist.bstar_inverse(x)?;
        let b0 = twist.bstar(x);
        let right = b0_inv.transpose();
        let samples: Vec<Option<DVector<f64>>> = (0..s.n as u64)
            .into_par_iter()
            .map(|i| {
                Ok(match q_sample(model, Some((twist, &right)), x, grid, s, i)? {
                    None => None,
                    Some((xt, wb)) => {
                        let (bx_inv, _) = twist.bstar_inverse(&xt)?;
                        let a = bx_inv * form.frame_components(model, &xt)?;
                        Some(&b0 * (wb.transpose() * a))
                    }
                })
            })
            .collect::<Result<_>>()?;
        exits += samples.iter().filter(|s| s.is_none()).count();
        for a in 0..n {
            let comp: Vec<f64> = samples.iter().map(|q| q.as_ref().map_or(0.0, |q| q[a])).collect();
            let (m, se) = linalg::mean_stderr(&comp);
            value += w * m * m;
            var += (w * 2.0 * m * se).powi(2);
            bias += w * se * se;
        }
    }
    Ok(PhiEstimate {
        t: s.t,
        value,
        stderr: var.sqrt(),
        bias,
        exit_fraction: exits as f64 / (nodes.len() * s.n) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldSpec;
    use crate::twistcalc::TwistSpec;

    fn ou() -> ModelSpec {
        ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-6.0, 6.0, 13)).unwrap()
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = SmoothField::parse("2.5", 1).unwrap();
        let e = estimate_p(
            &ou(),
            &f,
            &ChartPoint::new(&[0.3]),
            &SimSettings::new(0.5, 0.01, 100, 1),
        )
        .unwrap();
        assert_eq!(e.value, 2.5);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.exit_fraction, 0.0);
    }

    #[test]
    fn ou_mean() {
        let f = SmoothField::parse("x", 1).unwrap();
        let e = estimate_p(
            &ou(),
            &f,
            &ChartPoint::new(&[1.0]),
            &SimSettings::new(1.0, 1e-3, 20000, 2),
        )
        .unwrap();
        assert!((e.value - (-1.0f64).exp()).abs() < 3.0 * e.stderr + 1e-3, "{e:?}");
    }

    #[test]
    fn ou_q_is_deterministic() {
        let alpha = OneForm::parse(&["1"], 1).unwrap();
        let e = estimate_q(
            &ou(),
            None,
            &alpha,
            &ChartPoint::new(&[0.2]),
            &[1.0],
            &SimSettings::new(0.7, 0.01, 50, 3),
        )
        .unwrap();
        assert!((e.value - (-0.7f64).exp()).abs() < 1e-12);
        assert!(e.stderr < 1e-14);
        let z = estimate_q(
            &ou(),
            None,
            &OneForm::zero(1),
            &ChartPoint::new(&[0.2]),
            &[1.0],
            &SimSettings::new(0.7, 0.01, 50, 3),
        )
        .unwrap();
        assert_eq!((z.value, z.stderr), (0.0, 0.0));
    }

    #[test]
    fn flat_brownian_q_is_one() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "0",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[3, 3]),
        )
        .unwrap();
        let alpha = OneForm::parse(&["1", "0"], 2).unwrap();
        let id = Twist::compile(&TwistSpec::identity(), 2).unwrap();
        let e = estimate_q(
            &m,
            Some(&id),
            &alpha,
            &ChartPoint::new(&[0.0, 0.0]),
            &[1.0, 0.0],
            &SimSettings::new(0.3, 0.01, 20, 4),
        )
        .unwrap();
        assert_eq!((e.value, e.stderr), (1.0, 0.0));
    }

    #[test]
    fn all_paths_exiting_is_degenerate() {
        let m = ModelSpec::new(ManifoldSpec::interval(0.0, 0.01), "0", Region::interval(0.0, 0.01, 3)).unwrap();
        let f = SmoothField::parse("1", 1).unwrap();
        let r = estimate_p(&m, &f, &ChartPoint::new(&[0.005]), &SimSettings::new(1.0, 0.1, 10, 0));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn small_intertwining_check() {
        let f = SmoothField::parse("sin(x)", 1).unwrap();
        let id = Twist::compile(&TwistSpec::identity(), 1).unwrap();
        let r = intertwining_residual(
            &ou(),
            &id,
            BoundMode::Plain,
            &f,
            &ChartPoint::new(&[0.4]),
            &SimSettings::new(0.5, 1e-2, 4000, 5),
            DEFAULT_DELTA,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn plain_gate_blocks_defective_twist() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "(x^2+y^2)/2",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[5, 5]),
        )
        .unwrap();
        let t = Twist::compile(&TwistSpec::shear("x"), 2).unwrap();
        let f = SmoothField::parse("x", 2).unwrap();
        let r = intertwining_residual(
            &m,
            &t,
            BoundMode::Plain,
            &f,
            &ChartPoint::new(&[0.0, 0.0]),
            &SimSettings::new(0.1, 1e-2, 10, 5),
            DEFAULT_DELTA,
        );
        assert!(matches!(r, Err(Error::Mode(_))));
    }
}
