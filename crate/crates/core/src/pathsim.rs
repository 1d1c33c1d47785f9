//! Euler–Maruyama simulation of the diffusion with generator
//! `L = Δ_g - ⟨∇V, ∇·⟩` in chart coordinates, and parallel, deformed and
//! twisted-deformed transport along the resulting paths.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ChartPoint, LocalGeometry};
use crate::linalg;
use crate::model::ModelSpec;
use crate::rng;
use crate::twistcalc::Twist;

/// Time discretization shared by all path routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Uniform grid on `[0, t]` with step at most `h`.
    pub fn new(t: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {h}")));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {t}")));
        }
        if h > t {
            return Err(Error::Config(format!("time step {h} exceeds horizon {t}")));
        }
        let steps = ((t / h) - 1e-9).ceil().max(1.0) as usize;
        Ok(TimeGrid { t, steps })
    }

    pub fn h(&self) -> f64 {
        self.t / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t * k as f64 / self.steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Noise {
    Brownian,
    /// Increments forced to zero: the path solves the drift ODE.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMode {
    Parallel,
    Deformed,
    TwistedDeformed,
}

/// One discretized trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    /// Points up to and including the first point outside the chart domain.
    pub points: Vec<Vec<f64>>,
    /// Brownian increments in frame components, variance `h` per component.
    pub increments: Vec<Vec<f64>>,
    pub exited: bool,
    pub exit_index: Option<usize>,
    pub seed: u64,
    pub path_index: u64,
}

impl PathSample {
    pub fn h(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn final_point(&self) -> &[f64] {
        self.points.last().expect("path has at least its starting point")
    }
}

/// Transport maps `T_k : T_{x₀}M → T_{X_k}M` in frame components.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    pub mode: TransportMode,
    pub maps: Vec<DMatrix<f64>>,
    /// Set when the path left the chart and the maps stop at the exit.
    pub truncated: bool,
}

/// Coordinate drift `-g^{jk}Γ^i_{jk} - (g^{-1}∂V)^i` and the diffusion frame.
pub(crate) struct Stepper<'a> {
    model: &'a ModelSpec,
    flat: bool,
    n: usize,
    grad: Vec<f64>,
    drift: Vec<f64>,
    frame_diag: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(model: &'a ModelSpec) -> Self {
        let n = model.dim();
        Stepper {
            model,
            flat: model.manifold.is_flat_identity(),
            n,
            grad: vec![0.0; n],
            drift: vec![0.0; n],
            frame_diag: vec![0.0; n],
        }
    }

    /// Advance `x` by one step with standard normal draws `xi`. Returns the
    /// geometry at the starting point on curved charts when `want_geom`.
    fn advance(
        &mut self,
        x: &mut [f64],
        xi: &[f64],
        h: f64,
        want_geom: bool,
        cached: Option<LocalGeometry>,
    ) -> Result<Option<LocalGeometry>> {
        let s = (2.0 * h).sqrt();
        self.model.potential.gradient_into(x, &[], &mut self.grad);
        if self.flat {
            for i in 0..self.n {
                x[i] += -self.grad[i] * h + s * xi[i];
            }
            return Ok(None);
        }
        if !want_geom
            && self
                .model
                .manifold
                .closed_form_drift(x, &self.grad, &mut self.drift, &mut self.frame_diag)
        {
            for i in 0..self.n {
                x[i] += self.drift[i] * h + s * self.frame_diag[i] * xi[i];
            }
            return Ok(None);
        }
        let geom = match cached {
            Some(g) => g,
            None => self.model.manifold.local(x)?,
        };
        let gam = geom.christoffel.trace_with(&geom.ginv);
        for i in 0..self.n {
            let mut b = -gam[i];
            for j in 0..self.n {
                b -= geom.ginv[(i, j)] * self.grad[j];
            }
            self.drift[i] = b;
        }
        for i in 0..self.n {
            let mut noise = 0.0;
            for j in 0..self.n {
                noise += geom.frame[(i, j)] * xi[j];
            }
            x[i] += self.drift[i] * h + s * noise;
        }
        Ok(Some(geom))
    }
}

/// Per-step transport update shared by stored and streamed paths.
pub(crate) struct Transporter<'a> {
    model: &'a ModelSpec,
    deformed: bool,
    flat: bool,
}

impl<'a> Transporter<'a> {
    pub(crate) fn new(model: &'a ModelSpec, deformed: bool) -> Self {
        Transporter {
            model,
            deformed,
            flat: model.manifold.is_flat_identity(),
        }
    }

    /// Orthogonal frame connector from `T_{xk}M` to `T_{xk1}M`: a
    /// Crank–Nicolson step of `dT^i = -Γ^i_{jk} dX^j T^k`, re-orthonormalized.
    fn connector(&self, xk: &[f64], xk1: &[f64], gk: Option<&LocalGeometry>) -> Result<(DMatrix<f64>, LocalGeometry)> {
        let n = xk.len();
        let dom = &self.model.manifold.domain;
        let mut d = vec![0.0; n];
        dom.displacement(xk, xk1, &mut d);
        let mut mid: Vec<f64> = xk.iter().zip(&d).map(|(a, b)| a + 0.5 * b).collect();
        dom.wrap(&mut mid);
        let gamma = self.model.manifold.christoffel_raw(&mid)?;
        let a = gamma.contract(&d) * 0.5;
        let id = DMatrix::<f64>::identity(n, n);
        let lhs = &id + &a;
        let tc = lhs
            .lu()
            .solve(&(&id - &a))
            .ok_or_else(|| Error::Numeric("singular transport step".into()))?;
        let frame_k = match gk {
            Some(g) => g.frame.clone(),
            None => self.model.manifold.local(xk)?.frame,
        };
        let g1 = self.model.manifold.local(xk1)?;
        let r = linalg::polar_orthogonal(&(&g1.frame_inv * tc * frame_k))?;
        Ok((r, g1))
    }

    /// `W ← R_k · exp(-h 𝓜(x_k)) · W` (deformed) or `W ← R_k W` (parallel).
    /// Returns the geometry at `x_{k+1}` on curved charts.
    pub(crate) fn step(
        &self,
        xk: &[f64],
        xk1: &[f64],
        h: f64,
        gk: Option<&LocalGeometry>,
        w: &mut DMatrix<f64>,
    ) -> Result<Option<LocalGeometry>> {
        if self.deformed {
            let owned;
            let geom = match gk {
                Some(g) => g,
                None => {
                    owned = self.model.manifold.local(xk)?;
                    &owned
                }
            };
            let m = self.model.bakry_emery_raw(xk, geom)?;
            *w = linalg::expm_symmetric(&m, -h) * &*w;
        }
        if self.flat {
            return Ok(None);
        }
        let (r, g1) = self.connector(xk, xk1, gk)?;
        *w = r * &*w;
        Ok(Some(g1))
    }
}

fn check_start(model: &ModelSpec, x0: &ChartPoint) -> Result<Vec<f64>> {
    model.manifold.check(x0)?;
    let mut x = x0.as_slice().to_vec();
    model.manifold.domain.wrap(&mut x);
    Ok(x)
}

/// Simulate one path and keep every point and increment.
pub fn simulate_path(
    model: &ModelSpec,
    x0: &ChartPoint,
    t: f64,
    h: f64,
    seed: u64,
    path_index: u64,
) -> Result<PathSample> {
    simulate_path_with(model, x0, TimeGrid::new(t, h)?, Noise::Brownian, seed, path_index)
}

pub fn simulate_path_with(
    model: &ModelSpec,
    x0: &ChartPoint,
    grid: TimeGrid,
    noise: Noise,
    seed: u64,
    path_index: u64,
) -> Result<PathSample> {
    let n = model.dim();
    let mut x = check_start(model, x0)?;
    let h = grid.h();
    let sh = h.sqrt();
    let mut rng = rng::path_stream(seed, path_index);
    let mut stepper = Stepper::new(model);
    let mut xi = vec![0.0; n];
    let mut sample = PathSample {
        times: vec![0.0],
        points: vec![x.clone()],
        increments: Vec::with_capacity(grid.steps),
        exited: false,
        exit_index: None,
        seed,
        path_index,
    };
    for k in 0..grid.steps {
        if noise == Noise::Brownian {
            rng::fill_normal(&mut rng, &mut xi);
        }
        stepper.advance(&mut x, &xi, h, false, None)?;
        model.manifold.domain.wrap(&mut x);
        sample.increments.push(xi.iter().map(|v| v * sh).collect());
        sample.times.push(grid.time(k + 1));
        sample.points.push(x.clone());
        if !model.manifold.domain.contains(&x) {
            sample.exited = true;
            sample.exit_index = Some(k + 1);
            break;
        }
    }
    Ok(sample)
}

/// Transport along a stored path.
pub fn transport(
    model: &ModelSpec,
    path: &PathSample,
    mode: TransportMode,
    twist: Option<&Twist>,
) -> Result<TransportResult> {
    let h = path.h();
    let mut res = transport_points(model, &path.points, h, mode, twist)?;
    res.truncated = path.exited;
    Ok(res)
}

/// Transport along an arbitrary point sequence with uniform time step `h`
/// (used for deterministic paths and ODE oracles). A final point outside the
/// chart domain is dropped.
pub fn transport_points(
    model: &ModelSpec,
    points: &[Vec<f64>],
    h: f64,
    mode: TransportMode,
    twist: Option<&Twist>,
) -> Result<TransportResult> {
    let n = model.dim();
    if points.is_empty() {
        return Err(Error::Config("transport needs at least one point".into()));
    }
    if mode == TransportMode::TwistedDeformed && twist.is_none() {
        return Err(Error::Config("twisted-deformed transport needs a twist".into()));
    }
    let dom = &model.manifold.domain;
    let mut end = points.len();
    let mut truncated = false;
    if let Some(k) = points.iter().position(|p| !dom.contains(p)) {
        if k == 0 {
            return Err(Error::Domain {
                coord: 0,
                value: points[0][0],
                lower: dom.lower[0],
                upper: dom.upper[0],
            });
        }
        end = k;
        truncated = true;
    }
    let tr = Transporter::new(model, mode != TransportMode::Parallel);
    let mut w = DMatrix::identity(n, n);
    let mut maps = Vec::with_capacity(end);
    maps.push(w.clone());
    let mut gk = None;
    for k in 0..end - 1 {
        gk = tr.step(&points[k], &points[k + 1], h, gk.as_ref(), &mut w)?;
        maps.push(w.clone());
    }
    if mode == TransportMode::TwistedDeformed {
        let twist = twist.expect("checked above");
        let (b0_inv, _) = twist.bstar_inverse(&points[0]).map_err(|e| with_step(e, 0))?;
        let right = b0_inv.transpose();
        for (k, m) in maps.iter_mut().enumerate() {
            twist.bstar_inverse(&points[k]).map_err(|e| with_step(e, k))?;
            *m = twist.bstar(&points[k]).transpose() * &*m * &right;
        }
    }
    Ok(TransportResult { mode, maps, truncated })
}

fn with_step(e: Error, k: usize) -> Error {
    match e {
        Error::TwistSingular { point, condition, .. } => Error::TwistSingular {
            point,
            condition,
            step: Some(k),
        },
        other => other,
    }
}

/// End state of a streamed path.
#[derive(Debug, Clone)]
pub(crate) struct Endpoint {
    pub x: Vec<f64>,
    pub exited: bool,
    pub w: Option<DMatrix<f64>>,
}

/// Simulate a path without storing it, optionally carrying the deformed
/// transport. `observe(k, x, w)` is called at every grid time including 0.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stream_path<F>(
    model: &ModelSpec,
    x0: &[f64],
    grid: TimeGrid,
    noise: Noise,
    seed: u64,
    path_index: u64,
    deformed: Option<bool>,
    mut observe: F,
) -> Result<Endpoint>
where
    F: FnMut(usize, &[f64], Option<&DMatrix<f64>>),
{
    let n = model.dim();
    let h = grid.h();
    let mut x = x0.to_vec();
    let mut prev = x.clone();
    let mut rng = rng::path_stream(seed, path_index);
    let mut stepper = Stepper::new(model);
    let tr = deformed.map(|d| Transporter::new(model, d));
    let mut w = tr.as_ref().map(|_| DMatrix::identity(n, n));
    let mut xi = vec![0.0; n];
    let mut cached = None;
    observe(0, &x, w.as_ref());
    for k in 0..grid.steps {
        if noise == Noise::Brownian {
            rng::fill_normal(&mut rng, &mut xi);
        }
        prev.copy_from_slice(&x);
        let geom = stepper.advance(&mut x, &xi, h, tr.is_some(), cached.take())?;
        model.manifold.domain.wrap(&mut x);
        if !model.manifold.domain.contains(&x) {
            return Ok(Endpoint { x, exited: true, w });
        }
        if let (Some(tr), Some(w)) = (&tr, w.as_mut()) {
            cached = tr.step(&prev, &x, h, geom.as_ref(), w)?;
        }
        observe(k + 1, &x, w.as_ref());
    }
    Ok(Endpoint { x, exited: false, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldSpec;
    use crate::model::Region;
    use crate::twistcalc::TwistSpec;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn ou() -> ModelSpec {
        ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-6.0, 6.0, 13)).unwrap()
    }

    #[test]
    fn same_stream_same_path() {
        let m = ou();
        let a = simulate_path(&m, &ChartPoint::new(&[0.5]), 1.0, 0.01, 11, 5).unwrap();
        let b = simulate_path(&m, &ChartPoint::new(&[0.5]), 1.0, 0.01, 11, 5).unwrap();
        let c = simulate_path(&m, &ChartPoint::new(&[0.5]), 1.0, 0.01, 11, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.points, c.points);
        assert_eq!(a.points[0], vec![0.5]);
        assert_eq!(a.times.len(), 101);
    }

    #[test]
    fn rejects_bad_steps() {
        let m = ou();
        assert!(matches!(
            simulate_path(&m, &ChartPoint::new(&[0.0]), 1.0, 0.0, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            simulate_path(&m, &ChartPoint::new(&[0.0]), 1.0, -1.0, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_noise_follows_ode() {
        let grid = TimeGrid::new(1.0, 1e-4).unwrap();
        let p = simulate_path_with(&ou(), &ChartPoint::new(&[1.0]), grid, Noise::Zero, 0, 0).unwrap();
        assert!((p.final_point()[0] - (-1.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn brownian_second_moment() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "0", Region::interval(-1.0, 1.0, 3)).unwrap();
        let grid = TimeGrid::new(0.5, 0.05).unwrap();
        let xs: Vec<f64> = (0..20000)
            .map(|i| {
                let e = stream_path(&m, &[0.0], grid, Noise::Brownian, 3, i, None, |_, _, _| {}).unwrap();
                e.x[0] * e.x[0]
            })
            .collect();
        let (mean, se) = linalg::mean_stderr(&xs);
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn exit_is_flagged() {
        let m = ModelSpec::new(ManifoldSpec::interval(0.0, 1.0), "0", Region::interval(0.0, 1.0, 3)).unwrap();
        let p = simulate_path(&m, &ChartPoint::new(&[0.5]), 10.0, 0.01, 2, 0).unwrap();
        assert!(p.exited);
        let k = p.exit_index.unwrap();
        assert_eq!(p.points.len(), k + 1);
        let tr = transport(&m, &p, TransportMode::Deformed, None).unwrap();
        assert!(tr.truncated);
        assert_eq!(tr.maps.len(), k);
    }

    #[test]
    fn periodic_coordinates_wrap() {
        let m = ModelSpec::new(ManifoldSpec::circle(1.0), "0", Region::interval(0.0, 6.0, 3)).unwrap();
        let p = simulate_path(&m, &ChartPoint::new(&[0.1]), 5.0, 0.01, 4, 0).unwrap();
        assert!(!p.exited);
        assert!(p.points.iter().all(|q| (0.0..2.0 * PI).contains(&q[0])));
    }

    #[test]
    fn flat_parallel_transport_is_identity() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(3),
            "x^4 + y*z",
            Region::new(&[-1.0; 3], &[1.0; 3], &[2; 3]),
        )
        .unwrap();
        let p = simulate_path(&m, &ChartPoint::new(&[0.1, 0.2, 0.3]), 0.2, 0.01, 1, 0).unwrap();
        let tr = transport(&m, &p, TransportMode::Parallel, None).unwrap();
        assert!(tr.maps.iter().all(|t| *t == DMatrix::identity(3, 3)));
    }

    #[test]
    fn ou_deformed_transport_is_exponential() {
        let m = ou();
        let p = simulate_path(&m, &ChartPoint::new(&[0.3]), 1.0, 0.01, 9, 2).unwrap();
        let tr = transport(&m, &p, TransportMode::Deformed, None).unwrap();
        for (k, w) in tr.maps.iter().enumerate() {
            assert_relative_eq!(w[(0, 0)], (-p.times[k]).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn twisted_maps_are_conjugates() {
        let m = ou();
        let twist = Twist::compile(&TwistSpec::scalar("exp(0.3*x)"), 1).unwrap();
        let p = simulate_path(&m, &ChartPoint::new(&[0.3]), 0.5, 0.01, 9, 2).unwrap();
        let w = transport(&m, &p, TransportMode::Deformed, None).unwrap();
        let wb = transport(&m, &p, TransportMode::TwistedDeformed, Some(&twist)).unwrap();
        let b0 = (0.3f64 * 0.3).exp();
        for k in 0..w.maps.len() {
            let bk = (0.3 * p.points[k][0]).exp();
            assert_eq!(wb.maps[k][(0, 0)], bk * w.maps[k][(0, 0)] * (1.0 / b0));
        }
    }

    #[test]
    fn latitude_holonomy() {
        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "0",
            Region::new(&[0.5, 0.0], &[2.5, 6.0], &[3, 3]),
        )
        .unwrap();
        for theta in [0.4, 1.0, 2.2] {
            let steps = 4000;
            let points: Vec<Vec<f64>> = (0..=steps)
                .map(|k| {
                    let mut p = vec![theta, 2.0 * PI * k as f64 / steps as f64];
                    s.manifold.domain.wrap(&mut p);
                    p
                })
                .collect();
            let tr = transport_points(&s, &points, 1.0 / steps as f64, TransportMode::Parallel, None).unwrap();
            let r = tr.maps.last().unwrap();
            let angle = r[(1, 0)].atan2(r[(0, 0)]);
            let expected = 2.0 * PI * (1.0 - theta.cos());
            let diff = (angle - expected).rem_euclid(2.0 * PI);
            let diff = diff.min(2.0 * PI - diff);
            assert!(diff < 1e-4, "theta={theta}: angle {angle} vs {expected}");
        }
    }

    #[test]
    fn parallel_transport_is_isometric_on_sphere() {
        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "0",
            Region::new(&[0.5, 0.0], &[2.5, 6.0], &[3, 3]),
        )
        .unwrap();
        let p = simulate_path(&s, &ChartPoint::new(&[1.5, 1.0]), 0.3, 1e-3, 5, 1).unwrap();
        let tr = transport(&s, &p, TransportMode::Parallel, None).unwrap();
        for t in &tr.maps {
            assert_relative_eq!(t.transpose() * t, DMatrix::identity(2, 2), epsilon = 1e-12);
        }
    }
}
