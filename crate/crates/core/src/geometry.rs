//! Chart-based manifold kernels.
//!
//! Every tensor leaving this module is expressed in the orthonormal frame
//! `E = L^{-T}` where `g = L Lᵀ` is the Cholesky factorisation of the metric,
//! so metric adjoints downstream are plain transposes. Built-in charts carry
//! analytic metric derivatives; user charts fall back to central finite
//! differences of the metric expressions.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;

/// First-derivative finite-difference step relative to `1 + |coord|`.
pub const FD_STEP_FIRST: f64 = 1e-5;
/// Second-derivative finite-difference step relative to `1 + |coord|`.
pub const FD_STEP_SECOND: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    Euclidean {
        dim: usize,
    },
    /// Arclength coordinate with period `2π·radius`.
    Circle {
        radius: f64,
    },
    FlatTorus {
        dim: usize,
        period: f64,
    },
    /// Colatitude/longitude chart `(θ, φ)` of the round sphere.
    Sphere2 {
        radius: f64,
    },
    /// Upper half-plane `(x, y)`, `g = y^{-2} I`.
    HyperbolicHalfPlane,
    IntervalWithBoundary {
        a: f64,
        b: f64,
    },
    UserChart {
        metric: Vec<Vec<Expr>>,
    },
}

/// Coordinate box in which evaluation is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Periodic coordinates wrap into `[lower, upper)` instead of exiting.
    pub periodic: Vec<bool>,
}

impl ChartDomain {
    pub fn unbounded(dim: usize) -> Self {
        ChartDomain {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            periodic: vec![false; dim],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v.is_finite() && (self.periodic[i] || (v >= self.lower[i] && v <= self.upper[i])))
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.lower.len() {
            return Err(Error::Config(format!(
                "point has {} coordinates, chart has dimension {}",
                x.len(),
                self.lower.len()
            )));
        }
        for (i, &v) in x.iter().enumerate() {
            let bad = !v.is_finite() || (!self.periodic[i] && (v < self.lower[i] || v > self.upper[i]));
            if bad {
                return Err(Error::Domain {
                    coord: i,
                    value: v,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    pub fn period(&self, i: usize) -> Option<f64> {
        self.periodic[i].then(|| self.upper[i] - self.lower[i])
    }

    /// Wrap periodic coordinates into their fundamental interval.
    pub fn wrap(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            if self.periodic[i] {
                let p = self.upper[i] - self.lower[i];
                *v = self.lower[i] + (*v - self.lower[i]).rem_euclid(p);
            }
        }
    }

    /// Displacement `b - a` using the minimal image along periodic axes.
    pub fn displacement(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for i in 0..a.len() {
            let mut d = b[i] - a[i];
            if self.periodic[i] {
                let p = self.upper[i] - self.lower[i];
                d -= p * (d / p).round();
            }
            out[i] = d;
        }
    }
}

/// A point of the manifold in chart coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub coords: DVector<f64>,
    pub chart: u32,
}

impl ChartPoint {
    pub fn new(coords: &[f64]) -> Self {
        ChartPoint {
            coords: DVector::from_column_slice(coords),
            chart: 0,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }
}

/// Christoffel symbols `Γ^i_{jk}` stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    n: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Matrix `A_{ik} = Σ_j Γ^i_{jk} u^j`.
    pub fn contract(&self, u: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, k| (0..n).map(|j| self.get(i, j, k) * u[j]).sum())
    }

    /// Vector `Σ_{jk} g^{jk} Γ^i_{jk}`.
    pub fn trace_with(&self, ginv: &DMatrix<f64>) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        s += ginv[(j, k)] * self.get(i, j, k);
                    }
                }
                s
            })
            .collect()
    }
}

/// Metric and its coordinate derivatives at a point.
#[derive(Debug, Clone)]
pub struct MetricJet {
    pub g: DMatrix<f64>,
    /// `dg[k] = ∂_k g`.
    pub dg: Vec<DMatrix<f64>>,
    /// `d2g[k * n + l] = ∂_k ∂_l g`, when requested.
    pub d2g: Option<Vec<DMatrix<f64>>>,
}

/// Pointwise metric data in orthonormal-frame components.
#[derive(Debug, Clone)]
pub struct MetricData {
    pub g: DMatrix<f64>,
    pub frame: DMatrix<f64>,
    pub christoffel: Christoffel,
    pub ricci_sharp: DMatrix<f64>,
}

/// Everything the hot paths need at one point.
#[derive(Debug, Clone)]
pub struct LocalGeometry {
    pub g: DMatrix<f64>,
    pub ginv: DMatrix<f64>,
    /// Orthonormal frame `E` (columns are frame vectors in coordinates).
    pub frame: DMatrix<f64>,
    /// `E^{-1} = Lᵀ`.
    pub frame_inv: DMatrix<f64>,
    pub christoffel: Christoffel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub domain: ChartDomain,
    pub chart_id: u32,
}

impl ManifoldSpec {
    pub fn euclidean(dim: usize) -> Self {
        ManifoldSpec {
            kind: ManifoldKind::Euclidean { dim },
            domain: ChartDomain::unbounded(dim),
            chart_id: 0,
        }
    }

    pub fn circle(radius: f64) -> Self {
        ManifoldSpec {
            kind: ManifoldKind::Circle { radius },
            domain: ChartDomain {
                lower: vec![0.0],
                upper: vec![2.0 * PI * radius],
                periodic: vec![true],
            },
            chart_id: 0,
        }
    }

    pub fn flat_torus(dim: usize, period: f64) -> Self {
        ManifoldSpec {
            kind: ManifoldKind::FlatTorus { dim, period },
            domain: ChartDomain {
                lower: vec![0.0; dim],
                upper: vec![period; dim],
                periodic: vec![true; dim],
            },
            chart_id: 0,
        }
    }

    /// Unit sphere with the default pole margin of 0.1.
    pub fn sphere2() -> Self {
        Self::sphere2_with(1.0, 0.1)
    }

    pub fn sphere2_with(radius: f64, pole_margin: f64) -> Self {
        ManifoldSpec {
            kind: ManifoldKind::Sphere2 { radius },
            domain: ChartDomain {
                lower: vec![pole_margin, 0.0],
                upper: vec![PI - pole_margin, 2.0 * PI],
                periodic: vec![false, true],
            },
            chart_id: 0,
        }
    }

    pub fn hyperbolic_half_plane() -> Self {
        ManifoldSpec {
            kind: ManifoldKind::HyperbolicHalfPlane,
            domain: ChartDomain {
                lower: vec![f64::NEG_INFINITY, 1e-6],
                upper: vec![f64::INFINITY, f64::INFINITY],
                periodic: vec![false, false],
            },
            chart_id: 0,
        }
    }

    pub fn interval(a: f64, b: f64) -> Self {
        ManifoldSpec {
            kind: ManifoldKind::IntervalWithBoundary { a, b },
            domain: ChartDomain {
                lower: vec![a],
                upper: vec![b],
                periodic: vec![false],
            },
            chart_id: 0,
        }
    }

    /// Chart whose metric is given entrywise by expressions.
    pub fn user_chart(metric: &[Vec<String>], domain: ChartDomain) -> Result<Self> {
        let n = metric.len();
        if n == 0 || metric.iter().any(|row| row.len() != n) {
            return Err(Error::Config(
                "user-chart metric must be a non-empty square matrix".into(),
            ));
        }
        if domain.lower.len() != n || domain.upper.len() != n || domain.periodic.len() != n {
            return Err(Error::Config(
                "user-chart domain dimension does not match metric".into(),
            ));
        }
        let metric = metric
            .iter()
            .map(|row| row.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        for row in &metric {
            for e in row {
                if e.max_var().is_some_and(|v| v >= n) {
                    return Err(Error::Config(
                        "user-chart metric references a missing coordinate".into(),
                    ));
                }
            }
        }
        Ok(ManifoldSpec {
            kind: ManifoldKind::UserChart { metric },
            domain,
            chart_id: 0,
        })
    }

    pub fn with_domain(mut self, domain: ChartDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ManifoldKind::Euclidean { dim } | ManifoldKind::FlatTorus { dim, .. } => *dim,
            ManifoldKind::Circle { .. } | ManifoldKind::IntervalWithBoundary { .. } => 1,
            ManifoldKind::Sphere2 { .. } | ManifoldKind::HyperbolicHalfPlane => 2,
            ManifoldKind::UserChart { metric } => metric.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            ManifoldKind::Euclidean { .. } => "euclidean",
            ManifoldKind::Circle { .. } => "circle",
            ManifoldKind::FlatTorus { .. } => "flat-torus",
            ManifoldKind::Sphere2 { .. } => "sphere2",
            ManifoldKind::HyperbolicHalfPlane => "hyperbolic-half-plane",
            ManifoldKind::IntervalWithBoundary { .. } => "interval",
            ManifoldKind::UserChart { .. } => "user-chart",
        }
    }

    /// True when the metric is the identity in these coordinates, so frames
    /// are trivial and every connection term vanishes.
    pub fn is_flat_identity(&self) -> bool {
        matches!(
            self.kind,
            ManifoldKind::Euclidean { .. }
                | ManifoldKind::Circle { .. }
                | ManifoldKind::FlatTorus { .. }
                | ManifoldKind::IntervalWithBoundary { .. }
        )
    }

    pub fn is_diagonal_metric(&self) -> bool {
        match &self.kind {
            ManifoldKind::UserChart { metric } => {
                let n = metric.len();
                (0..n).all(|i| (0..n).all(|j| i == j || metric[i][j].is_zero()))
            }
            _ => true,
        }
    }

    pub fn check(&self, x: &ChartPoint) -> Result<()> {
        if x.chart != self.chart_id {
            return Err(Error::Config(format!(
                "point belongs to chart {} but the manifold uses chart {}",
                x.chart, self.chart_id
            )));
        }
        self.domain.check(x.as_slice())
    }

    /// Metric matrix without domain checks.
    pub fn metric_raw(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        match &self.kind {
            ManifoldKind::Sphere2 { radius } => {
                let s = x[0].sin();
                DMatrix::from_diagonal(&DVector::from_column_slice(&[radius * radius, radius * radius * s * s]))
            }
            ManifoldKind::HyperbolicHalfPlane => DMatrix::identity(2, 2) / (x[1] * x[1]),
            ManifoldKind::UserChart { metric } => {
                let g = DMatrix::from_fn(n, n, |i, j| metric[i][j].eval(x, &[]));
                linalg::symmetric_part(&g)
            }
            _ => DMatrix::identity(n, n),
        }
    }

    pub fn metric_at(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let g = self.metric_raw(x.as_slice());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("metric is not finite at {:?}", x.as_slice())));
        }
        Ok(g)
    }

    /// Metric jet; analytic for built-ins, central differences for user charts.
    pub fn metric_jet(&self, x: &[f64], second: bool) -> MetricJet {
        let n = self.dim();
        let g = self.metric_raw(x);
        match &self.kind {
            ManifoldKind::Sphere2 { radius } => {
                let r2 = radius * radius;
                let (s, c) = x[0].sin_cos();
                let d0 = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, r2 * 2.0 * s * c]));
                let dg = vec![d0, DMatrix::zeros(2, 2)];
                let d2g = second.then(|| {
                    let dd = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, r2 * 2.0 * (2.0 * x[0]).cos()]));
                    vec![dd, DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)]
                });
                MetricJet { g, dg, d2g }
            }
            ManifoldKind::HyperbolicHalfPlane => {
                let y = x[1];
                let dg = vec![DMatrix::zeros(2, 2), DMatrix::identity(2, 2) * (-2.0 / (y * y * y))];
                let d2g = second.then(|| {
                    vec![
                        DMatrix::zeros(2, 2),
                        DMatrix::zeros(2, 2),
                        DMatrix::zeros(2, 2),
                        DMatrix::identity(2, 2) * (6.0 / (y * y * y * y)),
                    ]
                });
                MetricJet { g, dg, d2g }
            }
            ManifoldKind::UserChart { .. } => self.metric_jet_fd(x, second),
            _ => MetricJet {
                g,
                dg: vec![DMatrix::zeros(n, n); n],
                d2g: second.then(|| vec![DMatrix::zeros(n, n); n * n]),
            },
        }
    }

    fn metric_jet_fd(&self, x: &[f64], second: bool) -> MetricJet {
        let n = self.dim();
        let g0 = self.metric_raw(x);
        let shifted = |offsets: &[(usize, f64)]| {
            let mut y = x.to_vec();
            for &(i, d) in offsets {
                y[i] += d;
            }
            self.metric_raw(&y)
        };
        let dg = (0..n)
            .map(|k| {
                let h = FD_STEP_FIRST * (1.0 + x[k].abs());
                (shifted(&[(k, h)]) - shifted(&[(k, -h)])) / (2.0 * h)
            })
            .collect();
        let d2g = second.then(|| {
            let mut out = vec![DMatrix::zeros(n, n); n * n];
            for k in 0..n {
                let hk = FD_STEP_SECOND * (1.0 + x[k].abs());
                for l in k..n {
                    let m = if k == l {
                        (shifted(&[(k, hk)]) - &g0 * 2.0 + shifted(&[(k, -hk)])) / (hk * hk)
                    } else {
                        let hl = FD_STEP_SECOND * (1.0 + x[l].abs());
                        (shifted(&[(k, hk), (l, hl)]) - shifted(&[(k, hk), (l, -hl)]) - shifted(&[(k, -hk), (l, hl)])
                            + shifted(&[(k, -hk), (l, -hl)]))
                            / (4.0 * hk * hl)
                    };
                    out[l * n + k] = m.clone();
                    out[k * n + l] = m;
                }
            }
            out
        });
        MetricJet { g: g0, dg, d2g }
    }

    pub fn christoffel_at(&self, x: &ChartPoint) -> Result<Christoffel> {
        self.check(x)?;
        let jet = self.metric_jet(x.as_slice(), false);
        let ginv = invert_metric(&jet.g)?;
        Ok(christoffel_from_jet(&jet, &ginv))
    }

    /// Christoffel symbols without a domain check.
    pub(crate) fn christoffel_raw(&self, x: &[f64]) -> Result<Christoffel> {
        if self.is_flat_identity() {
            return Ok(Christoffel::zeros(self.dim()));
        }
        if let Some(g) = self.closed_form_christoffel(x) {
            return Ok(g);
        }
        let jet = self.metric_jet(x, false);
        let ginv = invert_metric(&jet.g)?;
        Ok(christoffel_from_jet(&jet, &ginv))
    }

    /// Ricci endomorphism in orthonormal-frame components.
    pub fn ricci_sharp_at(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        self.check(x)?;
        self.ricci_frame_raw(x.as_slice())
    }

    pub(crate) fn ricci_frame_raw(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dim();
        match &self.kind {
            ManifoldKind::Sphere2 { radius } => Ok(DMatrix::identity(2, 2) / (radius * radius)),
            ManifoldKind::HyperbolicHalfPlane => Ok(-DMatrix::identity(2, 2)),
            ManifoldKind::UserChart { .. } => {
                let jet = self.metric_jet(x, true);
                let ginv = invert_metric(&jet.g)?;
                let ric = ricci_from_jet(&jet, &ginv);
                let (e, _, _) = linalg::cholesky_frame(&jet.g)?;
                Ok(linalg::symmetric_part(&(e.transpose() * ric * e)))
            }
            _ => Ok(DMatrix::zeros(n, n)),
        }
    }

    pub fn frame_at(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        let g = self.metric_at(x)?;
        Ok(linalg::cholesky_frame(&g)?.0)
    }

    pub fn metric_data(&self, x: &ChartPoint) -> Result<MetricData> {
        let g = self.metric_at(x)?;
        let frame = linalg::cholesky_frame(&g)?.0;
        Ok(MetricData {
            christoffel: self.christoffel_at(x)?,
            ricci_sharp: self.ricci_sharp_at(x)?,
            g,
            frame,
        })
    }

    /// Christoffel symbols of the curved built-in charts in closed form.
    fn closed_form_christoffel(&self, x: &[f64]) -> Option<Christoffel> {
        match &self.kind {
            ManifoldKind::Sphere2 { .. } => {
                let (s, c) = x[0].sin_cos();
                let mut g = Christoffel::zeros(2);
                g.set(0, 1, 1, -s * c);
                g.set(1, 0, 1, c / s);
                g.set(1, 1, 0, c / s);
                Some(g)
            }
            ManifoldKind::HyperbolicHalfPlane => {
                let inv = 1.0 / x[1];
                let mut g = Christoffel::zeros(2);
                g.set(0, 0, 1, -inv);
                g.set(0, 1, 0, -inv);
                g.set(1, 0, 0, inv);
                g.set(1, 1, 1, -inv);
                Some(g)
            }
            _ => None,
        }
    }

    /// Closed-form drift `-g^{jk}Γ^i_{jk} - (g^{-1}∂V)^i` and diagonal frame
    /// for charts that have one. Returns false otherwise.
    pub(crate) fn closed_form_drift(&self, x: &[f64], grad: &[f64], drift: &mut [f64], frame: &mut [f64]) -> bool {
        match &self.kind {
            ManifoldKind::Sphere2 { radius } => {
                let r2 = radius * radius;
                let (s, c) = x[0].sin_cos();
                drift[0] = (c / s - grad[0]) / r2;
                drift[1] = -grad[1] / (r2 * s * s);
                frame[0] = 1.0 / radius;
                frame[1] = 1.0 / (radius * s);
                true
            }
            ManifoldKind::HyperbolicHalfPlane => {
                let y2 = x[1] * x[1];
                drift[0] = -y2 * grad[0];
                drift[1] = -y2 * grad[1];
                frame[0] = x[1];
                frame[1] = x[1];
                true
            }
            _ => false,
        }
    }

    /// Metric, inverse, frame and connection at `x` (no domain check).
    pub fn local(&self, x: &[f64]) -> Result<LocalGeometry> {
        let n = self.dim();
        if self.is_flat_identity() {
            let id = DMatrix::identity(n, n);
            return Ok(LocalGeometry {
                g: id.clone(),
                ginv: id.clone(),
                frame: id.clone(),
                frame_inv: id,
                christoffel: Christoffel::zeros(n),
            });
        }
        if let Some(christoffel) = self.closed_form_christoffel(x) {
            let g = self.metric_raw(x);
            let d = g.diagonal();
            if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Numeric(format!("metric is not positive definite at {x:?}")));
            }
            return Ok(LocalGeometry {
                ginv: DMatrix::from_diagonal(&d.map(|v| 1.0 / v)),
                frame: DMatrix::from_diagonal(&d.map(|v| 1.0 / v.sqrt())),
                frame_inv: DMatrix::from_diagonal(&d.map(f64::sqrt)),
                g,
                christoffel,
            });
        }
        let jet = self.metric_jet(x, false);
        let ginv = invert_metric(&jet.g)?;
        let christoffel = christoffel_from_jet(&jet, &ginv);
        let (frame, frame_inv, _) = linalg::cholesky_frame(&jet.g)?;
        Ok(LocalGeometry {
            g: jet.g,
            ginv,
            frame,
            frame_inv,
            christoffel,
        })
    }

    /// Connection matrices `ω_c` of the Cholesky frame:
    /// `∇_{e_c} e_b = Σ_a (ω_c)_{ab} e_a`.
    pub fn connection_forms(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let n = self.dim();
        if self.is_flat_identity() {
            return Ok(vec![DMatrix::zeros(n, n); n]);
        }
        let jet = self.metric_jet(x, false);
        let ginv = invert_metric(&jet.g)?;
        let gamma = christoffel_from_jet(&jet, &ginv);
        let (e, einv, l) = linalg::cholesky_frame(&jet.g)?;
        let linv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        // dL = L Φ(L^{-1} dg L^{-T}); dE = -E dLᵀ E.
        let de: Vec<DMatrix<f64>> = jet
            .dg
            .iter()
            .map(|dg| {
                let mut phi = &linv * dg * linv.transpose();
                for i in 0..n {
                    for j in (i + 1)..n {
                        phi[(i, j)] = 0.0;
                    }
                    phi[(i, i)] *= 0.5;
                }
                let dl = &l * phi;
                -(&e * dl.transpose() * &e)
            })
            .collect();
        Ok((0..n)
            .map(|c| {
                let col: Vec<f64> = e.column(c).iter().copied().collect();
                let mut dir = DMatrix::zeros(n, n);
                for (j, dej) in de.iter().enumerate() {
                    dir += dej * col[j];
                }
                &einv * (dir + gamma.contract(&col) * &e)
            })
            .collect())
    }
}

pub fn invert_metric(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = if g.nrows() == 1 {
        (g[(0, 0)] != 0.0).then(|| DMatrix::from_element(1, 1, 1.0 / g[(0, 0)]))
    } else {
        g.clone().try_inverse()
    };
    inv.filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numeric("metric is not invertible".into()))
}

/// `Γ^i_{jk} = ½ g^{il}(∂_j g_{lk} + ∂_k g_{lj} - ∂_l g_{jk})`, filled for
/// `j ≤ k` and mirrored so the lower-index symmetry is exact.
pub fn christoffel_from_jet(jet: &MetricJet, ginv: &DMatrix<f64>) -> Christoffel {
    let n = jet.g.nrows();
    let mut out = Christoffel::zeros(n);
    for j in 0..n {
        for k in j..n {
            for i in 0..n {
                let mut s = 0.0;
                for l in 0..n {
                    let lower = jet.dg[j][(l, k)] + jet.dg[k][(l, j)] - jet.dg[l][(j, k)];
                    s += ginv[(i, l)] * lower;
                }
                out.set(i, j, k, 0.5 * s);
                out.set(i, k, j, 0.5 * s);
            }
        }
    }
    out
}

/// Coordinate Ricci tensor `Ric_{jl} = R^i_{jil}` from a second-order jet.
pub fn ricci_from_jet(jet: &MetricJet, ginv: &DMatrix<f64>) -> DMatrix<f64> {
    let n = jet.g.nrows();
    let d2g = jet.d2g.as_ref().expect("second-order jet required for Ricci");
    let gamma = christoffel_from_jet(jet, ginv);
    // Γ_{l,jk} lowered symbols.
    let lowered = |l: usize, j: usize, k: usize| 0.5 * (jet.dg[j][(l, k)] + jet.dg[k][(l, j)] - jet.dg[l][(j, k)]);
    // ∂_m Γ^i_{jk}
    let mut dgamma = vec![0.0; n * n * n * n];
    let idx = |m: usize, i: usize, j: usize, k: usize| ((m * n + i) * n + j) * n + k;
    for m in 0..n {
        let dginv = -(ginv * &jet.dg[m] * ginv);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        let d_lower = 0.5 * (d2g[m * n + j][(l, k)] + d2g[m * n + k][(l, j)] - d2g[m * n + l][(j, k)]);
                        s += dginv[(i, l)] * lowered(l, j, k) + ginv[(i, l)] * d_lower;
                    }
                    dgamma[idx(m, i, j, k)] = s;
                }
            }
        }
    }
    // R^i_{jkl} = ∂_k Γ^i_{lj} - ∂_l Γ^i_{kj} + Γ^i_{km}Γ^m_{lj} - Γ^i_{lm}Γ^m_{kj}
    DMatrix::from_fn(n, n, |j, l| {
        let mut s = 0.0;
        for i in 0..n {
            let k = i;
            s += dgamma[idx(k, i, l, j)] - dgamma[idx(l, i, k, j)];
            for m in 0..n {
                s += gamma.get(i, k, m) * gamma.get(m, l, j) - gamma.get(i, l, m) * gamma.get(m, k, j);
            }
        }
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere_user_chart() -> ManifoldSpec {
        let metric = vec![
            vec!["1".to_string(), "0".to_string()],
            vec!["0".to_string(), "sin(theta)^2".to_string()],
        ];
        ManifoldSpec::user_chart(&metric, ManifoldSpec::sphere2().domain).unwrap()
    }

    #[test]
    fn metric_examples() {
        let e = ManifoldSpec::euclidean(2);
        assert_eq!(
            e.metric_at(&ChartPoint::new(&[3.0, -1.0])).unwrap(),
            DMatrix::identity(2, 2)
        );
        let s = ManifoldSpec::sphere2();
        let g = s.metric_at(&ChartPoint::new(&[PI / 2.0, 0.0])).unwrap();
        assert_relative_eq!(g, DMatrix::identity(2, 2), epsilon = 1e-15);
        let h = ManifoldSpec::hyperbolic_half_plane();
        let g = h.metric_at(&ChartPoint::new(&[0.0, 2.0])).unwrap();
        assert_relative_eq!(g, DMatrix::identity(2, 2) * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn out_of_domain_names_coordinate() {
        let s = ManifoldSpec::sphere2();
        match s.metric_at(&ChartPoint::new(&[0.01, 1.0])) {
            Err(Error::Domain { coord, .. }) => assert_eq!(coord, 0),
            other => panic!("expected domain error, got {other:?}"),
        }
        // longitude is periodic and never out of domain
        assert!(s.metric_at(&ChartPoint::new(&[1.0, 17.0])).is_ok());
    }

    #[test]
    fn christoffel_examples() {
        let e = ManifoldSpec::euclidean(3);
        assert!(e.christoffel_at(&ChartPoint::new(&[1.0, 2.0, 3.0])).unwrap().is_zero());
        let s = ManifoldSpec::sphere2();
        let x = ChartPoint::new(&[PI / 4.0, 0.3]);
        let gam = s.christoffel_at(&x).unwrap();
        assert_relative_eq!(gam.get(0, 1, 1), -0.5, epsilon = 1e-14);
        let fd = sphere_user_chart().christoffel_at(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((fd.get(i, j, k) - gam.get(i, j, k)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ricci_examples() {
        let x = ChartPoint::new(&[1.1, 0.4]);
        assert_eq!(
            ManifoldSpec::euclidean(2).ricci_sharp_at(&x).unwrap(),
            DMatrix::zeros(2, 2)
        );
        assert_eq!(
            ManifoldSpec::sphere2().ricci_sharp_at(&x).unwrap(),
            DMatrix::identity(2, 2)
        );
        let hp = ChartPoint::new(&[0.3, 1.7]);
        assert_eq!(
            ManifoldSpec::hyperbolic_half_plane().ricci_sharp_at(&hp).unwrap(),
            -DMatrix::identity(2, 2)
        );
        let fd = sphere_user_chart().ricci_sharp_at(&x).unwrap();
        assert_relative_eq!(fd, DMatrix::identity(2, 2), epsilon = 1e-5);
    }

    #[test]
    fn analytic_jets_give_constant_curvature() {
        for (m, x, k) in [
            (ManifoldSpec::sphere2_with(2.0, 0.1), [0.9, 0.2], 0.25),
            (ManifoldSpec::hyperbolic_half_plane(), [0.1, 0.6], -1.0),
        ] {
            let jet = m.metric_jet(&x, true);
            let ginv = invert_metric(&jet.g).unwrap();
            let ric = ricci_from_jet(&jet, &ginv);
            let (e, _, _) = linalg::cholesky_frame(&jet.g).unwrap();
            assert_relative_eq!(e.transpose() * ric * e, DMatrix::identity(2, 2) * k, epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_examples() {
        let s = ManifoldSpec::sphere2();
        let e = s.frame_at(&ChartPoint::new(&[PI / 6.0, 0.0])).unwrap();
        assert_relative_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]), epsilon = 1e-14);
    }

    #[test]
    fn flat_charts_have_no_connection() {
        for m in [ManifoldSpec::circle(1.0), ManifoldSpec::flat_torus(2, 2.0 * PI)] {
            let n = m.dim();
            let x = ChartPoint::new(&vec![0.3; n]);
            assert!(m.christoffel_at(&x).unwrap().is_zero());
            assert_eq!(m.ricci_sharp_at(&x).unwrap(), DMatrix::zeros(n, n));
        }
    }

    #[test]
    fn connection_forms_are_antisymmetric() {
        for (m, x) in [
            (ManifoldSpec::sphere2(), vec![0.8, 1.0]),
            (ManifoldSpec::hyperbolic_half_plane(), vec![0.2, 0.7]),
            (sphere_user_chart(), vec![1.3, 0.1]),
        ] {
            for w in m.connection_forms(&x).unwrap() {
                assert!((&w + w.transpose()).norm() < 1e-6, "{w}");
            }
        }
        // ∇_{e_φ} e_φ = -cot θ e_θ on the unit sphere
        let w = ManifoldSpec::sphere2().connection_forms(&[0.8, 0.0]).unwrap();
        assert_relative_eq!(w[1][(0, 1)], -(0.8f64).cos() / (0.8f64).sin(), epsilon = 1e-12);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn builtin_invariants(theta in 0.1f64..(PI - 0.1), phi in 0.0f64..6.28, x in -3.0f64..3.0, y in 0.05f64..5.0) {
            let cases = [
                (ManifoldSpec::sphere2(), vec![theta, phi]),
                (ManifoldSpec::hyperbolic_half_plane(), vec![x, y]),
                (ManifoldSpec::euclidean(2), vec![x, y]),
                (ManifoldSpec::flat_torus(2, 2.0 * PI), vec![theta, phi]),
            ];
            for (m, p) in cases {
                let pt = ChartPoint::new(&p);
                let d = m.metric_data(&pt).unwrap();
                let id = d.frame.transpose() * &d.g * &d.frame;
                prop_assert!((id - DMatrix::<f64>::identity(2, 2)).norm() < 1e-10);
                for i in 0..2 { for j in 0..2 { for k in 0..2 {
                    prop_assert_eq!(d.christoffel.get(i, j, k), d.christoffel.get(i, k, j));
                }}}
                prop_assert!(linalg::asymmetry(&d.ricci_sharp) < 1e-8);
            }
        }

        #[test]
        fn user_chart_copy_matches_sphere(theta in 0.3f64..(PI - 0.3), phi in 0.0f64..6.28) {
            let pt = ChartPoint::new(&[theta, phi]);
            let a = ManifoldSpec::sphere2();
            let b = sphere_user_chart();
            let ga = a.christoffel_at(&pt).unwrap();
            let gb = b.christoffel_at(&pt).unwrap();
            for i in 0..2 { for j in 0..2 { for k in 0..2 {
                prop_assert!((ga.get(i, j, k) - gb.get(i, j, k)).abs() < 1e-5);
            }}}
            let ra = a.ricci_sharp_at(&pt).unwrap();
            let rb = b.ricci_sharp_at(&pt).unwrap();
            prop_assert!((ra - rb).norm() < 1e-5);
        }
    }

    #[test]
    fn closed_form_christoffel_matches_jet() {
        for m in [
            ManifoldSpec::sphere2_with(1.7, 0.1),
            ManifoldSpec::hyperbolic_half_plane(),
        ] {
            let x = [0.9, 1.3];
            let jet = m.metric_jet(&x, false);
            let ginv = invert_metric(&jet.g).unwrap();
            let a = christoffel_from_jet(&jet, &ginv);
            let b = m.christoffel_raw(&x).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        assert!(
                            (a.get(i, j, k) - b.get(i, j, k)).abs() < 1e-12,
                            "{} {i}{j}{k}",
                            m.name()
                        );
                    }
                }
            }
            let l = m.local(&x).unwrap();
            let (e, einv, _) = linalg::cholesky_frame(&jet.g).unwrap();
            assert!((l.frame - e).norm() < 1e-12 && (l.frame_inv - einv).norm() < 1e-12);
        }
    }
}
