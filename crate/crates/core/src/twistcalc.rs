//! Pointwise twist calculus: `B`, `B*`, `∇B*`, the defect `𝓑`, the penalty
//! `N_B`, the twisted potential `M_B`, and the bounds `ρ_B`, `ρ̃_B`.
//!
//! A twist is specified through `B*` in orthonormal-frame components; the
//! vector map is its transpose `B = (B*)ᵀ`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, SmoothField};
use crate::geometry::{ChartPoint, LocalGeometry};
use crate::linalg;
use crate::model::{apply_l_raw, scan_infimum, ModelSpec, Region};

pub const DEFAULT_CONDITION_BOUND: f64 = 1e8;
/// Plain-mode gate on `sup ‖𝓑‖`.
pub const DEFECT_GATE: f64 = 1e-8;
/// Plain-mode gate on the asymmetry of `S_B`.
pub const ASYMMETRY_GATE: f64 = 1e-6;
/// Default `ε` in the lower-boundedness gate on `(S_B)^s - (1+ε) N_B`.
pub const DEFAULT_TILDE_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TwistFamily {
    Identity,
    /// `B* = λ(x) id`.
    Scalar {
        lambda: String,
    },
    /// Constant frame matrix.
    ConstantMatrix {
        matrix: Vec<Vec<f64>>,
    },
    /// `B* = diag(λ_1(x), …, λ_n(x))`.
    Diagonal {
        entries: Vec<String>,
    },
    /// `B* = id + s(x) e_1 ⊗ e_2`, i.e. `[[1, s], [0, 1]]` in dimension two.
    Shear {
        expr: String,
    },
    /// Arbitrary matrix of expressions; derivatives by finite differences.
    UserMatrix {
        entries: Vec<Vec<String>>,
    },
}

impl TwistFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TwistFamily::Identity => "identity",
            TwistFamily::Scalar { .. } => "scalar",
            TwistFamily::ConstantMatrix { .. } => "constant-matrix",
            TwistFamily::Diagonal { .. } => "diagonal",
            TwistFamily::Shear { .. } => "shear",
            TwistFamily::UserMatrix { .. } => "user-matrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistSpec {
    pub family: TwistFamily,
    /// Values of the free parameters `p0, p1, …`.
    pub parameters: Vec<f64>,
    pub condition_bound: f64,
}

impl TwistSpec {
    pub fn new(family: TwistFamily, parameters: Vec<f64>) -> Self {
        TwistSpec {
            family,
            parameters,
            condition_bound: DEFAULT_CONDITION_BOUND,
        }
    }

    pub fn identity() -> Self {
        Self::new(TwistFamily::Identity, vec![])
    }

    pub fn scalar(lambda: &str) -> Self {
        Self::new(
            TwistFamily::Scalar {
                lambda: lambda.to_string(),
            },
            vec![],
        )
    }

    pub fn constant(matrix: &DMatrix<f64>) -> Self {
        let rows = (0..matrix.nrows())
            .map(|i| matrix.row(i).iter().copied().collect())
            .collect();
        Self::new(TwistFamily::ConstantMatrix { matrix: rows }, vec![])
    }

    pub fn diagonal(entries: &[&str]) -> Self {
        Self::new(
            TwistFamily::Diagonal {
                entries: entries.iter().map(|s| s.to_string()).collect(),
            },
            vec![],
        )
    }

    pub fn shear(expr: &str) -> Self {
        Self::new(TwistFamily::Shear { expr: expr.to_string() }, vec![])
    }

    pub fn user_matrix(entries: &[&[&str]]) -> Self {
        Self::new(
            TwistFamily::UserMatrix {
                entries: entries
                    .iter()
                    .map(|r| r.iter().map(|s| s.to_string()).collect())
                    .collect(),
            },
            vec![],
        )
    }

    /// One-dimensional `λ = exp(p0 x + p1 x² + … + p_{d-1} x^d)`, started at
    /// the identity.
    pub fn scalar_exp_poly(degree: usize) -> Self {
        let terms: Vec<String> = (0..degree)
            .map(|k| {
                if k == 0 {
                    "p0*x".to_string()
                } else {
                    format!("p{k}*x^{}", k + 1)
                }
            })
            .collect();
        let body = if terms.is_empty() {
            "0".to_string()
        } else {
            terms.join(" + ")
        };
        Self::new(
            TwistFamily::Scalar {
                lambda: format!("exp({body})"),
            },
            vec![0.0; degree],
        )
    }

    pub fn with_parameters(mut self, p: &[f64]) -> Self {
        self.parameters = p.to_vec();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Plain,
    Tilde,
}

/// A twist compiled against a chart dimension.
#[derive(Debug, Clone)]
pub struct Twist {
    pub spec: TwistSpec,
    dim: usize,
    identity: bool,
    entries: Vec<Vec<Expr>>,
    /// `first[j][a][b] = ∂_j (B*)_{ab}` when derivatives are symbolic.
    first: Option<Vec<Vec<Vec<Expr>>>>,
    /// `second[c][a][b] = ∂_c² (B*)_{ab}` when derivatives are symbolic.
    second: Option<Vec<Vec<Vec<Expr>>>>,
    scalar: Option<SmoothField>,
}

fn parse_entry(src: &str, dim: usize) -> Result<Expr> {
    let e = Expr::parse(src)?;
    if let Some(v) = e.max_var() {
        if v >= dim {
            return Err(Error::Config(format!(
                "twist entry `{src}` uses coordinate {} but the chart has dimension {dim}",
                v + 1
            )));
        }
    }
    Ok(e)
}

impl Twist {
    pub fn compile(spec: &TwistSpec, dim: usize) -> Result<Twist> {
        let c = |v: f64| Expr::Const(v);
        let diag = |d: Vec<Expr>| -> Vec<Vec<Expr>> {
            (0..dim)
                .map(|a| (0..dim).map(|b| if a == b { d[a].clone() } else { c(0.0) }).collect())
                .collect()
        };
        let mut scalar = None;
        let mut symbolic = true;
        let entries: Vec<Vec<Expr>> = match &spec.family {
            TwistFamily::Identity => diag(vec![c(1.0); dim]),
            TwistFamily::Scalar { lambda } => {
                let f = SmoothField::parse(lambda, dim)?;
                let e = f.expr.clone();
                scalar = Some(f);
                diag(vec![e; dim])
            }
            TwistFamily::ConstantMatrix { matrix } => {
                if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("constant twist must be {dim}x{dim}")));
                }
                matrix.iter().map(|r| r.iter().map(|&v| c(v)).collect()).collect()
            }
            TwistFamily::Diagonal { entries } => {
                if entries.len() != dim {
                    return Err(Error::Config(format!("diagonal twist needs {dim} entries")));
                }
                diag(entries.iter().map(|s| parse_entry(s, dim)).collect::<Result<_>>()?)
            }
            TwistFamily::Shear { expr } => {
                if dim < 2 {
                    return Err(Error::Config("shear twist needs dimension at least 2".into()));
                }
                let mut m = diag(vec![c(1.0); dim]);
                m[0][1] = parse_entry(expr, dim)?;
                m
            }
            TwistFamily::UserMatrix { entries } => {
                if entries.len() != dim || entries.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("user twist must be {dim}x{dim}")));
                }
                symbolic = false;
                entries
                    .iter()
                    .map(|r| r.iter().map(|s| parse_entry(s, dim)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?
            }
        };
        let needed = entries
            .iter()
            .flatten()
            .filter_map(|e| e.max_param())
            .max()
            .map(|p| p + 1)
            .unwrap_or(0);
        if spec.parameters.len() < needed {
            return Err(Error::Config(format!(
                "twist references {needed} parameters but {} were supplied",
                spec.parameters.len()
            )));
        }
        if !(spec.condition_bound > 1.0) {
            return Err(Error::Config("twist condition bound must exceed 1".into()));
        }
        let (first, second) = if symbolic {
            let first: Vec<Vec<Vec<Expr>>> = (0..dim)
                .map(|j| entries.iter().map(|r| r.iter().map(|e| e.diff(j)).collect()).collect())
                .collect();
            let second = (0..dim)
                .map(|j| first[j].iter().map(|r| r.iter().map(|e| e.diff(j)).collect()).collect())
                .collect();
            (Some(first), Some(second))
        } else {
            (None, None)
        };
        Ok(Twist {
            identity: matches!(spec.family, TwistFamily::Identity),
            spec: spec.clone(),
            dim,
            entries,
            first,
            second,
            scalar,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn has_symbolic_derivatives(&self) -> bool {
        self.first.is_some()
    }

    pub fn params(&self) -> &[f64] {
        &self.spec.parameters
    }

    /// Same family with new parameter values.
    pub fn with_parameters(&self, p: &[f64]) -> Twist {
        let mut t = self.clone();
        t.spec.parameters = p.to_vec();
        t
    }

    fn eval_grid(&self, m: &[Vec<Expr>], x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |a, b| m[a][b].eval(x, self.params()))
    }

    /// Frame components of `B*` at `x`.
    pub fn bstar(&self, x: &[f64]) -> DMatrix<f64> {
        if self.identity {
            return DMatrix::identity(self.dim, self.dim);
        }
        self.eval_grid(&self.entries, x)
    }

    /// `(B*)^{-1}` with a singularity check against the condition bound.
    pub fn bstar_inverse(&self, x: &[f64]) -> Result<(DMatrix<f64>, f64)> {
        if self.identity {
            return Ok((DMatrix::identity(self.dim, self.dim), 1.0));
        }
        let bf = self.bstar(x);
        let (inv, cond) = linalg::inverse_with_condition(&bf);
        match inv {
            Some(inv) if cond <= self.spec.condition_bound && inv.iter().all(|v| v.is_finite()) => Ok((inv, cond)),
            _ => Err(Error::TwistSingular {
                point: x.to_vec(),
                condition: cond,
                step: None,
            }),
        }
    }

    /// Coordinate partials `∂_j B*` (frame components held fixed).
    pub fn coordinate_derivatives(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.dim;
        if self.identity {
            return vec![DMatrix::zeros(n, n); n];
        }
        match &self.first {
            Some(first) => first.iter().map(|m| self.eval_grid(m, x)).collect(),
            None => (0..n)
                .map(|j| richardson_first(|y| self.bstar(y), x, j, 2e-3 * (1.0 + x[j].abs())))
                .collect(),
        }
    }

    /// Pure second partials `∂_c² B*`.
    pub fn coordinate_second_derivatives(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.dim;
        if self.identity {
            return vec![DMatrix::zeros(n, n); n];
        }
        match &self.second {
            Some(second) => second.iter().map(|m| self.eval_grid(m, x)).collect(),
            None => (0..n)
                .map(|j| richardson_second(|y| self.bstar(y), x, j, 2e-2 * (1.0 + x[j].abs())))
                .collect(),
        }
    }
}

fn shifted(x: &[f64], j: usize, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[j] += h;
    y
}

/// Central first difference along `j` with one Richardson step.
fn richardson_first<F>(f: F, x: &[f64], j: usize, h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    let d = |h: f64| (f(&shifted(x, j, h)) - f(&shifted(x, j, -h))) / (2.0 * h);
    (d(0.5 * h) * 4.0 - d(h)) / 3.0
}

/// Central second difference along `j` with one Richardson step.
fn richardson_second<F>(f: F, x: &[f64], j: usize, h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    let f0 = f(x);
    let d = |h: f64| (f(&shifted(x, j, h)) - &f0 * 2.0 + f(&shifted(x, j, -h))) / (h * h);
    (d(0.5 * h) * 4.0 - d(h)) / 3.0
}

/// All pointwise twist tensors at one point, in frame components.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistEval {
    pub point: ChartPoint,
    /// Vector map `B = (B*)ᵀ`.
    pub b: DMatrix<f64>,
    pub bstar: DMatrix<f64>,
    pub bstar_inv: DMatrix<f64>,
    pub condition: f64,
    /// `∇_{e_c} B*` for each frame direction `c`.
    pub nabla_bstar: Vec<DMatrix<f64>>,
    /// `𝓑_c = (∇_c B* (B*)^{-1})ᵀ - ∇_c B* (B*)^{-1}`.
    pub defect: Vec<DMatrix<f64>>,
    /// `N_B = ¼ Σ_c 𝓑_cᵀ 𝓑_c`.
    pub penalty: DMatrix<f64>,
    /// Bakry–Émery tensor `𝓜`.
    pub bakry_emery: DMatrix<f64>,
    /// `𝓜_B = (B*)^{-1} 𝓜 B*`.
    pub m_conj: DMatrix<f64>,
    /// Frame components of the rough weighted Laplacian of `B*`.
    pub tensor_lap: DMatrix<f64>,
    /// `M_B = 𝓜_B - (B*)^{-1} L(B*)`.
    pub m_b: DMatrix<f64>,
    /// `S_B = B* M_B (B*)^{-1}`.
    pub s_b: DMatrix<f64>,
}

impl TwistEval {
    /// Frobenius norm of the whole defect.
    pub fn defect_norm(&self) -> f64 {
        self.defect.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn s_b_symmetric(&self) -> DMatrix<f64> {
        linalg::symmetric_part(&self.s_b)
    }

    /// `(S_B)^s - N_B`.
    pub fn tilde_operator(&self) -> DMatrix<f64> {
        self.s_b_symmetric() - &self.penalty
    }

    /// Twisted metric on vectors: `⟨B^{-1} v, B^{-1} w⟩`.
    pub fn vector_inner(&self, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let binv = self.bstar_inv.transpose();
        (&binv * v).dot(&(&binv * w))
    }

    /// Twisted metric on 1-forms: `⟨B* α, B* β⟩`.
    pub fn form_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (&self.bstar * a).dot(&(&self.bstar * b))
    }
}

/// `∇_{e_c}B*` in frame components at `x`.
fn nabla_frame(
    twist: &Twist,
    x: &[f64],
    geom: &LocalGeometry,
    omegas: &[DMatrix<f64>],
    bf: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let n = twist.dim;
    if twist.identity {
        return vec![DMatrix::zeros(n, n); n];
    }
    let d = twist.coordinate_derivatives(x);
    (0..n)
        .map(|c| {
            let mut dc = DMatrix::zeros(n, n);
            for (j, dj) in d.iter().enumerate() {
                let e = geom.frame[(j, c)];
                if e != 0.0 {
                    dc += dj * e;
                }
            }
            let w = &omegas[c];
            if w.iter().any(|v| *v != 0.0) {
                dc += w * bf - bf * w;
            }
            dc
        })
        .collect()
}

fn frame_derivative_at(model: &ModelSpec, twist: &Twist, y: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let geom = model.manifold.local(y)?;
    let omegas = model.manifold.connection_forms(y)?;
    let bf = twist.bstar(y);
    Ok(nabla_frame(twist, y, &geom, &omegas, &bf))
}

/// Largest symmetric step around `x` along `j` that keeps the stencil in the
/// chart domain.
fn admissible_step(model: &ModelSpec, x: &[f64], j: usize, h: f64) -> Result<f64> {
    let d = &model.manifold.domain;
    if d.periodic[j] {
        return Ok(h);
    }
    let room = (x[j] - d.lower[j]).min(d.upper[j] - x[j]);
    let h = h.min(room);
    if h < 1e-6 * (1.0 + x[j].abs()) {
        return Err(Error::Domain {
            coord: j,
            value: x[j],
            lower: d.lower[j],
            upper: d.upper[j],
        });
    }
    Ok(h)
}

/// Generic finite-difference route for the rough weighted Laplacian of
/// `B*`: `Σ_c ∇²_{e_c,e_c} B* - ∇_{∇V} B*`, differentiating the frame
/// components of `∇B*` numerically.
pub fn tensor_laplacian_fd(model: &ModelSpec, twist: &Twist, x: &ChartPoint) -> Result<DMatrix<f64>> {
    model.manifold.check(x)?;
    let p = x.as_slice();
    let geom = model.manifold.local(p)?;
    tensor_laplacian_fd_raw(model, twist, p, &geom)
}

fn tensor_laplacian_fd_raw(model: &ModelSpec, twist: &Twist, x: &[f64], geom: &LocalGeometry) -> Result<DMatrix<f64>> {
    let n = twist.dim;
    let omegas = model.manifold.connection_forms(x)?;
    let f = frame_derivative_at(model, twist, x)?;
    let mut partials: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
    for j in 0..n {
        let h = admissible_step(model, x, j, 4e-3 * (1.0 + x[j].abs()))?;
        let at = |s: f64| frame_derivative_at(model, twist, &shifted(x, j, s));
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(0.5 * h)?, at(-0.5 * h)?);
        partials.push(
            (0..n)
                .map(|c| {
                    let d1 = (&p1[c] - &m1[c]) / (2.0 * h);
                    let d2 = (&p2[c] - &m2[c]) / h;
                    (d2 * 4.0 - d1) / 3.0
                })
                .collect(),
        );
    }
    let grad_v = model.frame_gradient(x, geom);
    let mut t = DMatrix::zeros(n, n);
    for c in 0..n {
        for j in 0..n {
            let e = geom.frame[(j, c)];
            if e != 0.0 {
                t += &partials[j][c] * e;
            }
        }
        let w = &omegas[c];
        t += w * &f[c] - &f[c] * w;
        for a in 0..n {
            let s = w[(a, c)];
            if s != 0.0 {
                t -= &f[a] * s;
            }
        }
        t -= &f[c] * grad_v[c];
    }
    Ok(t)
}

/// Rough weighted Laplacian of `B*` in frame components.
pub fn tensor_laplacian(model: &ModelSpec, twist: &Twist, x: &ChartPoint) -> Result<DMatrix<f64>> {
    model.manifold.check(x)?;
    let p = x.as_slice();
    let geom = model.manifold.local(p)?;
    tensor_laplacian_raw(model, twist, p, &geom)
}

fn tensor_laplacian_raw(model: &ModelSpec, twist: &Twist, x: &[f64], geom: &LocalGeometry) -> Result<DMatrix<f64>> {
    let n = twist.dim;
    if twist.identity {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Some(lambda) = &twist.scalar {
        let l = apply_l_raw(model, lambda, twist.params(), x, geom);
        return Ok(DMatrix::identity(n, n) * l);
    }
    if model.manifold.is_flat_identity() {
        let d1 = twist.coordinate_derivatives(x);
        let d2 = twist.coordinate_second_derivatives(x);
        let dv = model.potential.gradient(x, &[]);
        let mut t = DMatrix::zeros(n, n);
        for c in 0..n {
            t += &d2[c] - &d1[c] * dv[c];
        }
        return Ok(t);
    }
    tensor_laplacian_fd_raw(model, twist, x, geom)
}

pub(crate) fn twist_eval_raw(model: &ModelSpec, twist: &Twist, x: &[f64], geom: &LocalGeometry) -> Result<TwistEval> {
    let n = model.dim();
    if twist.dim != n {
        return Err(Error::Config(format!(
            "twist dimension {} does not match model dimension {n}",
            twist.dim
        )));
    }
    let bstar = twist.bstar(x);
    let (bstar_inv, condition) = twist.bstar_inverse(x)?;
    let omegas = if twist.identity || model.manifold.is_flat_identity() {
        vec![DMatrix::zeros(n, n); n]
    } else {
        model.manifold.connection_forms(x)?
    };
    let nabla_bstar = nabla_frame(twist, x, geom, &omegas, &bstar);
    let defect: Vec<DMatrix<f64>> = nabla_bstar
        .iter()
        .map(|d| {
            let k = d * &bstar_inv;
            k.transpose() - k
        })
        .collect();
    let mut penalty = DMatrix::zeros(n, n);
    for d in &defect {
        penalty += d.transpose() * d;
    }
    penalty = linalg::symmetric_part(&(penalty * 0.25));
    let bakry_emery = model.bakry_emery_raw(x, geom)?;
    let tensor_lap = tensor_laplacian_raw(model, twist, x, geom)?;
    let m_conj = &bstar_inv * &bakry_emery * &bstar;
    let m_b = &m_conj - &bstar_inv * &tensor_lap;
    let s_b = &bakry_emery - &tensor_lap * &bstar_inv;
    if s_b.iter().chain(penalty.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("twist tensors not finite at {x:?}")));
    }
    Ok(TwistEval {
        point: ChartPoint::new(x),
        b: bstar.transpose(),
        bstar,
        bstar_inv,
        condition,
        nabla_bstar,
        defect,
        penalty,
        bakry_emery,
        m_conj,
        tensor_lap,
        m_b,
        s_b,
    })
}

pub fn twist_eval(model: &ModelSpec, twist: &Twist, x: &ChartPoint) -> Result<TwistEval> {
    model.manifold.check(x)?;
    let geom = model.manifold.local(x.as_slice())?;
    twist_eval_raw(model, twist, x.as_slice(), &geom)
}

/// Per-node quantities used by scans.
#[derive(Debug, Clone, Copy)]
struct NodeStats {
    defect: f64,
    asymmetry: f64,
    plain: f64,
    tilde: f64,
    gate: f64,
    condition: f64,
}

fn node_stats(model: &ModelSpec, twist: &Twist, x: &[f64], epsilon: f64) -> Result<NodeStats> {
    let geom = model.manifold.local(x)?;
    let ev = twist_eval_raw(model, twist, x, &geom)?;
    let sym = ev.s_b_symmetric();
    Ok(NodeStats {
        defect: ev.defect_norm(),
        asymmetry: linalg::asymmetry(&ev.s_b),
        plain: linalg::min_eigenvalue(&sym),
        tilde: linalg::min_eigenvalue(&(&sym - &ev.penalty)),
        gate: linalg::min_eigenvalue(&(&sym - &ev.penalty * (1.0 + epsilon))),
        condition: ev.condition,
    })
}

fn scan_nodes(
    model: &ModelSpec,
    twist: &Twist,
    region: &Region,
    epsilon: f64,
) -> Result<(Vec<Vec<f64>>, Vec<NodeStats>)> {
    region.validate(model.dim())?;
    let nodes = region.nodes();
    for p in &nodes {
        model.manifold.domain.check(p)?;
    }
    let stats = nodes
        .par_iter()
        .map(|p| node_stats(model, twist, p, epsilon))
        .collect::<Result<Vec<_>>>()?;
    Ok((nodes, stats))
}

/// Result of a bound scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mode: BoundMode,
    pub twist_family: String,
    pub parameters: Vec<f64>,
    /// Infimum of `λ_min((S_B)^s)`; only reported when the defect vanishes.
    pub rho_b: Option<f64>,
    pub argmin_rho_b: Option<Vec<f64>>,
    /// Infimum of `λ_min((S_B)^s - N_B)`.
    pub rho_tilde_b: f64,
    pub argmin_rho_tilde_b: Vec<f64>,
    /// Supremum over the grid of the Frobenius norm of `𝓑`.
    pub defect_norm: f64,
    /// Supremum over the grid of `‖S_B - S_Bᵀ‖_F`.
    pub asymmetry: f64,
    pub tilde_epsilon: f64,
    /// Grid infimum of `λ_min((S_B)^s - (1+ε) N_B)`.
    pub tilde_gate_lower_bound: f64,
    pub max_condition: f64,
    pub region: Region,
    pub grid_infimum: bool,
}

impl BoundReport {
    /// Bound certified by the requested mode.
    pub fn bound(&self) -> f64 {
        match self.mode {
            BoundMode::Plain => self.rho_b.unwrap_or(f64::NEG_INFINITY),
            BoundMode::Tilde => self.rho_tilde_b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundOptions {
    pub region: Option<Region>,
    pub refine: bool,
    pub tilde_epsilon: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            region: None,
            refine: true,
            tilde_epsilon: DEFAULT_TILDE_EPSILON,
        }
    }
}

pub fn bound_scan(model: &ModelSpec, twist: &Twist, mode: BoundMode) -> Result<BoundReport> {
    bound_scan_with(model, twist, mode, &BoundOptions::default())
}

pub fn bound_scan_with(model: &ModelSpec, twist: &Twist, mode: BoundMode, opts: &BoundOptions) -> Result<BoundReport> {
    let region = opts.region.clone().unwrap_or_else(|| model.region.clone());
    let (nodes, stats) = scan_nodes(model, twist, &region, opts.tilde_epsilon)?;
    let defect_norm = stats.iter().map(|s| s.defect).fold(0.0, f64::max);
    let asymmetry = stats.iter().map(|s| s.asymmetry).fold(0.0, f64::max);
    let max_condition = stats.iter().map(|s| s.condition).fold(1.0, f64::max);
    let tilde_gate_lower_bound = stats.iter().map(|s| s.gate).fold(f64::INFINITY, f64::min);
    let symmetric_regime = defect_norm <= DEFECT_GATE;
    if mode == BoundMode::Plain {
        if !symmetric_regime {
            return Err(Error::Mode(format!(
                "plain bound requires a vanishing twist defect but sup |B| = {defect_norm:.3e}; use mode = tilde"
            )));
        }
        if asymmetry > ASYMMETRY_GATE {
            return Err(Error::Mode(format!(
                "plain bound requires a symmetric twisted potential but the asymmetry is {asymmetry:.3e}; use mode = tilde"
            )));
        }
    } else if !tilde_gate_lower_bound.is_finite() {
        return Err(Error::Mode(
            "twisted potential minus (1+eps) N_B is not bounded below on the grid".into(),
        ));
    }

    let pick = |key: fn(&NodeStats) -> f64| {
        stats.iter().enumerate().fold(
            (0usize, f64::INFINITY),
            |acc, (i, s)| if key(s) < acc.1 { (i, key(s)) } else { acc },
        )
    };
    let refine = |key: fn(&NodeStats) -> f64, start: usize, grid: f64| -> Result<(f64, Vec<f64>)> {
        if !opts.refine {
            return Ok((grid, nodes[start].clone()));
        }
        let inf = refine_from(&region, &nodes[start], grid, |y| {
            node_stats(model, twist, y, opts.tilde_epsilon).map(|s| key(&s))
        });
        Ok(inf)
    };

    let (ti, tv) = pick(|s| s.tilde);
    let (rho_tilde_b, argmin_rho_tilde_b) = refine(|s| s.tilde, ti, tv)?;
    let (rho_b, argmin_rho_b) = if symmetric_regime {
        let (pi, pv) = pick(|s| s.plain);
        let (v, a) = refine(|s| s.plain, pi, pv)?;
        (Some(v), Some(a))
    } else {
        (None, None)
    };
    Ok(BoundReport {
        mode,
        twist_family: twist.spec.family.name().to_string(),
        parameters: twist.spec.parameters.clone(),
        rho_b,
        argmin_rho_b,
        rho_tilde_b,
        argmin_rho_tilde_b,
        defect_norm,
        asymmetry,
        tilde_epsilon: opts.tilde_epsilon,
        tilde_gate_lower_bound,
        max_condition,
        region,
        grid_infimum: true,
    })
}

/// Nelder–Mead polish of a grid minimum, clamped to the region.
fn refine_from<F>(region: &Region, start: &[f64], grid: f64, f: F) -> (f64, Vec<f64>)
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let scale: Vec<f64> = (0..region.dim()).map(|i| 0.5 * region.spacing(i)).collect();
    if scale.iter().all(|&s| s == 0.0) {
        return (grid, start.to_vec());
    }
    let nm = crate::optim::NelderMead {
        max_evaluations: 200,
        f_tol: 1e-14,
        x_tol: 1e-12,
    };
    let m = nm.minimize(|x| f(&region.clamp(x)).unwrap_or(f64::INFINITY), start, &scale);
    if m.value < grid {
        (m.value, region.clamp(&m.x))
    } else {
        (grid, start.to_vec())
    }
}

/// Grid-only certified bound, used as an optimization objective. Gate
/// violations and singular twists give `-∞`.
pub fn grid_bound(model: &ModelSpec, twist: &Twist, mode: BoundMode, region: &Region) -> f64 {
    let opts = BoundOptions {
        region: Some(region.clone()),
        refine: false,
        tilde_epsilon: DEFAULT_TILDE_EPSILON,
    };
    match bound_scan_with(model, twist, mode, &opts) {
        Ok(r) => r.bound(),
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum SymmetryOutcome {
    Holds { residual: f64 },
    Fails { witness: Vec<f64>, residual: f64 },
}

impl SymmetryOutcome {
    pub fn holds(&self) -> bool {
        matches!(self, SymmetryOutcome::Holds { .. })
    }

    pub fn residual(&self) -> f64 {
        match self {
            SymmetryOutcome::Holds { residual } | SymmetryOutcome::Fails { residual, .. } => *residual,
        }
    }
}

/// Checks whether `(∇_c B*)(B*)^{-1}` is symmetric for every direction on
/// the sampling grid.
pub fn symmetry_criterion(model: &ModelSpec, twist: &Twist) -> Result<SymmetryOutcome> {
    let inf = scan_infimum(
        &model.region,
        &model.manifold.domain,
        |x| {
            let geom = model.manifold.local(x)?;
            Ok(-twist_eval_raw(model, twist, x, &geom)?.defect_norm())
        },
        false,
    )?;
    let residual = -inf.value;
    Ok(if residual <= DEFECT_GATE {
        SymmetryOutcome::Holds { residual }
    } else {
        SymmetryOutcome::Fails {
            witness: inf.argmin,
            residual,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldSpec;
    use crate::model::rho_inf;
    use approx::assert_relative_eq;

    fn gauss2() -> ModelSpec {
        ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "(x^2 + y^2)/2",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[21, 21]),
        )
        .unwrap()
    }

    fn quartic() -> ModelSpec {
        ModelSpec::new(ManifoldSpec::euclidean(1), "x^4/4", Region::interval(-1.0, 1.0, 41)).unwrap()
    }

    fn compile(spec: &TwistSpec, dim: usize) -> Twist {
        Twist::compile(spec, dim).unwrap()
    }

    #[test]
    fn identity_twist_is_inert() {
        let m = gauss2();
        let t = compile(&TwistSpec::identity(), 2);
        let ev = twist_eval(&m, &t, &ChartPoint::new(&[0.3, -0.7])).unwrap();
        assert_eq!(ev.bstar, DMatrix::identity(2, 2));
        assert!(ev.nabla_bstar.iter().all(|d| d.norm() == 0.0));
        assert_eq!(ev.penalty.norm(), 0.0);
        assert_eq!(ev.m_b, ev.bakry_emery);
    }

    #[test]
    fn exponential_scalar_twist_gives_minus_identity() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "0", Region::interval(-2.0, 2.0, 9)).unwrap();
        let t = compile(&TwistSpec::scalar("exp(-x)"), 1);
        for x in [-1.5, 0.0, 0.8] {
            let ev = twist_eval(&m, &t, &ChartPoint::new(&[x])).unwrap();
            assert_eq!(ev.defect_norm(), 0.0);
            assert_relative_eq!(ev.m_b[(0, 0)], -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shear_defect_and_penalty() {
        let t = compile(&TwistSpec::shear("x"), 2);
        let ev = twist_eval(&gauss2(), &t, &ChartPoint::new(&[0.4, 0.1])).unwrap();
        assert_eq!(ev.defect[0], DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        assert_eq!(ev.defect[1].norm(), 0.0);
        assert_relative_eq!(ev.penalty, DMatrix::identity(2, 2) * 0.25, epsilon = 1e-14);
    }

    #[test]
    fn shear_defect_by_brute_force_differences() {
        let t = compile(&TwistSpec::shear("x"), 2);
        let x = [0.4, 0.1];
        let h = 1e-5;
        let bf = |y: &[f64]| t.bstar(y);
        let d1 = (bf(&[x[0] + h, x[1]]) - bf(&[x[0] - h, x[1]])) / (2.0 * h);
        let k = d1 * bf(&x).try_inverse().unwrap();
        let brute = (k.transpose() - &k).transpose() * (k.transpose() - k) * 0.25;
        let ev = twist_eval(&gauss2(), &t, &ChartPoint::new(&x)).unwrap();
        assert_relative_eq!(ev.penalty, brute, epsilon = 1e-8);
    }

    #[test]
    fn constant_twist_has_zero_laplacian() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]);
        let t = compile(&TwistSpec::constant(&q), 2);
        let lap = tensor_laplacian(&gauss2(), &t, &ChartPoint::new(&[0.2, 0.3])).unwrap();
        assert_eq!(lap.norm(), 0.0);
    }

    #[test]
    fn scalar_laplacian_symbolic_and_fd() {
        let m = quartic();
        let t = compile(&TwistSpec::scalar("exp(-x^2/2)"), 1);
        for x in [-0.9, -0.2, 0.0, 0.5, 1.0] {
            let p = ChartPoint::new(&[x]);
            let lam = (-x * x / 2.0f64).exp();
            let expected = (x * x - 1.0) + x.powi(4);
            let sym = tensor_laplacian(&m, &t, &p).unwrap()[(0, 0)] / lam;
            assert_relative_eq!(sym, expected, epsilon = 1e-12);
            let fd = tensor_laplacian_fd(&m, &t, &p).unwrap()[(0, 0)] / lam;
            assert!((fd - expected).abs() < 1e-5, "x={x}: {fd} vs {expected}");
        }
    }

    #[test]
    fn user_matrix_matches_builtin_shear() {
        let m = gauss2();
        let a = compile(&TwistSpec::shear("x*y + sin(x)"), 2);
        let b = compile(&TwistSpec::user_matrix(&[&["1", "x*y + sin(x)"], &["0", "1"]]), 2);
        assert!(!b.has_symbolic_derivatives());
        let p = ChartPoint::new(&[0.3, -0.6]);
        let ea = twist_eval(&m, &a, &p).unwrap();
        let eb = twist_eval(&m, &b, &p).unwrap();
        assert_relative_eq!(ea.penalty, eb.penalty, epsilon = 1e-9);
        assert_relative_eq!(ea.s_b, eb.s_b, epsilon = 1e-6);
    }

    #[test]
    fn scalar_twist_on_sphere_matches_fd_route() {
        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "cos(theta)/2",
            Region::new(&[0.5, 0.0], &[2.5, 6.0], &[5, 5]),
        )
        .unwrap();
        let t = compile(&TwistSpec::scalar("exp(sin(theta)*cos(phi)/3)"), 2);
        let p = ChartPoint::new(&[1.1, 0.7]);
        let analytic = tensor_laplacian(&s, &t, &p).unwrap();
        let fd = tensor_laplacian_fd(&s, &t, &p).unwrap();
        assert_relative_eq!(analytic, fd, epsilon = 1e-6);
    }

    #[test]
    fn quartic_scalar_twist_bound() {
        let m = quartic();
        let t = compile(&TwistSpec::scalar("exp(-x^2/2)"), 1);
        let r = bound_scan(&m, &t, BoundMode::Plain).unwrap();
        assert!((r.rho_b.unwrap() - 1.0).abs() < 1e-10, "{r:?}");
        assert!(r.argmin_rho_b.as_ref().unwrap()[0].abs() < 1e-4);
        assert_eq!(rho_inf(&m).unwrap().grid_value, 0.0);
    }

    #[test]
    fn plain_mode_refuses_shear() {
        let t = compile(&TwistSpec::shear("x"), 2);
        assert!(matches!(
            bound_scan(&gauss2(), &t, BoundMode::Plain),
            Err(Error::Mode(_))
        ));
        let r = bound_scan(&gauss2(), &t, BoundMode::Tilde).unwrap();
        // (S_B)^s - ¼ I = [[3/4, x/2], [x/2, 3/4]] on [-1, 1]².
        assert_relative_eq!(r.rho_tilde_b, 0.25, epsilon = 1e-10);
    }

    #[test]
    fn symmetry_criterion_examples() {
        let m = gauss2();
        assert!(symmetry_criterion(&m, &compile(&TwistSpec::scalar("exp(x*y)"), 2))
            .unwrap()
            .holds());
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 2.0]);
        assert!(symmetry_criterion(&m, &compile(&TwistSpec::constant(&q), 2))
            .unwrap()
            .holds());
        let out = symmetry_criterion(&m, &compile(&TwistSpec::shear("x"), 2)).unwrap();
        assert!(!out.holds());
        assert_relative_eq!(out.residual(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn singular_twist_is_reported() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-1.0, 1.0, 5)).unwrap();
        let t = compile(&TwistSpec::scalar("x"), 1);
        let e = twist_eval(&m, &t, &ChartPoint::new(&[0.0])).unwrap_err();
        assert!(matches!(e, Error::TwistSingular { .. }));
    }

    #[test]
    fn missing_parameters_is_config_error() {
        let spec = TwistSpec::scalar("exp(p0*x + p1*x^2)").with_parameters(&[0.1]);
        assert!(matches!(Twist::compile(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn exp_poly_family_starts_at_identity() {
        let t = compile(&TwistSpec::scalar_exp_poly(4), 1);
        assert_eq!(t.bstar(&[0.7])[(0, 0)], 1.0);
        let t = t.with_parameters(&[0.0, -0.5, 0.0, 0.0]);
        assert_relative_eq!(t.bstar(&[2.0])[(0, 0)], (-2.0f64).exp(), epsilon = 1e-14);
    }

    use proptest::prelude::*;

    fn rotation(a: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conjugation_preserves_spectrum(x in -1.0f64..1.0, y in -1.0f64..1.0, s in -0.8f64..0.8) {
            let m = ModelSpec::new(ManifoldSpec::euclidean(2), "x^4/4 + x*y + y^2", Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[3, 3])).unwrap();
            let t = compile(&TwistSpec::shear(&format!("{s}*x*y + 0.3")), 2);
            let ev = twist_eval(&m, &t, &ChartPoint::new(&[x, y])).unwrap();
            let mut a: Vec<f64> = ev.m_conj.clone().complex_eigenvalues().iter().map(|z| z.re).collect();
            let mut b: Vec<f64> = nalgebra::SymmetricEigen::new(ev.bakry_emery.clone()).eigenvalues.iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-8);
            }
            prop_assert!(linalg::min_eigenvalue(&ev.penalty) >= -1e-10);
            for d in &ev.defect {
                prop_assert!((d + d.transpose()).norm() == 0.0);
            }
        }

        #[test]
        fn scalar_family_identity(x in -1.0f64..1.0, a in -1.0f64..1.0) {
            let m = quartic();
            let t = compile(&TwistSpec::scalar(&format!("exp({a}*x + x^2/3)")), 1);
            let ev = twist_eval(&m, &t, &ChartPoint::new(&[x])).unwrap();
            let lam = SmoothField::parse(&format!("exp({a}*x + x^2/3)"), 1).unwrap();
            let l = crate::model::apply_l(&m, &lam, &ChartPoint::new(&[x])).unwrap() / lam.value(&[x], &[]);
            prop_assert!((ev.s_b[(0, 0)] - (3.0 * x * x - l)).abs() < 1e-6);
        }

        #[test]
        fn constant_orthogonal_twist_keeps_rho(a in 0.0f64..6.28) {
            let m = ModelSpec::new(ManifoldSpec::euclidean(2), "x^2 + x*y + y^2 + x^4/8", Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[7, 7])).unwrap();
            let t = compile(&TwistSpec::constant(&rotation(a)), 2);
            let r = bound_scan_with(&m, &t, BoundMode::Plain, &BoundOptions { refine: false, ..Default::default() }).unwrap();
            let rho = rho_inf(&m).unwrap().grid_value;
            prop_assert!((r.rho_b.unwrap() - rho).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_bounds_equal_rho() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "(x^2-1)^2", Region::interval(-2.0, 2.0, 41)).unwrap();
        let r = bound_scan(&m, &compile(&TwistSpec::identity(), 1), BoundMode::Plain).unwrap();
        let rho = rho_inf(&m).unwrap().value;
        assert!((r.rho_b.unwrap() - rho).abs() < 1e-10);
        assert!((r.rho_tilde_b - rho).abs() < 1e-10);
    }
}
