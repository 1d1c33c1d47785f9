//! Ground-truth spectral gap from an edge-weighted discretization of the
//! Dirichlet form `∫⟨df, dg⟩ dμ`, μ-quadrature, and twist optimization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Region};
use crate::optim::{coordinate_polish, NelderMead};
use crate::twistcalc::{bound_scan, grid_bound, BoundMode, BoundReport, Twist, TwistSpec};

/// Largest problem handed to the dense symmetric eigensolver.
pub const DENSE_LIMIT: usize = 400;

/// Tensor grid for the discretization. Periodic chart axes use `points`
/// nodes with the upper end identified with the lower one; other axes are
/// truncated with Neumann edges and include both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl GapGrid {
    pub fn new(lower: &[f64], upper: &[f64], points: &[usize]) -> Self {
        GapGrid {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            points: points.to_vec(),
        }
    }

    pub fn interval(a: f64, b: f64, points: usize) -> Self {
        Self::new(&[a], &[b], &[points])
    }

    /// Same box with every axis at twice the resolution.
    pub fn doubled(&self, periodic: &[bool]) -> Self {
        let points = self
            .points
            .iter()
            .zip(periodic)
            .map(|(&p, &per)| if per { 2 * p } else { 2 * p - 1 })
            .collect();
        GapGrid {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Neumann,
    Periodic,
}

/// Discrete Dirichlet form: symmetric edge weights plus diagonal mass.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub axes: Vec<Vec<f64>>,
    pub boundary: Vec<Boundary>,
    pub mass: Vec<f64>,
    /// `(p, q, w)` with `p < q`: contributes `w (f_p - f_q)²`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Potential shift applied before exponentiating.
    pub v_shift: f64,
}

impl Discretization {
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Node coordinates in row-major order (last axis fastest).
    pub fn node(&self, flat: usize) -> Vec<f64> {
        let d = self.axes.len();
        let mut rem = flat;
        let mut p = vec![0.0; d];
        for i in (0..d).rev() {
            let n = self.axes[i].len();
            p[i] = self.axes[i][rem % n];
            rem /= n;
        }
        p
    }

    pub fn stiffness_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut k = DMatrix::zeros(n, n);
        for &(p, q, w) in &self.edges {
            k[(p, p)] += w;
            k[(q, q)] += w;
            k[(p, q)] -= w;
            k[(q, p)] -= w;
        }
        k
    }

    /// `Σ_edges w (f_p - f_q)²`.
    pub fn energy(&self, f: &[f64]) -> f64 {
        self.edges.iter().map(|&(p, q, w)| w * (f[p] - f[q]).powi(2)).sum()
    }
}

fn axis_nodes(lower: f64, upper: f64, n: usize, periodic: bool) -> (Vec<f64>, f64) {
    if periodic {
        let h = (upper - lower) / n as f64;
        ((0..n).map(|k| lower + h * k as f64).collect(), h)
    } else {
        let h = (upper - lower) / (n - 1) as f64;
        ((0..n).map(|k| lower + h * k as f64).collect(), h)
    }
}

fn trapezoid(n: usize, h: f64, periodic: bool) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if !periodic && (k == 0 || k == n - 1) {
                0.5 * h
            } else {
                h
            }
        })
        .collect()
}

fn volume_density(model: &ModelSpec, x: &[f64]) -> Result<f64> {
    if model.manifold.is_flat_identity() {
        return Ok(1.0);
    }
    let g = model.manifold.metric_raw(x);
    let det = g.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Numeric(format!("metric degenerate at {x:?}")));
    }
    Ok(det.sqrt())
}

/// Assemble the discrete Dirichlet form on `grid`. Requires a diagonal
/// metric.
pub fn discretize(model: &ModelSpec, grid: &GapGrid) -> Result<Discretization> {
    let d = model.dim();
    if d > 2 {
        return Err(Error::Config(
            "spectral discretization supports one or two dimensions".into(),
        ));
    }
    if grid.lower.len() != d || grid.upper.len() != d || grid.points.len() != d {
        return Err(Error::Config(format!("gap grid must have {d} axes")));
    }
    if !model.manifold.is_diagonal_metric() {
        return Err(Error::Config(
            "spectral discretization requires a diagonal metric".into(),
        ));
    }
    let dom = &model.manifold.domain;
    let mut axes = Vec::with_capacity(d);
    let mut steps = Vec::with_capacity(d);
    let mut boundary = Vec::with_capacity(d);
    let mut trap = Vec::with_capacity(d);
    for a in 0..d {
        let periodic = dom.periodic[a];
        let n = grid.points[a];
        if n < 3 || !(grid.upper[a] > grid.lower[a]) {
            return Err(Error::Config(format!(
                "gap grid axis {a} needs at least 3 points on a non-empty range"
            )));
        }
        if periodic {
            let p = dom.upper[a] - dom.lower[a];
            if ((grid.upper[a] - grid.lower[a]) - p).abs() > 1e-9 * p {
                return Err(Error::Config(format!(
                    "periodic axis {a} must span one full period {p}"
                )));
            }
        } else if grid.lower[a] < dom.lower[a] || grid.upper[a] > dom.upper[a] {
            return Err(Error::Config(format!("gap grid axis {a} leaves the chart domain")));
        }
        let (nodes, h) = axis_nodes(grid.lower[a], grid.upper[a], n, periodic);
        trap.push(trapezoid(n, h, periodic));
        axes.push(nodes);
        steps.push(h);
        boundary.push(if periodic {
            Boundary::Periodic
        } else {
            Boundary::Neumann
        });
    }
    let dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let total: usize = dims.iter().product();
    let index = |ix: &[usize]| ix.iter().zip(&dims).fold(0usize, |acc, (&i, &n)| acc * n + i);
    let unflatten = |mut flat: usize| {
        let mut ix = vec![0usize; d];
        for a in (0..d).rev() {
            ix[a] = flat % dims[a];
            flat /= dims[a];
        }
        ix
    };

    let node_v: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let ix = unflatten(flat);
            let x: Vec<f64> = (0..d).map(|a| axes[a][ix[a]]).collect();
            model.potential_at(&x)
        })
        .collect();
    if node_v.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(Error::Numeric("potential is not finite on the gap grid".into()));
    }
    let v_shift = node_v.iter().copied().fold(f64::INFINITY, f64::min);

    let mass = (0..total)
        .map(|flat| {
            let ix = unflatten(flat);
            let x: Vec<f64> = (0..d).map(|a| axes[a][ix[a]]).collect();
            let w: f64 = (0..d).map(|a| trap[a][ix[a]]).product();
            Ok(w * volume_density(model, &x)? * (-(node_v[flat] - v_shift)).exp())
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut edges = Vec::new();
    for flat in 0..total {
        let ix = unflatten(flat);
        for a in 0..d {
            let periodic = boundary[a] == Boundary::Periodic;
            let next = if ix[a] + 1 < dims[a] {
                ix[a] + 1
            } else if periodic {
                0
            } else {
                continue;
            };
            let mut jx = ix.clone();
            jx[a] = next;
            let other = index(&jx);
            let mut mid: Vec<f64> = (0..d).map(|b| axes[b][ix[b]]).collect();
            mid[a] += 0.5 * steps[a];
            let g = model.manifold.metric_raw(&mid);
            let geom_factor = if model.manifold.is_flat_identity() {
                1.0
            } else {
                volume_density(model, &mid)? / g[(a, a)]
            };
            let transverse: f64 = (0..d).filter(|&b| b != a).map(|b| trap[b][ix[b]]).product();
            let vm = model.potential_at(&mid) - v_shift;
            let w = (-vm).exp() * geom_factor * transverse / steps[a];
            if !w.is_finite() {
                return Err(Error::Numeric(format!("edge weight not finite at {mid:?}")));
            }
            let (p, q) = if flat < other { (flat, other) } else { (other, flat) };
            edges.push((p, q, w));
        }
    }
    Ok(Discretization {
        axes,
        boundary,
        mass,
        edges,
        v_shift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub lambda1: f64,
    /// Eigenvector normalized in the discrete `L²(μ)` norm.
    pub eigvec: Vec<f64>,
    /// `‖K v - λ₁ M v‖ / ‖M v‖`.
    pub residual_norm: f64,
    pub unknowns: usize,
    pub method: String,
}

/// Symmetric band matrix, lower storage: `band[i * (b+1) + k] = A[i][i-k]`.
#[derive(Debug, Clone)]
struct Banded {
    n: usize,
    b: usize,
    band: Vec<f64>,
}

impl Banded {
    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = i - j;
        if k > self.b {
            0.0
        } else {
            self.band[i * (self.b + 1) + k]
        }
    }

    /// `LDLᵀ` of `A - σI` without pivoting; returns the factor and the number
    /// of negative pivots (eigenvalues below `σ`).
    fn factor(&self, sigma: f64) -> (Vec<f64>, Vec<f64>, usize) {
        let (n, b) = (self.n, self.b);
        let w = b + 1;
        let mut l = vec![0.0; n * w];
        let mut dvec = vec![0.0; n];
        let mut neg = 0;
        let scale = self.band.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for i in 0..n {
            let j0 = i.saturating_sub(b);
            for j in j0..i {
                let mut s = self.band[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(b));
                for k in k0..j {
                    s -= l[i * w + (i - k)] * dvec[k] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / dvec[j];
            }
            let mut di = self.band[i * w] - sigma;
            for k in j0..i {
                let lik = l[i * w + (i - k)];
                di -= lik * lik * dvec[k];
            }
            if di.abs() < 1e-300 + 1e-15 * scale * f64::EPSILON {
                di = -1e-15 * scale * f64::EPSILON;
            }
            if di < 0.0 {
                neg += 1;
            }
            l[i * w] = 1.0;
            dvec[i] = di;
        }
        (l, dvec, neg)
    }

    fn solve(&self, l: &[f64], dvec: &[f64], rhs: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        let w = b + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(b);
            let mut s = rhs[i];
            for j in j0..i {
                s -= l[i * w + (i - j)] * rhs[j];
            }
            rhs[i] = s;
        }
        for i in 0..n {
            rhs[i] /= dvec[i];
        }
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for k in (i + 1)..n.min(i + b + 1) {
                s -= l[k * w + (k - i)] * rhs[k];
            }
            rhs[i] = s;
        }
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for k in 0..=self.b.min(i) {
                let j = i - k;
                let a = self.band[i * (self.b + 1) + k];
                y[i] += a * x[j];
                if k > 0 {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }
}

/// Ordering that keeps ring neighbours within distance two.
fn interleave(n: usize) -> Vec<usize> {
    // pos[node] = new index.
    let mut pos = vec![0usize; n];
    let (mut lo, mut hi, mut k) = (0usize, n - 1, 0usize);
    while lo <= hi {
        pos[lo] = k;
        k += 1;
        if hi != lo {
            pos[hi] = k;
            k += 1;
        }
        lo += 1;
        if hi == 0 {
            break;
        }
        hi -= 1;
    }
    pos
}

fn symmetric_scaled(d: &Discretization) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
    let n = d.len();
    let mut diag = vec![0.0; n];
    for &(p, q, w) in &d.edges {
        diag[p] += w;
        diag[q] += w;
    }
    let s: Vec<f64> = d.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let diag = diag.iter().zip(&s).map(|(a, si)| a * si * si).collect();
    let off = d.edges.iter().map(|&(p, q, w)| (p, q, -w * s[p] * s[q])).collect();
    (diag, off)
}

/// Smallest nonzero eigenvalue of `K v = λ M v` with constants deflated.
pub fn spectral_gap(d: &Discretization) -> Result<SpectralResult> {
    let n = d.len();
    if n < 3 {
        return Err(Error::Config("discretization too small".into()));
    }
    let (diag, off) = symmetric_scaled(d);
    let sqrt_m: Vec<f64> = d.mass.iter().map(|m| m.sqrt()).collect();
    let total_mass: f64 = d.mass.iter().sum();
    let ground: Vec<f64> = sqrt_m.iter().map(|s| s / total_mass.sqrt()).collect();

    let (lambda1, mut u, method) = if n <= DENSE_LIMIT {
        let mut a = DMatrix::from_diagonal(&DVector::from_vec(diag));
        for &(p, q, w) in &off {
            a[(p, q)] += w;
            a[(q, p)] += w;
        }
        let eig = SymmetricEigen::new(a);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let k = order[1];
        (
            eig.eigenvalues[k],
            eig.eigenvectors.column(k).iter().copied().collect::<Vec<f64>>(),
            "dense".to_string(),
        )
    } else {
        let (lambda, u) = banded_gap(d, &diag, &off, &ground)?;
        (lambda, u, "banded-bisection".to_string())
    };

    // Deflate constants and normalize in L²(μ).
    let c: f64 = u.iter().zip(&ground).map(|(a, b)| a * b).sum();
    for (ui, gi) in u.iter_mut().zip(&ground) {
        *ui -= c * gi;
    }
    let mut v: Vec<f64> = u.iter().zip(&sqrt_m).map(|(a, s)| a / s).collect();
    let norm = v.iter().zip(&d.mass).map(|(a, m)| a * a * m).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Numeric("eigenvector vanished after deflation".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    let mut kv = vec![0.0; n];
    for &(p, q, w) in &d.edges {
        let diff = w * (v[p] - v[q]);
        kv[p] += diff;
        kv[q] -= diff;
    }
    let res: f64 = kv
        .iter()
        .zip(&v)
        .zip(&d.mass)
        .map(|((k, x), m)| (k - lambda1 * m * x).powi(2) / m)
        .sum::<f64>()
        .sqrt();
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::Numeric(format!(
            "non-positive spectral gap {lambda1}; residual {res:.3e}"
        )));
    }
    Ok(SpectralResult {
        lambda1,
        eigvec: v,
        residual_norm: res,
        unknowns: n,
        method,
    })
}

fn banded_gap(
    d: &Discretization,
    diag: &[f64],
    off: &[(usize, usize, f64)],
    ground: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = d.len();
    let dims: Vec<usize> = d.axes.iter().map(|a| a.len()).collect();
    let perms: Vec<Vec<usize>> = dims
        .iter()
        .zip(&d.boundary)
        .map(|(&m, b)| {
            if *b == Boundary::Periodic {
                interleave(m)
            } else {
                (0..m).collect()
            }
        })
        .collect();
    let new_index: Vec<usize> = (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut ix = vec![0usize; dims.len()];
            for a in (0..dims.len()).rev() {
                ix[a] = rem % dims[a];
                rem /= dims[a];
            }
            ix.iter()
                .enumerate()
                .fold(0usize, |acc, (a, &i)| acc * dims[a] + perms[a][i])
        })
        .collect();
    let b = off
        .iter()
        .map(|&(p, q, _)| new_index[p].abs_diff(new_index[q]))
        .max()
        .unwrap_or(0)
        .max(1);
    let w = b + 1;
    let mut band = vec![0.0; n * w];
    for (i, &v) in diag.iter().enumerate() {
        band[new_index[i] * w] += v;
    }
    for &(p, q, v) in off {
        let (i, j) = (new_index[p], new_index[q]);
        let (i, j) = if i > j { (i, j) } else { (j, i) };
        band[i * w + (i - j)] += v;
    }
    let a = Banded { n, b, band };

    let mut hi = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(b);
            let hi = (i + b + 1).min(n);
            (lo..hi).map(|j| a.get(i, j).abs()).sum::<f64>()
        })
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    if a.factor(hi).2 < 2 {
        hi *= 2.0;
    }
    let mut iterations = 0;
    while hi - lo > 1e-13 * hi.max(1e-300) && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        if a.factor(mid).2 >= 2 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    let lambda = 0.5 * (lo + hi);

    // Inverse iteration just below the eigenvalue, constants deflated.
    let g_perm: Vec<f64> = {
        let mut g = vec![0.0; n];
        for (i, &v) in ground.iter().enumerate() {
            g[new_index[i]] = v;
        }
        g
    };
    let shift = lambda - 1e-9 * lambda.max(1e-12);
    let (l, dv, _) = a.factor(shift);
    let mut x: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 0.5) * 0.618_033_988_7).fract() - 0.5)
        .collect();
    for _ in 0..8 {
        let c: f64 = x.iter().zip(&g_perm).map(|(p, q)| p * q).sum();
        for (xi, gi) in x.iter_mut().zip(&g_perm) {
            *xi -= c * gi;
        }
        a.solve(&l, &dv, &mut x);
        let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::Numeric("inverse iteration broke down".into()));
        }
        for v in x.iter_mut() {
            *v /= nrm;
        }
    }
    let ax = a.mul(&x);
    let rayleigh: f64 = ax.iter().zip(&x).map(|(p, q)| p * q).sum();
    if (rayleigh - lambda).abs() > 1e-6 * lambda.max(1.0) {
        return Err(Error::Numeric(format!(
            "eigenvector did not converge: Rayleigh quotient {rayleigh} vs {lambda}"
        )));
    }
    let mut u = vec![0.0; n];
    for (i, ni) in new_index.iter().enumerate() {
        u[i] = x[*ni];
    }
    Ok((lambda, u))
}

/// λ₁ on `grid` and on the doubled grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lambda1: f64,
    pub lambda1_refined: Option<f64>,
    pub relative_change: Option<f64>,
    pub under_resolved: bool,
    pub residual_norm: f64,
    pub unknowns: usize,
    pub method: String,
    pub grid: GapGrid,
}

pub fn gap_with_refinement(model: &ModelSpec, grid: &GapGrid, refine: bool) -> Result<(GapReport, SpectralResult)> {
    let d = discretize(model, grid)?;
    let r = spectral_gap(&d)?;
    let (refined, change) = if refine {
        let fine = grid.doubled(&model.manifold.domain.periodic);
        let r2 = spectral_gap(&discretize(model, &fine)?)?;
        (Some(r2.lambda1), Some((r2.lambda1 - r.lambda1).abs() / r2.lambda1))
    } else {
        (None, None)
    };
    Ok((
        GapReport {
            lambda1: r.lambda1,
            lambda1_refined: refined,
            relative_change: change,
            under_resolved: change.is_some_and(|c| c >= 1e-3),
            residual_norm: r.residual_norm,
            unknowns: r.unknowns,
            method: r.method.clone(),
            grid: grid.clone(),
        },
        r,
    ))
}

/// Normalized μ-quadrature weights on the tensor trapezoid grid of
/// `region`, plus the fraction of mass in the outermost cells of
/// non-periodic axes.
pub fn mu_weights(model: &ModelSpec, region: &Region) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
    let d = model.dim();
    region.validate(d)?;
    let nodes = region.nodes();
    let trap: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let n = region.points[a];
            if n == 1 {
                vec![1.0]
            } else {
                trapezoid(n, region.spacing(a), false)
            }
        })
        .collect();
    let vs: Vec<f64> = nodes.iter().map(|x| model.potential_at(x)).collect();
    let vmin = vs.iter().copied().fold(f64::INFINITY, f64::min);
    if !vmin.is_finite() {
        return Err(Error::Numeric("potential is not finite on the quadrature grid".into()));
    }
    let mut w = Vec::with_capacity(nodes.len());
    let mut edge_mass = 0.0;
    for (flat, x) in nodes.iter().enumerate() {
        let mut rem = flat;
        let mut tw = 1.0;
        let mut outer = false;
        for a in (0..d).rev() {
            let n = region.points[a];
            let i = rem % n;
            rem /= n;
            tw *= trap[a][i];
            if n > 2 && !model.manifold.domain.periodic[a] && (i == 0 || i == n - 1) {
                outer = true;
            }
        }
        let wi = tw * volume_density(model, x)? * (-(vs[flat] - vmin)).exp();
        if outer {
            edge_mass += wi;
        }
        w.push(wi);
    }
    let z: f64 = crate::linalg::pairwise_sum(&w);
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Numeric("quadrature mass is degenerate".into()));
    }
    for wi in w.iter_mut() {
        *wi /= z;
    }
    Ok((nodes, w, edge_mass / z))
}

/// Mass fraction in the outermost cells above which truncation is flagged.
pub const TRUNCATION_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    pub boundary_mass: f64,
    pub truncation_warning: bool,
}

/// `∫ F dμ` with μ normalized on the truncated region.
pub fn integrate_mu<F>(model: &ModelSpec, region: &Region, integrand: F) -> Result<Quadrature>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let (nodes, w, boundary_mass) = mu_weights(model, region)?;
    let vals: Vec<f64> = nodes.par_iter().map(|x| integrand(x)).collect();
    if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("integrand not finite at {:?}", nodes[k])));
    }
    let terms: Vec<f64> = vals.iter().zip(&w).map(|(v, w)| v * w).collect();
    Ok(Quadrature {
        value: crate::linalg::pairwise_sum(&terms),
        boundary_mass,
        truncation_warning: boundary_mass > TRUNCATION_THRESHOLD,
    })
}

/// Search budget for twist optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeBudget {
    pub restarts: usize,
    pub evaluations_per_start: usize,
    pub restart_scale: f64,
    pub seed: u64,
}

impl Default for OptimizeBudget {
    fn default() -> Self {
        OptimizeBudget {
            restarts: 5,
            evaluations_per_start: 400,
            restart_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub parameters: Vec<f64>,
    pub bound: f64,
    pub baseline_bound: f64,
    pub report: BoundReport,
    pub lambda1: f64,
    pub gap_ratio: f64,
    pub sound: bool,
    pub evaluations: usize,
}

/// Soundness margin between a certified bound and λ₁.
pub const SOUNDNESS_TOLERANCE: f64 = 1e-6;

/// Maximize the certified bound over the family's parameters.
pub fn optimize_twist(
    model: &ModelSpec,
    family: &TwistSpec,
    mode: BoundMode,
    budget: &OptimizeBudget,
    gap_grid: &GapGrid,
) -> Result<OptimizeResult> {
    let base = Twist::compile(family, model.dim())?;
    let p0 = family.parameters.clone();
    let region = model.region.clone();
    let objective = |p: &[f64]| -grid_bound(model, &base.with_parameters(p), mode, &region);

    let mut starts = vec![p0.clone()];
    let mut rng = crate::rng::path_stream(budget.seed, u64::MAX);
    for _ in 0..budget.restarts {
        starts.push(
            p0.iter()
                .map(|v| v + budget.restart_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
    }
    let nm = NelderMead {
        max_evaluations: budget.evaluations_per_start,
        f_tol: 1e-12,
        x_tol: 1e-10,
    };
    let runs: Vec<_> = starts
        .par_iter()
        .map(|s| nm.minimize(objective, s, &vec![0.25; s.len()]))
        .collect();
    let mut evaluations: usize = runs.iter().map(|r| r.evaluations).sum();
    let best = runs
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");
    let (polished, _) = coordinate_polish(|p| objective(p), &best.x, 0.05, 40);
    evaluations += 80 * polished.len().max(1);

    let baseline = bound_scan(model, &base, mode)?;
    let candidate = bound_scan(model, &base.with_parameters(&polished), mode);
    let (parameters, report) = match candidate {
        Ok(r) if r.bound() >= baseline.bound() => (polished, r),
        _ => (p0, baseline.clone()),
    };
    let (gap, _) = gap_with_refinement(model, gap_grid, false)?;
    let bound = report.bound();
    Ok(OptimizeResult {
        parameters,
        bound,
        baseline_bound: baseline.bound(),
        report,
        lambda1: gap.lambda1,
        gap_ratio: bound / gap.lambda1,
        sound: bound <= gap.lambda1 + SOUNDNESS_TOLERANCE,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldSpec;
    use std::f64::consts::PI;

    fn gap(model: &ModelSpec, grid: &GapGrid) -> f64 {
        spectral_gap(&discretize(model, grid).unwrap()).unwrap().lambda1
    }

    #[test]
    fn circle_gap() {
        let m = ModelSpec::new(ManifoldSpec::circle(1.0), "0", Region::interval(0.0, 6.0, 3)).unwrap();
        let l = gap(&m, &GapGrid::interval(0.0, 2.0 * PI, 512));
        assert!((l - 1.0).abs() < 1e-4, "{l}");
    }

    #[test]
    fn neumann_interval_gap() {
        let m = ModelSpec::new(ManifoldSpec::interval(0.0, 1.0), "0", Region::interval(0.0, 1.0, 3)).unwrap();
        let l = gap(&m, &GapGrid::interval(0.0, 1.0, 1000));
        assert!((l / (PI * PI) - 1.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn dense_and_banded_agree() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "(x^2-1)^2", Region::interval(-3.0, 3.0, 3)).unwrap();
        let d = discretize(&m, &GapGrid::interval(-3.0, 3.0, 300)).unwrap();
        let dense = spectral_gap(&d).unwrap();
        let (diag, off) = symmetric_scaled(&d);
        let total: f64 = d.mass.iter().sum();
        let ground: Vec<f64> = d.mass.iter().map(|m| m.sqrt() / total.sqrt()).collect();
        let (banded, _) = banded_gap(&d, &diag, &off, &ground).unwrap();
        assert!(
            (dense.lambda1 - banded).abs() < 1e-10 * dense.lambda1,
            "{} vs {banded}",
            dense.lambda1
        );
    }

    #[test]
    fn periodic_banded_matches_dense() {
        let m = ModelSpec::new(ManifoldSpec::circle(1.0), "cos(x)", Region::interval(0.0, 6.0, 3)).unwrap();
        let d = discretize(&m, &GapGrid::interval(0.0, 2.0 * PI, 200)).unwrap();
        let dense = spectral_gap(&d).unwrap().lambda1;
        let big = discretize(&m, &GapGrid::interval(0.0, 2.0 * PI, 800)).unwrap();
        let banded = spectral_gap(&big).unwrap();
        assert_eq!(banded.method, "banded-bisection");
        assert!((dense - banded.lambda1).abs() < 1e-3, "{dense} vs {}", banded.lambda1);
    }

    #[test]
    fn stiffness_structure() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "x^2/2 + 2*y^2",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[3, 3]),
        )
        .unwrap();
        let d = discretize(&m, &GapGrid::new(&[-3.0, -2.0], &[3.0, 2.0], &[9, 7])).unwrap();
        let k = d.stiffness_dense();
        assert!((&k - k.transpose()).norm() <= 1e-12);
        let ones = DVector::from_element(d.len(), 1.0);
        assert!((&k * ones).norm() < 1e-12);
        let mut state = 1u64;
        for _ in 0..20 {
            let v = DVector::from_fn(d.len(), |_, _| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            assert!(v.dot(&(&k * &v)) >= -1e-10);
        }
    }

    #[test]
    fn gaussian_moments() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-10.0, 10.0, 401)).unwrap();
        let one = integrate_mu(&m, &m.region, |_| 1.0).unwrap();
        assert!((one.value - 1.0).abs() < 1e-14);
        let x2 = integrate_mu(&m, &m.region, |x| x[0] * x[0]).unwrap();
        assert!((x2.value - 1.0).abs() < 1e-8, "{}", x2.value);
        assert!(!x2.truncation_warning);
        let narrow = Region::interval(-1.0, 1.0, 41);
        assert!(integrate_mu(&m, &narrow, |_| 1.0).unwrap().truncation_warning);
    }

    #[test]
    fn mixed_moment_vanishes() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "x^2/2 + 2*y^2",
            Region::new(&[-8.0, -4.0], &[8.0, 4.0], &[81, 81]),
        )
        .unwrap();
        let q = integrate_mu(&m, &m.region, |x| x[0] * x[1]).unwrap();
        assert!(q.value.abs() < 1e-10);
    }

    #[test]
    fn gap_is_shift_invariant() {
        let a = ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-1.0, 1.0, 3)).unwrap();
        let b = ModelSpec::new(
            ManifoldSpec::euclidean(1),
            "x^2/2 + 1000",
            Region::interval(-1.0, 1.0, 3),
        )
        .unwrap();
        let g = GapGrid::interval(-8.0, 8.0, 200);
        assert!((gap(&a, &g) - gap(&b, &g)).abs() < 1e-12);
    }

    #[test]
    fn ou_optimization_is_capped_by_gap() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-4.0, 4.0, 41)).unwrap();
        let r = optimize_twist(
            &m,
            &TwistSpec::scalar_exp_poly(2),
            BoundMode::Plain,
            &OptimizeBudget {
                restarts: 2,
                evaluations_per_start: 150,
                ..Default::default()
            },
            &GapGrid::interval(-8.0, 8.0, 400),
        )
        .unwrap();
        assert!((r.bound - 1.0).abs() < 1e-6, "{r:?}");
        assert!(r.sound);
    }
}
