//! Potential, generator `L = Δ - ⟨∇V, ∇·⟩`, and the Bakry–Émery field
//! `Hess V + Ric♯` with its eigenvalue infimum.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Expr, SmoothField};
use crate::geometry::{ChartDomain, ChartPoint, LocalGeometry, ManifoldSpec};
use crate::linalg;
use crate::optim::NelderMead;

/// Tensor grid over a coordinate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl Region {
    pub fn new(lower: &[f64], upper: &[f64], points: &[usize]) -> Self {
        Region {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            points: points.to_vec(),
        }
    }

    pub fn interval(a: f64, b: f64, points: usize) -> Self {
        Self::new(&[a], &[b], &[points])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.lower.len() != dim || self.upper.len() != dim || self.points.len() != dim {
            return Err(Error::Config(format!("region must have {dim} coordinates")));
        }
        for i in 0..dim {
            if self.points[i] == 0 {
                return Err(Error::Config(format!("region axis {i} has no grid points")));
            }
            if !(self.lower[i] <= self.upper[i]) || !self.lower[i].is_finite() || !self.upper[i].is_finite() {
                return Err(Error::Config(format!("region axis {i} is empty or unbounded")));
            }
        }
        Ok(())
    }

    pub fn axis(&self, i: usize) -> Vec<f64> {
        let n = self.points[i];
        if n == 1 {
            return vec![self.lower[i]];
        }
        let h = (self.upper[i] - self.lower[i]) / (n - 1) as f64;
        (0..n).map(|k| self.lower[i] + h * k as f64).collect()
    }

    pub fn spacing(&self, i: usize) -> f64 {
        if self.points[i] > 1 {
            (self.upper[i] - self.lower[i]) / (self.points[i] - 1) as f64
        } else {
            0.0
        }
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid nodes in row-major order (last axis fastest).
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|i| self.axis(i)).collect();
        let total = self.len();
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; self.dim()];
            for i in (0..self.dim()).rev() {
                p[i] = axes[i][rem % self.points[i]];
                rem /= self.points[i];
            }
            out.push(p);
        }
        out
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(self.lower[i], self.upper[i]))
            .collect()
    }
}

/// Infimum of a pointwise quantity over a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infimum {
    pub value: f64,
    pub argmin: Vec<f64>,
    /// Minimum over grid nodes before local refinement.
    pub grid_value: f64,
    pub region: Region,
    /// Always set: a sampled infimum can only over-estimate the true one.
    pub grid_infimum: bool,
}

/// Grid scan plus Nelder–Mead refinement from the best node.
pub fn scan_infimum<F>(region: &Region, domain: &ChartDomain, f: F, refine: bool) -> Result<Infimum>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    region.validate(domain.lower.len())?;
    let nodes = region.nodes();
    for p in &nodes {
        domain.check(p)?;
    }
    let values: Vec<f64> = nodes.par_iter().map(|p| f(p)).collect::<Result<Vec<_>>>()?;
    let (best, grid_value) =
        values.iter().copied().enumerate().fold(
            (0usize, f64::INFINITY),
            |acc, (i, v)| if v < acc.1 { (i, v) } else { acc },
        );
    if !grid_value.is_finite() {
        return Err(Error::Numeric(
            "scanned quantity is not finite anywhere on the grid".into(),
        ));
    }
    let mut argmin = nodes[best].clone();
    let mut value = grid_value;
    if refine {
        let scale: Vec<f64> = (0..region.dim()).map(|i| 0.5 * region.spacing(i)).collect();
        if scale.iter().any(|&s| s > 0.0) {
            let nm = NelderMead {
                max_evaluations: 200,
                f_tol: 1e-14,
                x_tol: 1e-12,
            };
            let m = nm.minimize(
                |x| {
                    let y = region.clamp(x);
                    f(&y).unwrap_or(f64::INFINITY)
                },
                &argmin,
                &scale,
            );
            if m.value < value {
                value = m.value;
                argmin = region.clamp(&m.x);
            }
        }
    }
    Ok(Infimum {
        value,
        argmin,
        grid_value,
        region: region.clone(),
        grid_infimum: true,
    })
}

/// Manifold, potential `V` (density `e^{-V}` against the Riemannian volume)
/// and the sampling region used for infima and quadrature.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub manifold: ManifoldSpec,
    pub potential: SmoothField,
    pub region: Region,
    /// Closed-form total mass of `e^{-V} dvol`, when known.
    pub reference_mass: Option<f64>,
}

impl ModelSpec {
    pub fn new(manifold: ManifoldSpec, potential: &str, region: Region) -> Result<Self> {
        let dim = manifold.dim();
        let potential = SmoothField::parse(potential, dim)?;
        if potential.expr.max_param().is_some() {
            return Err(Error::Config("potential may not reference free parameters".into()));
        }
        region.validate(dim)?;
        Ok(ModelSpec {
            manifold,
            potential,
            region,
            reference_mass: None,
        })
    }

    pub fn with_reference_mass(mut self, mass: f64) -> Self {
        self.reference_mass = Some(mass);
        self
    }

    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    pub fn potential_at(&self, x: &[f64]) -> f64 {
        self.potential.value(x, &[])
    }

    /// Frame components of `∇V` (equal to `Eᵀ dV`).
    pub(crate) fn frame_gradient(&self, x: &[f64], geom: &LocalGeometry) -> DVector<f64> {
        let dv = DVector::from_vec(self.potential.gradient(x, &[]));
        geom.frame.transpose() * dv
    }

    /// Covariant Hessian in frame components.
    pub(crate) fn frame_hessian(&self, x: &[f64], geom: &LocalGeometry) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = self.potential.hessian(x, &[]);
        if !geom.christoffel.is_zero() {
            let dv = self.potential.gradient(x, &[]);
            for j in 0..n {
                for k in 0..n {
                    let corr: f64 = (0..n).map(|i| geom.christoffel.get(i, j, k) * dv[i]).sum();
                    h[(j, k)] -= corr;
                }
            }
        }
        let out = geom.frame.transpose() * h * &geom.frame;
        linalg::symmetric_part(&out)
    }

    /// `Hess V + Ric♯` in frame components without domain checks.
    pub(crate) fn bakry_emery_raw(&self, x: &[f64], geom: &LocalGeometry) -> Result<DMatrix<f64>> {
        let mut t = self.frame_hessian(x, geom);
        if !self.manifold.is_flat_identity() {
            t += self.manifold.ricci_frame_raw(x)?;
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("Bakry-Emery tensor not finite at {x:?}")));
        }
        Ok(linalg::symmetric_part(&t))
    }
}

/// Pointwise Bakry–Émery tensor and its smallest eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct BakryEmeryValue {
    pub point: ChartPoint,
    pub tensor: DMatrix<f64>,
    pub smallest_eigenvalue: f64,
}

/// Gradient and covariant Hessian of `V` in frame components.
pub fn grad_hess_v(model: &ModelSpec, x: &ChartPoint) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.manifold.check(x)?;
    let p = x.as_slice();
    if !model.potential_at(p).is_finite() {
        return Err(Error::Numeric(format!("potential not finite at {p:?}")));
    }
    let geom = model.manifold.local(p)?;
    let g = model.frame_gradient(p, &geom);
    let h = model.frame_hessian(p, &geom);
    if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("potential derivatives not finite at {p:?}")));
    }
    Ok((g, h))
}

pub fn bakry_emery_at(model: &ModelSpec, x: &ChartPoint) -> Result<BakryEmeryValue> {
    model.manifold.check(x)?;
    let geom = model.manifold.local(x.as_slice())?;
    let tensor = model.bakry_emery_raw(x.as_slice(), &geom)?;
    Ok(BakryEmeryValue {
        point: x.clone(),
        smallest_eigenvalue: linalg::min_eigenvalue(&tensor),
        tensor,
    })
}

/// `Lf = Δ_g f - ⟨∇V, ∇f⟩_g` at `x`.
pub fn apply_l(model: &ModelSpec, f: &SmoothField, x: &ChartPoint) -> Result<f64> {
    apply_l_with_params(model, f, &[], x)
}

pub fn apply_l_with_params(model: &ModelSpec, f: &SmoothField, params: &[f64], x: &ChartPoint) -> Result<f64> {
    model.manifold.check(x)?;
    let p = x.as_slice();
    let geom = model.manifold.local(p)?;
    let v = apply_l_raw(model, f, params, p, &geom);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("L f is not finite at {p:?}")))
    }
}

pub(crate) fn apply_l_raw(model: &ModelSpec, f: &SmoothField, params: &[f64], x: &[f64], geom: &LocalGeometry) -> f64 {
    let n = model.dim();
    let df = f.gradient(x, params);
    let dv = model.potential.gradient(x, &[]);
    let gam = geom.christoffel.trace_with(&geom.ginv);
    let mut s = 0.0;
    for j in 0..n {
        for k in 0..n {
            let gjk = geom.ginv[(j, k)];
            if gjk != 0.0 {
                s += gjk * (f.hess[j][k].eval(x, params) - dv[j] * df[k]);
            }
        }
        s -= gam[j] * df[j];
    }
    s
}

/// Infimum of the smallest Bakry–Émery eigenvalue over the sampling region.
pub fn rho_inf(model: &ModelSpec) -> Result<Infimum> {
    scan_infimum(
        &model.region,
        &model.manifold.domain,
        |x| {
            let geom = model.manifold.local(x)?;
            Ok(linalg::min_eigenvalue(&model.bakry_emery_raw(x, &geom)?))
        },
        true,
    )
}

/// Symbolic `Lf` on charts with identity metric.
pub fn generator_expr(model: &ModelSpec, f: &Expr) -> Result<Expr> {
    if !model.manifold.is_flat_identity() {
        return Err(Error::Config(
            "symbolic generator requires a flat identity-metric chart".into(),
        ));
    }
    let mut out = Expr::Const(0.0);
    for (i, dv) in model.potential.grad.iter().enumerate() {
        let fi = f.diff(i);
        out = expr::add(out, expr::sub(fi.diff(i), expr::mul(dv.clone(), fi)));
    }
    Ok(out)
}

/// Weighted Laplacian on 1-forms on a flat identity-metric chart:
/// `(L^W α)_i = Σ_j ∂_j²α_i - Σ_j ∂_jV ∂_jα_i - Σ_j ∂_i∂_jV α_j`.
pub fn apply_lw_flat(model: &ModelSpec, alpha: &[Expr], x: &[f64]) -> Result<Vec<f64>> {
    if !model.manifold.is_flat_identity() {
        return Err(Error::Config(
            "L^W evaluation requires a flat identity-metric chart".into(),
        ));
    }
    let n = model.dim();
    if alpha.len() != n {
        return Err(Error::Config("1-form has the wrong number of components".into()));
    }
    let dv = model.potential.gradient(x, &[]);
    let hv = model.potential.hessian(x, &[]);
    Ok((0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                let dj = alpha[i].diff(j);
                s += dj.diff(j).eval(x, &[]) - dv[j] * dj.eval(x, &[]) - hv[(i, j)] * alpha[j].eval(x, &[]);
            }
            s
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ou1() -> ModelSpec {
        ModelSpec::new(ManifoldSpec::euclidean(1), "x^2/2", Region::interval(-6.0, 6.0, 121)).unwrap()
    }

    #[test]
    fn grad_hess_examples() {
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(2),
            "(x^2 + y^2)/2",
            Region::new(&[-1.0, -1.0], &[1.0, 1.0], &[5, 5]),
        )
        .unwrap();
        let (g, h) = grad_hess_v(&m, &ChartPoint::new(&[0.3, -2.0])).unwrap();
        assert_eq!(g.as_slice(), &[0.3, -2.0]);
        assert_eq!(h, DMatrix::identity(2, 2));

        let q = ModelSpec::new(ManifoldSpec::euclidean(1), "x^4/4", Region::interval(-2.0, 2.0, 41)).unwrap();
        let (g, h) = grad_hess_v(&q, &ChartPoint::new(&[2.0])).unwrap();
        assert_eq!(g[0], 8.0);
        assert_eq!(h[(0, 0)], 12.0);

        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "0",
            Region::new(&[0.2, 0.0], &[2.9, 6.0], &[5, 5]),
        )
        .unwrap();
        let (g, h) = grad_hess_v(&s, &ChartPoint::new(&[1.0, 1.0])).unwrap();
        assert_eq!(g.norm(), 0.0);
        assert_eq!(h.norm(), 0.0);
    }

    #[test]
    fn covariant_hessian_on_sphere() {
        // V = cos θ is (minus) a first spherical harmonic: Hess V = -V g.
        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "cos(theta)",
            Region::new(&[0.2, 0.0], &[2.9, 6.0], &[5, 5]),
        )
        .unwrap();
        let th = 0.9f64;
        let (_, h) = grad_hess_v(&s, &ChartPoint::new(&[th, 0.4])).unwrap();
        assert_relative_eq!(h, DMatrix::identity(2, 2) * (-th.cos()), epsilon = 1e-12);
    }

    #[test]
    fn bakry_emery_examples() {
        let be = bakry_emery_at(&ou1(), &ChartPoint::new(&[1.7])).unwrap();
        assert_eq!(be.smallest_eigenvalue, 1.0);
        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "0",
            Region::new(&[0.2, 0.0], &[2.9, 6.0], &[5, 5]),
        )
        .unwrap();
        let be = bakry_emery_at(&s, &ChartPoint::new(&[0.7, 2.0])).unwrap();
        assert_relative_eq!(be.tensor, DMatrix::identity(2, 2), epsilon = 1e-14);
        let dw = ModelSpec::new(ManifoldSpec::euclidean(1), "(x^2-1)^2", Region::interval(-2.0, 2.0, 41)).unwrap();
        assert_eq!(
            bakry_emery_at(&dw, &ChartPoint::new(&[0.0])).unwrap().tensor[(0, 0)],
            -4.0
        );
    }

    #[test]
    fn generator_examples() {
        let m = ou1();
        let x = ChartPoint::new(&[1.3]);
        let f = SmoothField::parse("x", 1).unwrap();
        assert_relative_eq!(apply_l(&m, &f, &x).unwrap(), -1.3, epsilon = 1e-15);
        let f2 = SmoothField::parse("x^2", 1).unwrap();
        assert_relative_eq!(apply_l(&m, &f2, &x).unwrap(), 2.0 - 2.0 * 1.69, epsilon = 1e-14);
        let c = SmoothField::parse("3.5", 1).unwrap();
        assert_eq!(apply_l(&m, &c, &x).unwrap(), 0.0);
    }

    #[test]
    fn laplacian_on_sphere_harmonic() {
        let s = ModelSpec::new(
            ManifoldSpec::sphere2(),
            "0",
            Region::new(&[0.2, 0.0], &[2.9, 6.0], &[5, 5]),
        )
        .unwrap();
        let f = SmoothField::parse("cos(theta)", 2).unwrap();
        let th = 1.2f64;
        let v = apply_l(&s, &f, &ChartPoint::new(&[th, 0.1])).unwrap();
        assert_relative_eq!(v, -2.0 * th.cos(), epsilon = 1e-13);
    }

    #[test]
    fn rho_inf_examples() {
        assert_eq!(rho_inf(&ou1()).unwrap().value, 1.0);
        let q = ModelSpec::new(ManifoldSpec::euclidean(1), "x^4/4", Region::interval(-2.0, 2.0, 40)).unwrap();
        let r = rho_inf(&q).unwrap();
        assert!(r.value.abs() < 1e-10 && r.argmin[0].abs() < 1e-5, "{r:?}");
        let dw = ModelSpec::new(ManifoldSpec::euclidean(1), "(x^2-1)^2", Region::interval(-2.0, 2.0, 40)).unwrap();
        let r = rho_inf(&dw).unwrap();
        assert!((r.value + 4.0).abs() < 1e-10, "{r:?}");
        assert!(r.grid_infimum);
    }

    #[test]
    fn rho_inf_is_shift_invariant() {
        let a = ModelSpec::new(ManifoldSpec::euclidean(1), "(x^2-1)^2", Region::interval(-2.0, 2.0, 31)).unwrap();
        let b = ModelSpec::new(
            ManifoldSpec::euclidean(1),
            "(x^2-1)^2 + 17.5",
            Region::interval(-2.0, 2.0, 31),
        )
        .unwrap();
        assert_eq!(rho_inf(&a).unwrap().value, rho_inf(&b).unwrap().value);
    }

    #[test]
    fn empty_region_is_config_error() {
        let m = ModelSpec::new(ManifoldSpec::euclidean(1), "x^2", Region::interval(1.0, 0.0, 10));
        assert!(matches!(m, Err(Error::Config(_))));
    }

    #[test]
    fn symmetry_of_generator_by_quadrature() {
        // ∫ (Lf) g e^{-V} dx = -∫ f' g' e^{-V} dx for rapidly decaying f, g.
        let m = ModelSpec::new(
            ManifoldSpec::euclidean(1),
            "x^4/4 + x^2/2",
            Region::interval(-6.0, 6.0, 11),
        )
        .unwrap();
        let f = SmoothField::parse("exp(-x^2)*sin(2*x)", 1).unwrap();
        let g = SmoothField::parse("exp(-x^2/2)*(1 + x)", 1).unwrap();
        let n = 20001;
        let h = 12.0 / (n - 1) as f64;
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for k in 0..n {
            let x = -6.0 + h * k as f64;
            let w = if k == 0 || k == n - 1 { 0.5 * h } else { h } * (-m.potential_at(&[x])).exp();
            let lf = apply_l(&m, &f, &ChartPoint::new(&[x])).unwrap();
            lhs += w * lf * g.value(&[x], &[]);
            rhs -= w * f.gradient(&[x], &[])[0] * g.gradient(&[x], &[])[0];
        }
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bakry_emery_tensor_is_symmetric(x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let m = ModelSpec::new(ManifoldSpec::euclidean(2), "x^4/4 + x*y + sin(y)*x^2", Region::new(&[-2.0, -2.0], &[2.0, 2.0], &[3, 3])).unwrap();
            let be = bakry_emery_at(&m, &ChartPoint::new(&[x, y])).unwrap();
            prop_assert!(linalg::asymmetry(&be.tensor) < 1e-8);
        }
    }
}
