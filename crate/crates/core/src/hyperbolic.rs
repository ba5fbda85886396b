//! Poincaré-ball primitives.
//!
//! Points live in the open ball `{x : c‖x‖² < 1}` of curvature `-c`. The slice
//! functions (`*_slices`, `*_into`) are the allocation-free kernels used on hot
//! paths; [`PoincareVector`] wraps them with the ball invariant checked.

use crate::error::{Error, Result};

/// Distance kept between stored points and the ball boundary.
pub const DEFAULT_MARGIN: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PoincareVector {
    coords: Vec<f64>,
    curvature: f64,
}

impl PoincareVector {
    pub fn new(coords: Vec<f64>, curvature: f64) -> Result<Self> {
        if !(curvature > 0.0 && curvature.is_finite()) {
            return Err(Error::Config(format!("curvature must be positive, got {curvature}")));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("poincaré coordinates".into()));
        }
        if curvature * sq_norm(&coords) >= 1.0 {
            return Err(Error::Dimension(format!(
                "point with squared norm {} lies outside the ball of curvature {curvature}",
                sq_norm(&coords)
            )));
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: f64) -> Self {
        Self { coords: vec![0.0; dim], curvature }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    pub fn norm(&self) -> f64 {
        sq_norm(&self.coords).sqrt()
    }
}

fn check_pair(x: &PoincareVector, y: &PoincareVector) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!("{} vs {}", x.dim(), y.dim())));
    }
    if x.curvature != y.curvature {
        return Err(Error::Curvature(x.curvature, y.curvature));
    }
    Ok(())
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &PoincareVector, y: &PoincareVector) -> Result<PoincareVector> {
    check_pair(x, y)?;
    let c = x.curvature;
    let mut out = vec![0.0; x.dim()];
    mobius_add_into(&x.coords, &y.coords, c, &mut out);
    if c * sq_norm(&out) >= 1.0 {
        project_in_place(&mut out, c, DEFAULT_MARGIN);
    }
    Ok(PoincareVector { coords: out, curvature: c })
}

/// Hyperbolic distance via the Möbius form `2/√c · artanh(√c ‖-x ⊕ y‖)`.
pub fn distance(x: &PoincareVector, y: &PoincareVector) -> Result<f64> {
    check_pair(x, y)?;
    Ok(distance_mobius_slices(&x.coords, &y.coords, x.curvature))
}

/// Hyperbolic distance via the closed arcosh form.
///
/// For `c = 1` this is `arcosh(1 + 2‖x-y‖² / ((1-‖x‖²)(1-‖y‖²)))`; other
/// curvatures are rescaled by `1/√c`.
pub fn distance_arcosh(x: &PoincareVector, y: &PoincareVector) -> Result<f64> {
    check_pair(x, y)?;
    Ok(distance_slices(&x.coords, &y.coords, x.curvature))
}

/// Logarithmic map at the origin: `artanh(√c‖x‖) · x / (√c‖x‖)`.
pub fn log_map_origin(x: &PoincareVector) -> Vec<f64> {
    let mut out = vec![0.0; x.dim()];
    log_map_origin_into(&x.coords, x.curvature, &mut out);
    out
}

/// Pull `v` back inside the ball when it is within `margin` of the boundary.
pub fn project_to_ball(v: &[f64], curvature: f64, margin: f64) -> Result<PoincareVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("project_to_ball input".into()));
    }
    let mut coords = v.to_vec();
    project_in_place(&mut coords, curvature, margin);
    PoincareVector::new(coords, curvature)
}

// ---------------------------------------------------------------------------
// slice kernels

pub fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn mobius_add_into(x: &[f64], y: &[f64], c: f64, out: &mut [f64]) {
    let xy = dot(x, y);
    let x2 = sq_norm(x);
    let y2 = sq_norm(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = (a * xi + b * yi) / den;
    }
}

pub fn distance_mobius_slices(x: &[f64], y: &[f64], c: f64) -> f64 {
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let mut z = vec![0.0; x.len()];
    mobius_add_into(&neg_x, y, c, &mut z);
    let sc = c.sqrt();
    let arg = (sc * sq_norm(&z).sqrt()).min(1.0 - f64::EPSILON);
    2.0 / sc * arg.atanh()
}

pub fn distance_slices(x: &[f64], y: &[f64], c: f64) -> f64 {
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let a = 1.0 - c * sq_norm(x);
    let b = 1.0 - c * sq_norm(y);
    arcosh1p(2.0 * c * diff / (a * b)) / c.sqrt()
}

/// `arcosh(1 + t)` evaluated without cancellation for small `t`.
pub fn arcosh1p(t: f64) -> f64 {
    let t = t.max(0.0);
    (t + (t * (2.0 + t)).sqrt()).ln_1p()
}

pub fn log_map_origin_into(x: &[f64], c: f64, out: &mut [f64]) {
    let sc = c.sqrt();
    let r = sq_norm(x).sqrt();
    let s = sc * r;
    let g = if s < 1e-8 { 1.0 + s * s / 3.0 } else { s.min(1.0 - f64::EPSILON).atanh() / s };
    for (o, xi) in out.iter_mut().zip(x) {
        *o = g * xi;
    }
}

pub fn project_in_place(v: &mut [f64], c: f64, margin: f64) {
    let max_norm = (1.0 - margin) / c.sqrt();
    let norm = sq_norm(v).sqrt();
    if norm >= max_norm {
        let scale = max_norm / norm;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> PoincareVector {
        PoincareVector::new(v.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn mobius_identity() {
        let x = p(&[0.3, -0.2, 0.1]);
        let zero = PoincareVector::origin(3, 1.0);
        assert_eq!(mobius_add(&x, &zero).unwrap(), x);
        assert_eq!(mobius_add(&zero, &x).unwrap(), x);
    }

    #[test]
    fn mobius_scalar_oracle() {
        // Collinear 1-D case at c=1: (x + y) / (1 + xy) after simplification.
        let out = mobius_add(&p(&[0.3, 0.0]), &p(&[0.4, 0.0])).unwrap();
        let num = (1.0 + 2.0 * 0.12 + 0.16) * 0.3 + (1.0 - 0.09) * 0.4;
        let den = 1.0 + 2.0 * 0.12 + 0.09 * 0.16;
        assert!((out.coords()[0] - num / den).abs() < 1e-15);
        assert!((out.coords()[0] - 0.7 / 1.12).abs() < 1e-15);
        assert_eq!(out.coords()[1], 0.0);
    }

    #[test]
    fn mobius_euclidean_limit() {
        let c = 1e-12;
        let x = PoincareVector::new(vec![0.3, -0.5], c).unwrap();
        let y = PoincareVector::new(vec![0.2, 0.7], c).unwrap();
        let out = mobius_add(&x, &y).unwrap();
        assert!((out.coords()[0] - 0.5).abs() < 1e-9);
        assert!((out.coords()[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn mobius_is_not_commutative() {
        let x = p(&[0.5, 0.1]);
        let y = p(&[-0.2, 0.6]);
        let a = mobius_add(&x, &y).unwrap();
        let b = mobius_add(&y, &x).unwrap();
        assert!((a.coords()[0] - b.coords()[0]).abs() > 1e-3);
    }

    #[test]
    fn mismatch_errors() {
        let x = p(&[0.1, 0.1]);
        let y = p(&[0.1]);
        assert!(matches!(mobius_add(&x, &y), Err(Error::Dimension(_))));
        let z = PoincareVector::new(vec![0.1, 0.1], 2.0).unwrap();
        assert!(matches!(distance(&x, &z), Err(Error::Curvature(..))));
    }

    #[test]
    fn distance_self_is_zero() {
        let x = p(&[0.4, -0.3]);
        assert_eq!(distance(&x, &x).unwrap(), 0.0);
        assert_eq!(distance_arcosh(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn log_map_norm_is_artanh() {
        let x = p(&[0.3, 0.4]);
        let v = log_map_origin(&x);
        let n = sq_norm(&v).sqrt();
        assert!((n - 0.549_306_144_334_054_8).abs() < 1e-12);
        assert!((v[0] / v[1] - 0.75).abs() < 1e-12);
        assert_eq!(log_map_origin(&PoincareVector::origin(2, 1.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_cases() {
        let inside = project_to_ball(&[0.2, 0.1], 1.0, DEFAULT_MARGIN).unwrap();
        assert_eq!(inside.coords(), &[0.2, 0.1]);
        let zero = project_to_ball(&[0.0, 0.0], 1.0, DEFAULT_MARGIN).unwrap();
        assert_eq!(zero.coords(), &[0.0, 0.0]);
        let out = project_to_ball(&[2.0, 0.0], 1.0, 1e-5).unwrap();
        assert!((out.norm() - (1.0 - 1e-5)).abs() < 1e-15);
        assert!(project_to_ball(&[f64::NAN], 1.0, 1e-5).is_err());
    }

    #[test]
    fn rejects_points_outside() {
        assert!(PoincareVector::new(vec![1.0, 0.0], 1.0).is_err());
        assert!(PoincareVector::new(vec![0.5, 0.0], 4.0).is_err());
    }
}
