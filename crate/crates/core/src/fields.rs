//! Homogeneous singular vector fields `f(x) = |x|^α F(x/|x|)` and the
//! dynamical systems derived from them.
//!
//! A field is given by its angular part `F` on the unit sphere. Everything
//! else (the singular right-hand side, the tangent dynamics on the sphere,
//! the extended `(y, w)` system and its master-slave time change) is built
//! from the split `F(y) = F_s(y) + F_r(y) y` with `F_s ⊥ y`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{SMatrix, SVector};

use crate::error::{FlowError, Result};

/// A point of `R^D`.
pub type Vector<const D: usize> = SVector<f64, D>;

/// Tolerance on `| |y| - 1 |` accepted by the checked sphere operations.
pub const UNIT_TOLERANCE: f64 = 1e-12;

/// A point on the unit sphere `S^{D-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec<const D: usize>(Vector<D>);

impl<const D: usize> UnitVec<D> {
    /// Normalizes `v` onto the sphere. Fails on a zero or non-finite vector.
    pub fn new(v: Vector<D>) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(FlowError::Domain(format!(
                "cannot normalize vector of norm {n}"
            )));
        }
        Ok(Self(v / n))
    }

    pub fn from_slice(components: &[f64]) -> Result<Self> {
        if components.len() != D {
            return Err(FlowError::Domain(format!(
                "expected {D} components, got {}",
                components.len()
            )));
        }
        Self::new(Vector::<D>::from_column_slice(components))
    }

    /// Wraps `v` without renormalizing. Callers guarantee `|v| = 1` up to rounding.
    pub(crate) fn new_unchecked(v: Vector<D>) -> Self {
        Self(v)
    }

    pub fn as_vector(&self) -> &Vector<D> {
        &self.0
    }

    pub fn into_vector(self) -> Vector<D> {
        self.0
    }

    /// Angle in radians between two unit vectors.
    pub fn angle_to(&self, other: &Self) -> f64 {
        // atan2 form stays accurate for nearly (anti)parallel vectors
        let cross = (self.0 - other.0).norm();
        let sum = (self.0 + other.0).norm();
        2.0 * cross.atan2(sum)
    }
}

impl<const D: usize> std::ops::Index<usize> for UnitVec<D> {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_unit<const D: usize>(y: &Vector<D>) -> Result<()> {
    let n = y.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(FlowError::Domain(format!(
            "expected a unit vector, got norm {n}"
        )));
    }
    Ok(())
}

/// Projection of `v` onto the tangent space of the sphere at `y`.
#[inline]
pub fn tangent_project<const D: usize>(v: &Vector<D>, y: &Vector<D>) -> Vector<D> {
    v - y * v.dot(y)
}

/// Splits `fval` at `y` into its tangent part and its radial coefficient.
pub fn decompose<const D: usize>(fval: &Vector<D>, y: &Vector<D>) -> Result<(Vector<D>, f64)> {
    check_unit(y)?;
    Ok(split(fval, y))
}

#[inline]
fn split<const D: usize>(fval: &Vector<D>, y: &Vector<D>) -> (Vector<D>, f64) {
    let fr = fval.dot(y);
    (fval - y * fr, fr)
}

type VectorFn<const D: usize> = Arc<dyn Fn(&Vector<D>) -> Vector<D> + Send + Sync>;
type ScalarFn<const D: usize> = Arc<dyn Fn(&Vector<D>) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Angular<const D: usize> {
    Full(VectorFn<D>),
    Split {
        tangent: VectorFn<D>,
        radial: ScalarFn<D>,
    },
}

/// A singular field `f(x) = |x|^α F(x/|x|)` with `α < 1`, described by the
/// evaluator of `F` on the unit sphere.
///
/// Evaluators must be pure; fields are shared freely across threads.
#[derive(Clone)]
pub struct HomogeneousField<const D: usize> {
    name: String,
    alpha: f64,
    angular: Angular<D>,
}

impl<const D: usize> fmt::Debug for HomogeneousField<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HomogeneousField")
            .field("name", &self.name)
            .field("d", &D)
            .field("alpha", &self.alpha)
            .finish()
    }
}

fn check_shape<const D: usize>(alpha: f64) -> Result<()> {
    if D < 2 {
        return Err(FlowError::Domain(format!("dimension must be >= 2, got {D}")));
    }
    if !(alpha < 1.0) || !alpha.is_finite() {
        return Err(FlowError::Domain(format!("exponent must be < 1, got {alpha}")));
    }
    Ok(())
}

impl<const D: usize> HomogeneousField<D> {
    /// Field from the full angular evaluator `y -> F(y)`.
    pub fn new<F>(name: impl Into<String>, alpha: f64, f: F) -> Result<Self>
    where
        F: Fn(&Vector<D>) -> Vector<D> + Send + Sync + 'static,
    {
        check_shape::<D>(alpha)?;
        Ok(Self {
            name: name.into(),
            alpha,
            angular: Angular::Full(Arc::new(f)),
        })
    }

    /// Field from separate tangent and radial evaluators. The tangent part is
    /// re-projected on evaluation, so it only has to be tangent up to rounding.
    pub fn from_components<S, R>(name: impl Into<String>, alpha: f64, tangent: S, radial: R) -> Result<Self>
    where
        S: Fn(&Vector<D>) -> Vector<D> + Send + Sync + 'static,
        R: Fn(&Vector<D>) -> f64 + Send + Sync + 'static,
    {
        check_shape::<D>(alpha)?;
        Ok(Self {
            name: name.into(),
            alpha,
            angular: Angular::Split {
                tangent: Arc::new(tangent),
                radial: Arc::new(radial),
            },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        D
    }

    /// `F(y)`. The argument is assumed to lie on the sphere.
    #[inline]
    pub fn angular(&self, y: &Vector<D>) -> Vector<D> {
        match &self.angular {
            Angular::Full(f) => f(y),
            Angular::Split { tangent, radial } => tangent_project(&tangent(y), y) + y * radial(y),
        }
    }

    /// `(F_s(y), F_r(y))` without checking `|y| = 1`.
    #[inline]
    pub fn components(&self, y: &Vector<D>) -> (Vector<D>, f64) {
        match &self.angular {
            Angular::Full(f) => split(&f(y), y),
            Angular::Split { tangent, radial } => (tangent_project(&tangent(y), y), radial(y)),
        }
    }

    #[inline]
    pub fn tangent(&self, y: &Vector<D>) -> Vector<D> {
        self.components(y).0
    }

    #[inline]
    pub fn radial(&self, y: &Vector<D>) -> f64 {
        match &self.angular {
            Angular::Full(f) => f(y).dot(y),
            Angular::Split { radial, .. } => radial(y),
        }
    }

    /// Checked `(F_s(y), F_r(y))`.
    pub fn decompose_at(&self, y: &Vector<D>) -> Result<(Vector<D>, f64)> {
        check_unit(y)?;
        Ok(self.components(y))
    }

    #[inline]
    pub(crate) fn pow_alpha(&self, r: f64) -> f64 {
        if self.alpha == 1.0 / 3.0 {
            r.cbrt()
        } else if self.alpha == 0.0 {
            1.0
        } else {
            r.powf(self.alpha)
        }
    }

    /// `|x|^α F(x/|x|)` with no zero check; returns non-finite values at the origin.
    #[inline]
    pub(crate) fn rhs_unchecked(&self, x: &Vector<D>) -> Vector<D> {
        let r = x.norm();
        self.angular(&(x / r)) * self.pow_alpha(r)
    }
}

/// Right-hand side of the singular system.
pub fn singular_rhs<const D: usize>(field: &HomogeneousField<D>, x: &Vector<D>) -> Result<Vector<D>> {
    if x.norm() == 0.0 {
        return Err(FlowError::Singularity);
    }
    Ok(field.rhs_unchecked(x))
}

/// Tangent dynamics on the sphere, `dy/ds = F_s(y)`.
pub fn sphere_rhs<const D: usize>(field: &HomogeneousField<D>, y: &Vector<D>) -> Result<Vector<D>> {
    check_unit(y)?;
    Ok(field.tangent(y))
}

/// State `(y, w)` of the scale-invariant extended system; `w > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedState<const D: usize> {
    pub y: UnitVec<D>,
    pub w: f64,
}

impl<const D: usize> ExtendedState<D> {
    pub fn new(y: UnitVec<D>, w: f64) -> Result<Self> {
        if !(w > 0.0) || !w.is_finite() {
            return Err(FlowError::Domain(format!("w must be positive, got {w}")));
        }
        Ok(Self { y, w })
    }
}

/// Extended system in logarithmic time:
/// `dy/dτ = w F_s(y)`, `dw/dτ = w + (α-1) F_r(y) w²`.
pub fn extended_rhs<const D: usize>(field: &HomogeneousField<D>, s: &ExtendedState<D>) -> (Vector<D>, f64) {
    let (fs, fr) = field.components(s.y.as_vector());
    let w = s.w;
    (fs * w, w + (field.alpha - 1.0) * fr * w * w)
}

/// Master-slave form: `dy/ds = F_s(y)`, `dw/ds = 1 + (α-1) F_r(y) w`.
pub fn master_slave_rhs<const D: usize>(field: &HomogeneousField<D>, s: &ExtendedState<D>) -> (Vector<D>, f64) {
    let (fs, fr) = field.components(s.y.as_vector());
    (fs, 1.0 + (field.alpha - 1.0) * fr * s.w)
}

/// Cubic Hermite smoothstep, clamped to `[0, 1]`.
#[inline]
pub fn smoothstep(xi: f64) -> f64 {
    if xi <= 0.0 {
        0.0
    } else if xi >= 1.0 {
        1.0
    } else {
        xi * xi * (3.0 - 2.0 * xi)
    }
}

/// Two-dimensional example with a focusing attractor at `(-1, 0)` and a
/// defocusing one at `(1, 0)`; `α = 1/3`.
pub fn planar_example() -> HomogeneousField<2> {
    HomogeneousField::new("planar", 1.0 / 3.0, |y: &Vector<2>| {
        let (a, b) = (y[0], y[1]);
        Vector::<2>::new(a * a + a * b + a * b * b, a * b + b * b - a * a * b)
    })
    .expect("planar example is well formed")
}

/// Lorenz parameters and the scaled stereographic chart `S^3 -> R^3`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub projection_scale: f64,
    pub projection_shift: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            projection_scale: 40.0,
            projection_shift: 38.0,
        }
    }
}

pub fn lorenz_rhs(u: &Vector<3>, p: &LorenzParams) -> Vector<3> {
    Vector::<3>::new(
        p.sigma * (u[1] - u[0]),
        u[0] * (p.rho - u[2]) - u[1],
        u[0] * u[1] - p.beta * u[2],
    )
}

/// Scaled stereographic projection from the north pole `(1, 0, 0, 0)`.
pub fn stereo_forward(y: &UnitVec<4>, p: &LorenzParams) -> Result<Vector<3>> {
    stereo_forward_raw(y.as_vector(), p)
}

fn stereo_forward_raw(y: &Vector<4>, p: &LorenzParams) -> Result<Vector<3>> {
    let denom = 1.0 - y[0];
    if denom <= 0.0 {
        return Err(FlowError::ProjectionPole);
    }
    let k = p.projection_scale / denom;
    Ok(Vector::<3>::new(k * y[1], k * y[2], p.projection_shift + k * y[3]))
}

#[inline]
fn chart_coords(u: &Vector<3>, p: &LorenzParams) -> Vector<3> {
    Vector::<3>::new(u[0], u[1], u[2] - p.projection_shift) / p.projection_scale
}

/// Inverse of [`stereo_forward`].
pub fn stereo_inverse(u: &Vector<3>, p: &LorenzParams) -> UnitVec<4> {
    let v = chart_coords(u, p);
    let q = v.norm_squared();
    let inv = 1.0 / (q + 1.0);
    UnitVec::new_unchecked(Vector::<4>::new(
        (q - 1.0) * inv,
        2.0 * v[0] * inv,
        2.0 * v[1] * inv,
        2.0 * v[2] * inv,
    ))
}

/// Jacobian of [`stereo_inverse`] with respect to `u`.
pub fn stereo_inverse_jacobian(u: &Vector<3>, p: &LorenzParams) -> SMatrix<f64, 4, 3> {
    let v = chart_coords(u, p);
    let q = v.norm_squared();
    let inv = 1.0 / (q + 1.0);
    let inv2 = inv * inv;
    let ds = 1.0 / p.projection_scale;
    let mut j = SMatrix::<f64, 4, 3>::zeros();
    for c in 0..3 {
        j[(0, c)] = 4.0 * v[c] * inv2 * ds;
        for r in 0..3 {
            let delta = if r == c { 2.0 * inv } else { 0.0 };
            j[(r + 1, c)] = (delta - 4.0 * v[r] * v[c] * inv2) * ds;
        }
    }
    j
}

/// Lorenz vector field carried to the sphere through the stereographic chart.
fn lorenz_pushforward(y: &Vector<4>, p: &LorenzParams) -> Vector<4> {
    // only called for y0 < 0.75, far from the pole
    let u = stereo_forward_raw(y, p).unwrap_or_else(|_| Vector::<3>::repeat(f64::NAN));
    stereo_inverse_jacobian(&u, p) * lorenz_rhs(&u, p)
}

fn north_pole_node(y: &Vector<4>) -> Vector<4> {
    tangent_project(&Vector::<4>::new(0.0, -y[1], -2.0 * y[2], -3.0 * y[3]), y)
}

/// The four-dimensional example: a focusing node at the north pole blended
/// into a copy of the Lorenz flow on the lower part of `S^3`; `F_r = -y_0`.
pub fn lorenz4d_example(p: LorenzParams) -> HomogeneousField<4> {
    let tangent = move |y: &Vector<4>| {
        let weight = smoothstep(2.0 * y[0] - 0.5);
        let blended = if weight >= 1.0 {
            north_pole_node(y)
        } else if weight <= 0.0 {
            lorenz_pushforward(y, &p)
        } else {
            north_pole_node(y) * weight + lorenz_pushforward(y, &p) * (1.0 - weight)
        };
        tangent_project(&blended, y)
    };
    HomogeneousField::from_components("lorenz4d", 1.0 / 3.0, tangent, |y: &Vector<4>| -y[0])
        .expect("lorenz4d example is well formed")
}

/// Smooth localized bump added to both components of a field.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    /// Direction added (after tangent projection) to `F_s`.
    pub tangent_direction: Vec<f64>,
    pub tangent_amplitude: f64,
    pub radial_amplitude: f64,
}

/// `F_s + a_s b(y) P_s e`, `F_r + a_r b(y)` with `b(y) = exp(-|y-c|²/(2 width²))`.
pub fn with_bump<const D: usize>(field: &HomogeneousField<D>, bump: &Bump) -> Result<HomogeneousField<D>> {
    if bump.center.len() != D || bump.tangent_direction.len() != D {
        return Err(FlowError::Domain(format!("bump vectors must have {D} components")));
    }
    if !(bump.width > 0.0) {
        return Err(FlowError::Domain("bump width must be positive".into()));
    }
    let base_s = field.clone();
    let base_r = field.clone();
    let center = *UnitVec::<D>::from_slice(&bump.center)?.as_vector();
    let dir = Vector::<D>::from_column_slice(&bump.tangent_direction);
    let inv = 1.0 / (2.0 * bump.width * bump.width);
    let (a_s, a_r) = (bump.tangent_amplitude, bump.radial_amplitude);
    HomogeneousField::from_components(
        format!("{}+bump", field.name()),
        field.alpha(),
        move |y: &Vector<D>| base_s.tangent(y) + tangent_project(&dir, y) * (a_s * (-(y - center).norm_squared() * inv).exp()),
        move |y: &Vector<D>| base_r.radial(y) + a_r * (-(y - center).norm_squared() * inv).exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn radial_identity() -> HomogeneousField<3> {
        HomogeneousField::new("identity", 0.0, |y: &Vector<3>| *y).unwrap()
    }

    #[test]
    fn decompose_radial_field() {
        let y = Vector::<3>::new(0.6, 0.0, 0.8);
        let (fs, fr) = decompose(&y, &y).unwrap();
        assert!(fs.norm() < 1e-15);
        assert!((fr - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decompose_planar_examples() {
        let f = planar_example();
        let (fs, fr) = f.decompose_at(&Vector::<2>::new(1.0, 0.0)).unwrap();
        assert_eq!(fs, Vector::<2>::zeros());
        assert_eq!(fr, 1.0);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let y = Vector::<2>::new(h, h);
        let (fs, fr) = decompose(&f.angular(&y), &y).unwrap();
        let q = 1.0 / (2.0 * 2f64.sqrt());
        assert!((fs - Vector::<2>::new(q, -q)).norm() < 1e-12);
        assert!((fr - 2f64.sqrt()).abs() < 1e-12);
        assert!(fs.dot(&y).abs() < 1e-12);
    }

    #[test]
    fn decompose_rejects_non_unit() {
        let err = decompose(&Vector::<2>::new(1.0, 0.0), &Vector::<2>::new(2.0, 0.0)).unwrap_err();
        assert!(matches!(err, FlowError::Domain(_)));
        assert!(sphere_rhs(&planar_example(), &Vector::<2>::new(0.5, 0.0)).is_err());
    }

    #[test]
    fn planar_components_match_closed_form() {
        let f = planar_example();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let y = Vector::<2>::new(th.cos(), th.sin());
            let (fs, fr) = f.decompose_at(&y).unwrap();
            let expect = Vector::<2>::new(y[0] * y[1] * y[1], -y[0] * y[0] * y[1]);
            assert!((fs - expect).norm() < 1e-12);
            assert!((fr - (y[0] + y[1])).abs() < 1e-12);
        }
        assert_eq!(f.radial(&Vector::<2>::new(-1.0, 0.0)), -1.0);
        assert_eq!(f.radial(&Vector::<2>::new(1.0, 0.0)), 1.0);
    }

    #[test]
    fn singular_rhs_examples() {
        let f = planar_example();
        let v = singular_rhs(&f, &Vector::<2>::new(8.0, 0.0)).unwrap();
        assert!((v - Vector::<2>::new(2.0, 0.0)).norm() < 1e-14);
        assert_eq!(singular_rhs(&f, &Vector::<2>::zeros()), Err(FlowError::Singularity));

        let y = Vector::<2>::new(0.6, -0.8);
        assert!((singular_rhs(&f, &y).unwrap() - f.angular(&y)).norm() < 1e-15);

        let id = radial_identity();
        let x = Vector::<3>::new(3.0, -4.0, 12.0);
        assert!((singular_rhs(&id, &x).unwrap() - x / 13.0).norm() < 1e-15);
    }

    #[test]
    fn homogeneity() {
        let f = lorenz4d_example(LorenzParams::default());
        let x = Vector::<4>::new(-0.3, 0.2, 0.5, -0.1);
        let base = singular_rhs(&f, &x).unwrap();
        for lambda in [0.5, 2.0, 10.0] {
            let scaled = singular_rhs(&f, &(x * lambda)).unwrap();
            let expect = base * f64::powf(lambda, f.alpha());
            assert!((scaled - expect).norm() <= 1e-12 * expect.norm());
        }
    }

    #[test]
    fn sphere_rhs_planar_fixed_points() {
        let f = planar_example();
        for y in [[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [0.0, -1.0]] {
            let v = sphere_rhs(&f, &Vector::<2>::new(y[0], y[1])).unwrap();
            assert_eq!(v.norm(), 0.0);
        }
        // a fine scan finds exactly the four axis points
        let n = 100_000;
        let mut zeros = Vec::new();
        let g = |k: usize| {
            let th = std::f64::consts::TAU * k as f64 / n as f64;
            let y = Vector::<2>::new(th.cos(), th.sin());
            // signed angular speed
            let fs = f.tangent(&y);
            fs[1] * y[0] - fs[0] * y[1]
        };
        for k in 0..n {
            let (a, b) = (g(k), g(k + 1));
            if a == 0.0 || a * b < 0.0 {
                zeros.push(k);
            }
        }
        assert_eq!(zeros, vec![0, n / 4, n / 2, 3 * n / 4]);
    }

    #[test]
    fn extended_and_master_slave_examples() {
        let f = planar_example();
        let y = UnitVec::new(Vector::<2>::new(1.0, 0.0)).unwrap();
        let (dy, dw) = extended_rhs(&f, &ExtendedState::new(y, 1.5).unwrap());
        assert_eq!(dy, Vector::<2>::zeros());
        assert!(dw.abs() < 1e-15);

        let (dy, dw) = master_slave_rhs(&f, &ExtendedState::new(y, 1.0).unwrap());
        assert_eq!(dy, Vector::<2>::zeros());
        assert!((dw - 1.0 / 3.0).abs() < 1e-15);

        // w -> 0 keeps dw positive; master-slave gives exactly one at w = 0
        let (_, dw) = extended_rhs(&f, &ExtendedState { y, w: 1e-9 });
        assert!(dw > 0.0);
        let (_, dw) = master_slave_rhs(&f, &ExtendedState { y, w: 0.0 });
        assert_eq!(dw, 1.0);
        assert!(ExtendedState::new(y, 0.0).is_err());
    }

    #[test]
    fn constant_radial_fixed_point() {
        let f0 = 2.5;
        let alpha = 0.2;
        let f = HomogeneousField::<3>::from_components("const", alpha, |y| Vector::<3>::new(-y[1], y[0], 0.0), move |_| f0).unwrap();
        let w0 = 1.0 / ((1.0 - alpha) * f0);
        let y = UnitVec::new(Vector::<3>::new(0.3, 0.4, 0.5)).unwrap();
        let (_, dw) = extended_rhs(&f, &ExtendedState::new(y, w0).unwrap());
        assert!(dw.abs() < 1e-14);
        let (_, dw) = master_slave_rhs(&f, &ExtendedState::new(y, w0).unwrap());
        assert!(dw.abs() < 1e-14);
    }

    #[test]
    fn smoothstep_values() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert_eq!(smoothstep(0.5), 0.5);
        assert_eq!(smoothstep(-3.0), 0.0);
        assert_eq!(smoothstep(7.0), 1.0);
        let mut prev = 0.0;
        for k in 0..=1000 {
            let v = smoothstep(-0.5 + 2.0 * k as f64 / 1000.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn lorenz_values() {
        let p = LorenzParams::default();
        assert_eq!(lorenz_rhs(&Vector::<3>::zeros(), &p), Vector::<3>::zeros());
        let v = lorenz_rhs(&Vector::<3>::new(1.0, 1.0, 1.0), &p);
        assert!((v - Vector::<3>::new(0.0, 26.0, -5.0 / 3.0)).norm() < 1e-14);
        let e = 72f64.sqrt();
        for s in [1.0, -1.0] {
            let v = lorenz_rhs(&Vector::<3>::new(s * e, s * e, 27.0), &p);
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn stereographic_pairs() {
        let p = LorenzParams::default();
        let south = UnitVec::new(Vector::<4>::new(-1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((stereo_forward(&south, &p).unwrap() - Vector::<3>::new(0.0, 0.0, 38.0)).norm() < 1e-14);
        let e1 = UnitVec::new(Vector::<4>::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        assert!((stereo_forward(&e1, &p).unwrap() - Vector::<3>::new(40.0, 0.0, 38.0)).norm() < 1e-13);
        let north = UnitVec::new(Vector::<4>::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(stereo_forward(&north, &p), Err(FlowError::ProjectionPole));

        let y = stereo_inverse(&Vector::<3>::new(0.0, 0.0, 38.0), &p);
        assert!((y.as_vector() - south.as_vector()).norm() < 1e-15);
        let y = stereo_inverse(&Vector::<3>::zeros(), &p);
        assert!((y[0] - (0.9025 - 1.0) / 1.9025).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let u = Vector::<3>::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(0.0..60.0));
            let y = stereo_inverse(&u, &p);
            assert!((y.as_vector().norm() - 1.0).abs() < 1e-12);
            let back = stereo_forward(&y, &p).unwrap();
            assert!((back - u).norm() <= 1e-12 * u.norm().max(1.0));
            let y2 = stereo_inverse(&stereo_forward(&y, &p).unwrap(), &p);
            assert!((y2.as_vector() - y.as_vector()).norm() < 1e-12);
        }
    }

    #[test]
    fn stereo_jacobian_matches_finite_differences() {
        let p = LorenzParams::default();
        let u = Vector::<3>::new(5.0, -7.0, 20.0);
        let j = stereo_inverse_jacobian(&u, &p);
        let h = 1e-5;
        for c in 0..3 {
            let mut e = Vector::<3>::zeros();
            e[c] = h;
            let fd = (stereo_inverse(&(u + e), &p).into_vector() - stereo_inverse(&(u - e), &p).into_vector()) / (2.0 * h);
            for r in 0..4 {
                assert!((fd[r] - j[(r, c)]).abs() < 1e-9, "({r},{c})");
            }
        }
    }

    #[test]
    fn lorenz4d_structure() {
        let p = LorenzParams::default();
        let f = lorenz4d_example(p);
        let (fs, fr) = f.decompose_at(&Vector::<4>::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(fs.norm(), 0.0);
        assert_eq!(fr, -1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let v = Vector::<4>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let y = *UnitVec::new(v).unwrap().as_vector();
            let (fs, fr) = f.components(&y);
            assert!(fs.dot(&y).abs() <= 1e-10 * fs.norm().max(1.0));
            assert_eq!(fr, -y[0]);
            let full = f.angular(&y);
            let (fs2, fr2) = decompose(&full, &y).unwrap();
            assert!((fs2 + y * fr2 - full).norm() <= 1e-12 * full.norm().max(1.0));
            if y[0] >= 0.75 {
                assert!((fs - north_pole_node(&y)).norm() < 1e-14);
            } else if y[0] <= 0.25 {
                assert!((fs - tangent_project(&lorenz_pushforward(&y, &p), &y)).norm() < 1e-12 * fs.norm().max(1.0));
            }
        }
    }

    #[test]
    fn lorenz4d_conjugacy() {
        // D(stereo_forward) F_+ (y) = lorenz(stereo_forward(y)), finite-difference chart derivative
        let p = LorenzParams::default();
        let f = lorenz4d_example(p);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 100 {
            let v = Vector::<4>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let y = UnitVec::new(v).unwrap();
            if y[0] > 0.25 {
                continue;
            }
            let fs = f.tangent(y.as_vector());
            let h = 1e-6;
            let plus = stereo_forward_raw(&(y.as_vector() + fs * h), &p).unwrap();
            let minus = stereo_forward_raw(&(y.as_vector() - fs * h), &p).unwrap();
            let pushed = (plus - minus) / (2.0 * h);
            let expect = lorenz_rhs(&stereo_forward(&y, &p).unwrap(), &p);
            assert!((pushed - expect).norm() <= 1e-6 * expect.norm().max(1.0), "{pushed} vs {expect}");
            checked += 1;
        }
    }

    #[test]
    fn bump_changes_field_locally() {
        let f = planar_example();
        let bump = Bump {
            center: vec![0.0, 1.0],
            width: 0.1,
            tangent_direction: vec![1.0, 0.0],
            tangent_amplitude: 0.2,
            radial_amplitude: 0.1,
        };
        let g = with_bump(&f, &bump).unwrap();
        let far = Vector::<2>::new(-1.0, 0.0);
        assert!((g.radial(&far) - f.radial(&far)).abs() < 1e-40);
        let near = Vector::<2>::new(0.0, 1.0);
        assert!((g.radial(&near) - f.radial(&near) - 0.1).abs() < 1e-15);
        assert!((g.tangent(&near) - f.tangent(&near) - Vector::<2>::new(0.2, 0.0)).norm() < 1e-15);
    }
}
