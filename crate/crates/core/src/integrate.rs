//! Classical RK4 stepping, singularity-aware adaptive marching, renormalized
//! sphere integration and bisection-refined level crossings.

use nalgebra::SMatrix;

use crate::error::{FlowError, Result};
use crate::fields::{HomogeneousField, UnitVec, Vector};

/// Anything RK4 can advance: a vector space element with a finiteness check.
pub trait OdeState: Clone {
    /// `self + h * k`
    fn add_scaled(&self, k: &Self, h: f64) -> Self;
    fn all_finite(&self) -> bool;
}

impl OdeState for f64 {
    #[inline]
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        self + h * k
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl<const R: usize, const C: usize> OdeState for SMatrix<f64, R, C> {
    #[inline]
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        self + k * h
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    #[inline]
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        (self.0.add_scaled(&k.0, h), self.1.add_scaled(&k.1, h))
    }
    fn all_finite(&self) -> bool {
        self.0.all_finite() && self.1.all_finite()
    }
}

/// One RK4 step of signed length `dt`.
#[inline]
pub(crate) fn rk4_raw<S: OdeState, F: Fn(&S) -> S>(rhs: &F, state: &S, dt: f64) -> Result<S> {
    let k1 = rhs(state);
    let k2 = rhs(&state.add_scaled(&k1, 0.5 * dt));
    let k3 = rhs(&state.add_scaled(&k2, 0.5 * dt));
    let k4 = rhs(&state.add_scaled(&k3, dt));
    if !(k1.all_finite() && k2.all_finite() && k3.all_finite() && k4.all_finite()) {
        return Err(FlowError::NumericalOverflow);
    }
    let sixth = dt / 6.0;
    Ok(state
        .add_scaled(&k1, sixth)
        .add_scaled(&k2, 2.0 * sixth)
        .add_scaled(&k3, 2.0 * sixth)
        .add_scaled(&k4, sixth))
}

/// Classical four-stage Runge-Kutta update of `state` over `dt > 0`.
pub fn rk4_step<S: OdeState, F: Fn(&S) -> S>(rhs: F, state: &S, dt: f64) -> Result<S> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FlowError::Domain(format!("step must be positive, got {dt}")));
    }
    rk4_raw(&rhs, state, dt)
}

/// Adaptive step law `dt = min(dt_max, c |x|^(1-α))` with a hard floor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepPolicy {
    pub dt_max: f64,
    /// Fraction `c` of the local time scale `|x|^(1-α)` used as the step.
    pub near_singularity_factor: f64,
    pub dt_min: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self {
            dt_max: 1e-3,
            near_singularity_factor: 0.01,
            dt_min: 1e-14,
        }
    }
}

impl StepPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt_max > 0.0
            && self.near_singularity_factor > 0.0
            && self.dt_min > 0.0
            && self.dt_min <= self.dt_max
            && self.dt_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(FlowError::Domain(format!("invalid step policy {self:?}")))
        }
    }

    #[inline]
    pub fn step_for(&self, radius: f64, alpha: f64) -> f64 {
        let scale = if alpha == 1.0 / 3.0 {
            let c = radius.cbrt();
            c * c
        } else {
            radius.powf(1.0 - alpha)
        };
        self.dt_max.min(self.near_singularity_factor * scale)
    }

    /// The same law expressed in time units stretched by `factor`
    /// (`t -> t * factor`), as used by the scaling symmetry.
    pub fn time_scaled(&self, factor: f64) -> Self {
        Self {
            dt_max: self.dt_max * factor,
            near_singularity_factor: self.near_singularity_factor,
            dt_min: self.dt_min * factor,
        }
    }
}

/// Why an integration run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ReachedEnd,
    StopRadius,
}

/// Time-stamped states of one integration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const D: usize> {
    pub times: Vec<f64>,
    pub states: Vec<Vector<D>>,
    pub termination: Termination,
}

impl<const D: usize> Trajectory<D> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> (f64, Vector<D>) {
        (*self.times.last().unwrap(), *self.states.last().unwrap())
    }

    /// Linear interpolation between recorded steps.
    pub fn state_at(&self, t: f64) -> Option<Vector<D>> {
        if t < self.times[0] || t > *self.times.last()? {
            return None;
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return Some(self.states[0]);
        }
        if k == self.times.len() {
            return Some(*self.states.last()?);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let a = (t - t0) / (t1 - t0);
        Some(self.states[k - 1] * (1.0 - a) + self.states[k] * a)
    }
}

/// Advances `(t, x)` toward `t_end` with adaptive steps. After each step
/// `check(t_prev, x_prev, t, x)` may end the march early (returns `true`).
/// Returns whether the march was stopped by `check`.
pub(crate) fn march<const D: usize, R, L, C>(
    rhs: &R,
    step_len: &L,
    t: &mut f64,
    x: &mut Vector<D>,
    t_end: f64,
    dt_min: f64,
    mut check: C,
) -> Result<bool>
where
    R: Fn(&Vector<D>) -> Vector<D>,
    L: Fn(&Vector<D>) -> f64,
    C: FnMut(f64, &Vector<D>, f64, &Vector<D>) -> bool,
{
    while *t < t_end {
        let remaining = t_end - *t;
        let h = step_len(x);
        let last = h >= remaining;
        let dt = if last {
            remaining
        } else {
            if !(h >= dt_min) {
                return Err(FlowError::Stiffness {
                    t: *t,
                    dt: h,
                    radius: x.norm(),
                });
            }
            h
        };
        let next = rk4_raw(rhs, x, dt)?;
        let t_next = if last { t_end } else { *t + dt };
        let stop = check(*t, x, t_next, &next);
        *t = t_next;
        *x = next;
        if stop {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Integrates the singular system from `x0` at `t = 0` until `t_end` or
/// until `|x| <= stop_radius`, whichever comes first. Every step is recorded.
pub fn integrate_singular<const D: usize>(
    field: &HomogeneousField<D>,
    x0: &Vector<D>,
    t_end: f64,
    policy: &StepPolicy,
    stop_radius: f64,
) -> Result<Trajectory<D>> {
    policy.validate()?;
    if !(stop_radius >= 0.0) || x0.norm() <= stop_radius {
        return Err(FlowError::Domain(format!(
            "|x0| = {} must exceed the stop radius {stop_radius}",
            x0.norm()
        )));
    }
    let alpha = field.alpha();
    let rhs = |x: &Vector<D>| field.rhs_unchecked(x);
    let step_len = |x: &Vector<D>| policy.step_for(x.norm(), alpha);
    let mut times = vec![0.0];
    let mut states = vec![*x0];
    let (mut t, mut x) = (0.0, *x0);
    let stopped = march(&rhs, &step_len, &mut t, &mut x, t_end, policy.dt_min, |_, _, t1, x1| {
        times.push(t1);
        states.push(*x1);
        x1.norm() <= stop_radius
    })?;
    Ok(Trajectory {
        times,
        states,
        termination: if stopped {
            Termination::StopRadius
        } else {
            Termination::ReachedEnd
        },
    })
}

/// One renormalized RK4 step of the tangent dynamics; `h` may be negative.
#[inline]
pub(crate) fn sphere_step<const D: usize>(field: &HomogeneousField<D>, y: &Vector<D>, h: f64) -> Result<Vector<D>> {
    let next = rk4_raw(&|v: &Vector<D>| field.tangent(v), y, h)?;
    Ok(next / next.norm())
}

/// RK4 on `dy/ds = F_s(y)` with `|y| <- 1` after every step. The last step is
/// shortened to land on `s_end`.
pub fn integrate_sphere<const D: usize>(
    field: &HomogeneousField<D>,
    y0: &UnitVec<D>,
    s_end: f64,
    dt: f64,
) -> Result<Trajectory<D>> {
    if !(s_end > 0.0 && dt > 0.0) {
        return Err(FlowError::Domain(format!(
            "need s_end > 0 and dt > 0, got {s_end}, {dt}"
        )));
    }
    let n = (s_end / dt).ceil() as usize;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut y = *y0.as_vector();
    times.push(0.0);
    states.push(y);
    for k in 1..=n {
        let s_prev = (k - 1) as f64 * dt;
        let s = if k == n { s_end } else { k as f64 * dt };
        y = sphere_step(field, &y, s - s_prev)?;
        times.push(s);
        states.push(y);
    }
    Ok(Trajectory {
        times,
        states,
        termination: Termination::ReachedEnd,
    })
}

/// Locates where `|x|` crosses `level` inside one RK4 step from `(t0, x0)` to
/// `(t1, x1)`, by bisection over the sub-step length. The refined point
/// satisfies `||x*| - level| <= 1e-12 level`.
pub fn detect_crossing<const D: usize, R>(
    rhs: R,
    start: (f64, &Vector<D>),
    end: (f64, &Vector<D>),
    level: f64,
) -> Result<(f64, Vector<D>)>
where
    R: Fn(&Vector<D>) -> Vector<D>,
{
    let (t0, x0) = start;
    let (t1, x1) = end;
    let g0 = x0.norm() - level;
    let g1 = x1.norm() - level;
    if g0 == 0.0 {
        return Ok((t0, *x0));
    }
    if g1 == 0.0 {
        return Ok((t1, *x1));
    }
    if g0 * g1 > 0.0 || !(t1 > t0) {
        return Err(FlowError::Bracket { level });
    }
    let tol = 1e-12 * level;
    let (mut lo, mut hi) = (0.0_f64, t1 - t0);
    let mut best = (t1, *x1, g1.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let xm = rk4_raw(&rhs, x0, mid)?;
        let gm = xm.norm() - level;
        if gm.abs() < best.2 {
            best = (t0 + mid, xm, gm.abs());
        }
        if gm.abs() <= tol {
            break;
        }
        if gm * g0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((best.0, best.1))
}
