//! ν-regularized systems: the singular field is replaced by `ν^α H(x/ν)`
//! inside the ball `|x| < ν`. Supports integrating the regularized system
//! directly as well as the entry/escape reduction where the passage through
//! the ball is replaced by a (deterministic or random) map.

use std::cell::Cell;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::{smoothstep, HomogeneousField, UnitVec, Vector};
use crate::integrate::{detect_crossing, march, StepPolicy};
use crate::rng::{stream, Purpose};

/// Regularizing field `H` on the unit ball (and beyond, where it is
/// usually blended back into the singular field).
#[derive(Clone)]
pub struct InnerField<const D: usize> {
    eval: Arc<dyn Fn(&Vector<D>) -> Vector<D> + Send + Sync>,
    h0: Option<Vector<D>>,
}

impl<const D: usize> std::fmt::Debug for InnerField<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InnerField").field("h0", &self.h0).finish()
    }
}

impl<const D: usize> InnerField<D> {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&Vector<D>) -> Vector<D> + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            h0: None,
        }
    }

    /// `H = H_0` for `|x| <= 1/4`, `H = f` for `|x| >= 3/4`, smoothstep blend between.
    pub fn blend(field: &HomogeneousField<D>, h0: Vector<D>) -> Self {
        let f = field.clone();
        Self {
            eval: Arc::new(move |x: &Vector<D>| {
                let r = x.norm();
                if r <= 0.25 {
                    h0
                } else if r >= 0.75 {
                    f.rhs_unchecked(x)
                } else {
                    let s = smoothstep(2.0 * r - 0.5);
                    h0 * (1.0 - s) + f.rhs_unchecked(x) * s
                }
            }),
            h0: Some(h0),
        }
    }

    #[inline]
    pub fn eval(&self, x: &Vector<D>) -> Vector<D> {
        (self.eval)(x)
    }

    /// The constant core value, when built by [`InnerField::blend`].
    pub fn h0(&self) -> Option<&Vector<D>> {
        self.h0.as_ref()
    }
}

/// `H_0 = X + offset` with `X_i ~ U[-1/2, 1/2]`, drawn from the stream of
/// `(seed, index)`.
pub fn draw_h0<const D: usize>(seed: u64, index: u64, offset: &Vector<D>) -> Vector<D> {
    let mut rng = stream(seed, Purpose::InnerField, index);
    Vector::<D>::from_fn(|_, _| rng.gen_range(-0.5..=0.5)) + offset
}

/// Default core offset: minus the unit entry direction, so the core pushes
/// solutions through the origin toward the opposite side.
pub fn default_offset<const D: usize>(entry_point: &Vector<D>) -> Vector<D> {
    -entry_point / entry_point.norm()
}

/// Blended inner field with a random constant core; one `H_0` per trajectory.
pub fn random_inner_field<const D: usize>(
    field: &HomogeneousField<D>,
    seed: u64,
    index: u64,
    offset: &Vector<D>,
) -> InnerField<D> {
    InnerField::blend(field, draw_h0(seed, index, offset))
}

/// Right-hand side of the ν-regularized system.
#[inline]
pub fn regularized_rhs<const D: usize>(
    field: &HomogeneousField<D>,
    inner: &InnerField<D>,
    nu: f64,
    x: &Vector<D>,
) -> Vector<D> {
    let r = x.norm();
    if r >= nu {
        field.rhs_unchecked(x)
    } else {
        inner.eval(&(x / nu)) * field.pow_alpha(nu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationMode {
    /// Integrate the regularized system straight through the ball.
    #[default]
    Direct,
    /// Replace the ball passage by the time-`T` map of the unit regularized flow.
    MapDeterministic,
    /// Draw the escape point from a configured density.
    MapStochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerFamily {
    PointMass,
    /// Uniform on a spherical cap of the sphere of the given radius.
    #[default]
    Cap,
    /// Gaussian around `radius * cap_center`, restricted to `|x| > 1` and the cap cone.
    Gaussian,
}

/// Escape density in unit-ball coordinates (`x / ν`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub family: SamplerFamily,
    pub radius: f64,
    pub cap_center: Vec<f64>,
    pub cap_angle: f64,
    pub sigma: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            family: SamplerFamily::Cap,
            radius: 2.0,
            cap_center: Vec::new(),
            cap_angle: PI / 3.0,
            sigma: 0.5,
        }
    }
}

fn default_delay() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationSpec {
    #[serde(default)]
    pub mode: RegularizationMode,
    pub nu: f64,
    #[serde(rename = "T", default = "default_delay")]
    pub delay: f64,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub seed: u64,
    /// Fixed core value shared by every trajectory; drawn per trajectory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h0: Option<Vec<f64>>,
    /// Offset added to the uniform draw of `H_0`; minus the entry direction when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h0_offset: Option<Vec<f64>>,
}

impl RegularizationSpec {
    pub fn direct(nu: f64, seed: u64) -> Self {
        Self {
            mode: RegularizationMode::Direct,
            nu,
            delay: default_delay(),
            sampler: SamplerSpec::default(),
            seed,
            h0: None,
            h0_offset: None,
        }
    }

    /// The inner field for trajectory `index`: the fixed `h0` when given,
    /// otherwise a random core around the configured (or default) offset.
    pub fn inner_field<const D: usize>(
        &self,
        field: &HomogeneousField<D>,
        index: u64,
        entry_point: &Vector<D>,
    ) -> Result<InnerField<D>> {
        if let Some(h0) = &self.h0 {
            return Ok(InnerField::blend(field, sized::<D>("h0", h0)?));
        }
        let offset = match &self.h0_offset {
            Some(v) => sized::<D>("h0_offset", v)?,
            None => default_offset(entry_point),
        };
        Ok(random_inner_field(field, self.seed, index, &offset))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(FlowError::Domain(format!("nu must be positive, got {}", self.nu)));
        }
        for (name, v) in [("h0", &self.h0), ("h0_offset", &self.h0_offset)] {
            if let Some(v) = v {
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(FlowError::Domain(format!("{name} must be finite")));
                }
            }
        }
        if self.mode != RegularizationMode::Direct && !(self.delay > 0.0) {
            return Err(FlowError::Domain(format!("T must be positive, got {}", self.delay)));
        }
        Ok(())
    }
}

fn sized<const D: usize>(name: &str, v: &[f64]) -> Result<Vector<D>> {
    if v.len() != D {
        return Err(FlowError::Domain(format!("{name} needs {D} components, got {}", v.len())));
    }
    Ok(Vector::<D>::from_column_slice(v))
}

/// First crossing of `|x| = ν` by the singular solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryEvent<const D: usize> {
    pub t_ent: f64,
    pub x_ent: Vector<D>,
}

/// Point where a regularized solution is released outside the ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscapeSample<const D: usize> {
    pub t_esc: f64,
    pub x_esc: Vector<D>,
}

/// Integrates the unregularized system from `x0` until the first crossing of
/// `|x| = ν`, refined by bisection. `x0` is expected to lie in the domain of
/// a focusing attractor; otherwise the run ends with [`FlowError::NoEntry`].
pub fn find_entry<const D: usize>(
    field: &HomogeneousField<D>,
    x0: &Vector<D>,
    nu: f64,
    policy: &StepPolicy,
    t_max: f64,
) -> Result<EntryEvent<D>> {
    policy.validate()?;
    if !(nu > 0.0) || x0.norm() <= nu {
        return Err(FlowError::Domain(format!(
            "need |x0| > nu > 0, got |x0| = {}, nu = {nu}",
            x0.norm()
        )));
    }
    let alpha = field.alpha();
    let rhs = |x: &Vector<D>| field.rhs_unchecked(x);
    let step_len = |x: &Vector<D>| policy.step_for(x.norm(), alpha);
    let (mut t, mut x) = (0.0, *x0);
    let mut bracket = None;
    let hit = march(&rhs, &step_len, &mut t, &mut x, t_max, policy.dt_min, |t0, x0, _, x1| {
        if x1.norm() <= nu {
            bracket = Some((t0, *x0));
            true
        } else {
            false
        }
    })?;
    if !hit {
        return Err(FlowError::NoEntry { nu, t_max });
    }
    let (t0, x0) = bracket.expect("set when the march stops");
    let (t_ent, x_ent) = detect_crossing(rhs, (t0, &x0), (t, &x), nu)?;
    Ok(EntryEvent { t_ent, x_ent })
}

const MAX_DELAY_DOUBLINGS: u32 = 8;

/// Escape through the time-`T` map of the unit regularized flow:
/// `x_esc / ν = Φ_1^T(x_ent / ν)`, `t_esc = t_ent + ν^(1-α) T`. The delay is
/// doubled (up to eight times) while the point is still inside the ball.
pub fn escape_via_flow<const D: usize>(
    field: &HomogeneousField<D>,
    inner: &InnerField<D>,
    entry: &EntryEvent<D>,
    nu: f64,
    delay: f64,
    policy: &StepPolicy,
) -> Result<EscapeSample<D>> {
    if !(delay > 0.0) {
        return Err(FlowError::Domain(format!("T must be positive, got {delay}")));
    }
    let alpha = field.alpha();
    let stretch = nu.powf(alpha - 1.0);
    let unit_policy = policy.time_scaled(stretch);
    let rhs = |z: &Vector<D>| regularized_rhs(field, inner, 1.0, z);
    let step_len = |z: &Vector<D>| unit_policy.step_for(z.norm().max(1.0), alpha);
    let mut z = entry.x_ent / nu;
    let mut s = 0.0;
    let mut total = delay;
    let mut doublings = 0;
    loop {
        march(&rhs, &step_len, &mut s, &mut z, total, unit_policy.dt_min, |_, _, _, _| false)?;
        if z.norm() > 1.0 {
            break;
        }
        if doublings == MAX_DELAY_DOUBLINGS {
            return Err(FlowError::TrappedInBall { retries: doublings });
        }
        doublings += 1;
        total *= 2.0;
    }
    Ok(EscapeSample {
        t_esc: entry.t_ent + total / stretch,
        x_esc: z * nu,
    })
}

/// Validated escape density ready for sampling.
#[derive(Debug, Clone)]
pub struct EscapeSampler<const D: usize> {
    family: SamplerFamily,
    radius: f64,
    center: Vector<D>,
    cap_angle: f64,
    sigma: f64,
}

const MAX_REJECTIONS: usize = 100_000;

impl<const D: usize> EscapeSampler<D> {
    pub fn from_spec(spec: &SamplerSpec) -> Result<Self> {
        if spec.cap_center.len() != D {
            return Err(FlowError::InvalidSampler(format!(
                "cap_center needs {D} components, got {}",
                spec.cap_center.len()
            )));
        }
        let center = *UnitVec::<D>::from_slice(&spec.cap_center)
            .map_err(|e| FlowError::InvalidSampler(e.to_string()))?
            .as_vector();
        if !(spec.cap_angle > 0.0 && spec.cap_angle <= PI) {
            return Err(FlowError::InvalidSampler(format!(
                "cap_angle must lie in (0, pi], got {}",
                spec.cap_angle
            )));
        }
        match spec.family {
            SamplerFamily::PointMass | SamplerFamily::Cap if !(spec.radius > 1.0) => {
                return Err(FlowError::InvalidSampler(format!(
                    "radius {} puts mass inside the unit ball",
                    spec.radius
                )));
            }
            SamplerFamily::Gaussian if !(spec.sigma > 0.0) || !(spec.radius >= 0.0) => {
                return Err(FlowError::InvalidSampler(format!(
                    "gaussian needs sigma > 0 and radius >= 0, got {} and {}",
                    spec.sigma, spec.radius
                )));
            }
            _ => {}
        }
        Ok(Self {
            family: spec.family,
            radius: spec.radius,
            center,
            cap_angle: spec.cap_angle,
            sigma: spec.sigma,
        })
    }

    fn gaussian_vector<R: Rng>(rng: &mut R) -> Vector<D> {
        Vector::<D>::from_fn(|_, _| rng.sample(StandardNormal))
    }

    /// Uniform direction on the cap of half-angle `cap_angle` around the center.
    fn cap_direction<R: Rng>(&self, rng: &mut R) -> Vector<D> {
        // polar angle has density ∝ sin^(D-2)(θ) on [0, cap_angle]
        let peak = self.cap_angle.min(PI / 2.0).sin();
        let theta = loop {
            let th = rng.gen_range(0.0..=self.cap_angle);
            if D == 2 {
                break th;
            }
            let accept = (th.sin() / peak).powi(D as i32 - 2);
            if rng.gen::<f64>() <= accept {
                break th;
            }
        };
        let perp = loop {
            let g = Self::gaussian_vector(rng);
            let p = g - self.center * g.dot(&self.center);
            let n = p.norm();
            if n > 1e-12 {
                break p / n;
            }
        };
        self.center * theta.cos() + perp * theta.sin()
    }

    /// Draw in unit-ball coordinates; always `|X| > 1`.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<Vector<D>> {
        match self.family {
            SamplerFamily::PointMass => Ok(self.center * self.radius),
            SamplerFamily::Cap => Ok(self.cap_direction(rng) * self.radius),
            SamplerFamily::Gaussian => {
                let cos_max = self.cap_angle.cos();
                for _ in 0..MAX_REJECTIONS {
                    let x = self.center * self.radius + Self::gaussian_vector(rng) * self.sigma;
                    let r = x.norm();
                    if r > 1.0 && x.dot(&self.center) >= cos_max * r {
                        return Ok(x);
                    }
                }
                Err(FlowError::InvalidSampler(format!(
                    "no draw with |x| > 1 inside the cone after {MAX_REJECTIONS} tries"
                )))
            }
        }
    }
}

/// Random escape point for trajectory `index`: `x_esc = ν X` with `X` drawn
/// from the configured density (so `x_esc` has density `ν^{-d} f(x/ν)`),
/// and `t_esc = t_ent + ν^(1-α) T`.
pub fn sample_escape<const D: usize>(
    spec: &RegularizationSpec,
    sampler: &EscapeSampler<D>,
    alpha: f64,
    entry: &EntryEvent<D>,
    index: u64,
) -> Result<EscapeSample<D>> {
    if spec.mode != RegularizationMode::MapStochastic {
        return Err(FlowError::Domain("sample_escape needs mode map_stochastic".into()));
    }
    let mut rng = stream(spec.seed, Purpose::EscapeSampler, index);
    let x = sampler.draw(&mut rng)?;
    Ok(EscapeSample {
        t_esc: entry.t_ent + spec.nu.powf(1.0 - alpha) * spec.delay,
        x_esc: x * spec.nu,
    })
}

/// State of the unregularized flow at a requested time after escape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Continuation<const D: usize> {
    pub t: f64,
    pub x: Vector<D>,
    /// The solution came back inside `|x| < ν` at or before this time; `x`
    /// is then the first state found inside the ball.
    pub reentered: bool,
}

/// `Φ^{t - t_esc}(x_esc)` at each target time (ascending, all `>= t_esc`).
pub fn continue_from_escape<const D: usize>(
    field: &HomogeneousField<D>,
    esc: &EscapeSample<D>,
    t_targets: &[f64],
    policy: &StepPolicy,
    nu: f64,
) -> Result<Vec<Continuation<D>>> {
    if t_targets.windows(2).any(|w| w[1] < w[0]) || t_targets.first().is_some_and(|&t| t < esc.t_esc) {
        return Err(FlowError::Domain(format!(
            "targets must be ascending and >= t_esc = {}",
            esc.t_esc
        )));
    }
    let alpha = field.alpha();
    let rhs = |x: &Vector<D>| field.rhs_unchecked(x);
    let step_len = |x: &Vector<D>| policy.step_for(x.norm(), alpha);
    let (mut t, mut x) = (esc.t_esc, esc.x_esc);
    let mut reentered = false;
    let mut out = Vec::with_capacity(t_targets.len());
    for &target in t_targets {
        if !reentered {
            reentered = march(&rhs, &step_len, &mut t, &mut x, target, policy.dt_min, |_, _, _, x1| {
                x1.norm() < nu
            })?;
        }
        out.push(Continuation { t: target, x, reentered });
    }
    Ok(out)
}

/// Start of the direct-mode integration shared by every trajectory: the last
/// state before any RK4 stage of the regularized system enters the ball (or
/// the state at `t_limit`). Resuming from it reproduces a from-scratch run bit
/// for bit.
pub fn direct_prefix<const D: usize>(
    field: &HomogeneousField<D>,
    nu: f64,
    x0: &Vector<D>,
    t_limit: f64,
    policy: &StepPolicy,
) -> Result<(f64, Vector<D>)> {
    let alpha = field.alpha();
    let touched = Cell::new(false);
    let rhs = |x: &Vector<D>| {
        if x.norm() < nu {
            touched.set(true);
        }
        field.rhs_unchecked(x)
    };
    let step_len = |x: &Vector<D>| policy.step_for(x.norm().max(nu), alpha);
    let (mut t, mut x) = (0.0, *x0);
    let mut before = None;
    let stopped = march(&rhs, &step_len, &mut t, &mut x, t_limit, policy.dt_min, |t0, x0, _, _| {
        if touched.get() {
            before = Some((t0, *x0));
            true
        } else {
            false
        }
    });
    match stopped {
        Ok(true) => Ok(before.expect("set when the march stops")),
        Ok(false) => Ok((t, x)),
        // a stage inside the ball can be non-finite for the singular field
        Err(FlowError::NumericalOverflow) if touched.get() => Err(FlowError::NumericalOverflow),
        Err(e) => Err(e),
    }
}

/// Integrates the regularized system from `start` and records the state at
/// each (ascending) target time.
pub fn integrate_direct<const D: usize>(
    field: &HomogeneousField<D>,
    inner: &InnerField<D>,
    nu: f64,
    start: (f64, Vector<D>),
    t_targets: &[f64],
    policy: &StepPolicy,
) -> Result<Vec<Vector<D>>> {
    if t_targets.windows(2).any(|w| w[1] < w[0]) || t_targets.first().is_some_and(|&t| t < start.0) {
        return Err(FlowError::Domain("targets must be ascending and after the start".into()));
    }
    let alpha = field.alpha();
    let rhs = |x: &Vector<D>| regularized_rhs(field, inner, nu, x);
    let step_len = |x: &Vector<D>| policy.step_for(x.norm().max(nu), alpha);
    let (mut t, mut x) = start;
    let mut out = Vec::with_capacity(t_targets.len());
    for &target in t_targets {
        march(&rhs, &step_len, &mut t, &mut x, target, policy.dt_min, |_, _, _, _| false)?;
        out.push(x);
    }
    Ok(out)
}

/// Full direct-mode trajectory with every step recorded (used for plotting
/// individual realizations).
pub fn direct_trajectory<const D: usize>(
    field: &HomogeneousField<D>,
    inner: &InnerField<D>,
    nu: f64,
    x0: &Vector<D>,
    t_end: f64,
    policy: &StepPolicy,
) -> Result<crate::integrate::Trajectory<D>> {
    let alpha = field.alpha();
    let rhs = |x: &Vector<D>| regularized_rhs(field, inner, nu, x);
    let step_len = |x: &Vector<D>| policy.step_for(x.norm().max(nu), alpha);
    let mut times = vec![0.0];
    let mut states = vec![*x0];
    let (mut t, mut x) = (0.0, *x0);
    march(&rhs, &step_len, &mut t, &mut x, t_end, policy.dt_min, |_, _, t1, x1| {
        times.push(t1);
        states.push(*x1);
        false
    })?;
    Ok(crate::integrate::Trajectory {
        times,
        states,
        termination: crate::integrate::Termination::ReachedEnd,
    })
}
