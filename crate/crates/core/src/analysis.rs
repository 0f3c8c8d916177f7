//! Synchronization graph `w = G(y)`, SRB averages, the weighted SRB′ measure
//! and its post-blowup pushforward, blowup times and trapping bounds.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::{HomogeneousField, UnitVec, Vector};
use crate::integrate::{march, rk4_raw, sphere_step, StepPolicy};
use crate::quad::{cumulative, integral, TRAILING};

/// Tail cutoff, quadrature step and radial lower bound for evaluating `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsyncConfig {
    /// `s_p`; chosen from the tail bound when `None`.
    pub tail_cutoff: Option<f64>,
    pub dt: f64,
    /// Lower bound `F_m > 0` of `F_r` on the region visited by the orbit.
    pub f_m: f64,
    pub tolerance: f64,
}

impl GsyncConfig {
    pub fn auto(f_m: f64, dt: f64) -> Self {
        Self {
            tail_cutoff: None,
            dt,
            f_m,
            tolerance: 1e-8,
        }
    }

    pub fn fixed(s_p: f64, f_m: f64, dt: f64) -> Self {
        Self {
            tail_cutoff: Some(s_p),
            dt,
            f_m,
            tolerance: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.f_m > 0.0 && self.tolerance > 0.0) {
            return Err(FlowError::Domain(format!(
                "need dt, F_m, tolerance > 0, got {}, {}, {}",
                self.dt, self.f_m, self.tolerance
            )));
        }
        if let Some(s) = self.tail_cutoff {
            if !(s > 0.0) {
                return Err(FlowError::Domain(format!("s_p must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// `exp[(α-1) F_m s_p] / ((1-α) F_m)`.
    pub fn tail_bound(&self, alpha: f64, s_p: f64) -> f64 {
        let lf = (1.0 - alpha) * self.f_m;
        (-lf * s_p).exp() / lf
    }

    /// Number of quadrature steps covering `s_p`.
    pub fn steps(&self, alpha: f64) -> Result<usize> {
        self.validate()?;
        let s_p = match self.tail_cutoff {
            Some(s) => s,
            None => {
                let lf = (1.0 - alpha) * self.f_m;
                ((1.0 / (self.tolerance * lf)).ln() / lf).max(self.dt)
            }
        };
        Ok(((s_p / self.dt).ceil() as usize).max(1))
    }

    /// Effective cutoff (a whole number of steps).
    pub fn cutoff(&self, alpha: f64) -> Result<f64> {
        Ok(self.steps(alpha)? as f64 * self.dt)
    }
}

fn check_bound(value: f64, bound: f64) -> Result<()> {
    if value < bound {
        Err(FlowError::BoundViolation { value, bound })
    } else {
        Ok(())
    }
}

/// `G(y) = ∫_0^{s_p} exp[(α-1) ∫_0^{σ} F_r(Φ^{-u} y) du] dσ` from the
/// backward sphere orbit with fourth-order quadrature.
pub fn gsync_value<const D: usize>(field: &HomogeneousField<D>, y: &UnitVec<D>, cfg: &GsyncConfig) -> Result<f64> {
    let alpha = field.alpha();
    let n = cfg.steps(alpha)?;
    let h = cfg.dt;
    let lambda = 1.0 - alpha;
    let mut fr = Vec::with_capacity(n + 1);
    let mut yk = *y.as_vector();
    fr.push(field.radial(&yk));
    check_bound(fr[0], cfg.f_m)?;
    for _ in 0..n {
        yk = sphere_step(field, &yk, -h)?;
        let v = field.radial(&yk);
        check_bound(v, cfg.f_m)?;
        fr.push(v);
    }
    let a = cumulative(&fr, h);
    let g: Vec<f64> = a.iter().map(|ak| (-lambda * ak).exp()).collect();
    Ok(integral(&g, h))
}

type Jacobian<const D: usize> = SMatrix<f64, D, D>;

const FD_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `x ↦ F_s(x/|x|)`.
fn tangent_jacobian<const D: usize>(field: &HomogeneousField<D>, y: &Vector<D>) -> Jacobian<D> {
    let ext = |x: Vector<D>| field.tangent(&(x / x.norm()));
    let mut j = Jacobian::<D>::zeros();
    for c in 0..D {
        let mut e = Vector::<D>::zeros();
        e[c] = FD_STEP;
        let col = (ext(y + e) - ext(y - e)) / (2.0 * FD_STEP);
        j.set_column(c, &col);
    }
    j
}

/// Central-difference gradient of `x ↦ F_r(x/|x|)`.
fn radial_gradient<const D: usize>(field: &HomogeneousField<D>, y: &Vector<D>) -> Vector<D> {
    let ext = |x: Vector<D>| field.radial(&(x / x.norm()));
    Vector::<D>::from_fn(|c, _| {
        let mut e = Vector::<D>::zeros();
        e[c] = FD_STEP;
        (ext(y + e) - ext(y - e)) / (2.0 * FD_STEP)
    })
}

/// `∇G(y)` projected on the tangent space, from
/// `∇G = -(1-α) ∫_0^{s_p} B(σ) e^{-(1-α) A(σ)} dσ` with `B = ∫_0^σ ∇F_r · Y`
/// and `Y` solving the variational equation along the backward orbit.
pub fn gsync_gradient<const D: usize>(
    field: &HomogeneousField<D>,
    y: &UnitVec<D>,
    cfg: &GsyncConfig,
) -> Result<Vector<D>> {
    let alpha = field.alpha();
    let n = cfg.steps(alpha)?;
    let h = cfg.dt;
    let lambda = 1.0 - alpha;
    let rhs = |s: &(Vector<D>, Jacobian<D>)| (field.tangent(&s.0), tangent_jacobian(field, &s.0) * s.1);
    let mut state = (*y.as_vector(), Jacobian::<D>::identity());
    let mut fr = Vec::with_capacity(n + 1);
    // rows of ∇F_r · Y, one per node
    let mut dr: Vec<Vector<D>> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            let next = rk4_raw(&rhs, &state, -h)?;
            state = (next.0 / next.0.norm(), next.1);
        }
        let v = field.radial(&state.0);
        check_bound(v, cfg.f_m)?;
        fr.push(v);
        dr.push(state.1.transpose() * radial_gradient(field, &state.0));
    }
    let a = cumulative(&fr, h);
    let weights: Vec<f64> = a.iter().map(|ak| (-lambda * ak).exp()).collect();
    let mut grad = Vector::<D>::zeros();
    for c in 0..D {
        let comp: Vec<f64> = dr.iter().map(|v| v[c]).collect();
        let b = cumulative(&comp, h);
        let integrand: Vec<f64> = b.iter().zip(&weights).map(|(bk, wk)| bk * wk).collect();
        grad[c] = -lambda * integral(&integrand, h);
    }
    let yv = y.as_vector();
    Ok(grad - yv * grad.dot(yv))
}

/// Right side of the gradient norm bound,
/// `M_r / (((1-α) m_r - M_s) m_r)`, or `None` when `M_s >= (1-α) m_r`.
pub fn gradient_bound(m_r: f64, big_m_r: f64, big_m_s: f64, alpha: f64) -> Option<f64> {
    let gap = (1.0 - alpha) * m_r - big_m_s;
    (gap > 0.0 && m_r > 0.0).then(|| big_m_r / (gap * m_r))
}

/// Streaming evaluation of `G` along a forward sphere orbit. Each step
/// updates `G(y_k) = e^{-λ ΔC_k} G(y_{k-1}) + ∫_{s_{k-1}}^{s_k} e^{-λ(C_k - C(u))} du`
/// with `C = ∫ F_r`, so no backward integration is needed; the value is
/// reported once the history covers the tail cutoff.
#[derive(Debug, Clone)]
pub struct GraphOrbit<'a, const D: usize> {
    field: &'a HomogeneousField<D>,
    h: f64,
    lambda: f64,
    f_m: f64,
    y: Vector<D>,
    k: usize,
    n_p: usize,
    /// `F_r` at nodes `k-3..=k`.
    fr: [f64; 4],
    /// `ΔC` for steps `k-2..=k`.
    dc: [f64; 3],
    g: f64,
    last_violation: Option<(usize, f64)>,
}

impl<'a, const D: usize> GraphOrbit<'a, D> {
    pub fn new(field: &'a HomogeneousField<D>, y0: &UnitVec<D>, cfg: &GsyncConfig) -> Result<Self> {
        let n_p = cfg.steps(field.alpha())?;
        let y = *y0.as_vector();
        let f0 = field.radial(&y);
        Ok(Self {
            field,
            h: cfg.dt,
            lambda: 1.0 - field.alpha(),
            f_m: cfg.f_m,
            y,
            k: 0,
            n_p,
            fr: [0.0, 0.0, 0.0, f0],
            dc: [0.0; 3],
            g: 0.0,
            last_violation: (f0 < cfg.f_m).then_some((0, f0)),
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let (h, lambda) = (self.h, self.lambda);
        self.y = sphere_step(self.field, &self.y, h)?;
        self.k += 1;
        let f = self.field.radial(&self.y);
        if f < self.f_m {
            self.last_violation = Some((self.k, f));
        }
        self.fr = [self.fr[1], self.fr[2], self.fr[3], f];
        let high = self.k >= 3;
        let dc = if high {
            h / 24.0 * (TRAILING[0] * self.fr[0] + TRAILING[1] * self.fr[1] + TRAILING[2] * self.fr[2] + TRAILING[3] * f)
        } else {
            0.5 * h * (self.fr[2] + f)
        };
        self.dc = [self.dc[1], self.dc[2], dc];
        let d1 = dc;
        let decay1 = (-lambda * d1).exp();
        let local = if high {
            let d2 = d1 + self.dc[1];
            let d3 = d2 + self.dc[0];
            h / 24.0
                * (TRAILING[0] * (-lambda * d3).exp()
                    + TRAILING[1] * (-lambda * d2).exp()
                    + TRAILING[2] * decay1
                    + TRAILING[3])
        } else {
            0.5 * h * (decay1 + 1.0)
        };
        self.g = decay1 * self.g + local;
        Ok(())
    }

    pub fn advance(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn y(&self) -> &Vector<D> {
        &self.y
    }

    pub fn steps_taken(&self) -> usize {
        self.k
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn warmup_steps(&self) -> usize {
        self.n_p
    }

    /// `G` at the current point, once `s_p` of history is available.
    pub fn value(&self) -> Option<Result<f64>> {
        if self.k < self.n_p {
            return None;
        }
        Some(match self.last_violation {
            Some((i, v)) if i + self.n_p >= self.k => Err(FlowError::BoundViolation { value: v, bound: self.f_m }),
            _ => Ok(self.g),
        })
    }
}

/// `w(s)` of the master-slave system from `(y0, w0)`:
/// `w0 e^{-λ C(s)} + ∫_0^s e^{-λ (C(s) - C(u))} du`, `C(s) = ∫_0^s F_r(y(u)) du`,
/// by quadrature along the forward sphere orbit.
pub fn explicit_w<const D: usize>(field: &HomogeneousField<D>, y0: &UnitVec<D>, w0: f64, s: f64, dt: f64) -> Result<f64> {
    if !(s >= 0.0 && w0 > 0.0 && dt > 0.0) {
        return Err(FlowError::Domain(format!("need s >= 0, w0 > 0, dt > 0, got {s}, {w0}, {dt}")));
    }
    if s == 0.0 {
        return Ok(w0);
    }
    let n = (s / dt).ceil() as usize;
    let h = s / n as f64;
    let lambda = 1.0 - field.alpha();
    let mut y = *y0.as_vector();
    let mut fr = Vec::with_capacity(n + 1);
    fr.push(field.radial(&y));
    for _ in 0..n {
        y = sphere_step(field, &y, h)?;
        fr.push(field.radial(&y));
    }
    let c = cumulative(&fr, h);
    let c_end = c[n];
    let g: Vec<f64> = c.iter().map(|ck| (-lambda * (c_end - ck)).exp()).collect();
    Ok(w0 * (-lambda * c_end).exp() + integral(&g, h))
}

/// RK4 on `(y, w)` with `y` renormalized; the `y` update is bitwise the
/// sphere step used by [`GraphOrbit`].
#[inline]
pub(crate) fn master_slave_step<const D: usize>(field: &HomogeneousField<D>, y: &Vector<D>, w: f64, h: f64) -> Result<(Vector<D>, f64)> {
    let am1 = field.alpha() - 1.0;
    let rhs = |s: &(Vector<D>, f64)| {
        let (fs, fr) = field.components(&s.0);
        (fs, 1.0 + am1 * fr * s.1)
    };
    let (yn, wn) = rk4_raw(&rhs, &(*y, w), h)?;
    Ok((yn / yn.norm(), wn))
}

/// Integrates the master-slave system with fixed step `dt` and records `w` at
/// each grid time (rounded to the nearest step).
pub fn integrate_master_slave<const D: usize>(
    field: &HomogeneousField<D>,
    y0: &UnitVec<D>,
    w0: f64,
    s_grid: &[f64],
    dt: f64,
) -> Result<Vec<(Vector<D>, f64)>> {
    if !(dt > 0.0 && w0 > 0.0) {
        return Err(FlowError::Domain(format!("need dt > 0 and w0 > 0, got {dt}, {w0}")));
    }
    let (mut y, mut w) = (*y0.as_vector(), w0);
    let mut k = 0usize;
    let mut out = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let target = grid_index(s, dt)?;
        if target < k {
            return Err(FlowError::Domain("s_grid must be ascending".into()));
        }
        while k < target {
            (y, w) = master_slave_step(field, &y, w, dt)?;
            k += 1;
        }
        out.push((y, w));
    }
    Ok(out)
}

fn grid_index(s: f64, dt: f64) -> Result<usize> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(FlowError::Domain(format!("grid time must be >= 0, got {s}")));
    }
    Ok((s / dt).round() as usize)
}

/// Initial scale for [`sync_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialScale {
    Value(f64),
    /// Start on the graph, `w0 = G(y)`.
    OnGraph,
}

/// `|w(s) - G(y(s))|` along a master-slave run. The orbit first runs for the
/// tail cutoff `s_p` from `y0` to build the history `G` needs; `s = 0` is the
/// point reached there.
pub fn sync_error<const D: usize>(
    field: &HomogeneousField<D>,
    y0: &UnitVec<D>,
    w0: InitialScale,
    s_grid: &[f64],
    cfg: &GsyncConfig,
) -> Result<Vec<f64>> {
    let mut orbit = GraphOrbit::new(field, y0, cfg)?;
    orbit.advance(orbit.warmup_steps())?;
    let g0 = orbit.value().expect("warm")?;
    let mut w = match w0 {
        InitialScale::Value(v) if v > 0.0 => v,
        InitialScale::Value(v) => return Err(FlowError::Domain(format!("w0 must be positive, got {v}"))),
        InitialScale::OnGraph => g0,
    };
    let h = cfg.dt;
    let mut y = *orbit.y();
    let mut k = 0usize;
    let mut out = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let target = grid_index(s, h)?;
        if target < k {
            return Err(FlowError::Domain("s_grid must be ascending".into()));
        }
        while k < target {
            (y, w) = master_slave_step(field, &y, w, h)?;
            orbit.step()?;
            k += 1;
        }
        debug_assert_eq!(y, *orbit.y());
        let g = orbit.value().expect("warm")?;
        out.push((w - g).abs());
    }
    Ok(out)
}

/// Time average of `observable` over the sphere orbit on `[s_burn, s_total]`.
pub fn srb_average<const D: usize, O>(
    field: &HomogeneousField<D>,
    y0: &UnitVec<D>,
    observable: O,
    s_burn: f64,
    s_total: f64,
    dt: f64,
) -> Result<f64>
where
    O: Fn(&Vector<D>) -> f64,
{
    if !(s_total > s_burn && s_burn >= 0.0 && dt > 0.0) {
        return Err(FlowError::Domain(format!(
            "need s_total > s_burn >= 0 and dt > 0, got {s_total}, {s_burn}, {dt}"
        )));
    }
    let mut y = *y0.as_vector();
    let burn = (s_burn / dt).round() as usize;
    for _ in 0..burn {
        y = sphere_step(field, &y, dt)?;
    }
    let n = (((s_total - s_burn) / dt).round() as usize).max(1);
    let mut vals = Vec::with_capacity(n + 1);
    vals.push(observable(&y));
    for _ in 0..n {
        y = sphere_step(field, &y, dt)?;
        vals.push(observable(&y));
    }
    Ok(integral(&vals, dt) / (n as f64 * dt))
}

/// Empirical `(F_m, F_M)`: min and max of `F_r` along an attractor orbit,
/// widened by `margin` (e.g. 0.1 for 10%).
pub fn radial_bounds<const D: usize>(
    field: &HomogeneousField<D>,
    y0: &UnitVec<D>,
    s_burn: f64,
    s_total: f64,
    dt: f64,
    margin: f64,
) -> Result<(f64, f64)> {
    let mut y = *y0.as_vector();
    let burn = (s_burn / dt).round() as usize;
    for _ in 0..burn {
        y = sphere_step(field, &y, dt)?;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let n = ((s_total - s_burn) / dt).round() as usize;
    for _ in 0..n.max(1) {
        y = sphere_step(field, &y, dt)?;
        let f = field.radial(&y);
        lo = lo.min(f);
        hi = hi.max(f);
    }
    if !(lo > 0.0) {
        return Err(FlowError::Domain(format!("F_r reaches {lo} on the orbit; attractor is not defocusing")));
    }
    Ok((lo * (1.0 - margin), hi * (1.0 + margin)))
}

/// `(w_m, w_M) = (1/((1-α) F_M), 1/((1-α) F_m))`.
pub fn trapping_bounds(f_m: f64, f_big: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(f_m > 0.0 && f_big >= f_m && alpha < 1.0) {
        return Err(FlowError::Domain(format!(
            "need 0 < F_m <= F_M and alpha < 1, got {f_m}, {f_big}, {alpha}"
        )));
    }
    let l = 1.0 - alpha;
    Ok((1.0 / (l * f_big), 1.0 / (l * f_m)))
}

/// Weighted point of the SRB′ measure: `w = G(y)`, weight ∝ `1/G(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SrbPrimePoint<const D: usize> {
    #[serde(serialize_with = "ser_vec")]
    pub y: Vector<D>,
    pub w: f64,
    pub weight: f64,
}

fn ser_vec<S: serde::Serializer, const D: usize>(v: &Vector<D>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// `M` points spaced `stride` apart along one long orbit after `s_burn`
/// (at least the tail cutoff), with `w_i = G(y_i)` and normalized weights
/// `∝ 1/w_i`.
pub fn srb_prime_ensemble<const D: usize>(
    field: &HomogeneousField<D>,
    y0: &UnitVec<D>,
    m: usize,
    stride: f64,
    s_burn: f64,
    cfg: &GsyncConfig,
) -> Result<Vec<SrbPrimePoint<D>>> {
    if m == 0 || !(stride > 0.0) {
        return Err(FlowError::Domain(format!("need M >= 1 and stride > 0, got {m}, {stride}")));
    }
    let mut orbit = GraphOrbit::new(field, y0, cfg)?;
    let burn = ((s_burn / cfg.dt).round() as usize).max(orbit.warmup_steps());
    let gap = ((stride / cfg.dt).round() as usize).max(1);
    orbit.advance(burn)?;
    let mut pts = Vec::with_capacity(m);
    for i in 0..m {
        if i > 0 {
            orbit.advance(gap)?;
        }
        let w = orbit.value().expect("warm")?;
        pts.push(SrbPrimePoint { y: *orbit.y(), w, weight: 1.0 / w });
    }
    let total: f64 = pts.iter().map(|p| p.weight).sum();
    for p in &mut pts {
        p.weight /= total;
    }
    Ok(pts)
}

/// `R_{t-t_b}(y, w) = ((t - t_b)/w)^{1/(1-α)} y`.
#[inline]
pub fn push_forward<const D: usize>(y: &Vector<D>, w: f64, dt: f64, alpha: f64) -> Vector<D> {
    y * (dt / w).powf(1.0 / (1.0 - alpha))
}

/// Pushforward of the SRB′ points to time `t > t_b`.
pub fn predict_post_blowup<const D: usize>(
    points: &[SrbPrimePoint<D>],
    t: f64,
    t_b: f64,
    alpha: f64,
) -> Result<crate::ensemble::SampleSet<D>> {
    if !(t > t_b) {
        return Err(FlowError::Domain(format!("need t > t_b, got {t} <= {t_b}")));
    }
    let dt = t - t_b;
    let pts = points.iter().map(|p| push_forward(&p.y, p.w, dt, alpha)).collect();
    let weights = points.iter().map(|p| p.weight).collect();
    crate::ensemble::SampleSet::weighted(t, pts, weights, (0..points.len()).collect())
}

/// Tuning for [`blowup_time`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowupOptions {
    /// First stop radius relative to `|x0|`.
    pub stop_ratio: f64,
    /// Accept the tail model once `|F_s(y)|` is below this.
    pub tangent_tolerance: f64,
    pub max_extensions: u32,
    pub t_max: f64,
}

impl Default for BlowupOptions {
    fn default() -> Self {
        Self {
            stop_ratio: 1e-8,
            tangent_tolerance: 1e-3,
            max_extensions: 3,
            t_max: 100.0,
        }
    }
}

/// Blowup time: integrate to a small stop radius, then add the remaining
/// time `r^{1-α} / ((1-α) |F_r(y)|)` of the radial decay at the reached
/// direction.
pub fn blowup_time<const D: usize>(field: &HomogeneousField<D>, x0: &Vector<D>, policy: &StepPolicy) -> Result<f64> {
    blowup_time_with(field, x0, policy, &BlowupOptions::default())
}

pub fn blowup_time_with<const D: usize>(
    field: &HomogeneousField<D>,
    x0: &Vector<D>,
    policy: &StepPolicy,
    opts: &BlowupOptions,
) -> Result<f64> {
    policy.validate()?;
    let r0 = x0.norm();
    if !(r0 > 0.0) || !r0.is_finite() {
        return Err(FlowError::Singularity);
    }
    let alpha = field.alpha();
    let rhs = |x: &Vector<D>| field.rhs_unchecked(x);
    let step_len = |x: &Vector<D>| policy.step_for(x.norm(), alpha);
    let (mut t, mut x) = (0.0, *x0);
    let mut r_stop = opts.stop_ratio * r0;
    let escape = 1e3 * r0;
    for ext in 0..=opts.max_extensions {
        let mut escaped = false;
        let hit = march(&rhs, &step_len, &mut t, &mut x, opts.t_max, policy.dt_min, |_, _, _, x1| {
            let r = x1.norm();
            escaped = r > escape;
            escaped || r <= r_stop
        })?;
        if !hit || escaped {
            return Err(FlowError::NotFocusing);
        }
        let r = x.norm();
        let y = x / r;
        let (fs, fr) = field.components(&y);
        if fr < 0.0 && (fs.norm() < opts.tangent_tolerance || ext == opts.max_extensions) {
            return Ok(t + r.powf(1.0 - alpha) / ((1.0 - alpha) * -fr));
        }
        r_stop *= 1e-2;
    }
    Err(FlowError::NotFocusing)
}
