//! Monte Carlo ensembles of regularized trajectories, empirical densities
//! and distances between them.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::fields::{HomogeneousField, UnitVec, Vector};
use crate::integrate::StepPolicy;
use crate::regularize::{
    continue_from_escape, direct_prefix, escape_via_flow, find_entry, integrate_direct, sample_escape,
    EntryEvent, EscapeSampler, RegularizationMode, RegularizationSpec,
};
use crate::rng::{stream, Purpose};

/// Empirical measure at time `t`. `indices` are the trajectory indices the
/// points came from (failed trajectories are absent).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<const D: usize> {
    pub t: f64,
    pub points: Vec<Vector<D>>,
    pub weights: Option<Vec<f64>>,
    pub indices: Vec<usize>,
}

impl<const D: usize> SampleSet<D> {
    pub fn uniform(t: f64, points: Vec<Vector<D>>, indices: Vec<usize>) -> Self {
        Self {
            t,
            points,
            weights: None,
            indices,
        }
    }

    /// Weighted set; weights are normalized to sum to 1.
    pub fn weighted(t: f64, points: Vec<Vector<D>>, weights: Vec<f64>, indices: Vec<usize>) -> Result<Self> {
        if weights.len() != points.len() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(FlowError::Domain("weights must be finite, nonnegative and one per point".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(FlowError::Domain("weights sum to zero".into()));
        }
        Ok(Self {
            t,
            points,
            weights: Some(weights.iter().map(|w| w / total).collect()),
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weight(&self, k: usize) -> f64 {
        match &self.weights {
            Some(w) => w[k],
            None => 1.0 / self.points.len() as f64,
        }
    }
}

/// Ensemble output: one sample set per target time plus the excluded indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun<const D: usize> {
    pub sets: Vec<SampleSet<D>>,
    pub failures: Vec<(usize, FlowError)>,
    pub n: usize,
}

impl<const D: usize> EnsembleRun<D> {
    pub fn exclusion_rate(&self) -> f64 {
        self.failures.len() as f64 / self.n as f64
    }
}

/// Shared setup for one ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub policy: StepPolicy,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Horizon for locating the entry point in the map modes.
    pub t_max: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            policy: StepPolicy::default(),
            workers: None,
            t_max: 100.0,
        }
    }
}

enum Plan<const D: usize> {
    Direct { start: (f64, Vector<D>) },
    Deterministic { entry: EntryEvent<D> },
    Stochastic { entry: EntryEvent<D>, sampler: EscapeSampler<D> },
}

fn one_trajectory<const D: usize>(
    field: &HomogeneousField<D>,
    spec: &RegularizationSpec,
    plan: &Plan<D>,
    targets: &[f64],
    policy: &StepPolicy,
    index: usize,
) -> Result<Vec<Vector<D>>> {
    let nu = spec.nu;
    let continued = |esc| -> Result<Vec<Vector<D>>> {
        let states = continue_from_escape(field, &esc, targets, policy, nu)?;
        if states.iter().any(|c| c.reentered) {
            return Err(FlowError::Domain(format!("trajectory re-entered |x| < {nu:e} after escape")));
        }
        Ok(states.into_iter().map(|c| c.x).collect())
    };
    match plan {
        Plan::Direct { start } => {
            let inner = spec.inner_field(field, index as u64, &start.1)?;
            integrate_direct(field, &inner, nu, *start, targets, policy)
        }
        Plan::Deterministic { entry } => {
            let inner = spec.inner_field(field, index as u64, &entry.x_ent)?;
            continued(escape_via_flow(field, &inner, entry, nu, spec.delay, policy)?)
        }
        Plan::Stochastic { entry, sampler } => {
            continued(sample_escape(spec, sampler, field.alpha(), entry, index as u64)?)
        }
    }
}

/// Runs `n` regularized trajectories from `x0` and collects their states at
/// each target time. Direct mode integrates with the inner field of each
/// index (see [`RegularizationSpec::inner_field`]); the map modes locate the
/// entry point once and then escape per index. Trajectories that fail are excluded;
/// the run fails when more than 1% do. Output depends only on the inputs,
/// not on the number of workers.
pub fn run_ensemble<const D: usize>(
    field: &HomogeneousField<D>,
    spec: &RegularizationSpec,
    x0: &Vector<D>,
    n: usize,
    t_targets: &[f64],
    opts: &EnsembleOptions,
) -> Result<EnsembleRun<D>> {
    spec.validate()?;
    opts.policy.validate()?;
    if n == 0 || t_targets.is_empty() {
        return Err(FlowError::Domain("need N >= 1 and at least one target time".into()));
    }
    if t_targets.windows(2).any(|w| w[1] < w[0]) {
        return Err(FlowError::Domain("target times must be ascending".into()));
    }
    let policy = &opts.policy;
    let plan = match spec.mode {
        RegularizationMode::Direct => Plan::Direct {
            start: direct_prefix(field, spec.nu, x0, t_targets[0], policy)?,
        },
        RegularizationMode::MapDeterministic => Plan::Deterministic {
            entry: find_entry(field, x0, spec.nu, policy, opts.t_max)?,
        },
        RegularizationMode::MapStochastic => Plan::Stochastic {
            entry: find_entry(field, x0, spec.nu, policy, opts.t_max)?,
            sampler: EscapeSampler::from_spec(&spec.sampler)?,
        },
    };
    if let Plan::Deterministic { entry, .. } | Plan::Stochastic { entry, .. } = &plan {
        if t_targets[0] < entry.t_ent {
            return Err(FlowError::Domain(format!(
                "target {} precedes the entry time {}",
                t_targets[0], entry.t_ent
            )));
        }
    }
    let work = || -> Vec<Result<Vec<Vector<D>>>> {
        (0..n)
            .into_par_iter()
            .map(|i| one_trajectory(field, spec, &plan, t_targets, policy, i))
            .collect()
    };
    let results = match opts.workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| FlowError::Domain(e.to_string()))?
            .install(work),
        None => work(),
    };
    let mut sets: Vec<SampleSet<D>> = t_targets
        .iter()
        .map(|&t| SampleSet::uniform(t, Vec::with_capacity(n), Vec::with_capacity(n)))
        .collect();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(states) => {
                for (set, x) in sets.iter_mut().zip(states) {
                    set.points.push(x);
                    set.indices.push(i);
                }
            }
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.len() * 100 > n {
        return Err(FlowError::EnsembleFailure {
            failed: failures.len(),
            total: n,
            first: failures[0].1.to_string(),
        });
    }
    Ok(EnsembleRun { sets, failures, n })
}

/// Normalized 2-D histogram; `mass[i * ny + j]` is cell `i` along the first
/// axis and `j` along the second.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram2D {
    pub bounds: [f64; 4],
    pub nx: usize,
    pub ny: usize,
    pub mass: Vec<f64>,
    /// Fraction of the total weight that fell outside the bounds.
    pub out_of_bounds: f64,
}

/// `(xmin, xmax, ymin, ymax)` plus cell counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub bounds: [f64; 4],
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(bounds: [f64; 4], nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || !(bounds[1] > bounds[0]) || !(bounds[3] > bounds[2]) {
            return Err(FlowError::Domain(format!("bad grid {bounds:?}, {nx}x{ny}")));
        }
        Ok(Self { bounds, nx, ny })
    }

    /// Flat cell index of `(a, b)`, `None` outside; the upper edges are inclusive.
    #[inline]
    pub fn cell(&self, a: f64, b: f64) -> Option<usize> {
        let [x0, x1, y0, y1] = self.bounds;
        if !(a >= x0 && a <= x1 && b >= y0 && b <= y1) {
            return None;
        }
        let i = (((a - x0) / (x1 - x0) * self.nx as f64) as usize).min(self.nx - 1);
        let j = (((b - y0) / (y1 - y0) * self.ny as f64) as usize).min(self.ny - 1);
        Some(i * self.ny + j)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Histogram from pre-binned cells and their weights.
    pub fn histogram<I>(&self, binned: I) -> Result<Histogram2D>
    where
        I: IntoIterator<Item = (Option<usize>, f64)>,
    {
        let mut mass = vec![0.0; self.cells()];
        let (mut inside, mut outside) = (0.0, 0.0);
        for (cell, w) in binned {
            match cell {
                Some(c) => {
                    mass[c] += w;
                    inside += w;
                }
                None => outside += w,
            }
        }
        if !(inside > 0.0) {
            return Err(FlowError::EmptyHistogram);
        }
        for m in &mut mass {
            *m /= inside;
        }
        Ok(Histogram2D {
            bounds: self.bounds,
            nx: self.nx,
            ny: self.ny,
            mass,
            out_of_bounds: outside / (inside + outside),
        })
    }

    /// Histogram of weighted planar points.
    pub fn histogram_pairs<I>(&self, pairs: I) -> Result<Histogram2D>
    where
        I: IntoIterator<Item = (f64, f64, f64)>,
    {
        self.histogram(pairs.into_iter().map(|(a, b, w)| (self.cell(a, b), w)))
    }
}

impl Histogram2D {
    pub fn grid(&self) -> Grid {
        Grid {
            bounds: self.bounds,
            nx: self.nx,
            ny: self.ny,
        }
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }
}

fn check_dims<const D: usize>(dims: (usize, usize)) -> Result<()> {
    if dims.0 >= D || dims.1 >= D {
        return Err(FlowError::Domain(format!("projection dims {dims:?} out of range for dimension {D}")));
    }
    Ok(())
}

/// Weighted histogram of the `(dims.0, dims.1)` projection.
pub fn histogram2d<const D: usize>(s: &SampleSet<D>, dims: (usize, usize), grid: &Grid) -> Result<Histogram2D> {
    check_dims::<D>(dims)?;
    grid.histogram_pairs(s.points.iter().enumerate().map(|(k, x)| (x[dims.0], x[dims.1], s.weight(k))))
}

/// `Σ |h1 - h2|` over cells, in `[0, 2]`.
pub fn l1_distance(h1: &Histogram2D, h2: &Histogram2D) -> Result<f64> {
    if h1.grid() != h2.grid() {
        return Err(FlowError::GridMismatch);
    }
    Ok(h1.mass.iter().zip(&h2.mass).map(|(a, b)| (a - b).abs()).sum())
}

/// Mean L1 distance between histograms of `b` pairs of bootstrap resamples
/// of already binned points. Resampling is uniform over points; weights are
/// carried along.
pub fn bootstrap_binned(binned: &[(Option<usize>, f64)], grid: &Grid, b: usize, seed: u64) -> Result<f64> {
    if b < 10 {
        return Err(FlowError::Domain(format!("need at least 10 bootstrap pairs, got {b}")));
    }
    let n = binned.len();
    if n == 0 {
        return Err(FlowError::EmptyHistogram);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for pair in 0..b {
        let mut rng = stream(seed, Purpose::Bootstrap, pair as u64);
        let mut draw = || grid.histogram((0..n).map(|_| binned[rng.gen_range(0..n)]));
        match (draw(), draw()) {
            (Ok(h1), Ok(h2)) => {
                total += l1_distance(&h1, &h2)?;
                counted += 1;
            }
            (Err(FlowError::EmptyHistogram), _) | (_, Err(FlowError::EmptyHistogram)) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(FlowError::EmptyHistogram);
    }
    Ok(total / counted as f64)
}

/// Bootstrap noise floor of the histogram of `s`.
pub fn bootstrap_self_distance<const D: usize>(
    s: &SampleSet<D>,
    dims: (usize, usize),
    grid: &Grid,
    b: usize,
    seed: u64,
) -> Result<f64> {
    check_dims::<D>(dims)?;
    let binned: Vec<(Option<usize>, f64)> = s
        .points
        .iter()
        .enumerate()
        .map(|(k, x)| (grid.cell(x[dims.0], x[dims.1]), s.weight(k)))
        .collect();
    bootstrap_binned(&binned, grid, b, seed)
}

/// Floor for comparing two independent estimates: `sqrt((f1² + f2²)/2)`.
pub fn combined_floor(f1: f64, f2: f64) -> f64 {
    ((f1 * f1 + f2 * f2) / 2.0).sqrt()
}

/// `(y, w) = (x/|x|, (t - t_b) |x|^{α-1})` for every point.
pub fn pullback_samples<const D: usize>(s: &SampleSet<D>, t_b: f64, alpha: f64) -> Result<Vec<(UnitVec<D>, f64)>> {
    if !(s.t > t_b) {
        return Err(FlowError::Domain(format!("need t > t_b, got {} <= {t_b}", s.t)));
    }
    let dt = s.t - t_b;
    s.points
        .iter()
        .map(|x| {
            let r = x.norm();
            if !(r > 0.0) {
                return Err(FlowError::SingularSample);
            }
            Ok((UnitVec::new(*x)?, dt * r.powf(alpha - 1.0)))
        })
        .collect()
}

/// Identification written at the top of every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactHeader {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct PointRecord<'a> {
    index: usize,
    t: f64,
    x: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

/// NDJSON: a header record, then `{index, t, x}` per point.
pub fn write_ndjson<W: Write, const D: usize>(out: &mut W, header: &ArtifactHeader, sets: &[SampleSet<D>]) -> io::Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    writeln!(out)?;
    for s in sets {
        for (k, x) in s.points.iter().enumerate() {
            let rec = PointRecord {
                index: s.indices.get(k).copied().unwrap_or(k),
                t: s.t,
                x: x.as_slice(),
                weight: s.weights.as_ref().map(|w| w[k]),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// CSV: a comment line with hash and seed, a bounds/grid row, then `i,j,mass`.
pub fn write_histogram_csv<W: Write>(out: &mut W, header: &ArtifactHeader, h: &Histogram2D) -> io::Result<()> {
    writeln!(out, "# config_hash={} seed={}", header.config_hash, header.seed)?;
    let [x0, x1, y0, y1] = h.bounds;
    writeln!(
        out,
        "# xmin={x0},xmax={x1},ymin={y0},ymax={y1},nx={},ny={},out_of_bounds={}",
        h.nx, h.ny, h.out_of_bounds
    )?;
    writeln!(out, "i,j,mass")?;
    for i in 0..h.nx {
        for j in 0..h.ny {
            writeln!(out, "{i},{j},{}", h.mass[i * h.ny + j])?;
        }
    }
    Ok(())
}

const PGM_FLOOR: f64 = 1e-12;

/// ASCII PGM with gray level linear in `log(mass + 1e-12)`; denser cells
/// are darker, the second axis points up.
pub fn write_pgm<W: Write>(out: &mut W, header: &ArtifactHeader, h: &Histogram2D) -> io::Result<()> {
    writeln!(out, "P2")?;
    writeln!(out, "# config_hash={} seed={}", header.config_hash, header.seed)?;
    writeln!(out, "{} {}", h.nx, h.ny)?;
    writeln!(out, "255")?;
    let lo = PGM_FLOOR.ln();
    let hi = (h.mass.iter().cloned().fold(0.0, f64::max) + PGM_FLOOR).ln();
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for j in (0..h.ny).rev() {
        let row: Vec<String> = (0..h.nx)
            .map(|i| {
                let l = (h.mass[i * h.ny + j] + PGM_FLOOR).ln();
                let level = 255.0 * (1.0 - (l - lo) / span);
                (level.round().clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
