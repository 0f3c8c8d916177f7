//! The named experiments behind the `singflow` binary.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::analysis::{
    blowup_time, predict_post_blowup, radial_bounds, srb_prime_ensemble, trapping_bounds, GsyncConfig,
};
use crate::ensemble::{
    bootstrap_binned, bootstrap_self_distance, combined_floor, histogram2d, l1_distance, pullback_samples,
    run_ensemble, write_histogram_csv, write_ndjson, write_pgm, ArtifactHeader, EnsembleOptions, EnsembleRun,
    Histogram2D, SampleSet,
};
use crate::error::FlowError;
use crate::fields::{lorenz4d_example, planar_example, stereo_forward, with_bump, HomogeneousField, UnitVec, Vector};
use crate::regularize::{
    default_offset, direct_prefix, direct_trajectory, draw_h0, find_entry, RegularizationMode, RegularizationSpec,
};

use super::config::{ConfigError, ExperimentConfig, FieldName};
use super::report::{Metric, Report};

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Flow(FlowError),
    Io(io::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Flow(e) => write!(f, "run failed: {e}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<FlowError> for RunError {
    fn from(e: FlowError) -> Self {
        RunError::Flow(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

type Run<T> = std::result::Result<T, RunError>;

/// Runs `cfg.experiment`, writes its artifacts and report into `out_dir`,
/// and returns the report.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Run<Report> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let report = match cfg.field.name {
        FieldName::Planar => {
            let chart = |y: &UnitVec<2>, c: usize| Ok(y.as_vector()[c]);
            Runner::new(cfg, planar_example(), out_dir, &chart)?.run()?
        }
        FieldName::Lorenz4d => {
            let p = cfg.lorenz_params();
            let chart = move |y: &UnitVec<4>, c: usize| Ok(stereo_forward(y, &p)?[c]);
            Runner::new(cfg, lorenz4d_example(p), out_dir, &chart)?.run()?
        }
    };
    super::report::write_report(&report, out_dir)?;
    Ok(report)
}

type Chart<'a, const D: usize> = &'a dyn Fn(&UnitVec<D>, usize) -> crate::Result<f64>;

struct Runner<'a, const D: usize> {
    cfg: &'a ExperimentConfig,
    field: HomogeneousField<D>,
    x0: Vector<D>,
    out: PathBuf,
    header: ArtifactHeader,
    chart: Chart<'a, D>,
    metrics: Vec<Metric>,
    artifacts: Vec<String>,
    notes: Vec<String>,
}

/// `d / floor`, with identical histograms and a zero floor giving 0.
fn floor_ratio(d: f64, floor: f64) -> f64 {
    if floor > 0.0 {
        d / floor
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn tag(t: f64) -> String {
    format!("t{t}")
}

impl<'a, const D: usize> Runner<'a, D> {
    fn new(cfg: &'a ExperimentConfig, field: HomogeneousField<D>, out: &Path, chart: Chart<'a, D>) -> Run<Self> {
        Ok(Self {
            cfg,
            field,
            x0: Vector::<D>::from_column_slice(&cfg.x0),
            out: out.to_path_buf(),
            header: ArtifactHeader {
                config_hash: cfg.hash(),
                seed: cfg.seed,
            },
            chart,
            metrics: Vec::new(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        })
    }

    fn run(mut self) -> Run<Report> {
        match self.cfg.experiment.as_str() {
            "blowup" => self.blowup()?,
            "trajectories" => self.trajectories()?,
            "density" => self.density()?,
            "nu-convergence" => self.nu_convergence()?,
            "sampler-independence" => self.sampler_independence()?,
            "srb-predict" => self.srb_predict()?,
            "self-similarity" => self.self_similarity()?,
            "perturbation" => self.perturbation()?,
            "det-sensitivity" => self.det_sensitivity()?,
            other => unreachable!("validated experiment name {other}"),
        }
        Ok(Report::new(
            &self.cfg.experiment,
            self.field.name(),
            &self.header.config_hash,
            self.cfg.seed,
            self.metrics,
            self.artifacts,
            self.notes,
        ))
    }

    fn file<F>(&mut self, name: &str, body: F) -> Run<()>
    where
        F: FnOnce(&mut BufWriter<File>, &ArtifactHeader) -> io::Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.out.join(name))?);
        body(&mut w, &self.header)?;
        w.flush()?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn options(&self) -> EnsembleOptions {
        let e = &self.cfg.ensemble;
        EnsembleOptions {
            policy: e.policy,
            workers: e.workers,
            t_max: e.t_max,
        }
    }

    fn ensemble(&mut self, label: &str, field: &HomogeneousField<D>, spec: &RegularizationSpec) -> Run<EnsembleRun<D>> {
        let e = &self.cfg.ensemble;
        let run = run_ensemble(field, spec, &self.x0, e.n, &e.t_targets, &self.options())?;
        self.metrics.push(Metric::info(format!("exclusion_rate_{label}"), run.exclusion_rate()));
        Ok(run)
    }

    fn histogram(&self, set: &SampleSet<D>, target: usize) -> Run<Histogram2D> {
        let grid = self.cfg.ensemble.grid_for(target).grid().map_err(|m| ConfigError {
            path: "ensemble.grid".into(),
            message: m,
        })?;
        Ok(histogram2d(set, (self.cfg.ensemble.dims[0], self.cfg.ensemble.dims[1]), &grid)?)
    }

    fn floor(&self, set: &SampleSet<D>, target: usize, salt: u64) -> Run<f64> {
        let grid = self.cfg.ensemble.grid_for(target).grid().expect("validated grid");
        let dims = (self.cfg.ensemble.dims[0], self.cfg.ensemble.dims[1]);
        Ok(bootstrap_self_distance(set, dims, &grid, self.cfg.ensemble.bootstrap, self.cfg.seed ^ salt)?)
    }

    /// Densities of one ensemble: samples as NDJSON, one CSV and PGM per target.
    fn write_run(&mut self, label: &str, sets: &[SampleSet<D>]) -> Run<Vec<Histogram2D>> {
        self.file(&format!("samples_{label}.ndjson"), |w, h| write_ndjson(w, h, sets))?;
        let mut hists = Vec::with_capacity(sets.len());
        for (k, set) in sets.iter().enumerate() {
            let h = self.histogram(set, k)?;
            let stem = format!("density_{label}_{}", tag(set.t));
            self.file(&format!("{stem}.csv"), |w, hd| write_histogram_csv(w, hd, &h))?;
            self.file(&format!("{stem}.pgm"), |w, hd| write_pgm(w, hd, &h))?;
            hists.push(h);
        }
        Ok(hists)
    }

    /// L1 distance in units of the combined bootstrap floor.
    fn compare(&mut self, name: &str, a: &SampleSet<D>, b: &SampleSet<D>, target: usize, factor: Option<f64>) -> Run<f64> {
        let d = l1_distance(&self.histogram(a, target)?, &self.histogram(b, target)?)?;
        let floor = combined_floor(self.floor(a, target, 0x5a)?, self.floor(b, target, 0xa5)?);
        let ratio = floor_ratio(d, floor);
        self.metrics.push(Metric::info(format!("l1_{name}"), d));
        self.metrics.push(Metric::info(format!("floor_{name}"), floor));
        self.metrics.push(match factor {
            Some(f) => Metric::at_most(format!("ratio_{name}"), ratio, f),
            None => Metric::info(format!("ratio_{name}"), ratio),
        });
        Ok(ratio)
    }

    fn blowup(&mut self) -> Run<()> {
        let t_b = blowup_time(&self.field, &self.x0, &self.cfg.ensemble.policy)?;
        self.metrics.push(match self.cfg.checks.t_b_range {
            Some([lo, hi]) => Metric::within("t_b", t_b, lo, hi),
            None => Metric::info("t_b", t_b),
        });
        let nu = self.cfg.regularization.nu;
        let entry = find_entry(&self.field, &self.x0, nu, &self.cfg.ensemble.policy, self.cfg.ensemble.t_max)?;
        self.metrics.push(Metric::info("t_ent", entry.t_ent));
        Ok(())
    }

    fn trajectories(&mut self) -> Run<()> {
        let cfg = self.cfg;
        if cfg.regularization.mode != RegularizationMode::Direct {
            self.notes.push("realizations are integrated in direct mode".into());
        }
        let spec = &cfg.regularization;
        let t_end = cfg.trajectories.t_end.unwrap_or(*cfg.ensemble.t_targets.last().expect("nonempty"));
        let policy = cfg.ensemble.policy;
        let (t_split, start) = direct_prefix(&self.field, spec.nu, &self.x0, t_end, &policy)?;
        let n_samples = (t_end / cfg.trajectories.sample_dt).floor() as usize;
        let times: Vec<f64> = (0..=n_samples).map(|k| k as f64 * cfg.trajectories.sample_dt).collect();
        let mut sets: Vec<SampleSet<D>> = times.iter().map(|&t| SampleSet::uniform(t, Vec::new(), Vec::new())).collect();
        for i in 0..cfg.trajectories.count {
            let inner = spec.inner_field(&self.field, i as u64, &start)?;
            let traj = direct_trajectory(&self.field, &inner, spec.nu, &self.x0, t_end, &policy)?;
            for set in sets.iter_mut() {
                set.points.push(traj.state_at(set.t).expect("sample time inside the run"));
                set.indices.push(i);
            }
        }
        let spread = |set: &SampleSet<D>| set.points.iter().map(|p| (p - set.points[0]).norm()).fold(0.0, f64::max);
        let before = sets.iter().filter(|s| s.t < t_split).map(spread).fold(0.0, f64::max);
        let after = sets.last().map(spread).unwrap_or(0.0);
        self.metrics.push(Metric::info("t_split", t_split));
        self.metrics.push(Metric::at_most("spread_before_split", before, 0.0));
        self.metrics.push(Metric::info("spread_at_end", after));
        self.file("trajectories.ndjson", |w, h| write_ndjson(w, h, &sets))
    }

    fn density(&mut self) -> Run<()> {
        let field = self.field.clone();
        let run = self.ensemble("main", &field, &self.cfg.regularization.clone())?;
        let hists = self.write_run("main", &run.sets)?;
        for (set, h) in run.sets.iter().zip(&hists) {
            self.metrics.push(Metric::at_most(format!("mass_error_{}", tag(set.t)), (h.total() - 1.0).abs(), 1e-12));
            self.metrics.push(Metric::info(format!("out_of_bounds_{}", tag(set.t)), h.out_of_bounds));
        }
        Ok(())
    }

    fn nu_convergence(&mut self) -> Run<()> {
        let field = self.field.clone();
        let nus = self.cfg.ladder.nus.clone();
        let mut runs = Vec::with_capacity(nus.len());
        for (i, nu) in nus.iter().enumerate() {
            let spec = RegularizationSpec {
                nu: *nu,
                ..self.cfg.regularization.clone()
            };
            let label = format!("nu{i}");
            let run = self.ensemble(&label, &field, &spec)?;
            self.write_run(&label, &run.sets)?;
            runs.push(run);
        }
        let factor = self.cfg.checks.l1_factor;
        for i in 1..runs.len() {
            for k in 0..self.cfg.ensemble.t_targets.len() {
                let name = format!("nu{:e}_vs_nu{:e}_{}", nus[i - 1], nus[i], tag(runs[i].sets[k].t));
                self.compare(&name, &runs[i - 1].sets[k], &runs[i].sets[k], k, Some(factor))?;
            }
        }
        Ok(())
    }

    fn sampler_independence(&mut self) -> Run<()> {
        let field = self.field.clone();
        let mut first = self.cfg.regularization.clone();
        if first.mode != RegularizationMode::MapStochastic {
            self.notes.push("mode set to map_stochastic for both ensembles".into());
            first.mode = RegularizationMode::MapStochastic;
        }
        let second = RegularizationSpec {
            sampler: self.cfg.comparison_sampler(),
            seed: first.seed.wrapping_add(1),
            ..first.clone()
        };
        let a = self.ensemble("primary", &field, &first)?;
        let b = self.ensemble("comparison", &field, &second)?;
        self.write_run("primary", &a.sets)?;
        self.write_run("comparison", &b.sets)?;
        for k in 0..a.sets.len() {
            let name = format!("samplers_{}", tag(a.sets[k].t));
            self.compare(&name, &a.sets[k], &b.sets[k], k, Some(self.cfg.checks.l1_factor))?;
        }
        Ok(())
    }

    fn srb_predict(&mut self) -> Run<()> {
        let field = self.field.clone();
        let cfg = self.cfg;
        let a = &cfg.analysis;
        let run = self.ensemble("main", &field, &cfg.regularization)?;
        self.write_run("main", &run.sets)?;
        let t_b = blowup_time(&field, &self.x0, &cfg.ensemble.policy)?;
        self.metrics.push(Metric::info("t_b", t_b));
        let y0 = match &a.y0 {
            Some(v) => UnitVec::<D>::from_slice(v)?,
            None => {
                let last = run.sets.last().expect("nonempty");
                UnitVec::new(*last.points.first().ok_or(FlowError::EmptyHistogram)?)?
            }
        };
        let (lo, hi) = radial_bounds(&field, &y0, a.s_burn, a.s_total, a.dt, a.margin)?;
        let f_m = a.f_m.unwrap_or(lo);
        let (w_m, w_big) = trapping_bounds(f_m, hi, field.alpha())?;
        for (name, v) in [("f_m", f_m), ("f_M", hi), ("w_m", w_m), ("w_M", w_big)] {
            self.metrics.push(Metric::info(name, v));
        }
        let gcfg = GsyncConfig {
            tail_cutoff: None,
            dt: a.dt,
            f_m,
            tolerance: a.tolerance,
        };
        let points = srb_prime_ensemble(&field, &y0, a.m, a.stride, a.s_burn, &gcfg)?;
        let outside = points.iter().filter(|p| !(p.w >= w_m && p.w <= w_big)).count();
        self.metrics.push(Metric::at_most("graph_outside_trapping", outside as f64, 0.0));
        self.file("srb_prime.ndjson", |w, h| {
            serde_json::to_writer(&mut *w, h)?;
            writeln!(w)?;
            for p in &points {
                serde_json::to_writer(&mut *w, p)?;
                writeln!(w)?;
            }
            Ok(())
        })?;
        let mut predicted = Vec::with_capacity(run.sets.len());
        for set in &run.sets {
            predicted.push(predict_post_blowup(&points, set.t, t_b, field.alpha())?);
        }
        for (k, (p, set)) in predicted.iter().zip(&run.sets).enumerate() {
            let h = self.histogram(p, k)?;
            let stem = format!("density_predicted_{}", tag(p.t));
            self.file(&format!("{stem}.csv"), |w, hd| write_histogram_csv(w, hd, &h))?;
            self.file(&format!("{stem}.pgm"), |w, hd| write_pgm(w, hd, &h))?;
            let name = format!("predicted_vs_ensemble_{}", tag(p.t));
            self.compare(&name, p, set, k, Some(cfg.checks.predict_factor))?;
        }
        Ok(())
    }

    fn self_similarity(&mut self) -> Run<()> {
        let field = self.field.clone();
        let cfg = self.cfg;
        let run = self.ensemble("main", &field, &cfg.regularization)?;
        let t_b = blowup_time(&field, &self.x0, &cfg.ensemble.policy)?;
        self.metrics.push(Metric::info("t_b", t_b));
        let grid = cfg.pullback.grid.grid().expect("validated grid");
        let coord = cfg.pullback.coordinate;
        let chart = self.chart;
        let bin = |set: &SampleSet<D>| -> Run<Vec<(Option<usize>, f64)>> {
            pullback_samples(set, t_b, field.alpha())?
                .into_iter()
                .enumerate()
                .map(|(k, (y, w))| Ok((grid.cell(w, chart(&y, coord)?), set.weight(k))))
                .collect()
        };
        let first = &run.sets[0];
        let last = run.sets.last().expect("two targets");
        let (a, b) = (bin(first)?, bin(last)?);
        let (ha, hb) = (grid.histogram(a.iter().copied())?, grid.histogram(b.iter().copied())?);
        let d = l1_distance(&ha, &hb)?;
        let floor = combined_floor(
            bootstrap_binned(&a, &grid, cfg.ensemble.bootstrap, cfg.seed ^ 0x5a)?,
            bootstrap_binned(&b, &grid, cfg.ensemble.bootstrap, cfg.seed ^ 0xa5)?,
        );
        for (h, t) in [(&ha, first.t), (&hb, last.t)] {
            let stem = format!("pullback_{}", tag(t));
            self.file(&format!("{stem}.csv"), |w, hd| write_histogram_csv(w, hd, h))?;
            self.file(&format!("{stem}.pgm"), |w, hd| write_pgm(w, hd, h))?;
        }
        let name = format!("{}_vs_{}", tag(first.t), tag(last.t));
        self.metrics.push(Metric::info(format!("l1_pullback_{name}"), d));
        self.metrics.push(Metric::info(format!("floor_pullback_{name}"), floor));
        self.metrics.push(Metric::at_most(format!("ratio_pullback_{name}"), floor_ratio(d, floor), cfg.checks.l1_factor));
        Ok(())
    }

    fn perturbation(&mut self) -> Run<()> {
        let cfg = self.cfg;
        let bump = cfg.perturbation.as_ref().expect("validated perturbation");
        let field = self.field.clone();
        let bumped = with_bump(&field, bump)?;
        let base = self.ensemble("base", &field, &cfg.regularization)?;
        let pert = self.ensemble("perturbed", &bumped, &cfg.regularization)?;
        self.write_run("base", &base.sets)?;
        self.write_run("perturbed", &pert.sets)?;
        for k in 0..base.sets.len() {
            let name = format!("perturbation_{}", tag(base.sets[k].t));
            self.compare(&name, &base.sets[k], &pert.sets[k], k, cfg.checks.perturbation_factor)?;
        }
        Ok(())
    }

    fn det_sensitivity(&mut self) -> Run<()> {
        let cfg = self.cfg;
        let nus = &cfg.ladder.sensitivity;
        let policy = cfg.ensemble.policy;
        let h0 = match &cfg.regularization.h0 {
            Some(v) => v.clone(),
            None => {
                let entry = find_entry(&self.field, &self.x0, nus[0], &policy, cfg.ensemble.t_max)?;
                let offset = match &cfg.regularization.h0_offset {
                    Some(o) => Vector::<D>::from_column_slice(o),
                    None => default_offset(&entry.x_ent),
                };
                draw_h0(cfg.seed, 0, &offset).as_slice().to_vec()
            }
        };
        self.notes.push(format!("fixed H_0 = {h0:?}; a demonstration threshold, not a convergence check"));
        let t = cfg.ensemble.t_targets[0];
        let mut dirs = Vec::with_capacity(nus.len());
        for nu in nus {
            let spec = RegularizationSpec {
                mode: RegularizationMode::Direct,
                nu: *nu,
                h0: Some(h0.clone()),
                ..cfg.regularization.clone()
            };
            let opts = EnsembleOptions {
                workers: Some(1),
                ..self.options()
            };
            let run = run_ensemble(&self.field, &spec, &self.x0, 1, &[t], &opts)?;
            let x = *run.sets[0].points.first().ok_or(FlowError::EmptyHistogram)?;
            dirs.push(UnitVec::new(x)?);
        }
        let mut max_angle = 0.0f64;
        for i in 1..dirs.len() {
            let a = dirs[i - 1].angle_to(&dirs[i]);
            self.metrics.push(Metric::info(format!("angle_nu{:e}_vs_nu{:e}", nus[i - 1], nus[i]), a));
            max_angle = max_angle.max(a);
        }
        self.metrics.push(Metric::at_least("max_angle", max_angle, cfg.checks.sensitivity_angle));
        let set = SampleSet::uniform(t, dirs.iter().map(|d| *d.as_vector()).collect(), (0..dirs.len()).collect());
        self.file("directions.ndjson", |w, h| write_ndjson(w, h, std::slice::from_ref(&set)))
    }
}
