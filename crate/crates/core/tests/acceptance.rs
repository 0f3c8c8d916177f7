//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Lines go straight to stderr so they show under a plain `cargo test`.
//! The test fails if a criterion outside `KNOWN_FAILURES` fails.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singflow::analysis::*;
use singflow::ensemble::*;
use singflow::fields::*;
use singflow::integrate::StepPolicy;
use singflow::regularize::*;

const THIRD: f64 = 1.0 / 3.0;

/// Criteria that fail at the stated tolerance with the analysis recorded
/// alongside the project notes.
const KNOWN_FAILURES: [u32; 2] = [7, 10];

fn say(line: String) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "{line}").unwrap();
}

struct Outcome {
    id: u32,
    pass: bool,
}

struct Suite {
    results: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: u32, title: &str, pass: bool, detail: String, started: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        say(format!(
            "criterion {id:>2} [{tag}] {title}: {detail} ({:.1} s)",
            started.elapsed().as_secs_f64()
        ));
        self.results.push(Outcome { id, pass });
    }
}

fn lorenz() -> (HomogeneousField<4>, Vector<4>, LorenzParams) {
    let p = LorenzParams::default();
    (lorenz4d_example(p), Vector::<4>::new(0.4, 0.1, 0.2, 0.3), p)
}

fn rotating(f0: f64) -> HomogeneousField<2> {
    HomogeneousField::from_components(
        "rotating",
        THIRD,
        |y: &Vector<2>| Vector::<2>::new(-y[1], y[0]),
        move |_: &Vector<2>| f0,
    )
    .unwrap()
}

fn unit2(a: f64, b: f64) -> UnitVec<2> {
    UnitVec::new(Vector::<2>::new(a, b)).unwrap()
}

/// A point on the Lorenz attractor, carried to the sphere.
fn attractor_point(p: &LorenzParams) -> UnitVec<4> {
    stereo_inverse(&Vector::<3>::new(1.0, 1.0, 20.0), p)
}

fn ratio<const D: usize>(a: &SampleSet<D>, b: &SampleSet<D>, dims: (usize, usize), grid: &Grid) -> f64 {
    let d = l1_distance(&histogram2d(a, dims, grid).unwrap(), &histogram2d(b, dims, grid).unwrap()).unwrap();
    let floor = combined_floor(
        bootstrap_self_distance(a, dims, grid, 20, 11).unwrap(),
        bootstrap_self_distance(b, dims, grid, 20, 12).unwrap(),
    );
    d / floor
}

fn stochastic_spec(family: SamplerFamily, seed: u64) -> RegularizationSpec {
    let mut spec = RegularizationSpec::direct(1e-5, seed);
    spec.mode = RegularizationMode::MapStochastic;
    spec.sampler.family = family;
    spec.sampler.cap_center = vec![-1.0, 0.0, 0.0, 0.0];
    spec
}

/// `(w, first stereographic coordinate)` cells of the pullback of `s`.
fn pullback_cells(s: &SampleSet<4>, t_b: f64, p: &LorenzParams, grid: &Grid) -> Vec<(Option<usize>, f64)> {
    pullback_samples(s, t_b, THIRD)
        .unwrap()
        .into_iter()
        .map(|(y, w)| (grid.cell(w, stereo_forward(&y, p).unwrap()[0]), 1.0))
        .collect()
}

fn pullback_ratio(a: &SampleSet<4>, b: &SampleSet<4>, t_b: f64, p: &LorenzParams) -> f64 {
    let grid = Grid::new([1.5, 3.5, -25.0, 25.0], 32, 32).unwrap();
    let (ca, cb) = (pullback_cells(a, t_b, p, &grid), pullback_cells(b, t_b, p, &grid));
    let d = l1_distance(&grid.histogram(ca.clone()).unwrap(), &grid.histogram(cb.clone()).unwrap()).unwrap();
    d / combined_floor(
        bootstrap_binned(&ca, &grid, 20, 11).unwrap(),
        bootstrap_binned(&cb, &grid, 20, 12).unwrap(),
    )
}

#[test]
fn acceptance() {
    let mut suite = Suite { results: Vec::new() };
    let policy = StepPolicy::default();
    let (field, x0, p) = lorenz();
    let n = 10_000;

    // 1
    let started = Instant::now();
    let t_b = blowup_time(&field, &x0, &policy).unwrap();
    let secs = started.elapsed().as_secs_f64();
    suite.record(
        1,
        "lorenz4d blowup time",
        (t_b - 1.046).abs() <= 0.005 && secs < 5.0,
        format!("t_b = {t_b:.7}, target 1.046 +- 0.005, {secs:.3} s < 5 s"),
        started,
    );

    // 2
    let started = Instant::now();
    let tp = blowup_time(&planar_example(), &Vector::<2>::new(-1.0, 0.0), &policy).unwrap();
    let secs = started.elapsed().as_secs_f64();
    suite.record(
        2,
        "planar closed-form blowup",
        (tp - 1.5).abs() <= 1e-6 && secs < 1.0,
        format!("t_b = {tp:.10}, |err| = {:.2e} <= 1e-6, {secs:.3} s < 1 s", (tp - 1.5).abs()),
        started,
    );

    // 3
    let started = Instant::now();
    let rot = rotating(15.0);
    let y0 = unit2(1.0, 0.0);
    let (w0, s_end) = (3.0, 0.3);
    let oracle = explicit_w(&rot, &y0, w0, s_end, 1e-4).unwrap();
    let errs: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
        .iter()
        .map(|&dt| (integrate_master_slave(&rot, &y0, w0, &[s_end], dt).unwrap()[0].1 - oracle).abs())
        .collect();
    let orders = [(errs[0] / errs[1]).log2(), (errs[1] / errs[2]).log2()];
    suite.record(
        3,
        "RK4 order on the master-slave system",
        orders.iter().all(|o| (3.7..=4.3).contains(o)),
        format!(
            "errors {:.3e}, {:.3e}, {:.3e}; observed orders {:.3} and {:.3} in [3.7, 4.3]",
            errs[0], errs[1], errs[2], orders[0], orders[1]
        ),
        started,
    );

    // 4
    let started = Instant::now();
    let inner = InnerField::blend(&field, Vector::<4>::new(-0.8, 0.2, -0.1, 0.3));
    let deviation = |nu: f64| {
        let scale = nu.powf(THIRD - 1.0);
        let a = direct_trajectory(&field, &inner, nu, &x0, 1.6, &policy).unwrap();
        let b = direct_trajectory(&field, &inner, 1.0, &(x0 / nu), 1.6 * scale, &policy.time_scaled(scale)).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        a.states
            .iter()
            .zip(&b.states)
            .map(|(xa, xb)| (xa - xb * nu).norm() / xa.norm())
            .fold(0.0, f64::max)
    };
    let dev4 = deviation(1e-4);
    let (dev5, dev6) = (deviation(1e-5), deviation(1e-6));
    suite.record(
        4,
        "scaling symmetry of the regularized flow",
        dev4 <= 1e-10,
        format!(
            "max relative deviation over t in [0, 1.6] at nu = 1e-4: {dev4:.2e} <= 1e-10 (nu = 1e-5: {dev5:.2e}, nu = 1e-6: {dev6:.2e})"
        ),
        started,
    );

    // 5
    let started = Instant::now();
    let y_att = attractor_point(&p);
    let (f_lo, f_hi) = radial_bounds(&field, &y_att, 100.0, 2e4, 1e-2, 0.1).unwrap();
    let gcfg = GsyncConfig::auto(f_lo, 1e-2);
    let lorenz_errs: Vec<f64> = [0.1, 10.0]
        .iter()
        .map(|&w| sync_error(&field, &y_att, InitialScale::Value(w), &[50.0], &gcfg).unwrap()[0])
        .collect();
    let rot15 = rotating(1.5);
    let grid_s = [0.0, 1.0, 2.0, 5.0, 10.0];
    let const_errs = sync_error(&rot15, &y0, InitialScale::Value(4.0), &grid_s, &GsyncConfig::auto(1.0, 1e-2)).unwrap();
    let const_dev = grid_s
        .iter()
        .zip(&const_errs)
        .map(|(s, e)| (e - 3.0 * (-(2.0 / 3.0) * 1.5 * s).exp()).abs())
        .fold(0.0, f64::max);
    suite.record(
        5,
        "generalized synchronization",
        lorenz_errs.iter().all(|e| *e < 1e-3) && const_dev <= 1e-6,
        format!(
            "lorenz4d |w - G| at s = 50: {:.2e} (w0 = 0.1), {:.2e} (w0 = 10) < 1e-3; constant-F_r decay deviation {const_dev:.2e} <= 1e-6",
            lorenz_errs[0], lorenz_errs[1]
        ),
        started,
    );

    // 6
    let started = Instant::now();
    let g_const = gsync_value(&rot15, &unit2(0.3, 0.7), &GsyncConfig::auto(1.0, 1e-2)).unwrap();
    let planar = planar_example();
    let g_planar = gsync_value(&planar, &unit2(1.0, 0.0), &GsyncConfig::auto(0.9, 1e-2)).unwrap();
    let gcfg_p = GsyncConfig::auto(0.9, 1e-3);
    let th = 0.3f64.atan();
    let at = |t: f64| gsync_value(&planar, &unit2(t.cos(), t.sin()), &gcfg_p).unwrap();
    let h = 1e-4;
    let fd = (at(th + h) - at(th - h)) / (2.0 * h);
    let grad = gsync_gradient(&planar, &unit2(th.cos(), th.sin()), &gcfg_p).unwrap();
    let grad_rel = ((grad.dot(&Vector::<2>::new(-th.sin(), th.cos())) - fd) / fd).abs();
    suite.record(
        6,
        "graph identities and gradient",
        (g_const - 1.0).abs() <= 1e-8 && (g_planar - 1.5).abs() <= 1e-8 && grad_rel < 1e-4,
        format!(
            "constant F_r: |G - 1| = {:.1e}; planar (1,0): |G - 3/2| = {:.1e} (<= 1e-8); gradient vs finite differences {grad_rel:.1e} < 1e-4",
            (g_const - 1.0).abs(),
            (g_planar - 1.5).abs()
        ),
        started,
    );

    // 7
    let started = Instant::now();
    let opts = EnsembleOptions::default();
    let run_a = run_ensemble(&field, &RegularizationSpec::direct(1e-4, 1), &x0, n, &[1.6], &opts).unwrap();
    let run_b = run_ensemble(&field, &RegularizationSpec::direct(1e-6, 2), &x0, n, &[1.6], &opts).unwrap();
    let stated = Grid::new([-4.0, 4.0, -4.0, 4.0], 64, 64).unwrap();
    let fitted = Grid::new([-0.1, 0.1, -0.1, 0.1], 32, 32).unwrap();
    let r7 = ratio(&run_a.sets[0], &run_b.sets[0], (1, 2), &stated);
    let r7_fit = ratio(&run_a.sets[0], &run_b.sets[0], (1, 2), &fitted);
    let run_c = run_ensemble(&field, &RegularizationSpec::direct(1e-5, 6), &x0, n, &[1.6], &opts).unwrap();
    let r7_next = ratio(&run_c.sets[0], &run_b.sets[0], (1, 2), &fitted);
    suite.record(
        7,
        "spontaneous stochasticity, nu = 1e-4 vs 1e-6",
        r7 <= 2.0,
        format!(
            "L1/floor = {r7:.2} <= 2 on [-4,4]^2 64x64; on [-0.1,0.1]^2 32x32: {r7_fit:.2}, nu = 1e-5 vs 1e-6 {r7_next:.2}; exclusions {} and {}",
            run_a.failures.len(),
            run_b.failures.len()
        ),
        started,
    );

    // 8
    let started = Instant::now();
    let targets = [t_b + 0.1, t_b + 0.2, t_b + 0.4, 1.6, 2.0];
    let cap = run_ensemble(&field, &stochastic_spec(SamplerFamily::Cap, 3), &x0, n, &targets, &opts).unwrap();
    let gauss = run_ensemble(&field, &stochastic_spec(SamplerFamily::Gaussian, 4), &x0, n, &targets, &opts).unwrap();
    let grid16 = Grid::new([-0.1, 0.1, -0.1, 0.1], 32, 32).unwrap();
    let grid20 = Grid::new([-0.2, 0.2, -0.2, 0.2], 32, 32).unwrap();
    let r8 = [
        ratio(&cap.sets[3], &gauss.sets[3], (1, 2), &grid16),
        ratio(&cap.sets[4], &gauss.sets[4], (1, 2), &grid20),
    ];
    suite.record(
        8,
        "sampler independence, cap vs truncated Gaussian",
        r8.iter().all(|r| *r <= 2.0),
        format!("L1/floor = {:.2} (t = 1.6), {:.2} (t = 2.0), both <= 2", r8[0], r8[1]),
        started,
    );

    // 9
    let started = Instant::now();
    let points = srb_prime_ensemble(&field, &y_att, 10_000, 1.0, 100.0, &gcfg).unwrap();
    let predicted = predict_post_blowup(&points, 2.0, t_b, THIRD).unwrap();
    let r9 = ratio(&predicted, &cap.sets[4], (1, 2), &grid20);
    let r9_gauss = ratio(&predicted, &gauss.sets[4], (1, 2), &grid20);
    suite.record(
        9,
        "SRB' pushforward prediction at t = 2.0",
        r9 <= 3.0,
        format!("L1/floor vs cap ensemble = {r9:.2} <= 3 (vs Gaussian ensemble: {r9_gauss:.2})"),
        started,
    );

    // 10
    let started = Instant::now();
    let r10 = pullback_ratio(&cap.sets[3], &cap.sets[4], t_b, &p);
    let r10_gauss = pullback_ratio(&gauss.sets[3], &gauss.sets[4], t_b, &p);
    suite.record(
        10,
        "self-similarity of the pullback, t = 1.6 vs 2.0",
        r10 <= 2.0,
        format!("(w, u_x) L1/floor = {r10:.2} <= 2 for the cap ensemble (Gaussian ensemble: {r10_gauss:.2})"),
        started,
    );

    // 11
    let started = Instant::now();
    let (lx, ly): (Vec<f64>, Vec<f64>) = (0..3)
        .map(|k| {
            let mut r: Vec<f64> = cap.sets[k].points.iter().map(|x| x.norm()).collect();
            r.sort_by(f64::total_cmp);
            ((cap.sets[k].t - t_b).ln(), r[r.len() / 2].ln())
        })
        .unzip();
    let mx = lx.iter().sum::<f64>() / 3.0;
    let my = ly.iter().sum::<f64>() / 3.0;
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    suite.record(
        11,
        "delta limit radius scaling",
        (slope / 1.5 - 1.0).abs() <= 0.1,
        format!("log-log slope of the median radius = {slope:.4}, target 1.5 +- 10%"),
        started,
    );

    // 12
    let started = Instant::now();
    let s10 = 10f64.sqrt();
    let ladder = [1e-4, 1e-4 / s10, 1e-5, 1e-5 / s10, 1e-6];
    let entry = find_entry(&field, &x0, ladder[0], &policy, 100.0).unwrap();
    let h0 = draw_h0(7, 0, &default_offset(&entry.x_ent));
    let dirs: Vec<UnitVec<4>> = ladder
        .iter()
        .map(|&nu| {
            let mut spec = RegularizationSpec::direct(nu, 7);
            spec.h0 = Some(h0.as_slice().to_vec());
            let run = run_ensemble(&field, &spec, &x0, 1, &[1.6], &opts).unwrap();
            UnitVec::new(run.sets[0].points[0]).unwrap()
        })
        .collect();
    let angles: Vec<f64> = dirs.windows(2).map(|w| w[0].angle_to(&w[1])).collect();
    let max_angle = angles.iter().cloned().fold(0.0, f64::max);
    suite.record(
        12,
        "deterministic sensitivity with a fixed H_0 (demonstration)",
        max_angle > 0.5,
        format!("angles between nu and nu/sqrt(10): {angles:.3?}; max {max_angle:.3} > 0.5 rad"),
        started,
    );

    // 13
    let started = Instant::now();
    let (w_m, w_big) = trapping_bounds(f_lo, f_hi, THIRD).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut sampler_spec = SamplerSpec::default();
    sampler_spec.cap_center = vec![-1.0, 0.0, 0.0, 0.0];
    let starts = EscapeSampler::<4>::from_spec(&sampler_spec).unwrap();
    let dt = 1e-2;
    let grid: Vec<f64> = (0..=10_000).map(|k| k as f64 * dt).collect();
    let (mut violations, mut never_entered) = (0, 0);
    for _ in 0..100 {
        let y = UnitVec::new(starts.draw(&mut rng).unwrap()).unwrap();
        let w0 = 10f64.powf(rng.gen_range(-1.0..1.0));
        let path = integrate_master_slave(&field, &y, w0, &grid, dt).unwrap();
        let inside = |w: f64| w > w_m && w < w_big;
        match path.iter().position(|(_, w)| inside(*w)) {
            Some(k) => violations += path[k..].iter().filter(|(_, w)| !inside(*w)).count().min(1),
            None => never_entered += 1,
        }
    }
    suite.record(
        13,
        "trapping region of the master-slave system",
        violations == 0 && never_entered == 0,
        format!(
            "(w_m, w_M) = ({w_m:.3}, {w_big:.3}); 100 random starts: {violations} exits after entry, {never_entered} never entered"
        ),
        started,
    );

    let passed = suite.results.iter().filter(|o| o.pass).count();
    say(format!("acceptance: {passed}/{} criteria pass", suite.results.len()));
    let unexpected: Vec<u32> = suite
        .results
        .iter()
        .filter(|o| !o.pass && !KNOWN_FAILURES.contains(&o.id))
        .map(|o| o.id)
        .collect();
    for o in suite.results.iter().filter(|o| o.pass && KNOWN_FAILURES.contains(&o.id)) {
        say(format!("criterion {} now passes; drop it from KNOWN_FAILURES", o.id));
    }
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
