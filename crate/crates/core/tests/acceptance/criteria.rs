use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use drmpc::cli::{cmd_simulate, CliConfig};
use drmpc::conic::{self, Cone, ConicProgram, LinExpr, SolveStatus, SolverSettings};
use drmpc::markov::{self, AmbiguitySet, P_PERFORMANCE, P_SAFETY};
use drmpc::mjls::{build_acc_model, AccParams, MjlsModel};
use drmpc::ocp::{solve_ocp, Branching, OcpOutcome, OcpSpec};
use drmpc::polyhedra::Polyhedron;
use drmpc::risk::{self, RiskSpec};
use drmpc::safety::{self, admits_invariant_input, h_min, pre_set, rpi_candidate};
use drmpc::simulator::{run_batch_with_terminal, terminal_set, BatchSummary, Controller, ExperimentConfig, ForcedMode};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::common::{self, rows, table1, PERF_MODES, SAFETY_MODES};
use crate::Check;

fn x(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

// ---------------------------------------------------------------- criterion 1

pub fn fig3() -> Vec<Check> {
    let params = common::fig3();
    let (_, rci) = terminal_set(&params).unwrap();
    let grid = safety::safety_grid(&params, &rci, 20.0, 0.0, 30.0, 61).unwrap();

    let conv = Check::new(
        "converged",
        rci.converged && rci.iterations <= 50,
        format!("converged={} after {} iterations (cap 50)", rci.converged, rci.iterations),
    );

    let above: Vec<(f64, f64)> = grid
        .iter()
        .filter_map(|r| r.h_rci.map(|h| (r.v_e, h - r.h_rss)))
        .filter(|&(_, excess)| excess > 1e-6)
        .collect();
    let worst = above.iter().copied().fold((f64::NAN, 0.0), |b, a| if a.1 > b.1 { a } else { b });
    let below = Check::new(
        "h_rci<=h_rss",
        above.is_empty() && grid.iter().all(|r| r.h_rci.is_some()),
        if above.is_empty() {
            "holds at all 61 points".to_string()
        } else {
            format!(
                "violated at {} of 61 points (v_e >= {}), max excess {:.3} m at v_e = {}",
                above.len(),
                above[0].0,
                worst.1,
                worst.0
            )
        },
    );

    let conservative = grid.iter().filter(|r| r.h_rpi0 > r.h_rss).count();
    let initial = Check::new(
        "h_rpi0>h_rss somewhere",
        conservative >= 1,
        format!("{conservative} of 61 points"),
    );
    vec![conv, below, initial]
}

// ---------------------------------------------------------------- criterion 2

fn safety_config(controller: Controller, delta: f64, offline_n: usize) -> ExperimentConfig {
    ExperimentConfig {
        params: table1(&SAFETY_MODES),
        p_true: rows(&P_SAFETY),
        controller,
        delta,
        horizon: 3,
        steps: 200,
        realizations: 100,
        master_seed: 2024,
        offline_n,
        x0: vec![100.0, 25.0, 25.0],
        w0: 1,
        forced_mode: Some(ForcedMode { mode: 3, step: 100 }),
        online_learning: true,
        solver: SolverSettings::default(),
    }
}

fn describe(s: &BatchSummary) -> String {
    format!(
        "{} infeasible, {} solver failures of {} (fraction {:.2})",
        s.infeasible, s.solver_failures, s.realizations, s.infeasibility_fraction
    )
}

fn batch(cfg: &ExperimentConfig, terminal: &Polyhedron, label: &str) -> BatchSummary {
    let start = Instant::now();
    let (_, summary) = run_batch_with_terminal(cfg, terminal).unwrap();
    println!(
        "    ..           {label}: {}, mean cost {:.1} ± {:.1} over {} completed ({:.0} s)",
        describe(&summary),
        summary.mean_cost,
        summary.std_error,
        summary.completed,
        start.elapsed().as_secs_f64()
    );
    summary
}

pub fn safety() -> Vec<Check> {
    let params = table1(&SAFETY_MODES);
    let (terminal, _) = terminal_set(&params).unwrap();

    let robust = batch(&safety_config(Controller::Robust, 0.05, 10), &terminal, "robust");
    let ra = batch(&safety_config(Controller::RiskAverse { alpha: 0.05 }, 0.05, 10), &terminal, "risk-averse n=10");
    let st10 = batch(&safety_config(Controller::Stochastic, 0.1, 10), &terminal, "stochastic n=10");
    let st5k = batch(&safety_config(Controller::Stochastic, 0.1, 5000), &terminal, "stochastic n=5000");

    vec![
        Check::new("robust never infeasible", robust.infeasible == 0 && robust.solver_failures == 0, describe(&robust)),
        Check::new("risk-averse never infeasible", ra.infeasible == 0 && ra.solver_failures == 0, describe(&ra)),
        Check::new("stochastic n=10 >= 0.05", st10.infeasibility_fraction >= 0.05, describe(&st10)),
        Check::new("stochastic n=5000 <= 0.05", st5k.infeasibility_fraction <= 0.05, describe(&st5k)),
    ]
}

// ---------------------------------------------------------------- criterion 3

fn performance_config(controller: Controller, delta: f64, offline_n: usize) -> ExperimentConfig {
    ExperimentConfig {
        params: table1(&PERF_MODES),
        p_true: rows(&P_PERFORMANCE),
        controller,
        delta,
        horizon: 3,
        steps: 50,
        realizations: 50,
        master_seed: 2024,
        offline_n,
        x0: vec![40.0, 20.0, 25.0],
        w0: 0,
        forced_mode: None,
        online_learning: true,
        solver: SolverSettings::default(),
    }
}

fn se2(a: &BatchSummary, b: &BatchSummary) -> f64 {
    2.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt()
}

pub fn performance() -> Vec<Check> {
    let params = table1(&PERF_MODES);
    let (terminal, _) = terminal_set(&params).unwrap();
    let ra_ctl = Controller::RiskAverse { alpha: 0.05 };

    let robust = batch(&performance_config(Controller::Robust, 0.05, 0), &terminal, "robust");
    let ra0 = batch(&performance_config(ra_ctl, 0.05, 0), &terminal, "risk-averse n=0");
    let ra5k = batch(&performance_config(ra_ctl, 0.05, 5000), &terminal, "risk-averse n=5000");
    let st5k = batch(&performance_config(Controller::Stochastic, 0.1, 5000), &terminal, "stochastic n=5000");

    let complete = |s: &BatchSummary| s.completed == s.realizations;
    let tol0 = se2(&ra0, &robust);
    let tol_rob = se2(&ra5k, &robust);
    vec![
        Check::new(
            "n=0: risk-averse ~ robust",
            complete(&ra0) && complete(&robust) && (ra0.mean_cost - robust.mean_cost).abs() <= tol0,
            format!("{:.1} vs {:.1}, |diff| {:.1} <= 2 SE {:.1}", ra0.mean_cost, robust.mean_cost, (ra0.mean_cost - robust.mean_cost).abs(), tol0),
        ),
        Check::new(
            "n=5000: risk-averse ~ stochastic",
            complete(&ra5k) && complete(&st5k) && (ra5k.mean_cost - st5k.mean_cost).abs() <= 0.1 * st5k.mean_cost,
            format!(
                "{:.1} vs {:.1}, relative diff {:.4}",
                ra5k.mean_cost,
                st5k.mean_cost,
                (ra5k.mean_cost - st5k.mean_cost).abs() / st5k.mean_cost
            ),
        ),
        Check::new(
            "n=5000: risk-averse <= robust + 2 SE",
            ra5k.mean_cost <= robust.mean_cost + tol_rob,
            format!("{:.1} <= {:.1} + {:.1}", ra5k.mean_cost, robust.mean_cost, tol_rob),
        ),
    ]
}

// ---------------------------------------------------------------- criterion 4

fn radius_formula(alpha: f64, d: f64, n: f64) -> f64 {
    (2.0 * (1.0 / alpha).ln() / n).sqrt()
        + (2.0 * (d - 1.0) / (std::f64::consts::PI * n)).sqrt()
        + 4.0 * d.powf(0.5) * (d - 1.0).powf(0.25) / n.powf(0.75)
}

pub fn radius() -> Vec<Check> {
    let r = markov::radius(0.05, 4, 100).unwrap();
    let r_ref = radius_formula(0.05, 4.0, 100.0);
    let value = Check::new(
        "radius(0.05,4,100)",
        (r - 0.71593).abs() <= 1e-4 && (r - r_ref).abs() <= 1e-12,
        format!("{r:.6} (recomputed {r_ref:.6}, expected 0.71593)"),
    );

    let p = rows(&P_PERFORMANCE);
    let n = 2000;
    let r2000 = markov::radius(0.05, 4, n as u64).unwrap();
    let mut rng = common::rng(4);
    let mut rates = Vec::new();
    for row in &p {
        let mut hits = 0;
        for _ in 0..200 {
            let mut counts = [0usize; 4];
            for _ in 0..n {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = 3;
                for (i, &pi) in row.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                counts[k] += 1;
            }
            let err: f64 = counts.iter().zip(row).map(|(&c, &pi)| (c as f64 / n as f64 - pi).abs()).sum();
            if err <= r2000 {
                hits += 1;
            }
        }
        rates.push(hits as f64 / 200.0);
    }
    let coverage = Check::new(
        "coverage n=2000",
        rates.iter().all(|&c| c >= 0.9),
        format!("per-row coverage {rates:?} (radius {r2000:.4})"),
    );
    vec![value, coverage]
}

// ---------------------------------------------------------------- criterion 5

fn random_delta<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<f64>() < 0.15 {
        1.0
    } else {
        0.02 + 0.98 * rng.random::<f64>()
    }
}

/// Smallest `t` for which the dual epigraph system is satisfiable, by
/// bisection on solver feasibility. Returns the estimate and the number of
/// solves that ended without a clear verdict.
fn bisect_epigraph(spec: &RiskSpec, z: &[f64]) -> (f64, usize) {
    let rep = risk::conic_representation(spec).unwrap();
    let zs: Vec<LinExpr> = z.iter().map(|&v| LinExpr::constant(v)).collect();
    let feasible = |t: f64, unclear: &mut usize| {
        let mut prog = ConicProgram::new(0);
        risk::epigraph_dual_constraints(&rep, &mut prog, &zs, &LinExpr::constant(t)).unwrap();
        let res = conic::solve(&prog, &SolverSettings::precise()).unwrap();
        match res.status {
            SolveStatus::Optimal | SolveStatus::Inaccurate => true,
            SolveStatus::PrimalInfeasible => false,
            _ => {
                *unclear += 1;
                false
            }
        }
    };
    let mut unclear = 0;
    let lo0 = z.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi0 = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let (mut lo, mut hi) = (lo0, hi0);
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid, &mut unclear) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (0.5 * (lo + hi), unclear)
}

fn expectation(z: &[f64], p: &[f64]) -> f64 {
    z.iter().zip(p).map(|(a, b)| a * b).sum()
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// A random risk spec together with an independent evaluator.
fn random_spec<R: Rng>(rng: &mut R, d: usize, kind: usize) -> (RiskSpec, Box<dyn Fn(&[f64]) -> f64>) {
    let sparse = rng.random::<f64>() < 0.3;
    let p = common::random_distribution(rng, d, sparse);
    let delta = random_delta(rng);
    let r = 2.2 * rng.random::<f64>();
    match kind % 3 {
        0 => {
            let q = p.clone();
            (RiskSpec::avar(p, delta).unwrap(), Box::new(move |z| common::avar_by_vertices(z, &q, delta)))
        }
        1 => {
            let q = p.clone();
            let amb = AmbiguitySet::l1_ball(p, r).unwrap();
            (
                RiskSpec::robust_avar(amb, delta).unwrap(),
                Box::new(move |z| common::robust_avar_by_breakpoints(z, &q, r.min(2.0), delta)),
            )
        }
        _ => {
            let q = p.clone();
            let amb = AmbiguitySet::l1_ball(p, r).unwrap();
            (RiskSpec::max_expectation(amb), Box::new(move |z| common::tv_worst_case(z, &q, r.min(2.0))))
        }
    }
}

pub fn risk() -> Vec<Check> {
    let mut rng = common::rng(5);
    let mut checks = Vec::new();

    // brute-force enumeration
    let mut worst_avar: f64 = 0.0;
    let mut worst_robust: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..=6);
        let z = common::random_vector(&mut rng, d, 10.0);
        let sparse = rng.random::<f64>() < 0.3;
        let p = common::random_distribution(&mut rng, d, sparse);
        let delta = random_delta(&mut rng);
        let got = risk::avar_value(&z, &p, delta).unwrap();
        worst_avar = worst_avar.max((got - common::avar_by_vertices(&z, &p, delta)).abs());

        let r = 2.2 * rng.random::<f64>();
        let amb = AmbiguitySet::l1_ball(p.clone(), r).unwrap();
        let got = risk::robust_avar_value(&z, &amb, delta).unwrap();
        worst_robust = worst_robust.max((got - common::robust_avar_by_breakpoints(&z, &p, r.min(2.0), delta)).abs());
    }
    checks.push(Check::new("avar vs vertex enumeration", worst_avar <= 1e-6, format!("max error {worst_avar:.2e} over 200")));
    checks.push(Check::new(
        "robust avar vs breakpoint enumeration",
        worst_robust <= 1e-6,
        format!("max error {worst_robust:.2e} over 200"),
    ));

    // feasibility bisection on the dual system
    let mut worst_bisect: f64 = 0.0;
    let mut unclear_total = 0;
    for i in 0..200 {
        let d = rng.random_range(2..=6);
        let (spec, oracle) = random_spec(&mut rng, d, i);
        let z = common::random_vector(&mut rng, d, 10.0);
        let (t, unclear) = bisect_epigraph(&spec, &z);
        unclear_total += unclear;
        worst_bisect = worst_bisect.max((t - oracle(&z)).abs());
    }
    checks.push(Check::new(
        "epigraph bisection",
        worst_bisect <= 1e-6,
        format!("max error {worst_bisect:.2e} over 200 ({unclear_total} unclear solves)"),
    ));

    // properties
    let tol = 1e-7;
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |name: &'static str, ok: bool| {
        if !ok {
            *failures.entry(name).or_default() += 1;
        }
    };
    for i in 0..500 {
        let d = rng.random_range(2..=6);
        let (spec, _) = random_spec(&mut rng, d, i);
        let rho = |z: &[f64]| spec.value(z).unwrap();
        let z = common::random_vector(&mut rng, d, 10.0);
        let z2 = common::random_vector(&mut rng, d, 10.0);
        let v = rho(&z);
        let scale = 1.0 + v.abs();

        let bump: Vec<f64> = z.iter().map(|a| a + 3.0 * rng.random::<f64>()).collect();
        fail("monotonicity", v <= rho(&bump) + tol * scale);
        let c = 5.0 * (2.0 * rng.random::<f64>() - 1.0);
        let shifted: Vec<f64> = z.iter().map(|a| a + c).collect();
        fail("translation", (rho(&shifted) - v - c).abs() <= tol * scale);
        let lam = 3.0 * rng.random::<f64>();
        let scaled: Vec<f64> = z.iter().map(|a| lam * a).collect();
        fail("homogeneity", (rho(&scaled) - lam * v).abs() <= tol * scale * (1.0 + lam));
        let th = rng.random::<f64>();
        let mix: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| th * a + (1.0 - th) * b).collect();
        fail("convexity", rho(&mix) <= th * v + (1.0 - th) * rho(&z2) + tol * scale);

        // ordering and ambiguity monotonicity on a fresh nominal distribution
        let p = common::random_distribution(&mut rng, d, false);
        let delta = random_delta(&mut rng);
        let r1 = 2.0 * rng.random::<f64>();
        let r2 = r1 + (2.2 - r1) * rng.random::<f64>();
        let e = expectation(&z, &p);
        let a = risk::avar_value(&z, &p, delta).unwrap();
        let b1 = risk::robust_avar_value(&z, &AmbiguitySet::l1_ball(p.clone(), r1).unwrap(), delta).unwrap();
        let b2 = risk::robust_avar_value(&z, &AmbiguitySet::l1_ball(p.clone(), r2).unwrap(), delta).unwrap();
        let m = max_of(&z);
        let s = tol * (1.0 + m.abs());
        fail("ordering", e <= a + s && a <= b1 + s && b1 <= m + s);
        fail("ambiguity monotonicity", b1 <= b2 + s);

        // AVaR ≤ 0 bounds the probability of a positive outcome by δ
        let shift = a + 1e-3;
        let zs: Vec<f64> = z.iter().map(|v| v - shift).collect();
        let a_shift = risk::avar_value(&zs, &p, delta).unwrap();
        let mass: f64 = zs.iter().zip(&p).filter(|(v, _)| **v > 0.0).map(|(_, q)| q).sum();
        fail("avar implication", a_shift > 0.0 || mass <= delta + 1e-12);
    }
    let detail = if failures.is_empty() {
        "coherence, ordering, implication and ambiguity monotonicity on 500 instances".to_string()
    } else {
        format!("violations: {failures:?}")
    };
    checks.push(Check::new("properties", failures.is_empty(), detail));
    checks
}

// ---------------------------------------------------------------- criterion 6

fn sample_rk<R: Rng>(rng: &mut R, params: &AccParams) -> DVector<f64> {
    let cap = (params.a_min / params.c_min()).min(params.v_max);
    let pick = |rng: &mut R, lo: f64, hi: f64| {
        let u: f64 = rng.random();
        if u < 0.1 {
            lo
        } else if u < 0.2 {
            hi
        } else {
            lo + (hi - lo) * rng.random::<f64>()
        }
    };
    let v_e = pick(rng, 0.0, cap);
    let v_t = pick(rng, v_e, params.v_max + 5.0);
    let h = pick(rng, 0.0, 100.0);
    x(&[h, v_e, v_t])
}

/// Random states of `r` with speeds in `[0, v_max]`, half on the lower
/// headway boundary and half above it.
fn sample_set<R: Rng>(rng: &mut R, r: &Polyhedron, v_max: f64, n: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v_e = v_max * rng.random::<f64>();
        let v_t = v_max * rng.random::<f64>();
        let h = h_min(r, v_e, v_t).unwrap();
        if !h.is_finite() {
            continue;
        }
        let h = if out.len() % 2 == 0 { h } else { h + 60.0 * rng.random::<f64>() };
        out.push(x(&[h, v_e, v_t]));
    }
    out
}

/// `∃ u` on a uniform grid of `U` with every successor in `r` (rows relaxed
/// by `slack`).
fn pre_by_grid(model: &MjlsModel, r: &Polyhedron, state: &DVector<f64>, us: &[f64], slack: f64) -> bool {
    us.iter().any(|&u| {
        let u = x(&[u]);
        (0..model.num_modes()).all(|w| r.contains(&model.step(state, &u, w).unwrap(), slack).unwrap())
    })
}

pub fn invariance() -> Vec<Check> {
    let mut rng = common::rng(6);
    let mut checks = Vec::new();

    // braking feedback keeps R_K invariant
    let mut violations = 0;
    let mut tested = 0;
    for params in [table1(&PERF_MODES), table1(&SAFETY_MODES), common::fig3()] {
        let model = build_acc_model(&params).unwrap();
        let rk = rpi_candidate(&params).unwrap();
        for _ in 0..1000 {
            let s = sample_rk(&mut rng, &params);
            assert!(rk.contains(&s, 1e-12).unwrap());
            let u = params.c_min() * s[1];
            let u_ok = u >= params.a_min - 1e-12 && u <= params.a_max + 1e-12;
            let stays = (0..model.num_modes()).all(|w| rk.contains(&model.step(&s, &x(&[u]), w).unwrap(), 1e-9).unwrap());
            if !(u_ok && stays) {
                violations += 1;
            }
            tested += 1;
        }
    }
    checks.push(Check::new("R_K invariant under braking", violations == 0, format!("{violations} violations in {tested} samples x all modes")));

    // every RCI iterate admits an invariant input at sampled states
    let params = common::fig3();
    let model = build_acc_model(&params).unwrap();
    let (_, rci) = terminal_set(&params).unwrap();
    let mut failed = 0;
    for r in &rci.iterates {
        for s in sample_set(&mut rng, r, params.v_max, 500) {
            if !admits_invariant_input(&model, r, &s, 1e-6).unwrap() {
                failed += 1;
            }
        }
    }
    checks.push(Check::new(
        "RCI iterates invariant",
        failed == 0,
        format!("{failed} failures over {} iterates x 500 states", rci.iterates.len()),
    ));

    // pre-set against a 400-point input grid
    let params = table1(&[1.0, -0.5]);
    let model = build_acc_model(&params).unwrap();
    let rk = rpi_candidate(&params).unwrap();
    let pre = pre_set(&model, &rk).unwrap();
    let us: Vec<f64> = (0..400).map(|i| params.a_min + (params.a_max - params.a_min) * i as f64 / 399.0).collect();
    let du = us[1] - us[0];
    let loose = 0.5 * du * params.ts + 1e-9;
    let (mut mismatch, mut inside) = (0, 0);
    for h in [0.0, 0.5, 2.0, 5.0, 10.0] {
        for i in 0..10 {
            for j in 0..10 {
                let s = x(&[h, 12.0 * i as f64 / 9.0, 12.0 * j as f64 / 9.0]);
                let member = pre.contains(&s, 1e-9).unwrap();
                inside += member as usize;
                let strict = pre_by_grid(&model, &rk, &s, &us, 1e-12);
                let relaxed = pre_by_grid(&model, &rk, &s, &us, loose);
                if (member && !relaxed) || (strict && !member) {
                    mismatch += 1;
                }
            }
        }
    }
    checks.push(Check::new(
        "pre_set vs input grid",
        mismatch == 0,
        format!("{mismatch} mismatches on 500 grid states ({inside} inside)"),
    ));
    checks
}

// ---------------------------------------------------------------- criterion 7

/// Nominal cost of the best tree policy for a problem with slack
/// constraints: golden-section over the root input with, per child, an
/// inner golden-section over that child's input. Returns the cost and
/// whether every constraint of the optimal policy is slack.
fn nominal_by_enumeration(model: &MjlsModel, params: &AccParams, p: &[Vec<f64>], horizon: usize, x0: &DVector<f64>, w0: usize) -> (f64, bool) {
    fn value(model: &MjlsModel, params: &AccParams, p: &[Vec<f64>], k: usize, state: &DVector<f64>, w: usize, ok: &mut bool) -> f64 {
        if k == 0 {
            *ok &= state[0] >= 0.0;
            return params.terminal_cost(state);
        }
        let node_cost = |u: f64, ok: &mut bool| {
            let mut total = params.stage_cost(state, u);
            for (c, &pc) in p[w].iter().enumerate() {
                if pc > 0.0 {
                    let next = model.step(state, &x(&[u]), c).unwrap();
                    total += pc * value(model, params, p, k - 1, &next, c, ok);
                }
            }
            total
        };
        let (u, v) = common::golden_min(|u| node_cost(u, &mut true), params.a_min, params.a_max, 1e-9);
        let mut inner = true;
        node_cost(u, &mut inner);
        let slack = u > params.a_min + 1e-3 && u < params.a_max - 1e-3;
        let speed = state[1] > 0.0 && state[1] < params.v_max;
        *ok &= inner && slack && speed && state[0] >= 0.0;
        v
    }
    let mut ok = true;
    let v = value(model, params, p, horizon, x0, w0, &mut ok);
    (v, ok)
}

fn singleton_rows(p: &[Vec<f64>]) -> Vec<AmbiguitySet> {
    p.iter().map(|r| AmbiguitySet::singleton(r.clone()).unwrap()).collect()
}

fn random_lp<R: Rng>(rng: &mut R) -> (Vec<f64>, DMatrix<f64>, DVector<f64>) {
    let n = rng.random_range(2..=3);
    let m = rng.random_range(2..=6);
    let mut a = DMatrix::zeros(m + 2 * n, n);
    let mut b = DVector::zeros(m + 2 * n);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = 2.0 * rng.random::<f64>() - 1.0;
        }
        b[i] = 0.2 + 2.0 * rng.random::<f64>();
    }
    for j in 0..n {
        a[(m + 2 * j, j)] = 1.0;
        a[(m + 2 * j + 1, j)] = -1.0;
        b[m + 2 * j] = 5.0;
        b[m + 2 * j + 1] = 5.0;
    }
    (common::random_vector(rng, n, 3.0), a, b)
}

fn lp_program(c: &[f64], a: &DMatrix<f64>, b: &DVector<f64>) -> ConicProgram {
    let (m, n) = a.shape();
    let mut prog = ConicProgram::new(n);
    for (j, &cj) in c.iter().enumerate() {
        prog.set_objective(j, cj);
    }
    let rows = (0..m).map(|i| (0..n).map(|j| (j, a[(i, j)])).collect()).collect();
    prog.add_block(Cone::Nonneg(m), rows, b.iter().copied().collect()).unwrap();
    prog
}

/// Crafted infeasible programs with a range of infeasibility margins.
fn infeasible_programs() -> Vec<(String, ConicProgram)> {
    let mut out = Vec::new();
    for margin in [1.0, 1e-2, 1e-4, 1e-6] {
        // box [0,1]^3 and x₁ + x₂ + x₃ ≥ 3 + margin
        let mut prog = ConicProgram::new(3);
        for j in 0..3 {
            prog.add_inequality(vec![(j, 1.0)], 1.0).unwrap();
            prog.add_inequality(vec![(j, -1.0)], 0.0).unwrap();
        }
        prog.add_inequality(vec![(0, -1.0), (1, -1.0), (2, -1.0)], -3.0 - margin).unwrap();
        out.push((format!("box margin {margin}"), prog));

        // unit ball and x₁ ≥ 1 + margin
        let mut prog = ConicProgram::new(2);
        prog.add_block(Cone::SecondOrder(3), vec![vec![], vec![(0, 1.0)], vec![(1, 1.0)]], vec![1.0, 0.0, 0.0])
            .unwrap();
        prog.add_inequality(vec![(0, -1.0)], -1.0 - margin).unwrap();
        out.push((format!("ball margin {margin}"), prog));

        // equality x₁ + x₂ = −margin with x ≥ 0
        let mut prog = ConicProgram::new(2);
        prog.add_equality(vec![(0, 1.0), (1, 1.0)], -margin).unwrap();
        prog.add_block(Cone::Nonneg(2), vec![vec![(0, -1.0)], vec![(1, -1.0)]], vec![0.0, 0.0]).unwrap();
        out.push((format!("equality margin {margin}"), prog));
    }
    out
}

pub fn compiler() -> Vec<Check> {
    let mut rng = common::rng(7);
    let settings = SolverSettings::default();
    let mut checks = Vec::new();

    // nominal OCP against scenario enumeration
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for i in 0..24 {
        let d = 1 + i % 2;
        let horizon = 1 + (i / 2) % 2;
        let c: Vec<f64> = if d == 1 { vec![-0.2] } else { vec![0.5, -0.3] };
        let params = table1(&c);
        let model = build_acc_model(&params).unwrap();
        let p: Vec<Vec<f64>> = (0..d).map(|_| common::random_distribution(&mut rng, d, false)).collect();
        let x0 = x(&[
            40.0 + 30.0 * rng.random::<f64>(),
            20.0 + 18.0 * rng.random::<f64>(),
            15.0 + 20.0 * rng.random::<f64>(),
        ]);
        let w0 = rng.random_range(0..d);
        let spec = OcpSpec::new(model.clone(), params.clone(), horizon, singleton_rows(&p), 0.1, Polyhedron::universe(3), Branching::Support)
            .unwrap();
        let sol = solve_ocp(&spec, &x0, w0, &settings).unwrap();
        let Some(policy) = sol.policy() else {
            worst = f64::INFINITY;
            continue;
        };
        let (oracle, slack) = nominal_by_enumeration(&model, &params, &p, horizon, &x0, w0);
        assert!(slack, "instance {i} has active constraints");
        worst = worst.max((policy.objective - oracle).abs());
        count += 1;
    }
    checks.push(Check::new("nominal vs enumeration", worst <= 1e-2, format!("max |diff| {worst:.2e} over {count} instances (d<=2, N<=2)")));

    // singleton ambiguity with full branching compiles to the nominal problem
    let params = table1(&PERF_MODES);
    let model = build_acc_model(&params).unwrap();
    let (terminal, _) = terminal_set(&params).unwrap();
    let p = rows(&P_PERFORMANCE);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let x0 = x(&[30.0 + 40.0 * rng.random::<f64>(), 15.0 + 15.0 * rng.random::<f64>(), 15.0 + 15.0 * rng.random::<f64>()]);
        let w0 = rng.random_range(0..4);
        let nominal = OcpSpec::new(model.clone(), params.clone(), 2, singleton_rows(&p), 0.05, terminal.clone(), Branching::Support).unwrap();
        let ra = OcpSpec { branching: Branching::Full, ..nominal.clone() };
        let a = solve_ocp(&nominal, &x0, w0, &settings).unwrap();
        let b = solve_ocp(&ra, &x0, w0, &settings).unwrap();
        match (a.policy(), b.policy()) {
            (Some(a), Some(b)) => worst_rel = worst_rel.max((a.objective - b.objective).abs() / a.objective.abs().max(1.0)),
            (None, None) => {}
            _ => worst_rel = f64::INFINITY,
        }
    }
    checks.push(Check::new("singleton risk-averse vs nominal", worst_rel <= 1e-7, format!("max relative diff {worst_rel:.2e} over 20 states")));

    // random LPs against vertex enumeration
    let mut worst_lp: f64 = 0.0;
    for _ in 0..200 {
        let (c, a, b) = random_lp(&mut rng);
        let res = conic::solve(&lp_program(&c, &a, &b), &settings).unwrap();
        let oracle = common::lp_by_vertices(&c, &a, &b).unwrap();
        let err = if res.is_solved() { (res.objective - oracle).abs() / oracle.abs().max(1.0) } else { f64::INFINITY };
        worst_lp = worst_lp.max(err);
    }
    checks.push(Check::new("random LPs", worst_lp <= 1e-6, format!("max relative error {worst_lp:.2e} over 200")));

    // SOCPs with closed-form optima
    let mut worst_soc: f64 = 0.0;
    for _ in 0..100 {
        // min cᵀx over ‖x − x_c‖ ≤ ρ  →  cᵀx_c − ρ‖c‖
        let n = rng.random_range(2..=4);
        let c = common::random_vector(&mut rng, n, 2.0);
        let xc = common::random_vector(&mut rng, n, 5.0);
        let rho = 0.1 + 3.0 * rng.random::<f64>();
        let mut prog = ConicProgram::new(n);
        for j in 0..n {
            prog.set_objective(j, c[j]);
        }
        let mut rows = vec![vec![]];
        rows.extend((0..n).map(|j| vec![(j, 1.0)]));
        let mut b = vec![rho];
        b.extend(&xc);
        prog.add_block(Cone::SecondOrder(n + 1), rows, b).unwrap();
        let res = conic::solve(&prog, &settings).unwrap();
        let oracle = expectation(&c, &xc) - rho * c.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_soc = worst_soc.max((res.objective - oracle).abs() / oracle.abs().max(1.0));

        // min t over ‖A x − b‖ ≤ t  →  least-squares residual
        let (m, n) = (rng.random_range(3..=5), rng.random_range(1..=2));
        let a = DMatrix::from_fn(m, n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let bv = DVector::from_vec(common::random_vector(&mut rng, m, 3.0));
        let mut prog = ConicProgram::new(n + 1);
        prog.set_objective(n, 1.0);
        let mut rows = vec![vec![(n, -1.0)]];
        rows.extend((0..m).map(|i| (0..n).map(|j| (j, a[(i, j)])).collect()));
        let mut b = vec![0.0];
        b.extend(bv.iter());
        prog.add_block(Cone::SecondOrder(m + 1), rows, b).unwrap();
        let res = conic::solve(&prog, &settings).unwrap();
        let xs = a.clone().svd(true, true).solve(&bv, 1e-14).unwrap();
        let oracle = (&a * xs - &bv).norm();
        worst_soc = worst_soc.max((res.objective - oracle).abs() / oracle.abs().max(1.0));
    }
    checks.push(Check::new("SOCP closed forms", worst_soc <= 1e-6, format!("max relative error {worst_soc:.2e} over 200")));

    // certificates
    let mut bad = Vec::new();
    let crafted = infeasible_programs();
    let n_crafted = crafted.len() + 1;
    for (name, prog) in crafted {
        let res = conic::solve(&prog, &settings).unwrap();
        let cert = res.certificate.clone().unwrap_or_default();
        let verified = res.status == SolveStatus::PrimalInfeasible && conic::verify_certificate(&prog, &cert, settings.cert_tol);
        let negated: Vec<f64> = cert.iter().map(|v| -v).collect();
        let zeros = vec![0.0; prog.num_rows()];
        let rejected =
            !conic::verify_certificate(&prog, &negated, settings.cert_tol) && !conic::verify_certificate(&prog, &zeros, settings.cert_tol);
        if !(verified && rejected) {
            bad.push(name);
        }
    }
    let ocp = OcpSpec::new(model.clone(), params.clone(), 2, singleton_rows(&p), 0.05, terminal, Branching::Support).unwrap();
    match solve_ocp(&ocp, &x(&[50.0, params.v_max + 1.0, 20.0]), 0, &settings).unwrap().outcome {
        OcpOutcome::Infeasible { certificate_verified: true } => {}
        _ => bad.push("OCP above speed limit".into()),
    }
    checks.push(Check::new("infeasibility certificates", bad.is_empty(), if bad.is_empty() {
        format!("{n_crafted} crafted programs certified, bogus certificates rejected")
    } else {
        format!("failed: {bad:?}")
    }));

    // non-binding timing report
    let robust_params = table1(&SAFETY_MODES);
    let robust_model = build_acc_model(&robust_params).unwrap();
    let (robust_terminal, _) = terminal_set(&robust_params).unwrap();
    let robust = OcpSpec::new(
        robust_model,
        robust_params.clone(),
        3,
        vec![AmbiguitySet::full_simplex(4); 4],
        0.05,
        robust_terminal,
        Branching::Full,
    )
    .unwrap();
    let mut times = Vec::new();
    for k in 0..10 {
        let x0 = x(&[100.0 - k as f64, 25.0, 25.0]);
        times.push(solve_ocp(&robust, &x0, 1, &settings).unwrap().solve_time);
    }
    times.sort_by(f64::total_cmp);
    println!(
        "    [bench]      robust N=3 d=4 solve: median {:.1} ms, max {:.1} ms over 10 solves",
        1e3 * times[5],
        1e3 * times[9]
    );
    checks
}

// ---------------------------------------------------------------- criterion 8

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub fn determinism() -> Vec<Check> {
    let cfg = CliConfig::from_json(
        r#"{
            "params": {"preset": "table1", "c": [1.13, -0.02, -0.33, -0.16]},
            "markov": {"p_true": "P_p", "alpha": 0.05, "offline_n": 50},
            "controller": "risk_averse",
            "horizon": 2,
            "experiment": {"steps": 12, "realizations": 4, "master_seed": 7, "x0": [40.0, 20.0, 25.0], "w0": 1,
                           "forced_mode": {"mode": 3, "step": 5}}
        }"#,
    )
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, a.path(), true).unwrap();
    cmd_simulate(&cfg, b.path(), true).unwrap();
    let (fa, fb) = (read_tree(a.path()), read_tree(b.path()));
    let same = !fa.is_empty() && fa == fb;
    vec![Check::new("simulate twice", same, format!("{} files compared", fa.len()))]
}
