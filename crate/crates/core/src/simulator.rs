//! Closed-loop learning MPC, batch experiments and their metrics.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{SolveStatus, SolverSettings};
use crate::error::{check_dim, Error, Result};
use crate::markov::{
    is_nested, sample_chain, sample_with_uniform, stream_rng, validate_stochastic, AmbiguitySet, TransitionEstimate,
};
use crate::mjls::{build_acc_model, AccParams, MjlsModel};
use crate::ocp::{solve_ocp, Branching, OcpOutcome, OcpSpec};
use crate::polyhedra::Polyhedron;
use crate::safety::{format_value, rci_iterate, rpi_candidate, RciResult, RCI_MAX_ITER, RCI_TOL};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    /// Singleton estimates, support tree, plain AVaR.
    Stochastic,
    /// ℓ1 ambiguity at confidence `1 − alpha`, updated under the nesting guard.
    RiskAverse { alpha: f64 },
    /// Full simplex for every mode.
    Robust,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Stochastic => "stochastic",
            Controller::RiskAverse { .. } => "risk_averse",
            Controller::Robust => "robust",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedMode {
    pub mode: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub params: AccParams,
    pub p_true: Vec<Vec<f64>>,
    pub controller: Controller,
    pub delta: f64,
    pub horizon: usize,
    /// Closed-loop steps per realization.
    pub steps: usize,
    pub realizations: usize,
    pub master_seed: u64,
    /// Offline transitions observed before deployment.
    pub offline_n: usize,
    pub x0: Vec<f64>,
    pub w0: usize,
    pub forced_mode: Option<ForcedMode>,
    /// Update estimates from closed-loop observations.
    pub online_learning: bool,
    pub solver: SolverSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let d = self.params.num_modes();
        check_dim(d, self.p_true.len())?;
        validate_stochastic(&self.p_true, 1e-9)?;
        check_dim(3, self.x0.len())?;
        if self.w0 >= d {
            return Err(Error::ModeOutOfRange { mode: self.w0, modes: d });
        }
        if let Some(f) = self.forced_mode {
            if f.mode >= d {
                return Err(Error::ModeOutOfRange { mode: f.mode, modes: d });
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if let Controller::RiskAverse { alpha } = self.controller {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if self.realizations == 0 {
            return Err(Error::InvalidParameter("need at least one realization".into()));
        }
        Ok(())
    }
}

/// RCI iteration from the braking candidate; every iterate is RCI, so the
/// last one is usable even without convergence.
pub fn terminal_set(params: &AccParams) -> Result<(Polyhedron, RciResult)> {
    let model = build_acc_model(params)?;
    let r0 = rpi_candidate(params)?;
    let rci = rci_iterate(&model, &model.state_set, &model.soft.as_polyhedron(), &r0, RCI_MAX_ITER, RCI_TOL)?;
    Ok((rci.last().clone(), rci))
}

pub fn forced_mode_schedule(t: usize, base_draw: usize, forced: Option<ForcedMode>) -> usize {
    match forced {
        Some(f) if f.step == t => f.mode,
        _ => base_draw,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub w: usize,
    pub x: Vec<f64>,
    /// Absent at the final state and where the OCP failed.
    pub u: Option<f64>,
    pub status: Option<SolveStatus>,
    pub iterations: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizationResult {
    pub realization: usize,
    pub seed: u64,
    pub trajectory: Vec<StepRecord>,
    pub closed_loop_cost: f64,
    /// Step at which the OCP was infeasible; the run stops there.
    pub infeasible_at: Option<usize>,
    /// Step at which the solver gave up without a certificate.
    pub solver_failure_at: Option<usize>,
    /// Accepted ambiguity updates (risk-averse controller only).
    pub ambiguity_updates: usize,
}

/// Ambiguity per mode as held by the controller during one realization.
struct Learner {
    controller: Controller,
    est: TransitionEstimate,
    sets: Vec<AmbiguitySet>,
    updates: usize,
}

impl Learner {
    fn new(controller: Controller, est: TransitionEstimate) -> Result<Self> {
        let d = est.num_modes();
        let sets = (0..d).map(|j| Self::candidate(controller, &est, j)).collect::<Result<_>>()?;
        Ok(Self { controller, est, sets, updates: 0 })
    }

    fn candidate(controller: Controller, est: &TransitionEstimate, j: usize) -> Result<AmbiguitySet> {
        match controller {
            Controller::Stochastic => AmbiguitySet::singleton(est.p_hat[j].clone()),
            Controller::RiskAverse { alpha } => est.ambiguity_row(j, alpha),
            Controller::Robust => Ok(AmbiguitySet::full_simplex(est.num_modes())),
        }
    }

    fn observe(&mut self, from: usize, to: usize) -> Result<()> {
        self.est.record_transition(from, to)?;
        let cand = Self::candidate(self.controller, &self.est, from)?;
        match self.controller {
            Controller::Stochastic => self.sets[from] = cand,
            Controller::RiskAverse { .. } => {
                if cand != self.sets[from] && is_nested(&cand, &self.sets[from], 0.0)? {
                    self.sets[from] = cand;
                    self.updates += 1;
                }
            }
            Controller::Robust => {}
        }
        Ok(())
    }
}

pub fn ocp_spec(cfg: &ExperimentConfig, model: &MjlsModel, terminal: &Polyhedron, sets: Vec<AmbiguitySet>) -> Result<OcpSpec> {
    let branching = match cfg.controller {
        Controller::Stochastic => Branching::Support,
        _ => Branching::Full,
    };
    OcpSpec::new(model.clone(), cfg.params.clone(), cfg.horizon, sets, cfg.delta, terminal.clone(), branching)
}

/// Stream ids of realization `i`: closed-loop draws and offline sample.
fn streams(i: usize) -> (u64, u64) {
    (2 * i as u64, 2 * i as u64 + 1)
}

fn offline_estimate(cfg: &ExperimentConfig, stream: u64) -> Result<TransitionEstimate> {
    let d = cfg.params.num_modes();
    if cfg.offline_n == 0 {
        return Ok(TransitionEstimate::empty(d));
    }
    let mut rng = stream_rng(cfg.master_seed, stream);
    TransitionEstimate::estimate(&sample_chain(&cfg.p_true, cfg.w0, cfg.offline_n + 1, &mut rng), d)
}

/// Ambiguity sets the controller starts realization `realization` with.
pub fn initial_ambiguity(cfg: &ExperimentConfig, realization: usize) -> Result<Vec<AmbiguitySet>> {
    let (_, offline) = streams(realization);
    Ok(Learner::new(cfg.controller, offline_estimate(cfg, offline)?)?.sets)
}

pub fn run_learning_mpc(cfg: &ExperimentConfig, terminal: &Polyhedron, realization: usize) -> Result<RealizationResult> {
    let model = build_acc_model(&cfg.params)?;
    let (online, offline) = streams(realization);

    let mut learner = Learner::new(cfg.controller, offline_estimate(cfg, offline)?)?;
    let mut rng = stream_rng(cfg.master_seed, online);

    let mut x = DVector::from_column_slice(&cfg.x0);
    let mut w = cfg.w0;
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut cost = 0.0;
    let mut infeasible_at = None;
    let mut solver_failure_at = None;

    for t in 0..cfg.steps {
        let spec = ocp_spec(cfg, &model, terminal, learner.sets.clone())?;
        let sol = solve_ocp(&spec, &x, w, &cfg.solver)?;
        let mut rec = StepRecord {
            t,
            w,
            x: x.iter().copied().collect(),
            u: None,
            status: Some(sol.status),
            iterations: Some(sol.iterations),
        };
        let u = match &sol.outcome {
            OcpOutcome::Solved(policy) => policy.extract_control()[0].clamp(cfg.params.a_min, cfg.params.a_max),
            OcpOutcome::Infeasible { .. } => {
                infeasible_at = Some(t);
                trajectory.push(rec);
                break;
            }
            OcpOutcome::SolverFailure(_) => {
                solver_failure_at = Some(t);
                trajectory.push(rec);
                break;
            }
        };
        rec.u = Some(u);
        trajectory.push(rec);
        cost += cfg.params.stage_cost(&x, u);

        let draw = sample_with_uniform(&cfg.p_true[w], rng.random::<f64>());
        let next = forced_mode_schedule(t + 1, draw, cfg.forced_mode);
        x = model.step(&x, &DVector::from_element(1, u), next)?;
        if cfg.online_learning {
            learner.observe(w, next)?;
        }
        w = next;
    }
    if infeasible_at.is_none() && solver_failure_at.is_none() {
        trajectory.push(StepRecord { t: cfg.steps, w, x: x.iter().copied().collect(), u: None, status: None, iterations: None });
    }
    Ok(RealizationResult {
        realization,
        seed: cfg.master_seed,
        trajectory,
        closed_loop_cost: cost,
        infeasible_at,
        solver_failure_at,
        ambiguity_updates: learner.updates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub controller: String,
    pub realizations: usize,
    pub infeasible: usize,
    pub infeasibility_fraction: f64,
    pub solver_failures: usize,
    /// Statistics over realizations that ran to completion.
    pub completed: usize,
    pub mean_cost: f64,
    pub std_error: f64,
    /// `(level, cost)` pairs by nearest rank.
    pub quantiles: Vec<(f64, f64)>,
}

pub const SUMMARY_LEVELS: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

pub fn summarize(cfg: &ExperimentConfig, results: &[RealizationResult]) -> BatchSummary {
    let infeasible = results.iter().filter(|r| r.infeasible_at.is_some()).count();
    let solver_failures = results.iter().filter(|r| r.solver_failure_at.is_some()).count();
    let mut costs: Vec<f64> = results
        .iter()
        .filter(|r| r.infeasible_at.is_none() && r.solver_failure_at.is_none())
        .map(|r| r.closed_loop_cost)
        .collect();
    costs.sort_by(f64::total_cmp);
    let (mean, se) = mean_and_std_error(&costs);
    let quantiles = if costs.is_empty() {
        Vec::new()
    } else {
        SUMMARY_LEVELS
            .iter()
            .map(|&q| {
                let k = ((q * costs.len() as f64).ceil() as usize).clamp(1, costs.len());
                (q, costs[k - 1])
            })
            .collect()
    };
    BatchSummary {
        controller: cfg.controller.name().into(),
        realizations: results.len(),
        infeasible,
        infeasibility_fraction: infeasible as f64 / results.len().max(1) as f64,
        solver_failures,
        completed: costs.len(),
        mean_cost: mean,
        std_error: se,
        quantiles,
    }
}

/// Sample mean and standard error; NaN where undefined.
pub fn mean_and_std_error(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Realizations in parallel, ordered by index.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<(Vec<RealizationResult>, BatchSummary)> {
    cfg.validate()?;
    let (terminal, _) = terminal_set(&cfg.params)?;
    run_batch_with_terminal(cfg, &terminal)
}

pub fn run_batch_with_terminal(cfg: &ExperimentConfig, terminal: &Polyhedron) -> Result<(Vec<RealizationResult>, BatchSummary)> {
    cfg.validate()?;
    let results = (0..cfg.realizations)
        .into_par_iter()
        .map(|i| run_learning_mpc(cfg, terminal, i))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &results);
    Ok((results, summary))
}

/// Right-continuous ECDF at the distinct values.
pub fn empirical_cdf(costs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if costs.is_empty() {
        return Err(Error::InvalidParameter("empty sample".into()));
    }
    let mut v = costs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (k, c) in v.iter().enumerate() {
        let frac = (k + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *c => last.1 = frac,
            _ => out.push((*c, frac)),
        }
    }
    Ok(out)
}

fn opt_index(v: Option<usize>) -> String {
    v.map(|t| t.to_string()).unwrap_or_default()
}

pub fn write_realizations_csv<W: Write>(cfg: &ExperimentConfig, results: &[RealizationResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["realization", "seed", "controller", "cost", "infeasible_at", "solver_failure_at"])?;
    for r in results {
        w.write_record([
            r.realization.to_string(),
            r.seed.to_string(),
            cfg.controller.name().to_string(),
            format_value(r.closed_loop_cost),
            opt_index(r.infeasible_at),
            opt_index(r.solver_failure_at),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step rows with 1-based modes.
pub fn write_steps_csv<W: Write>(result: &RealizationResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "w", "h", "v_e", "v_t", "u", "solve_status"])?;
    for s in &result.trajectory {
        w.write_record([
            s.t.to_string(),
            (s.w + 1).to_string(),
            format_value(s.x[0]),
            format_value(s.x[1]),
            format_value(s.x[2]),
            s.u.map(format_value).unwrap_or_default(),
            s.status.map(|st| format!("{st:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ecdf_csv<W: Write>(points: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cost", "fraction"])?;
    for (c, f) in points {
        w.write_record([format_value(*c), format_value(*f)])?;
    }
    w.flush()?;
    Ok(())
}
