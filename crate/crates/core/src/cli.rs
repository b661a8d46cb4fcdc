//! `drmpc` command line: JSON configs in, CSV/JSON artifacts out.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conic::SolverSettings;
use crate::error::{Error, Result};
use crate::markov::{preset_matrix, radius, TransitionEstimate};
use crate::mjls::{build_acc_model, AccParams};
use crate::ocp::{assemble, solve_assembled, OcpOutcome};
use crate::polyhedra::PolyhedronJson;
use crate::safety::{rci_iterate, rpi_candidate, safety_grid, write_grid_csv, RCI_MAX_ITER, RCI_TOL};
use crate::simulator::{
    empirical_cdf, initial_ambiguity, ocp_spec, run_batch, terminal_set, write_ecdf_csv, write_realizations_csv,
    write_steps_csv, Controller, ExperimentConfig, ForcedMode,
};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "drmpc", about = "Learning-based risk-averse MPC for Markov jump linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Iterate the RCI terminal set and export minimal safety distances.
    InvariantSet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Closed-loop batch simulation.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write per-step CSVs.
        #[arg(long)]
        verbose: bool,
    },
    /// Assemble and solve a single OCP.
    SolveOnce {
        #[arg(long)]
        config: PathBuf,
        /// Initial state `h,v_e,v_t` (defaults to the experiment's x0).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Initial mode, 1-based.
        #[arg(long)]
        w0: Option<usize>,
        /// Write the conic program as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Estimate transition probabilities and radii from a mode sequence.
    Estimate {
        /// Whitespace- or comma-separated 1-based modes.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        modes: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

/// Table 1 values; the mode vector `c` has to come from the config.
pub fn params_preset(name: &str) -> Option<Value> {
    let table1 = json!({"ts": 0.5, "a_min": -4.0, "a_max": 5.0, "v_max": 40.0, "v_ref": 30.0, "q": 5.0, "r": 10.0});
    match name {
        "table1" => Some(table1),
        "fig3" => {
            let mut v = table1;
            v["a_min"] = json!(-5.0);
            v["c"] = json!([1.13, -0.02, -0.33, -0.16]);
            Some(v)
        }
        _ => None,
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSection {
    /// Preset name (`P_p`, `P_s`) or explicit matrix.
    pub p_true: Value,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    #[serde(default)]
    pub offline_n: usize,
    #[serde(default = "yes")]
    pub online_learning: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedModeSection {
    /// 1-based.
    pub mode: usize,
    pub step: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "one")]
    pub realizations: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub forced_mode: Option<ForcedModeSection>,
    pub x0: Vec<f64>,
    /// 1-based.
    pub w0: usize,
}

fn default_steps() -> usize {
    50
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSetSection {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_rci_tol")]
    pub tol: f64,
    #[serde(default = "default_vt")]
    pub v_t: f64,
    #[serde(default)]
    pub v_e_min: f64,
    #[serde(default = "default_ve_max")]
    pub v_e_max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

impl Default for InvariantSetSection {
    fn default() -> Self {
        Self { max_iter: RCI_MAX_ITER, tol: RCI_TOL, v_t: 20.0, v_e_min: 0.0, v_e_max: 30.0, points: 61 }
    }
}

fn default_max_iter() -> usize {
    RCI_MAX_ITER
}
fn default_rci_tol() -> f64 {
    RCI_TOL
}
fn default_vt() -> f64 {
    20.0
}
fn default_ve_max() -> f64 {
    30.0
}
fn default_points() -> usize {
    61
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub params: Value,
    pub markov: Option<MarkovSection>,
    pub controller: Option<String>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub experiment: Option<ExperimentSection>,
    #[serde(default)]
    pub invariant_set: InvariantSetSection,
    #[serde(default)]
    pub solver: Option<SolverSettings>,
}

fn default_horizon() -> usize {
    3
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn acc_params(&self) -> Result<AccParams> {
        let merged = match &self.params {
            Value::String(name) => params_preset(name).ok_or_else(|| config_err(format!("unknown params preset {name:?}")))?,
            Value::Object(obj) => {
                let mut base = match obj.get("preset") {
                    Some(Value::String(name)) => {
                        params_preset(name).ok_or_else(|| config_err(format!("unknown params preset {name:?}")))?
                    }
                    Some(_) => return Err(config_err("params.preset must be a string")),
                    None => json!({}),
                };
                for (k, v) in obj.iter().filter(|(k, _)| *k != "preset") {
                    base[k] = v.clone();
                }
                base
            }
            _ => return Err(config_err("params must be a preset name or an object")),
        };
        if merged.get("c").is_none() {
            return Err(config_err("params.c (mode parameters) is required"));
        }
        let p: AccParams = serde_json::from_value(merged).map_err(|e| config_err(format!("params: {e}")))?;
        p.validate().map_err(|e| config_err(format!("params: {e}")))?;
        Ok(p)
    }

    pub fn p_true(&self) -> Result<Vec<Vec<f64>>> {
        let m = self.markov.as_ref().ok_or_else(|| config_err("missing markov section"))?;
        match &m.p_true {
            Value::String(name) => preset_matrix(name).ok_or_else(|| config_err(format!("unknown matrix preset {name:?}"))),
            v => serde_json::from_value(v.clone()).map_err(|e| config_err(format!("markov.p_true: {e}"))),
        }
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let params = self.acc_params()?;
        let m = self.markov.clone().ok_or_else(|| config_err("missing markov section"))?;
        let e = self.experiment.as_ref().ok_or_else(|| config_err("missing experiment section"))?;
        let controller = match self.controller.as_deref() {
            Some("stochastic") => Controller::Stochastic,
            Some("risk_averse") => Controller::RiskAverse { alpha: m.alpha.unwrap_or(0.05) },
            Some("robust") => Controller::Robust,
            Some(other) => return Err(config_err(format!("unknown controller {other:?}"))),
            None => return Err(config_err("missing controller")),
        };
        let delta = m.delta.unwrap_or(match controller {
            Controller::Stochastic => 0.1,
            _ => 0.05,
        });
        let to_internal = |w: usize, what: &str| {
            w.checked_sub(1).ok_or_else(|| config_err(format!("{what} is 1-based, got 0")))
        };
        let forced_mode = match &e.forced_mode {
            Some(f) => Some(ForcedMode { mode: to_internal(f.mode, "forced_mode.mode")?, step: f.step }),
            None => None,
        };
        let cfg = ExperimentConfig {
            params,
            p_true: self.p_true()?,
            controller,
            delta,
            horizon: self.horizon,
            steps: e.steps,
            realizations: e.realizations,
            master_seed: e.master_seed,
            offline_n: m.offline_n,
            x0: e.x0.clone(),
            w0: to_internal(e.w0, "w0")?,
            forced_mode,
            online_learning: m.online_learning,
            solver: self.solver.unwrap_or_default(),
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn pretty(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Writes `rci.json` and `safety_grid.csv`; returns whether the iteration
/// converged.
pub fn cmd_invariant_set(cfg: &CliConfig, out: &Path) -> Result<bool> {
    let params = cfg.acc_params()?;
    let inv = &cfg.invariant_set;
    params.validate_braking().map_err(|e| config_err(e.to_string()))?;
    let model = build_acc_model(&params)?;
    let r0 = rpi_candidate(&params)?;
    let rci = rci_iterate(&model, &model.state_set, &model.soft.as_polyhedron(), &r0, inv.max_iter, inv.tol)?;
    let grid = safety_grid(&params, &rci, inv.v_t, inv.v_e_min, inv.v_e_max, inv.points)?;

    let meta = json!({
        "converged": rci.converged,
        "iterations": rci.iterations,
        "rows_per_iterate": rci.iterates.iter().map(|r| r.num_rows()).collect::<Vec<_>>(),
        "initial_set": PolyhedronJson::from(&rci.iterates[0]),
        "final_set": PolyhedronJson::from(rci.last()),
    });
    write_file(&out.join("rci.json"), &pretty(&meta)?)?;
    let mut csv = Vec::new();
    write_grid_csv(&grid, &mut csv)?;
    write_file(&out.join("safety_grid.csv"), &csv)?;
    println!(
        "rci: converged={} iterations={} rows={}",
        rci.converged,
        rci.iterations,
        rci.last().num_rows()
    );
    Ok(rci.converged)
}

/// Writes `realizations.csv`, `summary.json`, `ecdf.csv` and, when verbose,
/// `steps/realization_<i>.csv`.
pub fn cmd_simulate(cfg: &CliConfig, out: &Path, verbose: bool) -> Result<()> {
    let exp = cfg.experiment()?;
    let (results, summary) = run_batch(&exp)?;

    let mut buf = Vec::new();
    write_realizations_csv(&exp, &results, &mut buf)?;
    write_file(&out.join("realizations.csv"), &buf)?;
    write_file(&out.join("summary.json"), &pretty(&summary)?)?;

    let costs: Vec<f64> = results
        .iter()
        .filter(|r| r.infeasible_at.is_none() && r.solver_failure_at.is_none())
        .map(|r| r.closed_loop_cost)
        .collect();
    let mut buf = Vec::new();
    if !costs.is_empty() {
        write_ecdf_csv(&empirical_cdf(&costs)?, &mut buf)?;
    } else {
        write_ecdf_csv(&[], &mut buf)?;
    }
    write_file(&out.join("ecdf.csv"), &buf)?;

    if verbose {
        for r in &results {
            let mut buf = Vec::new();
            write_steps_csv(r, &mut buf)?;
            write_file(&out.join("steps").join(format!("realization_{}.csv", r.realization)), &buf)?;
        }
    }
    println!(
        "{}: {} realizations, {} infeasible ({:.3}), {} solver failures, mean cost {}",
        summary.controller,
        summary.realizations,
        summary.infeasible,
        summary.infeasibility_fraction,
        summary.solver_failures,
        summary.mean_cost
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveOnceReport {
    pub status: String,
    pub u0: Option<f64>,
    pub objective: Option<f64>,
    pub certificate_verified: Option<bool>,
    pub iterations: u32,
}

pub fn cmd_solve_once(
    cfg: &CliConfig,
    x0: Option<Vec<f64>>,
    w0: Option<usize>,
    dump: Option<&Path>,
) -> Result<SolveOnceReport> {
    let mut exp = cfg.experiment()?;
    if let Some(x) = x0 {
        exp.x0 = x;
    }
    if let Some(w) = w0 {
        exp.w0 = w.checked_sub(1).ok_or_else(|| config_err("w0 is 1-based, got 0"))?;
    }
    exp.validate().map_err(|e| config_err(e.to_string()))?;
    let (terminal, _) = terminal_set(&exp.params)?;
    let spec = ocp_spec(&exp, &build_acc_model(&exp.params)?, &terminal, initial_ambiguity(&exp, 0)?)?;
    let asm = assemble(&spec, &DVector::from_column_slice(&exp.x0), exp.w0)?;
    if let Some(path) = dump {
        write_file(path, asm.program.to_json()?.as_bytes())?;
    }
    let sol = solve_assembled(asm, &exp.solver)?;
    let report = match &sol.outcome {
        OcpOutcome::Solved(p) => SolveOnceReport {
            status: format!("{:?}", sol.status),
            u0: Some(p.extract_control()[0]),
            objective: Some(p.objective),
            certificate_verified: None,
            iterations: sol.iterations,
        },
        OcpOutcome::Infeasible { certificate_verified } => SolveOnceReport {
            status: format!("{:?}", sol.status),
            u0: None,
            objective: None,
            certificate_verified: Some(*certificate_verified),
            iterations: sol.iterations,
        },
        OcpOutcome::SolverFailure(st) => return Err(Error::Solver(format!("solver stopped with {st:?}"))),
    };
    Ok(report)
}

/// Parses 1-based modes separated by whitespace or commas.
pub fn parse_sample(text: &str, d: usize) -> Result<Vec<usize>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let w: usize = s.parse().map_err(|_| config_err(format!("not a mode: {s:?}")))?;
            if w == 0 || w > d {
                return Err(config_err(format!("mode {w} outside 1..={d}")));
            }
            Ok(w - 1)
        })
        .collect()
}

pub fn cmd_estimate(sample: &Path, d: usize, alpha: f64) -> Result<Value> {
    let text = fs::read_to_string(sample).map_err(|e| config_err(format!("{}: {e}", sample.display())))?;
    let seq = parse_sample(&text, d)?;
    let est = TransitionEstimate::estimate(&seq, d).map_err(|e| config_err(e.to_string()))?;
    let radii = est.totals.iter().map(|&n| radius(alpha, d, n)).collect::<Result<Vec<_>>>()?;
    Ok(json!({"p_hat": est.p_hat, "counts": est.counts, "totals": est.totals, "alpha": alpha, "radii": radii}))
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Solver(_) => EXIT_SOLVER,
        Error::Config(_)
        | Error::Json(_)
        | Error::InvalidParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::ModeOutOfRange { .. } => EXIT_CONFIG,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InvariantSet { config, out } => {
            let cfg = CliConfig::load(&config)?;
            if !cmd_invariant_set(&cfg, &out)? {
                eprintln!("warning: RCI iteration did not converge within the cap; wrote the last iterate");
            }
        }
        Command::Simulate { config, out, verbose } => {
            let cfg = CliConfig::load(&config)?;
            cmd_simulate(&cfg, &out, verbose)?;
        }
        Command::SolveOnce { config, x0, w0, dump } => {
            let cfg = CliConfig::load(&config)?;
            let report = cmd_solve_once(&cfg, x0, w0, dump.as_deref())?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&pretty(&report)?)?;
        }
        Command::Estimate { sample, modes, alpha } => {
            let v = cmd_estimate(&sample, modes, alpha)?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&pretty(&v)?)?;
        }
    }
    Ok(())
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
