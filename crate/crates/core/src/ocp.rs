//! Scenario-tree optimal control problems compiled to conic programs.
//!
//! Every node carries its state `x`, a cost-to-go epigraph `t` and a stage
//! cost epigraph `s`; non-leaf nodes also carry an input `u`. Dynamics are
//! equality rows, quadratic costs are second-order cones, and both the nested
//! cost and the headway risk constraint go through the dual systems emitted by
//! [`risk::epigraph_dual_constraints`].

use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conic::{self, Cone, ConicProgram, LinExpr, SolveStatus, SolverSettings};
use crate::error::{check_dim, Error, Result};
use crate::markov::AmbiguitySet;
use crate::mjls::{AccParams, MjlsModel};
use crate::polyhedra::Polyhedron;
use crate::risk::{self, ConicRepresentation, RiskSpec};
use crate::tree::{ScenarioTree, DEFAULT_NODE_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    /// Children are the modes with positive (singleton) probability.
    Support,
    /// Every mode is a child of every node.
    Full,
}

#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub model: MjlsModel,
    /// Supplies the cost weights `q`, `r` and the reference speed.
    pub params: AccParams,
    pub horizon: usize,
    /// Ambiguity over the successor mode, one set per current mode.
    pub mode_ambiguity: Vec<AmbiguitySet>,
    pub delta: f64,
    pub terminal_set: Polyhedron,
    pub branching: Branching,
    /// Also impose the state constraints at leaves (off: leaves are bound by
    /// the terminal set only).
    pub bind_state_at_leaves: bool,
    pub node_cap: usize,
}

impl OcpSpec {
    pub fn new(
        model: MjlsModel,
        params: AccParams,
        horizon: usize,
        mode_ambiguity: Vec<AmbiguitySet>,
        delta: f64,
        terminal_set: Polyhedron,
        branching: Branching,
    ) -> Result<Self> {
        let spec = Self {
            model,
            params,
            horizon,
            mode_ambiguity,
            delta,
            terminal_set,
            branching,
            bind_state_at_leaves: false,
            node_cap: DEFAULT_NODE_CAP,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model.num_modes();
        check_dim(d, self.mode_ambiguity.len())?;
        for a in &self.mode_ambiguity {
            check_dim(d, a.dim())?;
        }
        check_dim(self.model.state_dim(), self.terminal_set.dim())?;
        if self.model.state_dim() < 2 {
            return Err(Error::InvalidParameter("cost needs the speed as second state".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if self.branching == Branching::Support
            && self.mode_ambiguity.iter().any(|a| !matches!(a, AmbiguitySet::Singleton { .. }))
        {
            return Err(Error::InvalidParameter("support branching needs singleton ambiguity".into()));
        }
        Ok(())
    }

    pub fn build_tree(&self, w0: usize) -> Result<ScenarioTree> {
        match self.branching {
            Branching::Full => ScenarioTree::build_full(self.model.num_modes(), self.horizon, w0, self.node_cap),
            Branching::Support => {
                let p: Vec<Vec<f64>> = self
                    .mode_ambiguity
                    .iter()
                    .map(|a| a.center().expect("validated singleton").to_vec())
                    .collect();
                ScenarioTree::build_support(&p, self.horizon, w0, self.node_cap)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeVars {
    pub x: Range<usize>,
    pub u: Option<Range<usize>>,
    /// Cost-to-go epigraph.
    pub t: usize,
    /// Stage (or terminal) cost epigraph.
    pub s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMap {
    pub nodes: Vec<NodeVars>,
    /// Dual multipliers of the nested cost, per non-leaf node.
    pub cost_duals: Vec<Range<usize>>,
    /// Dual multipliers of the headway risk constraint, per non-leaf node.
    pub constraint_duals: Vec<Range<usize>>,
}

#[derive(Clone, Debug)]
pub struct AssembledOcp {
    pub program: ConicProgram,
    /// Program objective times this factor is the OCP cost.
    pub cost_scale: f64,
    pub vars: VariableMap,
    pub tree: ScenarioTree,
}

/// Risk specs for the children of a node of mode `mode`, in child order.
fn node_risks(spec: &OcpSpec, tree: &ScenarioTree, node: usize) -> Result<(RiskSpec, RiskSpec)> {
    let amb = &spec.mode_ambiguity[tree.nodes[node].mode];
    match spec.branching {
        Branching::Full => Ok((
            RiskSpec::max_expectation(amb.clone()),
            RiskSpec::robust_avar(amb.clone(), spec.delta)?,
        )),
        Branching::Support => {
            let p: Vec<f64> = tree.nodes[node].children.iter().map(|&c| tree.nodes[c].prob).collect();
            let total: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / total).collect();
            Ok((
                RiskSpec::max_expectation(AmbiguitySet::singleton(p.clone())?),
                RiskSpec::avar(p, spec.delta)?,
            ))
        }
    }
}

fn add_polyhedron_rows(prog: &mut ConicProgram, poly: &Polyhedron, vars: &Range<usize>) -> Result<()> {
    if poly.num_rows() == 0 {
        return Ok(());
    }
    let g = poly.g();
    let rows = (0..poly.num_rows())
        .map(|r| vars.clone().enumerate().filter(|&(k, _)| g[(r, k)] != 0.0).map(|(k, j)| (j, g[(r, k)])).collect())
        .collect();
    prog.add_block(Cone::Nonneg(poly.num_rows()), rows, poly.h().iter().copied().collect())
}

/// Costs enter the program divided by this factor, a rough magnitude of the
/// optimal cost from `x0`. Epigraph values near 1 keep the second-order cones
/// well conditioned; at the raw scale (costs in the thousands) the
/// interior-point iteration stalls short of its tolerance.
pub fn cost_scale(params: &AccParams, horizon: usize, x0: &DVector<f64>) -> f64 {
    let dv = x0[1] - params.v_ref;
    ((horizon + 1) as f64 * params.q * dv * dv).max(1.0)
}

pub fn assemble(spec: &OcpSpec, x0: &DVector<f64>, w0: usize) -> Result<AssembledOcp> {
    spec.validate()?;
    let nx = spec.model.state_dim();
    let nu = spec.model.input_dim();
    check_dim(nx, x0.len())?;
    if w0 >= spec.model.num_modes() {
        return Err(Error::ModeOutOfRange { mode: w0, modes: spec.model.num_modes() });
    }
    let tree = spec.build_tree(w0)?;
    let mut prog = ConicProgram::new(0);

    let mut nodes = Vec::with_capacity(tree.len());
    for i in 0..tree.len() {
        let x = prog.add_variables(nx);
        let u = (!tree.is_leaf(i)).then(|| prog.add_variables(nu));
        let t = prog.add_variable();
        let s = prog.add_variable();
        nodes.push(NodeVars { x, u, t, s });
    }
    prog.set_objective(nodes[0].t, 1.0);

    let root = &nodes[0].x;
    let rows = root.clone().map(|j| vec![(j, 1.0)]).collect();
    prog.add_block(Cone::Zero(nx), rows, x0.iter().copied().collect())?;

    let (q, r, v_ref) = (spec.params.q, spec.params.r, spec.params.v_ref);
    let k = cost_scale(&spec.params, spec.horizon, x0);
    let (two_sq, two_sr) = (2.0 * (q / k).sqrt(), 2.0 * (r / k).sqrt());
    let soft = &spec.model.soft;

    // Representations depend only on the node mode under full branching.
    let mut cache: Vec<Option<(ConicRepresentation, ConicRepresentation)>> = vec![None; spec.model.num_modes()];
    let mut cost_duals = Vec::new();
    let mut constraint_duals = Vec::new();

    for i in 0..tree.len() {
        let nv = nodes[i].clone();
        let v = nv.x.start + 1;
        if let Some(u) = &nv.u {
            // (s+1, s−1, 2√(q/k) (v − v_ref), 2√(r/k) u) ∈ SOC: k s ≥ q (v − v_ref)² + r‖u‖².
            let mut rows = vec![vec![(nv.s, -1.0)], vec![(nv.s, -1.0)], vec![(v, -two_sq)]];
            let mut b = vec![1.0, -1.0, -two_sq * v_ref];
            for j in u.clone() {
                rows.push(vec![(j, -two_sr)]);
                b.push(0.0);
            }
            prog.add_block(Cone::SecondOrder(3 + nu), rows, b)?;

            add_polyhedron_rows(&mut prog, &spec.model.state_set, &nv.x)?;
            add_polyhedron_rows(&mut prog, &spec.model.input_set, u)?;

            let children = &tree.nodes[i].children;
            for &c in children {
                let dyn_ = spec.model.mode(tree.nodes[c].mode)?;
                let xc = &nodes[c].x;
                let mut rows = Vec::with_capacity(nx);
                for k in 0..nx {
                    let mut row = vec![(xc.start + k, 1.0)];
                    for (m, j) in nv.x.clone().enumerate() {
                        if dyn_.a[(k, m)] != 0.0 {
                            row.push((j, -dyn_.a[(k, m)]));
                        }
                    }
                    for (m, j) in u.clone().enumerate() {
                        if dyn_.b[(k, m)] != 0.0 {
                            row.push((j, -dyn_.b[(k, m)]));
                        }
                    }
                    rows.push(row);
                }
                prog.add_block(Cone::Zero(nx), rows, dyn_.p.iter().copied().collect())?;
            }

            let (cost_rep, cons_rep) = match spec.branching {
                Branching::Full => {
                    let mode = tree.nodes[i].mode;
                    if cache[mode].is_none() {
                        let (c, g) = node_risks(spec, &tree, i)?;
                        cache[mode] = Some((risk::conic_representation(&c)?, risk::conic_representation(&g)?));
                    }
                    cache[mode].clone().unwrap()
                }
                Branching::Support => {
                    let (c, g) = node_risks(spec, &tree, i)?;
                    (risk::conic_representation(&c)?, risk::conic_representation(&g)?)
                }
            };

            let g_vals: Vec<LinExpr> = children
                .iter()
                .map(|&c| LinExpr {
                    terms: nodes[c].x.clone().zip(soft.coeffs.iter()).filter(|(_, &a)| a != 0.0).map(|(j, &a)| (j, a)).collect(),
                    constant: soft.offset,
                })
                .collect();
            constraint_duals.push(risk::epigraph_dual_constraints(&cons_rep, &mut prog, &g_vals, &LinExpr::constant(0.0))?);

            let t_vals: Vec<LinExpr> = children.iter().map(|&c| LinExpr::var(nodes[c].t)).collect();
            let budget = LinExpr { terms: vec![(nv.t, 1.0), (nv.s, -1.0)], constant: 0.0 };
            cost_duals.push(risk::epigraph_dual_constraints(&cost_rep, &mut prog, &t_vals, &budget)?);
        } else {
            // Same cone without the input, and t ≥ s.
            prog.add_block(
                Cone::SecondOrder(3),
                vec![vec![(nv.s, -1.0)], vec![(nv.s, -1.0)], vec![(v, -two_sq)]],
                vec![1.0, -1.0, -two_sq * v_ref],
            )?;
            prog.add_inequality(vec![(nv.s, 1.0), (nv.t, -1.0)], 0.0)?;
            add_polyhedron_rows(&mut prog, &spec.terminal_set, &nv.x)?;
            if spec.bind_state_at_leaves {
                add_polyhedron_rows(&mut prog, &spec.model.state_set, &nv.x)?;
            }
        }
    }

    Ok(AssembledOcp {
        program: prog,
        cost_scale: k,
        vars: VariableMap { nodes, cost_duals, constraint_duals },
        tree,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePolicy {
    /// Input per non-leaf node (node order).
    pub inputs: Vec<DVector<f64>>,
    /// Predicted state per node.
    pub states: Vec<DVector<f64>>,
    pub objective: f64,
}

impl NodePolicy {
    pub fn extract_control(&self) -> &DVector<f64> {
        &self.inputs[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OcpOutcome {
    Solved(NodePolicy),
    Infeasible { certificate_verified: bool },
    /// The solver stopped without a solution or certificate.
    SolverFailure(SolveStatus),
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub outcome: OcpOutcome,
    /// Solver status, or `PrimalInfeasible` when a stalled solve was
    /// resolved by the feasibility retry.
    pub status: SolveStatus,
    pub iterations: u32,
    pub solve_time: f64,
    pub tree: ScenarioTree,
}

impl OcpSolution {
    pub fn policy(&self) -> Option<&NodePolicy> {
        match &self.outcome {
            OcpOutcome::Solved(p) => Some(p),
            _ => None,
        }
    }
}

pub fn solve_ocp(spec: &OcpSpec, x0: &DVector<f64>, w0: usize, settings: &SolverSettings) -> Result<OcpSolution> {
    let asm = assemble(spec, x0, w0)?;
    solve_assembled(asm, settings)
}

pub fn solve_assembled(asm: AssembledOcp, settings: &SolverSettings) -> Result<OcpSolution> {
    let res = conic::solve(&asm.program, settings)?;
    let outcome = match res.status {
        SolveStatus::Optimal | SolveStatus::Inaccurate => {
            let read = |r: &Range<usize>| DVector::from_iterator(r.len(), r.clone().map(|j| res.x[j]));
            let inputs = asm.vars.nodes.iter().filter_map(|n| n.u.as_ref().map(read)).collect();
            let states = asm.vars.nodes.iter().map(|n| read(&n.x)).collect();
            OcpOutcome::Solved(NodePolicy { inputs, states, objective: res.objective * asm.cost_scale })
        }
        SolveStatus::PrimalInfeasible => OcpOutcome::Infeasible {
            certificate_verified: res
                .certificate
                .as_deref()
                .is_some_and(|y| conic::verify_certificate(&asm.program, y, settings.cert_tol)),
        },
        other => feasibility_fallback(&asm, settings)?.unwrap_or(OcpOutcome::SolverFailure(other)),
    };
    let status = match outcome {
        OcpOutcome::Infeasible { .. } => SolveStatus::PrimalInfeasible,
        _ => res.status,
    };
    Ok(OcpSolution {
        outcome,
        status,
        iterations: res.iterations,
        solve_time: res.solve_time,
        tree: asm.tree,
    })
}

/// Near-infeasible instances can stall the solver before it settles on a
/// certificate; feasibility does not depend on the objective, so retry
/// without it.
fn feasibility_fallback(asm: &AssembledOcp, settings: &SolverSettings) -> Result<Option<OcpOutcome>> {
    let mut feas = asm.program.clone();
    feas.objective.iter_mut().for_each(|c| *c = 0.0);
    let res = conic::solve(&feas, settings)?;
    Ok((res.status == SolveStatus::PrimalInfeasible).then(|| OcpOutcome::Infeasible {
        certificate_verified: res
            .certificate
            .as_deref()
            .is_some_and(|y| conic::verify_certificate(&feas, y, settings.cert_tol)),
    }))
}
