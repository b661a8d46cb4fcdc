//! Convex conic programs over zero, nonnegative and second-order cones.
//!
//! A [`ConicProgram`] minimizes `cᵀx` subject to blocks `b − A x ∈ K`. Rows are
//! stored sparsely so the scenario-tree programs assembled by the OCP compiler
//! stay small in memory. Solving is delegated to Clarabel's homogeneous
//! self-dual interior-point method, which yields Farkas certificates when the
//! program is primal infeasible; [`verify_certificate`] re-checks those
//! certificates without going through the solver.

use std::ops::Range;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse row: `(column, coefficient)` pairs. Repeated columns are summed.
pub type SparseRow = Vec<(usize, f64)>;

/// Affine expression `Σ coeff·x_j + constant` over program variables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: SparseRow,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(j: usize) -> Self {
        Self { terms: vec![(j, 1.0)], constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(j, v)| v * x[j]).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    /// `s = 0`
    Zero(usize),
    /// `s ≥ 0`
    Nonneg(usize),
    /// `s₁ ≥ ‖(s₂, …, s_dim)‖₂`
    SecondOrder(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(k) | Cone::Nonneg(k) | Cone::SecondOrder(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBlock {
    pub cone: Cone,
    pub rows: Vec<SparseRow>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub blocks: Vec<ConeBlock>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: vec![0.0; num_vars],
            blocks: Vec::new(),
        }
    }

    pub fn add_variable(&mut self) -> usize {
        self.num_vars += 1;
        self.objective.push(0.0);
        self.num_vars - 1
    }

    pub fn add_variables(&mut self, count: usize) -> Range<usize> {
        let start = self.num_vars;
        self.num_vars += count;
        self.objective.resize(self.num_vars, 0.0);
        start..self.num_vars
    }

    pub fn set_objective(&mut self, var: usize, coeff: f64) {
        self.objective[var] = coeff;
    }

    /// Appends the block `b − A x ∈ cone`.
    pub fn add_block(&mut self, cone: Cone, rows: Vec<SparseRow>, b: Vec<f64>) -> Result<()> {
        let block = ConeBlock { cone, rows, b };
        self.check_block(&block)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Single equality row `row·x = b`.
    pub fn add_equality(&mut self, row: SparseRow, b: f64) -> Result<()> {
        self.add_block(Cone::Zero(1), vec![row], vec![b])
    }

    /// Single inequality row `row·x ≤ b`.
    pub fn add_inequality(&mut self, row: SparseRow, b: f64) -> Result<()> {
        self.add_block(Cone::Nonneg(1), vec![row], vec![b])
    }

    pub fn num_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.len()).sum()
    }

    fn check_block(&self, block: &ConeBlock) -> Result<()> {
        let dim = block.cone.dim();
        if block.rows.len() != dim || block.b.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: block.rows.len().min(block.b.len()),
            });
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("empty cone block".into()));
        }
        for row in &block.rows {
            for &(j, v) in row {
                if j >= self.num_vars {
                    return Err(Error::InvalidParameter(format!(
                        "column {j} out of range for {} variables",
                        self.num_vars
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::InvalidParameter("non-finite coefficient".into()));
                }
            }
        }
        if block.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite right-hand side".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.num_vars {
            return Err(Error::DimensionMismatch {
                expected: self.num_vars,
                got: self.objective.len(),
            });
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite objective".into()));
        }
        self.blocks.iter().try_for_each(|b| self.check_block(b))
    }

    /// `b − A x` for every row, in block order.
    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|blk| {
                blk.rows
                    .iter()
                    .zip(&blk.b)
                    .map(|(row, b)| b - row.iter().map(|&(j, v)| v * x[j]).sum::<f64>())
            })
            .collect()
    }

    /// Largest cone violation of `b − A x` over all blocks (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let s = self.slacks(x);
        let mut offset = 0;
        let mut worst: f64 = 0.0;
        for blk in &self.blocks {
            let k = blk.cone.dim();
            let seg = &s[offset..offset + k];
            let v = match blk.cone {
                Cone::Zero(_) => seg.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
                Cone::Nonneg(_) => seg.iter().fold(0.0_f64, |m, v| m.max(-v)),
                Cone::SecondOrder(_) => norm2(&seg[1..]) - seg[0],
            };
            worst = worst.max(v);
            offset += k;
        }
        worst
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let prog: ConicProgram = serde_json::from_str(text)?;
        prog.validate()?;
        Ok(prog)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub cert_tol: f64,
    /// Threshold on the homogeneous `κ/τ` ratio below which the solver tests
    /// for infeasibility; looser than Clarabel's default so certificates are
    /// found for programs that are infeasible by a small margin.
    pub ktratio_tol: f64,
    pub max_iter: u32,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            cert_tol: 1e-7,
            ktratio_tol: 1e-4,
            max_iter: 200,
        }
    }
}

impl SolverSettings {
    /// Tighter tolerances for the small geometric LPs used on polyhedra.
    pub fn precise() -> Self {
        Self {
            feas_tol: 1e-10,
            gap_tol: 1e-10,
            cert_tol: 1e-7,
            ktratio_tol: 1e-4,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// Converged only to the solver's reduced accuracy thresholds.
    Inaccurate,
    PrimalInfeasible,
    /// The objective is unbounded below.
    DualInfeasible,
    MaxIterations,
    NumericalFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Farkas multiplier per row (block order), present for `PrimalInfeasible`.
    pub certificate: Option<Vec<f64>>,
    pub iterations: u32,
    pub solve_time: f64,
}

impl SolveResult {
    pub fn is_solved(&self) -> bool {
        matches!(self.status, SolveStatus::Optimal | SolveStatus::Inaccurate)
    }
}

pub fn solve(prog: &ConicProgram, settings: &SolverSettings) -> Result<SolveResult> {
    prog.validate()?;
    let start = Instant::now();
    // Iterative refinement of the KKT solves more than doubles the cost of a
    // solve, so the first attempt runs without it and only a clean verdict is
    // kept. Otherwise escalate: refinement on, then (near-infeasible programs,
    // where κ/τ hovers around the threshold) a looser κ/τ test.
    let mut attempts = vec![(false, settings.ktratio_tol), (true, settings.ktratio_tol)];
    if settings.ktratio_tol < RETRY_KTRATIO {
        attempts.push((true, RETRY_KTRATIO));
    }
    let mut iterations = 0;
    let mut best: Option<SolveResult> = None;
    for (refine, ktratio) in attempts {
        let res = run_clarabel(prog, settings, ktratio, refine)?;
        iterations += res.iterations;
        let stalled = matches!(res.status, SolveStatus::NumericalFailure | SolveStatus::MaxIterations)
            || (!refine && res.status == SolveStatus::Inaccurate);
        if best.is_none() || res.status != SolveStatus::NumericalFailure {
            best = Some(res);
        }
        if !stalled {
            break;
        }
    }
    Ok(SolveResult {
        iterations,
        solve_time: start.elapsed().as_secs_f64(),
        ..best.expect("at least one attempt")
    })
}

/// `κ/τ` threshold of the retry after a stalled solve.
const RETRY_KTRATIO: f64 = 1e-3;

fn run_clarabel(prog: &ConicProgram, settings: &SolverSettings, ktratio: f64, refine: bool) -> Result<SolveResult> {
    let n = prog.num_vars;

    // Clarabel takes one cone list; equalities and inequalities are pooled into
    // one block each, second-order blocks keep their order. `perm[k]` is the
    // original row of solver row k.
    let mut offsets = Vec::with_capacity(prog.blocks.len());
    let mut total = 0;
    for blk in &prog.blocks {
        offsets.push(total);
        total += blk.cone.dim();
    }
    let mut perm = Vec::with_capacity(total);
    let mut cones = Vec::new();
    for kind in 0..2 {
        let start_len = perm.len();
        for (blk, &off) in prog.blocks.iter().zip(&offsets) {
            let hit = matches!((kind, blk.cone), (0, Cone::Zero(_)) | (1, Cone::Nonneg(_)));
            if hit {
                perm.extend(off..off + blk.cone.dim());
            }
        }
        let k = perm.len() - start_len;
        if k > 0 {
            cones.push(if kind == 0 {
                SupportedConeT::ZeroConeT(k)
            } else {
                SupportedConeT::NonnegativeConeT(k)
            });
        }
    }
    for (blk, &off) in prog.blocks.iter().zip(&offsets) {
        if let Cone::SecondOrder(k) = blk.cone {
            perm.extend(off..off + k);
            cones.push(SupportedConeT::SecondOrderConeT(k));
        }
    }

    let mut flat_rows: Vec<(&SparseRow, f64)> = Vec::with_capacity(total);
    for blk in &prog.blocks {
        for (row, &b) in blk.rows.iter().zip(&blk.b) {
            flat_rows.push((row, b));
        }
    }
    let nnz: usize = flat_rows.iter().map(|(r, _)| r.len()).sum();
    let (mut ii, mut jj, mut vv) = (
        Vec::with_capacity(nnz),
        Vec::with_capacity(nnz),
        Vec::with_capacity(nnz),
    );
    let mut b = Vec::with_capacity(total);
    for (k, &orig) in perm.iter().enumerate() {
        let (row, rhs) = flat_rows[orig];
        for &(j, v) in row {
            if v != 0.0 {
                ii.push(k);
                jj.push(j);
                vv.push(v);
            }
        }
        b.push(rhs);
    }
    let a = CscMatrix::new_from_triplets(total, n, ii, jj, vv);
    let p = CscMatrix::zeros((n, n));

    let clarabel_settings = DefaultSettingsBuilder::default()
        .verbose(std::env::var_os("DRMPC_SOLVER_TRACE").is_some())
        .max_iter(settings.max_iter)
        .tol_feas(settings.feas_tol)
        .tol_gap_abs(settings.gap_tol)
        .tol_gap_rel(settings.gap_tol)
        .tol_infeas_abs(settings.feas_tol)
        .tol_infeas_rel(settings.feas_tol)
        .tol_ktratio(ktratio)
        .presolve_enable(false)
        .iterative_refinement_enable(refine)
        .build()
        .map_err(|e| Error::Solver(e.to_string()))?;

    let mut solver = DefaultSolver::new(&p, &prog.objective, &a, &b, &cones, clarabel_settings)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::Inaccurate,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::PrimalInfeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            SolveStatus::DualInfeasible
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIterations,
        _ => SolveStatus::NumericalFailure,
    };

    let certificate = (status == SolveStatus::PrimalInfeasible).then(|| {
        let mut y = vec![0.0; total];
        for (k, &orig) in perm.iter().enumerate() {
            y[orig] = sol.z[k];
        }
        y
    });
    let objective = match status {
        SolveStatus::Optimal | SolveStatus::Inaccurate => prog.objective_value(&sol.x),
        SolveStatus::PrimalInfeasible => f64::INFINITY,
        SolveStatus::DualInfeasible => f64::NEG_INFINITY,
        _ => f64::NAN,
    };

    // Almost-infeasible verdicts must stand on their own certificate.
    let status = match (status, &certificate) {
        (SolveStatus::PrimalInfeasible, Some(y))
            if !verify_certificate(prog, y, settings.cert_tol) =>
        {
            SolveStatus::NumericalFailure
        }
        (s, _) => s,
    };

    Ok(SolveResult {
        status,
        x: sol.x.clone(),
        objective,
        certificate,
        iterations: sol.iterations,
        solve_time: 0.0,
    })
}

/// Checks the Farkas conditions for primal infeasibility of `b − A x ∈ K`:
/// `y ∈ K*`, `Aᵀy = 0` and `bᵀy < 0`. The certificate is normalized so that
/// `bᵀy = −1` before the residual and cone checks are compared to `cert_tol`.
pub fn verify_certificate(prog: &ConicProgram, certificate: &[f64], cert_tol: f64) -> bool {
    if certificate.len() != prog.num_rows() || certificate.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let by: f64 = prog
        .blocks
        .iter()
        .flat_map(|blk| blk.b.iter())
        .zip(certificate)
        .map(|(b, y)| b * y)
        .sum();
    if by >= -f64::EPSILON {
        return false;
    }
    let scale = -by;

    let mut aty = vec![0.0; prog.num_vars];
    let mut offset = 0;
    for blk in &prog.blocks {
        let k = blk.cone.dim();
        let y = &certificate[offset..offset + k];
        for (row, &yi) in blk.rows.iter().zip(y) {
            for &(j, v) in row {
                aty[j] += v * yi / scale;
            }
        }
        let dual_ok = match blk.cone {
            Cone::Zero(_) => true,
            Cone::Nonneg(_) => y.iter().all(|&yi| yi / scale >= -cert_tol),
            Cone::SecondOrder(_) => y[0] / scale >= norm2(&y[1..]) / scale - cert_tol,
        };
        if !dual_ok {
            return false;
        }
        offset += k;
    }
    aty.iter().all(|v| v.abs() <= cert_tol)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
