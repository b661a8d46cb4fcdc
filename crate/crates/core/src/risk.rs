//! Coherent risk measures in dual form, `ρ[z] = max {μᵀz : Eμ + Fν ⪯_K b}`.
//!
//! Numeric evaluation solves that LP; [`epigraph_dual_constraints`] emits the
//! dual system used by the OCP compiler. Both read the same
//! [`ConicRepresentation`].

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, Cone, ConicProgram, LinExpr, SolveStatus, SolverSettings, SparseRow};
use crate::error::{check_dim, Error, Result};
use crate::markov::{validate_distribution, AmbiguitySet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    Avar { p: Vec<f64>, delta: f64 },
    RobustAvar { ambiguity: AmbiguitySet, delta: f64 },
    MaxExpectation { ambiguity: AmbiguitySet },
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("delta must lie in (0, 1], got {delta}")))
    }
}

impl RiskSpec {
    pub fn avar(p: Vec<f64>, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        validate_distribution(&p, 1e-9)?;
        Ok(Self::Avar { p, delta })
    }

    pub fn robust_avar(ambiguity: AmbiguitySet, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self::RobustAvar { ambiguity, delta })
    }

    pub fn max_expectation(ambiguity: AmbiguitySet) -> Self {
        Self::MaxExpectation { ambiguity }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Avar { p, .. } => p.len(),
            Self::RobustAvar { ambiguity, .. } | Self::MaxExpectation { ambiguity } => ambiguity.dim(),
        }
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        conic_representation(self)?.value(z)
    }
}

/// Rows are ordered equalities first, then inequalities; `cones` lists the
/// non-empty blocks in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConicRepresentation {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cones: Vec<Cone>,
}

impl ConicRepresentation {
    pub fn dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn aux_dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn num_equalities(&self) -> usize {
        match self.cones.first() {
            Some(Cone::Zero(k)) => *k,
            _ => 0,
        }
    }

    /// `max μᵀz` over the represented set.
    pub fn value(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let d = self.dim();
        let mut prog = ConicProgram::new(d + self.aux_dim());
        for (i, &zi) in z.iter().enumerate() {
            prog.set_objective(i, -zi);
        }
        let mut start = 0;
        for &cone in &self.cones {
            let k = cone.dim();
            let rows = (start..start + k).map(|r| self.row(r)).collect();
            let b = self.b.rows(start, k).iter().copied().collect();
            prog.add_block(cone, rows, b)?;
            start += k;
        }
        let res = conic::solve(&prog, &SolverSettings::precise())?;
        match res.status {
            SolveStatus::Optimal | SolveStatus::Inaccurate => Ok(-res.objective),
            other => Err(Error::Solver(format!("risk LP ended with status {other:?}"))),
        }
    }

    fn row(&self, r: usize) -> SparseRow {
        let d = self.dim();
        let e = (0..d).map(|j| (j, self.e[(r, j)]));
        let f = (0..self.aux_dim()).map(|j| (d + j, self.f[(r, j)]));
        e.chain(f).filter(|&(_, v)| v != 0.0).collect()
    }
}

/// Accumulates `(row over μ, row over ν, rhs)` triples.
struct RepBuilder {
    d: usize,
    aux: usize,
    eq: Vec<(Vec<f64>, Vec<f64>, f64)>,
    ineq: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl RepBuilder {
    fn new(d: usize, aux: usize) -> Self {
        Self { d, aux, eq: Vec::new(), ineq: Vec::new() }
    }

    fn row(&self, mu: &[(usize, f64)], nu: &[(usize, f64)]) -> (Vec<f64>, Vec<f64>) {
        let mut e = vec![0.0; self.d];
        let mut f = vec![0.0; self.aux];
        for &(j, v) in mu {
            e[j] += v;
        }
        for &(j, v) in nu {
            f[j] += v;
        }
        (e, f)
    }

    fn eq(&mut self, mu: &[(usize, f64)], nu: &[(usize, f64)], b: f64) {
        let (e, f) = self.row(mu, nu);
        self.eq.push((e, f, b));
    }

    fn le(&mut self, mu: &[(usize, f64)], nu: &[(usize, f64)], b: f64) {
        let (e, f) = self.row(mu, nu);
        self.ineq.push((e, f, b));
    }

    /// Simplex constraints on the μ block.
    fn mu_simplex(&mut self) {
        let ones: Vec<_> = (0..self.d).map(|i| (i, 1.0)).collect();
        self.eq(&ones, &[], 1.0);
        for i in 0..self.d {
            self.le(&[(i, -1.0)], &[], 0.0);
        }
    }

    /// `ν[off..off+d] ∈ Δ`.
    fn nu_simplex(&mut self, off: usize) {
        let ones: Vec<_> = (0..self.d).map(|i| (off + i, 1.0)).collect();
        self.eq(&[], &ones, 1.0);
        for i in 0..self.d {
            self.le(&[], &[(off + i, -1.0)], 0.0);
        }
    }

    /// `‖v − c‖₁ ≤ r` lifted with `s = ν[s_off..s_off+d]`, where `v` is the
    /// μ block (`on_mu`) or `ν[v_off..]`.
    fn l1_ball(&mut self, center: &[f64], radius: f64, on_mu: bool, v_off: usize, s_off: usize) {
        for (i, &c) in center.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let s = (s_off + i, -1.0);
                if on_mu {
                    self.le(&[(i, sign)], &[s], sign * c);
                } else {
                    self.le(&[], &[(v_off + i, sign), s], sign * c);
                }
            }
        }
        let ones: Vec<_> = (0..self.d).map(|i| (s_off + i, 1.0)).collect();
        self.le(&[], &ones, radius);
    }

    fn finish(self) -> ConicRepresentation {
        let m = self.eq.len() + self.ineq.len();
        let mut e = DMatrix::zeros(m, self.d);
        let mut f = DMatrix::zeros(m, self.aux);
        let mut b = DVector::zeros(m);
        for (r, (er, fr, br)) in self.eq.iter().chain(&self.ineq).enumerate() {
            for j in 0..self.d {
                e[(r, j)] = er[j];
            }
            for j in 0..self.aux {
                f[(r, j)] = fr[j];
            }
            b[r] = *br;
        }
        let mut cones = Vec::new();
        if !self.eq.is_empty() {
            cones.push(Cone::Zero(self.eq.len()));
        }
        if !self.ineq.is_empty() {
            cones.push(Cone::Nonneg(self.ineq.len()));
        }
        ConicRepresentation { e, f, b, cones }
    }
}

fn avar_rep(p: &[f64], delta: f64) -> ConicRepresentation {
    let d = p.len();
    let mut rb = RepBuilder::new(d, 0);
    rb.mu_simplex();
    for (i, &pi) in p.iter().enumerate() {
        rb.le(&[(i, 1.0)], &[], pi / delta);
    }
    rb.finish()
}

pub fn conic_representation(spec: &RiskSpec) -> Result<ConicRepresentation> {
    Ok(match spec {
        RiskSpec::Avar { p, delta } => {
            check_delta(*delta)?;
            avar_rep(p, *delta)
        }
        RiskSpec::MaxExpectation { ambiguity } => {
            let d = ambiguity.dim();
            match ambiguity {
                AmbiguitySet::Singleton { center } => {
                    let mut rb = RepBuilder::new(d, 0);
                    for (i, &c) in center.iter().enumerate() {
                        rb.eq(&[(i, 1.0)], &[], c);
                    }
                    rb.finish()
                }
                AmbiguitySet::FullSimplex { .. } => {
                    let mut rb = RepBuilder::new(d, 0);
                    rb.mu_simplex();
                    rb.finish()
                }
                AmbiguitySet::L1Ball { center, radius } => {
                    let mut rb = RepBuilder::new(d, d);
                    rb.mu_simplex();
                    rb.l1_ball(center, *radius, true, 0, 0);
                    rb.finish()
                }
            }
        }
        RiskSpec::RobustAvar { ambiguity, delta } => {
            check_delta(*delta)?;
            let d = ambiguity.dim();
            match ambiguity {
                // A fixed inner distribution is plain AVaR.
                AmbiguitySet::Singleton { center } => avar_rep(center, *delta),
                AmbiguitySet::FullSimplex { .. } | AmbiguitySet::L1Ball { .. } => {
                    let ball = matches!(ambiguity, AmbiguitySet::L1Ball { .. });
                    let mut rb = RepBuilder::new(d, if ball { 2 * d } else { d });
                    rb.mu_simplex();
                    for i in 0..d {
                        rb.le(&[(i, 1.0)], &[(i, -1.0 / delta)], 0.0);
                    }
                    rb.nu_simplex(0);
                    if let AmbiguitySet::L1Ball { center, radius } = ambiguity {
                        rb.l1_ball(center, *radius, false, 0, d);
                    }
                    rb.finish()
                }
            }
        }
    })
}

pub fn avar_value(z: &[f64], p: &[f64], delta: f64) -> Result<f64> {
    RiskSpec::avar(p.to_vec(), delta)?.value(z)
}

pub fn robust_avar_value(z: &[f64], ambiguity: &AmbiguitySet, delta: f64) -> Result<f64> {
    RiskSpec::robust_avar(ambiguity.clone(), delta)?.value(z)
}

pub fn max_expectation_value(z: &[f64], ambiguity: &AmbiguitySet) -> Result<f64> {
    RiskSpec::max_expectation(ambiguity.clone()).value(z)
}

/// Appends `y ∈ K*`, `Eᵀy = z`, `Fᵀy = 0`, `bᵀy ≤ t` to `prog`; the system is
/// satisfiable in `y` exactly when `ρ[z] ≤ t`. Returns the multiplier range.
pub fn epigraph_dual_constraints(
    rep: &ConicRepresentation,
    prog: &mut ConicProgram,
    z: &[LinExpr],
    t: &LinExpr,
) -> Result<Range<usize>> {
    check_dim(rep.dim(), z.len())?;
    let m = rep.num_rows();
    let y = prog.add_variables(m);
    let y0 = y.start;

    let n_eq = rep.num_equalities();
    if m > n_eq {
        let rows = (n_eq..m).map(|k| vec![(y0 + k, -1.0)]).collect();
        prog.add_block(Cone::Nonneg(m - n_eq), rows, vec![0.0; m - n_eq])?;
    }

    let mut rows: Vec<SparseRow> = Vec::with_capacity(rep.dim() + rep.aux_dim());
    let mut rhs = Vec::with_capacity(rows.capacity());
    for (i, zi) in z.iter().enumerate() {
        let mut row: SparseRow = column_terms(&rep.e, i, y0);
        row.extend(zi.terms.iter().map(|&(j, v)| (j, -v)));
        rows.push(row);
        rhs.push(zi.constant);
    }
    for j in 0..rep.aux_dim() {
        rows.push(column_terms(&rep.f, j, y0));
        rhs.push(0.0);
    }
    let k = rows.len();
    prog.add_block(Cone::Zero(k), rows, rhs)?;

    let mut row: SparseRow = (0..m).filter(|&k| rep.b[k] != 0.0).map(|k| (y0 + k, rep.b[k])).collect();
    row.extend(t.terms.iter().map(|&(j, v)| (j, -v)));
    prog.add_inequality(row, t.constant)?;
    Ok(y)
}

fn column_terms(mat: &DMatrix<f64>, col: usize, y0: usize) -> SparseRow {
    mat.column(col)
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v != 0.0)
        .map(|(k, &v)| (y0 + k, v))
        .collect()
}
