//! Polyhedra in H-representation `{x : G x ≤ h}`.
//!
//! Every geometric query reduces to linear programs handed to the conic
//! solver; there is no vertex enumeration. Projection uses Fourier–Motzkin
//! elimination one coordinate at a time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConicProgram, SolveStatus, SolverSettings};
use crate::error::{check_dim, Error, Result};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Coefficients below this magnitude on an eliminated coordinate are treated
/// as zero.
pub const ELIMINATION_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Polyhedron {
    g: DMatrix<f64>,
    h: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinearOptimum {
    Optimal { value: f64, argmin: DVector<f64> },
    Empty,
    Unbounded,
}

impl Polyhedron {
    pub fn new(g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        check_dim(g.nrows(), h.len())?;
        if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("polyhedron data must be finite".into()));
        }
        Ok(Self { g, h })
    }

    pub fn from_rows(dim: usize, rows: &[(Vec<f64>, f64)]) -> Result<Self> {
        let mut g = DMatrix::zeros(rows.len(), dim);
        let mut h = DVector::zeros(rows.len());
        for (i, (coeffs, rhs)) in rows.iter().enumerate() {
            check_dim(dim, coeffs.len())?;
            g.row_mut(i).copy_from_slice(coeffs);
            h[i] = *rhs;
        }
        Self::new(g, h)
    }

    /// The whole space ℝⁿ (no rows).
    pub fn universe(dim: usize) -> Self {
        Self {
            g: DMatrix::zeros(0, dim),
            h: DVector::zeros(0),
        }
    }

    /// Canonical empty set `{x : 0ᵀx ≤ −1}`.
    pub fn empty(dim: usize) -> Self {
        Self {
            g: DMatrix::zeros(1, dim),
            h: DVector::from_element(1, -1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn row(&self, i: usize) -> (Vec<f64>, f64) {
        (self.g.row(i).iter().copied().collect(), self.h[i])
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim(self.dim(), x.len())?;
        let gx = &self.g * x;
        Ok(gx.iter().zip(self.h.iter()).all(|(a, b)| *a <= b + tol))
    }

    pub fn intersect(&self, other: &Polyhedron) -> Result<Polyhedron> {
        check_dim(self.dim(), other.dim())?;
        let m = self.num_rows() + other.num_rows();
        let mut g = DMatrix::zeros(m, self.dim());
        g.rows_mut(0, self.num_rows()).copy_from(&self.g);
        g.rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.g);
        let h = DVector::from_iterator(m, self.h.iter().chain(other.h.iter()).copied());
        Ok(Polyhedron { g, h })
    }

    /// `{z : M z + q ∈ self}` for an affine map `z ↦ M z + q`.
    pub fn preimage(&self, m: &DMatrix<f64>, q: &DVector<f64>) -> Result<Polyhedron> {
        check_dim(self.dim(), m.nrows())?;
        check_dim(self.dim(), q.len())?;
        Polyhedron::new(&self.g * m, &self.h - &self.g * q)
    }

    /// Restriction to `x_j = value` for every `(j, value)` in `fixed`, as a
    /// polyhedron over the remaining coordinates (original order kept).
    pub fn slice(&self, fixed: &[(usize, f64)]) -> Result<Polyhedron> {
        let n = self.dim();
        for &(j, _) in fixed {
            if j >= n {
                return Err(Error::DimensionMismatch { expected: n, got: j + 1 });
            }
        }
        let free: Vec<usize> = (0..n).filter(|j| fixed.iter().all(|(k, _)| k != j)).collect();
        let mut g = DMatrix::zeros(self.num_rows(), free.len());
        let mut h = self.h.clone();
        for i in 0..self.num_rows() {
            for (c, &j) in free.iter().enumerate() {
                g[(i, c)] = self.g[(i, j)];
            }
            for &(j, v) in fixed {
                h[i] -= self.g[(i, j)] * v;
            }
        }
        Polyhedron::new(g, h)
    }

    /// Fourier–Motzkin elimination of coordinate `j`: the orthogonal
    /// projection onto the remaining coordinates. Trivially satisfied rows
    /// (`0 ≤ c`, `c ≥ 0`) are dropped; a contradictory zero row collapses the
    /// result to the canonical empty set.
    pub fn eliminate_variable(&self, j: usize) -> Result<Polyhedron> {
        let n = self.dim();
        if j >= n {
            return Err(Error::DimensionMismatch { expected: n, got: j + 1 });
        }
        let keep_cols: Vec<usize> = (0..n).filter(|&c| c != j).collect();
        let mut zero = Vec::new();
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        for i in 0..self.num_rows() {
            let a = self.g[(i, j)];
            if a.abs() < ELIMINATION_EPS {
                zero.push(i);
            } else if a > 0.0 {
                upper.push(i);
            } else {
                lower.push(i);
            }
        }

        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for &i in &zero {
            rows.push((keep_cols.iter().map(|&c| self.g[(i, c)]).collect(), self.h[i]));
        }
        for &p in &upper {
            let ap = self.g[(p, j)];
            for &q in &lower {
                let aq = -self.g[(q, j)];
                let coeffs = keep_cols
                    .iter()
                    .map(|&c| self.g[(p, c)] / ap + self.g[(q, c)] / aq)
                    .collect();
                rows.push((coeffs, self.h[p] / ap + self.h[q] / aq));
            }
        }

        let mut kept = Vec::with_capacity(rows.len());
        for (coeffs, rhs) in rows {
            let norm = coeffs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if norm < ELIMINATION_EPS {
                if rhs < -DEFAULT_TOL {
                    return Ok(Polyhedron::empty(n - 1));
                }
                continue;
            }
            kept.push((coeffs, rhs));
        }
        Polyhedron::from_rows(n - 1, &kept)
    }

    /// Drops rows that do not change the feasible set. Each surviving row has
    /// been certified irreducible by an LP maximizing it over the others.
    /// Rows are rescaled to unit Euclidean norm.
    pub fn remove_redundancy(&self, tol: f64) -> Result<Polyhedron> {
        if tol <= 0.0 {
            return Err(Error::InvalidParameter("redundancy tolerance must be positive".into()));
        }
        let n = self.dim();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(self.num_rows());
        for i in 0..self.num_rows() {
            let (coeffs, rhs) = self.row(i);
            let norm = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < ELIMINATION_EPS {
                if rhs < -tol {
                    return Ok(Polyhedron::empty(n));
                }
                continue;
            }
            rows.push((coeffs.iter().map(|v| v / norm).collect(), rhs / norm));
        }

        // Parallel duplicates: keep the tightest.
        rows.sort_by(|a, b| {
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.total_cmp(&b.1))
        });
        rows.dedup_by(|later, earlier| {
            let parallel = later.0.iter().zip(&earlier.0).all(|(x, y)| (x - y).abs() <= 1e-12);
            if parallel {
                earlier.1 = earlier.1.min(later.1);
            }
            parallel
        });

        let candidate = Polyhedron::from_rows(n, &rows)?;
        if candidate.is_empty()? {
            return Ok(Polyhedron::empty(n));
        }

        let mut active = vec![true; rows.len()];
        for k in 0..rows.len() {
            let others: Vec<(Vec<f64>, f64)> = rows
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k && active[i])
                .map(|(_, r)| r.clone())
                .collect();
            // Relaxed copy of row k keeps the LP bounded.
            let mut lp_rows = others;
            lp_rows.push((rows[k].0.clone(), rows[k].1 + 1.0));
            let p = Polyhedron::from_rows(n, &lp_rows)?;
            let neg: DVector<f64> = -DVector::from_vec(rows[k].0.clone());
            match p.minimize_linear(&neg)? {
                LinearOptimum::Optimal { value, .. } => {
                    if -value <= rows[k].1 + tol {
                        active[k] = false;
                    }
                }
                LinearOptimum::Empty => {
                    return Err(Error::Solver(
                        "redundancy LP infeasible on a nonempty polyhedron".into(),
                    ))
                }
                LinearOptimum::Unbounded => {}
            }
        }
        let kept: Vec<(Vec<f64>, f64)> = rows
            .into_iter()
            .zip(active)
            .filter_map(|(r, a)| a.then_some(r))
            .collect();
        Polyhedron::from_rows(n, &kept)
    }

    /// `self ⊆ other` up to `tol` (per unit-norm row of `other`).
    pub fn is_subset(&self, other: &Polyhedron, tol: f64) -> Result<bool> {
        check_dim(self.dim(), other.dim())?;
        if self.is_empty()? {
            return Ok(true);
        }
        for i in 0..other.num_rows() {
            let (coeffs, rhs) = other.row(i);
            let norm = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < ELIMINATION_EPS {
                if rhs < -tol {
                    return Ok(false);
                }
                continue;
            }
            let neg = -DVector::from_vec(coeffs);
            match self.minimize_linear(&neg)? {
                LinearOptimum::Optimal { value, .. } => {
                    if (-value - rhs) / norm > tol {
                        return Ok(false);
                    }
                }
                LinearOptimum::Unbounded => return Ok(false),
                LinearOptimum::Empty => return Ok(true),
            }
        }
        Ok(true)
    }

    pub fn is_empty(&self) -> Result<bool> {
        if self.num_rows() == 0 {
            return Ok(false);
        }
        let zero = DVector::zeros(self.dim());
        Ok(matches!(self.minimize_linear(&zero)?, LinearOptimum::Empty))
    }

    /// `min cᵀx` over the polyhedron.
    pub fn minimize_linear(&self, c: &DVector<f64>) -> Result<LinearOptimum> {
        check_dim(self.dim(), c.len())?;
        let n = self.dim();
        let mut prog = ConicProgram::new(n);
        for (j, v) in c.iter().enumerate() {
            prog.set_objective(j, *v);
        }
        if self.num_rows() > 0 {
            let rows = (0..self.num_rows())
                .map(|i| {
                    (0..n)
                        .filter(|&j| self.g[(i, j)] != 0.0)
                        .map(|j| (j, self.g[(i, j)]))
                        .collect()
                })
                .collect();
            prog.add_block(
                conic::Cone::Nonneg(self.num_rows()),
                rows,
                self.h.iter().copied().collect(),
            )?;
        } else if c.iter().all(|v| *v == 0.0) {
            return Ok(LinearOptimum::Optimal {
                value: 0.0,
                argmin: DVector::zeros(n),
            });
        } else {
            return Ok(LinearOptimum::Unbounded);
        }
        let res = conic::solve(&prog, &SolverSettings::precise())?;
        match res.status {
            SolveStatus::Optimal | SolveStatus::Inaccurate => Ok(LinearOptimum::Optimal {
                value: res.objective,
                argmin: DVector::from_vec(res.x),
            }),
            SolveStatus::PrimalInfeasible => Ok(LinearOptimum::Empty),
            SolveStatus::DualInfeasible => Ok(LinearOptimum::Unbounded),
            other => Err(Error::Solver(format!("LP over polyhedron ended with {other:?}"))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PolyhedronJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Polyhedron> {
        let raw: PolyhedronJson = serde_json::from_str(text)?;
        raw.try_into()
    }
}

/// Wire format `{"G": [[...]], "h": [...]}`; `n` is needed only when there
/// are no rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolyhedronJson {
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl From<&Polyhedron> for PolyhedronJson {
    fn from(p: &Polyhedron) -> Self {
        PolyhedronJson {
            g: (0..p.num_rows()).map(|i| p.row(i).0).collect(),
            h: p.h.iter().copied().collect(),
            n: (p.num_rows() == 0).then_some(p.dim()),
        }
    }
}

impl TryFrom<PolyhedronJson> for Polyhedron {
    type Error = Error;

    fn try_from(raw: PolyhedronJson) -> Result<Polyhedron> {
        let dim = match (raw.g.first(), raw.n) {
            (Some(r), _) => r.len(),
            (None, Some(n)) => n,
            (None, None) => {
                return Err(Error::InvalidParameter(
                    "polyhedron without rows needs an explicit dimension `n`".into(),
                ))
            }
        };
        check_dim(raw.g.len(), raw.h.len())?;
        let rows: Vec<(Vec<f64>, f64)> = raw.g.into_iter().zip(raw.h).collect();
        Polyhedron::from_rows(dim, &rows)
    }
}

impl Serialize for Polyhedron {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolyhedronJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polyhedron {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = PolyhedronJson::deserialize(d)?;
        raw.try_into().map_err(serde::de::Error::custom)
    }
}
