//! Invariant sets for the ACC model and the safety distances read off them.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mjls::{AccParams, MjlsModel};
use crate::polyhedra::{LinearOptimum, Polyhedron, DEFAULT_TOL};

pub const RCI_TOL: f64 = 1e-7;
pub const RCI_MAX_ITER: usize = 50;

/// `{x : 0 ≤ x₂ ≤ min(a_min/c_min, v_max), x₃ ≥ x₂, x₁ ≥ 0}`, invariant under
/// the braking feedback `u = c_min x₂`.
pub fn rpi_candidate(params: &AccParams) -> Result<Polyhedron> {
    params.validate_braking()?;
    let cap = params.a_min / params.c_min();
    Polyhedron::from_rows(
        3,
        &[
            (vec![0.0, 1.0, 0.0], cap),
            (vec![0.0, -1.0, 0.0], 0.0),
            (vec![0.0, 1.0, -1.0], 0.0),
            (vec![0.0, 1.0, 0.0], params.v_max),
            (vec![-1.0, 0.0, 0.0], 0.0),
        ],
    )
}

/// States from which some admissible input reaches `r` under every mode.
pub fn pre_set(model: &MjlsModel, r: &Polyhedron) -> Result<Polyhedron> {
    let nx = model.state_dim();
    let nu = model.input_dim();
    check_dim(nx, r.dim())?;
    if r.num_rows() == 0 {
        return Ok(Polyhedron::universe(nx));
    }
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for w in 0..model.num_modes() {
        let m = model.mode(w)?;
        let ga = r.g() * &m.a;
        let gb = r.g() * &m.b;
        let rhs = r.h() - r.g() * &m.p;
        for i in 0..r.num_rows() {
            let mut coeffs: Vec<f64> = ga.row(i).iter().copied().collect();
            coeffs.extend(gb.row(i).iter().copied());
            rows.push((coeffs, rhs[i]));
        }
    }
    let u = &model.input_set;
    for i in 0..u.num_rows() {
        let mut coeffs = vec![0.0; nx];
        coeffs.extend(u.g().row(i).iter().copied());
        rows.push((coeffs, u.h()[i]));
    }
    let mut lifted = Polyhedron::from_rows(nx + nu, &rows)?;
    for j in (nx..nx + nu).rev() {
        lifted = lifted.eliminate_variable(j)?.remove_redundancy(DEFAULT_TOL)?;
    }
    Ok(lifted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RciResult {
    /// `R⁽⁰⁾, …, R⁽ᴷ⁾`; the last one is the fixed point when converged.
    pub iterates: Vec<Polyhedron>,
    pub converged: bool,
    pub iterations: usize,
}

impl RciResult {
    pub fn last(&self) -> &Polyhedron {
        self.iterates.last().expect("at least R0")
    }
}

/// `R⁽ⁱ⁺¹⁾ = pre(R⁽ⁱ⁾) ∩ X_r ∩ X_c` until two consecutive iterates contain each
/// other within `tol`, or `max_iter` steps have been taken.
pub fn rci_iterate(
    model: &MjlsModel,
    x_r: &Polyhedron,
    x_c: &Polyhedron,
    r0: &Polyhedron,
    max_iter: usize,
    tol: f64,
) -> Result<RciResult> {
    let mut iterates = vec![r0.clone()];
    let mut converged = false;
    for _ in 0..max_iter {
        let cur = iterates.last().unwrap();
        let next = pre_set(model, cur)?.intersect(x_r)?.intersect(x_c)?.remove_redundancy(DEFAULT_TOL)?;
        if next.is_subset(cur, tol)? && cur.is_subset(&next, tol)? {
            converged = true;
            break;
        }
        iterates.push(next);
    }
    let iterations = iterates.len() - 1;
    Ok(RciResult { iterates, converged, iterations })
}

/// Smallest headway in `r` at the given speeds; `+∞` if the slice is empty.
pub fn h_min(r: &Polyhedron, v_e: f64, v_t: f64) -> Result<f64> {
    check_dim(3, r.dim())?;
    let line = r.slice(&[(1, v_e), (2, v_t)])?;
    Ok(match line.minimize_linear(&DVector::from_element(1, 1.0))? {
        LinearOptimum::Optimal { value, .. } => value,
        LinearOptimum::Empty => f64::INFINITY,
        LinearOptimum::Unbounded => f64::NEG_INFINITY,
    })
}

/// `[d_e − d_t]₊`: ego braking distance at `a_min` in the discrete model
/// against the worst-case target braking distance `−v_t/c_min`.
pub fn rss_distance(params: &AccParams, v_e: f64, v_t: f64) -> Result<f64> {
    if !(v_e >= 0.0 && v_t >= 0.0) {
        return Err(Error::InvalidParameter(format!("speeds must be nonnegative, got {v_e}, {v_t}")));
    }
    let c_min = params.c_min();
    if !(c_min < 0.0 && c_min >= -1.0 / params.ts) {
        return Err(Error::InvalidParameter(format!("need -1/Ts ≤ c_min < 0, got {c_min}")));
    }
    if v_e > 0.0 && !(params.a_min < 0.0) {
        return Err(Error::InvalidParameter("ego cannot brake with a_min ≥ 0".into()));
    }
    let mut d_e = 0.0;
    let mut v = v_e;
    while v > 0.0 {
        d_e += params.ts * v;
        v = (v + params.ts * params.a_min).max(0.0);
    }
    let d_t = -v_t / c_min;
    Ok((d_e - d_t).max(0.0))
}

/// Whether some `u ∈ U` keeps `x` inside `r` for every mode (`r` relaxed by
/// `tol`).
pub fn admits_invariant_input(model: &MjlsModel, r: &Polyhedron, x: &DVector<f64>, tol: f64) -> Result<bool> {
    let nu = model.input_dim();
    check_dim(model.state_dim(), x.len())?;
    let mut g_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for w in 0..model.num_modes() {
        let m = model.mode(w)?;
        let gb: DMatrix<f64> = r.g() * &m.b;
        let rhs = r.h() - r.g() * (&m.a * x + &m.p);
        for i in 0..r.num_rows() {
            g_rows.push((gb.row(i).iter().copied().collect(), rhs[i] + tol));
        }
    }
    let u = &model.input_set;
    for i in 0..u.num_rows() {
        g_rows.push((u.g().row(i).iter().copied().collect(), u.h()[i] + tol));
    }
    // Rows without input dependence are plain checks.
    let mut lp_rows = Vec::new();
    for (g, h) in g_rows {
        if g.iter().all(|v| v.abs() < 1e-14) {
            if h < 0.0 {
                return Ok(false);
            }
        } else {
            lp_rows.push((g, h));
        }
    }
    if lp_rows.is_empty() {
        return Ok(true);
    }
    Ok(!Polyhedron::from_rows(nu, &lp_rows)?.is_empty()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyGridRow {
    pub v_e: f64,
    pub h_rpi0: f64,
    /// Absent when no iteration was run.
    pub h_rci: Option<f64>,
    pub h_rss: f64,
}

/// `n` evenly spaced ego speeds over `[lo, hi]` at fixed target speed.
pub fn safety_grid(
    params: &AccParams,
    rci: &RciResult,
    v_t: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<SafetyGridRow>> {
    if n < 2 {
        return Err(Error::InvalidParameter("grid needs at least two points".into()));
    }
    let first = &rci.iterates[0];
    let last = (rci.iterations > 0 || rci.converged).then(|| rci.last());
    (0..n)
        .map(|k| {
            let v_e = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            Ok(SafetyGridRow {
                v_e,
                h_rpi0: h_min(first, v_e, v_t)?,
                h_rci: last.map(|r| h_min(r, v_e, v_t)).transpose()?,
                h_rss: rss_distance(params, v_e, v_t)?,
            })
        })
        .collect()
}

/// Shortest round-trip form; infinities as `inf` / `-inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        serde_json::to_string(&v).expect("finite float")
    }
}

/// CSV `v_e,h_rpi0,h_rci,h_rss`; the `h_rci` column is left out when no row
/// carries it.
pub fn write_grid_csv<W: Write>(rows: &[SafetyGridRow], out: W) -> Result<()> {
    let with_rci = rows.iter().any(|r| r.h_rci.is_some());
    let mut w = csv::Writer::from_writer(out);
    if with_rci {
        w.write_record(["v_e", "h_rpi0", "h_rci", "h_rss"])?;
    } else {
        w.write_record(["v_e", "h_rpi0", "h_rss"])?;
    }
    for r in rows {
        let mut rec = vec![format_value(r.v_e), format_value(r.h_rpi0)];
        if with_rci {
            rec.push(r.h_rci.map(format_value).unwrap_or_default());
        }
        rec.push(format_value(r.h_rss));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
