//! Markov jump linear systems and the adaptive cruise control instance.
//!
//! The ACC state is `(h, v_e, v_t)`: headway, ego velocity, target velocity.
//! The target's mode-dependent acceleration is folded into per-mode affine
//! dynamics when the model is built, so stepping never branches on state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::polyhedra::Polyhedron;

#[derive(Clone, Debug, PartialEq)]
pub struct ModeDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p: DVector<f64>,
}

/// Linear soft-constraint functional `g(x) = coeffsᵀx + offset`; the soft set
/// is `{x : g(x) ≤ 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftConstraint {
    pub coeffs: DVector<f64>,
    pub offset: f64,
}

impl SoftConstraint {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.dot(x) + self.offset
    }

    pub fn as_polyhedron(&self) -> Polyhedron {
        let g = DMatrix::from_row_slice(1, self.coeffs.len(), self.coeffs.as_slice());
        Polyhedron::new(g, DVector::from_element(1, -self.offset))
            .expect("finite soft constraint")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MjlsModel {
    pub modes: Vec<ModeDynamics>,
    pub state_set: Polyhedron,
    pub input_set: Polyhedron,
    pub soft: SoftConstraint,
}

impl MjlsModel {
    pub fn new(
        modes: Vec<ModeDynamics>,
        state_set: Polyhedron,
        input_set: Polyhedron,
        soft: SoftConstraint,
    ) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidParameter("model needs at least one mode".into()))?;
        let nx = first.a.nrows();
        let nu = first.b.ncols();
        for m in &modes {
            check_dim(nx, m.a.nrows())?;
            check_dim(nx, m.a.ncols())?;
            check_dim(nx, m.b.nrows())?;
            check_dim(nu, m.b.ncols())?;
            check_dim(nx, m.p.len())?;
        }
        check_dim(nx, state_set.dim())?;
        check_dim(nu, input_set.dim())?;
        check_dim(nx, soft.coeffs.len())?;
        Ok(Self {
            modes,
            state_set,
            input_set,
            soft,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn state_dim(&self) -> usize {
        self.modes[0].a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.modes[0].b.ncols()
    }

    pub fn mode(&self, w: usize) -> Result<&ModeDynamics> {
        self.modes.get(w).ok_or(Error::ModeOutOfRange {
            mode: w,
            modes: self.modes.len(),
        })
    }

    /// Successor `A_w x + B_w u + p_w` under the (0-based) mode `w`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: usize) -> Result<DVector<f64>> {
        let m = self.mode(w)?;
        check_dim(self.state_dim(), x.len())?;
        check_dim(self.input_dim(), u.len())?;
        Ok(&m.a * x + &m.b * u + &m.p)
    }
}

/// Physical and controller parameters of the ACC problem. Units: m/s, m/s², s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccParams {
    /// Sampling period.
    pub ts: f64,
    /// Target-vehicle mode parameters; negative entries are dissipative gains
    /// (1/s), nonnegative entries are constant accelerations (m/s²).
    pub c: Vec<f64>,
    pub a_min: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub v_ref: f64,
    pub q: f64,
    pub r: f64,
}

impl AccParams {
    pub fn num_modes(&self) -> usize {
        self.c.len()
    }

    pub fn c_min(&self) -> f64 {
        self.c.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.ts > 0.0) {
            return bad(format!("sampling period must be positive, got {}", self.ts));
        }
        if self.c.is_empty() {
            return bad("at least one mode parameter is required".into());
        }
        let floor = -1.0 / self.ts;
        if let Some(c) = self.c.iter().find(|&&c| !(c >= floor)) {
            return bad(format!("mode parameter {c} is below -1/Ts = {floor}"));
        }
        if !(self.a_min <= 0.0 && self.a_max >= 0.0) {
            return bad(format!("need a_min ≤ 0 ≤ a_max, got [{}, {}]", self.a_min, self.a_max));
        }
        if !(self.v_max > 0.0) {
            return bad(format!("v_max must be positive, got {}", self.v_max));
        }
        if !(self.q > 0.0 && self.r >= 0.0) {
            return bad(format!("need q > 0 and r ≥ 0, got q={} r={}", self.q, self.r));
        }
        if !self.v_ref.is_finite() {
            return bad("v_ref must be finite".into());
        }
        Ok(())
    }

    /// Additionally requires a braking mode, `-1/Ts ≤ c_min < 0`.
    pub fn validate_braking(&self) -> Result<()> {
        self.validate()?;
        let c_min = self.c_min();
        if !(c_min < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need a dissipative mode with c_min < 0, got c_min = {c_min}"
            )));
        }
        Ok(())
    }

    /// `q (v_e − v_ref)² + r u²`
    pub fn stage_cost(&self, x: &DVector<f64>, u: f64) -> f64 {
        self.terminal_cost(x) + self.r * u * u
    }

    /// `q (v_e − v_ref)²`
    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let dv = x[1] - self.v_ref;
        self.q * dv * dv
    }
}

pub fn build_acc_model(params: &AccParams) -> Result<MjlsModel> {
    params.validate()?;
    let ts = params.ts;
    let modes = params
        .c
        .iter()
        .map(|&c| {
            #[rustfmt::skip]
            let mut a = DMatrix::from_row_slice(3, 3, &[
                1.0, -ts, ts,
                0.0, 1.0, 0.0,
                0.0, 0.0, 1.0,
            ]);
            let mut p = DVector::zeros(3);
            if c >= 0.0 {
                p[2] = ts * c;
            } else {
                a[(2, 2)] = 1.0 + ts * c;
            }
            ModeDynamics {
                a,
                b: DMatrix::from_column_slice(3, 1, &[0.0, ts, 0.0]),
                p,
            }
        })
        .collect();
    let state_set = Polyhedron::from_rows(
        3,
        &[(vec![0.0, -1.0, 0.0], 0.0), (vec![0.0, 1.0, 0.0], params.v_max)],
    )?;
    let input_set = Polyhedron::from_rows(1, &[(vec![-1.0], -params.a_min), (vec![1.0], params.a_max)])?;
    let soft = SoftConstraint {
        coeffs: DVector::from_column_slice(&[-1.0, 0.0, 0.0]),
        offset: 0.0,
    };
    MjlsModel::new(modes, state_set, input_set, soft)
}
