//! Markov-chain estimation from observed mode transitions and the ℓ1
//! ambiguity sets built around the estimates.
//!
//! Modes are 0-based indices here; configuration files and CSV outputs use
//! 1-based labels.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::polyhedra::Polyhedron;

/// ℓ1 diameter of the probability simplex.
pub const MAX_RADIUS: f64 = 2.0;

/// Largest mode count accepted by [`ambiguity_to_polyhedron`] (2^d facets).
pub const MAX_FACET_MODES: usize = 12;

/// Transition matrix of the performance experiment.
pub const P_PERFORMANCE: [[f64; 4]; 4] = [
    [0.92, 0.04, 0.02, 0.02],
    [0.29, 0.50, 0.09, 0.12],
    [0.26, 0.21, 0.36, 0.17],
    [0.31, 0.25, 0.23, 0.21],
];

/// Transition matrix of the emergency-braking experiment.
pub const P_SAFETY: [[f64; 4]; 4] = [
    [0.29, 0.7, 0.009, 0.001],
    [0.09, 0.90, 0.009, 0.001],
    [0.4, 0.29, 0.3, 0.01],
    [0.048, 0.001, 0.001, 0.95],
];

pub fn preset_matrix(name: &str) -> Option<Vec<Vec<f64>>> {
    let m = match name {
        "P_p" => P_PERFORMANCE,
        "P_s" => P_SAFETY,
        _ => return None,
    };
    Some(m.iter().map(|r| r.to_vec()).collect())
}

/// Checks that `p` is square and row-stochastic within `tol`.
pub fn validate_stochastic(p: &[Vec<f64>], tol: f64) -> Result<()> {
    let d = p.len();
    if d == 0 {
        return Err(Error::InvalidParameter("empty transition matrix".into()));
    }
    for row in p {
        check_dim(d, row.len())?;
        validate_distribution(row, tol)?;
    }
    Ok(())
}

pub fn validate_distribution(p: &[f64], tol: f64) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("negative or non-finite probability in {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::InvalidParameter(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    /// `counts[j][i]`: observed transitions `j → i`.
    pub counts: Vec<Vec<u64>>,
    /// Row totals `n_j`.
    pub totals: Vec<u64>,
    /// Empirical transition matrix; uniform rows where `n_j = 0`.
    pub p_hat: Vec<Vec<f64>>,
}

impl TransitionEstimate {
    pub fn empty(d: usize) -> Self {
        Self {
            counts: vec![vec![0; d]; d],
            totals: vec![0; d],
            p_hat: vec![vec![1.0 / d as f64; d]; d],
        }
    }

    /// Counts consecutive pairs of `sample`.
    pub fn estimate(sample: &[usize], d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("need at least one mode".into()));
        }
        if sample.is_empty() {
            return Err(Error::InvalidParameter("empty mode sequence".into()));
        }
        if let Some(&w) = sample.iter().find(|&&w| w >= d) {
            return Err(Error::ModeOutOfRange { mode: w, modes: d });
        }
        let mut est = Self::empty(d);
        for pair in sample.windows(2) {
            est.counts[pair[0]][pair[1]] += 1;
            est.totals[pair[0]] += 1;
        }
        for j in 0..d {
            est.normalize_row(j);
        }
        Ok(est)
    }

    pub fn num_modes(&self) -> usize {
        self.totals.len()
    }

    /// Adds one observed transition and re-normalizes row `from` only.
    pub fn record_transition(&mut self, from: usize, to: usize) -> Result<()> {
        let d = self.num_modes();
        for w in [from, to] {
            if w >= d {
                return Err(Error::ModeOutOfRange { mode: w, modes: d });
            }
        }
        self.counts[from][to] += 1;
        self.totals[from] += 1;
        self.normalize_row(from);
        Ok(())
    }

    fn normalize_row(&mut self, j: usize) {
        let d = self.num_modes();
        let n = self.totals[j];
        self.p_hat[j] = if n == 0 {
            vec![1.0 / d as f64; d]
        } else {
            self.counts[j].iter().map(|&c| c as f64 / n as f64).collect()
        };
    }

    /// ℓ1 ambiguity set of row `j` at confidence `1 − alpha`.
    pub fn ambiguity_row(&self, j: usize, alpha: f64) -> Result<AmbiguitySet> {
        let r = radius(alpha, self.num_modes(), self.totals[j])?;
        AmbiguitySet::l1_ball(self.p_hat[j].clone(), r)
    }
}

/// Concentration radius such that the true row lies in the ℓ1 ball around
/// its empirical estimate with probability at least `1 − alpha`. Returns the
/// simplex diameter 2 when there is no data or the bound is vacuous.
pub fn radius(alpha: f64, d: usize, n: u64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("need at least one mode".into()));
    }
    if n == 0 {
        return Ok(MAX_RADIUS);
    }
    let n = n as f64;
    let d = d as f64;
    let r = (-2.0 * alpha.ln() / n).sqrt()
        + (2.0 * (d - 1.0) / (PI * n)).sqrt()
        + 4.0 * d.sqrt() * (d - 1.0).powf(0.25) / n.powf(0.75);
    Ok(r.min(MAX_RADIUS))
}

pub fn ambiguity_rows(est: &TransitionEstimate, alpha: f64) -> Result<Vec<AmbiguitySet>> {
    (0..est.num_modes()).map(|j| est.ambiguity_row(j, alpha)).collect()
}

/// A closed convex set of probability vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmbiguitySet {
    Singleton { center: Vec<f64> },
    /// `{μ ∈ Δ : ‖μ − center‖₁ ≤ radius}` with `radius < 2`.
    L1Ball { center: Vec<f64>, radius: f64 },
    FullSimplex { dim: usize },
}

impl AmbiguitySet {
    pub fn singleton(center: Vec<f64>) -> Result<Self> {
        validate_distribution(&center, 1e-9)?;
        Ok(Self::Singleton { center })
    }

    /// Radii of 2 or more collapse to the full simplex.
    pub fn l1_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        validate_distribution(&center, 1e-9)?;
        if !(radius >= 0.0) {
            return Err(Error::InvalidParameter(format!("radius must be ≥ 0, got {radius}")));
        }
        Ok(if radius >= MAX_RADIUS {
            Self::FullSimplex { dim: center.len() }
        } else {
            Self::L1Ball { center, radius }
        })
    }

    pub fn full_simplex(dim: usize) -> Self {
        Self::FullSimplex { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Singleton { center } | Self::L1Ball { center, .. } => center.len(),
            Self::FullSimplex { dim } => *dim,
        }
    }

    pub fn center(&self) -> Option<&[f64]> {
        match self {
            Self::Singleton { center } | Self::L1Ball { center, .. } => Some(center),
            Self::FullSimplex { .. } => None,
        }
    }

    /// Effective ℓ1 radius (0 for singletons, 2 for the simplex).
    pub fn radius(&self) -> f64 {
        match self {
            Self::Singleton { .. } => 0.0,
            Self::L1Ball { radius, .. } => *radius,
            Self::FullSimplex { .. } => MAX_RADIUS,
        }
    }

    pub fn contains(&self, mu: &[f64], tol: f64) -> bool {
        if mu.len() != self.dim() || mu.iter().any(|&m| m < -tol) {
            return false;
        }
        if (mu.iter().sum::<f64>() - 1.0).abs() > tol {
            return false;
        }
        match self {
            Self::FullSimplex { .. } => true,
            Self::Singleton { center } => l1_distance(mu, center) <= tol,
            Self::L1Ball { center, radius } => l1_distance(mu, center) <= radius + tol,
        }
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// H-representation over `μ ∈ ℝ^d`: the simplex (sum as two inequalities,
/// nonnegativity) plus the `2^d` sign-pattern facets of the ℓ1 ball, or
/// equalities pinning a singleton.
pub fn ambiguity_to_polyhedron(set: &AmbiguitySet) -> Result<Polyhedron> {
    let d = set.dim();
    if d > MAX_FACET_MODES {
        return Err(Error::InvalidParameter(format!(
            "facet representation limited to {MAX_FACET_MODES} modes, got {d}"
        )));
    }
    let mut rows: Vec<(Vec<f64>, f64)> = vec![(vec![1.0; d], 1.0), (vec![-1.0; d], -1.0)];
    for i in 0..d {
        let mut g = vec![0.0; d];
        g[i] = -1.0;
        rows.push((g, 0.0));
    }
    match set {
        AmbiguitySet::FullSimplex { .. } => {}
        AmbiguitySet::Singleton { center } => {
            for (i, &c) in center.iter().enumerate() {
                let mut g = vec![0.0; d];
                g[i] = 1.0;
                rows.push((g.clone(), c));
                g[i] = -1.0;
                rows.push((g, -c));
            }
        }
        AmbiguitySet::L1Ball { center, radius } => {
            for pattern in 0..(1usize << d) {
                let s: Vec<f64> = (0..d)
                    .map(|i| if pattern >> i & 1 == 1 { -1.0 } else { 1.0 })
                    .collect();
                let rhs = radius + s.iter().zip(center).map(|(a, b)| a * b).sum::<f64>();
                rows.push((s, rhs));
            }
        }
    }
    Polyhedron::from_rows(d, &rows)
}

/// `candidate ⊆ incumbent`, decided exactly. Fast paths cover the simplex,
/// singletons and the triangle-inequality sufficient condition; ball-in-ball
/// cases fall back to per-facet LPs on the lifted H-representations.
pub fn is_nested(candidate: &AmbiguitySet, incumbent: &AmbiguitySet, tol: f64) -> Result<bool> {
    check_dim(incumbent.dim(), candidate.dim())?;
    use AmbiguitySet::*;
    match (candidate, incumbent) {
        (_, FullSimplex { .. }) => Ok(true),
        (Singleton { center: p }, _) => Ok(incumbent.contains(p, tol)),
        (FullSimplex { dim }, Singleton { .. } | L1Ball { .. }) => {
            // The simplex vertices must all lie in the incumbent.
            Ok((0..*dim).all(|i| {
                let mut e = vec![0.0; *dim];
                e[i] = 1.0;
                incumbent.contains(&e, tol)
            }))
        }
        (L1Ball { center: c, radius: r }, Singleton { center: p }) => {
            Ok(*r <= tol && l1_distance(c, p) <= tol)
        }
        (L1Ball { center: c1, radius: r1 }, L1Ball { center: c0, radius: r0 }) => {
            if l1_distance(c1, c0) + r1 <= r0 + tol {
                return Ok(true);
            }
            let inner = ambiguity_to_polyhedron(candidate)?;
            let outer = ambiguity_to_polyhedron(incumbent)?;
            inner.is_subset(&outer, tol)
        }
    }
}

/// Categorical draw from `row` by inverse CDF on one uniform variate.
pub fn sample_next<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    sample_with_uniform(row, u)
}

pub fn sample_with_uniform(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u beyond the cumulative sum: take the last supported mode.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Simulates `len` states of the chain starting at `w0` (which is included).
pub fn sample_chain<R: Rng + ?Sized>(p: &[Vec<f64>], w0: usize, len: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return out;
    }
    out.push(w0);
    while out.len() < len {
        let last = *out.last().unwrap();
        out.push(sample_next(&p[last], rng));
    }
    out
}

/// Independent random stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn as_dvector(p: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(p)
}
