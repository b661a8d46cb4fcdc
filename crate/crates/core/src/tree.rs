//! Scenario trees over mode sequences, stored breadth-first so each stage
//! occupies a contiguous index range.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub stage: usize,
    pub mode: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Conditional probability given the parent; 1 at the root and 1/d in
    /// full trees, where the OCP reads ambiguity sets instead.
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub nodes: Vec<Node>,
    /// `stages[k]` is the index range of stage-`k` nodes.
    pub stages: Vec<Range<usize>>,
}

impl ScenarioTree {
    /// Complete `d`-ary tree of depth `horizon`.
    pub fn build_full(d: usize, horizon: usize, w0: usize, cap: usize) -> Result<Self> {
        if d == 0 || horizon == 0 {
            return Err(Error::InvalidParameter("need d ≥ 1 and N ≥ 1".into()));
        }
        if w0 >= d {
            return Err(Error::ModeOutOfRange { mode: w0, modes: d });
        }
        let mut total: usize = 0;
        let mut width: usize = 1;
        for _ in 0..=horizon {
            total = total.saturating_add(width);
            width = width.saturating_mul(d);
        }
        if total > cap {
            return Err(Error::TreeTooLarge { nodes: total, cap });
        }
        let p = 1.0 / d as f64;
        Self::grow(w0, horizon, |_| (0..d).map(|i| (i, p)).collect())
    }

    /// Children of a mode-`j` node are the modes `i` with `P[j][i] > 0`.
    pub fn build_support(p: &[Vec<f64>], horizon: usize, w0: usize, cap: usize) -> Result<Self> {
        let d = p.len();
        if d == 0 || horizon == 0 {
            return Err(Error::InvalidParameter("need d ≥ 1 and N ≥ 1".into()));
        }
        if w0 >= d {
            return Err(Error::ModeOutOfRange { mode: w0, modes: d });
        }
        for (j, row) in p.iter().enumerate() {
            crate::error::check_dim(d, row.len())?;
            if !row.iter().any(|&v| v > 0.0) {
                return Err(Error::InvalidParameter(format!("row {j} has no positive entry")));
            }
        }
        let support: Vec<Vec<(usize, f64)>> = p
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v)).collect())
            .collect();

        // Count before allocating.
        let mut counts = vec![0usize; d];
        counts[w0] = 1;
        let mut total = 1usize;
        for _ in 0..horizon {
            let mut next = vec![0usize; d];
            for (j, &c) in counts.iter().enumerate() {
                for &(i, _) in &support[j] {
                    next[i] = next[i].saturating_add(c);
                }
            }
            total = next.iter().fold(total, |a, &b| a.saturating_add(b));
            if total > cap {
                return Err(Error::TreeTooLarge { nodes: total, cap });
            }
            counts = next;
        }
        Self::grow(w0, horizon, |j| support[j].clone())
    }

    fn grow(w0: usize, horizon: usize, children_of: impl Fn(usize) -> Vec<(usize, f64)>) -> Result<Self> {
        let mut nodes = vec![Node { stage: 0, mode: w0, parent: None, children: Vec::new(), prob: 1.0 }];
        let mut stages = vec![0..1];
        for k in 0..horizon {
            let range = stages[k].clone();
            let start = nodes.len();
            for parent in range {
                for (mode, prob) in children_of(nodes[parent].mode) {
                    let idx = nodes.len();
                    nodes.push(Node { stage: k + 1, mode, parent: Some(parent), children: Vec::new(), prob });
                    nodes[parent].children.push(idx);
                }
            }
            stages.push(start..nodes.len());
        }
        Ok(Self { nodes, stages })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage_nodes(&self, k: usize) -> Range<usize> {
        self.stages[k].clone()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].stage == self.horizon()
    }

    pub fn non_leaf(&self) -> Range<usize> {
        0..self.stages[self.horizon()].start
    }

    pub fn leaves(&self) -> Range<usize> {
        self.stages[self.horizon()].clone()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
