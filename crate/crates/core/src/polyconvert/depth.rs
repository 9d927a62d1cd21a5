use serde::{Deserialize, Serialize};

use super::graph::{topo_order, NodeKind, PolyGraph};
use crate::error::{Error, Result};

/// Levels available between bootstraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Total multiplicative depth of a fresh ciphertext.
    pub levels: usize,
    /// Levels consumed before a bootstrap must refresh the ciphertext.
    pub mults_before_bootstrap: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            levels: 12,
            mults_before_bootstrap: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    /// Longest chain of level-consuming nodes from any input to any output.
    pub max_depth: usize,
    /// Scalar ciphertext multiplications over the whole graph.
    pub total_mults: u64,
    pub mult_nodes: usize,
    /// Bootstraps inserted greedily along the critical path.
    pub bootstraps: usize,
    pub critical_path: Vec<usize>,
    pub budget: Budget,
    pub fits_without_bootstrap: bool,
}

impl DepthReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Scalar multiplications performed by one node.
pub fn scalar_mults(g: &PolyGraph, id: usize) -> u64 {
    let n = &g.nodes()[id];
    if n.level_cost == 0 {
        return 0;
    }
    match n.kind {
        NodeKind::Linear | NodeKind::MatMul => {
            let a = &g.nodes()[n.inputs[0]].shape;
            let b = &g.nodes()[n.inputs[1]].shape;
            (a[0] * a[1] * b[1]) as u64
        }
        _ => n.shape.iter().product::<usize>() as u64,
    }
}

/// Multiplicative depth, multiplication counts and bootstrap placement.
pub fn depth_report(g: &PolyGraph, budget: Budget) -> Result<DepthReport> {
    if budget.mults_before_bootstrap == 0 || budget.mults_before_bootstrap > budget.levels {
        return Err(Error::Config(format!(
            "bootstrap interval {} must lie in 1..={}",
            budget.mults_before_bootstrap, budget.levels
        )));
    }
    let order = topo_order(g)?;
    let nodes = g.nodes();
    let mut depth = vec![0usize; nodes.len()];
    let mut pred: Vec<Option<usize>> = vec![None; nodes.len()];
    for &i in &order {
        let best = nodes[i].inputs.iter().copied().max_by_key(|&j| depth[j]);
        let base = best.map_or(0, |j| depth[j]);
        depth[i] = base + nodes[i].level_cost;
        pred[i] = best;
    }
    let end = if g.outputs().is_empty() {
        (0..nodes.len()).max_by_key(|&i| depth[i])
    } else {
        g.outputs().iter().copied().max_by_key(|&i| depth[i])
    };
    let mut path = Vec::new();
    let mut cur = end;
    while let Some(i) = cur {
        path.push(i);
        cur = pred[i];
        if path.len() > nodes.len() {
            return Err(Error::Cycle(i));
        }
    }
    path.reverse();
    let mut bootstraps = 0;
    let mut used = 0;
    for &i in &path {
        let c = nodes[i].level_cost;
        if c == 0 {
            continue;
        }
        if used + c > budget.mults_before_bootstrap {
            bootstraps += 1;
            used = 0;
        }
        used += c;
    }
    let max_depth = end.map_or(0, |i| depth[i]);
    Ok(DepthReport {
        max_depth,
        total_mults: (0..nodes.len()).map(|i| scalar_mults(g, i)).sum(),
        mult_nodes: nodes.iter().filter(|n| n.level_cost > 0).count(),
        bootstraps,
        critical_path: path,
        budget,
        fits_without_bootstrap: max_depth <= budget.levels,
    })
}
