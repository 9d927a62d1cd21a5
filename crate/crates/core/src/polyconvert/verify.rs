use serde::{Deserialize, Serialize};

use super::graph::PolyGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub node: usize,
    pub kind: String,
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub pass: bool,
    pub violations: Vec<Violation>,
}

impl Verification {
    /// One line per violation: `node=<id> kind=<kind> site=<site>`.
    pub fn to_text(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("node={} kind={} site={}\n", v.node, v.kind, v.site.as_deref().unwrap_or("-")))
            .collect()
    }
}

/// Lists every node outside the addition/multiplication whitelist.
pub fn verify_polynomial(g: &PolyGraph) -> Verification {
    let violations: Vec<Violation> = g
        .nodes()
        .iter()
        .filter(|n| !n.kind.is_polynomial())
        .map(|n| Violation {
            node: n.id,
            kind: n.kind.name(),
            site: n.site.clone(),
        })
        .collect();
    Verification {
        pass: violations.is_empty(),
        violations,
    }
}
