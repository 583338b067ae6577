//! Edge pruning around flagged agents.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Drop every edge touching a flagged agent.
    #[default]
    Bidirectional,
    /// Drop only edges whose sender is flagged; flagged agents still read.
    SourceOnly,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::Bidirectional => "bidirectional",
            PruneMode::SourceOnly => "source_only",
        })
    }
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(PruneMode::Bidirectional),
            "source_only" => Ok(PruneMode::SourceOnly),
            other => Err(Error::Config(format!("unknown prune mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedTopology {
    pub kept_edges: BTreeSet<(usize, usize)>,
    pub removed_edges: BTreeSet<(usize, usize)>,
    pub flagged: BTreeSet<usize>,
    pub round: u32,
}

pub fn prune(
    edges: &BTreeSet<(usize, usize)>,
    flagged: &BTreeSet<usize>,
    mode: PruneMode,
    round: u32,
) -> PrunedTopology {
    let (kept_edges, removed_edges) = edges.iter().partition(|&&(s, d)| match mode {
        PruneMode::Bidirectional => !flagged.contains(&s) && !flagged.contains(&d),
        PruneMode::SourceOnly => !flagged.contains(&s),
    });
    PrunedTopology {
        kept_edges,
        removed_edges,
        flagged: flagged.clone(),
        round,
    }
}

/// Agents whose messages `agent` reads next round, ascending.
pub fn remediated_neighbors(topo: &PrunedTopology, agent: usize) -> Vec<usize> {
    topo.kept_edges
        .iter()
        .filter(|&&(_, d)| d == agent)
        .map(|&(s, _)| s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_topology, TopologyKind};

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn chain_middle_flag_removes_everything() {
        let g = generate_topology(TopologyKind::Chain, 3, 0).unwrap();
        let p = prune(g.edges(), &set(&[1]), PruneMode::Bidirectional, 1);
        assert!(p.kept_edges.is_empty());
        assert_eq!(&p.removed_edges, g.edges());
        for a in 0..3 {
            assert!(remediated_neighbors(&p, a).is_empty());
        }
    }

    #[test]
    fn empty_flag_keeps_all() {
        let g = generate_topology(TopologyKind::Star, 5, 0).unwrap();
        let p = prune(g.edges(), &set(&[]), PruneMode::Bidirectional, 1);
        assert_eq!(&p.kept_edges, g.edges());
        assert_eq!(remediated_neighbors(&p, 0), vec![1, 2, 3, 4]);
    }

    #[test]
    fn star_leaf_flag() {
        let g = generate_topology(TopologyKind::Star, 5, 0).unwrap();
        let p = prune(g.edges(), &set(&[2]), PruneMode::Bidirectional, 1);
        let expected: BTreeSet<_> = g
            .edges()
            .iter()
            .copied()
            .filter(|&(s, d)| s != 2 && d != 2)
            .collect();
        assert_eq!(p.kept_edges, expected);
        assert_eq!(p.removed_edges, [(0, 2), (2, 0)].into_iter().collect());
        assert_eq!(p.kept_edges.len(), 6);
    }

    #[test]
    fn source_only_lets_flagged_read() {
        let g = generate_topology(TopologyKind::Star, 4, 0).unwrap();
        let p = prune(g.edges(), &set(&[2]), PruneMode::SourceOnly, 1);
        assert!(p.kept_edges.contains(&(0, 2)));
        assert!(!p.kept_edges.contains(&(2, 0)));
        assert_eq!(
            "source_only".parse::<PruneMode>().unwrap(),
            PruneMode::SourceOnly
        );
        assert!("both".parse::<PruneMode>().is_err());
    }

    #[test]
    fn random_graph_neighbors_match_filter() {
        let g = generate_topology(TopologyKind::Random, 9, 4).unwrap();
        let flagged = set(&[2, 6]);
        let p = prune(g.edges(), &flagged, PruneMode::Bidirectional, 1);
        for a in 0..9 {
            let expected: Vec<usize> = if flagged.contains(&a) {
                vec![]
            } else {
                g.in_neighbors(a)
                    .into_iter()
                    .filter(|s| !flagged.contains(s))
                    .collect()
            };
            assert_eq!(remediated_neighbors(&p, a), expected);
        }
    }
}
