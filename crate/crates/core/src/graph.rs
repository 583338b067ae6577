//! Multi-agent interaction graphs.
//!
//! An edge `(src, dst)` is a message channel: `dst` reads what `src` said.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Edge probability for random topologies.
pub const RANDOM_EDGE_PROB: f64 = 0.3;
const RANDOM_MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Chain,
    Tree,
    Star,
    Random,
    Custom,
}

impl TopologyKind {
    pub const GENERATED: [TopologyKind; 4] = [
        TopologyKind::Chain,
        TopologyKind::Tree,
        TopologyKind::Star,
        TopologyKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Chain => "chain",
            TopologyKind::Tree => "tree",
            TopologyKind::Star => "star",
            TopologyKind::Random => "random",
            TopologyKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(TopologyKind::Chain),
            "tree" => Ok(TopologyKind::Tree),
            "star" => Ok(TopologyKind::Star),
            "random" => Ok(TopologyKind::Random),
            "custom" => Ok(TopologyKind::Custom),
            other => Err(Error::Config(format!("unknown topology kind `{other}`"))),
        }
    }
}

/// Ground truth, read only by evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthLabel {
    Normal,
    Malicious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentNode {
    pub index: usize,
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_label: Option<TruthLabel>,
    #[serde(skip)]
    pub feature: Option<Vec<f64>>,
}

impl AgentNode {
    pub fn new(index: usize, role: impl Into<String>) -> Self {
        AgentNode {
            index,
            role: role.into(),
            response_text: None,
            truth_label: None,
            feature: None,
        }
    }
}

/// A directed interaction graph over agents `0..N`.
///
/// Construction validates index density, edge endpoints and the absence of
/// self loops; the edge set is ordered so serialization is canonical.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentGraph {
    graph_id: String,
    topology_kind: TopologyKind,
    agents: Vec<AgentNode>,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    graph_id: String,
    topology_kind: TopologyKind,
    agents: Vec<AgentNode>,
    edges: Vec<(usize, usize)>,
}

impl<'de> Deserialize<'de> for AgentGraph {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawGraph::deserialize(de)?;
        let n_edges = raw.edges.len();
        let edges: BTreeSet<_> = raw.edges.into_iter().collect();
        if edges.len() != n_edges {
            return Err(serde::de::Error::custom("duplicate edge"));
        }
        AgentGraph::new(raw.graph_id, raw.topology_kind, raw.agents, edges)
            .map_err(serde::de::Error::custom)
    }
}

impl AgentGraph {
    pub fn new(
        graph_id: impl Into<String>,
        topology_kind: TopologyKind,
        mut agents: Vec<AgentNode>,
        edges: BTreeSet<(usize, usize)>,
    ) -> Result<Self> {
        agents.sort_by_key(|a| a.index);
        for (pos, agent) in agents.iter().enumerate() {
            if agent.index != pos {
                return Err(Error::InvalidGraph(format!(
                    "agent indices must be dense 0..N, found {} at position {pos}",
                    agent.index
                )));
            }
        }
        let n = agents.len();
        for &(s, d) in &edges {
            if s >= n || d >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({s},{d}) references an agent outside 0..{n}"
                )));
            }
            if s == d {
                return Err(Error::InvalidGraph(format!("self loop on agent {s}")));
            }
        }
        Ok(AgentGraph {
            graph_id: graph_id.into(),
            topology_kind,
            agents,
            edges,
        })
    }

    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn set_graph_id(&mut self, id: impl Into<String>) {
        self.graph_id = id.into();
    }

    pub fn topology_kind(&self) -> TopologyKind {
        self.topology_kind
    }

    pub fn agents(&self) -> &[AgentNode] {
        &self.agents
    }

    /// Mutable access to agent payloads. Indices cannot be changed through this.
    pub fn agent_mut(&mut self, index: usize) -> &mut AgentNode {
        &mut self.agents[index]
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Same agents, different edge set.
    pub fn with_edges(&self, edges: BTreeSet<(usize, usize)>) -> Result<Self> {
        AgentGraph::new(
            self.graph_id.clone(),
            self.topology_kind,
            self.agents.clone(),
            edges,
        )
    }

    /// Senders whose messages `agent` reads, ascending.
    pub fn in_neighbors(&self, agent: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, d)| d == agent)
            .map(|&(s, _)| s)
            .collect()
    }

    pub fn truth_labels(&self) -> Vec<Option<TruthLabel>> {
        self.agents.iter().map(|a| a.truth_label).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("graph json: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Build one of the standard topologies with default roles.
pub fn generate_topology(kind: TopologyKind, n_agents: usize, seed: u64) -> Result<AgentGraph> {
    let min = match kind {
        TopologyKind::Star => 3,
        _ => 2,
    };
    if n_agents < min {
        return Err(Error::Config(format!(
            "{kind} topology needs at least {min} agents, got {n_agents}"
        )));
    }
    let edges: BTreeSet<(usize, usize)> = match kind {
        TopologyKind::Chain => (0..n_agents - 1).map(|i| (i, i + 1)).collect(),
        TopologyKind::Tree => (1..n_agents).map(|c| ((c - 1) / 2, c)).collect(),
        TopologyKind::Star => (1..n_agents).flat_map(|l| [(0, l), (l, 0)]).collect(),
        TopologyKind::Random => random_connected_edges(n_agents, seed)?,
        TopologyKind::Custom => {
            return Err(Error::Config(
                "custom topologies are loaded from files, not generated".into(),
            ))
        }
    };
    let agents = (0..n_agents)
        .map(|i| AgentNode::new(i, default_role(kind, i)))
        .collect();
    AgentGraph::new(format!("{kind}-{n_agents}-{seed}"), kind, agents, edges)
}

fn default_role(kind: TopologyKind, index: usize) -> String {
    match (kind, index) {
        (TopologyKind::Star, 0) => "coordinator".into(),
        (TopologyKind::Tree, 0) => "lead".into(),
        _ => format!("assistant-{index}"),
    }
}

fn random_connected_edges(n: usize, seed: u64) -> Result<BTreeSet<(usize, usize)>> {
    let mut rng = rng::stream(seed, "topology-random", &[n as u64]);
    for _ in 0..RANDOM_MAX_RETRIES {
        let mut edges = BTreeSet::new();
        for s in 0..n {
            for d in 0..n {
                if s != d && rng.random_bool(RANDOM_EDGE_PROB) {
                    edges.insert((s, d));
                }
            }
        }
        if weakly_connected(n, &edges) {
            return Ok(edges);
        }
    }
    Err(Error::Config(format!(
        "no weakly connected random graph with {n} agents after {RANDOM_MAX_RETRIES} draws"
    )))
}

pub(crate) fn weakly_connected(n: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(s, d) in edges {
        let (a, b) = (find(&mut parent, s), find(&mut parent, d));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

/// Row-normalized in-neighbor weights: row `i` lists `(j, 1/indeg(i))` for
/// every sender `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }
}

pub fn normalize_adjacency(g: &AgentGraph) -> NormalizedAdjacency {
    normalize_edges(g.n_agents(), g.edges())
}

pub(crate) fn normalize_edges(n: usize, edges: &BTreeSet<(usize, usize)>) -> NormalizedAdjacency {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(s, d) in edges {
        rows[d].push((s, 0.0));
    }
    for row in &mut rows {
        let w = 1.0 / row.len() as f64;
        for entry in row.iter_mut() {
            entry.1 = w;
        }
    }
    NormalizedAdjacency { rows }
}

/// How agents are scheduled within one communication round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub order: Vec<usize>,
    /// True when the graph has a cycle: every agent reads the previous
    /// round's messages. False for DAGs, where agents run in `order` and
    /// read messages produced earlier in the same round.
    pub synchronous: bool,
}

pub fn execution_order(g: &AgentGraph) -> ExecutionPlan {
    execution_order_edges(g.n_agents(), g.edges())
}

pub(crate) fn execution_order_edges(n: usize, edges: &BTreeSet<(usize, usize)>) -> ExecutionPlan {
    let mut indeg = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in edges {
        indeg[d] += 1;
        out[s].push(d);
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &d in &out[v] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.push(Reverse(d));
            }
        }
    }
    if order.len() == n {
        ExecutionPlan {
            order,
            synchronous: false,
        }
    } else {
        ExecutionPlan {
            order: (0..n).collect(),
            synchronous: true,
        }
    }
}
