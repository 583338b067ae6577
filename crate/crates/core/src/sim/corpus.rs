//! Synthetic corpora: benign training graphs and attacked test graphs.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use super::{
    apply_attack, run_rounds, AttackKind, AttackSpec, Defense, QueryTask, Scenario, SimConfig,
};
use crate::embedding::{embed_graph, EmbeddingMatrix, EmbeddingProviderSpec};
use crate::error::Result;
use crate::graph::{generate_topology, AgentGraph, TopologyKind, TruthLabel};
use crate::parallel::{self, ExecMode};
use crate::rng;

/// `count` attackers drawn uniformly without replacement.
pub fn random_attackers<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> BTreeSet<usize> {
    index::sample(rng, n, count.min(n)).into_iter().collect()
}

fn first_round_graph(
    scenario: &Scenario,
    task: &QueryTask,
    provider: &EmbeddingProviderSpec,
    seed: u64,
) -> Result<(AgentGraph, EmbeddingMatrix)> {
    let cfg = SimConfig {
        rounds: 1,
        provider: provider.clone(),
        record_features: false,
        ..SimConfig::default()
    };
    let trace = run_rounds(scenario, task, &cfg, Defense::None, seed)?;
    let mut g = scenario.graph.clone();
    for (i, text) in trace.rounds[0].response_texts.iter().enumerate() {
        g.agent_mut(i).response_text = Some(text.clone());
    }
    let x = embed_graph(&g, provider)?;
    Ok((g, x))
}

/// Benign interaction graphs with first-round responses and their features.
/// Topologies cycle through `topologies`; graph `i` is reproducible on its own.
pub fn generate_normal_corpus(
    count: usize,
    n_agents: usize,
    topologies: &[TopologyKind],
    provider: &EmbeddingProviderSpec,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<(AgentGraph, EmbeddingMatrix)>> {
    let items: Vec<usize> = (0..count).collect();
    parallel::try_map(&items, mode, |&i| {
        let kind = topologies[i % topologies.len()];
        let topo_seed = rng::stream_key(seed, "corpus-topology", &[i as u64]);
        let mut g = generate_topology(kind, n_agents, topo_seed)?;
        g.set_graph_id(format!("normal-{seed}-{i:05}"));
        let task = QueryTask::synthetic(seed, i as u64);
        first_round_graph(&Scenario::benign(g), &task, provider, seed)
    })
}

/// One attacked graph observed after the first round, with its ground truth
/// (1 = attacker).
#[allow(clippy::too_many_arguments)]
pub fn attacked_sample(
    kind: AttackKind,
    topology: TopologyKind,
    n_agents: usize,
    n_attackers: usize,
    strength: f64,
    provider: &EmbeddingProviderSpec,
    seed: u64,
    index: u64,
) -> Result<(AgentGraph, EmbeddingMatrix, Vec<u8>)> {
    let key = [index, kind as u64, topology as u64];
    let topo_seed = rng::stream_key(seed, "attacked-topology", &key);
    let mut g = generate_topology(topology, n_agents, topo_seed)?;
    g.set_graph_id(format!("attacked-{topology}-{kind}-{seed}-{index:05}"));
    let task = QueryTask::synthetic(seed ^ 0x5eed, index);
    let attackers = random_attackers(
        n_agents,
        n_attackers,
        &mut rng::stream(seed, "attackers", &key),
    );
    let spec = AttackSpec {
        kind,
        attacker_indices: attackers,
        strength,
        seed,
    };
    let scenario = apply_attack(&g, &task, &spec)?;
    let (g, x) = first_round_graph(&scenario, &task, provider, seed)?;
    let labels = g
        .agents()
        .iter()
        .map(|a| u8::from(a.truth_label == Some(TruthLabel::Malicious)))
        .collect();
    Ok((g, x, labels))
}
