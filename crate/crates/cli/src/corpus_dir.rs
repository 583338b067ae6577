//! On-disk corpus layout: `manifest.json`, `graphs/*.json`, `embeddings/*.bgem`.

use std::path::{Path, PathBuf};

use blindguard_core::embedding::{
    read_embeddings, write_embeddings, EmbeddingMatrix, EmbeddingProviderSpec,
};
use blindguard_core::graph::{AgentGraph, TopologyKind};
use blindguard_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::AttackDistribution;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub graph_id: String,
    pub topology: TopologyKind,
    pub n_agents: usize,
    pub graph: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub provider: EmbeddingProviderSpec,
    pub attack: Option<AttackDistribution>,
    pub graphs: Vec<ManifestEntry>,
}

fn file_stem(graph_id: &str) -> String {
    graph_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(
    dir: &Path,
    seed: u64,
    provider: &EmbeddingProviderSpec,
    attack: Option<AttackDistribution>,
    items: &[(AgentGraph, EmbeddingMatrix)],
) -> Result<Manifest> {
    create_dir(&dir.join("graphs"))?;
    create_dir(&dir.join("embeddings"))?;
    let mut graphs = Vec::with_capacity(items.len());
    for (g, x) in items {
        let stem = file_stem(g.graph_id());
        let graph = PathBuf::from("graphs").join(format!("{stem}.json"));
        let embeddings = PathBuf::from("embeddings").join(format!("{stem}.bgem"));
        g.write(&dir.join(&graph))?;
        write_embeddings(x, &dir.join(&embeddings))?;
        graphs.push(ManifestEntry {
            graph_id: g.graph_id().to_string(),
            topology: g.topology_kind(),
            n_agents: g.n_agents(),
            graph,
            embeddings,
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        seed,
        provider: provider.clone(),
        attack,
        graphs,
    };
    let path = dir.join(MANIFEST);
    let text =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<(AgentGraph, EmbeddingMatrix)>)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.schema_version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.schema_version
        )));
    }
    let mut items = Vec::with_capacity(manifest.graphs.len());
    for entry in &manifest.graphs {
        let g = AgentGraph::read(&dir.join(&entry.graph))?;
        let x = read_embeddings(&dir.join(&entry.embeddings))?;
        if g.n_agents() != entry.n_agents || x.n() != entry.n_agents {
            return Err(Error::Data(format!(
                "graph {}: manifest lists {} agents, files hold {} agents and {} embedding rows",
                entry.graph_id,
                entry.n_agents,
                g.n_agents(),
                x.n()
            )));
        }
        items.push((g, x));
    }
    Ok((manifest, items))
}
