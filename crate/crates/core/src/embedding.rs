//! Agent feature vectors and the `BGEM` embedding file format.
//!
//! The synthetic embedder is a seeded feature-hashing model: every token of a
//! response is mapped to a fixed pseudo-random Gaussian direction, the token
//! vectors are summed and the result is projected onto the unit sphere.
//! Identical texts therefore embed identically, texts with disjoint
//! vocabularies are near-orthogonal, and texts sharing vocabulary are close.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AgentGraph;
use crate::rng;

pub const DEFAULT_DIM: usize = 384;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"BGEM";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Row-major `n × d` feature matrix; row `i` is agent `i`'s feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding row {}",
                pos / values.ncols().max(1)
            )));
        }
        Ok(EmbeddingMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>], d: usize) -> Result<Self> {
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {d}",
                    r.len()
                )));
            }
            flat.extend_from_slice(r);
        }
        let values = Array2::from_shape_vec((rows.len(), d), flat).expect("shape checked above");
        Self::new(values)
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        EmbeddingMatrix {
            values: Array2::zeros((n, d)),
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Replace row `i`. Used by corruption; keeps the finiteness invariant.
    pub(crate) fn set_row(&mut self, i: usize, row: &[f64]) -> Result<()> {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {i}")));
        }
        self.values
            .row_mut(i)
            .iter_mut()
            .zip(row)
            .for_each(|(dst, &src)| *dst = src);
        Ok(())
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.values.dim() == other.values.dim()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Synthetic,
    File,
}

/// Where agent features come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingProviderSpec {
    pub kind: ProviderKind,
    pub dim: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl Default for EmbeddingProviderSpec {
    fn default() -> Self {
        EmbeddingProviderSpec {
            kind: ProviderKind::Synthetic,
            dim: DEFAULT_DIM,
            seed: 0,
            path: None,
        }
    }
}

impl EmbeddingProviderSpec {
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        EmbeddingProviderSpec {
            kind: ProviderKind::Synthetic,
            dim,
            seed,
            path: None,
        }
    }

    pub fn file(path: impl Into<PathBuf>, dim: usize) -> Self {
        EmbeddingProviderSpec {
            kind: ProviderKind::File,
            dim,
            seed: 0,
            path: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "embedding dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.kind == ProviderKind::File && self.path.is_none() {
            return Err(Error::Config("file embedding provider needs a path".into()));
        }
        Ok(())
    }
}

pub fn embed_graph(g: &AgentGraph, spec: &EmbeddingProviderSpec) -> Result<EmbeddingMatrix> {
    spec.validate()?;
    match spec.kind {
        ProviderKind::Synthetic => {
            let mut m = Array2::zeros((g.n_agents(), spec.dim));
            for agent in g.agents() {
                let text = agent.response_text.as_deref().ok_or_else(|| {
                    Error::Data(format!(
                        "agent {} of graph {} has no response text",
                        agent.index,
                        g.graph_id()
                    ))
                })?;
                let v = embed_text(text, spec.dim, spec.seed);
                m.row_mut(agent.index)
                    .iter_mut()
                    .zip(v)
                    .for_each(|(dst, src)| *dst = src);
            }
            EmbeddingMatrix::new(m)
        }
        ProviderKind::File => {
            let path = spec.path.as_deref().expect("validated");
            let m = read_embeddings(path)?;
            if m.d() != spec.dim {
                return Err(Error::Dimension(format!(
                    "{}: file has d={}, provider expects {}",
                    path.display(),
                    m.d(),
                    spec.dim
                )));
            }
            if m.n() != g.n_agents() {
                return Err(Error::Data(format!(
                    "{}: file has {} rows, graph {} has {} agents",
                    path.display(),
                    m.n(),
                    g.graph_id(),
                    g.n_agents()
                )));
            }
            Ok(m)
        }
    }
}

pub(crate) fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Unit-norm synthetic embedding of one text, rounded to `f32` precision so it
/// survives a trip through the embedding file unchanged.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    let mut any = false;
    for token in tokenize(text) {
        add_token(&mut acc, &token, seed);
        any = true;
    }
    if !any {
        // No word characters: fall back to the raw string as one token.
        add_token(&mut acc, &format!("\u{0}{text}"), seed);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    acc.iter().map(|v| f64::from((v / norm) as f32)).collect()
}

fn add_token(acc: &mut [f64], token: &str, seed: u64) {
    let mut r = rng::stream(
        seed,
        "embed-token",
        &[acc.len() as u64, rng::id_hash(token)],
    );
    for slot in acc.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *slot += z;
    }
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.n() * m.d());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.n() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.d() as u32).to_le_bytes());
    for v in m.values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Data(format!(
            "embedding file truncated: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Data("bad embedding magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::Data(format!(
            "unsupported embedding version {version}"
        )));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "embedding payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    EmbeddingMatrix::new(Array2::from_shape_vec((n, d), values).expect("length checked"))
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_embeddings(m))
        .map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| e.context(path.display().to_string()))
}
