//! Agent scoring, budgeted flagging and ranking metrics.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::encoder::{encode, summarize, EncoderModel};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AgentGraph};
use crate::parallel::{self, ExecMode};

/// Flagging budget used in deployment.
pub const DEFAULT_BUDGET: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionReport {
    pub graph_id: String,
    pub scores: Vec<f64>,
    pub flagged: Vec<usize>,
    pub k: usize,
    pub model_fingerprint: String,
}

impl DetectionReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serialization is infallible");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn unit_rows(z: &Array2<f64>) -> Result<Array2<f64>> {
    let mut unit = z.clone();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm {
                what: "representation",
                row: i,
            });
        }
        row /= norm;
    }
    Ok(unit)
}

/// Negative mean cosine similarity of each row against every row, itself
/// included. Higher is more anomalous.
pub fn anomaly_scores(z: &Array2<f64>) -> Result<Vec<f64>> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::Data("cannot score an empty graph".into()));
    }
    let unit = unit_rows(z)?;
    let sim = unit.dot(&unit.t());
    Ok(sim
        .rows()
        .into_iter()
        .map(|row| -row.sum() / n as f64)
        .collect())
}

/// Indices of the `min(k, N)` highest scores, descending, ties by index.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// ROC AUC as the Mann–Whitney statistic with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of positive ranks with tie groups sharing their average rank.
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end + 1) as f64 / 2.0;
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        start = end;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC over all agents of all graphs pooled into one ranking.
pub fn micro_auc(per_graph: &[(Vec<f64>, Vec<u8>)]) -> Result<f64> {
    let scores: Vec<f64> = per_graph
        .iter()
        .flat_map(|(s, _)| s.iter().copied())
        .collect();
    let labels: Vec<u8> = per_graph
        .iter()
        .flat_map(|(_, l)| l.iter().copied())
        .collect();
    roc_auc(&scores, &labels)
}

/// Mean per-graph AUC, skipping graphs whose labels are single-class.
/// `None` when no graph has both classes.
pub fn macro_auc(per_graph: &[(Vec<f64>, Vec<u8>)]) -> Option<f64> {
    let aucs: Vec<f64> = per_graph
        .iter()
        .filter_map(|(s, l)| roc_auc(s, l).ok())
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// A model paired with its fingerprint, so repeated detections do not rehash
/// the checkpoint.
#[derive(Debug, Clone)]
pub struct Detector {
    model: EncoderModel,
    fingerprint: String,
}

impl Detector {
    pub fn new(model: EncoderModel) -> Self {
        let fingerprint = model.fingerprint();
        Detector { model, fingerprint }
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn detect(
        &self,
        g: &AgentGraph,
        features: &EmbeddingMatrix,
        k: usize,
    ) -> Result<DetectionReport> {
        detect_with_fingerprint(&self.model, &self.fingerprint, g, features, k)
    }

    /// Detect on many graphs; reports come back in input order.
    pub fn detect_batch(
        &self,
        items: &[(AgentGraph, EmbeddingMatrix)],
        k: usize,
        mode: ExecMode,
    ) -> Result<Vec<DetectionReport>> {
        parallel::try_map(items, mode, |(g, x)| self.detect(g, x, k))
    }
}

pub fn detect(
    model: &EncoderModel,
    g: &AgentGraph,
    features: &EmbeddingMatrix,
    k: usize,
) -> Result<DetectionReport> {
    detect_with_fingerprint(model, &model.fingerprint(), g, features, k)
}

fn detect_with_fingerprint(
    model: &EncoderModel,
    fingerprint: &str,
    g: &AgentGraph,
    features: &EmbeddingMatrix,
    k: usize,
) -> Result<DetectionReport> {
    if k == 0 {
        return Err(Error::Config(
            "detection budget k must be at least 1".into(),
        ));
    }
    if features.d() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "features have d={}, model expects {}",
            features.d(),
            model.input_dim()
        )));
    }
    let summaries = summarize(features, &normalize_adjacency(g))?;
    let z = encode(model, &summaries)?;
    let scores = anomaly_scores(&z).map_err(|e| match e {
        Error::ZeroNorm { row, .. } => Error::DegenerateRepresentation { row },
        other => other,
    })?;
    let flagged = select_topk(&scores, k);
    Ok(DetectionReport {
        graph_id: g.graph_id().to_string(),
        scores,
        flagged,
        k,
        model_fingerprint: fingerprint.to_string(),
    })
}
