//! Contrastive training of the encoder on corruption-augmented normal graphs.

use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, sample_corruption_set, CorruptionConfig};
use crate::embedding::EmbeddingMatrix;
use crate::encoder::{summarize, AblationFlags, EncoderGrads, EncoderModel, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AgentGraph, NormalizedAdjacency};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Add `weight_decay · θ` to the gradient (classic L2) instead of
    /// decaying the parameters directly.
    pub coupled_weight_decay: bool,
    pub cosine_t_max: u32,
    pub eta_min: f64,
    pub epochs: u32,
    pub tau: f64,
    pub hidden_dim: usize,
    pub ablation: AblationFlags,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            coupled_weight_decay: false,
            cosine_t_max: 10,
            eta_min: 1e-5,
            epochs: 50,
            tau: 0.5,
            hidden_dim: DEFAULT_HIDDEN,
            ablation: AblationFlags::default(),
            corruption: CorruptionConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("tau", self.tau)?;
        positive("eta_min", self.eta_min)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.cosine_t_max == 0 {
            return Err(Error::Config("cosine_t_max must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        self.corruption.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub config: TrainConfig,
    pub seed: u64,
    pub model_fingerprint: String,
}

/// Supervised contrastive loss over representation rows and its gradient.
///
/// Positives of anchor `i` are the other rows sharing its label, negatives the
/// rows with the other label; the anchor never appears in its own
/// denominator. Anchors without positives contribute nothing, while the
/// `1/N` prefactor still counts them.
pub fn contrastive_loss(z: &Array2<f64>, labels: &[u8], tau: f64) -> Result<(f64, Array2<f64>)> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} representation rows",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::Data(format!(
            "contrastive loss needs at least 2 rows, got {n}"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let mut norms = Vec::with_capacity(n);
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
        norms.push(norm);
    }
    let sim = unit.dot(&unit.t());

    // d_sim[i][j]: derivative of L with respect to sim[i][j] taken as the
    // anchor-i entry; sim is symmetric so both orientations are folded later.
    let mut d_sim = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[i]).collect();
        let logits = |j: usize| sim[[i, j]] / tau;
        let shift = (0..n)
            .filter(|&j| j != i)
            .map(logits)
            .fold(f64::NEG_INFINITY, f64::max);
        let neg_exp: Vec<f64> = negatives
            .iter()
            .map(|&k| (logits(k) - shift).exp())
            .collect();
        let neg_sum: f64 = neg_exp.iter().sum();
        let weight = inv_n / positives.len() as f64;
        for &j in &positives {
            let pos_exp = (logits(j) - shift).exp();
            let denom = pos_exp + neg_sum;
            loss += weight * (denom.ln() - (logits(j) - shift));
            d_sim[[i, j]] += weight * (pos_exp / denom - 1.0) / tau;
            for (&k, &e) in negatives.iter().zip(&neg_exp) {
                d_sim[[i, k]] += weight * (e / denom) / tau;
            }
        }
    }

    let sym = &d_sim + &d_sim.t();
    let d_unit = sym.dot(&unit);
    let mut grad = Array2::<f64>::zeros((n, z.ncols()));
    for (i, &norm) in norms.iter().enumerate() {
        let u = unit.row(i);
        let g = d_unit.row(i);
        let radial = u.dot(&g);
        let mut out = grad.row_mut(i);
        out.assign(&g);
        out.scaled_add(-radial, &u);
        out /= norm;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            hyper: AdamHyper::default(),
        }
    }
}

/// One Adam update. Weight decay is decoupled (`θ -= lr·wd·θ`) unless
/// `coupled`, in which case `wd·θ` is added to the gradient first.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    coupled: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {pos}")));
    }
    adam_update(params, grads, state, lr, weight_decay, coupled);
    Ok(())
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    coupled: bool,
) {
    state.step += 1;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let t = state.step as i32;
    let inv_c1 = 1.0 / (1.0 - beta1.powi(t));
    let inv_sqrt_c2 = 1.0 / (1.0 - beta2.powi(t)).sqrt();
    let (coupled_wd, decoupled_wd) = if coupled {
        (weight_decay, 0.0)
    } else {
        (0.0, weight_decay)
    };
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + coupled_wd * *p;
        *m = flush_subnormal(beta1 * *m + (1.0 - beta1) * g);
        *v = flush_subnormal(beta2 * *v + (1.0 - beta2) * g * g);
        let update = (*m * inv_c1) / (v.sqrt() * inv_sqrt_c2 + eps);
        *p -= lr * (update + decoupled_wd * *p);
    }
}

/// Zero for subnormal inputs, identity otherwise.
#[inline]
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// Cosine-annealed learning rate with warm restarts every `cosine_t_max` epochs.
pub fn cosine_lr(epoch: u32, cfg: &TrainConfig) -> f64 {
    let t_max = cfg.cosine_t_max.max(1);
    let phase = f64::from(epoch % t_max) / f64::from(t_max);
    cfg.eta_min + 0.5 * (cfg.learning_rate - cfg.eta_min) * (1.0 + (PI * phase).cos())
}

struct Optimizer {
    states: [AdamState; 4],
}

impl Optimizer {
    fn new(model: &EncoderModel) -> Self {
        Optimizer {
            states: [
                AdamState::new(model.layer1_weights.len()),
                AdamState::new(model.layer1_bias.len()),
                AdamState::new(model.layer2_weights.len()),
                AdamState::new(model.layer2_bias.len()),
            ],
        }
    }

    fn step(
        &mut self,
        model: &mut EncoderModel,
        grads: &EncoderGrads,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        // Validate every tensor before touching any of them.
        let all_finite = grads.layer1_weights.iter().all(|g| g.is_finite())
            && grads.layer1_bias.iter().all(|g| g.is_finite())
            && grads.layer2_weights.iter().all(|g| g.is_finite())
            && grads.layer2_bias.iter().all(|g| g.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("encoder gradient".into()));
        }
        let (wd, coupled) = (cfg.weight_decay, cfg.coupled_weight_decay);
        let [s1, s2, s3, s4] = &mut self.states;
        adam_update(
            slice_mut2(&mut model.layer1_weights),
            slice2(&grads.layer1_weights),
            s1,
            lr,
            wd,
            coupled,
        );
        adam_update(
            slice_mut1(&mut model.layer1_bias),
            slice1(&grads.layer1_bias),
            s2,
            lr,
            wd,
            coupled,
        );
        adam_update(
            slice_mut2(&mut model.layer2_weights),
            slice2(&grads.layer2_weights),
            s3,
            lr,
            wd,
            coupled,
        );
        adam_update(
            slice_mut1(&mut model.layer2_bias),
            slice1(&grads.layer2_bias),
            s4,
            lr,
            wd,
            coupled,
        );
        Ok(())
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn slice_mut2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn slice_mut1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

/// Loss of the full pipeline (summaries → encoder → contrastive loss) on
/// already-corrupted features, with parameter gradients.
pub fn pipeline_loss(
    model: &EncoderModel,
    features: &EmbeddingMatrix,
    adj: &NormalizedAdjacency,
    labels: &[u8],
    tau: f64,
) -> Result<(f64, EncoderGrads)> {
    let summaries = summarize(features, adj)?;
    let (z, cache) = model.forward(&summaries)?;
    let (loss, dz) = contrastive_loss(&z, labels, tau)?;
    let grads = model.backward(&cache, &dz, false)?;
    Ok((loss, grads))
}

/// Train a fresh encoder. Any truth labels on the input graphs are ignored.
pub fn train(
    graphs: &[(AgentGraph, EmbeddingMatrix)],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    cfg.validate()?;
    let first = graphs
        .first()
        .ok_or_else(|| Error::Data("training needs at least one graph".into()))?;
    let d = first.1.d();
    for (g, x) in graphs {
        if x.d() != d {
            return Err(Error::Dimension(format!(
                "graph {} has feature dim {}, expected {d}",
                g.graph_id(),
                x.d()
            )));
        }
        if x.n() != g.n_agents() {
            return Err(Error::Dimension(format!(
                "graph {} has {} agents but {} feature rows",
                g.graph_id(),
                g.n_agents(),
                x.n()
            )));
        }
    }
    let adjacency: Vec<NormalizedAdjacency> =
        graphs.iter().map(|(g, _)| normalize_adjacency(g)).collect();

    let mut model = EncoderModel::init(d, cfg.hidden_dim, cfg.ablation, cfg.seed);
    let mut opt = Optimizer::new(&model);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs as usize);
    let mut order: Vec<usize> = (0..graphs.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        order.shuffle(&mut rng::stream(
            cfg.seed,
            "train-order",
            &[u64::from(epoch)],
        ));
        let draw_epoch = if cfg.corruption.resample_per_epoch {
            u64::from(epoch)
        } else {
            0
        };
        let mut total = 0.0;
        for &gi in &order {
            let (g, x) = &graphs[gi];
            let mut step = || -> Result<f64> {
                let mut r = rng::stream(
                    cfg.corruption.seed,
                    "train-corrupt",
                    &[cfg.seed, draw_epoch, rng::id_hash(g.graph_id()), gi as u64],
                );
                let subset = sample_corruption_set(x.n(), &cfg.corruption, &mut r)?;
                let batch = corrupt(x, &subset, cfg.corruption.alpha, &mut r)?;
                let (loss, grads) = pipeline_loss(
                    &model,
                    &batch.features,
                    &adjacency[gi],
                    &batch.labels,
                    cfg.tau,
                )?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                opt.step(&mut model, &grads, lr, cfg)?;
                Ok(loss)
            };
            total +=
                step().map_err(|e| e.context(format!("epoch {epoch}, graph {}", g.graph_id())))?;
        }
        epoch_losses.push(total / graphs.len() as f64);
    }

    let report = TrainReport {
        epoch_losses,
        checkpoint_path: None,
        config: cfg.clone(),
        seed: cfg.seed,
        model_fingerprint: model.fingerprint(),
    };
    Ok((model, report))
}
