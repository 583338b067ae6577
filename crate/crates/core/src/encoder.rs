//! Hierarchical agent encoder.
//!
//! Each agent is summarized at three levels (its own feature, the weighted
//! mean of its in-neighbors, the graph-wide mean), the three summaries are
//! concatenated in that order, and a two-layer ReLU MLP maps the result to the
//! agent representation. Gradients are derived by hand for exactly this
//! architecture.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::rng;

pub const DEFAULT_HIDDEN: usize = 512;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One agent's three summaries, borrowed from a [`Summaries`] matrix.
#[derive(Debug, Clone, Copy)]
pub struct HierarchicalSummary<'a> {
    pub h_self: ArrayView1<'a, f64>,
    pub h_neigh: ArrayView1<'a, f64>,
    pub h_graph: ArrayView1<'a, f64>,
}

/// Summaries for every agent of a graph, stored as the concatenated
/// `N × 3D` encoder input `[self | neigh | graph]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Summaries {
    d: usize,
    input: Array2<f64>,
}

impl Summaries {
    pub fn n(&self) -> usize {
        self.input.nrows()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn agent(&self, i: usize) -> HierarchicalSummary<'_> {
        let d = self.d;
        let row = self.input.row(i);
        HierarchicalSummary {
            h_self: row.slice_move(s![0..d]),
            h_neigh: self.input.slice(s![i, d..2 * d]),
            h_graph: self.input.slice(s![i, 2 * d..3 * d]),
        }
    }

    pub fn concatenated(&self) -> &Array2<f64> {
        &self.input
    }

    /// Build summaries directly from a concatenated matrix (tests, gradient checks).
    pub fn from_concatenated(input: Array2<f64>) -> Result<Self> {
        if !input.ncols().is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "concatenated summary width {} is not a multiple of 3",
                input.ncols()
            )));
        }
        Ok(Summaries {
            d: input.ncols() / 3,
            input,
        })
    }
}

pub fn summarize(features: &EmbeddingMatrix, adj: &NormalizedAdjacency) -> Result<Summaries> {
    let (n, d) = (features.n(), features.d());
    if adj.n() != n {
        return Err(Error::Dimension(format!(
            "features have {n} rows, adjacency has {}",
            adj.n()
        )));
    }
    let x = features.values();
    let mut input = Array2::zeros((n, 3 * d));
    input.slice_mut(s![.., 0..d]).assign(x);
    for (i, row) in adj.rows().iter().enumerate() {
        let mut neigh = input.slice_mut(s![i, d..2 * d]);
        for &(j, w) in row {
            neigh.scaled_add(w, &x.row(j));
        }
    }
    if n > 0 {
        let mean = x.mean_axis(Axis(0)).expect("n > 0");
        for mut row in input.rows_mut() {
            row.slice_mut(s![2 * d..3 * d]).assign(&mean);
        }
    }
    Ok(Summaries { d, input })
}

/// Which summary slots feed the MLP. Disabled slots are zeroed, so the input
/// width stays `3D` regardless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_neigh: bool,
    pub use_global: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_neigh: true,
            use_global: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub layer1_weights: Array2<f64>,
    pub layer1_bias: Array1<f64>,
    pub layer2_weights: Array2<f64>,
    pub layer2_bias: Array1<f64>,
    pub ablation: AblationFlags,
}

/// Parameter gradients, laid out like [`EncoderModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layer1_weights: Array2<f64>,
    pub layer1_bias: Array1<f64>,
    pub layer2_weights: Array2<f64>,
    pub layer2_bias: Array1<f64>,
    /// Gradient with respect to the concatenated `N × 3D` summary input;
    /// disabled slots are zero.
    pub input: Option<Array2<f64>>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    hidden: Array2<f64>,
}

impl EncoderModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, ablation: AblationFlags, seed: u64) -> Self {
        let mut r = rng::stream(seed, "encoder-init", &[input_dim as u64, hidden_dim as u64]);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || r.random_range(-limit..limit))
        };
        let layer1_weights = glorot(3 * input_dim, hidden_dim);
        let layer2_weights = glorot(hidden_dim, hidden_dim);
        EncoderModel {
            layer1_weights,
            layer1_bias: Array1::zeros(hidden_dim),
            layer2_weights,
            layer2_bias: Array1::zeros(hidden_dim),
            ablation,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        EncoderModel {
            layer1_weights: Array2::zeros((3 * input_dim, hidden_dim)),
            layer1_bias: Array1::zeros(hidden_dim),
            layer2_weights: Array2::zeros((hidden_dim, hidden_dim)),
            layer2_bias: Array1::zeros(hidden_dim),
            ablation: AblationFlags::default(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1_weights.nrows() / 3
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1_weights.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer1_weights.len()
            + self.layer1_bias.len()
            + self.layer2_weights.len()
            + self.layer2_bias.len()
    }

    fn check(&self) -> Result<()> {
        let (d3, h) = self.layer1_weights.dim();
        if d3 % 3 != 0
            || self.layer1_bias.len() != h
            || self.layer2_weights.dim() != (h, h)
            || self.layer2_bias.len() != h
        {
            return Err(Error::Dimension(
                "inconsistent encoder parameter shapes".into(),
            ));
        }
        let finite = self.layer1_weights.iter().all(|v| v.is_finite())
            && self.layer1_bias.iter().all(|v| v.is_finite())
            && self.layer2_weights.iter().all(|v| v.is_finite())
            && self.layer2_bias.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }

    fn masked_input(&self, summaries: &Summaries) -> Result<Array2<f64>> {
        if summaries.d() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "summary dim {} does not match encoder input dim {}",
                summaries.d(),
                self.input_dim()
            )));
        }
        let d = summaries.d();
        let mut input = summaries.concatenated().clone();
        if !self.ablation.use_neigh {
            input.slice_mut(s![.., d..2 * d]).fill(0.0);
        }
        if !self.ablation.use_global {
            input.slice_mut(s![.., 2 * d..3 * d]).fill(0.0);
        }
        Ok(input)
    }

    /// Column ranges of the concatenated input that the ablation keeps,
    /// merged where adjacent.
    fn active_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let d = self.input_dim();
        let mut ranges = Vec::with_capacity(3);
        ranges.push(0..d);
        for (on, slot) in [(self.ablation.use_neigh, 1), (self.ablation.use_global, 2)] {
            if !on {
                continue;
            }
            let next = slot * d..(slot + 1) * d;
            match ranges.last_mut() {
                Some(last) if last.end == next.start => last.end = next.end,
                _ => ranges.push(next),
            }
        }
        ranges
    }

    pub fn forward(&self, summaries: &Summaries) -> Result<(Array2<f64>, ForwardCache)> {
        self.check()?;
        let input = self.masked_input(summaries)?;
        let mut pre_activation: Option<Array2<f64>> = None;
        for r in self.active_ranges() {
            let part = input
                .slice(s![.., r.clone()])
                .dot(&self.layer1_weights.slice(s![r, ..]));
            match pre_activation.as_mut() {
                Some(acc) => *acc += &part,
                None => pre_activation = Some(part),
            }
        }
        let mut pre_activation = pre_activation.expect("the self slot is always active");
        pre_activation += &self.layer1_bias;
        let hidden = pre_activation.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let z = hidden.dot(&self.layer2_weights) + &self.layer2_bias;
        Ok((
            z,
            ForwardCache {
                input,
                pre_activation,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
        with_input_grad: bool,
    ) -> Result<EncoderGrads> {
        let (n, h) = (cache.hidden.nrows(), self.hidden_dim());
        if upstream.dim() != (n, h) {
            return Err(Error::Dimension(format!(
                "upstream gradient is {:?}, expected ({n}, {h})",
                upstream.dim()
            )));
        }
        let layer2_weights = cache.hidden.t().dot(upstream);
        let layer2_bias = upstream.sum_axis(Axis(0));
        let mut d_pre = upstream.dot(&self.layer2_weights.t());
        // ReLU subgradient at 0 is 0.
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.pre_activation)
            .for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
        let ranges = self.active_ranges();
        let layer1_weights = if ranges.len() == 1 && ranges[0].len() == self.layer1_weights.nrows()
        {
            cache.input.t().dot(&d_pre)
        } else {
            let mut full = Array2::zeros(self.layer1_weights.dim());
            for r in ranges {
                let part = cache.input.slice(s![.., r.clone()]).t().dot(&d_pre);
                full.slice_mut(s![r, ..]).assign(&part);
            }
            full
        };
        let layer1_bias = d_pre.sum_axis(Axis(0));
        let input = with_input_grad.then(|| {
            let mut g = d_pre.dot(&self.layer1_weights.t());
            let d = self.input_dim();
            if !self.ablation.use_neigh {
                g.slice_mut(s![.., d..2 * d]).fill(0.0);
            }
            if !self.ablation.use_global {
                g.slice_mut(s![.., 2 * d..3 * d]).fill(0.0);
            }
            g
        });
        Ok(EncoderGrads {
            layer1_weights,
            layer1_bias,
            layer2_weights,
            layer2_bias,
            input,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(18 + 4 * self.parameter_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden_dim() as u32).to_le_bytes());
        buf.push(u8::from(self.ablation.use_neigh));
        buf.push(u8::from(self.ablation.use_global));
        let values = self
            .layer1_weights
            .iter()
            .chain(self.layer1_bias.iter())
            .chain(self.layer2_weights.iter())
            .chain(self.layer2_bias.iter());
        for v in values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 18 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Data(
                "not a checkpoint (bad magic or truncated)".into(),
            ));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                word(4)
            )));
        }
        let (d, h) = (word(8) as usize, word(12) as usize);
        let flag = |b: u8| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Data(format!("bad ablation flag byte {other}"))),
        };
        let ablation = AblationFlags {
            use_neigh: flag(bytes[16])?,
            use_global: flag(bytes[17])?,
        };
        let count = 3 * d * h + h + h * h + h;
        if bytes.len() != 18 + 4 * count {
            return Err(Error::Data(format!(
                "checkpoint is {} bytes, header implies {}",
                bytes.len(),
                18 + 4 * count
            )));
        }
        let mut vals = bytes[18..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        let mut take = |len: usize| -> Vec<f64> { vals.by_ref().take(len).collect() };
        let model = EncoderModel {
            layer1_weights: Array2::from_shape_vec((3 * d, h), take(3 * d * h)).unwrap(),
            layer1_bias: Array1::from(take(h)),
            layer2_weights: Array2::from_shape_vec((h, h), take(h * h)).unwrap(),
            layer2_bias: Array1::from(take(h)),
            ablation,
        };
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn encode(model: &EncoderModel, summaries: &Summaries) -> Result<Array2<f64>> {
    model.forward(summaries).map(|(z, _)| z)
}

/// Gradients of `encode` given `dL/dZ`, including the summary-input gradient.
pub fn encode_backward(
    model: &EncoderModel,
    summaries: &Summaries,
    upstream: &Array2<f64>,
) -> Result<EncoderGrads> {
    let (_, cache) = model.forward(summaries)?;
    model.backward(&cache, upstream, true)
}

/// Chain a summary-input gradient back to the raw features through the
/// neighbor and global summaries.
pub fn feature_gradient(input_grad: &Array2<f64>, adj: &NormalizedAdjacency) -> Array2<f64> {
    let (n, d3) = input_grad.dim();
    let d = d3 / 3;
    let mut g = input_grad.slice(s![.., 0..d]).to_owned();
    for (i, row) in adj.rows().iter().enumerate() {
        let gi = input_grad.slice(s![i, d..2 * d]);
        for &(j, w) in row {
            g.row_mut(j).scaled_add(w, &gi);
        }
    }
    if n > 0 {
        let global = input_grad.slice(s![.., 2 * d..3 * d]).sum_axis(Axis(0)) / n as f64;
        for mut row in g.rows_mut() {
            row += &global;
        }
    }
    g
}
