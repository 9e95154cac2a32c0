//! Deterministic toy decoder-transformer substrate.
//!
//! Weights come from a counter-based generator so a spec fully determines
//! the model, bit for bit. The forward pass is a standard pre-norm decoder
//! block: RMSNorm, multi-head causal attention, RMSNorm, gated FFN. Besides
//! hidden states it returns per-layer activation taps (Q projection, V
//! projection, FFN output, residual input) consumed by the profiler.

mod weights;

pub use weights::{
    normalize_weights, read_container, write_container, GenericBlockWeights, LayoutTag, RawTensor,
    RawWeightContainer, WEIGHT_CONTAINER_MAGIC,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canon;
use crate::error::{NveError, Result};
use crate::rng;

/// RMSNorm epsilon; fixed, and part of the serialized architecture key.
pub const RMS_EPS: f32 = 1e-5;

/// Architecture description of a toy model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(NveError::InvalidSpec("num_layers must be >= 1".into()));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(NveError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(NveError::InvalidSpec(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Canonical digest of this shape descriptor (includes the RMSNorm epsilon).
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct SpecWithEps<'a> {
            spec: &'a ModelSpec,
            rms_eps: f32,
        }
        canon::digest_canonical(&SpecWithEps {
            spec: self,
            rms_eps: RMS_EPS,
        })
        .expect("spec serializes")
    }
}

/// Canonical per-layer weight slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl SlotKind {
    pub const ALL: [SlotKind; 7] = [
        SlotKind::Q,
        SlotKind::K,
        SlotKind::V,
        SlotKind::O,
        SlotKind::Gate,
        SlotKind::Up,
        SlotKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Q => "q",
            SlotKind::K => "k",
            SlotKind::V => "v",
            SlotKind::O => "o",
            SlotKind::Gate => "gate",
            SlotKind::Up => "up",
            SlotKind::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<SlotKind> {
        SlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NveError::UnknownSlot(s.to_string()))
    }

    fn rng_slot_id(self) -> u64 {
        self as u64
    }

    /// (rows, cols) of this slot's matrix.
    pub fn shape(self, spec: &ModelSpec) -> (usize, usize) {
        let d = spec.hidden_dim;
        let f = spec.ffn_dim;
        match self {
            SlotKind::Q | SlotKind::K | SlotKind::V | SlotKind::O => (d, d),
            SlotKind::Gate | SlotKind::Up => (f, d),
            SlotKind::Down => (d, f),
        }
    }
}

const EMBEDDING_SLOT_ID: u64 = 7;

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(NveError::DimensionMismatch(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = self * x, f32 accumulation in index order.
    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.cols, "matvec input length");
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut acc = 0.0f32;
                for (w, xv) in row.iter().zip(x) {
                    acc += w * xv;
                }
                acc
            })
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// One transformer block's weights in canonical slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerBiases {
    pub q: Option<Vec<f32>>,
    pub k: Option<Vec<f32>>,
    pub v: Option<Vec<f32>>,
    pub o: Option<Vec<f32>>,
    pub gate: Option<Vec<f32>>,
    pub up: Option<Vec<f32>>,
    pub down: Option<Vec<f32>>,
}

impl LayerBiases {
    pub fn get(&self, slot: SlotKind) -> Option<&Vec<f32>> {
        match slot {
            SlotKind::Q => self.q.as_ref(),
            SlotKind::K => self.k.as_ref(),
            SlotKind::V => self.v.as_ref(),
            SlotKind::O => self.o.as_ref(),
            SlotKind::Gate => self.gate.as_ref(),
            SlotKind::Up => self.up.as_ref(),
            SlotKind::Down => self.down.as_ref(),
        }
    }

    pub fn set(&mut self, slot: SlotKind, bias: Vec<f32>) {
        let b = Some(bias);
        match slot {
            SlotKind::Q => self.q = b,
            SlotKind::K => self.k = b,
            SlotKind::V => self.v = b,
            SlotKind::O => self.o = b,
            SlotKind::Gate => self.gate = b,
            SlotKind::Up => self.up = b,
            SlotKind::Down => self.down = b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
    pub biases: LayerBiases,
}

impl LayerWeights {
    pub fn slot(&self, slot: SlotKind) -> &Matrix {
        match slot {
            SlotKind::Q => &self.q,
            SlotKind::K => &self.k,
            SlotKind::V => &self.v,
            SlotKind::O => &self.o,
            SlotKind::Gate => &self.gate,
            SlotKind::Up => &self.up,
            SlotKind::Down => &self.down,
        }
    }

    pub fn slot_mut(&mut self, slot: SlotKind) -> &mut Matrix {
        match slot {
            SlotKind::Q => &mut self.q,
            SlotKind::K => &mut self.k,
            SlotKind::V => &mut self.v,
            SlotKind::O => &mut self.o,
            SlotKind::Gate => &mut self.gate,
            SlotKind::Up => &mut self.up,
            SlotKind::Down => &mut self.down,
        }
    }
}

/// Immutable toy model; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub spec: ModelSpec,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

fn gen_matrix(seed: u64, layer: u64, slot: u64, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (cols as f32).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        data.push(rng::counter_uniform_f32(seed, layer, slot, i as u64, bound));
    }
    Matrix { rows, cols, data }
}

/// Build a toy model whose weights are a pure function of the spec.
pub fn build_toy_model(spec: &ModelSpec) -> Result<ToyModel> {
    spec.validate()?;
    let embedding = gen_matrix(
        spec.seed,
        0,
        EMBEDDING_SLOT_ID,
        spec.vocab_size,
        spec.hidden_dim,
    );
    let layers = (0..spec.num_layers)
        .map(|l| {
            let m = |slot: SlotKind| {
                let (rows, cols) = slot.shape(spec);
                gen_matrix(spec.seed, l as u64, slot.rng_slot_id(), rows, cols)
            };
            LayerWeights {
                q: m(SlotKind::Q),
                k: m(SlotKind::K),
                v: m(SlotKind::V),
                o: m(SlotKind::O),
                gate: m(SlotKind::Gate),
                up: m(SlotKind::Up),
                down: m(SlotKind::Down),
                biases: LayerBiases::default(),
            }
        })
        .collect();
    Ok(ToyModel {
        spec: spec.clone(),
        embedding,
        layers,
    })
}

/// Returns a copy with one slot's weights scaled by `factor`.
pub fn inject_outlier(
    model: &ToyModel,
    layer: usize,
    slot: SlotKind,
    factor: f32,
) -> Result<ToyModel> {
    if factor < 0.0 || !factor.is_finite() {
        return Err(NveError::InvalidParameter(format!(
            "outlier factor must be finite and >= 0, got {factor}"
        )));
    }
    if layer >= model.spec.num_layers {
        return Err(NveError::UnknownLayer {
            layer,
            num_layers: model.spec.num_layers,
        });
    }
    let mut out = model.clone();
    for w in &mut out.layers[layer].slot_mut(slot).data {
        *w *= factor;
    }
    if let Some(b) = match slot {
        SlotKind::Q => &mut out.layers[layer].biases.q,
        SlotKind::K => &mut out.layers[layer].biases.k,
        SlotKind::V => &mut out.layers[layer].biases.v,
        SlotKind::O => &mut out.layers[layer].biases.o,
        SlotKind::Gate => &mut out.layers[layer].biases.gate,
        SlotKind::Up => &mut out.layers[layer].biases.up,
        SlotKind::Down => &mut out.layers[layer].biases.down,
    } {
        for x in b.iter_mut() {
            *x *= factor;
        }
    }
    Ok(out)
}

impl ToyModel {
    /// SHA-256 over all weight buffers (little-endian f32, canonical order).
    pub fn weight_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |m: &Matrix| {
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.embedding);
        for layer in &self.layers {
            for slot in SlotKind::ALL {
                feed(layer.slot(slot));
            }
        }
        for layer in &self.layers {
            for slot in SlotKind::ALL {
                if let Some(b) = layer.biases.get(slot) {
                    for v in b {
                        Digest::update(&mut h, v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Cache key: spec digest plus weight-content digest.
    pub fn architecture_key(&self) -> String {
        #[derive(Serialize)]
        struct Key {
            spec_digest: String,
            weight_digest: String,
        }
        canon::digest_canonical(&Key {
            spec_digest: self.spec.digest(),
            weight_digest: self.weight_digest(),
        })
        .expect("key serializes")
    }

    /// A model built from a subset of this model's layers (same embedding).
    pub fn submodel(&self, layers: &[usize]) -> Result<ToyModel> {
        let mut picked = Vec::with_capacity(layers.len());
        for &l in layers {
            if l >= self.spec.num_layers {
                return Err(NveError::UnknownLayer {
                    layer: l,
                    num_layers: self.spec.num_layers,
                });
            }
            picked.push(self.layers[l].clone());
        }
        let mut spec = self.spec.clone();
        spec.num_layers = picked.len().max(1);
        if picked.is_empty() {
            return Err(NveError::InvalidSpec("submodel needs >= 1 layer".into()));
        }
        Ok(ToyModel {
            spec,
            embedding: self.embedding.clone(),
            layers: picked,
        })
    }
}

/// Per-layer matvec provider; lets the dispatcher swap in quantized kernels
/// without duplicating the block forward.
pub trait SlotMatVec {
    fn matvec(
        &mut self,
        layer: usize,
        weights: &LayerWeights,
        slot: SlotKind,
        x: &[f32],
    ) -> Vec<f32>;
}

/// Full-precision ops straight off the layer weights.
pub struct FullPrecisionOps;

impl SlotMatVec for FullPrecisionOps {
    fn matvec(
        &mut self,
        _layer: usize,
        weights: &LayerWeights,
        slot: SlotKind,
        x: &[f32],
    ) -> Vec<f32> {
        let mut y = weights.slot(slot).matvec(x);
        if let Some(b) = weights.biases.get(slot) {
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
            }
        }
        y
    }
}

/// Per-token taps from one executed layer.
#[derive(Debug, Clone)]
pub struct LayerTaps {
    pub layer: usize,
    /// Residual-stream input per token (pre-norm).
    pub input: Vec<Vec<f32>>,
    pub q: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub ffn: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Final hidden states after the output norm, one per token.
    pub hidden: Vec<Vec<f32>>,
    /// Taps for executed layers, in layer order.
    pub taps: Vec<LayerTaps>,
}

pub fn rms_norm(x: &[f32], eps: f32) -> Vec<f32> {
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let scale = 1.0 / (ms + eps).sqrt();
    x.iter().map(|v| v * scale).collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// One block applied to the whole token sequence.
///
/// Returns the updated residual stream and the layer's taps.
pub fn block_forward(
    layer_idx: usize,
    weights: &LayerWeights,
    spec: &ModelSpec,
    states: &[Vec<f32>],
    ops: &mut dyn SlotMatVec,
) -> (Vec<Vec<f32>>, LayerTaps) {
    let n = states.len();
    let heads = spec.num_heads;
    let dh = spec.hidden_dim / heads;

    let normed: Vec<Vec<f32>> = states.iter().map(|x| rms_norm(x, RMS_EPS)).collect();
    let qs: Vec<Vec<f32>> = normed
        .iter()
        .map(|x| ops.matvec(layer_idx, weights, SlotKind::Q, x))
        .collect();
    let ks: Vec<Vec<f32>> = normed
        .iter()
        .map(|x| ops.matvec(layer_idx, weights, SlotKind::K, x))
        .collect();
    let vs: Vec<Vec<f32>> = normed
        .iter()
        .map(|x| ops.matvec(layer_idx, weights, SlotKind::V, x))
        .collect();

    // Causal multi-head attention, exact softmax.
    let mut attn_cat = vec![vec![0.0f32; spec.hidden_dim]; n];
    let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();
    for t in 0..n {
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let mut scores = Vec::with_capacity(t + 1);
            for ks_s in ks.iter().take(t + 1) {
                let dot: f32 = qs[t][lo..hi]
                    .iter()
                    .zip(&ks_s[lo..hi])
                    .map(|(a, b)| a * b)
                    .sum();
                scores.push(dot * inv_sqrt_dh);
            }
            let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut weights_sm: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f32 = weights_sm.iter().sum();
            for w in &mut weights_sm {
                *w /= z;
            }
            for (s, w) in weights_sm.iter().enumerate() {
                for (o, vv) in attn_cat[t][lo..hi].iter_mut().zip(&vs[s][lo..hi]) {
                    *o += w * vv;
                }
            }
        }
    }

    let mut mid = Vec::with_capacity(n);
    for t in 0..n {
        let proj = ops.matvec(layer_idx, weights, SlotKind::O, &attn_cat[t]);
        let h1: Vec<f32> = states[t].iter().zip(&proj).map(|(a, b)| a + b).collect();
        mid.push(h1);
    }

    let mut out = Vec::with_capacity(n);
    let mut ffn_taps = Vec::with_capacity(n);
    for h1 in &mid {
        let xn = rms_norm(h1, RMS_EPS);
        let gate = ops.matvec(layer_idx, weights, SlotKind::Gate, &xn);
        let up = ops.matvec(layer_idx, weights, SlotKind::Up, &xn);
        let act: Vec<f32> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| silu(*g) * u)
            .collect();
        let ffn = ops.matvec(layer_idx, weights, SlotKind::Down, &act);
        let o: Vec<f32> = h1.iter().zip(&ffn).map(|(a, b)| a + b).collect();
        out.push(o);
        ffn_taps.push(ffn);
    }

    let taps = LayerTaps {
        layer: layer_idx,
        input: states.to_vec(),
        q: qs,
        v: vs,
        ffn: ffn_taps,
    };
    (out, taps)
}

/// Token embeddings for a prompt.
pub fn embed(model: &ToyModel, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
    if tokens.is_empty() {
        return Err(NveError::InvalidParameter("empty token sequence".into()));
    }
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) >= model.spec.vocab_size {
                return Err(NveError::TokenOutOfRange {
                    token: t,
                    vocab_size: model.spec.vocab_size as u32,
                });
            }
            Ok(model.embedding.row(t as usize).to_vec())
        })
        .collect()
}

/// Forward pass with pluggable per-slot ops.
///
/// Layers not in `active_layers` are identity on the residual stream and
/// produce no taps. `None` executes every layer.
pub fn forward_with(
    model: &ToyModel,
    tokens: &[u32],
    active_layers: Option<&BTreeSet<usize>>,
    ops: &mut dyn SlotMatVec,
) -> Result<ForwardResult> {
    let mut states = embed(model, tokens)?;
    let mut taps = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let run = active_layers.is_none_or(|set| set.contains(&i));
        if !run {
            continue;
        }
        let (next, tap) = block_forward(i, layer, &model.spec, &states, ops);
        states = next;
        taps.push(tap);
    }
    let hidden = states.iter().map(|x| rms_norm(x, RMS_EPS)).collect();
    Ok(ForwardResult { hidden, taps })
}

/// Full-precision forward pass.
pub fn forward(
    model: &ToyModel,
    tokens: &[u32],
    active_layers: Option<&BTreeSet<usize>>,
) -> Result<ForwardResult> {
    forward_with(model, tokens, active_layers, &mut FullPrecisionOps)
}
