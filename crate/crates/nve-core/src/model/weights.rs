//! Raw weight containers and the canonical-slot normalizer.
//!
//! Raw tensors arrive under arbitrary layouts: plain per-slot matrices,
//! fused QKV, fused gate+up, or Conv1D-transposed storage. The normalizer
//! maps them all onto the seven canonical per-layer slots.
//!
//! Container file format (magic `NVEW1`): length-prefixed canonical JSON
//! header describing tensor names, shapes, layout tags and element type,
//! followed by raw little-endian f32 data in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::error::{NveError, Result};
use crate::model::{LayerWeights, Matrix, ModelSpec, SlotKind};

pub const WEIGHT_CONTAINER_MAGIC: &[u8; 5] = b"NVEW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutTag {
    Plain,
    FusedQkv,
    FusedGateUp,
    Conv1dTransposed,
}

/// A named tensor with shape metadata and a layout tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    /// `blk.{layer}.{slot}` with optional `.bias` suffix; slot is one of
    /// q/k/v/o/gate/up/down/qkv/gate_up.
    pub name: String,
    pub shape: Vec<usize>,
    pub layout: LayoutTag,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn validate(&self) -> Result<()> {
        let elems: usize = self.shape.iter().product();
        if elems != self.data.len() {
            return Err(NveError::ShapeMismatch {
                name: self.name.clone(),
                expected: self.shape.clone(),
                got: vec![self.data.len()],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawWeightContainer {
    pub tensors: Vec<RawTensor>,
}

/// All layers normalized to canonical slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericBlockWeights {
    pub layers: Vec<LayerWeights>,
}

fn parse_name(name: &str) -> Result<(usize, String, bool)> {
    let mut parts: Vec<&str> = name.split('.').collect();
    let is_bias = parts.last() == Some(&"bias");
    if is_bias {
        parts.pop();
    }
    if parts.len() != 3 || parts[0] != "blk" {
        return Err(NveError::UnknownSlot(name.to_string()));
    }
    let layer: usize = parts[1]
        .parse()
        .map_err(|_| NveError::UnknownSlot(name.to_string()))?;
    Ok((layer, parts[2].to_string(), is_bias))
}

fn as_matrix(t: &RawTensor, rows: usize, cols: usize) -> Result<Matrix> {
    // Conv1D storage is (in x out); transpose into canonical (out x in).
    let (stored_rows, stored_cols) = match t.layout {
        LayoutTag::Conv1dTransposed => (cols, rows),
        _ => (rows, cols),
    };
    if t.shape != [stored_rows, stored_cols] {
        return Err(NveError::ShapeMismatch {
            name: t.name.clone(),
            expected: vec![stored_rows, stored_cols],
            got: t.shape.clone(),
        });
    }
    let m = Matrix::new(stored_rows, stored_cols, t.data.clone())?;
    Ok(match t.layout {
        LayoutTag::Conv1dTransposed => m.transpose(),
        _ => m,
    })
}

fn split_rows(m: &Matrix, parts: usize) -> Vec<Matrix> {
    let rows = m.rows / parts;
    (0..parts)
        .map(|p| {
            Matrix::new(
                rows,
                m.cols,
                m.data[p * rows * m.cols..(p + 1) * rows * m.cols].to_vec(),
            )
            .expect("split preserves element count")
        })
        .collect()
}

/// Map a raw container onto canonical per-layer slots.
///
/// Fused QKV splits into three contiguous row blocks in Q, K, V order;
/// fused gate+up splits into gate then up; Conv1D tensors are transposed.
/// Produces every slot for every layer or a typed error, never a partial
/// result.
pub fn normalize_weights(raw: &RawWeightContainer, spec: &ModelSpec) -> Result<GenericBlockWeights> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let f = spec.ffn_dim;

    struct Partial {
        mats: [Option<Matrix>; 7],
        biases: [Option<Vec<f32>>; 7],
    }
    let mut layers: Vec<Partial> = (0..spec.num_layers)
        .map(|_| Partial {
            mats: Default::default(),
            biases: Default::default(),
        })
        .collect();

    let put = |store: &mut Partial, slot: SlotKind, m: Matrix| {
        store.mats[slot as usize] = Some(m);
    };

    for t in &raw.tensors {
        t.validate()?;
        let (layer, slot, is_bias) = parse_name(&t.name)?;
        if layer >= spec.num_layers {
            return Err(NveError::UnknownLayer {
                layer,
                num_layers: spec.num_layers,
            });
        }
        let store = &mut layers[layer];
        if is_bias {
            match slot.as_str() {
                "qkv" => {
                    if t.shape != [3 * d] {
                        return Err(NveError::ShapeMismatch {
                            name: t.name.clone(),
                            expected: vec![3 * d],
                            got: t.shape.clone(),
                        });
                    }
                    store.biases[SlotKind::Q as usize] = Some(t.data[0..d].to_vec());
                    store.biases[SlotKind::K as usize] = Some(t.data[d..2 * d].to_vec());
                    store.biases[SlotKind::V as usize] = Some(t.data[2 * d..3 * d].to_vec());
                }
                "gate_up" => {
                    if t.shape != [2 * f] {
                        return Err(NveError::ShapeMismatch {
                            name: t.name.clone(),
                            expected: vec![2 * f],
                            got: t.shape.clone(),
                        });
                    }
                    store.biases[SlotKind::Gate as usize] = Some(t.data[0..f].to_vec());
                    store.biases[SlotKind::Up as usize] = Some(t.data[f..2 * f].to_vec());
                }
                s => {
                    let kind = SlotKind::parse(s)?;
                    let (rows, _) = kind.shape(spec);
                    if t.shape != [rows] {
                        return Err(NveError::ShapeMismatch {
                            name: t.name.clone(),
                            expected: vec![rows],
                            got: t.shape.clone(),
                        });
                    }
                    store.biases[kind as usize] = Some(t.data.clone());
                }
            }
            continue;
        }
        match slot.as_str() {
            "qkv" => {
                let m = as_matrix(t, 3 * d, d)?;
                let parts = split_rows(&m, 3);
                let [q, k, v]: [Matrix; 3] = parts.try_into().expect("3 parts");
                put(store, SlotKind::Q, q);
                put(store, SlotKind::K, k);
                put(store, SlotKind::V, v);
            }
            "gate_up" => {
                let m = as_matrix(t, 2 * f, d)?;
                let parts = split_rows(&m, 2);
                let [gate, up]: [Matrix; 2] = parts.try_into().expect("2 parts");
                put(store, SlotKind::Gate, gate);
                put(store, SlotKind::Up, up);
            }
            s => {
                let kind = SlotKind::parse(s)?;
                let (rows, cols) = kind.shape(spec);
                put(store, kind, as_matrix(t, rows, cols)?);
            }
        }
    }

    let mut out = Vec::with_capacity(spec.num_layers);
    for (i, mut partial) in layers.into_iter().enumerate() {
        let mut take = |slot: SlotKind| -> Result<Matrix> {
            partial.mats[slot as usize]
                .take()
                .ok_or_else(|| NveError::MissingSlot {
                    slot: slot.name().to_string(),
                    layer: i,
                })
        };
        let mut lw = LayerWeights {
            q: take(SlotKind::Q)?,
            k: take(SlotKind::K)?,
            v: take(SlotKind::V)?,
            o: take(SlotKind::O)?,
            gate: take(SlotKind::Gate)?,
            up: take(SlotKind::Up)?,
            down: take(SlotKind::Down)?,
            biases: Default::default(),
        };
        for slot in SlotKind::ALL {
            if let Some(b) = partial.biases[slot as usize].take() {
                lw.biases.set(slot, b);
            }
        }
        out.push(lw);
    }
    Ok(GenericBlockWeights { layers: out })
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    version: u32,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    layout: LayoutTag,
    dtype: String,
}

pub fn write_container<W: Write>(w: &mut W, container: &RawWeightContainer) -> Result<()> {
    for t in &container.tensors {
        t.validate()?;
    }
    let header = ContainerHeader {
        version: 1,
        tensors: container
            .tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
                layout: t.layout,
                dtype: "f32".into(),
            })
            .collect(),
    };
    let header_bytes = canon::to_canonical_bytes(&header)?;
    w.write_all(WEIGHT_CONTAINER_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in &container.tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<RawWeightContainer> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHT_CONTAINER_MAGIC {
        return Err(NveError::BadMagic {
            expected: String::from_utf8_lossy(WEIGHT_CONTAINER_MAGIC).into_owned(),
            got: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != 1 {
        return Err(NveError::UnsupportedFormatVersion(header.version));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in header.tensors {
        if meta.dtype != "f32" {
            return Err(NveError::MalformedArtifact(format!(
                "tensor `{}`: unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let elems: usize = meta.shape.iter().product();
        let mut buf = vec![0u8; elems * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(RawTensor {
            name: meta.name,
            shape: meta.shape,
            layout: meta.layout,
            data,
        });
    }
    Ok(RawWeightContainer { tensors })
}
