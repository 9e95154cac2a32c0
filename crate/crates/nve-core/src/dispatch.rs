//! Precision routing, hot-layer selection, deployment-mode choice, and the
//! ablation sweep harnesses.
//!
//! A profile plus a byte budget becomes a ModePlan: per-layer W4A8/W4A16
//! routes, the active-layer set, and one of three modes. Mode A keeps every
//! layer and pages; modes B/C skip sub-threshold layers outright, gated by
//! the ~50% active-layer viability floor.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{NveError, Result};
use crate::model::{forward, forward_with, LayerWeights, SlotKind, SlotMatVec, ToyModel};
use crate::profiler::{Assignment, CalibrationSet, ImportanceProfile};
use crate::quant::{
    matvec_w4a16, matvec_w4a8, quantize_vector_q8, QuantBlockQ4, QuantMatrix, QK,
};

pub const DEFAULT_FLOOR_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeployMode {
    #[serde(rename = "A_paged")]
    APaged,
    #[serde(rename = "B_hot_only")]
    BHotOnly,
    #[serde(rename = "C_hot_awq")]
    CHotAwq,
}

/// An executable deployment plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePlan {
    pub mode: DeployMode,
    /// Ordered by admission (descending importance).
    pub active_layers: Vec<usize>,
    pub routes: Vec<Assignment>,
    pub budget_bytes: u64,
    pub active_ratio: f64,
    pub floor_ratio: f64,
    /// Mode C's within-layer saliency scaling is a no-op placeholder; the
    /// flag only records that the mode was selected with AWQ viable.
    pub awq_viable: bool,
}

/// Pure threshold routing: W4A16 iff normalized score >= tau.
pub fn route_layers(profile: &ImportanceProfile, tau: f64) -> Vec<Assignment> {
    profile
        .normalized_scores
        .iter()
        .map(|&s| {
            if s >= tau {
                Assignment::W4A16
            } else {
                Assignment::W4A8
            }
        })
        .collect()
}

/// Greedy admission in descending normalized score (ties toward lower
/// index), stopping at the first layer that no longer fits the budget.
pub fn hot_set(
    profile: &ImportanceProfile,
    budget_bytes: u64,
    per_layer_bytes: &[u64],
) -> Result<Vec<usize>> {
    if per_layer_bytes.len() != profile.num_layers() {
        return Err(NveError::DimensionMismatch(format!(
            "per_layer_bytes has {} entries for {} layers",
            per_layer_bytes.len(),
            profile.num_layers()
        )));
    }
    let mut order: Vec<usize> = (0..profile.num_layers()).collect();
    order.sort_by(|&a, &b| {
        profile.normalized_scores[b]
            .partial_cmp(&profile.normalized_scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut admitted = Vec::new();
    let mut used = 0u64;
    for layer in order {
        if used + per_layer_bytes[layer] > budget_bytes {
            break;
        }
        used += per_layer_bytes[layer];
        admitted.push(layer);
    }
    Ok(admitted)
}

/// Budget decision rule: >= floor_ratio of layers active on GPU prefers the
/// hot-only modes (C when AWQ is viable, else B); below the floor, mode A
/// retains and pages every layer.
pub fn select_mode(
    profile: &ImportanceProfile,
    budget_bytes: u64,
    per_layer_bytes: &[u64],
    awq_viable: bool,
    floor_ratio: f64,
) -> Result<ModePlan> {
    let hot = hot_set(profile, budget_bytes, per_layer_bytes)?;
    let num_layers = profile.num_layers();
    let active_ratio = hot.len() as f64 / num_layers as f64;
    let routes = route_layers(profile, profile.tau);
    let (mode, active_layers) = if active_ratio >= floor_ratio {
        let mode = if awq_viable {
            DeployMode::CHotAwq
        } else {
            DeployMode::BHotOnly
        };
        (mode, hot)
    } else {
        (DeployMode::APaged, (0..num_layers).collect())
    };
    Ok(ModePlan {
        mode,
        active_layers,
        routes,
        budget_bytes,
        active_ratio,
        floor_ratio,
        awq_viable,
    })
}

/// Q4_0-quantized copy of every layer slot.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub layers: Vec<[QuantMatrix; 7]>,
}

impl QuantizedModel {
    /// Quantize all slots; every matrix's column count must divide by 32.
    pub fn from_model(model: &ToyModel) -> Result<QuantizedModel> {
        if !model.spec.hidden_dim.is_multiple_of(QK) || !model.spec.ffn_dim.is_multiple_of(QK) {
            return Err(NveError::DimensionMismatch(format!(
                "quantized execution needs hidden_dim and ffn_dim divisible by {QK} \
                 (got {} and {})",
                model.spec.hidden_dim, model.spec.ffn_dim
            )));
        }
        let layers = model
            .layers
            .iter()
            .map(|lw| {
                let q = |slot: SlotKind| {
                    let m = lw.slot(slot);
                    QuantMatrix::from_rows(m.rows, m.cols, &m.data)
                };
                Ok([
                    q(SlotKind::Q)?,
                    q(SlotKind::K)?,
                    q(SlotKind::V)?,
                    q(SlotKind::O)?,
                    q(SlotKind::Gate)?,
                    q(SlotKind::Up)?,
                    q(SlotKind::Down)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(QuantizedModel { layers })
    }

    /// Copy with codes truncated to 2^bits levels centered at 8; bits = 4 is
    /// the identity.
    pub fn truncate_to_bits(&self, bits: u32) -> Result<QuantizedModel> {
        if !(1..=4).contains(&bits) {
            return Err(NveError::InvalidParameter(format!(
                "bits must be in 1..=4, got {bits}"
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|slots| {
                let mut out = slots.clone();
                for m in &mut out {
                    for b in &mut m.blocks {
                        *b = truncate_block_codes(b, bits);
                    }
                }
                out
            })
            .collect();
        Ok(QuantizedModel { layers })
    }
}

/// Requantize a block's codes onto a coarser grid of 2^bits levels centered
/// at code 8.
pub fn truncate_block_codes(block: &QuantBlockQ4, bits: u32) -> QuantBlockQ4 {
    let step = 1i32 << (4 - bits);
    let codes = block.codes();
    let mut out = [0u8; QK];
    for (o, &c) in out.iter_mut().zip(codes.iter()) {
        let centered = c as i32 - 8;
        let snapped = ((centered as f64 / step as f64).round() as i32) * step;
        *o = (snapped + 8).clamp(0, 15) as u8;
    }
    let mut qs = [0u8; QK / 2];
    for j in 0..QK / 2 {
        qs[j] = (out[j] & 0x0f) | (out[j + QK / 2] << 4);
    }
    QuantBlockQ4 { d: block.d, qs }
}

/// Per-layer quantized execution following the route vector.
struct QuantOps<'a> {
    model: &'a QuantizedModel,
    routes: &'a [Assignment],
}

impl SlotMatVec for QuantOps<'_> {
    fn matvec(
        &mut self,
        layer: usize,
        weights: &LayerWeights,
        slot: SlotKind,
        x: &[f32],
    ) -> Vec<f32> {
        let qm = &self.model.layers[layer][slot as usize];
        let mut y = match self.routes[layer] {
            Assignment::W4A16 => matvec_w4a16(qm, x).expect("shape checked at build"),
            Assignment::W4A8 => {
                let groups = quantize_vector_q8(x).expect("shape checked at build");
                matvec_w4a8(qm, &groups).expect("shape checked at build")
            }
        };
        if let Some(b) = weights.biases.get(slot) {
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
            }
        }
        y
    }
}

/// How run_plan executes layer matvecs.
pub enum Execution<'a> {
    /// Unquantized f32 weights (routes have no numeric effect).
    FullPrecision,
    /// Q4_0 weights; W4A16/W4A8 per the plan's routes.
    Quantized(&'a QuantizedModel),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Final hidden states of the plan run.
    pub hidden: Vec<Vec<f32>>,
    /// Mean per-token cosine distance to the full-precision all-layer
    /// baseline.
    pub divergence: f64,
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 0.0; // bit-identical states diverge by exactly zero
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Mean per-token cosine distance between two hidden-state sequences.
pub fn hidden_divergence(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    assert_eq!(a.len(), b.len(), "sequence lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| cosine_distance(x, y))
        .sum::<f64>()
        / a.len() as f64
}

/// Execute a plan and report divergence against the unconstrained
/// full-precision baseline.
pub fn run_plan(
    model: &ToyModel,
    plan: &ModePlan,
    tokens: &[u32],
    execution: Execution<'_>,
) -> Result<RunOutcome> {
    if plan.routes.len() != model.spec.num_layers {
        return Err(NveError::PlanMismatch(format!(
            "plan has {} routes for {} layers",
            plan.routes.len(),
            model.spec.num_layers
        )));
    }
    if let Some(&bad) = plan
        .active_layers
        .iter()
        .find(|&&l| l >= model.spec.num_layers)
    {
        return Err(NveError::PlanMismatch(format!(
            "active layer {bad} out of range for {} layers",
            model.spec.num_layers
        )));
    }
    let active: Option<BTreeSet<usize>> = match plan.mode {
        // Mode A retains all layers; residency is the pager's concern.
        DeployMode::APaged => None,
        DeployMode::BHotOnly | DeployMode::CHotAwq => {
            Some(plan.active_layers.iter().copied().collect())
        }
    };
    let baseline = forward(model, tokens, None)?;
    let result = match execution {
        Execution::FullPrecision => forward(model, tokens, active.as_ref())?,
        Execution::Quantized(qm) => {
            if qm.layers.len() != model.spec.num_layers {
                return Err(NveError::PlanMismatch(format!(
                    "quantized model has {} layers, model has {}",
                    qm.layers.len(),
                    model.spec.num_layers
                )));
            }
            let mut ops = QuantOps {
                model: qm,
                routes: &plan.routes,
            };
            forward_with(model, tokens, active.as_ref(), &mut ops)?
        }
    };
    let divergence = hidden_divergence(&result.hidden, &baseline.hidden);
    Ok(RunOutcome {
        hidden: result.hidden,
        divergence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w4a16_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w4a8_layers: Option<usize>,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub rows: Vec<SweepRow>,
}

fn check_monotone_settings(settings: &[f64]) -> Result<()> {
    if settings.is_empty() {
        return Err(NveError::InvalidParameter("empty sweep settings".into()));
    }
    let increasing = settings.windows(2).all(|w| w[0] < w[1]);
    let decreasing = settings.windows(2).all(|w| w[0] > w[1]);
    if settings.len() > 1 && !increasing && !decreasing {
        return Err(NveError::InvalidParameter(
            "sweep settings must be strictly monotone".into(),
        ));
    }
    Ok(())
}

fn all_layers_plan(profile: &ImportanceProfile, routes: Vec<Assignment>) -> ModePlan {
    ModePlan {
        mode: DeployMode::BHotOnly,
        active_layers: (0..profile.num_layers()).collect(),
        routes,
        budget_bytes: u64::MAX,
        active_ratio: 1.0,
        floor_ratio: DEFAULT_FLOOR_RATIO,
        awq_viable: false,
    }
}

fn mean_divergence_over_prompts(
    model: &ToyModel,
    calib: &CalibrationSet,
    plan: &ModePlan,
    qm: &QuantizedModel,
) -> Result<f64> {
    let mut total = 0.0;
    for p in &calib.prompts {
        total += run_plan(model, plan, &p.tokens, Execution::Quantized(qm))?.divergence;
    }
    Ok(total / calib.prompts.len() as f64)
}

/// For each tau: route, execute all layers quantized, report the layer-count
/// split and divergence versus the full-precision baseline.
pub fn threshold_sweep(
    model: &ToyModel,
    calib: &CalibrationSet,
    profile: &ImportanceProfile,
    taus: &[f64],
) -> Result<SweepReport> {
    check_monotone_settings(taus)?;
    calib.validate()?;
    let qm = QuantizedModel::from_model(model)?;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let routes = route_layers(profile, tau);
        let w4a16 = routes.iter().filter(|r| **r == Assignment::W4A16).count();
        let plan = all_layers_plan(profile, routes);
        let divergence = mean_divergence_over_prompts(model, calib, &plan, &qm)?;
        rows.push(SweepRow {
            setting: tau,
            w4a16_layers: Some(w4a16),
            w4a8_layers: Some(profile.num_layers() - w4a16),
            divergence,
        });
    }
    Ok(SweepReport {
        kind: "threshold".into(),
        rows,
    })
}

/// For each bits-per-weight setting: truncate Q4_0 codes to 2^bits levels
/// and measure divergence (weight-only W4A16 execution isolates the
/// storage-width effect).
pub fn bpw_sweep(
    model: &ToyModel,
    calib: &CalibrationSet,
    profile: &ImportanceProfile,
    bits_settings: &[u32],
) -> Result<SweepReport> {
    let settings: Vec<f64> = bits_settings.iter().map(|&b| b as f64).collect();
    check_monotone_settings(&settings)?;
    calib.validate()?;
    let base = QuantizedModel::from_model(model)?;
    let routes = vec![Assignment::W4A16; profile.num_layers()];
    let plan = all_layers_plan(profile, routes);
    let mut rows = Vec::with_capacity(bits_settings.len());
    for &bits in bits_settings {
        let qm = base.truncate_to_bits(bits)?;
        let divergence = mean_divergence_over_prompts(model, calib, &plan, &qm)?;
        rows.push(SweepRow {
            setting: bits as f64,
            w4a16_layers: None,
            w4a8_layers: None,
            divergence,
        });
    }
    Ok(SweepReport {
        kind: "bpw".into(),
        rows,
    })
}

/// Divergence at each active-layer count, keeping the highest-scoring
/// layers. Counts must be strictly monotone.
pub fn layer_sweep(
    model: &ToyModel,
    profile: &ImportanceProfile,
    counts: &[usize],
    tokens: &[u32],
) -> Result<SweepReport> {
    let settings: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    check_monotone_settings(&settings)?;
    let num_layers = profile.num_layers();
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        if count > num_layers {
            return Err(NveError::InvalidParameter(format!(
                "active count {count} exceeds {num_layers} layers"
            )));
        }
        let per_layer = vec![1u64; num_layers];
        let hot = hot_set(profile, count as u64, &per_layer)?;
        let plan = ModePlan {
            mode: DeployMode::BHotOnly,
            active_layers: hot,
            routes: vec![Assignment::W4A16; num_layers],
            budget_bytes: count as u64,
            active_ratio: count as f64 / num_layers as f64,
            floor_ratio: DEFAULT_FLOOR_RATIO,
            awq_viable: false,
        };
        let outcome = run_plan(model, &plan, tokens, Execution::FullPrecision)?;
        rows.push(SweepRow {
            setting: count as f64,
            w4a16_layers: None,
            w4a8_layers: None,
            divergence: outcome.divergence,
        });
    }
    Ok(SweepReport {
        kind: "layer".into(),
        rows,
    })
}
