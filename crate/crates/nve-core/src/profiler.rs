//! Streaming per-layer importance profiling.
//!
//! One layer's weights are resident at a time: the profiler walks the model
//! layer-major against recorded inter-layer hidden states for all prompts,
//! so peak weight memory is constant in depth. The resident-buffer count is
//! instrumented and asserted in tests.
//!
//! Per layer and token the combined scorer sums an attention proxy (norm of
//! the concatenated Q and V projections) and the FFN output magnitude; the
//! per-layer score is the per-prompt token-mean averaged over prompts, in a
//! fixed summation order so results are bit-stable.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::error::{NveError, Result};
use crate::model::{block_forward, embed, FullPrecisionOps, LayerTaps, ToyModel};

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const PROFILE_FORMAT_VERSION: u32 = 1;

/// Calibration prompts with free-text domain labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub prompts: Vec<CalibrationPrompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationPrompt {
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub domain: String,
}

impl CalibrationSet {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(NveError::EmptyCalibration);
        }
        if self.prompts.iter().any(|p| p.tokens.is_empty()) {
            return Err(NveError::InvalidParameter(
                "calibration prompt with no tokens".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic synthetic prompts for desk-scale runs.
    pub fn synthetic(count: usize, len: usize, vocab_size: usize, seed: u64) -> CalibrationSet {
        let prompts = (0..count)
            .map(|p| CalibrationPrompt {
                tokens: (0..len)
                    .map(|t| {
                        (crate::rng::counter_u64(seed, p as u64, 0x70, t as u64)
                            % vocab_size as u64) as u32
                    })
                    .collect(),
                domain: format!("synthetic-{p}"),
            })
            .collect();
        CalibrationSet { prompts }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerId {
    #[default]
    Combined,
    FfnOnly,
    AttnOnly,
    InputL2,
}

impl fmt::Display for ScorerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScorerId::Combined => "combined",
            ScorerId::FfnOnly => "ffn_only",
            ScorerId::AttnOnly => "attn_only",
            ScorerId::InputL2 => "input_l2",
        };
        f.write_str(s)
    }
}

impl ScorerId {
    pub fn parse(s: &str) -> Result<ScorerId> {
        match s {
            "combined" => Ok(ScorerId::Combined),
            "ffn_only" => Ok(ScorerId::FfnOnly),
            "attn_only" => Ok(ScorerId::AttnOnly),
            "input_l2" => Ok(ScorerId::InputL2),
            other => Err(NveError::InvalidParameter(format!("unknown scorer `{other}`"))),
        }
    }
}

/// Per-layer precision assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    W4A16,
    W4A8,
}

/// The per-layer control signal plus everything needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub format_version: u32,
    pub architecture_key: String,
    pub scorer_id: ScorerId,
    pub prompt_count: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub raw_scores: Vec<f64>,
    pub normalized_scores: Vec<f64>,
    pub assignments: Vec<Assignment>,
}

impl ImportanceProfile {
    pub fn num_layers(&self) -> usize {
        self.raw_scores.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != PROFILE_FORMAT_VERSION {
            return Err(NveError::UnsupportedFormatVersion(self.format_version));
        }
        if self.raw_scores.len() != self.normalized_scores.len()
            || self.raw_scores.len() != self.assignments.len()
        {
            return Err(NveError::MalformedArtifact(format!(
                "length mismatch: raw {}, normalized {}, assignments {}",
                self.raw_scores.len(),
                self.normalized_scores.len(),
                self.assignments.len()
            )));
        }
        Ok(())
    }
}

/// Euclidean norm of the concatenated [q, v] projection pair.
pub fn attn_proxy(q_vec: &[f32], v_vec: &[f32]) -> f64 {
    let s: f64 = q_vec
        .iter()
        .chain(v_vec)
        .map(|x| (*x as f64) * (*x as f64))
        .sum();
    s.sqrt()
}

/// Euclidean norm of the FFN output tap.
pub fn ffn_magnitude(ffn_out: &[f32]) -> f64 {
    ffn_out.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

fn token_stat(scorer: ScorerId, taps: &LayerTaps, t: usize) -> f64 {
    match scorer {
        ScorerId::Combined => attn_proxy(&taps.q[t], &taps.v[t]) + ffn_magnitude(&taps.ffn[t]),
        ScorerId::AttnOnly => attn_proxy(&taps.q[t], &taps.v[t]),
        ScorerId::FfnOnly => ffn_magnitude(&taps.ffn[t]),
        ScorerId::InputL2 => ffn_magnitude(&taps.input[t]),
    }
}

/// Instrumentation for the streaming-memory contract.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamingStats {
    pub max_resident_layer_buffers: usize,
}

/// Token-mean statistic per (layer, prompt), computed layer-major with a
/// single resident layer buffer.
pub fn per_prompt_layer_means(
    model: &ToyModel,
    calib: &CalibrationSet,
    scorer: ScorerId,
) -> Result<(Vec<Vec<f64>>, StreamingStats)> {
    calib.validate()?;
    let num_layers = model.spec.num_layers;
    let num_prompts = calib.prompts.len();

    let mut states: Vec<Vec<Vec<f32>>> = calib
        .prompts
        .iter()
        .map(|p| embed(model, &p.tokens))
        .collect::<Result<_>>()?;

    let mut means = vec![vec![0.0f64; num_prompts]; num_layers];
    let mut resident = 0usize;
    let mut stats = StreamingStats::default();

    for (layer, layer_means) in means.iter_mut().enumerate() {
        resident += 1;
        stats.max_resident_layer_buffers = stats.max_resident_layer_buffers.max(resident);
        // The working buffer: the only layer weights held by this pass.
        let buffer = model.layers[layer].clone();
        for (pi, prompt_states) in states.iter_mut().enumerate() {
            let (next, taps) = block_forward(
                layer,
                &buffer,
                &model.spec,
                prompt_states,
                &mut FullPrecisionOps,
            );
            let mut sum = 0.0f64;
            for t in 0..taps.input.len() {
                let s = token_stat(scorer, &taps, t);
                if !s.is_finite() {
                    return Err(NveError::NonFiniteActivation { layer, prompt: pi });
                }
                sum += s;
            }
            layer_means[pi] = sum / taps.input.len() as f64;
            *prompt_states = next;
        }
        drop(buffer);
        resident -= 1;
    }
    debug_assert_eq!(resident, 0);
    Ok((means, stats))
}

/// Min-max normalize to [0, 1]; all zeros when max - min < epsilon.
/// Returns the normalized vector and whether the degenerate branch fired.
pub fn minmax_normalize(scores: &[f64], epsilon: f64) -> (Vec<f64>, bool) {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < epsilon {
        return (vec![0.0; scores.len()], true);
    }
    let range = max - min;
    (scores.iter().map(|s| (s - min) / range).collect(), false)
}

/// Threshold assignment; the degenerate branch routes everything to W4A8.
pub fn assign_precisions(normalized: &[f64], tau: f64, degenerate: bool) -> Vec<Assignment> {
    normalized
        .iter()
        .map(|&s| {
            if !degenerate && s >= tau {
                Assignment::W4A16
            } else {
                Assignment::W4A8
            }
        })
        .collect()
}

fn scores_from_means(means: &[Vec<f64>], prompt_indices: &[usize]) -> Vec<f64> {
    means
        .iter()
        .map(|per_prompt| {
            let sum: f64 = prompt_indices.iter().map(|&p| per_prompt[p]).sum();
            sum / prompt_indices.len() as f64
        })
        .collect()
}

/// Full profiling pass: score, normalize, assign.
pub fn profile(
    model: &ToyModel,
    calib: &CalibrationSet,
    scorer: ScorerId,
    tau: f64,
    epsilon: f64,
) -> Result<ImportanceProfile> {
    profile_with_stats(model, calib, scorer, tau, epsilon).map(|(p, _)| p)
}

pub fn profile_with_stats(
    model: &ToyModel,
    calib: &CalibrationSet,
    scorer: ScorerId,
    tau: f64,
    epsilon: f64,
) -> Result<(ImportanceProfile, StreamingStats)> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(NveError::InvalidParameter(format!("tau must be >= 0, got {tau}")));
    }
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(NveError::InvalidParameter(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let (means, stats) = per_prompt_layer_means(model, calib, scorer)?;
    let all: Vec<usize> = (0..calib.prompts.len()).collect();
    let raw = scores_from_means(&means, &all);
    let (normalized, degenerate) = minmax_normalize(&raw, epsilon);
    let assignments = assign_precisions(&normalized, tau, degenerate);
    let profile = ImportanceProfile {
        format_version: PROFILE_FORMAT_VERSION,
        architecture_key: model.architecture_key(),
        scorer_id: scorer,
        prompt_count: calib.prompts.len(),
        epsilon,
        tau,
        raw_scores: raw,
        normalized_scores: normalized,
        assignments,
    };
    Ok((profile, stats))
}

/// Indices of the k largest scores, ties broken toward lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// |top-k(a) ∩ top-k(b)| / k on raw scores.
pub fn topk_overlap(a: &ImportanceProfile, b: &ImportanceProfile, k: usize) -> Result<f64> {
    if a.num_layers() != b.num_layers() {
        return Err(NveError::DimensionMismatch(format!(
            "profiles have {} vs {} layers",
            a.num_layers(),
            b.num_layers()
        )));
    }
    topk_overlap_scores(&a.raw_scores, &b.raw_scores, k)
}

pub fn topk_overlap_scores(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NveError::DimensionMismatch(format!(
            "score vectors of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if k == 0 || k > a.len() {
        return Err(NveError::InvalidParameter(format!(
            "k = {k} out of range for {} layers",
            a.len()
        )));
    }
    let ta = top_k_indices(a, k);
    let tb = top_k_indices(b, k);
    let inter = ta.iter().filter(|i| tb.contains(i)).count();
    Ok(inter as f64 / k as f64)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(a: &ImportanceProfile, b: &ImportanceProfile) -> Result<f64> {
    if a.num_layers() != b.num_layers() {
        return Err(NveError::DimensionMismatch(format!(
            "profiles have {} vs {} layers",
            a.num_layers(),
            b.num_layers()
        )));
    }
    spearman_scores(&a.raw_scores, &b.raw_scores)
}

pub fn spearman_scores(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NveError::DimensionMismatch(format!(
            "score vectors of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return Ok(1.0); // constant ranks on both sides: perfectly tied
    }
    Ok(num / (da * db).sqrt())
}

/// Stability diagnostic: profile even- and odd-indexed prompts separately
/// and compare their top-k sets.
pub fn split_half_overlap(
    model: &ToyModel,
    calib: &CalibrationSet,
    scorer: ScorerId,
    k: usize,
) -> Result<f64> {
    calib.validate()?;
    if calib.prompts.len() < 2 {
        return Err(NveError::InvalidParameter(
            "split-half needs at least 2 prompts".into(),
        ));
    }
    if k > model.spec.num_layers || k == 0 {
        return Err(NveError::InvalidParameter(format!(
            "k = {k} out of range for {} layers",
            model.spec.num_layers
        )));
    }
    let (means, _) = per_prompt_layer_means(model, calib, scorer)?;
    let even: Vec<usize> = (0..calib.prompts.len()).step_by(2).collect();
    let odd: Vec<usize> = (1..calib.prompts.len()).step_by(2).collect();
    let sa = scores_from_means(&means, &even);
    let sb = scores_from_means(&means, &odd);
    topk_overlap_scores(&sa, &sb, k)
}

/// Canonical JSON bytes of a profile.
pub fn serialize_profile(p: &ImportanceProfile) -> Result<Vec<u8>> {
    p.validate()?;
    canon::to_canonical_bytes(p)
}

pub fn load_profile(bytes: &[u8]) -> Result<ImportanceProfile> {
    let p: ImportanceProfile = serde_json::from_slice(bytes)
        .map_err(|e| NveError::MalformedArtifact(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

/// SHA-256 of the serialized profile bytes.
pub fn profile_digest(bytes: &[u8]) -> String {
    canon::sha256_hex(bytes)
}

/// Outcome of a cache-aware profiling request.
#[derive(Debug)]
pub struct CacheOutcome {
    pub profile: ImportanceProfile,
    pub cache_hit: bool,
    pub on_device: Duration,
    /// Set when a corrupt cache entry was discarded.
    pub warning: Option<String>,
}

/// Load the profile for this model's architecture key from `cache_dir`, or
/// profile and store it. Corrupt entries are treated as misses. Writes are
/// write-then-rename so concurrent invocations never see partial files.
pub fn cache_get_or_profile(
    cache_dir: &Path,
    model: &ToyModel,
    calib: &CalibrationSet,
    scorer: ScorerId,
    tau: f64,
    epsilon: f64,
) -> Result<CacheOutcome> {
    std::fs::create_dir_all(cache_dir)?;
    let key = model.architecture_key();
    let path = cache_dir.join(format!("{key}.json"));
    let mut warning = None;
    if let Ok(bytes) = std::fs::read(&path) {
        match load_profile(&bytes) {
            Ok(p) if p.architecture_key == key => {
                return Ok(CacheOutcome {
                    profile: p,
                    cache_hit: true,
                    on_device: Duration::ZERO,
                    warning: None,
                });
            }
            Ok(_) => {
                warning = Some(format!("cache entry {} has mismatched key", path.display()));
            }
            Err(e) => {
                warning = Some(format!("corrupt cache entry {}: {e}", path.display()));
            }
        }
    }
    let start = Instant::now();
    let profile = profile(model, calib, scorer, tau, epsilon)?;
    let elapsed = start.elapsed();
    let bytes = serialize_profile(&profile)?;
    let tmp = cache_dir.join(format!(".{key}.tmp.{}", std::process::id()));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, &path)?;
    Ok(CacheOutcome {
        profile,
        cache_hit: false,
        on_device: elapsed,
        warning,
    })
}
