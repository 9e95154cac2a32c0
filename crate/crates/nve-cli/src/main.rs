//! `nve`: profile, plan, run, sweep, bound, and page-sim commands over the
//! deterministic toy-transformer substrate.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nve_core::dispatch::{
    bpw_sweep, layer_sweep, select_mode, run_plan, threshold_sweep, DeployMode, Execution,
    ModePlan, QuantizedModel, DEFAULT_FLOOR_RATIO,
};
use nve_core::model::{build_toy_model, ModelSpec, SlotKind, ToyModel};
use nve_core::pager::{
    pmi_clusters, units_from_subblock_clusters, PagerState, SubBlockGroup, SubBlockId, TierConfig,
};
use nve_core::profiler::{
    cache_get_or_profile, load_profile, profile_digest, serialize_profile, CalibrationSet,
    ImportanceProfile, ScorerId, DEFAULT_EPSILON, DEFAULT_TAU,
};
use nve_core::quant::{effective_bpw, Q4_0_BITS_PER_WEIGHT};
use nve_core::recovery::{failure_bound, min_prompts, RecoveryParams};

const REPORT_FORMAT_VERSION: u32 = 1;
/// Exit code for a missing calibration input.
const EXIT_MISSING_CALIB: u8 = 2;

#[derive(Parser)]
#[command(name = "nve", about = "Load-time control layer for toy-transformer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 128)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Scale one layer's FFN down-projection by this factor (an importance
    /// outlier for experiments), as `layer:factor`.
    #[arg(long)]
    outlier: Option<String>,
}

impl ModelArgs {
    fn build(&self) -> Result<ToyModel> {
        let spec = ModelSpec {
            num_layers: self.layers,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            num_heads: self.heads,
            vocab_size: self.vocab,
            seed: self.seed,
        };
        let model = build_toy_model(&spec)?;
        match &self.outlier {
            None => Ok(model),
            Some(s) => {
                let (layer, factor) = s
                    .split_once(':')
                    .ok_or_else(|| anyhow!("--outlier expects layer:factor, got `{s}`"))?;
                let layer: usize = layer.parse().context("outlier layer")?;
                let factor: f32 = factor.parse().context("outlier factor")?;
                Ok(nve_core::model::inject_outlier(
                    &model,
                    layer,
                    SlotKind::Down,
                    factor,
                )?)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute (or fetch from cache) the per-layer importance profile.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        /// Calibration prompts: a JSON file or `synthetic:count:len:seed`.
        #[arg(long)]
        calib: String,
        #[arg(long, default_value = "combined")]
        scorer: String,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Write the profile here (in addition to the cache).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Build a deployment plan from a profile and execute it.
    Run {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        profile_from: PathBuf,
        /// Hot-tier weight budget in bytes.
        #[arg(long)]
        budget: u64,
        /// auto | A | B | C
        #[arg(long, default_value = "auto")]
        mode: String,
        #[arg(long, default_value_t = DEFAULT_FLOOR_RATIO)]
        floor_ratio: f64,
        #[arg(long)]
        awq_viable: bool,
        /// Comma-separated token ids, or `synthetic:len:seed`.
        #[arg(long, default_value = "synthetic:16:1")]
        tokens: String,
        /// Execute with Q4_0 weights per the routed precisions.
        #[arg(long)]
        quantized: bool,
    },
    /// Top-k recovery failure bound, or the prompt count needed for a target.
    Bound {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        prompts: Option<u64>,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Threshold, bits-per-weight, or active-layer ablation sweeps.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        calib: String,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value = "synthetic:16:1")]
        tokens: String,
    },
    /// Tiered paging simulation over a decode trace.
    PageSim {
        #[arg(long, default_value_t = 16)]
        layers: usize,
        /// Hot capacity in bytes (each sub-block is 1 byte).
        #[arg(long)]
        hot_bytes: u64,
        #[arg(long, default_value_t = 0)]
        warm_bytes: u64,
        /// A trace file (one step per line, comma-separated sub-block ids)
        /// or `synthetic:decode:N` for N in-order passes.
        #[arg(long)]
        trace: String,
        #[arg(long, default_value_t = 0.1)]
        pmi_threshold: f64,
    },
}

fn cache_dir() -> PathBuf {
    std::env::var_os("NVE_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".nve-cache"))
}

fn load_calib(arg: &str) -> Result<CalibrationSet> {
    if let Some(rest) = arg.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            bail!("synthetic calibration is synthetic:count:len:seed, got `{arg}`");
        }
        let count: usize = parts[0].parse().context("synthetic count")?;
        let len: usize = parts[1].parse().context("synthetic len")?;
        let seed: u64 = parts[2].parse().context("synthetic seed")?;
        // Vocab bound is checked at embed time against the actual model.
        return Ok(CalibrationSet::synthetic(count, len, 256, seed));
    }
    let bytes = std::fs::read(arg)?;
    let set: CalibrationSet = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing calibration file {arg}"))?;
    set.validate()?;
    Ok(set)
}

fn parse_tokens(arg: &str, vocab: usize) -> Result<Vec<u32>> {
    if let Some(rest) = arg.strip_prefix("synthetic:") {
        let (len, seed) = rest
            .split_once(':')
            .ok_or_else(|| anyhow!("synthetic tokens are synthetic:len:seed, got `{arg}`"))?;
        let len: usize = len.parse().context("token len")?;
        let seed: u64 = seed.parse().context("token seed")?;
        let set = CalibrationSet::synthetic(1, len, vocab, seed);
        return Ok(set.prompts[0].tokens.clone());
    }
    arg.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| anyhow!("token `{t}`: {e}")))
        .collect()
}

/// Canonical report body; measured durations stay outside so the digest is
/// stable across runs.
#[derive(Serialize)]
struct RunReportBody {
    format_version: u32,
    command: String,
    spec_digest: String,
    architecture_key: String,
    profile_digest: String,
    plan: ModePlan,
    divergence: f64,
    effective_bpw: f64,
    pager: Option<nve_core::pager::PagerStats>,
}

#[derive(Serialize)]
struct RunReport {
    canonical: serde_json::Value,
    canonical_digest: String,
    timing_ms: f64,
}

fn per_layer_weight_bytes(model: &ToyModel, quantized: bool) -> Vec<u64> {
    let spec = &model.spec;
    let elems =
        (4 * spec.hidden_dim * spec.hidden_dim + 3 * spec.hidden_dim * spec.ffn_dim) as u64;
    let bytes = if quantized {
        (elems as f64 * Q4_0_BITS_PER_WEIGHT / 8.0).ceil() as u64
    } else {
        elems * 4
    };
    vec![bytes; spec.num_layers]
}

#[allow(clippy::too_many_arguments)] // mirrors the clap subcommand fields
fn cmd_run(
    model_args: &ModelArgs,
    profile_from: &PathBuf,
    budget: u64,
    mode: &str,
    floor_ratio: f64,
    awq_viable: bool,
    tokens: &str,
    quantized: bool,
) -> Result<()> {
    let start = Instant::now();
    let model = model_args.build()?;
    let bytes = std::fs::read(profile_from)
        .with_context(|| format!("reading profile {}", profile_from.display()))?;
    let profile: ImportanceProfile = load_profile(&bytes)?;
    if profile.architecture_key != model.architecture_key() {
        bail!(
            "architecture key mismatch: profile has {}, model has {}",
            profile.architecture_key,
            model.architecture_key()
        );
    }
    let prof_digest = profile_digest(&bytes);
    let per_layer = per_layer_weight_bytes(&model, quantized);
    let mut plan = select_mode(&profile, budget, &per_layer, awq_viable, floor_ratio)?;
    match mode {
        "auto" => {}
        "A" => {
            plan.mode = DeployMode::APaged;
            plan.active_layers = (0..model.spec.num_layers).collect();
        }
        "B" => plan.mode = DeployMode::BHotOnly,
        "C" => plan.mode = DeployMode::CHotAwq,
        other => bail!("unknown mode `{other}` (auto|A|B|C)"),
    }
    let toks = parse_tokens(tokens, model.spec.vocab_size)?;

    let quant_model;
    let execution = if quantized {
        quant_model = QuantizedModel::from_model(&model)?;
        Execution::Quantized(&quant_model)
    } else {
        Execution::FullPrecision
    };
    let outcome = run_plan(&model, &plan, &toks, execution)?;

    // Mode A pages every layer on demand; replay the decode as a paging
    // trace over per-layer units (attn + ffn grouped per layer).
    let pager_stats = if plan.mode == DeployMode::APaged {
        let units: Vec<nve_core::pager::PagingUnit> = (0..model.spec.num_layers)
            .map(|l| nve_core::pager::PagingUnit {
                id: l,
                members: vec![
                    SubBlockId { layer: l, group: SubBlockGroup::Attn },
                    SubBlockId { layer: l, group: SubBlockGroup::Ffn },
                ],
                bytes: per_layer[l],
            })
            .collect();
        let scores = profile.normalized_scores.clone();
        let cfg = TierConfig::new(budget, per_layer.iter().sum());
        let mut pager = PagerState::new(cfg, units, &scores, None)?;
        for _ in 0..toks.len() {
            for l in 0..model.spec.num_layers {
                pager.access(l)?;
            }
        }
        Some(pager.stats())
    } else {
        None
    };

    let elems_per_layer =
        (4 * model.spec.hidden_dim * model.spec.hidden_dim
            + 3 * model.spec.hidden_dim * model.spec.ffn_dim) as u64;
    let bpw = if quantized {
        effective_bpw(&[(Q4_0_BITS_PER_WEIGHT, elems_per_layer * model.spec.num_layers as u64)])
    } else {
        32.0
    };

    let body = RunReportBody {
        format_version: REPORT_FORMAT_VERSION,
        command: "run".into(),
        spec_digest: model.spec.digest(),
        architecture_key: model.architecture_key(),
        profile_digest: prof_digest,
        plan,
        divergence: outcome.divergence,
        effective_bpw: bpw,
        pager: pager_stats,
    };
    let canonical = serde_json::to_value(&body)?;
    let canonical_bytes = nve_core::canon::to_canonical_bytes(&canonical)?;
    let report = RunReport {
        canonical,
        canonical_digest: nve_core::canon::sha256_hex(&canonical_bytes),
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_page_sim(
    layers: usize,
    hot_bytes: u64,
    warm_bytes: u64,
    trace: &str,
    pmi_threshold: f64,
) -> Result<()> {
    let sub_blocks: Vec<(SubBlockId, u64)> = (0..layers)
        .flat_map(|l| {
            [
                (SubBlockId { layer: l, group: SubBlockGroup::Attn }, 1u64),
                (SubBlockId { layer: l, group: SubBlockGroup::Ffn }, 1u64),
            ]
        })
        .collect();
    let n = sub_blocks.len();

    // Each step is both an access batch (in id order) and a PMI window.
    let steps: Vec<Vec<usize>> = if let Some(rest) = trace.strip_prefix("synthetic:decode:") {
        let passes: usize = rest.parse().context("synthetic pass count")?;
        (0..passes * n).map(|i| vec![i % n]).collect()
    } else {
        let text = std::fs::read_to_string(trace)
            .with_context(|| format!("reading trace {trace}"))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|e| anyhow!("id `{t}`: {e}")))
                    .collect()
            })
            .collect::<Result<_>>()?
    };

    let windows: Vec<BTreeSet<usize>> = steps
        .iter()
        .map(|s| s.iter().copied().collect())
        .collect();
    let clusters = pmi_clusters(n, &windows, pmi_threshold)?;
    let units = units_from_subblock_clusters(&sub_blocks, &clusters)?;

    // Map sub-block id -> owning unit.
    let mut owner = vec![0usize; n];
    for u in &units {
        for m in &u.members {
            let sid = m.layer * 2 + if m.group == SubBlockGroup::Attn { 0 } else { 1 };
            owner[sid] = u.id;
        }
    }
    // Earlier layers first under equal importance (no profile here).
    let scores: Vec<f64> = (0..units.len()).map(|i| -(i as f64)).collect();
    let cfg = TierConfig::new(hot_bytes, warm_bytes);
    let mut pager = PagerState::new(cfg, units, &scores, None)?;
    for step in &steps {
        let mut touched = BTreeSet::new();
        for &sid in step {
            if sid >= n {
                bail!("trace names sub-block {sid}, only {n} exist");
            }
            if touched.insert(owner[sid]) {
                pager.access(owner[sid])?;
            }
        }
        pager.check_invariants()?;
    }
    let stats = pager.stats();
    #[derive(Serialize)]
    struct PageSimReport {
        format_version: u32,
        layers: usize,
        units: usize,
        stats: nve_core::pager::PagerStats,
        warnings: Vec<String>,
    }
    let report = PageSimReport {
        format_version: REPORT_FORMAT_VERSION,
        layers,
        units: pager.units.len(),
        stats,
        warnings: pager.warnings.clone(),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Profile {
            model,
            calib,
            scorer,
            tau,
            epsilon,
            out,
            no_cache,
        } => {
            let m = model.build()?;
            let calib_set = load_calib(calib)?;
            let scorer = ScorerId::parse(scorer)?;
            let (profile, cache_hit, ms) = if *no_cache {
                let start = Instant::now();
                let p = nve_core::profiler::profile(&m, &calib_set, scorer, *tau, *epsilon)?;
                (p, false, start.elapsed().as_secs_f64() * 1e3)
            } else {
                let o = cache_get_or_profile(&cache_dir(), &m, &calib_set, scorer, *tau, *epsilon)?;
                if let Some(w) = &o.warning {
                    eprintln!("warning: {w}");
                }
                (o.profile, o.cache_hit, o.on_device.as_secs_f64() * 1e3)
            };
            let bytes = serialize_profile(&profile)?;
            if let Some(path) = out {
                // Write-then-rename: readers never observe a partial file.
                let tmp = path.with_extension("tmp");
                std::fs::write(&tmp, &bytes)?;
                std::fs::rename(&tmp, path)?;
            }
            println!("digest: {}", profile_digest(&bytes));
            println!("cache_hit: {cache_hit}");
            println!("profiling_ms: {ms:.3}");
            Ok(())
        }
        Command::Run {
            model,
            profile_from,
            budget,
            mode,
            floor_ratio,
            awq_viable,
            tokens,
            quantized,
        } => cmd_run(
            model,
            profile_from,
            *budget,
            mode,
            *floor_ratio,
            *awq_viable,
            tokens,
            *quantized,
        ),
        Command::Bound {
            layers,
            k,
            delta,
            sigma,
            prompts,
            target,
        } => {
            match (prompts, target) {
                (Some(n), None) => {
                    let b = failure_bound(&RecoveryParams {
                        layers: *layers,
                        k: *k,
                        delta: *delta,
                        sigma: *sigma,
                        prompts: *n,
                    })?;
                    println!("failure_bound: {b:.4}");
                }
                (None, Some(t)) => {
                    let n = min_prompts(*layers, *k, *delta, *sigma, *t)?;
                    println!("min_prompts: {n}");
                }
                _ => bail!("pass exactly one of --prompts or --target"),
            }
            Ok(())
        }
        Command::Sweep {
            model,
            calib,
            taus,
            bits,
            counts,
            tokens,
        } => {
            let m = model.build()?;
            let calib_set = load_calib(calib)?;
            let profile = nve_core::profiler::profile(
                &m,
                &calib_set,
                ScorerId::Combined,
                DEFAULT_TAU,
                DEFAULT_EPSILON,
            )?;
            let report = match (taus, bits, counts) {
                (Some(taus), None, None) => threshold_sweep(&m, &calib_set, &profile, taus)?,
                (None, Some(bits), None) => bpw_sweep(&m, &calib_set, &profile, bits)?,
                (None, None, Some(counts)) => {
                    let toks = parse_tokens(tokens, m.spec.vocab_size)?;
                    layer_sweep(&m, &profile, counts, &toks)?
                }
                _ => bail!("pass exactly one of --taus, --bits, or --counts"),
            };
            println!(
                "{}",
                String::from_utf8(nve_core::canon::to_canonical_bytes(&report)?)?
            );
            Ok(())
        }
        Command::PageSim {
            layers,
            hot_bytes,
            warm_bytes,
            trace,
            pmi_threshold,
        } => cmd_page_sim(*layers, *hot_bytes, *warm_bytes, trace, *pmi_threshold),
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // A missing calibration file is a distinct, scriptable failure.
            if e.downcast_ref::<std::io::Error>()
                .map(|io| io.kind() == std::io::ErrorKind::NotFound)
                .unwrap_or(false)
            {
                return ExitCode::from(EXIT_MISSING_CALIB);
            }
            ExitCode::FAILURE
        }
    }
}
