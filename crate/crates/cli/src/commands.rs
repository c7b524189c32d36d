//! Command implementations shared by the binary and the test suites. Every
//! command is deterministic given its flags and seeds; wall-time fields are
//! the only exception and are marked as such in the output schemas.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use wts_core::grpo::{moving_average, train, GrpoConfig, IterationStats, TrainOutcome};
use wts_core::rcsm_cache::CacheConfig;
use wts_core::rewards::{total_reward, RewardBreakdown, RewardConfig, ViolationKind};
use wts_core::stream_core::{load_stream_script, Action, StreamScript};
use wts_core::synthetic::{synthetic_pool, PoolConfig};
use wts_core::toy_decoder::{init_decoder, DecoderDims, DecoderParams, SteerBias};
use wts_core::verify::{run_verification, VerifyConfig, VerifyReport};
use wts_core::wts_engine::{required_capacity, run_session, EngineConfig, Trajectory};

use crate::bench::{
    context_sweep, latency_sweep, ContextRow, ContextSweepConfig, LatencyRow, LatencySweepConfig,
    ThresholdReport,
};
use crate::AppError;

/// Decoder construction flags.
#[derive(Debug, Clone)]
pub struct DecoderSpec {
    pub seed: u64,
    pub dims: DecoderDims,
    /// Start from the format-following steering table instead of zeros.
    pub primed_policy: bool,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            seed: 7,
            dims: DecoderDims::default(),
            primed_policy: true,
        }
    }
}

impl DecoderSpec {
    pub fn build(&self) -> Result<DecoderParams, AppError> {
        let mut params = init_decoder(self.seed, self.dims)?;
        if self.primed_policy {
            params.steer_bias = SteerBias::format_primed(self.dims.vocab_size);
        }
        Ok(params)
    }
}

/// Cache flags with optional automatic capacity.
#[derive(Debug, Clone)]
pub struct CacheSpec {
    pub window_chunks: u32,
    pub capacity_slots: Option<usize>,
    pub chunk_seconds: f64,
}

impl Default for CacheSpec {
    fn default() -> Self {
        CacheSpec {
            window_chunks: 20,
            capacity_slots: None,
            chunk_seconds: 1.0,
        }
    }
}

impl CacheSpec {
    pub fn resolve(&self, script: &StreamScript, engine: &EngineConfig) -> CacheConfig {
        let mut cfg = CacheConfig {
            window_chunks: self.window_chunks,
            capacity_slots: self.capacity_slots.unwrap_or(0),
            chunk_seconds: self.chunk_seconds,
        };
        if self.capacity_slots.is_none() {
            cfg.capacity_slots = required_capacity(script, &cfg, engine);
        }
        cfg
    }
}

/// Resolves the output directory, honoring the `WTS_OUT_DIR` override.
pub fn resolve_out_dir(flag: &Path) -> Result<PathBuf, AppError> {
    let dir = match std::env::var_os("WTS_OUT_DIR") {
        Some(v) => PathBuf::from(v),
        None => flag.to_path_buf(),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub struct RunSummary {
    pub trace_path: PathBuf,
    pub report_path: PathBuf,
    pub steps: usize,
    pub breakdown: RewardBreakdown,
}

/// Runs one script end to end, writing the step trace and reward report.
pub fn cmd_run(
    script_path: &Path,
    decoder: &DecoderSpec,
    cache: &CacheSpec,
    engine: &EngineConfig,
    rewards: &RewardConfig,
    out_dir: &Path,
) -> Result<RunSummary, AppError> {
    let script = load_stream_script(script_path)?;
    let params = decoder.build()?;
    let cache_cfg = cache.resolve(&script, engine);
    let trajectory = run_session(&params, &script, &cache_cfg, engine.clone())?;
    let breakdown = total_reward(&trajectory, &script.ground_truth, rewards);

    let trace_path = out_dir.join("trace.jsonl");
    write_trace(&trace_path, &trajectory)?;
    let report_path = out_dir.join("reward_report.json");
    write_reward_report(&report_path, &breakdown, script.ground_truth.t_gt)?;

    Ok(RunSummary {
        trace_path,
        report_path,
        steps: trajectory.len(),
        breakdown,
    })
}

fn action_json(action: &Action) -> serde_json::Value {
    match action {
        Action::Silent => serde_json::json!({ "type": "silent" }),
        Action::Respond(content) => {
            serde_json::json!({ "type": "respond", "content": content })
        }
    }
}

fn write_trace(path: &Path, trajectory: &Trajectory) -> Result<(), AppError> {
    let mut out = BufWriter::new(File::create(path)?);
    for step in &trajectory.steps {
        let line = serde_json::json!({
            "chunk_index": step.metrics.chunk_index,
            "raw_text": step.raw_text,
            "parsed_action": action_json(&step.output.action),
            "context_len": step.metrics.context_len_before_decode,
            "attention_ops": step.metrics.attention_ops,
            "wall_time_ms": step.metrics.wall_time_ms,
            "evicted_tokens": step.metrics.evicted_tokens,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn violation_label(kind: &ViolationKind) -> String {
    match kind {
        ViolationKind::Grammar(e) => format!("grammar:{e:?}"),
        ViolationKind::BudgetForced => "budget_forced".to_string(),
        ViolationKind::NoActionFallback => "no_action_fallback".to_string(),
    }
}

fn write_reward_report(path: &Path, b: &RewardBreakdown, t_gt: u32) -> Result<(), AppError> {
    let violations: Vec<serde_json::Value> = b
        .violations
        .iter()
        .map(|v| {
            serde_json::json!({ "chunk_index": v.chunk_index, "kind": violation_label(&v.kind) })
        })
        .collect();
    let report = serde_json::json!({
        "r_format": b.r_format,
        "r_time": b.r_time,
        "r_acc": b.r_acc,
        "total": b.total,
        "t_resp": b.t_resp,
        "t_gt": t_gt,
        "violations": violations,
    });
    let mut out = File::create(path)?;
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    )?;
    Ok(())
}

pub struct ContextSummary {
    pub curve_path: PathBuf,
    pub rows: Vec<ContextRow>,
}

/// The bounded-context experiment; writes the long-format curve file.
pub fn cmd_bench_context(
    decoder: &DecoderSpec,
    cfg: &ContextSweepConfig,
    out_dir: &Path,
) -> Result<ContextSummary, AppError> {
    let params = decoder.build()?;
    let rows = context_sweep(&params, cfg)?;
    let curve_path = out_dir.join("context_curve.csv");
    let mut out = BufWriter::new(File::create(&curve_path)?);
    writeln!(
        out,
        "length,chunk,mode,context_len,attention_ops,visual_tokens"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.length,
            r.chunk,
            r.mode.label(),
            r.context_len,
            r.attention_ops,
            r.visual_tokens
        )?;
    }
    Ok(ContextSummary { curve_path, rows })
}

pub struct LatencySummary {
    pub curve_path: PathBuf,
    pub rows: Vec<LatencyRow>,
    pub thresholds: Vec<ThresholdReport>,
}

/// The wall-clock experiment; writes the latency curve and returns the
/// under-threshold fractions.
pub fn cmd_bench_latency(
    decoder: &DecoderSpec,
    cfg: &LatencySweepConfig,
    out_dir: &Path,
) -> Result<LatencySummary, AppError> {
    let params = decoder.build()?;
    let (rows, thresholds) = latency_sweep(&params, cfg)?;
    let curve_path = out_dir.join("latency_curve.csv");
    let mut out = BufWriter::new(File::create(&curve_path)?);
    writeln!(out, "length,chunk,mode,wall_time_ms")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{:.6}",
            r.length,
            r.chunk,
            r.mode.label(),
            r.wall_time_ms
        )?;
    }
    Ok(LatencySummary {
        curve_path,
        rows,
        thresholds,
    })
}

/// Where training scripts come from.
#[derive(Debug, Clone)]
pub enum PoolSource {
    /// Load every `*.jsonl` under a directory, sorted by file name.
    Dir(PathBuf),
    /// Generate the synthetic evidence-onset environment.
    Synthetic { config: PoolConfig, seed: u64 },
}

pub fn load_pool(source: &PoolSource) -> Result<Vec<StreamScript>, AppError> {
    match source {
        PoolSource::Dir(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(AppError::Config(format!(
                    "no .jsonl scripts under {}",
                    dir.display()
                )));
            }
            paths
                .into_iter()
                .map(|p| load_stream_script(&p).map_err(AppError::from))
                .collect()
        }
        PoolSource::Synthetic { config, seed } => Ok(synthetic_pool(config, *seed)),
    }
}

pub struct TrainSummary {
    pub log_path: PathBuf,
    pub curve_path: PathBuf,
    pub outcome: TrainOutcome,
}

/// Policy optimization over a script pool; writes the per-iteration log and
/// the two-column reward curve.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    pool_source: &PoolSource,
    decoder: &DecoderSpec,
    grpo_cfg: &GrpoConfig,
    engine: &EngineConfig,
    cache: &CacheSpec,
    rewards: &RewardConfig,
    train_seed: u64,
    out_dir: &Path,
) -> Result<TrainSummary, AppError> {
    let pool = load_pool(pool_source)?;
    let params = decoder.build()?;
    let cache_template = CacheConfig {
        window_chunks: cache.window_chunks,
        capacity_slots: cache.capacity_slots.unwrap_or(0),
        chunk_seconds: cache.chunk_seconds,
    };
    let outcome = train(
        &pool,
        &params,
        grpo_cfg,
        engine,
        &cache_template,
        rewards,
        train_seed,
    )?;

    let log_path = out_dir.join("train_log.jsonl");
    write_train_log(&log_path, &outcome.curve)?;
    let curve_path = out_dir.join("reward_curve.txt");
    write_reward_curve(&curve_path, &outcome.curve)?;
    Ok(TrainSummary {
        log_path,
        curve_path,
        outcome,
    })
}

fn write_train_log(path: &Path, curve: &[IterationStats]) -> Result<(), AppError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in curve {
        let line = serde_json::json!({
            "iteration": s.iteration,
            "mean_reward": s.mean_reward,
            "mean_kl": s.mean_kl,
            "clip_fraction": s.clip_fraction,
            "objective": s.objective,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn write_reward_curve(path: &Path, curve: &[IterationStats]) -> Result<(), AppError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in curve {
        writeln!(out, "{} {:.6}", s.iteration, s.mean_reward)?;
    }
    Ok(())
}

/// Final trailing moving average of the reward curve, when long enough.
pub fn final_moving_average(curve: &[IterationStats], window: usize) -> Option<f64> {
    let rewards: Vec<f64> = curve.iter().map(|s| s.mean_reward).collect();
    moving_average(&rewards, window).last().copied()
}

/// The oracle-equivalence suite.
pub fn cmd_verify(decoder: &DecoderSpec, cfg: &VerifyConfig) -> Result<VerifyReport, AppError> {
    let params = decoder.build()?;
    Ok(run_verification(&params, cfg)?)
}

/// Weight digest for cross-platform determinism audits.
pub fn cmd_checksum(decoder: &DecoderSpec) -> Result<String, AppError> {
    Ok(decoder.build()?.weight_digest())
}
