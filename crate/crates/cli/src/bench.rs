//! Bounded-context and latency experiments.
//!
//! The context sweep pairs both modes over one identical generated stream:
//! the engine runs with eviction on, and a baseline shadow account replays
//! the exact same token stream with eviction off. The two curves then differ
//! only by the eviction mechanism, which makes the window-bound claims exact
//! integer identities. The latency sweep runs real sessions per mode and
//! reports wall clock.

use rayon::prelude::*;

use wts_core::rcsm_cache::CacheConfig;
use wts_core::stream_core::splitmix64;
use wts_core::synthetic::SyntheticScript;
use wts_core::toy_decoder::DecoderParams;
use wts_core::wts_engine::{required_capacity, EngineConfig, EngineError, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Rcsm,
    Baseline,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Rcsm => "rcsm",
            Mode::Baseline => "baseline",
        }
    }
}

/// One (length, chunk, mode) cell of the context experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRow {
    pub length: u32,
    pub chunk: u32,
    pub mode: Mode,
    /// Live entries visible to the first decode of the chunk.
    pub context_len: u64,
    /// Attention accounting for the chunk (prefill plus decode).
    pub attention_ops: u64,
    /// Retained visual tokens after the chunk's prefill.
    pub visual_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct ContextSweepConfig {
    pub lengths: Vec<u32>,
    pub window_chunks: u32,
    pub tokens_per_frame: u32,
    pub engine: EngineConfig,
    pub seed: u64,
}

impl Default for ContextSweepConfig {
    fn default() -> Self {
        ContextSweepConfig {
            lengths: vec![50, 100, 200, 400, 1000],
            window_chunks: 20,
            tokens_per_frame: 16,
            engine: EngineConfig::default(),
            seed: 0,
        }
    }
}

/// Runs the paired context experiment for every stream length.
pub fn context_sweep(
    params: &DecoderParams,
    cfg: &ContextSweepConfig,
) -> Result<Vec<ContextRow>, EngineError> {
    let mut per_length = cfg
        .lengths
        .par_iter()
        .map(|&length| context_run(params, cfg, length))
        .collect::<Result<Vec<_>, EngineError>>()?;
    let mut rows = Vec::new();
    for batch in per_length.drain(..) {
        rows.extend(batch);
    }
    Ok(rows)
}

fn context_run(
    params: &DecoderParams,
    cfg: &ContextSweepConfig,
    length: u32,
) -> Result<Vec<ContextRow>, EngineError> {
    let script = SyntheticScript {
        chunks: length,
        fps: 2.0,
        tokens_per_frame: cfg.tokens_per_frame,
        onset: (length / 2).max(1),
        seed: splitmix64(cfg.seed ^ length as u64),
    }
    .build();
    let mut cache_cfg = CacheConfig {
        window_chunks: cfg.window_chunks,
        capacity_slots: 0,
        chunk_seconds: 1.0,
    };
    cache_cfg.capacity_slots = required_capacity(&script, &cache_cfg, &cfg.engine);
    let mut session = Session::new(params, &script, &cache_cfg, cfg.engine.clone())?;

    let instr = script.instruction.len() as u64;
    let k_v = script.max_chunk_tokens() as u64;
    let mut rows = Vec::with_capacity(2 * length as usize);

    // Baseline shadow: identical token stream, eviction disabled.
    let mut live_b = 0u64;
    let mut visual_b = 0u64;

    while !session.finished() {
        let record = session.step()?;
        let chunk = record.metrics.chunk_index;
        rows.push(ContextRow {
            length,
            chunk,
            mode: Mode::Rcsm,
            context_len: record.metrics.context_len_before_decode as u64,
            attention_ops: record.metrics.attention_ops,
            visual_tokens: session.cache().retained_visual_tokens() as u64,
        });

        let mut ops_b = 0u64;
        let prefill = if chunk == 1 { instr + k_v } else { k_v };
        for i in 1..=prefill {
            ops_b += live_b + i;
        }
        live_b += prefill;
        visual_b += k_v;
        let context_b = live_b;
        for j in 1..=record.fed_generated as u64 {
            ops_b += live_b + j;
        }
        live_b += record.fed_generated as u64;
        rows.push(ContextRow {
            length,
            chunk,
            mode: Mode::Baseline,
            context_len: context_b,
            attention_ops: ops_b,
            visual_tokens: visual_b,
        });
    }
    Ok(rows)
}

/// One (length, chunk, mode) latency reading.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub length: u32,
    pub chunk: u32,
    pub mode: Mode,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct LatencySweepConfig {
    pub lengths: Vec<u32>,
    pub window_chunks: u32,
    pub tokens_per_frame: u32,
    pub engine: EngineConfig,
    pub threshold_ms: f64,
    pub seed: u64,
}

impl Default for LatencySweepConfig {
    fn default() -> Self {
        LatencySweepConfig {
            lengths: vec![50, 100, 200, 400, 1000],
            window_chunks: 20,
            tokens_per_frame: 16,
            engine: EngineConfig::default(),
            threshold_ms: 500.0,
            seed: 0,
        }
    }
}

/// Fraction of chunks decoded under the real-time threshold, per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub mode: Mode,
    pub chunks: usize,
    pub under_threshold: usize,
}

impl ThresholdReport {
    pub fn fraction(&self) -> f64 {
        if self.chunks == 0 {
            return 1.0;
        }
        self.under_threshold as f64 / self.chunks as f64
    }
}

/// Real per-mode sessions, wall clock per chunk.
pub fn latency_sweep(
    params: &DecoderParams,
    cfg: &LatencySweepConfig,
) -> Result<(Vec<LatencyRow>, Vec<ThresholdReport>), EngineError> {
    let cells: Vec<(u32, Mode)> = cfg
        .lengths
        .iter()
        .flat_map(|&l| [(l, Mode::Rcsm), (l, Mode::Baseline)])
        .collect();
    let batches = cells
        .par_iter()
        .map(|&(length, mode)| latency_run(params, cfg, length, mode))
        .collect::<Result<Vec<_>, EngineError>>()?;

    let mut rows = Vec::new();
    let mut reports = vec![
        ThresholdReport {
            mode: Mode::Rcsm,
            chunks: 0,
            under_threshold: 0,
        },
        ThresholdReport {
            mode: Mode::Baseline,
            chunks: 0,
            under_threshold: 0,
        },
    ];
    for batch in batches {
        for row in batch {
            let report = &mut reports[(row.mode == Mode::Baseline) as usize];
            report.chunks += 1;
            if row.wall_time_ms < cfg.threshold_ms {
                report.under_threshold += 1;
            }
            rows.push(row);
        }
    }
    Ok((rows, reports))
}

fn latency_run(
    params: &DecoderParams,
    cfg: &LatencySweepConfig,
    length: u32,
    mode: Mode,
) -> Result<Vec<LatencyRow>, EngineError> {
    let script = SyntheticScript {
        chunks: length,
        fps: 2.0,
        tokens_per_frame: cfg.tokens_per_frame,
        onset: (length / 2).max(1),
        seed: splitmix64(cfg.seed ^ length as u64),
    }
    .build();
    let mut engine = cfg.engine.clone();
    engine.baseline_mode = mode == Mode::Baseline;
    let mut cache_cfg = CacheConfig {
        window_chunks: cfg.window_chunks,
        capacity_slots: 0,
        chunk_seconds: 1.0,
    };
    cache_cfg.capacity_slots = required_capacity(&script, &cache_cfg, &engine);
    let mut session = Session::new(params, &script, &cache_cfg, engine)?;
    let mut rows = Vec::with_capacity(length as usize);
    while !session.finished() {
        let record = session.step()?;
        rows.push(LatencyRow {
            length,
            chunk: record.metrics.chunk_index,
            mode,
            wall_time_ms: record.metrics.wall_time_ms,
        });
    }
    Ok(rows)
}
