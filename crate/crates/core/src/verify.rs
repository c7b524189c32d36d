//! The cache-correctness verification suite: seeded streaming sessions where
//! every decode-time logit vector is checked against recomputation from
//! scratch over exactly the retained tokens with their original positions.

use rayon::prelude::*;

use crate::rcsm_cache::CacheConfig;
use crate::stream_core::splitmix64;
use crate::synthetic::SyntheticScript;
use crate::toy_decoder::DecoderParams;
use crate::wts_engine::{required_capacity, EngineConfig, EngineError, Session};

/// Shape of one verification run.
#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Seeded sessions to run (K).
    pub sessions: usize,
    /// Chunks per session.
    pub chunks: u32,
    /// Window sizes cycled across sessions.
    pub windows: Vec<u32>,
    pub tokens_per_frame: u32,
    pub think_budget: u32,
    pub max_new_tokens: u32,
    /// Max absolute logit difference tolerated.
    pub tolerance: f64,
    pub seed: u64,
    /// Optional fault injection: corrupt one cached key after this
    /// session/chunk and require the suite to notice.
    pub fault: Option<FaultSpec>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            sessions: 200,
            chunks: 50,
            windows: vec![3, 5, 20],
            tokens_per_frame: 4,
            think_budget: 6,
            max_new_tokens: 16,
            tolerance: 1e-5,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultSpec {
    pub session: usize,
    pub chunk: u32,
}

/// A comparison that exceeded the tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub session: usize,
    pub chunk: u32,
    pub token_index: usize,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub sessions: usize,
    pub comparisons: u64,
    pub worst_diff: f64,
    /// `(session, chunk, token index within the step)` of the worst diff.
    pub worst: Option<(usize, u32, usize)>,
    pub first_failure: Option<Mismatch>,
    pub tolerance: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

struct SessionOutcome {
    comparisons: u64,
    worst_diff: f64,
    worst: Option<(usize, u32, usize)>,
    first_failure: Option<Mismatch>,
}

/// Runs K seeded sessions and compares incremental decoding against the
/// recomputation oracle at every generated token (and at the last prefill
/// slot that seeds each step's decoding).
pub fn run_verification(
    params: &DecoderParams,
    cfg: &VerifyConfig,
) -> Result<VerifyReport, EngineError> {
    let outcomes = (0..cfg.sessions)
        .into_par_iter()
        .map(|i| verify_one_session(params, cfg, i))
        .collect::<Result<Vec<_>, EngineError>>()?;

    let mut report = VerifyReport {
        sessions: cfg.sessions,
        comparisons: 0,
        worst_diff: 0.0,
        worst: None,
        first_failure: None,
        tolerance: cfg.tolerance,
    };
    for o in outcomes {
        report.comparisons += o.comparisons;
        if o.worst_diff > report.worst_diff {
            report.worst_diff = o.worst_diff;
            report.worst = o.worst;
        }
        if report.first_failure.is_none() {
            report.first_failure = o.first_failure;
        }
    }
    Ok(report)
}

fn verify_one_session(
    params: &DecoderParams,
    cfg: &VerifyConfig,
    index: usize,
) -> Result<SessionOutcome, EngineError> {
    let window = cfg.windows[index % cfg.windows.len()];
    let onset = 1 + (splitmix64(cfg.seed ^ (index as u64) << 8) % cfg.chunks as u64) as u32;
    let script = SyntheticScript {
        chunks: cfg.chunks,
        fps: 2.0,
        tokens_per_frame: cfg.tokens_per_frame,
        onset,
        seed: splitmix64(cfg.seed ^ (index as u64).wrapping_mul(0x0101_0101_0101_0101)),
    }
    .build();
    let engine_cfg = EngineConfig {
        max_new_tokens: cfg.max_new_tokens,
        think_budget: cfg.think_budget,
        rng_seed: splitmix64(cfg.seed ^ (index as u64) << 16),
        capture_decode_logits: true,
        ..EngineConfig::default()
    };
    let mut cache_cfg = CacheConfig {
        window_chunks: window,
        capacity_slots: 0,
        chunk_seconds: 1.0,
    };
    cache_cfg.capacity_slots = required_capacity(&script, &cache_cfg, &engine_cfg);

    let mut session = Session::new(params, &script, &cache_cfg, engine_cfg)?;
    let mut outcome = SessionOutcome {
        comparisons: 0,
        worst_diff: 0.0,
        worst: None,
        first_failure: None,
    };

    while !session.finished() {
        let record = session.step()?;
        let chunk = record.metrics.chunk_index;
        let captured = record.decode_logits.as_ref().expect("capture enabled");
        let tokens = session.cache().retained_tokens();

        // Query slots: the last prefill token plus every fed generated token.
        let fed = record.fed_generated as usize;
        debug_assert_eq!(captured.len(), fed + 1);
        let first_slot = tokens.len() - fed - 1;
        let slots: Vec<usize> = (first_slot..tokens.len()).collect();
        let oracle = params.recompute_logits_at(&tokens, &slots)?;

        for (token_index, (incremental, recomputed)) in captured.iter().zip(&oracle).enumerate() {
            let diff = incremental
                .iter()
                .zip(recomputed)
                .map(|(a, b)| ((*a as f64) - (*b as f64)).abs())
                .fold(0.0f64, f64::max);
            outcome.comparisons += 1;
            if diff > outcome.worst_diff {
                outcome.worst_diff = diff;
                outcome.worst = Some((index, chunk, token_index));
            }
            if diff > cfg.tolerance && outcome.first_failure.is_none() {
                outcome.first_failure = Some(Mismatch {
                    session: index,
                    chunk,
                    token_index,
                    diff,
                });
            }
        }

        if let Some(fault) = cfg.fault {
            if fault.session == index && fault.chunk == chunk {
                // Instruction entries are never evicted, so slot 0 stays
                // live for the remainder of the session.
                session.corrupt_cache_kv(0, 0, 0.25);
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_decoder::{init_decoder, DecoderDims, SteerBias};

    fn params() -> DecoderParams {
        let mut p = init_decoder(7, DecoderDims::default()).unwrap();
        p.steer_bias = SteerBias::format_primed(256);
        p
    }

    #[test]
    fn small_run_passes_and_counts_comparisons() {
        let cfg = VerifyConfig {
            sessions: 4,
            chunks: 8,
            windows: vec![2, 3],
            ..VerifyConfig::default()
        };
        let report = run_verification(&params(), &cfg).unwrap();
        assert!(report.passed(), "worst {:?}", report.first_failure);
        assert!(report.comparisons > 0);
        assert!(report.worst_diff <= cfg.tolerance);
    }

    #[test]
    fn zero_sessions_is_a_vacuous_pass() {
        let cfg = VerifyConfig {
            sessions: 0,
            ..VerifyConfig::default()
        };
        let report = run_verification(&params(), &cfg).unwrap();
        assert!(report.passed());
        assert_eq!(report.comparisons, 0);
    }

    #[test]
    fn corrupted_cache_entry_is_detected_with_location() {
        let cfg = VerifyConfig {
            sessions: 2,
            chunks: 8,
            windows: vec![3],
            fault: Some(FaultSpec {
                session: 1,
                chunk: 3,
            }),
            ..VerifyConfig::default()
        };
        let report = run_verification(&params(), &cfg).unwrap();
        assert!(!report.passed());
        let failure = report.first_failure.unwrap();
        assert_eq!(failure.session, 1);
        assert!(failure.chunk > 3, "divergence appears after the corruption");
        assert!(failure.diff > cfg.tolerance);
    }
}
