//! Seeded generation of stream scripts for the verification suite, the
//! benchmarks, and the evidence-onset training environment.
//!
//! The environment contract: one-second chunks, a hidden onset chunk `e`
//! from which every chunk's feature seed carries the evidence bit (odd
//! seeds), ground truth "yes" at `t_gt = e`. Responding is verifiable and
//! time-graded, silence before the onset is the only way to score the full
//! time reward.

use crate::stream_core::{
    splitmix64, AnswerType, GroundTruth, Instruction, StreamScript, VisualChunk,
};

/// Shape of one generated script.
#[derive(Debug, Clone)]
pub struct SyntheticScript {
    pub chunks: u32,
    pub fps: f64,
    pub tokens_per_frame: u32,
    /// Evidence-onset chunk; also the ground-truth response step.
    pub onset: u32,
    pub seed: u64,
}

impl Default for SyntheticScript {
    fn default() -> Self {
        SyntheticScript {
            chunks: 10,
            fps: 2.0,
            tokens_per_frame: 16,
            onset: 7,
            seed: 0,
        }
    }
}

impl SyntheticScript {
    pub fn build(&self) -> StreamScript {
        assert!(self.chunks >= 1, "need at least one chunk");
        assert!(
            self.onset >= 1 && self.onset <= self.chunks,
            "onset {} outside [1, {}]",
            self.onset,
            self.chunks
        );
        let frame_count = self.fps.round().max(1.0) as u32; // one-second chunks
        let chunks = (1..=self.chunks)
            .map(|index| {
                let raw = splitmix64(self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9));
                // Bit zero is the evidence convention: set from the onset on.
                let feature_seed = if index >= self.onset {
                    raw | 1
                } else {
                    raw & !1
                };
                VisualChunk {
                    index,
                    start_time: (index - 1) as f64,
                    end_time: index as f64,
                    frame_count,
                    tokens_per_frame: self.tokens_per_frame,
                    feature_seed,
                }
            })
            .collect();
        StreamScript {
            instruction: Instruction::new(
                "watch the stream and respond yes when the event appears",
            ),
            fps: self.fps,
            tokens_per_frame: self.tokens_per_frame,
            chunks,
            ground_truth: GroundTruth {
                answer: "yes".to_string(),
                answer_type: AnswerType::Binary,
                t_gt: self.onset,
            },
        }
    }
}

/// Pool shape for training runs.
#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub scripts: usize,
    pub chunks: u32,
    pub fps: f64,
    pub tokens_per_frame: u32,
    pub onset_min: u32,
    pub onset_max: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            scripts: 6,
            chunks: 8,
            fps: 2.0,
            tokens_per_frame: 4,
            onset_min: 3,
            onset_max: 6,
        }
    }
}

/// A homogeneous pool of evidence-onset scripts with seeded variation in
/// onset position and visual content.
pub fn synthetic_pool(cfg: &PoolConfig, seed: u64) -> Vec<StreamScript> {
    assert!(cfg.onset_min >= 1 && cfg.onset_max <= cfg.chunks && cfg.onset_min <= cfg.onset_max);
    (0..cfg.scripts)
        .map(|i| {
            let h = splitmix64(seed ^ (i as u64).wrapping_mul(0x517c_c1b7_2722_0a95));
            let span = (cfg.onset_max - cfg.onset_min + 1) as u64;
            SyntheticScript {
                chunks: cfg.chunks,
                fps: cfg.fps,
                tokens_per_frame: cfg.tokens_per_frame,
                onset: cfg.onset_min + (h % span) as u32,
                seed: splitmix64(h),
            }
            .build()
        })
        .collect()
}
