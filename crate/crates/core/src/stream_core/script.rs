//! Stream-script ingestion. Scripts are UTF-8 line-delimited JSON: line 1 is
//! the header (instruction, fps, tokens_per_frame, ground truth), every
//! following line is one chunk (index, start_time, end_time, feature_seed).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnswerType, GroundTruth, Instruction, StreamScript, VisualChunk};

/// Validation failures during script loading, with the 1-based line that
/// triggered them where that is meaningful.
#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: chunk is not contiguous with its predecessor")]
    NonContiguousChunks { line: usize },
    #[error("bad ground truth: {msg}")]
    BadGroundTruth { msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    instruction: String,
    fps: f64,
    tokens_per_frame: u32,
    ground_truth: GroundTruthLine,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthLine {
    answer: String,
    answer_type: AnswerType,
    t_gt: u32,
}

#[derive(Serialize, Deserialize)]
struct ChunkLine {
    index: u32,
    start_time: f64,
    end_time: f64,
    feature_seed: u64,
}

const CONTIGUITY_EPS: f64 = 1e-9;

/// Loads and fully validates a stream script.
pub fn load_stream_script(path: impl AsRef<Path>) -> Result<StreamScript, IngestError> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let (_, header_line) = lines.next().ok_or_else(|| IngestError::Parse {
        line: 1,
        msg: "empty file".to_string(),
    })?;
    let header: HeaderLine = serde_json::from_str(header_line).map_err(|e| IngestError::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.fps <= 0.0 || !header.fps.is_finite() {
        return Err(IngestError::Parse {
            line: 1,
            msg: format!("fps must be positive, got {}", header.fps),
        });
    }
    if header.tokens_per_frame == 0 {
        return Err(IngestError::Parse {
            line: 1,
            msg: "tokens_per_frame must be positive".to_string(),
        });
    }

    let mut chunks = Vec::new();
    for (idx, text) in lines {
        let line = idx + 1;
        let parsed: ChunkLine = serde_json::from_str(text).map_err(|e| IngestError::Parse {
            line,
            msg: format!("bad chunk: {e}"),
        })?;
        if parsed.index as usize != chunks.len() + 1 {
            return Err(IngestError::Parse {
                line,
                msg: format!(
                    "chunk index {} out of order (expected {})",
                    parsed.index,
                    chunks.len() + 1
                ),
            });
        }
        if parsed.end_time <= parsed.start_time
            || parsed.end_time.is_nan()
            || parsed.start_time.is_nan()
        {
            return Err(IngestError::Parse {
                line,
                msg: format!(
                    "end_time {} must exceed start_time {}",
                    parsed.end_time, parsed.start_time
                ),
            });
        }
        if let Some(prev) = chunks.last() {
            let prev: &VisualChunk = prev;
            if (parsed.start_time - prev.end_time).abs() > CONTIGUITY_EPS {
                return Err(IngestError::NonContiguousChunks { line });
            }
        }
        let frame_count = ((parsed.end_time - parsed.start_time) * header.fps).round() as i64;
        if frame_count < 1 {
            return Err(IngestError::Parse {
                line,
                msg: "chunk spans zero frames at the configured fps".to_string(),
            });
        }
        chunks.push(VisualChunk {
            index: parsed.index,
            start_time: parsed.start_time,
            end_time: parsed.end_time,
            frame_count: frame_count as u32,
            tokens_per_frame: header.tokens_per_frame,
            feature_seed: parsed.feature_seed,
        });
    }

    let t_gt = header.ground_truth.t_gt;
    if t_gt == 0 || t_gt as usize > chunks.len() {
        return Err(IngestError::BadGroundTruth {
            msg: format!("t_gt {} outside [1, {}]", t_gt, chunks.len()),
        });
    }
    if header.ground_truth.answer.trim().is_empty() {
        return Err(IngestError::BadGroundTruth {
            msg: "empty answer".to_string(),
        });
    }

    Ok(StreamScript {
        instruction: Instruction::new(header.instruction),
        fps: header.fps,
        tokens_per_frame: header.tokens_per_frame,
        chunks,
        ground_truth: GroundTruth {
            answer: header.ground_truth.answer,
            answer_type: header.ground_truth.answer_type,
            t_gt,
        },
    })
}

/// Writes a script in the same line-delimited form the loader reads.
pub fn write_stream_script(script: &StreamScript, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    let header = HeaderLine {
        instruction: script.instruction.text.clone(),
        fps: script.fps,
        tokens_per_frame: script.tokens_per_frame,
        ground_truth: GroundTruthLine {
            answer: script.ground_truth.answer.clone(),
            answer_type: script.ground_truth.answer_type,
            t_gt: script.ground_truth.t_gt,
        },
    };
    writeln!(
        file,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )?;
    for chunk in &script.chunks {
        let line = ChunkLine {
            index: chunk.index,
            start_time: chunk.start_time,
            end_time: chunk.end_time,
            feature_seed: chunk.feature_seed,
        };
        writeln!(
            file,
            "{}",
            serde_json::to_string(&line).expect("chunk serializes")
        )?;
    }
    Ok(())
}
