//! Shared domain types for the streaming watch-think-speak loop: tokens,
//! visual chunks, stream scripts, and the structured step-output grammar.

pub mod grammar;
pub mod script;
pub mod vocab;

pub use grammar::{parse_step_output, render_step_output, FormatError};
pub use script::{load_stream_script, write_stream_script, IngestError};

/// What a cached token is for. Determines eviction policy: only `Visual`
/// tokens are ever removed from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Visual,
    Instruction,
    Reasoning,
    ActionMarker,
    ResponseContent,
    Control,
}

/// One vocabulary item in the logical stream. `position` is assigned once
/// when the token enters the stream and never changes, even when cache
/// compaction moves the entry to a different slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub role: Role,
    pub position: u64,
}

impl Token {
    pub fn new(id: u32, role: Role, position: u64) -> Self {
        Token { id, role, position }
    }
}

/// A one-chunk slice of the incoming stream: `frame_count` frames, each
/// expanded to `tokens_per_frame` visual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualChunk {
    /// 1-based chunk ordinal.
    pub index: u32,
    pub start_time: f64,
    pub end_time: f64,
    pub frame_count: u32,
    pub tokens_per_frame: u32,
    /// Drives deterministic toy visual-token synthesis. Odd seeds mark the
    /// chunk as carrying the evidence token (see [`vocab::EVIDENCE`]).
    pub feature_seed: u64,
}

impl VisualChunk {
    pub fn token_count(&self) -> usize {
        self.frame_count as usize * self.tokens_per_frame as usize
    }

    pub fn carries_evidence(&self) -> bool {
        self.feature_seed & 1 == 1
    }
}

/// The user instruction. Its tokens occupy positions `0..len` of every
/// session and are never evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Instruction {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = vocab::tokenize_text(&text)
            .into_iter()
            .enumerate()
            .map(|(i, id)| Token::new(id, Role::Instruction, i as u64))
            .collect();
        Instruction { text, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The interaction decision of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Silent,
    Respond(String),
}

impl Action {
    pub fn is_respond(&self) -> bool {
        matches!(self, Action::Respond(_))
    }
}

/// One parsed watch-think-speak step: the think-block content plus the
/// action taken at chunk `chunk_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    pub reasoning: String,
    pub action: Action,
    pub chunk_index: u32,
}

impl StepOutput {
    pub fn new(reasoning: impl Into<String>, action: Action, chunk_index: u32) -> Self {
        StepOutput {
            reasoning: reasoning.into(),
            action,
            chunk_index,
        }
    }
}

/// Answer formats the rule-based verifiers understand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    MultipleChoice,
    Binary,
    Counting,
}

/// The verifiable target of a script: what to answer and at which chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub answer: String,
    pub answer_type: AnswerType,
    /// Ground-truth response chunk, 1-based.
    pub t_gt: u32,
}

/// A full replayable stream: instruction, contiguous chunks, ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamScript {
    pub instruction: Instruction,
    pub fps: f64,
    pub tokens_per_frame: u32,
    pub chunks: Vec<VisualChunk>,
    pub ground_truth: GroundTruth,
}

impl StreamScript {
    pub fn num_chunks(&self) -> u32 {
        self.chunks.len() as u32
    }

    /// Largest per-chunk visual token count; sizing input for cache capacity.
    pub fn max_chunk_tokens(&self) -> usize {
        self.chunks
            .iter()
            .map(|c| c.token_count())
            .max()
            .unwrap_or(0)
    }
}

/// Expands a chunk into its visual tokens. Token ids are a pure function of
/// `(feature_seed, index)`; positions start at `base_position` so the caller
/// controls placement in the logical stream.
pub fn synthesize_visual_tokens(chunk: &VisualChunk, base_position: u64) -> Vec<Token> {
    let mut out = Vec::with_capacity(chunk.token_count());
    let evidence = chunk.carries_evidence();
    let mut offset = 0u64;
    for frame in 0..chunk.frame_count {
        for slot in 0..chunk.tokens_per_frame {
            let id = if evidence && slot == 0 {
                vocab::EVIDENCE
            } else {
                let h = splitmix64(
                    chunk
                        .feature_seed
                        .wrapping_add((chunk.index as u64) << 40)
                        .wrapping_add((frame as u64) << 20)
                        .wrapping_add(slot as u64),
                );
                vocab::general_id(h)
            };
            out.push(Token::new(id, Role::Visual, base_position + offset));
            offset += 1;
        }
    }
    out
}

/// SplitMix64 step; the deterministic scrambler behind token synthesis and
/// instruction hashing.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_second_chunk(seed: u64) -> VisualChunk {
        VisualChunk {
            index: 1,
            start_time: 0.0,
            end_time: 1.0,
            frame_count: 2, // 1 s at 2 fps
            tokens_per_frame: 16,
            feature_seed: seed,
        }
    }

    #[test]
    fn one_second_chunk_yields_32_visual_tokens() {
        let tokens = synthesize_visual_tokens(&one_second_chunk(42), 100);
        assert_eq!(tokens.len(), 32);
        assert!(tokens.iter().all(|t| t.role == Role::Visual));
        let positions: Vec<u64> = tokens.iter().map(|t| t.position).collect();
        assert_eq!(positions, (100..132).collect::<Vec<u64>>());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_visual_tokens(&one_second_chunk(42), 0);
        let b = synthesize_visual_tokens(&one_second_chunk(42), 0);
        assert_eq!(a, b);
        // Position base must not change the ids.
        let c = synthesize_visual_tokens(&one_second_chunk(42), 7_000);
        let ids_a: Vec<u32> = a.iter().map(|t| t.id).collect();
        let ids_c: Vec<u32> = c.iter().map(|t| t.id).collect();
        assert_eq!(ids_a, ids_c);
    }

    #[test]
    fn zero_frame_chunk_synthesizes_nothing() {
        let mut chunk = one_second_chunk(42);
        chunk.frame_count = 0;
        assert!(synthesize_visual_tokens(&chunk, 0).is_empty());
    }

    #[test]
    fn evidence_seed_marks_first_slot_of_each_frame() {
        let tokens = synthesize_visual_tokens(&one_second_chunk(43), 0);
        assert_eq!(tokens[0].id, vocab::EVIDENCE);
        assert_eq!(tokens[16].id, vocab::EVIDENCE);
        assert!(tokens[1..16].iter().all(|t| t.id != vocab::EVIDENCE));
    }

    #[test]
    fn different_seeds_give_different_id_streams() {
        let a = synthesize_visual_tokens(&one_second_chunk(2), 0);
        let b = synthesize_visual_tokens(&one_second_chunk(4), 0);
        assert_ne!(
            a.iter().map(|t| t.id).collect::<Vec<_>>(),
            b.iter().map(|t| t.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn instruction_tokens_are_positioned_from_zero() {
        let instr = Instruction::new("watch the stream and answer yes");
        assert_eq!(instr.len(), 6);
        for (i, t) in instr.tokens.iter().enumerate() {
            assert_eq!(t.position, i as u64);
            assert_eq!(t.role, Role::Instruction);
        }
        // Lexicon words map onto their reserved ids.
        assert_eq!(instr.tokens[5].id, vocab::word_id("yes").unwrap());
    }
}
