//! Reasoning-compressed streaming memory: a contiguous slot array of cached
//! key/value entries with chunk-granular eviction of the oldest in-window
//! visual chunk and in-place compaction.
//!
//! Only `Visual` entries are ever removed. Everything the model generates
//! (reasoning, action markers, response content) plus the instruction stays
//! for the life of the session, acting as the long-term semantic memory the
//! sliding visual window compresses into.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::stream_core::{Role, Token};

/// Sizing of the sliding-window memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    /// Number of visual chunks retained (the window W).
    pub window_chunks: u32,
    /// Physical slot budget for the whole session.
    pub capacity_slots: usize,
    /// Stream seconds per chunk; interprets W in wall-clock terms.
    pub chunk_seconds: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        // W = 20 one-second chunks: the best-performing window configuration.
        CacheConfig {
            window_chunks: 20,
            capacity_slots: 4096,
            chunk_seconds: 1.0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        if self.window_chunks == 0 {
            return Err(CacheError::Config("window_chunks must be >= 1".to_string()));
        }
        if self.capacity_slots == 0 {
            return Err(CacheError::Config(
                "capacity_slots must be >= 1".to_string(),
            ));
        }
        if self.chunk_seconds <= 0.0 || self.chunk_seconds.is_nan() {
            return Err(CacheError::Config(
                "chunk_seconds must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Checks the slot budget against a concrete session shape: one full
    /// visual window, the instruction, and headroom for every token the
    /// engine may generate. Sessions reject undersized configurations up
    /// front so capacity can never run out mid-stream.
    pub fn validate_for_session(
        &self,
        instruction_len: usize,
        max_chunk_tokens: usize,
        generated_headroom: usize,
    ) -> Result<(), CacheError> {
        self.validate()?;
        let needed =
            instruction_len + self.window_chunks as usize * max_chunk_tokens + generated_headroom;
        if self.capacity_slots < needed {
            return Err(CacheError::Config(format!(
                "capacity_slots {} < required {needed} \
                 (instruction {instruction_len} + window {} x {max_chunk_tokens} \
                 + headroom {generated_headroom})",
                self.capacity_slots, self.window_chunks
            )));
        }
        Ok(())
    }
}

/// Per-layer cached key/value vectors for one token. Width of each vector is
/// head dimension x heads of the owning decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// Shape the cache expects of every entry payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvDims {
    pub layers: usize,
    pub width: usize,
}

impl KvDims {
    /// Accounting-only caches carry no payload at all.
    pub const NONE: KvDims = KvDims {
        layers: 0,
        width: 0,
    };
}

/// One cache slot: the token, its owning chunk (0 for non-visual entries),
/// and one key/value pair per decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub token: Token,
    pub chunk_tag: u32,
    pub kv: Vec<KvPair>,
}

impl CacheEntry {
    /// Payload-free entry for accounting harnesses.
    pub fn bare(token: Token, chunk_tag: u32) -> Self {
        CacheEntry {
            token,
            chunk_tag,
            kv: Vec::new(),
        }
    }

    fn matches(&self, dims: &KvDims) -> bool {
        self.kv.len() == dims.layers
            && self
                .kv
                .iter()
                .all(|p| p.key.len() == dims.width && p.value.len() == dims.width)
    }
}

/// Outcome of one eviction: which chunk went, how many tokens it held, and
/// how many surviving entries the in-place compaction shifted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictReport {
    pub evicted_chunk: u32,
    pub evicted_token_count: usize,
    pub moved_entry_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache config: {0}")]
    Config(String),
    #[error("capacity exhausted: {live} live + {incoming} incoming > {capacity} slots")]
    Capacity {
        live: usize,
        incoming: usize,
        capacity: usize,
    },
    #[error("non-monotone position {position} (last is {last})")]
    Position { position: u64, last: u64 },
    #[error("no visual chunks are active")]
    EmptyWindow,
    #[error("kv payload does not match cache dims ({layers} layers x width {width})")]
    Dim { layers: usize, width: usize },
}

/// The memory state M_t: live entries in chronological order plus the
/// visibility accounting the window bound is checked against.
#[derive(Debug, Clone)]
pub struct CacheState {
    entries: Vec<CacheEntry>,
    dims: KvDims,
    window_chunks: u32,
    capacity_slots: usize,
    active_visual_chunks: BTreeSet<u32>,
    retained_visual_tokens: usize,
    retained_generated_tokens: usize,
    instruction_control_tokens: usize,
}

impl CacheState {
    /// Empty cache sized by `config`, expecting payloads shaped by `dims`.
    pub fn new(config: &CacheConfig, dims: KvDims) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(CacheState {
            entries: Vec::new(),
            dims,
            window_chunks: config.window_chunks,
            capacity_slots: config.capacity_slots,
            active_visual_chunks: BTreeSet::new(),
            retained_visual_tokens: 0,
            retained_generated_tokens: 0,
            instruction_control_tokens: 0,
        })
    }

    pub fn window_chunks(&self) -> u32 {
        self.window_chunks
    }

    pub fn capacity_slots(&self) -> usize {
        self.capacity_slots
    }

    pub fn kv_dims(&self) -> KvDims {
        self.dims
    }

    /// Number of live entries; the attention cost of the next decode step is
    /// proportional to this.
    pub fn visible_count(&self) -> usize {
        self.entries.len()
    }

    pub fn live_count(&self) -> usize {
        self.entries.len()
    }

    pub fn retained_visual_tokens(&self) -> usize {
        self.retained_visual_tokens
    }

    pub fn retained_generated_tokens(&self) -> usize {
        self.retained_generated_tokens
    }

    pub fn instruction_control_tokens(&self) -> usize {
        self.instruction_control_tokens
    }

    pub fn active_visual_chunks(&self) -> &BTreeSet<u32> {
        &self.active_visual_chunks
    }

    pub fn window_is_full(&self) -> bool {
        self.active_visual_chunks.len() >= self.window_chunks as usize
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn last_position(&self) -> Option<u64> {
        self.entries.last().map(|e| e.token.position)
    }

    /// Appends entries in chronological order, updating role counters and the
    /// active-chunk set. Fails without mutating on capacity exhaustion,
    /// position regressions, or payload shape mismatches.
    pub fn append_entries(&mut self, entries: Vec<CacheEntry>) -> Result<(), CacheError> {
        if self.entries.len() + entries.len() > self.capacity_slots {
            return Err(CacheError::Capacity {
                live: self.entries.len(),
                incoming: entries.len(),
                capacity: self.capacity_slots,
            });
        }
        let mut last = self.last_position();
        for entry in &entries {
            if let Some(last) = last {
                if entry.token.position <= last {
                    return Err(CacheError::Position {
                        position: entry.token.position,
                        last,
                    });
                }
            }
            last = Some(entry.token.position);
            if !entry.matches(&self.dims) {
                return Err(CacheError::Dim {
                    layers: self.dims.layers,
                    width: self.dims.width,
                });
            }
        }
        for entry in entries {
            match entry.token.role {
                Role::Visual => {
                    self.retained_visual_tokens += 1;
                    self.active_visual_chunks.insert(entry.chunk_tag);
                }
                Role::Reasoning | Role::ActionMarker | Role::ResponseContent => {
                    self.retained_generated_tokens += 1;
                }
                Role::Instruction | Role::Control => {
                    self.instruction_control_tokens += 1;
                }
            }
            self.entries.push(entry);
        }
        Ok(())
    }

    /// Removes every visual entry of the oldest active chunk, compacting the
    /// slot array in place. Retained entries keep their original positions.
    pub fn evict_oldest_visual(&mut self) -> Result<EvictReport, CacheError> {
        let oldest = *self
            .active_visual_chunks
            .iter()
            .next()
            .ok_or(CacheError::EmptyWindow)?;
        let first_removed = self
            .entries
            .iter()
            .position(|e| e.token.role == Role::Visual && e.chunk_tag == oldest);

        let before = self.entries.len();
        self.entries
            .retain(|e| !(e.token.role == Role::Visual && e.chunk_tag == oldest));
        let evicted = before - self.entries.len();

        self.active_visual_chunks.remove(&oldest);
        self.retained_visual_tokens -= evicted;

        // Every surviving entry at or after the first vacated slot shifted.
        let moved = match first_removed {
            Some(idx) => self.entries.len() - idx,
            None => 0,
        };
        Ok(EvictReport {
            evicted_chunk: oldest,
            evicted_token_count: evicted,
            moved_entry_count: moved,
        })
    }

    /// The logical memory state: `(position, role, chunk_tag)` for each live
    /// entry in chronological order.
    pub fn memory_state(&self) -> Vec<(u64, Role, u32)> {
        self.entries
            .iter()
            .map(|e| (e.token.position, e.token.role, e.chunk_tag))
            .collect()
    }

    /// Live tokens in chronological order; the oracle recomputes over these.
    pub fn retained_tokens(&self) -> Vec<Token> {
        self.entries.iter().map(|e| e.token).collect()
    }

    /// Text snapshot for golden tests: one `(slot, position, role, chunk_tag)`
    /// line per live entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (slot, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{slot}\t{}\t{:?}\t{}",
                e.token.position, e.token.role, e.chunk_tag
            );
        }
        out
    }

    /// Fault-injection hook for the verification suite: perturbs one cached
    /// key value so oracle comparisons must detect the divergence.
    pub fn corrupt_kv(&mut self, slot: usize, layer: usize, delta: f32) {
        if let Some(entry) = self.entries.get_mut(slot) {
            if let Some(pair) = entry.kv.get_mut(layer) {
                if let Some(x) = pair.key.get_mut(0) {
                    *x += delta;
                }
            }
        }
    }
}
