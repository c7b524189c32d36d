//! The streaming watch-think-speak loop: for every arriving chunk, evict the
//! oldest visual chunk if the window is full, prefill the new visual tokens
//! (plus the instruction on chunk one), then decode a bounded step output
//! token by token. Prefill is the only variable-shape path; decoding is a
//! fixed-shape single-token step, mirroring a captured decode kernel.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rcsm_cache::{CacheConfig, CacheError, CacheState};
use crate::stream_core::{
    parse_step_output, synthesize_visual_tokens, vocab, Action, FormatError, Role, StepOutput,
    StreamScript, Token,
};
use crate::toy_decoder::{DecoderParams, DimError, LogitVector, Phase};

/// Per-step decoding knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Hard cap on tokens emitted per step (N).
    pub max_new_tokens: u32,
    /// Max reasoning tokens inside the think block per chunk.
    pub think_budget: u32,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub rng_seed: u64,
    /// Sampling any of these ends the step (the token is not fed back).
    pub stop_tokens: BTreeSet<u32>,
    /// Disables eviction entirely; the unbounded-context comparison mode.
    pub baseline_mode: bool,
    /// Record per-token policy data (base logits, phase, evidence) for
    /// reinforcement-learning re-scoring.
    pub record_policy_tokens: bool,
    /// Capture decode-time logits for oracle comparison.
    pub capture_decode_logits: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_new_tokens: 64,
            think_budget: 20,
            top_k: 32,
            top_p: 0.95,
            temperature: 1.0,
            rng_seed: 0,
            stop_tokens: BTreeSet::from([vocab::END_OF_TURN]),
            baseline_mode: false,
            record_policy_tokens: false,
            capture_decode_logits: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_new_tokens == 0 {
            return Err(EngineError::Config(
                "max_new_tokens must be >= 1".to_string(),
            ));
        }
        if self.think_budget == 0 || self.think_budget > self.max_new_tokens {
            return Err(EngineError::Config(format!(
                "think_budget must be in [1, max_new_tokens={}], got {}",
                self.max_new_tokens, self.think_budget
            )));
        }
        check_sampler_params(self.top_k, self.top_p, self.temperature)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("top_p must be in (0, 1], got {0}")]
    TopP(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("top_k must be >= 1")]
    TopK,
    #[error("non-finite logit at id {0}")]
    NonFinite(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("script: {0}")]
    Script(String),
    #[error("engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Decoder(#[from] DimError),
    #[error(transparent)]
    Sample(#[from] ParamError),
}

/// Platform-independent and wall-clock cost readings for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub chunk_index: u32,
    /// Live cache entries after prefill, before the first decode.
    pub context_len_before_decode: usize,
    /// Sum over every fed token (prefill and decode) of the entry count it
    /// attended to.
    pub attention_ops: u64,
    pub wall_time_ms: f64,
    /// Tokens emitted this step: sampled plus injected, including the stop.
    pub generated_tokens: u32,
    pub evicted_tokens: usize,
}

/// One emitted token and whether the engine injected it rather than the
/// policy sampling it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmittedToken {
    pub id: u32,
    pub forced: bool,
}

/// Policy-facing view of one sampled token: everything needed to re-score it
/// under any steering table. Environment-forced injections are not recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTokenRecord {
    pub base_logits: LogitVector,
    pub phase: Phase,
    pub evidence: bool,
    pub token_id: u32,
}

/// Everything one processed chunk produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub output: StepOutput,
    pub raw_text: String,
    /// Grammar violation of the raw text, if any.
    pub parse_error: Option<FormatError>,
    /// `</think>` was force-injected because the budget ran out.
    pub budget_forced: bool,
    /// The step hit the token cap with no action marker and was recorded
    /// as silent.
    pub no_action_fallback: bool,
    /// Content tokens emitted strictly inside the think block.
    pub think_tokens: u32,
    /// Generated tokens fed back through the decoder (excludes the stop).
    pub fed_generated: u32,
    /// Every emitted token in order, stop token and forced injections
    /// included; enough to replay the step teacher-forced.
    pub emitted: Vec<EmittedToken>,
    pub metrics: StepMetrics,
    pub policy_tokens: Vec<PolicyTokenRecord>,
    /// When capturing: logits at the last prefill slot, then after each fed
    /// generated token. These are what the recomputation oracle must match.
    pub decode_logits: Option<Vec<LogitVector>>,
}

impl StepRecord {
    /// Minimal record built from raw text alone; metrics zeroed, no
    /// violation flags. The construction path for reward golden tables.
    pub fn from_raw_text(chunk_index: u32, raw_text: &str) -> StepRecord {
        let (output, parse_error) = match parse_step_output(raw_text) {
            Ok(mut parsed) => {
                parsed.chunk_index = chunk_index;
                (parsed, None)
            }
            Err(err) => (StepOutput::new("", Action::Silent, chunk_index), Some(err)),
        };
        StepRecord {
            output,
            raw_text: raw_text.to_string(),
            parse_error,
            budget_forced: false,
            no_action_fallback: false,
            think_tokens: 0,
            fed_generated: 0,
            emitted: Vec::new(),
            metrics: StepMetrics {
                chunk_index,
                context_len_before_decode: 0,
                attention_ops: 0,
                wall_time_ms: 0.0,
                generated_tokens: 0,
                evicted_tokens: 0,
            },
            policy_tokens: Vec::new(),
            decode_logits: None,
        }
    }
}

/// The rollout o_{1:T}: one step record per processed chunk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    /// Trajectory from raw step texts, chunks numbered from one.
    pub fn from_raw_texts(texts: &[&str]) -> Trajectory {
        Trajectory {
            steps: texts
                .iter()
                .enumerate()
                .map(|(i, t)| StepRecord::from_raw_text(i as u32 + 1, t))
                .collect(),
        }
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Chunk index of the first cleanly parsed response, if any.
    pub fn first_response_chunk(&self) -> Option<u32> {
        self.steps
            .iter()
            .find(|s| s.output.action.is_respond())
            .map(|s| s.output.chunk_index)
    }

    /// First response's content.
    pub fn first_response(&self) -> Option<(u32, &str)> {
        self.steps.iter().find_map(|s| match &s.output.action {
            Action::Respond(content) => Some((s.output.chunk_index, content.as_str())),
            Action::Silent => None,
        })
    }

    pub fn metrics(&self) -> impl Iterator<Item = &StepMetrics> {
        self.steps.iter().map(|s| &s.metrics)
    }
}

/// Slot budget a session of this shape can need in the worst case.
pub fn required_capacity(
    script: &StreamScript,
    cache_cfg: &CacheConfig,
    engine_cfg: &EngineConfig,
) -> usize {
    let visual = if engine_cfg.baseline_mode {
        script.chunks.iter().map(|c| c.token_count()).sum()
    } else {
        cache_cfg.window_chunks as usize * script.max_chunk_tokens()
    };
    script.instruction.len()
        + visual
        + script.num_chunks() as usize * engine_cfg.max_new_tokens as usize
}

/// One live streaming session. Owns its cache and rng; the decoder params
/// are shared immutably.
pub struct Session<'a> {
    params: &'a DecoderParams,
    script: &'a StreamScript,
    cfg: EngineConfig,
    cache: CacheState,
    rng: ChaCha8Rng,
    next_position: u64,
    evidence_seen: bool,
    next_chunk: usize,
    last_logits: Option<LogitVector>,
}

impl<'a> Session<'a> {
    pub fn new(
        params: &'a DecoderParams,
        script: &'a StreamScript,
        cache_cfg: &CacheConfig,
        engine_cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        engine_cfg.validate()?;
        if script.chunks.is_empty() {
            return Err(EngineError::Script("script has no chunks".to_string()));
        }
        cache_cfg.validate()?;
        let needed = required_capacity(script, cache_cfg, &engine_cfg);
        if cache_cfg.capacity_slots < needed {
            return Err(EngineError::Config(format!(
                "capacity_slots {} below worst case {needed} for this script; \
                 a mid-stream overflow would require evicting more than one chunk per arrival",
                cache_cfg.capacity_slots
            )));
        }
        let cache = CacheState::new(cache_cfg, params.kv_dims())?;
        let rng = ChaCha8Rng::seed_from_u64(engine_cfg.rng_seed);
        Ok(Session {
            params,
            script,
            cfg: engine_cfg,
            cache,
            rng,
            next_position: 0,
            evidence_seen: false,
            next_chunk: 0,
            last_logits: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.next_chunk >= self.script.chunks.len()
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn evidence_seen(&self) -> bool {
        self.evidence_seen
    }

    /// Fault-injection passthrough for verification tests.
    pub fn corrupt_cache_kv(&mut self, slot: usize, layer: usize, delta: f32) {
        self.cache.corrupt_kv(slot, layer, delta);
    }

    fn feed(
        &mut self,
        token: Token,
        chunk_tag: u32,
        ops: &mut u64,
    ) -> Result<LogitVector, EngineError> {
        let (logits, mut entry) = self.params.incremental_step(&self.cache, &token)?;
        *ops += self.cache.live_count() as u64 + 1;
        entry.chunk_tag = chunk_tag;
        self.cache.append_entries(vec![entry])?;
        Ok(logits)
    }

    /// Processes the next chunk: evict, prefill, decode, parse.
    pub fn step(&mut self) -> Result<StepRecord, EngineError> {
        if self.finished() {
            return Err(EngineError::Script(
                "all chunks already processed".to_string(),
            ));
        }
        let started = Instant::now();
        let chunk = self.script.chunks[self.next_chunk].clone();
        let mut attention_ops = 0u64;

        // Evict exactly when the window is full at chunk arrival.
        let mut evicted_tokens = 0usize;
        if !self.cfg.baseline_mode && self.cache.window_is_full() {
            let report = self.cache.evict_oldest_visual()?;
            evicted_tokens = report.evicted_token_count;
        }

        // Prefill: instruction first (chunk one only), then the chunk.
        if self.next_chunk == 0 {
            for token in self.script.instruction.tokens.clone() {
                let logits = self.feed(token, 0, &mut attention_ops)?;
                self.last_logits = Some(logits);
            }
            self.next_position = self.script.instruction.len() as u64;
        }
        for token in synthesize_visual_tokens(&chunk, self.next_position) {
            if token.id == vocab::EVIDENCE {
                self.evidence_seen = true;
            }
            let logits = self.feed(token, chunk.index, &mut attention_ops)?;
            self.last_logits = Some(logits);
            self.next_position += 1;
        }

        let context_len_before_decode = self.cache.live_count();
        let step = self.decode_step(&mut attention_ops)?;

        let metrics = StepMetrics {
            chunk_index: chunk.index,
            context_len_before_decode,
            attention_ops,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            generated_tokens: step.emitted_count,
            evicted_tokens,
        };
        self.next_chunk += 1;

        let (output, parse_error) = match parse_step_output(&step.raw_text) {
            Ok(mut parsed) => {
                parsed.chunk_index = chunk.index;
                (parsed, None)
            }
            Err(err) => (StepOutput::new("", Action::Silent, chunk.index), Some(err)),
        };

        Ok(StepRecord {
            output,
            raw_text: step.raw_text,
            parse_error,
            budget_forced: step.budget_forced,
            no_action_fallback: !step.saw_action,
            think_tokens: step.think_tokens,
            fed_generated: step.fed,
            emitted: step.emitted,
            metrics,
            policy_tokens: step.policy_tokens,
            decode_logits: step.captured,
        })
    }

    fn decode_step(&mut self, ops: &mut u64) -> Result<DecodeOutcome, EngineError> {
        let mut phase = Phase::StepStart;
        let mut think_tokens = 0u32;
        let mut emitted_count = 0u32;
        let mut fed = 0u32;
        let mut budget_forced = false;
        let mut saw_action = false;
        let mut text_ids = Vec::new();
        let mut emitted_tokens = Vec::new();
        let mut policy_tokens = Vec::new();
        let mut captured = if self.cfg.capture_decode_logits {
            Some(vec![self
                .last_logits
                .clone()
                .expect("prefill produced logits")])
        } else {
            None
        };

        while emitted_count < self.cfg.max_new_tokens {
            let base = self.last_logits.as_ref().expect("prefill produced logits");
            let biased = self
                .params
                .steer_bias
                .biased_logits(base, phase, self.evidence_seen);
            let sampled = sample_token(
                &biased,
                self.cfg.top_k,
                self.cfg.top_p,
                self.cfg.temperature,
                &mut self.rng,
            )?;

            // Budget enforcement: the think block is closed for the model
            // once it has spent its reasoning tokens.
            let (id, forced) = if phase == Phase::InThink
                && sampled != vocab::THINK_CLOSE
                && think_tokens >= self.cfg.think_budget
            {
                (vocab::THINK_CLOSE, true)
            } else {
                (sampled, false)
            };
            emitted_count += 1;
            emitted_tokens.push(EmittedToken { id, forced });
            if forced {
                budget_forced = true;
            } else {
                if self.cfg.record_policy_tokens {
                    policy_tokens.push(PolicyTokenRecord {
                        base_logits: base.clone(),
                        phase,
                        evidence: self.evidence_seen,
                        token_id: id,
                    });
                }
                if self.cfg.stop_tokens.contains(&id) {
                    break;
                }
            }

            let emission_phase = phase;
            if phase == Phase::InThink && id != vocab::THINK_CLOSE {
                think_tokens += 1;
            }
            if phase == Phase::PostThink && (id == vocab::SILENT || id == vocab::RESPONSE) {
                saw_action = true;
            }
            phase = next_phase(phase, id);
            text_ids.push(id);

            let token = Token::new(id, role_for(id, emission_phase), self.next_position);
            let logits = self.feed(token, 0, ops)?;
            self.next_position += 1;
            fed += 1;
            if let Some(cap) = captured.as_mut() {
                cap.push(logits.clone());
            }
            self.last_logits = Some(logits);
        }

        Ok(DecodeOutcome {
            raw_text: vocab::render_tokens(&text_ids),
            emitted_count,
            fed,
            think_tokens,
            budget_forced,
            saw_action,
            emitted: emitted_tokens,
            policy_tokens,
            captured,
        })
    }
}

struct DecodeOutcome {
    raw_text: String,
    emitted_count: u32,
    fed: u32,
    think_tokens: u32,
    budget_forced: bool,
    saw_action: bool,
    emitted: Vec<EmittedToken>,
    policy_tokens: Vec<PolicyTokenRecord>,
    captured: Option<Vec<LogitVector>>,
}

/// Runs a whole script through a fresh session.
pub fn run_session(
    params: &DecoderParams,
    script: &StreamScript,
    cache_cfg: &CacheConfig,
    engine_cfg: EngineConfig,
) -> Result<Trajectory, EngineError> {
    let mut session = Session::new(params, script, cache_cfg, engine_cfg)?;
    let mut steps = Vec::with_capacity(script.chunks.len());
    while !session.finished() {
        steps.push(session.step()?);
    }
    Ok(Trajectory { steps })
}

fn next_phase(phase: Phase, id: u32) -> Phase {
    match phase {
        Phase::StepStart => {
            if id == vocab::THINK_OPEN {
                Phase::InThink
            } else {
                Phase::StepStart
            }
        }
        Phase::InThink => {
            if id == vocab::THINK_CLOSE {
                Phase::PostThink
            } else {
                Phase::InThink
            }
        }
        Phase::PostThink => match id {
            vocab::SILENT => Phase::PostSilent,
            vocab::RESPONSE => Phase::ResponseFirst,
            _ => Phase::PostThink,
        },
        Phase::ResponseFirst => Phase::ResponseBody,
        Phase::ResponseBody => Phase::ResponseBody,
        Phase::PostSilent => Phase::PostSilent,
    }
}

fn role_for(id: u32, phase: Phase) -> Role {
    match id {
        vocab::THINK_OPEN | vocab::THINK_CLOSE | vocab::END_OF_TURN => Role::Control,
        vocab::SILENT | vocab::RESPONSE => Role::ActionMarker,
        _ => match phase {
            Phase::ResponseFirst | Phase::ResponseBody => Role::ResponseContent,
            _ => Role::Reasoning,
        },
    }
}

fn check_sampler_params(top_k: usize, top_p: f64, temperature: f64) -> Result<(), ParamError> {
    if top_k == 0 {
        return Err(ParamError::TopK);
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(ParamError::TopP(top_p));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ParamError::Temperature(temperature));
    }
    Ok(())
}

/// The truncated, renormalized sampling distribution: temperature scaling,
/// then top-k, then nucleus truncation. Candidates are ordered by descending
/// probability with ties broken by ascending token id, which pins the
/// truncation boundary across platforms.
pub fn truncated_distribution(
    logits: &[f64],
    top_k: usize,
    top_p: f64,
    temperature: f64,
) -> Result<Vec<(u32, f64)>, ParamError> {
    check_sampler_params(top_k, top_p, temperature)?;
    if let Some(bad) = logits.iter().position(|x| !x.is_finite()) {
        return Err(ParamError::NonFinite(bad));
    }

    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    order.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    order.truncate(top_k.min(logits.len()));

    // Softmax over the kept set, largest first.
    let max = logits[order[0] as usize] / temperature;
    let mut kept: Vec<(u32, f64)> = order
        .iter()
        .map(|&id| (id, (logits[id as usize] / temperature - max).exp()))
        .collect();
    let denom: f64 = kept.iter().map(|(_, w)| w).sum();
    for (_, w) in kept.iter_mut() {
        *w /= denom;
    }

    // Nucleus: minimal prefix whose cumulative mass reaches top_p.
    let mut cum = 0.0;
    let mut keep = kept.len();
    for (i, (_, p)) in kept.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    kept.truncate(keep);
    let denom: f64 = kept.iter().map(|(_, p)| p).sum();
    for (_, p) in kept.iter_mut() {
        *p /= denom;
    }
    Ok(kept)
}

/// Draws one token id from the truncated distribution.
pub fn sample_token(
    logits: &[f64],
    top_k: usize,
    top_p: f64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<u32, ParamError> {
    let dist = truncated_distribution(logits, top_k, top_p, temperature)?;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (id, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(*id);
        }
    }
    Ok(dist.last().expect("nonempty distribution").0)
}
