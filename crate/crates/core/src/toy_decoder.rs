//! A deterministic fixed-weight causal attention decoder, small enough for
//! sub-second tests but with real multi-head attention over the live cache.
//!
//! Keys and values are projections of the (normalized) token embedding with
//! rotary position mixing on the token's stored absolute position; the
//! residual stream evolves only along the query path. A cached entry is
//! therefore a pure function of `(token id, position)`, which is what makes
//! eviction exactly equivalent to recomputation over the retained set: the
//! recomputation oracle rebuilds every key/value from scratch and must land
//! on the same logits the incremental path produced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::rcsm_cache::{CacheEntry, CacheState, KvDims, KvPair};
use crate::stream_core::{vocab, Token};

/// Next-token scores over the vocabulary.
pub type LogitVector = Vec<f32>;

/// Decoder shape. `embed_dim` must equal `num_heads * head_dim` and the
/// vocabulary must cover the shared token universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        DecoderDims {
            vocab_size: 256,
            embed_dim: 64,
            num_heads: 4,
            head_dim: 16,
            num_layers: 2,
        }
    }
}

impl DecoderDims {
    pub fn validate(&self) -> Result<(), DimError> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.num_layers == 0
        {
            return Err(DimError::Shape("all dims must be positive".to_string()));
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(DimError::Shape(format!(
                "embed_dim {} != num_heads {} x head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            )));
        }
        if self.vocab_size < vocab::UNIVERSE as usize {
            return Err(DimError::Shape(format!(
                "vocab_size {} below token universe {}",
                self.vocab_size,
                vocab::UNIVERSE
            )));
        }
        Ok(())
    }

    fn hidden_dim(&self) -> usize {
        2 * self.embed_dim
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DimError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("input ordering: {0}")]
    Order(String),
}

/// Decode phases the steering table is indexed by. The engine tracks the
/// phase syntactically while decoding one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Before any token of the step.
    StepStart = 0,
    /// Inside the think block.
    InThink = 1,
    /// After `</think>`, choosing between silence and response.
    PostThink = 2,
    /// Right after `<response>`, before any content.
    ResponseFirst = 3,
    /// Further response content / the end-of-turn decision.
    ResponseBody = 4,
    /// After `<silent>`; anything but end-of-turn is trailing garbage.
    PostSilent = 5,
}

pub const PHASE_COUNT: usize = 6;

pub const ALL_PHASES: [Phase; PHASE_COUNT] = [
    Phase::StepStart,
    Phase::InThink,
    Phase::PostThink,
    Phase::ResponseFirst,
    Phase::ResponseBody,
    Phase::PostSilent,
];

/// Additive per-token logit bias table indexed by (phase, evidence flag).
/// This is the trainable policy surface: the decoder weights stay frozen and
/// policy optimization moves only these values, so log-probabilities and
/// their gradients are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerBias {
    vocab: usize,
    table: Vec<f64>,
}

impl SteerBias {
    pub fn zeros(vocab: usize) -> Self {
        SteerBias {
            vocab,
            table: vec![0.0; PHASE_COUNT * 2 * vocab],
        }
    }

    /// A format-following initialization: marker choices are primed so steps
    /// come out structurally clean, while the silence/response decision and
    /// the answer content start evidence-agnostic. Plays the role of a
    /// cold-started policy for reward optimization to refine.
    pub fn format_primed(vocab: usize) -> Self {
        let mut bias = SteerBias::zeros(vocab);
        for evidence in [false, true] {
            bias.set(Phase::StepStart, evidence, vocab::THINK_OPEN, 10.0);
            bias.set(Phase::InThink, evidence, vocab::THINK_CLOSE, 6.5);
            bias.set(Phase::PostThink, evidence, vocab::SILENT, 10.0);
            bias.set(Phase::PostThink, evidence, vocab::RESPONSE, 10.0);
            bias.set(
                Phase::ResponseFirst,
                evidence,
                vocab::word_id("yes").unwrap(),
                10.0,
            );
            bias.set(
                Phase::ResponseFirst,
                evidence,
                vocab::word_id("no").unwrap(),
                10.0,
            );
            bias.set(Phase::ResponseBody, evidence, vocab::END_OF_TURN, 10.0);
            bias.set(Phase::PostSilent, evidence, vocab::END_OF_TURN, 10.0);
        }
        bias
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    #[inline]
    fn index(&self, phase: Phase, evidence: bool, id: u32) -> usize {
        (phase as usize * 2 + evidence as usize) * self.vocab + id as usize
    }

    pub fn get(&self, phase: Phase, evidence: bool, id: u32) -> f64 {
        self.table[self.index(phase, evidence, id)]
    }

    pub fn set(&mut self, phase: Phase, evidence: bool, id: u32, value: f64) {
        let idx = self.index(phase, evidence, id);
        self.table[idx] = value;
    }

    /// One bias row as a slice, vocab long.
    pub fn row(&self, phase: Phase, evidence: bool) -> &[f64] {
        let start = (phase as usize * 2 + evidence as usize) * self.vocab;
        &self.table[start..start + self.vocab]
    }

    /// Flattened trainable parameters.
    pub fn values(&self) -> &[f64] {
        &self.table
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn param_count(&self) -> usize {
        self.table.len()
    }

    /// Stable name of one flattened parameter, for reports.
    pub fn param_name(&self, idx: usize) -> String {
        let vocab = self.vocab;
        let row = idx / vocab;
        let id = idx % vocab;
        let phase = ALL_PHASES[row / 2];
        let evidence = row % 2 == 1;
        format!("{phase:?}/ev{}/tok{id}", evidence as u8)
    }

    /// Base logits plus this row, in f64 for exact policy math.
    pub fn biased_logits(&self, base: &[f32], phase: Phase, evidence: bool) -> Vec<f64> {
        let row = self.row(phase, evidence);
        base.iter()
            .zip(row.iter())
            .map(|(&b, &r)| b as f64 + r)
            .collect()
    }
}

struct LayerWeights {
    w_q: Vec<f32>,
    w_k: Vec<f32>,
    w_v: Vec<f32>,
    w_o: Vec<f32>,
    w_mlp_in: Vec<f32>,
    w_mlp_out: Vec<f32>,
}

/// Frozen decoder weights plus the trainable steering table. Two inits with
/// equal `(seed, dims)` produce bit-identical weights.
pub struct DecoderParams {
    pub dims: DecoderDims,
    pub seed: u64,
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    w_out: Vec<f32>,
    pub steer_bias: SteerBias,
}

impl Clone for DecoderParams {
    fn clone(&self) -> Self {
        DecoderParams {
            dims: self.dims,
            seed: self.seed,
            embed: self.embed.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w_q: l.w_q.clone(),
                    w_k: l.w_k.clone(),
                    w_v: l.w_v.clone(),
                    w_o: l.w_o.clone(),
                    w_mlp_in: l.w_mlp_in.clone(),
                    w_mlp_out: l.w_mlp_out.clone(),
                })
                .collect(),
            w_out: self.w_out.clone(),
            steer_bias: self.steer_bias.clone(),
        }
    }
}

/// Builds deterministic decoder weights from `(seed, dims)`.
pub fn init_decoder(seed: u64, dims: DecoderDims) -> Result<DecoderParams, DimError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.embed_dim;
    let h = dims.hidden_dim();

    let embed = fill(&mut rng, dims.vocab_size * d, inv_sqrt(d));
    let mut layers = Vec::with_capacity(dims.num_layers);
    for _ in 0..dims.num_layers {
        layers.push(LayerWeights {
            w_q: fill(&mut rng, d * d, inv_sqrt(d)),
            w_k: fill(&mut rng, d * d, inv_sqrt(d)),
            w_v: fill(&mut rng, d * d, inv_sqrt(d)),
            w_o: fill(&mut rng, d * d, inv_sqrt(d)),
            w_mlp_in: fill(&mut rng, h * d, inv_sqrt(d)),
            w_mlp_out: fill(&mut rng, d * h, inv_sqrt(h)),
        });
    }
    // Output projection scaled down so raw logits stay modest and the
    // steering table can dominate the sampled distribution.
    let w_out = fill(&mut rng, dims.vocab_size * d, 0.5 * inv_sqrt(d));

    Ok(DecoderParams {
        dims,
        seed,
        embed,
        layers,
        w_out,
        steer_bias: SteerBias::zeros(dims.vocab_size),
    })
}

fn inv_sqrt(n: usize) -> f32 {
    1.0 / (n as f32).sqrt()
}

fn fill(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| (2.0 * rng.gen::<f32>() - 1.0) * scale)
        .collect()
}

/// Context kv pairs the query attends to, without the query's own pair.
enum KvSource<'a> {
    Entries(&'a [CacheEntry]),
    List(&'a [Vec<KvPair>]),
}

impl<'a> KvSource<'a> {
    fn len(&self) -> usize {
        match self {
            KvSource::Entries(e) => e.len(),
            KvSource::List(l) => l.len(),
        }
    }

    #[inline]
    fn pair(&self, j: usize, layer: usize) -> (&[f32], &[f32]) {
        match self {
            KvSource::Entries(e) => {
                let p = &e[j].kv[layer];
                (&p.key, &p.value)
            }
            KvSource::List(l) => {
                let p = &l[j][layer];
                (&p.key, &p.value)
            }
        }
    }
}

impl DecoderParams {
    /// Cache payload shape this decoder produces.
    pub fn kv_dims(&self) -> KvDims {
        KvDims {
            layers: self.dims.num_layers,
            width: self.dims.embed_dim,
        }
    }

    /// SHA-256 over dims and every weight, hex-encoded; the determinism audit
    /// surface of the `checksum` subcommand.
    pub fn weight_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for n in [
            self.dims.vocab_size,
            self.dims.embed_dim,
            self.dims.num_heads,
            self.dims.head_dim,
            self.dims.num_layers,
        ] {
            hasher.update((n as u64).to_le_bytes());
        }
        let mut eat = |xs: &[f32]| {
            for x in xs {
                hasher.update(x.to_le_bytes());
            }
        };
        eat(&self.embed);
        for l in &self.layers {
            eat(&l.w_q);
            eat(&l.w_k);
            eat(&l.w_v);
            eat(&l.w_o);
            eat(&l.w_mlp_in);
            eat(&l.w_mlp_out);
        }
        eat(&self.w_out);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-layer key/value pairs for one token, independent of any context.
    fn kv_for(&self, id: u32, position: u64) -> Vec<KvPair> {
        let d = self.dims.embed_dim;
        let e = &self.embed[id as usize * d..(id as usize + 1) * d];
        let x = rmsnorm(e);
        self.layers
            .iter()
            .map(|layer| {
                let mut key = matvec(&layer.w_k, d, d, &x);
                rope_in_place(&mut key, self.dims.num_heads, self.dims.head_dim, position);
                let value = matvec(&layer.w_v, d, d, &x);
                KvPair { key, value }
            })
            .collect()
    }

    #[allow(clippy::needless_range_loop)] // j walks cache entries plus the self slot
    fn query_logits(&self, id: u32, position: u64, ctx: &KvSource, own: &[KvPair]) -> LogitVector {
        let d = self.dims.embed_dim;
        let n_ctx = ctx.len();
        let mut h = self.embed[id as usize * d..(id as usize + 1) * d].to_vec();
        let mut scores = vec![0.0f32; n_ctx + 1];

        for (l, layer) in self.layers.iter().enumerate() {
            let x = rmsnorm(&h);
            let mut q = matvec(&layer.w_q, d, d, &x);
            rope_in_place(&mut q, self.dims.num_heads, self.dims.head_dim, position);

            let mut attn = vec![0.0f32; d];
            let scale = 1.0 / (self.dims.head_dim as f32).sqrt();
            for head in 0..self.dims.num_heads {
                let lo = head * self.dims.head_dim;
                let hi = lo + self.dims.head_dim;
                let qh = &q[lo..hi];

                let mut max_score = f32::NEG_INFINITY;
                for j in 0..=n_ctx {
                    let k = if j < n_ctx {
                        ctx.pair(j, l).0
                    } else {
                        &own[l].key
                    };
                    let s = dot(qh, &k[lo..hi]) * scale;
                    scores[j] = s;
                    if s > max_score {
                        max_score = s;
                    }
                }
                let mut denom = 0.0f32;
                for s in scores[..=n_ctx].iter_mut() {
                    *s = (*s - max_score).exp();
                    denom += *s;
                }
                let inv = 1.0 / denom;
                for j in 0..=n_ctx {
                    let v = if j < n_ctx {
                        ctx.pair(j, l).1
                    } else {
                        &own[l].value
                    };
                    let p = scores[j] * inv;
                    for (a, &vv) in attn[lo..hi].iter_mut().zip(&v[lo..hi]) {
                        *a += p * vv;
                    }
                }
            }

            let o = matvec(&layer.w_o, d, d, &attn);
            for (hi_, oi) in h.iter_mut().zip(&o) {
                *hi_ += oi;
            }

            let y = rmsnorm(&h);
            let mut mid = matvec(&layer.w_mlp_in, self.dims.hidden_dim(), d, &y);
            for m in mid.iter_mut() {
                *m = gelu(*m);
            }
            let out = matvec(&layer.w_mlp_out, d, self.dims.hidden_dim(), &mid);
            for (hi_, oi) in h.iter_mut().zip(&out) {
                *hi_ += oi;
            }
        }

        let final_h = rmsnorm(&h);
        matvec(&self.w_out, self.dims.vocab_size, d, &final_h)
    }

    /// One causal decode step: the query attends to every live cache entry
    /// plus itself, using stored original positions. Returns next-token
    /// logits and the entry to append for this token.
    pub fn incremental_step(
        &self,
        cache: &CacheState,
        token: &Token,
    ) -> Result<(LogitVector, CacheEntry), DimError> {
        if cache.kv_dims() != self.kv_dims() {
            return Err(DimError::Shape(format!(
                "cache dims {:?} != decoder dims {:?}",
                cache.kv_dims(),
                self.kv_dims()
            )));
        }
        if token.id as usize >= self.dims.vocab_size {
            return Err(DimError::Shape(format!(
                "token id {} outside vocab {}",
                token.id, self.dims.vocab_size
            )));
        }
        if let Some(last) = cache.last_position() {
            if token.position <= last {
                return Err(DimError::Order(format!(
                    "input position {} must exceed cached position {last}",
                    token.position
                )));
            }
        }
        let own = self.kv_for(token.id, token.position);
        let logits = self.query_logits(
            token.id,
            token.position,
            &KvSource::Entries(cache.entries()),
            &own,
        );
        Ok((
            logits,
            CacheEntry {
                token: *token,
                chunk_tag: 0,
                kv: own,
            },
        ))
    }

    /// Ground-truth oracle: rebuilds key/value state from scratch over
    /// exactly the retained tokens (original positions, no cache) and
    /// returns the logits at each requested slot. Slot `i` attends to
    /// tokens `0..=i`, so one pass serves a whole decode step.
    pub fn recompute_logits_at(
        &self,
        tokens: &[Token],
        query_slots: &[usize],
    ) -> Result<Vec<LogitVector>, DimError> {
        for w in tokens.windows(2) {
            if w[1].position <= w[0].position {
                return Err(DimError::Order(format!(
                    "retained sequence positions not strictly increasing at {} -> {}",
                    w[0].position, w[1].position
                )));
            }
        }
        for &slot in query_slots {
            if slot >= tokens.len() {
                return Err(DimError::Order(format!(
                    "query slot {slot} outside sequence of {}",
                    tokens.len()
                )));
            }
        }
        let kvs: Vec<Vec<KvPair>> = tokens
            .iter()
            .map(|t| self.kv_for(t.id, t.position))
            .collect();
        Ok(query_slots
            .iter()
            .map(|&slot| {
                let t = &tokens[slot];
                self.query_logits(t.id, t.position, &KvSource::List(&kvs[..slot]), &kvs[slot])
            })
            .collect())
    }

    /// Logits for the final position of a retained sequence, recomputed from
    /// scratch. The single-slot case of [`Self::recompute_logits_at`].
    pub fn full_recompute_logits(&self, tokens: &[Token]) -> Result<LogitVector, DimError> {
        if tokens.is_empty() {
            return Err(DimError::Order("empty retained sequence".to_string()));
        }
        Ok(self
            .recompute_logits_at(tokens, &[tokens.len() - 1])?
            .pop()
            .expect("one slot requested"))
    }
}

fn rmsnorm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rotary position mixing per head, keyed on the absolute position.
fn rope_in_place(v: &mut [f32], num_heads: usize, head_dim: usize, position: u64) {
    let pos = position as f32;
    for head in 0..num_heads {
        let base = head * head_dim;
        for pair in 0..head_dim / 2 {
            let theta = 10_000f32.powf(-2.0 * pair as f32 / head_dim as f32);
            let angle = pos * theta;
            let (sin, cos) = angle.sin_cos();
            let i = base + 2 * pair;
            let (a, b) = (v[i], v[i + 1]);
            v[i] = a * cos - b * sin;
            v[i + 1] = a * sin + b * cos;
        }
    }
}
