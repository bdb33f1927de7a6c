//! Deterministic toy causal decoder.
//!
//! Pre-norm transformer blocks (RMSNorm, multi-head attention with optional
//! grouped kv heads, ReLU MLP of width `4 * hidden`) over random weights.
//! There is no positional encoding; order enters only through causality and
//! the raster positions stored in the cache.
//!
//! Weights come from `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha 0.3)
//! drawn in a fixed order with rand 0.8's uniform f32 sampler; see
//! [`PRNG_ALGORITHM`]. Decoding is greedy with smallest-id tie-break.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{default_scale, dot, scaled_logits, softmax_in_place, weighted_sum};
use crate::error::{Error, Result};
use crate::grid::{ConditionalBlock, GridSpec, VisualKvCache};
use crate::policy::{EvictionPolicy, EvictionReport};

/// Name of the weight generator, embedded in trace headers.
pub const PRNG_ALGORITHM: &str = "chacha8 (rand_chacha 0.3, seed_from_u64) + rand 0.8 uniform f32";

const MLP_MULT: usize = 4;
/// Extra gain on query/key projections so attention is not near-uniform.
const QK_GAIN: f32 = 2.0;
const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub cond_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            kv_heads: 4,
            head_dim: 32,
            vocab: 256,
            cond_len: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("dim", self.head_dim),
            ("vocab", self.vocab),
            ("cond_len", self.cond_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidModelConfig(format!("{name} must be >= 1")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidModelConfig(format!(
                "heads ({}) not divisible by kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Query heads per kv head.
    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// Randomly initialised weights for a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ModelConfig,
    /// `(vocab + 1) x hidden`; the extra row is the image-start token.
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    lm_head: Vec<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl ToyModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d_model = cfg.hidden();
        let d_kv = cfg.kv_heads * cfg.head_dim;
        let d_mlp = MLP_MULT * d_model;
        let fan = |n: usize| 1.0 / (n as f32).sqrt();
        let embed = uniform(&mut rng, (cfg.vocab + 1) * d_model, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: uniform(&mut rng, d_model * d_model, QK_GAIN * fan(d_model)),
                wk: uniform(&mut rng, d_kv * d_model, QK_GAIN * fan(d_model)),
                wv: uniform(&mut rng, d_kv * d_model, fan(d_model)),
                wo: uniform(&mut rng, d_model * d_model, fan(d_model)),
                w1: uniform(&mut rng, d_mlp * d_model, fan(d_model)),
                w2: uniform(&mut rng, d_model * d_mlp, fan(d_mlp)),
            })
            .collect();
        let lm_head = uniform(&mut rng, cfg.vocab * d_model, fan(d_model));
        Ok(Self {
            cfg,
            embed,
            layers,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn bos(&self) -> u32 {
        self.cfg.vocab as u32
    }

    fn embedding(&self, token: u32) -> &[f32] {
        let d = self.cfg.hidden();
        &self.embed[token as usize * d..(token as usize + 1) * d]
    }
}

/// Conditional token ids drawn from the run seed (separate stream from the
/// weights).
pub fn cond_tokens_for_seed(seed: u64, cond_len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..cond_len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

fn rms_norm(x: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

fn argmax_smallest_id(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Scratch buffers reused across steps.
#[derive(Debug, Clone)]
struct Scratch {
    norm: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    heads_out: Vec<f32>,
    proj: Vec<f32>,
    mlp: Vec<f32>,
    logits: Vec<f32>,
    weights: Vec<f32>,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        let d_model = cfg.hidden();
        let d_kv = cfg.kv_heads * cfg.head_dim;
        Self {
            norm: vec![0.0; d_model],
            q: vec![0.0; d_model],
            k: vec![0.0; d_kv],
            v: vec![0.0; d_kv],
            heads_out: vec![0.0; d_model],
            proj: vec![0.0; d_model],
            mlp: vec![0.0; MLP_MULT * d_model],
            logits: vec![0.0; cfg.vocab],
            weights: Vec::new(),
        }
    }
}

/// MLP half of a block: `h += W2 relu(W1 norm(h))`.
fn mlp_residual(layer: &LayerWeights, h: &mut [f32], s: &mut Scratch) {
    rms_norm(h, &mut s.norm);
    matvec(&layer.w1, &s.norm, &mut s.mlp);
    for x in &mut s.mlp {
        *x = x.max(0.0);
    }
    matvec(&layer.w2, &s.mlp, &mut s.proj);
    for (a, b) in h.iter_mut().zip(&s.proj) {
        *a += b;
    }
}

/// Attention weights of one decode step, recorded when tracing is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    /// Raster positions of the visual keys, per `(layer, kv-head)`.
    pub key_positions: Vec<Vec<usize>>,
    /// Weights over `[conditional, visual]` per `(layer, query head)`.
    pub weights: Vec<Vec<f32>>,
}

/// One decode step as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub position: usize,
    /// 1-based raster line of `position`.
    pub line: usize,
    pub token: u32,
    /// Visual entries attended per `(layer, kv-head)` (after this step's
    /// append, before any line-end compression).
    pub visual_lens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evictions: Vec<EvictionReport>,
    /// Visual entries per head after the line-end hook, when it evicted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_compress_lens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ns: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<StepAttention>,
}

/// Live decoding state for one stream.
#[derive(Debug, Clone)]
pub struct DecodeState<'m> {
    model: &'m ToyModel,
    spec: GridSpec,
    cache: VisualKvCache,
    policy: EvictionPolicy,
    position: usize,
    tokens: Vec<u32>,
    hidden: Vec<f32>,
    record_attention: bool,
    scratch: Scratch,
}

/// Runs the conditional prefix through the model and stores its K/V.
pub fn prefill<'m>(
    model: &'m ToyModel,
    cond_tokens: &[u32],
    spec: GridSpec,
    policy: EvictionPolicy,
    record_attention: bool,
) -> Result<DecodeState<'m>> {
    if cond_tokens.is_empty() {
        return Err(Error::EmptyCondition);
    }
    let cfg = model.cfg;
    if let Some(&t) = cond_tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::InvalidModelConfig(format!("condition token {t} outside vocab")));
    }
    let d = cfg.head_dim;
    let group = cfg.group();
    let scale = default_scale(d);
    let mut s = Scratch::new(&cfg);
    let mut blocks = vec![ConditionalBlock::default(); cfg.layers * cfg.kv_heads];
    let mut hidden = Vec::new();
    for (t, &tok) in cond_tokens.iter().enumerate() {
        let mut h = model.embedding(tok).to_vec();
        for (li, layer) in model.layers.iter().enumerate() {
            rms_norm(&h, &mut s.norm);
            matvec(&layer.wq, &s.norm, &mut s.q);
            matvec(&layer.wk, &s.norm, &mut s.k);
            matvec(&layer.wv, &s.norm, &mut s.v);
            for kvh in 0..cfg.kv_heads {
                let b = &mut blocks[li * cfg.kv_heads + kvh];
                b.keys.extend_from_slice(&s.k[kvh * d..(kvh + 1) * d]);
                b.values.extend_from_slice(&s.v[kvh * d..(kvh + 1) * d]);
            }
            s.heads_out.fill(0.0);
            for qh in 0..cfg.heads {
                let b = &blocks[li * cfg.kv_heads + qh / group];
                s.weights.resize(t + 1, 0.0);
                scaled_logits(&s.q[qh * d..(qh + 1) * d], &b.keys, d, scale, &mut s.weights);
                softmax_in_place(&mut s.weights);
                weighted_sum(&s.weights, &b.values, d, &mut s.heads_out[qh * d..(qh + 1) * d]);
            }
            matvec(&layer.wo, &s.heads_out, &mut s.proj);
            for (a, b) in h.iter_mut().zip(&s.proj) {
                *a += b;
            }
            mlp_residual(layer, &mut h, &mut s);
        }
        hidden = h;
    }
    let cache = VisualKvCache::with_conditional(cfg.layers, cfg.kv_heads, d, blocks)?;
    Ok(DecodeState {
        model,
        spec,
        cache,
        policy,
        position: 0,
        tokens: Vec::with_capacity(spec.n()),
        hidden,
        record_attention,
        scratch: s,
    })
}

impl DecodeState<'_> {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn cache(&self) -> &VisualKvCache {
        &self.cache
    }

    pub fn policy(&self) -> &EvictionPolicy {
        &self.policy
    }

    /// Residual stream after the most recent step (pre final norm).
    pub fn hidden(&self) -> &[f32] {
        &self.hidden
    }

    pub fn is_complete(&self) -> bool {
        self.position >= self.spec.n()
    }

    pub fn decode_step(&mut self) -> Result<u32> {
        Ok(self.step_recorded()?.token)
    }

    /// One decode step plus the line-end hook when the step closes a line.
    pub fn step_recorded(&mut self) -> Result<StepRecord> {
        if self.is_complete() {
            return Err(Error::GenerationComplete);
        }
        let model = self.model;
        let cfg = model.cfg;
        let (d, group, cond) = (cfg.head_dim, cfg.group(), self.cache.cond_len());
        let scale = default_scale(d);
        let pos = self.position;
        let input = if pos == 0 { model.bos() } else { self.tokens[pos - 1] };
        let mut h = model.embedding(input).to_vec();
        let s = &mut self.scratch;
        let mut attention = self.record_attention.then(|| StepAttention {
            key_positions: Vec::with_capacity(cfg.layers * cfg.kv_heads),
            weights: Vec::with_capacity(cfg.layers * cfg.heads),
        });

        for (li, layer) in model.layers.iter().enumerate() {
            rms_norm(&h, &mut s.norm);
            matvec(&layer.wq, &s.norm, &mut s.q);
            matvec(&layer.wk, &s.norm, &mut s.k);
            matvec(&layer.wv, &s.norm, &mut s.v);
            for kvh in 0..cfg.kv_heads {
                let r = kvh * d..(kvh + 1) * d;
                self.cache.append_token(li, kvh, &s.k[r.clone()], &s.v[r], pos)?;
                self.policy.on_append(li, kvh);
                if let Some(a) = &mut attention {
                    a.key_positions.push(self.cache.head(li, kvh).positions().to_vec());
                }
            }
            s.heads_out.fill(0.0);
            for qh in 0..cfg.heads {
                let kvh = qh / group;
                let q = &s.q[qh * d..(qh + 1) * d];
                let cb = self.cache.conditional(li, kvh);
                let store = self.cache.head(li, kvh);
                s.weights.resize(cond + store.len(), 0.0);
                let (wc, wv) = s.weights.split_at_mut(cond);
                scaled_logits(q, &cb.keys, d, scale, wc);
                scaled_logits(q, store.keys(), d, scale, wv);
                self.policy.observe_query(li, kvh, q, wv);
                softmax_in_place(&mut s.weights);
                let out = &mut s.heads_out[qh * d..(qh + 1) * d];
                weighted_sum(&s.weights[..cond], &cb.values, d, out);
                weighted_sum(&s.weights[cond..], store.values(), d, out);
                self.policy.observe_attention(li, kvh, &s.weights[cond..]);
                if let Some(a) = &mut attention {
                    a.weights.push(s.weights.clone());
                }
            }
            matvec(&layer.wo, &s.heads_out, &mut s.proj);
            for (a, b) in h.iter_mut().zip(&s.proj) {
                *a += b;
            }
            mlp_residual(layer, &mut h, s);
        }

        rms_norm(&h, &mut s.norm);
        matvec(&model.lm_head, &s.norm, &mut s.logits);
        if s.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let token = argmax_smallest_id(&s.logits);
        self.hidden = h;
        self.tokens.push(token);
        self.position += 1;

        let visual_lens = self.cache.visual_lens();
        let w = self.spec.w;
        let mut evictions = Vec::new();
        let mut post_compress_lens = None;
        if self.position.is_multiple_of(w) {
            let line = self.position / w;
            evictions = self.policy.end_of_line(&mut self.cache, line)?;
            if !evictions.is_empty() {
                post_compress_lens = Some(self.cache.visual_lens());
            }
        }
        Ok(StepRecord {
            step: pos,
            position: pos,
            line: pos / w + 1,
            token,
            visual_lens,
            evictions,
            post_compress_lens,
            step_ns: None,
            attention,
        })
    }
}

/// Output of a full generation.
#[derive(Debug, Clone)]
pub struct Generation {
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<u32>,
    pub final_hidden: Vec<f32>,
}

/// Prefill plus `N` decode steps, timing each step with a monotonic clock
/// when `record_timings` is set.
pub fn generate(
    model: &ToyModel,
    cond_tokens: &[u32],
    spec: GridSpec,
    policy: EvictionPolicy,
    record_attention: bool,
    record_timings: bool,
) -> Result<Generation> {
    let mut state = prefill(model, cond_tokens, spec, policy, record_attention)?;
    let mut steps = Vec::with_capacity(spec.n());
    while !state.is_complete() {
        let start = record_timings.then(Instant::now);
        let mut rec = state.step_recorded()?;
        rec.step_ns = start.map(|t| t.elapsed().as_nanos() as u64);
        steps.push(rec);
    }
    Ok(Generation {
        steps,
        tokens: state.tokens,
        final_hidden: state.hidden,
    })
}

/// Cache-free reference: every step re-runs the whole causal sequence
/// (conditional prefix, image-start token, all emitted tokens) from scratch.
/// Returns the tokens and the final residual stream.
pub fn reference_generate(model: &ToyModel, cond_tokens: &[u32], n: usize) -> Result<(Vec<u32>, Vec<f32>)> {
    if cond_tokens.is_empty() {
        return Err(Error::EmptyCondition);
    }
    let cfg = model.cfg;
    let (d, group) = (cfg.head_dim, cfg.group());
    let scale = default_scale(d);
    let mut s = Scratch::new(&cfg);
    let mut tokens: Vec<u32> = Vec::with_capacity(n);
    let mut last_hidden = Vec::new();
    for _ in 0..n {
        let mut inputs: Vec<u32> = cond_tokens.to_vec();
        inputs.push(model.bos());
        inputs.extend_from_slice(&tokens);
        // hidden state of every sequence position, advanced layer by layer
        let mut hs: Vec<Vec<f32>> = inputs.iter().map(|&t| model.embedding(t).to_vec()).collect();
        for layer in &model.layers {
            let mut qs = Vec::with_capacity(hs.len());
            let mut ks = Vec::with_capacity(hs.len());
            let mut vs = Vec::with_capacity(hs.len());
            for h in &hs {
                rms_norm(h, &mut s.norm);
                matvec(&layer.wq, &s.norm, &mut s.q);
                matvec(&layer.wk, &s.norm, &mut s.k);
                matvec(&layer.wv, &s.norm, &mut s.v);
                qs.push(s.q.clone());
                ks.push(s.k.clone());
                vs.push(s.v.clone());
            }
            for (t, h) in hs.iter_mut().enumerate() {
                s.heads_out.fill(0.0);
                for qh in 0..cfg.heads {
                    let kvh = qh / group;
                    let q = &qs[t][qh * d..(qh + 1) * d];
                    let mut logits: Vec<f32> = (0..=t)
                        .map(|j| dot(q, &ks[j][kvh * d..(kvh + 1) * d]) * scale)
                        .collect();
                    softmax_in_place(&mut logits);
                    let out = &mut s.heads_out[qh * d..(qh + 1) * d];
                    for (j, &wgt) in logits.iter().enumerate() {
                        for (o, x) in out.iter_mut().zip(&vs[j][kvh * d..(kvh + 1) * d]) {
                            *o += wgt * x;
                        }
                    }
                }
                matvec(&layer.wo, &s.heads_out, &mut s.proj);
                for (a, b) in h.iter_mut().zip(&s.proj) {
                    *a += b;
                }
                mlp_residual(layer, h, &mut s);
            }
        }
        let h = hs.pop().expect("non-empty sequence");
        rms_norm(&h, &mut s.norm);
        matvec(&model.lm_head, &s.norm, &mut s.logits);
        tokens.push(argmax_smallest_id(&s.logits));
        last_hidden = h;
    }
    Ok((tokens, last_hidden))
}
