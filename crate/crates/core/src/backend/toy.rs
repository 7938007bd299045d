//! A tiny seeded decoder-only transformer.
//!
//! Pre-norm blocks (RMS norm without gain), multi-head causal attention and a
//! GELU MLP, byte-level vocabulary. Attention visits cached keys in cache
//! order and then the new tokens, so any chunking of the same token stream
//! performs the same floating point operations in the same order.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{Capabilities, DecodeOutcome, DecodeRequest, ModelBackend, PrefillOutcome, SegmentSpec};
use crate::cache::{KvCache, LayerKv, Segment};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionEncoding {
    #[default]
    Rotary,
    AbsoluteSinusoidal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub vocab: usize,
    pub max_position: u32,
    pub seed: u64,
    pub position_encoding: PositionEncoding,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            vocab: 256,
            max_position: 4096,
            seed: 42,
            position_encoding: PositionEncoding::Rotary,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("layers, heads and model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if (self.model_dim / self.heads) % 2 != 0 {
            return Err(Error::Config("head dimension must be even".into()));
        }
        if self.vocab < 256 {
            return Err(Error::Config(format!("vocab {} is below 256", self.vocab)));
        }
        if self.max_position == 0 {
            return Err(Error::Config("max_position must be positive".into()));
        }
        Ok(())
    }

    /// Parses a plain key-value (TOML) document; absent keys keep defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    fn ff_dim(&self) -> usize {
        self.model_dim * 4
    }
}

struct Block {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// Numeric backend over a randomly initialized transformer.
pub struct ToyBackend {
    config: ToyTransformerConfig,
    embed: Vec<f32>,
    blocks: Vec<Block>,
    lm_head: Vec<f32>,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Vec<f32> {
    (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl ToyBackend {
    pub fn new(config: ToyTransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let ff = config.ff_dim();
        let embed = init(&mut rng, config.vocab, d, 1.0);
        let blocks = (0..config.layers)
            .map(|_| {
                let s = 1.0 / (d as f32).sqrt();
                Block {
                    wq: init(&mut rng, d, d, s),
                    wk: init(&mut rng, d, d, s),
                    wv: init(&mut rng, d, d, s),
                    wo: init(&mut rng, d, d, s),
                    w1: init(&mut rng, ff, d, s),
                    w2: init(&mut rng, d, ff, 1.0 / (ff as f32).sqrt()),
                }
            })
            .collect();
        let lm_head = init(&mut rng, config.vocab, d, 1.0 / (d as f32).sqrt());
        Ok(Self {
            config,
            embed,
            blocks,
            lm_head,
        })
    }

    pub fn config(&self) -> &ToyTransformerConfig {
        &self.config
    }

    /// Runs `tokens` at `positions` on top of `context` (per-layer key/value
    /// chunks in cache order). Returns the new per-layer kv blocks and the
    /// logits after the last token.
    fn forward(
        &self,
        context: &[Vec<(&[f32], &[f32])>],
        tokens: &[u32],
        positions: &[u32],
    ) -> Result<(Vec<LayerKv>, Vec<f32>)> {
        let d = self.config.model_dim;
        let hd = self.config.head_dim();
        let n = tokens.len();
        debug_assert!(n > 0);

        let mut xs: Vec<Vec<f32>> = Vec::with_capacity(n);
        for (&tok, &pos) in tokens.iter().zip(positions) {
            let t = tok as usize;
            if t >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    vocab: self.config.vocab,
                });
            }
            let mut x = self.embed[t * d..(t + 1) * d].to_vec();
            if self.config.position_encoding == PositionEncoding::AbsoluteSinusoidal {
                add_sinusoidal(&mut x, pos);
            }
            xs.push(x);
        }

        let scale = 1.0 / (hd as f32).sqrt();
        let mut new_kv = Vec::with_capacity(self.blocks.len());
        let mut h = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        let mut attn = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut hidden = vec![0.0f32; self.config.ff_dim()];
        let mut scores: Vec<f32> = Vec::new();

        for (layer, block) in self.blocks.iter().enumerate() {
            let mut kv = LayerKv::with_capacity(n * d);
            let chunks = &context[layer];
            for (i, x) in xs.iter_mut().enumerate() {
                rms_norm(x, &mut h);
                matvec(&block.wq, &h, &mut q);
                matvec(&block.wk, &h, &mut k);
                matvec(&block.wv, &h, &mut v);
                if self.config.position_encoding == PositionEncoding::Rotary {
                    rotate(&mut q, positions[i], hd);
                    rotate(&mut k, positions[i], hd);
                }
                kv.keys.extend_from_slice(&k);
                kv.values.extend_from_slice(&v);

                for head in 0..self.config.heads {
                    let off = head * hd;
                    let qh = &q[off..off + hd];
                    scores.clear();
                    for (keys, _) in chunks.iter() {
                        for row in keys.chunks_exact(d) {
                            scores.push(dot(qh, &row[off..off + hd]) * scale);
                        }
                    }
                    for row in kv.keys.chunks_exact(d) {
                        scores.push(dot(qh, &row[off..off + hd]) * scale);
                    }
                    softmax(&mut scores);
                    let out = &mut attn[off..off + hd];
                    out.iter_mut().for_each(|o| *o = 0.0);
                    let mut idx = 0;
                    for (_, values) in chunks.iter() {
                        for row in values.chunks_exact(d) {
                            axpy(scores[idx], &row[off..off + hd], out);
                            idx += 1;
                        }
                    }
                    for row in kv.values.chunks_exact(d) {
                        axpy(scores[idx], &row[off..off + hd], out);
                        idx += 1;
                    }
                }
                matvec(&block.wo, &attn, &mut proj);
                x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

                rms_norm(x, &mut h);
                matvec(&block.w1, &h, &mut hidden);
                hidden.iter_mut().for_each(|u| *u = gelu(*u));
                matvec(&block.w2, &hidden, &mut proj);
                x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            }
            new_kv.push(kv);
        }

        let last = xs.last().expect("non-empty");
        rms_norm(last, &mut h);
        let mut logits = vec![0.0f32; self.config.vocab];
        matvec(&self.lm_head, &h, &mut logits);
        Ok((new_kv, logits))
    }

    fn context_of<'a>(&self, cache: &'a KvCache) -> Result<Vec<Vec<(&'a [f32], &'a [f32])>>> {
        let mut ctx = vec![Vec::with_capacity(cache.segments().len()); self.config.layers];
        for seg in cache.segments() {
            let layers = seg
                .kv()
                .ok_or_else(|| Error::Precondition("cache segment lacks numeric kv".into()))?;
            if layers.len() != self.config.layers {
                return Err(Error::Precondition(format!(
                    "cache has {} kv layers, model has {}",
                    layers.len(),
                    self.config.layers
                )));
            }
            for (slot, layer) in ctx.iter_mut().zip(layers) {
                slot.push((layer.keys.as_slice(), layer.values.as_slice()));
            }
        }
        Ok(ctx)
    }

    fn positions_from(&self, start: u32, n: usize) -> Result<Vec<u32>> {
        let end = start as u64 + n as u64;
        if end > self.config.max_position as u64 {
            return Err(Error::PositionOverflow {
                position: (end - 1).min(u32::MAX as u64) as u32,
                max: self.config.max_position,
            });
        }
        Ok((start..start + n as u32).collect())
    }

    /// Next-token logits for `tokens` appended to `cache`, without changing it.
    pub fn logits_after(&self, cache: &KvCache, tokens: &[u32]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return cache
                .tail_logits()
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::Precondition("no logits for an empty cache".into()));
        }
        let ctx = self.context_of(cache)?;
        let positions = self.positions_from(cache.next_position(), tokens.len())?;
        Ok(self.forward(&ctx, tokens, &positions)?.1)
    }
}

impl ModelBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn tokenizer(&self) -> Tokenizer {
        Tokenizer::Byte
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_fork: true,
            supports_suffix_evict: true,
            numeric_kv: true,
        }
    }

    fn prefill(&self, cache: &mut KvCache, segment: SegmentSpec) -> Result<PrefillOutcome> {
        let n = segment.tokens.len();
        if n == 0 {
            return Ok(PrefillOutcome { tokens: 0 });
        }
        let positions = self.positions_from(cache.next_position(), n)?;
        let (kv, logits) = {
            let ctx = self.context_of(cache)?;
            self.forward(&ctx, &segment.tokens, &positions)?
        };
        let seg = Segment::new(
            segment.role,
            segment.turn,
            segment.tokens,
            positions,
            Some(kv),
            Some(logits),
        )?;
        cache.push(Arc::new(seg))?;
        Ok(PrefillOutcome { tokens: n })
    }

    fn decode(&self, cache: &mut KvCache, request: &DecodeRequest<'_>) -> Result<DecodeOutcome> {
        if request.max_tokens == 0 {
            return Ok(DecodeOutcome {
                tokens: Vec::new(),
                text: String::new(),
            });
        }
        if cache.is_empty() {
            return Err(Error::Precondition("decode on an empty cache".into()));
        }

        if let Some(text) = request.scripted {
            // teacher-forced: the scripted text is consumed as generated tokens
            let mut tokens = Tokenizer::Byte.encode(text);
            tokens.truncate(request.max_tokens);
            if tokens.is_empty() {
                return Ok(DecodeOutcome {
                    tokens,
                    text: String::new(),
                });
            }
            let spec = SegmentSpec::new(request.role, request.turn, tokens.clone());
            self.prefill(cache, spec)?;
            let text = Tokenizer::Byte.decode(&tokens)?;
            return Ok(DecodeOutcome { tokens, text });
        }

        let mut logits = cache
            .tail_logits()
            .ok_or_else(|| Error::Precondition("cache carries no next-token logits".into()))?
            .to_vec();
        let d = self.config.model_dim;
        let start = cache.next_position();
        let mut tokens = Vec::new();
        let mut pending: Vec<LayerKv> = (0..self.config.layers).map(|_| LayerKv::with_capacity(d)).collect();
        while tokens.len() < request.max_tokens {
            let next = argmax(&logits) as u32;
            if request.stop_tokens.contains(&next) {
                break;
            }
            let pos = self.positions_from(start + tokens.len() as u32, 1)?;
            let (kv, next_logits) = {
                let mut ctx = self.context_of(cache)?;
                for (slot, layer) in ctx.iter_mut().zip(&pending) {
                    if !layer.keys.is_empty() {
                        slot.push((layer.keys.as_slice(), layer.values.as_slice()));
                    }
                }
                self.forward(&ctx, &[next], &pos)?
            };
            for (acc, new) in pending.iter_mut().zip(kv) {
                acc.keys.extend_from_slice(&new.keys);
                acc.values.extend_from_slice(&new.values);
            }
            tokens.push(next);
            logits = next_logits;
        }
        if tokens.is_empty() {
            return Ok(DecodeOutcome {
                tokens,
                text: String::new(),
            });
        }
        let positions = (start..start + tokens.len() as u32).collect();
        let seg = Segment::new(
            request.role,
            request.turn,
            tokens.clone(),
            positions,
            Some(pending),
            Some(logits),
        )?;
        cache.push(Arc::new(seg))?;
        let text = Tokenizer::Byte.decode(&tokens)?;
        Ok(DecodeOutcome { tokens, text })
    }
}

fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn rms_norm(x: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    out.iter_mut().zip(x).for_each(|(o, v)| *o = v * inv);
}

fn softmax(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rotates consecutive pairs of every head by position-dependent angles.
fn rotate(x: &mut [f32], pos: u32, head_dim: usize) {
    for head in x.chunks_exact_mut(head_dim) {
        for j in 0..head_dim / 2 {
            let freq = 10000f32.powf(-2.0 * j as f32 / head_dim as f32);
            let (sin, cos) = (pos as f32 * freq).sin_cos();
            let (a, b) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = a * cos - b * sin;
            head[2 * j + 1] = a * sin + b * cos;
        }
    }
}

fn add_sinusoidal(x: &mut [f32], pos: u32) {
    let d = x.len();
    for i in 0..d / 2 {
        let freq = 10000f32.powf(-2.0 * i as f32 / d as f32);
        let (sin, cos) = (pos as f32 * freq).sin_cos();
        x[2 * i] += sin;
        x[2 * i + 1] += cos;
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::DecodeStage;
    use crate::cache::SegmentRole;

    fn backend() -> ToyBackend {
        ToyBackend::new(ToyTransformerConfig::default()).unwrap()
    }

    fn max_abs(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let bad = ToyTransformerConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let small_vocab = ToyTransformerConfig {
            vocab: 100,
            ..Default::default()
        };
        assert!(small_vocab.validate().is_err());
    }

    #[test]
    fn config_parses_key_value_file() {
        let cfg = ToyTransformerConfig::from_toml_str(
            "layers = 1\nheads = 2\nmodel_dim = 16\nseed = 7\nposition_encoding = \"absolute-sinusoidal\"\n",
        )
        .unwrap();
        assert_eq!(cfg.layers, 1);
        assert_eq!(cfg.max_position, 4096);
        assert_eq!(cfg.position_encoding, PositionEncoding::AbsoluteSinusoidal);
        assert!(ToyTransformerConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn chunked_prefill_matches_single_shot() {
        let b = backend();
        let tokens: Vec<u32> = "the quick brown".bytes().map(u32::from).collect();
        assert_eq!(tokens.len(), 15);

        let mut whole = KvCache::new();
        b.prefill(&mut whole, SegmentSpec::new(SegmentRole::TurnQuery, 1, tokens.clone()))
            .unwrap();

        let mut chunked = KvCache::new();
        b.prefill(&mut chunked, SegmentSpec::new(SegmentRole::TurnQuery, 1, tokens[..10].to_vec()))
            .unwrap();
        b.prefill(&mut chunked, SegmentSpec::new(SegmentRole::TurnQuery, 1, tokens[10..].to_vec()))
            .unwrap();

        assert!(max_abs(whole.tail_logits().unwrap(), chunked.tail_logits().unwrap()) <= 1e-5);
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let run = || {
            let b = backend();
            let mut c = KvCache::new();
            b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, "hello there").unwrap();
            let req = DecodeRequest::new(SegmentRole::MainAnswer, 1, DecodeStage::Answer).max_tokens(8);
            b.decode(&mut c, &req).unwrap().tokens
        };
        let a = run();
        assert_eq!(a.len(), 8);
        assert_eq!(a, run());
    }

    #[test]
    fn greedy_decode_matches_incremental_prefill() {
        let b = backend();
        let mut c = KvCache::new();
        b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, "abc").unwrap();
        let base = c.clone();
        let req = DecodeRequest::new(SegmentRole::MainAnswer, 1, DecodeStage::Answer).max_tokens(5);
        let out = b.decode(&mut c, &req).unwrap();

        let mut replay = base;
        b.prefill(&mut replay, SegmentSpec::new(SegmentRole::MainAnswer, 1, out.tokens))
            .unwrap();
        assert!(max_abs(c.tail_logits().unwrap(), replay.tail_logits().unwrap()) <= 1e-5);
    }

    #[test]
    fn decode_zero_is_noop() {
        let b = backend();
        let mut c = KvCache::new();
        b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, "abc").unwrap();
        let fp = c.fingerprint();
        let req = DecodeRequest::new(SegmentRole::MainAnswer, 1, DecodeStage::Answer).max_tokens(0);
        assert!(b.decode(&mut c, &req).unwrap().tokens.is_empty());
        assert_eq!(c.fingerprint(), fp);
    }

    #[test]
    fn position_overflow_is_reported() {
        let b = ToyBackend::new(ToyTransformerConfig {
            max_position: 4,
            ..Default::default()
        })
        .unwrap();
        let mut c = KvCache::new();
        let err = b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, "hello").unwrap_err();
        assert!(matches!(err, Error::PositionOverflow { position: 4, max: 4 }));
    }

    #[test]
    fn fork_is_bit_equal() {
        let b = backend();
        let mut c = KvCache::new();
        b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, "fork me").unwrap();
        let f = b.fork(&c).unwrap();
        for (x, y) in c.segments().iter().zip(f.segments()) {
            let (kx, ky) = (x.kv().unwrap(), y.kv().unwrap());
            for (lx, ly) in kx.iter().zip(ky) {
                assert!(lx.keys.iter().zip(&ly.keys).all(|(a, b)| a.to_bits() == b.to_bits()));
                assert!(lx.values.iter().zip(&ly.values).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn seeds_change_weights() {
        let a = ToyBackend::new(ToyTransformerConfig::default()).unwrap();
        let b = ToyBackend::new(ToyTransformerConfig {
            seed: 43,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.embed[..8], b.embed[..8]);
        let a2 = ToyBackend::new(ToyTransformerConfig::default()).unwrap();
        assert_eq!(a.embed, a2.embed);
        assert_eq!(a.lm_head, a2.lm_head);
    }

    #[test]
    fn sinusoidal_variant_runs() {
        let b = ToyBackend::new(ToyTransformerConfig {
            position_encoding: PositionEncoding::AbsoluteSinusoidal,
            ..Default::default()
        })
        .unwrap();
        let mut c = KvCache::new();
        b.prefill_text(&mut c, SegmentRole::TurnQuery, 1, "abc").unwrap();
        assert_eq!(c.tail_logits().unwrap().len(), 256);
    }
}
