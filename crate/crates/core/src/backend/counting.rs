use std::sync::Arc;

use crate::backend::{Capabilities, DecodeOutcome, DecodeRequest, ModelBackend, PrefillOutcome, SegmentSpec};
use crate::cache::{KvCache, Segment};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Backend that stores no numeric state and emits only scripted text.
///
/// Used for exact token accounting: every prefill costs precisely the number
/// of tokens handed to it.
#[derive(Debug, Clone, Copy, Default)]
pub struct CountingBackend {
    tokenizer: Tokenizer,
}

impl CountingBackend {
    pub fn new(tokenizer: Tokenizer) -> Self {
        Self { tokenizer }
    }
}

impl ModelBackend for CountingBackend {
    fn name(&self) -> &str {
        "counting"
    }

    fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_fork: true,
            supports_suffix_evict: true,
            numeric_kv: false,
        }
    }

    fn prefill(&self, cache: &mut KvCache, segment: SegmentSpec) -> Result<PrefillOutcome> {
        let n = segment.tokens.len();
        if n == 0 {
            return Ok(PrefillOutcome { tokens: 0 });
        }
        let start = cache.next_position();
        let positions = (start..start + n as u32).collect();
        let seg = Segment::new(segment.role, segment.turn, segment.tokens, positions, None, None)?;
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
        let text = request.scripted.ok_or_else(|| Error::Scripting {
            turn: request.turn,
            stage: request.stage.to_string(),
        })?;
        let mut tokens = self.tokenizer.encode(text);
        let text = if tokens.len() > request.max_tokens {
            tokens.truncate(request.max_tokens);
            match self.tokenizer {
                Tokenizer::Whitespace => text
                    .split_whitespace()
                    .take(request.max_tokens)
                    .collect::<Vec<_>>()
                    .join(" "),
                Tokenizer::Byte => self.tokenizer.decode(&tokens)?,
            }
        } else {
            text.to_string()
        };
        let start = cache.next_position();
        let positions = (start..start + tokens.len() as u32).collect();
        let seg = Segment::new(request.role, request.turn, tokens.clone(), positions, None, None)?;
        cache.push(Arc::new(seg))?;
        Ok(DecodeOutcome { tokens, text })
    }
}
