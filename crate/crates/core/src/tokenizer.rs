//! Deterministic text/token mappings shared by every backend.
//!
//! All strategies in one comparison share a tokenizer, so strategy orderings do
//! not depend on which one is chosen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    /// One token per whitespace-separated word. Ids are 32-bit FNV-1a hashes
    /// of the word, so the mapping is not invertible.
    #[default]
    Whitespace,
    /// One token per UTF-8 byte (vocabulary of 256).
    Byte,
}

impl Tokenizer {
    pub fn encode(self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(fnv1a).collect(),
            Tokenizer::Byte => text.bytes().map(u32::from).collect(),
        }
    }

    pub fn count(self, text: &str) -> usize {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count(),
            Tokenizer::Byte => text.len(),
        }
    }

    pub fn decode(self, tokens: &[u32]) -> Result<String> {
        match self {
            Tokenizer::Whitespace => Err(Error::Unsupported("whitespace detokenization")),
            Tokenizer::Byte => {
                let bytes = tokens
                    .iter()
                    .map(|&t| {
                        u8::try_from(t).map_err(|_| Error::TokenOutOfRange {
                            token: t,
                            vocab: 256,
                        })
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::Whitespace => "whitespace",
            Tokenizer::Byte => "byte",
        }
    }
}

impl std::str::FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "byte" => Ok(Tokenizer::Byte),
            other => Err(Error::Config(format!("unknown tokenizer {other:?}"))),
        }
    }
}

fn fnv1a(word: &str) -> u32 {
    let mut hash: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        hash ^= u32::from(b);
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_counts_words() {
        assert_eq!(Tokenizer::Whitespace.count("what is it"), 3);
        assert_eq!(Tokenizer::Whitespace.count("  "), 0);
        assert_eq!(Tokenizer::Whitespace.encode("The couch is blue.").len(), 4);
    }

    #[test]
    fn whitespace_ids_are_stable() {
        let a = Tokenizer::Whitespace.encode("couch couch");
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0], fnv1a("couch"));
    }

    #[test]
    fn whitespace_decode_is_unsupported() {
        assert!(Tokenizer::Whitespace.decode(&[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(s in ".*") {
            let t = Tokenizer::Byte;
            prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s.clone());
            prop_assert_eq!(t.count(&s), s.len());
        }

        #[test]
        fn count_matches_encode(s in ".*") {
            for t in [Tokenizer::Whitespace, Tokenizer::Byte] {
                prop_assert_eq!(t.count(&s), t.encode(&s).len());
            }
        }
    }
}
