//! Byte-level vocabulary: 256 byte tokens plus BOS and EOS.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

/// Token ids are `u32`; byte tokens occupy `0..256`.
pub type TokenSequence = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { size: VOCAB_SIZE, bos_id: BOS, eos_id: EOS }
    }
}

/// One token per byte. No framing tokens are inserted.
pub fn encode(text: &[u8]) -> TokenSequence {
    text.iter().map(|&b| u32::from(b)).collect()
}

pub fn decode(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .enumerate()
        .map(|(position, &id)| u8::try_from(id).map_err(|_| Error::InvalidToken { position, id }))
        .collect()
}

/// Strip a trailing EOS (and anything after the first EOS) before decoding.
pub fn decode_continuation(tokens: &[u32]) -> Result<Vec<u8>> {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    decode(&tokens[..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode(b"ab"), vec![97, 98]);
        assert!(encode(b"").is_empty());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[104, 105]).unwrap(), b"hi");
        assert!(decode(&[]).unwrap().is_empty());
        match decode(&[104, 256]) {
            Err(Error::InvalidToken { position: 1, id: 256 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn specials_outside_byte_range() {
        let v = Vocabulary::default();
        assert_ne!(v.bos_id, v.eos_id);
        assert!(v.bos_id >= 256 && v.eos_id >= 256);
        assert!((v.bos_id as usize) < v.size && (v.eos_id as usize) < v.size);
    }

    #[test]
    fn round_trip_thousand_random_strings() {
        let mut rng = crate::seed::rng(11);
        for _ in 0..1000 {
            use rand::Rng;
            let len = rng.random_range(0..64);
            let s: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            assert_eq!(decode(&encode(&s)).unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn byte_mapping_is_bijective(s in proptest::collection::vec(any::<u8>(), 0..128)) {
            let toks = encode(&s);
            prop_assert_eq!(toks.len(), s.len());
            prop_assert!(toks.iter().all(|&t| t < 256));
            prop_assert_eq!(decode(&toks).unwrap(), s);
        }
    }
}
