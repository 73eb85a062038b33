//! Byte-level tokenizer: every byte is its own token id.

use super::TokenId;

pub fn tokenize(text: &str) -> Vec<TokenId> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`tokenize_bytes`]. Ids above 255 are not produced by the
/// tokenizer and are dropped.
pub fn detokenize_bytes(tokens: &[TokenId]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

/// Lossy for generated byte sequences that are not valid UTF-8.
pub fn detokenize(tokens: &[TokenId]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(tokens)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_and_ascii() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("AB"), vec![65, 66]);
    }

    #[test]
    fn byte_round_trip_on_random_strings() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let len = rng.random_range(0..64);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let ids = tokenize_bytes(&bytes);
            assert!(ids.iter().all(|&t| t < 256));
            assert_eq!(detokenize_bytes(&ids), bytes);
        }
    }

    #[test]
    fn utf8_round_trip() {
        let s = "naïve café ☕";
        assert_eq!(detokenize(&tokenize(s)), s);
    }
}
