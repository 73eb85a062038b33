//! Seeded synthetic corpora: planted key-value documents, filler haystacks,
//! and needle facts.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::trainer::TrainingExample;

const WORDS: &[&str] = &[
    "the", "a", "river", "stone", "house", "old", "green", "walks", "near", "under", "quiet", "road",
    "light", "window", "morning", "small", "garden", "bell", "tower", "over", "field", "slowly", "cold",
    "wind", "bright", "market", "bridge", "north", "south", "evening", "rain", "boat", "hill", "long",
    "wall", "door", "shadow", "sings", "sleeps", "waits", "turns", "crowd", "lamp", "path", "winter",
    "summer", "and", "with", "from", "into", "across", "beside", "dust", "cloud", "silver", "iron",
];

/// Cities used to train the random-needle variant.
pub const TRAIN_CITIES: &[&str] = &[
    "lisbon", "oslo", "lima", "cairo", "dublin", "quito", "hanoi", "perth", "tunis", "porto", "riga",
    "sofia", "accra", "kyoto", "delhi", "dakar", "milan", "bern", "turin", "minsk",
];

/// Held-out cities for evaluating the random-needle variant.
pub const EVAL_CITIES: &[&str] = &[
    "paris", "rome", "tokyo", "seoul", "vienna", "madrid", "prague", "athens", "havana", "nairobi",
];

const MAGIC_WORDS: &[&str] = &[
    "apple", "violet", "copper", "falcon", "maple", "harbor", "velvet", "ember", "meadow", "crystal",
    "tiger", "orbit", "canyon", "willow", "signal", "marble",
];

pub const FIXED_NEEDLE: &str =
    "Mary's favorite fashion designer was Coco Chanel when she was a teenager. ";
pub const FIXED_QUESTION: &str = "Who was Mary's favorite fashion designer when she was a teenager?";
pub const FIXED_ANSWER: &str = "Coco Chanel";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvFact {
    pub key: String,
    pub value: String,
}

impl KvFact {
    pub fn sentence(&self) -> String {
        format!("the code for {} is {}. ", self.key, self.value)
    }

    /// Completion prompt whose continuation is the value.
    pub fn prompt(&self) -> String {
        format!("the code for {} is ", self.key)
    }

    pub fn question(&self) -> String {
        format!("what is the code for {}?", self.key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub doc_id: String,
    pub group_id: String,
    pub text: String,
    pub facts: Vec<KvFact>,
}

impl SyntheticDoc {
    pub fn qa_examples(&self) -> Vec<TrainingExample> {
        self.facts
            .iter()
            .map(|f| TrainingExample {
                group_id: self.group_id.clone(),
                doc_id: self.doc_id.clone(),
                question: f.question(),
                answer: f.value.clone(),
            })
            .collect()
    }
}

/// Lowercase filler text of exactly `len` bytes.
pub fn filler<R: Rng>(rng: &mut R, len: usize) -> String {
    let mut s = String::with_capacity(len + 16);
    while s.len() < len {
        let n = rng.random_range(4..9);
        for i in 0..n {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(WORDS.choose(rng).expect("non-empty"));
        }
        s.push_str(". ");
    }
    s.truncate(len);
    s
}

/// Hands out distinct two-letter keys.
#[derive(Debug, Clone)]
pub struct KeyPool {
    keys: Vec<String>,
}

impl KeyPool {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut keys: Vec<String> = (b'a'..=b'z')
            .flat_map(|a| (b'a'..=b'z').map(move |b| String::from_utf8(vec![a, b]).expect("ascii")))
            .collect();
        keys.shuffle(rng);
        Self { keys }
    }

    pub fn next_fact<R: Rng>(&mut self, rng: &mut R) -> KvFact {
        let key = self.keys.pop().expect("key pool exhausted");
        KvFact {
            key,
            value: format!("{:03}", rng.random_range(0..1000)),
        }
    }
}

/// One chunk of exactly `len` bytes carrying `facts`, each placed whole at a
/// random offset among filler.
pub fn kv_chunk<R: Rng>(rng: &mut R, len: usize, facts: &[KvFact]) -> String {
    let fact_text: usize = facts.iter().map(|f| f.sentence().len()).sum();
    assert!(fact_text <= len, "facts do not fit in one chunk");
    let mut gaps: Vec<usize> = (0..=facts.len()).map(|_| rng.random_range(0..100)).collect();
    let total: usize = gaps.iter().sum::<usize>().max(1);
    let free = len - fact_text;
    for g in &mut gaps {
        *g = *g * free / total;
    }
    let assigned: usize = gaps.iter().sum();
    *gaps.last_mut().expect("non-empty") += free - assigned;
    let mut s = String::with_capacity(len);
    for (i, gap) in gaps.iter().enumerate() {
        s.push_str(&filler(rng, *gap));
        if let Some(f) = facts.get(i) {
            s.push_str(&f.sentence());
        }
    }
    debug_assert_eq!(s.len(), len);
    s
}

/// A document of `n_chunks` chunks with `facts_per_chunk` planted facts each.
pub fn kv_document<R: Rng>(
    rng: &mut R,
    keys: &mut KeyPool,
    doc_id: &str,
    group_id: &str,
    n_chunks: usize,
    facts_per_chunk: usize,
    chunk_length: usize,
) -> SyntheticDoc {
    let mut text = String::new();
    let mut facts = Vec::new();
    for _ in 0..n_chunks {
        let chunk_facts: Vec<KvFact> = (0..facts_per_chunk).map(|_| keys.next_fact(rng)).collect();
        text.push_str(&kv_chunk(rng, chunk_length, &chunk_facts));
        facts.extend(chunk_facts);
    }
    SyntheticDoc {
        doc_id: doc_id.to_string(),
        group_id: group_id.to_string(),
        text,
        facts,
    }
}

/// A group of key-value documents with globally distinct keys.
pub fn kv_group<R: Rng>(
    rng: &mut R,
    keys: &mut KeyPool,
    group_id: &str,
    n_docs: usize,
    n_chunks: usize,
    facts_per_chunk: usize,
    chunk_length: usize,
) -> Vec<SyntheticDoc> {
    (0..n_docs)
        .map(|i| {
            kv_document(
                rng,
                keys,
                &format!("{group_id}-doc{i:03}"),
                group_id,
                n_chunks,
                facts_per_chunk,
                chunk_length,
            )
        })
        .collect()
}

/// Needle fact with its question and gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Needle {
    pub text: String,
    pub question: String,
    pub answer: String,
}

impl Needle {
    pub fn fixed() -> Self {
        Self {
            text: FIXED_NEEDLE.to_string(),
            question: FIXED_QUESTION.to_string(),
            answer: FIXED_ANSWER.to_string(),
        }
    }

    pub fn city(city: &str, word: &str) -> Self {
        Self {
            text: format!("the special magic word for {city} is {word}. "),
            question: format!("What is the special magic word for {city}?"),
            answer: word.to_string(),
        }
    }

    pub fn random_city<R: Rng>(rng: &mut R, cities: &[&str]) -> Self {
        let city = cities.choose(rng).expect("non-empty city list");
        let word = MAGIC_WORDS.choose(rng).expect("non-empty");
        Self::city(city, word)
    }
}

/// Inserts `needle` at the token (byte) boundary nearest
/// `depth · len(haystack)`, returning the new text and the needle offset.
pub fn insert_needle(haystack: &str, needle: &str, depth: f64) -> (String, usize) {
    let depth = depth.clamp(0.0, 1.0);
    let mut at = (depth * haystack.len() as f64).round() as usize;
    while !haystack.is_char_boundary(at) {
        at -= 1;
    }
    let mut out = String::with_capacity(haystack.len() + needle.len());
    out.push_str(&haystack[..at]);
    out.push_str(needle);
    out.push_str(&haystack[at..]);
    (out, at)
}

/// Distinct keys across documents, for tests.
pub fn all_keys(docs: &[SyntheticDoc]) -> BTreeSet<String> {
    docs.iter().flat_map(|d| d.facts.iter().map(|f| f.key.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filler_has_exact_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [0, 1, 17, 120, 513] {
            assert_eq!(filler(&mut rng, len).len(), len);
        }
    }

    #[test]
    fn kv_documents_are_chunk_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut keys = KeyPool::new(&mut rng);
        let docs = kv_group(&mut rng, &mut keys, "g", 5, 3, 2, 120);
        for d in &docs {
            assert_eq!(d.text.len(), 360);
            assert_eq!(d.facts.len(), 6);
            for (i, f) in d.facts.iter().enumerate() {
                let chunk = &d.text[(i / 2) * 120..(i / 2 + 1) * 120];
                assert!(chunk.contains(&f.sentence()), "fact {i} not inside its chunk");
            }
        }
        assert_eq!(all_keys(&docs).len(), 30);
    }

    #[test]
    fn needle_lands_near_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hay = filler(&mut rng, 1000);
        let (text, at) = insert_needle(&hay, FIXED_NEEDLE, 0.0);
        assert_eq!(at, 0);
        assert!(text.starts_with(FIXED_NEEDLE));
        let (text, at) = insert_needle(&hay, FIXED_NEEDLE, 1.0);
        assert_eq!(at, hay.len());
        assert!(text.ends_with(FIXED_NEEDLE));
        let (_, at) = insert_needle(&hay, FIXED_NEEDLE, 0.5);
        assert_eq!(at, 500);
    }
}
