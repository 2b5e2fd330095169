//! Deterministic stand-in for a model backend.
//!
//! Output depends only on `(turn_id, model_id, seed)` through SHA-256, so it
//! never changes across platforms or dependency upgrades.

use sha2::{Digest, Sha256};

use super::{ModelAnnotation, RankedEmotion, K_MAX};

const VOCABULARY: &[&str] = &[
    "neutral",
    "confusion",
    "curiosity",
    "frustration",
    "interest",
    "satisfaction",
    "determination",
    "anxiety",
    "relief",
    "boredom",
    "joy",
    "surprise",
];

struct HashStream {
    material: Vec<u8>,
    block: [u8; 32],
    counter: u64,
    pos: usize,
}

impl HashStream {
    fn new(turn_id: &str, model_id: &str, seed: u64) -> Self {
        let mut material = Vec::new();
        for part in [turn_id.as_bytes(), model_id.as_bytes()] {
            material.extend_from_slice(&(part.len() as u64).to_le_bytes());
            material.extend_from_slice(part);
        }
        material.extend_from_slice(&seed.to_le_bytes());
        HashStream {
            material,
            block: [0; 32],
            counter: 0,
            pos: 32,
        }
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos == self.block.len() {
            let mut h = Sha256::new();
            h.update(&self.material);
            h.update(self.counter.to_le_bytes());
            self.block.copy_from_slice(&h.finalize());
            self.counter += 1;
            self.pos = 0;
        }
        let b = self.block[self.pos];
        self.pos += 1;
        b
    }

    /// Uniform in `0..n` by rejection sampling.
    fn below(&mut self, n: u8) -> u8 {
        let limit = 256 - (256 % u16::from(n));
        loop {
            let b = u16::from(self.next_byte());
            if b < limit {
                return (b % u16::from(n)) as u8;
            }
        }
    }
}

/// Deterministic ranked annotation with 1..=5 distinct labels and scores in
/// [1, 9].
pub fn mock_annotate(turn_id: &str, model_id: &str, seed: u64) -> ModelAnnotation {
    let mut rng = HashStream::new(turn_id, model_id, seed);
    let k = 1 + rng.below(K_MAX as u8) as usize;
    let mut labels: Vec<&str> = Vec::with_capacity(k);
    while labels.len() < k {
        let candidate = VOCABULARY[rng.below(VOCABULARY.len() as u8) as usize];
        if !labels.contains(&candidate) {
            labels.push(candidate);
        }
    }
    let emotions = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| RankedEmotion {
            label: label.to_string(),
            valence: 1 + rng.below(9),
            arousal: 1 + rng.below(9),
            learning: 1 + rng.below(9),
            rank: (i + 1) as u8,
        })
        .collect();
    ModelAnnotation {
        model_id: model_id.to_string(),
        turn_id: turn_id.to_string(),
        emotions,
    }
}

/// The JSON body a well-behaved backend would return for this annotation.
pub fn mock_completion(turn_id: &str, model_id: &str, seed: u64) -> String {
    let ann = mock_annotate(turn_id, model_id, seed);
    serde_json::json!({ "emotions": ann.emotions }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::parse_response;

    #[test]
    fn deterministic() {
        assert_eq!(mock_annotate("t1", "m", 42), mock_annotate("t1", "m", 42));
    }

    #[test]
    fn seed_changes_output() {
        assert_ne!(mock_annotate("t1", "m", 1), mock_annotate("t1", "m", 2));
    }

    #[test]
    fn pinned_fixture() {
        // Frozen from the first run; any change here breaks cached goldens.
        let ann = mock_annotate("t1", "mock-a", 42);
        assert_eq!(ann.to_string(), PINNED_T1_MOCK_A_42);
    }

    const PINNED_T1_MOCK_A_42: &str = "mock-a@t1: relief(3,1,9)";

    #[test]
    fn always_valid() {
        for i in 0..500 {
            let ann = mock_annotate(&format!("t{i}"), "m", i);
            ann.validate().unwrap();
        }
    }

    #[test]
    fn completion_round_trips_through_parser() {
        let ann = mock_annotate("t9", "m", 3);
        let parsed = parse_response(&mock_completion("t9", "m", 3)).unwrap();
        assert_eq!(parsed.emotions, ann.emotions);
    }
}
