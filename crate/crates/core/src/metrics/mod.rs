//! BLEU-1..4 and CIDEr-D.
//!
//! Text is tokenized by lowercasing, turning every character that is neither
//! alphanumeric nor whitespace into a space, and splitting on whitespace.

mod bleu;
mod cider;

pub use bleu::{bleu, modified_precision, BleuScores};
pub use cider::{cider, CiderD, CiderScores};

use std::collections::BTreeMap;

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ")
}

/// Counts of every n-gram with `1 ≤ n ≤ n_max`, keyed by the
/// space-joined gram.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NGramStats {
    pub counts: BTreeMap<String, usize>,
}

impl NGramStats {
    pub fn of<S: AsRef<str>>(tokens: &[S], n_max: usize) -> Self {
        let mut counts = BTreeMap::new();
        for n in 1..=n_max {
            for w in tokens.windows(n) {
                *counts.entry(detokenize(w)).or_insert(0) += 1;
            }
        }
        NGramStats { counts }
    }

    /// Counts for grams of exactly order `n`.
    pub fn order(&self, n: usize) -> impl Iterator<Item = (&str, usize)> {
        self.counts
            .iter()
            .filter(move |(g, _)| g.split(' ').count() == n)
            .map(|(g, c)| (g.as_str(), *c))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("A red-circle, LEFT of  it."), ["a", "red", "circle", "left", "of", "it"]);
        assert!(tokenize(" ,;. ").is_empty());
    }

    #[test]
    fn ngram_counts() {
        let s = NGramStats::of(&["a", "a", "b"], 2);
        assert_eq!(s.counts["a"], 2);
        assert_eq!(s.counts["a a"], 1);
        assert_eq!(s.counts["a b"], 1);
        assert_eq!(s.order(1).count(), 2);
        assert!(s.counts.values().all(|&c| c >= 1));
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_idempotent(tokens in prop::collection::vec("[a-z0-9]{1,8}", 0..12)) {
            prop_assert_eq!(tokenize(&detokenize(&tokens)), tokens);
        }
    }
}
