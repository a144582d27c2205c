//! Token ↔ id table. Ids 0..4 are reserved; `vocab.txt` lists the rest one
//! per line, so line `i` (from 0) holds id `i + 4`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::metrics::tokenize;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved ids followed by `words` in the given order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words) {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {w:?}")));
            }
            let id = v.tokens.len() as u32;
            if v.ids.insert(w.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{w}`")));
            }
            v.tokens.push(w);
        }
        Ok(v)
    }

    /// Words with count ≥ `min_count` across `captions`, most frequent first,
    /// ties in lexicographic order.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::invalid("build_vocab", "training split has no captions"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(kept.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Words for `ids`, stopping at EOS and skipping PAD and BOS.
    pub fn decode_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.decode_words(ids).join(" ")
    }

    pub fn to_text(&self) -> String {
        self.words().iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if let Some(w) = words.iter().find(|w| RESERVED.contains(&w.as_str())) {
            return Err(Error::Format(format!("vocab.txt must not list reserved token `{w}`")));
        }
        Self::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_small_corpus() {
        let v = Vocabulary::build(&["a a b"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
        let v2 = Vocabulary::build(&["a a b"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), UNK);
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocabulary::build(&["c b a", "c b", "d c"], 1).unwrap();
        assert_eq!(v.words(), ["c", "b", "a", "d"]);
        let again = Vocabulary::build(&["c b a", "c b", "d c"], 1).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn text_round_trip_and_errors() {
        let v = Vocabulary::build(&["the red circle the"], 1).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\na\n").is_err());
        assert!(Vocabulary::from_text("a\n\nb\n").is_err());
        assert!(Vocabulary::from_text("<eos>\n").is_err());
        assert!(Vocabulary::from_text("a b\n").is_err());
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&["a red circle"], 1).unwrap();
        let ids = v.encode("A red square");
        assert_eq!(ids[2], UNK);
        assert_eq!(v.decode(&[BOS, v.id("red"), v.id("circle"), EOS, v.id("a")]), "red circle");
    }
}
