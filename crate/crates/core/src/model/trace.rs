use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stack {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl Stack {
    pub const ALL: [Stack; 3] = [Stack::EncoderSelf, Stack::DecoderSelf, Stack::DecoderCross];

    pub fn code(self) -> u8 {
        match self {
            Stack::EncoderSelf => 0,
            Stack::DecoderSelf => 1,
            Stack::DecoderCross => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stack::EncoderSelf),
            1 => Ok(Stack::DecoderSelf),
            2 => Ok(Stack::DecoderCross),
            _ => Err(Error::Format(format!("unknown attention stack code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stack::EncoderSelf => "encoder-self",
            Stack::DecoderSelf => "decoder-self",
            Stack::DecoderCross => "decoder-cross",
        }
    }
}

impl std::str::FromStr for Stack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stack::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stack `{s}` (expected encoder-self, decoder-self or decoder-cross)")))
    }
}

impl std::fmt::Display for Stack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One captured attention map, queries × keys, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub stack: Stack,
    pub layer: usize,
    pub head: usize,
    /// Batch item the map belongs to.
    pub item: usize,
    pub n_queries: usize,
    pub n_keys: usize,
    pub weights: Vec<f32>,
}

impl AttentionMap {
    pub fn row(&self, q: usize) -> &[f32] {
        &self.weights[q * self.n_keys..(q + 1) * self.n_keys]
    }
}

/// Attention weights recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub maps: Vec<AttentionMap>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record head-major weights shaped `[B·H, n_q, n_k]`.
    pub(crate) fn record(&mut self, stack: Stack, layer: usize, heads: usize, dims: &[usize], data: &[f64]) {
        let (n_q, n_k) = (dims[1], dims[2]);
        let per = n_q * n_k;
        for (bh, chunk) in data.chunks(per).enumerate() {
            self.maps.push(AttentionMap {
                stack,
                layer,
                head: bh % heads,
                item: bh / heads,
                n_queries: n_q,
                n_keys: n_k,
                weights: chunk.iter().map(|&v| v as f32).collect(),
            });
        }
    }

    pub fn get(&self, stack: Stack, layer: usize, head: usize, item: usize) -> Option<&AttentionMap> {
        self.maps
            .iter()
            .find(|m| m.stack == stack && m.layer == layer && m.head == head && m.item == item)
    }

    pub fn of_stack(&self, stack: Stack) -> impl Iterator<Item = &AttentionMap> {
        self.maps.iter().filter(move |m| m.stack == stack)
    }
}
