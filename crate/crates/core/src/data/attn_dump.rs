//! Attention dumps (`*.attn`).
//!
//! ```text
//! "CPTRATTN" | version: u32 | grid_rows: u32 | grid_cols: u32 | patch_size: u32 | n_maps: u32
//! per map: stack: u8 | layer: u32 | head: u32 | n_q: u32 | n_k: u32 | n_tokens: u32
//!          | tokens: u32 × n_tokens | weights: f32 × (n_q·n_k), row-major
//! ```
//! Little-endian throughout. Stack codes: 0 encoder-self, 1 decoder-self,
//! 2 decoder-cross. Decoder maps carry the generated caption tokens, one per
//! query row (row `i` is the step that predicted `tokens[i]`); encoder maps
//! carry none. Rows are stored as f32 and must sum to 1 within 1e-3.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, Stack};

pub const MAGIC: &[u8; 8] = b"CPTRATTN";
pub const VERSION: u32 = 1;
const ROW_SUM_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct DumpedMap {
    pub stack: Stack,
    pub layer: usize,
    pub head: usize,
    pub n_queries: usize,
    pub n_keys: usize,
    pub tokens: Vec<u32>,
    pub weights: Vec<f32>,
}

impl DumpedMap {
    pub fn row(&self, q: usize) -> &[f32] {
        &self.weights[q * self.n_keys..(q + 1) * self.n_keys]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub maps: Vec<DumpedMap>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("attention dump: {}", msg.into()))
}

impl AttentionDump {
    /// Maps for batch item `item` of `trace`. `tokens` are the generated
    /// caption ids matching the decoder query rows.
    pub fn from_trace(trace: &AttentionTrace, item: usize, tokens: &[u32], grid: (usize, usize), patch_size: usize) -> Result<Self> {
        let maps = trace
            .maps
            .iter()
            .filter(|m| m.item == item)
            .map(|m| DumpedMap {
                stack: m.stack,
                layer: m.layer,
                head: m.head,
                n_queries: m.n_queries,
                n_keys: m.n_keys,
                tokens: if m.stack == Stack::EncoderSelf { Vec::new() } else { tokens.to_vec() },
                weights: m.weights.clone(),
            })
            .collect();
        let d = AttentionDump {
            grid_rows: grid.0,
            grid_cols: grid.1,
            patch_size,
            maps,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_size == 0 {
            return Err(bad("zero grid or patch size"));
        }
        let cells = self.grid_rows * self.grid_cols;
        for (i, m) in self.maps.iter().enumerate() {
            let ctx = |msg: String| bad(format!("map {i} ({} layer {} head {}): {msg}", m.stack, m.layer, m.head));
            if m.n_queries == 0 || m.n_keys == 0 || m.weights.len() != m.n_queries * m.n_keys {
                return Err(ctx("inconsistent dimensions".into()));
            }
            let (q_ok, k_ok, t_ok) = match m.stack {
                Stack::EncoderSelf => (m.n_queries == cells, m.n_keys == cells, m.tokens.is_empty()),
                Stack::DecoderSelf => (true, m.n_keys == m.n_queries, m.tokens.len() == m.n_queries),
                Stack::DecoderCross => (true, m.n_keys == cells, m.tokens.len() == m.n_queries),
            };
            if !(q_ok && k_ok) {
                return Err(ctx(format!("{}×{} does not fit a {cells}-patch grid", m.n_queries, m.n_keys)));
            }
            if !t_ok {
                return Err(ctx(format!("{} caption tokens for {} queries", m.tokens.len(), m.n_queries)));
            }
            for q in 0..m.n_queries {
                let row = m.row(q);
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(ctx(format!("row {q} has a negative or non-finite weight")));
                }
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(ctx(format!("row {q} sums to {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn find(&self, stack: Stack, layer: usize, head: usize) -> Option<&DumpedMap> {
        self.maps.iter().find(|m| m.stack == stack && m.layer == layer && m.head == head)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(&mut out, VERSION as usize);
        put(&mut out, self.grid_rows);
        put(&mut out, self.grid_cols);
        put(&mut out, self.patch_size);
        put(&mut out, self.maps.len());
        for m in &self.maps {
            out.push(m.stack.code());
            for v in [m.layer, m.head, m.n_queries, m.n_keys, m.tokens.len()] {
                put(&mut out, v);
            }
            for &t in &m.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for &w in &m.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("version {version} is not supported (expected {VERSION})")));
        }
        let grid_rows = r.u32()? as usize;
        let grid_cols = r.u32()? as usize;
        let patch_size = r.u32()? as usize;
        let n_maps = r.u32()? as usize;
        let mut maps = Vec::new();
        for _ in 0..n_maps {
            let stack = Stack::from_code(r.take(1)?[0])?;
            let layer = r.u32()? as usize;
            let head = r.u32()? as usize;
            let n_queries = r.u32()? as usize;
            let n_keys = r.u32()? as usize;
            let n_tokens = r.u32()? as usize;
            let tokens = r.take(4 * n_tokens)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            let n = n_queries.checked_mul(n_keys).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("map too large"))?;
            let weights = r.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            maps.push(DumpedMap {
                stack,
                layer,
                head,
                n_queries,
                n_keys,
                tokens,
                weights,
            });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let d = AttentionDump {
            grid_rows,
            grid_cols,
            patch_size,
            maps,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AttentionDump {
        AttentionDump {
            grid_rows: 1,
            grid_cols: 2,
            patch_size: 4,
            maps: vec![
                DumpedMap {
                    stack: Stack::EncoderSelf,
                    layer: 0,
                    head: 1,
                    n_queries: 2,
                    n_keys: 2,
                    tokens: vec![],
                    weights: vec![0.25, 0.75, 1.0, 0.0],
                },
                DumpedMap {
                    stack: Stack::DecoderCross,
                    layer: 1,
                    head: 0,
                    n_queries: 3,
                    n_keys: 2,
                    tokens: vec![4, 5, 2],
                    weights: vec![0.5, 0.5, 0.1, 0.9, 0.0, 1.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let d = sample();
        assert_eq!(AttentionDump::from_bytes(&d.to_bytes()).unwrap(), d);
        assert!(d.find(Stack::DecoderCross, 1, 0).is_some());
        assert!(d.find(Stack::DecoderSelf, 0, 0).is_none());
    }

    #[test]
    fn rejects_bad_content() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 20, bytes.len() - 1] {
            assert!(AttentionDump::from_bytes(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(AttentionDump::from_bytes(&extra).is_err());

        let mut d = sample();
        d.maps[0].weights[0] = 0.5;
        assert!(AttentionDump::from_bytes(&d.to_bytes()).is_err());
        let mut d = sample();
        d.maps[1].tokens.pop();
        assert!(AttentionDump::from_bytes(&d.to_bytes()).is_err());
        let mut d = sample();
        d.maps[0].n_keys = 1;
        d.maps[0].n_queries = 4;
        assert!(d.validate().is_err());
        let mut b = sample().to_bytes();
        b[28] = 9; // first map's stack code
        assert!(AttentionDump::from_bytes(&b).is_err());
    }
}
