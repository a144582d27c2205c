//! Greedy, sampled and beam-search caption generation.
//!
//! Generated sequences never contain the leading BOS and end with EOS when
//! one was produced before `max_len`. Beam scores are plain cumulative
//! log-probabilities; ties are broken towards the lexicographically lower
//! token sequence.

use std::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, Mode};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Rank finished beams by mean instead of summed log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 3,
            max_len: 20,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that scores the next token given a prefix for an image.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;

    /// Logits over the vocabulary for the token following each prefix.
    /// `items[i]` selects the image for `prefixes[i]`; prefixes start with
    /// BOS and all have the same length.
    fn next_logits(&self, items: &[usize], prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

/// A captioning model bound to precomputed encoder memory `[B, N, d]`.
pub struct ImageDecoder<'a, F: Element> {
    model: &'a CaptionModel<F>,
    memory: Tensor<F>,
}

impl<'a, F: Element> ImageDecoder<'a, F> {
    pub fn new(model: &'a CaptionModel<F>, memory: Tensor<F>) -> Self {
        ImageDecoder { model, memory }
    }

    /// Encode `[B, N, P²·3]` patches in eval mode.
    pub fn from_patches(model: &'a CaptionModel<F>, patches: &Tensor<F>) -> Result<Self> {
        Ok(ImageDecoder {
            model,
            memory: model.memory(patches)?,
        })
    }

    pub fn n_items(&self) -> usize {
        self.memory.dims()[0]
    }
}

impl<F: Element> NextTokenModel for ImageDecoder<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_logits(&self, items: &[usize], prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let rows = prefixes.len();
        if rows == 0 {
            return Ok(Vec::new());
        }
        let len = prefixes[0].len();
        if items.len() != rows || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::invalid("next_logits", "prefixes must share one length and have an item each"));
        }
        let dims = self.memory.dims();
        let per = dims[1] * dims[2];
        let mut mem = Vec::with_capacity(rows * per);
        for &i in items {
            if i >= dims[0] {
                return Err(Error::invalid("next_logits", format!("item {i} out of {}", dims[0])));
            }
            mem.extend_from_slice(&self.memory.data()[i * per..(i + 1) * per]);
        }
        let tokens: Vec<u32> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
        let mut tape = Tape::no_grad();
        let bound = self.model.bind(&mut tape);
        let memory = tape.constant(Tensor::new(vec![rows, dims[1], dims[2]], mem)?);
        let out = self.model.decode(&mut tape, &bound, &tokens, rows, len, memory, &mut Mode::Eval, None)?;
        let logits = tape.value(out);
        let v = self.vocab_size();
        Ok((0..rows)
            .map(|r| {
                let last = (r * len + len - 1) * v;
                logits.data()[last..last + v].iter().map(|x| x.as_f64()).collect()
            })
            .collect())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for several images at once.
pub fn greedy_batch(model: &impl NextTokenModel, items: &[usize], max_len: usize) -> Result<Vec<Vec<u32>>> {
    lockstep(model, items, max_len, |logits, _| Ok((argmax(logits) as u32, 0.0))).map(|v| v.into_iter().map(|(t, _)| t).collect())
}

pub fn greedy(model: &impl NextTokenModel, item: usize, max_len: usize) -> Result<Vec<u32>> {
    Ok(greedy_batch(model, &[item], max_len)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<u32>,
    /// Log-probability of each drawn token under the sampling distribution.
    pub log_probs: Vec<f64>,
}

/// Multinomial sampling from `softmax(logits / temperature)`.
pub fn sample_batch(
    model: &impl NextTokenModel,
    items: &[usize],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Sampled>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid("sample", format!("temperature {temperature} must be positive")));
    }
    let out = lockstep(model, items, max_len, |logits, _| {
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let lp = log_softmax(&scaled);
        let tok = draw(&lp, rng);
        Ok((tok as u32, lp[tok]))
    })?;
    Ok(out
        .into_iter()
        .map(|(tokens, log_probs)| Sampled { tokens, log_probs })
        .collect())
}

pub fn sample(model: &impl NextTokenModel, item: usize, max_len: usize, temperature: f64, rng: &mut Rng) -> Result<Sampled> {
    Ok(sample_batch(model, &[item], max_len, temperature, rng)?.remove(0))
}

/// Inverse-CDF draw from log-probabilities.
fn draw(log_probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    log_probs.len() - 1
}

/// Advance all items one token per step until each has produced EOS or
/// `max_len` tokens. Finished items are dropped from later queries.
fn lockstep(
    model: &impl NextTokenModel,
    items: &[usize],
    max_len: usize,
    mut pick: impl FnMut(&[f64], usize) -> Result<(u32, f64)>,
) -> Result<Vec<(Vec<u32>, Vec<f64>)>> {
    if max_len == 0 {
        return Err(Error::invalid("decode", "max_len must be at least 1"));
    }
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; items.len()];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); items.len()];
    let mut live: Vec<usize> = (0..items.len()).collect();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let its: Vec<usize> = live.iter().map(|&i| items[i]).collect();
        let prefixes: Vec<&[u32]> = live.iter().map(|&i| seqs[i].as_slice()).collect();
        let logits = model.next_logits(&its, &prefixes)?;
        let mut still = Vec::with_capacity(live.len());
        for (row, &i) in live.iter().enumerate() {
            let (tok, lp) = pick(&logits[row], i)?;
            seqs[i].push(tok);
            scores[i].push(lp);
            if tok != EOS {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(seqs
        .into_iter()
        .zip(scores)
        .map(|(mut s, lp)| {
            s.remove(0);
            (s, lp)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without the leading BOS.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[1..]
    }

    fn rank_score(&self, normalize: bool) -> f64 {
        if normalize {
            self.log_prob / self.generated().len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first, then lexicographically lower tokens.
fn rank(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> Ordering {
    b.rank_score(normalize)
        .total_cmp(&a.rank_score(normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every retired hypothesis, best first.
    pub pool: Vec<Hypothesis>,
}

/// Beam search for one image. At each step every live hypothesis is
/// expanded over the whole vocabulary and the best `beam_size` expansions
/// survive; those ending in EOS retire to the pool. Hypotheses still live
/// at `max_len` retire unfinished.
pub fn beam_search(model: &impl NextTokenModel, item: usize, cfg: &DecodeConfig) -> Result<BeamResult> {
    cfg.validate()?;
    let v = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool = Vec::new();
    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let items = vec![item; live.len()];
        let prefixes: Vec<&[u32]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let logits = model.next_logits(&items, &prefixes)?;
        let mut cands = Vec::with_capacity(live.len() * v);
        for (h, l) in live.iter().zip(&logits) {
            for (tok, lp) in log_softmax(l).into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                cands.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished: tok as u32 == EOS,
                });
            }
        }
        cands.sort_by(|a, b| rank(a, b, false));
        cands.truncate(cfg.beam_size);
        let last = step + 1 == cfg.max_len;
        live = Vec::new();
        for c in cands {
            if c.finished || last {
                pool.push(c);
            } else {
                live.push(c);
            }
        }
    }
    pool.sort_by(|a, b| rank(a, b, cfg.length_normalize));
    Ok(BeamResult {
        best: pool[0].clone(),
        pool,
    })
}

/// Teacher-forced log-probability of `generated` (no BOS) for an image.
pub fn sequence_log_prob(model: &impl NextTokenModel, item: usize, generated: &[u32]) -> Result<f64> {
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    for &t in generated {
        let l = model.next_logits(&[item], &[prefix.as_slice()])?;
        total += log_softmax(&l[0])[t as usize];
        prefix.push(t);
    }
    Ok(total)
}
