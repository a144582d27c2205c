//! The captioning network.
//!
//! Encoder: patch embedding followed by `n_enc_layers` post-norm layers of
//! self-attention and FFN. Decoder: word embedding plus sinusoid positions,
//! then `n_dec_layers` layers of causal self-attention, cross-attention over
//! the encoder memory and FFN, and a linear vocabulary head.

pub mod attention;
pub mod config;
pub mod params;
pub mod trace;

pub use attention::{causal_mask, Mode};
pub use config::ModelConfig;
pub use params::{Bound, Layout, ParamId, ParamSpec};
pub use trace::{AttentionMap, AttentionTrace, Stack};

use attention::{AttnVars, FfnVars, NormVars};
use params::{AttnParams, FfnParams, NormParams};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::vision::{self, PatchEmbedding};

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(·)`.
pub fn sinusoid_positions<F: Element>(max_len: usize, d_model: usize) -> Result<Tensor<F>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoid positions need an even width, got {d_model}")));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(F::of(angle.sin()));
            data.push(F::of(angle.cos()));
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

#[derive(Clone, Debug)]
pub struct CaptionModel<F: Element> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<F>>,
    positions: Tensor<F>,
}

impl<F: Element> CaptionModel<F> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = params::initialize(&layout.specs, rng);
        let positions = sinusoid_positions(config.max_caption_len, config.d_model)?;
        Ok(CaptionModel {
            config,
            layout,
            params,
            positions,
        })
    }

    /// Build from named tensors, checking every name and shape against `config`.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = params::verify(&layout.specs, named)?;
        let positions = sinusoid_positions(config.max_caption_len, config.d_model)?;
        Ok(CaptionModel {
            config,
            layout,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn parameters(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.layout.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.parameter_count()
    }

    pub fn cast<G: Element>(&self) -> CaptionModel<G> {
        CaptionModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            positions: self.positions.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound::new(tape, &self.params)
    }

    fn attn_dropout(&self) -> f64 {
        if self.config.attention_dropout {
            self.config.dropout_p
        } else {
            0.0
        }
    }

    /// Patches `[B, N, P²·3]` → memory `[B, N, d]`.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        patches: Var,
        mode: &mut Mode<'_>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let dims = tape.value(patches).dims().to_vec();
        if dims.len() != 3 || dims[2] != cfg.patch_dim() {
            return Err(Error::shape("encode", &dims, &[0, cfg.n_patches(), cfg.patch_dim()]));
        }
        let emb = PatchEmbedding {
            projection: bound.get(self.layout.patch_proj),
            bias: bound.get(self.layout.patch_bias),
            positions: bound.get(self.layout.patch_pos),
        };
        let mut x = vision::embed(tape, patches, &emb)?;
        let (p, pa, eps) = (cfg.dropout_p, self.attn_dropout(), cfg.layer_norm_eps);
        for (li, layer) in self.layout.encoder.iter().enumerate() {
            let sa = attn_vars(bound, &layer.self_attn);
            let mut w = None;
            x = attention::sublayer(tape, x, &norm_vars(bound, &layer.norm1), eps, |t, h| {
                let (o, weights) = attention::multi_head_attention(t, h, h, &sa, cfg.n_heads, None, pa, mode)?;
                w = Some(weights);
                Ok(o)
            })?;
            if let (Some(tr), Some(w)) = (trace.as_deref_mut(), w) {
                let v = tape.value(w);
                tr.record(Stack::EncoderSelf, li, cfg.n_heads, v.dims(), &v.to_f64_vec());
            }
            let f = ffn_vars(bound, &layer.ffn);
            x = attention::sublayer(tape, x, &norm_vars(bound, &layer.norm2), eps, |t, h| {
                attention::ffn(t, h, &f, p, mode)
            })?;
        }
        Ok(x)
    }

    /// Teacher-forced decoder pass. `tokens` is row-major `[batch, len]`;
    /// returns logits `[batch, len, vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        tokens: &[u32],
        batch: usize,
        len: usize,
        memory: Var,
        mode: &mut Mode<'_>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch == 0 || len == 0 || tokens.len() != batch * len {
            return Err(Error::invalid(
                "decode",
                format!("{} tokens do not form a {batch}×{len} batch", tokens.len()),
            ));
        }
        if len > cfg.max_caption_len {
            return Err(Error::invalid(
                "decode",
                format!("sequence length {len} exceeds the position table ({})", cfg.max_caption_len),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(
                "decode",
                format!("token id {bad} outside vocabulary of {}", cfg.vocab_size),
            ));
        }
        let mdims = tape.value(memory).dims().to_vec();
        if mdims.len() != 3 || mdims[0] != batch || mdims[2] != cfg.d_model {
            return Err(Error::shape("decode memory", &mdims, &[batch, 0, cfg.d_model]));
        }

        let words = tape.embedding(bound.get(self.layout.word_embed), tokens, &[batch, len])?;
        let pe = Tensor::new(vec![len, cfg.d_model], self.positions.data()[..len * cfg.d_model].to_vec())?;
        let pe = tape.constant(pe);
        let mut x = tape.add(words, pe)?;
        let mask = causal_mask(len);
        let (p, pa, eps) = (cfg.dropout_p, self.attn_dropout(), cfg.layer_norm_eps);
        for (li, layer) in self.layout.decoder.iter().enumerate() {
            let sa = attn_vars(bound, &layer.self_attn);
            let mut w_self = None;
            x = attention::sublayer(tape, x, &norm_vars(bound, &layer.norm1), eps, |t, h| {
                let (o, w) = attention::multi_head_attention(t, h, h, &sa, cfg.n_heads, Some(&mask), pa, mode)?;
                w_self = Some(w);
                Ok(o)
            })?;
            let ca = attn_vars(bound, &layer.cross_attn);
            let mut w_cross = None;
            x = attention::sublayer(tape, x, &norm_vars(bound, &layer.norm2), eps, |t, h| {
                let (o, w) = attention::multi_head_attention(t, h, memory, &ca, cfg.n_heads, None, pa, mode)?;
                w_cross = Some(w);
                Ok(o)
            })?;
            if let Some(tr) = trace.as_deref_mut() {
                for (stack, w) in [(Stack::DecoderSelf, w_self), (Stack::DecoderCross, w_cross)] {
                    if let Some(w) = w {
                        let v = tape.value(w);
                        tr.record(stack, li, cfg.n_heads, v.dims(), &v.to_f64_vec());
                    }
                }
            }
            let f = ffn_vars(bound, &layer.ffn);
            x = attention::sublayer(tape, x, &norm_vars(bound, &layer.norm3), eps, |t, h| {
                attention::ffn(t, h, &f, p, mode)
            })?;
        }
        tape.linear(x, bound.get(self.layout.head_w), Some(bound.get(self.layout.head_b)))
    }

    /// Eval-mode logits for a batch of patch sequences `[B, N, P²·3]` and
    /// tokens `[B, T]`, without recording gradients.
    pub fn logits(&self, patches: &Tensor<F>, tokens: &[u32], len: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape);
        let batch = patches.dims()[0];
        let p = tape.constant(patches.clone());
        let memory = self.encode(&mut tape, &bound, p, &mut Mode::Eval, None)?;
        let out = self.decode(&mut tape, &bound, tokens, batch, len, memory, &mut Mode::Eval, None)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode encoder memory for `[B, N, P²·3]` patches.
    pub fn memory(&self, patches: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape);
        let p = tape.constant(patches.clone());
        let memory = self.encode(&mut tape, &bound, p, &mut Mode::Eval, None)?;
        Ok(tape.value(memory).clone())
    }
}

fn attn_vars(b: &Bound, p: &AttnParams) -> AttnVars {
    AttnVars {
        wq: b.get(p.wq),
        bq: b.get(p.bq),
        wk: b.get(p.wk),
        bk: b.get(p.bk),
        wv: b.get(p.wv),
        bv: b.get(p.bv),
        wo: b.get(p.wo),
        bo: b.get(p.bo),
    }
}

fn ffn_vars(b: &Bound, p: &FfnParams) -> FfnVars {
    FfnVars {
        fc1_w: b.get(p.fc1_w),
        fc1_b: b.get(p.fc1_b),
        fc2_w: b.get(p.fc2_w),
        fc2_b: b.get(p.fc2_b),
    }
}

fn norm_vars(b: &Bound, p: &NormParams) -> NormVars {
    NormVars {
        gain: b.get(p.gain),
        bias: b.get(p.bias),
    }
}

#[cfg(test)]
mod tests;
