use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttnParams,
    pub norm1: NormParams,
    pub ffn: FfnParams,
    pub norm2: NormParams,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub norm1: NormParams,
    pub cross_attn: AttnParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
    pub norm3: NormParams,
}

/// Where every named parameter lives, derived from the config alone.
#[derive(Clone, Debug)]
pub struct Layout {
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub patch_pos: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub word_embed: ParamId,
    pub decoder: Vec<DecoderLayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub specs: Vec<ParamSpec>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, dims: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, dims, init });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::TruncNormal);
        let b = self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros);
        (w, b)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d);
        AttnParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnParams {
        let (fc1_w, fc1_b) = self.linear(&format!("{prefix}.fc1"), d, hidden);
        let (fc2_w, fc2_b) = self.linear(&format!("{prefix}.fc2"), hidden, d);
        FfnParams {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let (patch_proj, patch_bias) = b.linear("patch_embed", cfg.patch_dim(), d);
        let patch_pos = b.add("patch_embed.positions".into(), vec![cfg.n_patches(), d], Init::TruncNormal);
        let encoder = (0..cfg.n_enc_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayerParams {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ffn),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let word_embed = b.add("decoder.word_embed".into(), vec![cfg.vocab_size, d], Init::TruncNormal);
        let decoder = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayerParams {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ffn),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                }
            })
            .collect();
        let (head_w, head_b) = b.linear("head", d, cfg.vocab_size);
        Layout {
            patch_proj,
            patch_bias,
            patch_pos,
            encoder,
            word_embed,
            decoder,
            head_w,
            head_b,
            specs: b.specs,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.dims.iter().product::<usize>()).sum()
    }
}

pub fn initialize<F: Element>(specs: &[ParamSpec], rng: &mut Rng) -> Vec<Tensor<F>> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    specs
        .iter()
        .map(|s| {
            let n: usize = s.dims.iter().product();
            let data = match s.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::TruncNormal => (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break F::of(v);
                        }
                    })
                    .collect(),
            };
            Tensor::new(s.dims.clone(), data).expect("spec dims are positive")
        })
        .collect()
}

/// Check externally supplied tensors against the layout, by name and shape.
pub fn verify<F: Element>(specs: &[ParamSpec], named: Vec<(String, Tensor<F>)>) -> Result<Vec<Tensor<F>>> {
    if named.len() != specs.len() {
        return Err(Error::Format(format!(
            "expected {} parameter tensors, found {}",
            specs.len(),
            named.len()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor<F>> = std::collections::HashMap::new();
    for (name, t) in named {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    specs
        .iter()
        .map(|s| {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", s.name)))?;
            if t.dims() != s.dims.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    s.name,
                    t.dims(),
                    s.dims
                )));
            }
            Ok(t)
        })
        .collect()
}

/// Parameters placed on a tape: as gradient leaves on a recording tape,
/// as constants otherwise.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new<F: Element>(tape: &mut Tape<F>, params: &[Tensor<F>]) -> Self {
        let grad = tape.grad_enabled();
        let vars = params.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        Bound { vars }
    }

    /// Wrap vars already on a tape, in layout order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
