//! Self-critical sequence training.
//!
//! Rollouts are drawn from the current model in eval mode without a tape;
//! the greedy caption is the baseline. The gradient pass teacher-forces the
//! sampled tokens, also without dropout, so the gradient is that of the
//! same policy the samples came from.

use super::{Dataset, TrainConfig};
use crate::data::vocab::{BOS, PAD};
use crate::decoding::{self, ImageDecoder};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, Mode};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScstStats {
    /// Surrogate loss averaged over rollouts.
    pub loss: f64,
    pub reward_sample: f64,
    pub reward_greedy: f64,
    pub rollouts: usize,
}

/// `Σ_r A_r · Σ_t −log p(targets[r, t])` over positions where `mask` holds.
pub fn scst_surrogate<F: Element>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[u32],
    mask: &[bool],
    advantages: &[f64],
) -> Result<Var> {
    let rows = advantages.len();
    if rows == 0 || !targets.len().is_multiple_of(rows) || mask.len() != targets.len() {
        return Err(Error::invalid("scst_surrogate", "targets, mask and advantages disagree"));
    }
    let len = targets.len() / rows;
    let weights: Vec<f64> = mask
        .iter()
        .enumerate()
        .map(|(i, &m)| if m { advantages[i / len] } else { 0.0 })
        .collect();
    tape.cross_entropy(logits, targets, &weights)
}

/// One SCST update's worth of gradient for `images`. `reward(image, tokens)`
/// scores a generated caption for dataset image `image`.
pub fn scst_step<F: Element>(
    model: &CaptionModel<F>,
    data: &Dataset,
    images: &[usize],
    reward: &dyn Fn(usize, &[u32]) -> Result<f64>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ScstStats, Vec<Tensor<F>>)> {
    let max_len = cfg.max_decode_len.min(model.config().max_caption_len);
    let score = |img: usize, toks: &[u32]| {
        reward(img, toks).map_err(|e| Error::Reward {
            image: img,
            msg: e.to_string(),
        })
    };
    let dec = ImageDecoder::from_patches(model, &data.patch_tensor(images))?;
    let items: Vec<usize> = (0..images.len()).collect();
    let greedy = decoding::greedy_batch(&dec, &items, max_len)?;
    let baseline = greedy
        .iter()
        .zip(images)
        .map(|(g, &img)| score(img, g))
        .collect::<Result<Vec<f64>>>()?;

    let mut rows_img = Vec::new();
    let mut samples = Vec::new();
    let mut advantages = Vec::new();
    let mut sample_reward = 0.0;
    for _ in 0..cfg.scst_samples {
        for (k, s) in decoding::sample_batch(&dec, &items, max_len, cfg.scst_temperature, rng)?.into_iter().enumerate() {
            let r = score(images[k], &s.tokens)?;
            sample_reward += r;
            advantages.push(r - baseline[k]);
            rows_img.push(images[k]);
            samples.push(s.tokens);
        }
    }
    let rows = samples.len();
    let len = samples.iter().map(Vec::len).max().unwrap_or(1);
    let mut inputs = vec![PAD; rows * len];
    let mut targets = vec![PAD; rows * len];
    let mut mask = vec![false; rows * len];
    for (r, s) in samples.iter().enumerate() {
        inputs[r * len] = BOS;
        for (t, &tok) in s.iter().enumerate() {
            targets[r * len + t] = tok;
            mask[r * len + t] = true;
            if t + 1 < len {
                inputs[r * len + t + 1] = tok;
            }
        }
    }

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let patches = tape.constant(data.patch_tensor(&rows_img));
    let memory = model.encode(&mut tape, &bound, patches, &mut Mode::Eval, None)?;
    let logits = model.decode(&mut tape, &bound, &inputs, rows, len, memory, &mut Mode::Eval, None)?;
    let total = scst_surrogate(&mut tape, logits, &targets, &mask, &advantages)?;
    let loss = tape.scale(total, 1.0 / rows as f64)?;
    let loss_value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.parameters())
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.dims().to_vec()).expect("positive dims"))
        })
        .collect();
    Ok((
        ScstStats {
            loss: loss_value,
            reward_sample: sample_reward / rows as f64,
            reward_greedy: baseline.iter().sum::<f64>() / baseline.len() as f64,
            rollouts: rows,
        },
        grads,
    ))
}
