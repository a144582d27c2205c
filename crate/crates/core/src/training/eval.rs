use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::data::vocab::Vocabulary;
use crate::decoding::{self, DecodeConfig, ImageDecoder};
use crate::error::Result;
use crate::metrics;
use crate::model::CaptionModel;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Greedy { max_len: usize },
    Beam(DecodeConfig),
}

/// Images encoded per greedy batch.
const GREEDY_CHUNK: usize = 50;

/// Generated ids (no BOS) for `images` of `data`, in the given order.
pub fn decode_all<F: Element>(
    model: &CaptionModel<F>,
    data: &Dataset,
    images: &[usize],
    strategy: &Strategy,
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(images.len());
    match strategy {
        Strategy::Greedy { max_len } => {
            for chunk in images.chunks(GREEDY_CHUNK) {
                let dec = ImageDecoder::from_patches(model, &data.patch_tensor(chunk))?;
                let items: Vec<usize> = (0..chunk.len()).collect();
                out.extend(decoding::greedy_batch(&dec, &items, *max_len)?);
            }
        }
        Strategy::Beam(cfg) => {
            for &i in images {
                let dec = ImageDecoder::from_patches(model, &data.patch_tensor(&[i]))?;
                out.push(decoding::beam_search(&dec, 0, cfg)?.best.generated().to_vec());
            }
        }
    }
    Ok(out)
}

/// Evaluation summary; serializes with keys `bleu1..bleu4`, `cider`, `n_images`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub n_images: usize,
}

/// BLEU-1..4 and CIDEr-D of word candidates against references.
pub fn score_captions(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Scores> {
    let b = metrics::bleu(candidates, references, 4)?;
    let c = metrics::cider(candidates, references)?;
    Ok(Scores {
        bleu1: b.scores[0],
        bleu2: b.scores[1],
        bleu3: b.scores[2],
        bleu4: b.scores[3],
        cider: c.mean,
        n_images: candidates.len(),
    })
}

pub(crate) fn words(vocab: &Vocabulary, generated: &[Vec<u32>]) -> Vec<Vec<String>> {
    generated.iter().map(|g| vocab.decode_words(g)).collect()
}
