use std::path::Path;

use crate::data::manifest::{self, Manifest, Split};
use crate::data::ppm;
use crate::data::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::model::ModelConfig;
use crate::tensor::{Element, Tensor};
use crate::vision;

/// Images of one split, already patchified, with their captions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_patches: usize,
    pub patch_dim: usize,
    /// Manifest path of each image.
    pub paths: Vec<String>,
    /// Flattened `[N, P²·3]` patch matrix per image.
    pub patches: Vec<Vec<f32>>,
    /// Caption ids per image, without BOS/EOS.
    pub captions: Vec<Vec<Vec<u32>>>,
    /// Tokenized reference captions per image.
    pub references: Vec<Vec<Vec<String>>>,
}

impl Dataset {
    /// Load every image of `split`. Unreadable images are an error unless
    /// `allow_missing`, in which case they are skipped and returned.
    pub fn load(
        manifest_path: &Path,
        manifest: &Manifest,
        split: Split,
        vocab: &Vocabulary,
        cfg: &ModelConfig,
        allow_missing: bool,
    ) -> Result<(Self, Vec<String>)> {
        let entries = manifest.split(split);
        if entries.is_empty() {
            return Err(Error::invalid("dataset", format!("split `{split}` has no images")));
        }
        let mut ds = Dataset::empty(cfg);
        let mut missing = Vec::new();
        for e in entries {
            let path = manifest::resolve(manifest_path, e);
            let img = match ppm::read_file(&path) {
                Ok(img) => img,
                Err(err) if allow_missing => {
                    missing.push(format!("{}: {err}", e.path));
                    continue;
                }
                Err(err) => return Err(err),
            };
            let seq = vision::prepare(&img, cfg.image_height, cfg.image_width, cfg.patch_size)?;
            let caps = e.captions.iter().map(|c| vocab.encode(c)).collect();
            let refs = e.captions.iter().map(|c| tokenize(c)).collect();
            ds.push(e.path.clone(), seq.data, caps, refs);
        }
        if ds.is_empty() {
            return Err(Error::invalid("dataset", format!("no readable images in split `{split}`")));
        }
        Ok((ds, missing))
    }

    pub fn empty(cfg: &ModelConfig) -> Self {
        Dataset {
            n_patches: cfg.n_patches(),
            patch_dim: cfg.patch_dim(),
            paths: Vec::new(),
            patches: Vec::new(),
            captions: Vec::new(),
            references: Vec::new(),
        }
    }

    pub fn push(&mut self, path: String, patches: Vec<f32>, captions: Vec<Vec<u32>>, references: Vec<Vec<String>>) {
        assert_eq!(patches.len(), self.n_patches * self.patch_dim, "patch matrix size");
        self.paths.push(path);
        self.patches.push(patches);
        self.captions.push(captions);
        self.references.push(references);
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// First `n` images.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            n_patches: self.n_patches,
            patch_dim: self.patch_dim,
            paths: self.paths[..n].to_vec(),
            patches: self.patches[..n].to_vec(),
            captions: self.captions[..n].to_vec(),
            references: self.references[..n].to_vec(),
        }
    }

    /// `[B, N, P²·3]` patches for `images`.
    pub fn patch_tensor<F: Element>(&self, images: &[usize]) -> Tensor<F> {
        let data = images
            .iter()
            .flat_map(|&i| self.patches[i].iter().map(|&v| F::of(v as f64)))
            .collect();
        Tensor::new(vec![images.len(), self.n_patches, self.patch_dim], data).expect("non-empty selection")
    }

    /// `(image, caption)` index pairs, in order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.captions
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (0..c.len()).map(move |j| (i, j)))
            .collect()
    }
}

/// Teacher-forcing batch padded to its longest caption.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBatch {
    pub images: Vec<usize>,
    pub len: usize,
    /// `BOS, w₁ … w_n, PAD …`, row-major `[B, len]`.
    pub inputs: Vec<u32>,
    /// `w₁ … w_n, EOS, PAD …`.
    pub targets: Vec<u32>,
    /// True where `targets` is not padding.
    pub mask: Vec<bool>,
}

impl CaptionBatch {
    /// Captions longer than `max_len − 1` words are truncated (the EOS is kept).
    pub fn new(images: Vec<usize>, captions: &[&[u32]], max_len: usize) -> Result<Self> {
        if captions.is_empty() || captions.len() != images.len() || max_len == 0 {
            return Err(Error::invalid("caption batch", "need one caption per image and max_len ≥ 1"));
        }
        let words = |c: &[u32]| c.len().min(max_len - 1);
        let len = captions.iter().map(|c| words(c) + 1).max().expect("non-empty");
        let mut inputs = vec![PAD; captions.len() * len];
        let mut targets = vec![PAD; captions.len() * len];
        let mut mask = vec![false; captions.len() * len];
        for (r, c) in captions.iter().enumerate() {
            let n = words(c);
            let row = r * len;
            inputs[row] = BOS;
            inputs[row + 1..row + 1 + n].copy_from_slice(&c[..n]);
            targets[row..row + n].copy_from_slice(&c[..n]);
            targets[row + n] = EOS;
            mask[row..row + n + 1].iter_mut().for_each(|m| *m = true);
        }
        Ok(CaptionBatch {
            images,
            len,
            inputs,
            targets,
            mask,
        })
    }

    pub fn batch(&self) -> usize {
        self.images.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
