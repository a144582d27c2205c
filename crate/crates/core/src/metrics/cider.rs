use std::collections::{BTreeMap, BTreeSet};

use super::NGramStats;
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 6.0;

/// CIDEr-D with document frequencies fixed from a reference corpus.
///
/// Per order `n`, each side becomes a vector of `tf · (ln M − ln max(1, df))`
/// over its n-grams (`M` = number of reference images). The similarity to a
/// reference is `Σ min(c, r)·r / (‖c‖·‖r‖)`, damped by
/// `exp(−(l_c − l_r)²/(2σ²))` where lengths count bigrams. Scores average
/// over orders and references and are scaled by 10.
#[derive(Clone, Debug)]
pub struct CiderD {
    df: BTreeMap<String, f64>,
    log_m: f64,
    n_max: usize,
    sigma: f64,
}

struct Vector {
    weights: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub mean: f64,
    pub per_image: Vec<f64>,
}

impl CiderD {
    pub fn new<S: AsRef<str>>(references: &[Vec<Vec<S>>]) -> Result<Self> {
        Self::with_params(references, 4, DEFAULT_SIGMA)
    }

    pub fn with_params<S: AsRef<str>>(references: &[Vec<Vec<S>>], n_max: usize, sigma: f64) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("cider", "empty reference corpus"));
        }
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for (i, refs) in references.iter().enumerate() {
            if refs.is_empty() {
                return Err(Error::invalid("cider", format!("image {i} has no references")));
            }
            let grams: BTreeSet<String> = refs.iter().flat_map(|r| NGramStats::of(r, n_max).counts.into_keys()).collect();
            for g in grams {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderD {
            df,
            log_m: (references.len() as f64).ln(),
            n_max,
            sigma,
        })
    }

    fn vector<S: AsRef<str>>(&self, tokens: &[S]) -> Vector {
        let mut weights = vec![BTreeMap::new(); self.n_max];
        let mut norms = vec![0.0; self.n_max];
        let mut length = 0.0;
        for (g, tf) in NGramStats::of(tokens, self.n_max).counts {
            let n = g.split(' ').count() - 1;
            let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
            let w = tf as f64 * (self.log_m - df.ln());
            norms[n] += w * w;
            if n == 1 {
                length += tf as f64;
            }
            weights[n].insert(g, w);
        }
        for v in &mut norms {
            *v = v.sqrt();
        }
        Vector { weights, norms, length }
    }

    fn similarity(&self, c: &Vector, r: &Vector) -> Vec<f64> {
        let delta = c.length - r.length;
        let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        (0..self.n_max)
            .map(|n| {
                let mut v: f64 = c.weights[n]
                    .iter()
                    .map(|(g, &w)| {
                        let rw = r.weights[n].get(g).copied().unwrap_or(0.0);
                        w.min(rw) * rw
                    })
                    .sum();
                if c.norms[n] != 0.0 && r.norms[n] != 0.0 {
                    v /= c.norms[n] * r.norms[n];
                }
                v * penalty
            })
            .collect()
    }

    /// Score one candidate against the references of its image.
    pub fn score<S: AsRef<str>, R: AsRef<str>>(&self, candidate: &[S], references: &[Vec<R>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::invalid("cider", "image has no references"));
        }
        let c = self.vector(candidate);
        let mut total = 0.0;
        for r in references {
            let sims = self.similarity(&c, &self.vector(r));
            total += sims.iter().sum::<f64>() / self.n_max as f64;
        }
        Ok(total / references.len() as f64 * 10.0)
    }
}

/// Corpus CIDEr-D with document frequencies from `references` themselves.
pub fn cider<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<CiderScores> {
    if candidates.len() != references.len() {
        return Err(Error::invalid(
            "cider",
            format!("{} candidates for {} reference sets", candidates.len(), references.len()),
        ));
    }
    let scorer = CiderD::new(references)?;
    let per_image = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScores { mean, per_image })
}
