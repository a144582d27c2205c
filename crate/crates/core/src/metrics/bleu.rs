use super::NGramStats;

/// Corpus-level BLEU-n for n = 1..=n_max.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuScores {
    pub scores: Vec<f64>,
    /// Pooled modified precision per order.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

/// Clipped n-gram matches and candidate n-gram total for one sentence.
fn clipped<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let c = NGramStats::of(cand, n);
    let rs: Vec<NGramStats> = refs.iter().map(|r| NGramStats::of(r, n)).collect();
    let mut matched = 0;
    let mut total = 0;
    for (g, count) in c.order(n) {
        let max_ref = rs.iter().map(|r| r.counts.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
        matched += count.min(max_ref);
        total += count;
    }
    (matched, total)
}

/// Clipped precision of a single candidate at order `n`; 0 when the
/// candidate has no grams of that order.
pub fn modified_precision<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> f64 {
    let (m, t) = clipped(cand, refs, n);
    if t == 0 {
        0.0
    } else {
        m as f64 / t as f64
    }
}

/// Reference length closest to `c`, shorter on ties.
fn effective_ref_len<S>(c: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
        .unwrap_or(0)
}

/// `candidates[i]` is scored against `references[i]`. Matches and totals are
/// pooled over the corpus before taking ratios.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>], n_max: usize) -> crate::Result<BleuScores> {
    if candidates.len() != references.len() {
        return Err(crate::Error::invalid(
            "bleu",
            format!("{} candidates for {} reference sets", candidates.len(), references.len()),
        ));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(crate::Error::invalid("bleu", format!("image {i} has no references")));
    }
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        for n in 1..=n_max {
            let (m, t) = clipped(cand, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c_len += cand.len();
        r_len += effective_ref_len(cand.len(), refs);
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let scores = (1..=n_max)
        .map(|k| {
            let ps = &precisions[..k];
            if ps.contains(&0.0) {
                0.0
            } else {
                brevity_penalty * (ps.iter().map(|p| p.ln()).sum::<f64>() / k as f64).exp()
            }
        })
        .collect();
    Ok(BleuScores {
        scores,
        precisions,
        brevity_penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identity_is_one() {
        let c = vec![t("a red circle left of a blue square")];
        let r = vec![vec![t("a red circle left of a blue square")]];
        let b = bleu(&c, &r, 4).unwrap();
        assert_eq!(b.scores, vec![1.0; 4]);
    }

    #[test]
    fn no_shared_unigram_is_zero() {
        let b = bleu(&[t("x y z")], &[vec![t("a b c")]], 4).unwrap();
        assert_eq!(b.scores[0], 0.0);
    }

    #[test]
    fn clipping() {
        assert!((modified_precision(&t("the the the"), &[t("the cat")], 1) - 1.0 / 3.0).abs() < 1e-15);
        let b = bleu(&[t("the the the")], &[vec![t("the cat")]], 1).unwrap();
        assert!((b.scores[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn brevity_penalty_applies_below_reference_length() {
        let b = bleu(&[t("a red circle")], &[vec![t("a red circle left of it")]], 1).unwrap();
        assert!((b.brevity_penalty - (1.0f64 - 6.0 / 3.0).exp()).abs() < 1e-15);
        assert!((b.scores[0] - b.brevity_penalty).abs() < 1e-15);
    }

    #[test]
    fn corpus_pooling_differs_from_sentence_mean() {
        let c = vec![t("a b"), t("c d e f")];
        let r = vec![vec![t("a b")], vec![t("c x y z")]];
        let b = bleu(&c, &r, 1).unwrap();
        // pooled: (2 + 1) / (2 + 4)
        assert!((b.precisions[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_candidate_and_errors() {
        let b = bleu(&[Vec::<String>::new()], &[vec![t("a b")]], 4).unwrap();
        assert_eq!(b.scores, vec![0.0; 4]);
        assert!(bleu(&[t("a")], &[vec![]], 4).is_err());
        assert!(bleu(&[t("a")], &[], 4).is_err());
    }
}
