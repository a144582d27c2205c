use cptr_core::metrics::{bleu, cider, tokenize, CiderD};
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Dense TF-IDF CIDEr-D: every n-gram in the corpus gets a coordinate.
fn dense_cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], sigma: f64) -> Vec<f64> {
    let grams = |s: &[String], n: usize| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let m = refs.len() as f64;
    let mut out = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut vocab: Vec<Vec<String>> = Vec::new();
        for sents in refs.iter().chain(std::iter::once(&cands.to_vec())) {
            for s in sents {
                for g in grams(s, n) {
                    if !vocab.contains(&g) {
                        vocab.push(g);
                    }
                }
            }
        }
        let df: Vec<f64> = vocab
            .iter()
            .map(|g| refs.iter().filter(|rs| rs.iter().any(|r| grams(r, n).contains(g))).count() as f64)
            .collect();
        let vector = |s: &[String]| -> Vec<f64> {
            let gs = grams(s, n);
            vocab
                .iter()
                .zip(&df)
                .map(|(g, d)| gs.iter().filter(|x| *x == g).count() as f64 * (m.ln() - d.max(1.0).ln()))
                .collect()
        };
        for (i, c) in cands.iter().enumerate() {
            let vc = vector(c);
            let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in &refs[i] {
                let vr = vector(r);
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut sim: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                if nc != 0.0 && nr != 0.0 {
                    sim /= nc * nr;
                }
                let delta = c.len().saturating_sub(1) as f64 - r.len().saturating_sub(1) as f64;
                acc += sim * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            }
            out[i] += acc / refs[i].len() as f64 / 4.0 * 10.0;
        }
    }
    out
}

fn corpus() -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let refs = vec![
        vec![toks("a red circle left of a blue square"), toks("a red circle beside a blue square")],
        vec![toks("a single green triangle")],
        vec![toks("a yellow square above a red circle"), toks("a yellow box over a red circle")],
    ];
    let cands = vec![
        toks("a red circle left of a blue circle"),
        toks("a single green triangle"),
        toks("a red square above a yellow circle"),
    ];
    (cands, refs)
}

#[test]
fn cider_matches_dense_oracle() {
    let (cands, refs) = corpus();
    let expected = dense_cider(&cands, &refs, 6.0);
    let got = cider(&cands, &refs).unwrap();
    for (g, e) in got.per_image.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-9, "{g} vs {e}");
    }
    let mean = expected.iter().sum::<f64>() / 3.0;
    assert!((got.mean - mean).abs() < 1e-9);
}

#[test]
fn cider_with_other_sigma_matches_oracle() {
    let (cands, refs) = corpus();
    let expected = dense_cider(&cands, &refs, 2.0);
    let scorer = CiderD::with_params(&refs, 4, 2.0).unwrap();
    for i in 0..3 {
        let g = scorer.score(&cands[i], &refs[i]).unwrap();
        assert!((g - expected[i]).abs() < 1e-9);
    }
}

#[test]
fn candidate_equal_to_its_single_distinct_reference_scores_ten() {
    let refs = vec![
        vec![toks("a single red circle")],
        vec![toks("a blue square left of a green triangle")],
        vec![toks("a yellow circle above a red square")],
    ];
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    let got = cider(&cands, &refs).unwrap();
    for s in &got.per_image {
        assert!((s - 10.0).abs() < 1e-9, "{s}");
    }
}

#[test]
fn bleu_four_of_exact_copies_is_one() {
    let (_, refs) = corpus();
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    let b = bleu(&cands, &refs, 4).unwrap();
    for s in &b.scores {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn tokenize_is_idempotent_through_join(s in "[a-zA-Z ,.!?'-]{0,40}") {
        let t = tokenize(&s);
        prop_assert_eq!(tokenize(&t.join(" ")), t.clone());
        prop_assert!(t.iter().all(|w| !w.is_empty() && w.chars().all(|c| c.is_lowercase())));
    }

    #[test]
    fn cider_is_bounded_and_nonnegative(
        words in proptest::collection::vec(proptest::collection::vec(0usize..6, 1..8), 3..6)
    ) {
        let lex = ["a", "red", "circle", "left", "of", "square"];
        let sents: Vec<Vec<String>> = words.iter().map(|w| w.iter().map(|&i| lex[i].to_string()).collect()).collect();
        let refs: Vec<Vec<Vec<String>>> = sents.iter().map(|s| vec![s.clone()]).collect();
        let cands: Vec<Vec<String>> = sents.iter().rev().cloned().collect();
        let got = cider(&cands, &refs).unwrap();
        for s in got.per_image {
            prop_assert!(s >= -1e-12 && s.is_finite());
        }
    }
}
