//! Text-generation metrics (BLEU-1..4, ROUGE-L, METEOR-lite) and the
//! rule-based clinical-efficacy scorer.
//!
//! METEOR here uses exact plus suffix-stem unigram matching only (no synonym
//! database) and is reported as "meteor_lite" everywhere.

mod labeler;

pub use labeler::{
    clinical_efficacy, extract_labels, extract_labels_with, CeReport, LabelScore, LabelVector,
    LabelerRules, MetricsError, LABEL_COUNT, LABEL_NAMES,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Corpus-level scores in [0,1], shaped like the usual results-table row.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for i in 0..=tokens.len() - n {
        *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
    }
    map
}

/// Clipped k-gram matches and candidate k-gram total.
fn clipped_counts(candidate: &[String], reference: &[String], k: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, k);
    let refs = ngram_counts(reference, k);
    let mut clipped = 0;
    let mut total = 0;
    for (gram, &c) in &cand {
        total += c;
        clipped += c.min(refs.get(gram).copied().unwrap_or(0));
    }
    (clipped, total)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Sentence BLEU-n: geometric mean of modified k-gram precisions for k=1..n
/// with brevity penalty; 0 when any precision is 0 or the candidate is empty.
pub fn bleu(candidate: &[String], reference: &[String], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "bleu order must be 1..4");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (clipped, total) = clipped_counts(candidate, reference, k);
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    brevity_penalty(candidate.len(), reference.len()) * (log_sum / n as f64).exp()
}

/// Corpus BLEU-n: k-gram counts pooled over all pairs before the geometric
/// mean, with the brevity penalty on total lengths.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "bleu order must be 1..4");
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut clipped = 0;
        let mut total = 0;
        for (cand, reference) in pairs {
            let (c, t) = clipped_counts(cand, reference, k);
            clipped += c;
            total += t;
        }
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c: usize = pairs.iter().map(|(cand, _)| cand.len()).sum();
    let r: usize = pairs.iter().map(|(_, rf)| rf.len()).sum();
    brevity_penalty(c, r) * (log_sum / n as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure from the LCS length.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Deterministic suffix stemmer used for METEOR-lite matching.
/// Rules, first match wins: ies->y, -ing, -ed, -es (after s/x/z/ch/sh), -s.
pub fn stem(word: &str) -> String {
    let w = word;
    let n = w.len();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if n > 5 && w.ends_with("ing") {
        return w[..n - 3].to_string();
    }
    if n > 4 && w.ends_with("ed") {
        return w[..n - 2].to_string();
    }
    if n > 4
        && w.ends_with("es")
        && ["ses", "xes", "zes", "ches", "shes"]
            .iter()
            .any(|suf| w.ends_with(suf))
    {
        return w[..n - 2].to_string();
    }
    if n > 3 && w.ends_with('s') && !w.ends_with("ss") {
        return w[..n - 1].to_string();
    }
    w.to_string()
}

/// Greedy in-order unigram alignment: exact matches first, then stem matches
/// over the leftovers. Returns (candidate index, reference index) pairs.
fn align(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_match: Vec<Option<usize>> = vec![None; candidate.len()];
    for (i, c) in candidate.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            if !ref_used[j] && c == r {
                ref_used[j] = true;
                cand_match[i] = Some(j);
                break;
            }
        }
    }
    for (i, c) in candidate.iter().enumerate() {
        if cand_match[i].is_some() {
            continue;
        }
        let cs = stem(c);
        for (j, r) in reference.iter().enumerate() {
            if !ref_used[j] && cs == stem(r) {
                ref_used[j] = true;
                cand_match[i] = Some(j);
                break;
            }
        }
    }
    cand_match
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

fn chunk_count(matches: &[(usize, usize)]) -> usize {
    if matches.is_empty() {
        return 0;
    }
    let mut chunks = 1;
    for w in matches.windows(2) {
        let (c0, r0) = w[0];
        let (c1, r1) = w[1];
        if c1 != c0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    chunks
}

/// METEOR-lite: F_mean = 10PR/(R+9P) over aligned unigrams, fragmentation
/// penalty 0.5*(chunks/matches)^3.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let matches = align(candidate, reference);
    let m = matches.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = chunk_count(&matches) as f64;
    let penalty = 0.5 * (chunks / m).powi(3);
    f_mean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn bleu_identity_is_one() {
        let t = toks("the heart is enlarged");
        for n in 1..=4 {
            assert!((bleu(&t, &t, n) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_brevity_penalty_hand_oracle() {
        // candidate "the cat sat" (3 tokens) vs reference "the cat sat on":
        // p1 = 1, BP = exp(1 - 4/3).
        let c = toks("the cat sat");
        let r = toks("the cat sat on");
        let expected = (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu(&c, &r, 1) - expected).abs() < 1e-12);
        assert!((expected - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn bleu_clipped_counts() {
        // "the the the" vs "the cat": clipped unigram precision = 1/3.
        let c = toks("the the the");
        let r = toks("the cat");
        let (clipped, total) = clipped_counts(&c, &r, 1);
        assert_eq!((clipped, total), (1, 3));
        // BP = exp(1 - 2/3) is not applied since c > r; precision = 1/3.
        assert!((bleu(&c, &r, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_candidate_or_no_overlap_is_zero() {
        let c: Vec<String> = vec![];
        let r = toks("a b");
        assert_eq!(bleu(&c, &r, 1), 0.0);
        assert_eq!(bleu(&toks("x y z"), &r, 1), 0.0);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let pairs = vec![
            (toks("a b"), toks("a b")),
            (toks("c x"), toks("c d")),
        ];
        // Pooled unigrams: clipped 3 of 4, identical lengths, BP = 1.
        assert!((corpus_bleu(&pairs, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rouge_identity_disjoint_and_hand_case() {
        let t = toks("a b c d");
        assert!((rouge_l(&t, &t) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t, &toks("x y")), 0.0);
        // "a b c d" vs "a c b d": LCS = 3, P = R = 3/4, F = 0.75.
        assert!((rouge_l(&t, &toks("a c b d")) - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&[], &t), 0.0);
    }

    #[test]
    fn lcs_symmetric() {
        let a = toks("a b c d e");
        let b = toks("b a d c e");
        assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
    }

    #[test]
    fn stemmer_fixed_word_list() {
        let cases = [
            ("opacities", "opacity"),
            ("opacity", "opacity"),
            ("nodules", "nodule"),
            ("nodule", "nodule"),
            ("masses", "mass"),
            ("mass", "mass"),
            ("effusions", "effusion"),
            ("thickening", "thicken"),
            ("thickened", "thicken"),
            ("changes", "change"),
            ("lungs", "lung"),
            ("is", "is"),
            ("calcified", "calcifi"),
        ];
        for (w, s) in cases {
            assert_eq!(stem(w), s, "stem({w})");
        }
    }

    #[test]
    fn meteor_identity_matches_self_score_formula() {
        // Identical sequences of length m: P = R = 1, one chunk,
        // score = 1 - 0.5 * (1/m)^3.
        let t = toks("lungs are clear");
        let m = 3.0f64;
        let expected = 1.0 - 0.5 * (1.0 / m).powi(3);
        assert!((meteor_lite(&t, &t) - expected).abs() < 1e-12);
    }

    #[test]
    fn meteor_disjoint_is_zero() {
        assert_eq!(meteor_lite(&toks("a b"), &toks("x y")), 0.0);
    }

    #[test]
    fn meteor_counts_stem_matches() {
        // "opacities" aligns with "opacity" through the stemmer.
        let c = toks("opacities seen");
        let r = toks("opacity seen");
        let m = 2.0f64;
        // Both tokens align in order -> 1 chunk.
        let expected = 1.0 - 0.5 * (1.0 / m).powi(3);
        assert!((meteor_lite(&c, &r) - expected).abs() < 1e-12);
    }

    #[test]
    fn meteor_fragmentation_penalty() {
        // Reversed two-token sequence: both match but in two chunks.
        let c = toks("b a");
        let r = toks("a b");
        let f_mean = 1.0; // P = R = 1
        let expected = f_mean * (1.0 - 0.5 * (2.0f64 / 2.0).powi(3));
        assert!((meteor_lite(&c, &r) - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_truncation_drives_to_zero() {
        let r = toks("the heart is enlarged");
        let c = toks("lungs clear completely");
        assert_eq!(bleu(&c, &r, 1), 0.0);
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let cases = [
            ("a b c", "a b c d e"),
            ("a a a a", "a"),
            ("x", "y"),
            ("the cat sat on the mat", "the cat sat"),
        ];
        for (c, r) in cases {
            let (c, r) = (toks(c), toks(r));
            for n in 1..=4 {
                let v = bleu(&c, &r, n);
                assert!((0.0..=1.0).contains(&v));
            }
            assert!((0.0..=1.0).contains(&rouge_l(&c, &r)));
            assert!((0.0..=1.0).contains(&meteor_lite(&c, &r)));
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn token_list() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec("[a-e]{1,2}", 1..10)
        }

        proptest! {
            #[test]
            fn scores_stay_in_unit_interval(c in token_list(), r in token_list()) {
                for n in 1..=4 {
                    prop_assert!((0.0..=1.0).contains(&bleu(&c, &r, n)));
                }
                prop_assert!((0.0..=1.0).contains(&rouge_l(&c, &r)));
                prop_assert!((0.0..=1.0).contains(&meteor_lite(&c, &r)));
            }

            #[test]
            fn self_scores(t in token_list()) {
                for n in 1..=4 {
                    if t.len() >= n {
                        prop_assert!((bleu(&t, &t, n) - 1.0).abs() < 1e-12);
                    }
                }
                prop_assert!((rouge_l(&t, &t) - 1.0).abs() < 1e-12);
                let m = t.len() as f64;
                let expected = 1.0 - 0.5 * (1.0 / m).powi(3);
                prop_assert!((meteor_lite(&t, &t) - expected).abs() < 1e-12);
            }

            #[test]
            fn lcs_is_symmetric(a in token_list(), b in token_list()) {
                prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
            }
        }
    }
}
