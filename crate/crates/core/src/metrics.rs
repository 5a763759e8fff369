//! Automatic evaluation: BLEU-4, ROUGE-L, and a static-embedding similarity
//! F-score. All metrics are pure functions over token id sequences.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenSeq;

/// Smoothing added to zero n-gram precisions so short hypotheses do not
/// collapse the geometric mean to exactly zero.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l_f: f64,
    pub embed_p: f64,
    pub embed_r: f64,
    pub embed_f: f64,
}

fn ngram_counts(ids: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m: HashMap<&[usize], usize> = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and total hypothesis n-grams for one order.
fn modified_counts(hyp: &[usize], refs: &[&[usize]], n: usize) -> (usize, usize) {
    let hcounts = ngram_counts(hyp, n);
    let total: usize = hcounts.values().sum();
    let mut matches = 0usize;
    for (gram, &hc) in &hcounts {
        let best = refs
            .iter()
            .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matches += hc.min(best);
    }
    (matches, total)
}

fn closest_ref_len(hyp_len: usize, refs: &[&[usize]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| {
            (
                (l as i64 - hyp_len as i64).abs(),
                l, // ties toward the shorter reference
            )
        })
        .unwrap()
}

fn bleu_from_stats(matches: [usize; 4], totals: [usize; 4], hyp_len: usize, ref_len: usize) -> f64 {
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if totals[n] == 0 {
            BLEU_EPSILON
        } else if matches[n] == 0 {
            BLEU_EPSILON / totals[n] as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

/// Sentence-level BLEU-4 against one or more references.
pub fn bleu4(hypothesis: &TokenSeq, references: &[TokenSeq]) -> Result<f64> {
    if hypothesis.is_empty() {
        return Err(Error::Invalid("empty hypothesis".into()));
    }
    if references.is_empty() || references.iter().all(|r| r.is_empty()) {
        return Err(Error::EmptyReference);
    }
    let refs: Vec<&[usize]> = references.iter().map(|r| r.ids.as_slice()).collect();
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for n in 1..=4 {
        let (m, t) = modified_counts(&hypothesis.ids, &refs, n);
        matches[n - 1] = m;
        totals[n - 1] = t;
    }
    Ok(bleu_from_stats(
        matches,
        totals,
        hypothesis.len(),
        closest_ref_len(hypothesis.len(), &refs),
    ))
}

/// Corpus-level BLEU-4: n-gram statistics are pooled over all pairs before
/// combining, as in the standard corpus formulation.
pub fn bleu4_corpus(pairs: &[(TokenSeq, Vec<TokenSeq>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, references) in pairs {
        if hyp.is_empty() {
            return Err(Error::Invalid("empty hypothesis".into()));
        }
        if references.is_empty() {
            return Err(Error::EmptyReference);
        }
        let refs: Vec<&[usize]> = references.iter().map(|r| r.ids.as_slice()).collect();
        for n in 1..=4 {
            let (m, t) = modified_counts(&hyp.ids, &refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        hyp_len += hyp.len();
        ref_len += closest_ref_len(hyp.len(), &refs);
    }
    Ok(bleu_from_stats(matches, totals, hyp_len, ref_len))
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for &x in a {
        let mut prev = 0;
        for (j, &y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// ROUGE-L precision, recall, and F1 from the longest common subsequence.
pub fn rouge_l(hypothesis: &TokenSeq, reference: &TokenSeq) -> Result<(f64, f64, f64)> {
    if hypothesis.is_empty() || reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let l = lcs_len(&hypothesis.ids, &reference.ids) as f64;
    let p = l / hypothesis.len() as f64;
    let r = l / reference.len() as f64;
    let f = if l == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching token-embedding similarity. Precision averages, over
/// hypothesis tokens, the best cosine against any reference token (and
/// symmetrically for recall); raw cosines are mapped from [−1, 1] to [0, 1]
/// via (x+1)/2 before combining.
pub fn embed_score(
    embeddings: &Array2<f64>,
    hypothesis: &TokenSeq,
    reference: &TokenSeq,
) -> Result<(f64, f64, f64)> {
    if hypothesis.is_empty() || reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let v = embeddings.nrows();
    for &t in hypothesis.ids.iter().chain(&reference.ids) {
        if t >= v {
            return Err(Error::Invalid(format!("token id {t} not embeddable")));
        }
    }
    let row = |t: usize| embeddings.row(t).to_vec();
    let best = |from: &[usize], to: &[usize]| -> f64 {
        let mut sum = 0.0;
        for &a in from {
            let ea = row(a);
            let m = to
                .iter()
                .map(|&b| cosine(&ea, &row(b)))
                .fold(f64::NEG_INFINITY, f64::max);
            sum += m;
        }
        sum / from.len() as f64
    };
    let p = (best(&hypothesis.ids, &reference.ids) + 1.0) / 2.0;
    let r = (best(&reference.ids, &hypothesis.ids) + 1.0) / 2.0;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

pub fn report(
    embeddings: &Array2<f64>,
    hypothesis: &TokenSeq,
    reference: &TokenSeq,
) -> Result<MetricReport> {
    let bleu = bleu4(hypothesis, std::slice::from_ref(reference))?;
    let (_, _, rouge_f) = rouge_l(hypothesis, reference)?;
    let (ep, er, ef) = embed_score(embeddings, hypothesis, reference)?;
    Ok(MetricReport {
        bleu4: bleu,
        rouge_l_f: rouge_f,
        embed_p: ep,
        embed_r: er,
        embed_f: ef,
    })
}

/// Mean of per-instance reports (BLEU additionally gets the pooled corpus
/// variant from [`bleu4_corpus`], passed in by the caller).
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(MetricReport {
        bleu4: reports.iter().map(|r| r.bleu4).sum::<f64>() / n,
        rouge_l_f: reports.iter().map(|r| r.rouge_l_f).sum::<f64>() / n,
        embed_p: reports.iter().map(|r| r.embed_p).sum::<f64>() / n,
        embed_r: reports.iter().map(|r| r.embed_r).sum::<f64>() / n,
        embed_f: reports.iter().map(|r| r.embed_f).sum::<f64>() / n,
    })
}

/// Aligned plain-text table over named rows of metric values.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>10} {:>10}\n",
        "system", "BLEU-4", "ROUGE-L", "embed-F"
    ));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4}\n",
            name, r.bleu4, r.rouge_l_f, r.embed_f
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::randn_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec())
    }

    #[test]
    fn bleu_identity_is_one() {
        let h = seq(&[1, 2, 3, 4, 5]);
        assert!((bleu4(&h, &[h.clone()]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_no_overlap_is_tiny() {
        let h = seq(&[1, 2, 3, 4, 5]);
        let r = seq(&[6, 7, 8, 9, 10]);
        let b = bleu4(&h, &[r]).unwrap();
        assert!(b < 1e-2, "{b}");
        assert!(b > 0.0);
    }

    #[test]
    fn bleu_empty_reference_errors() {
        let h = seq(&[1]);
        match bleu4(&h, &[]) {
            Err(Error::EmptyReference) => {}
            other => panic!("{other:?}"),
        }
    }

    /// Brute-force BLEU oracle with explicit clipping and brevity penalty.
    fn bleu_oracle(hyp: &[usize], rf: &[usize]) -> f64 {
        let mut logs = 0.0;
        for n in 1..=4 {
            let hgrams: Vec<&[usize]> = if hyp.len() >= n {
                hyp.windows(n).collect()
            } else {
                vec![]
            };
            let total = hgrams.len();
            let mut matched = 0usize;
            let mut used: Vec<&[usize]> = Vec::new();
            for g in &hgrams {
                let in_ref = if rf.len() >= n {
                    rf.windows(n).filter(|w| w == g).count()
                } else {
                    0
                };
                let already = used.iter().filter(|u| *u == g).count();
                if already < in_ref {
                    matched += 1;
                    used.push(g);
                }
            }
            let p = if total == 0 {
                BLEU_EPSILON
            } else if matched == 0 {
                BLEU_EPSILON / total as f64
            } else {
                matched as f64 / total as f64
            };
            logs += p.ln();
        }
        let bp = if hyp.len() >= rf.len() {
            1.0
        } else {
            (1.0 - rf.len() as f64 / hyp.len() as f64).exp()
        };
        bp * (logs / 4.0).exp()
    }

    #[test]
    fn bleu_matches_bruteforce_oracle() {
        // Includes the 6-vs-7-token pair with partial n-gram overlap.
        let cases: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![1, 2, 3, 4, 9, 10], vec![1, 2, 3, 4, 5, 6, 7]),
            (vec![1, 1, 1, 1], vec![1, 1]),
            (vec![5, 6, 7, 8, 9], vec![5, 6, 7, 8, 9]),
            (vec![2, 3], vec![1, 2, 3, 4]),
            (vec![4, 4, 4, 4, 4, 4, 4, 4], vec![4, 4, 4]),
            (vec![1, 2, 1, 2, 1, 2], vec![2, 1, 2, 1]),
        ];
        for (h, r) in cases {
            let got = bleu4(&seq(&h), &[seq(&r)]).unwrap();
            let want = bleu_oracle(&h, &r);
            assert!(
                (got - want).abs() < 1e-12,
                "hyp {h:?} ref {r:?}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn rouge_worked_example() {
        // hyp "a c d" vs ref "a b c d": LCS 3.
        let (p, r, f) = rouge_l(&seq(&[1, 3, 4]), &seq(&[1, 2, 3, 4])).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        assert!((r - 0.75).abs() < 1e-12);
        assert!((f - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let a = seq(&[1, 2, 3]);
        assert_eq!(rouge_l(&a, &a).unwrap(), (1.0, 1.0, 1.0));
        let b = seq(&[4, 5, 6]);
        assert_eq!(rouge_l(&a, &b).unwrap(), (0.0, 0.0, 0.0));
    }

    /// Exponential-time LCS oracle over all subsequences (inputs kept tiny).
    fn lcs_oracle(a: &[usize], b: &[usize]) -> usize {
        fn rec(a: &[usize], b: &[usize]) -> usize {
            match (a.split_last(), b.split_last()) {
                (Some((&x, ra)), Some((&y, rb))) => {
                    if x == y {
                        rec(ra, rb) + 1
                    } else {
                        rec(ra, b).max(rec(a, rb))
                    }
                }
                _ => 0,
            }
        }
        rec(a, b)
    }

    #[test]
    fn rouge_matches_lcs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..20 {
            let a: Vec<usize> = (0..8).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
            let l = lcs_oracle(&a, &b) as f64;
            let (p, r, _) = rouge_l(&seq(&a), &seq(&b)).unwrap();
            assert!((p - l / 8.0).abs() < 1e-12);
            assert!((r - l / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_identity_is_one() {
        let emb = randn_array(&mut ChaCha8Rng::seed_from_u64(1), 10, 4, 1.0);
        let h = seq(&[1, 2, 3]);
        let (p, r, f) = embed_score(&emb, &h, &h).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_orthogonal_maps_to_half() {
        let mut emb = Array2::zeros((4, 4));
        for i in 0..4 {
            emb[[i, i]] = 1.0;
        }
        let (p, r, f) = embed_score(&emb, &seq(&[0, 1]), &seq(&[2, 3])).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embed_matches_pairwise_oracle() {
        let emb = randn_array(&mut ChaCha8Rng::seed_from_u64(2), 12, 5, 1.0);
        let h = vec![0usize, 3, 7, 7];
        let r = vec![2usize, 3, 11];
        let (p, rr, _) = embed_score(&emb, &seq(&h), &seq(&r)).unwrap();
        let cos = |a: usize, b: usize| {
            let ea: Vec<f64> = emb.row(a).to_vec();
            let eb: Vec<f64> = emb.row(b).to_vec();
            cosine(&ea, &eb)
        };
        let mut psum = 0.0;
        for &a in &h {
            psum += r.iter().map(|&b| cos(a, b)).fold(f64::NEG_INFINITY, f64::max);
        }
        let mut rsum = 0.0;
        for &b in &r {
            rsum += h.iter().map(|&a| cos(a, b)).fold(f64::NEG_INFINITY, f64::max);
        }
        assert!((p - (psum / 4.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((rr - (rsum / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let pairs = vec![
            (seq(&[1, 2, 3, 4]), vec![seq(&[1, 2, 3, 4])]),
            (seq(&[5, 6, 7, 8]), vec![seq(&[5, 9, 10, 11])]),
        ];
        let pooled = bleu4_corpus(&pairs).unwrap();
        // Pooled counts: 5/8 unigrams, 3/6 bigrams, 2/4 trigrams, 1/2
        // 4-grams; geometric mean of those, BP = 1.
        let want = (0.625f64 * 0.5 * 0.5 * 0.5).powf(0.25);
        assert!((pooled - want).abs() < 1e-12, "{pooled} vs {want}");
        // Distinct from averaging the two sentence scores (1.0 and ~0).
        let s1 = bleu4(&pairs[0].0, &pairs[0].1).unwrap();
        let s2 = bleu4(&pairs[1].0, &pairs[1].1).unwrap();
        assert!((pooled - (s1 + s2) / 2.0).abs() > 1e-2);
    }

    #[test]
    fn table_formatting_contains_columns() {
        let r = MetricReport {
            bleu4: 0.5,
            rouge_l_f: 0.25,
            embed_p: 0.7,
            embed_r: 0.7,
            embed_f: 0.7,
        };
        let t = format_table(&[("delorean".into(), r)]);
        assert!(t.contains("BLEU-4"));
        assert!(t.contains("0.2500"));
    }
}
