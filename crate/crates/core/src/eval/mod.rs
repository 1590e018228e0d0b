//! ROUGE-1/2/L with precision, recall, and F1; the stopword-stripped
//! efficiency variant against the source article; length-binned reports;
//! and corpus-level aggregation.
//!
//! Metric words are lowercased whitespace tokens with edge punctuation
//! stripped. Reported lengths count raw whitespace words. n-gram overlap is
//! clipped (multiset intersection); ROUGE-L uses whole-text LCS.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Validation(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Precision/recall/F1 for one metric variant on one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_pr(precision: f64, recall: f64) -> RougeScore {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

/// Clipped n-gram overlap between token sequences:
/// (overlap, candidate n-gram count, reference n-gram count).
pub fn ngram_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand_grams = text::ngrams(candidate, n);
    let ref_grams = text::ngrams(reference, n);
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    for g in &ref_grams {
        *ref_counts.entry(g).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for g in &cand_grams {
        if let Some(count) = ref_counts.get_mut(g) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    (overlap, cand_grams.len(), ref_grams.len())
}

pub fn rouge_n_tokens(candidate: &[String], reference: &[String], n: usize) -> RougeScore {
    let (overlap, cand_total, ref_total) = ngram_overlap(candidate, reference, n);
    if cand_total == 0 || ref_total == 0 {
        return RougeScore::ZERO;
    }
    RougeScore::from_pr(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

/// ROUGE-N on raw texts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    rouge_n_tokens(&text::metric_words(candidate), &text::metric_words(reference), n)
}

/// Longest common subsequence length over token sequences.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_length(candidate, reference) as f64;
    RougeScore::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

/// ROUGE-L on raw texts.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&text::metric_words(candidate), &text::metric_words(reference))
}

/// The bundled English stopword list, one lowercase word per line.
pub fn default_stopwords() -> HashSet<String> {
    include_str!("stopwords_en.txt")
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Loads a stopword file in the same one-word-per-line format.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>, EvalError> {
    let content = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(content
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// ROUGE-L between a summary and its own article after stopword removal,
/// with the summary length (in raw whitespace words) taken before removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rouge_l_vs_article: RougeScore,
    pub mean_summary_length: f64,
}

fn content_words(txt: &str, stopwords: &HashSet<String>) -> Vec<String> {
    text::metric_words(txt)
        .into_iter()
        .filter(|w| !stopwords.contains(w))
        .collect()
}

/// Per-pair efficiency score. An empty stopword set degenerates to plain
/// ROUGE-L against the article.
pub fn efficiency_rouge(
    summary: &str,
    article: &str,
    stopwords: &HashSet<String>,
) -> EfficiencyReport {
    let s = content_words(summary, stopwords);
    let a = content_words(article, stopwords);
    EfficiencyReport {
        rouge_l_vs_article: rouge_l_tokens(&s, &a),
        mean_summary_length: text::whitespace_word_count(summary) as f64,
    }
}

/// Macro-averaged efficiency over (summary, article) pairs.
pub fn efficiency_report<'a, I>(pairs: I, stopwords: &HashSet<String>) -> Result<EfficiencyReport, EvalError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut n = 0usize;
    let mut p = 0.0;
    let mut r = 0.0;
    let mut f = 0.0;
    let mut len = 0.0;
    for (summary, article) in pairs {
        let one = efficiency_rouge(summary, article, stopwords);
        p += one.rouge_l_vs_article.precision;
        r += one.rouge_l_vs_article.recall;
        f += one.rouge_l_vs_article.f1;
        len += one.mean_summary_length;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Validation("no pairs to evaluate".into()));
    }
    let n = n as f64;
    Ok(EfficiencyReport {
        rouge_l_vs_article: RougeScore {
            precision: p / n,
            recall: r / n,
            f1: f / n,
        },
        mean_summary_length: len / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub bin_start: usize,
    /// Exclusive upper edge.
    pub bin_end: usize,
    pub mean_rl_f1: f64,
    pub count: usize,
}

/// Mean ROUGE-L F1 grouped by candidate length: bin k covers
/// [k·width, (k+1)·width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBinReport {
    pub bin_width: usize,
    pub bins: Vec<LengthBin>,
}

pub fn length_bin_report(
    pairs: &[(String, String)],
    bin_width: usize,
) -> Result<LengthBinReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Validation("no pairs to evaluate".into()));
    }
    if bin_width == 0 {
        return Err(EvalError::Validation("bin width must be at least 1".into()));
    }
    let mut grouped: HashMap<usize, (f64, usize)> = HashMap::new();
    for (candidate, reference) in pairs {
        let len = text::whitespace_word_count(candidate);
        let bin = len / bin_width;
        let score = rouge_l(candidate, reference).f1;
        let entry = grouped.entry(bin).or_insert((0.0, 0));
        entry.0 += score;
        entry.1 += 1;
    }
    let lo = *grouped.keys().min().expect("nonempty");
    let hi = *grouped.keys().max().expect("nonempty");
    let bins = (lo..=hi)
        .map(|k| {
            let (sum, count) = grouped.get(&k).copied().unwrap_or((0.0, 0));
            LengthBin {
                bin_start: k * bin_width,
                bin_end: (k + 1) * bin_width,
                mean_rl_f1: if count > 0 { sum / count as f64 } else { 0.0 },
                count,
            }
        })
        .collect();
    Ok(LengthBinReport { bin_width, bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub index: usize,
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
    pub candidate_words: usize,
}

/// Macro-averaged corpus report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRougeReport {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
    pub mean_length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_document: Option<Vec<DocumentScores>>,
}

pub fn evaluate_corpus(
    candidates: &[String],
    references: &[String],
    per_document: bool,
) -> Result<CorpusRougeReport, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::Validation(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(EvalError::Validation("no pairs to evaluate".into()));
    }
    let mut docs = Vec::with_capacity(candidates.len());
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        docs.push(DocumentScores {
            index: i,
            r1: rouge_n(c, r, 1),
            r2: rouge_n(c, r, 2),
            rl: rouge_l(c, r),
            candidate_words: text::whitespace_word_count(c),
        });
    }
    let n = docs.len() as f64;
    let avg = |pick: &dyn Fn(&DocumentScores) -> RougeScore| -> RougeScore {
        let mut p = 0.0;
        let mut r = 0.0;
        let mut f = 0.0;
        for d in &docs {
            let s = pick(d);
            p += s.precision;
            r += s.recall;
            f += s.f1;
        }
        RougeScore {
            precision: p / n,
            recall: r / n,
            f1: f / n,
        }
    };
    Ok(CorpusRougeReport {
        r1: avg(&|d| d.r1),
        r2: avg(&|d| d.r2),
        rl: avg(&|d| d.rl),
        mean_length: docs.iter().map(|d| d.candidate_words as f64).sum::<f64>() / n,
        per_document: per_document.then_some(docs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        text::metric_words(s)
    }

    /// Exponential-time subsequence check used as the LCS oracle on short
    /// strings: enumerate all candidate subsequences.
    fn brute_force_lcs(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = a
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, w)| w)
                .collect();
            // is `sub` a subsequence of b?
            let mut it = b.iter();
            if sub.iter().all(|w| it.any(|y| y == *w)) && sub.len() > best {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn identical_texts_score_one() {
        for n in 1..=3 {
            let s = rouge_n("the cat sat on the mat", "the cat sat on the mat", n);
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let l = rouge_l("a b c", "a b c");
        assert_eq!((l.precision, l.recall, l.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_counted_bigram_case() {
        // candidate bigrams {the cat, cat sat, sat on}; reference {the cat, cat on}
        // only "the cat" overlaps
        let s = rouge_n("the cat sat on", "the cat on", 2);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        let s = rouge_n("aa bb", "cc dd", 1);
        assert_eq!(s, RougeScore::ZERO);
    }

    #[test]
    fn clipping_limits_repeated_matches() {
        // "the the the" vs "the": only one unigram match counts
        let s = rouge_n("the the the", "the", 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
    }

    #[test]
    fn lcs_hand_case() {
        // LCS of (a b c d) and (a c b d) has length 3
        let s = rouge_l("a b c d", "a c b d");
        assert_eq!(lcs_length(&words("a b c d"), &words("a c b d")), 3);
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(rouge_l("", "a b c"), RougeScore::ZERO);
        assert_eq!(rouge_n("", "a b c", 1), RougeScore::ZERO);
    }

    #[test]
    fn metric_tokens_are_case_and_punctuation_insensitive() {
        let s = rouge_n("The CAT sat.", "the cat sat", 1);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn efficiency_summary_equal_to_content_words_has_precision_one() {
        let stop = default_stopwords();
        let article = "the mayor opened a new library in the city";
        // exactly the article minus stopwords
        let summary = "mayor opened new library city";
        let report = efficiency_rouge(summary, article, &stop);
        assert_eq!(report.rouge_l_vs_article.precision, 1.0);
        assert_eq!(report.mean_summary_length, 5.0);
    }

    #[test]
    fn efficiency_empty_after_stopword_removal_scores_zero() {
        let stop = default_stopwords();
        let report = efficiency_rouge("the of and", "mayor opened library", &stop);
        assert_eq!(report.rouge_l_vs_article, RougeScore::ZERO);
    }

    #[test]
    fn efficiency_hand_counts() {
        // content words: summary {mayor, library, tuesday}; article
        // {mayor, opened, library, monday, crowd}; LCS = {mayor, library} = 2
        let stop = default_stopwords();
        let report = efficiency_rouge(
            "the mayor library tuesday",
            "a mayor opened the library monday crowd",
            &stop,
        );
        assert!((report.rouge_l_vs_article.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.rouge_l_vs_article.recall - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_stopword_set_degenerates_to_rouge_l() {
        let none = HashSet::new();
        let report = efficiency_rouge("a b c", "a b c d", &none);
        let plain = rouge_l("a b c", "a b c d");
        assert_eq!(report.rouge_l_vs_article, plain);
    }

    #[test]
    fn length_bins_partition_and_average() {
        let pairs: Vec<(String, String)> = vec![
            ("a b".into(), "a b".into()),                 // len 2, f1 1.0
            ("c d".into(), "x y".into()),                 // len 2, f1 0.0
            ("a b c d e f g h i j k l".into(), "a b c d e f g h i j k l".into()), // len 12, f1 1.0
        ];
        let report = length_bin_report(&pairs, 10).unwrap();
        assert_eq!(report.bins.len(), 2);
        assert_eq!(report.bins[0].count, 2);
        assert!((report.bins[0].mean_rl_f1 - 0.5).abs() < 1e-12);
        assert_eq!(report.bins[1].count, 1);
        let total: usize = report.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, pairs.len());
    }

    #[test]
    fn single_bin_mean_equals_corpus_mean() {
        let pairs: Vec<(String, String)> = vec![
            ("a b".into(), "a c".into()),
            ("d e".into(), "d e".into()),
        ];
        let report = length_bin_report(&pairs, 50).unwrap();
        assert_eq!(report.bins.len(), 1);
        let corpus_mean = (rouge_l("a b", "a c").f1 + rouge_l("d e", "d e").f1) / 2.0;
        assert!((report.bins[0].mean_rl_f1 - corpus_mean).abs() < 1e-12);
    }

    #[test]
    fn corpus_single_pair_equals_pair_scores() {
        let report = evaluate_corpus(
            &["the cat sat on".into()],
            &["the cat on".into()],
            false,
        )
        .unwrap();
        assert_eq!(report.r2, rouge_n("the cat sat on", "the cat on", 2));
    }

    #[test]
    fn corpus_macro_average_of_zero_and_one() {
        let report = evaluate_corpus(
            &["a b".into(), "x y".into()],
            &["a b".into(), "a b".into()],
            false,
        )
        .unwrap();
        assert!((report.r1.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn misaligned_corpus_is_rejected() {
        assert!(evaluate_corpus(&["a".into()], &[], false).is_err());
    }

    #[test]
    fn random_pairs_match_naive_recomputation() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(2024);
        let alphabet = ["u", "v", "w", "x", "y"];
        for _ in 0..50 {
            let make = |rng: &mut StdRng| -> String {
                let len = rng.gen_range(0..=10usize);
                (0..len)
                    .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let cand = make(&mut rng);
            let reference = make(&mut rng);
            let (cw, rw) = (words(&cand), words(&reference));

            // LCS against exhaustive subsequence enumeration
            assert_eq!(lcs_length(&cw, &rw), brute_force_lcs(&cw, &rw));

            // clipped counts against naive multiset intersection
            for n in 1..=2usize {
                let (overlap, ct, rt) = ngram_overlap(&cw, &rw, n);
                let mut naive = 0usize;
                let cg: Vec<&[String]> = text::ngrams(&cw, n);
                let rg: Vec<&[String]> = text::ngrams(&rw, n);
                let mut used = vec![false; rg.len()];
                for g in &cg {
                    for (j, h) in rg.iter().enumerate() {
                        if !used[j] && g == h {
                            used[j] = true;
                            naive += 1;
                            break;
                        }
                    }
                }
                assert_eq!(overlap, naive);
                assert_eq!(ct, cg.len());
                assert_eq!(rt, rg.len());
            }
        }
    }

    proptest! {
        #[test]
        fn precision_of_one_side_is_recall_of_the_other(
            a in proptest::collection::vec("[a-e]", 0..12),
            b in proptest::collection::vec("[a-e]", 0..12),
        ) {
            let (sa, sb) = (a.join(" "), b.join(" "));
            for n in 1..=2usize {
                let fwd = rouge_n(&sa, &sb, n);
                let rev = rouge_n(&sb, &sa, n);
                prop_assert!((fwd.precision - rev.recall).abs() < 1e-12);
            }
            let fwd = rouge_l(&sa, &sb);
            let rev = rouge_l(&sb, &sa);
            prop_assert!((fwd.precision - rev.recall).abs() < 1e-12);
        }

        #[test]
        fn extending_candidate_never_reduces_lcs_recall(
            a in proptest::collection::vec("[a-d]", 1..10),
            b in proptest::collection::vec("[a-d]", 1..10),
            extra in "[a-d]",
        ) {
            let base = a.join(" ");
            let extended = format!("{base} {extra}");
            let reference = b.join(" ");
            let before = rouge_l(&base, &reference).recall;
            let after = rouge_l(&extended, &reference).recall;
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn scores_stay_in_unit_interval(
            a in proptest::collection::vec("[a-c]", 0..8),
            b in proptest::collection::vec("[a-c]", 0..8),
        ) {
            let (sa, sb) = (a.join(" "), b.join(" "));
            for s in [rouge_n(&sa, &sb, 1), rouge_n(&sa, &sb, 2), rouge_l(&sa, &sb)] {
                prop_assert!((0.0..=1.0).contains(&s.precision));
                prop_assert!((0.0..=1.0).contains(&s.recall));
                prop_assert!((0.0..=1.0).contains(&s.f1));
            }
        }
    }
}
