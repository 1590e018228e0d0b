//! Word-level tokenization shared by corpus statistics and ROUGE metrics.
//!
//! Metric words are lowercased whitespace tokens with punctuation stripped
//! from the edges; interior punctuation (e.g. the apostrophe in `don't`)
//! survives. Tokens that are pure punctuation disappear.

/// Splits text into lowercase words, trimming non-alphanumeric characters
/// from both edges of each whitespace token. Empty results are dropped.
pub fn metric_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|tok| !tok.is_empty())
        .map(|tok| tok.to_lowercase())
        .collect()
}

/// Raw whitespace token count, used for mean-length statistics.
pub fn whitespace_word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// All `n`-grams of `words` in order. Empty when `words.len() < n`.
pub fn ngrams(words: &[String], n: usize) -> Vec<&[String]> {
    if n == 0 || words.len() < n {
        return Vec::new();
    }
    words.windows(n).collect()
}
