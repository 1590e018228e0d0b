//! Article/summary dataset ingestion, truncation, and abstractiveness
//! statistics.
//!
//! Datasets are line-delimited JSON records with required `article` and
//! `summary` string fields and an optional `id`. Statistics cover split
//! sizes, the fraction of summary n-grams absent from the article, and mean
//! lengths in whitespace words.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text;
use crate::tokenizer::Vocabulary;

/// Tokens an article may occupy after encoding; longer articles keep the prefix.
pub const DEFAULT_MAX_ARTICLE_TOKENS: usize = 512;
/// Tokens a summary may occupy after encoding.
pub const DEFAULT_MAX_SUMMARY_TOKENS: usize = 110;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("document {id}: {message}")]
    Validation { id: String, message: String },
    #[error("empty corpus: no documents in any split")]
    EmptyCorpus,
}

/// One article–summary pair. The unit of every corpus operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub article: String,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!(
                "unknown split name {other:?} (expected train, validation, or test)"
            )),
        }
    }
}

/// An ordered sequence of documents under one split name. Order is file order
/// and is stable across reloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub documents: Vec<Document>,
}

/// Dataset-level statistics: sizes, novel n-gram fractions for n = 1..=4,
/// and mean lengths in whitespace words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub split_sizes: BTreeMap<String, usize>,
    /// Index n-1 holds the macro-averaged novel n-gram fraction; `None` when
    /// no document admits the statistic.
    pub novel_ngram_fraction: [Option<f64>; 4],
    pub mean_article_words: f64,
    pub mean_summary_words: f64,
}

#[derive(Deserialize)]
struct RawRecord {
    article: String,
    summary: String,
    #[serde(default)]
    id: Option<String>,
}

/// Loads one split from a JSONL file. Missing ids are synthesized from
/// 1-based line numbers. Blank lines are rejected as malformed.
pub fn load_jsonl(path: &Path, name: SplitName) -> Result<DatasetSplit, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        let id = raw.id.unwrap_or_else(|| line_no.to_string());
        let doc = Document {
            id,
            article: raw.article,
            summary: raw.summary,
        };
        validate_document(&doc)?;
        documents.push(doc);
    }
    let split = DatasetSplit { name, documents };
    validate_split(&split)?;
    Ok(split)
}

/// Writes a split back out as JSONL, one record per document in order.
pub fn save_jsonl(split: &DatasetSplit, path: &Path) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for doc in &split.documents {
        serde_json::to_writer(&mut out, doc).expect("document serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn validate_document(doc: &Document) -> Result<(), CorpusError> {
    if doc.article.split_whitespace().next().is_none() {
        return Err(CorpusError::Validation {
            id: doc.id.clone(),
            message: "article is empty after whitespace normalization".into(),
        });
    }
    if doc.summary.split_whitespace().next().is_none() {
        return Err(CorpusError::Validation {
            id: doc.id.clone(),
            message: "summary is empty after whitespace normalization".into(),
        });
    }
    Ok(())
}

fn validate_split(split: &DatasetSplit) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for doc in &split.documents {
        if !seen.insert(doc.id.as_str()) {
            return Err(CorpusError::Validation {
                id: doc.id.clone(),
                message: format!("duplicate id within split {}", split.name),
            });
        }
    }
    Ok(())
}

/// Encodes a document and truncates both sides to their token limits,
/// keeping the longest prefix. Idempotent: re-truncating the decoded
/// truncation changes nothing.
pub fn truncate(
    doc: &Document,
    vocab: &Vocabulary,
    max_article: usize,
    max_summary: usize,
) -> (Vec<u32>, Vec<u32>) {
    let mut article_ids = vocab.encode(&doc.article).ids;
    let mut summary_ids = vocab.encode(&doc.summary).ids;
    article_ids.truncate(max_article);
    summary_ids.truncate(max_summary);
    (article_ids, summary_ids)
}

/// Fraction of distinct summary word n-grams that never occur in the
/// article, on lowercased punctuation-stripped words. `None` when the
/// summary has fewer than `n` words; callers skip the document for that n.
pub fn novel_ngram_fraction(doc: &Document, n: usize) -> Option<f64> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let summary_words = text::metric_words(&doc.summary);
    if summary_words.len() < n {
        return None;
    }
    let article_words = text::metric_words(&doc.article);
    let article_ngrams: HashSet<&[String]> =
        text::ngrams(&article_words, n).into_iter().collect();
    let summary_ngrams: HashSet<&[String]> =
        text::ngrams(&summary_words, n).into_iter().collect();
    let novel = summary_ngrams
        .iter()
        .filter(|g| !article_ngrams.contains(*g))
        .count();
    Some(novel as f64 / summary_ngrams.len() as f64)
}

/// Aggregates Table-style statistics over every document in every split.
/// Novel n-gram fractions are macro-averaged over the documents admitting
/// each n; mean lengths count raw whitespace words.
pub fn corpus_stats(splits: &[DatasetSplit]) -> Result<CorpusStats, CorpusError> {
    let total: usize = splits.iter().map(|s| s.documents.len()).sum();
    if total == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut split_sizes = BTreeMap::new();
    for split in splits {
        *split_sizes.entry(split.name.to_string()).or_insert(0) += split.documents.len();
    }

    let mut novel = [None; 4];
    for n in 1..=4usize {
        let mut sum = 0.0;
        let mut count = 0usize;
        for split in splits {
            for doc in &split.documents {
                if let Some(frac) = novel_ngram_fraction(doc, n) {
                    sum += frac;
                    count += 1;
                }
            }
        }
        if count > 0 {
            novel[n - 1] = Some(sum / count as f64);
        }
    }

    let mut article_words = 0usize;
    let mut summary_words = 0usize;
    for split in splits {
        for doc in &split.documents {
            article_words += text::whitespace_word_count(&doc.article);
            summary_words += text::whitespace_word_count(&doc.summary);
        }
    }

    Ok(CorpusStats {
        split_sizes,
        novel_ngram_fraction: novel,
        mean_article_words: article_words as f64 / total as f64,
        mean_summary_words: summary_words as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn doc(article: &str, summary: &str) -> Document {
        Document {
            id: "d".into(),
            article: article.into(),
            summary: summary.into(),
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_empty_file_gives_empty_split() {
        let f = write_lines(&[]);
        let split = load_jsonl(f.path(), SplitName::Train).unwrap();
        assert!(split.documents.is_empty());
    }

    #[test]
    fn load_single_record() {
        let f = write_lines(&[r#"{"article": "a b", "summary": "c"}"#]);
        let split = load_jsonl(f.path(), SplitName::Train).unwrap();
        assert_eq!(split.documents.len(), 1);
        assert_eq!(split.documents[0].article, "a b");
        assert_eq!(split.documents[0].summary, "c");
        assert_eq!(split.documents[0].id, "1");
    }

    #[test]
    fn missing_summary_names_the_line() {
        let f = write_lines(&[
            r#"{"article": "a", "summary": "b"}"#,
            r#"{"article": "only"}"#,
        ]);
        let err = load_jsonl(f.path(), SplitName::Train).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn empty_summary_names_the_id() {
        let f = write_lines(&[r#"{"article": "a", "summary": "  ", "id": "bad"}"#]);
        let err = load_jsonl(f.path(), SplitName::Train).unwrap_err();
        match err {
            CorpusError::Validation { id, .. } => assert_eq!(id, "bad"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_lines(&[
            r#"{"article": "a", "summary": "b", "id": "x"}"#,
            r#"{"article": "c", "summary": "d", "id": "x"}"#,
        ]);
        assert!(load_jsonl(f.path(), SplitName::Train).is_err());
    }

    #[test]
    fn jsonl_round_trip_preserves_split() {
        let f = write_lines(&[
            r#"{"article": "a b c", "summary": "a b", "id": "p"}"#,
            r#"{"article": "x y", "summary": "y"}"#,
        ]);
        let split = load_jsonl(f.path(), SplitName::Test).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(&split, out.path()).unwrap();
        let reloaded = load_jsonl(out.path(), SplitName::Test).unwrap();
        assert_eq!(split, reloaded);
    }

    #[test]
    fn novel_unigrams_zero_for_substring_summary() {
        let d = doc("the quick brown fox jumped", "quick brown fox");
        assert_eq!(novel_ngram_fraction(&d, 1), Some(0.0));
    }

    #[test]
    fn novel_unigrams_one_for_disjoint_summary() {
        let d = doc("a b c", "x y");
        assert_eq!(novel_ngram_fraction(&d, 1), Some(1.0));
    }

    #[test]
    fn novel_bigram_hand_case() {
        // summary bigrams {a b, b x}; "a b" occurs in the article, "b x" does not
        let d = doc("a b c d", "a b x");
        assert_eq!(novel_ngram_fraction(&d, 2), Some(0.5));
    }

    #[test]
    fn short_summary_yields_none() {
        let d = doc("a b c", "a b");
        assert_eq!(novel_ngram_fraction(&d, 3), None);
    }

    #[test]
    fn stats_mean_lengths() {
        let split = DatasetSplit {
            name: SplitName::Train,
            documents: vec![doc("w x y z", "a b")],
        };
        let stats = corpus_stats(&[split]).unwrap();
        assert_eq!(stats.mean_article_words, 4.0);
        assert_eq!(stats.mean_summary_words, 2.0);
        assert_eq!(stats.split_sizes["train"], 1);
    }

    #[test]
    fn stats_macro_average() {
        let d1 = Document {
            id: "1".into(),
            article: "a b".into(),
            summary: "a".into(), // novel-1 = 0.0
        };
        let d2 = Document {
            id: "2".into(),
            article: "a b".into(),
            summary: "z".into(), // novel-1 = 1.0
        };
        let split = DatasetSplit {
            name: SplitName::Train,
            documents: vec![d1, d2],
        };
        let stats = corpus_stats(&[split]).unwrap();
        assert_eq!(stats.novel_ngram_fraction[0], Some(0.5));
    }

    #[test]
    fn stats_reject_empty_corpus() {
        let split = DatasetSplit {
            name: SplitName::Train,
            documents: vec![],
        };
        assert!(matches!(
            corpus_stats(&[split]),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn stats_match_brute_force_on_constructed_corpus() {
        // Three documents with hand-enumerable n-gram sets; the oracle below
        // recomputes the fractions with naive set arithmetic.
        let docs = vec![
            doc("the cat sat on the mat", "the cat sat"),
            doc("rain fell on the city", "snow fell on the city"),
            doc("one two three", "four five"),
        ];
        for n in 1..=4usize {
            let mut expected = Vec::new();
            for d in &docs {
                let s = text::metric_words(&d.summary);
                let a = text::metric_words(&d.article);
                if s.len() < n {
                    continue;
                }
                let sg: HashSet<Vec<String>> =
                    s.windows(n).map(|w| w.to_vec()).collect();
                let ag: HashSet<Vec<String>> =
                    a.windows(n).map(|w| w.to_vec()).collect();
                let novel = sg.iter().filter(|g| !ag.contains(*g)).count();
                expected.push(novel as f64 / sg.len() as f64);
            }
            let split = DatasetSplit {
                name: SplitName::Train,
                documents: docs.clone(),
            };
            let stats = corpus_stats(&[split]).unwrap();
            if expected.is_empty() {
                assert_eq!(stats.novel_ngram_fraction[n - 1], None);
            } else {
                let mean = expected.iter().sum::<f64>() / expected.len() as f64;
                assert_eq!(stats.novel_ngram_fraction[n - 1], Some(mean));
            }
        }
    }

    #[test]
    fn stats_permutation_invariant() {
        let mut docs = vec![
            doc("a b c d e", "a b"),
            doc("f g h", "g h z"),
            doc("p q r s", "p r"),
        ];
        for (i, d) in docs.iter_mut().enumerate() {
            d.id = format!("{i}");
        }
        let forward = corpus_stats(&[DatasetSplit {
            name: SplitName::Train,
            documents: docs.clone(),
        }])
        .unwrap();
        docs.reverse();
        let backward = corpus_stats(&[DatasetSplit {
            name: SplitName::Train,
            documents: docs,
        }])
        .unwrap();
        assert_eq!(forward.mean_article_words, backward.mean_article_words);
        assert_eq!(forward.mean_summary_words, backward.mean_summary_words);
        for n in 0..4 {
            let (a, b) = (
                forward.novel_ngram_fraction[n],
                backward.novel_ngram_fraction[n],
            );
            match (a, b) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => panic!("admissibility changed under permutation"),
            }
        }
    }
}
