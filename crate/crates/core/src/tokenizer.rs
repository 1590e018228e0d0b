//! Trainable byte-pair-encoding tokenizer with reserved special tokens.
//!
//! Training is character-level within whitespace-delimited words: the most
//! frequent adjacent symbol pair merges first, ties breaking toward the
//! lexicographically smaller pair. Word-final characters carry a `</w>`
//! suffix so decoding can restore word boundaries. Four ids are reserved
//! ahead of the alphabet: unknown, start, delimiter, and end.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

const FORMAT_HEADER: &str = "sumlm-bpe v1";
const NORMALIZATION: &str = "nfc-ws";
const END_OF_WORD: &str = "</w>";

pub const UNKNOWN_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const DELIMITER_ID: u32 = 2;
pub const END_ID: u32 = 3;
const RESERVED: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary size {target} too small: need more than {minimum} \
             (alphabet {alphabet} + {reserved} reserved ids)")]
    TargetTooSmall {
        target: usize,
        minimum: usize,
        alphabet: usize,
        reserved: usize,
    },
    #[error("undefined token id {0}")]
    UndefinedId(u32),
    #[error("cannot access vocabulary file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary file {path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
}

/// Ids of the three sequence-structure tokens. Never produced by `encode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialTokens {
    pub start_id: u32,
    pub delimiter_id: u32,
    pub end_id: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            start_id: START_ID,
            delimiter_id: DELIMITER_ID,
            end_id: END_ID,
        }
    }
}

/// A sequence of token ids, all defined in the owning vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

/// A trained BPE vocabulary: merge list in training order, id table, and
/// reserved special ids. Immutable after training; encode/decode are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    merges: Vec<(String, String)>,
    alphabet: Vec<String>,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    special: SpecialTokens,
    unknown_id: u32,
}

/// NFC normalization plus collapsing whitespace runs to single spaces.
/// Decode targets are defined relative to this form.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Trains a vocabulary by iterative pair merging until `target_vocab_size`
/// ids exist or no adjacent pair occurs at least twice. Deterministic for a
/// fixed corpus and target.
pub fn train_bpe<S: AsRef<str>>(
    corpus_texts: &[S],
    target_vocab_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    // Word frequencies in a sorted map so every downstream step is
    // iteration-order independent.
    let mut word_freqs: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus_texts {
        for word in normalize(text.as_ref()).split(' ') {
            if !word.is_empty() {
                *word_freqs.entry(word.to_string()).or_insert(0) += 1;
            }
        }
    }
    if word_freqs.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Both the bare and word-final form of every character, so encoding is
    // total over the training alphabet regardless of position.
    let mut alphabet_set: BTreeSet<String> = BTreeSet::new();
    for word in word_freqs.keys() {
        for c in word.chars() {
            alphabet_set.insert(c.to_string());
            alphabet_set.insert(format!("{c}{END_OF_WORD}"));
        }
    }
    let alphabet: Vec<String> = alphabet_set.into_iter().collect();
    let minimum = alphabet.len() + RESERVED;
    if target_vocab_size <= minimum {
        return Err(TokenizerError::TargetTooSmall {
            target: target_vocab_size,
            minimum,
            alphabet: alphabet.len(),
            reserved: RESERVED,
        });
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .into_iter()
        .map(|(word, freq)| (word_symbols(&word), freq))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while RESERVED + alphabet.len() + merges.len() < target_vocab_size {
        let mut best: Option<((String, String), u64)> = None;
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_insert(0) += freq;
            }
        }
        for (pair, count) in counts {
            let candidate = (pair.0.to_string(), pair.1.to_string());
            match &best {
                Some((best_pair, best_count)) => {
                    if count > *best_count || (count == *best_count && candidate < *best_pair) {
                        best = Some((candidate, count));
                    }
                }
                None => best = Some((candidate, count)),
            }
        }
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let merged = format!("{}{}", pair.0, pair.1);
        for (symbols, _) in &mut words {
            merge_in_place(symbols, &pair, &merged);
        }
        merges.push(pair);
    }

    Ok(Vocabulary::assemble(alphabet, merges))
}

fn merge_in_place(symbols: &mut Vec<String>, pair: &(String, String), merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

impl Vocabulary {
    fn assemble(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Vocabulary {
        let mut id_to_token: Vec<String> = vec![
            "<unk>".to_string(),
            "<s>".to_string(),
            "<d>".to_string(),
            "<e>".to_string(),
        ];
        let mut token_to_id = HashMap::new();
        for sym in &alphabet {
            token_to_id.insert(sym.clone(), id_to_token.len() as u32);
            id_to_token.push(sym.clone());
        }
        for (a, b) in &merges {
            let merged = format!("{a}{b}");
            token_to_id.insert(merged.clone(), id_to_token.len() as u32);
            id_to_token.push(merged);
        }
        Vocabulary {
            merges,
            alphabet,
            token_to_id,
            id_to_token,
            special: SpecialTokens::default(),
            unknown_id: UNKNOWN_ID,
        }
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn unknown_id(&self) -> u32 {
        self.unknown_id
    }

    /// Total id count: reserved ids + alphabet + merged tokens.
    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Encodes normalized text word by word, applying merges in training
    /// order. Characters outside the training alphabet map to the unknown
    /// id. Special ids are never produced.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let normalized = normalize(text);
        let mut ids = Vec::new();
        for word in normalized.split(' ') {
            if word.is_empty() {
                continue;
            }
            let mut symbols = word_symbols(word);
            for (a, b) in &self.merges {
                if symbols.len() < 2 {
                    break;
                }
                let merged = format!("{a}{b}");
                merge_in_place(&mut symbols, &(a.clone(), b.clone()), &merged);
            }
            for sym in symbols {
                ids.push(*self.token_to_id.get(&sym).unwrap_or(&self.unknown_id));
            }
        }
        TokenSequence { ids }
    }

    /// Concatenates token surfaces, turning word-final markers back into
    /// spaces. Special ids render as empty strings; the unknown id renders
    /// as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            if id == self.special.start_id
                || id == self.special.delimiter_id
                || id == self.special.end_id
            {
                continue;
            }
            if id == self.unknown_id {
                out.push('\u{FFFD}');
                continue;
            }
            let surface = self
                .id_to_token
                .get(id as usize)
                .ok_or(TokenizerError::UndefinedId(id))?;
            match surface.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                }
                None => out.push_str(surface),
            }
        }
        Ok(out.trim_end().to_string())
    }

    /// Canonical text serialization. `load` of this exact byte sequence
    /// reproduces the vocabulary; saving again reproduces the bytes.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str(FORMAT_HEADER);
        out.push('\n');
        out.push_str(&format!("normalization {NORMALIZATION}\n"));
        out.push_str(&format!("special unknown {}\n", self.unknown_id));
        out.push_str(&format!("special start {}\n", self.special.start_id));
        out.push_str(&format!("special delimiter {}\n", self.special.delimiter_id));
        out.push_str(&format!("special end {}\n", self.special.end_id));
        out.push_str(&format!("alphabet {}\n", self.alphabet.len()));
        for sym in &self.alphabet {
            out.push_str(sym);
            out.push('\n');
        }
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out.push_str(&format!("tokens {}\n", self.id_to_token.len()));
        for (id, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{id} {tok}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, TokenizerError> {
        let content = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_file_string(&content).map_err(|(line, message)| TokenizerError::Format {
            path: path.display().to_string(),
            line,
            message,
        })
    }

    fn from_file_string(content: &str) -> Result<Vocabulary, (usize, String)> {
        let mut lines = content.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, String), (usize, String)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.to_string()))
                .ok_or((0, format!("unexpected end of file, expected {expect}")))
        };

        let (n, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err((n, format!("unsupported header {header:?}")));
        }
        let (n, norm) = next("normalization")?;
        if norm != format!("normalization {NORMALIZATION}") {
            return Err((n, format!("unsupported normalization {norm:?}")));
        }
        let mut special_ids = BTreeMap::new();
        for name in ["unknown", "start", "delimiter", "end"] {
            let (n, line) = next("special")?;
            let expected_prefix = format!("special {name} ");
            let id = line
                .strip_prefix(&expected_prefix)
                .and_then(|v| v.parse::<u32>().ok())
                .ok_or((n, format!("expected {expected_prefix}<id>")))?;
            special_ids.insert(name, id);
        }
        let (n, line) = next("alphabet count")?;
        let alpha_count: usize = line
            .strip_prefix("alphabet ")
            .and_then(|v| v.parse().ok())
            .ok_or((n, "expected alphabet <count>".to_string()))?;
        let mut alphabet = Vec::with_capacity(alpha_count);
        for _ in 0..alpha_count {
            let (_, sym) = next("alphabet symbol")?;
            alphabet.push(sym);
        }
        let (n, line) = next("merge count")?;
        let merge_count: usize = line
            .strip_prefix("merges ")
            .and_then(|v| v.parse().ok())
            .ok_or((n, "expected merges <count>".to_string()))?;
        let mut merges = Vec::with_capacity(merge_count);
        for _ in 0..merge_count {
            let (n, line) = next("merge pair")?;
            let (a, b) = line
                .split_once(' ')
                .ok_or((n, "expected two space-separated symbols".to_string()))?;
            merges.push((a.to_string(), b.to_string()));
        }
        let vocab = Vocabulary::assemble(alphabet, merges);
        if special_ids["unknown"] != vocab.unknown_id
            || special_ids["start"] != vocab.special.start_id
            || special_ids["delimiter"] != vocab.special.delimiter_id
            || special_ids["end"] != vocab.special.end_id
        {
            return Err((3, "special ids disagree with the reserved layout".to_string()));
        }
        let (n, line) = next("token count")?;
        let token_count: usize = line
            .strip_prefix("tokens ")
            .and_then(|v| v.parse().ok())
            .ok_or((n, "expected tokens <count>".to_string()))?;
        if token_count != vocab.id_to_token.len() {
            return Err((
                n,
                format!(
                    "token table lists {token_count} ids but alphabet + merges produce {}",
                    vocab.id_to_token.len()
                ),
            ));
        }
        for expected_id in 0..token_count {
            let (n, line) = next("token entry")?;
            let (id_str, surface) = line
                .split_once(' ')
                .ok_or((n, "expected <id> <surface>".to_string()))?;
            let id: usize = id_str
                .parse()
                .map_err(|_| (n, format!("bad id {id_str:?}")))?;
            if id != expected_id || vocab.id_to_token[id] != surface {
                return Err((
                    n,
                    format!(
                        "token table entry {id} {surface:?} disagrees with reconstruction \
                         {:?}",
                        vocab.id_to_token.get(expected_id)
                    ),
                ));
            }
        }
        Ok(vocab)
    }

    /// SHA-256 of the canonical serialization, hex-encoded. Checkpoints
    /// embed this to refuse decoding with a mismatched vocabulary.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_file_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocabulary {
        let corpus = vec!["the cat sat on the mat", "the cat ran", "a mat sat there"];
        train_bpe(&corpus, 64).unwrap()
    }

    #[test]
    fn first_merge_on_repeated_aaab_is_a_a() {
        let corpus: Vec<&str> = std::iter::repeat("aaab").take(10).collect();
        let vocab = train_bpe(&corpus, 10).unwrap();
        assert_eq!(vocab.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn single_character_corpus_has_no_merges() {
        let vocab = train_bpe(&["z"], 16).unwrap();
        assert!(vocab.merges().is_empty());
        // reserved + bare/word-final forms of 'z'
        assert_eq!(vocab.vocab_size(), RESERVED + 2);
    }

    #[test]
    fn equal_frequency_ties_break_lexicographically() {
        // (a,b</w>) and (c,d</w>) both occur 3 times; the smaller pair wins.
        let corpus = vec!["ab cd", "ab cd", "ab cd"];
        let vocab = train_bpe(&corpus, 13).unwrap();
        assert_eq!(
            vocab.merges()[0],
            ("a".to_string(), format!("b{END_OF_WORD}"))
        );
    }

    #[test]
    fn target_below_alphabet_is_rejected() {
        let err = train_bpe(&["abc"], 5).unwrap_err();
        assert!(matches!(err, TokenizerError::TargetTooSmall { .. }));
    }

    #[test]
    fn empty_string_encodes_to_empty_sequence() {
        let vocab = small_vocab();
        assert!(vocab.encode("").ids.is_empty());
        assert!(vocab.encode("   \t\n").ids.is_empty());
    }

    #[test]
    fn single_character_word_is_one_id() {
        let vocab = small_vocab();
        assert_eq!(vocab.encode("a").ids.len(), 1);
    }

    #[test]
    fn specials_decode_to_empty_string() {
        let vocab = small_vocab();
        let s = vocab.special();
        assert_eq!(
            vocab.decode(&[s.start_id, s.end_id]).unwrap(),
            ""
        );
    }

    #[test]
    fn unknown_characters_map_to_unknown_id() {
        let vocab = small_vocab();
        let ids = vocab.encode("cat \u{4e16}").ids;
        assert!(ids.contains(&vocab.unknown_id()));
        let text = vocab.decode(&ids).unwrap();
        assert!(text.contains('\u{FFFD}'));
    }

    #[test]
    fn undefined_id_is_an_error() {
        let vocab = small_vocab();
        let bad = vocab.vocab_size() as u32 + 7;
        assert!(matches!(
            vocab.decode(&[bad]),
            Err(TokenizerError::UndefinedId(_))
        ));
    }

    #[test]
    fn encode_never_emits_special_ids() {
        let vocab = small_vocab();
        let s = vocab.special();
        let ids = vocab.encode("the cat <s> <d> <e> sat").ids;
        for id in ids {
            assert_ne!(id, s.start_id);
            assert_ne!(id, s.delimiter_id);
            assert_ne!(id, s.end_id);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec!["some words repeat some words", "other words too"];
        let a = train_bpe(&corpus, 40).unwrap();
        let b = train_bpe(&corpus, 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn superset_merges_encode_no_longer() {
        let corpus = vec![
            "the cat sat on the mat",
            "the dog sat on the log",
            "a cat and a dog met",
        ];
        let small = train_bpe(&corpus, 40).unwrap();
        let large = train_bpe(&corpus, 60).unwrap();
        // Training is deterministic, so the smaller merge list is a prefix
        // of the larger one.
        assert_eq!(
            &large.merges()[..small.merges().len()],
            small.merges()
        );
        for text in &corpus {
            assert!(large.encode(text).ids.len() <= small.encode(text).ids.len());
        }
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let vocab = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        assert_eq!(vocab.to_file_string(), loaded.to_file_string());
        assert_eq!(vocab.content_hash(), loaded.content_hash());
    }

    #[test]
    fn corrupt_vocabulary_file_is_a_format_error() {
        let vocab = small_vocab();
        let mut content = vocab.to_file_string();
        content = content.replacen("tokens ", "tokens 9", 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, content).unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TokenizerError::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_over_training_alphabet(words in proptest::collection::vec("[a-e]{1,8}", 1..12)) {
            let corpus = vec!["abcde edcba abe dbc ceadb"];
            let vocab = train_bpe(&corpus, 48).unwrap();
            let text = words.join(" ");
            let normalized = normalize(&text);
            let decoded = vocab.decode(&vocab.encode(&text).ids).unwrap();
            prop_assert_eq!(decoded, normalized);
        }

        #[test]
        fn round_trip_with_messy_whitespace(text in "[ a-c]{0,40}") {
            let vocab = train_bpe(&["abc cab bca a b c"], 32).unwrap();
            let decoded = vocab.decode(&vocab.encode(&text).ids).unwrap();
            prop_assert_eq!(decoded, normalize(&text));
        }
    }
}
