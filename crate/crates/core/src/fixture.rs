//! Deterministically generated fixture data: a templated synthetic
//! newswire corpus small enough to train on a laptop, a matching generic
//! corpus for the pretraining phase, a five-document statistics fixture
//! with hand-enumerable n-gram sets, and a repetitive pair for
//! demonstrating trigram blocking.
//!
//! Everything here is a pure function of its seed; the files under
//! `fixtures/` in the repository root are serialized outputs of these
//! generators and a test keeps them in sync.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DatasetSplit, Document, SplitName};

/// The seed the bundled fixture files were generated with. Acceptance runs
/// use it so results reproduce exactly.
pub const SHIPPED_SEED: u64 = 17;

pub const TRAIN_DOCS: usize = 96;
pub const VALIDATION_DOCS: usize = 24;
pub const TEST_DOCS: usize = 24;
pub const GENERIC_DOCS: usize = 64;

const CITIES: [&str; 16] = [
    "arden", "belmont", "calder", "dunmore", "elmswick", "farley", "granton", "holbeck",
    "ivybridge", "jarrow", "kelsall", "lydford", "morwell", "naseby", "oakham", "penrith",
];
const THINGS: [&str; 12] = [
    "library", "bridge", "museum", "stadium", "clinic", "market", "theatre", "harbour",
    "airport", "school", "tunnel", "foundry",
];
const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];
const DAYS: [&str; 7] = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const NUMS: [&str; 8] = [
    "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

struct Slots {
    city: &'static str,
    thing: &'static str,
    month: &'static str,
    day: &'static str,
    num: &'static str,
}

fn draw_slots(rng: &mut ChaCha8Rng) -> Slots {
    Slots {
        city: CITIES[rng.gen_range(0..CITIES.len())],
        thing: THINGS[rng.gen_range(0..THINGS.len())],
        month: MONTHS[rng.gen_range(0..MONTHS.len())],
        day: DAYS[rng.gen_range(0..DAYS.len())],
        num: NUMS[rng.gen_range(0..NUMS.len())],
    }
}

const TEMPLATE_COUNT: usize = 6;

fn render(template: usize, s: &Slots) -> (String, String) {
    let Slots {
        city,
        thing,
        month,
        day,
        num,
    } = *s;
    match template {
        0 => (
            format!(
                "the {city} council said on {day} that the new {thing} will open in {month} . \
                 officials expect the new {thing} to cost {num} million . \
                 residents of {city} welcomed the {thing} plan ."
            ),
            format!("{city} to open new {thing} in {month}"),
        ),
        1 => (
            format!(
                "a storm hit {city} on {day} and closed the {thing} for repairs . \
                 crews said the {thing} should reopen in {month} . \
                 the mayor of {city} thanked the repair workers ."
            ),
            format!("storm closes {city} {thing} until {month}"),
        ),
        2 => (
            format!(
                "the {city} team won the cup on {day} at the {thing} . \
                 fans filled the streets of {city} for {num} hours . \
                 the club said the parade is in {month} ."
            ),
            format!("{city} wins cup at the {thing}"),
        ),
        3 => (
            format!(
                "workers in {city} finished the {thing} after {num} years on {day} . \
                 the {thing} cost the {city} council {num} million . \
                 tours will begin in {month} ."
            ),
            format!("{city} finishes {thing} after {num} years"),
        ),
        4 => (
            format!(
                "the {thing} in {city} will shut on {day} for safety checks . \
                 inspectors said the {thing} may stay shut until {month} . \
                 the {city} council promised {num} million for repairs ."
            ),
            format!("{thing} in {city} shut until {month}"),
        ),
        _ => (
            format!(
                "on {day} the {city} council voted to sell the old {thing} . \
                 the sale should raise {num} million for {city} schools . \
                 a final vote is set for {month} ."
            ),
            format!("{city} council votes to sell {thing}"),
        ),
    }
}

fn generate_docs(rng: &mut ChaCha8Rng, count: usize, prefix: &str) -> Vec<Document> {
    (0..count)
        .map(|i| {
            let template = rng.gen_range(0..TEMPLATE_COUNT);
            let slots = draw_slots(rng);
            let (article, summary) = render(template, &slots);
            Document {
                id: format!("{prefix}-{i:04}"),
                article,
                summary,
            }
        })
        .collect()
}

/// The templated article–summary corpus: (train, validation, test) splits
/// drawn from one seeded stream.
pub fn synthetic_corpus(seed: u64) -> (DatasetSplit, DatasetSplit, DatasetSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = DatasetSplit {
        name: SplitName::Train,
        documents: generate_docs(&mut rng, TRAIN_DOCS, "train"),
    };
    let validation = DatasetSplit {
        name: SplitName::Validation,
        documents: generate_docs(&mut rng, VALIDATION_DOCS, "val"),
    };
    let test = DatasetSplit {
        name: SplitName::Test,
        documents: generate_docs(&mut rng, TEST_DOCS, "test"),
    };
    (train, validation, test)
}

/// Plain newswire-like text over the same vocabulary, for the pretraining
/// phase. One document per returned string.
pub fn generic_corpus(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    (0..GENERIC_DOCS)
        .map(|_| {
            let s = draw_slots(&mut rng);
            match rng.gen_range(0..4usize) {
                0 => format!(
                    "the {} in {} stayed busy through {} and the council was pleased",
                    s.thing, s.city, s.month
                ),
                1 => format!(
                    "on {} the {} council met to discuss the {} and its {} million budget",
                    s.day, s.city, s.thing, s.num
                ),
                2 => format!(
                    "workers in {} spent {} days at the {} before the rain came",
                    s.city, s.num, s.thing
                ),
                _ => format!(
                    "a report said the {} near {} will stay open until {} at least",
                    s.thing, s.city, s.month
                ),
            }
        })
        .collect()
}

/// Five documents whose novel n-gram fractions and mean lengths are small
/// enough to enumerate by hand. Used to pin the statistics computation.
pub fn stats_fixture() -> DatasetSplit {
    let docs = [
        (
            "stats-a",
            "the mayor opened the new library on monday",
            "the mayor opened the library",
        ),
        (
            "stats-b",
            "rain fell over the city all night",
            "snow fell over the city",
        ),
        ("stats-c", "The judge ruled on the case.", "Judge ruled."),
        (
            "stats-d",
            "wind turbines appeared near the coast",
            "solar panels appeared inland",
        ),
        (
            "stats-e",
            "dogs chase cats and dogs chase mice",
            "dogs chase cats and mice",
        ),
    ];
    DatasetSplit {
        name: SplitName::Train,
        documents: docs
            .iter()
            .map(|(id, article, summary)| Document {
                id: id.to_string(),
                article: article.to_string(),
                summary: summary.to_string(),
            })
            .collect(),
    }
}

/// A pair whose gold summary repeats a trigram, so a model overfit to it
/// will reproduce the repetition unless blocking intervenes.
pub fn repetitive_pair() -> Document {
    Document {
        id: "repeat-0".into(),
        article: "the drums played in the town square all day long".into(),
        summary: "the drums played and the drums played and the drums played".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;

    #[test]
    fn generation_is_deterministic() {
        let (a, _, _) = synthetic_corpus(SHIPPED_SEED);
        let (b, _, _) = synthetic_corpus(SHIPPED_SEED);
        assert_eq!(a, b);
        assert_ne!(
            synthetic_corpus(SHIPPED_SEED).0,
            synthetic_corpus(SHIPPED_SEED + 1).0
        );
        assert_eq!(generic_corpus(3), generic_corpus(3));
    }

    #[test]
    fn split_sizes_match_constants() {
        let (train, validation, test) = synthetic_corpus(SHIPPED_SEED);
        assert_eq!(train.documents.len(), TRAIN_DOCS);
        assert_eq!(validation.documents.len(), VALIDATION_DOCS);
        assert_eq!(test.documents.len(), TEST_DOCS);
        assert_eq!(generic_corpus(SHIPPED_SEED).len(), GENERIC_DOCS);
    }

    #[test]
    fn documents_are_well_formed() {
        let (train, validation, test) = synthetic_corpus(SHIPPED_SEED);
        for split in [&train, &validation, &test] {
            for doc in &split.documents {
                assert!(!doc.article.trim().is_empty());
                assert!(!doc.summary.trim().is_empty());
                assert!(doc.summary.split_whitespace().count() <= 8);
            }
        }
        // ids unique via corpus validation path
        assert!(corpus_stats(&[train, validation, test]).is_ok());
    }

    #[test]
    fn stats_fixture_matches_hand_enumeration() {
        let split = stats_fixture();
        let stats = corpus_stats(std::slice::from_ref(&split)).unwrap();
        // per-document fractions enumerated by hand, summed in document order
        let n1 = (0.0 + 1.0 / 5.0 + 0.0 + 3.0 / 4.0 + 0.0) / 5.0;
        let n2 = (1.0 / 4.0 + 1.0 / 4.0 + 0.0 + 1.0 + 1.0 / 4.0) / 5.0;
        let n3 = (1.0 / 3.0 + 1.0 / 3.0 + 1.0 + 1.0 / 3.0) / 4.0; // stats-c skipped
        let n4 = (1.0 / 2.0 + 1.0 / 2.0 + 1.0 + 1.0 / 2.0) / 4.0;
        assert_eq!(stats.novel_ngram_fraction[0], Some(n1));
        assert_eq!(stats.novel_ngram_fraction[1], Some(n2));
        assert_eq!(stats.novel_ngram_fraction[2], Some(n3));
        assert_eq!(stats.novel_ngram_fraction[3], Some(n4));
        assert_eq!(stats.mean_article_words, 34.0 / 5.0);
        assert_eq!(stats.mean_summary_words, 21.0 / 5.0);
    }

    #[test]
    fn committed_fixture_files_match_the_generators() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
        let (train, validation, test) = synthetic_corpus(SHIPPED_SEED);
        for (split, file) in [
            (&train, "synthetic/train.jsonl"),
            (&validation, "synthetic/validation.jsonl"),
            (&test, "synthetic/test.jsonl"),
        ] {
            let mut expected = String::new();
            for doc in &split.documents {
                expected.push_str(&serde_json::to_string(doc).unwrap());
                expected.push('\n');
            }
            let on_disk = std::fs::read_to_string(root.join(file)).unwrap();
            assert_eq!(on_disk, expected, "{file} drifted from the generator");
        }
        let generic = generic_corpus(SHIPPED_SEED).join("\n") + "\n";
        let on_disk = std::fs::read_to_string(root.join("synthetic/generic.txt")).unwrap();
        assert_eq!(on_disk, generic);
    }

    #[test]
    fn repetitive_summary_contains_a_repeated_trigram() {
        let doc = repetitive_pair();
        let words: Vec<&str> = doc.summary.split_whitespace().collect();
        let mut seen = std::collections::HashSet::new();
        let mut repeated = false;
        for w in words.windows(3) {
            if !seen.insert(w.to_vec()) {
                repeated = true;
            }
        }
        assert!(repeated);
    }
}
