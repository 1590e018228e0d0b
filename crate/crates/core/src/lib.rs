//! Abstractive summarization with a decoder-only transformer language model.
//!
//! The pipeline: ingest article/summary corpora ([`corpus`]), train a BPE
//! vocabulary ([`tokenizer`]), train the summarizer with domain-adaptive and
//! end-task objectives ([`model`], [`training`]), generate summaries with beam
//! search and trigram blocking ([`decoding`]), and score them with ROUGE
//! ([`eval`]). All numerics run on a small reverse-mode autodiff tape
//! ([`numerics`]).

pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod fixture;
pub mod model;
pub mod numerics;
pub mod text;
pub mod tokenizer;
pub mod training;

pub use corpus::{CorpusStats, DatasetSplit, Document, SplitName};
pub use decoding::{GenConfig, Hypothesis};
pub use eval::{CorpusRougeReport, EfficiencyReport, LengthBinReport, RougeScore};
pub use model::{InputBatch, ModelConfig, SummarizerLM};
pub use numerics::{Parameter, Real, Tape, Tensor};
pub use tokenizer::{SpecialTokens, TokenSequence, Vocabulary};
pub use training::{
    MetricRecord, Phase, Schedule, SummarizationData, TrainConfig, Trainer, TrainerState,
};
