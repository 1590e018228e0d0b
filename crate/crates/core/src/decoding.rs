//! Beam-search summary generation with trigram blocking.
//!
//! The search expands each live hypothesis with its `beam_size` best next
//! tokens (after blocking), prunes the pooled candidates back to
//! `beam_size`, and finishes a hypothesis when it emits the end id or hits
//! the length cap. Ties break toward lexicographically smaller token ids,
//! so decoding is deterministic.

use std::collections::BTreeSet;

use crate::model::{ForwardMode, InputBatch, ModelError, SummarizerLM};
use crate::numerics::{log_softmax_slice, Real, Tape};
use crate::tokenizer::SpecialTokens;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("{0}")]
    Validation(String),
    #[error("incompatible model: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Generation knobs. Defaults follow the training-time convention: beam 3,
/// trigram blocking on, no length normalization, no minimum length.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub beam_size: usize,
    pub max_summary_tokens: usize,
    pub min_summary_tokens: usize,
    pub trigram_blocking: bool,
    pub length_normalization_alpha: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            beam_size: 3,
            max_summary_tokens: 110,
            min_summary_tokens: 0,
            trigram_blocking: true,
            length_normalization_alpha: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Validation("beam size must be at least 1".into()));
        }
        if self.min_summary_tokens > self.max_summary_tokens {
            return Err(DecodeError::Validation(format!(
                "minimum length {} exceeds maximum {}",
                self.min_summary_tokens, self.max_summary_tokens
            )));
        }
        if self.length_normalization_alpha < 0.0 {
            return Err(DecodeError::Validation(
                "length normalization alpha must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A partial or finished beam entry. `token_ids` includes the end id when
/// the hypothesis finished by emitting it.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub token_ids: Vec<u32>,
    pub log_prob: Real,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Hypothesis {
        Hypothesis {
            token_ids: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated tokens excluding a trailing end id.
    pub fn content_ids(&self, end_id: u32) -> &[u32] {
        match self.token_ids.last() {
            Some(&last) if last == end_id => &self.token_ids[..self.token_ids.len() - 1],
            _ => &self.token_ids,
        }
    }
}

/// Length-normalized hypothesis score: log probability divided by
/// length^alpha. Alpha zero reproduces the raw log probability.
pub fn score(hypothesis: &Hypothesis, alpha: f64) -> Real {
    if alpha == 0.0 {
        return hypothesis.log_prob;
    }
    let len = hypothesis.token_ids.len().max(1) as Real;
    hypothesis.log_prob / len.powf(alpha as Real)
}

/// Token ids forbidden as the next emission: any id that would repeat a
/// trigram already present in the hypothesis. Empty when blocking is off or
/// fewer than two tokens exist.
pub fn blocked_tokens(hypothesis: &[u32], trigram_blocking: bool) -> BTreeSet<u32> {
    let mut blocked = BTreeSet::new();
    if !trigram_blocking || hypothesis.len() < 2 {
        return blocked;
    }
    let last_two = (hypothesis[hypothesis.len() - 2], hypothesis[hypothesis.len() - 1]);
    for window in hypothesis.windows(3) {
        if (window[0], window[1]) == last_two {
            blocked.insert(window[2]);
        }
    }
    blocked
}

/// Anything that maps a generated-so-far prefix to next-token log
/// probabilities. The summarizer implements it; tests drive the search with
/// mock distributions.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    /// Log probabilities over the vocabulary for the next token after
    /// `generated` (summary tokens only; conditioning context is the
    /// scorer's business).
    fn log_probs(&self, generated: &[u32]) -> Result<Vec<Real>, DecodeError>;
}

/// Upper bound on the score any continuation of `hyp` can reach: appending
/// tokens never increases log probability.
fn best_reachable(hyp: &Hypothesis, alpha: f64, max_len: usize) -> Real {
    if alpha == 0.0 {
        return hyp.log_prob;
    }
    if hyp.log_prob >= 0.0 {
        return 0.0;
    }
    hyp.log_prob / (max_len.max(1) as Real).powf(alpha as Real)
}

fn better(a: (Real, &[u32]), b: (Real, &[u32])) -> bool {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.1 < b.1,
    }
}

/// Standard beam search against a scorer. `end_id` finishes a hypothesis;
/// `never_emit` lists ids masked at every step (start and delimiter for the
/// summarizer).
pub fn beam_search(
    scorer: &dyn NextTokenScorer,
    end_id: u32,
    never_emit: &[u32],
    config: &GenConfig,
) -> Result<Hypothesis, DecodeError> {
    config.validate()?;
    let alpha = config.length_normalization_alpha;
    let mut live = vec![Hypothesis::empty()];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        if let Some(best_done) = finished
            .iter()
            .map(|h| score(h, alpha))
            .max_by(|a, b| a.total_cmp(b))
        {
            let best_bound = live
                .iter()
                .map(|h| best_reachable(h, alpha, config.max_summary_tokens))
                .fold(Real::NEG_INFINITY, Real::max);
            if best_done >= best_bound {
                break;
            }
        }

        let mut pool: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let log_probs = scorer.log_probs(&hyp.token_ids)?;
            if log_probs.len() != scorer.vocab_size() {
                return Err(DecodeError::Validation(format!(
                    "scorer returned {} log probabilities for a vocabulary of {}",
                    log_probs.len(),
                    scorer.vocab_size()
                )));
            }
            let blocked = blocked_tokens(&hyp.token_ids, config.trigram_blocking);
            let end_allowed = hyp.token_ids.len() >= config.min_summary_tokens;
            let mut candidates: Vec<(u32, Real)> = log_probs
                .iter()
                .enumerate()
                .filter_map(|(v, &lp)| {
                    let v = v as u32;
                    if blocked.contains(&v) || never_emit.contains(&v) {
                        return None;
                    }
                    if v == end_id && !end_allowed {
                        return None;
                    }
                    Some((v, lp))
                })
                .collect();
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            candidates.truncate(config.beam_size);

            for (v, lp) in candidates {
                let mut ids = hyp.token_ids.clone();
                ids.push(v);
                let next = Hypothesis {
                    log_prob: hyp.log_prob + lp,
                    finished: v == end_id || ids.len() == config.max_summary_tokens,
                    token_ids: ids,
                };
                if next.finished {
                    finished.push(next);
                } else {
                    pool.push(next);
                }
            }
        }

        pool.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.token_ids.cmp(&b.token_ids))
        });
        pool.truncate(config.beam_size);
        live = pool;
    }

    let pick_best = |hyps: &[Hypothesis]| -> Option<Hypothesis> {
        let mut best: Option<&Hypothesis> = None;
        for h in hyps {
            match best {
                None => best = Some(h),
                Some(b) => {
                    if better(
                        (score(h, alpha), &h.token_ids),
                        (score(b, alpha), &b.token_ids),
                    ) {
                        best = Some(h);
                    }
                }
            }
        }
        best.cloned()
    };

    if let Some(best) = pick_best(&finished) {
        return Ok(best);
    }
    // every continuation was blocked before anything finished; the best
    // live hypothesis is the only honest answer
    if let Some(mut best) = pick_best(&live) {
        best.finished = true;
        return Ok(best);
    }
    Err(DecodeError::Validation(
        "no candidate token is permitted at the first step".into(),
    ))
}

/// The summarizer as a scorer: each query runs the full forward pass over
/// `[start, article…, delimiter, generated…]` and log-softmaxes the last
/// logit row.
pub struct LmScorer<'a> {
    model: &'a SummarizerLM,
    article_ids: &'a [u32],
    specials: SpecialTokens,
}

impl<'a> LmScorer<'a> {
    pub fn new(
        model: &'a SummarizerLM,
        article_ids: &'a [u32],
        specials: SpecialTokens,
    ) -> Result<LmScorer<'a>, DecodeError> {
        let cfg = model.config();
        if article_ids.len() > cfg.max_article_tokens {
            return Err(DecodeError::Compatibility(format!(
                "article of {} tokens exceeds the model limit {}",
                article_ids.len(),
                cfg.max_article_tokens
            )));
        }
        if article_ids.is_empty() {
            return Err(DecodeError::Validation("article has no tokens".into()));
        }
        Ok(LmScorer {
            model,
            article_ids,
            specials,
        })
    }
}

impl NextTokenScorer for LmScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&self, generated: &[u32]) -> Result<Vec<Real>, DecodeError> {
        let batch = InputBatch::generation_prefix(
            self.article_ids,
            generated,
            &self.specials,
            self.model.config(),
        )?;
        let mut tape = Tape::new();
        let logits = self.model.forward(&batch, &mut tape, ForwardMode::Eval)?;
        let logits = tape.value(logits);
        let last = logits.row(logits.rows() - 1);
        Ok(log_softmax_slice(last))
    }
}

/// Full beam-search result for one article, including the accumulated log
/// probability. Never emits start or delimiter ids.
pub fn generate_hypothesis(
    model: &SummarizerLM,
    article_ids: &[u32],
    specials: &SpecialTokens,
    config: &GenConfig,
) -> Result<Hypothesis, DecodeError> {
    let mut effective = config.clone();
    // the model's position table caps how many summary tokens can exist
    effective.max_summary_tokens = config
        .max_summary_tokens
        .min(model.config().max_summary_tokens);
    effective.min_summary_tokens = config.min_summary_tokens.min(effective.max_summary_tokens);
    let scorer = LmScorer::new(model, article_ids, *specials)?;
    let never = [specials.start_id, specials.delimiter_id];
    beam_search(&scorer, specials.end_id, &never, &effective)
}

/// Generates a summary for one article: beam search from the article
/// prefix, returning the best finished hypothesis's tokens with the end id
/// stripped.
pub fn generate(
    model: &SummarizerLM,
    article_ids: &[u32],
    specials: &SpecialTokens,
    config: &GenConfig,
) -> Result<Vec<u32>, DecodeError> {
    let best = generate_hypothesis(model, article_ids, specials, config)?;
    Ok(best.content_ids(specials.end_id).to_vec())
}
