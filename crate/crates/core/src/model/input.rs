//! The joint article–summary input encoding.
//!
//! A training sequence is laid out `[start, article…, delimiter, summary…,
//! end]`. Positions count the article 1..=M with the delimiter carrying
//! M+1, then reset so the first summary token shares position 1 with the
//! first article token; the end token carries N+1. The start token sits at
//! position 0. Article, delimiter, and start carry the article source id;
//! summary tokens and the end token carry the summary source id.

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::tokenizer::SpecialTokens;

/// Which side of the joint sequence a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Article = 0,
    Summary = 1,
}

/// One encoded article–summary pair with positions, source ids, and the
/// per-position loss masks for the two training objectives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputBatch {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub source_ids: Vec<Source>,
    /// Positions whose token the domain-adaptive loss scores: everything
    /// after the start token.
    pub dat_mask: Vec<bool>,
    /// Positions whose token the end-task loss scores: exactly the summary
    /// tokens plus the end token.
    pub ett_mask: Vec<bool>,
    pub article_len: usize,
    pub summary_len: usize,
    /// False for generation prefixes, which stop before the end token.
    pub has_end: bool,
}

impl InputBatch {
    /// Full training layout `[start, article…, delimiter, summary…, end]`,
    /// T = M + N + 3.
    pub fn for_training(
        article_ids: &[u32],
        summary_ids: &[u32],
        specials: &SpecialTokens,
        config: &ModelConfig,
    ) -> Result<InputBatch, ModelError> {
        Self::build(article_ids, summary_ids, specials, config, true)
    }

    /// Generation layout `[start, article…, delimiter, generated…]` with no
    /// end token; masks describe no end-task positions beyond the generated
    /// tokens themselves.
    pub fn generation_prefix(
        article_ids: &[u32],
        partial_summary_ids: &[u32],
        specials: &SpecialTokens,
        config: &ModelConfig,
    ) -> Result<InputBatch, ModelError> {
        Self::build(article_ids, partial_summary_ids, specials, config, false)
    }

    /// Plain language-model layout `[start, tokens…]` used by generic-corpus
    /// pretraining: every position after the start is scored, everything is
    /// article-side, and there is no delimiter or end.
    pub fn language_model(
        token_ids: &[u32],
        specials: &SpecialTokens,
        config: &ModelConfig,
    ) -> Result<InputBatch, ModelError> {
        if token_ids.is_empty() {
            return Err(ModelError::Validation(
                "language-model sequence has no tokens".into(),
            ));
        }
        if token_ids.len() > config.max_article_tokens {
            return Err(ModelError::Validation(format!(
                "sequence of {} tokens exceeds the article limit {}",
                token_ids.len(),
                config.max_article_tokens
            )));
        }
        reject_specials(token_ids, specials, "text")?;
        let len = token_ids.len();
        let mut tokens = Vec::with_capacity(len + 1);
        tokens.push(specials.start_id);
        tokens.extend_from_slice(token_ids);
        let position_ids = (0..=len).collect();
        let mut dat_mask = vec![true; len + 1];
        dat_mask[0] = false;
        Ok(InputBatch {
            token_ids: tokens,
            position_ids,
            source_ids: vec![Source::Article; len + 1],
            dat_mask,
            ett_mask: vec![false; len + 1],
            article_len: len,
            summary_len: 0,
            has_end: false,
        })
    }

    fn build(
        article_ids: &[u32],
        summary_ids: &[u32],
        specials: &SpecialTokens,
        config: &ModelConfig,
        with_end: bool,
    ) -> Result<InputBatch, ModelError> {
        if article_ids.is_empty() {
            return Err(ModelError::Validation("article has no tokens".into()));
        }
        if article_ids.len() > config.max_article_tokens {
            return Err(ModelError::Validation(format!(
                "article of {} tokens exceeds the limit {}",
                article_ids.len(),
                config.max_article_tokens
            )));
        }
        if summary_ids.len() > config.max_summary_tokens {
            return Err(ModelError::Validation(format!(
                "summary of {} tokens exceeds the limit {}",
                summary_ids.len(),
                config.max_summary_tokens
            )));
        }
        reject_specials(article_ids, specials, "article")?;
        reject_specials(summary_ids, specials, "summary")?;

        let m = article_ids.len();
        let n = summary_ids.len();
        let total = m + n + 2 + usize::from(with_end);

        let mut token_ids = Vec::with_capacity(total);
        let mut position_ids = Vec::with_capacity(total);
        let mut source_ids = Vec::with_capacity(total);
        let mut ett_mask = Vec::with_capacity(total);

        token_ids.push(specials.start_id);
        position_ids.push(0);
        source_ids.push(Source::Article);
        ett_mask.push(false);

        for (i, &id) in article_ids.iter().enumerate() {
            token_ids.push(id);
            position_ids.push(i + 1);
            source_ids.push(Source::Article);
            ett_mask.push(false);
        }

        token_ids.push(specials.delimiter_id);
        position_ids.push(m + 1);
        source_ids.push(Source::Article);
        ett_mask.push(false);

        for (i, &id) in summary_ids.iter().enumerate() {
            token_ids.push(id);
            position_ids.push(i + 1);
            source_ids.push(Source::Summary);
            ett_mask.push(true);
        }

        if with_end {
            token_ids.push(specials.end_id);
            position_ids.push(n + 1);
            source_ids.push(Source::Summary);
            ett_mask.push(true);
        }

        let mut dat_mask = vec![true; total];
        dat_mask[0] = false;

        let batch = InputBatch {
            token_ids,
            position_ids,
            source_ids,
            dat_mask,
            ett_mask,
            article_len: m,
            summary_len: n,
            has_end: with_end,
        };
        debug_assert!(batch.check_invariants());
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Structural self-check used by tests: lengths agree, positions reset
    /// exactly at the first summary token, the source flips once, and the
    /// end-task mask is contained in the domain-adaptive mask.
    pub fn check_invariants(&self) -> bool {
        let t = self.token_ids.len();
        if self.position_ids.len() != t
            || self.source_ids.len() != t
            || self.dat_mask.len() != t
            || self.ett_mask.len() != t
        {
            return false;
        }
        if self.has_end && t != self.article_len + self.summary_len + 3 {
            return false;
        }
        // ett ⊆ dat
        if self.ett_mask.iter().zip(&self.dat_mask).any(|(e, d)| *e && !*d) {
            return false;
        }
        // the source switches article→summary at most once
        let flips = self
            .source_ids
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count();
        if flips > 1 || self.source_ids.first() != Some(&Source::Article) {
            return false;
        }
        // position reset: first article token and first summary token both
        // sit at position 1
        if self.article_len > 0 && self.position_ids[1] != 1 {
            return false;
        }
        if self.summary_len > 0 {
            let first_summary = self.article_len + 2;
            if self.position_ids[first_summary] != 1 {
                return false;
            }
        }
        true
    }
}

fn reject_specials(ids: &[u32], specials: &SpecialTokens, side: &str) -> Result<(), ModelError> {
    for &id in ids {
        if id == specials.start_id || id == specials.delimiter_id || id == specials.end_id {
            return Err(ModelError::Validation(format!(
                "special token id {id} must not appear inside the {side}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig::desk_scale(100)
    }

    fn specials() -> SpecialTokens {
        SpecialTokens::default()
    }

    #[test]
    fn training_layout_m2_n1() {
        let batch =
            InputBatch::for_training(&[10, 11], &[12], &specials(), &config()).unwrap();
        let s = specials();
        assert_eq!(
            batch.token_ids,
            vec![s.start_id, 10, 11, s.delimiter_id, 12, s.end_id]
        );
        // delimiter continues the article count at M+1; the counter resets
        // for the first summary token
        assert_eq!(batch.position_ids, vec![0, 1, 2, 3, 1, 2]);
        assert_eq!(batch.position_ids[1], batch.position_ids[4]);
        assert_eq!(
            batch.source_ids,
            vec![
                Source::Article,
                Source::Article,
                Source::Article,
                Source::Article,
                Source::Summary,
                Source::Summary
            ]
        );
        assert_eq!(batch.dat_mask, vec![false, true, true, true, true, true]);
        assert_eq!(batch.ett_mask, vec![false, false, false, false, true, true]);
    }

    #[test]
    fn generation_prefix_m1_n0() {
        let batch = InputBatch::generation_prefix(&[9], &[], &specials(), &config()).unwrap();
        let s = specials();
        assert_eq!(batch.token_ids, vec![s.start_id, 9, s.delimiter_id]);
        assert_eq!(batch.position_ids, vec![0, 1, 2]);
        assert!(batch.ett_mask.iter().all(|&m| !m));
        assert!(!batch.has_end);
    }

    #[test]
    fn ett_mask_selects_exactly_summary_and_end() {
        let batch =
            InputBatch::for_training(&[10, 11], &[12, 13], &specials(), &config()).unwrap();
        let selected: Vec<usize> = batch
            .ett_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        // s1 at index 4, s2 at 5, end at 6
        assert_eq!(selected, vec![4, 5, 6]);
    }

    #[test]
    fn special_ids_inside_article_are_rejected() {
        let s = specials();
        let err =
            InputBatch::for_training(&[10, s.delimiter_id], &[12], &s, &config()).unwrap_err();
        assert!(matches!(err, ModelError::Validation(_)));
    }

    #[test]
    fn over_limit_article_is_rejected() {
        let cfg = config();
        let long: Vec<u32> = (0..cfg.max_article_tokens as u32 + 1).map(|i| i + 10).collect();
        assert!(InputBatch::for_training(&long, &[12], &specials(), &cfg).is_err());
    }

    #[test]
    fn language_model_layout() {
        let batch = InputBatch::language_model(&[5, 6, 7], &specials(), &config()).unwrap();
        assert_eq!(batch.token_ids.len(), 4);
        assert_eq!(batch.position_ids, vec![0, 1, 2, 3]);
        assert_eq!(batch.dat_mask, vec![false, true, true, true]);
        assert!(batch.ett_mask.iter().all(|&m| !m));
    }

    #[test]
    fn invariants_hold_over_random_shapes() {
        let cfg = config();
        let s = specials();
        for m in 1..12usize {
            for n in 0..8usize {
                let article: Vec<u32> = (0..m as u32).map(|i| i + 20).collect();
                let summary: Vec<u32> = (0..n as u32).map(|i| i + 40).collect();
                let batch = InputBatch::for_training(&article, &summary, &s, &cfg).unwrap();
                assert!(batch.check_invariants(), "m={m} n={n}");
                assert_eq!(batch.len(), m + n + 3);
            }
        }
    }
}
