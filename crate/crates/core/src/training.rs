//! The two training objectives and the schedule-driven loop.
//!
//! The domain-adaptive loss scores every predictable position of the joint
//! sequence; the end-task loss scores only summary tokens and the end
//! token. Schedules run pretraining, domain-adaptive, and end-task phases
//! in that order; when domain-adaptive training is absent its epoch budget
//! transfers to the end task, so schedules compare at equal total steps.
//!
//! Every stochastic choice (shuffling, dropout, the validation subset)
//! derives from the configured seed, the purpose, and the step or epoch
//! index, so runs are bitwise reproducible and resuming from a checkpoint
//! continues the identical stream.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate, DatasetSplit};
use crate::decoding::{self, DecodeError, GenConfig};
use crate::eval;
use crate::model::{
    save_checkpoint, CheckpointState, ForwardMode, InputBatch, LoadedCheckpoint, ModelError,
    SummarizerLM,
};
use crate::numerics::{NodeId, NumericsError, ParamStore, Real, Tape, Tensor};
use crate::tokenizer::{SpecialTokens, TokenizerError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The four schedule permutations of the training ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    #[serde(rename = "ETT")]
    Ett,
    #[serde(rename = "DAT+ETT")]
    DatEtt,
    #[serde(rename = "PT+ETT")]
    PtEtt,
    #[serde(rename = "PT+DAT+ETT")]
    PtDatEtt,
}

impl Schedule {
    pub fn has_pt(&self) -> bool {
        matches!(self, Schedule::PtEtt | Schedule::PtDatEtt)
    }

    pub fn has_dat(&self) -> bool {
        matches!(self, Schedule::DatEtt | Schedule::PtDatEtt)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Schedule::Ett => "ETT",
            Schedule::DatEtt => "DAT+ETT",
            Schedule::PtEtt => "PT+ETT",
            Schedule::PtDatEtt => "PT+DAT+ETT",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ETT" => Ok(Schedule::Ett),
            "DAT+ETT" => Ok(Schedule::DatEtt),
            "PT+ETT" => Ok(Schedule::PtEtt),
            "PT+DAT+ETT" => Ok(Schedule::PtDatEtt),
            other => Err(format!(
                "unknown schedule {other:?} (expected ETT, DAT+ETT, PT+ETT, or PT+DAT+ETT)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "DAT")]
    Dat,
    #[serde(rename = "ETT")]
    Ett,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pt => "PT",
            Phase::Dat => "DAT",
            Phase::Ett => "ETT",
        })
    }
}

/// Training hyperparameters. The learning rate and batch size defaults are
/// the published ones; desk-scale runs override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pt_epochs: usize,
    pub dat_epochs: usize,
    pub ett_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub gradient_clip_norm: f64,
    pub eval_subset_size: usize,
    pub eval_interval_steps: u64,
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 6.25e-5,
            batch_size: 64,
            pt_epochs: 10,
            dat_epochs: 10,
            ett_epochs: 10,
            schedule: Schedule::DatEtt,
            seed: 0,
            gradient_clip_norm: 1.0,
            eval_subset_size: 500,
            eval_interval_steps: 1000,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.eval_interval_steps == 0 {
            return Err(TrainError::Config(
                "eval_interval_steps must be at least 1".into(),
            ));
        }
        if self.gradient_clip_norm < 0.0 {
            return Err(TrainError::Config(
                "gradient_clip_norm must be nonnegative (0 disables clipping)".into(),
            ));
        }
        Ok(())
    }

    /// Plain `key = value` rendering with exactly the field names.
    pub fn to_key_value_string(&self) -> String {
        format!(
            "learning_rate = {}\nbatch_size = {}\npt_epochs = {}\ndat_epochs = {}\n\
             ett_epochs = {}\nschedule = {}\nseed = {}\ngradient_clip_norm = {}\n\
             eval_subset_size = {}\neval_interval_steps = {}\nwarmup_steps = {}\n",
            self.learning_rate,
            self.batch_size,
            self.pt_epochs,
            self.dat_epochs,
            self.ett_epochs,
            self.schedule,
            self.seed,
            self.gradient_clip_norm,
            self.eval_subset_size,
            self.eval_interval_steps,
            self.warmup_steps
        )
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the
    /// defaults.
    pub fn from_key_value_str(content: &str) -> Result<TrainConfig, TrainError> {
        let mut config = TrainConfig::default();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            config.set_field(key.trim(), value.trim()).map_err(|e| {
                TrainError::Config(format!("line {}: {e}", i + 1))
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set_field(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("bad value for {key}: {e}"))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "pt_epochs" => self.pt_epochs = parse(key, value)?,
            "dat_epochs" => self.dat_epochs = parse(key, value)?,
            "ett_epochs" => self.ett_epochs = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "gradient_clip_norm" => self.gradient_clip_norm = parse(key, value)?,
            "eval_subset_size" => self.eval_subset_size = parse(key, value)?,
            "eval_interval_steps" => self.eval_interval_steps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            other => return Err(format!("unknown configuration key {other:?}")),
        }
        Ok(())
    }
}

/// One history line: training loss every step, validation metrics at the
/// evaluation interval and at the end of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ett_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rouge1: Option<f64>,
}

/// Where the trainer currently stands, exposed for inspection and stored in
/// checkpoints for exact resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub phase: Phase,
    pub epoch_in_phase: usize,
    pub step_in_epoch: usize,
    pub phase_index: usize,
}

// ---------------------------------------------------------------------------
// losses

fn masked_next_token_loss(
    model: &SummarizerLM,
    batch: &InputBatch,
    scored: &[bool],
    tape: &mut Tape,
    mode: ForwardMode<'_>,
) -> Result<NodeId, TrainError> {
    let t = batch.len();
    if t < 2 {
        return Err(TrainError::Validation(
            "sequence too short to score any position".into(),
        ));
    }
    if !scored[1..].iter().any(|&m| m) {
        return Err(TrainError::Validation(
            "loss mask selects no positions".into(),
        ));
    }
    let logits = model.forward(batch, tape, mode)?;
    // row t predicts the token at position t+1
    let mut targets = vec![0u32; t];
    let mut row_mask = vec![false; t];
    for i in 0..t - 1 {
        targets[i] = batch.token_ids[i + 1];
        row_mask[i] = scored[i + 1];
    }
    Ok(tape.cross_entropy(logits, &targets, &row_mask)?)
}

/// Domain-adaptive loss: mean negative log-likelihood over every
/// predictable position — article tokens, delimiter, summary tokens, and
/// the end token.
pub fn dat_loss(
    model: &SummarizerLM,
    batch: &InputBatch,
    tape: &mut Tape,
    mode: ForwardMode<'_>,
) -> Result<NodeId, TrainError> {
    let mask = batch.dat_mask.clone();
    masked_next_token_loss(model, batch, &mask, tape, mode)
}

/// End-task loss: mean negative log-likelihood over summary tokens and the
/// end token only. Article positions contribute nothing.
pub fn ett_loss(
    model: &SummarizerLM,
    batch: &InputBatch,
    tape: &mut Tape,
    mode: ForwardMode<'_>,
) -> Result<NodeId, TrainError> {
    let mask = batch.ett_mask.clone();
    masked_next_token_loss(model, batch, &mask, tape, mode)
}

/// Evaluation-mode loss value, nats per scored token.
pub fn dat_loss_value(model: &SummarizerLM, batch: &InputBatch) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let node = dat_loss(model, batch, &mut tape, ForwardMode::Eval)?;
    Ok(tape.value(node).item() as f64)
}

pub fn ett_loss_value(model: &SummarizerLM, batch: &InputBatch) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let node = ett_loss(model, batch, &mut tape, ForwardMode::Eval)?;
    Ok(tape.value(node).item() as f64)
}

// ---------------------------------------------------------------------------
// optimizer

const ADAM_BETA1: Real = 0.9;
const ADAM_BETA2: Real = 0.999;
const ADAM_EPS: Real = 1e-8;

/// Adam moments, aligned with parameter-store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            step: 0,
            first_moments: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            second_moments: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One Adam update (β1 0.9, β2 0.999, ε 1e-8) with global-norm gradient
/// clipping. Gradients are zeroed afterward.
pub fn optimizer_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    learning_rate: f64,
    clip_norm: f64,
) -> Result<(), TrainError> {
    for (_, p) in store.iter() {
        if !p.grad.all_finite() {
            return Err(TrainError::NonFinite {
                what: format!("gradient of parameter {}", p.name),
            });
        }
    }
    let mut total_sq: Real = 0.0;
    for (_, p) in store.iter() {
        total_sq += p.grad.values().iter().map(|g| g * g).sum::<Real>();
    }
    let total_norm = total_sq.sqrt();
    let clip = clip_norm as Real;
    let scale: Real = if clip > 0.0 && total_norm > clip {
        clip / total_norm
    } else {
        1.0
    };

    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = learning_rate as Real;

    for (idx, (_, p)) in store.iter_mut().enumerate() {
        let m = self_values(&mut adam.first_moments[idx]);
        let v = self_values(&mut adam.second_moments[idx]);
        let grads = p.grad.values_mut();
        let values = p.value.values_mut();
        for i in 0..values.len() {
            let g = grads[i] * scale;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            grads[i] = 0.0;
        }
    }
    Ok(())
}

fn self_values(t: &mut Tensor) -> &mut [Real] {
    t.values_mut()
}

// ---------------------------------------------------------------------------
// data plumbing

/// A document encoded once, up front, with the gold summary text kept for
/// validation ROUGE.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub id: String,
    pub article_ids: Vec<u32>,
    pub summary_ids: Vec<u32>,
    pub summary_text: String,
}

/// Everything the trainer consumes: encoded summarization splits plus the
/// generic pretraining corpus (token sequences).
#[derive(Debug, Clone, Default)]
pub struct SummarizationData {
    pub train: Vec<EncodedExample>,
    pub validation: Vec<EncodedExample>,
    pub generic: Vec<Vec<u32>>,
}

impl SummarizationData {
    /// Encodes splits with prefix truncation to the model's token budgets.
    /// Generic documents (one per line of plain text) truncate to the
    /// article budget.
    pub fn encode(
        train: &DatasetSplit,
        validation: &DatasetSplit,
        generic_texts: &[String],
        vocab: &Vocabulary,
        max_article: usize,
        max_summary: usize,
    ) -> SummarizationData {
        let encode_split = |split: &DatasetSplit| -> Vec<EncodedExample> {
            split
                .documents
                .iter()
                .map(|doc| {
                    let (article_ids, summary_ids) =
                        truncate(doc, vocab, max_article, max_summary);
                    EncodedExample {
                        id: doc.id.clone(),
                        article_ids,
                        summary_ids,
                        summary_text: doc.summary.clone(),
                    }
                })
                .collect()
        };
        let generic = generic_texts
            .iter()
            .filter_map(|text| {
                let mut ids = vocab.encode(text).ids;
                ids.truncate(max_article);
                (!ids.is_empty()).then_some(ids)
            })
            .collect();
        SummarizationData {
            train: encode_split(train),
            validation: encode_split(validation),
            generic,
        }
    }
}

// ---------------------------------------------------------------------------
// deterministic stream derivation

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_EVAL_SUBSET: u64 = 3;

fn derive_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(tag)).wrapping_add(index)))
}

// ---------------------------------------------------------------------------
// trainer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Cursor {
    phase_idx: usize,
    epoch_in_phase: usize,
    step_in_epoch: usize,
    global_step: u64,
}

struct ValExample {
    batch: InputBatch,
    article_ids: Vec<u32>,
    gold_summary: String,
}

/// The best checkpoint seen so far under validation ROUGE-1.
pub struct BestSnapshot {
    pub rouge1: f64,
    pub step: u64,
    model: SummarizerLM,
}

impl BestSnapshot {
    pub fn model(&self) -> &SummarizerLM {
        &self.model
    }
}

/// Runs one schedule over pre-encoded data. Construction precomputes every
/// input batch; stepping is pure arithmetic plus the derived RNG streams.
pub struct Trainer {
    config: TrainConfig,
    vocab: Vocabulary,
    specials: SpecialTokens,
    model: SummarizerLM,
    adam: AdamState,
    plan: Vec<(Phase, usize)>,
    train_batches: Vec<InputBatch>,
    lm_batches: Vec<InputBatch>,
    val_examples: Vec<ValExample>,
    eval_subset: Vec<usize>,
    cursor: Cursor,
    history: Vec<MetricRecord>,
    best: Option<BestSnapshot>,
}

fn build_plan(config: &TrainConfig) -> Vec<(Phase, usize)> {
    let mut plan = Vec::new();
    if config.schedule.has_pt() && config.pt_epochs > 0 {
        plan.push((Phase::Pt, config.pt_epochs));
    }
    let mut ett_epochs = config.ett_epochs;
    if config.schedule.has_dat() {
        if config.dat_epochs > 0 {
            plan.push((Phase::Dat, config.dat_epochs));
        }
    } else {
        // without domain-adaptive training the whole budget is end-task
        ett_epochs += config.dat_epochs;
    }
    if ett_epochs > 0 {
        plan.push((Phase::Ett, ett_epochs));
    }
    plan
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        vocab: &Vocabulary,
        data: &SummarizationData,
        model: SummarizerLM,
    ) -> Result<Trainer, TrainError> {
        config.validate()?;
        if model.config().vocab_size != vocab.vocab_size() {
            return Err(TrainError::Config(format!(
                "model vocabulary size {} disagrees with the tokenizer's {}",
                model.config().vocab_size,
                vocab.vocab_size()
            )));
        }
        let plan = build_plan(&config);
        if plan.iter().any(|(p, _)| *p == Phase::Pt) && data.generic.is_empty() {
            return Err(TrainError::Config(
                "schedule includes pretraining but no generic corpus was supplied".into(),
            ));
        }
        if plan.iter().any(|(p, _)| matches!(p, Phase::Dat | Phase::Ett))
            && data.train.is_empty()
        {
            return Err(TrainError::Config(
                "schedule includes summarization phases but the training split is empty".into(),
            ));
        }

        let specials = vocab.special();
        let model_config = model.config().clone();
        let mut train_batches = Vec::with_capacity(data.train.len());
        for ex in &data.train {
            train_batches.push(InputBatch::for_training(
                &ex.article_ids,
                &ex.summary_ids,
                &specials,
                &model_config,
            )?);
        }
        let mut lm_batches = Vec::with_capacity(data.generic.len());
        for ids in &data.generic {
            lm_batches.push(InputBatch::language_model(ids, &specials, &model_config)?);
        }
        let mut val_examples = Vec::with_capacity(data.validation.len());
        for ex in &data.validation {
            val_examples.push(ValExample {
                batch: InputBatch::for_training(
                    &ex.article_ids,
                    &ex.summary_ids,
                    &specials,
                    &model_config,
                )?,
                article_ids: ex.article_ids.clone(),
                gold_summary: ex.summary_text.clone(),
            });
        }

        let subset_size = config.eval_subset_size.min(val_examples.len());
        let mut subset_rng = derive_rng(config.seed, TAG_EVAL_SUBSET, 0);
        let mut eval_subset =
            rand::seq::index::sample(&mut subset_rng, val_examples.len(), subset_size).into_vec();
        eval_subset.sort_unstable();

        let adam = AdamState::new(model.params());
        Ok(Trainer {
            config,
            vocab: vocab.clone(),
            specials,
            model,
            adam,
            plan,
            train_batches,
            lm_batches,
            val_examples,
            eval_subset,
            cursor: Cursor {
                phase_idx: 0,
                epoch_in_phase: 0,
                step_in_epoch: 0,
                global_step: 0,
            },
            history: Vec::new(),
            best: None,
        })
    }

    /// Continues a run from a mid-training checkpoint. The checkpoint must
    /// carry trainer state and match the supplied vocabulary.
    pub fn resume(
        config: TrainConfig,
        vocab: &Vocabulary,
        data: &SummarizationData,
        checkpoint: LoadedCheckpoint,
    ) -> Result<Trainer, TrainError> {
        checkpoint.ensure_vocab_hash(&vocab.content_hash())?;
        let state = checkpoint.state.ok_or_else(|| {
            TrainError::Config("checkpoint carries no trainer state to resume from".into())
        })?;
        let cursor: Cursor = serde_json::from_str(&state.cursor).map_err(|e| {
            TrainError::Config(format!("unreadable trainer state in checkpoint: {e}"))
        })?;
        let mut trainer = Trainer::new(config, vocab, data, checkpoint.model)?;
        if state.first_moments.len() != trainer.model.params().len() {
            return Err(TrainError::Config(
                "checkpoint optimizer state does not match the model".into(),
            ));
        }
        trainer.adam = AdamState {
            step: state.adam_step,
            first_moments: state.first_moments,
            second_moments: state.second_moments,
        };
        trainer.cursor = cursor;
        Ok(trainer)
    }

    pub fn model(&self) -> &SummarizerLM {
        &self.model
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.content_hash()
    }

    pub fn state(&self) -> TrainerState {
        let phase = self
            .plan
            .get(self.cursor.phase_idx)
            .map(|(p, _)| *p)
            .unwrap_or(Phase::Ett);
        TrainerState {
            step: self.cursor.global_step,
            phase,
            epoch_in_phase: self.cursor.epoch_in_phase,
            step_in_epoch: self.cursor.step_in_epoch,
            phase_index: self.cursor.phase_idx,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.cursor.phase_idx >= self.plan.len()
    }

    fn pool_len(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pt => self.lm_batches.len(),
            Phase::Dat | Phase::Ett => self.train_batches.len(),
        }
    }

    fn steps_per_epoch(&self, phase: Phase) -> usize {
        let n = self.pool_len(phase);
        n.div_ceil(self.config.batch_size)
    }

    /// Runs one optimizer step. Returns false when the schedule is already
    /// complete.
    pub fn step_once(
        &mut self,
        on_metric: &mut dyn FnMut(&MetricRecord),
    ) -> Result<bool, TrainError> {
        let Some(&(phase, phase_epochs)) = self.plan.get(self.cursor.phase_idx) else {
            return Ok(false);
        };
        let n = self.pool_len(phase);
        let steps_per_epoch = self.steps_per_epoch(phase);

        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_index =
            ((self.cursor.phase_idx as u64) << 32) | self.cursor.epoch_in_phase as u64;
        let mut shuffle_rng = derive_rng(self.config.seed, TAG_SHUFFLE, shuffle_index);
        order.shuffle(&mut shuffle_rng);

        let start = self.cursor.step_in_epoch * self.config.batch_size;
        let end = (start + self.config.batch_size).min(n);
        let selected = &order[start..end];
        let k = selected.len();

        let mut dropout_rng = derive_rng(self.config.seed, TAG_DROPOUT, self.cursor.global_step);
        self.model.params_mut().zero_grads();
        let mut loss_sum = 0.0f64;
        for &idx in selected {
            let mut tape = Tape::new();
            let node = match phase {
                Phase::Pt => {
                    let batch = &self.lm_batches[idx];
                    let mask = batch.dat_mask.clone();
                    masked_next_token_loss(
                        &self.model,
                        batch,
                        &mask,
                        &mut tape,
                        ForwardMode::Train {
                            dropout_rng: &mut dropout_rng,
                        },
                    )?
                }
                Phase::Dat => dat_loss(
                    &self.model,
                    &self.train_batches[idx],
                    &mut tape,
                    ForwardMode::Train {
                        dropout_rng: &mut dropout_rng,
                    },
                )?,
                Phase::Ett => ett_loss(
                    &self.model,
                    &self.train_batches[idx],
                    &mut tape,
                    ForwardMode::Train {
                        dropout_rng: &mut dropout_rng,
                    },
                )?,
            };
            loss_sum += tape.value(node).item() as f64;
            let scaled = tape.scale(node, 1.0 / k as Real);
            tape.backward(scaled, self.model.params_mut())?;
        }
        let train_loss = loss_sum / k as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "training loss".into(),
            });
        }

        let lr = if self.config.warmup_steps > 0 && self.adam.step < self.config.warmup_steps {
            self.config.learning_rate * (self.adam.step + 1) as f64
                / self.config.warmup_steps as f64
        } else {
            self.config.learning_rate
        };
        optimizer_step(
            self.model.params_mut(),
            &mut self.adam,
            lr,
            self.config.gradient_clip_norm,
        )?;

        // advance the cursor
        self.cursor.global_step += 1;
        self.cursor.step_in_epoch += 1;
        if self.cursor.step_in_epoch >= steps_per_epoch {
            self.cursor.step_in_epoch = 0;
            self.cursor.epoch_in_phase += 1;
            if self.cursor.epoch_in_phase >= phase_epochs {
                self.cursor.epoch_in_phase = 0;
                self.cursor.phase_idx += 1;
            }
        }

        let finished_now = self.is_finished();
        let interval_hit = self.cursor.global_step % self.config.eval_interval_steps == 0;
        let mut record = MetricRecord {
            step: self.cursor.global_step,
            phase,
            train_loss,
            val_ett_loss: None,
            val_rouge1: None,
        };
        if (interval_hit || finished_now) && !self.eval_subset.is_empty() {
            let (ett, rouge1) = self.validate()?;
            record.val_ett_loss = Some(ett);
            record.val_rouge1 = Some(rouge1);
            let improved = self.best.as_ref().map_or(true, |b| rouge1 > b.rouge1);
            if improved {
                self.best = Some(BestSnapshot {
                    rouge1,
                    step: self.cursor.global_step,
                    model: self.model.clone(),
                });
            }
        }
        on_metric(&record);
        self.history.push(record);
        Ok(true)
    }

    /// Mean end-task loss and mean ROUGE-1 F1 of beam-decoded summaries on
    /// the persistent validation subset.
    pub fn validate(&self) -> Result<(f64, f64), TrainError> {
        let gen_config = GenConfig {
            max_summary_tokens: self.model.config().max_summary_tokens,
            ..GenConfig::default()
        };
        let mut loss_sum = 0.0;
        let mut rouge_sum = 0.0;
        for &idx in &self.eval_subset {
            let ex = &self.val_examples[idx];
            loss_sum += ett_loss_value(&self.model, &ex.batch)?;
            let generated =
                decoding::generate(&self.model, &ex.article_ids, &self.specials, &gen_config)?;
            let text = self.vocab.decode(&generated)?;
            rouge_sum += eval::rouge_n(&text, &ex.gold_summary, 1).f1;
        }
        let n = self.eval_subset.len() as f64;
        Ok((loss_sum / n, rouge_sum / n))
    }

    pub fn run_to_completion(
        &mut self,
        on_metric: &mut dyn FnMut(&MetricRecord),
    ) -> Result<(), TrainError> {
        while self.step_once(on_metric)? {}
        Ok(())
    }

    /// Runs at most `n` further steps; returns how many actually ran.
    pub fn run_steps(
        &mut self,
        n: u64,
        on_metric: &mut dyn FnMut(&MetricRecord),
    ) -> Result<u64, TrainError> {
        let mut done = 0;
        while done < n && self.step_once(on_metric)? {
            done += 1;
        }
        Ok(done)
    }

    /// Saves the current model with full optimizer/trainer state, so the
    /// run can resume exactly.
    pub fn save_last(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let state = CheckpointState {
            adam_step: self.adam.step,
            first_moments: self.adam.first_moments.clone(),
            second_moments: self.adam.second_moments.clone(),
            cursor: serde_json::to_string(&self.cursor).expect("cursor serializes"),
        };
        save_checkpoint(&self.model, Some(&state), &self.vocab.content_hash(), path)?;
        Ok(())
    }

    /// Saves the highest-validation-ROUGE-1 parameters (falling back to the
    /// current model when no validation ever ran), without optimizer state.
    pub fn save_best(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let model = self.best.as_ref().map(|b| &b.model).unwrap_or(&self.model);
        save_checkpoint(model, None, &self.vocab.content_hash(), path)?;
        Ok(())
    }
}

/// Runs the configured schedule to completion and returns the trainer for
/// access to the final model, the best snapshot, and the metric history.
pub fn run_schedule(
    config: TrainConfig,
    vocab: &Vocabulary,
    data: &SummarizationData,
    model: SummarizerLM,
    on_metric: &mut dyn FnMut(&MetricRecord),
) -> Result<Trainer, TrainError> {
    let mut trainer = Trainer::new(config, vocab, data, model)?;
    trainer.run_to_completion(on_metric)?;
    Ok(trainer)
}

/// Generic-corpus language-model pretraining: the causal LM objective over
/// plain text documents for `pt_epochs`. Returns the trained model, usable
/// as initialization for a summarization schedule.
pub fn pretrain_lm(
    model: SummarizerLM,
    generic_texts: &[String],
    config: &TrainConfig,
    vocab: &Vocabulary,
    on_metric: &mut dyn FnMut(&MetricRecord),
) -> Result<(SummarizerLM, Vec<MetricRecord>), TrainError> {
    let max_article = model.config().max_article_tokens;
    let generic: Vec<Vec<u32>> = generic_texts
        .iter()
        .filter_map(|text| {
            let mut ids = vocab.encode(text).ids;
            ids.truncate(max_article);
            (!ids.is_empty()).then_some(ids)
        })
        .collect();
    if generic.is_empty() {
        return Err(TrainError::Validation(
            "generic pretraining corpus is empty".into(),
        ));
    }
    let mut pt_config = config.clone();
    pt_config.schedule = Schedule::PtEtt;
    pt_config.dat_epochs = 0;
    pt_config.ett_epochs = 0;
    let data = SummarizationData {
        train: Vec::new(),
        validation: Vec::new(),
        generic,
    };
    let mut trainer = Trainer::new(pt_config, vocab, &data, model)?;
    trainer.run_to_completion(on_metric)?;
    let history = trainer.history.clone();
    Ok((trainer.model, history))
}
