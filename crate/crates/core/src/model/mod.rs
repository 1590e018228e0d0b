//! The decoder-only transformer summarizer: word + reset-position + source
//! embeddings feeding masked self-attention blocks, with the output
//! projection tied to the word-embedding table.

mod checkpoint;
mod input;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, LoadedCheckpoint};
pub use input::{InputBatch, Source};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{NodeId, NumericsError, ParamId, ParamStore, Real, Tape, Tensor};
use crate::tokenizer::SpecialTokens;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{0}")]
    Validation(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture and input-budget hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub max_article_tokens: usize,
    pub max_summary_tokens: usize,
}

impl ModelConfig {
    /// The published full-scale configuration. Training it is out of desk
    /// reach; it exists as the reference default.
    pub fn paper_scale(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_blocks: 12,
            n_heads: 12,
            d_model: 768,
            vocab_size,
            max_positions: 514,
            dropout: 0.1,
            max_article_tokens: 512,
            max_summary_tokens: 110,
        }
    }

    /// A configuration small enough to train and test on a laptop CPU.
    pub fn desk_scale(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 32,
            vocab_size,
            max_positions: 66,
            dropout: 0.0,
            max_article_tokens: 64,
            max_summary_tokens: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 {
            return Err(ModelError::Validation(
                "blocks, heads, and width must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let needed = self.max_article_tokens.max(self.max_summary_tokens) + 2;
        if self.max_positions < needed {
            return Err(ModelError::Validation(format!(
                "max_positions {} below required {needed}",
                self.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Validation(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.vocab_size < 5 {
            return Err(ModelError::Validation(format!(
                "vocabulary of {} ids leaves no room after the reserved ones",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Whether a forward pass applies dropout.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

#[derive(Clone)]
struct BlockParams {
    q: Vec<ParamId>,
    qb: Vec<ParamId>,
    k: Vec<ParamId>,
    kb: Vec<ParamId>,
    v: Vec<ParamId>,
    vb: Vec<ParamId>,
    attn_proj: ParamId,
    attn_proj_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    mlp_fc: ParamId,
    mlp_fc_b: ParamId,
    mlp_proj: ParamId,
    mlp_proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// All learnable parameters plus the wiring to run them forward.
#[derive(Clone)]
pub struct SummarizerLM {
    config: ModelConfig,
    store: ParamStore,
    word_emb: ParamId,
    pos_emb: ParamId,
    source_emb: ParamId,
    blocks: Vec<BlockParams>,
}

const INIT_STD: f64 = 0.02;

impl SummarizerLM {
    /// Builds the parameter skeleton with all values zero. Registration
    /// order is fixed and shared with checkpoint loading.
    pub fn zeroed(config: ModelConfig) -> Result<SummarizerLM, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let dh = config.head_dim();
        let word_emb = store.add("wte", Tensor::zeros(&[config.vocab_size, d]))?;
        let pos_emb = store.add("wpe", Tensor::zeros(&[config.max_positions, d]))?;
        let source_emb = store.add("wse", Tensor::zeros(&[2, d]))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let mut q = Vec::new();
            let mut qb = Vec::new();
            let mut k = Vec::new();
            let mut kb = Vec::new();
            let mut v = Vec::new();
            let mut vb = Vec::new();
            for h in 0..config.n_heads {
                q.push(store.add(format!("block{b}.q{h}"), Tensor::zeros(&[d, dh]))?);
                qb.push(store.add(format!("block{b}.qb{h}"), Tensor::zeros(&[dh]))?);
                k.push(store.add(format!("block{b}.k{h}"), Tensor::zeros(&[d, dh]))?);
                kb.push(store.add(format!("block{b}.kb{h}"), Tensor::zeros(&[dh]))?);
                v.push(store.add(format!("block{b}.v{h}"), Tensor::zeros(&[d, dh]))?);
                vb.push(store.add(format!("block{b}.vb{h}"), Tensor::zeros(&[dh]))?);
            }
            blocks.push(BlockParams {
                q,
                qb,
                k,
                kb,
                v,
                vb,
                attn_proj: store.add(format!("block{b}.attn_proj"), Tensor::zeros(&[d, d]))?,
                attn_proj_b: store.add(format!("block{b}.attn_proj_b"), Tensor::zeros(&[d]))?,
                ln1_g: store.add(format!("block{b}.ln1_g"), Tensor::zeros(&[d]))?,
                ln1_b: store.add(format!("block{b}.ln1_b"), Tensor::zeros(&[d]))?,
                mlp_fc: store.add(format!("block{b}.mlp_fc"), Tensor::zeros(&[d, 4 * d]))?,
                mlp_fc_b: store.add(format!("block{b}.mlp_fc_b"), Tensor::zeros(&[4 * d]))?,
                mlp_proj: store.add(format!("block{b}.mlp_proj"), Tensor::zeros(&[4 * d, d]))?,
                mlp_proj_b: store.add(format!("block{b}.mlp_proj_b"), Tensor::zeros(&[d]))?,
                ln2_g: store.add(format!("block{b}.ln2_g"), Tensor::zeros(&[d]))?,
                ln2_b: store.add(format!("block{b}.ln2_b"), Tensor::zeros(&[d]))?,
            });
        }
        Ok(SummarizerLM {
            config,
            store,
            word_emb,
            pos_emb,
            source_emb,
            blocks,
        })
    }

    /// Random initialization. Embeddings and projection weights draw from a
    /// 0.02-std normal; the start/delimiter/end embedding rows draw standard
    /// normal; source-embedding rows are rescaled so each has norm equal to
    /// half the mean word-embedding row norm. Layer-norm gains start at 1.
    /// Identical seeds give bitwise-identical parameters.
    pub fn init_parameters(
        config: ModelConfig,
        seed: u64,
        specials: &SpecialTokens,
    ) -> Result<SummarizerLM, ModelError> {
        let mut model = SummarizerLM::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let unit = Normal::new(0.0f64, 1.0).expect("valid std");

        let fill = |t: &mut Tensor, rng: &mut ChaCha8Rng, dist: &Normal<f64>| {
            for v in t.values_mut() {
                *v = dist.sample(rng) as Real;
            }
        };

        let word_emb = model.word_emb;
        let pos_emb = model.pos_emb;
        let source_emb = model.source_emb;

        fill(&mut model.store.get_mut(word_emb).value, &mut rng, &small);
        // the specials added to the vocabulary draw from the standard normal
        let d = model.config.d_model;
        for &row in &[specials.start_id, specials.delimiter_id, specials.end_id] {
            let row = row as usize;
            if row >= model.config.vocab_size {
                return Err(ModelError::Validation(format!(
                    "special id {row} outside vocabulary of {}",
                    model.config.vocab_size
                )));
            }
            let table = &mut model.store.get_mut(word_emb).value;
            for j in 0..d {
                let v = unit.sample(&mut rng) as Real;
                table.values_mut()[row * d + j] = v;
            }
        }
        fill(&mut model.store.get_mut(pos_emb).value, &mut rng, &small);
        fill(&mut model.store.get_mut(source_emb).value, &mut rng, &unit);

        for b in 0..model.blocks.len() {
            let ids: Vec<ParamId> = {
                let blk = &model.blocks[b];
                blk.q
                    .iter()
                    .chain(&blk.k)
                    .chain(&blk.v)
                    .copied()
                    .chain([blk.attn_proj, blk.mlp_fc, blk.mlp_proj])
                    .collect()
            };
            for id in ids {
                fill(&mut model.store.get_mut(id).value, &mut rng, &small);
            }
            let (g1, g2) = (model.blocks[b].ln1_g, model.blocks[b].ln2_g);
            for id in [g1, g2] {
                for v in model.store.get_mut(id).value.values_mut() {
                    *v = 1.0;
                }
            }
        }

        model.rescale_source_embeddings();
        Ok(model)
    }

    /// Rescales both source-embedding rows so each has norm exactly
    /// 0.5 × the mean word-embedding row norm. Applied at initialization;
    /// exposed so tests can re-apply it after forcing word-embedding norms.
    pub fn rescale_source_embeddings(&mut self) {
        let d = self.config.d_model;
        let target = {
            let table = &self.store.get(self.word_emb).value;
            let mut total = 0.0;
            for r in 0..self.config.vocab_size {
                let row = &table.values()[r * d..(r + 1) * d];
                total += row.iter().map(|v| v * v).sum::<Real>().sqrt();
            }
            0.5 * total / self.config.vocab_size as Real
        };
        let source = &mut self.store.get_mut(self.source_emb).value;
        for r in 0..2 {
            let row = &mut source.values_mut()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            if norm > 0.0 {
                let s = target / norm;
                for v in row {
                    *v *= s;
                }
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn word_embedding_id(&self) -> ParamId {
        self.word_emb
    }

    pub fn source_embedding_id(&self) -> ParamId {
        self.source_emb
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.store.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    fn validate_batch(&self, batch: &InputBatch) -> Result<(), ModelError> {
        for &id in &batch.token_ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::Validation(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        if let Some(&max) = batch.position_ids.iter().max() {
            if max >= self.config.max_positions {
                return Err(ModelError::Validation(format!(
                    "position {max} overflows max_positions {}",
                    self.config.max_positions
                )));
            }
        }
        Ok(())
    }

    /// The Eq. 1–3 embedding: per position, the sum of the word, position,
    /// and source embedding rows. No dropout here.
    pub fn embed(&self, batch: &InputBatch, tape: &mut Tape) -> Result<NodeId, ModelError> {
        self.validate_batch(batch)?;
        let wte = tape.param(&self.store, self.word_emb);
        let wpe = tape.param(&self.store, self.pos_emb);
        let wse = tape.param(&self.store, self.source_emb);
        self.embed_with(batch, tape, wte, wpe, wse)
    }

    fn embed_with(
        &self,
        batch: &InputBatch,
        tape: &mut Tape,
        wte: NodeId,
        wpe: NodeId,
        wse: NodeId,
    ) -> Result<NodeId, ModelError> {
        let token_idx: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
        let source_idx: Vec<usize> = batch.source_ids.iter().map(|&s| s as usize).collect();
        let tok = tape.gather_rows(wte, &token_idx)?;
        let pos = tape.gather_rows(wpe, &batch.position_ids)?;
        let src = tape.gather_rows(wse, &source_idx)?;
        let sum = tape.add(tok, pos)?;
        Ok(tape.add(sum, src)?)
    }

    /// Runs the full decoder stack and returns next-token logits of shape
    /// T × vocab_size. Row t depends only on positions ≤ t.
    pub fn forward(
        &self,
        batch: &InputBatch,
        tape: &mut Tape,
        mode: ForwardMode<'_>,
    ) -> Result<NodeId, ModelError> {
        self.validate_batch(batch)?;
        let p = self.config.dropout as Real;
        let mut rng = match mode {
            ForwardMode::Train { dropout_rng } if p > 0.0 => Some(dropout_rng),
            _ => None,
        };
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as Real).sqrt();

        let wte = tape.param(&self.store, self.word_emb);
        let wpe = tape.param(&self.store, self.pos_emb);
        let wse = tape.param(&self.store, self.source_emb);
        let mut x = self.embed_with(batch, tape, wte, wpe, wse)?;
        if let Some(rng) = rng.as_deref_mut() {
            x = tape.dropout(x, p, rng);
        }

        for blk in &self.blocks {
            // masked multi-head self-attention with a post-norm residual
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let wq = tape.param(&self.store, blk.q[h]);
                let bq = tape.param(&self.store, blk.qb[h]);
                let wk = tape.param(&self.store, blk.k[h]);
                let bk = tape.param(&self.store, blk.kb[h]);
                let wv = tape.param(&self.store, blk.v[h]);
                let bv = tape.param(&self.store, blk.vb[h]);
                let q = tape.matmul(x, wq)?;
                let q = tape.add_bias(q, bq)?;
                let k = tape.matmul(x, wk)?;
                let k = tape.add_bias(k, bk)?;
                let v = tape.matmul(x, wv)?;
                let v = tape.add_bias(v, bv)?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, scale);
                let scores = tape.causal_mask(scores)?;
                let mut attn = tape.softmax_rows(scores)?;
                if let Some(rng) = rng.as_deref_mut() {
                    attn = tape.dropout(attn, p, rng);
                }
                heads.push(tape.matmul(attn, v)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let wo = tape.param(&self.store, blk.attn_proj);
            let bo = tape.param(&self.store, blk.attn_proj_b);
            let proj = tape.matmul(cat, wo)?;
            let mut proj = tape.add_bias(proj, bo)?;
            if let Some(rng) = rng.as_deref_mut() {
                proj = tape.dropout(proj, p, rng);
            }
            let res = tape.add(x, proj)?;
            let g1 = tape.param(&self.store, blk.ln1_g);
            let b1 = tape.param(&self.store, blk.ln1_b);
            x = tape.layer_norm_rows(res, g1, b1)?;

            // position-wise feed forward, also post-norm
            let w1 = tape.param(&self.store, blk.mlp_fc);
            let bf = tape.param(&self.store, blk.mlp_fc_b);
            let h1 = tape.matmul(x, w1)?;
            let h1 = tape.add_bias(h1, bf)?;
            let h1 = tape.gelu(h1);
            let w2 = tape.param(&self.store, blk.mlp_proj);
            let b2 = tape.param(&self.store, blk.mlp_proj_b);
            let h2 = tape.matmul(h1, w2)?;
            let mut h2 = tape.add_bias(h2, b2)?;
            if let Some(rng) = rng.as_deref_mut() {
                h2 = tape.dropout(h2, p, rng);
            }
            let res2 = tape.add(x, h2)?;
            let g2 = tape.param(&self.store, blk.ln2_g);
            let be2 = tape.param(&self.store, blk.ln2_b);
            x = tape.layer_norm_rows(res2, g2, be2)?;
        }

        // output projection tied to the word-embedding table
        Ok(tape.matmul_nt(x, wte)?)
    }
}
