//! One binary for the whole pipeline: corpus statistics, BPE training,
//! schedule-driven model training, beam-search generation, and ROUGE
//! evaluation.
//!
//! Exit codes: 0 success, 2 usage/configuration/data error, 3 runtime
//! numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sumlm_core::corpus::{self, DatasetSplit, SplitName};
use sumlm_core::decoding::{self, GenConfig};
use sumlm_core::eval;
use sumlm_core::model::{load_checkpoint, ModelConfig, SummarizerLM};
use sumlm_core::tokenizer::{train_bpe, Vocabulary};
use sumlm_core::training::{
    MetricRecord, SummarizationData, TrainConfig, TrainError, Trainer,
};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

fn usage(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error,
    }
}

trait UsageContext<T> {
    fn or_usage(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> UsageContext<T> for Result<T, E> {
    fn or_usage(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| usage(anyhow::Error::new(e).context(what.to_string())))
    }
}

fn train_failure(e: TrainError) -> Failure {
    let code = match &e {
        TrainError::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    };
    Failure {
        code,
        error: anyhow::Error::new(e),
    }
}

#[derive(Parser)]
#[command(
    name = "sumlm",
    about = "Train and run an abstractive summarizer built on a decoder-only transformer LM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics: split sizes, novel n-gram fractions, mean lengths
    Stats(StatsArgs),
    /// Train a byte-pair-encoding vocabulary
    TrainBpe(TrainBpeArgs),
    /// Train the summarizer under a PT/DAT/ETT schedule
    Train(TrainArgs),
    /// Generate summaries with beam search
    Generate(GenerateArgs),
    /// Score candidate summaries against references with ROUGE
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset directory (train/validation/test.jsonl) or a single .jsonl file
    #[arg(long)]
    data: PathBuf,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBpeArgs {
    /// Dataset directory or a single .jsonl file; articles and summaries feed training
    #[arg(long)]
    data: PathBuf,
    /// Total vocabulary size including reserved ids
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    /// Extra plain-text files (one document per line), e.g. the generic corpus
    #[arg(long)]
    extra_text: Vec<PathBuf>,
    /// Output vocabulary file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing train.jsonl (validation.jsonl optional)
    #[arg(long)]
    data: PathBuf,
    /// Trained vocabulary file
    #[arg(long)]
    vocab: PathBuf,
    /// Output directory (falls back to $SUMLM_OUT_ROOT)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Plain-text generic corpus, required when the schedule includes PT
    #[arg(long)]
    generic: Option<PathBuf>,
    /// Key = value training-configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,

    // training overrides
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pt_epochs: Option<usize>,
    #[arg(long)]
    dat_epochs: Option<usize>,
    #[arg(long)]
    ett_epochs: Option<usize>,
    #[arg(long)]
    gradient_clip_norm: Option<f64>,
    #[arg(long)]
    eval_subset_size: Option<usize>,
    #[arg(long)]
    eval_interval_steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,

    // model size (desk-scale defaults; the published configuration is
    // --n-blocks 12 --n-heads 12 --d-model 768 --max-article-tokens 512
    // --max-summary-tokens 110 --dropout 0.1)
    #[arg(long, default_value_t = 2)]
    n_blocks: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    max_article_tokens: usize,
    #[arg(long, default_value_t = 24)]
    max_summary_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,

    /// Suppress per-step progress lines
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file (must match the checkpoint's hash)
    #[arg(long)]
    vocab: PathBuf,
    /// Input dataset (.jsonl with article/summary records)
    #[arg(long)]
    data: PathBuf,
    /// Output summaries file (.jsonl)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    beam_size: usize,
    #[arg(long)]
    max_summary_tokens: Option<usize>,
    #[arg(long, default_value_t = 0)]
    min_summary_tokens: usize,
    /// Disable the trigram repetition block
    #[arg(long)]
    no_trigram_blocking: bool,
    #[arg(long, default_value_t = 0.0)]
    length_norm_alpha: f64,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Candidate summaries (.jsonl with id/summary_text records)
    #[arg(long)]
    candidates: PathBuf,
    /// Reference dataset (.jsonl with article/summary records)
    #[arg(long)]
    references: PathBuf,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add a length-binned ROUGE-L section with this bin width in words
    #[arg(long, num_args = 0..=1, default_missing_value = "10")]
    length_bins: Option<usize>,
    /// Add the stopword-stripped ROUGE-L-vs-article section
    #[arg(long)]
    efficiency: bool,
    /// Stopword file (one lowercase word per line); a bundled list is the default
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Include per-document scores in the report
    #[arg(long)]
    per_document: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(args) => cmd_stats(args),
        Command::TrainBpe(args) => cmd_train_bpe(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

// ---------------------------------------------------------------------------
// shared loading helpers

/// Loads a dataset path: a directory with split files, or one .jsonl file
/// whose stem names the split (anything else loads as train).
fn load_dataset(path: &Path) -> Result<Vec<DatasetSplit>, Failure> {
    if path.is_file() {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<SplitName>().ok())
            .unwrap_or(SplitName::Train);
        let split = corpus::load_jsonl(path, name).or_usage("loading dataset")?;
        return Ok(vec![split]);
    }
    if !path.is_dir() {
        return Err(usage(anyhow!(
            "dataset path {} does not exist",
            path.display()
        )));
    }
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let file = path.join(format!("{name}.jsonl"));
        if file.is_file() {
            splits.push(corpus::load_jsonl(&file, name).or_usage("loading dataset")?);
        }
    }
    if splits.is_empty() {
        return Err(usage(anyhow!(
            "no train.jsonl, validation.jsonl, or test.jsonl under {}",
            path.display()
        )));
    }
    Ok(splits)
}

fn split_by_name(splits: &[DatasetSplit], name: SplitName) -> DatasetSplit {
    splits
        .iter()
        .find(|s| s.name == name)
        .cloned()
        .unwrap_or(DatasetSplit {
            name,
            documents: Vec::new(),
        })
}

fn write_report(out: &Option<PathBuf>, value: &impl Serialize) -> CmdResult {
    let rendered = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    match out {
        Some(path) => fs::write(path, rendered).or_usage("writing report")?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let content = fs::read_to_string(path).or_usage("reading text file")?;
    Ok(content.lines().map(|l| l.to_string()).collect())
}

// ---------------------------------------------------------------------------
// stats

fn cmd_stats(args: StatsArgs) -> CmdResult {
    let splits = load_dataset(&args.data)?;
    let stats = corpus::corpus_stats(&splits).or_usage("computing statistics")?;
    eprintln!(
        "stats over {} documents from {}",
        splits.iter().map(|s| s.documents.len()).sum::<usize>(),
        args.data.display()
    );
    write_report(&args.out, &stats)
}

// ---------------------------------------------------------------------------
// train-bpe

fn cmd_train_bpe(args: TrainBpeArgs) -> CmdResult {
    let splits = load_dataset(&args.data)?;
    let mut texts: Vec<String> = Vec::new();
    for split in &splits {
        for doc in &split.documents {
            texts.push(doc.article.clone());
            texts.push(doc.summary.clone());
        }
    }
    for extra in &args.extra_text {
        texts.extend(read_lines(extra)?);
    }
    let vocab = train_bpe(&texts, args.vocab_size).or_usage("training BPE")?;
    vocab.save(&args.out).or_usage("saving vocabulary")?;
    eprintln!(
        "trained vocabulary: {} ids ({} merges) -> {}",
        vocab.vocab_size(),
        vocab.merges().len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Serialize)]
struct ResolvedRunConfig<'a> {
    train_config: &'a TrainConfig,
    model_config: &'a ModelConfig,
    vocab_hash: &'a str,
    data: String,
    generic: Option<String>,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    // resolution order: defaults <- config file <- flags
    let mut config = match &args.config {
        Some(path) => {
            let content = fs::read_to_string(path).or_usage("reading config file")?;
            TrainConfig::from_key_value_str(&content).map_err(train_failure)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = &args.schedule {
        config.schedule = s.parse().map_err(|e: String| usage(anyhow!(e)))?;
    }
    macro_rules! override_field {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag {
                config.$field = v;
            }
        };
    }
    override_field!(args.seed, seed);
    override_field!(args.learning_rate, learning_rate);
    override_field!(args.batch_size, batch_size);
    override_field!(args.pt_epochs, pt_epochs);
    override_field!(args.dat_epochs, dat_epochs);
    override_field!(args.ett_epochs, ett_epochs);
    override_field!(args.gradient_clip_norm, gradient_clip_norm);
    override_field!(args.eval_subset_size, eval_subset_size);
    override_field!(args.eval_interval_steps, eval_interval_steps);
    override_field!(args.warmup_steps, warmup_steps);
    config.validate().map_err(train_failure)?;

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("SUMLM_OUT_ROOT").map(PathBuf::from))
        .ok_or_else(|| usage(anyhow!("--out-dir is required (or set SUMLM_OUT_ROOT)")))?;
    fs::create_dir_all(&out_dir).or_usage("creating output directory")?;

    let vocab = Vocabulary::load(&args.vocab).or_usage("loading vocabulary")?;
    let splits = load_dataset(&args.data)?;
    let train_split = split_by_name(&splits, SplitName::Train);
    if train_split.documents.is_empty() {
        return Err(usage(anyhow!(
            "training split under {} is empty",
            args.data.display()
        )));
    }
    let validation_split = split_by_name(&splits, SplitName::Validation);
    let generic_texts = match &args.generic {
        Some(path) => read_lines(path)?,
        None => Vec::new(),
    };

    let model_config = ModelConfig {
        n_blocks: args.n_blocks,
        n_heads: args.n_heads,
        d_model: args.d_model,
        vocab_size: vocab.vocab_size(),
        max_positions: args.max_article_tokens.max(args.max_summary_tokens) + 2,
        dropout: args.dropout,
        max_article_tokens: args.max_article_tokens,
        max_summary_tokens: args.max_summary_tokens,
    };
    let data = SummarizationData::encode(
        &train_split,
        &validation_split,
        &generic_texts,
        &vocab,
        model_config.max_article_tokens,
        model_config.max_summary_tokens,
    );

    // provenance echo
    let resolved = ResolvedRunConfig {
        train_config: &config,
        model_config: &model_config,
        vocab_hash: &vocab.content_hash(),
        data: args.data.display().to_string(),
        generic: args.generic.as_ref().map(|p| p.display().to_string()),
    };
    fs::write(
        out_dir.join("run_config.json"),
        serde_json::to_string_pretty(&resolved).expect("config serializes") + "\n",
    )
    .or_usage("writing run_config.json")?;
    fs::write(out_dir.join("train_config.txt"), config.to_key_value_string())
        .or_usage("writing train_config.txt")?;

    let model = SummarizerLM::init_parameters(model_config, config.seed, &vocab.special())
        .map_err(|e| usage(anyhow::Error::new(e)))?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path).or_usage("creating metrics.jsonl")?;
    let quiet = args.quiet;
    let mut on_metric = move |record: &MetricRecord| {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(metrics_file, "{line}").expect("metrics file writable");
        if !quiet && (record.val_ett_loss.is_some() || record.step % 25 == 0) {
            eprintln!(
                "step {:>6} [{}] loss {:.4}{}",
                record.step,
                record.phase,
                record.train_loss,
                match (record.val_ett_loss, record.val_rouge1) {
                    (Some(l), Some(r)) => format!("  val-ett {l:.4}  val-r1 {r:.4}"),
                    _ => String::new(),
                }
            );
        }
    };

    let mut trainer =
        Trainer::new(config, &vocab, &data, model).map_err(train_failure)?;
    trainer.run_to_completion(&mut on_metric).map_err(train_failure)?;

    trainer
        .save_last(&out_dir.join("last.ckpt"))
        .map_err(train_failure)?;
    trainer
        .save_best(&out_dir.join("best.ckpt"))
        .map_err(train_failure)?;
    if let Some(best) = trainer.best() {
        eprintln!(
            "done: {} steps; best validation ROUGE-1 {:.4} at step {}",
            trainer.state().step,
            best.rouge1,
            best.step
        );
    } else {
        eprintln!("done: {} steps (no validation ran)", trainer.state().step);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

#[derive(Serialize, Deserialize)]
struct SummaryRecord {
    id: String,
    summary_text: String,
    log_prob: f64,
    length: usize,
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    let vocab = Vocabulary::load(&args.vocab).or_usage("loading vocabulary")?;
    let loaded = load_checkpoint(&args.checkpoint).or_usage("loading checkpoint")?;
    loaded
        .ensure_vocab_hash(&vocab.content_hash())
        .or_usage("checking checkpoint/vocabulary compatibility")?;
    let model = loaded.model;

    let split = corpus::load_jsonl(&args.data, SplitName::Test).or_usage("loading input data")?;
    let gen_config = GenConfig {
        beam_size: args.beam_size,
        max_summary_tokens: args
            .max_summary_tokens
            .unwrap_or(model.config().max_summary_tokens),
        min_summary_tokens: args.min_summary_tokens,
        trigram_blocking: !args.no_trigram_blocking,
        length_normalization_alpha: args.length_norm_alpha,
    };
    eprintln!(
        "generating {} summaries with {}",
        split.documents.len(),
        serde_json::to_string(&gen_config).expect("config serializes")
    );

    let specials = vocab.special();
    let mut out = fs::File::create(&args.out).or_usage("creating output file")?;
    for (i, doc) in split.documents.iter().enumerate() {
        let mut article_ids = vocab.encode(&doc.article).ids;
        article_ids.truncate(model.config().max_article_tokens);
        let hyp = decoding::generate_hypothesis(&model, &article_ids, &specials, &gen_config)
            .or_usage("generating")?;
        let content = hyp.content_ids(specials.end_id);
        let record = SummaryRecord {
            id: doc.id.clone(),
            summary_text: vocab.decode(content).or_usage("decoding summary")?,
            log_prob: hyp.log_prob as f64,
            length: content.len(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )
        .or_usage("writing summary")?;
        if !args.quiet {
            eprintln!("[{}/{}] {}", i + 1, split.documents.len(), doc.id);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    rouge: eval::CorpusRougeReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    length_bins: Option<eval::LengthBinReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    efficiency: Option<eval::EfficiencyReport>,
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let content = fs::read_to_string(&args.candidates).or_usage("reading candidates")?;
    let mut candidates: Vec<SummaryRecord> = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SummaryRecord = serde_json::from_str(line)
            .with_context(|| format!("candidates line {}", i + 1))
            .map_err(usage)?;
        candidates.push(record);
    }
    let references =
        corpus::load_jsonl(&args.references, SplitName::Test).or_usage("loading references")?;

    if candidates.len() != references.documents.len() {
        return Err(usage(anyhow!(
            "{} candidates but {} references",
            candidates.len(),
            references.documents.len()
        )));
    }
    for (c, r) in candidates.iter().zip(&references.documents) {
        if c.id != r.id {
            return Err(usage(anyhow!(
                "candidate id {:?} does not line up with reference id {:?}",
                c.id,
                r.id
            )));
        }
    }

    let cand_texts: Vec<String> = candidates.iter().map(|c| c.summary_text.clone()).collect();
    let ref_texts: Vec<String> = references
        .documents
        .iter()
        .map(|d| d.summary.clone())
        .collect();
    let rouge = eval::evaluate_corpus(&cand_texts, &ref_texts, args.per_document)
        .or_usage("evaluating")?;

    let length_bins = match args.length_bins {
        Some(width) => {
            let pairs: Vec<(String, String)> = cand_texts
                .iter()
                .cloned()
                .zip(ref_texts.iter().cloned())
                .collect();
            Some(eval::length_bin_report(&pairs, width).or_usage("length bins")?)
        }
        None => None,
    };

    let efficiency = if args.efficiency {
        let stopwords = match &args.stopwords {
            Some(path) => eval::load_stopwords(path).or_usage("loading stopwords")?,
            None => eval::default_stopwords(),
        };
        let pairs = candidates
            .iter()
            .zip(&references.documents)
            .map(|(c, r)| (c.summary_text.as_str(), r.article.as_str()));
        Some(eval::efficiency_report(pairs, &stopwords).or_usage("efficiency report")?)
    } else {
        None
    };

    eprintln!(
        "evaluated {} pairs from {}",
        cand_texts.len(),
        args.candidates.display()
    );
    write_report(
        &args.out,
        &EvalOutput {
            rouge,
            length_bins,
            efficiency,
        },
    )
}
