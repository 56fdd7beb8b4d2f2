//! Pretraining and fine-tuning loops, checkpointing, and the matched
//! comparison procedures (perplexity-matched checkpoints, accuracy at
//! equal in-distribution loss).

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, quantize_params, save_checkpoint, Checkpoint, CheckpointHeader,
};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::ModelShape;
use crate::model::{Activation, ModelError, TokenBatch, TransformerModel};
use crate::numerics::{
    optimizer_step, AdamConfig, LrSchedule, NumericsError, OptimizerState,
};
use crate::seeding::substream_seed;
use crate::tasks::{
    GenType, PretrainCorpus, Seq2SeqExample, TaskDataset, TaskError, BOS, EOS, PAD, SEP,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("NaN loss at step {step} (lr {lr:.3e}, previous grad norm {grad_norm:.3e})")]
    NanLoss { step: u64, lr: f64, grad_norm: f64 },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("numerics error: {0}")]
    Numerics(#[from] NumericsError),
    #[error("task error: {0}")]
    Task(#[from] TaskError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint shape {ckpt:?} does not match configured shape {cfg:?}")]
    ShapeMismatch {
        ckpt: Box<ModelShape>,
        cfg: Box<ModelShape>,
    },
    #[error("vocabulary mismatch: checkpoint {ckpt}, task {task}")]
    VocabularyMismatch { ckpt: String, task: String },
    #[error("sequence of {len} tokens exceeds context {n_ctx}: {text}")]
    ExampleTooLong {
        len: usize,
        n_ctx: usize,
        text: String,
    },
    #[error("no checkpoint reaches reference perplexity {reference}; best achieved {best}")]
    NoneQualifies { reference: f64, best: f64 },
    #[error("loss target {target} never reached; minimum recorded loss {min_loss}")]
    LossNotReached { target: f64, min_loss: f64 },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("checkpoint steps not strictly increasing at step {0}")]
    NonMonotoneSteps(u64),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RunConfig {
    pub shape: ModelShape,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Fixed held-out budget: number of validation batches per evaluation.
    pub val_batches: usize,
    pub activation: Activation,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be > 0".into()));
        }
        if self.checkpoint_every == 0 || self.steps % self.checkpoint_every != 0 {
            return Err(TrainError::Config(format!(
                "checkpoint_every ({}) must divide steps ({})",
                self.checkpoint_every, self.steps
            )));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be > 0".into()));
        }
        Ok(())
    }
}

/// Saved parameter snapshot bookkeeping, the unit of checkpoint matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub step: u64,
    pub val_perplexity: f64,
    pub id_loss: Option<f64>,
}

/// One evaluation record as written to `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub n_layers: usize,
    pub d_ff: usize,
    pub step: u64,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match_lexical: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match_structural: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Identity of a run for metrics/reporting.
#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub run_id: String,
    pub class: Option<String>,
    pub task: Option<String>,
    pub seed_label: Option<u64>,
}

impl RunMeta {
    fn row(&self, shape: &ModelShape, step: u64, split: &str) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id.clone(),
            n_layers: shape.n_layers,
            d_ff: shape.d_ff,
            step,
            split: split.to_string(),
            loss: None,
            ppl: None,
            exact_match: None,
            exact_match_lexical: None,
            exact_match_structural: None,
            class: self.class.clone(),
            task: self.task.clone(),
            d_model: Some(shape.d_model),
            seed: self.seed_label,
        }
    }
}

struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    fn create(dir: &Path) -> Result<MetricsWriter, TrainError> {
        let path = dir.join("metrics.jsonl");
        let file = std::fs::File::create(&path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(MetricsWriter { file, path })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(self.file, "{line}").map_err(|e| TrainError::Io {
            path: self.path.display().to_string(),
            source: e,
        })
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn grad_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Perplexity `exp(mean token NLL)` of a model over LM chunks, using at
/// most `max_batches` batches of `batch_size` chunks.
pub fn validation_perplexity(
    model: &TransformerModel,
    chunks: &[Vec<u32>],
    batch_size: usize,
    max_batches: usize,
) -> Result<f64, TrainError> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for batch in chunks.chunks(batch_size).take(max_batches) {
        let tokens = TokenBatch::new(batch).expect("equal chunk lengths");
        let (loss, _) = model.lm_loss(&tokens, false)?;
        let scored = batch.len() * (batch[0].len() - 1);
        total_nll += loss.to_scalar() * scored as f64;
        total_tokens += scored;
    }
    if total_tokens == 0 {
        return Err(TrainError::Config("no validation tokens".into()));
    }
    Ok((total_nll / total_tokens as f64).exp())
}

pub struct PretrainRun {
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_val_perplexity: f64,
    pub out_dir: PathBuf,
}

/// Causal-LM pretraining with periodic evaluation and checkpointing. Runs
/// to completion (no early stopping); a NaN loss aborts with diagnostics.
pub fn pretrain(
    cfg: &RunConfig,
    corpus: &PretrainCorpus,
    out_dir: &Path,
    meta: &RunMeta,
) -> Result<PretrainRun, TrainError> {
    cfg.validate()?;
    cfg.shape.validate().map_err(ModelError::Shape)?;
    if corpus.train_chunks.is_empty() || corpus.val_chunks.is_empty() {
        return Err(TrainError::Config("corpus has empty splits".into()));
    }
    if corpus.n_ctx > cfg.shape.n_ctx {
        return Err(TrainError::Config(format!(
            "corpus chunks of {} tokens exceed model context {}",
            corpus.n_ctx, cfg.shape.n_ctx
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut metrics = MetricsWriter::create(out_dir)?;

    let mut model =
        TransformerModel::init(cfg.shape, substream_seed(cfg.seed, &["model-init"]))?;
    model.activation = cfg.activation;
    let mut state = OptimizerState::new(cfg.schedule, cfg.adam);
    let mut checkpoints: Vec<CheckpointRecord> = Vec::new();
    let mut prev_grad_norm = f64::NAN;

    let n_chunks = corpus.train_chunks.len();
    let mut epoch = 0u64;
    let mut order = shuffled_indices(n_chunks, substream_seed(cfg.seed, &["batches", "0"]));
    let mut cursor = 0usize;
    let mut final_ppl = f64::NAN;

    for step in 1..=cfg.steps {
        // Assemble the batch, reshuffling per epoch.
        let mut rows: Vec<Vec<u32>> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= n_chunks {
                epoch += 1;
                order = shuffled_indices(
                    n_chunks,
                    substream_seed(cfg.seed, &["batches", &epoch.to_string()]),
                );
                cursor = 0;
            }
            rows.push(corpus.train_chunks[order[cursor]].clone());
            cursor += 1;
        }
        let tokens = TokenBatch::new(&rows).expect("uniform chunk length");

        let lr = state.next_lr();
        let (loss, pass) = model.lm_loss(&tokens, true)?;
        let loss_value = loss.to_scalar();
        if !loss_value.is_finite() {
            return Err(TrainError::NanLoss {
                step,
                lr,
                grad_norm: prev_grad_norm,
            });
        }
        let mut grads = loss.backward()?;
        let named = pass.named_gradients(&mut grads)?;
        prev_grad_norm = grad_norm(&named);
        optimizer_step(&mut model.params, &mut state, &named, lr)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let ppl = validation_perplexity(
                &model,
                &corpus.val_chunks,
                cfg.batch_size,
                cfg.val_batches,
            )?;
            final_ppl = ppl;
            let mut row = meta.row(&cfg.shape, step, "pretrain_val");
            row.loss = Some(ppl.ln());
            row.ppl = Some(ppl);
            metrics.write(&row)?;
        }

        if step % cfg.checkpoint_every == 0 {
            // Record the perplexity of what the file will actually hold:
            // the 32-bit-rounded parameters.
            let quant = quantize_params(&model.params);
            let quant_model = TransformerModel::from_params(cfg.shape, quant, cfg.activation)?;
            let ppl = validation_perplexity(
                &quant_model,
                &corpus.val_chunks,
                cfg.batch_size,
                cfg.val_batches,
            )?;
            let path = out_dir.join(format!("ckpt_{step:07}.ckpt"));
            save_checkpoint(
                &path,
                &cfg.shape,
                cfg.activation,
                &model.params,
                step,
                cfg.seed,
                ppl,
                &corpus.vocab_fingerprint,
            )?;
            checkpoints.push(CheckpointRecord {
                path,
                step,
                val_perplexity: ppl,
                id_loss: None,
            });
        }
    }

    let records_path = out_dir.join("records.json");
    std::fs::write(
        &records_path,
        serde_json::to_string_pretty(&checkpoints).expect("records serialize"),
    )
    .map_err(|e| TrainError::Io {
        path: records_path.display().to_string(),
        source: e,
    })?;
    Ok(PretrainRun {
        checkpoints,
        final_val_perplexity: final_ppl,
        out_dir: out_dir.to_path_buf(),
    })
}

// ---- fine-tuning ---------------------------------------------------------

/// Encoded fine-tuning example: `<bos> source <sep> target <eos>`, loss on
/// the target span (including `<eos>`).
#[derive(Debug, Clone)]
struct EncodedExample {
    ids: Vec<u32>,
    sep_pos: usize,
}

fn encode_example(
    ex: &Seq2SeqExample,
    task: &TaskDataset,
    n_ctx: usize,
) -> Result<EncodedExample, TrainError> {
    let mut ids = vec![BOS];
    ids.extend(task.vocabulary.encode(&ex.source)?);
    let sep_pos = ids.len();
    ids.push(SEP);
    ids.extend(task.vocabulary.encode(&ex.target)?);
    ids.push(EOS);
    if ids.len() > n_ctx {
        return Err(TrainError::ExampleTooLong {
            len: ids.len(),
            n_ctx,
            text: ex.source_text(),
        });
    }
    Ok(EncodedExample { ids, sep_pos })
}

/// Pads a set of encoded examples into one batch with a target-only loss
/// mask.
fn seq2seq_batch(examples: &[&EncodedExample]) -> (TokenBatch, Vec<u32>, Vec<bool>) {
    let width = examples.iter().map(|e| e.ids.len()).max().unwrap();
    let mut rows = Vec::with_capacity(examples.len());
    for e in examples {
        let mut row = e.ids.clone();
        row.resize(width, PAD);
        rows.push(row);
    }
    let tokens = TokenBatch::new(&rows).expect("padded to equal length");
    let mut targets = vec![0u32; examples.len() * width];
    let mut mask = vec![false; examples.len() * width];
    for (r, e) in examples.iter().enumerate() {
        // Position t predicts t + 1; score exactly the target span.
        for t in e.sep_pos..e.ids.len() - 1 {
            targets[r * width + t] = e.ids[t + 1];
            mask[r * width + t] = true;
        }
    }
    (tokens, targets, mask)
}

/// Mean loss over an evaluation split, batched.
fn split_loss(
    model: &TransformerModel,
    examples: &[EncodedExample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for group in examples.chunks(batch_size) {
        let refs: Vec<&EncodedExample> = group.iter().collect();
        let (tokens, targets, mask) = seq2seq_batch(&refs);
        let (loss, _) = model.loss_on(&tokens, &targets, &mask, false)?;
        let scored = mask.iter().filter(|&&m| m).count();
        total += loss.to_scalar() * scored as f64;
        count += scored;
    }
    Ok(total / count.max(1) as f64)
}

/// Exact-match tallies, overall and per generalization tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactMatch {
    pub overall: f64,
    pub by_type: BTreeMap<GenType, (usize, usize)>, // (correct, total)
}

impl ExactMatch {
    pub fn rate(&self, t: GenType) -> Option<f64> {
        self.by_type
            .get(&t)
            .map(|(c, n)| *c as f64 / (*n).max(1) as f64)
    }
}

/// Decodes `examples` greedily and scores full-sequence exact match. The
/// decode length cap is twice the longest reference target.
pub fn exact_match(
    model: &TransformerModel,
    task: &TaskDataset,
    examples: &[Seq2SeqExample],
) -> Result<ExactMatch, TrainError> {
    let mut prompts = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    let longest_ref = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
    for ex in examples {
        let mut prompt = vec![BOS];
        prompt.extend(task.vocabulary.encode(&ex.source)?);
        prompt.push(SEP);
        prompts.push(prompt);
        references.push(task.vocabulary.encode(&ex.target)?);
    }
    let outputs = model.greedy_decode(&prompts, longest_ref * 2 + 1, EOS)?;
    let mut by_type: BTreeMap<GenType, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for ((out, reference), ex) in outputs.iter().zip(&references).zip(examples) {
        let hit = out == reference;
        let slot = by_type.entry(ex.gen_type).or_insert((0, 0));
        slot.1 += 1;
        if hit {
            slot.0 += 1;
            correct += 1;
        }
    }
    Ok(ExactMatch {
        overall: correct as f64 / examples.len().max(1) as f64,
        by_type,
    })
}

/// One point of the fine-tuning trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub id_loss: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_exact_match: ExactMatch,
    pub final_id_loss: f64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneOptions {
    /// Number of generalization examples decoded at trajectory
    /// evaluations (the final evaluation always decodes the full split).
    pub decode_subsample: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            decode_subsample: 64,
        }
    }
}

/// Fine-tunes a pretrained checkpoint on a task: loss on target tokens
/// only, greedy-decoded exact match on the generalization split, reported
/// overall and per generalization type.
pub fn finetune(
    cfg: &RunConfig,
    options: &FinetuneOptions,
    checkpoint_path: &Path,
    task: &TaskDataset,
    out_dir: &Path,
    meta: &RunMeta,
) -> Result<FinetuneRun, TrainError> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    if ckpt.header.shape != cfg.shape {
        return Err(TrainError::ShapeMismatch {
            ckpt: Box::new(ckpt.header.shape),
            cfg: Box::new(cfg.shape),
        });
    }
    let task_fp = task.vocabulary.fingerprint();
    if ckpt.header.vocab_fingerprint != task_fp {
        return Err(TrainError::VocabularyMismatch {
            ckpt: ckpt.header.vocab_fingerprint.clone(),
            task: task_fp,
        });
    }
    if task.train.is_empty() {
        return Err(TrainError::Config("task has no training examples".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut metrics = MetricsWriter::create(out_dir)?;

    let mut model =
        TransformerModel::from_params(cfg.shape, ckpt.params, ckpt.header.activation)?;
    model.activation = cfg.activation;
    let mut state = OptimizerState::new(cfg.schedule, cfg.adam);

    let train_enc: Vec<EncodedExample> = task
        .train
        .iter()
        .map(|e| encode_example(e, task, cfg.shape.n_ctx))
        .collect::<Result<_, _>>()?;
    let val_enc: Vec<EncodedExample> = task
        .id_validation
        .iter()
        .map(|e| encode_example(e, task, cfg.shape.n_ctx))
        .collect::<Result<_, _>>()?;

    // Fixed deterministic subsample order for trajectory decodes.
    let decode_order = shuffled_indices(
        task.generalization.len(),
        substream_seed(cfg.seed, &["decode-subsample"]),
    );

    let mut trajectory = Vec::new();
    let mut checkpoints = Vec::new();
    let mut prev_grad_norm = f64::NAN;
    let n = train_enc.len();
    let mut epoch = 0u64;
    let mut order = shuffled_indices(n, substream_seed(cfg.seed, &["ft-batches", "0"]));
    let mut cursor = 0usize;
    let mut last_id_loss = f64::NAN;

    for step in 1..=cfg.steps {
        let mut batch_refs: Vec<&EncodedExample> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= n {
                epoch += 1;
                order = shuffled_indices(
                    n,
                    substream_seed(cfg.seed, &["ft-batches", &epoch.to_string()]),
                );
                cursor = 0;
            }
            batch_refs.push(&train_enc[order[cursor]]);
            cursor += 1;
        }
        let (tokens, targets, mask) = seq2seq_batch(&batch_refs);

        let lr = state.next_lr();
        let (loss, pass) = model.loss_on(&tokens, &targets, &mask, true)?;
        let loss_value = loss.to_scalar();
        if !loss_value.is_finite() {
            return Err(TrainError::NanLoss {
                step,
                lr,
                grad_norm: prev_grad_norm,
            });
        }
        let mut grads = loss.backward()?;
        let named = pass.named_gradients(&mut grads)?;
        prev_grad_norm = grad_norm(&named);
        optimizer_step(&mut model.params, &mut state, &named, lr)?;

        let at_final = step == cfg.steps;
        if step % cfg.eval_every == 0 || at_final {
            let id_loss = split_loss(&model, &val_enc, cfg.batch_size.max(8))?;
            last_id_loss = id_loss;
            let decode_set: Vec<Seq2SeqExample> = if at_final {
                task.generalization.clone()
            } else {
                decode_order
                    .iter()
                    .take(options.decode_subsample)
                    .map(|&i| task.generalization[i].clone())
                    .collect()
            };
            let em = exact_match(&model, task, &decode_set)?;
            trajectory.push(TrajectoryPoint {
                step,
                id_loss,
                exact_match: em.overall,
            });

            let mut row = meta.row(&cfg.shape, step, "id_validation");
            row.loss = Some(id_loss);
            row.ppl = Some(id_loss.exp());
            metrics.write(&row)?;
            let mut row = meta.row(&cfg.shape, step, "generalization");
            row.exact_match = Some(em.overall);
            row.exact_match_lexical = em.rate(GenType::Lexical);
            row.exact_match_structural = em.rate(GenType::Structural);
            metrics.write(&row)?;

            if at_final {
                let run = FinetuneRun {
                    trajectory,
                    final_exact_match: em,
                    final_id_loss: id_loss,
                    checkpoints,
                    out_dir: out_dir.to_path_buf(),
                };
                let records_path = out_dir.join("records.json");
                std::fs::write(
                    &records_path,
                    serde_json::to_string_pretty(&serde_json::json!({
                        "trajectory": run.trajectory,
                        "final_exact_match": run.final_exact_match,
                        "final_id_loss": run.final_id_loss,
                        "checkpoints": run.checkpoints,
                    }))
                    .expect("records serialize"),
                )
                .map_err(|e| TrainError::Io {
                    path: records_path.display().to_string(),
                    source: e,
                })?;
                return Ok(run);
            }
        }

        if step % cfg.checkpoint_every == 0 && step != cfg.steps {
            let id_loss = if last_id_loss.is_finite() {
                last_id_loss
            } else {
                split_loss(&model, &val_enc, cfg.batch_size.max(8))?
            };
            let path = out_dir.join(format!("ckpt_{step:07}.ckpt"));
            save_checkpoint(
                &path,
                &cfg.shape,
                cfg.activation,
                &model.params,
                step,
                cfg.seed,
                id_loss.exp(),
                &task_fp,
            )?;
            checkpoints.push(CheckpointRecord {
                path,
                step,
                val_perplexity: id_loss.exp(),
                id_loss: Some(id_loss),
            });
        }
    }
    unreachable!("loop returns at the final step");
}

// ---- matching procedures -------------------------------------------------

/// Earliest checkpoint whose validation perplexity reaches
/// `reference_ppl`. Steps must be strictly increasing. When no checkpoint
/// qualifies the error reports the best perplexity achieved.
pub fn select_matched_checkpoint(
    records: &[CheckpointRecord],
    reference_ppl: f64,
) -> Result<&CheckpointRecord, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    let mut prev_step = None;
    for r in records {
        if let Some(p) = prev_step {
            if r.step <= p {
                return Err(TrainError::NonMonotoneSteps(r.step));
            }
        }
        prev_step = Some(r.step);
    }
    match records.iter().find(|r| r.val_perplexity <= reference_ppl) {
        Some(r) => Ok(r),
        None => Err(TrainError::NoneQualifies {
            reference: reference_ppl,
            best: records
                .iter()
                .map(|r| r.val_perplexity)
                .fold(f64::INFINITY, f64::min),
        }),
    }
}

/// Accuracy at the first recorded step where the in-distribution loss
/// drops to `loss_target`.
pub fn accuracy_at_id_loss(
    trajectory: &[TrajectoryPoint],
    loss_target: f64,
) -> Result<f64, TrainError> {
    if trajectory.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    match trajectory.iter().find(|p| p.id_loss <= loss_target) {
        Some(p) => Ok(p.exact_match),
        None => Err(TrainError::LossNotReached {
            target: loss_target,
            min_loss: trajectory
                .iter()
                .map(|p| p.id_loss)
                .fold(f64::INFINITY, f64::min),
        }),
    }
}
