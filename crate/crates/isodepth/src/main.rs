//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on configuration
//! errors (including bad flags). The `ISODEPTH_OUT` environment variable
//! re-roots relative output paths.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use isodepth::analysis::{
    bench_latency, rank_profile, report, BenchConfig, BenchReport, FfMatrix,
};
use isodepth::budget::{
    build_family, size_classes, FamilyPlan, FamilyPlanFile, ModelShape,
};
use isodepth::model::Activation;
use isodepth::numerics::{AdamConfig, LrSchedule};
use isodepth::seeding::substream_seed;
use isodepth::sweep::{load_family_plan, run_sweep, ExperimentManifest, SweepError};
use isodepth::tasks::{
    build_agreement_grammar, gen_mini_cogs, gen_passivization, gen_pretrain_corpus, load_corpus,
    load_tsv, save_corpus, AgreementGrammarConfig, CogsStyle, GenType, Lexicon, MiniCogsConfig,
    PassivizationConfig, TaskDataset, TsvFormat, TypeLabelMap,
};
use isodepth::training::{
    exact_match, finetune, load_checkpoint, pretrain, FinetuneOptions, RunConfig, RunMeta,
};

#[derive(Parser)]
#[command(
    name = "isodepth",
    version,
    about = "Depth-width trade-offs in transformers at fixed parameter count",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an equal-parameter family plan and write it as JSON.
    Plan(PlanArgs),
    /// Generate a pretraining corpus or a task dataset.
    GenData(GenDataArgs),
    /// Pretrain family members as causal language models.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint on a task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a task dataset without training.
    Eval(EvalArgs),
    /// Singular-value rank profile of a feed-forward matrix.
    AnalyzeRank(AnalyzeRankArgs),
    /// Step-latency benchmark across a family, with a linear fit.
    BenchLatency(BenchLatencyArgs),
    /// Aggregate metrics JSONL files into CSV tables.
    Report(ReportArgs),
    /// Run a full experiment: pretrain, fine-tune, report; resumable.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeClass {
    #[value(name = "41M")]
    C41m,
    #[value(name = "134M")]
    C134m,
    #[value(name = "374M")]
    C374m,
    Tiny,
    Custom,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_enum)]
    size_class: SizeClass,
    /// Comma-separated member depths; defaults to the class's depth set.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_attn: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_vocab: Option<usize>,
    #[arg(long)]
    n_ctx: Option<usize>,
    #[arg(long)]
    baseline_layers: Option<usize>,
    #[arg(long)]
    baseline_dff: Option<usize>,
    /// Output JSON file.
    #[arg(long, default_value = "plan.json")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Pretrain,
    Passivization,
    MiniCogs,
    /// Convert external TSV data (e.g. real COGS files) into the on-disk
    /// dataset layout.
    ImportTsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Variable,
    VariableFree,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: TaskKind,
    /// Target style for mini-cogs.
    #[arg(long, value_enum, default_value = "variable-free")]
    style: StyleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    train_size: usize,
    #[arg(long, default_value_t = 1000)]
    val_size: usize,
    #[arg(long, default_value_t = 2000)]
    gen_size: usize,
    /// Pretraining corpus: training stream size in tokens.
    #[arg(long, default_value_t = 2_000_000)]
    train_tokens: usize,
    /// Pretraining corpus: held-out stream size in tokens.
    #[arg(long, default_value_t = 100_000)]
    val_tokens: usize,
    /// Pretraining corpus: chunk length.
    #[arg(long, default_value_t = 96)]
    n_ctx: usize,
    /// TSV file or directory to import (import-tsv).
    #[arg(long)]
    tsv_path: Option<PathBuf>,
    /// TSV format: cogs or generic (import-tsv).
    #[arg(long, default_value = "cogs")]
    tsv_format: String,
    /// JSON file mapping type labels to generalization tags (import-tsv).
    #[arg(long)]
    type_map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    peak_lr: f64,
    #[arg(long, default_value_t = 1000)]
    warmup_steps: u64,
    /// Checkpoint cadence; defaults to every 5% of total steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long, default_value_t = 64)]
    val_batches: usize,
    /// Seed replicates to launch.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Root seed that the per-run substreams are drawn from.
    #[arg(long, default_value_t = 0)]
    root_seed: u64,
}

impl TrainFlags {
    fn run_config(&self, shape: ModelShape, seed: u64) -> RunConfig {
        let checkpoint_every = self
            .checkpoint_every
            .unwrap_or_else(|| (self.steps / 20).max(1));
        RunConfig {
            shape,
            steps: self.steps,
            batch_size: self.batch_size,
            schedule: LrSchedule::InverseSqrt {
                peak_lr: self.peak_lr,
                warmup_steps: self.warmup_steps,
            },
            adam: AdamConfig::default(),
            seed,
            checkpoint_every,
            eval_every: self.eval_every.unwrap_or(checkpoint_every),
            val_batches: self.val_batches,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Family plan JSON produced by `plan`.
    #[arg(long)]
    family: PathBuf,
    /// Member depth (n_layers); repeat runs per seed are created under
    /// the output directory.
    #[arg(long)]
    member: usize,
    /// Corpus directory produced by `gen-data --task pretrain`.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    family: PathBuf,
    #[arg(long)]
    member: usize,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 64)]
    decode_subsample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to decode.
    #[arg(long, default_value = "generalization")]
    split: String,
}

#[derive(Args)]
struct AnalyzeRankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    layer: usize,
    /// ff_input (wi_0), ff_input_activated (wi_1) or ff_output (wo).
    #[arg(long, default_value = "ff_input")]
    which: String,
    #[arg(long, default_value = "profile.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchLatencyArgs {
    #[arg(long)]
    family: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Sequence length; defaults to the family's context length.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "latency.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Parallel member x seed runs (overrides the manifest).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root (overrides the manifest).
    #[arg(long)]
    out_root: Option<PathBuf>,
    /// Seed list (overrides the manifest).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

enum AppError {
    /// Bad flags, bad files, invalid configuration: exit code 2.
    Config(String),
    /// A run started and failed: exit code 1.
    Run(String),
}

impl AppError {
    fn config(e: impl std::fmt::Display) -> AppError {
        AppError::Config(e.to_string())
    }

    fn run(e: impl std::fmt::Display) -> AppError {
        AppError::Run(e.to_string())
    }
}

/// Re-roots relative paths under `$ISODEPTH_OUT` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os("ISODEPTH_OUT") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AnalyzeRank(args) => cmd_analyze_rank(args),
        Command::BenchLatency(args) => cmd_bench_latency(args),
        Command::Report(args) => cmd_report(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_plan(args: PlanArgs) -> Result<(), AppError> {
    let (baseline, default_depths) = match args.size_class {
        SizeClass::C41m => (size_classes::baseline_41m(), size_classes::depths_41m()),
        SizeClass::C134m => (size_classes::baseline_134m(), size_classes::depths_134m()),
        SizeClass::C374m => (size_classes::baseline_374m(), size_classes::depths_374m()),
        SizeClass::Tiny => (size_classes::baseline_tiny(), size_classes::depths_tiny()),
        SizeClass::Custom => {
            let need = |name: &str, v: Option<usize>| {
                v.ok_or_else(|| {
                    AppError::Config(format!("--{name} is required with --size-class custom"))
                })
            };
            let d_model = need("d-model", args.d_model)?;
            let baseline = ModelShape {
                n_layers: need("baseline-layers", args.baseline_layers)?,
                d_model,
                d_attn: args.d_attn.unwrap_or(d_model),
                d_ff: need("baseline-dff", args.baseline_dff)?,
                n_heads: need("n-heads", args.n_heads)?,
                n_vocab: need("n-vocab", args.n_vocab)?,
                n_ctx: need("n-ctx", args.n_ctx)?,
            };
            if args.depths.is_empty() {
                return Err(AppError::Config(
                    "--depths is required with --size-class custom".into(),
                ));
            }
            (baseline, vec![])
        }
    };
    // Flags override the class defaults.
    let mut baseline = baseline;
    if let Some(v) = args.d_model {
        baseline.d_model = v;
    }
    if let Some(v) = args.d_attn {
        baseline.d_attn = v;
    }
    if let Some(v) = args.n_heads {
        baseline.n_heads = v;
    }
    if let Some(v) = args.n_vocab {
        baseline.n_vocab = v;
    }
    if let Some(v) = args.n_ctx {
        baseline.n_ctx = v;
    }
    if let Some(v) = args.baseline_layers {
        baseline.n_layers = v;
    }
    if let Some(v) = args.baseline_dff {
        baseline.d_ff = v;
    }
    let depths = if args.depths.is_empty() {
        default_depths
    } else {
        args.depths
    };

    let plan = build_family(&baseline, &depths).map_err(AppError::config)?;
    let file = FamilyPlanFile::from_plan(&plan);
    let out = resolve_out(&args.out);
    write_json(&out, &file)?;

    println!("target parameters: {}", file.target_params);
    println!("{:>8} {:>8} {:>14} {:>10}", "layers", "d_ff", "params", "ff_ratio");
    for m in &file.members {
        println!(
            "{:>8} {:>8} {:>14} {:>10.4}",
            m.n_layers, m.d_ff, m.params, m.ff_ratio
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let out = resolve_out(&args.out);
    match args.task {
        TaskKind::Pretrain => {
            let grammar = build_agreement_grammar(&AgreementGrammarConfig::default())
                .map_err(AppError::config)?;
            let vocab = Lexicon::vocabulary();
            let corpus = gen_pretrain_corpus(
                args.seed,
                args.train_tokens,
                args.val_tokens,
                &grammar,
                &vocab,
                args.n_ctx,
            )
            .map_err(AppError::config)?;
            save_corpus(&corpus, &vocab, &out).map_err(AppError::run)?;
            println!(
                "wrote corpus: {} train chunks, {} val chunks of {} tokens to {}",
                corpus.train_chunks.len(),
                corpus.val_chunks.len(),
                corpus.n_ctx,
                out.display()
            );
        }
        TaskKind::Passivization => {
            let ds = gen_passivization(
                args.seed,
                &PassivizationConfig {
                    train_size: args.train_size,
                    val_size: args.val_size,
                    gen_size: args.gen_size,
                    ..Default::default()
                },
            )
            .map_err(AppError::config)?;
            ds.save(&out).map_err(AppError::run)?;
            print_dataset_summary(&ds, &out);
        }
        TaskKind::ImportTsv => {
            let path = args.tsv_path.as_ref().ok_or_else(|| {
                AppError::Config("--tsv-path is required with --task import-tsv".into())
            })?;
            let format = match args.tsv_format.as_str() {
                "cogs" => TsvFormat::Cogs,
                "generic" => TsvFormat::Generic,
                other => {
                    return Err(AppError::Config(format!(
                        "unknown tsv format {other}; use cogs or generic"
                    )))
                }
            };
            let user_map = args
                .type_map
                .as_deref()
                .map(TypeLabelMap::from_json_file)
                .transpose()
                .map_err(AppError::config)?;
            let (ds, warnings) =
                load_tsv(path, format, user_map.as_ref()).map_err(AppError::config)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            ds.save(&out).map_err(AppError::run)?;
            print_dataset_summary(&ds, &out);
        }
        TaskKind::MiniCogs => {
            let style = match args.style {
                StyleArg::Variable => CogsStyle::Variable,
                StyleArg::VariableFree => CogsStyle::VariableFree,
            };
            let ds = gen_mini_cogs(
                args.seed,
                &MiniCogsConfig {
                    train_size: args.train_size,
                    val_size: args.val_size,
                    gen_size: args.gen_size,
                    style,
                    ..Default::default()
                },
            )
            .map_err(AppError::config)?;
            ds.save(&out).map_err(AppError::run)?;
            print_dataset_summary(&ds, &out);
        }
    }
    Ok(())
}

fn print_dataset_summary(ds: &TaskDataset, out: &Path) {
    let counts = ds.gen_counts();
    println!(
        "wrote {}: train {}, val {}, generalization {} ({:?}) to {}",
        ds.manifest.generator,
        ds.train.len(),
        ds.id_validation.len(),
        ds.generalization.len(),
        counts,
        out.display()
    );
}

fn member_shape(plan: &FamilyPlan, depth: usize) -> Result<ModelShape, AppError> {
    plan.member_at_depth(depth)
        .map(|m| m.shape)
        .ok_or_else(|| {
            AppError::Config(format!(
                "no member with {depth} layers in the plan; members: {:?}",
                plan.members
                    .iter()
                    .map(|m| m.shape.n_layers)
                    .collect::<Vec<_>>()
            ))
        })
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), AppError> {
    let plan = load_family_plan(&args.family).map_err(AppError::config)?;
    let shape = member_shape(&plan, args.member)?;
    let (corpus, _) = load_corpus(&args.corpus).map_err(AppError::config)?;
    let out = resolve_out(&args.out);

    for &seed_label in &args.train.seeds {
        let run_id = format!("L{}_s{seed_label}", args.member);
        let seed = substream_seed(args.train.root_seed, &["run", &run_id, "pretrain"]);
        let cfg = args.train.run_config(shape, seed);
        println!(
            "pretrain {run_id}: {}",
            serde_json::to_string(&cfg).expect("config serializes")
        );
        let meta = RunMeta {
            run_id: run_id.clone(),
            class: None,
            task: None,
            seed_label: Some(seed_label),
        };
        let run = pretrain(&cfg, &corpus, &out.join(&run_id), &meta).map_err(AppError::run)?;
        println!(
            "{run_id}: final val ppl {:.4}, {} checkpoints in {}",
            run.final_val_perplexity,
            run.checkpoints.len(),
            run.out_dir.display()
        );
    }
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<(), AppError> {
    let plan = load_family_plan(&args.family).map_err(AppError::config)?;
    let shape = member_shape(&plan, args.member)?;
    let task = TaskDataset::load(&args.data).map_err(AppError::config)?;
    let out = resolve_out(&args.out);

    for &seed_label in &args.train.seeds {
        let run_id = format!("L{}_s{seed_label}", args.member);
        let seed = substream_seed(args.train.root_seed, &["run", &run_id, "finetune"]);
        let cfg = args.train.run_config(shape, seed);
        println!(
            "finetune {run_id}: {}",
            serde_json::to_string(&cfg).expect("config serializes")
        );
        let meta = RunMeta {
            run_id: run_id.clone(),
            class: None,
            task: Some(
                args.data
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| "task".into()),
            ),
            seed_label: Some(seed_label),
        };
        let run = finetune(
            &cfg,
            &FinetuneOptions {
                decode_subsample: args.decode_subsample,
            },
            &args.checkpoint,
            &task,
            &out.join(&run_id),
            &meta,
        )
        .map_err(AppError::run)?;
        println!(
            "{run_id}: id_loss {:.6}, exact match {:.2}% (lexical {:?}, structural {:?})",
            run.final_id_loss,
            run.final_exact_match.overall * 100.0,
            run.final_exact_match.rate(GenType::Lexical).map(|v| v * 100.0),
            run.final_exact_match
                .rate(GenType::Structural)
                .map(|v| v * 100.0),
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    use isodepth::model::TransformerModel;
    let ckpt = load_checkpoint(&args.checkpoint).map_err(AppError::config)?;
    let task = TaskDataset::load(&args.data).map_err(AppError::config)?;
    if ckpt.header.vocab_fingerprint != task.vocabulary.fingerprint() {
        return Err(AppError::Config(
            "checkpoint and task vocabulary fingerprints differ".into(),
        ));
    }
    let model = TransformerModel::from_params(
        ckpt.header.shape,
        ckpt.params,
        ckpt.header.activation,
    )
    .map_err(AppError::config)?;
    let examples = match args.split.as_str() {
        "generalization" => &task.generalization,
        "id_validation" => &task.id_validation,
        "train" => &task.train,
        other => {
            return Err(AppError::Config(format!(
                "unknown split {other}; use train, id_validation or generalization"
            )))
        }
    };
    let em = exact_match(&model, &task, examples).map_err(AppError::run)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&em).expect("serializable")
    );
    Ok(())
}

fn cmd_analyze_rank(args: AnalyzeRankArgs) -> Result<(), AppError> {
    let which = FfMatrix::parse(&args.which).ok_or_else(|| {
        AppError::Config(format!(
            "unknown matrix {}; use ff_input, ff_input_activated or ff_output",
            args.which
        ))
    })?;
    let ckpt = load_checkpoint(&args.checkpoint).map_err(AppError::config)?;
    let profile = rank_profile(&ckpt, which, args.layer).map_err(AppError::run)?;
    profile.validate().map_err(AppError::run)?;

    let out = resolve_out(&args.out);
    let mut lines = vec!["index,singular_value,cumulative".to_string()];
    for (i, (s, c)) in profile
        .singular_values
        .iter()
        .zip(&profile.cumulative)
        .enumerate()
    {
        lines.push(format!("{},{s},{c}", i + 1));
    }
    std::fs::write(&out, lines.join("\n") + "\n")
        .map_err(|e| AppError::Run(format!("{}: {e}", out.display())))?;
    println!(
        "{}: {} singular values, numeric rank {}, wrote {}",
        profile.matrix_path,
        profile.singular_values.len(),
        profile.numeric_rank(),
        out.display()
    );
    Ok(())
}

fn cmd_bench_latency(args: BenchLatencyArgs) -> Result<(), AppError> {
    let plan = load_family_plan(&args.family).map_err(AppError::config)?;
    let cfg = BenchConfig {
        steps: args.steps,
        warmup_steps: args.warmup,
        batch_size: args.batch_size,
        seq_len: args.seq_len,
        seed: args.seed,
        ..Default::default()
    };
    let report = bench_latency(&plan, &cfg).map_err(AppError::run)?;
    let out = resolve_out(&args.out);

    let mut lines =
        vec!["n_layers,d_ff,mean_secs,std_secs,cv,fit_slope,fit_intercept,fit_r_squared".to_string()];
    match &report {
        BenchReport::Fitted(fit) => {
            for t in &fit.timings {
                lines.push(format!(
                    "{},{},{},{},{},{},{},{}",
                    t.n_layers, t.d_ff, t.mean_secs, t.std_secs, t.cv, fit.slope, fit.intercept,
                    fit.r_squared
                ));
            }
            println!(
                "fit: slope {:.6} s/layer, intercept {:.6} s, R^2 {:.4}",
                fit.slope, fit.intercept, fit.r_squared
            );
        }
        BenchReport::RawOnly(timings) => {
            for t in timings {
                lines.push(format!(
                    "{},{},{},{},{},,,",
                    t.n_layers, t.d_ff, t.mean_secs, t.std_secs, t.cv
                ));
            }
            println!("fewer than 3 depths: raw times only, no fit");
        }
    }
    std::fs::write(&out, lines.join("\n") + "\n")
        .map_err(|e| AppError::Run(format!("{}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), AppError> {
    let out = resolve_out(&args.out);
    let summary = report(&args.metrics, &out).map_err(AppError::run)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "read {} rows ({} skipped); best perplexity per class: {:?}",
        summary.rows_read, summary.rows_skipped, summary.best_ppl_by_class
    );
    println!("wrote tables to {}", out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), AppError> {
    let mut manifest = ExperimentManifest::load(&args.manifest).map_err(AppError::config)?;
    // Precedence: flags > manifest > defaults.
    if let Some(jobs) = args.jobs {
        manifest.jobs = jobs;
    }
    if let Some(out_root) = args.out_root {
        manifest.out_root = out_root;
    }
    if !args.seeds.is_empty() {
        manifest.seeds = args.seeds;
    }
    manifest.out_root = resolve_out(&manifest.out_root);
    println!(
        "effective sweep config: {}",
        serde_json::to_string(&manifest).expect("manifest serializes")
    );
    match run_sweep(&manifest) {
        Ok(outcome) => {
            println!(
                "sweep complete: {} runs ({} stages skipped)",
                outcome.completed.len(),
                outcome.skipped_stages.len()
            );
            if let Some(r) = &outcome.report {
                println!("best perplexity per class: {:?}", r.best_ppl_by_class);
            }
            Ok(())
        }
        Err(e @ SweepError::RunsFailed { .. }) => Err(AppError::run(e)),
        Err(e @ (SweepError::Io { .. } | SweepError::Analysis(_))) => Err(AppError::run(e)),
        Err(e) => Err(AppError::config(e)),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| AppError::Run(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializable"),
    )
    .map_err(|e| AppError::Run(format!("{}: {e}", path.display())))
}
