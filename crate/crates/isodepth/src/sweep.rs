//! Experiment orchestration: plan -> pretrain all members x seeds ->
//! fine-tune on every task -> report. Sweeps are resumable; a completed
//! stage leaves a DONE sentinel and is skipped on rerun.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{report, ReportSummary};
use crate::budget::{FamilyPlan, FamilyPlanFile};
use crate::model::Activation;
use crate::numerics::{AdamConfig, LrSchedule};
use crate::seeding::substream_seed;
use crate::tasks::{
    build_agreement_grammar, gen_pretrain_corpus, AgreementGrammarConfig, Lexicon,
    PretrainCorpus, TaskDataset,
};
use crate::training::{
    finetune, pretrain, FinetuneOptions, RunConfig, RunMeta, TrainError,
};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("missing path referenced by manifest: {0}")]
    MissingPath(PathBuf),
    #[error("output root not writable: {0}")]
    OutputRoot(String),
    #[error("task error: {0}")]
    Task(#[from] crate::tasks::TaskError),
    #[error("analysis error: {0}")]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{failed} of {total} runs failed")]
    RunsFailed { failed: usize, total: usize },
}

fn default_class() -> String {
    "family".to_string()
}

fn default_jobs() -> usize {
    1
}

/// One training stage's knobs inside the manifest.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    #[serde(default = "StageConfig::default_val_batches")]
    pub val_batches: usize,
    #[serde(default = "StageConfig::default_decode_subsample")]
    pub decode_subsample: usize,
}

impl StageConfig {
    fn default_val_batches() -> usize {
        64
    }

    fn default_decode_subsample() -> usize {
        64
    }

    fn run_config(
        &self,
        shape: crate::budget::ModelShape,
        seed: u64,
    ) -> RunConfig {
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
            checkpoint_every: self.checkpoint_every,
            eval_every: self.eval_every,
            val_batches: self.val_batches,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub seed: u64,
    #[serde(default = "CorpusConfig::default_embed_prob")]
    pub embed_prob: f64,
    #[serde(default = "CorpusConfig::default_pp_prob")]
    pub pp_prob: f64,
    #[serde(default = "CorpusConfig::default_max_depth")]
    pub max_embed_depth: usize,
}

impl CorpusConfig {
    fn default_embed_prob() -> f64 {
        0.35
    }

    fn default_pp_prob() -> f64 {
        0.2
    }

    fn default_max_depth() -> usize {
        2
    }
}

/// Serialized sweep description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub family_plan: PathBuf,
    pub tasks: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub out_root: PathBuf,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_class")]
    pub class_name: String,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<ExperimentManifest, SweepError> {
        let raw = std::fs::read_to_string(path).map_err(|e| SweepError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| SweepError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if !self.family_plan.exists() {
            return Err(SweepError::MissingPath(self.family_plan.clone()));
        }
        for t in &self.tasks {
            if !t.exists() {
                return Err(SweepError::MissingPath(t.clone()));
            }
        }
        if self.seeds.is_empty() {
            return Err(SweepError::Manifest("seeds must be nonempty".into()));
        }
        std::fs::create_dir_all(&self.out_root).map_err(|e| {
            SweepError::OutputRoot(format!("{}: {e}", self.out_root.display()))
        })?;
        let probe = self.out_root.join(".write-probe");
        std::fs::write(&probe, b"ok")
            .map_err(|e| SweepError::OutputRoot(format!("{}: {e}", self.out_root.display())))?;
        let _ = std::fs::remove_file(&probe);
        Ok(())
    }
}

#[derive(Debug, Default, Serialize)]
pub struct SweepOutcome {
    pub completed: Vec<String>,
    pub skipped_stages: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub report: Option<ReportSummary>,
}

const DONE_SENTINEL: &str = "DONE";

fn stage_done(dir: &Path) -> bool {
    dir.join(DONE_SENTINEL).exists()
}

fn mark_done(dir: &Path) -> Result<(), TrainError> {
    std::fs::write(dir.join(DONE_SENTINEL), b"done\n").map_err(|e| TrainError::Io {
        path: dir.join(DONE_SENTINEL).display().to_string(),
        source: e,
    })
}

struct RunUnit {
    member_layers: usize,
    shape: crate::budget::ModelShape,
    seed_label: u64,
}

struct SweepContext {
    manifest: ExperimentManifest,
    corpus: PretrainCorpus,
    tasks: Vec<(String, TaskDataset)>,
}

fn task_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "task".to_string())
}

/// Executes one member x seed unit: pretrain, then fine-tune on every
/// task. Completed stages (DONE sentinel present) are skipped.
fn run_unit(ctx: &SweepContext, unit: &RunUnit, log: &Mutex<SweepOutcome>) -> Result<(), TrainError> {
    let run_id = format!("L{}_s{}", unit.member_layers, unit.seed_label);
    let unit_dir = ctx.manifest.out_root.join("runs").join(&run_id);
    let pretrain_dir = unit_dir.join("pretrain");

    let pretrain_seed = substream_seed(
        ctx.manifest.root_seed,
        &["run", &run_id, "pretrain"],
    );
    let meta = RunMeta {
        run_id: run_id.clone(),
        class: Some(ctx.manifest.class_name.clone()),
        task: None,
        seed_label: Some(unit.seed_label),
    };

    if stage_done(&pretrain_dir) {
        log.lock()
            .unwrap()
            .skipped_stages
            .push(format!("{run_id}/pretrain"));
    } else {
        let cfg = ctx.manifest.pretrain.run_config(unit.shape, pretrain_seed);
        pretrain(&cfg, &ctx.corpus, &pretrain_dir, &meta)?;
        mark_done(&pretrain_dir)?;
    }

    let final_ckpt = pretrain_dir.join(format!(
        "ckpt_{:07}.ckpt",
        ctx.manifest.pretrain.steps
    ));

    for (name, task) in &ctx.tasks {
        let ft_dir = unit_dir.join(format!("ft_{name}"));
        if stage_done(&ft_dir) {
            log.lock()
                .unwrap()
                .skipped_stages
                .push(format!("{run_id}/ft_{name}"));
            continue;
        }
        let ft_seed = substream_seed(
            ctx.manifest.root_seed,
            &["run", &run_id, "finetune", name],
        );
        let cfg = ctx.manifest.finetune.run_config(unit.shape, ft_seed);
        let mut ft_meta = meta.clone();
        ft_meta.task = Some(name.clone());
        finetune(
            &cfg,
            &FinetuneOptions {
                decode_subsample: ctx.manifest.finetune.decode_subsample,
            },
            &final_ckpt,
            task,
            &ft_dir,
            &ft_meta,
        )?;
        mark_done(&ft_dir)?;
    }
    Ok(())
}

/// Runs the full sweep described by the manifest. Individual run failures
/// are recorded and do not stop other runs; the outcome lists them and
/// [`SweepError::RunsFailed`] is returned when any unit failed.
pub fn run_sweep(manifest: &ExperimentManifest) -> Result<SweepOutcome, SweepError> {
    manifest.validate()?;
    let plan = load_family_plan(&manifest.family_plan)?;

    let tasks: Vec<(String, TaskDataset)> = manifest
        .tasks
        .iter()
        .map(|p| TaskDataset::load(p).map(|d| (task_name(p), d)))
        .collect::<Result<_, _>>()?;
    // A shared vocabulary is what keeps checkpoints compatible across the
    // corpus and every task; refuse fingerprint mismatches early.
    for (name, task) in &tasks {
        if task.vocabulary.fingerprint() != tasks[0].1.vocabulary.fingerprint() {
            return Err(SweepError::Manifest(format!(
                "task {name} uses a different vocabulary than {}",
                tasks[0].0
            )));
        }
    }

    let grammar = build_agreement_grammar(&AgreementGrammarConfig {
        embed_prob: manifest.corpus.embed_prob,
        pp_prob: manifest.corpus.pp_prob,
        max_embed_depth: manifest.corpus.max_embed_depth,
        ..Default::default()
    })?;
    let vocab = Lexicon::vocabulary();
    if let Some((name, task)) = tasks.first() {
        if task.vocabulary.fingerprint() != vocab.fingerprint() {
            return Err(SweepError::Manifest(format!(
                "task {name} does not use the shared lexicon vocabulary; \
                 regenerate it with gen-data"
            )));
        }
    }
    let corpus = gen_pretrain_corpus(
        manifest.corpus.seed,
        manifest.corpus.train_tokens,
        manifest.corpus.val_tokens,
        &grammar,
        &vocab,
        plan.baseline.n_ctx,
    )?;

    let mut units = VecDeque::new();
    for member in &plan.members {
        for &seed in &manifest.seeds {
            units.push_back(RunUnit {
                member_layers: member.shape.n_layers,
                shape: member.shape,
                seed_label: seed,
            });
        }
    }
    let total = units.len();

    let ctx = Arc::new(SweepContext {
        manifest: manifest.clone(),
        corpus,
        tasks,
    });
    let queue = Arc::new(Mutex::new(units));
    let outcome = Arc::new(Mutex::new(SweepOutcome::default()));

    let jobs = manifest.jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            let ctx = Arc::clone(&ctx);
            let queue = Arc::clone(&queue);
            let outcome = Arc::clone(&outcome);
            scope.spawn(move || loop {
                let unit = {
                    let mut q = queue.lock().unwrap();
                    q.pop_front()
                };
                let Some(unit) = unit else { break };
                let run_id = format!("L{}_s{}", unit.member_layers, unit.seed_label);
                match run_unit(&ctx, &unit, &outcome) {
                    Ok(()) => outcome.lock().unwrap().completed.push(run_id),
                    Err(e) => outcome
                        .lock()
                        .unwrap()
                        .failed
                        .push((run_id, e.to_string())),
                }
            });
        }
    });

    let mut outcome = Arc::into_inner(outcome)
        .expect("threads joined")
        .into_inner()
        .unwrap();
    outcome.completed.sort();
    outcome.skipped_stages.sort();
    outcome.failed.sort();

    let report_summary = report(
        &manifest.out_root.join("runs"),
        &manifest.out_root.join("report"),
    )?;
    outcome.report = Some(report_summary);

    if !outcome.failed.is_empty() {
        // The caller still gets the partial outcome through the error path
        // log; exit status handling lives in the CLI.
        let failed = outcome.failed.len();
        eprintln!("sweep: {failed} of {total} runs failed:");
        for (run, err) in &outcome.failed {
            eprintln!("  {run}: {err}");
        }
        return Err(SweepError::RunsFailed { failed, total });
    }
    Ok(outcome)
}

pub fn load_family_plan(path: &Path) -> Result<FamilyPlan, SweepError> {
    let raw = std::fs::read_to_string(path).map_err(|e| SweepError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: FamilyPlanFile = serde_json::from_str(&raw)
        .map_err(|e| SweepError::Manifest(format!("{}: {e}", path.display())))?;
    Ok(file.to_plan())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{build_family, ModelShape};
    use crate::tasks::{gen_mini_cogs, CogsStyle, MiniCogsConfig};

    fn micro_manifest(dir: &Path) -> ExperimentManifest {
        let baseline = ModelShape {
            n_layers: 2,
            d_model: 16,
            d_attn: 16,
            d_ff: 66,
            n_heads: 2,
            n_vocab: 512,
            n_ctx: 48,
        };
        let plan = build_family(&baseline, &[1, 2]).unwrap();
        let plan_path = dir.join("plan.json");
        std::fs::write(
            &plan_path,
            serde_json::to_string_pretty(&FamilyPlanFile::from_plan(&plan)).unwrap(),
        )
        .unwrap();

        let task = gen_mini_cogs(
            1,
            &MiniCogsConfig {
                train_size: 60,
                val_size: 12,
                gen_size: 16,
                style: CogsStyle::VariableFree,
                ..Default::default()
            },
        )
        .unwrap();
        let task_dir = dir.join("task");
        task.save(&task_dir).unwrap();

        ExperimentManifest {
            family_plan: plan_path,
            tasks: vec![task_dir],
            seeds: vec![1],
            out_root: dir.join("out"),
            pretrain: StageConfig {
                steps: 8,
                batch_size: 2,
                peak_lr: 1e-3,
                warmup_steps: 4,
                checkpoint_every: 4,
                eval_every: 4,
                val_batches: 2,
                decode_subsample: 4,
            },
            finetune: StageConfig {
                steps: 6,
                batch_size: 2,
                peak_lr: 1e-3,
                warmup_steps: 3,
                checkpoint_every: 3,
                eval_every: 3,
                val_batches: 2,
                decode_subsample: 4,
            },
            corpus: CorpusConfig {
                train_tokens: 2000,
                val_tokens: 500,
                seed: 3,
                embed_prob: 0.3,
                pp_prob: 0.2,
                max_embed_depth: 1,
            },
            root_seed: 11,
            class_name: "micro".into(),
            jobs: 1,
        }
    }

    #[test]
    fn sweep_bookkeeping_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_manifest(dir.path());

        let out = run_sweep(&manifest).unwrap();
        assert_eq!(out.completed, vec!["L1_s1", "L2_s1"]);
        assert!(out.failed.is_empty());

        // Two pretrain dirs, two finetune dirs, one report.
        for run in ["L1_s1", "L2_s1"] {
            assert!(manifest
                .out_root
                .join("runs")
                .join(run)
                .join("pretrain/DONE")
                .exists());
            assert!(manifest
                .out_root
                .join("runs")
                .join(run)
                .join("ft_task/DONE")
                .exists());
        }
        assert!(manifest.out_root.join("report/class_table.csv").exists());

        // Rerun: every stage is skipped, nothing retrained.
        let ckpt = manifest
            .out_root
            .join("runs/L1_s1/pretrain/ckpt_0000008.ckpt");
        let mtime = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
        let out2 = run_sweep(&manifest).unwrap();
        assert_eq!(out2.skipped_stages.len(), 4);
        assert_eq!(
            std::fs::metadata(&ckpt).unwrap().modified().unwrap(),
            mtime,
            "checkpoint was rewritten on resume"
        );
    }

    #[test]
    fn sweep_resumes_after_partial_completion() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_manifest(dir.path());

        // Simulate an interrupted sweep: run everything, then delete one
        // fine-tune stage's sentinel and outputs.
        run_sweep(&manifest).unwrap();
        let ft_dir = manifest.out_root.join("runs/L2_s1/ft_task");
        std::fs::remove_dir_all(&ft_dir).unwrap();
        let pretrain_ckpt = manifest
            .out_root
            .join("runs/L2_s1/pretrain/ckpt_0000008.ckpt");
        let mtime = std::fs::metadata(&pretrain_ckpt).unwrap().modified().unwrap();

        let out = run_sweep(&manifest).unwrap();
        assert!(ft_dir.join("DONE").exists(), "missing stage not redone");
        // The completed pretrain stage was not retrained.
        assert_eq!(
            std::fs::metadata(&pretrain_ckpt)
                .unwrap()
                .modified()
                .unwrap(),
            mtime
        );
        assert!(out
            .skipped_stages
            .iter()
            .any(|s| s == "L2_s1/pretrain"));
    }

    #[test]
    fn manifest_validation_catches_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = micro_manifest(dir.path());
        manifest.family_plan = dir.path().join("nope.json");
        assert!(matches!(
            manifest.validate(),
            Err(SweepError::MissingPath(_))
        ));
    }
}
