//! Calibration pilot for the trend experiments; run manually with
//! `cargo test -p isodepth --test pilot -- --ignored --nocapture`.

use isodepth::budget::{build_family, size_classes};
use isodepth::model::Activation;
use isodepth::numerics::{AdamConfig, LrSchedule};
use isodepth::seeding::substream_seed;
use isodepth::tasks::{
    build_agreement_grammar, gen_mini_cogs, gen_pretrain_corpus, AgreementGrammarConfig,
    CogsStyle, GenType, Lexicon, MiniCogsConfig,
};
use isodepth::training::{finetune, pretrain, FinetuneOptions, RunConfig, RunMeta};

#[test]
#[ignore]
fn pilot_depth_trends() {
    let t0 = std::time::Instant::now();
    let plan = build_family(
        &size_classes::baseline_tiny(),
        &size_classes::depths_tiny(),
    )
    .unwrap();
    let vocab = Lexicon::vocabulary();
    let grammar = build_agreement_grammar(&AgreementGrammarConfig::default()).unwrap();

    let steps: u64 = std::env::var("PILOT_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(300);
    let batch = 8usize;
    let n_ctx = 96usize;
    let peak_lr: f64 = std::env::var("PILOT_LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(3e-3);
    let corpus = gen_pretrain_corpus(
        7,
        steps as usize * batch * n_ctx,
        16 * batch * n_ctx,
        &grammar,
        &vocab,
        n_ctx,
    )
    .unwrap();
    println!(
        "[{:6.1}s] corpus ready: {} train chunks",
        t0.elapsed().as_secs_f64(),
        corpus.train_chunks.len()
    );

    let task = gen_mini_cogs(
        11,
        &MiniCogsConfig {
            train_size: 2500,
            val_size: 250,
            gen_size: 300,
            style: CogsStyle::VariableFree,
            ..Default::default()
        },
    )
    .unwrap();

    let tmp = tempfile::tempdir().unwrap();
    for member in &plan.members {
        let run_id = format!("L{}", member.shape.n_layers);
        let cfg = RunConfig {
            shape: member.shape,
            steps,
            batch_size: batch,
            schedule: LrSchedule::InverseSqrt {
                peak_lr,
                warmup_steps: 60,
            },
            adam: AdamConfig::default(),
            seed: substream_seed(0, &["pilot", &run_id]),
            checkpoint_every: (steps / 20).max(1),
            eval_every: (steps / 10).max(1),
            val_batches: 8,
            activation: Activation::Gelu,
        };
        let meta = RunMeta {
            run_id: run_id.clone(),
            ..Default::default()
        };
        let dir = tmp.path().join(&run_id);
        let run = pretrain(&cfg, &corpus, &dir, &meta).unwrap();
        println!(
            "[{:6.1}s] {} (d_ff {:4}): final ppl {:.3}",
            t0.elapsed().as_secs_f64(),
            run_id,
            member.shape.d_ff,
            run.final_val_perplexity
        );

        let ft_cfg = RunConfig {
            steps: 500,
            batch_size: 8,
            schedule: LrSchedule::InverseSqrt {
                peak_lr: 2e-3,
                warmup_steps: 50,
            },
            checkpoint_every: 250,
            eval_every: 125,
            ..cfg
        };
        let last = run.checkpoints.last().unwrap();
        let ft = finetune(
            &ft_cfg,
            &FinetuneOptions {
                decode_subsample: 48,
            },
            &last.path,
            &task,
            &dir.join("ft"),
            &meta,
        )
        .unwrap();
        println!(
            "[{:6.1}s] {} finetune: id_loss {:.4}, overall {:.1}%, lexical {:.1}%, structural {:.1}%",
            t0.elapsed().as_secs_f64(),
            run_id,
            ft.final_id_loss,
            ft.final_exact_match.overall * 100.0,
            ft.final_exact_match.rate(GenType::Lexical).unwrap_or(0.0) * 100.0,
            ft.final_exact_match.rate(GenType::Structural).unwrap_or(0.0) * 100.0,
        );
    }
}
