//! English passivization: active-voice sources paired with passive-voice
//! targets. Training only ever modifies the object with a prepositional
//! phrase; the generalization split modifies the subject instead, so a
//! move-the-first-noun-phrase heuristic produces the wrong passive.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lexicon::{
    ANIMATE_NOUNS, DETERMINERS_BOTH, INANIMATE_NOUNS, LEXICON_VERSION, PREPOSITIONS,
    TRANSITIVE_VERBS,
};
use super::{
    DatasetManifest, GenType, Lexicon, Seq2SeqExample, TaskDataset, TaskError,
};
use crate::seeding::substream_seed;

/// A prepositional modifier `prep det noun`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PpSpec {
    pub prep: usize,
    pub det: usize,
    pub noun: usize,
    pub plural: bool,
    pub animate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NpSpec {
    pub det: usize,
    pub noun: usize,
    pub plural: bool,
    pub animate: bool,
    pub pp: Option<PpSpec>,
}

/// Template of one active-voice transitive sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveSentence {
    pub subject: NpSpec,
    pub verb: usize,
    pub object: NpSpec,
}

fn noun_form(idx: usize, animate: bool, plural: bool) -> &'static str {
    if animate {
        Lexicon::animate_noun(idx, plural)
    } else {
        Lexicon::inanimate_noun(idx, plural)
    }
}

fn np_tokens(np: &NpSpec) -> Vec<String> {
    let mut toks = vec![
        DETERMINERS_BOTH[np.det % DETERMINERS_BOTH.len()].to_string(),
        noun_form(np.noun, np.animate, np.plural).to_string(),
    ];
    if let Some(pp) = np.pp {
        toks.push(PREPOSITIONS[pp.prep % PREPOSITIONS.len()].to_string());
        toks.push(DETERMINERS_BOTH[pp.det % DETERMINERS_BOTH.len()].to_string());
        toks.push(noun_form(pp.noun, pp.animate, pp.plural).to_string());
    }
    toks
}

/// `subject verb[past] object .`
pub fn render_active(s: &ActiveSentence) -> Vec<String> {
    let mut toks = np_tokens(&s.subject);
    toks.push(TRANSITIVE_VERBS[s.verb].2.to_string());
    toks.extend(np_tokens(&s.object));
    toks.push(".".to_string());
    toks
}

/// `object was/were participle by subject .` — the copula agrees with the
/// promoted object's number.
pub fn render_passive(s: &ActiveSentence) -> Vec<String> {
    let mut toks = np_tokens(&s.object);
    toks.push(if s.object.plural { "were" } else { "was" }.to_string());
    toks.push(TRANSITIVE_VERBS[s.verb].3.to_string());
    toks.push("by".to_string());
    toks.extend(np_tokens(&s.subject));
    toks.push(".".to_string());
    toks
}

/// Inverse of [`render_passive`] on the template level: reconstructs the
/// active argument structure from passive tokens.
pub fn parse_passive(tokens: &[String]) -> Result<ActiveSentence, TaskError> {
    let mut pos = 0;
    let next = |pos: &mut usize| -> Result<&str, TaskError> {
        let t = tokens
            .get(*pos)
            .ok_or_else(|| TaskError::Invariant("passive sentence truncated".into()))?;
        *pos += 1;
        Ok(t)
    };

    let parse_np = |pos: &mut usize| -> Result<NpSpec, TaskError> {
        let det_tok = next(pos)?.to_string();
        let det = DETERMINERS_BOTH
            .iter()
            .position(|d| *d == det_tok)
            .ok_or_else(|| TaskError::Invariant(format!("unknown determiner {det_tok}")))?;
        let noun_tok = next(pos)?.to_string();
        let (noun, animate, plural) = lookup_noun(&noun_tok)?;
        let mut np = NpSpec {
            det,
            noun,
            plural,
            animate,
            pp: None,
        };
        if let Some(tok) = tokens.get(*pos) {
            if let Some(prep) = PREPOSITIONS.iter().position(|p| p == tok) {
                *pos += 1;
                let det_tok = next(pos)?.to_string();
                let det = DETERMINERS_BOTH
                    .iter()
                    .position(|d| *d == det_tok)
                    .ok_or_else(|| TaskError::Invariant(format!("unknown determiner {det_tok}")))?;
                let noun_tok = next(pos)?.to_string();
                let (noun, animate, plural) = lookup_noun(&noun_tok)?;
                np.pp = Some(PpSpec {
                    prep,
                    det,
                    noun,
                    plural,
                    animate,
                });
            }
        }
        Ok(np)
    };

    let object = parse_np(&mut pos)?;
    let copula = next(&mut pos)?;
    if copula != "was" && copula != "were" {
        return Err(TaskError::Invariant(format!("expected copula, got {copula}")));
    }
    let part = next(&mut pos)?.to_string();
    let verb = TRANSITIVE_VERBS
        .iter()
        .position(|(_, _, _, p)| *p == part)
        .ok_or_else(|| TaskError::Invariant(format!("unknown participle {part}")))?;
    let by = next(&mut pos)?;
    if by != "by" {
        return Err(TaskError::Invariant(format!("expected 'by', got {by}")));
    }
    let subject = parse_np(&mut pos)?;
    Ok(ActiveSentence {
        subject,
        verb,
        object,
    })
}

fn lookup_noun(tok: &str) -> Result<(usize, bool, bool), TaskError> {
    for (i, (sg, pl)) in ANIMATE_NOUNS.iter().enumerate() {
        if *sg == tok {
            return Ok((i, true, false));
        }
        if *pl == tok {
            return Ok((i, true, true));
        }
    }
    for (i, (sg, pl)) in INANIMATE_NOUNS.iter().enumerate() {
        if *sg == tok {
            return Ok((i, false, false));
        }
        if *pl == tok {
            return Ok((i, false, true));
        }
    }
    Err(TaskError::Invariant(format!("unknown noun {tok}")))
}

#[derive(Debug, Clone, Copy)]
pub struct PassivizationConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub gen_size: usize,
    /// Probability that a training object carries a PP.
    pub object_pp_prob: f64,
}

impl Default for PassivizationConfig {
    fn default() -> Self {
        PassivizationConfig {
            train_size: 20_000,
            val_size: 1000,
            gen_size: 2000,
            object_pp_prob: 0.5,
        }
    }
}

fn sample_np(rng: &mut ChaCha8Rng, animate: bool, with_pp: bool) -> NpSpec {
    let nouns = if animate {
        ANIMATE_NOUNS.len()
    } else {
        INANIMATE_NOUNS.len()
    };
    NpSpec {
        det: rng.gen_range(0..DETERMINERS_BOTH.len()),
        noun: rng.gen_range(0..nouns),
        plural: rng.gen_bool(0.5),
        animate,
        pp: with_pp.then(|| {
            let animate = rng.gen_bool(0.3);
            let nouns = if animate {
                ANIMATE_NOUNS.len()
            } else {
                INANIMATE_NOUNS.len()
            };
            PpSpec {
                prep: rng.gen_range(0..PREPOSITIONS.len()),
                det: rng.gen_range(0..DETERMINERS_BOTH.len()),
                noun: rng.gen_range(0..nouns),
                plural: rng.gen_bool(0.5),
                animate,
            }
        }),
    }
}

/// Active -> passive dataset. Training modifies only objects with PPs;
/// generalization items put the PP on the subject (tagged structural).
pub fn gen_passivization(seed: u64, cfg: &PassivizationConfig) -> Result<TaskDataset, TaskError> {
    if cfg.train_size == 0 || cfg.gen_size == 0 {
        return Err(TaskError::Config("sizes must be positive".into()));
    }
    let vocabulary = Lexicon::vocabulary();

    let sample_train_sentence = |rng: &mut ChaCha8Rng| -> ActiveSentence {
        let with_pp = rng.gen_bool(cfg.object_pp_prob);
        let obj_animate = rng.gen_bool(0.5);
        ActiveSentence {
            subject: sample_np(rng, true, false),
            verb: rng.gen_range(0..TRANSITIVE_VERBS.len()),
            object: sample_np(rng, obj_animate, with_pp),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &["passivization", "train"]));
    let mut train = Vec::with_capacity(cfg.train_size);
    let mut train_sources = BTreeSet::new();
    while train.len() < cfg.train_size {
        let s = sample_train_sentence(&mut rng);
        let source = render_active(&s);
        if !train_sources.insert(source.join(" ")) {
            continue;
        }
        train.push(Seq2SeqExample::new(
            source,
            render_passive(&s),
            GenType::InDistribution,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &["passivization", "val"]));
    let mut val = Vec::with_capacity(cfg.val_size);
    let mut val_sources = BTreeSet::new();
    while val.len() < cfg.val_size {
        let s = sample_train_sentence(&mut rng);
        let source = render_active(&s);
        let key = source.join(" ");
        if train_sources.contains(&key) || !val_sources.insert(key) {
            continue;
        }
        val.push(Seq2SeqExample::new(
            source,
            render_passive(&s),
            GenType::InDistribution,
        ));
    }

    let attested: BTreeSet<&str> = train
        .iter()
        .flat_map(|e| e.source.iter().map(String::as_str))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &["passivization", "gen"]));
    let mut gen = Vec::with_capacity(cfg.gen_size);
    let mut gen_sources = BTreeSet::new();
    let mut attempts = 0;
    while gen.len() < cfg.gen_size {
        attempts += 1;
        if attempts > cfg.gen_size * 200 {
            return Err(TaskError::Invariant(
                "cannot build a covered generalization split; increase train_size".into(),
            ));
        }
        // PP on the subject, never seen in training.
        let obj_animate = rng.gen_bool(0.5);
        let s = ActiveSentence {
            subject: sample_np(&mut rng, true, true),
            verb: rng.gen_range(0..TRANSITIVE_VERBS.len()),
            object: sample_np(&mut rng, obj_animate, false),
        };
        let source = render_active(&s);
        if source.iter().any(|t| !attested.contains(t.as_str())) {
            continue;
        }
        let key = source.join(" ");
        if train_sources.contains(&key) || !gen_sources.insert(key) {
            continue;
        }
        gen.push(Seq2SeqExample::new(
            source,
            render_passive(&s),
            GenType::Structural,
        ));
    }

    let ds = TaskDataset {
        vocabulary,
        train,
        id_validation: val,
        generalization: gen,
        manifest: DatasetManifest {
            generator: "passivization".into(),
            seed,
            grammar_version: LEXICON_VERSION.into(),
        },
    };
    ds.validate()?;
    Ok(ds)
}
