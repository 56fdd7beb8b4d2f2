//! Desk-scale semantic parsing in the COGS mold: English sentences paired
//! with logical forms, either with numbered variables or variable-free.
//!
//! Two generalization phenomena are generated. Lexical: a held-out noun set
//! occurs only as subjects during training and only as objects in the
//! generalization split. Structural: prepositional-phrase recursion is
//! capped at depth 2 in training while generalization items nest to depths
//! 3 and 4.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{
    ANIMATE_NOUNS, INANIMATE_NOUNS, INTRANSITIVE_VERBS, LEXICON_VERSION, PREPOSITIONS,
    TRANSITIVE_VERBS,
};
use super::{DatasetManifest, GenType, Lexicon, Seq2SeqExample, TaskDataset, TaskError};
use crate::seeding::substream_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CogsStyle {
    /// Logical forms with numbered variables indexing source positions.
    Variable,
    /// Nested functional forms without variables (shorter targets).
    VariableFree,
}

impl CogsStyle {
    pub fn as_str(&self) -> &'static str {
        match self {
            CogsStyle::Variable => "variable",
            CogsStyle::VariableFree => "variable_free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NounRef {
    Animate(usize),
    Inanimate(usize),
}

impl NounRef {
    fn surface(&self) -> &'static str {
        match *self {
            NounRef::Animate(i) => ANIMATE_NOUNS[i].0,
            NounRef::Inanimate(i) => INANIMATE_NOUNS[i].0,
        }
    }
}

/// Right-nested noun phrase: each PP attaches to the immediately preceding
/// noun.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Np {
    definite: bool,
    noun: NounRef,
    pp: Option<Box<(usize, Np)>>, // (preposition index, inner NP)
}

impl Np {
    fn depth(&self) -> usize {
        match &self.pp {
            None => 0,
            Some(inner) => 1 + inner.1.depth(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Sentence {
    subject: Np,
    /// Index into the transitive table when an object is present,
    /// otherwise into the intransitive table.
    verb: usize,
    object: Option<Np>,
}

fn np_source_tokens(np: &Np, out: &mut Vec<String>) {
    out.push(if np.definite { "the" } else { "a" }.to_string());
    out.push(np.noun.surface().to_string());
    if let Some(pp) = &np.pp {
        out.push(PREPOSITIONS[pp.0].to_string());
        np_source_tokens(&pp.1, out);
    }
}

fn render_source(s: &Sentence) -> Vec<String> {
    let mut out = Vec::new();
    np_source_tokens(&s.subject, &mut out);
    out.push(
        if s.object.is_some() {
            TRANSITIVE_VERBS[s.verb].2
        } else {
            INTRANSITIVE_VERBS[s.verb].2
        }
        .to_string(),
    );
    if let Some(obj) = &s.object {
        np_source_tokens(obj, &mut out);
    }
    out.push(".".to_string());
    out
}

fn verb_lemma(s: &Sentence) -> &'static str {
    if s.object.is_some() {
        TRANSITIVE_VERBS[s.verb].0
    } else {
        INTRANSITIVE_VERBS[s.verb].0
    }
}

// ---- variable-free targets ---------------------------------------------

fn np_vf_tokens(np: &Np, out: &mut Vec<String>) {
    if np.definite {
        out.push("*".to_string());
    }
    out.push(np.noun.surface().to_string());
    if let Some(pp) = &np.pp {
        out.push("(".to_string());
        out.push("nmod".to_string());
        out.push(".".to_string());
        out.push(PREPOSITIONS[pp.0].to_string());
        out.push("=".to_string());
        np_vf_tokens(&pp.1, out);
        out.push(")".to_string());
    }
}

/// `eat ( agent = hedgehog , theme = * cake ( nmod . on = * bed ) )`
fn render_target_vf(s: &Sentence) -> Vec<String> {
    let mut out = vec![verb_lemma(s).to_string(), "(".to_string(), "agent".to_string(), "=".to_string()];
    np_vf_tokens(&s.subject, &mut out);
    if let Some(obj) = &s.object {
        out.push(",".to_string());
        out.push("theme".to_string());
        out.push("=".to_string());
        np_vf_tokens(obj, &mut out);
    }
    out.push(")".to_string());
    out
}

// ---- variable-style targets --------------------------------------------

struct NpPositions {
    noun_pos: usize,
    definite: bool,
    noun: NounRef,
    pp: Option<Box<(usize, NpPositions)>>,
}

/// Source-position bookkeeping: `cursor` walks the source tokens.
fn np_positions(np: &Np, cursor: &mut usize) -> NpPositions {
    *cursor += 1; // determiner
    let noun_pos = *cursor;
    *cursor += 1;
    let pp = np.pp.as_ref().map(|pp| {
        *cursor += 1; // preposition
        Box::new((pp.0, np_positions(&pp.1, cursor)))
    });
    NpPositions {
        noun_pos,
        definite: np.definite,
        noun: np.noun,
        pp,
    }
}

fn var_tokens(pos: usize) -> Vec<String> {
    vec!["x".into(), "_".into(), pos.to_string()]
}

fn collect_noun_clauses(
    np: &NpPositions,
    definites: &mut Vec<Vec<String>>,
    indefinites: &mut Vec<Vec<String>>,
    nmods: &mut Vec<Vec<String>>,
) {
    let mut clause = Vec::new();
    if np.definite {
        clause.push("*".to_string());
    }
    clause.push(np.noun.surface().to_string());
    clause.push("(".to_string());
    clause.extend(var_tokens(np.noun_pos));
    clause.push(")".to_string());
    if np.definite {
        definites.push(clause);
    } else {
        indefinites.push(clause);
    }
    if let Some(pp) = &np.pp {
        let mut edge = vec![
            np.noun.surface().to_string(),
            ".".to_string(),
            "nmod".to_string(),
            ".".to_string(),
            PREPOSITIONS[pp.0].to_string(),
            "(".to_string(),
        ];
        edge.extend(var_tokens(np.noun_pos));
        edge.push(",".to_string());
        edge.extend(var_tokens(pp.1.noun_pos));
        edge.push(")".to_string());
        nmods.push(edge);
        collect_noun_clauses(&pp.1, definites, indefinites, nmods);
    }
}

/// `* cake ( x _ 4 ) ; hedgehog ( x _ 1 ) AND eat . agent ( x _ 2 , x _ 1 )
/// AND eat . theme ( x _ 2 , x _ 4 )`
fn render_target_variable(s: &Sentence) -> Vec<String> {
    let mut cursor = 0;
    let subject = np_positions(&s.subject, &mut cursor);
    let verb_pos = cursor;
    cursor += 1;
    let object = s.object.as_ref().map(|o| np_positions(o, &mut cursor));

    let mut definites = Vec::new();
    let mut indefinites = Vec::new();
    let mut nmods = Vec::new();
    collect_noun_clauses(&subject, &mut definites, &mut indefinites, &mut nmods);
    if let Some(obj) = &object {
        collect_noun_clauses(obj, &mut definites, &mut indefinites, &mut nmods);
    }

    let lemma = verb_lemma(s);
    let role = |role: &str, arg_pos: usize| -> Vec<String> {
        let mut c = vec![
            lemma.to_string(),
            ".".to_string(),
            role.to_string(),
            "(".to_string(),
        ];
        c.extend(var_tokens(verb_pos));
        c.push(",".to_string());
        c.extend(var_tokens(arg_pos));
        c.push(")".to_string());
        c
    };
    let mut conjuncts = indefinites;
    conjuncts.push(role("agent", subject.noun_pos));
    if let Some(obj) = &object {
        conjuncts.push(role("theme", obj.noun_pos));
    }
    conjuncts.extend(nmods);

    let mut out = Vec::new();
    for clause in definites {
        out.extend(clause);
        out.push(";".to_string());
    }
    for (i, clause) in conjuncts.iter().enumerate() {
        if i > 0 {
            out.push("AND".to_string());
        }
        out.extend(clause.iter().cloned());
    }
    out
}

// ---- parsing (the inverse grammar used by the consistency checker) ------

struct TokenCursor<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl<'a> TokenCursor<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn next(&mut self) -> Result<&'a str, TaskError> {
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| TaskError::Invariant("unexpected end of tokens".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<(), TaskError> {
        let got = self.next()?;
        if got != want {
            return Err(TaskError::Invariant(format!("expected {want:?}, got {got:?}")));
        }
        Ok(())
    }
}

fn lookup_noun_sg(tok: &str) -> Result<NounRef, TaskError> {
    if let Some(i) = ANIMATE_NOUNS.iter().position(|(sg, _)| *sg == tok) {
        return Ok(NounRef::Animate(i));
    }
    if let Some(i) = INANIMATE_NOUNS.iter().position(|(sg, _)| *sg == tok) {
        return Ok(NounRef::Inanimate(i));
    }
    Err(TaskError::Invariant(format!("unknown noun {tok}")))
}

fn parse_source_np(cur: &mut TokenCursor) -> Result<Np, TaskError> {
    let det = cur.next()?;
    let definite = match det {
        "the" => true,
        "a" => false,
        other => {
            return Err(TaskError::Invariant(format!("unknown determiner {other}")));
        }
    };
    let noun = lookup_noun_sg(cur.next()?)?;
    let mut np = Np {
        definite,
        noun,
        pp: None,
    };
    if let Some(tok) = cur.peek() {
        if let Some(prep) = PREPOSITIONS.iter().position(|p| *p == tok) {
            cur.next()?;
            let inner = parse_source_np(cur)?;
            np.pp = Some(Box::new((prep, inner)));
        }
    }
    Ok(np)
}

/// Source parser: `Det N (P Det N)* V [Det N (P Det N)*] .`
fn parse_source(tokens: &[String]) -> Result<Sentence, TaskError> {
    let mut cur = TokenCursor { tokens, pos: 0 };
    let subject = parse_source_np(&mut cur)?;
    let verb_tok = cur.next()?;
    if let Some(v) = TRANSITIVE_VERBS.iter().position(|(_, _, past, _)| *past == verb_tok) {
        let object = parse_source_np(&mut cur)?;
        cur.expect(".")?;
        Ok(Sentence {
            subject,
            verb: v,
            object: Some(object),
        })
    } else if let Some(v) = INTRANSITIVE_VERBS.iter().position(|(_, _, past)| *past == verb_tok) {
        cur.expect(".")?;
        Ok(Sentence {
            subject,
            verb: v,
            object: None,
        })
    } else {
        Err(TaskError::Invariant(format!("unknown verb {verb_tok}")))
    }
}

fn parse_vf_np(cur: &mut TokenCursor) -> Result<Np, TaskError> {
    let definite = cur.peek() == Some("*");
    if definite {
        cur.next()?;
    }
    let noun = lookup_noun_sg(cur.next()?)?;
    let mut np = Np {
        definite,
        noun,
        pp: None,
    };
    if cur.peek() == Some("(") {
        cur.next()?;
        cur.expect("nmod")?;
        cur.expect(".")?;
        let prep_tok = cur.next()?;
        let prep = PREPOSITIONS
            .iter()
            .position(|p| *p == prep_tok)
            .ok_or_else(|| TaskError::Invariant(format!("unknown preposition {prep_tok}")))?;
        cur.expect("=")?;
        let inner = parse_vf_np(cur)?;
        cur.expect(")")?;
        np.pp = Some(Box::new((prep, inner)));
    }
    Ok(np)
}

fn parse_target_vf(tokens: &[String]) -> Result<Sentence, TaskError> {
    let mut cur = TokenCursor { tokens, pos: 0 };
    let lemma = cur.next()?.to_string();
    cur.expect("(")?;
    cur.expect("agent")?;
    cur.expect("=")?;
    let subject = parse_vf_np(&mut cur)?;
    let object = if cur.peek() == Some(",") {
        cur.next()?;
        cur.expect("theme")?;
        cur.expect("=")?;
        Some(parse_vf_np(&mut cur)?)
    } else {
        None
    };
    cur.expect(")")?;
    let verb = if object.is_some() {
        TRANSITIVE_VERBS
            .iter()
            .position(|(l, _, _, _)| *l == lemma)
            .ok_or_else(|| TaskError::Invariant(format!("unknown transitive lemma {lemma}")))?
    } else {
        INTRANSITIVE_VERBS
            .iter()
            .position(|(l, _, _)| *l == lemma)
            .ok_or_else(|| TaskError::Invariant(format!("unknown intransitive lemma {lemma}")))?
    };
    Ok(Sentence {
        subject,
        verb,
        object,
    })
}

/// Consistency checker: the target must evaluate to the same logical form
/// as the source. For variable-style targets the rendered target is also
/// required to match token-for-token, which pins the position indices.
pub fn check_example(ex: &Seq2SeqExample, style: CogsStyle) -> Result<(), TaskError> {
    let from_source = parse_source(&ex.source)?;
    match style {
        CogsStyle::VariableFree => {
            let from_target = parse_target_vf(&ex.target)?;
            if from_source != from_target {
                return Err(TaskError::Invariant(format!(
                    "target semantics mismatch for {:?}",
                    ex.source_text()
                )));
            }
        }
        CogsStyle::Variable => {
            let expected = render_target_variable(&from_source);
            if expected != ex.target {
                return Err(TaskError::Invariant(format!(
                    "variable-style target mismatch for {:?}",
                    ex.source_text()
                )));
            }
        }
    }
    Ok(())
}

// ---- dataset generation --------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MiniCogsConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub gen_size: usize,
    pub style: CogsStyle,
    /// Number of animate nouns held out of object position in training.
    pub lexical_noun_count: usize,
    /// Probability that a training object carries a PP chain.
    pub object_pp_prob: f64,
    /// Target share of lexical items in the generalization split.
    pub lexical_fraction: f64,
}

impl Default for MiniCogsConfig {
    fn default() -> Self {
        MiniCogsConfig {
            train_size: 20_000,
            val_size: 1000,
            gen_size: 2000,
            style: CogsStyle::VariableFree,
            lexical_noun_count: 4,
            object_pp_prob: 0.55,
            lexical_fraction: 0.5,
        }
    }
}

const MAX_TRAIN_DEPTH: usize = 2;
const GEN_DEPTHS: [usize; 2] = [3, 4];

struct Sampler {
    lexical_nouns: Vec<usize>,
    other_animate: Vec<usize>,
    object_pp_prob: f64,
}

impl Sampler {
    fn new(cfg: &MiniCogsConfig) -> Sampler {
        // Held-out nouns start at "hedgehog" (index 0) by convention.
        let lexical_nouns: Vec<usize> = (0..cfg.lexical_noun_count).collect();
        let other_animate: Vec<usize> = (cfg.lexical_noun_count..ANIMATE_NOUNS.len()).collect();
        Sampler {
            lexical_nouns,
            other_animate,
            object_pp_prob: cfg.object_pp_prob,
        }
    }

    fn pp_chain(&self, rng: &mut ChaCha8Rng, depth: usize) -> Option<Box<(usize, Np)>> {
        if depth == 0 {
            return None;
        }
        let inner = Np {
            definite: rng.gen_bool(0.5),
            noun: NounRef::Inanimate(rng.gen_range(0..INANIMATE_NOUNS.len())),
            pp: self.pp_chain(rng, depth - 1),
        };
        Some(Box::new((rng.gen_range(0..PREPOSITIONS.len()), inner)))
    }

    fn subject(&self, rng: &mut ChaCha8Rng, allow_lexical: bool) -> Np {
        let noun = if allow_lexical && rng.gen_bool(0.35) {
            self.lexical_nouns[rng.gen_range(0..self.lexical_nouns.len())]
        } else {
            self.other_animate[rng.gen_range(0..self.other_animate.len())]
        };
        Np {
            definite: rng.gen_bool(0.5),
            noun: NounRef::Animate(noun),
            pp: None,
        }
    }

    /// Training object: never a held-out noun, PP depth <= 2.
    fn train_object(&self, rng: &mut ChaCha8Rng) -> Np {
        let noun = if rng.gen_bool(0.5) {
            NounRef::Inanimate(rng.gen_range(0..INANIMATE_NOUNS.len()))
        } else {
            NounRef::Animate(self.other_animate[rng.gen_range(0..self.other_animate.len())])
        };
        let depth = if rng.gen_bool(self.object_pp_prob) {
            if rng.gen_bool(0.35) {
                MAX_TRAIN_DEPTH
            } else {
                1
            }
        } else {
            0
        };
        Np {
            definite: rng.gen_bool(0.5),
            noun,
            pp: self.pp_chain(rng, depth),
        }
    }

    fn train_sentence(&self, rng: &mut ChaCha8Rng) -> Sentence {
        if rng.gen_bool(0.75) {
            Sentence {
                subject: self.subject(rng, true),
                verb: rng.gen_range(0..TRANSITIVE_VERBS.len()),
                object: Some(self.train_object(rng)),
            }
        } else {
            Sentence {
                subject: self.subject(rng, true),
                verb: rng.gen_range(0..INTRANSITIVE_VERBS.len()),
                object: None,
            }
        }
    }

    /// Lexical generalization: a held-out noun in object position, with an
    /// otherwise familiar (shallow) structure.
    fn lexical_gen_sentence(&self, rng: &mut ChaCha8Rng) -> Sentence {
        let definite = rng.gen_bool(0.5);
        let noun = self.lexical_nouns[rng.gen_range(0..self.lexical_nouns.len())];
        let depth = usize::from(rng.gen_bool(0.3));
        let object = Np {
            definite,
            noun: NounRef::Animate(noun),
            pp: self.pp_chain(rng, depth),
        };
        Sentence {
            subject: self.subject(rng, false),
            verb: rng.gen_range(0..TRANSITIVE_VERBS.len()),
            object: Some(object),
        }
    }

    /// Structural generalization: deeper PP recursion than training.
    fn structural_gen_sentence(&self, rng: &mut ChaCha8Rng) -> Sentence {
        let depth = GEN_DEPTHS[rng.gen_range(0..GEN_DEPTHS.len())];
        let object = Np {
            definite: rng.gen_bool(0.5),
            noun: NounRef::Inanimate(rng.gen_range(0..INANIMATE_NOUNS.len())),
            pp: self.pp_chain(rng, depth),
        };
        debug_assert_eq!(object.depth(), depth);
        Sentence {
            subject: self.subject(rng, false),
            verb: rng.gen_range(0..TRANSITIVE_VERBS.len()),
            object: Some(object),
        }
    }
}

fn render_example(s: &Sentence, style: CogsStyle, gen_type: GenType) -> Seq2SeqExample {
    let source = render_source(s);
    let target = match style {
        CogsStyle::Variable => render_target_variable(s),
        CogsStyle::VariableFree => render_target_vf(s),
    };
    Seq2SeqExample::new(source, target, gen_type)
}

/// Semantic-parsing dataset with lexical and structural generalization
/// splits.
pub fn gen_mini_cogs(seed: u64, cfg: &MiniCogsConfig) -> Result<TaskDataset, TaskError> {
    if cfg.train_size == 0 || cfg.gen_size == 0 {
        return Err(TaskError::Config("sizes must be positive".into()));
    }
    if cfg.lexical_noun_count == 0 || cfg.lexical_noun_count + 2 > ANIMATE_NOUNS.len() {
        return Err(TaskError::Config("bad lexical_noun_count".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lexical_fraction) {
        return Err(TaskError::Config("lexical_fraction must be in [0,1]".into()));
    }
    let sampler = Sampler::new(cfg);
    let vocabulary = Lexicon::vocabulary();

    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &["mini-cogs", "train"]));
    let mut train = Vec::with_capacity(cfg.train_size);
    let mut train_sources = BTreeSet::new();
    // Guarantee each held-out noun is attested (as a subject).
    for &noun in &sampler.lexical_nouns {
        let s = Sentence {
            subject: Np {
                definite: true,
                noun: NounRef::Animate(noun),
                pp: None,
            },
            verb: rng.gen_range(0..INTRANSITIVE_VERBS.len()),
            object: None,
        };
        let ex = render_example(&s, cfg.style, GenType::InDistribution);
        train_sources.insert(ex.source_text());
        train.push(ex);
    }
    while train.len() < cfg.train_size {
        let s = sampler.train_sentence(&mut rng);
        let ex = render_example(&s, cfg.style, GenType::InDistribution);
        if !train_sources.insert(ex.source_text()) {
            continue;
        }
        train.push(ex);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &["mini-cogs", "val"]));
    let mut val = Vec::with_capacity(cfg.val_size);
    let mut val_sources = BTreeSet::new();
    while val.len() < cfg.val_size {
        let s = sampler.train_sentence(&mut rng);
        let ex = render_example(&s, cfg.style, GenType::InDistribution);
        let key = ex.source_text();
        if train_sources.contains(&key) || !val_sources.insert(key) {
            continue;
        }
        val.push(ex);
    }

    let attested: BTreeSet<&str> = train
        .iter()
        .flat_map(|e| e.source.iter().map(String::as_str))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &["mini-cogs", "gen"]));
    let mut gen = Vec::with_capacity(cfg.gen_size);
    let mut gen_sources = BTreeSet::new();
    let lexical_target = (cfg.gen_size as f64 * cfg.lexical_fraction).round() as usize;
    let mut attempts = 0;
    while gen.len() < cfg.gen_size {
        attempts += 1;
        if attempts > cfg.gen_size * 200 {
            return Err(TaskError::Invariant(
                "cannot build a covered generalization split; increase train_size".into(),
            ));
        }
        let lexical = gen.iter().filter(|e: &&Seq2SeqExample| e.gen_type == GenType::Lexical).count()
            < lexical_target;
        let (s, tag) = if lexical {
            (sampler.lexical_gen_sentence(&mut rng), GenType::Lexical)
        } else {
            (sampler.structural_gen_sentence(&mut rng), GenType::Structural)
        };
        let ex = render_example(&s, cfg.style, tag);
        if ex.source.iter().any(|t| !attested.contains(t.as_str())) {
            continue;
        }
        let key = ex.source_text();
        if train_sources.contains(&key) || !gen_sources.insert(key) {
            continue;
        }
        gen.push(ex);
    }

    let ds = TaskDataset {
        vocabulary,
        train,
        id_validation: val,
        generalization: gen,
        manifest: DatasetManifest {
            generator: format!("mini-cogs-{}", cfg.style.as_str()),
            seed,
            grammar_version: LEXICON_VERSION.into(),
        },
    };
    ds.validate()?;
    Ok(ds)
}
