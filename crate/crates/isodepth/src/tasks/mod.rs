//! Task data: synthetic pretraining corpora, compositional-generalization
//! datasets with lexical/structural splits, and COGS-format TSV ingestion.
//!
//! One experiment shares a single [`Vocabulary`] across the pretraining
//! corpus and every fine-tuning task so that checkpoints stay compatible.

mod lexicon;
mod mini_cogs;
mod passivization;
mod pcfg;
mod tsv;

pub use lexicon::Lexicon;
pub use mini_cogs::{check_example, gen_mini_cogs, CogsStyle, MiniCogsConfig};
pub use passivization::{
    gen_passivization, parse_passive, render_active, render_passive, ActiveSentence, NpSpec,
    PassivizationConfig, PpSpec,
};
pub use pcfg::{
    build_agreement_grammar, build_unigram_grammar, gen_pretrain_corpus, load_corpus, save_corpus,
    AgreementGrammarConfig, Grammar, GrammarSymbol, PretrainCorpus,
};
pub use tsv::{load_tsv, write_tsv, TsvFormat, TypeLabelMap};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("duplicate token in vocabulary: {0}")]
    DuplicateToken(String),
    #[error("token not in vocabulary: {0}")]
    UnknownToken(String),
    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown generalization type label(s): {unknown:?}; labels seen: {seen:?}")]
    UnknownTypeLabel {
        unknown: Vec<String>,
        seen: Vec<String>,
    },
    #[error("grammar error: {0}")]
    Grammar(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Ordered token list with reserved ids `pad=0, bos=1, eos=2, sep=3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens; reserved markers are
    /// prepended automatically.
    pub fn new<I, S>(content: I) -> Result<Vocabulary, TaskError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.into_iter().map(Into::into));
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TaskError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<u32>, TaskError> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| TaskError::UnknownToken(t.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("<unk:{i}>"))
            })
            .collect()
    }

    /// Stable content hash used to detect checkpoint/task mismatches.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0]);
        }
        hex_string(&hasher.finalize()[..16])
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenType {
    InDistribution,
    Lexical,
    Structural,
}

impl GenType {
    pub fn as_str(&self) -> &'static str {
        match self {
            GenType::InDistribution => "in_distribution",
            GenType::Lexical => "lexical",
            GenType::Structural => "structural",
        }
    }

    pub fn parse(s: &str) -> Option<GenType> {
        match s {
            "in_distribution" => Some(GenType::InDistribution),
            "lexical" => Some(GenType::Lexical),
            "structural" => Some(GenType::Structural),
            _ => None,
        }
    }
}

/// One source/target pair, whitespace-tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq2SeqExample {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub gen_type: GenType,
}

impl Seq2SeqExample {
    pub fn new(source: Vec<String>, target: Vec<String>, gen_type: GenType) -> Seq2SeqExample {
        Seq2SeqExample {
            source,
            target,
            gen_type,
        }
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub grammar_version: String,
}

/// Sequence-to-sequence dataset partitioned into train /
/// in-distribution-validation / generalization splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<Seq2SeqExample>,
    pub id_validation: Vec<Seq2SeqExample>,
    pub generalization: Vec<Seq2SeqExample>,
    pub manifest: DatasetManifest,
}

impl TaskDataset {
    /// Enforces the split-hygiene invariants: train and validation items
    /// carry no generalization tag, generalization sources never occur
    /// verbatim in train, and every generalization source token is
    /// attested in some train source.
    pub fn validate(&self) -> Result<(), TaskError> {
        for ex in self.train.iter().chain(&self.id_validation) {
            if ex.gen_type != GenType::InDistribution {
                return Err(TaskError::Invariant(format!(
                    "train/validation example tagged {:?}",
                    ex.gen_type
                )));
            }
            if ex.source.is_empty() || ex.target.is_empty() {
                return Err(TaskError::Invariant("empty example".into()));
            }
        }
        let train_sources: BTreeSet<String> =
            self.train.iter().map(|e| e.source_text()).collect();
        let attested: BTreeSet<&str> = self
            .train
            .iter()
            .flat_map(|e| e.source.iter().map(String::as_str))
            .collect();
        for ex in &self.generalization {
            if ex.gen_type == GenType::InDistribution {
                return Err(TaskError::Invariant(
                    "generalization example tagged in_distribution".into(),
                ));
            }
            if train_sources.contains(&ex.source_text()) {
                return Err(TaskError::Invariant(format!(
                    "generalization source appears verbatim in train: {}",
                    ex.source_text()
                )));
            }
            for tok in &ex.source {
                if !attested.contains(tok.as_str()) {
                    return Err(TaskError::Invariant(format!(
                        "generalization token {tok:?} not attested in train sources"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Counts of generalization examples per tag.
    pub fn gen_counts(&self) -> BTreeMap<GenType, usize> {
        let mut counts = BTreeMap::new();
        for ex in &self.generalization {
            *counts.entry(ex.gen_type).or_insert(0) += 1;
        }
        counts
    }

    /// Writes `train.tsv`, `id_validation.tsv`, `generalization.tsv` and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TaskError> {
        std::fs::create_dir_all(dir).map_err(|e| TaskError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        write_tsv(&dir.join("train.tsv"), &self.train)?;
        write_tsv(&dir.join("id_validation.tsv"), &self.id_validation)?;
        write_tsv(&dir.join("generalization.tsv"), &self.generalization)?;
        let meta = serde_json::json!({
            "manifest": self.manifest,
            "vocabulary": self.vocabulary.tokens(),
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&meta).expect("serializable"),
        )
        .map_err(|e| TaskError::Io {
            path: dir.join("manifest.json").display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    /// Loads a dataset previously written by [`TaskDataset::save`].
    pub fn load(dir: &Path) -> Result<TaskDataset, TaskError> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(|e| TaskError::Io {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
        let meta: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| TaskError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        let manifest: DatasetManifest = serde_json::from_value(meta["manifest"].clone())
            .map_err(|e| TaskError::Manifest(format!("bad manifest block: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(meta["vocabulary"].clone())
            .map_err(|e| TaskError::Manifest(format!("bad vocabulary block: {e}")))?;
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .map(String::as_str)
                .ne(RESERVED_TOKENS)
        {
            return Err(TaskError::Manifest(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut vocabulary = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        vocabulary.reindex();

        let map = TypeLabelMap::identity();
        let train = tsv::read_tsv(&dir.join("train.tsv"), &map)?;
        let id_validation = tsv::read_tsv(&dir.join("id_validation.tsv"), &map)?;
        let generalization = tsv::read_tsv(&dir.join("generalization.tsv"), &map)?;
        Ok(TaskDataset {
            vocabulary,
            train,
            id_validation,
            generalization,
            manifest,
        })
    }
}
