//! Reading and writing `source<TAB>target<TAB>type` files, including
//! ingestion of real COGS-format datasets.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use super::{
    DatasetManifest, GenType, Seq2SeqExample, TaskDataset, TaskError, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsvFormat {
    /// Real COGS files; the third column holds COGS generalization-type
    /// labels which are mapped through a built-in table.
    Cogs,
    /// Third column must already be `in_distribution`, `lexical` or
    /// `structural`, or be covered by a user-supplied mapping.
    Generic,
}

/// Mapping from third-column labels to generalization tags.
#[derive(Debug, Clone, Default)]
pub struct TypeLabelMap {
    map: HashMap<String, GenType>,
    /// Treat labels with this prefix as in-distribution (COGS marks
    /// few-shot exposure examples this way).
    in_distribution_prefixes: Vec<String>,
}

impl TypeLabelMap {
    /// Only the canonical three labels.
    pub fn identity() -> TypeLabelMap {
        let mut map = HashMap::new();
        for t in [GenType::InDistribution, GenType::Lexical, GenType::Structural] {
            map.insert(t.as_str().to_string(), t);
        }
        TypeLabelMap {
            map,
            in_distribution_prefixes: vec![],
        }
    }

    /// Built-in table for the published COGS splits: the three structural
    /// generalization types plus the lexical ones; training markers map to
    /// in-distribution.
    pub fn cogs_default() -> TypeLabelMap {
        let mut m = TypeLabelMap::identity();
        for label in ["main", "primitive", "in_distribution_primitive", "dev", "test"] {
            m.map.insert(label.into(), GenType::InDistribution);
        }
        for label in ["obj_pp_to_subj_pp", "cp_recursion", "pp_recursion"] {
            m.map.insert(label.into(), GenType::Structural);
        }
        for label in [
            "subj_to_obj_common",
            "subj_to_obj_proper",
            "obj_to_subj_common",
            "obj_to_subj_proper",
            "prim_to_subj_common",
            "prim_to_subj_proper",
            "prim_to_obj_common",
            "prim_to_obj_proper",
            "prim_to_inf_arg",
            "active_to_passive",
            "passive_to_active",
            "obj_omitted_transitive_to_transitive",
            "unacc_to_transitive",
            "do_dative_to_pp_dative",
            "pp_dative_to_do_dative",
            "agent_nmod_to_unacc_subj",
            "theme_to_obj_omitted_transitive_subj",
            "theme_to_unacc_subj",
        ] {
            m.map.insert(label.into(), GenType::Lexical);
        }
        m.in_distribution_prefixes.push("exposure_example".into());
        m
    }

    /// Loads `{ "label": "lexical" | "structural" | "in_distribution" }`.
    pub fn from_json_file(path: &Path) -> Result<TypeLabelMap, TaskError> {
        let raw = std::fs::read_to_string(path).map_err(|e| TaskError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let parsed: HashMap<String, String> = serde_json::from_str(&raw)
            .map_err(|e| TaskError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m = TypeLabelMap::identity();
        for (label, tag) in parsed {
            let gen = GenType::parse(&tag).ok_or_else(|| {
                TaskError::Manifest(format!("mapping for {label:?} has unknown tag {tag:?}"))
            })?;
            m.map.insert(label, gen);
        }
        Ok(m)
    }

    pub fn merge(mut self, other: &TypeLabelMap) -> TypeLabelMap {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), *v);
        }
        self.in_distribution_prefixes
            .extend(other.in_distribution_prefixes.iter().cloned());
        self
    }

    pub fn resolve(&self, label: &str) -> Option<GenType> {
        if let Some(t) = self.map.get(label) {
            return Some(*t);
        }
        if self
            .in_distribution_prefixes
            .iter()
            .any(|p| label.starts_with(p.as_str()))
        {
            return Some(GenType::InDistribution);
        }
        None
    }
}

/// Reads one TSV file; every line must have exactly three tab-separated
/// fields. Unknown labels abort with the list of labels seen.
pub fn read_tsv(path: &Path, labels: &TypeLabelMap) -> Result<Vec<Seq2SeqExample>, TaskError> {
    let raw = std::fs::read_to_string(path).map_err(|e| TaskError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut examples = Vec::new();
    let mut unknown = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TaskError::MalformedLine {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let source: Vec<String> = fields[0].split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
        if source.is_empty() || target.is_empty() {
            return Err(TaskError::MalformedLine {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "empty source or target".into(),
            });
        }
        let label = fields[2].trim();
        seen.insert(label.to_string());
        match labels.resolve(label) {
            Some(gen_type) => examples.push(Seq2SeqExample::new(source, target, gen_type)),
            None => {
                unknown.insert(label.to_string());
            }
        }
    }
    if !unknown.is_empty() {
        return Err(TaskError::UnknownTypeLabel {
            unknown: unknown.into_iter().collect(),
            seen: seen.into_iter().collect(),
        });
    }
    Ok(examples)
}

pub fn write_tsv(path: &Path, examples: &[Seq2SeqExample]) -> Result<(), TaskError> {
    let mut file = std::fs::File::create(path).map_err(|e| TaskError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for ex in examples {
        writeln!(
            file,
            "{}\t{}\t{}",
            ex.source_text(),
            ex.target_text(),
            ex.gen_type.as_str()
        )
        .map_err(|e| TaskError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

/// Ingests external TSV data as a [`TaskDataset`].
///
/// `path` may be a single file (all rows become the train split) or a
/// directory holding `train.tsv` plus optional `dev.tsv` and `gen.tsv`.
/// The vocabulary is built from the train split only; generalization
/// tokens missing from it are reported as warnings, not errors.
pub fn load_tsv(
    path: &Path,
    format: TsvFormat,
    user_map: Option<&TypeLabelMap>,
) -> Result<(TaskDataset, Vec<String>), TaskError> {
    let mut labels = match format {
        TsvFormat::Cogs => TypeLabelMap::cogs_default(),
        TsvFormat::Generic => TypeLabelMap::identity(),
    };
    if let Some(user) = user_map {
        labels = labels.merge(user);
    }

    let (train_raw, dev_raw, gen_raw) = if path.is_dir() {
        let train = read_tsv(&path.join("train.tsv"), &labels)?;
        let dev = ["dev.tsv", "id_validation.tsv"]
            .iter()
            .map(|n| path.join(n))
            .find(|p| p.exists())
            .map(|p| read_tsv(&p, &labels))
            .transpose()?
            .unwrap_or_default();
        let gen = ["gen.tsv", "generalization.tsv"]
            .iter()
            .map(|n| path.join(n))
            .find(|p| p.exists())
            .map(|p| read_tsv(&p, &labels))
            .transpose()?
            .unwrap_or_default();
        (train, dev, gen)
    } else {
        (read_tsv(path, &labels)?, Vec::new(), Vec::new())
    };

    // Items in the train file tagged with a generalization label would
    // poison the splits; keep the splits honest by partitioning on tag.
    let mut train = Vec::new();
    let mut generalization: Vec<Seq2SeqExample> = Vec::new();
    for ex in train_raw {
        if ex.gen_type == GenType::InDistribution {
            train.push(ex);
        } else {
            generalization.push(ex);
        }
    }
    let mut id_validation = Vec::new();
    for ex in dev_raw {
        if ex.gen_type == GenType::InDistribution {
            id_validation.push(ex);
        } else {
            generalization.push(ex);
        }
    }
    generalization.extend(gen_raw.into_iter().filter_map(|mut ex| {
        if ex.gen_type == GenType::InDistribution {
            // Untagged rows in a generalization file default to lexical.
            ex.gen_type = GenType::Lexical;
        }
        Some(ex)
    }));

    if train.is_empty() {
        return Err(TaskError::Invariant("no in-distribution training rows".into()));
    }

    // Vocabulary from the train split only.
    let mut content = BTreeSet::new();
    for ex in &train {
        for tok in ex.source.iter().chain(&ex.target) {
            content.insert(tok.clone());
        }
    }
    let vocabulary = Vocabulary::new(content)?;

    let mut warnings = Vec::new();
    let mut uncovered = BTreeSet::new();
    for ex in id_validation.iter().chain(&generalization) {
        for tok in ex.source.iter().chain(&ex.target) {
            if vocabulary.id(tok).is_none() {
                uncovered.insert(tok.clone());
            }
        }
    }
    if !uncovered.is_empty() {
        warnings.push(format!(
            "{} token(s) outside the train vocabulary: {:?}",
            uncovered.len(),
            uncovered.iter().take(10).collect::<Vec<_>>()
        ));
    }

    let dataset = TaskDataset {
        vocabulary,
        train,
        id_validation,
        generalization,
        manifest: DatasetManifest {
            generator: format!(
                "load_tsv:{}",
                match format {
                    TsvFormat::Cogs => "cogs",
                    TsvFormat::Generic => "generic",
                }
            ),
            seed: 0,
            grammar_version: "external".into(),
        },
    };
    Ok((dataset, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn three_line_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "data.tsv",
            "a cat ran .\trun ( agent = cat )\tin_distribution\n\
             a dog ran .\trun ( agent = dog )\tin_distribution\n\
             a fox ran .\trun ( agent = fox )\tin_distribution\n",
        );
        let (ds, warnings) = load_tsv(&p, TsvFormat::Generic, None).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert!(warnings.is_empty());
        assert!(ds.vocabulary.id("cat").is_some());
    }

    #[test]
    fn missing_tab_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "bad.tsv",
            "a cat ran .\trun ( agent = cat )\tin_distribution\n\
             a dog ran . run ( agent = dog ) in_distribution\n",
        );
        let err = read_tsv(&p, &TypeLabelMap::identity()).unwrap_err();
        match err {
            TaskError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_label_lists_labels_seen() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "odd.tsv",
            "a cat ran .\tx\tin_distribution\n\
             a dog ran .\tx\tbizarre_label\n",
        );
        let err = read_tsv(&p, &TypeLabelMap::identity()).unwrap_err();
        match err {
            TaskError::UnknownTypeLabel { unknown, seen } => {
                assert_eq!(unknown, vec!["bizarre_label".to_string()]);
                assert!(seen.contains(&"in_distribution".to_string()));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cogs_directory_with_coverage_warning() {
        let dir = tempfile::tempdir().unwrap();
        write_file(
            dir.path(),
            "train.tsv",
            "a cat smiled .\tcat ( x _ 1 )\tmain\n\
             a dog ran .\tdog ( x _ 1 )\tprimitive\n",
        );
        write_file(
            dir.path(),
            "gen.tsv",
            "a cat ran on the mat .\tcat ( x _ 1 )\tpp_recursion\n",
        );
        let (ds, warnings) = load_tsv(dir.path(), TsvFormat::Cogs, None).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.generalization.len(), 1);
        assert_eq!(ds.generalization[0].gen_type, GenType::Structural);
        // "on", "the", "mat" never occur in train: must warn.
        assert_eq!(warnings.len(), 1, "{warnings:?}");
        assert!(warnings[0].contains("mat"), "{warnings:?}");
    }

    #[test]
    fn user_mapping_file_extends_labels() {
        let dir = tempfile::tempdir().unwrap();
        let map_path = write_file(
            dir.path(),
            "map.json",
            r#"{"weird": "structural"}"#,
        );
        let p = write_file(dir.path(), "d.tsv", "a b\tc\tweird\n");
        let map = TypeLabelMap::from_json_file(&map_path).unwrap();
        let rows = read_tsv(&p, &TypeLabelMap::identity().merge(&map)).unwrap();
        assert_eq!(rows[0].gen_type, GenType::Structural);
    }

    #[test]
    fn roundtrip_write_read() {
        let dir = tempfile::tempdir().unwrap();
        let examples = vec![
            Seq2SeqExample::new(
                vec!["a".into(), "b".into()],
                vec!["c".into()],
                GenType::Lexical,
            ),
            Seq2SeqExample::new(
                vec!["d".into()],
                vec!["e".into(), "f".into()],
                GenType::Structural,
            ),
        ];
        let p = dir.path().join("x.tsv");
        write_tsv(&p, &examples).unwrap();
        let back = read_tsv(&p, &TypeLabelMap::identity()).unwrap();
        assert_eq!(back, examples);
    }
}
