//! Turns metrics JSONL files into CSV tables and plot-data files:
//! per-class result tables with best-in-class marks, relative-perplexity
//! curves against depth and against the feed-forward ratio, and the
//! lexical/structural generalization breakdown.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::training::MetricsRow;

use super::{relative_perplexity, AnalysisError};

#[derive(Debug, Default, Serialize)]
pub struct ReportSummary {
    /// class -> (n_layers at best final perplexity, that perplexity)
    pub best_ppl_by_class: BTreeMap<String, (usize, f64)>,
    /// class -> relative perplexity of the shallowest member
    pub shallow_rel_ppl_by_class: BTreeMap<String, f64>,
    pub rows_read: usize,
    pub rows_skipped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct MemberKey {
    class: String,
    n_layers: usize,
    d_ff: usize,
}

#[derive(Debug, Default, Clone)]
struct MemberData {
    d_model: Option<usize>,
    /// final pretrain ppl per run_id (seed replicates)
    final_ppl: BTreeMap<String, (u64, f64)>,
    /// task -> run_id -> (step, overall, lexical, structural)
    task_final: BTreeMap<String, BTreeMap<String, TaskFinal>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct TaskFinal {
    step: u64,
    exact_match: f64,
    lexical: Option<f64>,
    structural: Option<f64>,
}

fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), AnalysisError> {
    let mut f = std::fs::File::create(path).map_err(|e| AnalysisError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| AnalysisError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn collect_jsonl_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    let mut paths: Vec<_> = entries.flatten().map(|e| e.path()).collect();
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_jsonl_files(&path, out);
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
}

/// Builds `class_table.csv`, `rel_ppl_by_depth.csv`, `rel_ppl_by_ratio.csv`
/// and `gen_by_type.csv` under `out_dir` from every `*.jsonl` found under
/// `metrics_dir`. Rows with missing fields are skipped with a warning; an
/// empty input directory produces empty tables.
pub fn report(metrics_dir: &Path, out_dir: &Path) -> Result<ReportSummary, AnalysisError> {
    std::fs::create_dir_all(out_dir).map_err(|e| AnalysisError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut files = Vec::new();
    collect_jsonl_files(metrics_dir, &mut files);

    let mut summary = ReportSummary::default();
    let mut members: BTreeMap<MemberKey, MemberData> = BTreeMap::new();

    for file in files {
        let raw = std::fs::read_to_string(&file).map_err(|e| AnalysisError::Io {
            path: file.display().to_string(),
            source: e,
        })?;
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: MetricsRow = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(e) => {
                    summary.rows_skipped += 1;
                    summary.warnings.push(format!(
                        "{}:{}: skipped unparseable row: {e}",
                        file.display(),
                        lineno + 1
                    ));
                    continue;
                }
            };
            summary.rows_read += 1;
            let key = MemberKey {
                class: row.class.clone().unwrap_or_else(|| "default".into()),
                n_layers: row.n_layers,
                d_ff: row.d_ff,
            };
            let entry = members.entry(key).or_default();
            if entry.d_model.is_none() {
                entry.d_model = row.d_model;
            }
            match row.split.as_str() {
                "pretrain_val" => {
                    let Some(ppl) = row.ppl else {
                        summary.rows_skipped += 1;
                        summary.warnings.push(format!(
                            "{}:{}: pretrain_val row without ppl skipped",
                            file.display(),
                            lineno + 1
                        ));
                        continue;
                    };
                    let slot = entry
                        .final_ppl
                        .entry(row.run_id.clone())
                        .or_insert((0, f64::NAN));
                    if row.step >= slot.0 {
                        *slot = (row.step, ppl);
                    }
                }
                "generalization" => {
                    let Some(em) = row.exact_match else {
                        summary.rows_skipped += 1;
                        summary.warnings.push(format!(
                            "{}:{}: generalization row without exact_match skipped",
                            file.display(),
                            lineno + 1
                        ));
                        continue;
                    };
                    let task = row.task.clone().unwrap_or_else(|| "task".into());
                    let slot = entry
                        .task_final
                        .entry(task)
                        .or_default()
                        .entry(row.run_id.clone())
                        .or_default();
                    if row.step >= slot.step {
                        *slot = TaskFinal {
                            step: row.step,
                            exact_match: em,
                            lexical: row.exact_match_lexical,
                            structural: row.exact_match_structural,
                        };
                    }
                }
                // id_validation rows feed the trajectory analyses, not the
                // summary tables.
                _ => {}
            }
        }
    }

    // Per-class aggregates.
    let mut classes: BTreeMap<String, Vec<(&MemberKey, &MemberData)>> = BTreeMap::new();
    for (k, v) in &members {
        classes.entry(k.class.clone()).or_default().push((k, v));
    }
    let mut task_names: Vec<String> = members
        .values()
        .flat_map(|m| m.task_final.keys().cloned())
        .collect();
    task_names.sort();
    task_names.dedup();

    let mut class_table = vec![format!(
        "class,n_layers,d_ff,ff_ratio,val_ppl,val_ppl_ci95,best_in_class,{}",
        task_names
            .iter()
            .map(|t| format!("{t}_exact_match,{t}_ci95"))
            .collect::<Vec<_>>()
            .join(",")
    )];
    let mut rel_depth = vec!["class,n_layers,rel_ppl".to_string()];
    let mut rel_ratio = vec!["class,n_layers,ff_ratio,rel_ppl,beyond_injective".to_string()];
    let mut gen_by_type = vec![
        "class,task,n_layers,exact_match_lexical,lexical_ci95,exact_match_structural,structural_ci95"
            .to_string(),
    ];

    for (class, rows) in &classes {
        // Mean final perplexity per member over seed replicates.
        let mut ppl_by_member: Vec<(usize, usize, Option<usize>, f64, f64)> = Vec::new();
        for (key, data) in rows {
            if data.final_ppl.is_empty() {
                continue;
            }
            let vals: Vec<f64> = data.final_ppl.values().map(|&(_, p)| p).collect();
            let (mean, ci) = mean_ci(&vals);
            ppl_by_member.push((key.n_layers, key.d_ff, data.d_model, mean, ci));
        }
        ppl_by_member.sort_by_key(|&(n, ..)| n);
        if ppl_by_member.is_empty() {
            continue;
        }

        // Best in class: lowest mean perplexity, ties to the deeper model.
        let mut best_idx = 0;
        for (i, m) in ppl_by_member.iter().enumerate() {
            if m.3 < ppl_by_member[best_idx].3
                || (m.3 == ppl_by_member[best_idx].3 && m.0 > ppl_by_member[best_idx].0)
            {
                best_idx = i;
            }
        }
        summary.best_ppl_by_class.insert(
            class.clone(),
            (ppl_by_member[best_idx].0, ppl_by_member[best_idx].3),
        );

        let rel = relative_perplexity(
            &ppl_by_member
                .iter()
                .map(|&(n, _, _, p, _)| (n, p))
                .collect::<Vec<_>>(),
        )?;
        summary
            .shallow_rel_ppl_by_class
            .insert(class.clone(), rel[0].1);

        for (i, &(n_layers, d_ff, d_model, mean, ci)) in ppl_by_member.iter().enumerate() {
            let ratio = d_model.map(|d| d as f64 / d_ff as f64);
            let key = MemberKey {
                class: class.clone(),
                n_layers,
                d_ff,
            };
            let data = &members[&key];
            let mut line = format!(
                "{class},{n_layers},{d_ff},{},{mean:.1},{ci:.2},{}",
                ratio.map(|r| format!("{r:.4}")).unwrap_or_default(),
                i == best_idx,
            );
            for task in &task_names {
                match data.task_final.get(task) {
                    Some(finals) if !finals.is_empty() => {
                        let vals: Vec<f64> =
                            finals.values().map(|f| f.exact_match * 100.0).collect();
                        let (m, c) = mean_ci(&vals);
                        line.push_str(&format!(",{m:.1},{c:.1}"));
                    }
                    _ => line.push_str(",,"),
                }
            }
            class_table.push(line);

            rel_depth.push(format!("{class},{n_layers},{}", rel[i].1));
            if let Some(r) = ratio {
                rel_ratio.push(format!(
                    "{class},{n_layers},{r},{},{}",
                    rel[i].1,
                    r > 1.0
                ));
            } else {
                summary.warnings.push(format!(
                    "{class}/{n_layers}: no d_model in rows; omitted from ratio curve"
                ));
            }

            for task in &task_names {
                if let Some(finals) = data.task_final.get(task) {
                    let lex: Vec<f64> = finals
                        .values()
                        .filter_map(|f| f.lexical.map(|v| v * 100.0))
                        .collect();
                    let st: Vec<f64> = finals
                        .values()
                        .filter_map(|f| f.structural.map(|v| v * 100.0))
                        .collect();
                    if lex.is_empty() && st.is_empty() {
                        continue;
                    }
                    let (lm, lc) = if lex.is_empty() { (f64::NAN, 0.0) } else { mean_ci(&lex) };
                    let (sm, sc) = if st.is_empty() { (f64::NAN, 0.0) } else { mean_ci(&st) };
                    gen_by_type.push(format!(
                        "{class},{task},{n_layers},{lm:.1},{lc:.1},{sm:.1},{sc:.1}"
                    ));
                }
            }
        }
    }

    write_lines(&out_dir.join("class_table.csv"), &class_table)?;
    write_lines(&out_dir.join("rel_ppl_by_depth.csv"), &rel_depth)?;
    write_lines(&out_dir.join("rel_ppl_by_ratio.csv"), &rel_ratio)?;
    write_lines(&out_dir.join("gen_by_type.csv"), &gen_by_type)?;
    Ok(summary)
}
