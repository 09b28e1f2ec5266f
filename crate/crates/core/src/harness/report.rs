use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::commands::{EVAL_FILE, EVAL_HEADER};
use super::{io_err, HarnessError};

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_HEADER: &str = "regime,pipeline,rgb,flow,rgb_flow";
const PIPELINES: [&str; 2] = ["baseline", "enhanced"];

/// Accuracies rounded to the three decimals both outputs print.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub regime: String,
    pub pipeline: String,
    pub rgb: String,
    pub flow: String,
    pub fused: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub text: String,
    pub csv: String,
}

fn find_evals(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_err(dir, err)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_evals(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == EVAL_FILE) {
            found.push(path);
        }
    }
    Ok(())
}

fn parse_eval(path: &Path) -> Result<Vec<[String; 5]>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |why: &str| HarnessError::MissingRunData(format!("{}: {why}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_HEADER) {
        return Err(bad("unexpected header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let mut row: [String; 5] = Default::default();
            for (i, v) in f.iter().enumerate() {
                row[i] = if i < 2 {
                    v.to_string()
                } else {
                    let x: f64 = v.parse().map_err(|_| bad("non-numeric accuracy"))?;
                    format!("{x:.3}")
                };
            }
            Ok(row)
        })
        .collect()
}

/// Collects every `eval.csv` under `dir` into a baseline-versus-enhanced
/// table per regime and writes it as `report.txt` and `report.csv`.
/// Every regime needs both pipelines.
pub fn report(dir: &Path) -> Result<Report, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::MissingRunData(format!("{} is not a directory", dir.display())));
    }
    let mut evals = Vec::new();
    find_evals(dir, &mut evals)?;
    if evals.is_empty() {
        return Err(HarnessError::MissingRunData(format!("no {EVAL_FILE} under {}", dir.display())));
    }
    let mut table: BTreeMap<String, BTreeMap<String, ([String; 3], PathBuf)>> = BTreeMap::new();
    for path in &evals {
        for [regime, pipeline, rgb, flow, fused] in parse_eval(path)? {
            let slot = table.entry(regime.clone()).or_default();
            if let Some((_, first)) = slot.get(&pipeline) {
                return Err(HarnessError::MissingRunData(format!(
                    "{regime}/{pipeline} appears in both {} and {}",
                    first.display(),
                    path.display()
                )));
            }
            slot.insert(pipeline, ([rgb, flow, fused], path.clone()));
        }
    }
    let missing: Vec<String> = table
        .iter()
        .flat_map(|(regime, slot)| {
            PIPELINES
                .iter()
                .filter(|p| !slot.contains_key(**p))
                .map(move |p| format!("{regime}/{p}"))
        })
        .collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingRunData(missing.join(", ")));
    }

    let mut rows = Vec::new();
    for (regime, slot) in &table {
        for p in PIPELINES {
            let [rgb, flow, fused] = slot[p].0.clone();
            rows.push(ReportRow {
                regime: regime.clone(),
                pipeline: p.to_string(),
                rgb,
                flow,
                fused,
            });
        }
    }
    let width = rows.iter().map(|r| r.regime.len()).max().unwrap_or(0).max("regime".len());
    let mut text = format!("{:width$}  {:8}  {:>5}  {:>5}  {:>8}\n", "regime", "pipeline", "RGB", "Flow", "RGB+Flow");
    let mut csv = format!("{REPORT_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:width$}  {:8}  {:>5}  {:>5}  {:>8}",
            r.regime, r.pipeline, r.rgb, r.flow, r.fused
        );
        let _ = writeln!(csv, "{},{},{},{},{}", r.regime, r.pipeline, r.rgb, r.flow, r.fused);
    }
    for (name, body) in [(REPORT_TXT, &text), (REPORT_CSV, &csv)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(Report { rows, text, csv })
}
