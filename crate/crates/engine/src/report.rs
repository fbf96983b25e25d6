//! Evaluation reports: per-structure CSV rows and a JSON document with aggregates.

use std::path::{Path, PathBuf};

use kipa_core::metrics::{evaluate_dataset, DatasetReport};
use kipa_core::volume::LabelVolume;
use serde::Serialize;

use crate::error::{EngineError, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::nifti::{self, ReadOptions};

const PRED_ROLES: [&str; 2] = ["_seg", "_pred"];
const TRUTH_ROLES: [&str; 3] = ["_truth", "_label", "_gt"];

#[derive(Debug, Serialize)]
struct Row<'a> {
    case_id: &'a str,
    structure: &'static str,
    dsc: f64,
    /// Empty cell for the `∞` sentinel.
    hd_mm: Option<f64>,
    avd_mm: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn to_csv(report: &DatasetReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for case in &report.cases {
        for s in &case.structures {
            w.serialize(Row {
                case_id: &case.case_id,
                structure: s.structure.name(),
                dsc: s.dsc,
                hd_mm: finite(s.hd),
                avd_mm: finite(s.avd),
            })
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        }
    }
    w.into_inner().map_err(|e| EngineError::Invalid(e.to_string()))
}

/// Writes `metrics.csv` and `metrics.json` into `out`.
pub fn write_report(out: &Path, report: &DatasetReport) -> Result<()> {
    write_atomic(&out.join("metrics.csv"), &to_csv(report)?)?;
    write_json(&out.join("metrics.json"), report)
}

/// Volumes in `dir` whose role suffix is one of `roles`, or that carry no
/// role suffix at all.
fn role_volumes(dir: &Path, roles: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let all = crate::fsutil::volumes_by_case(dir)?;
    let stem = |p: &Path| {
        let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        n.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
    };
    let mut out: Vec<(String, PathBuf)> = all
        .into_iter()
        .filter(|(id, p)| {
            let s = stem(p);
            s == *id || roles.iter().any(|r| s == format!("{id}{r}"))
        })
        .collect();
    out.dedup_by(|a, b| a.0 == b.0);
    Ok(out)
}

/// Case ids present in both directories, with prediction and truth paths.
pub fn match_cases(pred_dir: &Path, truth_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let preds = role_volumes(pred_dir, &PRED_ROLES)?;
    let truths = role_volumes(truth_dir, &TRUTH_ROLES)?;
    Ok(preds
        .into_iter()
        .filter_map(|(id, p)| {
            let t = truths.iter().find(|(tid, _)| *tid == id)?;
            Some((id, p, t.1.clone()))
        })
        .collect())
}

/// Loads matched pairs and evaluates them. Unreadable files become per-case errors.
pub fn evaluate_dirs(pred_dir: &Path, truth_dir: &Path, opts: &ReadOptions) -> Result<DatasetReport> {
    let matched = match_cases(pred_dir, truth_dir)?;
    if matched.is_empty() {
        return Err(EngineError::Invalid(format!(
            "no case ids in common between {} and {}",
            pred_dir.display(),
            truth_dir.display()
        )));
    }
    let mut loaded: Vec<(String, LabelVolume, LabelVolume)> = Vec::new();
    let mut load_errors = Vec::new();
    for (id, p, t) in matched {
        let both = nifti::read_labels(&p, opts).and_then(|a| Ok((a, nifti::read_labels(&t, opts)?)));
        match both {
            Ok((a, b)) => loaded.push((id, a, b)),
            Err(e) => load_errors.push(kipa_core::metrics::CaseFailure {
                case_id: id,
                message: e.to_string(),
            }),
        }
    }
    let pairs: Vec<_> = loaded.iter().map(|(id, a, b)| (id.as_str(), a, b)).collect();
    let mut report = evaluate_dataset(&pairs);
    report.errors.extend(load_errors);
    report.errors.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(report)
}
