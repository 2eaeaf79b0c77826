use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{BaselineReport, RunManifest};
use crate::error::{argument, Result};
use crate::metrics::MetricsReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Cascade,
    Retrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub kind: RowKind,
    pub fid_l: f64,
    pub acc: Option<f64>,
    pub wall_time_s: f64,
    /// `T_baseline / T_row`.
    pub saving_factor: f64,
}

/// Run name, kind, FID_l, ACC and wall time of one table row.
pub type RowMeasures = (String, RowKind, f64, Option<f64>, f64);

/// Rows of a manifest: its cascade run, plus `<name>/retrain` when the run
/// carries a retraining baseline.
pub fn manifest_rows(manifest: &RunManifest) -> Result<Vec<RowMeasures>> {
    let post: MetricsReport = serde_json::from_slice(&std::fs::read(manifest.artifact("report_post")?)?)?;
    let outcome: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest.artifact("outcome")?)?)?;
    let t = outcome["wall_time_s"].as_f64().unwrap_or(post.wall_time_s);
    let mut rows = vec![(manifest.name.clone(), RowKind::Cascade, post.fid_l, post.acc, t)];
    if let Some(path) = manifest.artifacts.get("baseline_report") {
        let b: BaselineReport = serde_json::from_slice(&std::fs::read(path)?)?;
        rows.push((format!("{}/retrain", manifest.name), RowKind::Retrain, b.report.fid_l, b.report.acc, b.wall_time_s));
    }
    Ok(rows)
}

/// Builds the comparison table. The baseline row is `baseline` when given,
/// else the first retraining row, else the first row.
pub fn compare_manifests(manifests: &[RunManifest], baseline: Option<&str>) -> Result<Vec<ComparisonRow>> {
    if manifests.len() < 2 {
        return Err(argument("comparison needs at least two run manifests"));
    }
    if let Some(m) = manifests.iter().find(|m| m.dataset_hash != manifests[0].dataset_hash) {
        return Err(argument(format!(
            "run `{}` used a different dataset than run `{}`",
            m.name, manifests[0].name
        )));
    }
    let mut raw = Vec::new();
    for m in manifests {
        raw.extend(manifest_rows(m)?);
    }
    let base = match baseline {
        Some(name) => raw
            .iter()
            .position(|r| r.0 == name)
            .ok_or_else(|| argument(format!("no row named `{name}`")))?,
        None => raw.iter().position(|r| r.1 == RowKind::Retrain).unwrap_or(0),
    };
    let t_base = raw[base].4;
    Ok(raw
        .into_iter()
        .map(|(run, kind, fid_l, acc, wall_time_s)| ComparisonRow {
            run,
            kind,
            fid_l,
            acc,
            wall_time_s,
            saving_factor: t_base / wall_time_s,
        })
        .collect())
}

pub fn rows_to_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("run,kind,fid_l,acc,wall_time_s,saving_factor\n");
    for r in rows {
        let kind = match r.kind {
            RowKind::Cascade => "cascade",
            RowKind::Retrain => "retrain",
        };
        let acc = r.acc.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{kind},{},{acc},{},{}\n", r.run, r.fid_l, r.wall_time_s, r.saving_factor));
    }
    s
}

/// Loads manifests, writes the CSV table to `out`, and returns its rows.
pub fn compare_runs(manifest_paths: &[impl AsRef<Path>], baseline: Option<&str>, out: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    let manifests = manifest_paths.iter().map(RunManifest::load).collect::<Result<Vec<_>>>()?;
    let rows = compare_manifests(&manifests, baseline)?;
    std::fs::write(out, rows_to_csv(&rows))?;
    Ok(rows)
}
