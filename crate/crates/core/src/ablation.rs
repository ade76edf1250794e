//! Side-by-side comparison of fusion modes and text weights over one index
//! and query set.

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::fusion::{retrieve_all, FusionError};
use crate::metrics::{evaluate_run, Metric, MetricError, Qrels};
use crate::model::{FusionConfig, FusionMode, QueryRecord, DEFAULT_BETA};
use crate::run_file::RunLine;
use crate::store::IndexDirectory;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("invalid sweep `{0}` (expected LO:HI:STEP with 0 <= LO <= HI <= 1 and STEP > 0)")]
    BadSweep(String),
    #[error("no modes requested")]
    NoModes,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Parses `LO:HI:STEP` into the inclusive grid `LO, LO+STEP, ..., HI`.
pub fn parse_sweep(text: &str) -> Result<Vec<f64>, AblationError> {
    let bad = || AblationError::BadSweep(text.to_string());
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || !step.is_finite() || step <= 0.0 {
        return Err(bad());
    }
    // Count steps on an integer grid so accumulated rounding cannot drop HI.
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| (lo + i as f64 * step).min(hi)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: FusionMode,
    /// Text weight: alpha for raw-linear, beta for the normalized modes.
    /// Ignored by single-modality modes.
    pub weight: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub metrics: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "mode\tweight\t{}", self.metrics.join("\t"))?;
        for row in &self.rows {
            let vals: Vec<String> = row.values.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}\t{}\t{}", row.mode, row.weight, vals.join("\t"))?;
        }
        w.flush()
    }

    pub fn value(&self, mode: FusionMode, weight: f64, metric: Metric) -> Option<f64> {
        let col = self.metrics.iter().position(|m| *m == metric.to_string())?;
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.weight == weight)
            .map(|r| r.values[col])
    }
}

fn to_run_lines(results: &[crate::model::RankedResult]) -> Vec<RunLine> {
    results
        .iter()
        .flat_map(|res| {
            res.entries.iter().map(move |e| RunLine {
                query_id: res.query_id.clone(),
                page_id: e.page_id.clone(),
                rank: e.rank,
                fused_score: e.fused_score,
                image_score: e.image_score,
                text_score: e.text_score,
                mode: res.mode,
            })
        })
        .collect()
}

/// One metric row per (mode, weight). Retrieval depth is the largest metric
/// cutoff. With no weights given, the default text weight is used.
pub fn run_ablation(
    index: &IndexDirectory,
    queries: &[QueryRecord],
    qrels: &Qrels,
    modes: &[FusionMode],
    weights: &[f64],
    metrics: &[Metric],
) -> Result<AblationTable, AblationError> {
    if modes.is_empty() {
        return Err(AblationError::NoModes);
    }
    if metrics.is_empty() {
        return Err(MetricError::NoMetrics.into());
    }
    let default_weights = [DEFAULT_BETA];
    let weights = if weights.is_empty() {
        &default_weights[..]
    } else {
        weights
    };
    let depth = metrics.iter().map(|m| m.cutoff()).max().unwrap_or(1);
    let mut rows = Vec::new();
    for &mode in modes {
        for &weight in weights {
            let cfg = FusionConfig::new(mode)
                .with_alpha(weight)
                .with_beta(weight)
                .with_top_k(depth);
            let results = retrieve_all(queries, index, &cfg)?;
            let report = evaluate_run(&to_run_lines(&results), qrels, metrics)?;
            rows.push(AblationRow {
                mode,
                weight,
                values: report.mean,
            });
        }
    }
    Ok(AblationTable {
        metrics: metrics.iter().map(Metric::to_string).collect(),
        rows,
    })
}
