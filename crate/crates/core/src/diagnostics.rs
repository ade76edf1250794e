//! Distribution diagnostics for normalized image and text similarity scores:
//! summary statistics, smoothed histograms and KL divergence.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fusion::{inner_product_scores, normalize_scores, sweep_embeddings, FusionError};
use crate::model::{FusionConfig, Modality, QueryRecord};
use crate::store::IndexDirectory;

/// Additive smoothing applied to each bin's probability mass.
pub const SMOOTHING: f64 = 1e-9;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("no values")]
    EmptyInput,
    #[error("histogram needs at least one bin")]
    ZeroBins,
    #[error("invalid range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("histograms have different bin edges")]
    BinMismatch,
    #[error("no queries")]
    NoQueries,
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

pub fn score_stats(values: &[f64]) -> Result<ScoreStats, DiagnosticsError> {
    if values.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Ok(ScoreStats {
        mean,
        std: var.sqrt(),
        min,
        max,
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn num_bins(&self) -> usize {
        self.densities.len()
    }
}

/// Equal-width histogram over `[lo, hi]`. Bins are left-closed, so a value
/// on an interior edge lands in the upper bin; values outside the range are
/// clamped into the end bins. Probabilities get [`SMOOTHING`] added before
/// renormalization.
pub fn build_histogram(
    values: &[f64],
    num_bins: usize,
    (lo, hi): (f64, f64),
) -> Result<Histogram, DiagnosticsError> {
    if num_bins == 0 {
        return Err(DiagnosticsError::ZeroBins);
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(DiagnosticsError::BadRange(lo, hi));
    }
    let width = (hi - lo) / num_bins as f64;
    let mut counts = vec![0u64; num_bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(num_bins - 1)
        };
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    let mut densities: Vec<f64> = counts.iter().map(|&c| c as f64 / n + SMOOTHING).collect();
    let total: f64 = densities.iter().sum();
    densities.iter_mut().for_each(|d| *d /= total);
    let bin_edges = (0..=num_bins)
        .map(|i| {
            if i == num_bins {
                hi
            } else {
                lo + i as f64 * width
            }
        })
        .collect();
    Ok(Histogram {
        bin_edges,
        densities,
    })
}

/// `sum_b p_b ln(p_b / q_b)` in nats.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64, DiagnosticsError> {
    if p.bin_edges != q.bin_edges {
        return Err(DiagnosticsError::BinMismatch);
    }
    let kl: f64 = p
        .densities
        .iter()
        .zip(&q.densities)
        .filter(|(&pb, _)| pb > 0.0)
        .map(|(&pb, &qb)| pb * (pb / qb).ln())
        .sum();
    // Gibbs' inequality; clamp rounding residue below zero.
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegenerateQuery {
    pub query_id: String,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub num_queries: usize,
    pub num_pages: usize,
    pub image_stats: ScoreStats,
    pub text_stats: ScoreStats,
    pub image_hist: Histogram,
    pub text_hist: Histogram,
    /// KL(Sim-I || Sim-T) in nats.
    pub kl_image_text: f64,
    /// KL(Sim-T || Sim-I) in nats.
    pub kl_text_image: f64,
    /// Queries whose sigmoid scores were constant in one modality.
    pub degenerate: Vec<DegenerateQuery>,
}

impl DivergenceReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin_left,bin_right,density_sim_i,density_sim_t")?;
        for b in 0..self.image_hist.num_bins() {
            writeln!(
                w,
                "{},{},{},{}",
                self.image_hist.bin_edges[b],
                self.image_hist.bin_edges[b + 1],
                self.image_hist.densities[b],
                self.text_hist.densities[b]
            )?;
        }
        w.flush()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_queries": self.num_queries,
            "num_pages": self.num_pages,
            "bins": self.image_hist.num_bins(),
            "range": [self.image_hist.bin_edges[0], *self.image_hist.bin_edges.last().unwrap()],
            "kl_image_text_nats": self.kl_image_text,
            "kl_text_image_nats": self.kl_text_image,
            "sim_i": self.image_stats,
            "sim_t": self.text_stats,
            "sigma_zero": self.degenerate,
        })
    }
}

/// Pools the per-query z-scored image and text similarities over every
/// (query, page) pair and compares their distributions on a shared range.
///
/// `cfg.mode` only selects which query channels feed the two sweeps
/// (separate channels for ensemble mode, the shared embedding otherwise).
pub fn modality_divergence_report(
    index: &IndexDirectory,
    queries: &[QueryRecord],
    cfg: &FusionConfig,
    num_bins: usize,
) -> Result<DivergenceReport, DiagnosticsError> {
    if queries.is_empty() {
        return Err(DiagnosticsError::NoQueries);
    }
    if num_bins == 0 {
        return Err(DiagnosticsError::ZeroBins);
    }
    let mut per_query = queries
        .par_iter()
        .map(|q| {
            let (qi, qt) = sweep_embeddings(q, cfg.mode)?;
            let si = normalize_scores(Modality::Image, inner_product_scores(qi, &index.images)?);
            let st = normalize_scores(Modality::Text, inner_product_scores(qt, &index.texts)?);
            Ok((q.query_id.clone(), si, st))
        })
        .collect::<Result<Vec<_>, FusionError>>()?;
    per_query.sort_by(|a, b| a.0.cmp(&b.0));

    let mut image = Vec::with_capacity(queries.len() * index.len());
    let mut text = Vec::with_capacity(queries.len() * index.len());
    let mut degenerate = Vec::new();
    for (qid, si, st) in &per_query {
        image.extend_from_slice(&si.zscored);
        text.extend_from_slice(&st.zscored);
        for s in [si, st] {
            if s.sigma == 0.0 {
                degenerate.push(DegenerateQuery {
                    query_id: qid.clone(),
                    modality: s.modality,
                });
            }
        }
    }
    let image_stats = score_stats(&image)?;
    let text_stats = score_stats(&text)?;
    let mut lo = image_stats.min.min(text_stats.min);
    let mut hi = image_stats.max.max(text_stats.max);
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    let image_hist = build_histogram(&image, num_bins, (lo, hi))?;
    let text_hist = build_histogram(&text, num_bins, (lo, hi))?;
    Ok(DivergenceReport {
        num_queries: queries.len(),
        num_pages: index.len(),
        kl_image_text: kl_divergence(&image_hist, &text_hist)?,
        kl_text_image: kl_divergence(&text_hist, &image_hist)?,
        image_stats,
        text_stats,
        image_hist,
        text_hist,
        degenerate,
    })
}
