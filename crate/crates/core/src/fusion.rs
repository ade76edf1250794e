//! Online scoring: per-modality inner products, sigmoid and per-query
//! z-score normalization, the two fusion rules and deterministic top-k.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    FusionConfig, FusionMode, Modality, ModelError, QueryRecord, RankedEntry, RankedResult,
    ScoreVector, IMAGE_QUERY_CHANNEL, TEXT_QUERY_CHANNEL,
};
use crate::store::{IndexDirectory, PackedMatrix};

/// Below this population standard deviation a modality is treated as
/// constant and contributes all-zero z-scores.
pub const SIGMA_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("query dimension {query} does not match index dimension {index}")]
    DimMismatch { query: usize, index: usize },
    #[error("score vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("mode {mode} requires query channel `{channel}`")]
    MissingChannel {
        mode: FusionMode,
        channel: &'static str,
    },
    #[error("duplicate query id `{0}`")]
    DuplicateQuery(String),
    #[error(transparent)]
    Config(#[from] ModelError),
}

/// Inner product of two equal-length `f32` slices, accumulated in `f64`.
///
/// Eight independent accumulators keep the loop vectorizable; they are
/// combined in a fixed order so the result is reproducible.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `z_i = <query, row_i>` for every row of `matrix`.
pub fn inner_product_scores(query: &[f32], matrix: &PackedMatrix) -> Result<Vec<f64>, FusionError> {
    if query.len() != matrix.dim() {
        return Err(FusionError::DimMismatch {
            query: query.len(),
            index: matrix.dim(),
        });
    }
    Ok(matrix.rows().map(|row| dot(query, row)).collect())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic squashing of raw scores into (0, 1).
///
/// Values saturate to exactly 0 or 1 in `f64` once `|z|` exceeds roughly 37.
pub fn sigmoid_normalize(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&z| sigmoid(z)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZScores {
    pub values: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

/// Standardizes with the population mean and standard deviation (divide by
/// `M`). A constant input (sigma <= [`SIGMA_EPSILON`]) yields all zeros and
/// `sigma == 0`.
pub fn zscore_normalize(values: &[f64]) -> ZScores {
    let m = values.len();
    if m == 0 {
        return ZScores {
            values: Vec::new(),
            mu: 0.0,
            sigma: 0.0,
        };
    }
    if values.iter().all(|&x| x == values[0]) {
        return ZScores {
            values: vec![0.0; m],
            mu: values[0],
            sigma: 0.0,
        };
    }
    let n = m as f64;
    // Corrected two-pass mean: the second pass removes the rounding error of
    // the first.
    let mut mu = values.iter().sum::<f64>() / n;
    mu += values.iter().map(|&x| x - mu).sum::<f64>() / n;
    let var = values.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma <= SIGMA_EPSILON {
        return ZScores {
            values: vec![0.0; m],
            mu,
            sigma: 0.0,
        };
    }
    ZScores {
        values: values.iter().map(|&x| (x - mu) / sigma).collect(),
        mu,
        sigma,
    }
}

/// Runs the sigmoid and z-score stages over one modality's raw scores.
pub fn normalize_scores(modality: Modality, raw: Vec<f64>) -> ScoreVector {
    let sigmoid = sigmoid_normalize(&raw);
    let z = zscore_normalize(&sigmoid);
    ScoreVector {
        modality,
        raw,
        sigmoid,
        zscored: z.values,
        mu: z.mu,
        sigma: z.sigma,
    }
}

fn blend(
    name: &'static str,
    text: &[f64],
    image: &[f64],
    weight: f64,
) -> Result<Vec<f64>, FusionError> {
    crate::model::check_unit(name, weight)?;
    if text.len() != image.len() {
        return Err(FusionError::LengthMismatch(text.len(), image.len()));
    }
    Ok(text
        .iter()
        .zip(image)
        .map(|(&t, &i)| weight * t + (1.0 - weight) * i)
        .collect())
}

/// `s_i = alpha * z_text_i + (1 - alpha) * z_image_i` on raw scores.
pub fn fuse_linear(text: &[f64], image: &[f64], alpha: f64) -> Result<Vec<f64>, FusionError> {
    blend("alpha", text, image, alpha)
}

/// `s_i = beta * z~_text_i + (1 - beta) * z~_image_i` on z-scored inputs.
pub fn fuse_ucmr(text_z: &[f64], image_z: &[f64], beta: f64) -> Result<Vec<f64>, FusionError> {
    blend("beta", text_z, image_z, beta)
}

#[inline]
fn rank_key(s: f64) -> f64 {
    // Fold -0.0 into 0.0 so signed zeros tie and fall through to the index.
    if s == 0.0 {
        0.0
    } else {
        s
    }
}

#[inline]
fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    rank_key(scores[b])
        .total_cmp(&rank_key(scores[a]))
        .then(a.cmp(&b))
}

/// Indices of the `min(k, M)` best scores: descending score, ties by lower
/// index.
pub fn rank_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
        order.truncate(k);
    }
    order.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    order
}

/// Query vectors for the image sweep and the text sweep under `mode`.
pub fn sweep_embeddings(
    query: &QueryRecord,
    mode: FusionMode,
) -> Result<(&[f32], &[f32]), FusionError> {
    let missing = |channel| FusionError::MissingChannel { mode, channel };
    match mode {
        FusionMode::EnsembleUcmr => {
            let img = query
                .channel(IMAGE_QUERY_CHANNEL)
                .ok_or_else(|| missing(IMAGE_QUERY_CHANNEL))?;
            let txt = query
                .channel(TEXT_QUERY_CHANNEL)
                .ok_or_else(|| missing(TEXT_QUERY_CHANNEL))?;
            Ok((img.values(), txt.values()))
        }
        _ => {
            let shared = query
                .shared_embedding()
                .ok_or_else(|| missing(IMAGE_QUERY_CHANNEL))?;
            Ok((shared.values(), shared.values()))
        }
    }
}

fn check_dim(q: &[f32], index: &IndexDirectory) -> Result<(), FusionError> {
    if q.len() != index.dim() {
        return Err(FusionError::DimMismatch {
            query: q.len(),
            index: index.dim(),
        });
    }
    Ok(())
}

/// Full per-page scoring of one query, before truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub fused: Vec<f64>,
    /// Per-page image scores as reported (raw or z-scored); `None` when the
    /// mode never sweeps the image matrix.
    pub image: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
    pub image_stats: Option<ScoreVector>,
    pub text_stats: Option<ScoreVector>,
}

/// Scores every page for `query`. Single-modality modes sweep only the
/// matrix they rank by.
pub fn score_query(
    query: &QueryRecord,
    index: &IndexDirectory,
    cfg: &FusionConfig,
) -> Result<QueryScores, FusionError> {
    cfg.validate()?;
    let (qi, qt) = sweep_embeddings(query, cfg.mode)?;
    check_dim(qi, index)?;
    check_dim(qt, index)?;
    Ok(match cfg.mode {
        FusionMode::ImageOnly => {
            let z = inner_product_scores(qi, &index.images)?;
            QueryScores {
                fused: z.clone(),
                image: Some(z),
                text: None,
                image_stats: None,
                text_stats: None,
            }
        }
        FusionMode::TextOnly => {
            let z = inner_product_scores(qt, &index.texts)?;
            QueryScores {
                fused: z.clone(),
                image: None,
                text: Some(z),
                image_stats: None,
                text_stats: None,
            }
        }
        FusionMode::RawLinear => {
            let zi = inner_product_scores(qi, &index.images)?;
            let zt = inner_product_scores(qt, &index.texts)?;
            QueryScores {
                fused: fuse_linear(&zt, &zi, cfg.alpha)?,
                image: Some(zi),
                text: Some(zt),
                image_stats: None,
                text_stats: None,
            }
        }
        FusionMode::Ucmr | FusionMode::EnsembleUcmr => {
            let si = normalize_scores(Modality::Image, inner_product_scores(qi, &index.images)?);
            let st = normalize_scores(Modality::Text, inner_product_scores(qt, &index.texts)?);
            QueryScores {
                fused: fuse_ucmr(&st.zscored, &si.zscored, cfg.beta)?,
                image: Some(si.zscored.clone()),
                text: Some(st.zscored.clone()),
                image_stats: Some(si),
                text_stats: Some(st),
            }
        }
    })
}

/// Ranks the corpus for one query and keeps the top `cfg.top_k` pages.
///
/// For single-modality modes the other modality's raw score is filled in
/// for the returned pages only.
pub fn retrieve(
    query: &QueryRecord,
    index: &IndexDirectory,
    cfg: &FusionConfig,
) -> Result<RankedResult, FusionError> {
    let scores = score_query(query, index, cfg)?;
    let (qi, qt) = sweep_embeddings(query, cfg.mode)?;
    let top = rank_top_k(&scores.fused, cfg.top_k);
    let entries = top
        .into_iter()
        .enumerate()
        .map(|(r, idx)| RankedEntry {
            rank: r + 1,
            index: idx,
            page_id: index.page_ids()[idx].clone(),
            fused_score: scores.fused[idx],
            image_score: match &scores.image {
                Some(v) => v[idx],
                None => dot(qi, index.images.row(idx)),
            },
            text_score: match &scores.text {
                Some(v) => v[idx],
                None => dot(qt, index.texts.row(idx)),
            },
        })
        .collect();
    Ok(RankedResult {
        query_id: query.query_id.clone(),
        mode: cfg.mode,
        entries,
    })
}

/// Retrieves every query in parallel on the current rayon pool. Results are
/// ordered by `query_id`.
pub fn retrieve_all(
    queries: &[QueryRecord],
    index: &IndexDirectory,
    cfg: &FusionConfig,
) -> Result<Vec<RankedResult>, FusionError> {
    let mut results = queries
        .par_iter()
        .map(|q| retrieve(q, index, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    if let Some(w) = results.windows(2).find(|w| w[0].query_id == w[1].query_id) {
        return Err(FusionError::DuplicateQuery(w[0].query_id.clone()));
    }
    Ok(results)
}
