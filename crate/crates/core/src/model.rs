//! Shared domain types: embeddings, pages, corpora, queries, fusion settings
//! and ranked results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Query embedding channel used against the image matrix in ensemble mode.
pub const IMAGE_QUERY_CHANNEL: &str = "image-query";
/// Query embedding channel used against the text matrix in ensemble mode.
pub const TEXT_QUERY_CHANNEL: &str = "text-query";

/// Embedding width produced by the reference encoders.
pub const DEFAULT_DIM: usize = 1152;
/// Number of pages handed to the generator by default.
pub const DEFAULT_TOP_K: usize = 3;
/// Weight of the text modality after normalization.
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("embedding must have at least one value")]
    EmptyEmbedding,
    #[error("embedding value at position {0} is not finite")]
    NonFinite(usize),
    #[error("{name} = {value} is outside [0, 1]")]
    WeightOutOfRange { name: &'static str, value: f64 },
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("unknown fusion mode `{0}` (expected image-only, text-only, raw-linear, ucmr or ensemble-ucmr)")]
    UnknownMode(String),
    #[error("query `{0}` carries no channel embedding")]
    NoChannels(String),
    #[error("unknown query channel `{0}`")]
    UnknownChannel(String),
}

/// A dense embedding. Values are stored as `f32`; all reductions over them
/// accumulate in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyEmbedding);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    /// Wraps values without checking them. [`validate_corpus`] will still
    /// flag non-finite entries.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// One document page: its image-side and text-side embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageEntry {
    pub page_id: String,
    pub doc_id: String,
    pub image_emb: EmbeddingVector,
    pub text_emb: EmbeddingVector,
}

/// Ordered collection of pages. The position of a page in `pages` is its
/// ingestion index, which breaks ranking ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub dim: usize,
    pub pages: Vec<PageEntry>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    EmptyCorpus,
    ZeroDim,
    DuplicatePageId {
        page_id: String,
        first: usize,
        second: usize,
    },
    DimMismatch {
        page_id: String,
        image_dim: usize,
        text_dim: usize,
        expected: usize,
    },
    NonFiniteValue {
        page_id: String,
        modality: Modality,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyCorpus => write!(f, "corpus has no pages"),
            Violation::ZeroDim => write!(f, "corpus dimension is zero"),
            Violation::DuplicatePageId {
                page_id,
                first,
                second,
            } => write!(
                f,
                "duplicate page_id `{page_id}` at positions {first} and {second}"
            ),
            Violation::DimMismatch {
                page_id,
                image_dim,
                text_dim,
                expected,
            } => write!(
                f,
                "page `{page_id}`: image dim {image_dim}, text dim {text_dim}, corpus dim {expected}"
            ),
            Violation::NonFiniteValue { page_id, modality } => {
                write!(f, "page `{page_id}`: non-finite value in {modality} embedding")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Checks every corpus invariant and reports all failures at once.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    if corpus.pages.is_empty() {
        violations.push(Violation::EmptyCorpus);
    }
    if corpus.dim == 0 {
        violations.push(Violation::ZeroDim);
    }
    let mut seen: HashMap<&str, usize> = HashMap::with_capacity(corpus.pages.len());
    for (idx, page) in corpus.pages.iter().enumerate() {
        if let Some(&first) = seen.get(page.page_id.as_str()) {
            violations.push(Violation::DuplicatePageId {
                page_id: page.page_id.clone(),
                first,
                second: idx,
            });
        } else {
            seen.insert(&page.page_id, idx);
        }
        let (di, dt) = (page.image_emb.dim(), page.text_emb.dim());
        if di != corpus.dim || dt != corpus.dim {
            violations.push(Violation::DimMismatch {
                page_id: page.page_id.clone(),
                image_dim: di,
                text_dim: dt,
                expected: corpus.dim,
            });
        }
        for (modality, emb) in [
            (Modality::Image, &page.image_emb),
            (Modality::Text, &page.text_emb),
        ] {
            if !emb.is_finite() {
                violations.push(Violation::NonFiniteValue {
                    page_id: page.page_id.clone(),
                    modality,
                });
            }
        }
    }
    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// A query with one or two channel embeddings and optional gold pages.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub channel_embs: BTreeMap<String, EmbeddingVector>,
    pub gold_page_ids: BTreeSet<String>,
}

impl QueryRecord {
    /// A query from a single unified encoder: both channels share `emb`.
    pub fn unified(query_id: impl Into<String>, emb: EmbeddingVector) -> Self {
        let mut channel_embs = BTreeMap::new();
        channel_embs.insert(IMAGE_QUERY_CHANNEL.to_string(), emb.clone());
        channel_embs.insert(TEXT_QUERY_CHANNEL.to_string(), emb);
        Self {
            query_id: query_id.into(),
            text: String::new(),
            channel_embs,
            gold_page_ids: BTreeSet::new(),
        }
    }

    pub fn channel(&self, name: &str) -> Option<&EmbeddingVector> {
        self.channel_embs.get(name)
    }

    /// The embedding used when one query vector is scored against both
    /// matrices: the image-query channel, else the text-query channel.
    pub fn shared_embedding(&self) -> Option<&EmbeddingVector> {
        self.channel(IMAGE_QUERY_CHANNEL)
            .or_else(|| self.channel(TEXT_QUERY_CHANNEL))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channel_embs.is_empty() {
            return Err(ModelError::NoChannels(self.query_id.clone()));
        }
        for name in self.channel_embs.keys() {
            if name != IMAGE_QUERY_CHANNEL && name != TEXT_QUERY_CHANNEL {
                return Err(ModelError::UnknownChannel(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Rank by raw query-image inner products.
    ImageOnly,
    /// Rank by raw query-text inner products.
    TextOnly,
    /// `alpha * z_text + (1 - alpha) * z_image` on raw inner products.
    RawLinear,
    /// Sigmoid, per-query z-score, then `beta`-weighted blend.
    Ucmr,
    /// As `Ucmr`, but each modality is scored with its own query channel.
    EnsembleUcmr,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::ImageOnly,
        FusionMode::TextOnly,
        FusionMode::RawLinear,
        FusionMode::Ucmr,
        FusionMode::EnsembleUcmr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ImageOnly => "image-only",
            FusionMode::TextOnly => "text-only",
            FusionMode::RawLinear => "raw-linear",
            FusionMode::Ucmr => "ucmr",
            FusionMode::EnsembleUcmr => "ensemble-ucmr",
        }
    }

    pub fn is_normalized(self) -> bool {
        matches!(self, FusionMode::Ucmr | FusionMode::EnsembleUcmr)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == lower)
            .ok_or_else(|| ModelError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Text weight for raw-linear fusion.
    pub alpha: f64,
    /// Text weight for normalized fusion.
    pub beta: f64,
    pub top_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Ucmr,
            alpha: 0.5,
            beta: DEFAULT_BETA,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl FusionConfig {
    pub fn new(mode: FusionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_top_k(mut self, top_k: usize) -> Self {
        self.top_k = top_k;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_unit("alpha", self.alpha)?;
        check_unit("beta", self.beta)?;
        if self.top_k == 0 {
            return Err(ModelError::ZeroTopK);
        }
        Ok(())
    }
}

pub(crate) fn check_unit(name: &'static str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::WeightOutOfRange { name, value })
    }
}

/// Per-query, per-modality scores at each stage of normalization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVector {
    pub modality: Modality,
    pub raw: Vec<f64>,
    pub sigmoid: Vec<f64>,
    pub zscored: Vec<f64>,
    pub mu: f64,
    /// Population standard deviation of `sigmoid`; exactly 0 when the
    /// degenerate fallback fired.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub rank: usize,
    /// Ingestion index of the page.
    pub index: usize,
    pub page_id: String,
    pub fused_score: f64,
    pub image_score: f64,
    pub text_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub query_id: String,
    pub mode: FusionMode,
    pub entries: Vec<RankedEntry>,
}

impl RankedResult {
    pub fn page_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.page_id.as_str()).collect()
    }
}
