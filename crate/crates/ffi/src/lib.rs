//! C ABI over the cmrag retrieval engine.
//!
//! Every fallible function returns a [`CmragStatus`]. On failure the
//! thread's last error message is available from
//! [`cmrag_last_error_message`]. Indexes are opaque handles released with
//! [`cmrag_index_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use cmrag::fusion::{sigmoid, zscore_normalize, FusionError};
use cmrag::model::{
    EmbeddingVector, FusionConfig, FusionMode, ModelError, QueryRecord, IMAGE_QUERY_CHANNEL,
    TEXT_QUERY_CHANNEL,
};
use cmrag::store::{IndexDirectory, PackedMatrix, StoreError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmragStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimMismatch = 3,
    MissingChannel = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

/// Values accepted by the `mode` argument of [`cmrag_retrieve`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmragMode {
    ImageOnly = 0,
    TextOnly = 1,
    RawLinear = 2,
    Ucmr = 3,
    EnsembleUcmr = 4,
}

/// Opaque index handle.
pub struct CmragIndex {
    inner: IndexDirectory,
    ids: Vec<CString>,
}

struct Failure(CmragStatus, String);

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::Io { .. } => CmragStatus::Io,
            StoreError::DimMismatch { .. } | StoreError::ModalityDimMismatch { .. } => {
                CmragStatus::DimMismatch
            }
            StoreError::ZeroVectorOnNormalize(_)
            | StoreError::DuplicateId { .. }
            | StoreError::IdSetMismatch(_)
            | StoreError::Empty
            | StoreError::NonFiniteValue(_) => CmragStatus::InvalidArgument,
            _ => CmragStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        let status = match e {
            FusionError::DimMismatch { .. } | FusionError::LengthMismatch(..) => {
                CmragStatus::DimMismatch
            }
            FusionError::MissingChannel { .. } => CmragStatus::MissingChannel,
            _ => CmragStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure(CmragStatus::InvalidArgument, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CmragStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(CmragStatus::NullPointer, format!("{what} is null"))
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CmragStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CmragStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            CmragStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Builds slices from raw parts, treating `len == 0` as empty regardless of
/// the pointer.
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn wrap(index: IndexDirectory) -> Result<*mut CmragIndex, Failure> {
    let ids = index
        .page_ids()
        .iter()
        .map(|id| CString::new(id.as_str()).map_err(|_| invalid("page id contains a nul byte")))
        .collect::<Result<_, _>>()?;
    Ok(Box::into_raw(Box::new(CmragIndex { inner: index, ids })))
}

fn mode_from(mode: u32) -> Result<FusionMode, Failure> {
    Ok(match mode {
        0 => FusionMode::ImageOnly,
        1 => FusionMode::TextOnly,
        2 => FusionMode::RawLinear,
        3 => FusionMode::Ucmr,
        4 => FusionMode::EnsembleUcmr,
        other => return Err(invalid(format!("unknown mode {other}"))),
    })
}

/// Message for the last failed call on this thread, or NULL after a
/// successful call. Valid until the next cmrag call on the same thread.
#[no_mangle]
pub extern "C" fn cmrag_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmrag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an index directory written by `cmrag ingest` or
/// [`cmrag_index_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_load(
    path: *const c_char,
    out: *mut *mut CmragIndex,
) -> CmragStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(path)?;
        *out = wrap(cmrag::load_index(&dir)?)?;
        Ok(())
    })
}

/// Builds an index from row-major `count x dim` image and text matrices and
/// `count` page ids.
///
/// # Safety
/// `images` and `texts` must point to `count * dim` floats and `ids` to
/// `count` NUL-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_from_arrays(
    dim: usize,
    count: usize,
    images: *const f32,
    texts: *const f32,
    ids: *const *const c_char,
    normalize: bool,
    out: *mut *mut CmragIndex,
) -> CmragStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 || count == 0 {
            return Err(invalid("dim and count must be positive"));
        }
        let n = dim
            .checked_mul(count)
            .ok_or_else(|| invalid("dim * count overflows"))?;
        let images = slice_arg(images, n, "images")?;
        let texts = slice_arg(texts, n, "texts")?;
        let id_ptrs = slice_arg(ids, count, "ids")?;
        let mut names = Vec::with_capacity(count);
        for &p in id_ptrs {
            if p.is_null() {
                return Err(null("page id"));
            }
            let s = CStr::from_ptr(p)
                .to_str()
                .map_err(|_| invalid("page id is not valid UTF-8"))?;
            names.push(s.to_string());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(invalid(format!("duplicate page id `{dup}`")));
        }
        let index = if normalize {
            let rows = |data: &[f32]| {
                names
                    .iter()
                    .zip(data.chunks_exact(dim))
                    .map(|(id, r)| (id.clone(), EmbeddingVector::from_raw(r.to_vec())))
                    .collect()
            };
            cmrag::store::build_index(rows(images), rows(texts), true)?
        } else {
            IndexDirectory::from_matrices(
                PackedMatrix::new(dim, images.to_vec(), names.clone())?,
                PackedMatrix::new(dim, texts.to_vec(), names)?,
                false,
            )?
        };
        *out = wrap(index)?;
        Ok(())
    })
}

/// Writes the index directory (created if missing).
///
/// # Safety
/// `index` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_save(
    index: *const CmragIndex,
    path: *const c_char,
) -> CmragStatus {
    guard(|| {
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        let dir = path_arg(path)?;
        cmrag::save_index(&index.inner, &dir)?;
        Ok(())
    })
}

/// Releases an index. NULL is ignored.
///
/// # Safety
/// `index` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_free(index: *mut CmragIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Embedding dimension, or 0 for NULL.
///
/// # Safety
/// `index` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_dim(index: *const CmragIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.dim())
}

/// Number of pages, or 0 for NULL.
///
/// # Safety
/// `index` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_count(index: *const CmragIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Page id of row `i`, owned by the index; NULL when out of range.
///
/// # Safety
/// `index` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cmrag_index_page_id(index: *const CmragIndex, i: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|idx| idx.ids.get(i))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Ranks the index for one query and writes up to `k` row indices and fused
/// scores, best first. `*out_len` receives the number written
/// (`min(k, count)`).
///
/// `image_query` is used for every mode except ensemble, which also needs
/// `text_query`. For the single-embedding modes `text_query` may be NULL.
///
/// # Safety
/// Query pointers must hold `dim` floats; output buffers must hold `k`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn cmrag_retrieve(
    index: *const CmragIndex,
    image_query: *const f32,
    text_query: *const f32,
    dim: usize,
    mode: u32,
    alpha: f64,
    beta: f64,
    k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> CmragStatus {
    guard(|| {
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let mode = mode_from(mode)?;
        let cfg = FusionConfig::new(mode)
            .with_alpha(alpha)
            .with_beta(beta)
            .with_top_k(k);
        cfg.validate()?;
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let mut query = QueryRecord {
            query_id: String::new(),
            text: String::new(),
            channel_embs: Default::default(),
            gold_page_ids: Default::default(),
        };
        if !image_query.is_null() {
            let v = slice_arg(image_query, dim, "image_query")?;
            query.channel_embs.insert(
                IMAGE_QUERY_CHANNEL.into(),
                EmbeddingVector::new(v.to_vec())?,
            );
        }
        if !text_query.is_null() {
            let v = slice_arg(text_query, dim, "text_query")?;
            query
                .channel_embs
                .insert(TEXT_QUERY_CHANNEL.into(), EmbeddingVector::new(v.to_vec())?);
        }
        if query.channel_embs.is_empty() {
            return Err(null("image_query"));
        }
        let result = cmrag::retrieve(&query, &index.inner, &cfg)?;
        let n = result.entries.len();
        let indices = slice_out(out_indices, n, "out_indices")?;
        let scores = slice_out(out_scores, n, "out_scores")?;
        for (slot, e) in result.entries.iter().enumerate() {
            indices[slot] = e.index;
            scores[slot] = e.fused_score;
        }
        *out_len = n;
        Ok(())
    })
}

/// Elementwise logistic function. `out` may alias `values`.
///
/// # Safety
/// Both pointers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmrag_sigmoid(
    values: *const f64,
    len: usize,
    out: *mut f64,
) -> CmragStatus {
    guard(|| {
        if len > 0 && (values.is_null() || out.is_null()) {
            return Err(null("values or out"));
        }
        for i in 0..len {
            *out.add(i) = sigmoid(*values.add(i));
        }
        Ok(())
    })
}

/// Population z-score. A constant input yields zeros and `sigma == 0`.
/// `out_mu` and `out_sigma` may be NULL.
///
/// # Safety
/// `values` and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmrag_zscore(
    values: *const f64,
    len: usize,
    out: *mut f64,
    out_mu: *mut f64,
    out_sigma: *mut f64,
) -> CmragStatus {
    guard(|| {
        let input = slice_arg(values, len, "values")?.to_vec();
        let z = zscore_normalize(&input);
        slice_out(out, len, "out")?.copy_from_slice(&z.values);
        if let Some(mu) = out_mu.as_mut() {
            *mu = z.mu;
        }
        if let Some(sigma) = out_sigma.as_mut() {
            *sigma = z.sigma;
        }
        Ok(())
    })
}

/// Dual-sigmoid alignment loss of a batch of `b` query embeddings against
/// `b` target embeddings (row-major `b x dim` each); row `i` of both forms
/// the positive pair.
///
/// # Safety
/// `queries` and `targets` must hold `b * dim` doubles; `out_loss` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn cmrag_dsa_loss(
    queries: *const f64,
    targets: *const f64,
    b: usize,
    dim: usize,
    tau: f64,
    eta: f64,
    out_loss: *mut f64,
) -> CmragStatus {
    guard(|| {
        if out_loss.is_null() {
            return Err(null("out_loss"));
        }
        if b == 0 || dim == 0 {
            return Err(invalid("b and dim must be positive"));
        }
        let n = b
            .checked_mul(dim)
            .ok_or_else(|| invalid("b * dim overflows"))?;
        let view = |p, what| -> Result<ndarray::ArrayView2<f64>, Failure> {
            let s = slice_arg(p, n, what)?;
            Ok(ndarray::ArrayView2::from_shape((b, dim), s).expect("length checked"))
        };
        let loss = cmrag::dsa::dsa_loss(
            view(queries, "queries")?,
            view(targets, "targets")?,
            tau,
            eta,
        )
        .map_err(|e| invalid(e.to_string()))?;
        *out_loss = loss;
        Ok(())
    })
}
