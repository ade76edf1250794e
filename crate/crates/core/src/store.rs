//! Offline index: JSONL embedding ingest, the packed binary matrix format and
//! the on-disk index directory.
//!
//! Packed matrix layout (all integers little-endian):
//!
//! ```text
//! "CMEB" | u32 version = 1 | u32 dim | u64 count | count*dim f32 (row-major)
//!        | count * (u32 byte_len | UTF-8 id bytes)
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Corpus, EmbeddingVector, PageEntry};

pub const PACK_MAGIC: [u8; 4] = *b"CMEB";
pub const PACK_VERSION: u32 = 1;
pub const IMAGES_FILE: &str = "images.cmeb";
pub const TEXTS_FILE: &str = "texts.cmeb";
pub const MANIFEST_FILE: &str = "manifest.json";

const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const READ_CHUNK_VALUES: usize = 1 << 18;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {0}: malformed embedding record")]
    MalformedLine(usize),
    #[error("line {line}: expected dimension {expected}, got {got}")]
    DimMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {0}: non-finite embedding value")]
    NonFiniteValue(usize),
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("no embedding records")]
    Empty,
    #[error("image and text id sets differ; unmatched ids: {0:?}")]
    IdSetMismatch(Vec<String>),
    #[error("image dimension {image} differs from text dimension {text}")]
    ModalityDimMismatch { image: usize, text: usize },
    #[error("cannot normalize zero vector for id `{0}`")]
    ZeroVectorOnNormalize(String),
    #[error("bad magic bytes (not a packed embedding matrix)")]
    BadMagic,
    #[error("unsupported packed matrix version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file")]
    TruncatedFile,
    #[error("corrupt packed matrix: {0}")]
    Corrupt(String),
    #[error("inconsistent index: {0}")]
    Inconsistent(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A row-major `count x dim` matrix of `f32` with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl PackedMatrix {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Corrupt("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(StoreError::Corrupt(format!(
                "data length {} != {} rows x {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(StoreError::Corrupt(format!("duplicate id `{id}`")));
            }
        }
        Ok(Self { dim, data, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&PACK_MAGIC)?;
        w.write_all(&PACK_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dim exceeds u32"))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.count() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(READ_CHUNK_VALUES * 4);
        for chunk in self.data.chunks(READ_CHUNK_VALUES) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for id in &self.ids {
            let len = u32::try_from(id.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "id too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let eof = |e: io::Error| match e.kind() {
            io::ErrorKind::UnexpectedEof => StoreError::TruncatedFile,
            _ => StoreError::Corrupt(e.to_string()),
        };
        let mut header = [0u8; HEADER_LEN];
        // Magic is checked before length so that short non-matrix files
        // still report BadMagic.
        let got = read_up_to(&mut r, &mut header).map_err(eof)?;
        if got < 4 || header[..4] != PACK_MAGIC {
            return Err(if got < 4 && PACK_MAGIC.starts_with(&header[..got]) {
                StoreError::TruncatedFile
            } else {
                StoreError::BadMagic
            });
        }
        if got < HEADER_LEN {
            return Err(StoreError::TruncatedFile);
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != PACK_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        if dim == 0 {
            return Err(StoreError::Corrupt("dimension is zero".into()));
        }
        let count = usize::try_from(count)
            .map_err(|_| StoreError::Corrupt("row count exceeds address space".into()))?;
        let total = count
            .checked_mul(dim)
            .ok_or_else(|| StoreError::Corrupt("matrix size overflows".into()))?;

        // Grow incrementally so a lying header cannot force a huge allocation.
        let mut data = Vec::new();
        let chunk = total.min(READ_CHUNK_VALUES);
        let mut buf = vec![0u8; chunk * 4];
        let mut remaining = total;
        while remaining > 0 {
            let n = remaining.min(chunk);
            let bytes = &mut buf[..n * 4];
            r.read_exact(bytes).map_err(eof)?;
            data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
            remaining -= n;
        }

        let mut ids = Vec::new();
        for _ in 0..count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(eof)?;
            let len = u32::from_le_bytes(len) as usize;
            let mut bytes = Vec::new();
            let read = (&mut r)
                .take(len as u64)
                .read_to_end(&mut bytes)
                .map_err(eof)?;
            if read != len {
                return Err(StoreError::TruncatedFile);
            }
            let id = String::from_utf8(bytes)
                .map_err(|_| StoreError::Corrupt("id is not valid UTF-8".into()))?;
            ids.push(id);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(eof)? != 0 {
            return Err(StoreError::Corrupt("trailing bytes after id footer".into()));
        }
        Self::new(dim, data, ids)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let file = File::create(path).map_err(io_err(path))?;
        self.write_to(BufWriter::new(file)).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let file = File::open(path).map_err(io_err(path))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    #[serde(rename = "M")]
    pub count: usize,
    pub normalize: bool,
    /// Seconds since the Unix epoch.
    pub built_at: u64,
    pub builder: String,
}

/// Aligned image and text matrices plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexDirectory {
    pub manifest: Manifest,
    pub images: PackedMatrix,
    pub texts: PackedMatrix,
}

impl IndexDirectory {
    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.images.count()
    }

    pub fn is_empty(&self) -> bool {
        self.images.count() == 0
    }

    pub fn page_ids(&self) -> &[String] {
        self.images.ids()
    }

    fn check_consistent(&self) -> Result<(), StoreError> {
        let m = &self.manifest;
        if self.images.ids() != self.texts.ids() {
            return Err(StoreError::Inconsistent(
                "image and text rows are not aligned by id".into(),
            ));
        }
        if self.images.dim() != m.dim || self.texts.dim() != m.dim {
            return Err(StoreError::Inconsistent(format!(
                "matrix dims {}/{} differ from manifest dim {}",
                self.images.dim(),
                self.texts.dim(),
                m.dim
            )));
        }
        if self.images.count() != m.count {
            return Err(StoreError::Inconsistent(format!(
                "matrix has {} rows, manifest says {}",
                self.images.count(),
                m.count
            )));
        }
        Ok(())
    }

    /// Wraps already-aligned matrices. `normalized` records whether rows
    /// were scaled to unit length; it is not checked.
    pub fn from_matrices(
        images: PackedMatrix,
        texts: PackedMatrix,
        normalized: bool,
    ) -> Result<Self, StoreError> {
        let index = IndexDirectory {
            manifest: new_manifest(images.dim(), images.count(), normalized),
            images,
            texts,
        };
        index.check_consistent()?;
        Ok(index)
    }

    pub fn from_corpus(corpus: &Corpus, normalize: bool) -> Result<Self, StoreError> {
        let images = corpus
            .pages
            .iter()
            .map(|p| (p.page_id.clone(), p.image_emb.clone()))
            .collect();
        let texts = corpus
            .pages
            .iter()
            .map(|p| (p.page_id.clone(), p.text_emb.clone()))
            .collect();
        build_index(images, texts, normalize)
    }

    /// Document ids are not stored in the index, so `doc_id` comes back empty.
    pub fn to_corpus(&self) -> Corpus {
        let pages = (0..self.len())
            .map(|i| PageEntry {
                page_id: self.images.ids()[i].clone(),
                doc_id: String::new(),
                image_emb: EmbeddingVector::from_raw(self.images.row(i).to_vec()),
                text_emb: EmbeddingVector::from_raw(self.texts.row(i).to_vec()),
            })
            .collect();
        Corpus {
            dim: self.dim(),
            pages,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    id: String,
    embedding: Vec<f64>,
}

/// Parses `{"id": ..., "embedding": [...]}` lines. Blank lines are skipped;
/// any other bad line rejects the whole stream. Line numbers are 1-based.
pub fn parse_embedding_jsonl<R: BufRead>(
    reader: R,
) -> Result<Vec<(String, EmbeddingVector)>, StoreError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|_| StoreError::MalformedLine(line_no))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingLine =
            serde_json::from_str(&line).map_err(|_| StoreError::MalformedLine(line_no))?;
        if rec.embedding.is_empty() {
            return Err(StoreError::MalformedLine(line_no));
        }
        let expected = *dim.get_or_insert(rec.embedding.len());
        if rec.embedding.len() != expected {
            return Err(StoreError::DimMismatch {
                line: line_no,
                expected,
                got: rec.embedding.len(),
            });
        }
        let values: Vec<f32> = rec.embedding.iter().map(|&v| v as f32).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue(line_no));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(StoreError::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        out.push((rec.id, EmbeddingVector::from_raw(values)));
    }
    Ok(out)
}

pub fn read_embedding_file(path: &Path) -> Result<Vec<(String, EmbeddingVector)>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_embedding_jsonl(BufReader::new(file))
}

fn normalized_row(id: &str, v: &[f32]) -> Result<Vec<f32>, StoreError> {
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Err(StoreError::ZeroVectorOnNormalize(id.to_string()));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Aligns text records to the order of the image records and packs both.
pub fn build_index(
    images: Vec<(String, EmbeddingVector)>,
    texts: Vec<(String, EmbeddingVector)>,
    normalize: bool,
) -> Result<IndexDirectory, StoreError> {
    if images.is_empty() || texts.is_empty() {
        return Err(StoreError::Empty);
    }
    let image_dim = images[0].1.dim();
    let text_dim = texts[0].1.dim();
    if image_dim != text_dim {
        return Err(StoreError::ModalityDimMismatch {
            image: image_dim,
            text: text_dim,
        });
    }
    let dim = image_dim;
    for (line, (_, v)) in images.iter().chain(texts.iter()).enumerate() {
        if v.dim() != dim {
            return Err(StoreError::DimMismatch {
                line: line + 1,
                expected: dim,
                got: v.dim(),
            });
        }
    }

    let text_by_id: HashMap<&str, &EmbeddingVector> =
        texts.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let image_ids: HashSet<&str> = images.iter().map(|(id, _)| id.as_str()).collect();
    let mut unmatched: Vec<String> = images
        .iter()
        .filter(|(id, _)| !text_by_id.contains_key(id.as_str()))
        .chain(
            texts
                .iter()
                .filter(|(id, _)| !image_ids.contains(id.as_str())),
        )
        .map(|(id, _)| id.clone())
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        unmatched.dedup();
        return Err(StoreError::IdSetMismatch(unmatched));
    }

    let count = images.len();
    let mut image_data = Vec::with_capacity(count * dim);
    let mut text_data = Vec::with_capacity(count * dim);
    let mut ids = Vec::with_capacity(count);
    for (id, img) in &images {
        let txt = text_by_id[id.as_str()];
        if normalize {
            image_data.extend(normalized_row(id, img.values())?);
            text_data.extend(normalized_row(id, txt.values())?);
        } else {
            image_data.extend_from_slice(img.values());
            text_data.extend_from_slice(txt.values());
        }
        ids.push(id.clone());
    }

    Ok(IndexDirectory {
        manifest: new_manifest(dim, count, normalize),
        images: PackedMatrix::new(dim, image_data, ids.clone())?,
        texts: PackedMatrix::new(dim, text_data, ids)?,
    })
}

fn new_manifest(dim: usize, count: usize, normalize: bool) -> Manifest {
    let built_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Manifest {
        format_version: PACK_VERSION,
        dim,
        count,
        normalize,
        built_at,
        builder: concat!("cmrag ", env!("CARGO_PKG_VERSION")).to_string(),
    }
}

pub fn save_index(index: &IndexDirectory, dir: &Path) -> Result<(), StoreError> {
    index.check_consistent()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    index.images.save(&dir.join(IMAGES_FILE))?;
    index.texts.save(&dir.join(TEXTS_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&index.manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))
}

pub fn load_index(dir: &Path) -> Result<IndexDirectory, StoreError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != PACK_VERSION {
        return Err(StoreError::UnsupportedVersion(manifest.format_version));
    }
    let index = IndexDirectory {
        manifest,
        images: PackedMatrix::load(&dir.join(IMAGES_FILE))?,
        texts: PackedMatrix::load(&dir.join(TEXTS_FILE))?,
    };
    index.check_consistent()?;
    Ok(index)
}
