//! Query JSONL:
//! `{"query_id": str, "text": str, "embeddings": {"image-query": [...], "text-query": [...]}, "gold": [...]}`
//! where `text` and `gold` are optional and at least one channel is required.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Qrels;
use crate::model::{EmbeddingVector, ModelError, QueryRecord};

#[derive(Debug, Error)]
pub enum QueryFileError {
    #[error("query line {0}: malformed")]
    MalformedLine(usize),
    #[error("query line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error("query line {line}: duplicate query_id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("no queries")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    query_id: String,
    #[serde(default)]
    text: String,
    embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gold: Vec<String>,
}

pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<QueryRecord>, QueryFileError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryLine =
            serde_json::from_str(&line).map_err(|_| QueryFileError::MalformedLine(line_no))?;
        let invalid = |source| QueryFileError::Invalid {
            line: line_no,
            source,
        };
        let mut channel_embs = BTreeMap::new();
        for (name, values) in rec.embeddings {
            let values = values.into_iter().map(|v| v as f32).collect();
            channel_embs.insert(name, EmbeddingVector::new(values).map_err(invalid)?);
        }
        let query = QueryRecord {
            query_id: rec.query_id,
            text: rec.text,
            channel_embs,
            gold_page_ids: rec.gold.into_iter().collect(),
        };
        query.validate().map_err(invalid)?;
        if !seen.insert(query.query_id.clone()) {
            return Err(QueryFileError::DuplicateId {
                line: line_no,
                id: query.query_id,
            });
        }
        out.push(query);
    }
    if out.is_empty() {
        return Err(QueryFileError::Empty);
    }
    Ok(out)
}

pub fn write_queries<W: Write>(mut w: W, queries: &[QueryRecord]) -> io::Result<()> {
    for q in queries {
        let line = QueryLine {
            query_id: q.query_id.clone(),
            text: q.text.clone(),
            embeddings: q
                .channel_embs
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.values().iter().map(|&x| f64::from(x)).collect(),
                    )
                })
                .collect(),
            gold: q.gold_page_ids.iter().cloned().collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Qrels built from the queries' inline gold lists.
pub fn qrels_from_queries(queries: &[QueryRecord]) -> Qrels {
    let mut qrels = Qrels::new();
    for q in queries {
        for p in &q.gold_page_ids {
            qrels.add(q.query_id.clone(), p.clone());
        }
    }
    qrels
}
