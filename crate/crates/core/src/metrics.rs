//! Binary-relevance ranking metrics (Recall, hit rate, nDCG, MRR at a cutoff)
//! and run-file evaluation against qrels.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::run_file::RunLine;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("unknown metric `{0}` (expected recall@k, hit@k, ndcg@k or mrr@k)")]
    UnknownMetric(String),
    #[error("run references query `{0}` which has no relevant pages in the qrels")]
    UnknownQueryInRun(String),
    #[error("run query `{query_id}` repeats rank {rank}")]
    DuplicateRank { query_id: String, rank: usize },
    #[error("qrels line {0}: malformed")]
    MalformedQrelsLine(usize),
    #[error("qrels contain no relevant pages")]
    EmptyQrels,
    #[error("no metrics requested")]
    NoMetrics,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Relevant page ids per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels(BTreeMap<String, BTreeSet<String>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, query_id: impl Into<String>, page_id: impl Into<String>) {
        self.0
            .entry(query_id.into())
            .or_default()
            .insert(page_id.into());
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.0.iter()
    }

    /// Reads `query_id page_id relevance` lines (tab-separated, or
    /// whitespace-separated when a line has no tab). Zero-relevance lines are
    /// ignored.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, MetricError> {
        let mut qrels = Qrels::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = if line.contains('\t') {
                line.split('\t').map(str::trim).collect()
            } else {
                line.split_whitespace().collect()
            };
            let bad = || MetricError::MalformedQrelsLine(idx + 1);
            if cols.len() != 3 || cols[0].is_empty() || cols[1].is_empty() {
                return Err(bad());
            }
            match cols[2] {
                "0" => {}
                "1" => qrels.add(cols[0], cols[1]),
                _ => return Err(bad()),
            }
        }
        if qrels.is_empty() {
            return Err(MetricError::EmptyQrels);
        }
        Ok(qrels)
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (q, pages) in &self.0 {
            for p in pages {
                writeln!(w, "{q}\t{p}\t1")?;
            }
        }
        w.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    /// Fraction of gold pages found in the top k.
    Recall(usize),
    /// 1 if any gold page is in the top k.
    Hit(usize),
    Ndcg(usize),
    Mrr(usize),
}

impl Metric {
    pub fn cutoff(self) -> usize {
        match self {
            Metric::Recall(k) | Metric::Hit(k) | Metric::Ndcg(k) | Metric::Mrr(k) => k,
        }
    }

    pub fn compute<S: AsRef<str>>(
        self,
        ranked: &[S],
        gold: &BTreeSet<String>,
    ) -> Result<f64, MetricError> {
        match self {
            Metric::Recall(k) => recall_at_k(ranked, gold, k),
            Metric::Hit(k) => hit_at_k(ranked, gold, k),
            Metric::Ndcg(k) => ndcg_at_k(ranked, gold, k),
            Metric::Mrr(k) => mrr_at_k(ranked, gold, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Hit(k) => write!(f, "hit@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || MetricError::UnknownMetric(s.to_string());
        let lower = s.trim().to_ascii_lowercase();
        let (name, k) = lower.split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(unknown());
        }
        Ok(match name {
            "recall" => Metric::Recall(k),
            "hit" => Metric::Hit(k),
            "ndcg" => Metric::Ndcg(k),
            "mrr" => Metric::Mrr(k),
            _ => return Err(unknown()),
        })
    }
}

/// Parses a comma-separated metric list such as `recall@5,ndcg@10,mrr@10`.
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>, MetricError> {
    let metrics: Vec<Metric> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if metrics.is_empty() {
        return Err(MetricError::NoMetrics);
    }
    Ok(metrics)
}

fn check(gold: &BTreeSet<String>, k: usize) -> Result<(), MetricError> {
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    Ok(())
}

/// Relevance flags of the first `k` distinct pages.
fn relevance_prefix<S: AsRef<str>>(ranked: &[S], gold: &BTreeSet<String>, k: usize) -> Vec<bool> {
    let mut seen = HashSet::new();
    ranked
        .iter()
        .map(AsRef::as_ref)
        .filter(|p| seen.insert(*p))
        .take(k)
        .map(|p| gold.contains(p))
        .collect()
}

pub fn recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    gold: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    check(gold, k)?;
    let hits = relevance_prefix(ranked, gold, k)
        .iter()
        .filter(|&&r| r)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn hit_at_k<S: AsRef<str>>(
    ranked: &[S],
    gold: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    check(gold, k)?;
    Ok(f64::from(u8::from(
        relevance_prefix(ranked, gold, k).contains(&true),
    )))
}

pub fn mrr_at_k<S: AsRef<str>>(
    ranked: &[S],
    gold: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    check(gold, k)?;
    Ok(relevance_prefix(ranked, gold, k)
        .iter()
        .position(|&r| r)
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64))
}

#[inline]
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Binary-gain nDCG with discount `1 / log2(rank + 1)`; the ideal ranking
/// places `min(|gold|, k)` relevant pages first.
pub fn ndcg_at_k<S: AsRef<str>>(
    ranked: &[S],
    gold: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    check(gold, k)?;
    let dcg: f64 = relevance_prefix(ranked, gold, k)
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=gold.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub values: Vec<f64>,
    /// The query has gold pages but no lines in the run; every value is 0.
    pub missing_from_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metrics: Vec<String>,
    pub per_query: Vec<QueryMetrics>,
    /// Macro average over all qrels queries, in `metrics` order.
    pub mean: Vec<f64>,
    pub missing_queries: Vec<String>,
}

impl MetricReport {
    pub fn mean_of(&self, metric: Metric) -> Option<f64> {
        let name = metric.to_string();
        self.metrics
            .iter()
            .position(|m| *m == name)
            .map(|i| self.mean[i])
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "query_id\t{}", self.metrics.join("\t"))?;
        let fmt_row = |values: &[f64]| {
            values
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join("\t")
        };
        for row in &self.per_query {
            writeln!(w, "{}\t{}", row.query_id, fmt_row(&row.values))?;
        }
        writeln!(w, "ALL\t{}", fmt_row(&self.mean))?;
        w.flush()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut all = serde_json::Map::new();
        for (m, v) in self.metrics.iter().zip(&self.mean) {
            all.insert(m.clone(), (*v).into());
        }
        let rows: Vec<serde_json::Value> = self
            .per_query
            .iter()
            .map(|row| {
                let mut obj = serde_json::Map::new();
                obj.insert("query_id".into(), row.query_id.clone().into());
                for (m, v) in self.metrics.iter().zip(&row.values) {
                    obj.insert(m.clone(), (*v).into());
                }
                obj.insert("missing_from_run".into(), row.missing_from_run.into());
                obj.into()
            })
            .collect();
        serde_json::json!({
            "metrics": self.metrics,
            "per_query": rows,
            "ALL": all,
            "missing_queries": self.missing_queries,
        })
    }
}

/// Scores a run against qrels. Every query in the qrels contributes to the
/// macro average; queries absent from the run score 0 and are listed in
/// `missing_queries`.
pub fn evaluate_run(
    run: &[RunLine],
    qrels: &Qrels,
    metrics: &[Metric],
) -> Result<MetricReport, MetricError> {
    if metrics.is_empty() {
        return Err(MetricError::NoMetrics);
    }
    let mut by_query: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    for line in run {
        if qrels.get(&line.query_id).is_none() {
            return Err(MetricError::UnknownQueryInRun(line.query_id.clone()));
        }
        by_query
            .entry(&line.query_id)
            .or_default()
            .push((line.rank, &line.page_id));
    }
    let mut per_query = Vec::with_capacity(qrels.len());
    let mut missing_queries = Vec::new();
    for (query_id, gold) in qrels.iter() {
        let row = match by_query.get_mut(query_id.as_str()) {
            Some(lines) => {
                lines.sort_by_key(|&(rank, _)| rank);
                if let Some(w) = lines.windows(2).find(|w| w[0].0 == w[1].0) {
                    return Err(MetricError::DuplicateRank {
                        query_id: query_id.clone(),
                        rank: w[0].0,
                    });
                }
                let ranked: Vec<&str> = lines.iter().map(|&(_, p)| p).collect();
                let values = metrics
                    .iter()
                    .map(|m| m.compute(&ranked, gold))
                    .collect::<Result<_, _>>()?;
                QueryMetrics {
                    query_id: query_id.clone(),
                    values,
                    missing_from_run: false,
                }
            }
            None => {
                missing_queries.push(query_id.clone());
                QueryMetrics {
                    query_id: query_id.clone(),
                    values: vec![0.0; metrics.len()],
                    missing_from_run: true,
                }
            }
        };
        per_query.push(row);
    }
    let n = per_query.len() as f64;
    let mean = (0..metrics.len())
        .map(|i| per_query.iter().map(|r| r.values[i]).sum::<f64>() / n)
        .collect();
    Ok(MetricReport {
        metrics: metrics.iter().map(Metric::to_string).collect(),
        per_query,
        mean,
        missing_queries,
    })
}
