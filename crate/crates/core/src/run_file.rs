//! Run files: one tab-separated line per (query, rank).
//!
//! Columns: `query_id page_id rank fused_score image_score text_score mode`.
//! Scores are printed like C's `%.9g`.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::model::{FusionMode, RankedResult};

#[derive(Debug, Error)]
pub enum RunFileError {
    #[error("run line {0}: malformed")]
    MalformedRunLine(usize),
    #[error("run file is empty")]
    EmptyRun,
    #[error("run line {line}: query `{query_id}` repeats rank {rank}")]
    DuplicateRank {
        line: usize,
        query_id: String,
        rank: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLine {
    pub query_id: String,
    pub page_id: String,
    pub rank: usize,
    pub fused_score: f64,
    pub image_score: f64,
    pub text_score: f64,
    pub mode: FusionMode,
}

/// Formats `v` with 9 significant digits, matching C's `printf("%.9g")`.
pub fn format_sig9(v: f64) -> String {
    const PRECISION: i32 = 9;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        trim_fraction(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_run<W: Write>(mut w: W, results: &[RankedResult]) -> io::Result<()> {
    for res in results {
        for e in &res.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                res.query_id,
                e.page_id,
                e.rank,
                format_sig9(e.fused_score),
                format_sig9(e.image_score),
                format_sig9(e.text_score),
                res.mode
            )?;
        }
    }
    w.flush()
}

/// Parses a run file. Blank lines are skipped; an input with no lines is an
/// error.
pub fn read_run<R: BufRead>(reader: R) -> Result<Vec<RunLine>, RunFileError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || RunFileError::MalformedRunLine(line_no);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(bad());
        }
        let rank: usize = cols[2].parse().map_err(|_| bad())?;
        if rank == 0 {
            return Err(bad());
        }
        let score = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(RunLine {
            query_id: cols[0].to_string(),
            page_id: cols[1].to_string(),
            rank,
            fused_score: score(cols[3])?,
            image_score: score(cols[4])?,
            text_score: score(cols[5])?,
            mode: cols[6].parse().map_err(|_| bad())?,
        });
    }
    if out.is_empty() {
        return Err(RunFileError::EmptyRun);
    }
    Ok(out)
}
