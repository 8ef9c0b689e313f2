//! On-disk dataset formats: JSON-lines corpus/queries, TSV qrels, TSV STS
//! pairs, and TREC run files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval_metrics::StsPair;
use crate::model::{Document, Qrels, Query, RunList, ScoredDoc};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-blank lines with 1-based line numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn string_field(obj: &Value, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn jsonl_records(path: &Path) -> Result<Vec<(usize, String, Value)>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in lines(path)? {
        let obj: Value = serde_json::from_str(&raw).map_err(|e| parse_err(path, line, format!("invalid JSON: {e}")))?;
        if !obj.is_object() {
            return Err(parse_err(path, line, "expected a JSON object"));
        }
        let id = string_field(&obj, "_id")
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, line, "missing \"_id\""))?;
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate id {id:?}")));
        }
        out.push((line, id, obj));
    }
    Ok(out)
}

fn text_field(path: &Path, line: usize, obj: &Value) -> Result<String> {
    let text = string_field(obj, "text").ok_or_else(|| parse_err(path, line, "missing \"text\""))?;
    if text.trim().is_empty() {
        return Err(parse_err(path, line, "empty \"text\""));
    }
    Ok(text)
}

/// Reads `{"_id", "title", "text"}` records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    jsonl_records(path)?
        .into_iter()
        .map(|(line, id, obj)| {
            Ok(Document {
                text: text_field(path, line, &obj)?,
                title: string_field(&obj, "title").unwrap_or_default(),
                id,
            })
        })
        .collect()
}

/// Reads `{"_id", "text"}` records.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    jsonl_records(path)?
        .into_iter()
        .map(|(line, id, obj)| {
            Ok(Query {
                text: text_field(path, line, &obj)?,
                id,
            })
        })
        .collect()
}

/// Reads `query-id<TAB>corpus-id<TAB>score` lines. A first line whose score
/// column is not an integer is taken as a header.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let mut qrels = Qrels::new();
    for (n, (line, raw)) in lines(path)?.into_iter().enumerate() {
        let cols: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let grade = match cols[2].parse::<i64>() {
            Ok(g) if g >= 0 => g as u32,
            Ok(g) => return Err(parse_err(path, line, format!("negative grade {g}"))),
            Err(_) if n == 0 => continue,
            Err(_) => return Err(parse_err(path, line, format!("invalid grade {:?}", cols[2]))),
        };
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        qrels
            .insert(cols[0], cols[1], grade)
            .map_err(|_| parse_err(path, line, format!("duplicate judgment {}/{}", cols[0], cols[1])))?;
    }
    Ok(qrels)
}

/// Reads `sentence_a<TAB>sentence_b<TAB>gold` lines, with the same header rule
/// as [`load_qrels`].
pub fn load_sts_pairs(path: impl AsRef<Path>) -> Result<Vec<StsPair>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (n, (line, raw)) in lines(path)?.into_iter().enumerate() {
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, line, "expected 3 tab-separated columns"));
        }
        let gold = match cols[2].trim().parse::<f64>() {
            Ok(g) if g.is_finite() => g,
            _ if n == 0 => continue,
            _ => return Err(parse_err(path, line, format!("invalid score {:?}", cols[2]))),
        };
        out.push(StsPair::new(cols[0], cols[1], gold));
    }
    Ok(out)
}

/// One line: `query-id Q0 doc-id rank score tag`, rank from 1, score with
/// four decimals.
pub fn trec_line(query_id: &str, doc: &ScoredDoc, rank: usize, tag: &str) -> String {
    format!("{query_id} Q0 {} {rank} {:.4} {tag}", doc.doc_id, doc.score)
}

pub fn write_trec_run<W: Write>(mut w: W, run: &RunList, tag: &str) -> Result<()> {
    for (qid, ranking) in run.iter() {
        for (i, d) in ranking.iter().enumerate() {
            writeln!(w, "{}", trec_line(qid, d, i + 1, tag))?;
        }
    }
    Ok(())
}

/// Reads a TREC run, ordering each query by rank column.
pub fn load_trec_run(path: impl AsRef<Path>) -> Result<RunList> {
    let path = path.as_ref();
    let mut per_query: BTreeMap<String, Vec<(usize, ScoredDoc)>> = BTreeMap::new();
    for (line, raw) in lines(path)? {
        let cols: Vec<&str> = raw.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(path, line, format!("expected 6 columns, got {}", cols.len())));
        }
        let rank: usize = cols[3].parse().map_err(|_| parse_err(path, line, "invalid rank"))?;
        let score: f64 = cols[4].parse().map_err(|_| parse_err(path, line, "invalid score"))?;
        per_query.entry(cols[0].to_string()).or_default().push((
            rank,
            ScoredDoc {
                doc_id: cols[2].to_string(),
                score,
            },
        ));
    }
    let mut run = RunList::new();
    for (qid, mut docs) in per_query {
        docs.sort_by_key(|(rank, _)| *rank);
        run.insert(&qid, docs.into_iter().map(|(_, d)| d).collect())?;
    }
    Ok(run)
}
