//! Newline-delimited pool records: the shared ingestion format for external
//! retrieval outputs and exported synthetic instances.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::env::{embed_image, BBox, SyntheticInstance};
use crate::policy::AnchorSet;
use crate::query::PreparedQuery;
use crate::scoring::{Candidate, CandidatePool};

/// One query with its retrieved candidate pool.
///
/// `region_embs` keys are boxes written as `"x1,y1,x2,y2"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub query_id: String,
    pub query_emb: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_emb: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default)]
    pub region_embs: BTreeMap<String, Vec<f64>>,
    pub candidates: Vec<Candidate>,
}

/// Expected embedding dimension and default image size for ingested rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetShape {
    pub dim: usize,
    pub width: usize,
    pub height: usize,
}

pub fn box_key(b: &BBox) -> String {
    format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2)
}

pub fn parse_box_key(key: &str) -> Option<BBox> {
    let v: Vec<i64> = key.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
    match v[..] {
        [x1, y1, x2, y2] => Some(BBox::new(x1, y1, x2, y2)),
        _ => None,
    }
}

impl PoolRecord {
    /// Exports a synthetic instance with one precomputed embedding per anchor.
    pub fn from_instance(id: &str, x: &SyntheticInstance, anchors: &AnchorSet) -> Result<Self, HarnessError> {
        let img = &x.image;
        let region_embs = anchors
            .boxes()
            .iter()
            .map(|b| Ok((box_key(b), img.box_mean(b)?)))
            .collect::<Result<_, HarnessError>>()?;
        Ok(Self {
            query_id: id.to_string(),
            query_emb: embed_image(img)?,
            question_emb: Some(x.question_vec.clone()),
            width: Some(img.width()),
            height: Some(img.height()),
            region_embs,
            candidates: x.pool.candidates().to_vec(),
        })
    }

    pub fn num_positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.label == 1).count()
    }

    pub fn prepare(&self, shape: &DatasetShape) -> Result<PreparedQuery, HarnessError> {
        let pool = CandidatePool::new(self.candidates.clone())?;
        let regions = self
            .region_embs
            .iter()
            .map(|(k, v)| {
                let b = parse_box_key(k).ok_or_else(|| HarnessError::InvalidConfig(format!("bad box key {k:?}")))?;
                Ok((b, v.clone()))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(PreparedQuery::from_precomputed(
            self.query_id.clone(),
            self.width.unwrap_or(shape.width),
            self.height.unwrap_or(shape.height),
            self.question_emb.clone(),
            &self.query_emb,
            &pool,
            regions,
        )?)
    }
}

fn schema(row: usize, field: impl Into<String>) -> HarnessError {
    HarnessError::SchemaError { row, field: field.into() }
}

fn check_dim(row: usize, field: &str, v: &[f64], dim: usize) -> Result<(), HarnessError> {
    if v.len() != dim {
        return Err(HarnessError::DimensionMismatch { row, field: field.to_string(), expected: dim, got: v.len() });
    }
    Ok(())
}

fn is_number_array(v: Option<&Value>) -> bool {
    v.and_then(Value::as_array).is_some_and(|a| a.iter().all(Value::is_number))
}

/// Field-level checks on the raw JSON so errors can name the offending field.
fn validate_value(row: usize, v: &Value) -> Result<(), HarnessError> {
    let obj = v.as_object().ok_or_else(|| schema(row, "<record>"))?;
    if !obj.get("query_id").is_some_and(Value::is_string) {
        return Err(schema(row, "query_id"));
    }
    if !is_number_array(obj.get("query_emb")) {
        return Err(schema(row, "query_emb"));
    }
    if obj.get("question_emb").is_some_and(|q| !q.is_null() && !is_number_array(Some(q))) {
        return Err(schema(row, "question_emb"));
    }
    if let Some(regions) = obj.get("region_embs") {
        let regions = regions.as_object().ok_or_else(|| schema(row, "region_embs"))?;
        for (k, e) in regions {
            if parse_box_key(k).is_none() || !is_number_array(Some(e)) {
                return Err(schema(row, format!("region_embs.{k}")));
            }
        }
    }
    let cands = obj.get("candidates").and_then(Value::as_array).ok_or_else(|| schema(row, "candidates"))?;
    for (j, c) in cands.iter().enumerate() {
        if !c.get("id").is_some_and(Value::is_string) {
            return Err(schema(row, format!("candidates[{j}].id")));
        }
        if !is_number_array(c.get("image_emb")) {
            return Err(schema(row, format!("candidates[{j}].image_emb")));
        }
        if !matches!(c.get("label").and_then(Value::as_u64), Some(0 | 1)) {
            return Err(schema(row, format!("candidates[{j}].label")));
        }
    }
    Ok(())
}

fn validate_record(row: usize, r: &PoolRecord, shape: &DatasetShape) -> Result<(), HarnessError> {
    check_dim(row, "query_emb", &r.query_emb, shape.dim)?;
    if let Some(q) = &r.question_emb {
        check_dim(row, "question_emb", q, shape.dim)?;
    }
    for (k, e) in &r.region_embs {
        check_dim(row, &format!("region_embs.{k}"), e, shape.dim)?;
    }
    for (j, c) in r.candidates.iter().enumerate() {
        check_dim(row, &format!("candidates[{j}].image_emb"), &c.image_emb, shape.dim)?;
        if let Some(t) = &c.text_emb {
            check_dim(row, &format!("candidates[{j}].text_emb"), t, shape.dim)?;
        }
    }
    // remaining pool invariants (ids, size, zero vectors)
    r.prepare(shape).map_err(|e| schema(row, format!("candidates: {e}")))?;
    Ok(())
}

/// Reads and validates pool records. Rows are numbered from 1; blank lines
/// are skipped.
pub fn load_pools(path: &Path, shape: &DatasetShape) -> Result<Vec<PoolRecord>, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_pools(BufReader::new(file), shape)
}

pub fn read_pools<R: BufRead>(reader: R, shape: &DatasetShape) -> Result<Vec<PoolRecord>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| HarnessError::Io { path: format!("row {row}"), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|_| schema(row, "<json>"))?;
        validate_value(row, &v)?;
        let r: PoolRecord = serde_json::from_value(v).map_err(|e| schema(row, e.to_string()))?;
        validate_record(row, &r, shape)?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    Ok(out)
}

pub fn write_pools(path: &Path, records: &[PoolRecord]) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialise");
        buf.push(b'\n');
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| HarnessError::io(path, e))
}

/// Drops records without a positive candidate; returns the kept records and
/// the number dropped.
pub fn filter_training_pools(records: Vec<PoolRecord>) -> (Vec<PoolRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records.into_iter().filter(|r| r.num_positives() > 0).collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        log::info!("dropped {dropped} of {before} pools without a positive");
    }
    (kept, dropped)
}
