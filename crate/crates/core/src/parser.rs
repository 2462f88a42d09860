//! Text protocol for externally produced crop decisions.
//!
//! ```text
//! {"Decision": "FULL"}
//! {"Decision": "REGION", "Tool": <tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [10, 20, 110, 220]}}</tool_call>}
//! ```
//!
//! The outer object is not valid JSON once a `<tool_call>` block is embedded,
//! so the decision is located by pattern and each tool-call body is parsed as
//! JSON on its own. A block after the closing brace is accepted too.

use std::io::BufRead;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::env::{Action, BBox};

pub const TOOL_NAME: &str = "image_zoom_in_tool";

static DECISION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""Decision"\s*:\s*"([^"]*)""#).unwrap());
static DECISION_KEY_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""Decision"\s*:"#).unwrap());
static TOOL_CALL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<tool_call>(.*?)</tool_call>").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no Decision field")]
    NoDecisionField,
    #[error("unknown decision value {0:?}")]
    UnknownDecisionValue(String),
    #[error("REGION decision without a parseable {TOOL_NAME} call")]
    MissingToolCall,
    #[error("bbox_2d must hold exactly 4 finite numbers")]
    BadBBoxArity,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub action: Action,
    pub label: Option<String>,
    /// Coordinates as written, before rounding and clamping.
    pub raw_box: Option<[f64; 4]>,
}

impl ParsedDecision {
    pub fn full() -> Self {
        Self { action: Action::full(), label: None, raw_box: None }
    }

    /// A REGION decision whose box is derived from `raw` for a `w × h` image.
    pub fn region(raw: [f64; 4], label: Option<String>, w: usize, h: usize) -> Self {
        Self { action: Action::region(cell_box(raw, w, h)), label, raw_box: Some(raw) }
    }

    /// True when the box is inverted or empty after rounding and clamping.
    pub fn is_malformed(&self) -> bool {
        self.action.bbox().is_some_and(|b| !b.is_well_formed())
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Rounds to integer cells, then clamps to `[0, w] × [0, h]`. No validity check.
pub fn cell_box(raw: [f64; 4], w: usize, h: usize) -> BBox {
    let (w, h) = (w as i64, h as i64);
    let cx = |v: f64| round_half_up(v).clamp(0, w);
    let cy = |v: f64| round_half_up(v).clamp(0, h);
    BBox::new(cx(raw[0]), cy(raw[1]), cx(raw[2]), cy(raw[3]))
}

fn tool_call_box(body: &str) -> Result<Option<([f64; 4], Option<String>)>, ParseError> {
    let v: Value = serde_json::from_str(body.trim()).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    if v.get("name").and_then(Value::as_str) != Some(TOOL_NAME) {
        return Ok(None);
    }
    // some models emit the arguments as a JSON string
    let args = match v.get("arguments") {
        Some(Value::String(s)) => {
            serde_json::from_str::<Value>(s).map_err(|e| ParseError::MalformedJson(e.to_string()))?
        }
        Some(a) => a.clone(),
        None => return Ok(None),
    };
    let Some(bbox) = args.get("bbox_2d") else {
        return Ok(None);
    };
    let nums: Vec<f64> = match bbox.as_array() {
        Some(a) => a.iter().map(Value::as_f64).collect::<Option<_>>().ok_or(ParseError::BadBBoxArity)?,
        None => return Err(ParseError::BadBBoxArity),
    };
    let raw: [f64; 4] = nums.try_into().map_err(|_| ParseError::BadBBoxArity)?;
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(ParseError::BadBBoxArity);
    }
    let label = args.get("label").and_then(Value::as_str).map(str::to_owned);
    Ok(Some((raw, label)))
}

/// Parses one raw policy output for an image of `w × h` cells.
pub fn parse(text: &str, w: usize, h: usize) -> Result<ParsedDecision, ParseError> {
    let value = match DECISION_RE.captures(text) {
        Some(c) => c.get(1).map_or("", |m| m.as_str()),
        None if DECISION_KEY_RE.is_match(text) => {
            return Err(ParseError::MalformedJson("Decision value is not a string".into()))
        }
        None => return Err(ParseError::NoDecisionField),
    };
    match value {
        "FULL" => Ok(ParsedDecision::full()),
        "REGION" => {
            let mut first_err = None;
            for cap in TOOL_CALL_RE.captures_iter(text) {
                match tool_call_box(&cap[1]) {
                    Ok(Some((raw, label))) => return Ok(ParsedDecision::region(raw, label, w, h)),
                    Ok(None) => {}
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            Err(first_err.unwrap_or(ParseError::MissingToolCall))
        }
        other => Err(ParseError::UnknownDecisionValue(other.to_owned())),
    }
}

fn format_coord(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        serde_json::to_string(&x).expect("finite")
    }
}

fn json_string(s: &str) -> String {
    // angle brackets escaped so a label can never close the tool_call block
    serde_json::to_string(s).expect("string").replace('<', "\\u003c").replace('>', "\\u003e")
}

/// Canonical text for `d`. REGION decisions without a raw box fall back to
/// the action's cell box.
pub fn serialize(d: &ParsedDecision) -> String {
    match d.action.bbox() {
        None => r#"{"Decision": "FULL"}"#.to_owned(),
        Some(b) => {
            let raw = d.raw_box.unwrap_or([b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64]);
            let coords: Vec<String> = raw.iter().map(|&x| format_coord(x)).collect();
            let label = d.label.as_deref().map(|l| format!(", \"label\": {}", json_string(l))).unwrap_or_default();
            format!(
                r#"{{"Decision": "REGION", "Tool": <tool_call>{{"name": "{TOOL_NAME}", "arguments": {{"bbox_2d": [{}]{label}}}}}</tool_call>}}"#,
                coords.join(", ")
            )
        }
    }
}

/// One row of batch input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchInput {
    pub text: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub row: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<ParsedDecision>,
    #[serde(default)]
    pub malformed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Parses newline-delimited `{text, width, height}` rows. Blank lines are
/// skipped; unreadable rows are reported per row.
pub fn parse_batch<R: BufRead>(reader: R) -> std::io::Result<Vec<BatchResult>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let res = serde_json::from_str::<BatchInput>(&line)
            .map_err(|e| ParseError::MalformedJson(e.to_string()))
            .and_then(|inp| parse(&inp.text, inp.width, inp.height));
        out.push(match res {
            Ok(d) => BatchResult { row, malformed: d.is_malformed(), decision: Some(d), error: None },
            Err(e) => BatchResult { row, decision: None, malformed: false, error: Some(e.to_string()) },
        });
    }
    Ok(out)
}
