//! Strict parsing of model replies.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Why a reply was not accepted.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseIssue {
    /// Unusable reply; worth asking again.
    Malformed(String),
    /// Well-formed reply carrying an impossible value; not retried.
    Invalid(String),
    /// Fixed factors missing from the reply; retried, then reported by name.
    Misaligned(Vec<String>),
}

impl ParseIssue {
    pub fn describe(&self) -> String {
        match self {
            ParseIssue::Malformed(r) | ParseIssue::Invalid(r) => r.clone(),
            ParseIssue::Misaligned(names) => format!("factors not returned: {}", names.join(", ")),
        }
    }
}

/// Self-explanation: class probability plus weighted factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub probability: f64,
    pub factors: Vec<(String, f64)>,
}

/// Returns the first balanced `{...}` span of `raw`, ignoring braces inside
/// JSON strings.
pub fn extract_json_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = raw[search_from..].find('{') {
        let start = search_from + offset;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_string {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &raw[start..=i];
                        if serde_json::from_str::<Value>(candidate).is_ok() {
                            return Some(candidate);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        search_from = start + 1;
    }
    None
}

fn object(raw: &str) -> Result<Map<String, Value>, ParseIssue> {
    let span =
        extract_json_object(raw).ok_or_else(|| ParseIssue::Malformed("no JSON object found in the reply".into()))?;
    match serde_json::from_str::<Value>(span) {
        Ok(Value::Object(map)) => Ok(map),
        _ => Err(ParseIssue::Malformed("reply is not a JSON object".into())),
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn probability(map: &Map<String, Value>) -> Result<f64, ParseIssue> {
    let v = map.get("probability").ok_or_else(|| ParseIssue::Malformed("missing key \"probability\"".into()))?;
    let p = number(v).ok_or_else(|| ParseIssue::Malformed(format!("\"probability\" is not a number: {v}")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(ParseIssue::Invalid(format!("probability {p} outside [0, 1]")));
    }
    Ok(p)
}

pub fn parse_explain(raw: &str) -> Result<ExplainResponse, ParseIssue> {
    let map = object(raw)?;
    let probability = probability(&map)?;
    let list = map
        .get("factors")
        .and_then(Value::as_array)
        .ok_or_else(|| ParseIssue::Malformed("missing array \"factors\"".into()))?;
    if list.is_empty() {
        return Err(ParseIssue::Malformed("\"factors\" is empty".into()));
    }
    let mut factors = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let name = item
            .get("factor")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ParseIssue::Malformed(format!("factors[{i}] lacks a \"factor\" string")))?;
        let w = item
            .get("importance")
            .and_then(number)
            .ok_or_else(|| ParseIssue::Malformed(format!("factors[{i}] lacks a numeric \"importance\"")))?;
        if !w.is_finite() || w < 0.0 {
            return Err(ParseIssue::Invalid(format!(
                "factors[{i}] importance {w} is not a finite non-negative number"
            )));
        }
        factors.push((name.to_string(), w));
    }
    Ok(ExplainResponse { probability, factors })
}

pub fn parse_probability(raw: &str) -> Result<f64, ParseIssue> {
    probability(&object(raw)?)
}

pub fn parse_factor_list(raw: &str) -> Result<Vec<String>, ParseIssue> {
    let map = object(raw)?;
    let list = map
        .get("factors")
        .and_then(Value::as_array)
        .ok_or_else(|| ParseIssue::Malformed("missing array \"factors\"".into()))?;
    let names: Vec<String> = list
        .iter()
        .filter_map(|v| match v {
            Value::String(s) => Some(s.trim().to_string()),
            Value::Object(o) => o.get("factor").and_then(Value::as_str).map(|s| s.trim().to_string()),
            _ => None,
        })
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(ParseIssue::Malformed("\"factors\" holds no factor names".into()));
    }
    Ok(names)
}

pub fn parse_rewrite(raw: &str) -> Result<String, ParseIssue> {
    let map = object(raw)?;
    map.get("rewritten_prompt")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| ParseIssue::Malformed("missing string \"rewritten_prompt\"".into()))
}
