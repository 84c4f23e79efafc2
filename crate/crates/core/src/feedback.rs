//! Feedback header codec.
//!
//! `X-Backrest-Coverage: <covered>/<total>` carries cumulative probe
//! coverage; `X-Backrest-Taint: <base64 JSON>` carries the sinks that request
//! input reached, as `[{"sinkId": .., "sinkType": .., "fragment": ..}]`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::payloads::VulnType;

pub const COVERAGE_HEADER: &str = "X-Backrest-Coverage";
pub const TAINT_HEADER: &str = "X-Backrest-Taint";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaintHit {
    #[serde(rename = "sinkId")]
    pub sink_id: String,
    #[serde(rename = "sinkType")]
    pub sink_vuln_type: VulnType,
    #[serde(rename = "fragment")]
    pub matched_fragment: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub covered: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeedbackReport {
    pub coverage: Option<Coverage>,
    pub taint: Vec<TaintHit>,
}

impl FeedbackReport {
    pub fn last_request_cov(&self) -> Option<u64> {
        self.coverage.map(|c| c.covered)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeedbackError {
    #[error("malformed coverage header {0:?}")]
    Coverage(String),
    #[error("malformed taint header: {0}")]
    Taint(String),
}

pub fn parse_coverage(value: &str) -> Result<Coverage, FeedbackError> {
    let bad = || FeedbackError::Coverage(value.to_string());
    let (c, t) = value.trim().split_once('/').ok_or_else(bad)?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(c) || !digits(t) {
        return Err(bad());
    }
    let covered: u64 = c.parse().map_err(|_| bad())?;
    let total: u64 = t.parse().map_err(|_| bad())?;
    if covered > total {
        return Err(bad());
    }
    Ok(Coverage { covered, total })
}

pub fn parse_taint(value: &str) -> Result<Vec<TaintHit>, FeedbackError> {
    let bytes = STANDARD
        .decode(value.trim())
        .map_err(|e| FeedbackError::Taint(e.to_string()))?;
    let hits: Vec<TaintHit> = serde_json::from_slice(&bytes).map_err(|e| FeedbackError::Taint(e.to_string()))?;
    if hits.iter().any(|h| h.matched_fragment.is_empty()) {
        return Err(FeedbackError::Taint("empty fragment".into()));
    }
    Ok(hits)
}

pub fn encode_coverage(covered: u64, total: u64) -> String {
    format!("{covered}/{total}")
}

pub fn encode_taint(hits: &[TaintHit]) -> String {
    STANDARD.encode(serde_json::to_vec(hits).expect("taint hits serialize"))
}

/// Decodes the feedback headers of a response. Header names match
/// case-insensitively; a malformed header is logged and treated as absent.
pub fn decode_feedback<K, V>(headers: &[(K, V)]) -> Option<FeedbackReport>
where
    K: AsRef<str>,
    V: AsRef<str>,
{
    let find = |name: &str| {
        headers
            .iter()
            .find(|(k, _)| k.as_ref().eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_ref())
    };
    let coverage =
        find(COVERAGE_HEADER).and_then(|v| parse_coverage(v).map_err(|e| warn!("ignoring feedback: {e}")).ok());
    let taint = find(TAINT_HEADER).and_then(|v| parse_taint(v).map_err(|e| warn!("ignoring feedback: {e}")).ok());
    if coverage.is_none() && taint.is_none() {
        return None;
    }
    Some(FeedbackReport {
        coverage,
        taint: taint.unwrap_or_default(),
    })
}
