//! Vulnerability indicators computed from a single exchange: reflected
//! payloads, error signatures, time delays, crashes, slow responses and
//! taint feedback.

use std::collections::{HashMap, VecDeque};

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::transport::HttpExchange;
use crate::payloads::{is_delay_probe, VulnType, DELAY_MS};
use crate::planner::Aspect;
use crate::rest_model::{HttpVerb, ParamLocation};

const BUILTIN_SIGNATURES: &str = include_str!("../data/signatures.json");
const MEDIAN_WINDOW: usize = 31;
const SLOW_FLOOR_MS: u64 = 2000;
const SLOW_FACTOR: u64 = 5;
const DETAIL_MAX: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Confidence {
    Potential,
    Confirmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvidenceKind {
    TaintSink,
    Reflection,
    ErrorSignature,
    TimeDelay,
    Crash,
    SlowResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Evidence {
    pub kind: EvidenceKind,
    pub detail: String,
    pub case_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndpointRef {
    pub path: String,
    pub verb: HttpVerb,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationRef {
    pub param: String,
    #[serde(rename = "in")]
    pub location: ParamLocation,
    pub aspect: Aspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub endpoint: EndpointRef,
    pub location: LocationRef,
    pub vuln_type: VulnType,
    pub confidence: Confidence,
    pub case_id: u64,
    pub evidence: Vec<Evidence>,
}

impl Finding {
    pub fn sink_id(&self) -> Option<&str> {
        self.evidence
            .iter()
            .find(|e| e.kind == EvidenceKind::TaintSink)
            .and_then(|e| e.sink_id.as_deref())
    }

    pub fn has_evidence(&self, kind: EvidenceKind) -> bool {
        self.evidence.iter().any(|e| e.kind == kind)
    }
}

/// What the engine knows about the case that produced an exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseContext {
    pub case_id: u64,
    pub endpoint: EndpointRef,
    pub location: LocationRef,
    /// Dictionary type of the payload, when the case sent one.
    pub payload_type: Option<VulnType>,
    /// The value placed at the fuzzed location (marker already embedded).
    pub sent_value: Option<String>,
    /// Example-clone requests that calibrate per-endpoint baselines.
    pub is_baseline: bool,
    pub taint_enabled: bool,
}

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("signatures are not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad {vuln_type} signature {pattern:?}: {source}")]
    Regex {
        vuln_type: VulnType,
        pattern: String,
        source: regex::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Signatures {
    by_type: Vec<(VulnType, Vec<Regex>)>,
    source: String,
}

impl Signatures {
    pub fn builtin() -> Signatures {
        Signatures::from_json(BUILTIN_SIGNATURES).expect("built-in signatures are valid")
    }

    pub fn from_json(text: &str) -> Result<Signatures, SignatureError> {
        let raw: IndexMap<VulnType, Vec<String>> = serde_json::from_str(text)?;
        let mut by_type = Vec::new();
        for t in VulnType::ALL {
            let mut list = Vec::new();
            for pattern in raw.get(&t).into_iter().flatten() {
                let re = Regex::new(pattern).map_err(|source| SignatureError::Regex {
                    vuln_type: t,
                    pattern: pattern.clone(),
                    source,
                })?;
                list.push(re);
            }
            by_type.push((t, list));
        }
        Ok(Signatures {
            by_type,
            source: text.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// First matching pattern per type.
    pub fn matches(&self, body: &str) -> Vec<(VulnType, &Regex)> {
        self.by_type
            .iter()
            .filter_map(|(t, list)| list.iter().find(|re| re.is_match(body)).map(|re| (*t, re)))
            .collect()
    }
}

fn clip(s: &str) -> String {
    let mut out: String = s.chars().filter(|c| !c.is_control()).take(DETAIL_MAX).collect();
    if s.chars().count() > DETAIL_MAX {
        out.truncate(out.char_indices().nth(DETAIL_MAX - 1).map_or(out.len(), |(i, _)| i));
        out.push('…');
    }
    out
}

/// Per-campaign detector state: endpoint baselines and response-time
/// medians. Owned by the detector consumer.
pub struct Detector {
    signatures: Signatures,
    baseline_signatures: HashMap<EndpointRef, Vec<VulnType>>,
    timings: HashMap<EndpointRef, VecDeque<u64>>,
}

impl Detector {
    pub fn new(signatures: Signatures) -> Detector {
        Detector {
            signatures,
            baseline_signatures: HashMap::new(),
            timings: HashMap::new(),
        }
    }

    fn median(&self, ep: &EndpointRef) -> Option<u64> {
        let w = self.timings.get(ep)?;
        if w.is_empty() {
            return None;
        }
        let mut v: Vec<u64> = w.iter().copied().collect();
        v.sort_unstable();
        Some(v[v.len() / 2])
    }

    fn record_timing(&mut self, ep: &EndpointRef, ms: u64) {
        let w = self.timings.entry(ep.clone()).or_default();
        if w.len() == MEDIAN_WINDOW {
            w.pop_front();
        }
        w.push_back(ms);
    }

    /// Applies every rule to one exchange. Never fails; undecodable bodies
    /// are matched as lossy text.
    pub fn detect(&mut self, ex: &HttpExchange, ctx: &CaseContext) -> Vec<Finding> {
        let body = ex.body_text();
        if ctx.is_baseline {
            let types = self.signatures.matches(&body).into_iter().map(|(t, _)| t).collect();
            self.baseline_signatures.insert(ctx.endpoint.clone(), types);
            if !ex.is_transport_error() {
                self.record_timing(&ctx.endpoint, ex.elapsed_ms);
            }
            return Vec::new();
        }

        let mut found: Vec<(VulnType, Confidence, Evidence)> = Vec::new();
        let ev = |kind, detail: String| Evidence {
            kind,
            detail: clip(&detail),
            case_id: ctx.case_id,
            sink_id: None,
            fragment: None,
        };
        let sent = ctx.sent_value.as_deref();
        let delay_probe = sent.is_some_and(is_delay_probe);

        if let (Some(v), true) = (sent, ex.is_html()) {
            if v.contains(['<', '>', '"', '\'']) {
                if let Some(pos) = body.find(v) {
                    let executable = in_executable_context(&body, pos, v);
                    let conf = if executable {
                        Confidence::Confirmed
                    } else {
                        Confidence::Potential
                    };
                    let where_ = if executable { "executable context" } else { "markup" };
                    found.push((
                        VulnType::Xss,
                        conf,
                        ev(
                            EvidenceKind::Reflection,
                            format!("payload reflected unescaped in {where_}"),
                        ),
                    ));
                }
            }
        }

        let skip = self.baseline_signatures.get(&ctx.endpoint).cloned().unwrap_or_default();
        for (t, re) in self.signatures.matches(&body) {
            if !skip.contains(&t) {
                found.push((
                    t,
                    Confidence::Potential,
                    ev(
                        EvidenceKind::ErrorSignature,
                        format!("response matches /{}/", re.as_str()),
                    ),
                ));
            }
        }

        if delay_probe && ex.elapsed_ms >= DELAY_MS {
            found.push((
                VulnType::Cmdi,
                Confidence::Confirmed,
                ev(EvidenceKind::TimeDelay, "delay probe stalled the response".into()),
            ));
        }

        if let Some(reason) = match (&ex.status, ex.target_alive_after) {
            (crate::engine::transport::ExchangeStatus::TransportError(e), _) => Some(format!("connection failed: {e}")),
            (_, Some(false)) => Some("target stopped answering after the response".into()),
            _ => None,
        } {
            found.push((VulnType::Dos, Confidence::Confirmed, ev(EvidenceKind::Crash, reason)));
        } else {
            if !delay_probe {
                let limit = self
                    .median(&ctx.endpoint)
                    .map_or(SLOW_FLOOR_MS, |m| (m * SLOW_FACTOR).max(SLOW_FLOOR_MS));
                if ex.elapsed_ms > limit {
                    found.push((
                        VulnType::Dos,
                        Confidence::Potential,
                        ev(
                            EvidenceKind::SlowResponse,
                            "response time far above endpoint median".into(),
                        ),
                    ));
                }
            }
            self.record_timing(&ctx.endpoint, ex.elapsed_ms);
        }

        let mut findings: Vec<Finding> = Vec::new();
        let mut push = |t: VulnType, conf: Confidence, e: Evidence| match findings.iter_mut().find(|f| f.vuln_type == t)
        {
            Some(f) => {
                f.confidence = f.confidence.max(conf);
                f.evidence.push(e);
            }
            None => findings.push(Finding {
                endpoint: ctx.endpoint.clone(),
                location: ctx.location.clone(),
                vuln_type: t,
                confidence: conf,
                case_id: ctx.case_id,
                evidence: vec![e],
            }),
        };

        if let (true, Some(v), Some(fb)) = (ctx.taint_enabled, sent, &ex.feedback) {
            let hits: Vec<_> = fb
                .taint
                .iter()
                .filter(|h| v.contains(h.matched_fragment.as_str()))
                .collect();
            if let Some(first) = hits.first() {
                let t = first.sink_vuln_type;
                let corroborated = found.iter().any(|(ft, _, _)| ft.same_category(t));
                let mut detail = format!("input reached sink {}", first.sink_id);
                if hits.len() > 1 {
                    let rest: Vec<&str> = hits[1..].iter().map(|h| h.sink_id.as_str()).collect();
                    detail.push_str(&format!("; also {}", rest.join(", ")));
                }
                let conf = if corroborated {
                    Confidence::Confirmed
                } else {
                    Confidence::Potential
                };
                let mut e = ev(EvidenceKind::TaintSink, detail);
                e.sink_id = Some(first.sink_id.clone());
                e.fragment = Some(first.matched_fragment.clone());
                push(t, conf, e);
                for (ft, fc, fe) in std::mem::take(&mut found) {
                    let target = if ft.same_category(t) { t } else { ft };
                    let fc = if target == t { Confidence::Confirmed } else { fc };
                    push(target, fc, fe);
                }
            }
        }
        for (t, c, e) in found {
            push(t, c, e);
        }
        findings
    }
}

/// Whether the reflection at `pos` sits inside a `<script>` element or an
/// `on*=` event-handler attribute.
fn in_executable_context(body: &str, pos: usize, value: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    let end = pos + value.len();
    let region = &lower[..end];
    let mut search_from = 0;
    while let Some(rel) = region[search_from..].find("<script") {
        let open = search_from + rel;
        match lower[open..].find("</script") {
            Some(close) if open + close < pos => search_from = open + 7,
            _ => return true,
        }
    }
    let handler = Regex::new(r"(?i)<[a-z][^>]*\son[a-z]+\s*=").expect("static regex");
    let reflected = &lower[pos..end];
    if handler.is_match(reflected) {
        return true;
    }
    match lower[..pos].rfind('<') {
        Some(tag) if !lower[tag..pos].contains('>') => Regex::new(r"\son[a-z]+\s*=\s*['\x22]?[^'\x22>]*$")
            .expect("static regex")
            .is_match(&lower[tag..pos]),
        _ => false,
    }
}
