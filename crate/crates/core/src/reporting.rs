//! Finding aggregation, report output, and recall scoring against a
//! seeded-vulnerability manifest.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detectors::{Confidence, EndpointRef, EvidenceKind, Finding};
use crate::payloads::VulnType;

pub const SCHEMA_VERSION: u32 = 1;
const EVIDENCE_CAP: usize = 16;
const CATEGORIES: [VulnType; 4] = [VulnType::Sqli, VulnType::Cmdi, VulnType::Xss, VulnType::Dos];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub requests_sent: u64,
    /// Wall-clock duration; kept out of the JSON so reports stay byte-stable.
    #[serde(skip)]
    pub duration_ms: u64,
    pub final_total_cov: u64,
    pub probes_total: Option<u64>,
    /// Requests per dictionary type, plus `MUTATION` for structural cases.
    pub requests_by_type: IndexMap<String, u64>,
    /// Every endpoint of the plan as `VERB path`.
    pub endpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FuzzReport {
    pub findings: Vec<Finding>,
    pub stats: Stats,
    pub config: Value,
    pub incomplete: bool,
    pub abort_reason: Option<String>,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DedupKey {
    Sink(String),
    Site {
        endpoint: EndpointRef,
        param: String,
        vuln_type: VulnType,
    },
}

pub fn dedup_key(f: &Finding) -> DedupKey {
    match f.sink_id() {
        Some(s) => DedupKey::Sink(s.to_string()),
        None => DedupKey::Site {
            endpoint: f.endpoint.clone(),
            param: f.location.param.clone(),
            vuln_type: f.vuln_type,
        },
    }
}

pub fn endpoint_label(e: &EndpointRef) -> String {
    format!("{} {}", e.verb.method(), e.path)
}

impl FuzzReport {
    pub fn new(config: Value) -> FuzzReport {
        FuzzReport {
            config,
            schema_version: SCHEMA_VERSION,
            ..FuzzReport::default()
        }
    }

    /// Adds a finding, merging it into an existing entry with the same
    /// dedup key: evidence is unioned and the higher confidence kept.
    pub fn add_finding(&mut self, finding: Finding) {
        let key = dedup_key(&finding);
        match self.findings.iter_mut().find(|f| dedup_key(f) == key) {
            Some(existing) => {
                existing.confidence = existing.confidence.max(finding.confidence);
                for e in finding.evidence {
                    if existing.evidence.len() >= EVIDENCE_CAP {
                        break;
                    }
                    if !existing.evidence.contains(&e) {
                        existing.evidence.push(e);
                    }
                }
            }
            None => self.findings.push(finding),
        }
    }

    pub fn confirmed_count(&self) -> usize {
        self.findings
            .iter()
            .filter(|f| f.confidence == Confidence::Confirmed)
            .count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<FuzzReport> {
        serde_json::from_str(text)
    }

    /// Human-readable summary: a count table with one column per report
    /// category, then one line per finding.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = 15;
        let _ = write!(out, "{:<12}", "");
        for c in CATEGORIES {
            let _ = write!(out, "{:>width$}", c.category());
        }
        out.push('\n');
        for (label, conf) in [
            ("confirmed", Some(Confidence::Confirmed)),
            ("potential", Some(Confidence::Potential)),
            ("total", None),
        ] {
            let _ = write!(out, "{label:<12}");
            for c in CATEGORIES {
                let n = self
                    .findings
                    .iter()
                    .filter(|f| f.vuln_type.same_category(c))
                    .filter(|f| conf.is_none_or(|k| f.confidence == k))
                    .count();
                let _ = write!(out, "{n:>width$}");
            }
            out.push('\n');
        }
        out.push('\n');
        for f in &self.findings {
            let kinds: Vec<String> = f
                .evidence
                .iter()
                .map(|e| format!("{:?}", e.kind))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let _ = writeln!(
                out,
                "{:<9} {:<13} {} [{}] {}",
                format!("{:?}", f.confidence).to_uppercase(),
                f.vuln_type.category(),
                endpoint_label(&f.endpoint),
                f.location.param,
                kinds.join(",")
            );
        }
        let _ = writeln!(
            out,
            "\nrequests: {}  coverage: {}{}{}",
            self.stats.requests_sent,
            self.stats.final_total_cov,
            self.stats.probes_total.map(|t| format!("/{t}")).unwrap_or_default(),
            if self.incomplete { "  (incomplete)" } else { "" }
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub vuln_type: VulnType,
    #[serde(default)]
    pub sink_id: Option<String>,
    pub endpoint: EndpointRef,
    #[serde(default)]
    pub param: Option<String>,
    #[serde(default)]
    pub taint_only: bool,
    pub trigger: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub probes_total: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub controls: Vec<EndpointRef>,
}

impl Manifest {
    pub fn from_json(text: &str) -> serde_json::Result<Manifest> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("manifest references endpoint {0} which the report does not cover")]
    ManifestMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallScore {
    pub recall: f64,
    pub matched: Vec<String>,
    pub missed: Vec<String>,
    /// Findings that match no manifest entry, as `TYPE VERB path [param]`.
    pub extra: Vec<String>,
    /// Findings on control endpoints.
    pub control_hits: Vec<String>,
}

pub fn entry_matches(entry: &ManifestEntry, f: &Finding) -> bool {
    if !entry.vuln_type.same_category(f.vuln_type) {
        return false;
    }
    if let (Some(a), Some(b)) = (entry.sink_id.as_deref(), f.sink_id()) {
        if a == b {
            return true;
        }
    }
    entry.endpoint == f.endpoint && entry.param.as_ref().is_none_or(|p| *p == f.location.param)
}

fn finding_label(f: &Finding) -> String {
    format!("{} {} [{}]", f.vuln_type, endpoint_label(&f.endpoint), f.location.param)
}

/// Scores a report against the manifest. A report that lists its endpoints
/// must cover every manifest endpoint; one that lists none (an empty report)
/// simply matches nothing.
pub fn score_recall(report: &FuzzReport, manifest: &Manifest) -> Result<RecallScore, ScoreError> {
    let listed = &report.stats.endpoints;
    let known = |e: &EndpointRef| listed.is_empty() || listed.contains(&endpoint_label(e));
    for e in manifest.entries.iter().map(|m| &m.endpoint).chain(&manifest.controls) {
        if !known(e) {
            return Err(ScoreError::ManifestMismatch(endpoint_label(e)));
        }
    }
    let mut matched = Vec::new();
    let mut missed = Vec::new();
    for entry in &manifest.entries {
        if report.findings.iter().any(|f| entry_matches(entry, f)) {
            matched.push(entry.id.clone());
        } else {
            missed.push(entry.id.clone());
        }
    }
    let extra = report
        .findings
        .iter()
        .filter(|f| !manifest.entries.iter().any(|e| entry_matches(e, f)))
        .map(finding_label)
        .collect();
    let control_hits = report
        .findings
        .iter()
        .filter(|f| manifest.controls.contains(&f.endpoint))
        .map(finding_label)
        .collect();
    let recall = if manifest.entries.is_empty() {
        1.0
    } else {
        matched.len() as f64 / manifest.entries.len() as f64
    };
    Ok(RecallScore {
        recall,
        matched,
        missed,
        extra,
        control_hits,
    })
}

/// Whether any finding carries taint evidence.
pub fn has_taint_evidence(report: &FuzzReport) -> bool {
    report.findings.iter().any(|f| f.has_evidence(EvidenceKind::TaintSink))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{Evidence, LocationRef};
    use crate::planner::Aspect;
    use crate::rest_model::{HttpVerb, ParamLocation};

    fn finding(path: &str, t: VulnType, conf: Confidence, sink: Option<&str>, case: u64) -> Finding {
        Finding {
            endpoint: EndpointRef {
                path: path.into(),
                verb: HttpVerb::Get,
            },
            location: LocationRef {
                param: "id".into(),
                location: ParamLocation::Path,
                aspect: Aspect::Value,
            },
            vuln_type: t,
            confidence: conf,
            case_id: case,
            evidence: vec![Evidence {
                kind: if sink.is_some() {
                    EvidenceKind::TaintSink
                } else {
                    EvidenceKind::ErrorSignature
                },
                detail: "d".into(),
                case_id: case,
                sink_id: sink.map(str::to_string),
                fragment: None,
            }],
        }
    }

    #[test]
    fn same_sink_merges() {
        let mut r = FuzzReport::new(Value::Null);
        r.add_finding(finding("/a", VulnType::Cmdi, Confidence::Potential, Some("s"), 1));
        r.add_finding(finding("/a", VulnType::Cmdi, Confidence::Potential, Some("s"), 2));
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].evidence.len(), 2);
    }

    #[test]
    fn distinct_endpoints_stay_apart_and_confidence_rises() {
        let mut r = FuzzReport::new(Value::Null);
        r.add_finding(finding("/a", VulnType::Sqli, Confidence::Potential, None, 1));
        r.add_finding(finding("/b", VulnType::Sqli, Confidence::Potential, None, 1));
        assert_eq!(r.findings.len(), 2);
        r.add_finding(finding("/a", VulnType::Sqli, Confidence::Confirmed, None, 3));
        assert_eq!(r.findings.len(), 2);
        assert_eq!(r.findings[0].confidence, Confidence::Confirmed);
        let before = r.clone();
        r.add_finding(finding("/a", VulnType::Sqli, Confidence::Confirmed, None, 3));
        assert_eq!(r, before);
    }

    #[test]
    fn json_is_stable_and_round_trips() {
        let empty = FuzzReport::new(Value::Null);
        assert!(empty.to_json().starts_with("{\n  \"findings\": []"));
        let mut r = FuzzReport::new(serde_json::json!({"mode": "CT"}));
        r.add_finding(finding("/a", VulnType::Xss, Confidence::Confirmed, None, 4));
        r.stats.duration_ms = 1234;
        assert_eq!(r.to_json(), r.to_json());
        let back = FuzzReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back.findings, r.findings);
        assert_eq!(back.stats.duration_ms, 0);
        assert!(r.to_text().contains("(No)SQLi"));
    }

    fn manifest() -> Manifest {
        Manifest {
            version: 1,
            probes_total: 10,
            entries: vec![ManifestEntry {
                id: "m1".into(),
                vuln_type: VulnType::Sqli,
                sink_id: Some("sql.a".into()),
                endpoint: EndpointRef {
                    path: "/a".into(),
                    verb: HttpVerb::Get,
                },
                param: Some("id".into()),
                taint_only: false,
                trigger: "quote".into(),
            }],
            controls: vec![],
        }
    }

    #[test]
    fn recall() {
        let mut r = FuzzReport::new(Value::Null);
        r.stats.endpoints = vec!["GET /a".into()];
        let s = score_recall(&r, &manifest()).unwrap();
        assert_eq!((s.recall, s.missed.len()), (0.0, 1));
        r.add_finding(finding("/a", VulnType::Nosqli, Confidence::Potential, None, 1));
        r.add_finding(finding("/a", VulnType::Dos, Confidence::Confirmed, None, 2));
        let s = score_recall(&r, &manifest()).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.extra.len(), 1);
        r.stats.endpoints = vec!["GET /b".into()];
        assert!(matches!(
            score_recall(&r, &manifest()),
            Err(ScoreError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn empty_report_scores_zero() {
        let s = score_recall(&FuzzReport::new(Value::Null), &manifest()).unwrap();
        assert_eq!((s.recall, s.missed.len()), (0.0, 1));
    }
}
