//! The feedback-driven fuzzing loop.
//!
//! For every endpoint and location the engine walks the payload types in
//! dictionary order. In modes C and CT a type is abandoned once more than
//! `threshold` consecutive requests failed to raise cumulative coverage; in
//! mode CT a taint hit restricts the location to the sink's type, jumping to
//! it if another type is being fuzzed. Requests go out strictly one at a
//! time; a consumer thread runs the detectors and aggregates the report.

pub mod session;
pub mod transport;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::detectors::{CaseContext, Detector, EndpointRef, LocationRef, Signatures};
use crate::feedback::TaintHit;
use crate::payloads::{embed_marker, Mutation, PayloadDictionary, VulnType};
use crate::planner::{
    baseline_blueprint, materialize_case, mutations_for_aspect, Aspect, CaseInput, FuzzLocation, RequestBlueprint,
    TestPlan,
};
use crate::reporting::FuzzReport;
use crate::rest_model::{value_text, ParamLocation};

pub use session::{SessionConfig, SessionError, SessionState, SessionStatus};
pub use transport::{ExchangeStatus, HttpExchange, HttpTransport, ScriptedTransport, Transport};

const QUEUE_DEPTH: usize = 256;
const RECOVERY_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Blackbox: every payload of every type.
    B,
    /// Coverage feedback skips unproductive types.
    C,
    /// Coverage plus taint jumps.
    CT,
}

impl Mode {
    pub fn uses_coverage(self) -> bool {
        matches!(self, Mode::C | Mode::CT)
    }

    pub fn uses_taint(self) -> bool {
        self == Mode::CT
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::B => "B",
            Mode::C => "C",
            Mode::CT => "CT",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "B" => Ok(Mode::B),
            "C" => Ok(Mode::C),
            "CT" => Ok(Mode::CT),
            _ => Err(format!("unknown mode {s:?} (expected B, C or CT)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub base_url: String,
    pub threshold: u32,
    pub mode: Mode,
    pub timeout_ms: u64,
    pub session: Option<SessionConfig>,
    pub dictionary: PayloadDictionary,
    pub seed: u64,
    /// How long to wait for a crashed target to come back.
    pub grace_ms: u64,
    pub health_path: String,
    pub signatures: Signatures,
}

impl EngineConfig {
    pub fn new(base_url: &str, mode: Mode, dictionary: PayloadDictionary) -> EngineConfig {
        EngineConfig {
            base_url: base_url.to_string(),
            threshold: 10,
            mode,
            timeout_ms: 10_000,
            session: None,
            dictionary,
            seed: 0,
            grace_ms: 30_000,
            health_path: "/health".to_string(),
            signatures: Signatures::builtin(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.threshold < 1 {
            return Err(EngineError::InvalidConfig("threshold must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(EngineError::InvalidConfig("timeout must be positive".into()));
        }
        if let Some(s) = &self.session {
            if s.check_period == 0 {
                return Err(EngineError::InvalidConfig("check_period must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Effective configuration as echoed into reports.
    pub fn echo(&self) -> Value {
        let sizes: IndexMap<String, usize> = self
            .dictionary
            .types()
            .map(|t| (t.as_str().to_string(), self.dictionary.payloads(t).len()))
            .collect();
        json!({
            "base_url": self.base_url,
            "mode": self.mode,
            "threshold": self.threshold,
            "timeout_ms": self.timeout_ms,
            "grace_ms": self.grace_ms,
            "seed": self.seed,
            "health_path": self.health_path,
            "dictionary_sha256": self.dictionary.digest(),
            "dictionary_sizes": sizes,
            "signatures_sha256": sha256_hex(self.signatures.source()),
            "session": self.session.as_ref().map(|s| json!({
                "login_requests": s.login_replay.len(),
                "check_endpoint": s.check_endpoint,
                "check_pattern": s.check_pattern,
                "check_period": s.check_period,
            })),
        })
    }
}

fn sha256_hex(s: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(s.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("target unreachable at {0}")]
    TargetUnreachable(String),
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Per-request record of the campaign, for replay comparison and coverage
/// analysis.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CampaignTrace {
    pub request_lines: Vec<String>,
    /// Cumulative coverage after each request.
    pub coverage: Vec<u64>,
    /// Plan index of the endpoint each request belonged to.
    pub endpoint_of_request: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub report: FuzzReport,
    pub trace: CampaignTrace,
}

struct Outcome {
    /// Coverage feedback was present and exceeded the running total.
    grew: bool,
    has_coverage: bool,
    /// Taint hits whose fragment came from the sent value.
    taint: Vec<TaintHit>,
}

enum Abort {
    Recovery,
    Session(String),
}

struct Runner<'a> {
    plan: &'a TestPlan,
    cfg: &'a EngineConfig,
    transport: &'a mut dyn Transport,
    tx: std::sync::mpsc::SyncSender<(HttpExchange, CaseContext)>,
    session: Option<SessionState>,
    next_case: u64,
    sent: u64,
    total_cov: u64,
    probes_total: Option<u64>,
    by_type: IndexMap<String, u64>,
    trace: CampaignTrace,
}

impl Runner<'_> {
    fn endpoint_ref(&self, idx: usize) -> EndpointRef {
        let ep = &self.plan.entries[idx].endpoint;
        EndpointRef {
            path: ep.path_template.clone(),
            verb: ep.verb,
        }
    }

    fn wait_for_recovery(&mut self) -> bool {
        let deadline = Instant::now() + Duration::from_millis(self.cfg.grace_ms);
        loop {
            if self.transport.probe_liveness() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(RECOVERY_POLL);
        }
    }

    fn send(
        &mut self,
        endpoint_idx: usize,
        bp: RequestBlueprint,
        ctx: CaseContext,
        type_key: &str,
    ) -> Result<Outcome, Abort> {
        if let Some(s) = self.session.as_mut() {
            if self.sent > 0 {
                s.maintain_session(self.transport, self.sent)
                    .map_err(|e| Abort::Session(e.to_string()))?;
            }
        }
        let mut ex = self.transport.send(&bp);
        self.sent += 1;
        *self.by_type.entry(type_key.to_string()).or_default() += 1;

        let mut recovered = true;
        if ex.is_transport_error() {
            let alive = self.transport.probe_liveness();
            ex.target_alive_after = Some(alive);
            if !alive {
                debug!("target down after case {}, waiting", ctx.case_id);
                recovered = self.wait_for_recovery();
            }
        }

        let coverage = ex.feedback.as_ref().and_then(|f| f.coverage);
        if let Some(c) = coverage {
            self.probes_total = Some(c.total);
        }
        let curr = coverage.map(|c| c.covered);
        let grew = curr.is_some_and(|c| c > self.total_cov);
        self.total_cov = self.total_cov.max(curr.unwrap_or(0));

        let taint = match (&ctx.sent_value, &ex.feedback) {
            (Some(v), Some(fb)) if self.cfg.mode.uses_taint() => fb
                .taint
                .iter()
                .filter(|h| v.contains(h.matched_fragment.as_str()))
                .cloned()
                .collect(),
            _ => Vec::new(),
        };

        self.trace.request_lines.push(bp.request_line());
        self.trace.coverage.push(self.total_cov);
        self.trace.endpoint_of_request.push(endpoint_idx);
        // the consumer only stops early if it panicked; the join reports that
        let _ = self.tx.send((ex, ctx));

        if !recovered {
            return Err(Abort::Recovery);
        }
        Ok(Outcome {
            grew,
            has_coverage: curr.is_some(),
            taint,
        })
    }

    fn context(
        &mut self,
        loc: Option<&FuzzLocation>,
        endpoint_idx: usize,
        payload_type: Option<VulnType>,
        sent_value: Option<String>,
        is_baseline: bool,
    ) -> CaseContext {
        let case_id = self.next_case;
        self.next_case += 1;
        let location = match loc {
            Some(l) => LocationRef {
                param: l.param_name.clone(),
                location: l.param_location,
                aspect: l.aspect,
            },
            None => LocationRef {
                param: String::new(),
                location: ParamLocation::Path,
                aspect: Aspect::Value,
            },
        };
        CaseContext {
            case_id,
            endpoint: self.endpoint_ref(endpoint_idx),
            location,
            payload_type,
            sent_value,
            is_baseline,
            taint_enabled: self.cfg.mode.uses_taint(),
        }
    }

    fn send_mutation(&mut self, loc: &FuzzLocation, m: &Mutation) -> Result<Outcome, Abort> {
        let endpoint = &self.plan.entries[loc.endpoint].endpoint;
        let param = endpoint
            .param(&loc.param_name, loc.param_location)
            .expect("plan locations name base parameters");
        let sent = match m {
            Mutation::OversizeValue(s) => Some(s.clone()),
            Mutation::TypeFlip(t) => Some(value_text(&t.representative(&param.seed()))),
            _ => None,
        };
        let ctx = self.context(Some(loc), loc.endpoint, None, sent, false);
        let bp = materialize_case(endpoint, loc, CaseInput::Mutation(m), ctx.case_id)
            .expect("scheduled mutations apply to their aspect");
        self.send(loc.endpoint, bp, ctx, "MUTATION")
    }

    fn send_payload(&mut self, loc: &FuzzLocation, t: VulnType, input: CaseInput<'_>) -> Result<Outcome, Abort> {
        let raw = match input {
            CaseInput::Payload(p) | CaseInput::RawBody(p) => p,
            CaseInput::Mutation(_) => unreachable!("payload cases carry payload text"),
        };
        let case_id = self.next_case;
        let ctx = self.context(
            Some(loc),
            loc.endpoint,
            Some(t),
            Some(embed_marker(raw, case_id)),
            false,
        );
        let endpoint = &self.plan.entries[loc.endpoint].endpoint;
        let bp = materialize_case(endpoint, loc, input, ctx.case_id).expect("payloads apply to value locations");
        self.send(loc.endpoint, bp, ctx, t.as_str())
    }

    fn run_endpoint(&mut self, idx: usize) -> Result<(), Abort> {
        let entry = &self.plan.entries[idx];
        let ctx = self.context(None, idx, None, None, true);
        self.send(idx, baseline_blueprint(&entry.endpoint), ctx, "MUTATION")?;
        for loc in &entry.locations {
            match loc.aspect {
                Aspect::Value => self.run_value_location(loc)?,
                aspect => {
                    let endpoint = &self.plan.entries[idx].endpoint;
                    let param = endpoint
                        .param(&loc.param_name, loc.param_location)
                        .expect("plan locations name base parameters");
                    for m in mutations_for_aspect(param, aspect) {
                        self.send_mutation(loc, &m)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn run_value_location(&mut self, loc: &FuzzLocation) -> Result<(), Abort> {
        self.send_mutation(loc, &Mutation::OversizeValue(crate::payloads::oversize_value()))?;

        let mode = self.cfg.mode;
        let threshold = u64::from(self.cfg.threshold);
        let body = loc.param_location == ParamLocation::Body;
        let types: Vec<VulnType> = self.cfg.dictionary.types().collect();
        let mut jumped: HashSet<VulnType> = HashSet::new();
        let mut restricted = false;
        let mut next = types.first().copied();
        let mut ti = 0;

        while let Some(t) = next {
            let mut count: u64 = 0;
            let mut jump_to = None;
            let payloads = self.cfg.dictionary.payloads(t).to_vec();
            'coverage: for p in &payloads {
                let variants = if body {
                    vec![CaseInput::Payload(p), CaseInput::RawBody(p)]
                } else {
                    vec![CaseInput::Payload(p)]
                };
                // both body variants of one payload count once
                let mut feedback = false;
                let mut grew = false;
                let mut tainted = false;
                for input in variants {
                    let out = self.send_payload(loc, t, input)?;
                    feedback |= mode.uses_coverage() && out.has_coverage;
                    grew |= mode.uses_coverage() && out.grew;
                    if let Some(hit) = out.taint.first() {
                        let ht = hit.sink_vuln_type;
                        restricted = true;
                        tainted = true;
                        if ht != t && jumped.insert(ht) {
                            debug!("{}: taint jump {t} -> {ht}", loc.label());
                            jump_to = Some(ht);
                            break 'coverage;
                        }
                    }
                }
                count += 1;
                if grew || tainted {
                    count = 0;
                }
                if feedback && count > threshold {
                    break 'coverage;
                }
            }
            next = match jump_to {
                Some(ht) => Some(ht),
                None if restricted => None,
                None => {
                    ti += 1;
                    types.get(ti).copied()
                }
            };
        }
        Ok(())
    }
}

fn consume(rx: Receiver<(HttpExchange, CaseContext)>, signatures: Signatures, mut report: FuzzReport) -> FuzzReport {
    let mut detector = Detector::new(signatures);
    for (ex, ctx) in rx {
        for f in detector.detect(&ex, &ctx) {
            report.add_finding(f);
        }
    }
    report
}

/// Runs a campaign against `cfg.base_url` over HTTP.
pub fn run_campaign(plan: &TestPlan, cfg: &EngineConfig) -> Result<CampaignResult, EngineError> {
    let mut t = HttpTransport::new(&cfg.base_url, Duration::from_millis(cfg.timeout_ms), &cfg.health_path);
    run_campaign_with(plan, cfg, &mut t)
}

/// Runs a campaign over any transport.
pub fn run_campaign_with(
    plan: &TestPlan,
    cfg: &EngineConfig,
    transport: &mut dyn Transport,
) -> Result<CampaignResult, EngineError> {
    cfg.validate()?;
    if !transport.probe_liveness() {
        return Err(EngineError::TargetUnreachable(cfg.base_url.clone()));
    }
    let mut session = cfg.session.clone().map(SessionState::new).transpose()?;
    if let Some(s) = session.as_mut() {
        s.login(transport);
    }

    let started = Instant::now();
    let mut report = FuzzReport::new(cfg.echo());
    report.stats.endpoints = plan.entries.iter().map(|e| e.endpoint.label()).collect();
    let (tx, rx) = sync_channel(QUEUE_DEPTH);
    let signatures = cfg.signatures.clone();

    let (report, runner_state) = thread::scope(|scope| {
        let consumer = scope.spawn(move || consume(rx, signatures, report));
        let mut by_type: IndexMap<String, u64> = cfg.dictionary.types().map(|t| (t.as_str().to_string(), 0)).collect();
        by_type.insert("MUTATION".into(), 0);
        let mut runner = Runner {
            plan,
            cfg,
            transport,
            tx,
            session,
            next_case: 0,
            sent: 0,
            total_cov: 0,
            probes_total: None,
            by_type,
            trace: CampaignTrace::default(),
        };
        let mut abort = None;
        for idx in 0..plan.entries.len() {
            info!("fuzzing {}", plan.entries[idx].endpoint.label());
            if let Err(a) = runner.run_endpoint(idx) {
                abort = Some(match a {
                    Abort::Recovery => format!("target did not recover within {} ms", cfg.grace_ms),
                    Abort::Session(e) => e,
                });
                break;
            }
        }
        let Runner {
            tx,
            sent,
            total_cov,
            probes_total,
            by_type,
            trace,
            ..
        } = runner;
        drop(tx);
        let report = consumer.join().expect("detector thread panicked");
        (report, (sent, total_cov, probes_total, by_type, trace, abort))
    });

    let (sent, total_cov, probes_total, by_type, trace, abort) = runner_state;
    let mut report = report;
    report.stats.requests_sent = sent;
    report.stats.final_total_cov = total_cov;
    report.stats.probes_total = probes_total;
    report.stats.requests_by_type = by_type;
    report.stats.duration_ms = started.elapsed().as_millis() as u64;
    if let Some(reason) = abort {
        warn!("campaign aborted: {reason}");
        report.incomplete = true;
        report.abort_reason = Some(reason);
    }
    Ok(CampaignResult { report, trace })
}
