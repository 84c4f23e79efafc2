//! Sending blueprints over HTTP and capturing the full exchange.

use std::io::Read;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::feedback::{decode_feedback, FeedbackReport};
use crate::planner::RequestBlueprint;

const MAX_BODY: u64 = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExchangeStatus {
    Http(u16),
    TransportError(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpExchange {
    pub blueprint: RequestBlueprint,
    pub status: ExchangeStatus,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub elapsed_ms: u64,
    pub feedback: Option<FeedbackReport>,
    /// Result of the liveness probe sent right after a failed exchange.
    pub target_alive_after: Option<bool>,
}

impl HttpExchange {
    pub fn from_response(
        blueprint: RequestBlueprint,
        status: u16,
        headers: Vec<(String, String)>,
        body: Vec<u8>,
        elapsed_ms: u64,
    ) -> Self {
        let feedback = decode_feedback(&headers);
        HttpExchange {
            blueprint,
            status: ExchangeStatus::Http(status),
            headers,
            body,
            elapsed_ms,
            feedback,
            target_alive_after: None,
        }
    }

    pub fn transport_error(blueprint: RequestBlueprint, reason: String, elapsed_ms: u64) -> Self {
        HttpExchange {
            blueprint,
            status: ExchangeStatus::TransportError(reason),
            headers: Vec::new(),
            body: Vec::new(),
            elapsed_ms,
            feedback: None,
            target_alive_after: None,
        }
    }

    pub fn is_transport_error(&self) -> bool {
        matches!(self.status, ExchangeStatus::TransportError(_))
    }

    pub fn status_code(&self) -> Option<u16> {
        match self.status {
            ExchangeStatus::Http(c) => Some(c),
            ExchangeStatus::TransportError(_) => None,
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn is_html(&self) -> bool {
        self.header("content-type")
            .is_some_and(|c| c.to_ascii_lowercase().contains("html"))
    }
}

/// Request channel used by the engine. Implementations must send each
/// request exactly once and never retry.
pub trait Transport {
    fn send(&mut self, bp: &RequestBlueprint) -> HttpExchange;

    /// True iff the target's health path answers 2xx promptly.
    fn probe_liveness(&mut self) -> bool;

    /// Headers added to every subsequent request (session cookies).
    fn set_extra_headers(&mut self, headers: Vec<(String, String)>);
}

pub struct HttpTransport {
    agent: ureq::Agent,
    probe_agent: ureq::Agent,
    base_url: String,
    health_path: String,
    extra_headers: Vec<(String, String)>,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration, health_path: &str) -> Self {
        let build = |t: Duration| {
            ureq::AgentBuilder::new()
                .timeout(t)
                .redirects(0)
                .max_idle_connections(0)
                .build()
        };
        HttpTransport {
            agent: build(timeout),
            probe_agent: build(Duration::from_millis(1000).min(timeout)),
            base_url: base_url.trim_end_matches('/').to_string(),
            health_path: health_path.to_string(),
            extra_headers: Vec::new(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, bp: &RequestBlueprint) -> HttpExchange {
        let url = format!("{}{}", self.base_url, bp.target());
        let mut req = self.agent.request(bp.verb.method(), &url);
        for (k, v) in bp.headers.iter().chain(&self.extra_headers) {
            req = req.set(k, v);
        }
        let start = Instant::now();
        let result = match &bp.body {
            Some(b) => req.send_bytes(b),
            None => req.call(),
        };
        let resp = match result {
            Ok(r) | Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => {
                let ms = start.elapsed().as_millis() as u64;
                return HttpExchange::transport_error(bp.clone(), t.kind().to_string(), ms);
            }
        };
        let status = resp.status();
        let mut headers = Vec::new();
        for name in resp.headers_names() {
            for v in resp.all(&name) {
                headers.push((name.clone(), v.to_string()));
            }
        }
        let mut body = Vec::new();
        if let Err(e) = resp.into_reader().take(MAX_BODY).read_to_end(&mut body) {
            let ms = start.elapsed().as_millis() as u64;
            return HttpExchange::transport_error(bp.clone(), e.kind().to_string(), ms);
        }
        let ms = start.elapsed().as_millis() as u64;
        HttpExchange::from_response(bp.clone(), status, headers, body, ms)
    }

    fn probe_liveness(&mut self) -> bool {
        probe_with(&self.probe_agent, &format!("{}{}", self.base_url, self.health_path))
    }

    fn set_extra_headers(&mut self, headers: Vec<(String, String)>) {
        self.extra_headers = headers;
    }
}

fn probe_with(agent: &ureq::Agent, url: &str) -> bool {
    match agent.get(url).call() {
        Ok(r) => (200..300).contains(&r.status()),
        Err(_) => false,
    }
}

/// GETs `health_path` on `base_url` with a short timeout; true iff 2xx.
pub fn probe_liveness(base_url: &str, health_path: &str) -> bool {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(1000))
        .max_idle_connections(0)
        .build();
    probe_with(&agent, &format!("{}{}", base_url.trim_end_matches('/'), health_path))
}

/// In-memory responder for tests and dry runs.
pub struct ScriptedTransport<F> {
    respond: F,
    pub alive: bool,
    pub extra_headers: Vec<(String, String)>,
}

/// A scripted response: status, headers, body.
pub type ScriptedResponse = (u16, Vec<(String, String)>, Vec<u8>);

impl<F> ScriptedTransport<F>
where
    F: FnMut(&RequestBlueprint, &[(String, String)]) -> Option<ScriptedResponse>,
{
    /// `respond` returning `None` simulates a dropped connection.
    pub fn new(respond: F) -> Self {
        ScriptedTransport {
            respond,
            alive: true,
            extra_headers: Vec::new(),
        }
    }
}

impl<F> Transport for ScriptedTransport<F>
where
    F: FnMut(&RequestBlueprint, &[(String, String)]) -> Option<ScriptedResponse>,
{
    fn send(&mut self, bp: &RequestBlueprint) -> HttpExchange {
        match (self.respond)(bp, &self.extra_headers) {
            Some((status, headers, body)) => HttpExchange::from_response(bp.clone(), status, headers, body, 0),
            None => HttpExchange::transport_error(bp.clone(), "connection reset".into(), 0),
        }
    }

    fn probe_liveness(&mut self) -> bool {
        self.alive
    }

    fn set_extra_headers(&mut self, headers: Vec<(String, String)>) {
        self.extra_headers = headers;
    }
}
