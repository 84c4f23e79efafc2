//! Keeping an authenticated session alive during a campaign.

use indexmap::IndexMap;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api_inference::TrafficRecord;
use crate::engine::transport::{HttpExchange, Transport};
use crate::planner::RequestBlueprint;
use crate::rest_model::HttpVerb;

const UNREPLAYED_HEADERS: [&str; 4] = ["host", "content-length", "connection", "cookie"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub login_replay: Vec<TrafficRecord>,
    pub check_endpoint: String,
    pub check_pattern: String,
    pub check_period: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Valid,
    Lost,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("session check_period must be at least 1")]
    BadPeriod,
    #[error("login replay record {0} has an unsupported method")]
    BadRecord(usize),
    #[error("session lost: {0:?} missing from {1} after login replay")]
    SessionLost(String, String),
}

pub fn blueprint_from_record(rec: &TrafficRecord) -> Option<RequestBlueprint> {
    let verb = HttpVerb::parse(&rec.method)?;
    let (path, query) = rec.split_url();
    let headers = rec
        .headers
        .iter()
        .filter(|(k, _)| !UNREPLAYED_HEADERS.contains(&k.to_ascii_lowercase().as_str()))
        .cloned()
        .collect();
    Some(RequestBlueprint {
        verb,
        path: path.to_string(),
        query: query.map(str::to_string),
        headers,
        body: rec.body.clone(),
    })
}

/// Session bookkeeping: cookies collected from login responses are sent
/// with every request through [`Transport::set_extra_headers`].
pub struct SessionState {
    cfg: SessionConfig,
    login: Vec<RequestBlueprint>,
    cookies: IndexMap<String, String>,
    pub replay_count: u32,
}

impl SessionState {
    pub fn new(cfg: SessionConfig) -> Result<SessionState, SessionError> {
        if cfg.check_period == 0 {
            return Err(SessionError::BadPeriod);
        }
        let login = cfg
            .login_replay
            .iter()
            .enumerate()
            .map(|(i, r)| blueprint_from_record(r).ok_or(SessionError::BadRecord(i)))
            .collect::<Result<_, _>>()?;
        Ok(SessionState {
            cfg,
            login,
            cookies: IndexMap::new(),
            replay_count: 0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    fn absorb_cookies(&mut self, ex: &HttpExchange) {
        for (k, v) in &ex.headers {
            if !k.eq_ignore_ascii_case("set-cookie") {
                continue;
            }
            let pair = v.split(';').next().unwrap_or("");
            if let Some((name, value)) = pair.split_once('=') {
                self.cookies.insert(name.trim().to_string(), value.trim().to_string());
            }
        }
    }

    fn cookie_headers(&self) -> Vec<(String, String)> {
        if self.cookies.is_empty() {
            return Vec::new();
        }
        let joined = self
            .cookies
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("; ");
        vec![("Cookie".to_string(), joined)]
    }

    /// Replays the recorded login requests.
    pub fn login(&mut self, t: &mut dyn Transport) {
        for bp in self.login.clone() {
            let ex = t.send(&bp);
            self.absorb_cookies(&ex);
            t.set_extra_headers(self.cookie_headers());
        }
    }

    fn check(&mut self, t: &mut dyn Transport) -> bool {
        let (path, query) = match self.cfg.check_endpoint.split_once('?') {
            Some((p, q)) => (p.to_string(), Some(q.to_string())),
            None => (self.cfg.check_endpoint.clone(), None),
        };
        let bp = RequestBlueprint {
            verb: HttpVerb::Get,
            path,
            query,
            headers: Vec::new(),
            body: None,
        };
        let ex = t.send(&bp);
        self.absorb_cookies(&ex);
        ex.body_text().contains(&self.cfg.check_pattern)
    }

    /// Checks the session every `check_period` requests. A failed check
    /// triggers one login replay; a second failure means the session is lost.
    pub fn maintain_session(
        &mut self,
        t: &mut dyn Transport,
        request_counter: u64,
    ) -> Result<SessionStatus, SessionError> {
        if !request_counter.is_multiple_of(self.cfg.check_period) {
            return Ok(SessionStatus::Valid);
        }
        if self.check(t) {
            return Ok(SessionStatus::Valid);
        }
        warn!("session check failed, replaying login");
        self.replay_count += 1;
        self.login(t);
        if self.check(t) {
            info!("session restored");
            Ok(SessionStatus::Valid)
        } else {
            Err(SessionError::SessionLost(
                self.cfg.check_pattern.clone(),
                self.cfg.check_endpoint.clone(),
            ))
        }
    }
}
