//! Attack payloads grouped by vulnerability type, plus the structural
//! mutations applied to the non-value aspects of a parameter.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rest_model::{ParamLocation, ParamType, Parameter};

const BUILTIN: &str = include_str!("../data/payloads.json");

/// Placeholder replaced by a per-case marker before a payload is sent.
pub const MARKER_PLACEHOLDER: &str = "BKRST";

/// Shell token that makes a command-injection payload a time-delay probe.
pub const DELAY_TOKEN: &str = "sleep 3";
pub const DELAY_MS: u64 = 3000;

pub const OVERSIZE_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VulnType {
    Sqli,
    Nosqli,
    Cmdi,
    Xss,
    Dos,
}

impl VulnType {
    pub const ALL: [VulnType; 5] = [
        VulnType::Sqli,
        VulnType::Nosqli,
        VulnType::Cmdi,
        VulnType::Xss,
        VulnType::Dos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VulnType::Sqli => "SQLI",
            VulnType::Nosqli => "NOSQLI",
            VulnType::Cmdi => "CMDI",
            VulnType::Xss => "XSS",
            VulnType::Dos => "DOS",
        }
    }

    /// Report column; SQL and NoSQL injection share one.
    pub fn category(self) -> &'static str {
        match self {
            VulnType::Sqli | VulnType::Nosqli => "(No)SQLi",
            VulnType::Cmdi => "Cmd injection",
            VulnType::Xss => "XSS",
            VulnType::Dos => "DoS",
        }
    }

    pub fn same_category(self, other: VulnType) -> bool {
        self.category() == other.category()
    }
}

impl fmt::Display for VulnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VulnType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VulnType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown vulnerability type {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("dictionary is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dictionary lacks type {0}")]
    MissingType(VulnType),
    #[error("dictionary list for {0} is empty")]
    EmptyType(VulnType),
    #[error("dictionary list for {0} repeats {1:?}")]
    Duplicate(VulnType, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadDictionary {
    entries: IndexMap<VulnType, Vec<String>>,
}

/// The built-in dictionary shipped in `data/payloads.json`.
pub fn default_dictionary() -> PayloadDictionary {
    PayloadDictionary::from_json(BUILTIN).expect("built-in dictionary is valid")
}

impl PayloadDictionary {
    /// Parses a `{"SQLI": [...], ...}` document. Unknown type keys are
    /// rejected by serde; entries are stored in [`VulnType::ALL`] order.
    pub fn from_json(text: &str) -> Result<Self, DictionaryError> {
        let raw: IndexMap<VulnType, Vec<String>> = serde_json::from_str(text)?;
        Self::from_entries(raw)
    }

    pub fn from_entries(mut raw: IndexMap<VulnType, Vec<String>>) -> Result<Self, DictionaryError> {
        let mut entries = IndexMap::new();
        for t in VulnType::ALL {
            let list = raw.swap_remove(&t).ok_or(DictionaryError::MissingType(t))?;
            if list.is_empty() {
                return Err(DictionaryError::EmptyType(t));
            }
            for (i, p) in list.iter().enumerate() {
                if list[..i].contains(p) {
                    return Err(DictionaryError::Duplicate(t, p.clone()));
                }
            }
            entries.insert(t, list);
        }
        Ok(PayloadDictionary { entries })
    }

    pub fn types(&self) -> impl Iterator<Item = VulnType> + '_ {
        self.entries.keys().copied()
    }

    pub fn payloads(&self, t: VulnType) -> &[String] {
        self.entries.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Every (type, payload) pair in iteration order.
    pub fn flattened(&self) -> Vec<(VulnType, &str)> {
        self.entries
            .iter()
            .flat_map(|(t, l)| l.iter().map(move |p| (*t, p.as_str())))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("strings serialize");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON form, echoed into reports.
    pub fn digest(&self) -> String {
        let d = Sha256::digest(self.to_json().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Marker token for a case: `bkrst<case_id>`.
pub fn marker(case_id: u64) -> String {
    format!("bkrst{case_id}")
}

/// Weaves the case marker into payloads that carry [`MARKER_PLACEHOLDER`].
/// Syntax-sensitive payloads have no placeholder and come back unchanged.
pub fn embed_marker(payload: &str, case_id: u64) -> String {
    if payload.contains(MARKER_PLACEHOLDER) {
        payload.replace(MARKER_PLACEHOLDER, &marker(case_id))
    } else {
        payload.to_string()
    }
}

pub fn is_delay_probe(payload: &str) -> bool {
    payload.contains(DELAY_TOKEN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MutationKind {
    OmitRequired,
    TypeFlip,
    LocationShift,
    OversizeValue,
    ExampleClone,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    ExampleClone,
    OmitRequired,
    TypeFlip(ParamType),
    LocationShift(ParamLocation),
    OversizeValue(String),
}

impl MutationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MutationKind::OmitRequired => "OMIT_REQUIRED",
            MutationKind::TypeFlip => "TYPE_FLIP",
            MutationKind::LocationShift => "LOCATION_SHIFT",
            MutationKind::OversizeValue => "OVERSIZE_VALUE",
            MutationKind::ExampleClone => "EXAMPLE_CLONE",
        }
    }
}

impl Mutation {
    pub fn kind(&self) -> MutationKind {
        match self {
            Mutation::ExampleClone => MutationKind::ExampleClone,
            Mutation::OmitRequired => MutationKind::OmitRequired,
            Mutation::TypeFlip(_) => MutationKind::TypeFlip,
            Mutation::LocationShift(_) => MutationKind::LocationShift,
            Mutation::OversizeValue(_) => MutationKind::OversizeValue,
        }
    }

    pub fn detail(&self) -> Value {
        match self {
            Mutation::ExampleClone | Mutation::OmitRequired => Value::Null,
            Mutation::TypeFlip(t) => Value::String(t.as_str().into()),
            Mutation::LocationShift(l) => Value::String(l.as_str().into()),
            Mutation::OversizeValue(s) => Value::from(s.len()),
        }
    }

    pub fn label(&self) -> String {
        match self.detail() {
            Value::Null => self.kind().as_str().to_string(),
            d => format!("{}({})", self.kind().as_str(), crate::rest_model::value_text(&d)),
        }
    }
}

pub fn oversize_value() -> String {
    "A".repeat(OVERSIZE_LEN)
}

/// Structural mutations for one parameter, in schedule order.
pub fn mutations_for(param: &Parameter) -> Vec<Mutation> {
    let mut out = vec![Mutation::ExampleClone];
    if param.required {
        out.push(Mutation::OmitRequired);
    }
    out.extend(
        ParamType::ALL
            .into_iter()
            .filter(|t| *t != param.ptype)
            .map(Mutation::TypeFlip),
    );
    match param.location {
        ParamLocation::Path => out.push(Mutation::LocationShift(ParamLocation::Query)),
        ParamLocation::Query => out.push(Mutation::LocationShift(ParamLocation::Path)),
        ParamLocation::Header | ParamLocation::Body => {}
    }
    out.push(Mutation::OversizeValue(oversize_value()));
    out
}
