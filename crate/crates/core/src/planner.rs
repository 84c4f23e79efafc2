//! Test-plan construction: endpoints, their fuzzable locations, and the
//! translation of one (location, payload or mutation) pair into a concrete
//! HTTP request.

use std::fmt;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::payloads::{embed_marker, mutations_for, Mutation};
use crate::rest_model::{
    parameter_to_value, value_text, HttpVerb, Operation, ParamLocation, ParamType, Parameter, RestModel,
};

/// RFC 3986 unreserved characters pass through; everything else is escaped.
const COMPONENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'.').remove(b'_').remove(b'~');

const FORM_CONTENT_TYPE: &str = "application/x-www-form-urlencoded";

/// Name of a body parameter that stands for the whole request body.
pub const WHOLE_BODY_PARAM: &str = "body";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("model declares no endpoints")]
    EmptyModel,
    #[error("{mutation} does not apply to the {aspect} of {param}")]
    InapplicableMutation {
        param: String,
        aspect: Aspect,
        mutation: String,
    },
    #[error("no parameter {0:?} at this endpoint")]
    UnknownParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aspect {
    Value,
    Location,
    Required,
    Type,
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Aspect::Value => "VALUE",
            Aspect::Location => "LOCATION",
            Aspect::Required => "REQUIRED",
            Aspect::Type => "TYPE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub path_template: String,
    pub verb: HttpVerb,
    pub base_parameters: Vec<Parameter>,
    pub content_type: String,
}

impl Endpoint {
    /// Builds an endpoint from an operation. A body parameter named
    /// [`WHOLE_BODY_PARAM`] with an object example is flattened so that each
    /// top-level key of the example becomes its own body parameter.
    pub fn from_operation(path: &str, verb: HttpVerb, op: &Operation) -> Endpoint {
        let mut params = Vec::new();
        for p in &op.parameters {
            match (&p.location, &p.ptype, &p.example) {
                (ParamLocation::Body, ParamType::Object, Some(Value::Object(fields))) if p.name == WHOLE_BODY_PARAM => {
                    for (k, v) in fields {
                        params.push(Parameter {
                            name: k.clone(),
                            location: ParamLocation::Body,
                            required: p.required,
                            ptype: json_kind(v),
                            example: Some(v.clone()),
                        });
                    }
                }
                _ => params.push(p.clone()),
            }
        }
        Endpoint {
            path_template: path.to_string(),
            verb,
            base_parameters: params,
            content_type: op.content_type().to_string(),
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.verb.method(), self.path_template)
    }

    pub fn param(&self, name: &str, location: ParamLocation) -> Option<&Parameter> {
        self.base_parameters
            .iter()
            .find(|p| p.name == name && p.location == location)
    }

    fn has_body(&self) -> bool {
        self.base_parameters.iter().any(|p| p.location == ParamLocation::Body)
    }
}

fn json_kind(v: &Value) -> ParamType {
    match v {
        Value::Bool(_) => ParamType::Boolean,
        Value::Number(n) if n.is_i64() || n.is_u64() => ParamType::Integer,
        Value::Number(_) => ParamType::Number,
        Value::Array(_) => ParamType::Array,
        Value::Object(_) => ParamType::Object,
        Value::String(_) | Value::Null => ParamType::String,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FuzzLocation {
    /// Index of the endpoint within the plan.
    pub endpoint: usize,
    pub param_name: String,
    pub param_location: ParamLocation,
    pub aspect: Aspect,
}

impl FuzzLocation {
    pub fn label(&self) -> String {
        format!("{}:{}:{}", self.param_location.as_str(), self.param_name, self.aspect)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub endpoint: Endpoint,
    pub locations: Vec<FuzzLocation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPlan {
    pub entries: Vec<PlanEntry>,
    pub schedule_seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlanOptions {
    /// Header parameters are replayed but only fuzzed when set.
    pub fuzz_headers: bool,
}

/// Explodes a model into an ordered plan. Endpoints are sorted by path and
/// then verb; each endpoint lists all VALUE locations before the structural
/// ones. The seed is recorded but no choice in the plan depends on it.
pub fn build_test_plan(model: &RestModel, seed: u64, opts: PlanOptions) -> Result<TestPlan, PlanError> {
    let mut endpoints: Vec<Endpoint> = model
        .paths
        .iter()
        .flat_map(|(path, item)| {
            item.methods
                .iter()
                .map(move |(verb, op)| Endpoint::from_operation(path, *verb, op))
        })
        .collect();
    if endpoints.is_empty() {
        return Err(PlanError::EmptyModel);
    }
    endpoints.sort_by(|a, b| a.path_template.cmp(&b.path_template).then(a.verb.cmp(&b.verb)));

    let entries = endpoints
        .into_iter()
        .enumerate()
        .map(|(idx, endpoint)| {
            let fuzzed: Vec<&Parameter> = endpoint
                .base_parameters
                .iter()
                .filter(|p| opts.fuzz_headers || p.location != ParamLocation::Header)
                .collect();
            let loc = |p: &Parameter, aspect| FuzzLocation {
                endpoint: idx,
                param_name: p.name.clone(),
                param_location: p.location,
                aspect,
            };
            let mut locations: Vec<FuzzLocation> = fuzzed.iter().map(|p| loc(p, Aspect::Value)).collect();
            for p in &fuzzed {
                for aspect in [Aspect::Location, Aspect::Required, Aspect::Type] {
                    if !mutations_for_aspect(p, aspect).is_empty() {
                        locations.push(loc(p, aspect));
                    }
                }
            }
            PlanEntry { endpoint, locations }
        })
        .collect();
    Ok(TestPlan {
        entries,
        schedule_seed: seed,
    })
}

/// Whether a mutation targets the given aspect of a parameter.
pub fn mutation_aspect(m: &Mutation) -> Aspect {
    match m {
        Mutation::ExampleClone | Mutation::OversizeValue(_) => Aspect::Value,
        Mutation::OmitRequired => Aspect::Required,
        Mutation::TypeFlip(_) => Aspect::Type,
        Mutation::LocationShift(_) => Aspect::Location,
    }
}

/// The structural mutations scheduled for a non-VALUE location.
pub fn mutations_for_aspect(param: &Parameter, aspect: Aspect) -> Vec<Mutation> {
    mutations_for(param)
        .into_iter()
        .filter(|m| mutation_aspect(m) == aspect)
        .collect()
}

impl TestPlan {
    pub fn endpoint(&self, loc: &FuzzLocation) -> &Endpoint {
        &self.entries[loc.endpoint].endpoint
    }

    pub fn location_count(&self) -> usize {
        self.entries.iter().map(|e| e.locations.len()).sum()
    }

    pub fn to_value(&self) -> Value {
        let endpoints: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                let locations: Vec<Value> = e
                    .locations
                    .iter()
                    .map(|l| {
                        let mut o = Map::new();
                        o.insert("param".into(), Value::String(l.param_name.clone()));
                        o.insert("in".into(), Value::String(l.param_location.as_str().into()));
                        o.insert("aspect".into(), Value::String(l.aspect.to_string()));
                        if l.aspect != Aspect::Value {
                            let p = e
                                .endpoint
                                .param(&l.param_name, l.param_location)
                                .expect("location names a base parameter");
                            let ms = mutations_for_aspect(p, l.aspect)
                                .iter()
                                .map(|m| Value::String(m.label()))
                                .collect();
                            o.insert("mutations".into(), Value::Array(ms));
                        }
                        Value::Object(o)
                    })
                    .collect();
                json!({
                    "path": e.endpoint.path_template,
                    "verb": e.endpoint.verb.as_str(),
                    "parameters": e.endpoint.base_parameters.iter().map(parameter_to_value).collect::<Vec<_>>(),
                    "locations": locations,
                })
            })
            .collect();
        json!({ "schedule_seed": self.schedule_seed, "endpoints": endpoints })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("plan serializes");
        s.push('\n');
        s
    }
}

/// What one case injects at its location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseInput<'a> {
    /// Dictionary payload; in a JSON body it is sent as an escaped string.
    Payload(&'a str),
    /// Dictionary payload spliced unescaped into a JSON body.
    RawBody(&'a str),
    Mutation(&'a Mutation),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestBlueprint {
    pub verb: HttpVerb,
    pub path: String,
    pub query: Option<String>,
    pub headers: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
}

impl RequestBlueprint {
    pub fn target(&self) -> String {
        match &self.query {
            Some(q) => format!("{}?{}", self.path, q),
            None => self.path.clone(),
        }
    }

    /// `METHOD target`, followed by the body when one is sent.
    pub fn request_line(&self) -> String {
        let mut line = format!("{} {}", self.verb.method(), self.target());
        if let Some(b) = &self.body {
            line.push(' ');
            line.push_str(&String::from_utf8_lossy(b));
        }
        line
    }
}

/// Percent-encodes a URL component, keeping existing valid `%XX` escapes.
pub fn encode_component(s: &str) -> String {
    if s == "." || s == ".." {
        return s.replace('.', "%2E");
    }
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%'
            && i + 2 < bytes.len()
            && bytes[i + 1].is_ascii_hexdigit()
            && bytes[i + 2].is_ascii_hexdigit()
        {
            out.extend(utf8_percent_encode(&s[start..i], COMPONENT));
            out.push_str(&s[i..i + 3]);
            i += 3;
            start = i;
        } else {
            i += 1;
        }
    }
    out.extend(utf8_percent_encode(&s[start..], COMPONENT));
    out
}

fn header_safe(s: &str) -> String {
    s.chars()
        .flat_map(|c| {
            if (' '..='~').contains(&c) {
                vec![c.to_string()]
            } else {
                let mut buf = [0u8; 4];
                c.encode_utf8(&mut buf).bytes().map(|b| format!("%{b:02X}")).collect()
            }
        })
        .collect()
}

enum Slot {
    Text(String),
    Json(Value),
    Raw(String),
    Omitted,
}

/// Builds the concrete request for one case. Only the targeted parameter
/// deviates from its seed value; marker placeholders in payloads are filled
/// from `case_id`.
pub fn materialize_case(
    endpoint: &Endpoint,
    loc: &FuzzLocation,
    input: CaseInput<'_>,
    case_id: u64,
) -> Result<RequestBlueprint, PlanError> {
    let target = endpoint
        .param(&loc.param_name, loc.param_location)
        .ok_or_else(|| PlanError::UnknownParameter(loc.param_name.clone()))?;
    let inapplicable = |what: String| PlanError::InapplicableMutation {
        param: target.name.clone(),
        aspect: loc.aspect,
        mutation: what,
    };

    let mut moved_to: Option<ParamLocation> = None;
    let slot = match (loc.aspect, input) {
        (Aspect::Value, CaseInput::Payload(p)) => Slot::Text(embed_marker(p, case_id)),
        (Aspect::Value, CaseInput::RawBody(p)) if target.location == ParamLocation::Body => {
            Slot::Raw(embed_marker(p, case_id))
        }
        (_, CaseInput::Mutation(m)) if mutation_aspect(m) == loc.aspect => match m {
            Mutation::ExampleClone => Slot::Json(target.seed()),
            Mutation::OversizeValue(s) => Slot::Text(s.clone()),
            Mutation::OmitRequired if target.required => Slot::Omitted,
            Mutation::TypeFlip(t) if *t != target.ptype => Slot::Json(t.representative(&target.seed())),
            Mutation::LocationShift(to)
                if matches!(
                    (target.location, to),
                    (ParamLocation::Path, ParamLocation::Query) | (ParamLocation::Query, ParamLocation::Path)
                ) =>
            {
                moved_to = Some(*to);
                Slot::Omitted
            }
            other => return Err(inapplicable(other.label())),
        },
        (_, CaseInput::Mutation(m)) => return Err(inapplicable(m.label())),
        (_, CaseInput::Payload(_)) => return Err(inapplicable("payload".into())),
        (_, CaseInput::RawBody(_)) => return Err(inapplicable("raw body payload".into())),
    };

    let is_target = |p: &Parameter| p.name == target.name && p.location == target.location;
    let text_of = |p: &Parameter| -> Option<String> {
        if !is_target(p) {
            return Some(p.seed_text());
        }
        match &slot {
            Slot::Text(s) | Slot::Raw(s) => Some(s.clone()),
            Slot::Json(v) => Some(value_text(v)),
            Slot::Omitted => None,
        }
    };

    // path
    let template = endpoint.path_template.trim_start_matches('/');
    let segments: Vec<&str> = template.split('/').collect();
    let mut rendered: Vec<String> = Vec::new();
    let mut trailing_slash = false;
    for (i, seg) in segments.iter().enumerate() {
        let placeholder = seg.strip_prefix('{').and_then(|s| s.strip_suffix('}'));
        match placeholder {
            Some(name) => {
                let value = endpoint.param(name, ParamLocation::Path).and_then(&text_of);
                match value {
                    Some(v) => rendered.push(encode_component(&v)),
                    None => trailing_slash = i + 1 == segments.len(),
                }
            }
            None => rendered.push(seg.to_string()),
        }
    }
    if moved_to == Some(ParamLocation::Path) {
        rendered.push(encode_component(&target.seed_text()));
        trailing_slash = false;
    }
    let mut path = format!("/{}", rendered.join("/"));
    if trailing_slash && !path.ends_with('/') {
        path.push('/');
    }

    // query
    let mut pairs: Vec<String> = Vec::new();
    for p in endpoint
        .base_parameters
        .iter()
        .filter(|p| p.location == ParamLocation::Query)
    {
        if let Some(v) = text_of(p) {
            pairs.push(format!("{}={}", encode_component(&p.name), encode_component(&v)));
        }
    }
    if moved_to == Some(ParamLocation::Query) {
        pairs.push(format!(
            "{}={}",
            encode_component(&target.name),
            encode_component(&target.seed_text())
        ));
    }
    let query = (!pairs.is_empty()).then(|| pairs.join("&"));

    // headers
    let mut headers: Vec<(String, String)> = endpoint
        .base_parameters
        .iter()
        .filter(|p| p.location == ParamLocation::Header)
        .filter_map(|p| text_of(p).map(|v| (p.name.clone(), header_safe(&v))))
        .collect();

    // body
    let body = if endpoint.has_body() {
        headers.push(("Content-Type".into(), endpoint.content_type.clone()));
        Some(render_body(endpoint, target, &slot))
    } else {
        None
    };

    Ok(RequestBlueprint {
        verb: endpoint.verb,
        path,
        query,
        headers,
        body,
    })
}

/// The all-seeds request for an endpoint, used as its baseline.
pub fn baseline_blueprint(endpoint: &Endpoint) -> RequestBlueprint {
    match endpoint.base_parameters.first() {
        Some(p) => {
            let loc = FuzzLocation {
                endpoint: 0,
                param_name: p.name.clone(),
                param_location: p.location,
                aspect: Aspect::Value,
            };
            materialize_case(endpoint, &loc, CaseInput::Mutation(&Mutation::ExampleClone), 0)
                .expect("example clone applies to every parameter")
        }
        None => RequestBlueprint {
            verb: endpoint.verb,
            path: endpoint.path_template.clone(),
            query: None,
            headers: Vec::new(),
            body: None,
        },
    }
}

fn render_body(endpoint: &Endpoint, target: &Parameter, slot: &Slot) -> Vec<u8> {
    let body_params = endpoint
        .base_parameters
        .iter()
        .filter(|p| p.location == ParamLocation::Body);
    let is_target = |p: &Parameter| p.name == target.name && p.location == target.location;

    if endpoint.content_type.starts_with(FORM_CONTENT_TYPE) {
        let mut form = form_urlencoded::Serializer::new(String::new());
        for p in body_params {
            let v = if is_target(p) {
                match slot {
                    Slot::Text(s) | Slot::Raw(s) => Some(s.clone()),
                    Slot::Json(v) => Some(value_text(v)),
                    Slot::Omitted => None,
                }
            } else {
                Some(p.seed_text())
            };
            if let Some(v) = v {
                form.append_pair(&p.name, &v);
            }
        }
        return form.finish().into_bytes();
    }

    const SPLICE: &str = "\u{0}raw-splice\u{0}";
    let mut obj = Map::new();
    let mut raw = None;
    for p in body_params {
        if !is_target(p) {
            obj.insert(p.name.clone(), p.seed());
            continue;
        }
        match slot {
            Slot::Text(s) => {
                obj.insert(p.name.clone(), Value::String(s.clone()));
            }
            Slot::Json(v) => {
                obj.insert(p.name.clone(), v.clone());
            }
            Slot::Raw(s) => {
                obj.insert(p.name.clone(), Value::String(SPLICE.into()));
                raw = Some(s.as_str());
            }
            Slot::Omitted => {}
        }
    }
    let text = Value::Object(obj).to_string();
    match raw {
        Some(r) => {
            let quoted = Value::String(SPLICE.into()).to_string();
            text.replacen(&quoted, r, 1).into_bytes()
        }
        None => text.into_bytes(),
    }
}
