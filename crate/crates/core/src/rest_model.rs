//! REST model: the subset of OpenAPI that the fuzzer consumes and the
//! inference front end produces.
//!
//! The accepted document shape is
//!
//! ```json
//! { "paths": { "/users/{userId}": { "delete": { "parameters": [
//!     { "name": "userId", "in": "path", "required": true,
//!       "type": "string", "example": "abc123" } ] } } } }
//! ```
//!
//! Unknown keys are ignored; known keys are checked strictly and every
//! rejection carries a JSON pointer to the offending node.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("spec is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed spec at {pointer}: {reason}")]
    Malformed { pointer: String, reason: String },
}

impl SpecError {
    fn at(pointer: impl Into<String>, reason: impl Into<String>) -> Self {
        SpecError::Malformed {
            pointer: pointer.into(),
            reason: reason.into(),
        }
    }

    /// JSON pointer of the defect, when the error is structural.
    pub fn pointer(&self) -> Option<&str> {
        match self {
            SpecError::Malformed { pointer, .. } => Some(pointer),
            SpecError::Json(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HttpVerb {
    Get,
    Post,
    Put,
    Delete,
    Patch,
}

impl HttpVerb {
    pub const ALL: [HttpVerb; 5] = [
        HttpVerb::Get,
        HttpVerb::Post,
        HttpVerb::Put,
        HttpVerb::Delete,
        HttpVerb::Patch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HttpVerb::Get => "get",
            HttpVerb::Post => "post",
            HttpVerb::Put => "put",
            HttpVerb::Delete => "delete",
            HttpVerb::Patch => "patch",
        }
    }

    /// Upper-case form used on the wire.
    pub fn method(self) -> &'static str {
        match self {
            HttpVerb::Get => "GET",
            HttpVerb::Post => "POST",
            HttpVerb::Put => "PUT",
            HttpVerb::Delete => "DELETE",
            HttpVerb::Patch => "PATCH",
        }
    }

    /// Case-insensitive parse.
    pub fn parse(s: &str) -> Option<HttpVerb> {
        HttpVerb::ALL.into_iter().find(|v| v.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for HttpVerb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamLocation {
    Path,
    Query,
    Header,
    Body,
}

impl ParamLocation {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamLocation::Path => "path",
            ParamLocation::Query => "query",
            ParamLocation::Header => "header",
            ParamLocation::Body => "body",
        }
    }

    pub fn parse(s: &str) -> Option<ParamLocation> {
        match s {
            "path" => Some(ParamLocation::Path),
            "query" => Some(ParamLocation::Query),
            "header" => Some(ParamLocation::Header),
            "body" => Some(ParamLocation::Body),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
}

impl ParamType {
    pub const ALL: [ParamType; 6] = [
        ParamType::String,
        ParamType::Integer,
        ParamType::Number,
        ParamType::Boolean,
        ParamType::Array,
        ParamType::Object,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Array => "array",
            ParamType::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<ParamType> {
        ParamType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Coerces `value` into the canonical JSON representation of this type.
    ///
    /// Scalars given as strings (`"5"` for an integer) are accepted and
    /// converted; structural types must already have the right shape.
    pub fn coerce(self, value: &Value) -> Option<Value> {
        match (self, value) {
            (ParamType::String, Value::String(_)) => Some(value.clone()),
            (ParamType::Integer, Value::Number(n)) if n.is_i64() || n.is_u64() => Some(value.clone()),
            (ParamType::Integer, Value::String(s)) => s.trim().parse::<i64>().ok().map(Value::from),
            (ParamType::Number, Value::Number(_)) => Some(value.clone()),
            (ParamType::Number, Value::String(s)) => parse_decimal(s).map(|n| {
                // keep integral decimals integral so the example round-trips textually
                s.trim()
                    .parse::<i64>()
                    .map(Value::from)
                    .unwrap_or_else(|_| Value::from(n))
            }),
            (ParamType::Boolean, Value::Bool(_)) => Some(value.clone()),
            (ParamType::Boolean, Value::String(s)) => match s.as_str() {
                "true" => Some(Value::Bool(true)),
                "false" => Some(Value::Bool(false)),
                _ => None,
            },
            (ParamType::Array, Value::Array(_)) => Some(value.clone()),
            (ParamType::Object, Value::Object(_)) => Some(value.clone()),
            _ => None,
        }
    }

    /// Smallest non-degenerate value of this type built around a seed.
    pub fn representative(self, seed: &Value) -> Value {
        match self {
            ParamType::String => Value::String(value_text(seed)),
            ParamType::Integer => Value::from(1),
            ParamType::Number => Value::from(1.5),
            ParamType::Boolean => Value::Bool(true),
            ParamType::Array => Value::Array(vec![seed.clone()]),
            ParamType::Object => {
                let mut m = Map::new();
                m.insert("k".to_string(), seed.clone());
                Value::Object(m)
            }
        }
    }

    /// Default seed used when a parameter carries no example.
    pub fn default_seed(self) -> Value {
        match self {
            ParamType::String => Value::String("test".to_string()),
            ParamType::Integer => Value::from(1),
            ParamType::Number => Value::from(1.5),
            ParamType::Boolean => Value::Bool(true),
            ParamType::Array => Value::Array(vec![]),
            ParamType::Object => Value::Object(Map::new()),
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a plain decimal literal (no `inf`, `nan` or hex).
pub(crate) fn parse_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    if body.is_empty() {
        return None;
    }
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let mut parts = mantissa.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !frac.is_none_or(digits) {
        return None;
    }
    if int.is_empty() && frac.is_none_or(str::is_empty) {
        return None;
    }
    if let Some(e) = exponent {
        let e = e.strip_prefix(['+', '-']).unwrap_or(e);
        if e.is_empty() || !digits(e) {
            return None;
        }
    }
    t.parse::<f64>().ok().filter(|f| f.is_finite())
}

/// Text form of a JSON value as it would appear in a URL or header.
pub fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub location: ParamLocation,
    pub required: bool,
    pub ptype: ParamType,
    pub example: Option<Value>,
}

impl Parameter {
    /// The value replayed for this parameter when it is not being fuzzed.
    pub fn seed(&self) -> Value {
        self.example.clone().unwrap_or_else(|| self.ptype.default_seed())
    }

    pub fn seed_text(&self) -> String {
        value_text(&self.seed())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Operation {
    pub parameters: Vec<Parameter>,
    /// Content type hint for body parameters; `None` means JSON.
    pub consumes: Option<String>,
}

impl Operation {
    pub fn content_type(&self) -> &str {
        self.consumes.as_deref().unwrap_or("application/json")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathItem {
    pub methods: IndexMap<HttpVerb, Operation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RestModel {
    pub paths: IndexMap<String, PathItem>,
}

/// Escapes one JSON-pointer reference token.
pub fn pointer_token(s: &str) -> String {
    s.replace('~', "~0").replace('/', "~1")
}

/// Placeholder names of a path template, in order. Errors describe the
/// first bad segment.
pub fn template_placeholders(template: &str) -> Result<Vec<String>, String> {
    let rest = template
        .strip_prefix('/')
        .ok_or_else(|| "path template must begin with '/'".to_string())?;
    let mut names = Vec::new();
    for seg in rest.split('/') {
        if seg.contains('{') || seg.contains('}') {
            let name = seg
                .strip_prefix('{')
                .and_then(|s| s.strip_suffix('}'))
                .filter(|n| !n.is_empty() && !n.contains(['{', '}']))
                .ok_or_else(|| format!("bad placeholder segment {seg:?}"))?;
            if names.iter().any(|n| n == name) {
                return Err(format!("placeholder {{{name}}} repeated"));
            }
            names.push(name.to_string());
        }
    }
    Ok(names)
}

impl RestModel {
    pub fn endpoint_count(&self) -> usize {
        self.paths.values().map(|p| p.methods.len()).sum()
    }

    /// Checks every model invariant; the error carries a JSON pointer.
    pub fn validate(&self) -> Result<(), SpecError> {
        for (template, item) in &self.paths {
            let path_ptr = format!("/paths/{}", pointer_token(template));
            let placeholders = template_placeholders(template).map_err(|r| SpecError::at(&path_ptr, r))?;
            if item.methods.is_empty() {
                return Err(SpecError::at(&path_ptr, "path declares no methods"));
            }
            for (verb, op) in &item.methods {
                let op_ptr = format!("{path_ptr}/{}", verb.as_str());
                validate_operation(op, &op_ptr, &path_ptr, &placeholders)?;
            }
        }
        Ok(())
    }
}

fn validate_operation(op: &Operation, op_ptr: &str, path_ptr: &str, placeholders: &[String]) -> Result<(), SpecError> {
    for (i, p) in op.parameters.iter().enumerate() {
        let ptr = format!("{op_ptr}/parameters/{i}");
        if p.name.is_empty() {
            return Err(SpecError::at(ptr, "parameter name is empty"));
        }
        if p.location == ParamLocation::Path {
            if !p.required {
                return Err(SpecError::at(ptr, "path parameters must be required"));
            }
            if !placeholders.contains(&p.name) {
                return Err(SpecError::at(
                    ptr,
                    format!("path parameter {:?} has no placeholder", p.name),
                ));
            }
        }
        if let Some(ex) = &p.example {
            if p.ptype.coerce(ex).as_ref() != Some(ex) {
                return Err(SpecError::at(
                    format!("{ptr}/example"),
                    format!("example does not parse as {}", p.ptype),
                ));
            }
        }
        if op.parameters[..i]
            .iter()
            .any(|q| q.name == p.name && q.location == p.location)
        {
            return Err(SpecError::at(ptr, format!("duplicate parameter {:?}", p.name)));
        }
    }
    for name in placeholders {
        let declared = op
            .parameters
            .iter()
            .filter(|p| p.location == ParamLocation::Path && &p.name == name)
            .count();
        if declared != 1 {
            return Err(SpecError::at(
                path_ptr,
                format!("placeholder {{{name}}} has no matching path parameter"),
            ));
        }
    }
    Ok(())
}

const NON_SUPPORTED_VERBS: [&str; 4] = ["head", "options", "trace", "connect"];

/// Parses a spec document.
pub fn parse_spec(text: &str) -> Result<RestModel, SpecError> {
    let doc: Value = serde_json::from_str(text)?;
    parse_spec_value(&doc)
}

pub fn parse_spec_value(doc: &Value) -> Result<RestModel, SpecError> {
    let root = doc
        .as_object()
        .ok_or_else(|| SpecError::at("", "document is not an object"))?;
    let paths = root
        .get("paths")
        .ok_or_else(|| SpecError::at("", "missing \"paths\""))?
        .as_object()
        .ok_or_else(|| SpecError::at("/paths", "\"paths\" is not an object"))?;

    let mut model = RestModel::default();
    for (template, item) in paths {
        let path_ptr = format!("/paths/{}", pointer_token(template));
        let item = item
            .as_object()
            .ok_or_else(|| SpecError::at(&path_ptr, "path item is not an object"))?;
        let mut methods = IndexMap::new();
        for (key, op) in item {
            let Some(verb) = HttpVerb::parse(key) else {
                let lower = key.to_ascii_lowercase();
                if NON_SUPPORTED_VERBS.contains(&lower.as_str()) {
                    return Err(SpecError::at(
                        format!("{path_ptr}/{}", pointer_token(key)),
                        format!("unknown verb {key:?}"),
                    ));
                }
                // path-level metadata such as "summary" or "x-*" extensions
                continue;
            };
            let op_ptr = format!("{path_ptr}/{}", pointer_token(key));
            if methods.contains_key(&verb) {
                return Err(SpecError::at(op_ptr, format!("verb {key:?} repeated")));
            }
            methods.insert(verb, parse_operation(op, &op_ptr)?);
        }
        model.paths.insert(template.clone(), PathItem { methods });
    }
    model.validate()?;
    Ok(model)
}

fn parse_operation(op: &Value, ptr: &str) -> Result<Operation, SpecError> {
    let obj = op
        .as_object()
        .ok_or_else(|| SpecError::at(ptr, "operation is not an object"))?;
    let mut parameters = Vec::new();
    if let Some(params) = obj.get("parameters") {
        let arr = params
            .as_array()
            .ok_or_else(|| SpecError::at(format!("{ptr}/parameters"), "not an array"))?;
        for (i, p) in arr.iter().enumerate() {
            parameters.push(parse_parameter(p, &format!("{ptr}/parameters/{i}"))?);
        }
    }
    let consumes = match obj.get("consumes") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Array(a)) => match a.first() {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                return Err(SpecError::at(
                    format!("{ptr}/consumes/0"),
                    "content type is not a string",
                ))
            }
        },
        Some(_) => {
            return Err(SpecError::at(
                format!("{ptr}/consumes"),
                "expected a string or array of strings",
            ))
        }
    };
    Ok(Operation { parameters, consumes })
}

fn parse_parameter(p: &Value, ptr: &str) -> Result<Parameter, SpecError> {
    let obj = p
        .as_object()
        .ok_or_else(|| SpecError::at(ptr, "parameter is not an object"))?;
    let field_str = |key: &str| -> Result<&str, SpecError> {
        obj.get(key)
            .ok_or_else(|| SpecError::at(ptr, format!("missing {key:?}")))?
            .as_str()
            .ok_or_else(|| SpecError::at(format!("{ptr}/{key}"), "expected a string"))
    };
    let name = field_str("name")?.to_string();
    let loc_text = field_str("in")?;
    let location = ParamLocation::parse(loc_text)
        .ok_or_else(|| SpecError::at(format!("{ptr}/in"), format!("unknown location {loc_text:?}")))?;
    let type_text = field_str("type")?;
    let ptype = ParamType::parse(type_text)
        .ok_or_else(|| SpecError::at(format!("{ptr}/type"), format!("unknown type {type_text:?}")))?;
    let required = match obj.get("required") {
        None => location == ParamLocation::Path,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(SpecError::at(format!("{ptr}/required"), "expected a boolean")),
    };
    let example =
        match obj.get("example") {
            None => None,
            Some(v) => Some(ptype.coerce(v).ok_or_else(|| {
                SpecError::at(format!("{ptr}/example"), format!("example does not parse as {ptype}"))
            })?),
        };
    Ok(Parameter {
        name,
        location,
        required,
        ptype,
        example,
    })
}

/// Serializes a model to the canonical pretty-printed document. Keys appear
/// in insertion order, so the output is byte-stable.
pub fn serialize_spec(model: &RestModel) -> String {
    let mut out = serde_json::to_string_pretty(&spec_to_value(model)).expect("spec values always serialize");
    out.push('\n');
    out
}

pub fn spec_to_value(model: &RestModel) -> Value {
    let mut paths = Map::new();
    for (template, item) in &model.paths {
        let mut methods = Map::new();
        for (verb, op) in &item.methods {
            let mut o = Map::new();
            if let Some(c) = &op.consumes {
                o.insert("consumes".into(), Value::Array(vec![Value::String(c.clone())]));
            }
            let params = op.parameters.iter().map(parameter_to_value).collect();
            o.insert("parameters".into(), Value::Array(params));
            methods.insert(verb.as_str().to_string(), Value::Object(o));
        }
        paths.insert(template.clone(), Value::Object(methods));
    }
    let mut root = Map::new();
    root.insert("paths".into(), Value::Object(paths));
    Value::Object(root)
}

pub fn parameter_to_value(p: &Parameter) -> Value {
    let mut o = Map::new();
    o.insert("name".into(), Value::String(p.name.clone()));
    o.insert("in".into(), Value::String(p.location.as_str().into()));
    o.insert("required".into(), Value::Bool(p.required));
    o.insert("type".into(), Value::String(p.ptype.as_str().into()));
    if let Some(ex) = &p.example {
        o.insert("example".into(), ex.clone());
    }
    Value::Object(o)
}
