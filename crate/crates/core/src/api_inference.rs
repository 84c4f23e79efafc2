//! Infers a [`RestModel`] from recorded HTTP traffic.
//!
//! The input is a JSON-lines log, one request per line:
//! `{"method": "DELETE", "url": "/users/abc123", "headers": [["Accept", "*/*"]],
//!   "body": "<base64 or null>", "ts": 1700000000000}`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rest_model::{
    parse_decimal, value_text, HttpVerb, Operation, ParamLocation, ParamType, Parameter, PathItem, RestModel,
};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("traffic contains no usable records")]
    EmptyTraffic,
    #[error("unparseable traffic record: {0}")]
    UnparseableRecord(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub method: String,
    pub url: String,
    #[serde(default, with = "header_pairs")]
    pub headers: Vec<(String, String)>,
    #[serde(default, with = "body_b64", skip_serializing_if = "Option::is_none")]
    pub body: Option<Vec<u8>>,
    #[serde(default, rename = "ts")]
    pub timestamp: u64,
}

mod header_pairs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Pairs(Vec<(String, String)>),
        Map(BTreeMap<String, String>),
    }

    pub fn serialize<S: Serializer>(h: &[(String, String)], s: S) -> Result<S::Ok, S::Error> {
        h.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, String)>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Pairs(p) => p,
            Repr::Map(m) => m.into_iter().collect(),
        })
    }
}

mod body_b64 {
    use base64::Engine as _;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(bytes) => s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let text: Option<String> = Option::deserialize(d)?;
        text.map(|t| {
            base64::engine::general_purpose::STANDARD
                .decode(t.as_bytes())
                .map_err(D::Error::custom)
        })
        .transpose()
    }
}

impl TrafficRecord {
    pub fn new(method: &str, url: &str) -> Self {
        TrafficRecord {
            method: method.to_ascii_uppercase(),
            url: url.to_string(),
            headers: Vec::new(),
            body: None,
            timestamp: 0,
        }
    }

    pub fn with_json_body(mut self, body: &Value) -> Self {
        self.headers.push(("Content-Type".into(), "application/json".into()));
        self.body = Some(body.to_string().into_bytes());
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Splits the URL into raw path and optional raw query.
    pub fn split_url(&self) -> (&str, Option<&str>) {
        let no_frag = self.url.split('#').next().unwrap_or("");
        match no_frag.split_once('?') {
            Some((p, q)) => (p, Some(q)),
            None => (no_frag, None),
        }
    }

    fn normalized(mut self) -> Result<(HttpVerb, Self), InferenceError> {
        self.method = self.method.to_ascii_uppercase();
        if !self.url.starts_with('/') {
            return Err(InferenceError::UnparseableRecord(format!(
                "url {:?} is not an absolute path",
                self.url
            )));
        }
        let verb = HttpVerb::parse(&self.method)
            .ok_or_else(|| InferenceError::UnparseableRecord(format!("unsupported method {:?}", self.method)))?;
        Ok((verb, self))
    }
}

/// Parses a JSON-lines traffic log. Blank lines are ignored; lines that do
/// not decode are counted and skipped.
pub fn parse_traffic_log(text: &str) -> (Vec<TrafficRecord>, usize) {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrafficRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                warn!("traffic line {}: {e}", lineno + 1);
                skipped += 1;
            }
        }
    }
    (records, skipped)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NameHint {
    pub prefix: String,
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceConfig {
    /// `(path prefix, segment index) -> parameter name`.
    pub param_name_hints: BTreeMap<(String, usize), String>,
    pub min_support: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            param_name_hints: BTreeMap::new(),
            min_support: 2,
        }
    }
}

impl InferenceConfig {
    pub fn with_hint(mut self, prefix: &str, index: usize, name: &str) -> Self {
        self.param_name_hints
            .insert((prefix.to_string(), index), name.to_string());
        self
    }

    pub fn with_hints(mut self, hints: impl IntoIterator<Item = NameHint>) -> Self {
        for h in hints {
            self.param_name_hints.insert((h.prefix, h.index), h.name);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub model: RestModel,
    /// Records dropped because they could not be interpreted.
    pub skipped: usize,
}

/// Headers that describe the transport or the session rather than the API.
const UNRECORDED_HEADERS: [&str; 10] = [
    "host",
    "content-length",
    "content-type",
    "connection",
    "transfer-encoding",
    "keep-alive",
    "te",
    "upgrade",
    "proxy-connection",
    "cookie",
];

/// Aggregates observed values into a parameter type: integer when every value
/// is an optionally signed digit string, number when every value is a decimal,
/// boolean when every value is `true`/`false`, otherwise string.
pub fn infer_scalar_type<S: AsRef<str>>(values: &[S]) -> ParamType {
    if values.is_empty() {
        return ParamType::String;
    }
    let is_int = |s: &str| {
        let b = s.strip_prefix(['+', '-']).unwrap_or(s);
        !b.is_empty() && b.bytes().all(|c| c.is_ascii_digit()) && s.parse::<i64>().is_ok()
    };
    let all = |f: &dyn Fn(&str) -> bool| values.iter().all(|v| f(v.as_ref()));
    if all(&is_int) {
        ParamType::Integer
    } else if all(&|s| parse_decimal(s).is_some() && !s.trim().is_empty() && s.trim() == s) {
        ParamType::Number
    } else if all(&|s| s == "true" || s == "false") {
        ParamType::Boolean
    } else {
        ParamType::String
    }
}

fn json_kind(v: &Value) -> Option<ParamType> {
    Some(match v {
        Value::Null => return None,
        Value::Bool(_) => ParamType::Boolean,
        Value::Number(n) if n.is_i64() || n.is_u64() => ParamType::Integer,
        Value::Number(_) => ParamType::Number,
        Value::String(_) => ParamType::String,
        Value::Array(_) => ParamType::Array,
        Value::Object(_) => ParamType::Object,
    })
}

fn join_kinds(kinds: impl Iterator<Item = ParamType>) -> ParamType {
    let set: HashSet<ParamType> = kinds.collect();
    match set.len() {
        0 => ParamType::String,
        1 => *set.iter().next().unwrap(),
        2 if set.contains(&ParamType::Integer) && set.contains(&ParamType::Number) => ParamType::Number,
        _ => ParamType::String,
    }
}

fn decode_component(raw: &str) -> String {
    percent_encoding::percent_decode_str(raw)
        .decode_utf8_lossy()
        .into_owned()
}

struct Prepared {
    verb: HttpVerb,
    segments: Vec<String>,
    query: Vec<(String, String)>,
    body: Option<serde_json::Map<String, Value>>,
    headers: Vec<(String, String)>,
}

impl Prepared {
    fn keys(&self) -> BTreeSet<&str> {
        let body = self.body.iter().flat_map(|b| b.keys());
        self.query
            .iter()
            .map(|(k, _)| k)
            .chain(body)
            .map(String::as_str)
            .collect()
    }
}

fn prepare(verb: HttpVerb, rec: &TrafficRecord) -> Prepared {
    let (path, query) = rec.split_url();
    let trimmed = path.strip_prefix('/').unwrap_or(path);
    let segments = if trimmed.is_empty() {
        Vec::new()
    } else {
        trimmed.split('/').map(str::to_string).collect()
    };
    let mut seen = HashSet::new();
    let query = query
        .map(|q| {
            form_urlencoded::parse(q.as_bytes())
                .filter(|(k, _)| seen.insert(k.to_string()))
                .map(|(k, v)| (k.into_owned(), v.into_owned()))
                .collect()
        })
        .unwrap_or_default();
    let body = rec
        .body
        .as_deref()
        .and_then(|b| serde_json::from_slice::<Value>(b).ok())
        .and_then(|v| match v {
            Value::Object(m) => Some(m),
            _ => None,
        });
    let mut seen = HashSet::new();
    let headers = rec
        .headers
        .iter()
        .filter(|(k, _)| !UNRECORDED_HEADERS.contains(&k.to_ascii_lowercase().as_str()))
        .filter(|(k, _)| seen.insert(k.to_ascii_lowercase()))
        .cloned()
        .collect();
    Prepared {
        verb,
        segments,
        query,
        body,
        headers,
    }
}

type Context<'a> = (Vec<&'a str>, BTreeSet<&'a str>);

/// Marks, per record, which path segments vary and therefore become
/// parameters. Records are grouped by (verb, segment count); within a group
/// a position is parameterized for every record sharing the same context
/// (all other segments) once at least `min_support` distinct values are seen
/// there. Only fully literal contexts count: a record that already has a
/// parameter elsewhere keeps its other segments, so `/safe/orders/{id}` and
/// `/safe/track/{id}` stay apart. The context also includes the set of query
/// and body keys, so `/a/ping?host=` and `/a/search?q=` stay literal. A
/// context needs at least one segment, so `/health` and `/search` never merge.
fn parameterize(records: &[Prepared], min_support: usize) -> Vec<Vec<bool>> {
    let mut masks: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.segments.len()]).collect();
    let mut groups: BTreeMap<(HttpVerb, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((r.verb, r.segments.len())).or_default().push(i);
    }
    for ((_, nseg), members) in groups {
        for pos in 0..nseg {
            // (other segments, query and body keys) -> (values here, records)
            let mut contexts: BTreeMap<Context, (HashSet<&str>, Vec<usize>)> = BTreeMap::new();
            for &ri in &members {
                if masks[ri].iter().any(|m| *m) {
                    continue;
                }
                let ctx: Vec<&str> = (0..nseg)
                    .filter(|&j| j != pos)
                    .map(|j| records[ri].segments[j].as_str())
                    .collect();
                if ctx.is_empty() {
                    continue;
                }
                let entry = contexts.entry((ctx, records[ri].keys())).or_default();
                entry.0.insert(records[ri].segments[pos].as_str());
                entry.1.push(ri);
            }
            for (values, rs) in contexts.into_values() {
                if values.len() >= min_support.max(1) {
                    for ri in rs {
                        masks[ri][pos] = true;
                    }
                }
            }
        }
    }
    masks
}

/// Builds the template for one record and the names of its placeholders,
/// keyed by segment position.
fn template_for(
    segments: &[String],
    mask: &[bool],
    hints: &BTreeMap<(String, usize), String>,
) -> (String, Vec<(usize, String)>) {
    let mut rendered: Vec<String> = Vec::with_capacity(segments.len());
    let mut names = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if mask[i] {
            let prefix = format!("/{}", rendered.join("/"));
            let name = hints
                .get(&(prefix, i))
                .cloned()
                .unwrap_or_else(|| format!("pathParam{}", names.len()));
            rendered.push(format!("{{{name}}}"));
            names.push((i, name));
        } else {
            rendered.push(seg.clone());
        }
    }
    (format!("/{}", rendered.join("/")), names)
}

#[derive(Default)]
struct Observed {
    values: Vec<Value>,
    present_in: usize,
}

/// Infers a model from traffic. Path clusters become templates; varying
/// segments, query keys, JSON body keys and replayable headers become
/// parameters whose example is the first observed value.
pub fn infer_model(records: &[TrafficRecord], cfg: &InferenceConfig) -> Result<Inference, InferenceError> {
    let mut skipped = 0;
    let mut prepared = Vec::new();
    for rec in records {
        match rec.clone().normalized() {
            Ok((verb, r)) => prepared.push(prepare(verb, &r)),
            Err(e) => {
                warn!("{e}");
                skipped += 1;
            }
        }
    }
    if prepared.is_empty() {
        return Err(InferenceError::EmptyTraffic);
    }
    let masks = parameterize(&prepared, cfg.min_support);

    // (template, verb) -> member record indices, in first-seen order
    let mut clusters: IndexMap<String, IndexMap<HttpVerb, Vec<usize>>> = IndexMap::new();
    let mut names_of: HashMap<usize, Vec<(usize, String)>> = HashMap::new();
    for (i, rec) in prepared.iter().enumerate() {
        let (template, names) = template_for(&rec.segments, &masks[i], &cfg.param_name_hints);
        names_of.insert(i, names);
        clusters
            .entry(template)
            .or_default()
            .entry(rec.verb)
            .or_default()
            .push(i);
    }

    let mut model = RestModel::default();
    for (template, by_verb) in clusters {
        let mut item = PathItem::default();
        for (verb, members) in by_verb {
            item.methods
                .insert(verb, build_operation(&prepared, &members, &names_of));
        }
        model.paths.insert(template, item);
    }
    debug_assert!(model.validate().is_ok());
    Ok(Inference { model, skipped })
}

/// Parses a traffic log and infers a model in one step.
pub fn infer_from_log(text: &str, cfg: &InferenceConfig) -> Result<Inference, InferenceError> {
    let (records, bad_lines) = parse_traffic_log(text);
    let mut inf = infer_model(&records, cfg)?;
    inf.skipped += bad_lines;
    Ok(inf)
}

fn build_operation(recs: &[Prepared], members: &[usize], names_of: &HashMap<usize, Vec<(usize, String)>>) -> Operation {
    let total = members.len();
    let mut params = Vec::new();

    // Path parameters: same positions for every member of the cluster.
    for (pos, name) in &names_of[&members[0]] {
        let raw: Vec<String> = members
            .iter()
            .map(|&m| decode_component(&recs[m].segments[*pos]))
            .collect();
        params.push(scalar_param(name, ParamLocation::Path, true, &raw));
    }

    let mut query: IndexMap<String, Vec<String>> = IndexMap::new();
    for &m in members {
        for (k, v) in &recs[m].query {
            query.entry(k.clone()).or_default().push(v.clone());
        }
    }
    for (k, vals) in query {
        params.push(scalar_param(&k, ParamLocation::Query, vals.len() == total, &vals));
    }

    let mut body: IndexMap<String, Observed> = IndexMap::new();
    for &m in members {
        if let Some(obj) = &recs[m].body {
            for (k, v) in obj {
                let o = body.entry(k.clone()).or_default();
                o.values.push(v.clone());
                o.present_in += 1;
            }
        }
    }
    for (k, o) in body {
        let ptype = join_kinds(o.values.iter().filter_map(json_kind));
        let example = o
            .values
            .iter()
            .find(|v| !v.is_null())
            .and_then(|v| ptype.coerce(v).or_else(|| ptype.coerce(&Value::String(value_text(v)))));
        params.push(Parameter {
            name: k,
            location: ParamLocation::Body,
            required: o.present_in == total,
            ptype,
            example,
        });
    }

    let mut headers: IndexMap<String, Vec<String>> = IndexMap::new();
    for &m in members {
        for (k, v) in &recs[m].headers {
            headers.entry(k.clone()).or_default().push(v.clone());
        }
    }
    for (k, vals) in headers {
        params.push(Parameter {
            name: k,
            location: ParamLocation::Header,
            required: vals.len() == total,
            ptype: ParamType::String,
            example: vals.first().cloned().map(Value::String),
        });
    }

    Operation {
        parameters: params,
        consumes: None,
    }
}

fn scalar_param(name: &str, location: ParamLocation, required: bool, raw: &[String]) -> Parameter {
    let ptype = infer_scalar_type(raw);
    let example = raw.first().and_then(|v| ptype.coerce(&Value::String(v.clone())));
    Parameter {
        name: name.to_string(),
        location,
        required,
        ptype,
        example,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rest_model::{parse_spec, serialize_spec};

    fn rec(m: &str, u: &str) -> TrafficRecord {
        TrafficRecord::new(m, u)
    }

    #[test]
    fn user_delete_pair_reproduces_spec() {
        let cfg = InferenceConfig::default().with_hint("/users", 1, "userId");
        let inf = infer_model(&[rec("DELETE", "/users/abc123"), rec("DELETE", "/users/xyz789")], &cfg).unwrap();
        let expected = parse_spec(
            r#"{"paths": {"/users/{userId}": {"delete": {"parameters": [
                {"name": "userId", "in": "path", "required": true,
                 "type": "string", "example": "abc123"}]}}}}"#,
        )
        .unwrap();
        assert_eq!(inf.model, expected);
        assert_eq!(inf.skipped, 0);
    }

    #[test]
    fn unhinted_segments_get_synthetic_names() {
        let inf = infer_model(
            &[rec("get", "/users/abc123"), rec("GET", "/users/xyz789")],
            &InferenceConfig::default(),
        )
        .unwrap();
        assert!(inf.model.paths.contains_key("/users/{pathParam0}"));
    }

    #[test]
    fn single_health_record() {
        let inf = infer_model(&[rec("GET", "/health")], &InferenceConfig::default()).unwrap();
        let op = &inf.model.paths["/health"].methods[&HttpVerb::Get];
        assert!(op.parameters.is_empty());
    }

    #[test]
    fn sibling_single_segment_paths_stay_literal() {
        let inf = infer_model(
            &[rec("GET", "/health"), rec("GET", "/search"), rec("GET", "/ping")],
            &InferenceConfig::default(),
        )
        .unwrap();
        assert_eq!(inf.model.paths.len(), 3);
    }

    #[test]
    fn query_limit_is_integer_and_required() {
        // Hand clustering: both records share path /items and verb GET, so
        // one cluster with query key `limit` seen in 2 of 2 records; values
        // {"5", "10"} are all digit strings, the first is 5.
        let inf = infer_model(
            &[rec("GET", "/items?limit=5"), rec("GET", "/items?limit=10")],
            &InferenceConfig::default(),
        )
        .unwrap();
        let op = &inf.model.paths["/items"].methods[&HttpVerb::Get];
        assert_eq!(
            op.parameters,
            vec![Parameter {
                name: "limit".into(),
                location: ParamLocation::Query,
                required: true,
                ptype: ParamType::Integer,
                example: Some(Value::from(5)),
            }]
        );
    }

    #[test]
    fn optional_query_and_body_keys() {
        let inf = infer_model(
            &[
                rec("POST", "/login").with_json_body(&serde_json::json!({"user": "a", "n": 1})),
                rec("POST", "/login?debug=true").with_json_body(&serde_json::json!({"user": "b", "n": 2.5, "x": [1]})),
            ],
            &InferenceConfig::default(),
        )
        .unwrap();
        let ps = &inf.model.paths["/login"].methods[&HttpVerb::Post].parameters;
        let by_name = |n: &str| ps.iter().find(|p| p.name == n).unwrap();
        assert!(!by_name("debug").required);
        assert_eq!(by_name("debug").ptype, ParamType::Boolean);
        assert_eq!(by_name("n").ptype, ParamType::Number);
        assert_eq!(by_name("n").example, Some(Value::from(1)));
        assert!(!by_name("x").required);
        assert_eq!(by_name("user").location, ParamLocation::Body);
    }

    #[test]
    fn scalar_typing_rules() {
        assert_eq!(infer_scalar_type(&["abc123"]), ParamType::String);
        assert_eq!(infer_scalar_type(&["true", "false"]), ParamType::Boolean);
        assert_eq!(infer_scalar_type(&["42", "-7"]), ParamType::Integer);
        assert_eq!(infer_scalar_type(&["42", "4.5"]), ParamType::Number);
        assert_eq!(infer_scalar_type(&["42", "x"]), ParamType::String);
        assert_eq!(infer_scalar_type(&[""]), ParamType::String);
    }

    #[test]
    fn empty_and_unparseable_traffic() {
        assert!(matches!(
            infer_model(&[], &InferenceConfig::default()),
            Err(InferenceError::EmptyTraffic)
        ));
        let inf = infer_model(
            &[rec("HEAD", "/x"), rec("GET", "http://h/x"), rec("GET", "/ok")],
            &InferenceConfig::default(),
        )
        .unwrap();
        assert_eq!(inf.skipped, 2);
        assert_eq!(inf.model.paths.len(), 1);
    }

    #[test]
    fn traffic_log_lines() {
        let log = concat!(
            r#"{"method":"DELETE","url":"/users/abc123","headers":[["X-Client","crawler"]],"body":null,"ts":1}"#,
            "\n\nnot json\n",
            r#"{"method":"POST","url":"/list","headers":{"Content-Type":"application/json"},"body":"eyJmb3JtYXQiOiJhbGxJZHMifQ==","ts":2}"#,
            "\n"
        );
        let inf = infer_from_log(log, &InferenceConfig::default()).unwrap();
        assert_eq!(inf.skipped, 1);
        let list = &inf.model.paths["/list"].methods[&HttpVerb::Post].parameters[0];
        assert_eq!(list.example, Some(Value::String("allIds".into())));
        let del = &inf.model.paths["/users/abc123"].methods[&HttpVerb::Delete].parameters[0];
        assert_eq!(del.location, ParamLocation::Header);
        assert!(parse_spec(&serialize_spec(&inf.model)).is_ok());
    }
}
