//! Randomized invariant suites. Each suite runs 10 000 cases and is shared
//! between the `properties` test target and the acceptance run.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use backrest::api_inference::{infer_model, infer_scalar_type, InferenceConfig, TrafficRecord};
use backrest::detectors::{Confidence, EndpointRef, Evidence, EvidenceKind, Finding, LocationRef};
use backrest::engine::{run_campaign_with, EngineConfig, Mode, ScriptedTransport};
use backrest::feedback::{decode_feedback, encode_coverage, encode_taint, TaintHit};
use backrest::payloads::{PayloadDictionary, VulnType};
use backrest::planner::{
    baseline_blueprint, build_test_plan, materialize_case, Aspect, CaseInput, PlanOptions, RequestBlueprint, TestPlan,
};
use backrest::reporting::{dedup_key, FuzzReport};
use backrest::rest_model::{
    parse_spec, serialize_spec, HttpVerb, Operation, ParamLocation, ParamType, Parameter, PathItem, RestModel,
};
use indexmap::IndexMap;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use serde_json::{json, Value};

pub const CASES: u32 = 10_000;

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: &[Suite] = &[
    ("spec round-trip", spec_round_trip),
    ("plan purity and determinism", plan_purity),
    ("plan structure preservation", structure_preservation),
    ("inference idempotence", inference_idempotence),
    ("scalar typing order-insensitivity", typing_order_insensitive),
    ("dedup idempotence", dedup_idempotence),
    ("feedback decode on random headers", feedback_decode_total),
    ("threshold matches hand simulation", threshold_oracle),
    ("coverage trace monotonicity", coverage_monotone),
];

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

const VERBS: [HttpVerb; 5] = [
    HttpVerb::Get,
    HttpVerb::Post,
    HttpVerb::Put,
    HttpVerb::Delete,
    HttpVerb::Patch,
];

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9]{0,5}".prop_filter("reserved", |s| s != "body")
}

fn example_for(t: ParamType) -> BoxedStrategy<Value> {
    match t {
        ParamType::String => "\\PC{0,8}".prop_map(Value::from).boxed(),
        ParamType::Integer => any::<i64>().prop_map(Value::from).boxed(),
        ParamType::Number => (-4000i32..4000).prop_map(|n| Value::from(f64::from(n) / 4.0)).boxed(),
        ParamType::Boolean => any::<bool>().prop_map(Value::from).boxed(),
        ParamType::Array => prop::collection::vec(0i64..100, 0..3).prop_map(|v| json!(v)).boxed(),
        ParamType::Object => "[a-z]{1,4}".prop_map(|s| json!({"k": s})).boxed(),
    }
}

fn ptype() -> impl Strategy<Value = ParamType> {
    prop::sample::select(ParamType::ALL.to_vec())
}

fn param(location: ParamLocation) -> impl Strategy<Value = Parameter> {
    (ident(), any::<bool>(), ptype())
        .prop_flat_map(move |(name, required, t)| {
            (Just(name), Just(required), Just(t), prop::option::of(example_for(t)))
        })
        .prop_map(move |(name, required, ptype, example)| Parameter {
            name,
            location,
            required,
            ptype,
            example,
        })
}

fn any_location() -> impl Strategy<Value = ParamLocation> {
    prop::sample::select(vec![ParamLocation::Query, ParamLocation::Header, ParamLocation::Body])
}

fn operation(placeholders: Vec<String>) -> impl Strategy<Value = Operation> {
    let path_params: Vec<BoxedStrategy<Parameter>> = placeholders
        .into_iter()
        .map(|name| {
            prop_oneof![Just(ParamType::String), Just(ParamType::Integer)]
                .prop_flat_map(move |t| (Just(name.clone()), Just(t), example_for(t)))
                .prop_map(|(name, ptype, ex)| Parameter {
                    name,
                    location: ParamLocation::Path,
                    required: true,
                    ptype,
                    example: Some(ex),
                })
                .boxed()
        })
        .collect();
    let others = prop::collection::vec(any_location().prop_flat_map(param), 0..4);
    let consumes = prop::option::of(Just("application/x-www-form-urlencoded".to_string()));
    (path_params, others, consumes).prop_map(|(mut params, others, consumes)| {
        for p in others {
            if !params.iter().any(|q| q.name == p.name && q.location == p.location) {
                params.push(p);
            }
        }
        Operation {
            parameters: params,
            consumes,
        }
    })
}

fn path_item() -> impl Strategy<Value = (String, PathItem)> {
    prop::collection::vec(prop::option::of(ident()), 1..4)
        .prop_flat_map(|segs| {
            let mut placeholders = Vec::new();
            let rendered: Vec<String> = segs
                .iter()
                .enumerate()
                .map(|(i, s)| match s {
                    Some(lit) => lit.clone(),
                    None => {
                        let name = format!("p{i}");
                        placeholders.push(name.clone());
                        format!("{{{name}}}")
                    }
                })
                .collect();
            let template = format!("/{}", rendered.join("/"));
            let verbs = prop::sample::subsequence(VERBS.to_vec(), 1..=3);
            let ops = prop::collection::vec(operation(placeholders), 3);
            (Just(template), verbs, ops)
        })
        .prop_map(|(template, verbs, ops)| {
            let methods = verbs.into_iter().zip(ops).collect();
            (template, PathItem { methods })
        })
}

pub fn model() -> impl Strategy<Value = RestModel> {
    prop::collection::vec(path_item(), 1..4).prop_map(|items| {
        let mut model = RestModel::default();
        for (template, item) in items {
            model.paths.entry(template).or_insert(item);
        }
        model
    })
}

pub fn spec_round_trip() -> Result<(), String> {
    run(model(), |m| {
        prop_assert!(m.validate().is_ok());
        let text = serialize_spec(&m);
        let back = parse_spec(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(serialize_spec(&back), text);
        Ok(())
    })
}

fn reversed(m: &RestModel) -> RestModel {
    let mut out = RestModel::default();
    for (t, item) in m.paths.iter().rev() {
        let methods = item.methods.iter().rev().map(|(v, o)| (*v, o.clone())).collect();
        out.paths.insert(t.clone(), PathItem { methods });
    }
    out
}

pub fn plan_purity() -> Result<(), String> {
    run((model(), any::<u64>()), |(m, seed)| {
        let before = m.clone();
        let a = build_test_plan(&m, seed, PlanOptions::default()).unwrap();
        let b = build_test_plan(&m, seed, PlanOptions::default()).unwrap();
        prop_assert_eq!(&m, &before);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.to_json(), b.to_json());
        let r = build_test_plan(&reversed(&m), seed, PlanOptions::default()).unwrap();
        prop_assert_eq!(a.to_json(), r.to_json());
        Ok(())
    })
}

fn query_pairs(bp: &RequestBlueprint) -> Vec<(String, String)> {
    bp.query
        .as_deref()
        .map(|q| form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

fn body_object(bp: &RequestBlueprint) -> Option<serde_json::Map<String, Value>> {
    let b = bp.body.as_ref()?;
    match serde_json::from_slice(b) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

fn check_preserved(plan: &TestPlan) -> Result<(), TestCaseError> {
    for entry in &plan.entries {
        let base = baseline_blueprint(&entry.endpoint);
        for loc in entry.locations.iter().filter(|l| l.aspect == Aspect::Value) {
            let bp = materialize_case(&entry.endpoint, loc, CaseInput::Payload("zq<'\"&=>"), 7)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(bp.verb, base.verb);
            if loc.param_location != ParamLocation::Path {
                prop_assert_eq!(&bp.path, &base.path);
            }
            let fuzzed = |k: &str, at: ParamLocation| loc.param_location == at && loc.param_name == k;
            let keep_q = |v: Vec<(String, String)>| -> Vec<(String, String)> {
                v.into_iter()
                    .filter(|(k, _)| !fuzzed(k, ParamLocation::Query))
                    .collect()
            };
            prop_assert_eq!(keep_q(query_pairs(&bp)), keep_q(query_pairs(&base)));
            let keep_h = |v: &[(String, String)]| -> Vec<(String, String)> {
                v.iter()
                    .filter(|(k, _)| !fuzzed(k, ParamLocation::Header))
                    .cloned()
                    .collect()
            };
            prop_assert_eq!(keep_h(&bp.headers), keep_h(&base.headers));
            if entry.endpoint.content_type == "application/json" {
                if let (Some(mut got), Some(mut want)) = (body_object(&bp), body_object(&base)) {
                    if loc.param_location == ParamLocation::Body {
                        got.remove(&loc.param_name);
                        want.remove(&loc.param_name);
                    }
                    prop_assert_eq!(got, want);
                }
            }
        }
    }
    Ok(())
}

pub fn structure_preservation() -> Result<(), String> {
    run(model(), |m| {
        let plan = build_test_plan(&m, 0, PlanOptions { fuzz_headers: true }).unwrap();
        check_preserved(&plan)
    })
}

fn traffic() -> impl Strategy<Value = Vec<TrafficRecord>> {
    let seg = prop::sample::select(vec!["users", "orders", "a1", "b2", "7", "9", "x"]);
    let record = (
        prop::sample::select(vec!["GET", "POST", "DELETE"]),
        prop::collection::vec(seg, 1..4),
        prop::option::of((prop::sample::select(vec!["limit", "q"]), "[a-z0-9]{1,3}")),
        prop::option::of(prop::collection::btree_map(
            prop::sample::select(vec!["name", "n", "flag"]),
            prop_oneof![
                "[a-z]{0,3}".prop_map(Value::from),
                (0i64..50).prop_map(Value::from),
                any::<bool>().prop_map(Value::from),
            ],
            1..3,
        )),
    )
        .prop_map(|(method, segs, query, body)| {
            let mut url = format!("/{}", segs.join("/"));
            if let Some((k, v)) = query {
                url.push_str(&format!("?{k}={v}"));
            }
            let rec = TrafficRecord::new(method, &url);
            match body {
                Some(b) => rec.with_json_body(&json!(b)),
                None => rec,
            }
        });
    prop::collection::vec(record, 1..8)
}

pub fn inference_idempotence() -> Result<(), String> {
    run(traffic(), |records| {
        let cfg = InferenceConfig::default();
        let once = infer_model(&records, &cfg).unwrap().model;
        let doubled: Vec<TrafficRecord> = records.iter().chain(records.iter()).cloned().collect();
        let twice = infer_model(&doubled, &cfg).unwrap().model;
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.validate().is_ok());
        let back = parse_spec(&serialize_spec(&once)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(back, once);
        Ok(())
    })
}

pub fn typing_order_insensitive() -> Result<(), String> {
    let value = prop_oneof![
        "[+-]?[0-9]{1,4}",
        "[0-9]{1,3}\\.[0-9]{1,2}",
        prop::sample::select(vec!["true".to_string(), "false".to_string()]),
        "[a-z0-9.+-]{0,4}",
    ];
    let values = prop::collection::vec(value, 1..6).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()));
    run(values, |(v, shuffled)| {
        prop_assert_eq!(infer_scalar_type(&v), infer_scalar_type(&shuffled));
        Ok(())
    })
}

fn finding() -> impl Strategy<Value = Finding> {
    (
        prop::sample::select(vec!["/a", "/b/{id}"]),
        prop::sample::select(vec!["x", "y"]),
        prop::sample::select(VulnType::ALL.to_vec()),
        any::<bool>(),
        prop::option::of(prop::sample::select(vec!["sql:1", "js:2"])),
        0u64..40,
    )
        .prop_map(|(path, param, vuln_type, confirmed, sink, case_id)| {
            let evidence = vec![match sink {
                Some(s) => Evidence {
                    kind: EvidenceKind::TaintSink,
                    detail: format!("reached {s}"),
                    case_id,
                    sink_id: Some(s.to_string()),
                    fragment: Some("frag".into()),
                },
                None => Evidence {
                    kind: EvidenceKind::ErrorSignature,
                    detail: "near".into(),
                    case_id,
                    sink_id: None,
                    fragment: None,
                },
            }];
            Finding {
                endpoint: EndpointRef {
                    path: path.to_string(),
                    verb: HttpVerb::Get,
                },
                location: LocationRef {
                    param: param.to_string(),
                    location: ParamLocation::Query,
                    aspect: Aspect::Value,
                },
                vuln_type,
                confidence: if confirmed {
                    Confidence::Confirmed
                } else {
                    Confidence::Potential
                },
                case_id,
                evidence,
            }
        })
}

pub fn dedup_idempotence() -> Result<(), String> {
    run(prop::collection::vec(finding(), 0..12), |fs| {
        let mut once = FuzzReport::new(Value::Null);
        for f in &fs {
            once.add_finding(f.clone());
        }
        let mut twice = once.clone();
        for f in &fs {
            twice.add_finding(f.clone());
        }
        prop_assert_eq!(&once, &twice);
        let keys: HashSet<_> = once.findings.iter().map(dedup_key).collect();
        prop_assert_eq!(keys.len(), once.findings.len());
        Ok(())
    })
}

fn header_name() -> impl Strategy<Value = String> {
    prop_oneof![
        prop::sample::select(vec![
            "X-Backrest-Coverage",
            "x-backrest-taint",
            "X-BACKREST-COVERAGE",
            "X-Backrest-Taint"
        ])
        .prop_map(str::to_string),
        "[A-Za-z-]{0,12}",
    ]
}

fn header_value() -> impl Strategy<Value = String> {
    use base64::Engine as _;
    prop_oneof![
        "\\PC{0,24}",
        "[0-9]{0,22}/[0-9]{0,22}",
        prop::collection::vec(any::<u8>(), 0..48).prop_map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
        "\\PC{0,40}".prop_map(|s| base64::engine::general_purpose::STANDARD.encode(s)),
        "[a-z]{1,6}".prop_map(|s| {
            let doc = format!(r#"[{{"sinkId":"{s}","sinkType":"SQLI","fragment":"{s}"}}]"#);
            base64::engine::general_purpose::STANDARD.encode(doc)
        }),
    ]
}

pub fn feedback_decode_total() -> Result<(), String> {
    let headers = prop::collection::vec((header_name(), header_value()), 0..6);
    let valid = (
        0u64..1000,
        0u64..1000,
        prop::collection::vec(("[a-z:0-9]{1,8}", "\\PC{1,12}"), 0..3),
    );
    run((headers, valid), |(headers, (a, b, hits))| {
        if let Some(fb) = decode_feedback(&headers) {
            if let Some(c) = fb.coverage {
                prop_assert!(c.covered <= c.total);
            }
            prop_assert!(fb.taint.iter().all(|h| !h.matched_fragment.is_empty()));
        }
        let (covered, total) = (a.min(b), a.max(b));
        let hits: Vec<TaintHit> = hits
            .into_iter()
            .map(|(id, frag)| TaintHit {
                sink_id: id,
                sink_vuln_type: VulnType::Cmdi,
                matched_fragment: frag,
            })
            .collect();
        let mut sent = vec![("X-Backrest-Coverage".to_string(), encode_coverage(covered, total))];
        if !hits.is_empty() {
            sent.push(("X-Backrest-Taint".to_string(), encode_taint(&hits)));
        }
        let fb = decode_feedback(&sent).expect("feedback present");
        prop_assert_eq!(fb.coverage.map(|c| (c.covered, c.total)), Some((covered, total)));
        prop_assert_eq!(fb.taint, hits);
        Ok(())
    })
}

/// Engine configuration for a scripted target. The signature set is compiled
/// once per process.
pub fn scripted_config(mode: Mode, dict: PayloadDictionary, threshold: u32) -> EngineConfig {
    static BASE: OnceLock<EngineConfig> = OnceLock::new();
    let mut cfg = BASE
        .get_or_init(|| EngineConfig::new("http://scripted", Mode::B, tagged_dictionary(&[1; 5])))
        .clone();
    cfg.mode = mode;
    cfg.dictionary = dict;
    cfg.threshold = threshold;
    cfg
}

/// Payload text that identifies its type and index in the request line.
pub fn tag(t: VulnType, i: usize) -> String {
    format!("p{}x{i}y", t.as_str())
}

pub fn tagged_dictionary(sizes: &[usize; 5]) -> PayloadDictionary {
    let entries: IndexMap<VulnType, Vec<String>> = VulnType::ALL
        .into_iter()
        .zip(sizes)
        .map(|(t, n)| (t, (0..*n).map(|i| tag(t, i)).collect()))
        .collect();
    PayloadDictionary::from_entries(entries).unwrap()
}

/// One GET endpoint with a single string query parameter.
pub fn single_query_plan() -> TestPlan {
    let model = parse_spec(
        r#"{"paths": {"/p": {"get": {"parameters": [
            {"name": "v", "in": "query", "required": true, "type": "string", "example": "seed"}]}}}}"#,
    )
    .unwrap();
    build_test_plan(&model, 0, PlanOptions::default()).unwrap()
}

/// Hand simulation of the coverage loop for one type: every payload is sent
/// until more than `threshold` consecutive payloads fail to grow coverage.
pub fn simulate_type(n: usize, threshold: u64, grows: &HashSet<usize>) -> u64 {
    let mut sent = 0;
    let mut stale = 0;
    for i in 0..n {
        sent += 1;
        stale = if grows.contains(&i) { 0 } else { stale + 1 };
        if stale > threshold {
            break;
        }
    }
    sent
}

/// Requests per dictionary type when running `plan` in `mode` against a
/// target whose coverage grows exactly on the payloads in `grows`.
pub fn payloads_sent(
    plan: &TestPlan,
    dict: PayloadDictionary,
    mode: Mode,
    threshold: u32,
    grows: &HashSet<String>,
) -> BTreeMap<String, u64> {
    let mut covered = 1u64;
    let mut transport = ScriptedTransport::new(move |bp: &RequestBlueprint, _: &[(String, String)]| {
        let line = bp.request_line();
        if grows.iter().any(|g| line.contains(g.as_str())) {
            covered += 1;
        }
        let headers = vec![("X-Backrest-Coverage".to_string(), format!("{covered}/100000"))];
        Some((200, headers, b"ok".to_vec()))
    });
    let cfg = scripted_config(mode, dict, threshold);
    let result = run_campaign_with(plan, &cfg, &mut transport).unwrap();
    result
        .report
        .stats
        .requests_by_type
        .into_iter()
        .filter(|(k, _)| k != "MUTATION")
        .collect()
}

pub fn threshold_oracle() -> Result<(), String> {
    let sizes = prop::array::uniform5(1usize..16);
    let grows = prop::collection::vec(prop::collection::hash_set(0usize..16, 0..5), 5);
    let plan = single_query_plan();
    run((1u32..13, sizes, grows), |(threshold, sizes, grows)| {
        let mut grow_tags = HashSet::new();
        let mut want = BTreeMap::new();
        for (k, t) in VulnType::ALL.into_iter().enumerate() {
            let g: HashSet<usize> = grows[k].iter().copied().filter(|i| *i < sizes[k]).collect();
            grow_tags.extend(g.iter().map(|i| tag(t, *i)));
            want.insert(
                t.as_str().to_string(),
                simulate_type(sizes[k], u64::from(threshold), &g),
            );
        }
        let got = payloads_sent(&plan, tagged_dictionary(&sizes), Mode::C, threshold, &grow_tags);
        prop_assert_eq!(got, want);
        Ok(())
    })
}

pub fn coverage_monotone() -> Result<(), String> {
    let plan = single_query_plan();
    let script = prop::collection::vec(prop::option::of(0u64..50), 1..64);
    run(
        (script, prop::sample::select(vec![Mode::B, Mode::C, Mode::CT])),
        |(script, mode)| {
            let mut i = 0;
            let mut transport = ScriptedTransport::new(|_: &RequestBlueprint, _: &[(String, String)]| {
                let cov = script[i % script.len()];
                i += 1;
                let headers = cov
                    .map(|c| ("X-Backrest-Coverage".to_string(), format!("{c}/50")))
                    .into_iter()
                    .collect();
                Some((200, headers, Vec::new()))
            });
            let cfg = scripted_config(mode, tagged_dictionary(&[3, 2, 3, 2, 2]), 1);
            let result = run_campaign_with(&plan, &cfg, &mut transport).unwrap();
            let trace = &result.trace.coverage;
            prop_assert!(trace.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(trace.len() as u64, result.report.stats.requests_sent);
            Ok(())
        },
    )
}
