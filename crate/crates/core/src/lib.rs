//! Model-based greybox fuzzing of REST web APIs.
//!
//! A campaign runs in four stages: a [`rest_model::RestModel`] is parsed or
//! inferred from traffic, the [`planner`] expands it into fuzzable
//! locations, the [`engine`] sends typed payloads while reading coverage and
//! taint feedback from response headers, and [`detectors`] turn exchanges
//! into findings that [`reporting`] deduplicates.

pub mod api_inference;
pub mod detectors;
pub mod engine;
pub mod feedback;
pub mod payloads;
pub mod planner;
pub mod reporting;
pub mod rest_model;

pub use engine::{run_campaign, EngineConfig, Mode};
pub use payloads::{PayloadDictionary, VulnType};
pub use planner::{build_test_plan, TestPlan};
pub use reporting::FuzzReport;
pub use rest_model::{parse_spec, serialize_spec, RestModel};
