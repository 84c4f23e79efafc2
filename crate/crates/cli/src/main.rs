//! `backrest`: infer a REST model from traffic, plan and run fuzzing
//! campaigns, score reports against a ground-truth manifest, and serve the
//! bundled reference target.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use backrest::api_inference::{infer_from_log, InferenceConfig, NameHint};
use backrest::detectors::Signatures;
use backrest::engine::{run_campaign, EngineConfig, Mode, SessionConfig};
use backrest::payloads::{default_dictionary, PayloadDictionary};
use backrest::planner::{build_test_plan, PlanOptions};
use backrest::reporting::{score_recall, FuzzReport, Manifest};
use backrest::rest_model::{parse_spec, serialize_spec};
use backrest_target::{serve, TargetConfig};
use clap::{Args, Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

const EXIT_CLEAN: u8 = 0;
const EXIT_CONFIRMED: u8 = 1;
const EXIT_ABORT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "backrest", version, about = "Greybox fuzzer for REST web APIs")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Infer an API specification from a JSON-lines traffic log
    Infer(InferArgs),
    /// Print the fuzzing plan for a specification
    Plan(PlanArgs),
    /// Run a fuzzing campaign
    Fuzz(FuzzArgs),
    /// Score a report against a manifest of known vulnerabilities
    Score(ScoreArgs),
    /// Serve the bundled reference target
    ServeTarget(ServeArgs),
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    traffic: PathBuf,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON list of {prefix, index, name} path parameter names
    #[arg(long)]
    hints: Option<PathBuf>,
    /// Distinct values needed before a path segment becomes a parameter
    #[arg(long, default_value_t = 2)]
    min_support: usize,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also fuzz header parameters
    #[arg(long)]
    fuzz_headers: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuzzArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    base_url: String,
    /// B (blackbox), C (coverage) or CT (coverage and taint)
    #[arg(long, default_value = "CT")]
    mode: Mode,
    /// Non-improving payloads tolerated per type before moving on
    #[arg(long, default_value_t = 10)]
    threshold: u32,
    /// Payload dictionary; the built-in one when omitted
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Error signature file; the built-in set when omitted
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// Report file; stdout when omitted
    #[arg(long)]
    report: Option<PathBuf>,
    /// Plain-text summary file
    #[arg(long)]
    text_report: Option<PathBuf>,
    /// File receiving one request line per sent request
    #[arg(long)]
    request_log: Option<PathBuf>,
    /// Session configuration (login replay and check)
    #[arg(long)]
    auth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// How long to wait for a crashed target to come back
    #[arg(long, default_value_t = 30_000)]
    grace_ms: u64,
    #[arg(long, default_value = "/health")]
    health_path: String,
    #[arg(long)]
    fuzz_headers: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    report: PathBuf,
    /// Manifest file; the reference target's when omitted
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Disable timing noise
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 500)]
    restart_delay_ms: u64,
    /// Requests a session survives before it expires
    #[arg(long, default_value_t = 50)]
    session_ttl: u32,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn infer(args: InferArgs) -> Result<u8> {
    let mut cfg = InferenceConfig {
        min_support: args.min_support,
        ..InferenceConfig::default()
    };
    if let Some(h) = &args.hints {
        let hints: Vec<NameHint> =
            serde_json::from_str(&read(h)?).with_context(|| format!("parsing {}", h.display()))?;
        cfg = cfg.with_hints(hints);
    }
    let inf = infer_from_log(&read(&args.traffic)?, &cfg)?;
    if inf.skipped > 0 {
        eprintln!("skipped {} unusable traffic records", inf.skipped);
    }
    emit(args.out.as_deref(), &serialize_spec(&inf.model))?;
    Ok(EXIT_CLEAN)
}

fn plan(args: PlanArgs) -> Result<u8> {
    let model = parse_spec(&read(&args.spec)?)?;
    let plan = build_test_plan(
        &model,
        args.seed,
        PlanOptions {
            fuzz_headers: args.fuzz_headers,
        },
    )?;
    emit(args.out.as_deref(), &plan.to_json())?;
    Ok(EXIT_CLEAN)
}

fn fuzz(args: FuzzArgs) -> Result<u8> {
    let spec_text = read(&args.spec)?;
    let model = parse_spec(&spec_text)?;
    let plan = build_test_plan(
        &model,
        args.seed,
        PlanOptions {
            fuzz_headers: args.fuzz_headers,
        },
    )?;
    let dictionary = match &args.dictionary {
        Some(p) => {
            PayloadDictionary::from_json(&read(p)?).with_context(|| format!("loading dictionary {}", p.display()))?
        }
        None => default_dictionary(),
    };
    let mut cfg = EngineConfig::new(&args.base_url, args.mode, dictionary);
    cfg.threshold = args.threshold;
    cfg.seed = args.seed;
    cfg.timeout_ms = args.timeout_ms;
    cfg.grace_ms = args.grace_ms;
    cfg.health_path = args.health_path.clone();
    if let Some(p) = &args.signatures {
        cfg.signatures =
            Signatures::from_json(&read(p)?).with_context(|| format!("loading signatures {}", p.display()))?;
    }
    if let Some(p) = &args.auth {
        let session: SessionConfig =
            serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        cfg.session = Some(session);
    }

    info!("{} endpoints, {} locations", plan.entries.len(), plan.location_count());
    let result = run_campaign(&plan, &cfg)?;
    let mut report = result.report;
    if let Some(obj) = report.config.as_object_mut() {
        obj.insert("spec_sha256".into(), sha256_hex(&spec_text).into());
        obj.insert("fuzz_headers".into(), args.fuzz_headers.into());
    }

    emit(args.report.as_deref(), &report.to_json())?;
    if let Some(p) = &args.text_report {
        fs::write(p, report.to_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.request_log {
        let mut log = result.trace.request_lines.join("\n");
        log.push('\n');
        fs::write(p, log).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "{} requests, {} findings ({} confirmed), coverage {}/{}",
        report.stats.requests_sent,
        report.findings.len(),
        report.confirmed_count(),
        report.stats.final_total_cov,
        report.stats.probes_total.map_or("?".to_string(), |t| t.to_string()),
    );
    if report.incomplete {
        eprintln!(
            "campaign aborted: {}",
            report.abort_reason.as_deref().unwrap_or("unknown reason")
        );
        return Ok(EXIT_ABORT);
    }
    Ok(if report.confirmed_count() > 0 {
        EXIT_CONFIRMED
    } else {
        EXIT_CLEAN
    })
}

fn score(args: ScoreArgs) -> Result<u8> {
    let report =
        FuzzReport::from_json(&read(&args.report)?).with_context(|| format!("parsing {}", args.report.display()))?;
    let manifest = match &args.manifest {
        Some(p) => Manifest::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => backrest_target::manifest(),
    };
    let score = score_recall(&report, &manifest)?;
    let mut text = serde_json::to_string_pretty(&score)?;
    text.push('\n');
    print!("{text}");
    Ok(EXIT_CLEAN)
}

fn serve_target(args: ServeArgs) -> Result<u8> {
    let handle = serve(TargetConfig {
        port: args.port,
        deterministic: args.deterministic,
        restart_delay_ms: args.restart_delay_ms,
        session_ttl: args.session_ttl,
    })
    .with_context(|| format!("binding port {}", args.port))?;
    eprintln!("listening on {}", handle.base_url());
    handle.wait();
    bail!("server stopped")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BACKREST_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer(a) => infer(a),
        Command::Plan(a) => plan(a),
        Command::Fuzz(a) => fuzz(a),
        Command::Score(a) => score(a),
        Command::ServeTarget(a) => serve_target(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ABORT)
        }
    }
}
