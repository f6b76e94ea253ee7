//! Command-line front end. Every command reads files, writes a report to
//! stdout or `--out`, and maps errors to exit codes 2 (invalid input),
//! 3 (solver failure) and 4 (infeasible plan).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::decouple::{self, DecoupleConfig};
use crate::entropy::{self, EntropyQuery, Quantity};
use crate::protocol::{self, ConstructParams, RedistProtocol};
use crate::qstate::{HybridSource, RateTuple};
use crate::region::{self, fmt6, BoundReport, ScenarioId, ScenarioSpec};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hsrd", version, about = "Hybrid classical-quantum state redistribution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuantityArg {
    Hmin,
    Hmax,
    HmaxPrime,
    /// von Neumann H(A|B)
    H,
    /// von Neumann I(A:B)
    Mi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegionKind {
    Direct,
    Converse,
    Asymptotic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepBound {
    Direct,
    Converse,
    AsymptoticInner,
    AsymptoticOuter,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Evaluate one entropy of a source file.
    Entropy {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum)]
        quantity: QuantityArg,
        /// "TARGET|CONDITIONING", e.g. "C|B" or "CZ|BY".
        #[arg(long)]
        systems: String,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
    },
    /// One-shot direct/converse bounds or the asymptotic region.
    Region {
        #[arg(value_enum)]
        kind: RegionKind,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the bounds of a named scenario.
    Reduce {
        scenario: String,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoupling batch from a config file (one config or an array).
    Decouple {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seeds: config i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        max_tries: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run, construct or audit a protocol.
    Protocol {
        #[command(subcommand)]
        action: ProtocolAction,
    },
    /// Check a grid of rate tuples against a bound.
    Sweep {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum, default_value = "asymptotic-inner")]
        bound: SweepBound,
        /// Axis "NAME:START:STOP:STEP" with NAME in c, q, e, e0.
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: Option<String>,
        /// Values of the other resources, e.g. "c=0,e0=0".
        #[arg(long, default_value = "")]
        fixed: String,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum ProtocolAction {
    /// Simulate a standard protocol (identity with teleportation, dense
    /// coding and entanglement bookkeeping) realizing the tuple.
    Run {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        tuple: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a protocol from a randomized bi-decoupling pair.
    Construct {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        tuple: String,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_tries: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a standard protocol's tuple against the converse at its
    /// measured error.
    Audit {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        tuple: String,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments and runs the command, writing reports to `stdout` and
/// messages to `stderr`. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(stdout, "{e}") } else { write!(stderr, "{e}") };
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            if let Err(e) = emit(&out, stdout) {
                let _ = writeln!(stderr, "error: {e}");
                return e.exit_code();
            }
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// Rendered report and its destination.
pub struct Output {
    pub text: String,
    pub path: Option<PathBuf>,
}

fn emit(out: &Output, stdout: &mut dyn Write) -> Result<()> {
    match &out.path {
        Some(p) => std::fs::write(p, &out.text)?,
        None => stdout.write_all(out.text.as_bytes())?,
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::Domain(format!("{name} must lie in [0, 1), got {v}")));
    }
    Ok(())
}

fn load_source(p: &Path) -> Result<HybridSource> {
    HybridSource::load(p)
}

fn to(text: String, path: &Option<PathBuf>) -> Output {
    Output { text, path: path.clone() }
}

fn unsupported(f: Format, what: &str) -> Error {
    Error::Validation(format!("format {f:?} is not available for {what}"))
}

pub fn execute(cmd: &Command) -> Result<Output> {
    match cmd {
        Command::Entropy { state, quantity, systems, eps } => {
            check_unit("eps", *eps)?;
            let src = load_source(state)?;
            let v = cmd_entropy(&src, *quantity, systems, *eps)?;
            Ok(to(format!("{}\n", fmt6(v)), &None))
        }
        Command::Region { kind, state, eps, delta, format, out } => {
            check_unit("eps", *eps)?;
            check_unit("delta", *delta)?;
            let src = load_source(state)?;
            let reports = match kind {
                RegionKind::Direct => vec![region::direct_bound(&src, *eps, *delta)?],
                RegionKind::Converse => vec![region::converse_bound(&src, *eps, *delta)?],
                RegionKind::Asymptotic => {
                    let a = region::asymptotic_region(&src)?;
                    vec![a.inner, a.outer]
                }
            };
            let text = match format {
                Format::Csv => reports_csv(&reports)?,
                Format::Json if reports.len() == 1 => reports[0].to_json() + "\n",
                Format::Json => format!("[{}]\n", reports.iter().map(|r| r.to_json()).collect::<Vec<_>>().join(",\n")),
                f => return Err(unsupported(*f, "region")),
            };
            Ok(to(text, out))
        }
        Command::Reduce { scenario, state, eps, delta, format, out } => {
            check_unit("eps", *eps)?;
            check_unit("delta", *delta)?;
            let id: ScenarioId = scenario.parse()?;
            let src = load_source(state)?;
            let rep = region::reduce_scenario(&src, &ScenarioSpec::new(id), *eps, *delta)?;
            let text = match format {
                Format::Json => {
                    let mut v = serde_json::to_value(&rep)?;
                    round_json(&mut v);
                    serde_json::to_string_pretty(&v)? + "\n"
                }
                Format::Csv => {
                    let mut s = reports_csv(&[rep.direct, rep.converse, rep.asymptotic.inner, rep.asymptotic.outer])?;
                    for c in &rep.closed_forms {
                        s.push_str(&format!("closed_form,{},=,{},{}\n", csv_field(&c.name), fmt6(c.value), csv_field(c.row.as_deref().unwrap_or(""))));
                    }
                    s
                }
                f => return Err(unsupported(*f, "reduce")),
            };
            Ok(to(text, out))
        }
        Command::Decouple { config, seed, max_tries, format, out } => {
            let configs = load_configs(config, *seed)?;
            let rows = decouple::run_batch(&configs, *max_tries)?;
            let text = match format {
                Format::Csv => decouple::batch_csv(&rows)?,
                Format::Json => {
                    let mut v = serde_json::to_value(&rows)?;
                    round_json(&mut v);
                    serde_json::to_string_pretty(&v)? + "\n"
                }
                f => return Err(unsupported(*f, "decouple")),
            };
            Ok(to(text, out))
        }
        Command::Protocol { action } => cmd_protocol(action),
        Command::Sweep { state, bound, x, y, fixed, eps, delta, format, out } => {
            check_unit("eps", *eps)?;
            check_unit("delta", *delta)?;
            let xa = parse_axis(x)?;
            let ya = y.as_deref().map(parse_axis).transpose()?;
            let fixed = parse_fixed(fixed)?;
            let src = load_source(state)?;
            let report = match bound {
                SweepBound::Direct => region::direct_bound(&src, *eps, *delta)?,
                SweepBound::Converse => region::converse_bound(&src, *eps, *delta)?,
                SweepBound::AsymptoticInner => region::asymptotic_region(&src)?.inner,
                SweepBound::AsymptoticOuter => region::asymptotic_region(&src)?.outer,
            };
            let grid = sweep(&report, &xa, ya.as_ref(), &fixed)?;
            let text = match format {
                Format::Csv => sweep_csv(&grid)?,
                Format::Json => serde_json::to_string_pretty(&grid)? + "\n",
                Format::Svg => sweep_svg(&grid, &xa, ya.as_ref()),
            };
            Ok(to(text, out))
        }
    }
}

fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                *v = serde_json::json!(region::round6(x));
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Concatenates report tables with a leading `report` column.
fn reports_csv(reports: &[BoundReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["report", "label", "lhs", "relation", "rhs", "params"])?;
    for r in reports {
        let body = r.to_csv()?;
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        for rec in rd.records() {
            let rec = rec?;
            let mut row = vec![r.provenance.clone()];
            row.extend(rec.iter().map(str::to_string));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Splits "AB|C" or "A,B|C" into register lists. Register names are single
/// letters when no commas are used.
pub fn parse_systems(s: &str) -> Result<(Vec<String>, Vec<String>)> {
    let parts: Vec<&str> = s.split('|').collect();
    if parts.len() != 2 {
        return Err(Error::Validation(format!("systems must look like \"TARGET|CONDITIONING\", got {s:?}")));
    }
    let side = |p: &str| -> Result<Vec<String>> {
        let p = p.trim();
        let names: Vec<String> = if p.contains(',') {
            p.split(',').map(|x| x.trim().to_string()).collect()
        } else {
            p.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect()
        };
        if names.iter().any(|n| n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric())) {
            return Err(Error::Validation(format!("malformed register list {p:?}")));
        }
        Ok(names)
    };
    let (a, b) = (side(parts[0])?, side(parts[1])?);
    if a.is_empty() {
        return Err(Error::Validation(format!("empty target in {s:?}")));
    }
    Ok((a, b))
}

pub fn cmd_entropy(src: &HybridSource, q: QuantityArg, systems: &str, eps: f64) -> Result<f64> {
    let (a, b) = parse_systems(systems)?;
    let mut names: Vec<&str> = a.iter().chain(&b).map(String::as_str).collect();
    names.sort_unstable();
    names.dedup();
    for n in &names {
        src.dims().get(n).map_err(|_| Error::Validation(format!("unknown register {n}")))?;
    }
    let state = src.marginal(&names)?;
    let ar: Vec<&str> = a.iter().map(String::as_str).collect();
    let br: Vec<&str> = b.iter().map(String::as_str).collect();
    let quantity = match q {
        QuantityArg::Hmin => Quantity::Hmin,
        QuantityArg::Hmax => Quantity::Hmax,
        QuantityArg::HmaxPrime => Quantity::HmaxPrime,
        QuantityArg::H => Quantity::VonNeumannH,
        QuantityArg::Mi => Quantity::VonNeumannMi,
    };
    entropy::evaluate(&state, &EntropyQuery::new(&ar, &br, eps, quantity)?)
}

fn load_configs(path: &Path, seed: Option<u64>) -> Result<Vec<DecoupleConfig>> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let mut configs: Vec<DecoupleConfig> = match v {
        serde_json::Value::Array(_) => serde_json::from_value(v)?,
        _ => vec![serde_json::from_value(v)?],
    };
    if configs.is_empty() {
        return Err(Error::Validation("config file holds no configurations".into()));
    }
    if let Some(s) = seed {
        for (i, c) in configs.iter_mut().enumerate() {
            c.seed = s.wrapping_add(i as u64);
        }
    }
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

pub fn parse_tuple(s: &str) -> Result<RateTuple> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad rate tuple {s:?}; expected c,q,e,e0"))))
        .collect::<Result<_>>()?;
    if v.len() != 4 {
        return Err(Error::Validation(format!("rate tuple needs 4 entries, got {}", v.len())));
    }
    RateTuple::new(v[0], v[1], v[2], v[3])
}

/// Identity protocol adjusted by dense coding (μ), teleportation (λ),
/// generated pairs (k) and catalytic pass-through (k′) so its tuple equals
/// `t`; the all-zero tuple maps to trace-and-replace with the source
/// marginal on CZ. Fails with a plan error when no combination fits.
pub fn standard_protocol(src: &HybridSource, t: &RateTuple) -> Result<RedistProtocol> {
    let d = *src.dims();
    let id = protocol::identity_protocol(src)?;
    let base = id.tuple()?;
    if t.as_array().iter().all(|x| x.abs() < 1e-12) {
        if base.as_array().iter().all(|x| x.abs() < 1e-12) {
            return Ok(id);
        }
        let xi = src.marginal(&["C", "Z"])?.matrix;
        return protocol::trace_and_replace(src, &xi);
    }
    let int = |x: f64| -> Option<i64> { ((x - x.round()).abs() < 1e-9).then_some(x.round() as i64) };
    let (Some(c), Some(q), Some(e), Some(e0)) = (int(t.c), int(t.q), int(t.e), int(t.e0)) else {
        return Err(Error::Plan(format!("no standard protocol for non-integral tuple {:?}", t.as_array())));
    };
    let (Some(c0), Some(q0)) = (int(base.c), int(base.q)) else {
        return Err(Error::Plan("standard protocols need dyadic d_C and d_Z".into()));
    };
    // c = c0 + 2(λ−μ), q = q0 − (λ−μ) + k, e = λ + μ − k, e0 = k + k′.
    for k in 0..=e0.max(0) {
        let diff2 = c - c0;
        if diff2 % 2 != 0 {
            break;
        }
        let lm = diff2 / 2;
        if q != q0 - lm + k {
            continue;
        }
        let sum = e + k;
        if sum < lm.abs() || (sum - lm) % 2 != 0 {
            continue;
        }
        let (lambda, mu) = ((sum + lm) / 2, (sum - lm) / 2);
        let cat = e0 - k;
        if lambda < 0 || mu < 0 || cat < 0 {
            continue;
        }
        let p = protocol::tpdc_protocol(&id, &d, lambda as usize, mu as usize);
        let Ok(p) = p else { continue };
        let p = protocol::with_generated_pairs(&p, &d, k as usize)?;
        return protocol::with_catalyst(&p, &d, cat as usize);
    }
    Err(Error::Plan(format!("no standard protocol realizes tuple {:?} from the identity tuple {:?}", t.as_array(), base.as_array())))
}

fn protocol_csv(r: &protocol::ProtocolReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["protocol", "c", "q", "e", "e0", "achieved_error", "budget", "within_budget", "status"])?;
    let t = r.tuple.as_array();
    let status = match &r.construction {
        Some(c) if !c.hypotheses_hold => "ok (hypothesis unmet)",
        _ => "ok",
    };
    w.write_record([
        r.protocol.clone(),
        fmt6(t[0]),
        fmt6(t[1]),
        fmt6(t[2]),
        fmt6(t[3]),
        fmt6(r.achieved_error),
        r.budget.map(fmt6).unwrap_or_default(),
        r.within_budget().map(|b| b.to_string()).unwrap_or_default(),
        status.to_string(),
    ])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_protocol(action: &ProtocolAction) -> Result<Output> {
    match action {
        ProtocolAction::Run { state, tuple, seed, format, out } => {
            let src = load_source(state)?;
            let t = parse_tuple(tuple)?;
            let p = standard_protocol(&src, &t)?;
            let mut r = protocol::run_protocol(&src, &p)?;
            r.seeds = vec![*seed];
            r.m_offdiagonal = Some(protocol::m_offdiagonal_mass(&p, 20, *seed)?);
            let text = match format {
                Format::Csv => protocol_csv(&r)?,
                Format::Json => r.to_json() + "\n",
                f => return Err(unsupported(*f, "protocol run")),
            };
            Ok(to(text, out))
        }
        ProtocolAction::Construct { state, tuple, eps, delta, seed, max_tries, format, out } => {
            check_unit("eps", *eps)?;
            check_unit("delta", *delta)?;
            let src = load_source(state)?;
            let t = parse_tuple(tuple)?;
            let plan = protocol::dimension_plan(&src, &t)?;
            let cond = protocol::source_conditions(&src, &plan, *delta)?;
            let mut params = ConstructParams::new(t, *eps, *delta, *seed);
            params.max_tries = *max_tries;
            match protocol::construct_protocol(&src, &params) {
                Ok(c) => {
                    let text = match format {
                        Format::Json => c.report.to_json() + "\n",
                        Format::Csv => protocol_csv(&c.report)?,
                        f => return Err(unsupported(*f, "protocol construct")),
                    };
                    Ok(to(text, out))
                }
                // Hypotheses unmet and no pair found: reported, not a failure.
                Err(Error::Plan(msg)) if !cond.all_hold() => {
                    let text = match format {
                        Format::Json => serde_json::to_string_pretty(&serde_json::json!({
                            "status": "hypothesis unmet",
                            "flags": cond.flags,
                            "detail": msg,
                        }))? + "\n",
                        _ => format!("protocol,status,detail\nconstructed,hypothesis unmet,{}\n", csv_field(&msg)),
                    };
                    Ok(to(text, out))
                }
                Err(e) => Err(e),
            }
        }
        ProtocolAction::Audit { state, tuple, eps, format, out } => {
            check_unit("eps", *eps)?;
            let src = load_source(state)?;
            let t = parse_tuple(tuple)?;
            let p = standard_protocol(&src, &t)?;
            let a = protocol::audit_converse(&src, &p, *eps)?;
            let text = match format {
                Format::Json => {
                    let mut v = serde_json::to_value(&a)?;
                    round_json(&mut v);
                    serde_json::to_string_pretty(&v)? + "\n"
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["protocol", "delta", "label", "satisfied", "slack"])?;
                    for c in &a.checks {
                        w.write_record([a.protocol.clone(), fmt6(a.delta), c.label.clone(), c.satisfied.to_string(), fmt6(c.slack)])?;
                    }
                    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                    String::from_utf8(bytes).expect("csv output is utf-8")
                }
                f => return Err(unsupported(*f, "protocol audit")),
            };
            Ok(to(text, out))
        }
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

pub fn parse_axis(s: &str) -> Result<Axis> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Validation(format!("axis must be NAME:START:STOP:STEP with NAME in c,q,e,e0, got {s:?}"));
    if parts.len() != 4 || !["c", "q", "e", "e0"].contains(&parts[0]) {
        return Err(bad());
    }
    let nums: Vec<f64> = parts[1..].iter().map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || stop < start || step <= 0.0 && stop > start {
        return Err(Error::Validation(format!("bad range {s:?}")));
    }
    let n = if stop == start { 1 } else { ((stop - start) / step + 1e-9).floor() as usize + 1 };
    if n > 10_000 {
        return Err(Error::Validation(format!("axis {s:?} has {n} points, limit 10000")));
    }
    Ok(Axis { name: parts[0].to_string(), values: (0..n).map(|i| start + i as f64 * step).collect() })
}

fn parse_fixed(s: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Validation(format!("bad fixed value {part:?}")))?;
        let k = k.trim();
        if !["c", "q", "e", "e0"].contains(&k) {
            return Err(Error::Validation(format!("unknown resource {k:?}")));
        }
        let v = v.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad number in {part:?}")))?;
        out.push((k.to_string(), v));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SweepCell {
    pub c: f64,
    pub q: f64,
    pub e: f64,
    pub e0: f64,
    pub satisfied: bool,
    /// Smallest slack over the rows.
    pub min_slack: f64,
}

fn sweep(report: &BoundReport, x: &Axis, y: Option<&Axis>, fixed: &[(String, f64)]) -> Result<Vec<SweepCell>> {
    if y.is_some_and(|y| y.name == x.name) {
        return Err(Error::Validation("sweep axes must differ".into()));
    }
    let ys: Vec<Option<f64>> = match y {
        Some(a) => a.values.iter().map(|v| Some(*v)).collect(),
        None => vec![None],
    };
    let mut cells = Vec::new();
    for yv in &ys {
        for xv in &x.values {
            let mut t = [0.0f64; 4];
            for (k, v) in fixed {
                t[resource_index(k)] = *v;
            }
            t[resource_index(&x.name)] = *xv;
            if let (Some(a), Some(v)) = (y, yv) {
                t[resource_index(&a.name)] = *v;
            }
            let rt = RateTuple::new(t[0], t[1], t[2], t[3])?;
            let checks = region::check_tuple(report, &rt);
            let min_slack = checks.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min);
            cells.push(SweepCell { c: t[0], q: t[1], e: t[2], e0: t[3], satisfied: region::all_satisfied(&checks), min_slack });
        }
    }
    Ok(cells)
}

fn resource_index(name: &str) -> usize {
    match name {
        "c" => 0,
        "q" => 1,
        "e" => 2,
        _ => 3,
    }
}

fn sweep_csv(cells: &[SweepCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["c", "q", "e", "e0", "satisfied", "min_slack"])?;
    for c in cells {
        let slack = if c.min_slack.is_finite() { fmt6(c.min_slack) } else { "inf".into() };
        w.write_record([fmt6(c.c), fmt6(c.q), fmt6(c.e), fmt6(c.e0), c.satisfied.to_string(), slack])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Grid of rectangles, shaded where the tuple satisfies every row.
fn sweep_svg(cells: &[SweepCell], x: &Axis, y: Option<&Axis>) -> String {
    let (nx, ny) = (x.values.len(), y.map_or(1, |a| a.values.len()));
    let cell = (400 / nx.max(ny)).clamp(2, 40);
    let (w, h) = (nx * cell + 60, ny * cell + 60);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    for (i, c) in cells.iter().enumerate() {
        let (ix, iy) = (i % nx, i / nx);
        let fill = if c.satisfied { "#4a7fb5" } else { "#f2f2f2" };
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"#cccccc\" stroke-width=\"0.5\"/>\n",
            40 + ix * cell,
            10 + (ny - 1 - iy) * cell
        ));
    }
    let (x0, y0) = (40, 10 + ny * cell);
    s.push_str(&format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n", x0 + nx * cell));
    s.push_str(&format!("<line x1=\"{x0}\" y1=\"10\" x2=\"{x0}\" y2=\"{y0}\" stroke=\"black\"/>\n"));
    let first = |a: &Axis| fmt6(a.values[0]);
    let last = |a: &Axis| fmt6(*a.values.last().expect("nonempty axis"));
    s.push_str(&format!("<text x=\"{x0}\" y=\"{}\" font-size=\"10\">{}</text>\n", y0 + 14, first(x)));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n", x0 + nx * cell, y0 + 14, last(x)));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n", x0 + nx * cell / 2, y0 + 30, x.name));
    if let Some(a) = y {
        s.push_str(&format!("<text x=\"{}\" y=\"{y0}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n", x0 - 4, first(a)));
        s.push_str(&format!("<text x=\"{}\" y=\"20\" font-size=\"10\" text-anchor=\"end\">{}</text>\n", x0 - 4, last(a)));
        s.push_str(&format!("<text x=\"12\" y=\"{}\" font-size=\"12\">{}</text>\n", 10 + ny * cell / 2, a.name));
    }
    s.push_str("</svg>\n");
    s
}
