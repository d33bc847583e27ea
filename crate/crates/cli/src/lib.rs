//! Command implementations behind the `wmsn` binary.
//!
//! Each command returns a [`CliError`] on failure; [`CliError::exit_code`]
//! maps it onto the process exit status (0 ok, 1 validation, 2 invariant
//! violation, 3 I/O).

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use wmsn_core::power::{lifetime_hours, TWO_AA_CAPACITY_MAH};
use wmsn_core::report::{fixed, images_csv, metrics_json, nodes_csv, routes_csv, RunMeta};
use wmsn_core::{
    parse_scenario, CoreState, EnergyModel64, EngineError, Metrics, NodeId, ParseOptions, RunOptions, Scenario,
    Simulation,
};

pub const TOOL_VERSION: &str = concat!("wmsn ", env!("CARGO_PKG_VERSION"));

/// Hours in an average year, leap days included.
pub const HOURS_PER_YEAR: f64 = 8766.0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Invariant(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Scenario(s) => CliError::Validation(s.to_string()),
            e @ EngineError::InvariantViolation { .. } => CliError::Invariant(e.to_string()),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub strict: bool,
    pub out_dir: Option<PathBuf>,
    pub lax_keys: bool,
    pub jobs: Option<usize>,
}

/// A parsed scenario plus the non-fatal complaints found on the way.
pub struct Loaded {
    pub scenario: Scenario,
    pub warnings: Vec<String>,
}

pub fn load_scenario(path: &Path, opts: &GlobalOpts) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = parse_scenario(&text, ParseOptions { lax_keys: opts.lax_keys })
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut scenario = parsed.scenario;
    if let Some(seed) = opts.seed {
        scenario.seed = seed;
    }
    Ok(Loaded { scenario, warnings: parsed.warnings })
}

/// The four output files of a run, as (file name, contents).
pub fn render_artifacts(scenario: &Scenario, metrics: &Metrics) -> Vec<(&'static str, String)> {
    let meta = RunMeta { scenario_hash: scenario.hash(), seed: scenario.seed, tool_version: TOOL_VERSION.to_string() };
    vec![
        ("metrics.json", metrics_json(&meta, metrics)),
        ("nodes.csv", nodes_csv(metrics)),
        ("images.csv", images_csv(metrics)),
        ("routes.csv", routes_csv(metrics)),
    ]
}

/// What one `run` produced.
#[derive(Debug)]
pub struct RunSummary {
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
    pub metrics: Metrics,
    pub warnings: Vec<String>,
}

fn run_one(path: &Path, out_dir: &Path, opts: &GlobalOpts) -> Result<RunSummary, CliError> {
    let Loaded { scenario, mut warnings } = load_scenario(path, opts)?;
    let metrics = wmsn_core::run(&scenario, RunOptions { strict: opts.strict, ..Default::default() })?;
    if metrics.totals.invariant_violations > 0 {
        warnings.push(format!("{} invariant violations recorded (use --strict to fail)", metrics.totals.invariant_violations));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    for (name, body) in render_artifacts(&scenario, &metrics) {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(RunSummary { scenario: path.to_path_buf(), out_dir: out_dir.to_path_buf(), metrics, warnings })
}

/// Runs every scenario and writes its artifacts. A single scenario writes
/// straight into the output directory; several get one subdirectory each,
/// named after the file stem.
pub fn cmd_run(paths: &[PathBuf], opts: &GlobalOpts) -> Vec<Result<RunSummary, CliError>> {
    let base = opts.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let target = |p: &PathBuf| {
        if paths.len() == 1 {
            base.clone()
        } else {
            base.join(p.file_stem().unwrap_or_default())
        }
    };
    match opts.jobs {
        Some(j) if j > 1 && paths.len() > 1 => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(j).build().expect("thread pool");
            pool.install(|| paths.par_iter().map(|p| run_one(p, &target(p), opts)).collect())
        }
        _ => paths.iter().map(|p| run_one(p, &target(p), opts)).collect(),
    }
}

/// Parses a capacity given as mAh or "2xAA".
pub fn parse_capacity(s: &str) -> Result<f64, CliError> {
    if s.eq_ignore_ascii_case("2xaa") {
        return Ok(TWO_AA_CAPACITY_MAH);
    }
    match s.parse::<f64>() {
        Ok(c) if c.is_finite() && c >= 0.0 => Ok(c),
        _ => Err(CliError::Validation(format!("capacity must be a non-negative mAh value or \"2xAA\", got {s:?}"))),
    }
}

/// Resolves a profile state name. Besides the full "mcu:soc" form a few
/// shorthands are accepted: active, idle, sleep, wifi_on and wifi_off, the
/// last two meaning the idle MCU with the multimedia board up.
pub fn parse_state(s: &str) -> Result<CoreState, CliError> {
    let full = match s.to_ascii_lowercase().as_str() {
        "active" => "active:off".to_string(),
        "idle" => "idle:off".to_string(),
        "sleep" => "off:off".to_string(),
        "wifi_on" => "idle:wifi_on".to_string(),
        "wifi_off" => "idle:wifi_off".to_string(),
        other => other.to_string(),
    };
    full.parse().map_err(|_| CliError::Validation(format!("unknown state {s:?}")))
}

/// Parses `state=fraction`.
pub fn parse_profile_entry(s: &str) -> Result<(CoreState, f64), CliError> {
    let (state, frac) =
        s.split_once('=').ok_or_else(|| CliError::Validation(format!("expected state=fraction, got {s:?}")))?;
    let frac: f64 =
        frac.trim().parse().map_err(|_| CliError::Validation(format!("bad fraction in {s:?}")))?;
    Ok((parse_state(state.trim())?, frac))
}

/// One fraction varied from `from` to `to` in `points` evenly spaced steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sweep {
    pub state: CoreState,
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

/// Parses `state=from:to:points`.
pub fn parse_sweep(s: &str) -> Result<Sweep, CliError> {
    let bad = || CliError::Validation(format!("expected state=from:to:points, got {s:?}"));
    let (state, range) = s.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    let [from, to, points] = parts.as_slice() else { return Err(bad()) };
    let sweep = Sweep {
        state: parse_state(state.trim())?,
        from: from.parse().map_err(|_| bad())?,
        to: to.parse().map_err(|_| bad())?,
        points: points.parse().map_err(|_| bad())?,
    };
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if !unit(sweep.from) || !unit(sweep.to) || sweep.points < 2 {
        return Err(CliError::Validation(format!("sweep fractions must lie in [0, 1] with at least 2 points, got {s:?}")));
    }
    Ok(sweep)
}

/// Lifetime of one profile, in hours.
pub fn lifetime(capacity_mah: f64, profile: &[(CoreState, f64)]) -> Result<f64, CliError> {
    if capacity_mah == 0.0 {
        return Ok(0.0);
    }
    lifetime_hours(&EnergyModel64::measured(), capacity_mah, profile).map_err(|e| CliError::Validation(e.to_string()))
}

fn profile_label(profile: &[(CoreState, f64)]) -> String {
    profile.iter().map(|(s, f)| format!("{s}={}", fixed(*f))).collect::<Vec<_>>().join(" ")
}

/// Scales the rest of `profile` so it fills what `sweep_frac` of `state` leaves.
fn swept_profile(profile: &[(CoreState, f64)], state: CoreState, frac: f64) -> Result<Vec<(CoreState, f64)>, CliError> {
    let rest: Vec<_> = profile.iter().copied().filter(|(s, _)| *s != state).collect();
    let rest_total: f64 = rest.iter().map(|(_, f)| f).sum();
    let mut out = vec![(state, frac)];
    if rest_total > 0.0 {
        out.extend(rest.into_iter().map(|(s, f)| (s, f / rest_total * (1.0 - frac))));
    } else if frac < 1.0 {
        return Err(CliError::Validation(format!("sweeping {state} needs another state in the profile to absorb the remainder")));
    }
    Ok(out)
}

/// The lifetime table as printed by the `lifetime` subcommand. Without a
/// profile the node is assumed to idle with only the MCU powered.
pub fn cmd_lifetime(capacity: &str, profile: &[String], sweep: Option<&str>) -> Result<String, CliError> {
    let capacity_mah = parse_capacity(capacity)?;
    let mut entries = profile.iter().map(|s| parse_profile_entry(s)).collect::<Result<Vec<_>, _>>()?;
    if entries.is_empty() {
        entries.push((parse_state("idle")?, 1.0));
    }
    let mut out = String::new();
    match sweep {
        None => {
            let hours = lifetime(capacity_mah, &entries)?;
            writeln!(out, "capacity_mah {}", fixed(capacity_mah)).unwrap();
            writeln!(out, "profile {}", profile_label(&entries)).unwrap();
            writeln!(out, "hours {hours:.3}").unwrap();
            writeln!(out, "days {:.3}", hours / 24.0).unwrap();
            writeln!(out, "years {:.3}", hours / HOURS_PER_YEAR).unwrap();
        }
        Some(s) => {
            let sw = parse_sweep(s)?;
            writeln!(out, "fraction,hours,days,years").unwrap();
            for i in 0..sw.points {
                let frac = sw.from + (sw.to - sw.from) * i as f64 / (sw.points - 1) as f64;
                let hours = lifetime(capacity_mah, &swept_profile(&entries, sw.state, frac)?)?;
                writeln!(out, "{},{hours:.3},{:.3},{:.3}", fixed(frac), hours / 24.0, hours / HOURS_PER_YEAR).unwrap();
            }
        }
    }
    Ok(out)
}

/// Hop counts from every node to `dest` over the links both radios share.
pub fn bfs_hops(topology: &wmsn_core::model::Topology, dest: NodeId) -> BTreeMap<NodeId, u16> {
    let mut dist = BTreeMap::from([(dest, 0u16)]);
    let mut queue = VecDeque::from([dest]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        for v in topology.mesh_links(u).unwrap_or_default() {
            dist.entry(v).or_insert_with(|| {
                queue.push_back(v);
                d + 1
            });
        }
    }
    dist
}

/// One line of the routing diagnostic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteCheck {
    pub node: NodeId,
    pub next_hop: Option<NodeId>,
    pub metric: Option<u16>,
    pub bfs: Option<u16>,
    /// ok, mismatch or unreachable.
    pub status: &'static str,
}

/// Simulated seconds allowed for a routing-only run to settle.
pub fn convergence_time(scenario: &Scenario) -> f64 {
    (scenario.nodes.len() as f64 + 2.0) * scenario.routing.update_interval_s + 3.0 * scenario.routing.hello_interval_s
}

/// Runs only the routing protocol until it settles and compares every
/// node's route to the gateway with the BFS hop count.
pub fn check_routes(scenario: &Scenario) -> Result<Vec<RouteCheck>, CliError> {
    let mut sc = scenario.clone();
    for n in &mut sc.nodes {
        n.sampling = false;
        n.multimedia_period_s = None;
    }
    sc.script.clear();
    sc.engine.routing = true;
    sc.duration_s = convergence_time(&sc);
    let Some(gw) = sc.gateway() else { return Ok(Vec::new()) };
    let mut sim = Simulation::new(&sc, RunOptions::default())?;
    sim.run_until(sc.duration_s)?;
    let oracle = bfs_hops(sim.topology(), gw);
    Ok(sc
        .nodes
        .iter()
        .map(|n| {
            let router = sim.router(n.id);
            let metric = router.map(|r| r.metric_to(gw)).filter(|m| !m.is_infinite()).map(|m| m.0);
            let metric = if n.id == gw { Some(0) } else { metric };
            let next_hop = router.and_then(|r| r.next_hop(gw)).filter(|_| n.id != gw);
            let bfs = oracle.get(&n.id).copied();
            let status = match (bfs, metric) {
                (None, None) => "unreachable",
                (a, b) if a == b => "ok",
                _ => "mismatch",
            };
            RouteCheck { node: n.id, next_hop, metric, bfs, status }
        })
        .collect())
}

/// The `routes` table; second element carries warnings for the error stream.
pub fn cmd_routes(path: &Path, opts: &GlobalOpts) -> Result<(String, Vec<String>), CliError> {
    let Loaded { scenario, mut warnings } = load_scenario(path, opts)?;
    let rows = check_routes(&scenario)?;
    let mut out = String::from("node,next_hop,metric,bfs_hops,status\n");
    let show = |v: Option<u16>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        writeln!(out, "{},{},{},{},{}", r.node, r.next_hop.map(|h| h.to_string()).unwrap_or_default(), show(r.metric), show(r.bfs), r.status)
            .unwrap();
    }
    let unreachable = rows.iter().filter(|r| r.status == "unreachable").count();
    if unreachable > 0 {
        warnings.push(format!("{unreachable} node(s) cannot reach the gateway"));
    }
    let mismatches = rows.iter().filter(|r| r.status == "mismatch").count();
    if mismatches > 0 {
        return Err(CliError::Invariant(format!("{out}{mismatches} route(s) disagree with the BFS hop count")));
    }
    Ok((out, warnings))
}

/// Parses and validates without running; returns the warnings.
pub fn cmd_validate(path: &Path, opts: &GlobalOpts) -> Result<Vec<String>, CliError> {
    load_scenario(path, opts).map(|l| l.warnings)
}
