//! Discrete-event simulation of a whole network.
//!
//! One event queue drives every node. Events run in `(time, seq)` order where
//! `seq` is assigned at insertion, so equal-time events keep their scheduling
//! order. Every state change of a node goes through a PMU command, and every
//! state change first settles the energy spent in the previous state.
//!
//! Multimedia transfers move hop by hop over the bulk radio. Before the first
//! chunk on a hop the sender asks its next hop over the control radio to
//! bring the bulk radio up and waits for it to answer. Each chunk is then
//! acknowledged per hop and retransmitted a bounded number of times. A node
//! whose board was powered for a transfer turns it off again once it has been
//! idle for its linger time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{
    CoreState, Frame, FrameKind, McuState, NodeId, RadioKind, SocState, Topology, CONTROL_FRAME_CAP,
    FRAME_HEADER_BYTES,
};
use crate::power::{accrue, apply_command, Battery, PmuCommand};
use crate::radio::{airtime, fragment, transmit, RadioSpec, TxResult};
use crate::rng;
use crate::routing::{decode_all, encode_all, find_next_hop_cycle, Emission, RouteMsgBody, RouterState, BODY_BYTES};
use crate::scenario::{Scenario, ScenarioError, ScriptAction};
use crate::model::SensorReading;
use crate::sensing::{next_trigger, sample, FieldModel, TriggerCause, TriggerPolicy, TriggerState};
use crate::wire::{ChunkHeader, ChunkId, PayloadError, ScalarReport, Signal, CHUNK_HEADER_BYTES};

/// Relative tolerance of the energy decomposition check.
pub const ENERGY_RESIDUAL_TOLERANCE: f64 = 1e-6;

/// Route bodies that fit in one control frame.
const BODIES_PER_FRAME: usize = ((CONTROL_FRAME_CAP - FRAME_HEADER_BYTES) as usize) / BODY_BYTES;

/// Reports are dropped after this many hops.
const REPORT_TTL: u8 = 64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invariant violated at t={time:.6}: {detail}")]
    InvariantViolation { time: f64, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Abort on the first invariant violation.
    pub strict: bool,
    /// Check loop freedom after every event, not only at checkpoints.
    pub check_every_event: bool,
    /// Forces a two-node next-hop cycle at each checkpoint. Negative control
    /// for the loop check; never set outside tests.
    #[doc(hidden)]
    pub inject_loop_fault: bool,
}

#[derive(Debug, Clone)]
enum EventKind {
    SampleDue(NodeId),
    FrameArrival { to: NodeId, frame: Frame },
    HelloDue(NodeId),
    UpdateDue(NodeId),
    TriggerFired { node: NodeId, cause: TriggerCause },
    SocBootDone { node: NodeId, epoch: u64 },
    TransferComplete { node: NodeId, image: u32 },
    LingerExpired { node: NodeId, epoch: u64, release: bool },
    LinkChange { a: NodeId, b: NodeId, up: bool },
    ScriptedCommand { node: NodeId, action: ScriptAction },
    CheckpointDue,
    McuRelease { node: NodeId, epoch: u64 },
    AckTimeout { node: NodeId, token: u64 },
    WakeTimeout { node: NodeId, token: u64 },
    RouteWait { node: NodeId, token: u64 },
    MultimediaTimeout { node: NodeId, epoch: u64 },
    Depletion { node: NodeId, epoch: u64 },
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct QueuedChunk {
    id: ChunkId,
    total: u16,
    bytes: u32,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    id: ChunkId,
    peer: NodeId,
    attempts: u32,
    token: u64,
}

#[derive(Debug, Clone, Copy)]
struct Waking {
    peer: NodeId,
    attempts: u32,
    token: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeStats {
    control_frames: u64,
    bulk_frames: u64,
    control_airtime_s: f64,
    bulk_airtime_s: f64,
    frames_lost: u64,
    frames_dropped: u64,
    samples: u64,
    reports_sent: u64,
    images_triggered: u64,
    chunks_abandoned: u64,
}

struct Runtime {
    cfg: crate::scenario::NodeConfig,
    policy: TriggerPolicy,
    state: CoreState,
    /// States the cores return to when no activity holds them up.
    mcu_rest: McuState,
    soc_rest: SocState,
    alive: bool,
    death_time: Option<f64>,
    battery: Battery<f64>,
    residency: [f64; CoreState::COUNT],
    last_settle: f64,
    energy_epoch: u64,
    router: RouterState,
    trigger: TriggerState,
    busy_until: [f64; 2],
    mcu_hold_until: f64,
    mcu_epoch: u64,
    /// The multimedia board has finished booting.
    booted: bool,
    boot_epoch: u64,
    captures_waiting: Vec<u32>,
    wake_waiters: BTreeSet<NodeId>,
    outq: VecDeque<QueuedChunk>,
    in_flight: Option<InFlight>,
    waking: Option<Waking>,
    session_peer: Option<NodeId>,
    /// Upstream neighbors with an open transfer session, by last activity.
    inbound: BTreeMap<NodeId, f64>,
    relayed: BTreeSet<ChunkId>,
    route_waits: u32,
    next_image: u32,
    token: u64,
    linger_epoch: u64,
    mm_epoch: u64,
    last_checkpoint_consumed: f64,
    stats: NodeStats,
}

impl Runtime {
    fn bulk_ready(&self) -> bool {
        self.alive && self.state.soc == SocState::WifiOn && self.booted
    }

    fn transfer_busy(&self) -> bool {
        !self.captures_waiting.is_empty()
            || !self.outq.is_empty()
            || self.in_flight.is_some()
            || self.waking.is_some()
            || !self.wake_waiters.is_empty()
    }

    fn next_token(&mut self) -> u64 {
        self.token += 1;
        self.token
    }
}

/// One delivered scalar report as logged by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord {
    pub origin: u16,
    pub sample_time_s: f64,
    pub arrival_time_s: f64,
    pub hops: u8,
    pub readings: Vec<ReadingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadingRecord {
    pub sensor: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Reassembly {
    total: u16,
    have: BTreeSet<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collected {
    Report,
    ChunkStored,
    Duplicate,
    ImageComplete { origin: NodeId, image: u32 },
    Ignored,
}

/// Everything the gateway keeps: the report log and image reassembly state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GatewayStore {
    reports: Vec<ReportRecord>,
    images: BTreeMap<(NodeId, u32), Reassembly>,
    complete: BTreeSet<(NodeId, u32)>,
}

impl GatewayStore {
    pub fn reports(&self) -> &[ReportRecord] {
        &self.reports
    }

    pub fn is_complete(&self, origin: NodeId, image: u32) -> bool {
        self.complete.contains(&(origin, image))
    }

    pub fn chunks_received(&self, origin: NodeId, image: u32) -> usize {
        self.images.get(&(origin, image)).map_or(0, |r| r.have.len())
    }

    fn log_report(&mut self, report: &ScalarReport, now: f64) {
        self.reports.push(ReportRecord {
            origin: report.origin.0,
            sample_time_s: report.sample_time,
            arrival_time_s: now,
            hops: report.hops,
            readings: report
                .readings
                .iter()
                .map(|(s, v)| ReadingRecord { sensor: format!("{}:{}", s.kind.name(), s.slot), value: *v as f64 })
                .collect(),
        });
    }

    fn store_chunk(&mut self, header: &ChunkHeader) -> Collected {
        let key = (header.id.origin, header.id.image);
        let entry = self.images.entry(key).or_insert_with(|| Reassembly { total: header.total, have: BTreeSet::new() });
        if !entry.have.insert(header.id.index) {
            return Collected::Duplicate;
        }
        if entry.have.len() == entry.total as usize {
            self.complete.insert(key);
            Collected::ImageComplete { origin: key.0, image: key.1 }
        } else {
            Collected::ChunkStored
        }
    }
}

/// Files a frame delivered to the gateway: reports go to the time-ordered
/// log, chunks into per-image reassembly. Duplicate chunks change nothing.
pub fn gateway_collect(store: &mut GatewayStore, frame: &Frame, now: f64) -> Result<Collected, PayloadError> {
    match frame.kind {
        FrameKind::ScalarReport => {
            let mut report = ScalarReport::decode(&frame.payload)?;
            report.hops = report.hops.saturating_add(1);
            store.log_report(&report, now);
            Ok(Collected::Report)
        }
        FrameKind::ImageChunk => Ok(store.store_chunk(&ChunkHeader::decode(&frame.payload)?)),
        _ => Ok(Collected::Ignored),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeMetrics {
    pub id: u16,
    pub gateway: bool,
    pub capacity_mah: Option<f64>,
    pub consumed_mah: f64,
    /// Seconds spent in each core state, keyed `mcu:soc`.
    pub residency_s: BTreeMap<String, f64>,
    pub death_time_s: Option<f64>,
    pub final_state: String,
    pub control_frames: u64,
    pub bulk_frames: u64,
    pub control_airtime_s: f64,
    pub bulk_airtime_s: f64,
    pub frames_lost: u64,
    pub frames_dropped: u64,
    pub samples: u64,
    pub reports_sent: u64,
    pub images_triggered: u64,
    pub chunks_abandoned: u64,
}

impl NodeMetrics {
    pub fn residency(&self, state: CoreState) -> f64 {
        self.residency_s.get(&state.name()).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub origin: u16,
    pub image: u32,
    pub trigger_time_s: f64,
    pub cause: String,
    pub chunks_total: u16,
    pub chunks_received: u16,
    /// When the source's first hop acknowledged the last chunk.
    pub source_done_s: Option<f64>,
    pub delivered_at_s: Option<f64>,
    pub status: String,
}

impl ImageRecord {
    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub time_s: f64,
    pub alive_nodes: u32,
    pub nodes_with_gateway_route: u32,
    pub loop_violations: u32,
    pub max_energy_residual: f64,
    pub battery_monotonic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteRow {
    pub time_s: f64,
    pub node: u16,
    pub next_hop: Option<u16>,
    pub metric: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    pub consumed_mah: f64,
    pub images_triggered: u64,
    pub images_complete: u64,
    pub reports_delivered: u64,
    pub frames_lost: u64,
    pub invariant_violations: u64,
    pub event_loop_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub duration_s: f64,
    pub events: u64,
    pub nodes: Vec<NodeMetrics>,
    pub images: Vec<ImageRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub routes: Vec<RouteRow>,
    pub gateway_log: Vec<ReportRecord>,
    pub totals: Totals,
}

impl Metrics {
    pub fn node(&self, id: NodeId) -> Option<&NodeMetrics> {
        self.nodes.iter().find(|n| n.id == id.0)
    }
}

/// A running simulation. Most callers want [`run`]; tests step it with
/// [`Simulation::run_until`] to inspect routers mid-run.
pub struct Simulation {
    scenario: Scenario,
    options: RunOptions,
    topology: Topology,
    field: FieldModel,
    nodes: Vec<Runtime>,
    index: BTreeMap<NodeId, usize>,
    gateway: Option<NodeId>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    events: u64,
    loss_rng: ChaCha8Rng,
    frame_seq: u32,
    store: GatewayStore,
    images: Vec<ImageRecord>,
    image_index: BTreeMap<(NodeId, u32), usize>,
    checkpoints: Vec<Checkpoint>,
    routes: Vec<RouteRow>,
    violations: u64,
    event_loop_violations: u64,
}

impl Simulation {
    pub fn new(scenario: &Scenario, options: RunOptions) -> Result<Self, EngineError> {
        let issues = scenario.validate();
        if !issues.is_empty() {
            return Err(ScenarioError::Invalid(issues).into());
        }
        let mut sim = Simulation {
            scenario: scenario.clone(),
            options,
            topology: scenario.topology(),
            field: scenario.field_model(),
            nodes: Vec::new(),
            index: BTreeMap::new(),
            gateway: scenario.gateway(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            events: 0,
            loss_rng: rng::substream(scenario.seed, "link-loss"),
            frame_seq: 0,
            store: GatewayStore::default(),
            images: Vec::new(),
            image_index: BTreeMap::new(),
            checkpoints: Vec::new(),
            routes: Vec::new(),
            violations: 0,
            event_loop_violations: 0,
        };
        let mut nodes: Vec<_> = scenario.nodes.clone();
        nodes.sort_by_key(|n| n.id);
        for cfg in nodes {
            let state = cfg.start_state();
            let battery = match cfg.battery.capacity_mah() {
                Some(c) => Battery::new(c),
                None => Battery::unlimited(),
            };
            sim.index.insert(cfg.id, sim.nodes.len());
            sim.nodes.push(Runtime {
                policy: cfg.trigger_policy(),
                router: RouterState::new(cfg.id, scenario.routing),
                cfg,
                state,
                mcu_rest: state.mcu,
                soc_rest: state.soc,
                alive: true,
                death_time: None,
                battery,
                residency: [0.0; CoreState::COUNT],
                last_settle: 0.0,
                energy_epoch: 0,
                trigger: TriggerState::new(),
                busy_until: [0.0; 2],
                mcu_hold_until: 0.0,
                mcu_epoch: 0,
                booted: state.soc != SocState::Off,
                boot_epoch: 0,
                captures_waiting: Vec::new(),
                wake_waiters: BTreeSet::new(),
                outq: VecDeque::new(),
                in_flight: None,
                waking: None,
                session_peer: None,
                inbound: BTreeMap::new(),
                relayed: BTreeSet::new(),
                route_waits: 0,
                next_image: 0,
                token: 0,
                linger_epoch: 0,
                mm_epoch: 0,
                last_checkpoint_consumed: 0.0,
                stats: NodeStats::default(),
            });
        }
        // Timer phases come from their own stream so they never shift loss draws.
        let mut timers = rng::substream(scenario.seed, "timers");
        for i in 0..sim.nodes.len() {
            let id = sim.nodes[i].cfg.id;
            let (hello_phase, update_phase, sample_phase): (f64, f64, f64) = (timers.gen(), timers.gen(), timers.gen());
            if scenario.engine.routing {
                sim.push(hello_phase * scenario.routing.hello_interval_s, EventKind::HelloDue(id));
                sim.push(update_phase * scenario.routing.update_interval_s, EventKind::UpdateDue(id));
            }
            let cfg = sim.nodes[i].cfg.clone();
            if cfg.sampling && !cfg.sensors.is_empty() {
                sim.push(sample_phase * cfg.sample_period_s, EventKind::SampleDue(id));
            }
            if let Some(p) = cfg.multimedia_period_s {
                sim.push(p, EventKind::MultimediaTimeout { node: id, epoch: 0 });
            }
            sim.schedule_depletion(i);
        }
        for entry in &scenario.script {
            let kind = match entry.action {
                ScriptAction::LinkDown { a, b } => EventKind::LinkChange { a, b, up: false },
                ScriptAction::LinkUp { a, b } => EventKind::LinkChange { a, b, up: true },
                ScriptAction::Capture { node } | ScriptAction::Pmu { node, .. } => {
                    EventKind::ScriptedCommand { node, action: entry.action }
                }
            };
            sim.push(entry.at_s, kind);
        }
        if !sim.nodes.is_empty() {
            sim.push(scenario.engine.checkpoint_interval_s, EventKind::CheckpointDue);
        }
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn gateway_store(&self) -> &GatewayStore {
        &self.store
    }

    pub fn router(&self, id: NodeId) -> Option<&RouterState> {
        self.index.get(&id).map(|&i| &self.nodes[i].router)
    }

    pub fn routers(&self) -> impl Iterator<Item = &RouterState> {
        self.nodes.iter().filter(|n| n.alive).map(|n| &n.router)
    }

    pub fn core_state(&self, id: NodeId) -> Option<CoreState> {
        self.index.get(&id).map(|&i| self.nodes[i].state)
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.index.get(&id).is_some_and(|&i| self.nodes[i].alive)
    }

    /// Processes every event due at or before `t`.
    pub fn run_until(&mut self, t: f64) -> Result<(), EngineError> {
        while let Some(top) = self.queue.peek() {
            if top.time > t {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            debug_assert!(ev.time >= self.now, "event scheduled in the past");
            self.now = ev.time;
            self.events += 1;
            self.dispatch(ev.kind)?;
            if self.options.check_every_event {
                let loops = self.loop_violations();
                if !loops.is_empty() {
                    self.event_loop_violations += loops.len() as u64;
                    if self.options.strict {
                        return Err(EngineError::InvariantViolation { time: self.now, detail: loops.join("; ") });
                    }
                }
            }
        }
        if t > self.now {
            self.now = t;
        }
        Ok(())
    }

    /// Runs to the scenario's end and extracts the metrics.
    pub fn finish(mut self) -> Result<Metrics, EngineError> {
        let end = self.scenario.duration_s;
        self.run_until(end)?;
        if !self.nodes.is_empty() && self.checkpoints.last().is_none_or(|c| c.time_s < end) {
            self.checkpoint()?;
        }
        Ok(self.metrics())
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, kind });
    }

    fn idx(&self, id: NodeId) -> usize {
        self.index[&id]
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<(), EngineError> {
        let owner = match &kind {
            EventKind::SampleDue(n) | EventKind::HelloDue(n) | EventKind::UpdateDue(n) => Some(*n),
            EventKind::FrameArrival { to, .. } => Some(*to),
            EventKind::TriggerFired { node, .. }
            | EventKind::SocBootDone { node, .. }
            | EventKind::TransferComplete { node, .. }
            | EventKind::LingerExpired { node, .. }
            | EventKind::ScriptedCommand { node, .. }
            | EventKind::McuRelease { node, .. }
            | EventKind::AckTimeout { node, .. }
            | EventKind::WakeTimeout { node, .. }
            | EventKind::RouteWait { node, .. }
            | EventKind::MultimediaTimeout { node, .. }
            | EventKind::Depletion { node, .. } => Some(*node),
            EventKind::LinkChange { .. } | EventKind::CheckpointDue => None,
        };
        if let Some(n) = owner {
            if !self.nodes[self.idx(n)].alive {
                return Ok(());
            }
        }
        match kind {
            EventKind::SampleDue(n) => self.on_sample(self.idx(n)),
            EventKind::FrameArrival { to, frame } => self.on_frame(self.idx(to), frame),
            EventKind::HelloDue(n) => self.on_hello_due(self.idx(n)),
            EventKind::UpdateDue(n) => self.on_update_due(self.idx(n)),
            EventKind::TriggerFired { node, cause } => self.activate(self.idx(node), cause),
            EventKind::SocBootDone { node, epoch } => {
                let i = self.idx(node);
                if self.nodes[i].boot_epoch == epoch {
                    self.nodes[i].booted = true;
                    self.on_bulk_ready(i);
                }
            }
            EventKind::TransferComplete { node, image } => {
                if let Some(&k) = self.image_index.get(&(node, image)) {
                    self.images[k].source_done_s.get_or_insert(self.now);
                }
                self.maybe_release(self.idx(node));
            }
            EventKind::LingerExpired { node, epoch, release } => self.on_linger(self.idx(node), epoch, release),
            EventKind::LinkChange { a, b, up } => self.topology.set_link_up(a, b, up),
            EventKind::ScriptedCommand { node, action } => self.on_script(self.idx(node), action),
            EventKind::CheckpointDue => {
                self.checkpoint()?;
                let next = self.now + self.scenario.engine.checkpoint_interval_s;
                self.push(next, EventKind::CheckpointDue);
            }
            EventKind::McuRelease { node, epoch } => {
                let i = self.idx(node);
                let n = &self.nodes[i];
                if n.mcu_epoch == epoch && n.state.mcu == McuState::Active && n.mcu_rest != McuState::Active {
                    let cmd = if n.mcu_rest == McuState::Off { PmuCommand::SleepMcu } else { PmuCommand::IdleMcu };
                    self.pmu(i, cmd);
                }
            }
            EventKind::AckTimeout { node, token } => self.on_ack_timeout(self.idx(node), token),
            EventKind::WakeTimeout { node, token } => self.on_wake_timeout(self.idx(node), token),
            EventKind::RouteWait { node, token } => {
                let i = self.idx(node);
                if self.nodes[i].token == token {
                    self.pump(i);
                }
            }
            EventKind::MultimediaTimeout { node, epoch } => {
                let i = self.idx(node);
                if self.nodes[i].mm_epoch == epoch {
                    self.evaluate_trigger(i, &[]);
                }
            }
            EventKind::Depletion { node, epoch } => {
                let i = self.idx(node);
                if self.nodes[i].energy_epoch == epoch {
                    self.settle(i);
                    self.kill(i);
                }
            }
        }
        Ok(())
    }

    // Energy and power state.

    fn settle(&mut self, i: usize) {
        let now = self.now;
        let n = &mut self.nodes[i];
        if !n.alive {
            return;
        }
        let dt = now - n.last_settle;
        if dt > 0.0 {
            n.residency[n.state.index()] += dt;
            n.battery = accrue(&self.scenario.energy, &n.battery, n.state, dt).expect("time only moves forward");
        }
        n.last_settle = now;
    }

    fn schedule_depletion(&mut self, i: usize) {
        let current = self.scenario.energy.current_draw(self.nodes[i].state);
        let n = &mut self.nodes[i];
        n.energy_epoch += 1;
        let epoch = n.energy_epoch;
        let id = n.cfg.id;
        if let Some(remaining) = n.battery.remaining_mah() {
            let t = self.now + remaining.max(0.0) * 3600.0 / current;
            self.push(t, EventKind::Depletion { node: id, epoch });
        }
    }

    fn kill(&mut self, i: usize) {
        let now = self.now;
        let n = &mut self.nodes[i];
        n.alive = false;
        n.death_time = Some(now);
        n.energy_epoch += 1;
        n.stats.chunks_abandoned += n.outq.len() as u64;
        n.outq.clear();
        n.in_flight = None;
        n.waking = None;
        n.captures_waiting.clear();
        n.wake_waiters.clear();
        n.inbound.clear();
    }

    /// Applies a PMU command, settling energy for the state being left.
    fn pmu(&mut self, i: usize, cmd: PmuCommand) {
        let old = self.nodes[i].state;
        let new = apply_command(old, cmd);
        if new == old {
            return;
        }
        self.settle(i);
        let id = self.nodes[i].cfg.id;
        let boot_delay = self.nodes[i].cfg.boot_delay_s;
        let n = &mut self.nodes[i];
        n.state = new;
        if old.soc == SocState::Off {
            n.booted = false;
            n.boot_epoch += 1;
            let epoch = n.boot_epoch;
            self.push(self.now + boot_delay, EventKind::SocBootDone { node: id, epoch });
        } else if new.soc == SocState::Off {
            n.booted = false;
            n.boot_epoch += 1;
        }
        self.schedule_depletion(i);
    }

    /// Keeps the MCU active until `until` for a control-radio transmission.
    fn hold_mcu(&mut self, i: usize, until: f64) {
        if self.nodes[i].state.mcu != McuState::Active {
            self.pmu(i, PmuCommand::WakeMcu);
        }
        let n = &mut self.nodes[i];
        n.mcu_hold_until = n.mcu_hold_until.max(until);
        n.mcu_epoch += 1;
        let (t, epoch, id) = (n.mcu_hold_until, n.mcu_epoch, n.cfg.id);
        self.push(t, EventKind::McuRelease { node: id, epoch });
    }

    /// Brings the bulk radio up if it is not already.
    fn power_bulk(&mut self, i: usize) {
        match self.nodes[i].state.soc {
            SocState::Off => self.pmu(i, PmuCommand::PowerSocWifi),
            SocState::WifiOff => self.pmu(i, PmuCommand::WifiOn),
            SocState::WifiOn => {}
        }
    }

    // Radio.

    fn can_use(&self, i: usize, radio: RadioKind) -> bool {
        let n = &self.nodes[i];
        n.alive
            && match radio {
                RadioKind::ControlMesh => n.state.mcu != McuState::Off,
                RadioKind::BulkMesh => n.bulk_ready(),
            }
    }

    fn spec(&self, radio: RadioKind) -> &RadioSpec {
        match radio {
            RadioKind::ControlMesh => &self.scenario.control,
            RadioKind::BulkMesh => &self.scenario.bulk,
        }
    }

    /// Puts a frame on the air; returns when its transmission ends, or `None`
    /// if the radio is unavailable or the destination out of reach.
    fn send(&mut self, i: usize, radio: RadioKind, dst: NodeId, kind: FrameKind, payload: Vec<u8>, size: u32) -> Option<f64> {
        if !self.can_use(i, radio) {
            self.nodes[i].stats.frames_dropped += 1;
            return None;
        }
        let src = self.nodes[i].cfg.id;
        let receivers: Vec<NodeId> = if dst.is_broadcast() {
            self.topology.mesh_links(src).map(|s| s.into_iter().collect()).unwrap_or_default()
        } else if self.topology.has_link(src, dst, radio) {
            vec![dst]
        } else {
            self.nodes[i].stats.frames_dropped += 1;
            return None;
        };
        self.frame_seq = self.frame_seq.wrapping_add(1);
        let frame = match Frame::new(src, dst, radio, kind, size, payload, self.frame_seq) {
            Ok(f) => f,
            Err(_) => {
                self.nodes[i].stats.frames_dropped += 1;
                return None;
            }
        };
        let spec = *self.spec(radio);
        let duration = airtime(&spec, size).expect("frames are non-empty");
        let start = self.now.max(self.nodes[i].busy_until[radio.index()]);
        let end = start + duration;
        self.nodes[i].busy_until[radio.index()] = end;
        if radio == RadioKind::ControlMesh {
            self.hold_mcu(i, end);
        }
        let stats = &mut self.nodes[i].stats;
        match radio {
            RadioKind::ControlMesh => {
                stats.control_frames += 1;
                stats.control_airtime_s += duration;
            }
            RadioKind::BulkMesh => {
                stats.bulk_frames += 1;
                stats.bulk_airtime_s += duration;
            }
        }
        let state = self.nodes[i].state;
        for to in receivers {
            match transmit(&frame, to, &self.topology, state, &spec, start, &mut self.loss_rng) {
                Ok(TxResult::Delivered { at }) => self.push(at, EventKind::FrameArrival { to, frame: frame.clone() }),
                Ok(TxResult::Lost) => self.nodes[i].stats.frames_lost += 1,
                Err(_) => self.nodes[i].stats.frames_dropped += 1,
            }
        }
        Some(end)
    }

    fn send_signal(&mut self, i: usize, radio: RadioKind, to: NodeId, kind: FrameKind, signal: Signal) -> Option<f64> {
        let payload = signal.encode();
        let size = FRAME_HEADER_BYTES + payload.len() as u32;
        self.send(i, radio, to, kind, payload, size)
    }

    fn on_frame(&mut self, j: usize, frame: Frame) {
        let me = self.nodes[j].cfg.id;
        if !(frame.dst == me || frame.dst.is_broadcast()) || !self.can_use(j, frame.radio) {
            return;
        }
        match frame.kind {
            FrameKind::RouteMsg => {
                if !self.scenario.engine.routing {
                    return;
                }
                let Ok(bodies) = decode_all(&frame.payload) else { return };
                let mut out = Vec::new();
                for body in bodies {
                    out.extend(self.nodes[j].router.handle_message(frame.src, body, self.now));
                }
                self.emit(j, out);
                if !self.nodes[j].outq.is_empty() {
                    self.pump(j);
                }
            }
            FrameKind::ScalarReport => self.on_report(j, &frame),
            FrameKind::ImageChunk => self.on_chunk(j, &frame),
            FrameKind::Command => {
                if let Ok(Signal::Wake) = Signal::decode(&frame.payload) {
                    self.on_wake_request(j, frame.src);
                }
            }
            FrameKind::Ack => match Signal::decode(&frame.payload) {
                Ok(Signal::Ready) => {
                    let n = &mut self.nodes[j];
                    if n.waking.is_some_and(|w| w.peer == frame.src) {
                        n.waking = None;
                        n.session_peer = Some(frame.src);
                        self.pump(j);
                    }
                }
                Ok(Signal::ChunkAck(id)) => self.on_chunk_ack(j, frame.src, id),
                _ => {}
            },
        }
    }

    // Routing.

    fn emit(&mut self, i: usize, emissions: Vec<Emission>) {
        if emissions.is_empty() {
            return;
        }
        let radio = if self.can_use(i, RadioKind::ControlMesh) {
            RadioKind::ControlMesh
        } else if self.can_use(i, RadioKind::BulkMesh) {
            RadioKind::BulkMesh
        } else {
            self.nodes[i].stats.frames_dropped += 1;
            return;
        };
        let mut broadcast = Vec::new();
        let mut unicast: BTreeMap<NodeId, Vec<RouteMsgBody>> = BTreeMap::new();
        for e in emissions {
            match e {
                Emission::Broadcast(b) => broadcast.push(b),
                Emission::Unicast { to, body } => unicast.entry(to).or_default().push(body),
            }
        }
        let batches = std::iter::once((NodeId::BROADCAST, broadcast)).chain(unicast);
        let batches: Vec<_> = batches.collect();
        for (to, bodies) in batches {
            for chunk in bodies.chunks(BODIES_PER_FRAME) {
                let size = FRAME_HEADER_BYTES + (chunk.len() * BODY_BYTES) as u32;
                self.send(i, radio, to, FrameKind::RouteMsg, encode_all(chunk), size);
            }
        }
    }

    fn on_hello_due(&mut self, i: usize) {
        let now = self.now;
        let mut out = vec![Emission::Broadcast(self.nodes[i].router.hello())];
        out.extend(self.nodes[i].router.expire_neighbors(now));
        self.emit(i, out);
        let id = self.nodes[i].cfg.id;
        self.push(now + self.scenario.routing.hello_interval_s, EventKind::HelloDue(id));
    }

    fn on_update_due(&mut self, i: usize) {
        let now = self.now;
        let out = self.nodes[i].router.periodic_update(now);
        self.emit(i, out);
        let id = self.nodes[i].cfg.id;
        self.push(now + self.scenario.routing.update_interval_s, EventKind::UpdateDue(id));
    }

    fn next_hop_to_gateway(&self, i: usize) -> Option<NodeId> {
        let gw = self.gateway?;
        let n = &self.nodes[i];
        if self.scenario.engine.routing {
            n.router.next_hop(gw)
        } else {
            self.topology.mesh_links(n.cfg.id).ok()?.contains(&gw).then_some(gw)
        }
    }

    fn is_gateway(&self, i: usize) -> bool {
        self.nodes[i].cfg.gateway
    }

    // Sensing and scalar reports.

    fn on_sample(&mut self, i: usize) {
        let now = self.now;
        let id = self.nodes[i].cfg.id;
        self.push(now + self.nodes[i].cfg.sample_period_s, EventKind::SampleDue(id));
        let n = &self.nodes[i];
        if n.state.mcu == McuState::Off {
            return;
        }
        if !self.scenario.engine.scalar_during_multimedia && n.transfer_busy() {
            return;
        }
        let readings = sample(&self.field, id, n.cfg.position, &n.cfg.sensors, now);
        self.nodes[i].stats.samples += 1;
        self.evaluate_trigger(i, &readings);
        self.send_report(i, &readings);
    }

    fn send_report(&mut self, i: usize, readings: &[SensorReading]) {
        if readings.is_empty() {
            return;
        }
        let report = ScalarReport {
            origin: self.nodes[i].cfg.id,
            sample_time: self.now,
            hops: 0,
            readings: readings.iter().map(|r| (r.sensor, r.value as f32)).collect(),
        };
        self.nodes[i].stats.reports_sent += 1;
        if self.is_gateway(i) {
            self.store.log_report(&report, self.now);
            return;
        }
        self.forward_report(i, &report);
    }

    fn forward_report(&mut self, i: usize, report: &ScalarReport) {
        let Some(hop) = self.next_hop_to_gateway(i) else {
            self.nodes[i].stats.frames_dropped += 1;
            return;
        };
        let payload = report.encode();
        let size = FRAME_HEADER_BYTES + payload.len() as u32;
        self.send(i, RadioKind::ControlMesh, hop, FrameKind::ScalarReport, payload, size);
    }

    fn on_report(&mut self, j: usize, frame: &Frame) {
        if self.is_gateway(j) {
            let _ = gateway_collect(&mut self.store, frame, self.now);
            return;
        }
        let Ok(mut report) = ScalarReport::decode(&frame.payload) else { return };
        report.hops = report.hops.saturating_add(1);
        if report.hops >= REPORT_TTL {
            return;
        }
        self.forward_report(j, &report);
    }

    // Triggers.

    fn evaluate_trigger(&mut self, i: usize, readings: &[SensorReading]) {
        let now = self.now;
        let n = &mut self.nodes[i];
        if let Some((cause, _due)) = next_trigger(&mut n.trigger, &n.policy, now, readings) {
            n.trigger.record_capture(now);
            n.mm_epoch += 1;
            let (id, epoch, period) = (n.cfg.id, n.mm_epoch, n.policy.multimedia_period_s);
            if let Some(p) = period {
                self.push(now + p, EventKind::MultimediaTimeout { node: id, epoch });
            }
            self.push(now, EventKind::TriggerFired { node: id, cause });
        } else if let Some(due) = n.trigger.timeout_due(&n.policy) {
            // A timeout that lost a float race re-arms for its exact due time.
            if readings.is_empty() && due > now {
                n.mm_epoch += 1;
                let (id, epoch) = (n.cfg.id, n.mm_epoch);
                self.push(due, EventKind::MultimediaTimeout { node: id, epoch });
            }
        }
    }

    fn on_script(&mut self, i: usize, action: ScriptAction) {
        match action {
            ScriptAction::Capture { .. } => {
                self.nodes[i].trigger.push_command(self.now);
                self.evaluate_trigger(i, &[]);
            }
            ScriptAction::Pmu { command, .. } => {
                self.pmu(i, command);
                let n = &mut self.nodes[i];
                n.mcu_rest = n.state.mcu;
                n.soc_rest = n.state.soc;
                if n.state.soc != SocState::WifiOn {
                    self.abort_bulk(i);
                }
            }
            ScriptAction::LinkDown { .. } | ScriptAction::LinkUp { .. } => {}
        }
    }

    fn abort_bulk(&mut self, i: usize) {
        let n = &mut self.nodes[i];
        n.stats.chunks_abandoned += n.outq.len() as u64;
        n.outq.clear();
        n.in_flight = None;
        n.waking = None;
        n.session_peer = None;
        n.captures_waiting.clear();
        n.wake_waiters.clear();
        n.inbound.clear();
    }

    // Multimedia activation and bulk transfer.

    fn activate(&mut self, i: usize, cause: TriggerCause) {
        let now = self.now;
        let chunk_bytes = self.scenario.engine.chunk_bytes;
        let n = &mut self.nodes[i];
        n.next_image += 1;
        n.stats.images_triggered += 1;
        let image = n.next_image;
        let id = n.cfg.id;
        let total = fragment(n.cfg.image_bytes, chunk_bytes).expect("validated sizes").len() as u16;
        self.image_index.insert((id, image), self.images.len());
        let gateway = self.is_gateway(i);
        self.images.push(ImageRecord {
            origin: id.0,
            image,
            trigger_time_s: now,
            cause: cause.name().to_string(),
            chunks_total: total,
            chunks_received: if gateway { total } else { 0 },
            source_done_s: if gateway { Some(now) } else { None },
            delivered_at_s: if gateway { Some(now) } else { None },
            status: if gateway { "complete" } else { "incomplete" }.to_string(),
        });
        if gateway {
            return;
        }
        self.nodes[i].captures_waiting.push(image);
        self.nodes[i].linger_epoch += 1;
        self.power_bulk(i);
        self.prewake(i);
        self.on_bulk_ready(i);
    }

    /// Asks the next hop to power its bulk radio while ours is still booting,
    /// so the two boot delays overlap.
    fn prewake(&mut self, i: usize) {
        let n = &self.nodes[i];
        if n.bulk_ready() || n.waking.is_some() || n.in_flight.is_some() || !self.can_use(i, RadioKind::ControlMesh) {
            return;
        }
        if let Some(hop) = self.next_hop_to_gateway(i) {
            if self.nodes[i].session_peer != Some(hop) {
                self.nodes[i].session_peer = None;
                self.start_wake(i, hop, 1);
            }
        }
    }

    /// Runs whatever was waiting for the bulk radio.
    fn on_bulk_ready(&mut self, i: usize) {
        if !self.nodes[i].bulk_ready() {
            return;
        }
        let chunk_bytes = self.scenario.engine.chunk_bytes;
        let n = &mut self.nodes[i];
        let id = n.cfg.id;
        for image in std::mem::take(&mut n.captures_waiting) {
            let parts = fragment(n.cfg.image_bytes, chunk_bytes).expect("validated sizes");
            let total = parts.len() as u16;
            for (k, bytes) in parts.into_iter().enumerate() {
                n.outq.push_back(QueuedChunk { id: ChunkId { origin: id, image, index: k as u16 }, total, bytes });
            }
        }
        for peer in std::mem::take(&mut n.wake_waiters) {
            self.send_signal(i, RadioKind::ControlMesh, peer, FrameKind::Ack, Signal::Ready);
        }
        self.pump(i);
    }

    /// Moves the head of the transfer queue forward by one step.
    fn pump(&mut self, i: usize) {
        let n = &self.nodes[i];
        if !n.alive || n.in_flight.is_some() || n.waking.is_some() {
            return;
        }
        if n.outq.is_empty() {
            let n = &mut self.nodes[i];
            if n.inbound.is_empty() {
                n.session_peer = None;
            }
            self.maybe_release(i);
            return;
        }
        if !n.bulk_ready() {
            return;
        }
        match self.next_hop_to_gateway(i) {
            None => {
                let limit = (3.0 * self.scenario.routing.update_interval_s / self.scenario.routing.hello_interval_s).ceil() as u32;
                let n = &mut self.nodes[i];
                n.route_waits += 1;
                if n.route_waits > limit {
                    n.route_waits = 0;
                    n.stats.chunks_abandoned += n.outq.len() as u64;
                    n.outq.clear();
                    self.pump(i);
                } else {
                    let token = n.next_token();
                    let id = n.cfg.id;
                    self.push(self.now + self.scenario.routing.hello_interval_s, EventKind::RouteWait { node: id, token });
                }
            }
            Some(hop) if self.nodes[i].session_peer == Some(hop) => {
                self.nodes[i].route_waits = 0;
                self.send_chunk(i, hop, 1);
            }
            Some(hop) => {
                self.nodes[i].route_waits = 0;
                self.nodes[i].session_peer = None;
                self.start_wake(i, hop, 1);
            }
        }
    }

    fn start_wake(&mut self, i: usize, peer: NodeId, attempts: u32) {
        if !self.can_use(i, RadioKind::ControlMesh) {
            // No control radio to ask with; try the bulk link directly.
            self.nodes[i].session_peer = Some(peer);
            self.send_chunk(i, peer, 1);
            return;
        }
        let token = self.nodes[i].next_token();
        self.nodes[i].waking = Some(Waking { peer, attempts, token });
        self.send_signal(i, RadioKind::ControlMesh, peer, FrameKind::Command, Signal::Wake);
        let id = self.nodes[i].cfg.id;
        self.push(self.now + self.scenario.engine.wake_timeout_s, EventKind::WakeTimeout { node: id, token });
    }

    fn on_wake_timeout(&mut self, i: usize, token: u64) {
        let Some(w) = self.nodes[i].waking else { return };
        if w.token != token {
            return;
        }
        self.nodes[i].waking = None;
        if w.attempts <= self.scenario.engine.max_retries {
            self.start_wake(i, w.peer, w.attempts + 1);
        } else {
            let n = &mut self.nodes[i];
            n.stats.chunks_abandoned += n.outq.len() as u64;
            n.outq.clear();
            self.pump(i);
        }
    }

    fn on_wake_request(&mut self, j: usize, from: NodeId) {
        let now = self.now;
        let n = &mut self.nodes[j];
        n.inbound.insert(from, now);
        n.linger_epoch += 1;
        if n.bulk_ready() {
            self.send_signal(j, RadioKind::ControlMesh, from, FrameKind::Ack, Signal::Ready);
            return;
        }
        n.wake_waiters.insert(from);
        self.power_bulk(j);
        if !self.is_gateway(j) {
            self.prewake(j);
        }
        self.on_bulk_ready(j);
    }

    fn send_chunk(&mut self, i: usize, peer: NodeId, attempts: u32) {
        let n = &self.nodes[i];
        let Some(&q) = n.outq.front() else { return };
        let last = n.outq.len() == 1 && n.inbound.is_empty() && n.captures_waiting.is_empty();
        let payload = ChunkHeader { id: q.id, total: q.total, last }.encode();
        let size = FRAME_HEADER_BYTES + CHUNK_HEADER_BYTES + q.bytes;
        let end = self.send(i, RadioKind::BulkMesh, peer, FrameKind::ImageChunk, payload, size).unwrap_or(self.now);
        let ack_size = FRAME_HEADER_BYTES + Signal::ChunkAck(q.id).encode().len() as u32;
        let ack = airtime(&self.scenario.bulk, ack_size).expect("non-empty");
        let n = &mut self.nodes[i];
        let token = n.next_token();
        n.in_flight = Some(InFlight { id: q.id, peer, attempts, token });
        let id = n.cfg.id;
        self.push(end + ack + self.scenario.engine.ack_guard_s, EventKind::AckTimeout { node: id, token });
    }

    fn on_ack_timeout(&mut self, i: usize, token: u64) {
        let Some(f) = self.nodes[i].in_flight else { return };
        if f.token != token {
            return;
        }
        self.nodes[i].in_flight = None;
        if f.attempts <= self.scenario.engine.max_retries {
            self.send_chunk(i, f.peer, f.attempts + 1);
            return;
        }
        // Retries exhausted: the image cannot complete, drop what is left of it.
        let n = &mut self.nodes[i];
        let before = n.outq.len();
        n.outq.retain(|q| (q.id.origin, q.id.image) != (f.id.origin, f.id.image));
        n.stats.chunks_abandoned += (before - n.outq.len()) as u64;
        n.session_peer = None;
        self.pump(i);
    }

    fn on_chunk(&mut self, j: usize, frame: &Frame) {
        let Ok(header) = ChunkHeader::decode(&frame.payload) else { return };
        self.send_signal(j, RadioKind::BulkMesh, frame.src, FrameKind::Ack, Signal::ChunkAck(header.id));
        let now = self.now;
        let n = &mut self.nodes[j];
        if header.last {
            n.inbound.remove(&frame.src);
        } else {
            n.inbound.insert(frame.src, now);
        }
        if self.is_gateway(j) {
            if let Ok(Collected::ImageComplete { origin, image }) = gateway_collect(&mut self.store, frame, now) {
                if let Some(&k) = self.image_index.get(&(origin, image)) {
                    let rec = &mut self.images[k];
                    rec.delivered_at_s = Some(now);
                    rec.chunks_received = rec.chunks_total;
                    rec.status = "complete".to_string();
                }
            }
            return;
        }
        let n = &mut self.nodes[j];
        if n.relayed.insert(header.id) {
            let bytes = frame.size_bytes - FRAME_HEADER_BYTES - CHUNK_HEADER_BYTES;
            n.outq.push_back(QueuedChunk { id: header.id, total: header.total, bytes });
            self.pump(j);
        } else {
            self.maybe_release(j);
        }
    }

    fn on_chunk_ack(&mut self, i: usize, from: NodeId, id: ChunkId) {
        let n = &mut self.nodes[i];
        let Some(f) = n.in_flight else { return };
        if f.id != id || f.peer != from {
            return;
        }
        n.in_flight = None;
        let done = n.outq.pop_front();
        if let Some(q) = done {
            if q.id.origin == n.cfg.id && q.id.index + 1 == q.total {
                let node = n.cfg.id;
                self.push(self.now, EventKind::TransferComplete { node, image: q.id.image });
            }
        }
        self.pump(i);
    }

    /// Schedules the board's power-down once the node has nothing to do.
    fn maybe_release(&mut self, i: usize) {
        let now = self.now;
        let idle = self.scenario.engine.wake_timeout_s;
        let n = &mut self.nodes[i];
        if !n.alive || n.state.soc == n.soc_rest || n.transfer_busy() {
            return;
        }
        n.linger_epoch += 1;
        let (id, epoch, linger) = (n.cfg.id, n.linger_epoch, n.cfg.linger_s);
        match n.inbound.values().copied().reduce(f64::min) {
            // An upstream session may still send; look again once it goes stale.
            Some(oldest) => self.push(now.max(oldest + idle), EventKind::LingerExpired { node: id, epoch, release: false }),
            None => self.push(now + linger, EventKind::LingerExpired { node: id, epoch, release: true }),
        }
    }

    fn on_linger(&mut self, i: usize, epoch: u64, release: bool) {
        let now = self.now;
        let idle = self.scenario.engine.wake_timeout_s;
        let n = &mut self.nodes[i];
        if n.linger_epoch != epoch {
            return;
        }
        n.inbound.retain(|_, &mut last| last + idle > now);
        if !release || !n.inbound.is_empty() {
            self.maybe_release(i);
            return;
        }
        if n.transfer_busy() || n.state.soc == n.soc_rest {
            return;
        }
        let cmd = match n.soc_rest {
            SocState::Off => PmuCommand::KillSoc,
            SocState::WifiOff => PmuCommand::WifiOff,
            SocState::WifiOn => return,
        };
        n.session_peer = None;
        self.pmu(i, cmd);
    }

    // Invariant checks.

    fn loop_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for dest in self.index.keys() {
            if let Some(cycle) = find_next_hop_cycle(self.routers(), *dest) {
                let path: Vec<String> = cycle.iter().map(|n| n.to_string()).collect();
                out.push(format!("next-hop cycle toward {dest}: {}", path.join(" -> ")));
            }
        }
        out
    }

    fn checkpoint(&mut self) -> Result<(), EngineError> {
        for i in 0..self.nodes.len() {
            self.settle(i);
        }
        if self.options.inject_loop_fault {
            let ids: Vec<NodeId> =
                self.nodes.iter().filter(|n| n.alive && !n.cfg.gateway).map(|n| n.cfg.id).take(2).collect();
            if let (Some(gw), [a, b]) = (self.gateway, ids.as_slice()) {
                let (a, b) = (*a, *b);
                let metric = crate::routing::Metric(1);
                let (ia, ib) = (self.idx(a), self.idx(b));
                self.nodes[ia].router.force_selected_for_test(gw, b, metric);
                self.nodes[ib].router.force_selected_for_test(gw, a, metric);
            }
        }
        let mut detail = self.loop_violations();
        let loops = detail.len() as u32;
        let mut max_residual: f64 = 0.0;
        let mut monotonic = true;
        for n in &mut self.nodes {
            let consumed = n.battery.consumed_mah();
            let recomputed: f64 = CoreState::all()
                .map(|s| n.residency[s.index()] * self.scenario.energy.current_draw(s) / 3600.0)
                .sum();
            let residual = if consumed > 0.0 { (consumed - recomputed).abs() / consumed } else { recomputed.abs() };
            if residual > ENERGY_RESIDUAL_TOLERANCE {
                detail.push(format!("energy residual {residual:e} on node {}", n.cfg.id));
            }
            max_residual = max_residual.max(residual);
            if consumed < n.last_checkpoint_consumed {
                monotonic = false;
                detail.push(format!("battery charge decreased on node {}", n.cfg.id));
            }
            n.last_checkpoint_consumed = consumed;
        }
        let mut routed = 0;
        for n in &self.nodes {
            let (next_hop, metric) = match self.gateway {
                Some(gw) if n.cfg.id == gw => (None, Some(0)),
                Some(gw) => {
                    let hop = n.router.next_hop(gw);
                    (hop.map(|h| h.0), hop.map(|_| n.router.metric_to(gw).0))
                }
                None => (None, None),
            };
            if n.alive && metric.is_some() {
                routed += 1;
            }
            self.routes.push(RouteRow { time_s: self.now, node: n.cfg.id.0, next_hop, metric });
        }
        self.checkpoints.push(Checkpoint {
            time_s: self.now,
            alive_nodes: self.nodes.iter().filter(|n| n.alive).count() as u32,
            nodes_with_gateway_route: routed,
            loop_violations: loops,
            max_energy_residual: max_residual,
            battery_monotonic: monotonic,
        });
        if !detail.is_empty() {
            self.violations += detail.len() as u64;
            if self.options.strict {
                return Err(EngineError::InvariantViolation { time: self.now, detail: detail.join("; ") });
            }
        }
        Ok(())
    }

    fn metrics(&mut self) -> Metrics {
        for i in 0..self.nodes.len() {
            self.settle(i);
        }
        let nodes: Vec<NodeMetrics> = self
            .nodes
            .iter()
            .map(|n| NodeMetrics {
                id: n.cfg.id.0,
                gateway: n.cfg.gateway,
                capacity_mah: n.battery.capacity_mah,
                consumed_mah: n.battery.consumed_mah(),
                residency_s: CoreState::all().map(|s| (s.name(), n.residency[s.index()])).collect(),
                death_time_s: n.death_time,
                final_state: n.state.name(),
                control_frames: n.stats.control_frames,
                bulk_frames: n.stats.bulk_frames,
                control_airtime_s: n.stats.control_airtime_s,
                bulk_airtime_s: n.stats.bulk_airtime_s,
                frames_lost: n.stats.frames_lost,
                frames_dropped: n.stats.frames_dropped,
                samples: n.stats.samples,
                reports_sent: n.stats.reports_sent,
                images_triggered: n.stats.images_triggered,
                chunks_abandoned: n.stats.chunks_abandoned,
            })
            .collect();
        let mut images = self.images.clone();
        for rec in &mut images {
            if !rec.is_complete() {
                rec.chunks_received = self.store.chunks_received(NodeId(rec.origin), rec.image) as u16;
            }
        }
        let totals = Totals {
            consumed_mah: nodes.iter().map(|n| n.consumed_mah).sum(),
            images_triggered: images.len() as u64,
            images_complete: images.iter().filter(|r| r.is_complete()).count() as u64,
            reports_delivered: self.store.reports.len() as u64,
            frames_lost: nodes.iter().map(|n| n.frames_lost).sum(),
            invariant_violations: self.violations,
            event_loop_violations: self.event_loop_violations,
        };
        Metrics {
            duration_s: self.scenario.duration_s,
            events: self.events,
            nodes,
            images,
            checkpoints: self.checkpoints.clone(),
            routes: self.routes.clone(),
            gateway_log: self.store.reports.clone(),
            totals,
        }
    }
}

/// Simulates `scenario` from 0 to its duration.
pub fn run(scenario: &Scenario, options: RunOptions) -> Result<Metrics, EngineError> {
    Simulation::new(scenario, options)?.finish()
}
