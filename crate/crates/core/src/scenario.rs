//! Scenario files: a TOML document with a versioned header line.
//!
//! Parsing fills documented defaults, then validates the resolved scenario and
//! reports every problem found rather than stopping at the first. Unknown keys
//! are errors unless the caller asks for lax handling, in which case they come
//! back as warnings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    CoreState, LossModel, McuState, NodeId, Position, SensorKind, SensorSlot, SocState, Topology, CONTROL_FRAME_CAP,
    FRAME_HEADER_BYTES,
};
use crate::power::{EnergyModel, PmuCommand, TWO_AA_CAPACITY_MAH};
use crate::radio::RadioSpec;
use crate::routing::RoutingConfig;
use crate::sensing::{Baseline, FieldEvent, FieldModel, Thresholds, TriggerPolicy};
use crate::wire::{CHUNK_HEADER_BYTES, REPORT_FIXED_BYTES, REPORT_READING_BYTES};

pub const HEADER: &str = "# wmsn-scenario v1";

/// One problem found in a scenario, located by a dotted key path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl Issue {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario:\n{}", render(.0))]
    Invalid(Vec<Issue>),
}

impl ScenarioError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            ScenarioError::Invalid(v) => v,
        }
    }
}

fn render(issues: &[Issue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatterySpec {
    TwoAA,
    Mains,
    Capacity(f64),
}

impl BatterySpec {
    /// `None` for mains power.
    pub fn capacity_mah(self) -> Option<f64> {
        match self {
            BatterySpec::TwoAA => Some(TWO_AA_CAPACITY_MAH),
            BatterySpec::Mains => None,
            BatterySpec::Capacity(c) => Some(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub id: NodeId,
    pub position: Position,
    pub gateway: bool,
    pub battery: BatterySpec,
    pub sensors: Vec<SensorSlot>,
    pub thresholds: Thresholds,
    pub sample_period_s: f64,
    /// Whether the node samples its sensors at all.
    pub sampling: bool,
    pub multimedia_period_s: Option<f64>,
    pub image_bytes: u64,
    pub linger_s: f64,
    pub boot_delay_s: f64,
    /// Overrides the default start state: the gateway starts with its bulk
    /// radio up, every other node with only the MCU idling.
    pub initial_state: Option<CoreState>,
}

impl NodeConfig {
    /// A battery-powered sensor node with the documented defaults.
    pub fn sensor(id: u16, x: f64, y: f64) -> Self {
        Self {
            id: NodeId(id),
            position: Position::new(x, y),
            gateway: false,
            battery: BatterySpec::TwoAA,
            sensors: SensorSlot::full_board(),
            thresholds: Thresholds::uniform(1.0),
            sample_period_s: 300.0,
            sampling: true,
            multimedia_period_s: None,
            image_bytes: 1 << 20,
            linger_s: 2.0,
            boot_delay_s: 0.0,
            initial_state: None,
        }
    }

    /// A mains-powered gateway with the documented defaults.
    pub fn gateway(id: u16, x: f64, y: f64) -> Self {
        Self { gateway: true, battery: BatterySpec::Mains, ..Self::sensor(id, x, y) }
    }

    pub fn start_state(&self) -> CoreState {
        self.initial_state.unwrap_or(if self.gateway {
            CoreState::new(McuState::Idle, SocState::WifiOn)
        } else {
            CoreState::new(McuState::Idle, SocState::Off)
        })
    }

    pub fn trigger_policy(&self) -> TriggerPolicy {
        TriggerPolicy {
            thresholds: self.thresholds.clone(),
            sample_period_s: self.sample_period_s,
            multimedia_period_s: self.multimedia_period_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Run the routing protocol; without it nodes only reach direct neighbors.
    pub routing: bool,
    pub checkpoint_interval_s: f64,
    pub chunk_bytes: u32,
    /// Retransmissions per image chunk after the first attempt.
    pub max_retries: u32,
    /// Slack added to the chunk round trip before retransmitting.
    pub ack_guard_s: f64,
    /// How long to wait for a neighbor to report its bulk radio up.
    pub wake_timeout_s: f64,
    /// Keep sampling and reporting while the multimedia board is busy.
    pub scalar_during_multimedia: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            routing: true,
            checkpoint_interval_s: 60.0,
            chunk_bytes: 1400,
            max_retries: 3,
            ack_guard_s: 0.01,
            wake_timeout_s: 5.0,
            scalar_during_multimedia: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkOverride {
    pub a: NodeId,
    pub b: NodeId,
    pub loss: f64,
    /// Applies only from `a` to `b` when set.
    pub directed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkLoss {
    pub base: LossModel,
    pub overrides: Vec<LinkOverride>,
}

impl Default for LinkLoss {
    fn default() -> Self {
        Self { base: LossModel::Constant(0.0), overrides: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldSpec {
    pub baselines: BTreeMap<SensorKind, Baseline>,
    pub events: Vec<FieldEvent>,
    pub noise: BTreeMap<SensorKind, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScriptAction {
    /// A capture command arriving at the node.
    Capture { node: NodeId },
    Pmu { node: NodeId, command: PmuCommand },
    LinkDown { a: NodeId, b: NodeId },
    LinkUp { a: NodeId, b: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptEntry {
    pub at_s: f64,
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub duration_s: f64,
    pub seed: u64,
    pub control: RadioSpec,
    pub bulk: RadioSpec,
    pub routing: RoutingConfig,
    pub engine: EngineConfig,
    pub energy: EnergyModel<f64>,
    pub link_loss: LinkLoss,
    pub field: FieldSpec,
    pub nodes: Vec<NodeConfig>,
    pub script: Vec<ScriptEntry>,
}

impl Scenario {
    /// An empty scenario with every default filled.
    pub fn new(duration_s: f64) -> Self {
        Self {
            duration_s,
            seed: 0,
            control: RadioSpec::control(100.0),
            bulk: RadioSpec::bulk(100.0),
            routing: RoutingConfig::default(),
            engine: EngineConfig::default(),
            energy: EnergyModel::measured(),
            link_loss: LinkLoss::default(),
            field: FieldSpec::default(),
            nodes: Vec::new(),
            script: Vec::new(),
        }
    }

    pub fn gateway(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.gateway).map(|n| n.id)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn topology(&self) -> Topology {
        let mut t = Topology::new(self.control.range_m, self.bulk.range_m).with_loss(self.link_loss.base);
        for n in &self.nodes {
            t.add_node(n.id, n.position);
        }
        for o in &self.link_loss.overrides {
            if o.directed {
                t.set_directed_loss(o.a, o.b, o.loss);
            } else {
                t.set_link_loss(o.a, o.b, o.loss);
            }
        }
        t
    }

    pub fn field_model(&self) -> FieldModel {
        FieldModel {
            baselines: self.field.baselines.clone(),
            events: self.field.events.clone(),
            noise: self.field.noise.clone(),
            seed: self.seed,
        }
    }

    /// Every constraint violation, in a stable order.
    pub fn validate(&self) -> Vec<Issue> {
        let mut v = Vec::new();
        let pos = |v: &mut Vec<Issue>, path: &str, x: f64| {
            if !(x.is_finite() && x > 0.0) {
                v.push(Issue::new(path, format!("must be a positive number, got {x}")));
            }
        };
        let nonneg = |v: &mut Vec<Issue>, path: &str, x: f64| {
            if !(x.is_finite() && x >= 0.0) {
                v.push(Issue::new(path, format!("must be a non-negative number, got {x}")));
            }
        };
        let prob = |v: &mut Vec<Issue>, path: &str, x: f64| {
            if !(0.0..=1.0).contains(&x) {
                v.push(Issue::new(path, format!("must be a probability in [0, 1], got {x}")));
            }
        };

        pos(&mut v, "duration_s", self.duration_s);
        if self.seed > i64::MAX as u64 {
            v.push(Issue::new("seed", "must fit in a signed 64-bit integer"));
        }
        for (name, spec) in [("control", &self.control), ("bulk", &self.bulk)] {
            if spec.bandwidth_bps == 0 {
                v.push(Issue::new(format!("radio.{name}.bandwidth_bps"), "must be positive"));
            }
            pos(&mut v, &format!("radio.{name}.range_m"), spec.range_m);
            nonneg(&mut v, &format!("radio.{name}.per_hop_overhead_s"), spec.per_hop_overhead_s);
        }
        pos(&mut v, "routing.hello_interval_s", self.routing.hello_interval_s);
        if self.routing.hello_interval_s > 655.35 {
            v.push(Issue::new("routing.hello_interval_s", "must be at most 655.35 s to fit the hello encoding"));
        }
        pos(&mut v, "routing.update_interval_s", self.routing.update_interval_s);
        if self.routing.hold_multiplier == 0 {
            v.push(Issue::new("routing.hold_multiplier", "must be at least 1"));
        }
        if self.routing.request_hop_limit == 0 {
            v.push(Issue::new("routing.request_hop_limit", "must be at least 1"));
        }
        pos(&mut v, "engine.checkpoint_interval_s", self.engine.checkpoint_interval_s);
        if self.engine.chunk_bytes == 0 {
            v.push(Issue::new("engine.chunk_bytes", "must be positive"));
        }
        nonneg(&mut v, "engine.ack_guard_s", self.engine.ack_guard_s);
        pos(&mut v, "engine.wake_timeout_s", self.engine.wake_timeout_s);
        for (state, ma) in self.energy.iter() {
            if !(ma.is_finite() && ma > 0.0) {
                v.push(Issue::new(format!("energy.\"{state}\""), format!("current must be positive, got {ma}")));
            }
        }
        match self.link_loss.base {
            LossModel::Constant(p) => prob(&mut v, "link_loss.value", p),
            LossModel::LinearDistance { max } => prob(&mut v, "link_loss.value", max),
        }
        for (kind, b) in &self.field.baselines {
            let p = format!("field.baseline.{}", kind.name());
            for (k, x) in [("value", b.value), ("gradient_x", b.gradient_x), ("gradient_y", b.gradient_y), ("diurnal_amplitude", b.diurnal_amplitude)] {
                if !x.is_finite() {
                    v.push(Issue::new(format!("{p}.{k}"), "must be finite"));
                }
            }
            pos(&mut v, &format!("{p}.diurnal_period_s"), b.diurnal_period_s);
        }
        for (kind, a) in &self.field.noise {
            nonneg(&mut v, &format!("field.noise.{}", kind.name()), *a);
        }
        for (i, e) in self.field.events.iter().enumerate() {
            let p = format!("field.event[{i}]");
            nonneg(&mut v, &format!("{p}.start_s"), e.start_s);
            pos(&mut v, &format!("{p}.duration_s"), e.duration_s);
            nonneg(&mut v, &format!("{p}.radius_m"), e.radius_m);
            if !(e.center.x.is_finite() && e.center.y.is_finite()) {
                v.push(Issue::new(format!("{p}.x"), "position must be finite"));
            }
            if !e.delta.is_finite() {
                v.push(Issue::new(format!("{p}.delta"), "must be finite"));
            }
        }

        let gateways: Vec<NodeId> = self.nodes.iter().filter(|n| n.gateway).map(|n| n.id).collect();
        if !self.nodes.is_empty() && gateways.is_empty() {
            v.push(Issue::new("node", "no node is marked as the gateway"));
        }
        if gateways.len() > 1 {
            let ids: Vec<String> = gateways.iter().map(|g| g.to_string()).collect();
            v.push(Issue::new("node", format!("exactly one gateway allowed, found {}", ids.join(", "))));
        }
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let p = format!("node[{i}]");
            if n.id.is_broadcast() {
                v.push(Issue::new(format!("{p}.id"), "65535 is reserved for broadcast"));
            }
            if !seen.insert(n.id) {
                v.push(Issue::new(format!("{p}.id"), format!("duplicate node id {}", n.id)));
            }
            if !(n.position.x.is_finite() && n.position.y.is_finite()) {
                v.push(Issue::new(format!("{p}.x"), "position must be finite"));
            }
            if let BatterySpec::Capacity(c) = n.battery {
                pos(&mut v, &format!("{p}.battery"), c);
            }
            let mut slots = BTreeSet::new();
            for s in &n.sensors {
                if s.slot >= s.kind.capacity() {
                    v.push(Issue::new(
                        format!("{p}.sensors"),
                        format!("{} has {} slot(s), slot {} does not exist", s.kind.name(), s.kind.capacity(), s.slot),
                    ));
                }
                if !slots.insert(*s) {
                    v.push(Issue::new(format!("{p}.sensors"), format!("{}:{} listed twice", s.kind.name(), s.slot)));
                }
            }
            let report = FRAME_HEADER_BYTES + REPORT_FIXED_BYTES + REPORT_READING_BYTES * n.sensors.len() as u32;
            if report > CONTROL_FRAME_CAP {
                v.push(Issue::new(format!("{p}.sensors"), "too many sensors for one control frame"));
            }
            pos(&mut v, &format!("{p}.threshold"), n.thresholds.default);
            for (kind, t) in &n.thresholds.per_kind {
                pos(&mut v, &format!("{p}.thresholds.{}", kind.name()), *t);
            }
            pos(&mut v, &format!("{p}.sample_period_s"), n.sample_period_s);
            if let Some(m) = n.multimedia_period_s {
                pos(&mut v, &format!("{p}.multimedia_period_s"), m);
            }
            if n.image_bytes == 0 {
                v.push(Issue::new(format!("{p}.image_bytes"), "must be positive"));
            } else if self.engine.chunk_bytes > 0
                && n.image_bytes.div_ceil(self.engine.chunk_bytes as u64) > u16::MAX as u64
            {
                v.push(Issue::new(format!("{p}.image_bytes"), "needs more than 65535 chunks"));
            }
            nonneg(&mut v, &format!("{p}.linger_s"), n.linger_s);
            nonneg(&mut v, &format!("{p}.boot_delay_s"), n.boot_delay_s);
            if n.boot_delay_s >= self.engine.wake_timeout_s {
                v.push(Issue::new(format!("{p}.boot_delay_s"), "must be shorter than engine.wake_timeout_s"));
            }
        }
        let known = |id: NodeId| self.nodes.iter().any(|n| n.id == id);
        for (i, o) in self.link_loss.overrides.iter().enumerate() {
            let p = format!("link_loss.link[{i}]");
            for (k, id) in [("a", o.a), ("b", o.b)] {
                if !known(id) {
                    v.push(Issue::new(format!("{p}.{k}"), format!("unknown node {id}")));
                }
            }
            if o.a == o.b {
                v.push(Issue::new(p.clone(), "a link needs two distinct nodes"));
            }
            prob(&mut v, &format!("{p}.loss"), o.loss);
        }
        for (i, s) in self.script.iter().enumerate() {
            let p = format!("script[{i}]");
            if !(s.at_s.is_finite() && s.at_s >= 0.0 && s.at_s <= self.duration_s) {
                v.push(Issue::new(format!("{p}.at_s"), format!("must lie within [0, duration_s], got {}", s.at_s)));
            }
            match s.action {
                ScriptAction::Capture { node } | ScriptAction::Pmu { node, .. } => {
                    if !known(node) {
                        v.push(Issue::new(format!("{p}.node"), format!("unknown node {node}")));
                    }
                }
                ScriptAction::LinkDown { a, b } | ScriptAction::LinkUp { a, b } => {
                    for (k, id) in [("a", a), ("b", b)] {
                        if !known(id) {
                            v.push(Issue::new(format!("{p}.{k}"), format!("unknown node {id}")));
                        }
                    }
                    if a == b {
                        v.push(Issue::new(p.clone(), "a link needs two distinct nodes"));
                    }
                }
            }
        }
        v
    }

    /// Fully resolved TOML form; parsing it back yields an equal scenario.
    pub fn to_toml(&self) -> String {
        let raw = RawScenario::from_resolved(self);
        let body = toml::to_string(&raw).expect("resolved scenario serializes");
        format!("{HEADER}\n{body}")
    }

    /// Hex SHA-256 of the resolved form, so any semantic change alters it.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Smallest payload an image chunk frame can carry.
    pub fn chunk_frame_bytes(&self, data: u32) -> u32 {
        FRAME_HEADER_BYTES + CHUNK_HEADER_BYTES + data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseOptions {
    /// Report unknown keys as warnings instead of errors.
    pub lax_keys: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub scenario: Scenario,
    pub warnings: Vec<String>,
}

// Raw file layout. Everything is optional so defaults can be layered and so
// that every problem can be reported together.

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawScenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radio: Option<RawRadios>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    routing: Option<RawRouting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    engine: Option<RawEngine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    link_loss: Option<RawLinkLoss>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    field: Option<RawField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_defaults: Option<RawNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    node: Vec<RawNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    script: Vec<RawScript>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawRadios {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control: Option<RawRadio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bulk: Option<RawRadio>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawRadio {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bandwidth_bps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_hop_overhead_s: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawRouting {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hello_interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    update_interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hold_multiplier: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    request_hop_limit: Option<u8>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawEngine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    routing: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint_interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chunk_bytes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ack_guard_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wake_timeout_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scalar_during_multimedia: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawLinkLoss {
    /// "constant" or "linear_distance".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    link: Vec<RawLink>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawLink {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    directed: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawField {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    baseline: BTreeMap<String, Baseline>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    noise: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    event: Vec<RawEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawEvent {
    start_s: f64,
    duration_s: f64,
    x: f64,
    y: f64,
    radius_m: f64,
    kind: String,
    delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawBattery {
    Named(String),
    Capacity(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawSensors {
    Preset(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawNode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gateway: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    battery: Option<RawBattery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sensors: Option<RawSensors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample_period_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sampling: Option<bool>,
    /// 0 disables periodic capture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    multimedia_period_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_bytes: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    linger_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boot_delay_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_state: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thresholds: Option<BTreeMap<String, f64>>,
}

impl RawNode {
    /// Fields of `self` win over those of `defaults`.
    fn layered(&self, defaults: &RawNode) -> RawNode {
        macro_rules! pick {
            ($($f:ident),*) => { RawNode { $($f: self.$f.clone().or_else(|| defaults.$f.clone()),)* } };
        }
        let mut out = pick!(
            id, x, y, gateway, battery, sensors, threshold, sample_period_s, sampling, multimedia_period_s,
            image_bytes, linger_s, boot_delay_s, initial_state, thresholds
        );
        // A gateway stays on mains unless it names its own supply.
        if out.gateway == Some(true) {
            out.battery = self.battery.clone();
        }
        out
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    at_s: Option<f64>,
    /// capture | pmu | link_down | link_up
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<i64>,
}

fn kind_key(path: &str, key: &str, issues: &mut Vec<Issue>) -> Option<SensorKind> {
    match key.parse::<SensorKind>() {
        Ok(k) => Some(k),
        Err(_) => {
            issues.push(Issue::new(format!("{path}.{key}"), "unknown sensor kind"));
            None
        }
    }
}

fn node_id(path: &str, raw: Option<i64>, issues: &mut Vec<Issue>) -> NodeId {
    match raw {
        None => {
            issues.push(Issue::new(path, "missing"));
            NodeId(0)
        }
        Some(i) if (0..=u16::MAX as i64).contains(&i) => NodeId(i as u16),
        Some(i) => {
            issues.push(Issue::new(path, format!("node id must lie in 0..=65534, got {i}")));
            NodeId(0)
        }
    }
}

fn parse_sensor(s: &str) -> Option<SensorSlot> {
    let (kind, slot) = match s.split_once(':') {
        Some((k, n)) => (k, n.parse::<u8>().ok()?),
        None => (s, 0),
    };
    Some(SensorSlot::new(kind.parse().ok()?, slot))
}

fn sensor_name(s: SensorSlot) -> String {
    format!("{}:{}", s.kind.name(), s.slot)
}

impl RawScenario {
    fn resolve(&self, issues: &mut Vec<Issue>) -> Scenario {
        let mut sc = Scenario::new(self.duration_s.unwrap_or(86_400.0));
        match self.seed {
            Some(s) if s < 0 => issues.push(Issue::new("seed", "must be non-negative")),
            Some(s) => sc.seed = s as u64,
            None => {}
        }
        if let Some(r) = &self.radio {
            for (raw, spec) in [(&r.control, &mut sc.control), (&r.bulk, &mut sc.bulk)] {
                if let Some(raw) = raw {
                    spec.bandwidth_bps = raw.bandwidth_bps.unwrap_or(spec.bandwidth_bps);
                    spec.range_m = raw.range_m.unwrap_or(spec.range_m);
                    spec.per_hop_overhead_s = raw.per_hop_overhead_s.unwrap_or(spec.per_hop_overhead_s);
                }
            }
        }
        if let Some(r) = &self.routing {
            let d = &mut sc.routing;
            d.hello_interval_s = r.hello_interval_s.unwrap_or(d.hello_interval_s);
            d.update_interval_s = r.update_interval_s.unwrap_or(d.update_interval_s);
            d.hold_multiplier = r.hold_multiplier.unwrap_or(d.hold_multiplier);
            d.request_hop_limit = r.request_hop_limit.unwrap_or(d.request_hop_limit);
        }
        if let Some(e) = &self.engine {
            let d = &mut sc.engine;
            d.routing = e.routing.unwrap_or(d.routing);
            d.checkpoint_interval_s = e.checkpoint_interval_s.unwrap_or(d.checkpoint_interval_s);
            d.chunk_bytes = e.chunk_bytes.unwrap_or(d.chunk_bytes);
            d.max_retries = e.max_retries.unwrap_or(d.max_retries);
            d.ack_guard_s = e.ack_guard_s.unwrap_or(d.ack_guard_s);
            d.wake_timeout_s = e.wake_timeout_s.unwrap_or(d.wake_timeout_s);
            d.scalar_during_multimedia = e.scalar_during_multimedia.unwrap_or(d.scalar_during_multimedia);
        }
        if let Some(energy) = &self.energy {
            for (key, &ma) in energy {
                match key.parse::<CoreState>() {
                    Ok(state) => match sc.energy.clone().with_current(state, ma) {
                        Ok(m) => sc.energy = m,
                        Err(e) => issues.push(Issue::new(format!("energy.\"{key}\""), e.to_string())),
                    },
                    Err(_) => issues.push(Issue::new(format!("energy.{key}"), "unknown core state, expected mcu:soc")),
                }
            }
        }
        if let Some(l) = &self.link_loss {
            let value = l.value.unwrap_or(0.0);
            sc.link_loss.base = match l.model.as_deref() {
                None | Some("constant") => LossModel::Constant(value),
                Some("linear_distance") => LossModel::LinearDistance { max: value },
                Some(other) => {
                    issues.push(Issue::new("link_loss.model", format!("unknown model {other:?}")));
                    LossModel::Constant(value)
                }
            };
            for (i, link) in l.link.iter().enumerate() {
                let p = format!("link_loss.link[{i}]");
                let a = node_id(&format!("{p}.a"), link.a, issues);
                let b = node_id(&format!("{p}.b"), link.b, issues);
                let loss = link.loss.unwrap_or_else(|| {
                    issues.push(Issue::new(format!("{p}.loss"), "missing"));
                    0.0
                });
                sc.link_loss.overrides.push(LinkOverride { a, b, loss, directed: link.directed.unwrap_or(false) });
            }
        }
        if let Some(f) = &self.field {
            for (k, b) in &f.baseline {
                if let Some(kind) = kind_key("field.baseline", k, issues) {
                    sc.field.baselines.insert(kind, *b);
                }
            }
            for (k, a) in &f.noise {
                if let Some(kind) = kind_key("field.noise", k, issues) {
                    sc.field.noise.insert(kind, *a);
                }
            }
            for (i, e) in f.event.iter().enumerate() {
                let kind = e.kind.parse().unwrap_or_else(|_| {
                    issues.push(Issue::new(format!("field.event[{i}].kind"), format!("unknown sensor kind {:?}", e.kind)));
                    SensorKind::AirTemperature
                });
                sc.field.events.push(FieldEvent {
                    start_s: e.start_s,
                    duration_s: e.duration_s,
                    center: Position::new(e.x, e.y),
                    radius_m: e.radius_m,
                    kind,
                    delta: e.delta,
                });
            }
        }
        let defaults = self.node_defaults.clone().unwrap_or_default();
        if defaults.id.is_some() || defaults.x.is_some() || defaults.y.is_some() || defaults.gateway.is_some() {
            issues.push(Issue::new("node_defaults", "id, x, y and gateway cannot have defaults"));
        }
        for (i, raw) in self.node.iter().enumerate() {
            sc.nodes.push(resolve_node(&format!("node[{i}]"), &raw.layered(&defaults), issues));
        }
        for (i, s) in self.script.iter().enumerate() {
            let p = format!("script[{i}]");
            let at_s = s.at_s.unwrap_or_else(|| {
                issues.push(Issue::new(format!("{p}.at_s"), "missing"));
                0.0
            });
            let action = match s.action.as_deref() {
                Some("capture") => ScriptAction::Capture { node: node_id(&format!("{p}.node"), s.node, issues) },
                Some("pmu") => {
                    let node = node_id(&format!("{p}.node"), s.node, issues);
                    let command = match s.command.as_deref().map(|c| (c, PmuCommand::from_name(c))) {
                        Some((_, Some(c))) => c,
                        Some((c, None)) => {
                            issues.push(Issue::new(format!("{p}.command"), format!("unknown PMU command {c:?}")));
                            PmuCommand::IdleMcu
                        }
                        None => {
                            issues.push(Issue::new(format!("{p}.command"), "missing"));
                            PmuCommand::IdleMcu
                        }
                    };
                    ScriptAction::Pmu { node, command }
                }
                Some(kind @ ("link_down" | "link_up")) => {
                    let a = node_id(&format!("{p}.a"), s.a, issues);
                    let b = node_id(&format!("{p}.b"), s.b, issues);
                    if kind == "link_down" {
                        ScriptAction::LinkDown { a, b }
                    } else {
                        ScriptAction::LinkUp { a, b }
                    }
                }
                Some(other) => {
                    issues.push(Issue::new(format!("{p}.action"), format!("unknown action {other:?}")));
                    continue;
                }
                None => {
                    issues.push(Issue::new(format!("{p}.action"), "missing"));
                    continue;
                }
            };
            sc.script.push(ScriptEntry { at_s, action });
        }
        sc
    }

    fn from_resolved(sc: &Scenario) -> Self {
        let radio = |s: &RadioSpec| RawRadio {
            bandwidth_bps: Some(s.bandwidth_bps),
            range_m: Some(s.range_m),
            per_hop_overhead_s: Some(s.per_hop_overhead_s),
        };
        let (model, value) = match sc.link_loss.base {
            LossModel::Constant(p) => ("constant", p),
            LossModel::LinearDistance { max } => ("linear_distance", max),
        };
        RawScenario {
            duration_s: Some(sc.duration_s),
            seed: Some(sc.seed as i64),
            radio: Some(RawRadios { control: Some(radio(&sc.control)), bulk: Some(radio(&sc.bulk)) }),
            routing: Some(RawRouting {
                hello_interval_s: Some(sc.routing.hello_interval_s),
                update_interval_s: Some(sc.routing.update_interval_s),
                hold_multiplier: Some(sc.routing.hold_multiplier),
                request_hop_limit: Some(sc.routing.request_hop_limit),
            }),
            engine: Some(RawEngine {
                routing: Some(sc.engine.routing),
                checkpoint_interval_s: Some(sc.engine.checkpoint_interval_s),
                chunk_bytes: Some(sc.engine.chunk_bytes),
                max_retries: Some(sc.engine.max_retries),
                ack_guard_s: Some(sc.engine.ack_guard_s),
                wake_timeout_s: Some(sc.engine.wake_timeout_s),
                scalar_during_multimedia: Some(sc.engine.scalar_during_multimedia),
            }),
            energy: Some(sc.energy.iter().map(|(s, ma)| (s.name(), ma)).collect()),
            link_loss: Some(RawLinkLoss {
                model: Some(model.to_string()),
                value: Some(value),
                link: sc
                    .link_loss
                    .overrides
                    .iter()
                    .map(|o| RawLink {
                        a: Some(o.a.0 as i64),
                        b: Some(o.b.0 as i64),
                        loss: Some(o.loss),
                        directed: Some(o.directed),
                    })
                    .collect(),
            }),
            field: Some(RawField {
                baseline: sc.field.baselines.iter().map(|(k, b)| (k.name().to_string(), *b)).collect(),
                noise: sc.field.noise.iter().map(|(k, a)| (k.name().to_string(), *a)).collect(),
                event: sc
                    .field
                    .events
                    .iter()
                    .map(|e| RawEvent {
                        start_s: e.start_s,
                        duration_s: e.duration_s,
                        x: e.center.x,
                        y: e.center.y,
                        radius_m: e.radius_m,
                        kind: e.kind.name().to_string(),
                        delta: e.delta,
                    })
                    .collect(),
            }),
            node_defaults: None,
            node: sc.nodes.iter().map(raw_node).collect(),
            script: sc.script.iter().map(raw_script).collect(),
        }
    }
}

fn resolve_node(p: &str, raw: &RawNode, issues: &mut Vec<Issue>) -> NodeConfig {
    let id = node_id(&format!("{p}.id"), raw.id, issues);
    let mut n = NodeConfig::sensor(id.0, 0.0, 0.0);
    match (raw.x, raw.y) {
        (Some(x), Some(y)) => n.position = Position::new(x, y),
        _ => issues.push(Issue::new(format!("{p}.x"), "x and y are required")),
    }
    n.gateway = raw.gateway.unwrap_or(false);
    if n.gateway {
        n.battery = BatterySpec::Mains;
    }
    match &raw.battery {
        None => {}
        Some(RawBattery::Capacity(c)) => n.battery = BatterySpec::Capacity(*c),
        Some(RawBattery::Named(s)) if s == "2xAA" => n.battery = BatterySpec::TwoAA,
        Some(RawBattery::Named(s)) if s == "mains" => n.battery = BatterySpec::Mains,
        Some(RawBattery::Named(s)) => {
            issues.push(Issue::new(format!("{p}.battery"), format!("expected mAh, \"2xAA\" or \"mains\", got {s:?}")))
        }
    }
    match &raw.sensors {
        None => {}
        Some(RawSensors::Preset(s)) if s == "full_board" => n.sensors = SensorSlot::full_board(),
        Some(RawSensors::Preset(s)) if s == "none" => n.sensors = Vec::new(),
        Some(RawSensors::Preset(s)) => {
            issues.push(Issue::new(format!("{p}.sensors"), format!("expected a list, \"full_board\" or \"none\", got {s:?}")))
        }
        Some(RawSensors::List(list)) => {
            n.sensors = Vec::new();
            for s in list {
                match parse_sensor(s) {
                    Some(slot) => n.sensors.push(slot),
                    None => issues.push(Issue::new(format!("{p}.sensors"), format!("bad sensor {s:?}, expected kind or kind:slot"))),
                }
            }
        }
    }
    if let Some(t) = raw.threshold {
        n.thresholds.default = t;
    }
    if let Some(map) = &raw.thresholds {
        for (k, t) in map {
            if let Some(kind) = kind_key(&format!("{p}.thresholds"), k, issues) {
                n.thresholds.per_kind.insert(kind, *t);
            }
        }
    }
    n.sample_period_s = raw.sample_period_s.unwrap_or(n.sample_period_s);
    n.sampling = raw.sampling.unwrap_or(n.sampling);
    n.multimedia_period_s = raw.multimedia_period_s.filter(|&m| m != 0.0);
    match raw.image_bytes {
        None => {}
        Some(b) if b >= 0 => n.image_bytes = b as u64,
        Some(b) => issues.push(Issue::new(format!("{p}.image_bytes"), format!("must be positive, got {b}"))),
    }
    n.linger_s = raw.linger_s.unwrap_or(n.linger_s);
    n.boot_delay_s = raw.boot_delay_s.unwrap_or(n.boot_delay_s);
    if let Some(s) = &raw.initial_state {
        match s.parse() {
            Ok(state) => n.initial_state = Some(state),
            Err(_) => issues.push(Issue::new(format!("{p}.initial_state"), format!("bad core state {s:?}, expected mcu:soc"))),
        }
    }
    n
}

fn raw_node(n: &NodeConfig) -> RawNode {
    RawNode {
        id: Some(n.id.0 as i64),
        x: Some(n.position.x),
        y: Some(n.position.y),
        gateway: Some(n.gateway),
        battery: Some(match n.battery {
            BatterySpec::TwoAA => RawBattery::Named("2xAA".into()),
            BatterySpec::Mains => RawBattery::Named("mains".into()),
            BatterySpec::Capacity(c) => RawBattery::Capacity(c),
        }),
        sensors: Some(RawSensors::List(n.sensors.iter().map(|&s| sensor_name(s)).collect())),
        threshold: Some(n.thresholds.default),
        sample_period_s: Some(n.sample_period_s),
        sampling: Some(n.sampling),
        multimedia_period_s: Some(n.multimedia_period_s.unwrap_or(0.0)),
        image_bytes: Some(n.image_bytes as i64),
        linger_s: Some(n.linger_s),
        boot_delay_s: Some(n.boot_delay_s),
        initial_state: n.initial_state.map(|s| s.name()),
        thresholds: Some(n.thresholds.per_kind.iter().map(|(k, t)| (k.name().to_string(), *t)).collect()),
    }
}

fn raw_script(s: &ScriptEntry) -> RawScript {
    let mut r = RawScript { at_s: Some(s.at_s), ..Default::default() };
    match s.action {
        ScriptAction::Capture { node } => {
            r.action = Some("capture".into());
            r.node = Some(node.0 as i64);
        }
        ScriptAction::Pmu { node, command } => {
            r.action = Some("pmu".into());
            r.node = Some(node.0 as i64);
            r.command = Some(command.name().into());
        }
        ScriptAction::LinkDown { a, b } | ScriptAction::LinkUp { a, b } => {
            let name = if matches!(s.action, ScriptAction::LinkDown { .. }) { "link_down" } else { "link_up" };
            r.action = Some(name.into());
            r.a = Some(a.0 as i64);
            r.b = Some(b.0 as i64);
        }
    }
    r
}

/// Parses and validates a scenario file.
pub fn parse_scenario(text: &str, options: ParseOptions) -> Result<Parsed, ScenarioError> {
    let mut issues = Vec::new();
    let first = text.lines().map(str::trim).find(|l| !l.is_empty());
    if first != Some(HEADER) {
        issues.push(Issue::new("", format!("first line must be the header {HEADER:?}")));
    }
    let mut table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            issues.push(Issue::new("", format!("syntax error: {}", e.message())));
            return Err(ScenarioError::Invalid(issues));
        }
    };
    // `link_loss = 0.1` is shorthand for a constant model.
    if let Some(v) = table.get("link_loss") {
        let p = match v {
            toml::Value::Float(f) => Some(*f),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => None,
        };
        if let Some(p) = p {
            let mut t = toml::Table::new();
            t.insert("value".into(), toml::Value::Float(p));
            table.insert("link_loss".into(), toml::Value::Table(t));
        }
    }
    let mut unknown = Vec::new();
    let raw: Result<RawScenario, _> =
        serde_ignored::deserialize(toml::Value::Table(table), |path| unknown.push(path.to_string()));
    let raw = match raw {
        Ok(r) => r,
        Err(e) => {
            issues.push(Issue::new("", e.to_string().trim().to_string()));
            return Err(ScenarioError::Invalid(issues));
        }
    };
    let mut warnings = Vec::new();
    for key in unknown {
        if options.lax_keys {
            warnings.push(format!("ignoring unknown key {key}"));
        } else {
            issues.push(Issue::new(key, "unknown key"));
        }
    }
    let scenario = raw.resolve(&mut issues);
    issues.extend(scenario.validate());
    if issues.is_empty() {
        Ok(Parsed { scenario, warnings })
    } else {
        Err(ScenarioError::Invalid(issues))
    }
}
