//! Shared domain vocabulary: node identity, core power states, sensors,
//! frames and the planar radio topology.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest frame the low-rate control radio accepts (802.15.4 MPDU).
pub const CONTROL_FRAME_CAP: u32 = 127;

/// Bytes of link-layer header accounted in every frame's `size_bytes`.
pub const FRAME_HEADER_BYTES: u32 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("frame size must be positive")]
    EmptyFrame,
    #[error("control frame of {size} bytes exceeds the {cap}-byte cap")]
    OversizedControlFrame { size: u32, cap: u32 },
    #[error("{kind:?} frames cannot travel on {radio:?}")]
    WrongRadio { kind: FrameKind, radio: RadioKind },
    #[error("payload of {payload} bytes does not fit a {size}-byte frame")]
    PayloadTooLarge { payload: usize, size: u32 },
    #[error("unrecognised core state '{0}'")]
    BadCoreState(String),
    #[error("unrecognised sensor kind '{0}'")]
    BadSensorKind(String),
}

/// Node identifier, unique within a scenario. `0xFFFF` is reserved for broadcast.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub const BROADCAST: NodeId = NodeId(0xFFFF);

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_broadcast() {
            f.write_str("*")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Power state of the 8-bit scalar MCU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McuState {
    Active,
    Idle,
    Off,
}

/// Power state of the multimedia board.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SocState {
    Off,
    WifiOff,
    WifiOn,
}

impl McuState {
    pub const ALL: [McuState; 3] = [McuState::Active, McuState::Idle, McuState::Off];

    pub fn name(self) -> &'static str {
        match self {
            McuState::Active => "active",
            McuState::Idle => "idle",
            McuState::Off => "off",
        }
    }
}

impl SocState {
    pub const ALL: [SocState; 3] = [SocState::Off, SocState::WifiOff, SocState::WifiOn];

    pub fn name(self) -> &'static str {
        match self {
            SocState::Off => "off",
            SocState::WifiOff => "wifi_off",
            SocState::WifiOn => "wifi_on",
        }
    }
}

/// Joint state of the node's cores. The nano-controller is not represented:
/// it is on in every state, so there is no way to express it being off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreState {
    pub mcu: McuState,
    pub soc: SocState,
}

impl CoreState {
    pub const COUNT: usize = 9;

    pub const fn new(mcu: McuState, soc: SocState) -> Self {
        Self { mcu, soc }
    }

    /// All nine joint states in a fixed order (mcu-major).
    pub fn all() -> impl Iterator<Item = CoreState> {
        McuState::ALL
            .into_iter()
            .flat_map(|mcu| SocState::ALL.into_iter().map(move |soc| CoreState { mcu, soc }))
    }

    /// Dense index in `0..9`, consistent with [`CoreState::all`].
    pub fn index(self) -> usize {
        let m = match self.mcu {
            McuState::Active => 0,
            McuState::Idle => 1,
            McuState::Off => 2,
        };
        let s = match self.soc {
            SocState::Off => 0,
            SocState::WifiOff => 1,
            SocState::WifiOn => 2,
        };
        m * 3 + s
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < Self::COUNT).then(|| CoreState {
            mcu: McuState::ALL[i / 3],
            soc: SocState::ALL[i % 3],
        })
    }

    pub fn nano_on(self) -> bool {
        true
    }

    /// `mcu:soc`, e.g. `idle:wifi_on`.
    pub fn name(self) -> String {
        format!("{}:{}", self.mcu.name(), self.soc.name())
    }
}

impl fmt::Display for CoreState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for CoreState {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadCoreState(s.to_string());
        let (m, c) = s.split_once(':').ok_or_else(bad)?;
        let mcu = McuState::ALL
            .into_iter()
            .find(|x| x.name() == m.trim())
            .ok_or_else(bad)?;
        let soc = SocState::ALL
            .into_iter()
            .find(|x| x.name() == c.trim())
            .ok_or_else(bad)?;
        Ok(CoreState { mcu, soc })
    }
}

/// Running-mode label derived from a [`CoreState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RunningMode {
    /// Scalar sensing only.
    Swsn,
    /// Multimedia board only.
    Wmsn,
    /// Both boards up.
    Swmsn,
    Sleep,
}

pub fn mode_label(state: CoreState) -> RunningMode {
    match (state.mcu != McuState::Off, state.soc != SocState::Off) {
        (true, false) => RunningMode::Swsn,
        (false, true) => RunningMode::Wmsn,
        (true, true) => RunningMode::Swmsn,
        (false, false) => RunningMode::Sleep,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    WatermarkSoilMoisture,
    DecagonSoilMoisture,
    AirTemperature,
    SoilTemperature,
    AirHumidity,
    Light,
}

impl SensorKind {
    pub const ALL: [SensorKind; 6] = [
        SensorKind::WatermarkSoilMoisture,
        SensorKind::DecagonSoilMoisture,
        SensorKind::AirTemperature,
        SensorKind::SoilTemperature,
        SensorKind::AirHumidity,
        SensorKind::Light,
    ];

    /// Number of slots the scalar board provides for this kind.
    pub fn capacity(self) -> u8 {
        match self {
            SensorKind::WatermarkSoilMoisture => 4,
            SensorKind::DecagonSoilMoisture => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SensorKind::WatermarkSoilMoisture => "watermark_soil_moisture",
            SensorKind::DecagonSoilMoisture => "decagon_soil_moisture",
            SensorKind::AirTemperature => "air_temperature",
            SensorKind::SoilTemperature => "soil_temperature",
            SensorKind::AirHumidity => "air_humidity",
            SensorKind::Light => "light",
        }
    }

    pub fn code(self) -> u8 {
        SensorKind::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        SensorKind::ALL.get(code as usize).copied()
    }
}

impl FromStr for SensorKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::BadSensorKind(s.to_string()))
    }
}

/// One physical sensor input on a node: kind plus slot index within that kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SensorSlot {
    pub kind: SensorKind,
    pub slot: u8,
}

impl SensorSlot {
    pub fn new(kind: SensorKind, slot: u8) -> Self {
        Self { kind, slot }
    }

    /// The full sensor complement of one scalar board.
    pub fn full_board() -> Vec<SensorSlot> {
        SensorKind::ALL
            .into_iter()
            .flat_map(|k| (0..k.capacity()).map(move |s| SensorSlot::new(k, s)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub node: NodeId,
    pub sensor: SensorSlot,
    pub value: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadioKind {
    /// Low-rate, low-power mesh (802.15.4 class).
    ControlMesh,
    /// High-rate mesh carried by the multimedia board (802.11 class).
    BulkMesh,
}

impl RadioKind {
    pub const ALL: [RadioKind; 2] = [RadioKind::ControlMesh, RadioKind::BulkMesh];

    pub fn index(self) -> usize {
        match self {
            RadioKind::ControlMesh => 0,
            RadioKind::BulkMesh => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RadioKind::ControlMesh => "control",
            RadioKind::BulkMesh => "bulk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    ScalarReport,
    Command,
    RouteMsg,
    ImageChunk,
    Ack,
}

/// A message on one of the two radios.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dst: NodeId,
    pub radio: RadioKind,
    pub kind: FrameKind,
    pub size_bytes: u32,
    pub payload: Vec<u8>,
    pub seq: u32,
}

impl Frame {
    /// Builds a frame, enforcing the per-radio size cap and kind/radio pairing.
    ///
    /// `payload` holds the structured content; `size_bytes` is the on-air size,
    /// which may exceed the payload when the frame carries opaque bulk data.
    pub fn new(
        src: NodeId,
        dst: NodeId,
        radio: RadioKind,
        kind: FrameKind,
        size_bytes: u32,
        payload: Vec<u8>,
        seq: u32,
    ) -> Result<Self, ModelError> {
        if size_bytes == 0 {
            return Err(ModelError::EmptyFrame);
        }
        if payload.len() > size_bytes as usize {
            return Err(ModelError::PayloadTooLarge { payload: payload.len(), size: size_bytes });
        }
        if kind == FrameKind::ImageChunk && radio != RadioKind::BulkMesh {
            return Err(ModelError::WrongRadio { kind, radio });
        }
        if radio == RadioKind::ControlMesh && size_bytes > CONTROL_FRAME_CAP {
            return Err(ModelError::OversizedControlFrame { size: size_bytes, cap: CONTROL_FRAME_CAP });
        }
        Ok(Frame { src, dst, radio, kind, size_bytes, payload, seq })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Base link-loss model applied when no per-link override exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossModel {
    /// Same probability on every link.
    Constant(f64),
    /// Grows linearly with distance from 0 at the sender to `max` at the radio's range.
    LinearDistance { max: f64 },
}

/// Node placement, disk radio ranges and per-link Bernoulli loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    positions: BTreeMap<NodeId, Position>,
    ranges: [f64; 2],
    loss: LossModel,
    /// Directed `(from, to)` loss overrides.
    overrides: BTreeMap<(NodeId, NodeId), f64>,
    /// Administratively failed links, stored with the smaller id first.
    down: BTreeSet<(NodeId, NodeId)>,
}

fn undirected(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Topology {
    pub fn new(control_range_m: f64, bulk_range_m: f64) -> Self {
        Self {
            positions: BTreeMap::new(),
            ranges: [control_range_m, bulk_range_m],
            loss: LossModel::Constant(0.0),
            overrides: BTreeMap::new(),
            down: BTreeSet::new(),
        }
    }

    pub fn with_loss(mut self, loss: LossModel) -> Self {
        self.loss = loss;
        self
    }

    pub fn add_node(&mut self, id: NodeId, pos: Position) {
        self.positions.insert(id, pos);
    }

    /// Sets the loss probability for both directions of a link.
    pub fn set_link_loss(&mut self, a: NodeId, b: NodeId, p: f64) {
        self.overrides.insert((a, b), p);
        self.overrides.insert((b, a), p);
    }

    /// Sets the loss probability for frames sent from `from` to `to` only.
    pub fn set_directed_loss(&mut self, from: NodeId, to: NodeId, p: f64) {
        self.overrides.insert((from, to), p);
    }

    pub fn set_link_up(&mut self, a: NodeId, b: NodeId, up: bool) {
        if up {
            self.down.remove(&undirected(a, b));
        } else {
            self.down.insert(undirected(a, b));
        }
    }

    pub fn is_link_down(&self, a: NodeId, b: NodeId) -> bool {
        self.down.contains(&undirected(a, b))
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.positions.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, node: NodeId) -> Result<Position, ModelError> {
        self.positions.get(&node).copied().ok_or(ModelError::UnknownNode(node))
    }

    pub fn range(&self, radio: RadioKind) -> f64 {
        self.ranges[radio.index()]
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<f64, ModelError> {
        Ok(self.position(a)?.distance(self.position(b)?))
    }

    /// Whether `a` and `b` can hear each other on `radio` right now.
    pub fn has_link(&self, a: NodeId, b: NodeId, radio: RadioKind) -> bool {
        if a == b || self.is_link_down(a, b) {
            return false;
        }
        match (self.positions.get(&a), self.positions.get(&b)) {
            (Some(pa), Some(pb)) => pa.distance(*pb) <= self.range(radio),
            _ => false,
        }
    }

    /// Neighbors of `node` on `radio`: every other node within range whose
    /// link is not administratively down.
    pub fn links_of(&self, node: NodeId, radio: RadioKind) -> Result<BTreeSet<NodeId>, ModelError> {
        self.position(node)?;
        Ok(self
            .positions
            .keys()
            .copied()
            .filter(|&other| self.has_link(node, other, radio))
            .collect())
    }

    /// Neighbors reachable on both radios; the routing mesh runs over these.
    pub fn mesh_links(&self, node: NodeId) -> Result<BTreeSet<NodeId>, ModelError> {
        let control = self.links_of(node, RadioKind::ControlMesh)?;
        let bulk = self.links_of(node, RadioKind::BulkMesh)?;
        Ok(control.intersection(&bulk).copied().collect())
    }

    /// Loss probability for a frame sent from `from` to `to` on `radio`.
    pub fn loss(&self, from: NodeId, to: NodeId, radio: RadioKind) -> f64 {
        if let Some(p) = self.overrides.get(&(from, to)) {
            return *p;
        }
        match self.loss {
            LossModel::Constant(p) => p,
            LossModel::LinearDistance { max } => {
                let d = self.distance(from, to).unwrap_or(f64::INFINITY);
                (max * d / self.range(radio)).clamp(0.0, 1.0)
            }
        }
    }
}
