//! Synthetic environment field, sampling, and multimedia activation triggers.
//!
//! A node's scalar board samples its sensors periodically. The multimedia
//! board is activated by one of three causes: a reading that moved by more
//! than the threshold since the last reported value, a received command, or
//! the multimedia sampling period elapsing.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{NodeId, Position, SensorKind, SensorReading, SensorSlot};
use crate::num::Scalar;
use crate::rng;

/// Smooth background value of one sensor kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    #[serde(default)]
    pub gradient_x: f64,
    #[serde(default)]
    pub gradient_y: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    #[serde(default = "default_diurnal_period")]
    pub diurnal_period_s: f64,
}

fn default_diurnal_period() -> f64 {
    86_400.0
}

impl Baseline {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            gradient_x: 0.0,
            gradient_y: 0.0,
            diurnal_amplitude: 0.0,
            diurnal_period_s: default_diurnal_period(),
        }
    }

    pub fn eval(&self, pos: Position, t: f64) -> f64 {
        let mut v = self.value + self.gradient_x * pos.x + self.gradient_y * pos.y;
        if self.diurnal_amplitude != 0.0 {
            v += self.diurnal_amplitude * (std::f64::consts::TAU * t / self.diurnal_period_s).sin();
        }
        v
    }
}

/// Step perturbation of one sensor kind inside a disk, active on
/// `[start_s, start_s + duration_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldEvent {
    pub start_s: f64,
    pub duration_s: f64,
    pub center: Position,
    pub radius_m: f64,
    pub kind: SensorKind,
    pub delta: f64,
}

impl FieldEvent {
    pub fn covers(&self, pos: Position, t: f64) -> bool {
        t >= self.start_s && t < self.start_s + self.duration_s && pos.distance(self.center) <= self.radius_m
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldModel {
    pub baselines: BTreeMap<SensorKind, Baseline>,
    pub events: Vec<FieldEvent>,
    /// Half-width of the uniform noise added to each reading, per kind.
    pub noise: BTreeMap<SensorKind, f64>,
    pub seed: u64,
}

impl FieldModel {
    /// Noise-free value at `pos` and `t`.
    pub fn value(&self, kind: SensorKind, pos: Position, t: f64) -> f64 {
        let base = self.baselines.get(&kind).map_or(0.0, |b| b.eval(pos, t));
        let deltas: f64 = self
            .events
            .iter()
            .filter(|e| e.kind == kind && e.covers(pos, t))
            .map(|e| e.delta)
            .sum();
        base + deltas
    }

    fn noise_draw(&self, node: NodeId, sensor: SensorSlot, t: f64) -> f64 {
        let a = self.noise.get(&sensor.kind).copied().unwrap_or(0.0);
        if a <= 0.0 {
            return 0.0;
        }
        let mut r = rng::keyed(
            self.seed,
            "field-noise",
            &[node.0 as u64, sensor.kind.code() as u64, sensor.slot as u64, t.to_bits()],
        );
        r.gen_range(-a..=a)
    }
}

/// One reading per equipped sensor slot.
pub fn sample(
    field: &FieldModel,
    node: NodeId,
    position: Position,
    sensors: &[SensorSlot],
    time: f64,
) -> Vec<SensorReading> {
    sensors
        .iter()
        .map(|&sensor| SensorReading {
            node,
            sensor,
            value: field.value(sensor.kind, position, time) + field.noise_draw(node, sensor, time),
            time,
        })
        .collect()
}

/// True iff the reading moved strictly more than `threshold` from the last
/// reported value.
pub fn detect_change<S: Scalar>(value: S, last_reported: S, threshold: S) -> bool {
    (value - last_reported).abs() > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TriggerCause {
    ThresholdEvent,
    Command,
    PeriodTimeout,
}

impl TriggerCause {
    /// Lower wins when several causes are due at the same instant.
    fn priority(self) -> u8 {
        match self {
            TriggerCause::ThresholdEvent => 0,
            TriggerCause::Command => 1,
            TriggerCause::PeriodTimeout => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TriggerCause::ThresholdEvent => "threshold",
            TriggerCause::Command => "command",
            TriggerCause::PeriodTimeout => "timeout",
        }
    }
}

/// Global change threshold with optional per-kind overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub default: f64,
    #[serde(default)]
    pub per_kind: BTreeMap<SensorKind, f64>,
}

impl Thresholds {
    pub fn uniform(theta: f64) -> Self {
        Self { default: theta, per_kind: BTreeMap::new() }
    }

    pub fn for_kind(&self, kind: SensorKind) -> f64 {
        self.per_kind.get(&kind).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPolicy {
    pub thresholds: Thresholds,
    pub sample_period_s: f64,
    /// `None` disables the periodic multimedia capture.
    pub multimedia_period_s: Option<f64>,
}

/// Per-node trigger bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriggerState {
    last_reported: BTreeMap<SensorSlot, f64>,
    last_capture_s: f64,
    pending_commands: VecDeque<f64>,
}

impl TriggerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_reported(&self, sensor: SensorSlot) -> Option<f64> {
        self.last_reported.get(&sensor).copied()
    }

    pub fn last_capture_s(&self) -> f64 {
        self.last_capture_s
    }

    pub fn pending_commands(&self) -> usize {
        self.pending_commands.len()
    }

    /// Queues a capture command received at `arrival_s`.
    pub fn push_command(&mut self, arrival_s: f64) {
        self.pending_commands.push_back(arrival_s);
    }

    /// Marks a multimedia capture starting at `now`; restarts the period timer.
    pub fn record_capture(&mut self, now: f64) {
        self.last_capture_s = now;
    }

    /// When the periodic capture is next due, if enabled.
    pub fn timeout_due(&self, policy: &TriggerPolicy) -> Option<f64> {
        policy.multimedia_period_s.map(|p| self.last_capture_s + p)
    }

    /// Folds readings into the reference values. The first reading of a stream
    /// sets its reference; a crossing replaces the reference with the new value.
    /// Returns whether any stream crossed its threshold.
    pub fn observe(&mut self, policy: &TriggerPolicy, readings: &[SensorReading]) -> bool {
        let mut crossed = false;
        for r in readings {
            let theta = policy.thresholds.for_kind(r.sensor.kind);
            match self.last_reported.get(&r.sensor) {
                None => {
                    self.last_reported.insert(r.sensor, r.value);
                }
                Some(&last) => {
                    if detect_change(r.value, last, theta) {
                        self.last_reported.insert(r.sensor, r.value);
                        crossed = true;
                    }
                }
            }
        }
        crossed
    }
}

/// Evaluates the three activation rules at `now` and returns the earliest
/// due cause with its due time. Simultaneous causes resolve as
/// threshold > command > timeout. A returned command is dequeued; the caller
/// is expected to call [`TriggerState::record_capture`] if it acts on it.
pub fn next_trigger(
    state: &mut TriggerState,
    policy: &TriggerPolicy,
    now: f64,
    readings: &[SensorReading],
) -> Option<(TriggerCause, f64)> {
    let mut candidates: Vec<(f64, TriggerCause)> = Vec::with_capacity(3);
    if state.observe(policy, readings) {
        candidates.push((now, TriggerCause::ThresholdEvent));
    }
    if let Some(&arrival) = state.pending_commands.front() {
        if arrival <= now {
            candidates.push((arrival, TriggerCause::Command));
        }
    }
    if let Some(due) = state.timeout_due(policy) {
        if due <= now {
            candidates.push((due, TriggerCause::PeriodTimeout));
        }
    }
    let (time, cause) = candidates
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.priority().cmp(&b.1.priority())))?;
    if cause == TriggerCause::Command {
        state.pending_commands.pop_front();
    }
    Some((cause, time))
}
