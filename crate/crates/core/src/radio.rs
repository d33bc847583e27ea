//! Dual-radio link layer: airtime, Bernoulli loss and image fragmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CoreState, Frame, McuState, NodeId, RadioKind, SocState, Topology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadioError {
    #[error("radio powered off: {radio:?} unavailable in state {state}")]
    PoweredOff { radio: RadioKind, state: CoreState },
    #[error("no link from {from} to {to} on {radio:?}")]
    NoLink { from: NodeId, to: NodeId, radio: RadioKind },
    #[error("frame size must be positive")]
    EmptyFrame,
    #[error("image and chunk sizes must be positive")]
    BadFragment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioSpec {
    pub kind: RadioKind,
    pub bandwidth_bps: u64,
    pub range_m: f64,
    pub per_hop_overhead_s: f64,
}

impl RadioSpec {
    /// 250 kbit/s control radio.
    pub fn control(range_m: f64) -> Self {
        Self { kind: RadioKind::ControlMesh, bandwidth_bps: 250_000, range_m, per_hop_overhead_s: 0.0 }
    }

    /// 11 Mbit/s bulk radio.
    pub fn bulk(range_m: f64) -> Self {
        Self { kind: RadioKind::BulkMesh, bandwidth_bps: 11_000_000, range_m, per_hop_overhead_s: 0.0 }
    }
}

/// Seconds to put `size_bytes` on the air, including the per-hop overhead.
pub fn airtime(spec: &RadioSpec, size_bytes: u32) -> Result<f64, RadioError> {
    if size_bytes == 0 {
        return Err(RadioError::EmptyFrame);
    }
    Ok(size_bytes as f64 * 8.0 / spec.bandwidth_bps as f64 + spec.per_hop_overhead_s)
}

/// Whether a node in `state` can operate `radio`: the control radio hangs off
/// the scalar MCU, the bulk radio needs the multimedia board with WiFi up.
pub fn permits(radio: RadioKind, state: CoreState) -> bool {
    match radio {
        RadioKind::ControlMesh => state.mcu != McuState::Off,
        RadioKind::BulkMesh => state.soc == SocState::WifiOn,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TxResult {
    Delivered { at: f64 },
    Lost,
}

impl TxResult {
    pub fn is_delivered(self) -> bool {
        matches!(self, TxResult::Delivered { .. })
    }
}

/// Sends `frame` over the link to `to`, drawing loss from `rng`.
///
/// Exactly one draw is consumed per call, whatever the link's loss, so the
/// draw sequence does not depend on loss configuration.
pub fn transmit<R: Rng + ?Sized>(
    frame: &Frame,
    to: NodeId,
    topology: &Topology,
    sender_state: CoreState,
    spec: &RadioSpec,
    send_time: f64,
    rng: &mut R,
) -> Result<TxResult, RadioError> {
    if !permits(frame.radio, sender_state) {
        return Err(RadioError::PoweredOff { radio: frame.radio, state: sender_state });
    }
    if !topology.has_link(frame.src, to, frame.radio) {
        return Err(RadioError::NoLink { from: frame.src, to, radio: frame.radio });
    }
    let duration = airtime(spec, frame.size_bytes)?;
    let loss = topology.loss(frame.src, to, frame.radio);
    let draw: f64 = rng.gen();
    if draw < loss {
        Ok(TxResult::Lost)
    } else {
        Ok(TxResult::Delivered { at: send_time + duration })
    }
}

/// Retries a unicast up to `attempts` times back to back; returns the outcome
/// and how many attempts were used.
#[allow(clippy::too_many_arguments)]
pub fn transmit_with_retries<R: Rng + ?Sized>(
    frame: &Frame,
    to: NodeId,
    topology: &Topology,
    sender_state: CoreState,
    spec: &RadioSpec,
    send_time: f64,
    attempts: u32,
    rng: &mut R,
) -> Result<(TxResult, u32), RadioError> {
    let step = airtime(spec, frame.size_bytes)?;
    let mut t = send_time;
    for n in 1..=attempts {
        let r = transmit(frame, to, topology, sender_state, spec, t, rng)?;
        if r.is_delivered() {
            return Ok((r, n));
        }
        t += step;
    }
    Ok((TxResult::Lost, attempts))
}

/// Splits an image into chunk sizes; every chunk is full except possibly the last.
pub fn fragment(image_bytes: u64, chunk_bytes: u32) -> Result<Vec<u32>, RadioError> {
    if image_bytes == 0 || chunk_bytes == 0 {
        return Err(RadioError::BadFragment);
    }
    let chunk = chunk_bytes as u64;
    let full = image_bytes / chunk;
    let rem = image_bytes % chunk;
    let mut out = vec![chunk_bytes; full as usize];
    if rem > 0 {
        out.push(rem as u32);
    }
    Ok(out)
}
