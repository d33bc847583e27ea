//! Little-endian payload layouts for the frames the engine exchanges.

use thiserror::Error;

use crate::model::{NodeId, SensorKind, SensorSlot};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("payload truncated")]
    Truncated,
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("unknown sensor kind code {0}")]
    UnknownSensor(u8),
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], PayloadError> {
        if self.buf.len() < N {
            return Err(PayloadError::Truncated);
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("split length"))
    }
    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, PayloadError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// A batch of readings travelling hop by hop to the gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarReport {
    pub origin: NodeId,
    pub sample_time: f64,
    pub hops: u8,
    pub readings: Vec<(SensorSlot, f32)>,
}

/// Fixed part of an encoded report.
pub const REPORT_FIXED_BYTES: u32 = 2 + 8 + 1 + 1;
/// Bytes added per reading.
pub const REPORT_READING_BYTES: u32 = 6;

impl ScalarReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.origin.0.to_le_bytes());
        out.extend_from_slice(&self.sample_time.to_le_bytes());
        out.push(self.hops);
        out.push(self.readings.len() as u8);
        for (slot, value) in &self.readings {
            out.push(slot.kind.code());
            out.push(slot.slot);
            out.extend_from_slice(&value.to_le_bytes());
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        REPORT_FIXED_BYTES as usize + REPORT_READING_BYTES as usize * self.readings.len()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader { buf: bytes };
        let origin = NodeId(r.u16()?);
        let sample_time = r.f64()?;
        let hops = r.u8()?;
        let count = r.u8()?;
        let mut readings = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let code = r.u8()?;
            let kind = SensorKind::from_code(code).ok_or(PayloadError::UnknownSensor(code))?;
            let slot = r.u8()?;
            readings.push((SensorSlot::new(kind, slot), r.f32()?));
        }
        Ok(Self { origin, sample_time, hops, readings })
    }
}

/// Identifies one chunk of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId {
    pub origin: NodeId,
    pub image: u32,
    pub index: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub id: ChunkId,
    pub total: u16,
    /// No more chunks follow on this hop's session.
    pub last: bool,
}

pub const CHUNK_HEADER_BYTES: u32 = 11;

impl ChunkHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHUNK_HEADER_BYTES as usize);
        out.extend_from_slice(&self.id.origin.0.to_le_bytes());
        out.extend_from_slice(&self.id.image.to_le_bytes());
        out.extend_from_slice(&self.id.index.to_le_bytes());
        out.extend_from_slice(&self.total.to_le_bytes());
        out.push(self.last as u8);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader { buf: bytes };
        let origin = NodeId(r.u16()?);
        let image = r.u32()?;
        let index = r.u16()?;
        let total = r.u16()?;
        let last = r.u8()? != 0;
        Ok(Self { id: ChunkId { origin, image, index }, total, last })
    }
}

/// Control-plane messages between neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    /// Asks a neighbor to bring its bulk radio up.
    Wake,
    /// The neighbor's bulk radio is up.
    Ready,
    /// Per-hop acknowledgement of an image chunk.
    ChunkAck(ChunkId),
}

impl Signal {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Signal::Wake => vec![1],
            Signal::Ready => vec![2],
            Signal::ChunkAck(id) => {
                let mut out = vec![3];
                out.extend_from_slice(&id.origin.0.to_le_bytes());
                out.extend_from_slice(&id.image.to_le_bytes());
                out.extend_from_slice(&id.index.to_le_bytes());
                out
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader { buf: bytes };
        match r.u8()? {
            1 => Ok(Signal::Wake),
            2 => Ok(Signal::Ready),
            3 => {
                let origin = NodeId(r.u16()?);
                let image = r.u32()?;
                let index = r.u16()?;
                Ok(Signal::ChunkAck(ChunkId { origin, image, index }))
            }
            t => Err(PayloadError::UnknownTag(t)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trip() {
        let r = ScalarReport {
            origin: NodeId(7),
            sample_time: 300.5,
            hops: 2,
            readings: vec![(SensorSlot::new(SensorKind::Light, 0), 812.5), (SensorSlot::new(SensorKind::WatermarkSoilMoisture, 3), -1.25)],
        };
        let bytes = r.encode();
        assert_eq!(bytes.len(), r.encoded_len());
        assert_eq!(bytes.len(), 12 + 12);
        assert_eq!(ScalarReport::decode(&bytes).unwrap(), r);
        assert_eq!(ScalarReport::decode(&bytes[..5]), Err(PayloadError::Truncated));
    }

    #[test]
    fn chunk_header_layout() {
        let h = ChunkHeader { id: ChunkId { origin: NodeId(0x0102), image: 5, index: 748 }, total: 749, last: true };
        let bytes = h.encode();
        assert_eq!(bytes.len() as u32, CHUNK_HEADER_BYTES);
        assert_eq!(&bytes[..2], &[0x02, 0x01]);
        assert_eq!(ChunkHeader::decode(&bytes).unwrap(), h);
    }

    #[test]
    fn signals() {
        for s in [Signal::Wake, Signal::Ready, Signal::ChunkAck(ChunkId { origin: NodeId(3), image: 9, index: 1 })] {
            assert_eq!(Signal::decode(&s.encode()).unwrap(), s);
        }
        assert_eq!(Signal::decode(&[9]), Err(PayloadError::UnknownTag(9)));
        assert_eq!(Signal::decode(&[]), Err(PayloadError::Truncated));
    }
}
