//! Canonical text forms of run results.
//!
//! JSON objects come out with sorted keys and every float printed with six
//! decimals, so two runs of the same scenario and seed compare byte for byte.
//! The CSV tables use a fixed column order and the same float precision.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::engine::Metrics;
use crate::model::CoreState;

/// Identifies what produced a set of metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunMeta {
    pub scenario_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Serialize)]
struct Report<'a> {
    meta: &'a RunMeta,
    metrics: &'a Metrics,
}

/// Pretty printing with fixed six-decimal floats.
struct Fixed6<'a>(PrettyFormatter<'a>);

impl Formatter for Fixed6<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{}", fixed(value))
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{}", fixed(value as f64))
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Six-decimal rendering used by every output file. Negative zero prints as zero.
pub fn fixed(value: f64) -> String {
    let s = format!("{value:.6}");
    if s.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// Key-sorted, fixed-precision JSON for any serializable value.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // Going through `Value` sorts object keys.
    let value = serde_json::to_value(value).expect("metrics serialize");
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Fixed6(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser).expect("writing to memory");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

pub fn metrics_json(meta: &RunMeta, metrics: &Metrics) -> String {
    canonical_json(&Report { meta, metrics })
}

fn opt(v: Option<f64>) -> String {
    v.map(fixed).unwrap_or_default()
}

fn table(header: Vec<String>, rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("CSV is UTF-8")
}

/// Per-node energy, residency per core state and traffic counters.
pub fn nodes_csv(metrics: &Metrics) -> String {
    let mut header: Vec<String> = ["node", "gateway", "capacity_mah", "consumed_mah", "death_time_s"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(CoreState::all().map(|s| format!("residency_{}", s.name().replace(':', "_"))));
    header.extend(
        ["control_frames", "bulk_frames", "control_airtime_s", "bulk_airtime_s", "frames_lost", "images_triggered"]
            .iter()
            .map(|s| s.to_string()),
    );
    let rows = metrics
        .nodes
        .iter()
        .map(|n| {
            let mut r = vec![
                n.id.to_string(),
                n.gateway.to_string(),
                opt(n.capacity_mah),
                fixed(n.consumed_mah),
                opt(n.death_time_s),
            ];
            r.extend(CoreState::all().map(|s| fixed(n.residency(s))));
            r.extend([
                n.control_frames.to_string(),
                n.bulk_frames.to_string(),
                fixed(n.control_airtime_s),
                fixed(n.bulk_airtime_s),
                n.frames_lost.to_string(),
                n.images_triggered.to_string(),
            ]);
            r
        })
        .collect();
    table(header, rows)
}

/// One row per triggered image, from trigger to delivery.
pub fn images_csv(metrics: &Metrics) -> String {
    let header = ["origin", "image", "cause", "trigger_time_s", "chunks_total", "chunks_received", "delivered_at_s", "latency_s", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = metrics
        .images
        .iter()
        .map(|i| {
            vec![
                i.origin.to_string(),
                i.image.to_string(),
                i.cause.clone(),
                fixed(i.trigger_time_s),
                i.chunks_total.to_string(),
                i.chunks_received.to_string(),
                opt(i.delivered_at_s),
                opt(i.delivered_at_s.map(|d| d - i.trigger_time_s)),
                i.status.clone(),
            ]
        })
        .collect();
    table(header, rows)
}

/// Each node's route to the gateway at every checkpoint.
pub fn routes_csv(metrics: &Metrics) -> String {
    let header = ["time_s", "node", "next_hop", "metric"].iter().map(|s| s.to_string()).collect();
    let rows = metrics
        .routes
        .iter()
        .map(|r| {
            vec![
                fixed(r.time_s),
                r.node.to_string(),
                r.next_hop.map(|h| h.to_string()).unwrap_or_default(),
                r.metric.map(|m| m.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    table(header, rows)
}
