//! Canonical packet/flow representation and its JSON-lines format.
//!
//! A canonical trace file starts with one header object listing every flow
//! (id, label and generation metadata), followed by one object per packet:
//!
//! ```text
//! {"format":"teleop-trace","version":1,"flows":[...]}
//! {"flow_id":"c000-s00000","label":"X","ts":0.0,"dir":"C2R",...,"retx":false}
//! ```
//!
//! Packet lines always carry exactly these keys, in this order: `flow_id`,
//! `label`, `ts`, `dir`, `frame_len`, `frame_cap_len`, `ip_len`, `ip_hdr_len`,
//! `tcp_payload_len`, `tcp_hdr_len`, `tcp_flags`, `seq`, `ack`, `window_size`,
//! `tls_record_len`, `tls_record_count`, `retx`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::emulator::{LinkParams, MovementClass, MovementProgram};

pub const FORMAT_NAME: &str = "teleop-trace";
pub const FORMAT_VERSION: u32 = 1;

/// Default idle gap separating two movement operations.
pub const DEFAULT_FLOW_GAP_S: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error while {context}: {source}")]
    Io {
        context: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("flow {flow_id}: packet {index}: {message}")]
    Invalid { flow_id: String, index: usize, message: String },
    #[error("flow {0} is empty")]
    EmptyFlow(String),
}

/// Which way a packet travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "C2R")]
    ControllerToRobot,
    #[serde(rename = "R2C")]
    RobotToController,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::ControllerToRobot => Direction::RobotToController,
            Direction::RobotToController => Direction::ControllerToRobot,
        }
    }

    /// 0 for controller-to-robot, 1 for robot-to-controller.
    pub fn as_index(self) -> usize {
        match self {
            Direction::ControllerToRobot => 0,
            Direction::RobotToController => 1,
        }
    }
}

/// TCP control flags relevant to the feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);

    // Letter order used in the canonical string form.
    const LETTERS: [(TcpFlags, char); 5] =
        [(TcpFlags::SYN, 'S'), (TcpFlags::FIN, 'F'), (TcpFlags::RST, 'R'), (TcpFlags::PSH, 'P'), (TcpFlags::ACK, 'A')];

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    /// Keep only the five modelled bits of a raw TCP flag byte.
    pub const fn from_bits_truncate(bits: u8) -> Self {
        TcpFlags(bits & 0x1f)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn union(self, other: TcpFlags) -> Self {
        TcpFlags(self.0 | other.0)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        self.union(rhs)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (flag, letter) in Self::LETTERS {
            if self.contains(flag) {
                write!(f, "{letter}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for TcpFlags {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars().try_fold(TcpFlags::empty(), |acc, c| {
            Self::LETTERS
                .iter()
                .find(|(_, l)| *l == c)
                .map(|(flag, _)| acc | *flag)
                .ok_or_else(|| format!("unknown tcp flag letter {c:?}"))
        })
    }
}

impl Serialize for TcpFlags {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TcpFlags {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One captured (or synthesised) TCP/IPv4 packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    /// Seconds; non-decreasing within a flow.
    pub timestamp: f64,
    pub direction: Direction,
    pub frame_len: u32,
    pub frame_cap_len: u32,
    pub ip_len: u32,
    pub ip_hdr_len: u32,
    pub tcp_payload_len: u32,
    pub tcp_hdr_len: u32,
    pub tcp_flags: TcpFlags,
    pub seq: u32,
    pub ack: u32,
    pub window_size: u32,
    /// Bytes of TLS records (header included) starting in this packet.
    pub tls_record_len: u32,
    pub tls_record_count: u32,
    pub is_retransmission: bool,
}

impl PacketRecord {
    /// Check the per-packet structural invariants.
    pub fn check(&self) -> Result<(), String> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(format!("timestamp {} is not a finite non-negative value", self.timestamp));
        }
        if self.frame_cap_len > self.frame_len {
            return Err(format!("frame_cap_len {} exceeds frame_len {}", self.frame_cap_len, self.frame_len));
        }
        if self.tcp_hdr_len < 20 {
            return Err(format!("tcp_hdr_len {} below 20", self.tcp_hdr_len));
        }
        let inner = self.ip_hdr_len as u64 + self.tcp_hdr_len as u64 + self.tcp_payload_len as u64;
        if (self.ip_len as u64) < inner {
            return Err(format!("ip_len {} smaller than headers plus payload {}", self.ip_len, inner));
        }
        if self.frame_len < self.ip_len {
            return Err(format!("frame_len {} smaller than ip_len {}", self.frame_len, self.ip_len));
        }
        if (self.tls_record_count == 0) != (self.tls_record_len == 0) {
            return Err(format!(
                "tls_record_count {} inconsistent with tls_record_len {}",
                self.tls_record_count, self.tls_record_len
            ));
        }
        Ok(())
    }
}

/// Provenance of a synthetic flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub program: MovementProgram,
    pub link: LinkParams,
    /// Timestamp of the first command; earlier packets are the set-up burst.
    pub first_command_time: f64,
    /// Set when a segment exhausted its retry budget and the session aborted.
    #[serde(default)]
    pub failed: bool,
}

/// The packets of one movement operation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub flow_id: String,
    pub label: Option<MovementClass>,
    pub packets: Vec<PacketRecord>,
    pub meta: Option<FlowMeta>,
}

impl FlowTrace {
    /// Validate ordering, non-emptiness and every packet invariant.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.packets.is_empty() {
            return Err(TraceError::EmptyFlow(self.flow_id.clone()));
        }
        let mut last = f64::NEG_INFINITY;
        for (index, p) in self.packets.iter().enumerate() {
            p.check().map_err(|message| TraceError::Invalid { flow_id: self.flow_id.clone(), index, message })?;
            if p.timestamp < last {
                return Err(TraceError::Invalid {
                    flow_id: self.flow_id.clone(),
                    index,
                    message: format!("timestamp {} precedes {}", p.timestamp, last),
                });
            }
            last = p.timestamp;
        }
        Ok(())
    }

    /// Timestamp marking the end of the set-up burst.
    pub fn first_command_time(&self) -> Option<f64> {
        self.meta.as_ref().map(|m| m.first_command_time)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderFlow {
    flow_id: String,
    label: Option<MovementClass>,
    meta: Option<FlowMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    flows: Vec<HeaderFlow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PacketLine {
    flow_id: String,
    label: Option<MovementClass>,
    ts: f64,
    dir: Direction,
    frame_len: u32,
    frame_cap_len: u32,
    ip_len: u32,
    ip_hdr_len: u32,
    tcp_payload_len: u32,
    tcp_hdr_len: u32,
    tcp_flags: TcpFlags,
    seq: u32,
    ack: u32,
    window_size: u32,
    tls_record_len: u32,
    tls_record_count: u32,
    retx: bool,
}

impl PacketLine {
    fn new(flow: &FlowTrace, p: &PacketRecord) -> Self {
        PacketLine {
            flow_id: flow.flow_id.clone(),
            label: flow.label,
            ts: p.timestamp,
            dir: p.direction,
            frame_len: p.frame_len,
            frame_cap_len: p.frame_cap_len,
            ip_len: p.ip_len,
            ip_hdr_len: p.ip_hdr_len,
            tcp_payload_len: p.tcp_payload_len,
            tcp_hdr_len: p.tcp_hdr_len,
            tcp_flags: p.tcp_flags,
            seq: p.seq,
            ack: p.ack,
            window_size: p.window_size,
            tls_record_len: p.tls_record_len,
            tls_record_count: p.tls_record_count,
            retx: p.is_retransmission,
        }
    }

    fn into_record(self) -> PacketRecord {
        PacketRecord {
            timestamp: self.ts,
            direction: self.dir,
            frame_len: self.frame_len,
            frame_cap_len: self.frame_cap_len,
            ip_len: self.ip_len,
            ip_hdr_len: self.ip_hdr_len,
            tcp_payload_len: self.tcp_payload_len,
            tcp_hdr_len: self.tcp_hdr_len,
            tcp_flags: self.tcp_flags,
            seq: self.seq,
            ack: self.ack,
            window_size: self.window_size,
            tls_record_len: self.tls_record_len,
            tls_record_count: self.tls_record_count,
            is_retransmission: self.retx,
        }
    }
}

fn io_err(context: &'static str) -> impl FnOnce(std::io::Error) -> TraceError {
    move |source| TraceError::Io { context, source }
}

/// Write `traces` in canonical form; returns the number of bytes written.
pub fn write_canonical<W: Write>(traces: &[FlowTrace], mut sink: W) -> Result<u64, TraceError> {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        flows: traces
            .iter()
            .map(|t| HeaderFlow { flow_id: t.flow_id.clone(), label: t.label, meta: t.meta.clone() })
            .collect(),
    };
    let mut written = 0u64;
    let mut line = serde_json::to_vec(&header).expect("header serialises");
    line.push(b'\n');
    sink.write_all(&line).map_err(io_err("writing trace header"))?;
    written += line.len() as u64;
    for flow in traces {
        for p in &flow.packets {
            line.clear();
            serde_json::to_writer(&mut line, &PacketLine::new(flow, p)).expect("packet serialises");
            line.push(b'\n');
            sink.write_all(&line).map_err(io_err("writing trace packet"))?;
            written += line.len() as u64;
        }
    }
    sink.flush().map_err(io_err("flushing trace"))?;
    Ok(written)
}

/// Read a canonical trace. Packets are grouped by `flow_id` and sorted by time.
///
/// Flow order follows the header when present, otherwise first appearance.
pub fn read_canonical<R: BufRead>(source: R) -> Result<Vec<FlowTrace>, TraceError> {
    let mut flows: Vec<FlowTrace> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err("reading trace"))?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 && line.contains("\"format\"") {
            let header: Header = serde_json::from_str(&line)
                .map_err(|e| TraceError::Parse { line: line_no, message: format!("bad header: {e}") })?;
            if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: format!("unsupported trace format {} v{}", header.format, header.version),
                });
            }
            for hf in header.flows {
                index.insert(hf.flow_id.clone(), flows.len());
                flows.push(FlowTrace { flow_id: hf.flow_id, label: hf.label, packets: Vec::new(), meta: hf.meta });
            }
            continue;
        }
        let pl: PacketLine =
            serde_json::from_str(&line).map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        let slot = *index.entry(pl.flow_id.clone()).or_insert_with(|| {
            flows.push(FlowTrace { flow_id: pl.flow_id.clone(), label: pl.label, packets: Vec::new(), meta: None });
            flows.len() - 1
        });
        flows[slot].packets.push(pl.into_record());
    }

    for flow in &mut flows {
        flow.packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    // Flows announced in the header but with no packet lines cannot be valid.
    flows.retain(|f| !f.packets.is_empty());
    Ok(flows)
}

/// Split a time-ordered packet sequence into flows at idle gaps of at least
/// `idle_gap_s` seconds. Each flow is rebased so its first packet is at 0.
pub fn assemble_flows(packets: &[PacketRecord], idle_gap_s: f64) -> Vec<FlowTrace> {
    let mut sorted: Vec<PacketRecord> = packets.to_vec();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    let mut groups: Vec<Vec<PacketRecord>> = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    for p in sorted {
        if groups.is_empty() || p.timestamp - last_ts >= idle_gap_s {
            groups.push(Vec::new());
        }
        last_ts = p.timestamp;
        groups.last_mut().expect("group pushed above").push(p);
    }

    groups
        .into_iter()
        .enumerate()
        .map(|(i, mut packets)| {
            let t0 = packets[0].timestamp;
            for p in &mut packets {
                p.timestamp -= t0;
            }
            FlowTrace { flow_id: format!("flow-{i:05}"), label: None, packets, meta: None }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pkt(ts: f64, dir: Direction, payload: u32) -> PacketRecord {
        let tls = if payload > 0 { payload } else { 0 };
        PacketRecord {
            timestamp: ts,
            direction: dir,
            frame_len: 66 + payload,
            frame_cap_len: 66 + payload,
            ip_len: 52 + payload,
            ip_hdr_len: 20,
            tcp_payload_len: payload,
            tcp_hdr_len: 32,
            tcp_flags: TcpFlags::PSH | TcpFlags::ACK,
            seq: 1000,
            ack: 2000,
            window_size: 65535,
            tls_record_len: tls,
            tls_record_count: u32::from(payload > 0),
            is_retransmission: false,
        }
    }

    fn flow(id: &str, label: Option<MovementClass>, packets: Vec<PacketRecord>) -> FlowTrace {
        FlowTrace { flow_id: id.into(), label, packets, meta: None }
    }

    #[test]
    fn flags_render_and_parse() {
        let pa = TcpFlags::PSH | TcpFlags::ACK;
        assert_eq!(pa.to_string(), "PA");
        assert_eq!((TcpFlags::SYN | TcpFlags::ACK).to_string(), "SA");
        assert_eq!("AP".parse::<TcpFlags>().unwrap(), pa);
        assert_eq!("".parse::<TcpFlags>().unwrap(), TcpFlags::empty());
        assert!("PX".parse::<TcpFlags>().is_err());
    }

    #[test]
    fn empty_sequence_writes_header_only() {
        let mut buf = Vec::new();
        let n = write_canonical(&[], &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_canonical(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn two_packet_round_trip() {
        let f = flow(
            "a",
            Some(MovementClass::X),
            vec![pkt(0.0, Direction::ControllerToRobot, 57), pkt(0.08, Direction::RobotToController, 49)],
        );
        let mut buf = Vec::new();
        write_canonical(std::slice::from_ref(&f), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_canonical(&buf[..]).unwrap(), vec![f]);
    }

    #[test]
    fn packet_line_key_order_is_fixed() {
        let f = flow("a", None, vec![pkt(0.5, Direction::RobotToController, 10)]);
        let mut buf = Vec::new();
        write_canonical(&[f], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let keys: Vec<&str> = line
            .trim_matches(|c| c == '{' || c == '}')
            .split(',')
            .map(|kv| kv.split(':').next().unwrap().trim_matches('"'))
            .collect();
        assert_eq!(
            keys,
            [
                "flow_id",
                "label",
                "ts",
                "dir",
                "frame_len",
                "frame_cap_len",
                "ip_len",
                "ip_hdr_len",
                "tcp_payload_len",
                "tcp_hdr_len",
                "tcp_flags",
                "seq",
                "ack",
                "window_size",
                "tls_record_len",
                "tls_record_count",
                "retx"
            ]
        );
        // Unlabelled flows emit an explicit null.
        assert!(line.contains("\"label\":null"));
    }

    #[test]
    fn interleaved_lines_regroup_into_flows() {
        let a = pkt(0.0, Direction::ControllerToRobot, 5);
        let b = pkt(0.1, Direction::RobotToController, 5);
        let mk =
            |id: &str, p: &PacketRecord| serde_json::to_string(&PacketLine::new(&flow(id, None, vec![]), p)).unwrap();
        let text = [mk("f1", &b), mk("f2", &a), mk("f1", &a), mk("f2", &b)].join("\n");
        let flows = read_canonical(text.as_bytes()).unwrap();
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0].flow_id, "f1");
        // Sorted by timestamp after grouping.
        assert_eq!(flows[0].packets[0].timestamp, 0.0);
        assert_eq!(flows[0].packets[1].timestamp, 0.1);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let good = serde_json::to_string(&PacketLine::new(
            &flow("f", None, vec![]),
            &pkt(0.0, Direction::ControllerToRobot, 5),
        ))
        .unwrap();
        let bad = good.replace("\"ts\":0.0,", "");
        let text = format!("{good}\n{bad}\n");
        let err = read_canonical(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("`ts`"), "{msg}");
    }

    #[test]
    fn assemble_without_gap_is_one_flow() {
        let ps: Vec<_> = (0..5).map(|i| pkt(10.0 + i as f64, Direction::ControllerToRobot, 1)).collect();
        let flows = assemble_flows(&ps, 5.0);
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].packets[0].timestamp, 0.0);
    }

    #[test]
    fn assemble_splits_and_rebases() {
        let ps = vec![
            pkt(1.0, Direction::ControllerToRobot, 1),
            pkt(1.5, Direction::RobotToController, 1),
            pkt(6.5, Direction::ControllerToRobot, 1),
            pkt(7.0, Direction::RobotToController, 1),
        ];
        let flows = assemble_flows(&ps, 5.0);
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[1].packets[0].timestamp, 0.0);
        assert!((flows[1].packets[1].timestamp - 0.5).abs() < 1e-12);
        assert!(assemble_flows(&[], 5.0).is_empty());
    }

    #[test]
    fn validator_rejects_broken_invariants() {
        let mut p = pkt(0.0, Direction::ControllerToRobot, 10);
        p.frame_cap_len = p.frame_len + 1;
        assert!(p.check().is_err());
        let mut p = pkt(0.0, Direction::ControllerToRobot, 10);
        p.tls_record_count = 0;
        assert!(p.check().is_err());
        let mut p = pkt(0.0, Direction::ControllerToRobot, 10);
        p.ip_len = 40;
        assert!(p.check().is_err());
        let f =
            flow("x", None, vec![pkt(1.0, Direction::ControllerToRobot, 1), pkt(0.5, Direction::ControllerToRobot, 1)]);
        assert!(f.validate().is_err());
        assert!(flow("e", None, vec![]).validate().is_err());
    }
}
