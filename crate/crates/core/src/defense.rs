//! Channel transforms that model traffic-analysis countermeasures.
//!
//! Every transform maps a flow to a new flow and keeps the packet invariants.
//! Sequence and acknowledgement numbers are rewritten into the new byte space
//! so the extractor's in-flight and RTT bookkeeping stays meaningful.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::{ETH_HDR, IP_HDR, MAX_WINDOW, TCP_HDR};
use crate::seed;
use crate::trace::{Direction, FlowTrace, PacketRecord, TcpFlags};

#[derive(Debug, Error, PartialEq)]
pub enum DefenseError {
    #[error("invalid {transform} parameters: {message}")]
    Params { transform: &'static str, message: String },
}

fn bad(transform: &'static str, message: impl Into<String>) -> DefenseError {
    DefenseError::Params { transform, message: message.into() }
}

fn default_cell() -> u32 {
    514
}

fn default_window() -> Option<u32> {
    Some(MAX_WINDOW)
}

fn default_bandwidth() -> f64 {
    100.0
}

/// Fixed-size cell framing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedCellParams {
    #[serde(default = "default_cell")]
    pub cell_size: u32,
    /// Extra bytes each cell carries on the wire.
    #[serde(default)]
    pub overhead: u32,
    /// Advertised window on every packet; `None` leaves windows alone.
    #[serde(default = "default_window")]
    pub constant_window: Option<u32>,
    /// Link rate used for the extra serialisation time of padded frames.
    #[serde(default = "default_bandwidth")]
    pub bandwidth_mbps: f64,
}

impl Default for FixedCellParams {
    fn default() -> Self {
        FixedCellParams {
            cell_size: default_cell(),
            overhead: 0,
            constant_window: default_window(),
            bandwidth_mbps: default_bandwidth(),
        }
    }
}

impl FixedCellParams {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.cell_size == 0 {
            return Err(bad("fixed-cell", "cell_size must be positive"));
        }
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps > 0.0) {
            return Err(bad("fixed-cell", "bandwidth_mbps must be positive"));
        }
        Ok(())
    }

    /// Bytes one cell occupies in the TCP payload.
    pub fn cell_bytes(&self) -> u32 {
        self.cell_size + self.overhead
    }

    /// Payload after re-chunking `len` bytes into whole cells.
    pub fn padded_len(&self, len: u32) -> u32 {
        len.div_ceil(self.cell_bytes()) * self.cell_bytes()
    }
}

fn default_jitter() -> f64 {
    0.5
}

fn default_padding_rate() -> f64 {
    1.0
}

/// Onion-routing channel: fixed cells, padding cells in both directions at
/// random times, and per-packet circuit latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorParams {
    #[serde(default)]
    pub cells: FixedCellParams,
    /// Upper bound of the uniform extra latency each packet picks up.
    #[serde(default = "default_jitter")]
    pub circuit_jitter_s: f64,
    /// Mean padding cells per second in each direction.
    #[serde(default = "default_padding_rate")]
    pub padding_rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TorParams {
    fn default() -> Self {
        TorParams {
            cells: FixedCellParams::default(),
            circuit_jitter_s: default_jitter(),
            padding_rate_hz: default_padding_rate(),
            seed: 0,
        }
    }
}

fn default_interval() -> f64 {
    0.05
}

fn default_packet_size() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantRateParams {
    #[serde(default = "default_interval")]
    pub interval_s: f64,
    /// TCP payload bytes of every emitted packet.
    #[serde(default = "default_packet_size")]
    pub packet_size: u32,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_mbps: f64,
}

impl Default for ConstantRateParams {
    fn default() -> Self {
        ConstantRateParams {
            interval_s: default_interval(),
            packet_size: default_packet_size(),
            bandwidth_mbps: default_bandwidth(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitParams {
    /// Added delay is uniform on `[min_s, max_s]`.
    #[serde(default)]
    pub min_s: f64,
    #[serde(default)]
    pub max_s: f64,
    #[serde(default)]
    pub seed: u64,
}

impl VitParams {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if !(self.min_s.is_finite() && self.max_s.is_finite() && self.min_s >= 0.0) {
            return Err(bad("variable-inter-arrival", "bounds must be finite and non-negative"));
        }
        if self.max_s < self.min_s {
            return Err(bad("variable-inter-arrival", format!("max_s {} < min_s {}", self.max_s, self.min_s)));
        }
        Ok(())
    }
}

/// Transform selected by an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChannelTransform {
    #[default]
    None,
    FixedCell(FixedCellParams),
    Tor(TorParams),
    ConstantRate(ConstantRateParams),
    VariableInterArrival(VitParams),
}

impl ChannelTransform {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelTransform::None => "none",
            ChannelTransform::FixedCell(_) => "fixed-cell",
            ChannelTransform::Tor(_) => "tor",
            ChannelTransform::ConstantRate(_) => "constant-rate",
            ChannelTransform::VariableInterArrival(_) => "variable-inter-arrival",
        }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        match self {
            ChannelTransform::None => Ok(()),
            ChannelTransform::FixedCell(p) => p.validate(),
            ChannelTransform::Tor(p) => validate_tor(p),
            ChannelTransform::ConstantRate(p) => validate_constant_rate(p),
            ChannelTransform::VariableInterArrival(p) => p.validate(),
        }
    }

    pub fn apply(&self, flow: &FlowTrace) -> Result<FlowTrace, DefenseError> {
        match self {
            ChannelTransform::None => Ok(flow.clone()),
            ChannelTransform::FixedCell(p) => apply_fixed_cells(flow, p),
            ChannelTransform::Tor(p) => apply_tor(flow, p),
            ChannelTransform::ConstantRate(p) => apply_constant_rate(flow, p).map(|o| o.flow),
            ChannelTransform::VariableInterArrival(p) => apply_vit(flow, p),
        }
    }
}

/// Seed for one flow's stream, independent of processing order.
fn flow_seed(seed_value: u64, stage: &str, flow_id: &str) -> u64 {
    seed::derive(seed_value, &format!("{stage}/{flow_id}"), &[])
}

fn serialisation_s(bytes: u32, bandwidth_mbps: f64) -> f64 {
    bytes as f64 * 8.0 / (bandwidth_mbps * 1e6)
}

/// Resize a packet's payload, keeping the header lengths.
fn set_payload(p: &mut PacketRecord, payload: u32) {
    let full_capture = p.frame_cap_len == p.frame_len;
    let delta = payload as i64 - p.tcp_payload_len as i64;
    p.tcp_payload_len = payload;
    p.ip_len = (p.ip_len as i64 + delta) as u32;
    p.frame_len = (p.frame_len as i64 + delta) as u32;
    p.frame_cap_len = if full_capture { p.frame_len } else { p.frame_cap_len.min(p.frame_len) };
}

/// Rewrites sequence and acknowledgement numbers after payload sizes change.
/// Each direction keeps the old-to-new map of segment starts and ends, so
/// retransmissions reuse their original's new numbers and an ACK that covered
/// a segment still covers exactly that segment.
#[derive(Default)]
struct Renumber {
    /// new minus old, per direction, for bytes not seen before.
    offset: [u32; 2],
    starts: [HashMap<u32, u32>; 2],
    ends: [HashMap<u32, u32>; 2],
}

impl Renumber {
    /// Map a packet whose payload grows from `old_len` to `p.tcp_payload_len`.
    fn data(&mut self, p: &mut PacketRecord, old_len: u32) {
        let d = p.direction.as_index();
        let old_seq = p.seq;
        if old_len > 0 {
            if let Some(&s) = self.starts[d].get(&old_seq) {
                p.seq = s;
            } else {
                p.seq = old_seq.wrapping_add(self.offset[d]);
                self.starts[d].insert(old_seq, p.seq);
                let new_end = p.seq.wrapping_add(p.tcp_payload_len);
                self.ends[d].insert(old_seq.wrapping_add(old_len), new_end);
                self.offset[d] = self.offset[d].wrapping_add(p.tcp_payload_len).wrapping_sub(old_len);
            }
        } else {
            p.seq = old_seq.wrapping_add(self.offset[d]);
        }
        if p.tcp_flags.contains(TcpFlags::ACK) {
            let o = 1 - d;
            p.ack = match self.ends[o].get(&p.ack) {
                Some(&a) => a,
                None => p.ack.wrapping_add(self.offset[o]),
            };
        }
    }

    /// Place an inserted segment of `len` bytes at the head of direction `d`.
    fn inserted(&mut self, d: usize, next_old_seq: u32, len: u32) -> u32 {
        let seq = next_old_seq.wrapping_add(self.offset[d]);
        self.offset[d] = self.offset[d].wrapping_add(len);
        seq
    }
}

/// Index of the first packet at or after the original first command, for
/// recomputing the set-up boundary after timestamps move.
fn first_data_index(flow: &FlowTrace) -> Option<usize> {
    let t = flow.meta.as_ref()?.first_command_time;
    flow.packets.iter().position(|p| p.timestamp >= t)
}

/// Re-chunk every payload into whole cells, give each cell a record header
/// count, freeze the window and add the extra serialisation time.
pub fn apply_fixed_cells(flow: &FlowTrace, params: &FixedCellParams) -> Result<FlowTrace, DefenseError> {
    params.validate()?;
    let mut out = flow.clone();
    let mut rn = Renumber::default();
    let mut last_t = f64::NEG_INFINITY;
    for p in &mut out.packets {
        let old_len = p.tcp_payload_len;
        let old_frame = p.frame_len;
        if old_len > 0 {
            let padded = params.padded_len(old_len);
            set_payload(p, padded);
            p.tls_record_count = padded / params.cell_bytes();
            p.tls_record_len = padded;
        }
        rn.data(p, old_len);
        if let Some(w) = params.constant_window {
            p.window_size = w;
        }
        let extra = serialisation_s(p.frame_len - old_frame, params.bandwidth_mbps);
        p.timestamp = (p.timestamp + extra).max(last_t);
        last_t = p.timestamp;
    }
    if let (Some(i), Some(meta)) = (first_data_index(flow), out.meta.as_mut()) {
        meta.first_command_time = out.packets[i].timestamp;
    }
    Ok(out)
}

fn validate_tor(p: &TorParams) -> Result<(), DefenseError> {
    p.cells.validate()?;
    if !(p.circuit_jitter_s.is_finite() && p.circuit_jitter_s >= 0.0) {
        return Err(bad("tor", "circuit_jitter_s must be finite and non-negative"));
    }
    if !(p.padding_rate_hz.is_finite() && p.padding_rate_hz >= 0.0) {
        return Err(bad("tor", "padding_rate_hz must be finite and non-negative"));
    }
    Ok(())
}

/// Fixed cells plus padding cells and circuit latency. Padding cells are sent
/// in both directions at exponential gaps over the data phase; every packet
/// is then delayed by an independent uniform latency, clamped so the capture
/// order is kept.
pub fn apply_tor(flow: &FlowTrace, params: &TorParams) -> Result<FlowTrace, DefenseError> {
    validate_tor(params)?;
    let cells = &params.cells;
    let mut rng = seed::rng(flow_seed(params.seed, "tor", &flow.flow_id), "tor", &[]);
    let start = first_data_index(flow).unwrap_or(0);
    let (Some(t0), Some(t1)) = (flow.packets.get(start).map(|p| p.timestamp), flow.packets.last().map(|p| p.timestamp))
    else {
        return Ok(flow.clone());
    };

    // Padding times per direction, drawn up front so both directions use
    // fixed stream positions.
    let mut padding: Vec<(f64, Direction)> = Vec::new();
    if params.padding_rate_hz > 0.0 {
        for dir in [Direction::ControllerToRobot, Direction::RobotToController] {
            let mut t = t0;
            loop {
                let u: f64 = rng.gen();
                t += -(1.0 - u).ln() / params.padding_rate_hz;
                if t >= t1 {
                    break;
                }
                padding.push((t, dir));
            }
        }
        padding.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let mut rn = Renumber::default();
    // Next unseen old sequence number and the last ACK value, per direction.
    let mut next_old = [None::<u32>; 2];
    let mut last_ack = [0u32; 2];
    let mut packets = Vec::with_capacity(flow.packets.len() + padding.len());
    let mut pad = padding.into_iter().peekable();
    let mut first_data_new = None;
    for (i, orig) in flow.packets.iter().enumerate() {
        while let Some(&(t, dir)) = pad.peek() {
            if t > orig.timestamp {
                break;
            }
            pad.next();
            let d = dir.as_index();
            let Some(old) = next_old[d] else { continue };
            let len = cells.cell_bytes();
            let seq = rn.inserted(d, old, len);
            let ip_len = IP_HDR + TCP_HDR + len;
            packets.push(PacketRecord {
                timestamp: t,
                direction: dir,
                frame_len: ETH_HDR + ip_len,
                frame_cap_len: ETH_HDR + ip_len,
                ip_len,
                ip_hdr_len: IP_HDR,
                tcp_payload_len: len,
                tcp_hdr_len: TCP_HDR,
                tcp_flags: TcpFlags::PSH | TcpFlags::ACK,
                seq,
                ack: last_ack[d],
                window_size: cells.constant_window.unwrap_or(MAX_WINDOW),
                tls_record_len: len,
                tls_record_count: 1,
                is_retransmission: false,
            });
        }
        let mut p = orig.clone();
        let old_len = p.tcp_payload_len;
        let old_frame = p.frame_len;
        if old_len > 0 {
            let padded = cells.padded_len(old_len);
            set_payload(&mut p, padded);
            p.tls_record_count = padded / cells.cell_bytes();
            p.tls_record_len = padded;
        }
        let d = p.direction.as_index();
        let syn = u32::from(p.tcp_flags.contains(TcpFlags::SYN));
        let end = orig.seq.wrapping_add(old_len + syn);
        next_old[d] = Some(match next_old[d] {
            Some(n) if (end.wrapping_sub(n) as i32) <= 0 => n,
            _ => end,
        });
        rn.data(&mut p, old_len);
        if p.tcp_flags.contains(TcpFlags::ACK) {
            last_ack[d] = p.ack;
        }
        if let Some(w) = cells.constant_window {
            p.window_size = w;
        }
        p.timestamp += serialisation_s(p.frame_len - old_frame, cells.bandwidth_mbps);
        if i == start {
            first_data_new = Some(packets.len());
        }
        packets.push(p);
    }

    let mut last_t = f64::NEG_INFINITY;
    for p in &mut packets {
        let lag = if params.circuit_jitter_s > 0.0 { rng.gen_range(0.0..=params.circuit_jitter_s) } else { 0.0 };
        p.timestamp = (p.timestamp + lag).max(last_t);
        last_t = p.timestamp;
    }
    let mut out = FlowTrace { packets, ..flow.clone() };
    if let (Some(i), Some(meta)) = (first_data_new, out.meta.as_mut()) {
        meta.first_command_time = out.packets[i].timestamp;
    }
    Ok(out)
}

fn validate_constant_rate(p: &ConstantRateParams) -> Result<(), DefenseError> {
    if !(p.interval_s.is_finite() && p.interval_s > 0.0) {
        return Err(bad("constant-rate", "interval_s must be positive"));
    }
    if p.packet_size == 0 {
        return Err(bad("constant-rate", "packet_size must be positive"));
    }
    if !(p.bandwidth_mbps.is_finite() && p.bandwidth_mbps > 0.0) {
        return Err(bad("constant-rate", "bandwidth_mbps must be positive"));
    }
    let frame = ETH_HDR + IP_HDR + TCP_HDR + p.packet_size;
    if p.interval_s < serialisation_s(frame, p.bandwidth_mbps) {
        return Err(bad("constant-rate", "interval_s is shorter than one packet's serialisation time"));
    }
    Ok(())
}

/// Constant-rate output together with the real bytes each packet carries.
/// Zero marks a dummy; the marker never enters the trace itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantRateOutput {
    pub flow: FlowTrace,
    pub real_bytes: Vec<u32>,
}

/// Replace each direction's packets by fixed-size packets at `k * interval`.
/// Payload bytes queue in arrival order and fill slots head-of-line; a packet
/// without payload still needs a slot. Slots with nothing queued carry a
/// dummy until the direction's last original packet has been sent.
pub fn apply_constant_rate(flow: &FlowTrace, params: &ConstantRateParams) -> Result<ConstantRateOutput, DefenseError> {
    validate_constant_rate(params)?;
    let size = params.packet_size;
    let ip_len = IP_HDR + TCP_HDR + size;
    // (slot time, direction, real bytes)
    let mut slots: Vec<(f64, Direction, u32)> = Vec::new();
    for dir in [Direction::ControllerToRobot, Direction::RobotToController] {
        let queue: Vec<(f64, u32)> =
            flow.packets.iter().filter(|p| p.direction == dir).map(|p| (p.timestamp, p.tcp_payload_len)).collect();
        if queue.is_empty() {
            continue;
        }
        let (mut head, mut head_left) = (0usize, queue[0].1);
        let mut k = 0u64;
        while head < queue.len() {
            let t = k as f64 * params.interval_s;
            let mut room = size;
            let mut carried = 0;
            let mut used = false;
            while head < queue.len() && queue[head].0 <= t && (room > 0 || head_left == 0) {
                let take = head_left.min(room);
                carried += take;
                room -= take;
                head_left -= take;
                used = true;
                if head_left == 0 {
                    head += 1;
                    head_left = queue.get(head).map_or(0, |q| q.1);
                } else {
                    break;
                }
            }
            slots.push((t, dir, if used { carried } else { 0 }));
            k += 1;
        }
    }
    slots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.as_index().cmp(&b.1.as_index())));

    let mut next_seq = [0u32; 2];
    for dir in [Direction::ControllerToRobot, Direction::RobotToController] {
        if let Some(p) = flow.packets.iter().find(|p| p.direction == dir) {
            next_seq[dir.as_index()] = p.seq;
        }
    }
    let mut packets = Vec::with_capacity(slots.len());
    let mut real_bytes = Vec::with_capacity(slots.len());
    // Bytes of each direction already delivered by strictly earlier slots.
    let mut acked_upto = [next_seq[0], next_seq[1]];
    let mut pending_end = [next_seq[0], next_seq[1]];
    let mut pending_t = [f64::NEG_INFINITY; 2];
    for (t, dir, real) in slots {
        let d = dir.as_index();
        let o = 1 - d;
        if pending_t[o] < t {
            acked_upto[o] = pending_end[o];
        }
        packets.push(PacketRecord {
            timestamp: t,
            direction: dir,
            frame_len: ETH_HDR + ip_len,
            frame_cap_len: ETH_HDR + ip_len,
            ip_len,
            ip_hdr_len: IP_HDR,
            tcp_payload_len: size,
            tcp_hdr_len: TCP_HDR,
            tcp_flags: TcpFlags::PSH | TcpFlags::ACK,
            seq: next_seq[d],
            ack: acked_upto[o],
            window_size: MAX_WINDOW,
            tls_record_len: size,
            tls_record_count: 1,
            is_retransmission: false,
        });
        real_bytes.push(real);
        next_seq[d] = next_seq[d].wrapping_add(size);
        pending_end[d] = next_seq[d];
        pending_t[d] = t;
    }
    let mut out = FlowTrace { packets, ..flow.clone() };
    if let Some(meta) = out.meta.as_mut() {
        // The set-up burst is no longer distinguishable; treat everything as data.
        meta.first_command_time = 0.0;
    }
    Ok(ConstantRateOutput { flow: out, real_bytes })
}

/// Add a seeded uniform delay to every packet. Within each direction order is
/// kept by clamping to the previous packet's new time.
pub fn apply_vit(flow: &FlowTrace, params: &VitParams) -> Result<FlowTrace, DefenseError> {
    params.validate()?;
    if params.max_s == 0.0 {
        return Ok(flow.clone());
    }
    let mut rng = seed::rng(flow_seed(params.seed, "vit", &flow.flow_id), "vit", &[]);
    let mut last = [f64::NEG_INFINITY; 2];
    let mut keyed: Vec<(f64, usize, PacketRecord)> = flow
        .packets
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lag =
                if params.max_s > params.min_s { rng.gen_range(params.min_s..=params.max_s) } else { params.min_s };
            let d = p.direction.as_index();
            let t = (p.timestamp + lag).max(last[d]);
            last[d] = t;
            let mut q = p.clone();
            q.timestamp = t;
            (t, i, q)
        })
        .collect();
    let first = first_data_index(flow);
    let new_first = first.map(|i| keyed[i].0);
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = FlowTrace { packets: keyed.into_iter().map(|k| k.2).collect(), ..flow.clone() };
    if let (Some(t), Some(meta)) = (new_first, out.meta.as_mut()) {
        meta.first_command_time = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::{emulate_session, LinkParams, MovementClass, MovementProgram, RobotProfile, TlsChannelModel};

    fn session(loss: f64) -> FlowTrace {
        let program = MovementProgram::new(MovementClass::XZ, 1.0, 25_000, 4);
        let link = LinkParams { loss_pct: loss, seed: 11, ..LinkParams::default() };
        emulate_session(&program, &link, &TlsChannelModel::default(), &RobotProfile::default()).unwrap()
    }

    fn data(flow: &FlowTrace) -> impl Iterator<Item = &PacketRecord> {
        flow.packets.iter().filter(|p| p.tcp_payload_len > 0)
    }

    #[test]
    fn cell_ceiling_rule() {
        let p = FixedCellParams::default();
        assert_eq!(p.padded_len(100), 514);
        assert_eq!(p.padded_len(514), 514);
        assert_eq!(p.padded_len(515), 1028);
    }

    #[test]
    fn fixed_cells_keep_invariants_and_are_idempotent() {
        let flow = session(20.0);
        let p = FixedCellParams::default();
        let once = apply_fixed_cells(&flow, &p).unwrap();
        once.validate().unwrap();
        assert_eq!(once.packets.len(), flow.packets.len());
        assert_eq!(apply_fixed_cells(&once, &p).unwrap(), once);
        assert!(once.packets.iter().all(|q| q.window_size == MAX_WINDOW));
        let start = once.meta.as_ref().unwrap().first_command_time;
        let lens: Vec<u32> = data(&once).filter(|q| q.timestamp >= start).map(|q| q.tls_record_len).collect();
        assert!(lens.iter().all(|&l| l == 514));
        for (a, b) in flow.packets.iter().zip(&once.packets) {
            assert!(b.tcp_payload_len >= a.tcp_payload_len);
            assert!(b.tcp_payload_len - a.tcp_payload_len < 514 || a.tcp_payload_len == 0);
            assert_eq!(a.is_retransmission, b.is_retransmission);
        }
    }

    #[test]
    fn renumbered_acks_cover_the_same_segments() {
        let flow = session(0.0);
        let once = apply_fixed_cells(&flow, &FixedCellParams::default()).unwrap();
        // A reply acknowledges exactly the end of the command it answers.
        let start = once.meta.as_ref().unwrap().first_command_time;
        let d: Vec<&PacketRecord> = data(&once).filter(|q| q.timestamp >= start).collect();
        for pair in d.chunks(2) {
            assert_eq!(pair[1].ack, pair[0].seq.wrapping_add(pair[0].tcp_payload_len));
        }
    }

    #[test]
    fn tor_adds_padding_and_keeps_order() {
        let flow = session(0.0);
        let params = TorParams { seed: 3, ..TorParams::default() };
        let out = apply_tor(&flow, &params).unwrap();
        out.validate().unwrap();
        assert!(out.packets.len() > flow.packets.len());
        assert_eq!(apply_tor(&flow, &params).unwrap(), out);
        let start = out.meta.as_ref().unwrap().first_command_time;
        assert!(data(&out).filter(|q| q.timestamp >= start).all(|q| q.tls_record_len == 514));
        let quiet = TorParams { circuit_jitter_s: 0.0, padding_rate_hz: 0.0, ..params };
        assert_eq!(apply_tor(&flow, &quiet).unwrap(), apply_fixed_cells(&flow, &quiet.cells).unwrap());
    }

    #[test]
    fn constant_rate_slots_sizes_and_conservation() {
        let flow = session(10.0);
        let params = ConstantRateParams { interval_s: 0.5, packet_size: 600, ..Default::default() };
        let out = apply_constant_rate(&flow, &params).unwrap();
        out.flow.validate().unwrap();
        for p in &out.flow.packets {
            let k = p.timestamp / 0.5;
            assert!((k - k.round()).abs() < 1e-9);
            assert_eq!(p.tcp_payload_len, 600);
        }
        let before: u64 = flow.packets.iter().map(|p| p.tcp_payload_len as u64).sum();
        let after: u64 = out.real_bytes.iter().map(|&b| b as u64).sum();
        assert_eq!(before, after);
        assert!(out.real_bytes.contains(&0));
    }

    #[test]
    fn constant_rate_three_packets() {
        let mut flow = session(0.0);
        flow.packets.truncate(3);
        for (p, t) in flow.packets.iter_mut().zip([0.0, 0.2, 0.7]) {
            p.direction = Direction::ControllerToRobot;
            p.timestamp = t;
        }
        let params = ConstantRateParams { interval_s: 0.5, packet_size: 2000, ..Default::default() };
        let out = apply_constant_rate(&flow, &params).unwrap();
        let times: Vec<f64> = out.flow.packets.iter().map(|p| p.timestamp).collect();
        assert_eq!(times, [0.0, 0.5, 1.0]);
        assert!(apply_constant_rate(&flow, &ConstantRateParams { interval_s: 1e-9, ..params }).is_err());
    }

    #[test]
    fn vit_identity_shift_and_errors() {
        let flow = session(0.0);
        assert_eq!(apply_vit(&flow, &VitParams::default()).unwrap(), flow);
        let shifted = apply_vit(&flow, &VitParams { min_s: 0.1, max_s: 0.1, seed: 1 }).unwrap();
        for (a, b) in flow.packets.iter().zip(&shifted.packets) {
            assert!((b.timestamp - a.timestamp - 0.1).abs() < 1e-12);
        }
        let err = apply_vit(&flow, &VitParams { min_s: 0.2, max_s: 0.1, seed: 1 });
        assert!(err.is_err());
        let jittered = VitParams { min_s: 0.0, max_s: 0.3, seed: 5 };
        let a = apply_vit(&flow, &jittered).unwrap();
        a.validate().unwrap();
        assert_eq!(a, apply_vit(&flow, &jittered).unwrap());
    }
}
