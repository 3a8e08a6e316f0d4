//! Controller/robot TLS session synthesis over a modelled link.
//!
//! The controller streams G-code over a TLS 1.2 connection and waits for the
//! robot's `ok` before issuing the next command, but never faster than one
//! command per `command_interval_s`. Each TCP segment crosses the link after
//! its serialisation time plus the one-way delay, and may be dropped. A dropped
//! segment is resent after a retransmission timeout that starts at 200 ms and
//! doubles per retry. Traffic is observed at the controller's network
//! interface: outgoing packets are stamped when they leave (and are seen even
//! if the link later drops them), incoming packets when they arrive.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trace::{Direction, FlowMeta, FlowTrace, PacketRecord, TcpFlags};

pub const ETH_HDR: u32 = 14;
pub const IP_HDR: u32 = 20;
/// TCP header with the timestamp option, as used by both endpoints.
pub const TCP_HDR: u32 = 32;
const TCP_HDR_SYN: u32 = 40;
pub const MAX_WINDOW: u32 = 65_535;

pub const INITIAL_RTO_S: f64 = 0.2;
pub const MAX_RETRIES: u32 = 8;
/// Pause between the end of the set-up burst and the first command.
pub const SETTLE_S: f64 = 0.25;

pub const DISTANCE_GRID_MM: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 25.0, 50.0];
pub const SPEED_GRID: [u32; 5] = [25_000, 50_000, 100_000, 150_000, 200_000];

#[derive(Debug, Error, PartialEq)]
pub enum EmulatorError {
    #[error("speed code must be positive, got {0}")]
    SpeedCode(i64),
    #[error("distance must be positive and finite, got {0}")]
    Distance(f64),
    #[error("invalid movement program: {0}")]
    Program(String),
    #[error("invalid link parameters: {0}")]
    Link(String),
    #[error("unknown movement class {0:?}")]
    UnknownClass(String),
}

/// The seven axis combinations a single movement can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MovementClass {
    X,
    Y,
    Z,
    XY,
    XZ,
    YZ,
    XYZ,
}

impl MovementClass {
    pub const ALL: [MovementClass; 7] = [
        MovementClass::X,
        MovementClass::Y,
        MovementClass::Z,
        MovementClass::XY,
        MovementClass::XZ,
        MovementClass::YZ,
        MovementClass::XYZ,
    ];

    /// Which of (x, y, z) this movement drives.
    pub fn axes(self) -> [bool; 3] {
        match self {
            MovementClass::X => [true, false, false],
            MovementClass::Y => [false, true, false],
            MovementClass::Z => [false, false, true],
            MovementClass::XY => [true, true, false],
            MovementClass::XZ => [true, false, true],
            MovementClass::YZ => [false, true, true],
            MovementClass::XYZ => [true, true, true],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MovementClass::X => "X",
            MovementClass::Y => "Y",
            MovementClass::Z => "Z",
            MovementClass::XY => "XY",
            MovementClass::XZ => "XZ",
            MovementClass::YZ => "YZ",
            MovementClass::XYZ => "XYZ",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("class is in ALL")
    }
}

impl fmt::Display for MovementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MovementClass {
    type Err = EmulatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EmulatorError::UnknownClass(s.to_string()))
    }
}

pub type Position = [f64; 3];

/// One movement operation: the same relative move repeated `repetitions` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovementProgram {
    pub movement: MovementClass,
    pub distance_mm: f64,
    pub speed_code: u32,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_interval")]
    pub command_interval_s: f64,
    /// Mean of an exponential jitter added to every command interval; 0 disables it.
    #[serde(default)]
    pub interval_jitter_s: f64,
    /// Where the arm stands before the first command; the robot's home if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_mm: Option<Position>,
}

fn default_repetitions() -> u32 {
    3
}

fn default_interval() -> f64 {
    1.0
}

impl MovementProgram {
    pub fn new(movement: MovementClass, distance_mm: f64, speed_code: u32, repetitions: u32) -> Self {
        MovementProgram {
            movement,
            distance_mm,
            speed_code,
            repetitions,
            command_interval_s: default_interval(),
            interval_jitter_s: 0.0,
            start_mm: None,
        }
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        if !(self.distance_mm.is_finite() && self.distance_mm > 0.0) {
            return Err(EmulatorError::Distance(self.distance_mm));
        }
        if self.speed_code == 0 {
            return Err(EmulatorError::SpeedCode(0));
        }
        if self.repetitions == 0 {
            return Err(EmulatorError::Program("repetitions must be at least 1".into()));
        }
        if !(self.command_interval_s.is_finite() && self.command_interval_s > 0.0) {
            return Err(EmulatorError::Program(format!(
                "command_interval_s must be positive, got {}",
                self.command_interval_s
            )));
        }
        if !(self.interval_jitter_s.is_finite() && self.interval_jitter_s >= 0.0) {
            return Err(EmulatorError::Program(format!(
                "interval_jitter_s must be non-negative, got {}",
                self.interval_jitter_s
            )));
        }
        if let Some(p) = self.start_mm {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(EmulatorError::Program("start position must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Link conditions between controller and robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    #[serde(default)]
    pub delay_ms: f64,
    #[serde(default)]
    pub loss_pct: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_mbps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_bandwidth() -> f64 {
    100.0
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { delay_ms: 0.0, loss_pct: 0.0, bandwidth_mbps: default_bandwidth(), seed: 0 }
    }
}

impl LinkParams {
    pub fn with_delay(delay_ms: f64) -> Self {
        LinkParams { delay_ms, ..Self::default() }
    }

    pub fn with_loss(loss_pct: f64) -> Self {
        LinkParams { loss_pct, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        if !(self.delay_ms.is_finite() && self.delay_ms >= 0.0) {
            return Err(EmulatorError::Link(format!("delay_ms must be >= 0, got {}", self.delay_ms)));
        }
        if !(self.loss_pct.is_finite() && (0.0..100.0).contains(&self.loss_pct)) {
            return Err(EmulatorError::Link(format!("loss_pct must be in [0, 100), got {}", self.loss_pct)));
        }
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps > 0.0) {
            return Err(EmulatorError::Link(format!("bandwidth_mbps must be positive, got {}", self.bandwidth_mbps)));
        }
        Ok(())
    }

    /// Serialisation plus propagation time of one frame.
    pub fn traversal_s(&self, frame_len: u32) -> f64 {
        self.transmission_s(frame_len) + self.delay_ms / 1000.0
    }

    pub fn transmission_s(&self, frame_len: u32) -> f64 {
        frame_len as f64 * 8.0 / (self.bandwidth_mbps * 1e6)
    }
}

/// TLS 1.2 AES-GCM record framing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlsChannelModel {
    pub record_header_bytes: u32,
    /// Explicit nonce plus authentication tag.
    pub per_record_overhead_bytes: u32,
    pub handshake_packet_count: u32,
}

impl Default for TlsChannelModel {
    fn default() -> Self {
        TlsChannelModel { record_header_bytes: 5, per_record_overhead_bytes: 24, handshake_packet_count: 12 }
    }
}

impl TlsChannelModel {
    pub fn record_len(&self, plaintext_len: usize) -> u32 {
        plaintext_len as u32 + self.record_header_bytes + self.per_record_overhead_bytes
    }
}

/// Mechanical behaviour of the arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotProfile {
    pub home_mm: Position,
    /// Fraction of the commanded feed rate each axis actually reaches.
    pub axis_rate: [f64; 3],
    /// Fixed firmware time to parse a command and emit its reply.
    pub processing_s: f64,
    /// Upper bound of a uniform extra delay on every reply.
    pub jitter_s: f64,
}

impl Default for RobotProfile {
    fn default() -> Self {
        RobotProfile {
            home_mm: [150.0, 0.0, 90.0],
            // Squared inverse rates 1, 2, 4 give every axis subset a distinct path time.
            axis_rate: [1.0, std::f64::consts::FRAC_1_SQRT_2, 0.5],
            processing_s: 0.002,
            jitter_s: 0.004,
        }
    }
}

impl RobotProfile {
    /// Every axis at the commanded feed, no firmware latency.
    pub fn ideal() -> Self {
        RobotProfile { axis_rate: [1.0; 3], processing_s: 0.0, jitter_s: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        let ok = self.axis_rate.iter().all(|r| r.is_finite() && *r > 0.0)
            && self.processing_s.is_finite()
            && self.processing_s >= 0.0
            && self.jitter_s.is_finite()
            && self.jitter_s >= 0.0
            && self.home_mm.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(EmulatorError::Program(format!("invalid robot profile {self:?}")))
        }
    }

    /// Time to execute one move, excluding firmware latency and jitter.
    pub fn motion_time(
        &self,
        movement: MovementClass,
        distance_mm: f64,
        speed_code: u32,
    ) -> Result<f64, EmulatorError> {
        let axes = movement.axes();
        let path: f64 =
            (0..3).filter(|&i| axes[i]).map(|i| (distance_mm / self.axis_rate[i]).powi(2)).sum::<f64>().sqrt();
        movement_duration(path, speed_code as i64)
    }
}

pub fn speed_code_to_mmps(code: i64) -> Result<f64, EmulatorError> {
    if code <= 0 {
        return Err(EmulatorError::SpeedCode(code));
    }
    Ok(code as f64 / 2000.0)
}

pub fn movement_duration(distance_mm: f64, speed_code: i64) -> Result<f64, EmulatorError> {
    if !(distance_mm.is_finite() && distance_mm > 0.0) {
        return Err(EmulatorError::Distance(distance_mm));
    }
    Ok(distance_mm / speed_code_to_mmps(speed_code)?)
}

/// Target position of a move from `from`.
pub fn move_target(movement: MovementClass, distance_mm: f64, from: Position) -> Position {
    let axes = movement.axes();
    std::array::from_fn(|i| if axes[i] { from[i] + distance_mm } else { from[i] })
}

pub fn gcode_for_move(movement: MovementClass, distance_mm: f64, speed_code: u32, from: Position) -> String {
    let [x, y, z] = move_target(movement, distance_mm, from);
    format!("G0 X{x:.1} Y{y:.1} Z{z:.1} F{speed_code}\n")
}

pub fn status_reply(position: Position) -> String {
    let [x, y, z] = position;
    format!("ok P:{x:.1},{y:.1},{z:.1}\n")
}

/// Counters describing what the link did to a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    /// Data segments sent for the first time.
    pub first_transmissions: u64,
    /// First transmissions the link dropped.
    pub dropped_first: u64,
    pub retransmissions: u64,
    pub failed: bool,
}

struct Endpoint {
    next_seq: u32,
    /// Bytes received in order from the peer.
    rcv_next: u32,
}

struct Session<'a> {
    link: &'a LinkParams,
    tls: &'a TlsChannelModel,
    loss_rng: rand_chacha::ChaCha8Rng,
    controller: Endpoint,
    robot: Endpoint,
    packets: Vec<PacketRecord>,
    stats: SessionStats,
}

struct Segment {
    flags: TcpFlags,
    payload: u32,
    tls_len: u32,
    tls_count: u32,
    hdr: u32,
    /// Sequence space consumed (payload, or 1 for SYN).
    seq_len: u32,
}

impl Segment {
    fn control(flags: TcpFlags) -> Self {
        let syn = flags.contains(TcpFlags::SYN);
        Segment {
            flags,
            payload: 0,
            tls_len: 0,
            tls_count: 0,
            hdr: if syn { TCP_HDR_SYN } else { TCP_HDR },
            seq_len: u32::from(syn),
        }
    }

    /// `records` TLS records totalling `payload` bytes.
    fn tls(payload: u32, records: u32) -> Self {
        Segment {
            flags: TcpFlags::PSH | TcpFlags::ACK,
            payload,
            tls_len: payload,
            tls_count: records,
            hdr: TCP_HDR,
            seq_len: payload,
        }
    }

    fn frame_len(&self) -> u32 {
        ETH_HDR + IP_HDR + self.hdr + self.payload
    }
}

impl Session<'_> {
    fn endpoints(&mut self, dir: Direction) -> (&mut Endpoint, &mut Endpoint) {
        match dir {
            Direction::ControllerToRobot => (&mut self.controller, &mut self.robot),
            Direction::RobotToController => (&mut self.robot, &mut self.controller),
        }
    }

    fn record(&self, dir: Direction, seg: &Segment, seq: u32, ack: u32, ts: f64, retx: bool) -> PacketRecord {
        let frame = seg.frame_len();
        let window = MAX_WINDOW.saturating_sub(seg.payload);
        PacketRecord {
            timestamp: ts,
            direction: dir,
            frame_len: frame,
            frame_cap_len: frame,
            ip_len: frame - ETH_HDR,
            ip_hdr_len: IP_HDR,
            tcp_payload_len: seg.payload,
            tcp_hdr_len: seg.hdr,
            tcp_flags: seg.flags,
            seq,
            ack: if seg.flags.contains(TcpFlags::ACK) { ack } else { 0 },
            window_size: window,
            tls_record_len: seg.tls_len,
            tls_record_count: seg.tls_count,
            is_retransmission: retx,
        }
    }

    /// Send one segment that the link never drops. Returns its arrival time.
    fn send_reliable(&mut self, dir: Direction, seg: &Segment, t: f64) -> f64 {
        let arrival = t + self.link.traversal_s(seg.frame_len());
        let (tx, rx) = self.endpoints(dir);
        let (seq, ack) = (tx.next_seq, tx.rcv_next);
        tx.next_seq = tx.next_seq.wrapping_add(seg.seq_len);
        rx.rcv_next = rx.rcv_next.wrapping_add(seg.seq_len);
        let ts = if dir == Direction::ControllerToRobot { t } else { arrival };
        let rec = self.record(dir, seg, seq, ack, ts, false);
        self.packets.push(rec);
        arrival
    }

    /// Send a data segment through the lossy link, retrying on drops.
    /// Returns the arrival time, or `None` once the retry budget is exhausted.
    fn send_lossy(&mut self, dir: Direction, seg: &Segment, t: f64) -> Option<f64> {
        let p = self.link.loss_pct / 100.0;
        let (seq, ack) = {
            let (tx, _) = self.endpoints(dir);
            (tx.next_seq, tx.rcv_next)
        };
        let mut send_at = t;
        let mut rto = INITIAL_RTO_S;
        for attempt in 0..=MAX_RETRIES {
            let dropped = self.loss_rng.gen::<f64>() < p;
            if attempt == 0 {
                self.stats.first_transmissions += 1;
                self.stats.dropped_first += u64::from(dropped);
            } else {
                self.stats.retransmissions += 1;
            }
            let arrival = send_at + self.link.traversal_s(seg.frame_len());
            let retx = attempt > 0;
            match dir {
                Direction::ControllerToRobot => {
                    let rec = self.record(dir, seg, seq, ack, send_at, retx);
                    self.packets.push(rec);
                }
                Direction::RobotToController if !dropped => {
                    let rec = self.record(dir, seg, seq, ack, arrival, retx);
                    self.packets.push(rec);
                }
                Direction::RobotToController => {}
            }
            if !dropped {
                let (tx, rx) = self.endpoints(dir);
                tx.next_seq = tx.next_seq.wrapping_add(seg.seq_len);
                rx.rcv_next = rx.rcv_next.wrapping_add(seg.seq_len);
                return Some(arrival);
            }
            send_at += rto;
            rto *= 2.0;
        }
        self.stats.failed = true;
        None
    }

    /// TCP and TLS 1.2 set-up followed by a small configuration exchange.
    /// Returns the controller-side time at which the last packet arrived.
    fn handshake(&mut self, count: u32) -> f64 {
        use Direction::{ControllerToRobot as C, RobotToController as R};
        let mut script: Vec<(Direction, Segment)> = vec![
            (C, Segment::control(TcpFlags::SYN)),
            (R, Segment::control(TcpFlags::SYN | TcpFlags::ACK)),
            (C, Segment::control(TcpFlags::ACK)),
            // ClientHello.
            (C, Segment::tls(517, 1)),
            (R, Segment::control(TcpFlags::ACK)),
            // ServerHello, Certificate, ServerKeyExchange, ServerHelloDone.
            (R, Segment::tls(1208, 4)),
            (C, Segment::control(TcpFlags::ACK)),
            // ClientKeyExchange, ChangeCipherSpec, Finished.
            (C, Segment::tls(126, 3)),
            // ChangeCipherSpec, Finished.
            (R, Segment::tls(51, 2)),
            (C, Segment::control(TcpFlags::ACK)),
            // Firmware query and its answer.
            (C, Segment::tls(self.tls.record_len("M115\n".len()), 1)),
            (R, Segment::tls(self.tls.record_len("ok FIRMWARE_NAME:uArm\n".len()), 1)),
        ];
        script.truncate(count as usize);
        let mut robot_t = 0.0f64;
        let mut controller_t = 0.0f64;
        for (dir, seg) in script {
            let start = match dir {
                Direction::ControllerToRobot => controller_t,
                Direction::RobotToController => robot_t,
            };
            let arrival = self.send_reliable(dir, &seg, start);
            let tx = self.link.transmission_s(seg.frame_len());
            match dir {
                Direction::ControllerToRobot => {
                    controller_t = start + tx;
                    robot_t = robot_t.max(arrival);
                }
                Direction::RobotToController => {
                    robot_t = start + tx;
                    controller_t = controller_t.max(arrival);
                }
            }
        }
        controller_t
    }
}

/// Simulate one session and report link statistics alongside the trace.
pub fn emulate_session_with_stats(
    program: &MovementProgram,
    link: &LinkParams,
    tls: &TlsChannelModel,
    robot: &RobotProfile,
) -> Result<(FlowTrace, SessionStats), EmulatorError> {
    program.validate()?;
    link.validate()?;
    robot.validate()?;

    let mut isn_rng = seed::rng(link.seed, "isn", &[]);
    let mut robot_rng = seed::rng(link.seed, "robot", &[]);
    let mut schedule_rng = seed::rng(link.seed, "schedule", &[]);
    let mut session = Session {
        link,
        tls,
        loss_rng: seed::rng(link.seed, "loss", &[]),
        controller: Endpoint { next_seq: isn_rng.gen(), rcv_next: 0 },
        robot: Endpoint { next_seq: isn_rng.gen(), rcv_next: 0 },
        packets: Vec::new(),
        stats: SessionStats::default(),
    };
    // Each side starts out expecting the other's initial sequence number.
    session.controller.rcv_next = session.robot.next_seq;
    session.robot.rcv_next = session.controller.next_seq;

    let ready = session.handshake(tls.handshake_packet_count);
    let first_command_time = ready + SETTLE_S;
    let motion = robot.motion_time(program.movement, program.distance_mm, program.speed_code)?;

    let mut position = program.start_mm.unwrap_or(robot.home_mm);
    let mut issue_at = first_command_time;
    for _ in 0..program.repetitions {
        // Draw every stream once per repetition so streams stay aligned across link settings.
        let jitter = robot.jitter_s * robot_rng.gen::<f64>();
        let gap_jitter = if program.interval_jitter_s > 0.0 {
            let u: f64 = schedule_rng.gen();
            -program.interval_jitter_s * (1.0 - u).ln()
        } else {
            let _: f64 = schedule_rng.gen();
            0.0
        };

        let command = gcode_for_move(program.movement, program.distance_mm, program.speed_code, position);
        position = move_target(program.movement, program.distance_mm, position);
        let cmd = Segment::tls(tls.record_len(command.len()), 1);
        let Some(at_robot) = session.send_lossy(Direction::ControllerToRobot, &cmd, issue_at) else {
            break;
        };

        let reply_text = status_reply(position);
        let reply = Segment::tls(tls.record_len(reply_text.len()), 1);
        let reply_at = at_robot + robot.processing_s + motion + jitter;
        let Some(at_controller) = session.send_lossy(Direction::RobotToController, &reply, reply_at) else {
            break;
        };

        issue_at = (issue_at + program.command_interval_s + gap_jitter).max(at_controller);
    }

    let failed = session.stats.failed;
    let mut packets = session.packets;
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let flow = FlowTrace {
        flow_id: format!("seed-{:016x}", link.seed),
        label: Some(program.movement),
        packets,
        meta: Some(FlowMeta { program: program.clone(), link: link.clone(), first_command_time, failed }),
    };
    Ok((flow, session.stats))
}

pub fn emulate_session(
    program: &MovementProgram,
    link: &LinkParams,
    tls: &TlsChannelModel,
    robot: &RobotProfile,
) -> Result<FlowTrace, EmulatorError> {
    emulate_session_with_stats(program, link, tls, robot).map(|(flow, _)| flow)
}

/// One grid cell: what to run and under which link conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub program: MovementProgram,
    #[serde(default)]
    pub link: LinkParams,
}

/// Emulate `samples` flows per cell. Each flow's link seed is derived from
/// `(master, cell, sample)`, so the cell's own `link.seed` is ignored.
pub fn generate_dataset(
    grid: &[GridCell],
    samples: usize,
    master: u64,
    tls: &TlsChannelModel,
    robot: &RobotProfile,
) -> Result<Vec<FlowTrace>, EmulatorError> {
    if grid.is_empty() {
        return Err(EmulatorError::Program("grid is empty".into()));
    }
    let mut flows = Vec::with_capacity(grid.len() * samples);
    for (c, cell) in grid.iter().enumerate() {
        for s in 0..samples {
            let link = LinkParams { seed: seed::derive(master, "emulate", &[c as u64, s as u64]), ..cell.link.clone() };
            let mut flow = emulate_session(&cell.program, &link, tls, robot)?;
            flow.flow_id = format!("c{c:03}-s{s:05}");
            flows.push(flow);
        }
    }
    Ok(flows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline(reps: u32) -> MovementProgram {
        MovementProgram::new(MovementClass::X, 1.0, 25_000, reps)
    }

    #[test]
    fn speed_codes() {
        assert_eq!(speed_code_to_mmps(25_000).unwrap(), 12.5);
        assert_eq!(speed_code_to_mmps(200_000).unwrap(), 100.0);
        assert_eq!(speed_code_to_mmps(50_000).unwrap(), 25.0);
        assert!(speed_code_to_mmps(0).is_err());
        assert!(speed_code_to_mmps(-5).is_err());
    }

    #[test]
    fn durations() {
        assert!((movement_duration(1.0, 25_000).unwrap() - 0.08).abs() < 1e-12);
        assert!((movement_duration(50.0, 200_000).unwrap() - 0.5).abs() < 1e-12);
        assert!((movement_duration(10.0, 50_000).unwrap() - 0.4).abs() < 1e-12);
        assert!(movement_duration(0.0, 25_000).is_err());
        assert!(movement_duration(1.0, 0).is_err());
    }

    #[test]
    fn gcode_templates() {
        let home = [150.0, 0.0, 90.0];
        assert_eq!(gcode_for_move(MovementClass::X, 1.0, 25_000, home), "G0 X151.0 Y0.0 Z90.0 F25000\n");
        assert_eq!(gcode_for_move(MovementClass::XYZ, 5.0, 25_000, home), "G0 X155.0 Y5.0 Z95.0 F25000\n");
        assert_eq!(gcode_for_move(MovementClass::Y, 50.0, 100_000, home), "G0 X150.0 Y50.0 Z90.0 F100000\n");
        assert_eq!(status_reply([151.0, 0.0, 90.0]), "ok P:151.0,0.0,90.0\n");
    }

    #[test]
    fn class_names_round_trip() {
        for c in MovementClass::ALL {
            assert_eq!(c.name().parse::<MovementClass>().unwrap(), c);
            assert_eq!(MovementClass::ALL[c.index()], c);
        }
        assert!("W".parse::<MovementClass>().is_err());
    }

    #[test]
    fn ideal_profile_uses_commanded_feed() {
        let r = RobotProfile::ideal();
        let t = r.motion_time(MovementClass::X, 1.0, 25_000).unwrap();
        assert!((t - 0.08).abs() < 1e-12);
        let t = r.motion_time(MovementClass::XY, 1.0, 25_000).unwrap();
        assert!((t - 0.08 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn default_profile_separates_every_class() {
        let r = RobotProfile::default();
        let mut times: Vec<f64> = MovementClass::ALL.iter().map(|&c| r.motion_time(c, 1.0, 25_000).unwrap()).collect();
        times.sort_by(f64::total_cmp);
        for w in times.windows(2) {
            assert!(w[1] - w[0] > 0.01, "{times:?}");
        }
    }

    #[test]
    fn lossless_packet_count() {
        let tls = TlsChannelModel::default();
        let flow = emulate_session(&baseline(60), &LinkParams::default(), &tls, &RobotProfile::default()).unwrap();
        assert_eq!(flow.packets.len(), 12 + 120);
        flow.validate().unwrap();
        let t0 = flow.first_command_time().unwrap();
        let data: Vec<_> = flow.packets.iter().filter(|p| p.timestamp >= t0).collect();
        assert_eq!(data.len(), 120);
        let span = data.last().unwrap().timestamp - data[0].timestamp;
        let rate = data.len() as f64 / span;
        assert!((rate - 2.0).abs() < 0.1, "rate {rate}");
    }

    #[test]
    fn data_records_carry_tls_overhead() {
        let tls = TlsChannelModel::default();
        let flow = emulate_session(&baseline(3), &LinkParams::default(), &tls, &RobotProfile::default()).unwrap();
        let t0 = flow.first_command_time().unwrap();
        let first = flow.packets.iter().find(|p| p.timestamp >= t0).unwrap();
        assert_eq!(first.tls_record_len as usize, "G0 X151.0 Y0.0 Z90.0 F25000\n".len() + 29);
        assert_eq!(first.tcp_payload_len, first.tls_record_len);
        assert_eq!(first.frame_len, 14 + 20 + 32 + first.tcp_payload_len);
    }

    #[test]
    fn deterministic_per_seed() {
        let tls = TlsChannelModel::default();
        let link = LinkParams { loss_pct: 25.0, seed: 42, ..Default::default() };
        let a = emulate_session(&baseline(20), &link, &tls, &RobotProfile::default()).unwrap();
        let b = emulate_session(&baseline(20), &link, &tls, &RobotProfile::default()).unwrap();
        assert_eq!(a, b);
        let other = LinkParams { seed: 43, ..link };
        let c = emulate_session(&baseline(20), &other, &tls, &RobotProfile::default()).unwrap();
        assert_ne!(a.packets, c.packets);
    }

    #[test]
    fn near_total_loss_terminates_with_failure_marker() {
        let tls = TlsChannelModel::default();
        let link = LinkParams { loss_pct: 99.9, seed: 1, ..Default::default() };
        let (flow, stats) = emulate_session_with_stats(&baseline(5), &link, &tls, &RobotProfile::default()).unwrap();
        assert!(stats.failed);
        assert!(flow.meta.unwrap().failed);
        // Handshake plus at most nine transmissions of the first command.
        assert!(flow.packets.len() <= 12 + 9);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let tls = TlsChannelModel::default();
        let r = RobotProfile::default();
        let bad_loss = LinkParams::with_loss(100.0);
        assert!(emulate_session(&baseline(1), &bad_loss, &tls, &r).is_err());
        let bad_bw = LinkParams { bandwidth_mbps: 0.0, ..Default::default() };
        assert!(emulate_session(&baseline(1), &bad_bw, &tls, &r).is_err());
        let mut p = baseline(1);
        p.repetitions = 0;
        assert!(emulate_session(&p, &LinkParams::default(), &tls, &r).is_err());
    }

    #[test]
    fn dataset_counts_and_labels() {
        let grid: Vec<GridCell> = MovementClass::ALL
            .iter()
            .map(|&m| GridCell { program: MovementProgram::new(m, 1.0, 25_000, 2), link: LinkParams::default() })
            .collect();
        let tls = TlsChannelModel::default();
        let flows = generate_dataset(&grid, 10, 7, &tls, &RobotProfile::default()).unwrap();
        assert_eq!(flows.len(), 70);
        assert_eq!(flows[15].label, Some(MovementClass::Y));
        assert!(generate_dataset(&[], 10, 7, &tls, &RobotProfile::default()).is_err());
    }
}
