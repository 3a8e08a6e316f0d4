//! Per-packet feature extraction.
//!
//! Every non-handshake packet becomes one row of [`COLUMNS`]. Sequence-derived
//! columns follow the usual capture-tool conventions:
//!
//! * `bytes_in_flight`: the sender's highest sent sequence minus the highest
//!   acknowledgement it has seen from the peer, at emission time;
//! * `push_bytes_sent`: payload sent by this side since its last PSH packet,
//!   including the current one;
//! * `ack_rtt_s`: on a packet whose acknowledgement covers new data, the time
//!   since the latest transmission of the newest segment it covers; 0 otherwise.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use thiserror::Error;

use crate::emulator::MovementClass;
use crate::trace::{FlowTrace, PacketRecord, TcpFlags};

pub const N_FEATURES: usize = 16;

pub const COLUMNS: [&str; N_FEATURES] = [
    "packet_time_s",
    "inter_arrival_s",
    "direction",
    "frame_len",
    "frame_cap_len",
    "ip_len",
    "ip_hdr_len",
    "tcp_payload_len",
    "tcp_hdr_len",
    "window_size",
    "bytes_in_flight",
    "push_bytes_sent",
    "ack_rtt_s",
    "tls_record_len",
    "tls_record_count",
    "cum_bytes_same_dir",
];

pub const UNKNOWN: &str = "Unknown";

/// Idle gap that ends the set-up burst of a captured flow.
pub const HANDSHAKE_GAP_S: f64 = 0.2;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad csv header: expected {expected:?}, found {found:?}")]
    Header { expected: Vec<String>, found: Vec<String> },
    #[error("csv row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
}

/// One extracted row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; N_FEATURES],
    pub label: String,
    pub flow_id: String,
}

/// Row-major feature table with labels and flow ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    pub class_names: Vec<String>,
    data: Vec<f64>,
    labels: Vec<usize>,
    flow_ids: Vec<String>,
}

pub fn label_name(label: Option<MovementClass>) -> String {
    label.map_or_else(|| UNKNOWN.to_string(), |c| c.name().to_string())
}

/// Canonical vocabulary order: movement classes in declaration order, then Unknown,
/// then anything else alphabetically.
pub fn canonical_class_order<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut names: Vec<&str> = names.into_iter().collect();
    names.sort_by_key(|n| {
        let rank = match n.parse::<MovementClass>() {
            Ok(c) if c.name() == *n => c.index(),
            _ if *n == UNKNOWN => MovementClass::ALL.len(),
            _ => MovementClass::ALL.len() + 1,
        };
        (rank, n.to_string())
    });
    names.dedup();
    names.into_iter().map(String::from).collect()
}

fn handshake_end(flow: &FlowTrace) -> usize {
    let packets = &flow.packets;
    if let Some(t0) = flow.first_command_time() {
        return packets.iter().take_while(|p| p.timestamp < t0).count();
    }
    // Captured flows: only a flow that opens with a SYN has a set-up burst.
    match packets.first() {
        Some(p) if p.tcp_flags.contains(TcpFlags::SYN) => packets
            .windows(2)
            .position(|w| w[1].timestamp - w[0].timestamp >= HANDSHAKE_GAP_S)
            .map_or(packets.len(), |i| i + 1),
        _ => 0,
    }
}

#[derive(Default)]
struct SenderState {
    isn: Option<u32>,
    /// Highest relative sequence end sent so far.
    sent_end: i64,
    /// Highest relative acknowledgement received from the peer.
    acked: i64,
    push_acc: u64,
    /// Relative end of each unacknowledged segment and its latest send time.
    outstanding: BTreeMap<i64, f64>,
}

impl SenderState {
    fn rel(&mut self, seq: u32) -> i64 {
        let isn = *self.isn.get_or_insert(seq);
        seq.wrapping_sub(isn) as i64
    }
}

fn seq_len(p: &PacketRecord) -> i64 {
    p.tcp_payload_len as i64
        + i64::from(p.tcp_flags.contains(TcpFlags::SYN))
        + i64::from(p.tcp_flags.contains(TcpFlags::FIN))
}

/// Extract one row per non-handshake packet of `flow`.
pub fn extract_features(flow: &FlowTrace) -> Vec<FeatureVector> {
    let skip = handshake_end(flow);
    let label = label_name(flow.label);
    let mut state = [SenderState::default(), SenderState::default()];
    let mut rows = Vec::with_capacity(flow.packets.len().saturating_sub(skip));
    let mut first_ts = None;
    let mut prev_ts = 0.0;
    let mut cum = [0u64; 2];

    for (i, p) in flow.packets.iter().enumerate() {
        let d = p.direction.as_index();
        let o = p.direction.reverse().as_index();

        // Acknowledgement of the peer's data.
        let mut ack_rtt = 0.0;
        if p.tcp_flags.contains(TcpFlags::ACK) && state[o].isn.is_some() {
            let ack = state[o].rel(p.ack);
            if ack > state[o].acked {
                state[o].acked = ack;
                let covered: Vec<i64> = state[o].outstanding.range(..=ack).map(|(&k, _)| k).collect();
                if let Some(&newest) = covered.last() {
                    ack_rtt = p.timestamp - state[o].outstanding[&newest];
                }
                for k in covered {
                    state[o].outstanding.remove(&k);
                }
            }
        }

        // This packet's own data.
        let rel = state[d].rel(p.seq);
        let len = seq_len(p);
        let end = rel + len;
        if len > 0 {
            state[d].sent_end = state[d].sent_end.max(end);
            state[d].outstanding.insert(end, p.timestamp);
        }
        let in_flight = (state[d].sent_end - state[d].acked).max(0);
        state[d].push_acc += p.tcp_payload_len as u64;
        let push_bytes = state[d].push_acc;
        if p.tcp_flags.contains(TcpFlags::PSH) {
            state[d].push_acc = 0;
        }

        if i < skip {
            continue;
        }
        let t0 = *first_ts.get_or_insert(p.timestamp);
        let inter_arrival = if rows.is_empty() { 0.0 } else { p.timestamp - prev_ts };
        prev_ts = p.timestamp;
        cum[d] += p.tcp_payload_len as u64;

        rows.push(FeatureVector {
            values: [
                p.timestamp - t0,
                inter_arrival,
                d as f64,
                p.frame_len as f64,
                p.frame_cap_len as f64,
                p.ip_len as f64,
                p.ip_hdr_len as f64,
                p.tcp_payload_len as f64,
                p.tcp_hdr_len as f64,
                p.window_size as f64,
                in_flight as f64,
                push_bytes as f64,
                ack_rtt,
                p.tls_record_len as f64,
                p.tls_record_count as f64,
                cum[d] as f64,
            ],
            label: label.clone(),
            flow_id: flow.flow_id.clone(),
        });
    }
    rows
}

/// Concatenate the rows of every flow, in input order.
pub fn build_matrix(flows: &[FlowTrace]) -> FeatureMatrix {
    let class_names = canonical_class_order(flows.iter().map(|f| f.label.map_or(UNKNOWN, |c| c.name())));
    let mut m = FeatureMatrix::empty(class_names);
    for flow in flows {
        for row in extract_features(flow) {
            m.push(&row.values, &row.label, &row.flow_id);
        }
    }
    m
}

impl FeatureMatrix {
    /// Zero rows over the full schema.
    pub fn empty(class_names: Vec<String>) -> Self {
        Self::with_columns(COLUMNS.iter().map(|c| c.to_string()).collect(), class_names)
    }

    pub fn with_columns(column_names: Vec<String>, class_names: Vec<String>) -> Self {
        FeatureMatrix { column_names, class_names, data: Vec::new(), labels: Vec::new(), flow_ids: Vec::new() }
    }

    /// Append a row; an unseen label extends the vocabulary.
    pub fn push(&mut self, values: &[f64], label: &str, flow_id: &str) {
        assert_eq!(values.len(), self.n_cols(), "row width");
        let idx = match self.class_names.iter().position(|c| c == label) {
            Some(i) => i,
            None => {
                self.class_names.push(label.to_string());
                self.class_names.len() - 1
            }
        };
        self.data.extend_from_slice(values);
        self.labels.push(idx);
        self.flow_ids.push(flow_id.to_string());
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.n_cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.data[i * self.n_cols() + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        let n = self.n_cols();
        for (i, v) in values.iter().enumerate() {
            self.data[i * n + j] = *v;
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Class index of each row, into `class_names`.
    pub fn label_indices(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.class_names[self.labels[i]]
    }

    pub fn flow_id(&self, i: usize) -> &str {
        &self.flow_ids[i]
    }

    pub fn flow_ids(&self) -> &[String] {
        &self.flow_ids
    }

    pub fn flow_ids_mut(&mut self) -> &mut [String] {
        &mut self.flow_ids
    }

    /// Row indices of each flow, in first-appearance order.
    pub fn flow_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, f) in self.flow_ids.iter().enumerate() {
            let slot = *index.entry(f).or_insert_with(|| {
                order.push((f.clone(), Vec::new()));
                order.len() - 1
            });
            order[slot].1.push(i);
        }
        order
    }

    /// Rows in `indices` order, same schema and vocabulary.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut m = FeatureMatrix::with_columns(self.column_names.clone(), self.class_names.clone());
        for &i in indices {
            m.data.extend_from_slice(self.row(i));
            m.labels.push(self.labels[i]);
            m.flow_ids.push(self.flow_ids[i].clone());
        }
        m
    }

    /// Keep only the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<FeatureMatrix, FeatureError> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| FeatureError::UnknownColumn(n.clone())))
            .collect::<Result<_, _>>()?;
        let mut m = FeatureMatrix::with_columns(names.to_vec(), self.class_names.clone());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            m.data.extend(idx.iter().map(|&j| row[j]));
        }
        m.labels = self.labels.clone();
        m.flow_ids = self.flow_ids.clone();
        Ok(m)
    }

    /// Replace the vocabulary; `map[i]` is the new label of old class `i`.
    pub fn relabel(&self, class_names: Vec<String>, map: &[usize]) -> FeatureMatrix {
        let mut m = self.clone();
        m.class_names = class_names;
        for l in &mut m.labels {
            *l = map[*l];
        }
        m
    }

    /// Append rows of a matrix with the same columns; vocabularies are merged.
    pub fn extend(&mut self, other: &FeatureMatrix) {
        assert_eq!(self.column_names, other.column_names, "schemas differ");
        for i in 0..other.n_rows() {
            self.push(other.row(i), other.label(i), other.flow_id(i));
        }
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<&str> = self.column_names.iter().map(String::as_str).collect();
        header.extend(["label", "flow_id"]);
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.label(i).to_string());
            rec.push(self.flow_id(i).to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Read a matrix written by [`write_csv`](Self::write_csv). The header must
    /// end in `label,flow_id`; the vocabulary is put in canonical order.
    pub fn read_csv<R: Read>(source: R) -> Result<FeatureMatrix, FeatureError> {
        let mut r = csv::Reader::from_reader(source);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let n = header.len();
        if n < 3 || header[n - 2] != "label" || header[n - 1] != "flow_id" {
            let mut expected: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
            expected.extend(["label".to_string(), "flow_id".to_string()]);
            return Err(FeatureError::Header { expected, found: header });
        }
        let columns = header[..n - 2].to_vec();
        let mut m = FeatureMatrix::with_columns(columns, Vec::new());
        let mut values = vec![0.0; n - 2];
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            for (j, v) in values.iter_mut().enumerate() {
                *v = rec[j]
                    .parse()
                    .map_err(|e| FeatureError::Row { row: row + 1, message: format!("column {}: {e}", header[j]) })?;
            }
            m.push(&values, &rec[n - 2], &rec[n - 1]);
        }
        let order = canonical_class_order(m.class_names.iter().map(String::as_str));
        let map: Vec<usize> =
            m.class_names.iter().map(|c| order.iter().position(|o| o == c).expect("same set")).collect();
        Ok(m.relabel(order, &map))
    }
}

/// Row indices of the non-handshake packets, for callers that need to line
/// packets up with extracted rows.
pub fn data_packet_range(flow: &FlowTrace) -> std::ops::Range<usize> {
    handshake_end(flow)..flow.packets.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::{emulate_session, LinkParams, MovementProgram, RobotProfile, TlsChannelModel};
    use crate::trace::Direction;

    fn pkt(ts: f64, dir: Direction, payload: u32, seq: u32, ack: u32) -> PacketRecord {
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
            seq,
            ack,
            window_size: 65535,
            tls_record_len: payload,
            tls_record_count: u32::from(payload > 0),
            is_retransmission: false,
        }
    }

    fn col(name: &str) -> usize {
        COLUMNS.iter().position(|c| *c == name).unwrap()
    }

    #[test]
    fn two_packet_flow() {
        let flow = FlowTrace {
            flow_id: "f".into(),
            label: Some(MovementClass::X),
            packets: vec![
                pkt(0.0, Direction::ControllerToRobot, 40, 1000, 5000),
                pkt(0.08, Direction::RobotToController, 30, 5000, 1040),
            ],
            meta: None,
        };
        let rows = extract_features(&flow);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].values[col("bytes_in_flight")], 40.0);
        assert_eq!(rows[0].values[col("inter_arrival_s")], 0.0);
        assert_eq!(rows[0].values[col("cum_bytes_same_dir")], 40.0);
        assert_eq!(rows[0].values[col("ack_rtt_s")], 0.0);
        assert!((rows[1].values[col("ack_rtt_s")] - 0.08).abs() < 1e-12);
        assert_eq!(rows[1].values[col("direction")], 1.0);
        assert_eq!(rows[1].label, "X");
    }

    #[test]
    fn push_bytes_accumulate_until_psh() {
        let mut a = pkt(0.0, Direction::ControllerToRobot, 100, 0, 0);
        a.tcp_flags = TcpFlags::ACK;
        let b = pkt(0.01, Direction::ControllerToRobot, 50, 100, 0);
        let c = pkt(0.02, Direction::ControllerToRobot, 7, 150, 0);
        let flow = FlowTrace { flow_id: "p".into(), label: None, packets: vec![a, b, c], meta: None };
        let rows = extract_features(&flow);
        let push: Vec<f64> = rows.iter().map(|r| r.values[col("push_bytes_sent")]).collect();
        assert_eq!(push, [100.0, 150.0, 7.0]);
        assert_eq!(rows[0].label, UNKNOWN);
    }

    #[test]
    fn handshake_only_flow_is_empty() {
        let tls = TlsChannelModel::default();
        let mut flow = emulate_session(
            &MovementProgram::new(MovementClass::Z, 1.0, 25_000, 1),
            &LinkParams::default(),
            &tls,
            &RobotProfile::default(),
        )
        .unwrap();
        flow.packets.truncate(12);
        assert!(extract_features(&flow).is_empty());
        // Without metadata the set-up burst is found through its trailing gap.
        let mut captured = emulate_session(
            &MovementProgram::new(MovementClass::Z, 1.0, 25_000, 2),
            &LinkParams::default(),
            &tls,
            &RobotProfile::default(),
        )
        .unwrap();
        let with_meta = extract_features(&captured);
        captured.meta = None;
        assert_eq!(extract_features(&captured), with_meta);
    }

    #[test]
    fn lossless_rtt_matches_closed_form() {
        let tls = TlsChannelModel::default();
        let robot = RobotProfile::ideal();
        let link = LinkParams::default();
        let program = MovementProgram::new(MovementClass::X, 1.0, 25_000, 4);
        let flow = emulate_session(&program, &link, &tls, &robot).unwrap();
        let rows = extract_features(&flow);
        for r in rows.iter().filter(|r| r.values[col("direction")] == 1.0) {
            let expected = 0.08
                + link.transmission_s(r.values[col("frame_len")] as u32)
                + link.transmission_s(66 + tls.record_len("G0 X151.0 Y0.0 Z90.0 F25000\n".len()));
            assert!((r.values[col("ack_rtt_s")] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn matrix_counts_and_csv_round_trip() {
        let tls = TlsChannelModel::default();
        let flows: Vec<FlowTrace> = [MovementClass::X, MovementClass::Y, MovementClass::XYZ]
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let mut f = emulate_session(
                    &MovementProgram::new(m, 1.0, 25_000, 2),
                    &LinkParams { seed: i as u64, ..Default::default() },
                    &tls,
                    &RobotProfile::default(),
                )
                .unwrap();
                f.flow_id = format!("f{i}");
                f
            })
            .collect();
        let m = build_matrix(&flows);
        assert_eq!(m.n_rows(), 12);
        assert_eq!(m.class_names, ["X", "Y", "XYZ"]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("packet_time_s,inter_arrival_s,direction,frame_len,"));
        assert!(text.lines().next().unwrap().ends_with("cum_bytes_same_dir,label,flow_id"));
        assert_eq!(FeatureMatrix::read_csv(&buf[..]).unwrap(), m);

        let empty = build_matrix(&[]);
        assert_eq!(empty.n_rows(), 0);
        assert_eq!(empty.n_cols(), 16);
    }

    #[test]
    fn inter_arrivals_sum_to_span() {
        let tls = TlsChannelModel::default();
        let flow = emulate_session(
            &MovementProgram::new(MovementClass::YZ, 5.0, 50_000, 6),
            &LinkParams { loss_pct: 25.0, seed: 9, ..Default::default() },
            &tls,
            &RobotProfile::default(),
        )
        .unwrap();
        let rows = extract_features(&flow);
        let sum: f64 = rows.iter().map(|r| r.values[col("inter_arrival_s")]).sum();
        let span = rows.last().unwrap().values[0] - rows[0].values[0];
        assert!((sum - span).abs() < 1e-9);
    }

    #[test]
    fn vocabulary_order() {
        assert_eq!(canonical_class_order(["Unknown", "XYZ", "X", "Y", "X"]), ["X", "Y", "XYZ", "Unknown"]);
    }
}
