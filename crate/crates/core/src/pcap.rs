//! Classic pcap ingestion (Ethernet II, IPv4, TCP) and a matching writer.
//!
//! Direction is decided per TCP connection: the endpoint that sent the first
//! bare SYN is the controller. Without a SYN the source of the connection's
//! first frame is taken, unless the caller names the controller address.

use std::collections::HashMap;
use std::io::Write;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::trace::{Direction, PacketRecord, TcpFlags};

const MAGIC_LE: [u8; 4] = [0xd4, 0xc3, 0xb2, 0xa1];
const MAGIC_BE: [u8; 4] = [0xa1, 0xb2, 0xc3, 0xd4];
const PCAPNG_MAGIC: [u8; 4] = [0x0a, 0x0d, 0x0d, 0x0a];
const GLOBAL_HDR: usize = 24;
const RECORD_HDR: usize = 16;
pub const LINKTYPE_ETHERNET: u32 = 1;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;
const TLS_HDR: usize = 5;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("pcapng captures are unsupported; convert to classic pcap first")]
    Pcapng,
    #[error("unsupported capture format (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("capture is shorter than the 24-byte global header")]
    ShortHeader,
    #[error("unsupported link type {0}; only Ethernet (1) is read")]
    LinkType(u32),
    #[error("cannot write packet {index}: {message}")]
    Encode { index: usize, message: String },
    #[error("i/o error while writing capture: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Address of the controller; overrides the SYN rule when set.
    pub controller: Option<Ipv4Addr>,
}

#[derive(Debug, Clone)]
pub struct Capture {
    pub byte_order: ByteOrder,
    pub snap_len: u32,
    pub records: Vec<PacketRecord>,
    /// Frames that are not TCP over IPv4 on Ethernet.
    pub skipped_non_tcp: usize,
    /// Frames cut short by the file end or by the snap length before the
    /// TCP header, or whose length fields are inconsistent.
    pub skipped_truncated: usize,
}

impl Capture {
    pub fn skipped(&self) -> usize {
        self.skipped_non_tcp + self.skipped_truncated
    }
}

struct Reader {
    order: ByteOrder,
}

impl Reader {
    fn u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self.order {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

type Endpoint = (Ipv4Addr, u16);

/// Connection key with the endpoints in a fixed order.
fn conn_key(a: Endpoint, b: Endpoint) -> (Endpoint, Endpoint) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

struct Decoded {
    src: Endpoint,
    dst: Endpoint,
    record: PacketRecord,
}

enum Frame {
    Tcp(Box<Decoded>),
    NotTcp,
    Truncated,
}

/// Sum of the TLS records whose 5-byte headers start inside `payload`,
/// counting each header. Zero unless the payload opens with a record header.
pub fn tls_records(payload: &[u8]) -> (u32, u32) {
    let mut off = 0;
    let (mut len, mut count) = (0u32, 0u32);
    while off + TLS_HDR <= payload.len() {
        let h = &payload[off..off + TLS_HDR];
        let valid = (20..=23).contains(&h[0]) && h[1] == 3 && (1..=3).contains(&h[2]);
        if !valid {
            break;
        }
        let body = be16(&h[3..5]) as usize;
        len += (body + TLS_HDR) as u32;
        count += 1;
        off += TLS_HDR + body;
    }
    (len, count)
}

fn decode_frame(data: &[u8], orig_len: u32, ts: f64) -> Frame {
    if data.len() < 14 {
        return Frame::Truncated;
    }
    let mut l2 = 14;
    let mut ethertype = be16(&data[12..14]);
    if ethertype == ETHERTYPE_VLAN {
        if data.len() < 18 {
            return Frame::Truncated;
        }
        ethertype = be16(&data[16..18]);
        l2 = 18;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return Frame::NotTcp;
    }
    let ip = &data[l2..];
    if ip.len() < 20 {
        return Frame::Truncated;
    }
    if ip[0] >> 4 != 4 {
        return Frame::NotTcp;
    }
    let ip_hdr_len = ((ip[0] & 0x0f) as usize) * 4;
    let ip_len = be16(&ip[2..4]) as usize;
    if ip[9] != IPPROTO_TCP {
        return Frame::NotTcp;
    }
    if ip_hdr_len < 20 || ip.len() < ip_hdr_len + 20 || ip_len < ip_hdr_len + 20 {
        return Frame::Truncated;
    }
    let tcp = &ip[ip_hdr_len..];
    let tcp_hdr_len = ((tcp[12] >> 4) as usize) * 4;
    if tcp_hdr_len < 20 || ip_len < ip_hdr_len + tcp_hdr_len || (l2 + ip_len) as u32 > orig_len {
        return Frame::Truncated;
    }
    let payload_len = ip_len - ip_hdr_len - tcp_hdr_len;
    let payload_start = (ip_hdr_len + tcp_hdr_len).min(ip.len());
    let payload_end = (ip_hdr_len + tcp_hdr_len + payload_len).min(ip.len());
    let (tls_len, tls_count) = tls_records(&ip[payload_start..payload_end]);

    let src = (Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]), be16(&tcp[0..2]));
    let dst = (Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]), be16(&tcp[2..4]));
    let record = PacketRecord {
        timestamp: ts,
        direction: Direction::ControllerToRobot,
        frame_len: orig_len,
        frame_cap_len: data.len() as u32,
        ip_len: ip_len as u32,
        ip_hdr_len: ip_hdr_len as u32,
        tcp_payload_len: payload_len as u32,
        tcp_hdr_len: tcp_hdr_len as u32,
        tcp_flags: TcpFlags::from_bits_truncate(tcp[13]),
        seq: be32(&tcp[4..8]),
        ack: be32(&tcp[8..12]),
        window_size: be16(&tcp[14..16]) as u32,
        tls_record_len: tls_len,
        tls_record_count: tls_count,
        is_retransmission: false,
    };
    Frame::Tcp(Box::new(Decoded { src, dst, record }))
}

/// Per-connection state: who the controller is and the highest sequence end
/// seen in each direction.
struct ConnState {
    controller: Endpoint,
    max_end: [Option<u32>; 2],
}

/// `a` is after `b` in 32-bit sequence space.
fn seq_after(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) > 0
}

/// Parse a classic pcap byte image.
pub fn parse_pcap(bytes: &[u8], opts: &ParseOptions) -> Result<Capture, PcapError> {
    if bytes.len() >= 4 && bytes[..4] == PCAPNG_MAGIC {
        return Err(PcapError::Pcapng);
    }
    if bytes.len() < 4 {
        return Err(PcapError::ShortHeader);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let order = match magic {
        MAGIC_LE => ByteOrder::Little,
        MAGIC_BE => ByteOrder::Big,
        _ => return Err(PcapError::BadMagic(magic)),
    };
    if bytes.len() < GLOBAL_HDR {
        return Err(PcapError::ShortHeader);
    }
    let rd = Reader { order };
    let snap_len = rd.u32(&bytes[16..20]);
    let link = rd.u32(&bytes[20..24]);
    if link != LINKTYPE_ETHERNET {
        return Err(PcapError::LinkType(link));
    }

    let mut cap =
        Capture { byte_order: order, snap_len, records: Vec::new(), skipped_non_tcp: 0, skipped_truncated: 0 };
    let mut conns: HashMap<(Endpoint, Endpoint), ConnState> = HashMap::new();
    let mut off = GLOBAL_HDR;
    while off < bytes.len() {
        if off + RECORD_HDR > bytes.len() {
            cap.skipped_truncated += 1;
            break;
        }
        let h = &bytes[off..off + RECORD_HDR];
        let ts = rd.u32(&h[0..4]) as f64 + rd.u32(&h[4..8]) as f64 * 1e-6;
        let incl = rd.u32(&h[8..12]) as usize;
        let orig = rd.u32(&h[12..16]);
        off += RECORD_HDR;
        if off + incl > bytes.len() {
            cap.skipped_truncated += 1;
            break;
        }
        let data = &bytes[off..off + incl];
        off += incl;
        if (incl as u32) > orig {
            cap.skipped_truncated += 1;
            continue;
        }
        let d = match decode_frame(data, orig, ts) {
            Frame::Tcp(d) => d,
            Frame::NotTcp => {
                cap.skipped_non_tcp += 1;
                continue;
            }
            Frame::Truncated => {
                cap.skipped_truncated += 1;
                continue;
            }
        };
        let Decoded { src, dst, mut record } = *d;
        let bare_syn = record.tcp_flags.contains(TcpFlags::SYN) && !record.tcp_flags.contains(TcpFlags::ACK);
        let state = conns.entry(conn_key(src, dst)).or_insert_with(|| ConnState {
            controller: match opts.controller {
                Some(ip) if dst.0 == ip => dst,
                Some(_) => src,
                None if bare_syn => src,
                None if record.tcp_flags.contains(TcpFlags::SYN) => dst,
                None => src,
            },
            max_end: [None, None],
        });
        record.direction =
            if src == state.controller { Direction::ControllerToRobot } else { Direction::RobotToController };
        if record.tcp_payload_len > 0 {
            let end = record.seq.wrapping_add(record.tcp_payload_len);
            let slot = &mut state.max_end[record.direction.as_index()];
            match *slot {
                Some(max) if !seq_after(end, max) => record.is_retransmission = true,
                _ => *slot = Some(end),
            }
        }
        cap.records.push(record);
    }
    Ok(cap)
}

/// Addresses used when rendering records as frames.
#[derive(Debug, Clone, Copy)]
pub struct WriteOptions {
    pub controller: Endpoint,
    pub robot: Endpoint,
    pub snap_len: u32,
    pub byte_order: ByteOrder,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            controller: (Ipv4Addr::new(10, 0, 0, 1), 50000),
            robot: (Ipv4Addr::new(10, 0, 0, 2), 8883),
            snap_len: 65535,
            byte_order: ByteOrder::Little,
        }
    }
}

fn ip_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr.chunks(2).map(|c| u32::from(be16(c))).sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Payload bytes whose TLS headers reproduce `tls_record_len` and
/// `tls_record_count`: equal-sized application-data records, the remainder
/// going to the first one. Record bodies are zero-filled.
fn synth_payload(r: &PacketRecord) -> Option<Vec<u8>> {
    let mut payload = vec![0u8; r.tcp_payload_len as usize];
    if r.tls_record_count == 0 {
        if payload.len() >= TLS_HDR {
            // Keep arbitrary bytes from looking like a record header.
            payload[0] = 0xff;
        }
        return Some(payload);
    }
    let n = r.tls_record_count as usize;
    let bodies = (r.tls_record_len as usize).checked_sub(n * TLS_HDR)?;
    let mut off = 0;
    for i in 0..n {
        let body = bodies / n + if i == 0 { bodies % n } else { 0 };
        if off + TLS_HDR > payload.len() || body > u16::MAX as usize {
            return None;
        }
        payload[off] = 23;
        payload[off + 1] = 3;
        payload[off + 2] = 3;
        payload[off + 3..off + 5].copy_from_slice(&(body as u16).to_be_bytes());
        off += TLS_HDR + body;
    }
    // A trailing gap must not parse as one more record.
    if off + TLS_HDR <= payload.len() {
        payload[off] = 0xff;
    }
    Some(payload)
}

fn encode_frame(r: &PacketRecord, opts: &WriteOptions) -> Result<Vec<u8>, String> {
    r.check()?;
    if !r.ip_hdr_len.is_multiple_of(4) || !r.tcp_hdr_len.is_multiple_of(4) || r.ip_hdr_len > 60 || r.tcp_hdr_len > 60 {
        return Err("header lengths must be multiples of 4 up to 60".into());
    }
    if r.ip_len != r.ip_hdr_len + r.tcp_hdr_len + r.tcp_payload_len || r.ip_len > u16::MAX as u32 {
        return Err("ip_len must equal the header and payload sum".into());
    }
    if r.window_size > u16::MAX as u32 {
        return Err(format!("window {} does not fit 16 bits", r.window_size));
    }
    let payload = synth_payload(r).ok_or("TLS records do not fit the payload")?;
    let (src, dst) = match r.direction {
        Direction::ControllerToRobot => (opts.controller, opts.robot),
        Direction::RobotToController => (opts.robot, opts.controller),
    };
    let mut f = Vec::with_capacity(r.frame_len as usize);
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, if r.direction == Direction::ControllerToRobot { 2 } else { 1 }]);
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, if r.direction == Direction::ControllerToRobot { 1 } else { 2 }]);
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ip_start = f.len();
    f.push(0x40 | (r.ip_hdr_len / 4) as u8);
    f.push(0);
    f.extend_from_slice(&(r.ip_len as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0, 0x40, 0, 64, IPPROTO_TCP, 0, 0]);
    f.extend_from_slice(&src.0.octets());
    f.extend_from_slice(&dst.0.octets());
    f.resize(ip_start + r.ip_hdr_len as usize, 1);
    let csum = ip_checksum(&f[ip_start..]);
    f[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

    let tcp_start = f.len();
    f.extend_from_slice(&src.1.to_be_bytes());
    f.extend_from_slice(&dst.1.to_be_bytes());
    f.extend_from_slice(&r.seq.to_be_bytes());
    f.extend_from_slice(&r.ack.to_be_bytes());
    f.push(((r.tcp_hdr_len / 4) as u8) << 4);
    f.push(r.tcp_flags.bits());
    f.extend_from_slice(&(r.window_size as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0, 0, 0]);
    // Options are NOPs.
    f.resize(tcp_start + r.tcp_hdr_len as usize, 1);
    f.extend_from_slice(&payload);
    // Ethernet trailer padding up to the recorded frame length.
    f.resize(r.frame_len as usize, 0);
    Ok(f)
}

/// Render records as a classic pcap file. Records must satisfy the packet
/// invariants and fit real header fields.
pub fn write_pcap<W: Write>(records: &[PacketRecord], opts: &WriteOptions, mut sink: W) -> Result<(), PcapError> {
    let put32 = |v: u32| match opts.byte_order {
        ByteOrder::Little => v.to_le_bytes(),
        ByteOrder::Big => v.to_be_bytes(),
    };
    let put16 = |v: u16| match opts.byte_order {
        ByteOrder::Little => v.to_le_bytes(),
        ByteOrder::Big => v.to_be_bytes(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(&put32(0xa1b2_c3d4));
    out.extend_from_slice(&put16(2));
    out.extend_from_slice(&put16(4));
    out.extend_from_slice(&put32(0));
    out.extend_from_slice(&put32(0));
    out.extend_from_slice(&put32(opts.snap_len));
    out.extend_from_slice(&put32(LINKTYPE_ETHERNET));
    for (index, r) in records.iter().enumerate() {
        let frame = encode_frame(r, opts).map_err(|message| PcapError::Encode { index, message })?;
        let cap = frame.len().min(opts.snap_len as usize).min(r.frame_cap_len as usize);
        if r.timestamp < 0.0 || !r.timestamp.is_finite() {
            return Err(PcapError::Encode { index, message: "timestamp must be finite and >= 0".into() });
        }
        let mut sec = r.timestamp.floor();
        let mut usec = ((r.timestamp - sec) * 1e6).round();
        if usec >= 1e6 {
            sec += 1.0;
            usec = 0.0;
        }
        out.extend_from_slice(&put32(sec as u32));
        out.extend_from_slice(&put32(usec as u32));
        out.extend_from_slice(&put32(cap as u32));
        out.extend_from_slice(&put32(frame.len() as u32));
        out.extend_from_slice(&frame[..cap]);
    }
    sink.write_all(&out)?;
    Ok(())
}
