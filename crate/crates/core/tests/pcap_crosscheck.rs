use etherparse::{NetSlice, PacketBuilder, SlicedPacket, TransportSlice};
use pcap_parser::pcap::{parse_pcap_frame, parse_pcap_frame_be, parse_pcap_header, LegacyPcapBlock};
use teleop_core::emulator::{
    emulate_session, LinkParams, MovementClass, MovementProgram, RobotProfile, TlsChannelModel,
};
use teleop_core::pcap::{parse_pcap, write_pcap, ByteOrder, ParseOptions, WriteOptions};
use teleop_core::trace::{Direction, PacketRecord, TcpFlags};

fn lossy_flow() -> Vec<PacketRecord> {
    let program = MovementProgram::new(MovementClass::YZ, 10.0, 50_000, 30);
    let link = LinkParams { loss_pct: 25.0, delay_ms: 10.0, seed: 8, ..LinkParams::default() };
    emulate_session(&program, &link, &TlsChannelModel::default(), &RobotProfile::default()).unwrap().packets
}

fn udp_frame(i: u8) -> Vec<u8> {
    let payload = [i; 24];
    let b = PacketBuilder::ethernet2([2, 0, 0, 0, 0, 9], [2, 0, 0, 0, 0, 8])
        .ipv4([10, 0, 0, 9], [10, 0, 0, 8], 64)
        .udp(5353, 5353);
    let mut out = Vec::with_capacity(b.size(payload.len()));
    b.write(&mut out, &payload).unwrap();
    out
}

fn append_record(file: &mut Vec<u8>, order: ByteOrder, ts: (u32, u32), frame: &[u8]) {
    let put = |v: u32| match order {
        ByteOrder::Little => v.to_le_bytes(),
        ByteOrder::Big => v.to_be_bytes(),
    };
    for v in [ts.0, ts.1, frame.len() as u32, frame.len() as u32] {
        file.extend_from_slice(&put(v));
    }
    file.extend_from_slice(frame);
}

/// Frames as read by pcap-parser, in either byte order.
fn reference_blocks(file: &[u8]) -> Vec<LegacyPcapBlock<'_>> {
    let (mut rest, header) = parse_pcap_header(file).unwrap();
    let frame = if header.is_bigendian() { parse_pcap_frame_be } else { parse_pcap_frame };
    let mut blocks = Vec::new();
    while !rest.is_empty() {
        let (r, b) = frame(rest).unwrap();
        blocks.push(b);
        rest = r;
    }
    blocks
}

#[test]
fn ten_tcp_and_three_udp_frames() {
    for order in [ByteOrder::Little, ByteOrder::Big] {
        let records: Vec<PacketRecord> = lossy_flow().into_iter().take(10).collect();
        let opts = WriteOptions { byte_order: order, ..WriteOptions::default() };
        let mut file = Vec::new();
        write_pcap(&records, &opts, &mut file).unwrap();
        for i in 0..3 {
            append_record(&mut file, order, (100 + i as u32, 0), &udp_frame(i));
        }

        let cap = parse_pcap(&file, &ParseOptions::default()).unwrap();
        assert_eq!(cap.byte_order, order);
        assert_eq!(cap.records.len(), 10);
        assert_eq!(cap.skipped_non_tcp, 3);
        assert_eq!(cap.skipped(), 3);

        // Independent reading of the same bytes.
        let blocks = reference_blocks(&file);
        assert_eq!(blocks.len(), 13);
        let mut tcp = 0;
        for block in &blocks {
            let sliced = SlicedPacket::from_ethernet(block.data).unwrap();
            let (Some(NetSlice::Ipv4(ip)), Some(TransportSlice::Tcp(t))) = (&sliced.net, &sliced.transport) else {
                continue;
            };
            let ours = &cap.records[tcp];
            let orig = &records[tcp];
            tcp += 1;
            let ts = block.ts_sec as f64 + block.ts_usec as f64 * 1e-6;
            assert!((ours.timestamp - ts).abs() < 1e-9);
            assert!((ours.timestamp - orig.timestamp).abs() <= 0.5e-6 + 1e-9);
            assert_eq!(ours.frame_len, block.origlen);
            assert_eq!(ours.frame_cap_len, block.caplen);
            assert_eq!(ours.ip_len, u32::from(ip.header().total_len()));
            assert_eq!(ours.ip_hdr_len, u32::from(ip.header().ihl()) * 4);
            assert_eq!(ours.tcp_hdr_len, u32::from(t.data_offset()) * 4);
            assert_eq!(ours.tcp_payload_len as usize, t.payload().len());
            assert_eq!(ours.seq, t.sequence_number());
            assert_eq!(ours.ack, t.acknowledgment_number());
            assert_eq!(ours.window_size, u32::from(t.window_size()));
            assert_eq!(ours.tcp_flags.contains(TcpFlags::SYN), t.syn());
            assert_eq!(ours.tcp_flags.contains(TcpFlags::PSH), t.psh());
            let from_controller = ip.header().source_addr() == opts.controller.0;
            assert_eq!(ours.direction == Direction::ControllerToRobot, from_controller);
            // Everything the writer encoded comes back unchanged.
            assert_eq!(
                (ours.direction, ours.tcp_flags, ours.tls_record_len, ours.tls_record_count),
                (orig.direction, orig.tcp_flags, orig.tls_record_len, orig.tls_record_count)
            );
        }
        assert_eq!(tcp, 10);
    }
}

#[test]
fn full_lossy_session_round_trips() {
    let records = lossy_flow();
    assert!(records.iter().any(|r| r.is_retransmission));
    let mut file = Vec::new();
    write_pcap(&records, &WriteOptions::default(), &mut file).unwrap();
    let cap = parse_pcap(&file, &ParseOptions::default()).unwrap();
    assert_eq!(cap.records.len(), records.len());
    for (a, b) in cap.records.iter().zip(&records) {
        assert_eq!((a.direction, a.seq, a.ack, a.tcp_payload_len), (b.direction, b.seq, b.ack, b.tcp_payload_len));
        assert_eq!((a.tls_record_len, a.tls_record_count), (b.tls_record_len, b.tls_record_count));
        // Command retries are repeated sequence ranges on the wire. Reply
        // retries are only seen once, so they look like first copies.
        if b.direction == Direction::ControllerToRobot {
            assert_eq!(a.is_retransmission, b.is_retransmission);
        }
    }
}

#[test]
fn snap_length_truncation_is_counted() {
    let records: Vec<PacketRecord> = lossy_flow().into_iter().take(12).collect();
    let opts = WriteOptions { snap_len: 40, ..WriteOptions::default() };
    let mut file = Vec::new();
    write_pcap(&records, &opts, &mut file).unwrap();
    let cap = parse_pcap(&file, &ParseOptions::default()).unwrap();
    assert_eq!(cap.records.len(), 0);
    assert_eq!(cap.skipped_truncated, 12);

    // A file cut mid-record loses only the last frame.
    let mut file = Vec::new();
    write_pcap(&records, &WriteOptions::default(), &mut file).unwrap();
    file.truncate(file.len() - 3);
    let cap = parse_pcap(&file, &ParseOptions::default()).unwrap();
    assert_eq!(cap.records.len(), 11);
    assert_eq!(cap.skipped_truncated, 1);
}
