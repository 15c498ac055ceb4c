use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use mrbsp_core::transport::{
    start_network, wire, Envelope, TcpTransport, Transport, TransportConfig, TransportError,
};
use mrbsp_core::{NodeId, TransportKind};

const T: Duration = Duration::from_secs(5);

fn both_kinds(max_chunk: usize, n: usize) -> Vec<(TransportKind, Vec<Arc<dyn Transport>>)> {
    let cfg = TransportConfig::default().with_max_chunk_bytes(max_chunk);
    [TransportKind::InProcess, TransportKind::Tcp]
        .into_iter()
        .map(|k| (k, start_network(k, n, &cfg).unwrap()))
        .collect()
}

#[test]
fn small_payload_is_one_chunk() {
    for (kind, net) in both_kinds(60_000, 2) {
        let r = net[0].send(NodeId(1), 5, None, b"0123456789").unwrap();
        assert_eq!(r.chunks, 1, "{kind}");
        let m = net[1].recv(5, T).unwrap();
        assert_eq!(m.payload, b"0123456789");
        assert_eq!(m.src, NodeId(0));
    }
}

#[test]
fn large_payload_is_chunked_and_reassembled() {
    let payload: Vec<u8> = (0..150_000u32).map(|i| (i * 31 % 251) as u8).collect();
    for (kind, net) in both_kinds(60_000, 2) {
        let r = net[0].send(NodeId(1), 3, Some(4), &payload).unwrap();
        assert_eq!(r.chunks, 3, "{kind}");
        let m = net[1].recv(3, T).unwrap();
        assert_eq!(m.payload, payload, "{kind}");
        assert_eq!(m.phase, Some(4));
    }
}

#[test]
fn per_pair_fifo_and_channel_separation() {
    for (kind, net) in both_kinds(8, 2) {
        for i in 0u32..200 {
            net[0].send(NodeId(1), 1, None, &i.to_be_bytes().repeat(i as usize % 5 + 1)).unwrap();
            net[0].send(NodeId(1), 2, None, &[i as u8]).unwrap();
        }
        for i in 0u32..200 {
            let m = net[1].recv(1, T).unwrap();
            assert_eq!(&m.payload[..4], &i.to_be_bytes(), "{kind}");
            assert_eq!(m.seq, i as u64);
        }
        for i in 0u32..200 {
            assert_eq!(net[1].recv(2, T).unwrap().payload, vec![i as u8]);
        }
    }
}

#[test]
fn concurrent_sources_reassemble() {
    for (kind, net) in both_kinds(16, 3) {
        let a: Vec<u8> = vec![0xAA; 1000];
        let b: Vec<u8> = vec![0xBB; 777];
        let (na, nb) = (Arc::clone(&net[0]), Arc::clone(&net[1]));
        let (pa, pb) = (a.clone(), b.clone());
        let ta = thread::spawn(move || na.send(NodeId(2), 9, None, &pa).unwrap());
        let tb = thread::spawn(move || nb.send(NodeId(2), 9, None, &pb).unwrap());
        ta.join().unwrap();
        tb.join().unwrap();
        let mut got = vec![net[2].recv(9, T).unwrap(), net[2].recv(9, T).unwrap()];
        got.sort_by_key(|m| m.src);
        assert_eq!(got[0].payload, a, "{kind}");
        assert_eq!(got[1].payload, b, "{kind}");
    }
}

#[test]
fn recv_times_out_when_idle() {
    for (_, net) in both_kinds(16, 1) {
        assert_eq!(
            net[0].recv(1, Duration::from_millis(100)),
            Err(TransportError::Timeout)
        );
    }
}

#[test]
fn unknown_destination_is_an_address_error() {
    for (_, net) in both_kinds(16, 2) {
        assert_eq!(
            net[0].send(NodeId(7), 1, None, b"x"),
            Err(TransportError::Address(NodeId(7)))
        );
    }
}

#[test]
fn shutdown_closes_receivers() {
    for (_, net) in both_kinds(16, 2) {
        net[1].shutdown();
        assert_eq!(net[1].recv(1, T), Err(TransportError::Closed));
        assert_eq!(net[1].send(NodeId(0), 1, None, b"x"), Err(TransportError::Closed));
    }
}

#[test]
fn self_send_works() {
    for (_, net) in both_kinds(4, 2) {
        net[1].send(NodeId(1), 1, None, b"hello world").unwrap();
        assert_eq!(net[1].recv(1, T).unwrap().payload, b"hello world");
    }
}

#[test]
fn corrupt_tcp_frame_fails_the_link() {
    let net = TcpTransport::network(2, &TransportConfig::default()).unwrap();
    let mut raw = TcpStream::connect(net[1].local_addr()).unwrap();
    let mut bad = wire::encode(&Envelope {
        src: NodeId(0),
        dst: NodeId(1),
        channel: 1,
        phase: None,
        seq: 0,
        chunk_index: 0,
        chunk_total: 1,
        payload: vec![1, 2, 3],
    });
    bad[14] = 7; // phase flag must be 0 or 1
    raw.write_all(&bad).unwrap();
    raw.flush().unwrap();
    let err = loop {
        match net[1].recv(1, Duration::from_millis(200)) {
            Err(TransportError::Timeout) => continue,
            other => break other,
        }
    };
    assert!(matches!(err, Err(TransportError::Protocol(_))), "{err:?}");
    assert!(net[1].failure().is_some());
}

#[test]
fn peer_dropping_mid_frame_is_a_link_failure() {
    let net = TcpTransport::network(2, &TransportConfig::default()).unwrap();
    {
        let mut raw = TcpStream::connect(net[1].local_addr()).unwrap();
        raw.write_all(&[0, 0, 0, 100, 1, 2]).unwrap();
    }
    let err = loop {
        match net[1].recv(1, Duration::from_millis(200)) {
            Err(TransportError::Timeout) => continue,
            other => break other,
        }
    };
    assert!(matches!(err, Err(TransportError::Link(_))), "{err:?}");
}
