use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::mpsc::channel;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use amqc_core::telemetry::{
    broker_serve, defects_topic, next_packet_id, BrokerConfig, BrokerHandle, Client, ClientOptions, Conn,
    DefectRecord, Delivery, FaultInjection, Packet, QoS, TelemetryError,
};

fn fast_broker() -> BrokerHandle {
    BrokerHandle::in_process(BrokerConfig {
        retransmit: Duration::from_millis(20),
        ..BrokerConfig::default()
    })
}

fn opts(id: &str) -> ClientOptions {
    ClientOptions {
        retransmit: Duration::from_millis(20),
        max_attempts: 50,
        ..ClientOptions::new(id)
    }
}

fn collect(client: &Client, topic: &str) -> Arc<Mutex<Vec<Delivery>>> {
    let got = Arc::new(Mutex::new(Vec::new()));
    let sink = got.clone();
    client
        .subscribe(topic, QoS::AtLeastOnce, move |d| sink.lock().unwrap().push(d.clone()))
        .unwrap();
    got
}

fn wait_for(mut cond: impl FnMut() -> bool) {
    for _ in 0..1000 {
        if cond() {
            return;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    panic!("condition not reached within 10 s");
}

#[test]
fn tcp_round_trip_carries_record_bytes_unchanged() {
    let broker = broker_serve("127.0.0.1:0", BrokerConfig::default()).unwrap();
    let addr = broker.local_addr().unwrap();
    let sub = Client::connect(Conn::from(std::net::TcpStream::connect(addr).unwrap()), ClientOptions::new("sub")).unwrap();
    let got = collect(&sub, &defects_topic(3));
    let other = collect(&sub, "amqc/defects/4");
    let publ = Client::connect(Conn::from(std::net::TcpStream::connect(addr).unwrap()), ClientOptions::new("pub")).unwrap();
    let rec = DefectRecord::new(1_000_000, 12, 2, 0.875, [3, 4, 50, 60], 3).unwrap();
    let out = publ.publish_confirmed(&defects_topic(3), &rec.encode()).unwrap();
    assert_eq!(out.attempts, 1);
    wait_for(|| !got.lock().unwrap().is_empty());
    let d = got.lock().unwrap()[0].clone();
    assert_eq!(DefectRecord::decode(&d.payload).unwrap(), rec);
    assert!(!d.dup);
    assert!(other.lock().unwrap().is_empty());
    assert!(sub.ping(Duration::from_secs(2)).is_ok());
}

#[test]
fn publish_without_subscribers_is_acknowledged() {
    let broker = fast_broker();
    let c = Client::connect(broker.connect_in_process(), opts("lonely")).unwrap();
    assert_eq!(c.publish_confirmed("amqc/defects/1", b"x").unwrap().attempts, 1);
}

#[test]
fn at_least_once_and_fifo_under_puback_loss() {
    let broker = fast_broker();
    let mut sub_opts = opts("sub");
    sub_opts.faults = FaultInjection {
        drop_outgoing_puback: 0.2,
        seed: 7,
        ..FaultInjection::default()
    };
    let sub = Client::connect(broker.connect_in_process(), sub_opts).unwrap();
    let got = collect(&sub, "amqc/defects/9");

    let mut pubs = Vec::new();
    for (i, name) in ["p0", "p1"].iter().enumerate() {
        let mut o = opts(name);
        o.faults = FaultInjection {
            drop_incoming_puback: 0.2,
            seed: 11 + i as u64,
            ..FaultInjection::default()
        };
        pubs.push(Client::connect(broker.connect_in_process(), o).unwrap());
    }
    let n = 500u32;
    std::thread::scope(|s| {
        for (i, p) in pubs.iter().enumerate() {
            s.spawn(move || {
                for seq in 0..n {
                    let mut payload = vec![i as u8];
                    payload.extend_from_slice(&seq.to_be_bytes());
                    p.publish("amqc/defects/9", &payload, QoS::AtLeastOnce).unwrap();
                }
                p.flush(Duration::from_secs(30)).unwrap();
            });
        }
    });
    for p in &pubs {
        let st = p.stats();
        assert_eq!(st.acknowledged, n as u64);
        assert!(st.pubacks_dropped > 0 && st.retransmissions > 0);
    }
    wait_for(|| {
        let g = got.lock().unwrap();
        g.iter().map(|d| d.payload.clone()).collect::<HashSet<_>>().len() == 2 * n as usize
    });
    let got = got.lock().unwrap();
    let mut seen = HashSet::new();
    let mut last = [-1i64; 2];
    let mut dups = 0;
    for d in got.iter() {
        if !seen.insert(d.payload.clone()) {
            assert!(d.dup, "repeat delivery without DUP flag");
            dups += 1;
            continue;
        }
        let who = d.payload[0] as usize;
        let seq = u32::from_be_bytes(d.payload[1..5].try_into().unwrap()) as i64;
        assert!(seq > last[who], "publisher {who}: {seq} after {}", last[who]);
        last[who] = seq;
    }
    assert!(dups > 0);
    assert_eq!(broker.stats().duplicate_publishes, pubs.iter().map(|p| p.stats().retransmissions).sum::<u64>());
    assert_eq!(broker.fifo_counters()[&("amqc/defects/9".to_string(), "p0".to_string())], n as u64);
}

#[test]
fn duplicate_client_id_takes_over_session() {
    let broker = fast_broker();
    let first = Client::connect(broker.connect_in_process(), opts("node")).unwrap();
    let _second = Client::connect(broker.connect_in_process(), opts("node")).unwrap();
    wait_for(|| !first.is_connected());
    assert_eq!(broker.stats().takeovers, 1);
    assert!(matches!(
        first.publish_confirmed("t", b"x"),
        Err(TelemetryError::ConnectionLost { .. }) | Err(TelemetryError::Io(_))
    ));
}

#[test]
fn lost_connection_reports_unacknowledged_ids() {
    let broker = fast_broker();
    let mut o = opts("pub");
    o.faults.drop_incoming_puback = 1.0;
    let c = Client::connect(broker.connect_in_process(), o).unwrap();
    c.publish("t", b"a", QoS::AtLeastOnce).unwrap();
    c.publish("t", b"b", QoS::AtLeastOnce).unwrap();
    broker.shutdown();
    match c.flush(Duration::from_secs(5)) {
        Err(TelemetryError::ConnectionLost { unacked }) => assert_eq!(unacked, vec![1, 2]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn retries_stop_after_max_attempts() {
    let broker = fast_broker();
    let mut o = opts("pub");
    o.max_attempts = 3;
    o.faults.drop_incoming_puback = 1.0;
    let c = Client::connect(broker.connect_in_process(), o).unwrap();
    assert!(matches!(c.publish_confirmed("t", b"a"), Err(TelemetryError::Undelivered(ids)) if ids == vec![1]));
    assert_eq!(c.stats().retransmissions, 2);
}

#[test]
fn wildcard_subscription_is_rejected() {
    let broker = fast_broker();
    let c = Client::connect(broker.connect_in_process(), opts("s")).unwrap();
    assert!(matches!(c.subscribe("amqc/defects/+", QoS::AtLeastOnce, |_| {}), Err(TelemetryError::Subscribe(_))));
    assert_eq!(c.subscribe("amqc/defects/1", QoS::AtLeastOnce, |_| {}).unwrap(), QoS::AtLeastOnce);
}

#[test]
fn malformed_frame_closes_only_that_connection() {
    let broker = fast_broker();
    let good = Client::connect(broker.connect_in_process(), opts("good")).unwrap();
    let mut raw = broker.connect_in_process();
    raw.write_all(&Packet::Connect { client_id: "raw".into(), keep_alive: 0, clean_session: true }.encode().unwrap()).unwrap();
    let mut buf = [0u8; 4];
    raw.read_exact(&mut buf).unwrap();
    assert_eq!(buf, [0x20, 0x02, 0x00, 0x00]);
    // QoS bits 3 on a PUBLISH
    raw.write_all(&[0x36, 0x03, 0x00, 0x01, b't']).unwrap();
    let mut rest = Vec::new();
    raw.read_to_end(&mut rest).unwrap();
    assert!(rest.is_empty());
    assert_eq!(broker.stats().malformed, 1);
    assert!(good.ping(Duration::from_secs(2)).is_ok());
}

#[test]
fn bad_client_id_is_refused() {
    let broker = fast_broker();
    let long = "x".repeat(65);
    assert!(matches!(Client::connect(broker.connect_in_process(), opts(&long)), Err(TelemetryError::Refused(2))));
}

#[test]
fn packet_ids_wrap_without_zero() {
    assert_eq!(next_packet_id(65535, |_| false), Some(1));
    assert_eq!(next_packet_id(65534, |id| id == 65535 || id == 1), Some(2));
    assert_eq!(next_packet_id(0, |_| true), None);
}

#[test]
fn handler_runs_once_per_delivery_in_order() {
    let broker = fast_broker();
    let (tx, rx) = channel();
    let sub = Client::connect(broker.connect_in_process(), opts("s")).unwrap();
    let tx = Mutex::new(tx);
    sub.subscribe("a", QoS::AtMostOnce, move |d| tx.lock().unwrap().send(d.payload.clone()).unwrap()).unwrap();
    let p = Client::connect(broker.connect_in_process(), opts("p")).unwrap();
    for i in 0..50u8 {
        p.publish("a", &[i], QoS::AtMostOnce).unwrap();
    }
    let got: Vec<u8> = (0..50).map(|_| rx.recv_timeout(Duration::from_secs(5)).unwrap()[0]).collect();
    assert_eq!(got, (0..50).collect::<Vec<_>>());
    p.disconnect().unwrap();
}
