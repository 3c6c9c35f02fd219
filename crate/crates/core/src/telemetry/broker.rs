//! MQTT-subset broker: exact-match topics, QoS 0/1, one thread per connection
//! plus a writer thread per connection and one retransmit timer.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::frame::{Packet, PacketReader, QoS, SUBACK_FAILURE};
use super::transport::{duplex, Conn};
use super::TelemetryError;

#[derive(Debug, Clone, PartialEq)]
pub struct BrokerConfig {
    pub retransmit: Duration,
    pub max_attempts: u32,
    /// Bound of each connection's outbound queue.
    pub outbound_capacity: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            retransmit: Duration::from_millis(200),
            max_attempts: 10,
            outbound_capacity: 4096,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub connections: u64,
    pub takeovers: u64,
    pub publishes: u64,
    pub duplicate_publishes: u64,
    pub deliveries: u64,
    pub retransmissions: u64,
    pub expired: u64,
    pub malformed: u64,
}

struct InFlight {
    packet: Packet,
    sent: Instant,
    attempts: u32,
}

struct Session {
    conn_id: u64,
    outbound: SyncSender<Vec<u8>>,
    closer: Conn,
    next_id: u16,
    inflight: BTreeMap<u16, InFlight>,
    seen: HashSet<u16>,
    seen_order: VecDeque<u16>,
    subscriptions: HashMap<String, QoS>,
}

/// How many recently received QoS 1 ids per session are remembered for
/// dropping publisher retransmissions.
const SEEN_WINDOW: usize = 4096;

impl Session {
    fn fresh_id(&mut self) -> u16 {
        loop {
            let id = self.next_id;
            self.next_id = if self.next_id == u16::MAX { 1 } else { self.next_id + 1 };
            if !self.inflight.contains_key(&id) {
                return id;
            }
        }
    }

    /// Records an incoming QoS 1 id; false if it is a retransmission already seen.
    fn remember(&mut self, id: u16, dup: bool) -> bool {
        if dup && self.seen.contains(&id) {
            return false;
        }
        if self.seen.insert(id) {
            self.seen_order.push_back(id);
            if self.seen_order.len() > SEEN_WINDOW {
                if let Some(old) = self.seen_order.pop_front() {
                    self.seen.remove(&old);
                }
            }
        }
        true
    }
}

#[derive(Default)]
struct State {
    sessions: HashMap<String, Session>,
    topics: HashMap<String, BTreeSet<String>>,
    fifo: HashMap<(String, String), u64>,
    stats: BrokerStats,
    next_conn: u64,
}

impl State {
    fn drop_session(&mut self, client_id: &str) -> Option<Session> {
        let s = self.sessions.remove(client_id)?;
        for topic in s.subscriptions.keys() {
            if let Some(set) = self.topics.get_mut(topic) {
                set.remove(client_id);
                if set.is_empty() {
                    self.topics.remove(topic);
                }
            }
        }
        Some(s)
    }
}

struct Shared {
    state: Mutex<State>,
    config: BrokerConfig,
    stop: AtomicBool,
    conns: Mutex<Vec<Conn>>,
}

/// A running broker. Dropping it (or calling [`BrokerHandle::shutdown`]) stops
/// all threads and closes every connection.
pub struct BrokerHandle {
    shared: Arc<Shared>,
    local_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

/// Starts a broker listening on `addr` (use port 0 for an ephemeral port).
pub fn broker_serve(addr: impl ToSocketAddrs, config: BrokerConfig) -> Result<BrokerHandle, TelemetryError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let mut handle = BrokerHandle::new(config, Some(local));
    let shared = handle.shared.clone();
    handle.threads.push(std::thread::spawn(move || {
        for stream in listener.incoming() {
            if shared.stop.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => spawn_session(shared.clone(), Conn::from(s)),
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }));
    Ok(handle)
}

impl BrokerHandle {
    fn new(config: BrokerConfig, local_addr: Option<SocketAddr>) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            config,
            stop: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
        });
        let timer_shared = shared.clone();
        let timer = std::thread::spawn(move || retransmit_loop(timer_shared));
        Self {
            shared,
            local_addr,
            threads: vec![timer],
        }
    }

    /// A broker reachable only through [`BrokerHandle::connect_in_process`].
    pub fn in_process(config: BrokerConfig) -> Self {
        Self::new(config, None)
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    /// Opens an in-process connection to this broker.
    pub fn connect_in_process(&self) -> Conn {
        let (a, b) = duplex();
        spawn_session(self.shared.clone(), Conn::Mem(b));
        Conn::Mem(a)
    }

    pub fn stats(&self) -> BrokerStats {
        self.shared.state.lock().expect("broker lock").stats.clone()
    }

    /// Messages forwarded so far per `(topic, publisher client id)`.
    pub fn fifo_counters(&self) -> HashMap<(String, String), u64> {
        self.shared.state.lock().expect("broker lock").fifo.clone()
    }

    pub fn session_count(&self) -> usize {
        self.shared.state.lock().expect("broker lock").sessions.len()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(addr) = self.local_addr {
            // wake the accept loop
            let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
        }
        for c in self.shared.conns.lock().expect("conn list").drain(..) {
            c.shutdown();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn retransmit_loop(shared: Arc<Shared>) {
    let tick = (shared.config.retransmit / 4).max(Duration::from_millis(2));
    while !shared.stop.load(Ordering::SeqCst) {
        std::thread::sleep(tick);
        let mut out: Vec<(SyncSender<Vec<u8>>, Vec<u8>)> = Vec::new();
        {
            let mut st = shared.state.lock().expect("broker lock");
            let State { sessions, stats, .. } = &mut *st;
            for (client, s) in sessions.iter_mut() {
                let mut expired = Vec::new();
                for (&id, f) in s.inflight.iter_mut() {
                    if f.sent.elapsed() < shared.config.retransmit {
                        continue;
                    }
                    if f.attempts >= shared.config.max_attempts {
                        expired.push(id);
                        continue;
                    }
                    if let Packet::Publish { dup, .. } = &mut f.packet {
                        *dup = true;
                    }
                    f.attempts += 1;
                    f.sent = Instant::now();
                    stats.retransmissions += 1;
                    out.push((s.outbound.clone(), f.packet.encode().expect("valid publish")));
                }
                for id in expired {
                    s.inflight.remove(&id);
                    stats.expired += 1;
                    log::warn!("giving up on packet {id} to {client}");
                }
            }
        }
        for (tx, bytes) in out {
            let _ = tx.try_send(bytes);
        }
    }
}

fn spawn_session(shared: Arc<Shared>, conn: Conn) {
    if let Ok(c) = conn.try_clone() {
        shared.conns.lock().expect("conn list").push(c);
    }
    std::thread::spawn(move || {
        let closer = match conn.try_clone() {
            Ok(c) => c,
            Err(_) => return,
        };
        if let Err(e) = run_session(&shared, conn) {
            if !matches!(e, TelemetryError::ConnectionClosed) {
                log::warn!("closing connection: {e}");
            }
        }
        closer.shutdown();
    });
}

fn read_packet(conn: &mut Conn, reader: &mut PacketReader, buf: &mut [u8]) -> Result<Packet, TelemetryError> {
    loop {
        if let Some(p) = reader.next_packet()? {
            return Ok(p);
        }
        let n = conn.read(buf)?;
        if n == 0 {
            return Err(TelemetryError::ConnectionClosed);
        }
        reader.push(&buf[..n]);
    }
}

fn writer_loop(mut conn: Conn, rx: Receiver<Vec<u8>>) {
    for bytes in rx {
        if conn.write_all(&bytes).is_err() {
            conn.shutdown();
            return;
        }
    }
}

fn run_session(shared: &Arc<Shared>, mut conn: Conn) -> Result<(), TelemetryError> {
    let mut reader = PacketReader::new();
    let mut buf = vec![0u8; 8192];
    let first = read_packet(&mut conn, &mut reader, &mut buf).inspect_err(|e| {
        if matches!(e, TelemetryError::Malformed(_)) {
            shared.state.lock().expect("broker lock").stats.malformed += 1;
        }
    })?;
    let Packet::Connect { client_id, .. } = first else {
        return Err(TelemetryError::Protocol("first packet is not CONNECT".into()));
    };
    if client_id.is_empty() || client_id.len() > 64 {
        let _ = conn.write_all(&Packet::ConnAck { session_present: false, return_code: 2 }.encode()?);
        return Err(TelemetryError::Protocol(format!("client id length {} outside 1..=64", client_id.len())));
    }
    let (tx, rx) = sync_channel::<Vec<u8>>(shared.config.outbound_capacity);
    let writer_conn = conn.try_clone()?;
    let writer = std::thread::spawn(move || writer_loop(writer_conn, rx));
    let conn_id;
    {
        let mut st = shared.state.lock().expect("broker lock");
        st.next_conn += 1;
        conn_id = st.next_conn;
        st.stats.connections += 1;
        if let Some(old) = st.drop_session(&client_id) {
            st.stats.takeovers += 1;
            old.closer.shutdown();
        }
        st.sessions.insert(
            client_id.clone(),
            Session {
                conn_id,
                outbound: tx.clone(),
                closer: conn.try_clone()?,
                next_id: 1,
                inflight: BTreeMap::new(),
                seen: HashSet::new(),
                seen_order: VecDeque::new(),
                subscriptions: HashMap::new(),
            },
        );
    }
    let send = |p: &Packet| -> Result<(), TelemetryError> {
        tx.send(p.encode()?).map_err(|_| TelemetryError::ConnectionClosed)
    };
    send(&Packet::ConnAck {
        session_present: false,
        return_code: 0,
    })?;
    let result = session_loop(shared, &client_id, conn_id, &mut conn, &mut reader, &mut buf, &send);
    {
        let mut st = shared.state.lock().expect("broker lock");
        if let Err(TelemetryError::Malformed(_)) = &result {
            st.stats.malformed += 1;
        }
        if st.sessions.get(&client_id).is_some_and(|s| s.conn_id == conn_id) {
            st.drop_session(&client_id);
        }
    }
    drop(tx);
    let _ = writer.join();
    result
}

fn session_loop(
    shared: &Arc<Shared>,
    client_id: &str,
    conn_id: u64,
    conn: &mut Conn,
    reader: &mut PacketReader,
    buf: &mut [u8],
    send: &dyn Fn(&Packet) -> Result<(), TelemetryError>,
) -> Result<(), TelemetryError> {
    loop {
        let packet = read_packet(conn, reader, buf)?;
        match packet {
            Packet::Publish {
                dup,
                qos,
                topic,
                packet_id,
                payload,
            } => {
                let fresh = match packet_id {
                    Some(id) => {
                        let mut st = shared.state.lock().expect("broker lock");
                        let Some(s) = st.sessions.get_mut(client_id).filter(|s| s.conn_id == conn_id) else {
                            return Err(TelemetryError::ConnectionClosed);
                        };
                        let fresh = s.remember(id, dup);
                        if !fresh {
                            st.stats.duplicate_publishes += 1;
                        }
                        fresh
                    }
                    None => true,
                };
                if fresh {
                    forward(shared, client_id, &topic, qos, &payload);
                }
                if let Some(id) = packet_id {
                    send(&Packet::PubAck { packet_id: id })?;
                }
            }
            Packet::PubAck { packet_id } => {
                let mut st = shared.state.lock().expect("broker lock");
                if let Some(s) = st.sessions.get_mut(client_id).filter(|s| s.conn_id == conn_id) {
                    s.inflight.remove(&packet_id);
                }
            }
            Packet::Subscribe { packet_id, filters } => {
                let mut codes = Vec::with_capacity(filters.len());
                {
                    let mut st = shared.state.lock().expect("broker lock");
                    for (filter, want) in filters {
                        if filter.contains(['+', '#']) {
                            codes.push(SUBACK_FAILURE);
                            continue;
                        }
                        let granted = want.min(QoS::AtLeastOnce);
                        if let Some(s) = st.sessions.get_mut(client_id).filter(|s| s.conn_id == conn_id) {
                            s.subscriptions.insert(filter.clone(), granted);
                        }
                        st.topics.entry(filter).or_default().insert(client_id.to_owned());
                        codes.push(granted as u8);
                    }
                }
                send(&Packet::SubAck {
                    packet_id,
                    return_codes: codes,
                })?;
            }
            Packet::PingReq => send(&Packet::PingResp)?,
            Packet::Disconnect => return Ok(()),
            other => {
                return Err(TelemetryError::Protocol(format!(
                    "unexpected packet type {} from client",
                    other.packet_type()
                )))
            }
        }
    }
}

fn forward(shared: &Arc<Shared>, publisher: &str, topic: &str, qos: QoS, payload: &[u8]) {
    let mut out = Vec::new();
    {
        let mut st = shared.state.lock().expect("broker lock");
        st.stats.publishes += 1;
        *st.fifo.entry((topic.to_owned(), publisher.to_owned())).or_default() += 1;
        let targets: Vec<String> = st.topics.get(topic).map(|s| s.iter().cloned().collect()).unwrap_or_default();
        for client in targets {
            let Some(s) = st.sessions.get_mut(&client) else { continue };
            let granted = s.subscriptions.get(topic).copied().unwrap_or(QoS::AtMostOnce);
            let q = qos.min(granted);
            let packet_id = (q == QoS::AtLeastOnce).then(|| s.fresh_id());
            let packet = Packet::Publish {
                dup: false,
                qos: q,
                topic: topic.to_owned(),
                packet_id,
                payload: payload.to_vec(),
            };
            let bytes = packet.encode().expect("valid publish");
            if let Some(id) = packet_id {
                s.inflight.insert(
                    id,
                    InFlight {
                        packet,
                        sent: Instant::now(),
                        attempts: 1,
                    },
                );
            }
            out.push((s.outbound.clone(), bytes));
            st.stats.deliveries += 1;
        }
    }
    // blocking sends happen outside the lock; the per-connection queue keeps order
    for (tx, bytes) in out {
        let _ = tx.send(bytes);
    }
}

/// Topic carrying defect records from one node.
pub fn defects_topic(node_id: u16) -> String {
    format!("amqc/defects/{node_id}")
}

/// Topic carrying twin control actions for one node.
pub fn control_topic(node_id: u16) -> String {
    format!("amqc/control/{node_id}")
}
