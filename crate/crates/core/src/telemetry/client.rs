//! Blocking MQTT-subset client with a background reader and retransmit timer.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::frame::{Packet, PacketReader, QoS, SUBACK_FAILURE};
use super::transport::Conn;
use super::TelemetryError;
use crate::rng::child_rng;

/// Seeded loss of PUBACK packets, used to exercise retransmission.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaultInjection {
    /// Probability of ignoring a PUBACK received for our own publish.
    pub drop_incoming_puback: f64,
    /// Probability of not acknowledging a QoS 1 delivery.
    pub drop_outgoing_puback: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptions {
    pub client_id: String,
    pub keep_alive: u16,
    pub retransmit: Duration,
    pub max_attempts: u32,
    pub max_inflight: usize,
    /// How long connect and subscribe wait for their acknowledgement.
    pub ack_timeout: Duration,
    pub faults: FaultInjection,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            keep_alive: 60,
            retransmit: Duration::from_millis(200),
            max_attempts: 10,
            max_inflight: 64,
            ack_timeout: Duration::from_secs(5),
            faults: FaultInjection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub dup: bool,
    pub packet_id: Option<u16>,
}

pub type Handler = Box<dyn FnMut(&Delivery) + Send>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub published: u64,
    pub acknowledged: u64,
    pub retransmissions: u64,
    pub pubacks_dropped: u64,
    pub deliveries: u64,
    pub dup_deliveries: u64,
    pub pongs: u64,
}

/// Result of a confirmed QoS 1 publish.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishOutcome {
    pub packet_id: u16,
    /// 1 when the first transmission was acknowledged.
    pub attempts: u32,
}

struct InFlight {
    packet: Packet,
    sent: Instant,
    attempts: u32,
}

struct State {
    next_id: u16,
    inflight: BTreeMap<u16, InFlight>,
    acked: HashMap<u16, u32>,
    failed: Vec<u16>,
    subacks: HashMap<u16, Vec<u8>>,
    connected: bool,
    stats: ClientStats,
    rng: ChaCha8Rng,
}

struct Shared {
    opts: ClientOptions,
    writer: Mutex<Conn>,
    closer: Conn,
    state: Mutex<State>,
    cond: Condvar,
    handlers: Mutex<HashMap<String, Handler>>,
    stop: AtomicBool,
}

/// Next free packet identifier after `current`, wrapping past 65535 to 1 and
/// skipping ids still in use. Zero is never returned.
pub fn next_packet_id(current: u16, in_use: impl Fn(u16) -> bool) -> Option<u16> {
    let mut id = current;
    for _ in 0..u16::MAX {
        id = if id == u16::MAX { 1 } else { id + 1 };
        if !in_use(id) {
            return Some(id);
        }
    }
    None
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("client lock")
    }

    fn send(&self, p: &Packet) -> Result<(), TelemetryError> {
        let bytes = p.encode()?;
        let mut w = self.writer.lock().expect("client writer");
        w.write_all(&bytes).map_err(TelemetryError::from)
    }

    fn wait_until<'a>(
        &self,
        mut st: MutexGuard<'a, State>,
        deadline: Option<Instant>,
        mut done: impl FnMut(&mut State) -> bool,
    ) -> Result<MutexGuard<'a, State>, MutexGuard<'a, State>> {
        loop {
            if done(&mut st) {
                return Ok(st);
            }
            if !st.connected {
                return Err(st);
            }
            match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(st);
                    }
                    st = self.cond.wait_timeout(st, d - now).expect("client lock").0;
                }
                None => st = self.cond.wait(st).expect("client lock"),
            }
        }
    }
}

pub struct Client {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Client {
    /// Sends CONNECT over `conn` and waits for a successful CONNACK.
    pub fn connect(mut conn: Conn, opts: ClientOptions) -> Result<Client, TelemetryError> {
        if opts.max_inflight == 0 || opts.max_attempts == 0 {
            return Err(TelemetryError::InvalidArgument("max_inflight and max_attempts must be positive".into()));
        }
        for p in [opts.faults.drop_incoming_puback, opts.faults.drop_outgoing_puback] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TelemetryError::InvalidArgument(format!("drop probability {p} outside [0, 1]")));
            }
        }
        conn.write_all(
            &Packet::Connect {
                client_id: opts.client_id.clone(),
                keep_alive: opts.keep_alive,
                clean_session: true,
            }
            .encode()?,
        )?;
        let mut reader = PacketReader::new();
        let mut buf = vec![0u8; 8192];
        let ack = loop {
            if let Some(p) = reader.next_packet()? {
                break p;
            }
            let n = conn.read(&mut buf)?;
            if n == 0 {
                return Err(TelemetryError::ConnectionClosed);
            }
            reader.push(&buf[..n]);
        };
        match ack {
            Packet::ConnAck { return_code: 0, .. } => {}
            Packet::ConnAck { return_code, .. } => return Err(TelemetryError::Refused(return_code)),
            other => {
                return Err(TelemetryError::Protocol(format!(
                    "expected CONNACK, got packet type {}",
                    other.packet_type()
                )))
            }
        }
        let rng = child_rng(opts.faults.seed, 0xFA17, 0);
        let shared = Arc::new(Shared {
            writer: Mutex::new(conn.try_clone()?),
            closer: conn.try_clone()?,
            state: Mutex::new(State {
                next_id: 0,
                inflight: BTreeMap::new(),
                acked: HashMap::new(),
                failed: Vec::new(),
                subacks: HashMap::new(),
                connected: true,
                stats: ClientStats::default(),
                rng,
            }),
            cond: Condvar::new(),
            handlers: Mutex::new(HashMap::new()),
            stop: AtomicBool::new(false),
            opts,
        });
        let r = shared.clone();
        let reader_thread = std::thread::spawn(move || reader_loop(r, conn, reader, buf));
        let t = shared.clone();
        let timer = std::thread::spawn(move || timer_loop(t));
        Ok(Client {
            shared,
            threads: vec![reader_thread, timer],
        })
    }

    pub fn client_id(&self) -> &str {
        &self.shared.opts.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.shared.lock().connected
    }

    pub fn stats(&self) -> ClientStats {
        self.shared.lock().stats.clone()
    }

    /// Queues a publish. QoS 1 blocks while the in-flight window is full and
    /// returns the packet id used.
    pub fn publish(&self, topic: &str, payload: &[u8], qos: QoS) -> Result<Option<u16>, TelemetryError> {
        if topic.is_empty() || topic.contains(['+', '#']) {
            return Err(TelemetryError::InvalidArgument(format!("invalid publish topic {topic:?}")));
        }
        if qos == QoS::AtMostOnce {
            let p = Packet::Publish {
                dup: false,
                qos,
                topic: topic.to_owned(),
                packet_id: None,
                payload: payload.to_vec(),
            };
            self.shared.send(&p)?;
            self.shared.lock().stats.published += 1;
            return Ok(None);
        }
        let max = self.shared.opts.max_inflight;
        let st = self.shared.lock();
        let mut st = self
            .shared
            .wait_until(st, None, |s| s.inflight.len() < max)
            .map_err(|s| lost(&s))?;
        let id = next_packet_id(st.next_id, |id| st.inflight.contains_key(&id))
            .ok_or_else(|| TelemetryError::InvalidArgument("no free packet id".into()))?;
        st.next_id = id;
        let packet = Packet::Publish {
            dup: false,
            qos,
            topic: topic.to_owned(),
            packet_id: Some(id),
            payload: payload.to_vec(),
        };
        st.acked.remove(&id);
        st.inflight.insert(
            id,
            InFlight {
                packet: packet.clone(),
                sent: Instant::now(),
                attempts: 1,
            },
        );
        st.stats.published += 1;
        // send while holding the state lock so the wire order matches id order
        self.shared.send(&packet)?;
        Ok(Some(id))
    }

    /// Publishes at QoS 1 and waits until the broker acknowledges it.
    pub fn publish_confirmed(&self, topic: &str, payload: &[u8]) -> Result<PublishOutcome, TelemetryError> {
        let id = self.publish(topic, payload, QoS::AtLeastOnce)?.expect("QoS 1 has an id");
        let st = self.shared.lock();
        let mut st = self
            .shared
            .wait_until(st, None, |s| s.acked.contains_key(&id) || s.failed.contains(&id))
            .map_err(|s| lost(&s))?;
        if let Some(pos) = st.failed.iter().position(|&f| f == id) {
            st.failed.remove(pos);
            return Err(TelemetryError::Undelivered(vec![id]));
        }
        let attempts = st.acked.remove(&id).unwrap_or(1);
        Ok(PublishOutcome { packet_id: id, attempts })
    }

    /// Waits until every QoS 1 publish has been acknowledged.
    pub fn flush(&self, timeout: Duration) -> Result<(), TelemetryError> {
        let st = self.shared.lock();
        let mut st = match self
            .shared
            .wait_until(st, Some(Instant::now() + timeout), |s| s.inflight.is_empty())
        {
            Ok(st) => st,
            Err(st) if !st.connected => return Err(lost(&st)),
            Err(st) => return Err(TelemetryError::Timeout(format!("{} publishes unacknowledged", st.inflight.len()))),
        };
        if !st.failed.is_empty() {
            return Err(TelemetryError::Undelivered(std::mem::take(&mut st.failed)));
        }
        Ok(())
    }

    /// Subscribes to an exact topic. The handler runs on the reader thread.
    pub fn subscribe(&self, topic: &str, qos: QoS, handler: impl FnMut(&Delivery) + Send + 'static) -> Result<QoS, TelemetryError> {
        self.shared
            .handlers
            .lock()
            .expect("handlers")
            .insert(topic.to_owned(), Box::new(handler));
        let mut st = self.shared.lock();
        let id = next_packet_id(st.next_id, |id| st.inflight.contains_key(&id))
            .ok_or_else(|| TelemetryError::InvalidArgument("no free packet id".into()))?;
        st.next_id = id;
        self.shared.send(&Packet::Subscribe {
            packet_id: id,
            filters: vec![(topic.to_owned(), qos)],
        })?;
        let deadline = Instant::now() + self.shared.opts.ack_timeout;
        let codes = match self.shared.wait_until(st, Some(deadline), |s| s.subacks.contains_key(&id)) {
            Ok(mut st) => st.subacks.remove(&id).unwrap_or_default(),
            Err(st) if !st.connected => return Err(lost(&st)),
            Err(_) => return Err(TelemetryError::Timeout(format!("no SUBACK for {topic}"))),
        };
        match codes.first() {
            Some(&c) if c != SUBACK_FAILURE => QoS::from_bits(c),
            _ => {
                self.shared.handlers.lock().expect("handlers").remove(topic);
                Err(TelemetryError::Subscribe(topic.to_owned()))
            }
        }
    }

    /// Round trip of PINGREQ/PINGRESP.
    pub fn ping(&self, timeout: Duration) -> Result<Duration, TelemetryError> {
        let start = Instant::now();
        let before = self.shared.lock().stats.pongs;
        self.shared.send(&Packet::PingReq)?;
        let st = self.shared.lock();
        match self
            .shared
            .wait_until(st, Some(start + timeout), |s| s.stats.pongs > before)
        {
            Ok(_) => Ok(start.elapsed()),
            Err(st) if !st.connected => Err(lost(&st)),
            Err(_) => Err(TelemetryError::Timeout("no PINGRESP".into())),
        }
    }

    /// Sends DISCONNECT and closes the connection.
    pub fn disconnect(mut self) -> Result<(), TelemetryError> {
        let r = self.shared.send(&Packet::Disconnect);
        self.close();
        r
    }

    fn close(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.closer.shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.close();
    }
}

fn lost(st: &State) -> TelemetryError {
    TelemetryError::ConnectionLost {
        unacked: st.inflight.keys().copied().collect(),
    }
}

fn reader_loop(shared: Arc<Shared>, mut conn: Conn, mut reader: PacketReader, mut buf: Vec<u8>) {
    let result: Result<(), TelemetryError> = (|| loop {
        while let Some(p) = reader.next_packet()? {
            handle_incoming(&shared, p)?;
        }
        let n = conn.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        reader.push(&buf[..n]);
    })();
    if let Err(e) = result {
        if !shared.stop.load(Ordering::SeqCst) {
            log::warn!("client {}: {e}", shared.opts.client_id);
        }
    }
    shared.closer.shutdown();
    shared.lock().connected = false;
    shared.cond.notify_all();
}

fn handle_incoming(shared: &Shared, p: Packet) -> Result<(), TelemetryError> {
    match p {
        Packet::PubAck { packet_id } => {
            let mut st = shared.lock();
            let p_drop = shared.opts.faults.drop_incoming_puback;
            if p_drop > 0.0 && st.rng.random::<f64>() < p_drop {
                st.stats.pubacks_dropped += 1;
                return Ok(());
            }
            if let Some(f) = st.inflight.remove(&packet_id) {
                st.acked.insert(packet_id, f.attempts);
                st.stats.acknowledged += 1;
                shared.cond.notify_all();
            }
        }
        Packet::Publish {
            dup,
            qos,
            topic,
            packet_id,
            payload,
        } => {
            let ack = {
                let mut st = shared.lock();
                st.stats.deliveries += 1;
                if dup {
                    st.stats.dup_deliveries += 1;
                }
                let p_drop = shared.opts.faults.drop_outgoing_puback;
                match packet_id {
                    Some(_) if p_drop > 0.0 && st.rng.random::<f64>() < p_drop => {
                        st.stats.pubacks_dropped += 1;
                        None
                    }
                    id => id,
                }
            };
            let delivery = Delivery {
                topic,
                payload,
                qos,
                dup,
                packet_id,
            };
            if let Some(h) = shared.handlers.lock().expect("handlers").get_mut(&delivery.topic) {
                h(&delivery);
            }
            if let Some(id) = ack {
                shared.send(&Packet::PubAck { packet_id: id })?;
            }
        }
        Packet::SubAck { packet_id, return_codes } => {
            shared.lock().subacks.insert(packet_id, return_codes);
            shared.cond.notify_all();
        }
        Packet::PingResp => {
            shared.lock().stats.pongs += 1;
            shared.cond.notify_all();
        }
        other => {
            return Err(TelemetryError::Protocol(format!(
                "unexpected packet type {} from broker",
                other.packet_type()
            )))
        }
    }
    Ok(())
}

fn timer_loop(shared: Arc<Shared>) {
    let period = shared.opts.retransmit;
    let tick = (period / 4).max(Duration::from_millis(2));
    while !shared.stop.load(Ordering::SeqCst) {
        std::thread::sleep(tick);
        let mut st = shared.lock();
        if !st.connected {
            return;
        }
        let mut resend = Vec::new();
        let mut gave_up = Vec::new();
        for (&id, f) in st.inflight.iter_mut() {
            if f.sent.elapsed() < period {
                continue;
            }
            if f.attempts >= shared.opts.max_attempts {
                gave_up.push(id);
                continue;
            }
            if let Packet::Publish { dup, .. } = &mut f.packet {
                *dup = true;
            }
            f.attempts += 1;
            f.sent = Instant::now();
            resend.push(f.packet.clone());
        }
        st.stats.retransmissions += resend.len() as u64;
        for id in &gave_up {
            st.inflight.remove(id);
        }
        if !gave_up.is_empty() {
            st.failed.extend(gave_up);
            shared.cond.notify_all();
        }
        drop(st);
        for p in resend {
            if shared.send(&p).is_err() {
                break;
            }
        }
    }
}
