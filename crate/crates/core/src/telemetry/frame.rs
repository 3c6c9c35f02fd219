//! MQTT 3.1.1 control packets for the supported subset.

use super::varint::{decode_varint, encode_varint_into, VARINT_MAX};
use super::TelemetryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_bits(bits: u8) -> Result<Self, TelemetryError> {
        match bits {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(malformed("QoS 2 is not supported")),
            _ => Err(malformed("invalid QoS bits 3")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        client_id: String,
        keep_alive: u16,
        clean_session: bool,
    },
    ConnAck {
        session_present: bool,
        return_code: u8,
    },
    Publish {
        dup: bool,
        qos: QoS,
        topic: String,
        /// Present exactly when `qos` is at-least-once.
        packet_id: Option<u16>,
        payload: Vec<u8>,
    },
    PubAck {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<(String, QoS)>,
    },
    SubAck {
        packet_id: u16,
        return_codes: Vec<u8>,
    },
    PingReq,
    PingResp,
    Disconnect,
}

pub const CONNECT: u8 = 1;
pub const CONNACK: u8 = 2;
pub const PUBLISH: u8 = 3;
pub const PUBACK: u8 = 4;
pub const SUBSCRIBE: u8 = 8;
pub const SUBACK: u8 = 9;
pub const PINGREQ: u8 = 12;
pub const PINGRESP: u8 = 13;
pub const DISCONNECT: u8 = 14;

/// SUBACK failure return code.
pub const SUBACK_FAILURE: u8 = 0x80;

fn malformed(reason: impl Into<String>) -> TelemetryError {
    TelemetryError::Malformed(reason.into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Packet {
    pub fn packet_type(&self) -> u8 {
        match self {
            Packet::Connect { .. } => CONNECT,
            Packet::ConnAck { .. } => CONNACK,
            Packet::Publish { .. } => PUBLISH,
            Packet::PubAck { .. } => PUBACK,
            Packet::Subscribe { .. } => SUBSCRIBE,
            Packet::SubAck { .. } => SUBACK,
            Packet::PingReq => PINGREQ,
            Packet::PingResp => PINGRESP,
            Packet::Disconnect => DISCONNECT,
        }
    }

    fn check(&self) -> Result<(), TelemetryError> {
        let str_ok = |s: &str| s.len() <= u16::MAX as usize && !s.contains('\0');
        match self {
            Packet::Connect { client_id, .. } if !str_ok(client_id) => Err(malformed("client id too long")),
            Packet::Publish {
                dup, qos, topic, packet_id, ..
            } => {
                if topic.is_empty() || !str_ok(topic) || topic.contains(['+', '#']) {
                    return Err(malformed("invalid publish topic"));
                }
                match (qos, packet_id) {
                    (QoS::AtMostOnce, None) if !dup => Ok(()),
                    (QoS::AtMostOnce, None) => Err(malformed("DUP set on a QoS 0 publish")),
                    (QoS::AtLeastOnce, Some(id)) if *id != 0 => Ok(()),
                    (QoS::AtLeastOnce, _) => Err(malformed("QoS 1 publish needs a nonzero packet id")),
                    (QoS::AtMostOnce, Some(_)) => Err(malformed("QoS 0 publish carries no packet id")),
                }
            }
            Packet::PubAck { packet_id } | Packet::SubAck { packet_id, .. } | Packet::Subscribe { packet_id, .. }
                if *packet_id == 0 =>
            {
                Err(malformed("packet id 0"))
            }
            Packet::Subscribe { filters, .. } if filters.is_empty() || filters.iter().any(|(f, _)| f.is_empty() || !str_ok(f)) => {
                Err(malformed("subscribe needs at least one non-empty filter"))
            }
            Packet::SubAck { return_codes, .. }
                if return_codes.is_empty() || return_codes.iter().any(|c| !matches!(*c, 0 | 1 | SUBACK_FAILURE)) =>
            {
                Err(malformed("bad SUBACK return codes"))
            }
            Packet::ConnAck { return_code, .. } if *return_code > 5 => Err(malformed("bad CONNACK return code")),
            _ => Ok(()),
        }
    }

    /// Full wire bytes: fixed header, remaining length, variable header and payload.
    pub fn encode(&self) -> Result<Vec<u8>, TelemetryError> {
        self.check()?;
        let mut body = Vec::new();
        let mut flags = 0u8;
        match self {
            Packet::Connect {
                client_id,
                keep_alive,
                clean_session,
            } => {
                put_str(&mut body, "MQTT");
                body.push(4);
                body.push(if *clean_session { 0x02 } else { 0 });
                body.extend_from_slice(&keep_alive.to_be_bytes());
                put_str(&mut body, client_id);
            }
            Packet::ConnAck {
                session_present,
                return_code,
            } => {
                body.push(*session_present as u8);
                body.push(*return_code);
            }
            Packet::Publish {
                dup,
                qos,
                topic,
                packet_id,
                payload,
            } => {
                flags = ((*dup as u8) << 3) | ((*qos as u8) << 1);
                put_str(&mut body, topic);
                if let Some(id) = packet_id {
                    body.extend_from_slice(&id.to_be_bytes());
                }
                body.extend_from_slice(payload);
            }
            Packet::PubAck { packet_id } => body.extend_from_slice(&packet_id.to_be_bytes()),
            Packet::Subscribe { packet_id, filters } => {
                flags = 0b0010;
                body.extend_from_slice(&packet_id.to_be_bytes());
                for (f, q) in filters {
                    put_str(&mut body, f);
                    body.push(*q as u8);
                }
            }
            Packet::SubAck {
                packet_id,
                return_codes,
            } => {
                body.extend_from_slice(&packet_id.to_be_bytes());
                body.extend_from_slice(return_codes);
            }
            Packet::PingReq | Packet::PingResp | Packet::Disconnect => {}
        }
        if body.len() > VARINT_MAX as usize {
            return Err(TelemetryError::InvalidArgument("packet exceeds maximum remaining length".into()));
        }
        let mut out = Vec::with_capacity(body.len() + 5);
        out.push((self.packet_type() << 4) | flags);
        encode_varint_into(body.len() as u32, &mut out)?;
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Decodes one packet from the front of `bytes`. `Ok(None)` means the
    /// packet is incomplete; otherwise returns the packet and bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<Option<(Packet, usize)>, TelemetryError> {
        let Some(&first) = bytes.first() else { return Ok(None) };
        let Some((len, used)) = decode_varint(&bytes[1..])? else { return Ok(None) };
        let total = 1 + used + len as usize;
        if bytes.len() < total {
            return Ok(None);
        }
        let body = &bytes[1 + used..total];
        let packet = parse_body(first >> 4, first & 0x0F, body)?;
        Ok(Some((packet, total)))
    }

    /// Decodes a buffer holding exactly one packet.
    pub fn decode_exact(bytes: &[u8]) -> Result<Packet, TelemetryError> {
        match Packet::decode(bytes)? {
            Some((p, n)) if n == bytes.len() => Ok(p),
            Some((_, n)) => Err(malformed(format!("{} trailing bytes after packet", bytes.len() - n))),
            None => Err(malformed("truncated packet")),
        }
    }
}

struct Body<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Body<'_> {
    fn u8(&mut self) -> Result<u8, TelemetryError> {
        let v = *self.b.get(self.pos).ok_or_else(|| malformed("remaining length too short"))?;
        self.pos += 1;
        Ok(v)
    }

    fn u16(&mut self) -> Result<u16, TelemetryError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn string(&mut self) -> Result<String, TelemetryError> {
        let n = self.u16()? as usize;
        let raw = self.b.get(self.pos..self.pos + n).ok_or_else(|| malformed("string exceeds remaining length"))?;
        self.pos += n;
        let s = std::str::from_utf8(raw).map_err(|_| malformed("string is not UTF-8"))?;
        if s.contains('\0') {
            return Err(malformed("string contains U+0000"));
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &[u8] {
        let r = &self.b[self.pos..];
        self.pos = self.b.len();
        r
    }

    fn done(&self) -> Result<(), TelemetryError> {
        if self.pos != self.b.len() {
            return Err(malformed("remaining length longer than packet contents"));
        }
        Ok(())
    }
}

fn parse_body(kind: u8, flags: u8, b: &[u8]) -> Result<Packet, TelemetryError> {
    let mut r = Body { b, pos: 0 };
    let expect_flags = |want: u8| {
        if flags != want {
            Err(malformed(format!("packet type {kind}: reserved flags {flags:#06b}")))
        } else {
            Ok(())
        }
    };
    let p = match kind {
        CONNECT => {
            expect_flags(0)?;
            if r.string()? != "MQTT" {
                return Err(malformed("protocol name is not MQTT"));
            }
            if r.u8()? != 4 {
                return Err(malformed("unsupported protocol level"));
            }
            let cf = r.u8()?;
            if cf & !0x02 != 0 {
                return Err(malformed("unsupported connect flags (will/auth/reserved)"));
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            Packet::Connect {
                client_id,
                keep_alive,
                clean_session: cf & 0x02 != 0,
            }
        }
        CONNACK => {
            expect_flags(0)?;
            let sp = r.u8()?;
            if sp > 1 {
                return Err(malformed("bad CONNACK flags"));
            }
            Packet::ConnAck {
                session_present: sp == 1,
                return_code: r.u8()?,
            }
        }
        PUBLISH => {
            if flags & 0x01 != 0 {
                return Err(malformed("retained publish is not supported"));
            }
            let qos = QoS::from_bits((flags >> 1) & 0x03)?;
            let dup = flags & 0x08 != 0;
            let topic = r.string()?;
            let packet_id = if qos == QoS::AtLeastOnce { Some(r.u16()?) } else { None };
            Packet::Publish {
                dup,
                qos,
                topic,
                packet_id,
                payload: r.rest().to_vec(),
            }
        }
        PUBACK => {
            expect_flags(0)?;
            Packet::PubAck { packet_id: r.u16()? }
        }
        SUBSCRIBE => {
            expect_flags(0b0010)?;
            let packet_id = r.u16()?;
            let mut filters = Vec::new();
            while r.pos < b.len() {
                let f = r.string()?;
                let q = r.u8()?;
                if q & 0xFC != 0 {
                    return Err(malformed("reserved bits in requested QoS"));
                }
                filters.push((f, QoS::from_bits(q)?));
            }
            Packet::Subscribe { packet_id, filters }
        }
        SUBACK => {
            expect_flags(0)?;
            let packet_id = r.u16()?;
            Packet::SubAck {
                packet_id,
                return_codes: r.rest().to_vec(),
            }
        }
        PINGREQ => {
            expect_flags(0)?;
            Packet::PingReq
        }
        PINGRESP => {
            expect_flags(0)?;
            Packet::PingResp
        }
        DISCONNECT => {
            expect_flags(0)?;
            Packet::Disconnect
        }
        other => return Err(malformed(format!("unsupported packet type {other}"))),
    };
    r.done()?;
    p.check()?;
    Ok(p)
}

/// Accumulates stream bytes and yields whole packets.
#[derive(Debug, Default)]
pub struct PacketReader {
    buf: Vec<u8>,
}

impl PacketReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_packet(&mut self) -> Result<Option<Packet>, TelemetryError> {
        match Packet::decode(&self.buf)? {
            Some((p, n)) => {
                self.buf.drain(..n);
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }
}
