//! 26-byte defect record and its canonical JSON baseline.

use serde_json::Value;

use super::TelemetryError;

pub const RECORD_VERSION: u8 = 1;
pub const RECORD_LEN: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DefectRecord {
    pub version: u8,
    pub timestamp_us: u64,
    pub layer_index: u32,
    pub class_id: u8,
    /// Confidence · 65535, rounded.
    pub confidence_q: u16,
    /// `(xmin, ymin, xmax, ymax)`.
    pub bbox: [u16; 4],
    pub node_id: u16,
}

fn field_err(field: &'static str, reason: String) -> TelemetryError {
    TelemetryError::Record { field, reason }
}

/// Quantizes a confidence in `[0, 1]` to `u16`.
pub fn quantize_confidence(confidence: f64) -> Result<u16, TelemetryError> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(field_err("confidence", format!("{confidence} outside [0, 1]")));
    }
    Ok((confidence * 65535.0).round() as u16)
}

impl DefectRecord {
    pub fn new(
        timestamp_us: u64,
        layer_index: u32,
        class_id: u8,
        confidence: f64,
        bbox: [u16; 4],
        node_id: u16,
    ) -> Result<Self, TelemetryError> {
        let r = Self {
            version: RECORD_VERSION,
            timestamp_us,
            layer_index,
            class_id,
            confidence_q: quantize_confidence(confidence)?,
            bbox,
            node_id,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn confidence(&self) -> f64 {
        self.confidence_q as f64 / 65535.0
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.version != RECORD_VERSION {
            return Err(field_err("version", format!("{} (expected {RECORD_VERSION})", self.version)));
        }
        if self.class_id > 3 {
            return Err(field_err("class_id", format!("{} outside 0..=3", self.class_id)));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if x0 >= x1 {
            return Err(field_err("bbox", format!("xmin {x0} >= xmax {x1}")));
        }
        if y0 >= y1 {
            return Err(field_err("bbox", format!("ymin {y0} >= ymax {y1}")));
        }
        Ok(())
    }

    /// Fixed little-endian layout in field order.
    pub fn encode(&self) -> [u8; RECORD_LEN] {
        let mut out = [0u8; RECORD_LEN];
        out[0] = self.version;
        out[1..9].copy_from_slice(&self.timestamp_us.to_le_bytes());
        out[9..13].copy_from_slice(&self.layer_index.to_le_bytes());
        out[13] = self.class_id;
        out[14..16].copy_from_slice(&self.confidence_q.to_le_bytes());
        for (i, v) in self.bbox.iter().enumerate() {
            out[16 + 2 * i..18 + 2 * i].copy_from_slice(&v.to_le_bytes());
        }
        out[24..26].copy_from_slice(&self.node_id.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TelemetryError> {
        if bytes.len() != RECORD_LEN {
            return Err(field_err("length", format!("{} bytes (expected {RECORD_LEN})", bytes.len())));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let r = Self {
            version: bytes[0],
            timestamp_us: u64::from_le_bytes(bytes[1..9].try_into().expect("8 bytes")),
            layer_index: u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")),
            class_id: bytes[13],
            confidence_q: u16_at(14),
            bbox: [u16_at(16), u16_at(18), u16_at(20), u16_at(22)],
            node_id: u16_at(24),
        };
        r.validate()?;
        Ok(r)
    }

    /// Canonical JSON: fixed key order, no whitespace, 6-decimal confidence.
    pub fn to_json(&self) -> String {
        let [x0, y0, x1, y1] = self.bbox;
        format!(
            "{{\"version\":{},\"timestamp_us\":{},\"layer_index\":{},\"class_id\":{},\"confidence\":{:.6},\"bbox\":[{x0},{y0},{x1},{y1}],\"node_id\":{}}}",
            self.version,
            self.timestamp_us,
            self.layer_index,
            self.class_id,
            self.confidence(),
            self.node_id
        )
    }

    /// Parses [`DefectRecord::to_json`] output (any key order is accepted).
    pub fn from_json(text: &str) -> Result<Self, TelemetryError> {
        let v: Value = serde_json::from_str(text).map_err(|e| field_err("json", e.to_string()))?;
        let int = |key: &'static str, max: u64| -> Result<u64, TelemetryError> {
            let n = v
                .get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| field_err(key, "missing or not an unsigned integer".into()))?;
            if n > max {
                return Err(field_err(key, format!("{n} exceeds {max}")));
            }
            Ok(n)
        };
        let confidence = v
            .get("confidence")
            .and_then(Value::as_f64)
            .ok_or_else(|| field_err("confidence", "missing or not a number".into()))?;
        let bbox_v = v
            .get("bbox")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .ok_or_else(|| field_err("bbox", "expected a 4-element array".into()))?;
        let mut bbox = [0u16; 4];
        for (slot, item) in bbox.iter_mut().zip(bbox_v) {
            *slot = item
                .as_u64()
                .filter(|&n| n <= u16::MAX as u64)
                .ok_or_else(|| field_err("bbox", "coordinates must be u16".into()))? as u16;
        }
        let r = Self {
            version: int("version", u8::MAX as u64)? as u8,
            timestamp_us: int("timestamp_us", u64::MAX)?,
            layer_index: int("layer_index", u32::MAX as u64)? as u32,
            class_id: int("class_id", u8::MAX as u64)? as u8,
            confidence_q: quantize_confidence(confidence)?,
            bbox,
            node_id: int("node_id", u16::MAX as u64)? as u16,
        };
        r.validate()?;
        Ok(r)
    }
}
