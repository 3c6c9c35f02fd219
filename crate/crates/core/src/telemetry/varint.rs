use super::TelemetryError;

/// Largest value a 4-byte remaining-length varint can carry.
pub const VARINT_MAX: u32 = 268_435_455;

/// Appends the MQTT remaining-length encoding of `value` to `out`.
pub fn encode_varint_into(value: u32, out: &mut Vec<u8>) -> Result<(), TelemetryError> {
    if value > VARINT_MAX {
        return Err(TelemetryError::InvalidArgument(format!("varint value {value} exceeds {VARINT_MAX}")));
    }
    let mut v = value;
    loop {
        let mut byte = (v % 128) as u8;
        v /= 128;
        if v > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if v == 0 {
            return Ok(());
        }
    }
}

pub fn encode_varint(value: u32) -> Result<Vec<u8>, TelemetryError> {
    let mut out = Vec::with_capacity(4);
    encode_varint_into(value, &mut out)?;
    Ok(out)
}

/// Decodes a varint from the front of `bytes`, returning `(value, bytes used)`.
/// `Ok(None)` means more bytes are needed. Overlong encodings (a redundant
/// trailing zero group) are rejected so every value has one byte form.
pub fn decode_varint(bytes: &[u8]) -> Result<Option<(u32, usize)>, TelemetryError> {
    let mut value: u32 = 0;
    let mut mult: u32 = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(TelemetryError::Malformed("varint longer than 4 bytes".into()));
        }
        value += (b & 0x7F) as u32 * mult;
        if b & 0x80 == 0 {
            if i > 0 && b == 0 {
                return Err(TelemetryError::Malformed("overlong varint".into()));
            }
            return Ok(Some((value, i + 1)));
        }
        mult *= 128;
    }
    if bytes.len() >= 4 {
        return Err(TelemetryError::Malformed("varint longer than 4 bytes".into()));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(encode_varint(0).unwrap(), vec![0x00]);
        assert_eq!(encode_varint(127).unwrap(), vec![0x7F]);
        assert_eq!(encode_varint(128).unwrap(), vec![0x80, 0x01]);
        assert_eq!(encode_varint(321).unwrap(), vec![0xC1, 0x02]);
        assert_eq!(encode_varint(VARINT_MAX).unwrap(), vec![0xFF, 0xFF, 0xFF, 0x7F]);
        assert_eq!(decode_varint(&[0xC1, 0x02]).unwrap(), Some((321, 2)));
        // hand decode: 0x41 + 2·128
        assert_eq!(0x41 + 2 * 128, 321);
    }

    #[test]
    fn errors() {
        assert!(matches!(encode_varint(VARINT_MAX + 1), Err(TelemetryError::InvalidArgument(_))));
        assert!(matches!(decode_varint(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]), Err(TelemetryError::Malformed(_))));
        assert!(matches!(decode_varint(&[0xFF, 0xFF, 0xFF, 0xFF]), Err(TelemetryError::Malformed(_))));
        assert_eq!(decode_varint(&[0x80]).unwrap(), None);
        assert_eq!(decode_varint(&[]).unwrap(), None);
        assert!(decode_varint(&[0x80, 0x00]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(v in 0u32..=VARINT_MAX) {
            let bytes = encode_varint(v).unwrap();
            prop_assert!(bytes.len() <= 4);
            prop_assert_eq!(decode_varint(&bytes).unwrap(), Some((v, bytes.len())));
        }
    }
}
