//! CSV and HMEV binary event file formats.
//!
//! HMEV: a 20-byte header (`"HMEV"`, version `u16`, width `u16`, height
//! `u16`, event count `u64`, two reserved zero bytes) followed by 16-byte records (`t: u64`, `x: u16`,
//! `y: u16`, `p: i8`, three zero bytes). All integers little-endian.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::events::{validate, Event, EventStream, Polarity};

pub const CSV_HEADER: &str = "t_us,x,y,p";
pub const HMEV_MAGIC: &[u8; 4] = b"HMEV";
pub const HMEV_VERSION: u16 = 1;
pub const HMEV_HEADER_LEN: usize = 20;
pub const HMEV_RECORD_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// CSV carries no sensor geometry, so it is supplied here for validation.
    Csv { width: u16, height: u16 },
    Hmev,
}

pub fn decode_events(bytes: &[u8], format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Csv { width, height } => decode_csv(bytes, width, height),
        EventFormat::Hmev => decode_hmev(bytes),
    }
}

pub fn encode_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Csv { .. } => encode_csv(stream).into_bytes(),
        EventFormat::Hmev => encode_hmev(stream),
    }
}

fn decode_csv(bytes: &[u8], width: u16, height: u16) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Decode {
        record: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::Decode {
                record: 0,
                reason: format!("expected header {CSV_HEADER:?}, found {other:?}"),
            })
        }
    }
    let mut events = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let record = events.len();
        let bad = |reason: String| Error::Decode { record, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let t: u64 = fields[0].parse().map_err(|e| bad(format!("t_us {:?}: {e}", fields[0])))?;
        let x: u16 = fields[1].parse().map_err(|e| bad(format!("x {:?}: {e}", fields[1])))?;
        let y: u16 = fields[2].parse().map_err(|e| bad(format!("y {:?}: {e}", fields[2])))?;
        let p: i64 = fields[3].parse().map_err(|e| bad(format!("p {:?}: {e}", fields[3])))?;
        let p = Polarity::try_from(p).map_err(bad)?;
        events.push(Event { t, x, y, p });
    }
    validate(width, height, &events)?;
    Ok(EventStream {
        width,
        height,
        events,
    })
}

fn encode_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 * (stream.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for e in stream.events() {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8());
    }
    out
}

fn decode_hmev(bytes: &[u8]) -> Result<EventStream> {
    let header_err = |reason: &str| Error::Decode {
        record: 0,
        reason: reason.to_string(),
    };
    if bytes.len() < HMEV_HEADER_LEN {
        return Err(header_err("truncated header"));
    }
    if &bytes[0..4] != HMEV_MAGIC {
        return Err(header_err("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != HMEV_VERSION {
        return Err(header_err(&format!("unsupported version {version}")));
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let height = u16::from_le_bytes([bytes[8], bytes[9]]);
    let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    if bytes[18..20] != [0, 0] {
        return Err(header_err("non-zero reserved header bytes"));
    }
    let body = &bytes[HMEV_HEADER_LEN..];
    let expected = count.checked_mul(HMEV_RECORD_LEN);
    if expected != Some(body.len()) {
        return Err(Error::Decode {
            record: body.len() / HMEV_RECORD_LEN,
            reason: format!(
                "header declares {count} records but payload holds {} bytes",
                body.len()
            ),
        });
    }
    let mut events = Vec::with_capacity(count);
    for (record, r) in body.chunks_exact(HMEV_RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(r[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([r[8], r[9]]);
        let y = u16::from_le_bytes([r[10], r[11]]);
        let p = Polarity::try_from(r[12] as i8 as i64)
            .map_err(|reason| Error::Decode { record, reason })?;
        if r[13..16] != [0, 0, 0] {
            return Err(Error::Decode {
                record,
                reason: "non-zero padding".into(),
            });
        }
        events.push(Event { t, x, y, p });
    }
    validate(width, height, &events)?;
    Ok(EventStream {
        width,
        height,
        events,
    })
}

fn encode_hmev(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HMEV_HEADER_LEN + HMEV_RECORD_LEN * stream.len());
    out.extend_from_slice(HMEV_MAGIC);
    out.extend_from_slice(&HMEV_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.as_i8() as u8);
        out.extend_from_slice(&[0, 0, 0]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: EventFormat = EventFormat::Csv {
        width: 64,
        height: 64,
    };

    #[test]
    fn csv_line_maps_fields() {
        let s = decode_events(b"t_us,x,y,p\n5,10,3,1\n", CSV).unwrap();
        assert_eq!(s.events(), &[Event::new(5, 10, 3, Polarity::On)]);
    }

    #[test]
    fn csv_rejects_bad_polarity_with_record_index() {
        let err = decode_events(b"t_us,x,y,p\n1,1,1,-1\n5,10,3,2\n", CSV).unwrap_err();
        match err {
            Error::Decode { record, .. } => assert_eq!(record, 1),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn csv_rejects_out_of_bounds_and_decreasing_time() {
        assert!(matches!(
            decode_events(b"t_us,x,y,p\n1,64,0,1\n", CSV),
            Err(Error::Decode { record: 0, .. })
        ));
        assert!(matches!(
            decode_events(b"t_us,x,y,p\n9,0,0,1\n8,0,0,1\n", CSV),
            Err(Error::Decode { record: 1, .. })
        ));
        assert!(decode_events(b"t,x,y,p\n", CSV).is_err());
        assert!(decode_events(b"t_us,x,y,p\n1,2,3\n", CSV).is_err());
    }

    #[test]
    fn empty_binary_is_header_only() {
        let bytes = encode_events(&EventStream::empty(8, 8), EventFormat::Hmev);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[0..4], b"HMEV");
        assert!(decode_events(&bytes, EventFormat::Hmev).unwrap().is_empty());
    }

    #[test]
    fn one_event_binary_layout() {
        let s = EventStream::new(640, 480, vec![Event::new(0x0102, 7, 9, Polarity::Off)]).unwrap();
        let bytes = encode_events(&s, EventFormat::Hmev);
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &640u16.to_le_bytes());
        assert_eq!(&bytes[10..18], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &0x0102u64.to_le_bytes());
        assert_eq!(bytes[32], 0xff);
        assert_eq!(&bytes[33..36], &[0, 0, 0]);
    }

    #[test]
    fn binary_rejects_corruption() {
        let s = EventStream::new(8, 8, vec![Event::new(1, 1, 1, Polarity::On)]).unwrap();
        let good = encode_events(&s, EventFormat::Hmev);
        let mut bad_p = good.clone();
        bad_p[32] = 3;
        assert!(matches!(
            decode_events(&bad_p, EventFormat::Hmev),
            Err(Error::Decode { record: 0, .. })
        ));
        let mut pad = good.clone();
        pad[34] = 1;
        assert!(decode_events(&pad, EventFormat::Hmev).is_err());
        assert!(decode_events(&good[..good.len() - 3], EventFormat::Hmev).is_err());
        let mut magic = good;
        magic[0] = b'X';
        assert!(decode_events(&magic, EventFormat::Hmev).is_err());
    }
}
