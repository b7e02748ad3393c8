//! Event file formats.
//!
//! `EVT1` (little-endian): magic `EVT1`, `u16` width, `u16` height, `u64`
//! count, then `count` records of `{u64 t_us, u16 x, u16 y, i8 p}`.
//! Binary files must already be time-sorted.
//!
//! CSV: header line `t,x,y,p`, one event per line, `t` in decimal µs. The
//! sensor geometry is not stored and has to be supplied by the caller. Rows
//! are sorted stably by `t` on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
const EVT1_HEADER: usize = 4 + 2 + 2 + 8;
const EVT1_RECORD: usize = 8 + 2 + 2 + 1;
pub const CSV_HEADER: &str = "t,x,y,p";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    Csv,
}

impl EventFormat {
    /// `.csv` → CSV, anything else → EVT1.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

/// Reads and validates an event file. `geometry` is `(width, height)` and is
/// required for CSV; for EVT1 it is ignored in favour of the header.
pub fn read_event_file(
    path: &Path,
    format: EventFormat,
    geometry: Option<(u16, u16)>,
) -> Result<EventStream> {
    let stream = read_event_file_unchecked(path, format, geometry)?;
    let report = stream.validate();
    if report.is_empty() {
        Ok(stream)
    } else {
        Err(Error::Validation(report))
    }
}

/// Like [`read_event_file`] but returns the raw stream without validating it.
/// CSV rows are still sorted by time.
pub fn read_event_file_unchecked(
    path: &Path,
    format: EventFormat,
    geometry: Option<(u16, u16)>,
) -> Result<EventStream> {
    let bytes = fs::read(path)?;
    match format {
        EventFormat::Binary => decode_evt1(&bytes),
        EventFormat::Csv => {
            let (w, h) = geometry.ok_or_else(|| {
                Error::arg("CSV event files need the sensor geometry (--width/--height)")
            })?;
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| Error::format(format!("CSV is not UTF-8: {e}")))?;
            decode_csv(text, w, h)
        }
    }
}

pub fn write_event_file(stream: &EventStream, path: &Path, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Binary => encode_evt1(stream)?,
        EventFormat::Csv => encode_csv(stream).into_bytes(),
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn encode_evt1(stream: &EventStream) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(EVT1_HEADER + EVT1_RECORD * stream.len());
    buf.extend_from_slice(EVT1_MAGIC);
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for (i, e) in stream.events.iter().enumerate() {
        if !(e.t >= 0.0 && e.t.fract() == 0.0 && e.t <= u64::MAX as f64) {
            return Err(Error::arg(format!(
                "event {i}: timestamp {} is not a whole number of microseconds",
                e.t
            )));
        }
        buf.extend_from_slice(&(e.t as u64).to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p as u8);
    }
    Ok(buf)
}

/// Decodes EVT1 bytes. Records are returned as stored; decreasing timestamps
/// are left for validation to report.
pub fn decode_evt1(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EVT1_HEADER || &bytes[..4] != EVT1_MAGIC {
        return Err(Error::format("missing EVT1 header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[EVT1_HEADER..];
    if (body.len() as u64) != count.saturating_mul(EVT1_RECORD as u64) {
        return Err(Error::format(format!(
            "EVT1 header announces {count} records but body holds {} bytes",
            body.len()
        )));
    }
    let events = body
        .chunks_exact(EVT1_RECORD)
        .map(|r| Event {
            t: u64::from_le_bytes(r[0..8].try_into().unwrap()) as f64,
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            p: r[12] as i8,
        })
        .collect();
    Ok(EventStream { width, height, events })
}

pub fn encode_csv(stream: &EventStream) -> String {
    let mut s = String::with_capacity(16 * (stream.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for e in &stream.events {
        // `{}` on f64 prints the shortest representation that parses back exactly.
        s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    s
}

pub fn decode_csv(text: &str, width: u16, height: u16) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        _ => return Err(Error::format(format!("CSV must start with header `{CSV_HEADER}`"))),
    }
    let mut events = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(format!("line {}: {what}: `{line}`", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let t: f64 = fields[0].parse().map_err(|_| bad("bad timestamp"))?;
        let x: u16 = fields[1].parse().map_err(|_| bad("bad x"))?;
        let y: u16 = fields[2].parse().map_err(|_| bad("bad y"))?;
        let p: i8 = fields[3].parse().map_err(|_| bad("bad polarity"))?;
        events.push(Event { x, y, t, p });
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(EventStream { width, height, events })
}
