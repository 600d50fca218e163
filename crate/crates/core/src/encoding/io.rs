//! Event file formats.
//!
//! Text: one event per line, `t_us x y p` separated by whitespace, with
//! `p` in {-1, 1}. Blank lines and lines starting with `#` are skipped.
//!
//! Binary: the ASCII magic `EVT1` followed by packed little-endian
//! records `(u64 t_us, u16 x, u16 y, i8 p)`, 13 bytes each.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Event;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVT1";
const RECORD: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Text,
    Binary,
}

impl EventFormat {
    /// `.bin` and `.evt` are binary, anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("evt") => Self::Binary,
            _ => Self::Text,
        }
    }
}

impl std::str::FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(Self::Text),
            "binary" | "bin" => Ok(Self::Binary),
            other => Err(Error::Config(format!("unknown event format `{other}`"))),
        }
    }
}

pub fn write_text(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, e.p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_text_line(line: &str) -> std::result::Result<Event, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields `t_us x y p`, found {}", fields.len()));
    }
    let t = fields[0]
        .parse::<u64>()
        .map_err(|e| format!("timestamp `{}`: {e}", fields[0]))?;
    let x = fields[1]
        .parse::<u16>()
        .map_err(|e| format!("x `{}`: {e}", fields[1]))?;
    let y = fields[2]
        .parse::<u16>()
        .map_err(|e| format!("y `{}`: {e}", fields[2]))?;
    let p = fields[3]
        .parse::<i8>()
        .map_err(|e| format!("polarity `{}`: {e}", fields[3]))?;
    Event::new(t, x, y, p).map_err(|e| e.to_string())
}

pub fn read_text(path: &Path) -> Result<Vec<Event>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_text_line(trimmed).map_err(|message| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn write_binary(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    for e in events {
        w.write_all(&e.t.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&e.p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a binary event file; parse errors report the 1-based record
/// number in place of a line number.
pub fn read_binary(path: &Path) -> Result<Vec<Event>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != BINARY_MAGIC {
        return Err(err(0, "missing EVT1 header".into()));
    }
    let body = &bytes[4..];
    if body.len() % RECORD != 0 {
        return Err(err(
            body.len() / RECORD + 1,
            format!("truncated record ({} trailing bytes)", body.len() % RECORD),
        ));
    }
    body.chunks_exact(RECORD)
        .enumerate()
        .map(|(i, r)| {
            let t = u64::from_le_bytes(r[0..8].try_into().expect("8 bytes"));
            let x = u16::from_le_bytes([r[8], r[9]]);
            let y = u16::from_le_bytes([r[10], r[11]]);
            let p = r[12] as i8;
            Event::new(t, x, y, p).map_err(|e| err(i + 1, e.to_string()))
        })
        .collect()
}

pub fn read_events(path: &Path, format: EventFormat) -> Result<Vec<Event>> {
    match format {
        EventFormat::Text => read_text(path),
        EventFormat::Binary => read_binary(path),
    }
}

pub fn write_events(path: &Path, format: EventFormat, events: &[Event]) -> Result<()> {
    match format {
        EventFormat::Text => write_text(path, events),
        EventFormat::Binary => write_binary(path, events),
    }
}
