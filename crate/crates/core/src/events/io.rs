use std::fs;
use std::path::Path;

use super::{Event, EventStream, FrameTensor, Polarity, CHANNELS};
use crate::error::{Error, Result};
use crate::io_util::Reader;

const EVENT_MAGIC: &[u8; 4] = b"EVST";
const FRAME_MAGIC: &[u8; 4] = b"FRMT";
const VERSION: u16 = 1;
const EVENT_RECORD: usize = 14;

fn check_header(r: &mut Reader<'_>, magic: &[u8; 4], path: &Path) -> Result<()> {
    let found = r
        .take(4)
        .map_err(|_| Error::Format(format!("{}: file too short for magic", path.display())))?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: expected magic {:?}, found {:?}",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    Ok(())
}

pub(crate) fn decode_events(bytes: &[u8], path: &Path) -> Result<EventStream> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, EVENT_MAGIC, path)?;
    let width = r.u16()?;
    let height = r.u16()?;
    let count = r.u64()?;
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(EVENT_RECORD))
        .ok_or_else(|| Error::Corruption(format!("{}: absurd count {count}", path.display())))?;
    if r.remaining() < expected {
        return Err(Error::Corruption(format!(
            "{}: header declares {count} records but only {} bytes follow",
            path.display(),
            r.remaining()
        )));
    }
    if r.remaining() > expected {
        return Err(Error::Corruption(format!(
            "{}: {} trailing bytes after {count} records",
            path.display(),
            r.remaining() - expected
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let t = r.u64()?;
        let x = r.u16()?;
        let y = r.u16()?;
        let polarity = Polarity::from_u8(r.u8()?)?;
        r.u8()?;
        events.push(Event { t, x, y, polarity });
    }
    EventStream::new(width, height, events)
}

pub(crate) fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + stream.len() * EVENT_RECORD);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity as u8);
        out.push(0);
    }
    out
}

/// Reads an `EVST` file.
pub fn parse_event_file(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_events(&bytes, path)
}

pub fn write_event_file(stream: &EventStream, path: &Path) -> Result<()> {
    fs::write(path, encode_events(stream)).map_err(|e| Error::io(path, e))
}

pub(crate) fn decode_frames(bytes: &[u8], path: &Path) -> Result<FrameTensor> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, FRAME_MAGIC, path)?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [t, c, h, w] = dims;
    if c != CHANNELS {
        return Err(Error::Format(format!(
            "{}: frame files carry {CHANNELS} polarity channels, header says {c}",
            path.display()
        )));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4) == Some(r.remaining()))
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: header shape ({t}, {c}, {h}, {w}) does not match {} payload bytes",
                path.display(),
                r.remaining()
            ))
        })?;
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    FrameTensor::new(t, h, w, data)
}

pub(crate) fn encode_frames(frames: &FrameTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + frames.data.len() * 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in frames.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &frames.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a `FRMT` file.
pub fn read_frame_file(path: &Path) -> Result<FrameTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frames(&bytes, path)
}

pub fn write_frame_file(frames: &FrameTensor, path: &Path) -> Result<()> {
    fs::write(path, encode_frames(frames)).map_err(|e| Error::io(path, e))
}
