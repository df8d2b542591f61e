//! Event streams and their conversion into dense time frames.
//!
//! A DVS sensor emits `(t, x, y, polarity)` records asynchronously. To feed a
//! spiking network the stream is split into `T` equal-duration windows and
//! the events of each window are counted per pixel and polarity, giving a
//! `(T, 2, H, W)` [`FrameTensor`]. Channel 0 holds OFF (negative) counts,
//! channel 1 ON (positive) counts.

mod io;
mod synth;

pub use io::{parse_event_file, read_frame_file, write_event_file, write_frame_file};
pub use synth::{gen_synthetic_stream, GeneratorParams};

use crate::error::{Error, Result};

/// Sign of a brightness change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Polarity::Off),
            1 => Ok(Polarity::On),
            other => Err(Error::Validation(format!("polarity must be 0 or 1, got {other}"))),
        }
    }
}

/// One sensor event; `t` is in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

/// Time-ordered events of one recording together with the sensor geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and ordering.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "sensor size must be positive, got {width}x{height}"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::Validation(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
        }
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Validation(format!(
                "events not time-ordered at index {}",
                i + 1
            )));
        }
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u16, height: u16) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// How the recording is split into windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinningConfig {
    pub num_windows: usize,
    /// Explicit half-open span `[start, end)` in microseconds. `None` uses
    /// the closed span `[t_first, t_last]` of the stream, with an event at
    /// `t_last` assigned to the final window.
    pub span: Option<(u64, u64)>,
}

impl BinningConfig {
    pub fn new(num_windows: usize) -> Self {
        BinningConfig {
            num_windows,
            span: None,
        }
    }

    pub fn with_span(mut self, start: u64, end: u64) -> Self {
        self.span = Some((start, end));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_windows == 0 {
            return Err(Error::Config("number of time windows must be at least 1".into()));
        }
        if let Some((s, e)) = self.span {
            if e <= s {
                return Err(Error::Config(format!("empty binning span [{s}, {e})")));
            }
        }
        Ok(())
    }
}

/// Dense `(T, 2, H, W)` event counts stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    steps: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Polarity channels per frame.
pub const CHANNELS: usize = 2;

impl FrameTensor {
    pub fn zeros(steps: usize, height: usize, width: usize) -> Self {
        FrameTensor {
            steps,
            height,
            width,
            data: vec![0.0; steps * CHANNELS * height * width],
        }
    }

    pub fn new(steps: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != steps * CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "frame data of length {} does not match ({steps}, 2, {height}, {width})",
                data.len()
            )));
        }
        Ok(FrameTensor {
            steps,
            height,
            width,
            data,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[T, 2, H, W]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.steps, CHANNELS, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    fn offset(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * CHANNELS + c) * self.height + y) * self.width + x
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(t, c, y, x)]
    }

    /// One `H x W` plane.
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[(t * CHANNELS + c) * n..][..n]
    }

    pub fn plane_mut(&mut self, t: usize, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[(t * CHANNELS + c) * n..][..n]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Output of [`bin_events`].
#[derive(Clone, Debug, PartialEq)]
pub struct Binned {
    pub frames: FrameTensor,
    /// Events outside an explicit span.
    pub dropped: usize,
}

/// Window of an event at offset `dt` into a span of `duration`, or `None`
/// when it falls outside. `closed` includes the right edge in the last
/// window.
fn window_index(dt: u64, duration: u64, windows: usize, closed: bool) -> Option<usize> {
    if duration == 0 {
        return (dt == 0).then_some(0);
    }
    if dt > duration || (dt == duration && !closed) {
        return None;
    }
    let w = (dt as u128 * windows as u128 / duration as u128) as usize;
    Some(w.min(windows - 1))
}

/// Counts events per window, polarity and pixel.
pub fn bin_events(stream: &EventStream, cfg: &BinningConfig) -> Result<Binned> {
    cfg.validate()?;
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut frames = FrameTensor::zeros(cfg.num_windows, h, w);
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return Ok(Binned { frames, dropped: 0 });
    };
    let (start, duration, closed) = match cfg.span {
        Some((s, e)) => (s, e - s, false),
        None => (first.t, last.t - first.t, true),
    };
    let mut dropped = 0;
    for e in &stream.events {
        let slot = e
            .t
            .checked_sub(start)
            .and_then(|dt| window_index(dt, duration, cfg.num_windows, closed));
        match slot {
            Some(win) => {
                let off = frames.offset(win, e.polarity.index(), e.y as usize, e.x as usize);
                frames.data[off] += 1.0;
            }
            None => dropped += 1,
        }
    }
    Ok(Binned { frames, dropped })
}
