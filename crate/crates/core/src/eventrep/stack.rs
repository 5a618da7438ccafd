use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// One brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub x: u32,
    pub y: u32,
    /// Microseconds.
    pub t: u64,
    /// `+1` or `-1`.
    pub p: i8,
}

/// Half-open time interval `[start, end)` in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.start && t < self.end
    }
}

/// Raw per-polarity counts before normalization. Channel 0 counts positive
/// events, channel 1 negative ones.
#[derive(Clone, Debug, PartialEq)]
pub struct EventCounts(pub Image);

impl EventCounts {
    pub fn add(&self, other: &EventCounts) -> EventCounts {
        let mut out = self.0.clone();
        for (a, b) in out.data_mut().iter_mut().zip(other.0.data()) {
            *a += b;
        }
        EventCounts(out)
    }

    /// Divides by the frame's maximum count; an all-zero frame stays zero.
    pub fn normalize(&self) -> EventFrame {
        let m = self.0.max_value();
        if m == 0.0 {
            EventFrame(self.0.clone())
        } else {
            EventFrame(self.0.scale(1.0 / m))
        }
    }
}

/// Two-channel stacked event image (positive, negative) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame(pub Image);

impl EventFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        EventFrame(Image::new(height, width, 2))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.0.get(y, x, channel)
    }
}

/// Counts events inside `window` per pixel and polarity.
///
/// Rejects streams that are not sorted by timestamp and events whose
/// coordinates fall outside `resolution = (height, width)`.
pub fn count_events(events: &[RawEvent], window: TimeWindow, resolution: (usize, usize)) -> Result<EventCounts> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("event resolution must be positive, got {h}x{w}")));
    }
    let mut img = Image::new(h, w, 2);
    let mut last_t = 0u64;
    for (i, e) in events.iter().enumerate() {
        if i > 0 && e.t < last_t {
            return Err(Error::Data(format!("event stream is not sorted by time at index {i} ({} < {last_t})", e.t)));
        }
        last_t = e.t;
        if e.x as usize >= w || e.y as usize >= h {
            return Err(Error::Data(format!("event at ({}, {}) lies outside {w}x{h}", e.x, e.y)));
        }
        let c = match e.p {
            1 => 0,
            -1 => 1,
            p => return Err(Error::Data(format!("event polarity must be +1 or -1, got {p}"))),
        };
        if window.contains(e.t) {
            let (y, x) = (e.y as usize, e.x as usize);
            img.set(y, x, c, img.get(y, x, c) + 1.0);
        }
    }
    Ok(EventCounts(img))
}

/// Stacks the events of `window` into a normalized two-channel count image.
pub fn stack_events(events: &[RawEvent], window: TimeWindow, resolution: (usize, usize)) -> Result<EventFrame> {
    Ok(count_events(events, window, resolution)?.normalize())
}
