//! Event data model, file codecs, synthetic scenes, time slicing and
//! per-cell window indexing.

pub mod codec;
pub mod slice;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{decode_events, encode_events, EventFormat};
pub use slice::{build_window_index, slice_stream, EventSlice, WindowIndex};
pub use synth::{generate_synthetic_stream, GroundTruth, ObjectShape, SceneObject, SceneParams};

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Off => -1,
            Polarity::On => 1,
        }
    }
}

impl TryFrom<i64> for Polarity {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, String> {
        match v {
            -1 => Ok(Polarity::Off),
            1 => Ok(Polarity::On),
            other => Err(format!("polarity {other} not in {{-1, +1}}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Event { t, x, y, p }
    }
}

/// Time-ordered events from a `width x height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and timestamp order.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        validate(width, height, &events)?;
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
        }
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

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

pub(crate) fn validate(width: u16, height: u16, events: &[Event]) -> Result<()> {
    let mut last = 0u64;
    for (i, e) in events.iter().enumerate() {
        if e.x >= width || e.y >= height {
            return Err(Error::Decode {
                record: i,
                reason: format!(
                    "coordinates ({}, {}) outside {}x{} sensor",
                    e.x, e.y, width, height
                ),
            });
        }
        if e.t < last {
            return Err(Error::Decode {
                record: i,
                reason: format!("timestamp {} decreases (previous {last})", e.t),
            });
        }
        last = e.t;
    }
    Ok(())
}
