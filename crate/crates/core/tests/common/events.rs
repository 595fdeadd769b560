use std::collections::BTreeMap;

use proptest::prelude::*;

use hmnet::events::{
    build_window_index, decode_events, encode_events, slice_stream, Event, EventFormat, EventStream, Polarity,
};
use hmnet::numerics::ceil_div;

/// Valid streams of exactly `n` events on sensors up to 300 x 300.
pub fn arb_stream(n: impl Into<proptest::collection::SizeRange>) -> impl Strategy<Value = EventStream> {
    let n = n.into();
    (1u16..=300, 1u16..=300).prop_flat_map(move |(w, h)| {
        proptest::collection::vec((0u64..3000, 0..w, 0..h, any::<bool>()), n.clone()).prop_map(move |raw| {
            let mut t = 0;
            let events = raw
                .into_iter()
                .map(|(gap, x, y, on)| {
                    t += gap;
                    Event::new(t, x, y, if on { Polarity::On } else { Polarity::Off })
                })
                .collect();
            EventStream::new(w, h, events).expect("generated stream is valid")
        })
    })
}

/// Codec round-trips in both directions, lossless right-closed slicing, and
/// window indices that partition each slice exactly as floor division does.
pub fn check_invariants(s: &EventStream, dt: u64, stride: usize) -> Result<(), String> {
    let csv = EventFormat::Csv {
        width: s.width(),
        height: s.height(),
    };
    for format in [csv, EventFormat::Hmev] {
        let bytes = encode_events(s, format);
        let back = decode_events(&bytes, format).map_err(|e| e.to_string())?;
        if &back != s {
            return Err(format!("{format:?} round trip changed the stream"));
        }
        if encode_events(&back, format) != bytes {
            return Err(format!("{format:?} re-encoding changed the bytes"));
        }
    }

    let slices = slice_stream(s, dt).map_err(|e| e.to_string())?;
    let joined: Vec<Event> = slices.iter().flat_map(|x| x.events.iter().copied()).collect();
    if joined != s.events() {
        return Err("slices do not concatenate to the stream".into());
    }
    for (n, sl) in slices.iter().enumerate() {
        if sl.t_start != n as u64 * dt || sl.duration() != dt {
            return Err(format!("slice {n} spans ({}, {}]", sl.t_start, sl.t_end));
        }
        if let Some(e) = sl.events.iter().find(|e| !(e.t > sl.t_start || e.t == 0) || e.t > sl.t_end) {
            return Err(format!("event at {} outside slice {n}", e.t));
        }
    }
    if s.events().last().is_some_and(|e| slices.last().unwrap().t_end - e.t >= dt) {
        return Err("trailing empty slice".into());
    }

    let grid = (ceil_div(s.height() as usize, stride), ceil_div(s.width() as usize, stride));
    for sl in &slices {
        let idx = build_window_index(sl, stride, grid).map_err(|e| e.to_string())?;
        let mut oracle: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, e) in sl.events.iter().enumerate() {
            oracle.entry((e.y as usize / stride, e.x as usize / stride)).or_default().push(i);
        }
        let got: BTreeMap<(usize, usize), Vec<usize>> =
            idx.cells.iter().map(|c| ((c.row, c.col), c.events.clone())).collect();
        if idx.cells.len() != got.len() || got != oracle {
            return Err(format!("window index differs from floor division at t_end {}", sl.t_end));
        }
        if idx.total_events() != sl.len() {
            return Err("window index is not a partition".into());
        }
    }
    Ok(())
}
