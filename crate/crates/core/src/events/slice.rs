use crate::error::{Error, Result};
use crate::events::{Event, EventStream};

/// Events with `t_start < t <= t_end`.
///
/// The first slice of a stream also admits `t == 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSlice {
    pub t_start: u64,
    pub t_end: u64,
    pub events: Vec<Event>,
}

impl EventSlice {
    pub fn empty(t_start: u64, t_end: u64) -> Self {
        EventSlice {
            t_start,
            t_end,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }
}

/// Cuts a stream into consecutive right-closed intervals `((n-1)dt, n dt]`,
/// `n = 1, 2, ...`, up to the interval containing the last event. Empty
/// intermediate intervals are emitted as empty slices.
pub fn slice_stream(stream: &EventStream, dt: u64) -> Result<Vec<EventSlice>> {
    if dt == 0 {
        return Err(Error::Config("time step must be positive".into()));
    }
    let Some(last) = stream.events().last() else {
        return Ok(Vec::new());
    };
    let n_slices = last.t.div_ceil(dt).max(1) as usize;
    let mut slices: Vec<EventSlice> = (0..n_slices as u64)
        .map(|n| EventSlice::empty(n * dt, (n + 1) * dt))
        .collect();
    for &e in stream.events() {
        let idx = if e.t == 0 { 0 } else { ((e.t - 1) / dt) as usize };
        slices[idx].events.push(e);
    }
    Ok(slices)
}

/// Events of one slice grouped by the `s x s` window (memory cell) they fall in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// Active cells in row-major order, each with the slice-order indices of
    /// its events.
    pub cells: Vec<ActiveCell>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveCell {
    pub row: usize,
    pub col: usize,
    pub events: Vec<usize>,
}

impl WindowIndex {
    pub fn active_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn total_events(&self) -> usize {
        self.cells.iter().map(|c| c.events.len()).sum()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&ActiveCell> {
        self.cells
            .binary_search_by(|c| (c.row, c.col).cmp(&(row, col)))
            .ok()
            .map(|i| &self.cells[i])
    }
}

/// Assigns each event to cell `(y / s, x / s)`. Windows on the right or
/// bottom edge may cover fewer than `s x s` pixels.
pub fn build_window_index(
    slice: &EventSlice,
    stride: usize,
    grid: (usize, usize),
) -> Result<WindowIndex> {
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    let (rows, cols) = grid;
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); rows * cols];
    for (i, e) in slice.events.iter().enumerate() {
        let (r, c) = (e.y as usize / stride, e.x as usize / stride);
        if r >= rows || c >= cols {
            return Err(Error::OutOfBounds {
                index: i,
                x: e.x,
                y: e.y,
                rows,
                cols,
                stride,
            });
        }
        per_cell[r * cols + c].push(i);
    }
    let cells = per_cell
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(idx, events)| ActiveCell {
            row: idx / cols,
            col: idx % cols,
            events,
        })
        .collect();
    Ok(WindowIndex {
        stride,
        rows,
        cols,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;

    fn ev(t: u64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, Polarity::On)
    }

    #[test]
    fn boundary_event_closes_its_slice() {
        let s = EventStream::new(8, 8, vec![ev(1000, 0, 0), ev(5000, 1, 0), ev(5001, 2, 0)]).unwrap();
        let slices = slice_stream(&s, 5000).unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(
            slices[0].events.iter().map(|e| e.t).collect::<Vec<_>>(),
            vec![1000, 5000]
        );
        assert_eq!(slices[1].events.iter().map(|e| e.t).collect::<Vec<_>>(), vec![5001]);
        assert_eq!((slices[1].t_start, slices[1].t_end), (5000, 10000));
    }

    #[test]
    fn empty_stream_has_no_slices_and_zero_step_errors() {
        let s = EventStream::empty(4, 4);
        assert!(slice_stream(&s, 5000).unwrap().is_empty());
        assert!(slice_stream(&s, 0).is_err());
    }

    #[test]
    fn gaps_produce_empty_slices() {
        let s = EventStream::new(8, 8, vec![ev(0, 0, 0), ev(12_000, 0, 0)]).unwrap();
        let slices = slice_stream(&s, 5000).unwrap();
        assert_eq!(slices.iter().map(EventSlice::len).collect::<Vec<_>>(), vec![1, 0, 1]);
    }

    #[test]
    fn floor_division_cell() {
        let slice = EventSlice {
            t_start: 0,
            t_end: 10,
            events: vec![ev(1, 5, 9)],
        };
        let idx = build_window_index(&slice, 4, (4, 4)).unwrap();
        assert_eq!(idx.cells.len(), 1);
        assert_eq!((idx.cells[0].row, idx.cells[0].col), (2, 1));
    }

    #[test]
    fn empty_slice_and_out_of_bounds() {
        let idx = build_window_index(&EventSlice::empty(0, 5), 4, (2, 2)).unwrap();
        assert_eq!(idx.active_cells(), 0);
        let slice = EventSlice {
            t_start: 0,
            t_end: 10,
            events: vec![ev(1, 8, 0)],
        };
        assert!(matches!(
            build_window_index(&slice, 4, (2, 2)),
            Err(Error::OutOfBounds { index: 0, .. })
        ));
    }

    #[test]
    fn partial_edge_window_holds_edge_pixels() {
        // 10 px wide at stride 4 -> 3 columns; pixel 9 lands in the last one
        let slice = EventSlice {
            t_start: 0,
            t_end: 10,
            events: vec![ev(1, 9, 9)],
        };
        let idx = build_window_index(&slice, 4, (3, 3)).unwrap();
        assert_eq!((idx.cells[0].row, idx.cells[0].col), (2, 2));
    }
}
