//! One logical worker per level on a small pool of threads.
//!
//! Levels are dealt to threads in contiguous ascending blocks and each thread
//! walks its levels in ascending order at every step. A level only waits on
//! the level below within the same step (snapshots) and on the level above
//! from the previous step (messages), so ascending order never deadlocks.
//! Every value is computed by the same code as the sequential executor from
//! the same inputs, hence bit-identical results.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::events::EventSlice;
use crate::memory::{down_write_apply, DownMessage, MemoryState, Readout, Snapshot};
use crate::model::Model;
use crate::numerics::Real;
use crate::scheduler::exec::{timed, Inputs};
use crate::scheduler::{Action, ActionRecord, FrameSource, LatentBuffer, RunOutput, TraceEntry};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "HMNET_THREADS";

#[derive(Debug, Clone, Default)]
pub struct ParallelOptions {
    pub workers: usize,
    /// Sleep injected before every step of one level, for stress tests.
    pub delay: Option<(usize, Duration)>,
}

/// Worker count after applying the environment cap.
pub fn worker_cap(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    match cap {
        Some(c) => requested.min(c),
        None => requested,
    }
}

struct Links<T> {
    /// To the level above: `(step, snapshot of this level)`.
    snap_up: Option<Sender<(usize, Snapshot<T>)>>,
    /// From the level below.
    snap_in: Option<Receiver<(usize, Snapshot<T>)>>,
    /// To the level below.
    msg_down: Option<Sender<DownMessage<T>>>,
    /// From the level above.
    msg_in: Option<Receiver<DownMessage<T>>>,
}

struct LevelWorker<T> {
    state: MemoryState<T>,
    entries: Vec<TraceEntry>,
    links: Links<T>,
    lower: Option<(usize, Snapshot<T>)>,
    readouts: Vec<Readout<T>>,
    records: Vec<ActionRecord>,
    cursor: usize,
}

enum Produced<T> {
    Nothing,
    Readout(Readout<T>),
    Message(DownMessage<T>),
}

fn disconnected(level: usize, what: &str) -> Error {
    Error::Worker(format!("level {level}: {what} channel closed"))
}

impl<T: Real> LevelWorker<T> {
    /// Snapshot of the level below as of the end of `step`.
    fn lower_at(&mut self, step: usize) -> Result<Snapshot<T>> {
        let level = self.state.level;
        loop {
            if let Some((s, snap)) = &self.lower {
                if *s == step {
                    return Ok(snap.clone());
                }
                if *s > step {
                    return Err(Error::Worker(format!(
                        "level {level}: snapshot for step {step} already superseded"
                    )));
                }
            }
            let rx = self.links.snap_in.as_ref().ok_or_else(|| disconnected(level, "snapshot"))?;
            self.lower = Some(rx.recv().map_err(|_| disconnected(level, "snapshot"))?);
        }
    }

    fn run_step(&mut self, inp: &Inputs<'_, T>, step: usize) -> Result<()> {
        while self.cursor < self.entries.len() && self.entries[self.cursor].step == step {
            let e = self.entries[self.cursor];
            self.cursor += 1;
            let level = self.state.level;
            // receive before timing so waits are not billed to the action
            let lower = match e.action {
                Action::UpWrite => Some(self.lower_at(step - 1)?),
                Action::MakeDownMessage => Some(self.lower_at(step)?),
                _ => None,
            };
            let msg = match e.action {
                Action::DownApply => {
                    let rx = self.links.msg_in.as_ref().ok_or_else(|| disconnected(level, "message"))?;
                    Some(rx.recv().map_err(|_| disconnected(level, "message"))?)
                }
                _ => None,
            };
            let st = &mut self.state;
            let (out, rec) = timed(e, || {
                Ok(match e.action {
                    Action::DownApply => {
                        down_write_apply(st, msg.as_ref().expect("received"))?;
                        Produced::Nothing
                    }
                    Action::UpWrite => {
                        inp.up_write(st, lower.as_ref().expect("received"))?;
                        Produced::Nothing
                    }
                    Action::ImageWrite => {
                        inp.image_write(st, step)?;
                        Produced::Nothing
                    }
                    Action::EventWrite => {
                        inp.event_write(st, step)?;
                        Produced::Nothing
                    }
                    Action::Update => {
                        inp.update(st)?;
                        Produced::Nothing
                    }
                    Action::Readout => Produced::Readout(inp.readout(st, step)?),
                    Action::MakeDownMessage => {
                        Produced::Message(inp.make_message(st, lower.as_ref().expect("received"))?)
                    }
                    Action::MakeUpSnapshot => Produced::Nothing,
                })
            })?;
            match out {
                Produced::Readout(r) => self.readouts.push(r),
                Produced::Message(m) => {
                    let tx = self.links.msg_down.as_ref().ok_or_else(|| disconnected(level, "message"))?;
                    tx.send(m).map_err(|_| disconnected(level, "message"))?;
                }
                Produced::Nothing => {}
            }
            if e.action == Action::MakeUpSnapshot {
                let tx = self.links.snap_up.as_ref().ok_or_else(|| disconnected(level, "snapshot"))?;
                tx.send((step, self.state.snapshot())).map_err(|_| disconnected(level, "snapshot"))?;
            }
            self.records.push(rec);
        }
        Ok(())
    }
}

/// Runs the schedule with up to `opts.workers` threads (one per level at
/// most). Outputs are bit-identical to [`super::run_sequential`].
pub fn run_parallel<T: Real>(
    model: &Model<T>,
    slices: &[EventSlice],
    frames: Option<&dyn FrameSource<T>>,
    opts: &ParallelOptions,
) -> Result<RunOutput<T>> {
    if opts.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let (inp, trace) = Inputs::new(model, slices, frames)?;
    let levels = model.num_levels();
    let threads = worker_cap(opts.workers).clamp(1, levels);

    let mut snap_tx: Vec<Option<Sender<_>>> = Vec::new();
    let mut snap_rx: Vec<Option<Receiver<_>>> = vec![None];
    let mut msg_tx: Vec<Option<Sender<_>>> = vec![None];
    let mut msg_rx: Vec<Option<Receiver<_>>> = Vec::new();
    for _ in 1..levels {
        let (st, sr) = channel();
        snap_tx.push(Some(st));
        snap_rx.push(Some(sr));
        let (mt, mr) = channel();
        msg_tx.push(Some(mt));
        msg_rx.push(Some(mr));
    }
    snap_tx.push(None);
    msg_rx.push(None);

    let mut workers: Vec<LevelWorker<T>> = inp
        .initial()
        .into_iter()
        .enumerate()
        .map(|(i, state)| LevelWorker {
            entries: trace.entries.iter().copied().filter(|e| e.level == i + 1).collect(),
            links: Links {
                snap_up: snap_tx[i].take(),
                snap_in: snap_rx[i].take(),
                msg_down: msg_tx[i].take(),
                msg_in: msg_rx[i].take(),
            },
            state,
            lower: None,
            readouts: Vec::new(),
            records: Vec::new(),
            cursor: 0,
        })
        .collect();

    let per = levels.div_ceil(threads);
    let n_steps = trace.n_steps;
    let inp = &inp;
    let results: Vec<Result<Vec<LevelWorker<T>>>> = thread::scope(|s| {
        let mut handles = Vec::new();
        while !workers.is_empty() {
            let rest = workers.split_off(per.min(workers.len()));
            let mut group = std::mem::replace(&mut workers, rest);
            let delay = opts.delay;
            handles.push(s.spawn(move || -> Result<Vec<LevelWorker<T>>> {
                for step in 0..=n_steps {
                    for w in group.iter_mut() {
                        if let Some((l, d)) = delay {
                            if l == w.state.level {
                                thread::sleep(d);
                            }
                        }
                        // on error, dropping the group closes its channels so peers stop too
                        w.run_step(inp, step)?;
                    }
                }
                Ok(group)
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("worker panicked".into()))))
            .collect()
    });

    let mut done = Vec::with_capacity(levels);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(g) => done.extend(g),
            Err(e) => {
                // a closed channel is usually a symptom; keep the root cause
                if first_err.is_none() || matches!(first_err, Some(Error::Worker(_))) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let mut records: Vec<ActionRecord> = done.iter().flat_map(|w| w.records.iter().copied()).collect();
    records.sort_by_key(|r| r.entry.sort_key());
    let buffers = (0..=n_steps)
        .map(|n| LatentBuffer {
            levels: done
                .iter()
                .map(|w| {
                    w.readouts
                        .iter()
                        .rev()
                        .find(|r| r.step <= n)
                        .expect("step 0 readout")
                        .clone()
                })
                .collect(),
        })
        .collect();
    let states = done.into_iter().map(|w| w.state).collect();
    Ok(RunOutput {
        buffers,
        states,
        records,
    })
}
