use std::time::Instant;

use crate::error::{Error, Result};
use crate::esca::esca_write;
use crate::events::{EventSlice, SceneParams};
use crate::memory::{
    down_write_apply, down_write_make_message, image_write, readout, up_write, update_state,
    DownMessage, MemoryState, Readout, Snapshot,
};
use crate::model::Model;
use crate::numerics::{macs, Real, Tensor};
use crate::scheduler::{compile_schedule, Action, ScheduleConfig, ScheduleTrace, TraceEntry};

/// Frames for sensor fusion, queried at the start time of a step.
pub trait FrameSource<T>: Sync {
    fn frame(&self, t_us: u64) -> Result<Tensor<T>>;
}

impl<T: Real> FrameSource<T> for SceneParams {
    fn frame(&self, t_us: u64) -> Result<Tensor<T>> {
        Ok(self.render_image(t_us))
    }
}

/// Latest readout of every level after a step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBuffer<T> {
    pub levels: Vec<Readout<T>>,
}

impl<T: Real> LatentBuffer<T> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.step == b.step && a.o.tensor.bit_eq(&b.o.tensor))
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|r| r.o.tensor.all_finite())
    }
}

/// Cost of one executed action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionRecord {
    pub entry: TraceEntry,
    pub macs: u64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    /// Buffer after each step `0..=n_steps`.
    pub buffers: Vec<LatentBuffer<T>>,
    pub states: Vec<MemoryState<T>>,
    /// Executed actions in canonical order.
    pub records: Vec<ActionRecord>,
}

impl<T: Real> RunOutput<T> {
    pub fn executed(&self) -> Vec<TraceEntry> {
        self.records.iter().map(|r| r.entry).collect()
    }

    /// Buffers and final states are bit-identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.buffers.len() == other.buffers.len()
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| a.bit_eq(b))
            && self.states.len() == other.states.len()
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|(a, b)| a.version() == b.version() && a.z().tensor.bit_eq(&b.z().tensor))
    }
}

pub(crate) struct Inputs<'a, T> {
    pub model: &'a Model<T>,
    pub slices: &'a [EventSlice],
    pub frames: Option<&'a dyn FrameSource<T>>,
}

impl<'a, T: Real> Inputs<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        slices: &'a [EventSlice],
        frames: Option<&'a dyn FrameSource<T>>,
    ) -> Result<(Self, ScheduleTrace)> {
        if slices.is_empty() {
            return Err(Error::Config("no event slices to run".into()));
        }
        let cfg = ScheduleConfig::from_model(&model.config)?;
        if cfg.image_period.is_some() && (frames.is_none() || model.image.is_none()) {
            return Err(Error::Config(
                "image fusion is enabled but no frame source was given".into(),
            ));
        }
        let trace = compile_schedule(&cfg, slices.len())?;
        Ok((
            Inputs {
                model,
                slices,
                frames,
            },
            trace,
        ))
    }

    fn slice(&self, step: usize) -> &EventSlice {
        &self.slices[step - 1]
    }

    pub fn event_write(&self, st: &mut MemoryState<T>, step: usize) -> Result<()> {
        let m = self.model;
        let (z, _) = esca_write(
            &m.esca,
            &m.store,
            st.z(),
            self.slice(step),
            m.config.dt_us,
            m.config.event_gate,
        )?;
        st.set(z)
    }

    pub fn image_write(&self, st: &mut MemoryState<T>, step: usize) -> Result<()> {
        let p = self.model.image.as_ref().expect("checked in new");
        let frames = self.frames.expect("checked in new");
        let img = frames.frame(self.slice(step).t_start)?;
        let (z, _) = image_write(p, &self.model.store, st.z(), &img)?;
        st.set(z)
    }

    pub fn update(&self, st: &mut MemoryState<T>) -> Result<()> {
        let p = &self.model.level(st.level).update;
        let (z, _) = update_state(p, &self.model.store, st.z())?;
        st.set(z)
    }

    pub fn readout(&self, st: &MemoryState<T>, step: usize) -> Result<Readout<T>> {
        let p = &self.model.level(st.level).readout;
        let (o, _) = readout(p, &self.model.store, st.z())?;
        Ok(Readout { o, step })
    }

    pub fn up_write(&self, st: &mut MemoryState<T>, lower: &Snapshot<T>) -> Result<()> {
        let p = self.model.level(st.level).up.as_ref().expect("level > 1");
        let (z, _) = up_write(p, &self.model.store, st.z(), &lower.z)?;
        st.set(z)
    }

    pub fn make_message(&self, hi: &MemoryState<T>, lower: &Snapshot<T>) -> Result<DownMessage<T>> {
        let p = self.model.level(lower.level).down.as_ref().expect("level below top");
        down_write_make_message(p, &self.model.store, hi.z(), lower)
    }

    pub fn initial(&self) -> Vec<MemoryState<T>> {
        self.model.initial_states()
    }
}

/// Times an action and counts its MACs on the current thread.
pub(crate) fn timed<R>(entry: TraceEntry, f: impl FnOnce() -> Result<R>) -> Result<(R, ActionRecord)> {
    let t0 = Instant::now();
    let (r, n) = macs::measure(f);
    let wall_ns = t0.elapsed().as_nanos() as u64;
    Ok((
        r?,
        ActionRecord {
            entry,
            macs: n,
            wall_ns,
        },
    ))
}

fn missing(what: &str, e: &TraceEntry) -> Error {
    Error::Worker(format!("{what} missing for {} at step {} level {}", e.action, e.step, e.level))
}

/// Single-worker reference executor.
pub fn run_sequential<T: Real>(
    model: &Model<T>,
    slices: &[EventSlice],
    frames: Option<&dyn FrameSource<T>>,
) -> Result<RunOutput<T>> {
    let (inp, trace) = Inputs::new(model, slices, frames)?;
    let levels = model.num_levels();
    let mut states = inp.initial();
    let mut snapshots: Vec<Option<Snapshot<T>>> = vec![None; levels + 1];
    let mut pending: Vec<Option<DownMessage<T>>> = vec![None; levels + 1];
    let mut current: Vec<Option<Readout<T>>> = vec![None; levels + 1];
    let mut buffers = Vec::with_capacity(trace.n_steps + 1);
    let mut records = Vec::with_capacity(trace.entries.len());

    let mut i = 0;
    for step in 0..=trace.n_steps {
        while i < trace.entries.len() && trace.entries[i].step == step {
            let e = trace.entries[i];
            i += 1;
            let l = e.level;
            let ((), rec) = timed(e, || {
                match e.action {
                    Action::DownApply => {
                        let msg = pending[l].take().ok_or_else(|| missing("message", &e))?;
                        down_write_apply(&mut states[l - 1], &msg)?;
                    }
                    Action::UpWrite => {
                        let snap = snapshots[l - 1].as_ref().ok_or_else(|| missing("snapshot", &e))?;
                        inp.up_write(&mut states[l - 1], snap)?;
                    }
                    Action::ImageWrite => inp.image_write(&mut states[l - 1], step)?,
                    Action::EventWrite => inp.event_write(&mut states[0], step)?,
                    Action::Update => inp.update(&mut states[l - 1])?,
                    Action::Readout => current[l] = Some(inp.readout(&states[l - 1], step)?),
                    Action::MakeDownMessage => {
                        let lower = states[l - 2].snapshot();
                        pending[l - 1] = Some(inp.make_message(&states[l - 1], &lower)?);
                    }
                    Action::MakeUpSnapshot => snapshots[l] = Some(states[l - 1].snapshot()),
                }
                Ok(())
            })?;
            records.push(rec);
        }
        buffers.push(LatentBuffer {
            levels: current[1..].iter().map(|r| r.clone().expect("step 0 reads every level")).collect(),
        });
    }
    Ok(RunOutput {
        buffers,
        states,
        records,
    })
}
