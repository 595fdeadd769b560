//! Multi-rate schedule: which level does what at every time step.
//!
//! Level `l` runs on a cycle of `C_l` steps. Within a step, actions follow a
//! fixed phase order:
//!
//! 1. `down_apply` of pending messages, ascending level
//! 2. `up_write` at `n = 1 (mod C_l)`, `n > C_l`, descending level
//! 3. `image_write` into the top level at `n = 1 (mod image period)`
//! 4. `event_write` into level 1
//! 5. `update` at `n = 1 (mod C_l)`
//! 6. `readout` at `n = 0 (mod C_l)`
//! 7. `make_down_message` from `l+1` to `l` at `n = 0 (mod C_{l+1})`
//! 8. `make_up_snapshot` of `l-1` at `n = 0 (mod C_l)`
//!
//! Step 0 holds one initialization readout per level. A message made at step
//! `n` is applied at step `n + 1`; an up-write at step `n` consumes the
//! snapshot taken at step `n - 1`. Cross-level reads never touch live state,
//! which is what lets the parallel executor match the sequential one bit for bit.

mod bench;
mod cost;
mod exec;
mod parallel;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub use bench::{benchmark_latency, BenchMode, BenchReport, LevelStats, StepStats};
pub use cost::{action_macs, amortized_macs, count_macs, EventLoad, MacCount};
pub use exec::{run_sequential, ActionRecord, FrameSource, LatentBuffer, RunOutput};
pub use parallel::{run_parallel, worker_cap, ParallelOptions, THREADS_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    DownApply,
    UpWrite,
    ImageWrite,
    EventWrite,
    Update,
    Readout,
    MakeDownMessage,
    MakeUpSnapshot,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::DownApply,
        Action::UpWrite,
        Action::ImageWrite,
        Action::EventWrite,
        Action::Update,
        Action::Readout,
        Action::MakeDownMessage,
        Action::MakeUpSnapshot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::DownApply => "down_apply",
            Action::UpWrite => "up_write",
            Action::ImageWrite => "image_write",
            Action::EventWrite => "event_write",
            Action::Update => "update",
            Action::Readout => "readout",
            Action::MakeDownMessage => "make_down_message",
            Action::MakeUpSnapshot => "make_up_snapshot",
        }
    }

    /// 1-based phase within a step.
    pub fn phase(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "action",
                name: s.to_string(),
            })
    }
}

/// One scheduled action.
///
/// `level` is the level doing the work: the target for writes, updates,
/// readouts and `down_apply`; the source (upper) level for
/// `make_down_message`; the snapshotted (lower) level for `make_up_snapshot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEntry {
    pub step: usize,
    pub level: usize,
    pub action: Action,
}

impl TraceEntry {
    pub fn new(step: usize, level: usize, action: Action) -> Self {
        TraceEntry { step, level, action }
    }

    /// Canonical position; up-writes run top-down, everything else bottom-up.
    pub fn sort_key(&self) -> (usize, usize, isize) {
        let lvl = if self.action == Action::UpWrite {
            -(self.level as isize)
        } else {
            self.level as isize
        };
        (self.step, self.action.phase(), lvl)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub cycles: Vec<usize>,
    pub down_write: bool,
    /// Steps between frame writes; `None` disables fusion.
    pub image_period: Option<usize>,
}

impl ScheduleConfig {
    pub fn new(cycles: Vec<usize>, down_write: bool, image_period: Option<usize>) -> Result<Self> {
        if cycles.is_empty() || cycles[0] != 1 {
            return Err(Error::Config(format!("cycles {cycles:?} must start with 1")));
        }
        if cycles.windows(2).any(|w| w[0] == 0 || w[1] % w[0] != 0) {
            return Err(Error::Config(format!("each cycle must divide the next, got {cycles:?}")));
        }
        if image_period == Some(0) {
            return Err(Error::Config("image period must be positive".into()));
        }
        Ok(ScheduleConfig {
            cycles,
            down_write,
            image_period,
        })
    }

    pub fn from_model(c: &ModelConfig) -> Result<Self> {
        ScheduleConfig::new(c.cycles.clone(), c.down_write, c.image_period_steps())
    }

    pub fn levels(&self) -> usize {
        self.cycles.len()
    }

    fn cycle(&self, level: usize) -> usize {
        self.cycles[level - 1]
    }

    /// Actions of step `n` in canonical order.
    pub fn step_actions(&self, n: usize) -> Vec<TraceEntry> {
        let levels = self.levels();
        let mut out = Vec::new();
        let mut push = |level, action| out.push(TraceEntry::new(n, level, action));
        if n == 0 {
            for l in 1..=levels {
                push(l, Action::Readout);
            }
            return out;
        }
        let starts = |c: usize| n % c == 1 % c && n > c;
        if self.down_write {
            for l in 1..levels {
                if starts(self.cycle(l + 1)) {
                    push(l, Action::DownApply);
                }
            }
        }
        for l in (2..=levels).rev() {
            if starts(self.cycle(l)) {
                push(l, Action::UpWrite);
            }
        }
        if let Some(p) = self.image_period {
            if n % p == 1 % p {
                push(levels, Action::ImageWrite);
            }
        }
        push(1, Action::EventWrite);
        for l in 1..=levels {
            if n % self.cycle(l) == 1 % self.cycle(l) {
                push(l, Action::Update);
            }
        }
        for l in 1..=levels {
            if n % self.cycle(l) == 0 {
                push(l, Action::Readout);
            }
        }
        if self.down_write {
            for l in 1..levels {
                if n % self.cycle(l + 1) == 0 {
                    push(l + 1, Action::MakeDownMessage);
                }
            }
        }
        for l in 2..=levels {
            if n % self.cycle(l) == 0 {
                push(l - 1, Action::MakeUpSnapshot);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub n_steps: usize,
    pub entries: Vec<TraceEntry>,
}

impl ScheduleTrace {
    pub const CSV_HEADER: &'static str = "step,level,action";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.step, e.level, e.action));
        }
        s
    }

    pub fn at(&self, step: usize) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.step == step)
    }

    /// Steps at which `level` performs `action`.
    pub fn steps_of(&self, level: usize, action: Action) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.level == level && e.action == action)
            .map(|e| e.step)
            .collect()
    }
}

/// Steps `0..=n_steps` of the schedule.
pub fn compile_schedule(config: &ScheduleConfig, n_steps: usize) -> Result<ScheduleTrace> {
    if n_steps == 0 {
        return Err(Error::Config("a schedule needs at least one step".into()));
    }
    let entries = (0..=n_steps).flat_map(|n| config.step_actions(n)).collect();
    Ok(ScheduleTrace { n_steps, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b3(down: bool) -> ScheduleConfig {
        ScheduleConfig::new(vec![1, 3, 9], down, None).unwrap()
    }

    #[test]
    fn top_level_reads_out_once_in_nine_steps() {
        let t = compile_schedule(&b3(true), 9).unwrap();
        assert_eq!(t.steps_of(3, Action::Readout), vec![0, 9]);
    }

    #[test]
    fn second_level_up_writes() {
        let t = compile_schedule(&b3(true), 18).unwrap();
        assert_eq!(t.steps_of(2, Action::UpWrite), vec![4, 7, 10, 13, 16]);
        assert_eq!(t.steps_of(3, Action::UpWrite), vec![10]);
    }

    #[test]
    fn single_level_step_is_write_update_readout() {
        let c = ScheduleConfig::new(vec![1], true, None).unwrap();
        let t = compile_schedule(&c, 4).unwrap();
        for n in 1..=4 {
            let acts: Vec<Action> = t.at(n).map(|e| e.action).collect();
            assert_eq!(acts, vec![Action::EventWrite, Action::Update, Action::Readout]);
        }
    }

    #[test]
    fn disabling_down_write_only_removes_messages() {
        let on = compile_schedule(&b3(true), 27).unwrap();
        let off = compile_schedule(&b3(false), 27).unwrap();
        let filtered: Vec<TraceEntry> = on
            .entries
            .iter()
            .copied()
            .filter(|e| !matches!(e.action, Action::DownApply | Action::MakeDownMessage))
            .collect();
        assert_eq!(filtered, off.entries);
        assert!(on.entries.len() > off.entries.len());
    }

    #[test]
    fn entries_are_in_canonical_order() {
        let c = ScheduleConfig::new(vec![1, 3, 9], true, Some(9)).unwrap();
        let t = compile_schedule(&c, 40).unwrap();
        let mut sorted = t.entries.clone();
        sorted.sort_by_key(TraceEntry::sort_key);
        assert_eq!(sorted, t.entries);
    }

    #[test]
    fn bad_configs() {
        assert!(ScheduleConfig::new(vec![2, 4], true, None).is_err());
        assert!(ScheduleConfig::new(vec![1, 3, 4], true, None).is_err());
        assert!(compile_schedule(&b3(true), 0).is_err());
        assert!("teleport".parse::<Action>().is_err());
        assert_eq!("up_write".parse::<Action>().unwrap(), Action::UpWrite);
    }
}
