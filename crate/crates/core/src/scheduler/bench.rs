//! Wall-time benchmark over repeated runs of the same input.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::events::EventSlice;
use crate::model::Model;
use crate::numerics::Real;
use crate::scheduler::{run_parallel, run_sequential, ActionRecord, FrameSource, ParallelOptions, RunOutput};

/// Runs excluded from the statistics.
pub const WARMUP_RUNS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Sequential,
    Parallel { workers: usize },
}

/// Step time over repetitions, steps `1..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStats {
    pub step: usize,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub max_ns: u64,
}

/// Time one level spends per step, over all steps and repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStats {
    pub level: usize,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub max_ns: u64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub repetitions: usize,
    /// One row per executed action; `wall_ns` is the median over repetitions.
    pub actions: Vec<ActionRecord>,
    pub steps: Vec<StepStats>,
    pub levels: Vec<LevelStats>,
}

/// Nearest-rank percentile of an unsorted sample.
fn percentile(xs: &mut [u64], p: f64) -> u64 {
    xs.sort_unstable();
    let rank = ((p / 100.0) * xs.len() as f64).ceil() as usize;
    xs[rank.clamp(1, xs.len()) - 1]
}

fn stats(mut xs: Vec<u64>) -> (u64, u64, u64) {
    let max = xs.iter().copied().max().unwrap_or(0);
    (percentile(&mut xs, 50.0), percentile(&mut xs, 95.0), max)
}

/// Sum of action times per `(step, level)` of one run.
fn level_step_times(run: &RunOutput<impl Real>, n_steps: usize, levels: usize) -> Vec<Vec<u64>> {
    let mut t = vec![vec![0u64; levels]; n_steps + 1];
    for r in &run.records {
        t[r.entry.step][r.entry.level - 1] += r.wall_ns;
    }
    t
}

pub fn benchmark_latency<T: Real>(
    model: &Model<T>,
    slices: &[EventSlice],
    frames: Option<&dyn FrameSource<T>>,
    mode: BenchMode,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    let once = || match mode {
        BenchMode::Sequential => run_sequential(model, slices, frames),
        BenchMode::Parallel { workers } => run_parallel(
            model,
            slices,
            frames,
            &ParallelOptions {
                workers,
                delay: None,
            },
        ),
    };
    for _ in 0..WARMUP_RUNS {
        once()?;
    }
    let runs = (0..repetitions).map(|_| once()).collect::<Result<Vec<_>>>()?;

    let n_steps = slices.len();
    let levels = model.num_levels();
    let actions = (0..runs[0].records.len())
        .map(|i| {
            let mut times: Vec<u64> = runs.iter().map(|r| r.records[i].wall_ns).collect();
            ActionRecord {
                wall_ns: percentile(&mut times, 50.0),
                ..runs[0].records[i]
            }
        })
        .collect();

    let per_run: Vec<Vec<Vec<u64>>> = runs.iter().map(|r| level_step_times(r, n_steps, levels)).collect();
    let step_time = |run: &Vec<Vec<u64>>, n: usize| -> u64 {
        match mode {
            BenchMode::Sequential => run[n].iter().sum(),
            // levels overlap, so a step lasts as long as its slowest worker
            BenchMode::Parallel { .. } => run[n].iter().copied().max().unwrap_or(0),
        }
    };
    let steps = (1..=n_steps)
        .map(|n| {
            let (p50_ns, p95_ns, max_ns) = stats(per_run.iter().map(|r| step_time(r, n)).collect());
            StepStats {
                step: n,
                p50_ns,
                p95_ns,
                max_ns,
            }
        })
        .collect();
    let levels = (0..levels)
        .map(|l| {
            let xs = per_run.iter().flat_map(|r| (1..=n_steps).map(move |n| r[n][l])).collect();
            let (p50_ns, p95_ns, max_ns) = stats(xs);
            LevelStats {
                level: l + 1,
                p50_ns,
                p95_ns,
                max_ns,
            }
        })
        .collect();
    Ok(BenchReport {
        mode,
        repetitions,
        actions,
        steps,
        levels,
    })
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "step,level,action,macs,wall_ns";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.actions {
            let e = r.entry;
            let _ = writeln!(s, "{},{},{},{},{}", e.step, e.level, e.action, r.macs, r.wall_ns);
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,p50_ns,p95_ns,max_ns\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.p50_ns, r.p95_ns, r.max_ns);
        }
        s
    }

    pub fn levels_csv(&self) -> String {
        let mut s = String::from("level,p50_ns,p95_ns,max_ns\n");
        for r in &self.levels {
            let _ = writeln!(s, "{},{},{},{}", r.level, r.p50_ns, r.p95_ns, r.max_ns);
        }
        s
    }

    pub fn total_macs(&self) -> u64 {
        self.actions.iter().map(|r| r.macs).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let mut xs = vec![5, 1, 4, 2, 3];
        assert_eq!(percentile(&mut xs, 50.0), 3);
        assert_eq!(percentile(&mut xs, 95.0), 5);
        assert_eq!(percentile(&mut [7], 50.0), 7);
    }
}
