//! Closed-form multiply-accumulate counts per scheduled action.
//!
//! Conventions match the instrumented kernels: an affine map costs
//! `N * Din * Dout`; a `k x k` convolution costs `H' * W' * k^2 * Din * Dout`
//! over its output grid, padding included; attention costs `2 * L * D` per
//! query over `L` keys. Normalizations, activations and interpolation are free.

use crate::error::Result;
use crate::esca::esca_macs;
use crate::memory::residual_blocks;
use crate::model::ModelConfig;
use crate::scheduler::{compile_schedule, Action, ScheduleConfig, TraceEntry};
use crate::wmca::{residual_mlp_macs, wmca_attend_macs};

/// Event-dependent input of the event write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventLoad {
    pub active_cells: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacCount {
    pub actions: Vec<(TraceEntry, u64)>,
    pub total: u64,
}

fn conv(h: usize, w: usize, k: usize, din: usize, dout: usize) -> u64 {
    (h * w * k * k * din * dout) as u64
}

/// MACs of one action. `load` only matters for `event_write`.
pub fn action_macs(c: &ModelConfig, e: &TraceEntry, load: EventLoad) -> u64 {
    let l = e.level;
    let d = |lv: usize| c.dims[lv - 1];
    let (h, w) = c.grid(l);
    match e.action {
        Action::DownApply | Action::MakeUpSnapshot => 0,
        Action::EventWrite => esca_macs(d(1), load.active_cells, load.events),
        Action::Update => residual_blocks(l) as u64 * 2 * conv(h, w, 3, d(l), d(l)),
        Action::Readout => conv(h, w, 1, d(l), d(l)),
        Action::UpWrite => {
            conv(h, w, 3, d(l - 1), d(l))
                + wmca_attend_macs(d(l), d(l), h, w)
                + residual_mlp_macs(d(l), h * w)
        }
        Action::MakeDownMessage => {
            // source level l, target l - 1
            let (lh, lw) = c.grid(l - 1);
            conv(h, w, 3, d(l - 1), d(l - 1))
                + wmca_attend_macs(d(l - 1), d(l), h, w)
                + residual_mlp_macs(d(l - 1), lh * lw)
        }
        Action::ImageWrite => {
            let p = c.strides[l - 1];
            (h * w * p * p * 3 * d(l)) as u64
                + wmca_attend_macs(d(l), d(l), h, w)
                + residual_mlp_macs(d(l), h * w)
        }
    }
}

/// Predicted MACs of every action at step `n`, with the same event load.
pub fn count_macs(c: &ModelConfig, n: usize, load: EventLoad) -> Result<MacCount> {
    let cfg = ScheduleConfig::from_model(c)?;
    let actions: Vec<(TraceEntry, u64)> = cfg
        .step_actions(n)
        .into_iter()
        .map(|e| (e, action_macs(c, &e, load)))
        .collect();
    let total = actions.iter().map(|(_, m)| m).sum();
    Ok(MacCount { actions, total })
}

/// Mean MACs per step over steps `1..=n_steps` under a constant event load.
pub fn amortized_macs(c: &ModelConfig, n_steps: usize, load: EventLoad) -> Result<f64> {
    let cfg = ScheduleConfig::from_model(c)?;
    let trace = compile_schedule(&cfg, n_steps)?;
    let total: u64 = trace
        .entries
        .iter()
        .filter(|e| e.step > 0)
        .map(|e| action_macs(c, e, load))
        .sum();
    Ok(total as f64 / n_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_definition() {
        assert_eq!(conv(32, 32, 3, 128, 128), 32 * 32 * 128 * 128 * 9);
    }

    #[test]
    fn mid_cycle_step_costs_only_the_first_level() {
        let c = ModelConfig::variant("B3").unwrap();
        let load = EventLoad {
            active_cells: 40,
            events: 300,
        };
        let (h, w) = c.grid(1);
        let z1 = esca_macs(128, 40, 300) + 2 * conv(h, w, 3, 128, 128) + conv(h, w, 1, 128, 128);
        for n in [2, 5, 8, 11] {
            assert_eq!(count_macs(&c, n, load).unwrap().total, z1);
        }
    }

    #[test]
    fn multi_rate_is_cheaper_than_every_step() {
        let c = ModelConfig::variant("B3").unwrap();
        let mut flat = c.clone();
        flat.cycles = vec![1, 1, 1];
        let load = EventLoad {
            active_cells: 100,
            events: 1000,
        };
        let multi = amortized_macs(&c, 18, load).unwrap();
        let every = amortized_macs(&flat, 18, load).unwrap();
        assert!(multi < every, "{multi} vs {every}");
    }
}
