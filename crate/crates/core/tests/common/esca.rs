use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hmnet::esca::{esca_dense_oracle, esca_write, EscaParams};
use hmnet::events::{Event, EventSlice, Polarity};
use hmnet::numerics::{FeatureGrid, ParameterStore, Tensor};

pub const DT: u64 = 5000;

pub struct EscaInstance {
    pub store: ParameterStore<f64>,
    pub params: EscaParams,
    pub z: FeatureGrid<f64>,
    pub slice: EventSlice,
}

/// Random write problem on a grid of at most 8 x 8 cells with up to 1000
/// events; about a third of the cells receive none.
pub fn esca_instance(seed: u64) -> EscaInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, heads) = [(8, 1), (8, 2), (16, 4), (16, 2)][rng.random_range(0..4)];
    let stride = [2, 4, 8][rng.random_range(0..3)];
    let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let mut store = ParameterStore::new();
    let params = EscaParams::new(&mut store, dim, heads, &mut rng).unwrap();
    let gate = Tensor::randn(&[heads], 1.0, &mut rng);
    *store.value_mut(params.gate) = gate;
    let z = FeatureGrid::new(stride, Tensor::randn(&[rows, cols, dim], 1.0, &mut rng)).unwrap();

    let live: Vec<(usize, usize)> = (0..rows * cols)
        .filter(|_| rng.random_bool(0.66))
        .map(|i| (i / cols, i % cols))
        .collect();
    let n = if live.is_empty() { 0 } else { rng.random_range(0..=1000) };
    let t_start = 3 * DT;
    let mut events: Vec<Event> = (0..n)
        .map(|_| {
            let (j, k) = live[rng.random_range(0..live.len())];
            Event::new(
                t_start + rng.random_range(1..=DT),
                (k * stride + rng.random_range(0..stride)) as u16,
                (j * stride + rng.random_range(0..stride)) as u16,
                if rng.random_bool(0.5) { Polarity::On } else { Polarity::Off },
            )
        })
        .collect();
    events.sort_by_key(|e| e.t);
    EscaInstance {
        store,
        params,
        z,
        slice: EventSlice {
            t_start,
            t_end: t_start + DT,
            events,
        },
    }
}

/// Max abs difference between the sparse write and the dense oracle.
pub fn oracle_error(inst: &EscaInstance, gate: bool) -> f64 {
    let (fast, _) = esca_write(&inst.params, &inst.store, &inst.z, &inst.slice, DT, gate).unwrap();
    let slow = esca_dense_oracle(&inst.params, &inst.store, &inst.z, &inst.slice, DT, gate).unwrap();
    fast.tensor.max_abs_diff(&slow.tensor).unwrap()
}

/// Norm of the pre-projection write `a V` at gate logit `w` relative to the
/// ungated write.
pub fn gated_write_ratio(inst: &mut EscaInstance, w: f64) -> f64 {
    let (_, open) = esca_write(&inst.params, &inst.store, &inst.z, &inst.slice, DT, false).unwrap();
    inst.store.value_mut(inst.params.gate).fill(w);
    let (_, shut) = esca_write(&inst.params, &inst.store, &inst.z, &inst.slice, DT, true).unwrap();
    shut.attend.attention.norm() / open.attend.attention.norm()
}

/// True when the event attention mass of every (cell, head) strictly
/// decreases along increasing gate logits.
pub fn gate_is_monotone(inst: &mut EscaInstance, logits: &[f64]) -> bool {
    let heads = inst.params.heads;
    let mut prev: Option<Vec<f64>> = None;
    for &w in logits {
        inst.store.value_mut(inst.params.gate).fill(w);
        let (_, c) = esca_write(&inst.params, &inst.store, &inst.z, &inst.slice, DT, true).unwrap();
        let mass = c.attend.event_mass(heads);
        if let Some(p) = &prev {
            if !p.iter().zip(&mass).all(|(a, b)| b < a) {
                return false;
            }
        }
        prev = Some(mass);
    }
    true
}
