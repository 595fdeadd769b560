#![allow(dead_code)]

pub mod esca;
pub mod events;
pub mod wmca;

use hmnet::events::{generate_synthetic_stream, slice_stream, EventSlice, SceneParams};
use hmnet::model::{Model, ModelConfig};
use hmnet::numerics::Real;

/// Bar sweep plus background noise, cut into exactly `steps` slices of `dt`.
pub fn stream(seed: u64, size: u16, dt: u64, steps: usize) -> (SceneParams, Vec<EventSlice>) {
    stream_wh(seed, size, size, dt, steps)
}

pub fn stream_wh(seed: u64, width: u16, height: u16, dt: u64, steps: usize) -> (SceneParams, Vec<EventSlice>) {
    let duration = dt * steps as u64;
    let vx = 150.0 + (seed % 7) as f64 * 40.0;
    let scene = SceneParams::vertical_bar(width, height, 3, 2.0 + (seed % 5) as f64, vx, duration);
    let (events, _) = generate_synthetic_stream(&scene, 20.0, seed).unwrap();
    let mut slices = slice_stream(&events, dt).unwrap();
    slices.truncate(steps);
    assert_eq!(slices.len(), steps, "stream too short");
    (scene, slices)
}

pub fn model<T: Real>(variant: &str, seed: u64, size: u16) -> Model<T> {
    let mut c = ModelConfig::variant(variant).unwrap();
    c.seed = seed;
    c.width = size;
    c.height = size;
    Model::new(c).unwrap()
}

/// Zeroes every parameter that feeds a residual branch, so each operator
/// becomes an identity on a zero state.
pub fn silence<T: Real>(m: &mut Model<T>) {
    let silent = [".v.weight", ".v.bias", ".out.bias", ".mlp.fc2.weight", ".mlp.fc2.bias"];
    let ids: Vec<_> = m
        .store
        .ids()
        .filter(|&id| {
            let n = m.store.name(id);
            (n.starts_with("wmca.") && silent.iter().any(|s| n.ends_with(s)))
                || (n.contains(".update.block") && n.contains(".conv2."))
        })
        .collect();
    for id in ids {
        m.store.value_mut(id).fill(T::zero());
    }
}
