//! Differentiable unroll of a single-level memory and a small regression demo.
//!
//! With one level every step is `event_write -> update -> readout`, so the
//! unroll chains the per-operation backwards through time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esca::{esca_write, esca_write_backward, EscaParams, WriteCache};
use crate::events::{generate_synthetic_stream, slice_stream, EventSlice, SceneParams};
use crate::memory::{
    initial_grid, initial_grid_backward, readout, readout_backward, update_state,
    update_state_backward, ReadoutCache, UpdateCache,
};
use crate::model::{LevelParams, Model, ModelConfig};
use crate::numerics::layers::Linear;
use crate::numerics::{FeatureGrid, ParameterStore, Real, Tensor};

/// Parameters and geometry of a one-level model, detached from its store.
#[derive(Debug, Clone)]
pub struct SingleLevel {
    pub esca: EscaParams,
    pub level: LevelParams,
    pub stride: usize,
    pub grid: (usize, usize),
    pub dt_us: u64,
    pub gate: bool,
}

pub struct UnrollCache<T> {
    steps: Vec<(WriteCache<T>, UpdateCache<T>, ReadoutCache<T>)>,
}

impl SingleLevel {
    pub fn new<T: Real>(model: &Model<T>) -> Result<Self> {
        let c = &model.config;
        if c.levels != 1 {
            return Err(Error::Config(format!(
                "the unroll handles single-level models, got {} levels",
                c.levels
            )));
        }
        Ok(SingleLevel {
            esca: model.esca,
            level: model.levels[0].clone(),
            stride: c.strides[0],
            grid: c.grid(1),
            dt_us: c.dt_us,
            gate: c.event_gate,
        })
    }

    /// Readout after each slice.
    pub fn forward<T: Real>(
        &self,
        store: &ParameterStore<T>,
        slices: &[EventSlice],
    ) -> Result<(Vec<FeatureGrid<T>>, UnrollCache<T>)> {
        let (h, w) = self.grid;
        let mut z = initial_grid(store, self.level.init, self.stride, h, w);
        let mut outs = Vec::with_capacity(slices.len());
        let mut steps = Vec::with_capacity(slices.len());
        for s in slices {
            let (a, wc) = esca_write(&self.esca, store, &z, s, self.dt_us, self.gate)?;
            let (u, uc) = update_state(&self.level.update, store, &a)?;
            let (o, rc) = readout(&self.level.readout, store, &u)?;
            outs.push(o);
            steps.push((wc, uc, rc));
            z = u;
        }
        Ok((outs, UnrollCache { steps }))
    }

    /// Accumulates parameter gradients given the gradient of every readout.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &UnrollCache<T>,
        d_readouts: &[Tensor<T>],
    ) -> Result<()> {
        if d_readouts.len() != cache.steps.len() {
            return Err(Error::shape(
                "unroll_backward",
                format!("{} readout gradients for {} steps", d_readouts.len(), cache.steps.len()),
            ));
        }
        let (h, w) = self.grid;
        let mut dz = Tensor::zeros(&[h, w, self.esca.dim]);
        for ((wc, uc, rc), d) in cache.steps.iter().zip(d_readouts).rev() {
            dz.add_assign(&readout_backward(&self.level.readout, store, rc, d)?)?;
            let da = update_state_backward(&self.level.update, store, uc, &dz)?;
            dz = esca_write_backward(&self.esca, store, wc, &da)?;
        }
        initial_grid_backward(store, self.level.init, &dz);
        Ok(())
    }
}

/// Adam with bias correction over every trainable store entry.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Real>(&mut self, store: &mut ParameterStore<T>) {
        if self.m.is_empty() {
            self.m = store.entries().iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let g: Vec<f64> = store.grad(id).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let val = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                val[i] = T::of(val[i].to_f64().unwrap_or(f64::NAN) - upd);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: String,
    /// Square sensor side in pixels.
    pub sensor: u16,
    pub steps: usize,
    pub sequences: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub dt_us: u64,
    pub noise_rate: f64,
    /// Trailing window of the smoothed loss.
    pub smooth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: "B1-tiny".into(),
            sensor: 32,
            steps: 4,
            sequences: 8,
            iterations: 300,
            lr: 1e-2,
            seed: 0,
            dt_us: 5000,
            noise_rate: 2.0,
            smooth: 20,
        }
    }
}

/// Velocity range of the synthetic bar, pixels per second.
pub const VELOCITY_RANGE: (f64, f64) = (200.0, 1000.0);

/// Regression target in `[-1, 1]`.
pub fn velocity_target(vx: f64) -> f64 {
    let (lo, hi) = VELOCITY_RANGE;
    (vx - (lo + hi) / 2.0) / ((hi - lo) / 2.0)
}

pub struct Sequence {
    pub vx: f64,
    pub target: f64,
    pub slices: Vec<EventSlice>,
}

/// Bars sweeping right at evenly spread speeds with seeded jitter.
pub fn velocity_dataset(cfg: &TrainConfig) -> Result<Vec<Sequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (lo, hi) = VELOCITY_RANGE;
    let n = cfg.sequences.max(1);
    let duration = cfg.dt_us * cfg.steps as u64;
    (0..n)
        .map(|i| {
            let frac = (i as f64 + rng.random_range(0.0..1.0)) / n as f64;
            let vx = lo + (hi - lo) * frac;
            let x0 = rng.random_range(1.0..4.0);
            let scene = SceneParams::vertical_bar(cfg.sensor, cfg.sensor, 3, x0, vx, duration);
            let (stream, _) = generate_synthetic_stream(&scene, cfg.noise_rate, rng.random())?;
            let mut slices = slice_stream(&stream, cfg.dt_us)?;
            slices.resize_with(cfg.steps, || EventSlice::empty(0, 0));
            for (k, s) in slices.iter_mut().enumerate() {
                s.t_start = k as u64 * cfg.dt_us;
                s.t_end = s.t_start + cfg.dt_us;
            }
            Ok(Sequence {
                vx,
                target: velocity_target(vx),
                slices,
            })
        })
        .collect()
}

pub struct TrainReport {
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub model: Model<f64>,
}

impl TrainReport {
    pub fn initial_smoothed(&self) -> f64 {
        self.smoothed.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_smoothed(&self) -> f64 {
        self.smoothed.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,smoothed\n");
        for (i, (l, m)) in self.losses.iter().zip(&self.smoothed).enumerate() {
            s.push_str(&format!("{i},{l:e},{m:e}\n"));
        }
        s
    }
}

/// Mean over the trailing `window` values at each position.
pub fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Full-batch training of unroll + mean pool + affine head on bar velocity.
/// The smoothed curve starts once a full window is available.
pub fn train_demo(cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.iterations == 0 || cfg.steps == 0 {
        return Err(Error::Config("iterations and steps must be >= 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be finite and >= 0", cfg.lr)));
    }
    let mut mc = ModelConfig::variant(&cfg.variant)?;
    mc.seed = cfg.seed;
    mc.dt_us = cfg.dt_us;
    mc.width = cfg.sensor;
    mc.height = cfg.sensor;
    let mut model = Model::<f64>::new(mc)?;
    let net = SingleLevel::new(&model)?;
    let (gh, gw) = net.grid;
    if gh > 32 || gw > 32 || net.esca.dim > 32 {
        return Err(Error::Config("training demo is sized for D <= 32 and grids <= 32x32".into()));
    }
    let d = net.esca.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead);
    let head = Linear::new(&mut model.store, "head", d, 1, &mut rng)?;
    let data = velocity_dataset(cfg)?;
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let cells = (gh * gw) as f64;

    for it in 0..cfg.iterations {
        model.store.zero_grads();
        let mut loss = 0.0;
        for seq in &data {
            let (outs, cache) = net.forward(&model.store, &seq.slices)?;
            let last = &outs.last().expect("steps >= 1").tensor;
            let pooled = Tensor::from_fn(&[1, d], |c| (0..last.rows()).map(|r| last.row(r)[c]).sum::<f64>() / cells);
            let pred = head.forward(&model.store, &pooled)?.data()[0];
            let err = pred - seq.target;
            loss += err * err / data.len() as f64;

            let dpred = Tensor::from_vec(&[1, 1], vec![2.0 * err / data.len() as f64])?;
            let dpool = head.backward(&mut model.store, &pooled, &dpred)?;
            let mut d_outs: Vec<Tensor<f64>> = outs.iter().map(|o| Tensor::zeros(o.tensor.shape())).collect();
            let dl = d_outs.last_mut().expect("steps >= 1");
            for r in 0..dl.rows() {
                for (g, &p) in dl.row_mut(r).iter_mut().zip(dpool.data()) {
                    *g = p / cells;
                }
            }
            net.backward(&mut model.store, &cache, &d_outs)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at iteration {it}")));
        }
        losses.push(loss);
        opt.step(&mut model.store);
    }
    let smoothed = trailing_mean(&losses, cfg.smooth)
        .into_iter()
        .skip(cfg.smooth.max(1).min(losses.len()) - 1)
        .collect();
    Ok(TrainReport {
        losses,
        smoothed,
        model,
    })
}
