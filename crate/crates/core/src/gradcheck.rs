//! Central-difference verification of every hand-written backward.
//!
//! A case owns a store holding its parameters and its differentiable inputs,
//! a forward returning one output tensor, and a backward that accumulates
//! gradients for every store entry. The scalar checked is `<r, forward()>`
//! for a seeded random unit vector `r`. Its central difference is evaluated as
//! `<r, out(+h) - out(-h)> / (x(+h) - x(-h))`, which equals the difference of
//! the two scalar losses but skips cancelling the unperturbed part of the sum.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::esca::{
    embed_events, embed_events_backward, esca_attend, esca_attend_backward, esca_write,
    esca_write_backward, EscaParams,
};
use crate::events::{build_window_index, Event, EventSlice, Polarity};
use crate::memory::{
    down_write_inline, down_write_inline_backward, image_write, image_write_backward, readout,
    readout_backward, up_write, up_write_backward, update_state, update_state_backward,
    DownWriteParams, ImageWriteParams, ReadoutParams, UpWriteParams, UpdateParams,
};
use crate::model::{Model, ModelConfig};
use crate::numerics::layers::{Conv2d, GroupNorm, LayerNorm, Linear, ResidualBlock};
use crate::numerics::ops::{self, Activation};
use crate::numerics::{FeatureGrid, ParamId, ParameterStore, Tensor};
use crate::train::SingleLevel;
use crate::wmca::{wmca_attend, wmca_attend_backward, wmca_block, wmca_block_backward, WmcaParams};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Coordinates checked per parameter tensor in composite cases.
pub const COMPOSITE_COORDS: usize = 16;

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Primitive,
    Composite,
}

impl Kind {
    pub fn tolerance(self) -> f64 {
        match self {
            Kind::Primitive => PRIMITIVE_TOL,
            Kind::Composite => COMPOSITE_TOL,
        }
    }

    fn coords(self) -> usize {
        match self {
            Kind::Primitive => usize::MAX,
            Kind::Composite => COMPOSITE_COORDS,
        }
    }
}

type Forward = Box<dyn Fn(&ParameterStore<f64>) -> Result<Tensor<f64>> + Send + Sync>;
type Backward = Box<dyn Fn(&mut ParameterStore<f64>, &Tensor<f64>) -> Result<()> + Send + Sync>;

pub struct GradCase {
    pub op: String,
    pub kind: Kind,
    pub dims: String,
    pub seed: u64,
    pub store: ParameterStore<f64>,
    forward: Forward,
    backward: Backward,
}

impl GradCase {
    pub fn new(
        op: impl Into<String>,
        kind: Kind,
        dims: impl Into<String>,
        seed: u64,
        store: ParameterStore<f64>,
        forward: impl Fn(&ParameterStore<f64>) -> Result<Tensor<f64>> + Send + Sync + 'static,
        backward: impl Fn(&mut ParameterStore<f64>, &Tensor<f64>) -> Result<()> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            op: op.into(),
            kind,
            dims: dims.into(),
            seed,
            store,
            forward: Box::new(forward),
            backward: Box::new(backward),
        }
    }

    pub fn forward(&self, store: &ParameterStore<f64>) -> Result<Tensor<f64>> {
        (self.forward)(store)
    }

    /// Negates every analytic gradient; a sound harness must reject this.
    pub fn with_sign_flip(self) -> Self {
        let inner = self.backward;
        GradCase {
            backward: Box::new(move |store, dy| {
                inner(store, dy)?;
                let ids: Vec<ParamId> = store.ids().collect();
                for id in ids {
                    for g in store.grad_mut(id).data_mut() {
                        *g = -*g;
                    }
                }
                Ok(())
            }),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub kind: Kind,
    pub dims: String,
    pub seed: u64,
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradReport {
    pub const CSV_HEADER: &'static str = "op,param,max_rel_err,pass";

    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            let _ = writeln!(s, "{},{},{:e},{}", self.op, p.name, p.max_rel_err, p.pass);
        }
        s
    }
}

/// Compares analytic and numeric gradients of every store entry of `case`.
pub fn gradient_report(case: &GradCase, tolerance: f64) -> Result<GradReport> {
    gradient_report_with_step(case, tolerance, DEFAULT_STEP)
}

pub fn gradient_report_with_step(case: &GradCase, tolerance: f64, h: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x9e37_79b9);
    let out = case.forward(&case.store)?;
    let r = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng);
    // unit norm keeps the loss scale independent of the output size
    let r = r.scale(1.0 / r.norm().max(f64::MIN_POSITIVE));

    let mut store = case.store.clone();
    store.zero_grads();
    (case.backward)(&mut store, &r)?;

    let cap = case.kind.coords();
    let mut jobs = Vec::new();
    for id in store.ids() {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= cap {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cap).into_vec();
            c.sort_unstable();
            c
        };
        jobs.extend(coords.into_iter().map(|i| (id, i)));
    }

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(threads.max(1)).max(1);
    let numeric: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let (case, r) = (case, &r);
                s.spawn(move || {
                    let mut st = case.store.clone();
                    part.iter()
                        .map(|&(id, i)| central_difference(case, &mut st, r, id, i, h))
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("gradcheck thread panicked".into()))))
            .collect()
    });
    let mut num = Vec::with_capacity(jobs.len());
    for n in numeric {
        num.extend(n?);
    }

    let mut params: Vec<ParamReport> = Vec::new();
    for (&(id, i), &n) in jobs.iter().zip(&num) {
        let a = store.grad(id).data()[i];
        let rel = relative_error(a, n);
        let abs = (a - n).abs();
        let name = store.name(id);
        match params.last_mut() {
            Some(p) if p.name == name => {
                p.checked += 1;
                p.max_rel_err = p.max_rel_err.max(rel);
                p.max_abs_err = p.max_abs_err.max(abs);
            }
            _ => params.push(ParamReport {
                name: name.to_string(),
                checked: 1,
                max_rel_err: rel,
                max_abs_err: abs,
                pass: true,
            }),
        }
    }
    for p in &mut params {
        p.pass = p.max_rel_err < tolerance;
    }
    Ok(GradReport {
        op: case.op.clone(),
        kind: case.kind,
        dims: case.dims.clone(),
        seed: case.seed,
        tolerance,
        params,
    })
}

fn central_difference(
    case: &GradCase,
    st: &mut ParameterStore<f64>,
    r: &Tensor<f64>,
    id: ParamId,
    i: usize,
    h: f64,
) -> Result<f64> {
    let x = st.value(id).data()[i];
    let (xp, xm) = (x + h, x - h);
    st.value_mut(id).data_mut()[i] = xp;
    let up = case.forward(st)?;
    st.value_mut(id).data_mut()[i] = xm;
    let down = case.forward(st)?;
    st.value_mut(id).data_mut()[i] = x;
    let mut acc = 0.0;
    for ((&a, &b), &w) in up.data().iter().zip(down.data()).zip(r.data()) {
        acc += w * (a - b);
    }
    let g = acc / (xp - xm);
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("{} coordinate {i} in {}", st.name(id), case.op)));
    }
    Ok(g)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt)
}

/// Moves every parameter off its structured initial value (unit gains, zero
/// gates and bias tables) so no gradient path is trivially zero.
fn jitter(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

fn input(store: &mut ParameterStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<ParamId> {
    store.insert(format!("input.{name}"), Tensor::randn(shape, 1.0, rng))
}

fn grid(store: &ParameterStore<f64>, id: ParamId, stride: usize) -> Result<FeatureGrid<f64>> {
    FeatureGrid::new(stride, store.value(id).clone())
}

/// Random events over a `rows x cols` window grid inside `(t0, t0 + dt]`.
pub fn random_slice(rng: &mut impl Rng, rows: usize, cols: usize, stride: usize, n: usize, dt: u64) -> EventSlice {
    let t0 = 10 * dt;
    let mut events: Vec<Event> = (0..n)
        .map(|_| {
            let p = if rng.random_bool(0.5) { Polarity::On } else { Polarity::Off };
            Event::new(
                t0 + rng.random_range(1..=dt),
                rng.random_range(0..(cols * stride) as u16),
                rng.random_range(0..(rows * stride) as u16),
                p,
            )
        })
        .collect();
    events.sort_by_key(|e| e.t);
    EventSlice {
        t_start: t0,
        t_end: t0 + dt,
        events,
    }
}

/// Primitive cases at one seed.
pub fn primitive_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let prim = Kind::Primitive;

    {
        let mut r = rng_for(seed, 1);
        let mut s = ParameterStore::new();
        let x = input(&mut s, "x", &[5, 4], &mut r)?;
        let lin = Linear::new(&mut s, "affine", 4, 3, &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "affine",
            prim,
            "5x4 -> 3",
            seed,
            s,
            move |s| lin.forward(s, s.value(x)),
            move |s, dy| {
                let xv = s.value(x).clone();
                let dx = lin.backward(s, &xv, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 2);
        let mut s = ParameterStore::new();
        let x = input(&mut s, "x", &[4, 6], &mut r)?;
        let ln = LayerNorm::new(&mut s, "layer_norm", 6)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "layer_norm",
            prim,
            "4x6",
            seed,
            s,
            move |s| Ok(ln.forward(s, s.value(x))?.0),
            move |s, dy| {
                let (_, c) = ln.forward(s, s.value(x))?;
                let dx = ln.backward(s, &c, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 3);
        let mut s = ParameterStore::new();
        let x = input(&mut s, "x", &[3, 3, 16], &mut r)?;
        let gn = GroupNorm::new(&mut s, "group_norm", 16)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "group_norm",
            prim,
            "3x3x16 G=8",
            seed,
            s,
            move |s| Ok(gn.forward(s, s.value(x))?.0),
            move |s, dy| {
                let (_, c) = gn.forward(s, s.value(x))?;
                let dx = gn.backward(s, &c, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    for (salt, kind, name) in [(4, Activation::Gelu, "gelu"), (5, Activation::Silu, "silu")] {
        let mut r = rng_for(seed, salt);
        let mut s = ParameterStore::new();
        let x = s.insert("input.x", Tensor::randn(&[24], 2.0, &mut r))?;
        cases.push(GradCase::new(
            name,
            prim,
            "24",
            seed,
            s,
            move |s| Ok(ops::activation(s.value(x), kind)),
            move |s, dy| {
                let dx = ops::activation_backward(s.value(x), kind, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    for (salt, k, stride) in [(6, 3, 1), (7, 3, 2), (8, 1, 1)] {
        let mut r = rng_for(seed, salt);
        let mut s = ParameterStore::new();
        let x = input(&mut s, "x", &[5, 4, 3], &mut r)?;
        let conv = Conv2d::new(&mut s, "conv", k, stride, 3, 4, &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            format!("conv2d_k{k}_s{stride}"),
            prim,
            "5x4x3 -> 4",
            seed,
            s,
            move |s| conv.forward(s, s.value(x)),
            move |s, dy| {
                let xv = s.value(x).clone();
                let dx = conv.backward(s, &xv, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 9);
        let mut s = ParameterStore::new();
        let x = input(&mut s, "x", &[3, 4, 2], &mut r)?;
        cases.push(GradCase::new(
            "upsample_bilinear",
            prim,
            "3x4x2 -> 5x8",
            seed,
            s,
            move |s| ops::upsample_bilinear(s.value(x), 5, 8),
            move |s, dy| {
                let dx = ops::upsample_bilinear_backward(dy, 3, 4)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 10);
        let mut s = ParameterStore::new();
        let x = s.insert("input.x", Tensor::randn(&[3, 5], 2.0, &mut r))?;
        cases.push(GradCase::new(
            "softmax_rows",
            prim,
            "3x5",
            seed,
            s,
            move |s| ops::softmax_rows(s.value(x)),
            move |s, dy| {
                let y = ops::softmax_rows(s.value(x))?;
                let dx = ops::softmax_rows_backward(&y, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    Ok(cases)
}

fn esca_setup(seed: u64, salt: u64) -> Result<(ParameterStore<f64>, EscaParams, ParamId, EventSlice)> {
    let mut r = rng_for(seed, salt);
    let mut s = ParameterStore::new();
    let p = EscaParams::new(&mut s, 8, 2, &mut r)?;
    let z = input(&mut s, "z", &[3, 3, 8], &mut r)?;
    jitter(&mut s, &mut r);
    let slice = random_slice(&mut r, 3, 3, 4, 14, 5000);
    Ok((s, p, z, slice))
}

/// Composite cases at one seed, excluding the end-to-end unroll.
pub fn composite_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let comp = Kind::Composite;

    {
        let mut r = rng_for(seed, 20);
        let mut s = ParameterStore::new();
        let x = input(&mut s, "x", &[4, 4, 8], &mut r)?;
        let b = ResidualBlock::new(&mut s, "block", 8, &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "residual_block",
            comp,
            "4x4x8",
            seed,
            s,
            move |s| Ok(b.forward(s, s.value(x))?.0),
            move |s, dy| {
                let (_, c) = b.forward(s, s.value(x))?;
                let dx = b.backward(s, &c, dy)?;
                s.accumulate(x, dx.data());
                Ok(())
            },
        ));
    }
    {
        let (s, p, z, slice) = esca_setup(seed, 21)?;
        let slice2 = slice.clone();
        cases.push(GradCase::new(
            "esca_attend",
            comp,
            "3x3x8 H=2 s=4, 14 events",
            seed,
            s,
            move |s| {
                let zg = grid(s, z, 4)?;
                let idx = build_window_index(&slice, 4, (3, 3))?;
                let emb = embed_events(&p, s, &slice, &idx, 5000)?;
                Ok(esca_attend(&p, s, &zg, &idx, &emb, true)?.0.tensor)
            },
            move |s, dy| {
                let zg = grid(s, z, 4)?;
                let idx = build_window_index(&slice2, 4, (3, 3))?;
                let emb = embed_events(&p, s, &slice2, &idx, 5000)?;
                let (_, c) = esca_attend(&p, s, &zg, &idx, &emb, true)?;
                let (dz, demb) = esca_attend_backward(&p, s, &c, dy)?;
                embed_events_backward(&p, s, &emb, &demb)?;
                s.accumulate(z, dz.data());
                Ok(())
            },
        ));
    }
    {
        let (s, p, z, slice) = esca_setup(seed, 22)?;
        let slice2 = slice.clone();
        cases.push(GradCase::new(
            "esca_write",
            comp,
            "3x3x8 H=2 s=4, 14 events",
            seed,
            s,
            move |s| Ok(esca_write(&p, s, &grid(s, z, 4)?, &slice, 5000, true)?.0.tensor),
            move |s, dy| {
                let (_, c) = esca_write(&p, s, &grid(s, z, 4)?, &slice2, 5000, true)?;
                let dz = esca_write_backward(&p, s, &c, dy)?;
                s.accumulate(z, dz.data());
                Ok(())
            },
        ));
    }
    for (salt, h, w, dq, dkv) in [(23, 7, 7, 8, 8), (24, 9, 10, 8, 16)] {
        let mut r = rng_for(seed, salt);
        let mut s = ParameterStore::new();
        let p = WmcaParams::new(&mut s, "wmca", dq, dkv, 2, &mut r)?;
        let x1 = input(&mut s, "x1", &[h, w, dq], &mut r)?;
        let x2 = input(&mut s, "x2", &[h, w, dkv], &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "wmca_attend",
            comp,
            format!("{h}x{w} dq={dq} dkv={dkv} H=2"),
            seed,
            s,
            move |s| Ok(wmca_attend(&p, s, &grid(s, x1, 8)?, &grid(s, x2, 8)?)?.0.tensor),
            move |s, dy| {
                let (_, c) = wmca_attend(&p, s, &grid(s, x1, 8)?, &grid(s, x2, 8)?)?;
                let (d1, d2) = wmca_attend_backward(&p, s, &c, dy)?;
                s.accumulate(x1, d1.data());
                s.accumulate(x2, d2.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 25);
        let mut s = ParameterStore::new();
        let p = WmcaParams::new(&mut s, "wmca", 8, 8, 2, &mut r)?;
        let x1 = input(&mut s, "x1", &[8, 8, 8], &mut r)?;
        let x2 = input(&mut s, "x2", &[8, 8, 8], &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "wmca_block",
            comp,
            "8x8x8 H=2",
            seed,
            s,
            move |s| Ok(wmca_block(&p, s, &grid(s, x1, 8)?, &grid(s, x2, 8)?)?.0.tensor),
            move |s, dy| {
                let (_, c) = wmca_block(&p, s, &grid(s, x1, 8)?, &grid(s, x2, 8)?)?;
                let (d1, d2) = wmca_block_backward(&p, s, &c, dy)?;
                s.accumulate(x1, d1.data());
                s.accumulate(x2, d2.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 26);
        let mut s = ParameterStore::new();
        let p = UpWriteParams::new(&mut s, 2, 8, 16, 2, &mut r)?;
        let z = input(&mut s, "z", &[4, 5, 16], &mut r)?;
        let snap = input(&mut s, "snapshot", &[8, 9, 8], &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "up_write",
            comp,
            "8x9x8 -> 4x5x16",
            seed,
            s,
            move |s| Ok(up_write(&p, s, &grid(s, z, 8)?, &grid(s, snap, 4)?)?.0.tensor),
            move |s, dy| {
                let (_, c) = up_write(&p, s, &grid(s, z, 8)?, &grid(s, snap, 4)?)?;
                let (dz, ds) = up_write_backward(&p, s, &c, dy)?;
                s.accumulate(z, dz.data());
                s.accumulate(snap, ds.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 27);
        let mut s = ParameterStore::new();
        let p = DownWriteParams::new(&mut s, 1, 8, 16, 2, &mut r)?;
        let hi = input(&mut s, "z_hi", &[4, 5, 16], &mut r)?;
        let lo = input(&mut s, "z_lo", &[8, 9, 8], &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "down_write_inline",
            comp,
            "4x5x16 -> 8x9x8",
            seed,
            s,
            move |s| Ok(down_write_inline(&p, s, &grid(s, hi, 8)?, &grid(s, lo, 4)?)?.0.tensor),
            move |s, dy| {
                let (_, c) = down_write_inline(&p, s, &grid(s, hi, 8)?, &grid(s, lo, 4)?)?;
                let (dh, dl) = down_write_inline_backward(&p, s, &c, dy)?;
                s.accumulate(hi, dh.data());
                s.accumulate(lo, dl.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 28);
        let mut s = ParameterStore::new();
        let p = UpdateParams::new(&mut s, 2, 8, 3, &mut r)?;
        let z = input(&mut s, "z", &[4, 4, 8], &mut r)?;
        jitter(&mut s, &mut r);
        let p2 = p.clone();
        cases.push(GradCase::new(
            "update_state",
            comp,
            "4x4x8, 3 blocks",
            seed,
            s,
            move |s| Ok(update_state(&p, s, &grid(s, z, 8)?)?.0.tensor),
            move |s, dy| {
                let (_, c) = update_state(&p2, s, &grid(s, z, 8)?)?;
                let dz = update_state_backward(&p2, s, &c, dy)?;
                s.accumulate(z, dz.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 29);
        let mut s = ParameterStore::new();
        let p = ReadoutParams::new(&mut s, 1, 8, &mut r)?;
        let z = input(&mut s, "z", &[4, 4, 8], &mut r)?;
        jitter(&mut s, &mut r);
        cases.push(GradCase::new(
            "readout",
            comp,
            "4x4x8",
            seed,
            s,
            move |s| Ok(readout(&p, s, &grid(s, z, 4)?)?.0.tensor),
            move |s, dy| {
                let (_, c) = readout(&p, s, &grid(s, z, 4)?)?;
                let dz = readout_backward(&p, s, &c, dy)?;
                s.accumulate(z, dz.data());
                Ok(())
            },
        ));
    }
    {
        let mut r = rng_for(seed, 30);
        let mut s = ParameterStore::new();
        let p = ImageWriteParams::new(&mut s, 1, 4, 8, 2, &mut r)?;
        let z = input(&mut s, "z", &[3, 4, 8], &mut r)?;
        jitter(&mut s, &mut r);
        let img = Tensor::<f64>::uniform(&[11, 16, 3], 1.0, &mut r);
        let img2 = img.clone();
        cases.push(GradCase::new(
            "image_write",
            comp,
            "11x16 frame -> 3x4x8",
            seed,
            s,
            move |s| Ok(image_write(&p, s, &grid(s, z, 4)?, &img)?.0.tensor),
            move |s, dy| {
                let (_, c) = image_write(&p, s, &grid(s, z, 4)?, &img2)?;
                let dz = image_write_backward(&p, s, &c, dy)?;
                s.accumulate(z, dz.data());
                Ok(())
            },
        ));
    }
    Ok(cases)
}

/// Three steps of a `B1-tiny` memory on a 24x24 sensor; the output stacks
/// all three readouts.
pub fn unroll_case(seed: u64) -> Result<GradCase> {
    let mut c = ModelConfig::variant("B1-tiny")?;
    c.seed = seed;
    c.width = 24;
    c.height = 24;
    let model = Model::<f64>::new(c)?;
    let net = SingleLevel::new(&model)?;
    let mut s = model.store.clone();
    let mut r = rng_for(seed, 40);
    jitter(&mut s, &mut r);
    let slices: Vec<EventSlice> = (0..3)
        .map(|k| {
            let mut sl = random_slice(&mut r, 6, 6, 4, 20, 5000);
            let shift = k as u64 * 5000;
            sl.t_start += shift;
            sl.t_end += shift;
            for e in &mut sl.events {
                e.t += shift;
            }
            sl
        })
        .collect();
    let (net2, slices2) = (net.clone(), slices.clone());
    Ok(GradCase::new(
        "unroll_b1_tiny_3_steps",
        Kind::Composite,
        "B1-tiny 24x24, 3 steps",
        seed,
        s,
        move |s| {
            let (outs, _) = net.forward(s, &slices)?;
            let data: Vec<f64> = outs.iter().flat_map(|o| o.tensor.data().iter().copied()).collect();
            Tensor::from_vec(&[data.len()], data)
        },
        move |s, dy| {
            let (outs, cache) = net2.forward(s, &slices2)?;
            let mut at = 0;
            let d: Vec<Tensor<f64>> = outs
                .iter()
                .map(|o| {
                    let n = o.tensor.len();
                    at += n;
                    Tensor::from_vec(o.tensor.shape(), dy.data()[at - n..at].to_vec())
                })
                .collect::<Result<_>>()?;
            net2.backward(s, &cache, &d)
        },
    ))
}

/// Every case at one seed.
pub fn all_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut v = primitive_cases(seed)?;
    v.extend(composite_cases(seed)?);
    v.push(unroll_case(seed)?);
    Ok(v)
}

/// Reports for every case over `seeds`, each at its kind's tolerance.
pub fn run_all(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for seed in seeds {
        for case in all_cases(seed)? {
            out.push(gradient_report(&case, case.kind.tolerance())?);
        }
    }
    Ok(out)
}

pub fn reports_csv(reports: &[GradReport]) -> String {
    let mut s = format!("{}\n", GradReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = numeric_gradient(|x| Ok(x[0] * x[0]), &[3.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = numeric_gradient(|_| Ok(4.2), &[1.0, -2.0, 0.5], DEFAULT_STEP).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn quadratic_form() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let b = Tensor::<f64>::randn(&[n, n], 1.0, &mut r);
        let a: Vec<f64> = (0..n * n)
            .map(|k| (b.data()[k] + b.data()[(k % n) * n + k / n]) / 2.0)
            .collect();
        let x: Vec<f64> = Tensor::<f64>::randn(&[n], 1.0, &mut r).data().to_vec();
        let f = |v: &[f64]| {
            Ok((0..n).map(|i| (0..n).map(|j| v[i] * a[i * n + j] * v[j]).sum::<f64>()).sum())
        };
        let g = numeric_gradient(f, &x, DEFAULT_STEP).unwrap();
        for i in 0..n {
            let exact: f64 = (0..n).map(|j| 2.0 * a[i * n + j] * x[j]).sum();
            assert!((g[i] - exact).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_loss_errors() {
        let r = numeric_gradient(|x| Ok(1.0 / (x[0] - 1e-5)), &[0.0], DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn sign_flip_is_caught() {
        let case = primitive_cases(0).unwrap().into_iter().find(|c| c.op == "affine").unwrap();
        assert!(gradient_report(&case, PRIMITIVE_TOL).unwrap().pass());
        let bad = case.with_sign_flip();
        let rep = gradient_report(&bad, COMPOSITE_TOL).unwrap();
        assert!(!rep.pass());
        assert!(rep.params.iter().all(|p| !p.pass && p.max_rel_err > 1.0));
    }

    #[test]
    fn report_csv_rows() {
        let case = primitive_cases(1).unwrap().into_iter().find(|c| c.op == "silu").unwrap();
        let rep = gradient_report(&case, PRIMITIVE_TOL).unwrap();
        let csv = reports_csv(&[rep]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "op,param,max_rel_err,pass");
        assert!(lines[1].starts_with("silu,input.x,") && lines[1].ends_with(",true"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-7, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 1.0);
    }
}
