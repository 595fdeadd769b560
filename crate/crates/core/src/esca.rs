//! Event Sparse Cross Attention.
//!
//! Raw events are embedded per event and written into the memory cell whose
//! `s x s` window contains them. Each active cell attends over its own events
//! plus one learnable gate logit per head; the gate column soaks up attention
//! mass and is dropped before the value sum. Cells without events are left
//! untouched and cost nothing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::events::{build_window_index, EventSlice, Polarity, WindowIndex};
use crate::numerics::layers::{EmbedMlp, EmbedMlpCache, LayerNorm, Linear, Mlp, MlpCache};
use crate::numerics::ops::{self, NormCache};
use crate::numerics::{macs, FeatureGrid, ParamId, ParameterStore, Real, Tensor};

pub mod oracle;

pub use oracle::esca_dense_oracle;

/// Hidden width multiplier of the post-write MLP.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct EscaParams {
    pub dim: usize,
    pub heads: usize,
    pub embed_t: EmbedMlp,
    pub embed_xy: EmbedMlp,
    pub embed_p: EmbedMlp,
    pub embed_ln: LayerNorm,
    pub q_ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// One gate logit per head, `[heads]`.
    pub gate: ParamId,
    pub out: Linear,
    pub mlp_ln: LayerNorm,
    pub mlp: Mlp,
}

impl EscaParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim % 4 != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "ESCA needs D divisible by 4 and by H (D={dim}, H={heads})"
            )));
        }
        let (dt, dxy, dp) = split_dims(dim);
        Ok(EscaParams {
            dim,
            heads,
            embed_t: EmbedMlp::new(store, "esca.embed_t", 1, dt, rng)?,
            embed_xy: EmbedMlp::new(store, "esca.embed_xy", 2, dxy, rng)?,
            embed_p: EmbedMlp::new(store, "esca.embed_p", 2, dp, rng)?,
            embed_ln: LayerNorm::new(store, "esca.embed_ln", dim)?,
            q_ln: LayerNorm::new(store, "esca.q.ln", dim)?,
            q: Linear::new(store, "esca.q", dim, dim, rng)?,
            k: Linear::new(store, "esca.k", dim, dim, rng)?,
            v: Linear::new(store, "esca.v", dim, dim, rng)?,
            gate: store.insert("esca.gate.logit", Tensor::zeros(&[heads]))?,
            out: Linear::new(store, "esca.out", dim, dim, rng)?,
            mlp_ln: LayerNorm::new(store, "esca.mlp.ln", dim)?,
            mlp: Mlp::new(store, "esca.mlp", dim, MLP_RATIO * dim, dim, rng)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Widths of the `t : xy : p` sub-embeddings, `D/4 : D/2 : D/4`.
pub fn split_dims(dim: usize) -> (usize, usize, usize) {
    (dim / 4, dim / 2, dim / 4)
}

/// Raw per-event inputs: relative time, relative window position, one-hot polarity.
#[derive(Debug, Clone)]
pub struct EventFeatures<T> {
    pub t: Tensor<T>,
    pub xy: Tensor<T>,
    pub p: Tensor<T>,
}

/// Builds the embedding inputs for events of one slice.
pub fn event_features<T: Real>(slice: &EventSlice, stride: usize, dt: u64) -> EventFeatures<T> {
    let n = slice.len();
    let mut t = Vec::with_capacity(n);
    let mut xy = Vec::with_capacity(2 * n);
    let mut p = Vec::with_capacity(2 * n);
    let s = stride as f64;
    for e in &slice.events {
        t.push(T::of((e.t as f64 - slice.t_start as f64) / dt as f64));
        xy.push(T::of(((e.x as usize % stride) as f64 + 0.5) / s));
        xy.push(T::of(((e.y as usize % stride) as f64 + 0.5) / s));
        let on = e.p == Polarity::On;
        p.push(if on { T::zero() } else { T::one() });
        p.push(if on { T::one() } else { T::zero() });
    }
    EventFeatures {
        t: Tensor::from_vec(&[n, 1], t).expect("n x 1"),
        xy: Tensor::from_vec(&[n, 2], xy).expect("n x 2"),
        p: Tensor::from_vec(&[n, 2], p).expect("n x 2"),
    }
}

/// Layer-normalized per-event embeddings `d_i`, one row per slice event.
#[derive(Debug, Clone)]
pub struct EventEmbedding<T> {
    pub vectors: Tensor<T>,
    cache: EmbedCache<T>,
}

impl<T: Real> EventEmbedding<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding rows before the final gain/shift.
    pub fn normalized(&self) -> &Tensor<T> {
        &self.cache.ln.xhat
    }
}

#[derive(Debug, Clone)]
struct EmbedCache<T> {
    t: EmbedMlpCache<T>,
    xy: EmbedMlpCache<T>,
    p: EmbedMlpCache<T>,
    ln: NormCache<T>,
}

pub fn embed_events<T: Real>(
    params: &EscaParams,
    store: &ParameterStore<T>,
    slice: &EventSlice,
    index: &WindowIndex,
    dt: u64,
) -> Result<EventEmbedding<T>> {
    let f = event_features::<T>(slice, index.stride, dt);
    let (dtv, t) = params.embed_t.forward(store, &f.t)?;
    let (dxy, xy) = params.embed_xy.forward(store, &f.xy)?;
    let (dp, p) = params.embed_p.forward(store, &f.p)?;
    let concat = concat_cols(&[&dtv, &dxy, &dp])?;
    let (vectors, ln) = params.embed_ln.forward(store, &concat)?;
    Ok(EventEmbedding {
        vectors,
        cache: EmbedCache { t, xy, p, ln },
    })
}

/// Accumulates embedding-network gradients from `d_vectors`.
pub fn embed_events_backward<T: Real>(
    params: &EscaParams,
    store: &mut ParameterStore<T>,
    emb: &EventEmbedding<T>,
    d_vectors: &Tensor<T>,
) -> Result<()> {
    let dconcat = params.embed_ln.backward(store, &emb.cache.ln, d_vectors)?;
    let (dt, dxy, dp) = split_dims(params.dim);
    let parts = split_cols(&dconcat, &[dt, dxy, dp])?;
    params.embed_t.backward(store, &emb.cache.t, &parts[0])?;
    params.embed_xy.backward(store, &emb.cache.xy, &parts[1])?;
    params.embed_p.backward(store, &emb.cache.p, &parts[2])?;
    Ok(())
}

/// Forward state of [`esca_attend`] kept for the backward pass and for
/// inspection of attention weights.
#[derive(Debug, Clone)]
pub struct AttendCache<T> {
    cells: Vec<(usize, usize)>,
    /// Event indices of each active cell, aligned with `cells`.
    members: Vec<Vec<usize>>,
    /// Offsets into `weights` per (cell, head).
    offsets: Vec<usize>,
    /// Softmax rows, including the gate column when enabled.
    weights: Vec<T>,
    gate: bool,
    emb: Tensor<T>,
    keys: Tensor<T>,
    values: Tensor<T>,
    u: Tensor<T>,
    q_ln: NormCache<T>,
    q: Tensor<T>,
    /// Concatenated head outputs before the output projection, `[A x D]`.
    pub attention: Tensor<T>,
    /// Output projection, the attention write `h`, `[A x D]`.
    pub write: Tensor<T>,
    mlp_ln: NormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Real> AttendCache<T> {
    pub fn active_cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    /// Softmax row for `(cell, head)`; the last entry is the gate when enabled.
    pub fn weights(&self, cell: usize, head: usize, heads: usize) -> &[T] {
        let i = cell * heads + head;
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Total attention mass on events (gate column excluded) per (cell, head).
    pub fn event_mass(&self, heads: usize) -> Vec<T> {
        (0..self.cells.len() * heads)
            .map(|i| {
                let row = &self.weights[self.offsets[i]..self.offsets[i + 1]];
                let n = if self.gate { row.len() - 1 } else { row.len() };
                row[..n].iter().fold(T::zero(), |a, &b| a + b)
            })
            .collect()
    }
}

/// Writes events into the active cells of `z`.
///
/// Per active cell: `q = Q(LN(z))`, per-head `a = softmax([q K^T / sqrt(D/H), w])`,
/// `h = out([a]_{1..L} V)`, `zh = z + h`, `z' = MLP(LN(zh)) + zh`.
pub fn esca_attend<T: Real>(
    params: &EscaParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
    index: &WindowIndex,
    emb: &EventEmbedding<T>,
    gate: bool,
) -> Result<(FeatureGrid<T>, AttendCache<T>)> {
    if z.stride != index.stride || z.height() != index.rows || z.width() != index.cols {
        return Err(Error::shape(
            "esca_attend",
            format!(
                "grid {}x{} at stride {} vs index {}x{} at stride {}",
                z.height(),
                z.width(),
                z.stride,
                index.rows,
                index.cols,
                index.stride
            ),
        ));
    }
    let d = params.dim;
    if z.depth() != d || emb.vectors.last_dim() != d {
        return Err(Error::shape(
            "esca_attend",
            format!("grid depth {}, embedding {}, params {d}", z.depth(), emb.vectors.last_dim()),
        ));
    }
    let heads = params.heads;
    let hd = params.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let a = index.cells.len();

    let keys = params.k.forward(store, &emb.vectors)?;
    let values = params.v.forward(store, &emb.vectors)?;

    let cells: Vec<(usize, usize)> = index.cells.iter().map(|c| (c.row, c.col)).collect();
    let members: Vec<Vec<usize>> = index.cells.iter().map(|c| c.events.clone()).collect();
    let mut zc = Tensor::zeros(&[a, d]);
    for (i, &(j, k)) in cells.iter().enumerate() {
        zc.row_mut(i).copy_from_slice(z.cell(j, k));
    }
    let (u, q_ln) = params.q_ln.forward(store, &zc)?;
    let q = params.q.forward(store, &u)?;

    let gate_logits = store.value(params.gate).data();
    let mut offsets = Vec::with_capacity(a * heads + 1);
    offsets.push(0);
    let mut weights = Vec::new();
    let mut attention = Tensor::zeros(&[a, d]);
    let mut n_macs = 0u64;
    for (c, evs) in members.iter().enumerate() {
        let qc = q.row(c);
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            let start = weights.len();
            for &e in evs {
                let kr = &keys.row(e)[hs.clone()];
                let dot = qc[hs.clone()]
                    .iter()
                    .zip(kr)
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                weights.push(dot * scale);
            }
            if gate {
                weights.push(gate_logits[h]);
            }
            ops::softmax_in_place(&mut weights[start..]);
            let out = &mut attention.row_mut(c)[hs.clone()];
            for (i, &e) in evs.iter().enumerate() {
                let wv = weights[start + i];
                for (o, &v) in out.iter_mut().zip(&values.row(e)[hs.clone()]) {
                    *o = *o + wv * v;
                }
            }
            offsets.push(weights.len());
            n_macs += 2 * (evs.len() * hd) as u64;
        }
    }
    macs::record(n_macs);

    let write = params.out.forward(store, &attention)?;
    let zhat = zc.add(&write)?;
    let (m_in, mlp_ln) = params.mlp_ln.forward(store, &zhat)?;
    let (m, mlp) = params.mlp.forward(store, &m_in)?;
    let znew = m.add(&zhat)?;

    let mut out = z.clone();
    for (i, &(j, k)) in cells.iter().enumerate() {
        out.cell_mut(j, k).copy_from_slice(znew.row(i));
    }
    Ok((
        out,
        AttendCache {
            cells,
            members,
            offsets,
            weights,
            gate,
            emb: emb.vectors.clone(),
            keys,
            values,
            u,
            q_ln,
            q,
            attention,
            write,
            mlp_ln,
            mlp,
        },
    ))
}

/// Backward of [`esca_attend`]. Returns the gradient with respect to the input
/// grid and the event embeddings; parameter gradients are accumulated.
pub fn esca_attend_backward<T: Real>(
    params: &EscaParams,
    store: &mut ParameterStore<T>,
    cache: &AttendCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = params.dim;
    let heads = params.heads;
    let hd = params.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let a = cache.cells.len();
    let width = d_out.shape()[1];

    let mut dznew = Tensor::zeros(&[a, d]);
    for (i, &(j, k)) in cache.cells.iter().enumerate() {
        dznew.row_mut(i).copy_from_slice(d_out.row(j * width + k));
    }
    let dm_in = params.mlp.backward(store, &cache.mlp, &dznew)?;
    let mut dzhat = params.mlp_ln.backward(store, &cache.mlp_ln, &dm_in)?;
    dzhat.add_assign(&dznew)?;
    let datt = params.out.backward(store, &cache.attention, &dzhat)?;

    let n = cache.keys.rows();
    let mut dq = Tensor::zeros(&[a, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let mut dgate = vec![T::zero(); heads];
    let mut da = Vec::new();
    let mut dlogits = Vec::new();
    for (c, evs) in cache.members.iter().enumerate() {
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            let row = cache.weights(c, h, heads);
            let g = &datt.row(c)[hs.clone()];
            da.clear();
            for (i, &e) in evs.iter().enumerate() {
                let vr = &cache.values.row(e)[hs.clone()];
                da.push(g.iter().zip(vr).fold(T::zero(), |acc, (&x, &y)| acc + x * y));
                let wv = row[i];
                for (o, &gv) in dv.row_mut(e)[hs.clone()].iter_mut().zip(g) {
                    *o = *o + wv * gv;
                }
            }
            if cache.gate {
                da.push(T::zero());
            }
            dlogits.clear();
            dlogits.resize(row.len(), T::zero());
            ops::softmax_backward_row(row, &da, &mut dlogits);
            for (i, &e) in evs.iter().enumerate() {
                let dl = dlogits[i] * scale;
                let qv: Vec<T> = cache.q.row(c)[hs.clone()].to_vec();
                let kr: Vec<T> = cache.keys.row(e)[hs.clone()].to_vec();
                for (o, &kv) in dq.row_mut(c)[hs.clone()].iter_mut().zip(&kr) {
                    *o = *o + dl * kv;
                }
                for (o, &qx) in dk.row_mut(e)[hs.clone()].iter_mut().zip(&qv) {
                    *o = *o + dl * qx;
                }
            }
            if cache.gate {
                dgate[h] = dgate[h] + dlogits[evs.len()];
            }
        }
    }
    store.accumulate(params.gate, &dgate);

    let du = params.q.backward(store, &cache.u, &dq)?;
    let dzc = params.q_ln.backward(store, &cache.q_ln, &du)?;
    let mut demb = params.k.backward(store, &cache.emb, &dk)?;
    demb.add_assign(&params.v.backward(store, &cache.emb, &dv)?)?;

    let mut dz = d_out.clone();
    for (i, &(j, k)) in cache.cells.iter().enumerate() {
        let row = dz.row_mut(j * width + k);
        for ((o, &x), &y) in row.iter_mut().zip(dzhat.row(i)).zip(dzc.row(i)) {
            *o = x + y;
        }
    }
    Ok((dz, demb))
}

/// Full event write: window index, embedding, attention.
#[derive(Debug, Clone)]
pub struct WriteCache<T> {
    pub index: WindowIndex,
    pub embedding: EventEmbedding<T>,
    pub attend: AttendCache<T>,
}

pub fn esca_write<T: Real>(
    params: &EscaParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
    slice: &EventSlice,
    dt: u64,
    gate: bool,
) -> Result<(FeatureGrid<T>, WriteCache<T>)> {
    let index = build_window_index(slice, z.stride, (z.height(), z.width()))?;
    let embedding = embed_events(params, store, slice, &index, dt)?;
    let (out, attend) = esca_attend(params, store, z, &index, &embedding, gate)?;
    Ok((
        out,
        WriteCache {
            index,
            embedding,
            attend,
        },
    ))
}

pub fn esca_write_backward<T: Real>(
    params: &EscaParams,
    store: &mut ParameterStore<T>,
    cache: &WriteCache<T>,
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (dz, demb) = esca_attend_backward(params, store, &cache.attend, d_out)?;
    embed_events_backward(params, store, &cache.embedding, &demb)?;
    Ok(dz)
}

/// Closed-form MAC count of one event write with `cells` active cells and
/// `events` events.
pub fn esca_macs(dim: usize, cells: usize, events: usize) -> u64 {
    let (dt, dxy, dp) = split_dims(dim);
    let embed = dt + dt * dt + 2 * dxy + dxy * dxy + 2 * dp + dp * dp;
    let per_event = embed + 2 * dim * dim + 2 * dim;
    let per_cell = 2 * dim * dim + 2 * MLP_RATIO * dim * dim;
    (events * per_event + cells * per_cell) as u64
}

pub(crate) fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let n = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != n) {
        return Err(Error::shape("concat", "row counts differ"));
    }
    let width: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(&[n, width], out)
}

pub(crate) fn split_cols<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    if total != x.last_dim() {
        return Err(Error::shape("split", format!("{widths:?} vs {}", x.last_dim())));
    }
    let n = x.rows();
    let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
    for r in 0..n {
        let row = x.row(r);
        let mut at = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[at..at + w]);
            at += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(o, &w)| Tensor::from_vec(&[n, w], o))
        .collect()
}
