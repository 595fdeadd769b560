//! Dense reference for the event write.
//!
//! Visits every cell, rediscovers its events by scanning the whole slice,
//! embeds each event on its own and sums attention terms in a canonical
//! `(t, y, x, p)` order. Shares only the scalar layer kernels with the fast
//! path; indexing, batching and sparsity are independent.

use crate::error::Result;
use crate::esca::{concat_cols, event_features, EscaParams};
use crate::events::{Event, EventSlice};
use crate::numerics::ops;
use crate::numerics::{FeatureGrid, ParameterStore, Real, Tensor};

pub fn esca_dense_oracle<T: Real>(
    params: &EscaParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
    slice: &EventSlice,
    dt: u64,
    gate: bool,
) -> Result<FeatureGrid<T>> {
    let s = z.stride;
    let d = params.dim;
    let heads = params.heads;
    let hd = params.head_dim();
    let mut ordered: Vec<Event> = slice.events.clone();
    ordered.sort_by_key(|e| (e.t, e.y, e.x, e.p));

    let mut out = z.clone();
    for j in 0..z.height() {
        for k in 0..z.width() {
            let members: Vec<Event> = ordered
                .iter()
                .copied()
                .filter(|e| e.y as usize / s == j && e.x as usize / s == k)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut keys = Vec::with_capacity(members.len());
            let mut values = Vec::with_capacity(members.len());
            for e in &members {
                let one = EventSlice {
                    t_start: slice.t_start,
                    t_end: slice.t_end,
                    events: vec![*e],
                };
                let f = event_features::<T>(&one, s, dt);
                let (a, _) = params.embed_t.forward(store, &f.t)?;
                let (b, _) = params.embed_xy.forward(store, &f.xy)?;
                let (c, _) = params.embed_p.forward(store, &f.p)?;
                let (emb, _) = params.embed_ln.forward(store, &concat_cols(&[&a, &b, &c])?)?;
                keys.push(params.k.forward(store, &emb)?.into_data());
                values.push(params.v.forward(store, &emb)?.into_data());
            }

            let zc = Tensor::from_vec(&[1, d], z.cell(j, k).to_vec())?;
            let (u, _) = params.q_ln.forward(store, &zc)?;
            let q = params.q.forward(store, &u)?.into_data();
            let mut att = vec![T::zero(); d];
            for h in 0..heads {
                let lo = h * hd;
                let mut logits: Vec<T> = keys
                    .iter()
                    .map(|kv| {
                        let mut acc = T::zero();
                        for i in lo..lo + hd {
                            acc = acc + q[i] * kv[i];
                        }
                        acc / T::of(hd as f64).sqrt()
                    })
                    .collect();
                if gate {
                    logits.push(store.value(params.gate).data()[h]);
                }
                ops::softmax_in_place(&mut logits);
                for (w, vv) in logits.iter().zip(&values) {
                    for i in lo..lo + hd {
                        att[i] = att[i] + *w * vv[i];
                    }
                }
            }
            let att = Tensor::from_vec(&[1, d], att)?;
            let zhat = zc.add(&params.out.forward(store, &att)?)?;
            let (m_in, _) = params.mlp_ln.forward(store, &zhat)?;
            let (m, _) = params.mlp.forward(store, &m_in)?;
            out.cell_mut(j, k).copy_from_slice(m.add(&zhat)?.data());
        }
    }
    Ok(out)
}
