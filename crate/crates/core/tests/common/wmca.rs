use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hmnet::numerics::ops::{softmax_in_place, NORM_EPS};
use hmnet::numerics::{FeatureGrid, ParameterStore, Tensor};
use hmnet::wmca::{bias_index, wmca_attend, TileLayout, WmcaParams, BIAS_SIDE, TILE};

pub struct WmcaInstance {
    pub store: ParameterStore<f64>,
    pub params: WmcaParams,
    pub x1: FeatureGrid<f64>,
    pub x2: FeatureGrid<f64>,
}

/// Random problem with every parameter perturbed away from its init,
/// including norm gains and the position-bias table.
pub fn wmca_instance(seed: u64, h: usize, w: usize) -> WmcaInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dq, dkv, heads) = [(8, 8, 2), (8, 16, 2), (16, 8, 4), (12, 12, 3)][rng.random_range(0..4)];
    let mut store = ParameterStore::new();
    let params = WmcaParams::new(&mut store, "wmca.up2", dq, dkv, heads, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noise = Tensor::randn(store.value(id).shape(), 0.3, &mut rng);
        let v = store.value(id).add(&noise).unwrap();
        *store.value_mut(id) = v;
    }
    let x1 = FeatureGrid::new(4, Tensor::randn(&[h, w, dq], 1.0, &mut rng)).unwrap();
    let x2 = FeatureGrid::new(4, Tensor::randn(&[h, w, dkv], 1.0, &mut rng)).unwrap();
    WmcaInstance { store, params, x1, x2 }
}

fn layer_norm_rows(x: &[f64], d: usize, gain: &[f64], shift: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(move |(i, v)| (v - mean) * inv * gain[i] + shift[i])
                .collect::<Vec<_>>()
        })
        .collect()
}

fn linear(x: &[f64], din: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    x.chunks(din)
        .flat_map(|r| (0..dout).map(move |o| b[o] + (0..din).map(|i| r[i] * w[i * dout + o]).sum::<f64>()))
        .collect()
}

/// Dense cross-attention in which each query sees every position of its own
/// 7x7 tile, with the position bias looked up from grid coordinates. On a
/// grid of at most 7x7 this is plain unwindowed attention.
pub fn dense_cross_attention(inst: &WmcaInstance) -> Tensor<f64> {
    let (s, p) = (&inst.store, &inst.params);
    let v = |id| s.value(id).data();
    let (h, w) = (inst.x1.height(), inst.x1.width());
    let (dq, dkv, heads) = (p.dq, p.dkv, p.heads);
    let hd = dq / heads;
    let u1 = layer_norm_rows(inst.x1.tensor.data(), dq, v(p.ln1.gain), v(p.ln1.shift));
    let u2 = layer_norm_rows(inst.x2.tensor.data(), dkv, v(p.ln2.gain), v(p.ln2.shift));
    let q = linear(&u1, dq, v(p.q.weight), v(p.q.bias));
    let k = linear(&u2, dkv, v(p.k.weight), v(p.k.bias));
    let vv = linear(&u2, dkv, v(p.v.weight), v(p.v.bias));
    let table = v(p.bias);
    let side = 2 * TILE - 1;

    let n = h * w;
    let mut att = vec![0.0; n * dq];
    for a in 0..n {
        let (ra, ca) = (a / w, a % w);
        let keys: Vec<usize> = (0..n)
            .filter(|&b| (b / w) / TILE == ra / TILE && (b % w) / TILE == ca / TILE)
            .collect();
        for hh in 0..heads {
            let logits: Vec<f64> = keys
                .iter()
                .map(|&b| {
                    let dot: f64 = (0..hd).map(|i| q[a * dq + hh * hd + i] * k[b * dq + hh * hd + i]).sum();
                    let dr = (ra % TILE) as isize - ((b / w) % TILE) as isize + TILE as isize - 1;
                    let dc = (ca % TILE) as isize - ((b % w) % TILE) as isize + TILE as isize - 1;
                    dot / (hd as f64).sqrt() + table[hh * side * side + dr as usize * side + dc as usize]
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (&b, l) in keys.iter().zip(&logits) {
                let wt = (l - m).exp() / z;
                for i in 0..hd {
                    att[a * dq + hh * hd + i] += wt * vv[b * dq + hh * hd + i];
                }
            }
        }
    }
    let y = linear(&att, dq, v(p.out.weight), v(p.out.bias));
    Tensor::from_vec(&[h, w, dq], y).unwrap()
}

pub fn dense_oracle_error(inst: &WmcaInstance) -> f64 {
    let (y, _) = wmca_attend(&inst.params, &inst.store, &inst.x1, &inst.x2).unwrap();
    y.tensor.max_abs_diff(&dense_cross_attention(inst)).unwrap()
}

/// Perturbs one `x2` cell of the first tile and reports whether every output
/// outside that tile stayed bit-identical while some output inside changed.
pub fn tile_locality_holds(inst: &WmcaInstance) -> bool {
    let (base, _) = wmca_attend(&inst.params, &inst.store, &inst.x1, &inst.x2).unwrap();
    let mut x2 = inst.x2.clone();
    for v in x2.cell_mut(0, 0) {
        *v += 1.0;
    }
    let (moved, _) = wmca_attend(&inst.params, &inst.store, &inst.x1, &x2).unwrap();
    let mut inside_changed = false;
    for j in 0..base.height() {
        for k in 0..base.width() {
            let same = base.cell(j, k).iter().zip(moved.cell(j, k)).all(|(a, b)| a.to_bits() == b.to_bits());
            if j < TILE && k < TILE {
                inside_changed |= !same;
            } else if !same {
                return false;
            }
        }
    }
    inside_changed
}

/// Windowed self-attention with a single norm shared by queries, keys and values.
pub fn self_attention(inst: &WmcaInstance) -> Tensor<f64> {
    let (s, p) = (&inst.store, &inst.params);
    let x = &inst.x1;
    let n = x.height() * x.width();
    let flat = x.tensor.clone().reshape(&[n, p.dq]).unwrap();
    let (u, _) = p.ln1.forward(s, &flat).unwrap();
    let (q, k, v) = (p.q.forward(s, &u).unwrap(), p.k.forward(s, &u).unwrap(), p.v.forward(s, &u).unwrap());
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let table = s.value(p.bias).data();
    let layout = TileLayout::new(x.height(), x.width());
    let mut att = Tensor::zeros(&[n, p.dq]);
    for t in 0..layout.num_tiles() {
        let valid = layout.valid(t);
        for h in 0..p.heads {
            let hs = h * hd..(h + 1) * hd;
            for &(si, gi) in &valid {
                let mut row: Vec<f64> = valid
                    .iter()
                    .map(|&(sj, gj)| {
                        let dot = q.row(gi)[hs.clone()].iter().zip(&k.row(gj)[hs.clone()]).fold(0.0, |a, (x, y)| a + x * y);
                        dot * scale + table[h * BIAS_SIDE * BIAS_SIDE + bias_index(si, sj)]
                    })
                    .collect();
                softmax_in_place(&mut row);
                let out = &mut att.row_mut(gi)[hs.clone()];
                for (wt, &(_, gj)) in row.iter().zip(&valid) {
                    for (o, vv) in out.iter_mut().zip(&v.row(gj)[hs.clone()]) {
                        *o += wt * vv;
                    }
                }
            }
        }
    }
    p.out.forward(s, &att).unwrap().reshape(&[x.height(), x.width(), p.dq]).unwrap()
}

/// With equal inputs and equal norms, cross-attention must reproduce
/// self-attention bit for bit. `None` when the seed draws unequal widths.
pub fn self_attention_matches(seed: u64) -> Option<bool> {
    let mut inst = wmca_instance(seed, 9, 12);
    if inst.params.dq != inst.params.dkv {
        return None;
    }
    let p = inst.params;
    for (a, b) in [(p.ln1.gain, p.ln2.gain), (p.ln1.shift, p.ln2.shift)] {
        let v = inst.store.value(a).clone();
        *inst.store.value_mut(b) = v;
    }
    inst.x2 = inst.x1.clone();
    let (y, _) = wmca_attend(&p, &inst.store, &inst.x1, &inst.x2).unwrap();
    Some(y.tensor.bit_eq(&self_attention(&inst)))
}
