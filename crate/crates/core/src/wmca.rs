//! Window-based multi-head cross-attention.
//!
//! Queries come from one grid, keys and values from another grid of the same
//! spatial size. Both are cut into non-overlapping 7x7 tiles; attention runs
//! within each tile with a learned relative position bias. Grids that are not
//! multiples of 7 are padded and the padded keys are masked out.

use rand::Rng;

use crate::error::{Error, Result};
use crate::esca::MLP_RATIO;
use crate::numerics::layers::{LayerNorm, Linear, Mlp, MlpCache};
use crate::numerics::ops::{self, NormCache};
use crate::numerics::{macs, FeatureGrid, ParamId, ParameterStore, Real, Tensor};

pub const TILE: usize = 7;
pub const TILE_AREA: usize = TILE * TILE;
/// Side of the relative-offset table: offsets span `-6..=6`.
pub const BIAS_SIDE: usize = 2 * TILE - 1;

/// Tiling of an `H x W` grid into 7x7 tiles, padded at the bottom and right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    pub height: usize,
    pub width: usize,
    pub tiles_r: usize,
    pub tiles_c: usize,
}

impl TileLayout {
    pub fn new(height: usize, width: usize) -> Self {
        TileLayout {
            height,
            width,
            tiles_r: height.div_ceil(TILE),
            tiles_c: width.div_ceil(TILE),
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_r * self.tiles_c
    }

    pub fn padded_height(&self) -> usize {
        self.tiles_r * TILE
    }

    pub fn padded_width(&self) -> usize {
        self.tiles_c * TILE
    }

    pub fn masked_cells(&self) -> usize {
        self.num_tiles() * TILE_AREA - self.height * self.width
    }

    /// Grid index (`row * W + col`) held by each slot of tile `t`, `None` for padding.
    pub fn slots(&self, t: usize) -> [Option<usize>; TILE_AREA] {
        let (tr, tc) = (t / self.tiles_c, t % self.tiles_c);
        let mut out = [None; TILE_AREA];
        for (s, o) in out.iter_mut().enumerate() {
            let (r, c) = (tr * TILE + s / TILE, tc * TILE + s % TILE);
            if r < self.height && c < self.width {
                *o = Some(r * self.width + c);
            }
        }
        out
    }

    /// Valid `(slot, grid index)` pairs of tile `t` in slot order.
    pub fn valid(&self, t: usize) -> Vec<(usize, usize)> {
        self.slots(t)
            .iter()
            .enumerate()
            .filter_map(|(s, g)| g.map(|g| (s, g)))
            .collect()
    }
}

/// Tiles as `[T, 49, D]` with padded slots zeroed, plus the validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiles<T> {
    pub data: Tensor<T>,
    pub mask: Vec<bool>,
    pub layout: TileLayout,
}

pub fn tile_partition<T: Real>(x: &FeatureGrid<T>) -> Tiles<T> {
    let layout = TileLayout::new(x.height(), x.width());
    let d = x.depth();
    let n = layout.num_tiles();
    let mut data = Tensor::zeros(&[n, TILE_AREA, d]);
    let mut mask = vec![false; n * TILE_AREA];
    for t in 0..n {
        for (s, g) in layout.slots(t).iter().enumerate() {
            if let Some(g) = *g {
                data.row_mut(t * TILE_AREA + s).copy_from_slice(x.tensor.row(g));
                mask[t * TILE_AREA + s] = true;
            }
        }
    }
    Tiles { data, mask, layout }
}

pub fn tile_merge<T: Real>(tiles: &Tiles<T>, stride: usize) -> FeatureGrid<T> {
    let l = tiles.layout;
    let d = tiles.data.last_dim();
    let mut out = FeatureGrid::zeros(stride, l.height, l.width, d);
    for t in 0..l.num_tiles() {
        for (s, g) in l.slots(t).iter().enumerate() {
            if let Some(g) = *g {
                out.tensor.row_mut(g).copy_from_slice(tiles.data.row(t * TILE_AREA + s));
            }
        }
    }
    out
}

/// Table entry for the offset between tile slots `i` (query) and `j` (key).
pub fn bias_index(i: usize, j: usize) -> usize {
    let dr = (i / TILE) as isize - (j / TILE) as isize + (TILE as isize - 1);
    let dc = (i % TILE) as isize - (j % TILE) as isize + (TILE as isize - 1);
    dr as usize * BIAS_SIDE + dc as usize
}

/// Expands a `[H, 169]` table into the `[H, 49, 49]` per-tile bias.
pub fn relative_position_bias<T: Real>(table: &Tensor<T>) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 || s[1] != BIAS_SIDE * BIAS_SIDE {
        return Err(Error::shape("relative_position_bias", format!("table {s:?}")));
    }
    let heads = s[0];
    Ok(Tensor::from_fn(&[heads, TILE_AREA, TILE_AREA], |idx| {
        let h = idx / (TILE_AREA * TILE_AREA);
        let r = idx % (TILE_AREA * TILE_AREA);
        table.data()[h * BIAS_SIDE * BIAS_SIDE + bias_index(r / TILE_AREA, r % TILE_AREA)]
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct WmcaParams {
    pub dq: usize,
    pub dkv: usize,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// `[heads, 169]`, zero-initialized.
    pub bias: ParamId,
    pub out: Linear,
    pub mlp_ln: LayerNorm,
    pub mlp: Mlp,
}

impl WmcaParams {
    /// `prefix` is e.g. `wmca.up2`. Attention width equals the query width.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dq: usize,
        dkv: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dq % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: width {dq} not divisible by {heads} heads"
            )));
        }
        Ok(WmcaParams {
            dq,
            dkv,
            heads,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dq)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dkv)?,
            q: Linear::new(store, &format!("{prefix}.q"), dq, dq, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), dkv, dq, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), dkv, dq, rng)?,
            bias: store.insert(
                format!("{prefix}.bias.table"),
                Tensor::zeros(&[heads, BIAS_SIDE * BIAS_SIDE]),
            )?,
            out: Linear::new(store, &format!("{prefix}.out"), dq, dq, rng)?,
            mlp_ln: LayerNorm::new(store, &format!("{prefix}.mlp.ln"), dq)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), dq, MLP_RATIO * dq, dq, rng)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dq / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct WmcaCache<T> {
    layout: TileLayout,
    stride: usize,
    x1: Tensor<T>,
    u1: Tensor<T>,
    ln1: NormCache<T>,
    u2: Tensor<T>,
    ln2: NormCache<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Per (tile, head): row-major `n x n` softmax over valid slots.
    weights: Vec<Vec<T>>,
    attention: Tensor<T>,
}

impl<T: Real> WmcaCache<T> {
    /// Softmax rows of `(tile, head)` over valid slots only.
    pub fn weights(&self, tile: usize, head: usize, heads: usize) -> &[T] {
        &self.weights[tile * heads + head]
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

fn flat<T: Real>(x: &FeatureGrid<T>) -> Tensor<T> {
    let n = x.height() * x.width();
    x.tensor.clone().reshape(&[n, x.depth()]).expect("same size")
}

/// Attention output after the output projection, `[H, W, dq]`, no residual.
pub fn wmca_attend<T: Real>(
    params: &WmcaParams,
    store: &ParameterStore<T>,
    x1: &FeatureGrid<T>,
    x2: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, WmcaCache<T>)> {
    if x1.height() != x2.height() || x1.width() != x2.width() {
        return Err(Error::shape(
            "wmca_attend",
            format!(
                "query grid {}x{} vs key grid {}x{}",
                x1.height(),
                x1.width(),
                x2.height(),
                x2.width()
            ),
        ));
    }
    if x1.depth() != params.dq || x2.depth() != params.dkv {
        return Err(Error::shape(
            "wmca_attend",
            format!(
                "depths {}/{} vs params {}/{}",
                x1.depth(),
                x2.depth(),
                params.dq,
                params.dkv
            ),
        ));
    }
    let layout = TileLayout::new(x1.height(), x1.width());
    let heads = params.heads;
    let hd = params.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let f1 = flat(x1);
    let f2 = flat(x2);
    let (u1, ln1) = params.ln1.forward(store, &f1)?;
    let (u2, ln2) = params.ln2.forward(store, &f2)?;
    let q = params.q.forward(store, &u1)?;
    let k = params.k.forward(store, &u2)?;
    let v = params.v.forward(store, &u2)?;
    let table = store.value(params.bias).data();

    let mut attention = Tensor::zeros(&[f1.rows(), params.dq]);
    let mut weights = Vec::with_capacity(layout.num_tiles() * heads);
    let mut n_macs = 0u64;
    for t in 0..layout.num_tiles() {
        let valid = layout.valid(t);
        let n = valid.len();
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            let tb = &table[h * BIAS_SIDE * BIAS_SIDE..(h + 1) * BIAS_SIDE * BIAS_SIDE];
            let mut w = vec![T::zero(); n * n];
            for (a, &(si, gi)) in valid.iter().enumerate() {
                let qi = &q.row(gi)[hs.clone()];
                let row = &mut w[a * n..(a + 1) * n];
                for (b, &(sj, gj)) in valid.iter().enumerate() {
                    let kj = &k.row(gj)[hs.clone()];
                    let dot = qi.iter().zip(kj).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    row[b] = dot * scale + tb[bias_index(si, sj)];
                }
                ops::softmax_in_place(row);
                let out = &mut attention.row_mut(gi)[hs.clone()];
                for (b, &(_, gj)) in valid.iter().enumerate() {
                    let wv = row[b];
                    for (o, &vv) in out.iter_mut().zip(&v.row(gj)[hs.clone()]) {
                        *o = *o + wv * vv;
                    }
                }
            }
            weights.push(w);
        }
        n_macs += 2 * (n * n * params.dq) as u64;
    }
    macs::record(n_macs);

    let y = params.out.forward(store, &attention)?;
    let out = FeatureGrid::new(x1.stride, y.reshape(&[x1.height(), x1.width(), params.dq])?)?;
    Ok((
        out,
        WmcaCache {
            layout,
            stride: x1.stride,
            x1: f1,
            u1,
            ln1,
            u2,
            ln2,
            q,
            k,
            v,
            weights,
            attention,
        },
    ))
}

/// Returns `(d x1, d x2)` as `[H, W, D]` tensors.
pub fn wmca_attend_backward<T: Real>(
    params: &WmcaParams,
    store: &mut ParameterStore<T>,
    cache: &WmcaCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let layout = cache.layout;
    let heads = params.heads;
    let hd = params.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let n_rows = cache.x1.rows();
    let dy = d_out.clone().reshape(&[n_rows, params.dq])?;
    let datt = params.out.backward(store, &cache.attention, &dy)?;

    let mut dq = Tensor::zeros(&[n_rows, params.dq]);
    let mut dk = Tensor::zeros(&[n_rows, params.dq]);
    let mut dv = Tensor::zeros(&[n_rows, params.dq]);
    let mut dtable = vec![T::zero(); heads * BIAS_SIDE * BIAS_SIDE];
    for t in 0..layout.num_tiles() {
        let valid = layout.valid(t);
        let n = valid.len();
        let mut da = vec![T::zero(); n];
        let mut dl = vec![T::zero(); n];
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            let w = &cache.weights[t * heads + h];
            let dtb = &mut dtable[h * BIAS_SIDE * BIAS_SIDE..(h + 1) * BIAS_SIDE * BIAS_SIDE];
            for (a, &(si, gi)) in valid.iter().enumerate() {
                let row = &w[a * n..(a + 1) * n];
                let g: Vec<T> = datt.row(gi)[hs.clone()].to_vec();
                for (b, &(_, gj)) in valid.iter().enumerate() {
                    let vr = &cache.v.row(gj)[hs.clone()];
                    da[b] = g.iter().zip(vr).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    for (o, &gv) in dv.row_mut(gj)[hs.clone()].iter_mut().zip(&g) {
                        *o = *o + row[b] * gv;
                    }
                }
                ops::softmax_backward_row(row, &da, &mut dl);
                let qi: Vec<T> = cache.q.row(gi)[hs.clone()].to_vec();
                for (b, &(sj, gj)) in valid.iter().enumerate() {
                    dtb[bias_index(si, sj)] = dtb[bias_index(si, sj)] + dl[b];
                    let ds = dl[b] * scale;
                    let kj: Vec<T> = cache.k.row(gj)[hs.clone()].to_vec();
                    for (o, &kv) in dq.row_mut(gi)[hs.clone()].iter_mut().zip(&kj) {
                        *o = *o + ds * kv;
                    }
                    for (o, &qv) in dk.row_mut(gj)[hs.clone()].iter_mut().zip(&qi) {
                        *o = *o + ds * qv;
                    }
                }
            }
        }
    }
    store.accumulate(params.bias, &dtable);

    let du1 = params.q.backward(store, &cache.u1, &dq)?;
    let dx1 = params.ln1.backward(store, &cache.ln1, &du1)?;
    let mut du2 = params.k.backward(store, &cache.u2, &dk)?;
    du2.add_assign(&params.v.backward(store, &cache.u2, &dv)?)?;
    let dx2 = params.ln2.backward(store, &cache.ln2, &du2)?;
    let (h, w) = (layout.height, layout.width);
    Ok((dx1.reshape(&[h, w, params.dq])?, dx2.reshape(&[h, w, params.dkv])?))
}

/// `y = MLP(LN(x)) + x` on a grid, the post-attention half of every write.
#[derive(Debug, Clone)]
pub struct ResidualMlpCache<T> {
    ln: NormCache<T>,
    mlp: MlpCache<T>,
}

pub fn residual_mlp<T: Real>(
    params: &WmcaParams,
    store: &ParameterStore<T>,
    x: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, ResidualMlpCache<T>)> {
    let f = flat(x);
    let (m_in, ln) = params.mlp_ln.forward(store, &f)?;
    let (m, mlp) = params.mlp.forward(store, &m_in)?;
    let y = m.add(&f)?.reshape(x.tensor.shape())?;
    Ok((FeatureGrid::new(x.stride, y)?, ResidualMlpCache { ln, mlp }))
}

pub fn residual_mlp_backward<T: Real>(
    params: &WmcaParams,
    store: &mut ParameterStore<T>,
    cache: &ResidualMlpCache<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = dy.shape().to_vec();
    let f = dy.clone().reshape(&[dy.rows(), dy.last_dim()])?;
    let dm_in = params.mlp.backward(store, &cache.mlp, &f)?;
    let mut dx = params.mlp_ln.backward(store, &cache.ln, &dm_in)?;
    dx.add_assign(&f)?;
    dx.reshape(&shape)
}

/// Up-write style block: `zh = x1 + WMCA(x1, x2)`, `y = MLP(LN(zh)) + zh`.
#[derive(Debug, Clone)]
pub struct WmcaBlockCache<T> {
    attend: WmcaCache<T>,
    mlp: ResidualMlpCache<T>,
}

pub fn wmca_block<T: Real>(
    params: &WmcaParams,
    store: &ParameterStore<T>,
    x1: &FeatureGrid<T>,
    x2: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, WmcaBlockCache<T>)> {
    let (a, attend) = wmca_attend(params, store, x1, x2)?;
    let zhat = FeatureGrid::new(x1.stride, a.tensor.add(&x1.tensor)?)?;
    let (y, mlp) = residual_mlp(params, store, &zhat)?;
    Ok((y, WmcaBlockCache { attend, mlp }))
}

/// Returns `(d x1, d x2)`.
pub fn wmca_block_backward<T: Real>(
    params: &WmcaParams,
    store: &mut ParameterStore<T>,
    cache: &WmcaBlockCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dzhat = residual_mlp_backward(params, store, &cache.mlp, dy)?;
    let (mut dx1, dx2) = wmca_attend_backward(params, store, &cache.attend, &dzhat)?;
    dx1.add_assign(&dzhat)?;
    Ok((dx1, dx2))
}

/// MACs of [`wmca_attend`] on an `h x w` grid.
pub fn wmca_attend_macs(dq: usize, dkv: usize, h: usize, w: usize) -> u64 {
    let layout = TileLayout::new(h, w);
    let n = h * w;
    let proj = n * dq * dq * 2 + 2 * n * dkv * dq;
    let attn: usize = (0..layout.num_tiles())
        .map(|t| {
            let v = layout.valid(t).len();
            2 * v * v * dq
        })
        .sum();
    (proj + attn) as u64
}

/// MACs of [`residual_mlp`] on `n` cells of width `d`.
pub fn residual_mlp_macs(d: usize, n: usize) -> u64 {
    (2 * MLP_RATIO * d * d * n) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tile_counts() {
        let l = TileLayout::new(7, 7);
        assert_eq!((l.num_tiles(), l.masked_cells()), (1, 0));
        let l = TileLayout::new(8, 8);
        assert_eq!(l.num_tiles(), 4);
        assert_eq!((l.padded_height(), l.padded_width()), (14, 14));
        assert_eq!(l.masked_cells(), 132);
    }

    #[test]
    fn diagonal_bias_shared() {
        for i in 0..TILE_AREA {
            assert_eq!(bias_index(i, i), 6 * BIAS_SIDE + 6);
        }
        assert_eq!(bias_index(0, 48), 0);
        assert_eq!(bias_index(48, 0), BIAS_SIDE * BIAS_SIDE - 1);
        let zero = relative_position_bias(&Tensor::<f64>::zeros(&[2, 169])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_values_give_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::<f64>::new();
        let p = WmcaParams::new(&mut store, "wmca.up2", 8, 16, 2, &mut rng).unwrap();
        store.value_mut(p.v.weight).fill(0.0);
        store.value_mut(p.v.bias).fill(0.0);
        store.value_mut(p.out.bias).fill(0.0);
        let x1 = FeatureGrid::new(8, Tensor::randn(&[9, 5, 8], 1.0, &mut rng)).unwrap();
        let x2 = FeatureGrid::new(8, Tensor::randn(&[9, 5, 16], 1.0, &mut rng)).unwrap();
        let (y, _) = wmca_attend(&p, &store, &x1, &x2).unwrap();
        assert!(y.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::<f64>::new();
        let p = WmcaParams::new(&mut store, "wmca.up2", 8, 8, 2, &mut rng).unwrap();
        store.value_mut(p.k.weight).fill(0.0);
        let x1 = FeatureGrid::new(4, Tensor::randn(&[8, 3, 8], 1.0, &mut rng)).unwrap();
        let x2 = FeatureGrid::new(4, Tensor::randn(&[8, 3, 8], 1.0, &mut rng)).unwrap();
        let (_, cache) = wmca_attend(&p, &store, &x1, &x2).unwrap();
        let layout = cache.layout();
        for t in 0..layout.num_tiles() {
            let valid = layout.valid(t);
            let n = valid.len();
            for &(_, gi) in &valid {
                for c in 0..8 {
                    let mean = valid.iter().map(|&(_, gj)| cache.v.row(gj)[c]).sum::<f64>() / n as f64;
                    assert!((cache.attention.row(gi)[c] - mean).abs() < 1e-12);
                }
            }
            for h in 0..2 {
                let w = cache.weights(t, h, 2);
                for a in 0..n {
                    let s: f64 = w[a * n..(a + 1) * n].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mac_formula_matches_instrumentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::<f64>::new();
        let p = WmcaParams::new(&mut store, "wmca.down1", 8, 16, 2, &mut rng).unwrap();
        let x1 = FeatureGrid::new(4, Tensor::randn(&[10, 9, 8], 1.0, &mut rng)).unwrap();
        let x2 = FeatureGrid::new(4, Tensor::randn(&[10, 9, 16], 1.0, &mut rng)).unwrap();
        let (_, n) = macs::measure(|| wmca_attend(&p, &store, &x1, &x2).unwrap());
        assert_eq!(n, wmca_attend_macs(8, 16, 10, 9));
    }
}
