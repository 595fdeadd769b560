//! Latent memory levels and the operations that read and write them.
//!
//! Every write is a pure function of grids returning a cache for its
//! backward pass; [`MemoryState`] wraps a grid with a version counter so that
//! precomputed down-write messages can be checked for staleness.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{
    Conv2d, ConvNormAct, ConvNormActCache, GroupNorm, LayerNorm, Linear, ResidualBlock,
    ResidualCache,
};
use crate::numerics::ops::{self, Activation, NormCache};
use crate::numerics::{FeatureGrid, ParamId, ParameterStore, Real, Tensor};
use crate::wmca::{
    residual_mlp, residual_mlp_backward, wmca_attend, wmca_attend_backward, wmca_block,
    wmca_block_backward, ResidualMlpCache, WmcaBlockCache, WmcaCache, WmcaParams,
};

/// One memory level's grid plus its mutation counter.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    /// 1-based level index.
    pub level: usize,
    z: FeatureGrid<T>,
    version: u64,
}

impl<T: Real> MemoryState<T> {
    pub fn new(level: usize, z: FeatureGrid<T>) -> Self {
        MemoryState { level, z, version: 0 }
    }

    pub fn z(&self) -> &FeatureGrid<T> {
        &self.z
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replaces the grid and bumps the version.
    pub fn set(&mut self, z: FeatureGrid<T>) -> Result<()> {
        if z.tensor.shape() != self.z.tensor.shape() || z.stride != self.z.stride {
            return Err(Error::shape(
                "memory_state",
                format!("{:?} vs {:?}", z.tensor.shape(), self.z.tensor.shape()),
            ));
        }
        self.z = z;
        self.version += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            level: self.level,
            version: self.version,
            z: self.z.clone(),
        }
    }
}

/// Immutable copy of a level's grid taken at a cycle boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub level: usize,
    pub version: u64,
    pub z: FeatureGrid<T>,
}

/// Precomputed down-write residual for level `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownMessage<T> {
    pub target: usize,
    pub delta: FeatureGrid<T>,
    /// Target version the message was computed against.
    pub stamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readout<T> {
    pub o: FeatureGrid<T>,
    pub step: usize,
}

/// Learnable initial state, broadcast over the grid.
pub fn initial_grid<T: Real>(
    store: &ParameterStore<T>,
    init: ParamId,
    stride: usize,
    h: usize,
    w: usize,
) -> FeatureGrid<T> {
    let v = store.value(init).data();
    let d = v.len();
    FeatureGrid {
        stride,
        tensor: Tensor::from_fn(&[h, w, d], |i| v[i % d]),
    }
}

pub fn initial_grid_backward<T: Real>(store: &mut ParameterStore<T>, init: ParamId, dz: &Tensor<T>) {
    let d = dz.last_dim();
    let mut g = vec![T::zero(); d];
    for r in 0..dz.rows() {
        for (a, &b) in g.iter_mut().zip(dz.row(r)) {
            *a = *a + b;
        }
    }
    store.accumulate(init, &g);
}

fn grid_check<T: Real>(op: &'static str, z: &FeatureGrid<T>, d: usize) -> Result<()> {
    if z.depth() != d {
        return Err(Error::shape(op, format!("grid depth {} vs {d}", z.depth())));
    }
    Ok(())
}

/// Transfer from level `l-1` into level `l`.
#[derive(Debug, Clone, Copy)]
pub struct UpWriteParams {
    /// 3x3 stride-2 conv block, `D_{l-1} -> D_l`.
    pub gdown: ConvNormAct,
    pub wmca: WmcaParams,
}

impl UpWriteParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        level: usize,
        d_prev: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(UpWriteParams {
            gdown: ConvNormAct::new(store, &format!("mem{level}.gdown"), 2, d_prev, d, rng)?,
            wmca: WmcaParams::new(store, &format!("wmca.up{level}"), d, d, heads, rng)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct UpWriteCache<T> {
    gdown: ConvNormActCache<T>,
    block: WmcaBlockCache<T>,
}

/// `zh = z + WMCA(z, G(snapshot))`, `z' = MLP(LN(zh)) + zh`.
pub fn up_write<T: Real>(
    p: &UpWriteParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
    snapshot: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, UpWriteCache<T>)> {
    if snapshot.stride * 2 != z.stride {
        return Err(Error::shape(
            "up_write",
            format!("snapshot stride {} vs state stride {}", snapshot.stride, z.stride),
        ));
    }
    grid_check("up_write", z, p.wmca.dq)?;
    let (g, gdown) = p.gdown.forward(store, &snapshot.tensor)?;
    let g = FeatureGrid::new(z.stride, g)?;
    let (y, block) = wmca_block(&p.wmca, store, z, &g)?;
    Ok((y, UpWriteCache { gdown, block }))
}

/// Returns `(d z, d snapshot)`.
pub fn up_write_backward<T: Real>(
    p: &UpWriteParams,
    store: &mut ParameterStore<T>,
    cache: &UpWriteCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dz, dg) = wmca_block_backward(&p.wmca, store, &cache.block, dy)?;
    let dsnap = p.gdown.backward(store, &cache.gdown, &dg)?;
    Ok((dz, dsnap))
}

/// Transfer from level `l+1` back into level `l`, parameters owned by the target.
#[derive(Debug, Clone, Copy)]
pub struct DownWriteParams {
    /// 3x3 stride-2 conv block, `D_l -> D_l`, bringing the target to the source resolution.
    pub gdown: ConvNormAct,
    /// Queries at width `D_l`, keys and values at `D_{l+1}`.
    pub wmca: WmcaParams,
}

impl DownWriteParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        level: usize,
        d: usize,
        d_next: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DownWriteParams {
            gdown: ConvNormAct::new(store, &format!("mem{level}.down.gdown"), 2, d, d, rng)?,
            wmca: WmcaParams::new(store, &format!("wmca.down{level}"), d, d_next, heads, rng)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DownMessageCache<T> {
    gdown: ConvNormActCache<T>,
    attend: WmcaCache<T>,
    hi_dims: (usize, usize),
    mlp: ResidualMlpCache<T>,
}

/// `zh = Up(WMCA(G(z_lo), z_hi)) + z_lo`, `full = MLP(LN(zh)) + zh`; returns
/// `full - z_lo`.
pub fn down_write_delta<T: Real>(
    p: &DownWriteParams,
    store: &ParameterStore<T>,
    z_hi: &FeatureGrid<T>,
    z_lo: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, DownMessageCache<T>)> {
    if z_lo.stride * 2 != z_hi.stride {
        return Err(Error::shape(
            "down_write",
            format!("low stride {} vs high stride {}", z_lo.stride, z_hi.stride),
        ));
    }
    grid_check("down_write", z_lo, p.wmca.dq)?;
    let (g, gdown) = p.gdown.forward(store, &z_lo.tensor)?;
    let g = FeatureGrid::new(z_hi.stride, g)?;
    let (a, attend) = wmca_attend(&p.wmca, store, &g, z_hi)?;
    let u = ops::upsample_bilinear(&a.tensor, z_lo.height(), z_lo.width())?;
    let zhat = FeatureGrid::new(z_lo.stride, u.add(&z_lo.tensor)?)?;
    let (full, mlp) = residual_mlp(&p.wmca, store, &zhat)?;
    let delta = FeatureGrid::new(z_lo.stride, full.tensor.sub(&z_lo.tensor)?)?;
    Ok((
        delta,
        DownMessageCache {
            gdown,
            attend,
            hi_dims: (z_hi.height(), z_hi.width()),
            mlp,
        },
    ))
}

/// Returns `(d z_hi, d z_lo)` for a gradient on the delta.
pub fn down_write_delta_backward<T: Real>(
    p: &DownWriteParams,
    store: &mut ParameterStore<T>,
    cache: &DownMessageCache<T>,
    d_delta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dzhat = residual_mlp_backward(&p.wmca, store, &cache.mlp, d_delta)?;
    let da = ops::upsample_bilinear_backward(&dzhat, cache.hi_dims.0, cache.hi_dims.1)?;
    let (dg, dz_hi) = wmca_attend_backward(&p.wmca, store, &cache.attend, &da)?;
    let mut dz_lo = p.gdown.backward(store, &cache.gdown, &dg)?;
    dz_lo.add_assign(&dzhat)?;
    // delta subtracts z_lo
    dz_lo = dz_lo.sub(d_delta)?;
    Ok((dz_hi, dz_lo))
}

/// Builds the message on the source side from a snapshot of the target.
pub fn down_write_make_message<T: Real>(
    p: &DownWriteParams,
    store: &ParameterStore<T>,
    z_hi: &FeatureGrid<T>,
    z_lo: &Snapshot<T>,
) -> Result<DownMessage<T>> {
    let (delta, _) = down_write_delta(p, store, z_hi, &z_lo.z)?;
    Ok(DownMessage {
        target: z_lo.level,
        delta,
        stamp: z_lo.version,
    })
}

/// `z <- z + delta`, rejected if `z` changed since the message was made.
pub fn down_write_apply<T: Real>(state: &mut MemoryState<T>, msg: &DownMessage<T>) -> Result<()> {
    if msg.target != state.level || msg.stamp != state.version() {
        return Err(Error::StaleMessage {
            level: state.level,
            stamp: msg.stamp,
            current: state.version(),
        });
    }
    let z = FeatureGrid::new(state.z().stride, state.z().tensor.add(&msg.delta.tensor)?)?;
    state.set(z)
}

/// The down-write evaluated in one go on live states: `z_lo + delta(z_hi, z_lo)`.
pub fn down_write_inline<T: Real>(
    p: &DownWriteParams,
    store: &ParameterStore<T>,
    z_hi: &FeatureGrid<T>,
    z_lo: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, DownMessageCache<T>)> {
    let (delta, cache) = down_write_delta(p, store, z_hi, z_lo)?;
    let y = FeatureGrid::new(z_lo.stride, z_lo.tensor.add(&delta.tensor)?)?;
    Ok((y, cache))
}

/// Returns `(d z_hi, d z_lo)`.
pub fn down_write_inline_backward<T: Real>(
    p: &DownWriteParams,
    store: &mut ParameterStore<T>,
    cache: &DownMessageCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dz_hi, mut dz_lo) = down_write_delta_backward(p, store, cache, dy)?;
    dz_lo.add_assign(dy)?;
    Ok((dz_hi, dz_lo))
}

#[derive(Debug, Clone)]
pub struct UpdateParams {
    pub ln: LayerNorm,
    pub blocks: Vec<ResidualBlock>,
}

impl UpdateParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        level: usize,
        d: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ln = LayerNorm::new(store, &format!("mem{level}.update.ln"), d)?;
        let blocks = (0..n_blocks)
            .map(|i| ResidualBlock::new(store, &format!("mem{level}.update.block{i}"), d, rng))
            .collect::<Result<_>>()?;
        Ok(UpdateParams { ln, blocks })
    }
}

/// Residual block count at a 1-based level: 1, 3, 9, ...
pub fn residual_blocks(level: usize) -> usize {
    3usize.pow(level as u32 - 1)
}

#[derive(Debug, Clone)]
pub struct UpdateCache<T> {
    ln: NormCache<T>,
    blocks: Vec<ResidualCache<T>>,
}

impl<T> UpdateCache<T> {
    pub fn blocks_applied(&self) -> usize {
        self.blocks.len()
    }
}

/// `z <- F(LN(z))` with `F` a stack of residual blocks.
pub fn update_state<T: Real>(
    p: &UpdateParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, UpdateCache<T>)> {
    let (mut x, ln) = p.ln.forward(store, &z.tensor)?;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, c) = b.forward(store, &x)?;
        blocks.push(c);
        x = y;
    }
    Ok((FeatureGrid::new(z.stride, x)?, UpdateCache { ln, blocks }))
}

pub fn update_state_backward<T: Real>(
    p: &UpdateParams,
    store: &mut ParameterStore<T>,
    cache: &UpdateCache<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = dy.clone();
    for (b, c) in p.blocks.iter().zip(&cache.blocks).rev() {
        g = b.backward(store, c, &g)?;
    }
    p.ln.backward(store, &cache.ln, &g)
}

#[derive(Debug, Clone, Copy)]
pub struct ReadoutParams {
    pub ln: LayerNorm,
    pub conv: Conv2d,
    pub gn: GroupNorm,
}

impl ReadoutParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        level: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ReadoutParams {
            ln: LayerNorm::new(store, &format!("mem{level}.readout.ln"), d)?,
            conv: Conv2d::new(store, &format!("mem{level}.readout.conv"), 1, 1, d, d, rng)?,
            gn: GroupNorm::new(store, &format!("mem{level}.readout.gn"), d)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReadoutCache<T> {
    ln: NormCache<T>,
    normed: Tensor<T>,
    gn: NormCache<T>,
    pre_act: Tensor<T>,
}

/// `o = SiLU(GN(conv1x1(LN(z))))`; does not touch `z`.
pub fn readout<T: Real>(
    p: &ReadoutParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, ReadoutCache<T>)> {
    let (normed, ln) = p.ln.forward(store, &z.tensor)?;
    let c = p.conv.forward(store, &normed)?;
    let (pre_act, gn) = p.gn.forward(store, &c)?;
    let o = ops::activation(&pre_act, Activation::Silu);
    Ok((
        FeatureGrid::new(z.stride, o)?,
        ReadoutCache {
            ln,
            normed,
            gn,
            pre_act,
        },
    ))
}

pub fn readout_backward<T: Real>(
    p: &ReadoutParams,
    store: &mut ParameterStore<T>,
    cache: &ReadoutCache<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dpre = ops::activation_backward(&cache.pre_act, Activation::Silu, dy)?;
    let dc = p.gn.backward(store, &cache.gn, &dpre)?;
    let dn = p.conv.backward(store, &cache.normed, &dc)?;
    p.ln.backward(store, &cache.ln, &dn)
}

/// Frame write into the top level through a linear patch embedding.
#[derive(Debug, Clone, Copy)]
pub struct ImageWriteParams {
    /// Patch side in pixels, equal to the top level's stride.
    pub patch: usize,
    pub embed: Linear,
    pub wmca: WmcaParams,
}

impl ImageWriteParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        level: usize,
        patch: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ImageWriteParams {
            patch,
            embed: Linear::new(store, "image.patch", patch * patch * 3, d, rng)?,
            wmca: WmcaParams::new(store, &format!("wmca.image{level}"), d, d, heads, rng)?,
        })
    }
}

/// Flattens non-overlapping `p x p` patches of an `H x W x 3` image into rows
/// of length `p*p*3` in `(row, col, channel)` order. Partial edge patches are
/// zero-padded.
pub fn image_patches<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || patch == 0 {
        return Err(Error::shape("image_patches", format!("image {s:?}, patch {patch}")));
    }
    let (h, w) = (s[0], s[1]);
    let (gh, gw) = (h.div_ceil(patch), w.div_ceil(patch));
    let len = patch * patch * 3;
    let mut out = vec![T::zero(); gh * gw * len];
    let src = image.data();
    for y in 0..h {
        for x in 0..w {
            let cell = (y / patch) * gw + x / patch;
            let at = cell * len + ((y % patch) * patch + x % patch) * 3;
            out[at..at + 3].copy_from_slice(&src[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    Tensor::from_vec(&[gh * gw, len], out)
}

#[derive(Debug, Clone)]
pub struct ImageWriteCache<T> {
    patches: Tensor<T>,
    block: WmcaBlockCache<T>,
}

/// `zh = z + WMCA(z, E(patches))`, `z' = MLP(LN(zh)) + zh`.
pub fn image_write<T: Real>(
    p: &ImageWriteParams,
    store: &ParameterStore<T>,
    z: &FeatureGrid<T>,
    image: &Tensor<T>,
) -> Result<(FeatureGrid<T>, ImageWriteCache<T>)> {
    let patches = image_patches(image, p.patch)?;
    let s = image.shape();
    let (gh, gw) = (s[0].div_ceil(p.patch), s[1].div_ceil(p.patch));
    if (gh, gw) != (z.height(), z.width()) || p.patch != z.stride {
        return Err(Error::shape(
            "image_write",
            format!(
                "image {}x{} at patch {} gives {gh}x{gw}, state is {}x{} at stride {}",
                s[0],
                s[1],
                p.patch,
                z.height(),
                z.width(),
                z.stride
            ),
        ));
    }
    let e = p.embed.forward(store, &patches)?;
    let e = FeatureGrid::new(z.stride, e.reshape(&[gh, gw, p.wmca.dkv])?)?;
    let (y, block) = wmca_block(&p.wmca, store, z, &e)?;
    Ok((y, ImageWriteCache { patches, block }))
}

/// Returns `d z`; the image itself receives no gradient.
pub fn image_write_backward<T: Real>(
    p: &ImageWriteParams,
    store: &mut ParameterStore<T>,
    cache: &ImageWriteCache<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (dz, de) = wmca_block_backward(&p.wmca, store, &cache.block, dy)?;
    let de = de.reshape(&[cache.patches.rows(), p.wmca.dkv])?;
    p.embed.backward(store, &cache.patches, &de)?;
    Ok(dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn grid(stride: usize, h: usize, w: usize, d: usize, r: &mut ChaCha8Rng) -> FeatureGrid<f64> {
        FeatureGrid::new(stride, Tensor::randn(&[h, w, d], 1.0, r)).unwrap()
    }

    fn silence_wmca(store: &mut ParameterStore<f64>, p: &WmcaParams) {
        for id in [p.v.weight, p.v.bias, p.out.bias, p.mlp.fc2.weight, p.mlp.fc2.bias] {
            store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn up_write_shapes_and_identity() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let p = UpWriteParams::new(&mut store, 2, 8, 16, 2, &mut r).unwrap();
        let snap = grid(4, 64, 64, 8, &mut r);
        let z = grid(8, 32, 32, 16, &mut r);
        let (y, _) = up_write(&p, &store, &z, &snap).unwrap();
        assert_eq!(y.tensor.shape(), &[32, 32, 16]);
        silence_wmca(&mut store, &p.wmca);
        let (y, _) = up_write(&p, &store, &z, &snap).unwrap();
        assert!(y.tensor.bit_eq(&z.tensor));
        assert!(up_write(&p, &store, &z, &grid(8, 64, 64, 8, &mut r)).is_err());
    }

    #[test]
    fn down_write_message_and_staleness() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let p = DownWriteParams::new(&mut store, 1, 8, 16, 2, &mut r).unwrap();
        let hi = grid(8, 5, 5, 16, &mut r);
        let mut lo = MemoryState::new(1, grid(4, 9, 10, 8, &mut r));
        let msg = down_write_make_message(&p, &store, &hi, &lo.snapshot()).unwrap();
        assert_eq!(msg.delta.tensor.shape(), &[9, 10, 8]);

        let (inline, _) = down_write_inline(&p, &store, &hi, lo.z()).unwrap();
        let mut applied = lo.clone();
        down_write_apply(&mut applied, &msg).unwrap();
        assert!(applied.z().tensor.bit_eq(&inline.tensor));
        assert_eq!(applied.version(), 1);

        lo.set(lo.z().clone()).unwrap();
        assert!(matches!(
            down_write_apply(&mut lo, &msg),
            Err(Error::StaleMessage { level: 1, stamp: 0, current: 1 })
        ));

        silence_wmca(&mut store, &p.wmca);
        let zero = down_write_make_message(&p, &store, &hi, &lo.snapshot()).unwrap();
        assert!(zero.delta.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn update_with_silent_blocks_is_layer_norm() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let p = UpdateParams::new(&mut store, 3, 8, residual_blocks(3), &mut r).unwrap();
        assert_eq!(p.blocks.len(), 9);
        let z = grid(16, 3, 3, 8, &mut r);
        let (_, cache) = update_state(&p, &store, &z).unwrap();
        assert_eq!(cache.blocks_applied(), 9);
        for b in &p.blocks {
            store.value_mut(b.conv2.weight).fill(0.0);
            store.value_mut(b.conv2.bias).fill(0.0);
        }
        let (y, _) = update_state(&p, &store, &z).unwrap();
        let (ln, _) = p.ln.forward(&store, &z.tensor).unwrap();
        assert!(y.tensor.bit_eq(&ln));
    }

    #[test]
    fn readout_zero_conv_is_zero() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let p = ReadoutParams::new(&mut store, 1, 16, &mut r).unwrap();
        let z = grid(4, 4, 4, 16, &mut r);
        let before = z.clone();
        let (o, _) = readout(&p, &store, &z).unwrap();
        assert_eq!(o.tensor.shape(), z.tensor.shape());
        assert_eq!(z, before);
        store.value_mut(p.conv.weight).fill(0.0);
        store.value_mut(p.conv.bias).fill(0.0);
        let (o, _) = readout(&p, &store, &z).unwrap();
        assert!(o.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_patch_grid() {
        let mut r = rng();
        let img = Tensor::<f64>::randn(&[256, 256, 3], 1.0, &mut r);
        let patches = image_patches(&img, 16).unwrap();
        assert_eq!(patches.shape(), &[256, 768]);
        // pixel (17, 35) -> patch (1, 2), offset (1, 3)
        let at = (1 * 16 + 3) * 3;
        assert_eq!(&patches.row(16 + 2)[at..at + 3], &img.data()[(17 * 256 + 35) * 3..(17 * 256 + 35) * 3 + 3]);
    }

    #[test]
    fn silent_image_write_is_identity() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let p = ImageWriteParams::new(&mut store, 1, 16, 8, 2, &mut r).unwrap();
        let z = grid(16, 2, 3, 8, &mut r);
        let img = Tensor::<f64>::randn(&[20, 40, 3], 1.0, &mut r);
        let (y, _) = image_write(&p, &store, &z, &img).unwrap();
        assert!(!y.tensor.bit_eq(&z.tensor));
        silence_wmca(&mut store, &p.wmca);
        let (y, _) = image_write(&p, &store, &z, &img).unwrap();
        assert!(y.tensor.bit_eq(&z.tensor));
        assert!(image_write(&p, &store, &z, &Tensor::zeros(&[40, 40, 3])).is_err());
    }
}
