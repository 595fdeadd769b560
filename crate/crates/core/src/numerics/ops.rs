//! Primitive kernels with forward and vector-Jacobian products.
//!
//! All reductions run in a fixed index order so forward passes are
//! bit-deterministic.

use crate::error::{Error, Result};
use crate::numerics::{macs, Real, Tensor};

/// Normalization epsilon, added to the variance inside the square root.
pub const NORM_EPS: f64 = 1e-5;

/// `y = x W + b` for `x: [.. x Din]`, `W: [Din x Dout]`, `b: [Dout]`.
pub fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (din, dout) = check_affine(x, w, b)?;
    let n = x.rows();
    let wd = w.data();
    let mut out = vec![T::zero(); n * dout];
    for r in 0..n {
        let xr = x.row(r);
        let acc = &mut out[r * dout..(r + 1) * dout];
        for (i, &xi) in xr.iter().enumerate() {
            let wrow = &wd[i * dout..(i + 1) * dout];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a = *a + xi * wv;
            }
        }
        for (a, &bv) in acc.iter_mut().zip(b.data()) {
            *a = *a + bv;
        }
    }
    macs::record((n * din * dout) as u64);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    Tensor::from_vec(&shape, out)
}

pub struct AffineGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn affine_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    let din = x.last_dim();
    let dout = dy.last_dim();
    if w.shape() != [din, dout] || x.rows() != dy.rows() {
        return Err(Error::shape(
            "affine_backward",
            format!("x {:?}, w {:?}, dy {:?}", x.shape(), w.shape(), dy.shape()),
        ));
    }
    let n = x.rows();
    let wd = w.data();
    let mut dx = vec![T::zero(); n * din];
    let mut dw = vec![T::zero(); din * dout];
    let mut db = vec![T::zero(); dout];
    for r in 0..n {
        let xr = x.row(r);
        let g = dy.row(r);
        for i in 0..din {
            let wrow = &wd[i * dout..(i + 1) * dout];
            let mut acc = T::zero();
            for (&gv, &wv) in g.iter().zip(wrow) {
                acc = acc + gv * wv;
            }
            dx[r * din + i] = acc;
            let xi = xr[i];
            let dwrow = &mut dw[i * dout..(i + 1) * dout];
            for (d, &gv) in dwrow.iter_mut().zip(g) {
                *d = *d + xi * gv;
            }
        }
        for (d, &gv) in db.iter_mut().zip(g) {
            *d = *d + gv;
        }
    }
    Ok(AffineGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(&[din, dout], dw)?,
        db: Tensor::from_vec(&[dout], db)?,
    })
}

fn check_affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let ok = x.shape().len() >= 1
        && w.shape().len() == 2
        && w.shape()[0] == x.last_dim()
        && b.shape() == [w.shape()[1]];
    if !ok {
        return Err(Error::shape(
            "affine",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    Ok((w.shape()[0], w.shape()[1]))
}

/// Saved statistics of a normalization forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Normalized input before gain/shift.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per normalization group.
    pub rstd: Vec<T>,
}

/// Normalizes each innermost vector to zero mean and unit variance, then
/// applies elementwise `gain` and `shift` of length `D`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = x.last_dim();
    if d == 0 || gain.shape() != [d] || shift.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}, shift {:?}", x.shape(), gain.shape(), shift.shape()),
        ));
    }
    let n = x.rows();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let (mean, rs) = moments(x.row(r).iter().copied(), d);
        rstd.push(rs);
        let xr = x.row(r);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(xr) {
            *o = (v - mean) * rs;
        }
        let yr = y.row_mut(r);
        for i in 0..d {
            yr[i] = xh[i] * gain.data()[i] + shift.data()[i];
        }
    }
    Ok((y, NormCache { xhat, rstd }))
}

pub struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgain: Tensor<T>,
    pub dshift: Tensor<T>,
}

pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    cache.xhat.check_same(dy, "layer_norm_backward")?;
    let d = dy.last_dim();
    let n = dy.rows();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = vec![T::zero(); d];
    let mut dshift = vec![T::zero(); d];
    let inv_n = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            dgain[i] = dgain[i] + g[i] * xh[i];
            dshift[i] = dshift[i] + g[i];
            dxhat[i] = g[i] * gain.data()[i];
            sum_dxhat = sum_dxhat + dxhat[i];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[i] * xh[i];
        }
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            out[i] = rs * (dxhat[i] - sum_dxhat * inv_n - xh[i] * sum_dxhat_xhat * inv_n);
        }
    }
    Ok(NormGrads {
        dx,
        dgain: Tensor::from_vec(&[d], dgain)?,
        dshift: Tensor::from_vec(&[d], dshift)?,
    })
}

/// Group normalization of an `H x W x D` tensor over `(H, W, D/G)` per group,
/// with per-channel gain and shift.
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = check_group_norm(x, groups, gain, shift)?;
    let per = d / groups;
    let pixels = x.rows();
    let count = pixels * per;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(groups);
    let xd = x.data();
    for g in 0..groups {
        let c0 = g * per;
        let it = (0..pixels).flat_map(|p| xd[p * d + c0..p * d + c0 + per].iter().copied());
        let (mean, rs) = moments(it, count);
        rstd.push(rs);
        for p in 0..pixels {
            for c in c0..c0 + per {
                let idx = p * d + c;
                let v = (xd[idx] - mean) * rs;
                xhat.data_mut()[idx] = v;
                y.data_mut()[idx] = v * gain.data()[c] + shift.data()[c];
            }
        }
    }
    Ok((y, NormCache { xhat, rstd }))
}

pub fn group_norm_backward<T: Real>(
    cache: &NormCache<T>,
    groups: usize,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    cache.xhat.check_same(dy, "group_norm_backward")?;
    let d = dy.last_dim();
    if groups == 0 || d % groups != 0 || cache.rstd.len() != groups {
        return Err(Error::shape("group_norm_backward", format!("D={d}, G={groups}")));
    }
    let per = d / groups;
    let pixels = dy.rows();
    let inv_n = T::one() / T::of((pixels * per) as f64);
    let xh = cache.xhat.data();
    let g = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = vec![T::zero(); d];
    let mut dshift = vec![T::zero(); d];
    for grp in 0..groups {
        let c0 = grp * per;
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for p in 0..pixels {
            for c in c0..c0 + per {
                let idx = p * d + c;
                dgain[c] = dgain[c] + g[idx] * xh[idx];
                dshift[c] = dshift[c] + g[idx];
                let dxh = g[idx] * gain.data()[c];
                sum_dxhat = sum_dxhat + dxh;
                sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh[idx];
            }
        }
        let rs = cache.rstd[grp];
        for p in 0..pixels {
            for c in c0..c0 + per {
                let idx = p * d + c;
                let dxh = g[idx] * gain.data()[c];
                dx.data_mut()[idx] =
                    rs * (dxh - sum_dxhat * inv_n - xh[idx] * sum_dxhat_xhat * inv_n);
            }
        }
    }
    Ok(NormGrads {
        dx,
        dgain: Tensor::from_vec(&[d], dgain)?,
        dshift: Tensor::from_vec(&[d], dshift)?,
    })
}

fn check_group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<usize> {
    let d = x.last_dim();
    if groups == 0 || d % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("channel count {d} not divisible by {groups} groups"),
        ));
    }
    if gain.shape() != [d] || shift.shape() != [d] {
        return Err(Error::shape(
            "group_norm",
            format!("gain {:?}, shift {:?} for D={d}", gain.shape(), shift.shape()),
        ));
    }
    Ok(d)
}

/// Two-pass mean and reciprocal standard deviation.
fn moments<T: Real>(values: impl Iterator<Item = T> + Clone, n: usize) -> (T, T) {
    let nf = T::of(n as f64);
    let mean = values.clone().fold(T::zero(), |a, v| a + v) / nf;
    let var = values.fold(T::zero(), |a, v| a + (v - mean) * (v - mean)) / nf;
    (mean, T::one() / (var + T::of(NORM_EPS)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Unknown {
                what: "activation",
                name: other.to_string(),
            }),
        }
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            // exact Gaussian CDF form
            Activation::Gelu => {
                T::of(0.5) * v * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Silu => v * sigmoid(v),
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, v: T) -> T {
        match self {
            Activation::Gelu => {
                let cdf = T::of(0.5) * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(v * v) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + v * pdf
            }
            Activation::Silu => {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Real>(
    x: &Tensor<T>,
    kind: Activation,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.zip_with(dy, "activation_backward", |v, g| g * kind.derivative(v))
}

/// Output extent of a `k x k` convolution with padding `k / 2`.
pub fn conv_out_dim(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// 2-D convolution on `H x W x Din` with kernel `[k, k, Din, Dout]`, zero
/// padding `k / 2`, and the given stride.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride)?;
    if b.shape() != [g.dout] {
        return Err(Error::shape("conv2d", format!("bias {:?} for Dout={}", b.shape(), g.dout)));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.oh * g.ow * g.dout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let acc = &mut out[(oy * g.ow + ox) * g.dout..(oy * g.ow + ox + 1) * g.dout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &xd[(iy * g.w + ix) * g.din..(iy * g.w + ix + 1) * g.din];
                    let wbase = (ky * g.k + kx) * g.din * g.dout;
                    for (i, &xv) in xin.iter().enumerate() {
                        let wrow = &wd[wbase + i * g.dout..wbase + (i + 1) * g.dout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
            for (a, &bv) in acc.iter_mut().zip(b.data()) {
                *a = *a + bv;
            }
        }
    }
    macs::record(g.macs());
    Tensor::from_vec(&[g.oh, g.ow, g.dout], out)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, w, stride)?;
    if dy.shape() != [g.oh, g.ow, g.dout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("dy {:?}, expected {:?}", dy.shape(), [g.oh, g.ow, g.dout]),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.dout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &gd[(oy * g.ow + ox) * g.dout..(oy * g.ow + ox + 1) * g.dout];
            for (d, &gv) in db.iter_mut().zip(go) {
                *d = *d + gv;
            }
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let base = (iy * g.w + ix) * g.din;
                    let wbase = (ky * g.k + kx) * g.din * g.dout;
                    for i in 0..g.din {
                        let wrow = &wd[wbase + i * g.dout..wbase + (i + 1) * g.dout];
                        let mut acc = T::zero();
                        for (&gv, &wv) in go.iter().zip(wrow) {
                            acc = acc + gv * wv;
                        }
                        dx[base + i] = dx[base + i] + acc;
                        let xv = xd[base + i];
                        let dwrow = &mut dw[wbase + i * g.dout..wbase + (i + 1) * g.dout];
                        for (d, &gv) in dwrow.iter_mut().zip(go) {
                            *d = *d + xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[g.dout], db)?,
    })
}

struct ConvGeom {
    h: usize,
    w: usize,
    din: usize,
    dout: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Self> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[2] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, kernel {ws:?}")));
        }
        let k = ws[0];
        if !matches!(k, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::shape("conv2d", format!("kernel {k}, stride {stride} unsupported")));
        }
        Ok(ConvGeom {
            h: xs[0],
            w: xs[1],
            din: xs[2],
            dout: ws[3],
            k,
            pad: k / 2,
            stride,
            oh: conv_out_dim(xs[0], k, stride),
            ow: conv_out_dim(xs[1], k, stride),
        })
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + kk).checked_sub(self.pad)?;
        (pos < n).then_some(pos)
    }

    fn macs(&self) -> u64 {
        (self.oh * self.ow * self.k * self.k * self.din * self.dout) as u64
    }
}

/// Source taps of one output coordinate for 2x bilinear upsampling with
/// half-pixel centers (align-corners = false).
#[inline]
fn bilinear_taps(o: usize, n_in: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2x upsampling of `H x W x D`, cropped to `out_h x out_w`
/// (at most `2H x 2W`). The scale factor is fixed at 2 regardless of crop.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, d) = check_upsample(x.shape(), out_h, out_w)?;
    let xd = x.data();
    let mut out = vec![T::zero(); out_h * out_w * d];
    for oy in 0..out_h {
        let (y0, y1, ly) = bilinear_taps(oy, h);
        for ox in 0..out_w {
            let (x0, x1, lx) = bilinear_taps(ox, w);
            let weights = [
                (y0, x0, (1.0 - ly) * (1.0 - lx)),
                (y0, x1, (1.0 - ly) * lx),
                (y1, x0, ly * (1.0 - lx)),
                (y1, x1, ly * lx),
            ];
            let o = &mut out[(oy * out_w + ox) * d..(oy * out_w + ox + 1) * d];
            for (yy, xx, wt) in weights {
                let wt = T::of(wt);
                let src = &xd[(yy * w + xx) * d..(yy * w + xx + 1) * d];
                for (a, &v) in o.iter_mut().zip(src) {
                    *a = *a + wt * v;
                }
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, d], out)
}

/// Transpose of [`upsample_bilinear`]: scatters `dy` back onto `H x W x D`.
pub fn upsample_bilinear_backward<T: Real>(
    dy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let s = dy.shape();
    if s.len() != 3 {
        return Err(Error::shape("upsample_backward", format!("dy {s:?}")));
    }
    let (out_h, out_w, d) = (s[0], s[1], s[2]);
    check_upsample(&[in_h, in_w, d], out_h, out_w)?;
    let gd = dy.data();
    let mut dx = vec![T::zero(); in_h * in_w * d];
    for oy in 0..out_h {
        let (y0, y1, ly) = bilinear_taps(oy, in_h);
        for ox in 0..out_w {
            let (x0, x1, lx) = bilinear_taps(ox, in_w);
            let weights = [
                (y0, x0, (1.0 - ly) * (1.0 - lx)),
                (y0, x1, (1.0 - ly) * lx),
                (y1, x0, ly * (1.0 - lx)),
                (y1, x1, ly * lx),
            ];
            let g = &gd[(oy * out_w + ox) * d..(oy * out_w + ox + 1) * d];
            for (yy, xx, wt) in weights {
                let wt = T::of(wt);
                let dst = &mut dx[(yy * in_w + xx) * d..(yy * in_w + xx + 1) * d];
                for (a, &gv) in dst.iter_mut().zip(g) {
                    *a = *a + wt * gv;
                }
            }
        }
    }
    Tensor::from_vec(&[in_h, in_w, d], dx)
}

fn check_upsample(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape("upsample_bilinear", format!("input {shape:?}")));
    }
    if out_h > 2 * shape[0] || out_w > 2 * shape[1] {
        return Err(Error::shape(
            "upsample_bilinear",
            format!("output {out_h}x{out_w} exceeds 2x of {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Softmax of a single row with max subtraction.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Vector-Jacobian product of softmax for a single row: `dx = y * (dy - <dy, y>)`.
pub fn softmax_backward_row<T: Real>(y: &[T], dy: &[T], dx: &mut [T]) {
    let mut dot = T::zero();
    for (&a, &b) in y.iter().zip(dy) {
        dot = dot + a * b;
    }
    for ((o, &a), &b) in dx.iter_mut().zip(y).zip(dy) {
        *o = a * (b - dot);
    }
}

/// Row-wise softmax over the innermost dimension.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.last_dim() == 0 {
        return Err(Error::shape("softmax_rows", "empty rows"));
    }
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_in_place(y.row_mut(r));
    }
    Ok(y)
}

pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.check_same(dy, "softmax_rows_backward")?;
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        softmax_backward_row(y.row(r), dy.row(r), dx.row_mut(r));
    }
    Ok(dx)
}
