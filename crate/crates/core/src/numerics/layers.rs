//! Parameter-bound wrappers around the kernels in [`super::ops`].
//!
//! A layer holds [`ParamId`]s only. `forward` reads values from the store;
//! `backward` accumulates parameter gradients into the store and returns the
//! input gradient.

use rand::Rng;

use crate::error::Result;
use crate::numerics::ops::{self, Activation, NormCache};
use crate::numerics::{ParamId, ParameterStore, Real, Tensor};

/// GroupNorm group count used throughout the model.
pub const GROUPS: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (din.max(1) as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), Tensor::uniform(&[din, dout], bound, rng))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::uniform(&[dout], bound, rng))?;
        Ok(Linear { weight, bias, din, dout })
    }

    pub fn forward<T: Real>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::affine(x, p.value(self.weight), p.value(self.bias))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = ops::affine_backward(x, p.value(self.weight), dy)?;
        p.accumulate(self.weight, g.dw.data());
        p.accumulate(self.bias, g.db.data());
        Ok(g.dx)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[d], T::one()))?;
        let shift = store.insert(format!("{name}.shift"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gain, shift })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, NormCache<T>)> {
        ops::layer_norm(x, p.value(self.gain), p.value(self.shift))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = ops::layer_norm_backward(cache, p.value(self.gain), dy)?;
        p.accumulate(self.gain, g.dgain.data());
        p.accumulate(self.shift, g.dshift.data());
        Ok(g.dx)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, name: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[d], T::one()))?;
        let shift = store.insert(format!("{name}.shift"), Tensor::zeros(&[d]))?;
        Ok(GroupNorm {
            gain,
            shift,
            groups: GROUPS,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, NormCache<T>)> {
        ops::group_norm(x, self.groups, p.value(self.gain), p.value(self.shift))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = ops::group_norm_backward(cache, self.groups, p.value(self.gain), dy)?;
        p.accumulate(self.gain, g.dgain.data());
        p.accumulate(self.shift, g.dshift.data());
        Ok(g.dx)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        name: &str,
        kernel: usize,
        stride: usize,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((kernel * kernel * din).max(1) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::uniform(&[kernel, kernel, din, dout], bound, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::uniform(&[dout], bound, rng))?;
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, p.value(self.weight), p.value(self.bias), self.stride)
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = ops::conv2d_backward(x, p.value(self.weight), self.stride, dy)?;
        p.accumulate(self.weight, g.dw.data());
        p.accumulate(self.bias, g.db.data());
        Ok(g.dx)
    }
}

/// Two affine maps with GELU between them (1x1 convolutions on a grid).
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Tensor<T>,
    hidden: Tensor<T>,
    act: Tensor<T>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, MlpCache<T>)> {
        let hidden = self.fc1.forward(p, x)?;
        let act = ops::activation(&hidden, Activation::Gelu);
        let y = self.fc2.forward(p, &act)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                hidden,
                act,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &MlpCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dact = self.fc2.backward(p, &cache.act, dy)?;
        let dhidden = ops::activation_backward(&cache.hidden, Activation::Gelu, &dact)?;
        self.fc1.backward(p, &cache.x, &dhidden)
    }
}

/// Affine, LayerNorm, GELU, affine: the per-field event embedding network.
#[derive(Debug, Clone, Copy)]
pub struct EmbedMlp {
    pub fc1: Linear,
    pub ln: LayerNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct EmbedMlpCache<T> {
    x: Tensor<T>,
    ln: NormCache<T>,
    normed: Tensor<T>,
    act: Tensor<T>,
}

impl EmbedMlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EmbedMlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, dout, rng)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), dout)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dout, dout, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, EmbedMlpCache<T>)> {
        let h = self.fc1.forward(p, x)?;
        let (normed, ln) = self.ln.forward(p, &h)?;
        let act = ops::activation(&normed, Activation::Gelu);
        let y = self.fc2.forward(p, &act)?;
        Ok((
            y,
            EmbedMlpCache {
                x: x.clone(),
                ln,
                normed,
                act,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &EmbedMlpCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dact = self.fc2.backward(p, &cache.act, dy)?;
        let dnormed = ops::activation_backward(&cache.normed, Activation::Gelu, &dact)?;
        let dh = self.ln.backward(p, &cache.ln, &dnormed)?;
        self.fc1.backward(p, &cache.x, &dh)
    }
}

/// `conv3x3 -> GroupNorm -> SiLU`, optionally strided.
#[derive(Debug, Clone, Copy)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

#[derive(Debug, Clone)]
pub struct ConvNormActCache<T> {
    x: Tensor<T>,
    norm: NormCache<T>,
    pre_act: Tensor<T>,
}

impl ConvNormAct {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        name: &str,
        stride: usize,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvNormAct {
            conv: Conv2d::new(store, &format!("{name}.conv"), 3, stride, din, dout, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.gn"), dout)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvNormActCache<T>)> {
        let c = self.conv.forward(p, x)?;
        let (pre_act, norm) = self.norm.forward(p, &c)?;
        let y = ops::activation(&pre_act, Activation::Silu);
        Ok((
            y,
            ConvNormActCache {
                x: x.clone(),
                norm,
                pre_act,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &ConvNormActCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dpre = ops::activation_backward(&cache.pre_act, Activation::Silu, dy)?;
        let dc = self.norm.backward(p, &cache.norm, &dpre)?;
        self.conv.backward(p, &cache.x, &dc)
    }
}

/// `y = x + conv2(silu(gn2(conv1(silu(gn1(x))))))` with 3x3 convolutions.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub gn2: GroupNorm,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    n1: NormCache<T>,
    pre1: Tensor<T>,
    a1: Tensor<T>,
    n2: NormCache<T>,
    pre2: Tensor<T>,
    a2: Tensor<T>,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParameterStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ResidualBlock {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), d)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 3, 1, d, d, rng)?,
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), d)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), 3, 1, d, d, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ResidualCache<T>)> {
        let (pre1, n1) = self.gn1.forward(p, x)?;
        let a1 = ops::activation(&pre1, Activation::Silu);
        let c1 = self.conv1.forward(p, &a1)?;
        let (pre2, n2) = self.gn2.forward(p, &c1)?;
        let a2 = ops::activation(&pre2, Activation::Silu);
        let c2 = self.conv2.forward(p, &a2)?;
        let y = x.add(&c2)?;
        Ok((
            y,
            ResidualCache {
                n1,
                pre1,
                a1,
                n2,
                pre2,
                a2,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &ResidualCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let da2 = self.conv2.backward(p, &cache.a2, dy)?;
        let dpre2 = ops::activation_backward(&cache.pre2, Activation::Silu, &da2)?;
        let dc1 = self.gn2.backward(p, &cache.n2, &dpre2)?;
        let da1 = self.conv1.backward(p, &cache.a1, &dc1)?;
        let dpre1 = ops::activation_backward(&cache.pre1, Activation::Silu, &da1)?;
        let mut dx = self.gn1.backward(p, &cache.n1, &dpre1)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}
