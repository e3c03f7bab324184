//! Per-scale alignment, deformable fusion and channel attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, DeformConv, Init, Linear, ParamGroup, ParamStore};
use crate::tensor::{PoolKind, Scalar, Tensor};

/// Shared two-layer bottleneck MLP `E → E/r → E` applied to both the
/// average- and max-pooled channel descriptors.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttention {
            fc1: Linear::new(store, &format!("{name}.fc1"), ParamGroup::Head, (channels, hidden), init, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), ParamGroup::Head, (hidden, channels), init, rng)?,
            channels,
        })
    }

    fn mlp<T: Scalar>(&self, store: &ParamStore<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(store, &self.fc1.forward(store, v)?.relu())
    }

    /// Per-channel gates `a`, shaped `B×E×1×1`, each in `(0, 1)`.
    pub fn gates<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let avg = x.pool_global(PoolKind::Avg)?.reshape(&[b, c])?;
        let max = x.pool_global(PoolKind::Max)?.reshape(&[b, c])?;
        let logits = self.mlp(store, &avg)?.add(&self.mlp(store, &max)?)?;
        logits.sigmoid().reshape(&[b, c, 1, 1])
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.mul(&self.gates(store, x)?)
    }
}

/// Fuses one backbone scale with the global feature map.
#[derive(Clone, Debug)]
pub struct ScaleFusionBlock {
    pub projection: Conv2d,
    pub fuse: DeformConv,
    pub attention: ChannelAttention,
    pub local_channels: usize,
    pub embed: usize,
}

impl ScaleFusionBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        local_channels: usize,
        embed: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let projection = Conv2d::new(
            store,
            &format!("{name}.proj"),
            ParamGroup::Head,
            ConvSpec {
                cin: local_channels,
                cout: embed,
                kernel: 1,
                stride: 1,
                bias: true,
                init: Init::Kaiming,
            },
            rng,
        )?;
        let fuse = DeformConv::new(store, &format!("{name}.fuse"), ParamGroup::Head, (2 * embed, embed), Init::Kaiming, rng)?;
        let attention = ChannelAttention::new(store, &format!("{name}.attn"), embed, reduction, Init::Kaiming, rng)?;
        Ok(ScaleFusionBlock {
            projection,
            fuse,
            attention,
            local_channels,
            embed,
        })
    }

    /// 1×1 projection to `E` channels, then bilinear resampling onto the
    /// `grid` of the global features.
    pub fn project_and_align<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        local: &Tensor<T>,
        grid: (usize, usize),
    ) -> Result<Tensor<T>> {
        let (_, c, _, _) = local.dims4()?;
        if c != self.local_channels {
            return Err(Error::shape(format!(
                "fusion block expects {} local channels, got {c}",
                self.local_channels
            )));
        }
        self.projection.forward(store, local)?.bilinear_resize(grid.0, grid.1)
    }

    /// Concatenates `[global, aligned]`, applies the deformable convolution
    /// and recalibrates the result with channel attention.
    pub fn fuse_scale<T: Scalar>(&self, store: &ParamStore<T>, global: &Tensor<T>, aligned: &Tensor<T>) -> Result<Tensor<T>> {
        if global.shape() != aligned.shape() {
            return Err(Error::shape(format!(
                "global grid {:?} and aligned local {:?} differ",
                global.shape(),
                aligned.shape()
            )));
        }
        let cat = Tensor::concat(&[global.clone(), aligned.clone()], 1)?;
        self.attention.forward(store, &self.fuse.forward(store, &cat)?)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, global: &Tensor<T>, local: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, hg, wg) = global.dims4()?;
        let aligned = self.project_and_align(store, local, (hg, wg))?;
        self.fuse_scale(store, global, &aligned)
    }
}
