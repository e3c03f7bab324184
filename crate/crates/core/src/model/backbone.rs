use rand::Rng;

use crate::error::Result;
use crate::nn::{Conv2d, ConvSpec, GroupNorm, Init, ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Group count used by the backbone normalisation layers.
pub(crate) fn backbone_groups(channels: usize) -> usize {
    let mut g = 8usize;
    while channels % g != 0 {
        g /= 2;
    }
    g
}

fn conv_gn<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    (cin, cout): (usize, usize),
    kernel: usize,
    stride: usize,
    rng: &mut R,
) -> Result<(Conv2d, GroupNorm)> {
    let conv = Conv2d::new(
        store,
        name,
        ParamGroup::Backbone,
        ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            bias: false,
            init: Init::Kaiming,
        },
        rng,
    )?;
    let norm = GroupNorm::new(store, &format!("{name}.gn"), ParamGroup::Backbone, cout, backbone_groups(cout))?;
    Ok((conv, norm))
}

/// Residual bottleneck that halves the spatial extent:
/// `1×1 → 3×3/2 → 1×1` plus a strided `1×1` shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    reduce: (Conv2d, GroupNorm),
    spatial: (Conv2d, GroupNorm),
    expand: (Conv2d, GroupNorm),
    shortcut: (Conv2d, GroupNorm),
}

impl Bottleneck {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let mid = (cout / 4).max(1);
        Ok(Bottleneck {
            reduce: conv_gn(store, &format!("{name}.reduce"), (cin, mid), 1, 1, rng)?,
            spatial: conv_gn(store, &format!("{name}.spatial"), (mid, mid), 3, 2, rng)?,
            expand: conv_gn(store, &format!("{name}.expand"), (mid, cout), 1, 1, rng)?,
            shortcut: conv_gn(store, &format!("{name}.shortcut"), (cin, cout), 1, 2, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let apply = |(c, n): &(Conv2d, GroupNorm), x: &Tensor<T>| n.forward(store, &c.forward(store, x)?);
        let h = apply(&self.reduce, x)?.relu();
        let h = apply(&self.spatial, &h)?.relu();
        let h = apply(&self.expand, &h)?;
        Ok(h.add(&apply(&self.shortcut, x)?)?.relu())
    }
}

/// Four-stage residual network emitting features at strides 4, 8, 16, 32.
#[derive(Clone, Debug)]
pub struct LocalBackbone {
    stem: (Conv2d, GroupNorm),
    stages: Vec<Bottleneck>,
    pub channels: [usize; 4],
}

impl LocalBackbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, stem: usize, channels: [usize; 4], rng: &mut R) -> Result<Self> {
        let stem_layer = conv_gn(store, "backbone.stem", (3, stem), 3, 2, rng)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = stem;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Bottleneck::new(store, &format!("backbone.stage{}", i + 1), cin, c, rng)?);
            cin = c;
        }
        Ok(LocalBackbone {
            stem: stem_layer,
            stages,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, n) = &self.stem;
        let mut h = n.forward(store, &c.forward(store, image)?)?.relu();
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            h = stage.forward(store, &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
