//! Named parameters and the layers built on them.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{deform_conv2d, offset_mask_predict, DeformKernelContext};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Local convolutional backbone.
    Backbone,
    /// Fusion blocks, decoder stages and the class head.
    Head,
    /// Global feature provider; never updated.
    Frozen,
}

#[derive(Debug)]
pub struct Param<T: Scalar> {
    name: String,
    group: ParamGroup,
    value: RefCell<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn tensor(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn is_trainable(&self) -> bool {
        self.group != ParamGroup::Frozen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered registry of every parameter of a model.
///
/// Trainable parameters are stored as gradient-tracking leaves; updating a
/// parameter swaps in a fresh leaf, which also clears its gradient.
#[derive(Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, data: Vec<T>, shape: &[usize]) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let t = if group == ParamGroup::Frozen {
            Tensor::new(data, shape)?
        } else {
            Tensor::leaf(data, shape)?
        };
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            value: RefCell::new(t),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> Tensor<T> {
        self.params[id.0].tensor()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.borrow().numel())
            .sum()
    }

    /// Replaces the values of the parameter at position `idx`.
    pub fn set_values(&self, idx: usize, data: Vec<T>) -> Result<()> {
        let p = &self.params[idx];
        let shape = p.value.borrow().shape().to_vec();
        let t = if p.group == ParamGroup::Frozen {
            Tensor::new(data, &shape)?
        } else {
            Tensor::leaf(data, &shape)?
        };
        p.value.replace(t);
        Ok(())
    }

    pub fn set_by_name(&self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        let &idx = self
            .index
            .get(name)
            .ok_or_else(|| Error::data(format!("unknown parameter {name}")))?;
        let current = self.params[idx].value.borrow().shape().to_vec();
        if current != shape {
            return Err(Error::data(format!(
                "parameter {name}: stored shape {shape:?}, model expects {current:?}"
            )));
        }
        self.set_values(idx, data)
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal, `std = sqrt(2 / fan_in)`.
    Kaiming,
    /// `N(0, std²)`.
    Normal(f64),
    Zeros,
    Constant(f64),
}

fn init_values<T: Scalar, R: Rng + ?Sized>(init: Init, n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    match init {
        Init::Kaiming => {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::<T>::randn(&[n], std, rng).map(|t| t.to_vec()).unwrap_or_default()
        }
        Init::Normal(std) => Tensor::<T>::randn(&[n], std, rng).map(|t| t.to_vec()).unwrap_or_default(),
        Init::Zeros => vec![T::zero(); n],
        Init::Constant(c) => vec![T::of(c); n],
    }
}

/// Plain convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub init: Init,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = spec.cin * k * k;
        let weight = store.add(
            &format!("{name}.weight"),
            group,
            init_values(spec.init, spec.cout * fan_in, fan_in, rng),
            &[spec.cout, spec.cin, k, k],
        )?;
        let bias = if spec.bias {
            let b = match spec.init {
                Init::Constant(c) => vec![T::of(c); spec.cout],
                _ => vec![T::zero(); spec.cout],
            };
            Some(store.add(&format!("{name}.bias"), group, b, &[spec.cout])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.map(|id| store.get(id));
        x.conv2d(&store.get(self.weight), b.as_ref(), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{name}: {groups} groups do not divide {channels} channels"
            )));
        }
        Ok(GroupNorm {
            groups,
            gamma: store.add(&format!("{name}.gamma"), group, vec![T::one(); channels], &[channels])?,
            beta: store.add(&format!("{name}.beta"), group, vec![T::zero(); channels], &[channels])?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, self.eps, &store.get(self.gamma), &store.get(self.beta))
    }
}

/// Fully connected layer on `B×in` inputs; the weight is stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        (din, dout): (usize, usize),
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(&format!("{name}.weight"), group, init_values(init, din * dout, din, rng), &[din, dout])?,
            bias: store.add(&format!("{name}.bias"), group, vec![T::zero(); dout], &[dout])?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&store.get(self.weight))?.add(&store.get(self.bias))
    }
}

/// 3×3 modulated deformable convolution with its own offset/mask
/// predictor. The predictor reads the layer input and starts at zero, so a
/// fresh layer computes a standard convolution with every mask at 0.5.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub predictor: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: (usize, usize),
}

impl DeformConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        (cin, cout): (usize, usize),
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let k = 9;
        let predictor = Conv2d::new(
            store,
            &format!("{name}.offset"),
            group,
            ConvSpec {
                cin,
                cout: 3 * k,
                kernel: 3,
                stride: 1,
                bias: true,
                init: Init::Zeros,
            },
            rng,
        )?;
        let fan_in = cin * k;
        Ok(DeformConv {
            predictor,
            weight: store.add(&format!("{name}.weight"), group, init_values(init, cout * fan_in, fan_in, rng), &[cout, cin, 3, 3])?,
            bias: store.add(&format!("{name}.bias"), group, vec![T::zero(); cout], &[cout])?,
            kernel: (3, 3),
        })
    }

    pub fn context<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<DeformKernelContext<T>> {
        let bias = store.get(self.predictor.bias.expect("predictor has a bias"));
        offset_mask_predict(x, &store.get(self.predictor.weight), &bias, self.kernel)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ctx = self.context(store, x)?;
        deform_conv2d(x, &store.get(self.weight), &store.get(self.bias), &ctx)
    }
}
