use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{no_grad, Scalar, Tensor};

/// Source of the global `B×E×Hg×Wg` feature grid.
///
/// Providers are frozen: their outputs never require gradients, so no
/// gradient reaches them and the optimizer never sees their parameters.
pub trait GlobalFeatureProvider<T: Scalar> {
    fn features(&self, store: &ParamStore<T>, images: &Tensor<T>, ids: &[String]) -> Result<Tensor<T>>;

    fn frozen(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str;
}

/// Fixed random patch embedding: each non-overlapping `S×S` patch is
/// flattened and mapped to `E` channels by a seeded matrix, then GELU.
#[derive(Clone, Debug)]
pub struct RandomPatchEmbedder {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    embed: usize,
}

impl RandomPatchEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, stride: usize, embed: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3 * stride * stride;
        let w = Tensor::<T>::randn(&[embed * dim], (1.0 / dim as f64).sqrt(), &mut rng)?;
        let b = Tensor::<T>::randn(&[embed], 0.1, &mut rng)?;
        Ok(RandomPatchEmbedder {
            weight: store.add("provider.weight", ParamGroup::Frozen, w.to_vec(), &[embed, dim])?,
            bias: store.add("provider.bias", ParamGroup::Frozen, b.to_vec(), &[embed])?,
            stride,
            embed,
        })
    }
}

impl<T: Scalar> GlobalFeatureProvider<T> for RandomPatchEmbedder {
    fn features(&self, store: &ParamStore<T>, images: &Tensor<T>, _ids: &[String]) -> Result<Tensor<T>> {
        let (b, c, h, w) = images.dims4()?;
        let s = self.stride;
        if c != 3 || h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "patch embedder needs 3 channels and extents divisible by {s}, got {:?}",
                images.shape()
            )));
        }
        let (hg, wg) = (h / s, w / s);
        let n = hg * wg;
        let dim = 3 * s * s;
        let weight = store.get(self.weight);
        let bias = store.get(self.bias);
        let x = images.data();
        let mut out = vec![T::zero(); b * self.embed * n];
        let mut patches = vec![T::zero(); n * dim];
        for bi in 0..b {
            for gy in 0..hg {
                for gx in 0..wg {
                    let row = &mut patches[(gy * wg + gx) * dim..][..dim];
                    let mut d = 0;
                    for ch in 0..3 {
                        for py in 0..s {
                            let src = ((bi * 3 + ch) * h + gy * s + py) * w + gx * s;
                            row[d..d + s].copy_from_slice(&x[src..src + s]);
                            d += s;
                        }
                    }
                }
            }
            let o = &mut out[bi * self.embed * n..][..self.embed * n];
            for (e, chunk) in o.chunks_mut(n).enumerate() {
                chunk.fill(bias.data()[e]);
            }
            T::gemm(self.embed, dim, n, T::one(), weight.data(), dim as isize, 1, &patches, 1, dim as isize, T::one(), o, n as isize, 1);
        }
        no_grad(|| Tensor::new(out, &[b, self.embed, hg, wg]).map(|t| t.gelu()))
    }

    fn name(&self) -> &'static str {
        "random"
    }
}

/// Loads precomputed features from `<dir>/<id>.adsm`, each holding one
/// tensor named `features` shaped `E×Hg×Wg`.
#[derive(Clone, Debug)]
pub struct FileFeatureProvider {
    pub dir: PathBuf,
    pub stride: usize,
    pub embed: usize,
}

impl<T: Scalar> GlobalFeatureProvider<T> for FileFeatureProvider {
    fn features(&self, _store: &ParamStore<T>, images: &Tensor<T>, ids: &[String]) -> Result<Tensor<T>> {
        let (b, _, h, w) = images.dims4()?;
        if ids.len() != b {
            return Err(Error::data(format!("{} sample ids for a batch of {b}", ids.len())));
        }
        let expect = [self.embed, h / self.stride, w / self.stride];
        let mut out = Vec::with_capacity(b * expect.iter().product::<usize>());
        for id in ids {
            let path = self.dir.join(format!("{id}.adsm"));
            let ckpt = Checkpoint::load(&path)?;
            let t = ckpt
                .get("features")
                .ok_or_else(|| Error::data(format!("{}: no tensor named features", path.display())))?;
            if t.shape != expect {
                return Err(Error::data(format!(
                    "{}: features shaped {:?}, expected {:?}",
                    path.display(),
                    t.shape,
                    expect
                )));
            }
            out.extend(t.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(out, &[b, expect[0], expect[1], expect[2]])
    }

    fn name(&self) -> &'static str {
        "file"
    }
}
