use rand::Rng;

use super::{BackwardOp, Scalar, Tensor};
use crate::error::{Error, Result};

struct GroupNormBackward<T> {
    groups: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
    dims: (usize, usize, usize),
}

impl<T: Scalar> BackwardOp<T> for GroupNormBackward<T> {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (b, c, hw) = self.dims;
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let cpg = c / self.groups;
        let n = T::of((cpg * hw) as f64);
        let gam = gamma.data();

        let gx = x.requires_grad().then(|| {
            let mut gx = vec![T::zero(); x.numel()];
            for bi in 0..b {
                for gi in 0..self.groups {
                    let start = (bi * c + gi * cpg) * hw;
                    let end = start + cpg * hw;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for k in start..end {
                        let ch = (k / hw) % c;
                        let d = grad[k] * gam[ch];
                        sum_d += d;
                        sum_dx += d * self.xhat[k];
                    }
                    let mean_d = sum_d / n;
                    let mean_dx = sum_dx / n;
                    let rstd = self.rstd[bi * self.groups + gi];
                    for k in start..end {
                        let ch = (k / hw) % c;
                        let d = grad[k] * gam[ch];
                        gx[k] = rstd * (d - mean_d - self.xhat[k] * mean_dx);
                    }
                }
            }
            gx
        });
        let ggamma = gamma.requires_grad().then(|| {
            let mut gg = vec![T::zero(); c];
            for bi in 0..b {
                for (ch, acc) in gg.iter_mut().enumerate() {
                    let s = (bi * c + ch) * hw;
                    for k in s..s + hw {
                        *acc += grad[k] * self.xhat[k];
                    }
                }
            }
            gg
        });
        let gbeta = beta.requires_grad().then(|| {
            let mut gb = vec![T::zero(); c];
            for bi in 0..b {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    let s = (bi * c + ch) * hw;
                    *acc += grad[s..s + hw].iter().copied().sum::<T>();
                }
            }
            gb
        });
        vec![gx, ggamma, gbeta]
    }
}

struct DropoutBackward<T> {
    scale_mask: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for DropoutBackward<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(
            grad.iter().zip(&self.scale_mask).map(|(&g, &m)| g * m).collect(),
        )]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Group normalization with a per-channel affine transform.
    ///
    /// Statistics are taken per (batch item, channel group) with the biased
    /// (population) variance.
    pub fn group_norm(
        &self,
        groups: usize,
        eps: f64,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::shape(format!(
                "group_norm: affine parameters must have {c} entries"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("group_norm: eps must be positive"));
        }
        let hw = h * w;
        let cpg = c / groups;
        let n = (cpg * hw) as f64;
        let x = self.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(b * groups);
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for gi in 0..groups {
                let start = (bi * c + gi * cpg) * hw;
                let end = start + cpg * hw;
                let seg = &x[start..end];
                let rough = seg.iter().map(|v| v.f64()).sum::<f64>() / n;
                let mean = rough + seg.iter().map(|v| v.f64() - rough).sum::<f64>() / n;
                let var = seg.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(T::of(r));
                let (mean, r) = (T::of(mean), T::of(r));
                for k in start..end {
                    let ch = (k / hw) % c;
                    let xh = (x[k] - mean) * r;
                    xhat[k] = xh;
                    out[k] = xh * gamma.data()[ch] + beta.data()[ch];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            GroupNormBackward {
                groups,
                xhat,
                rstd,
                dims: (b, c, hw),
            },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity in
    /// evaluation mode.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::of(1.0 / (1.0 - p));
        let scale_mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .data()
            .iter()
            .zip(&scale_mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            DropoutBackward { scale_mask },
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(1.0, &[c]).unwrap(), Tensor::zeros(&[c]).unwrap())
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(3.7, &[2, 4, 3, 3]).unwrap();
        let (g, b) = affine(4);
        let y = x.group_norm(2, 1e-5, &g, &b).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn hand_evaluated_group() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]).unwrap();
        let (g, b) = affine(2);
        let y = x.group_norm(1, 1e-12, &g, &b).unwrap();
        let want = [-1.341_640_786_499_874, -0.447_213_595_499_958, 0.447_213_595_499_958, 1.341_640_786_499_874];
        for (a, w) in y.data().iter().zip(want) {
            assert!((a - w).abs() < 1e-4, "{a} vs {w}");
        }
    }

    #[test]
    fn groups_equal_channels_is_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng).unwrap();
        let (g, b) = affine(3);
        let y = x.group_norm(3, 1e-5, &g, &b).unwrap();
        for plane in 0..6 {
            let seg = &x.data()[plane * 20..(plane + 1) * 20];
            let mean = seg.iter().sum::<f64>() / 20.0;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            for k in 0..20 {
                let want = (seg[k] - mean) / (var + 1e-5).sqrt();
                assert!((y.data()[plane * 20 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_group_count() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]).unwrap();
        let (g, b) = affine(6);
        assert!(x.group_norm(4, 1e-5, &g, &b).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::full(1.0, &[100]).unwrap();
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().data(), x.data());
        assert_eq!(x.dropout(0.7, false, &mut rng).unwrap().data(), x.data());
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::full(1.0, &[1_000_000]).unwrap();
        let y = x.dropout(0.1, true, &mut rng).unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((95_000..105_000).contains(&zeros));
    }
}
