use super::{BackwardOp, Scalar, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

struct SumAll;

impl<T: Scalar> BackwardOp<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; inputs[0].numel()])]
    }
}

struct SumAxis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Scalar> BackwardOp<T> for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for l in 0..self.len {
                let dst = &mut g[(o * self.len + l) * self.inner..][..self.inner];
                dst.copy_from_slice(&grad[o * self.inner..][..self.inner]);
            }
        }
        vec![Some(g)]
    }
}

struct Softmax {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Scalar> BackwardOp<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[Tensor<T>], y: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); y.len()];
        let stride = self.inner;
        for o in 0..self.outer {
            let base = o * self.len * self.inner;
            for i in 0..self.inner {
                let mut dot = T::zero();
                for c in 0..self.len {
                    let k = base + c * stride + i;
                    dot += y[k] * grad[k];
                }
                for c in 0..self.len {
                    let k = base + c * stride + i;
                    g[k] = y[k] * (grad[k] - dot);
                }
            }
        }
        vec![Some(g)]
    }
}

struct Concat {
    axis_sizes: Vec<usize>,
    outer: usize,
    inner: usize,
}

impl<T: Scalar> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.axis_sizes.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (t, &len) in inputs.iter().zip(&self.axis_sizes) {
            if t.requires_grad() {
                let chunk = len * self.inner;
                let mut g = Vec::with_capacity(self.outer * chunk);
                for o in 0..self.outer {
                    let src = (o * total + offset) * self.inner;
                    g.extend_from_slice(&grad[src..src + chunk]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += len;
        }
        grads
    }
}

struct Narrow {
    outer: usize,
    len: usize,
    inner: usize,
    start: usize,
    count: usize,
}

impl<T: Scalar> BackwardOp<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.outer * self.len * self.inner];
        let chunk = self.count * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.len + self.start) * self.inner;
            g[dst..dst + chunk].copy_from_slice(&grad[o * chunk..(o + 1) * chunk]);
        }
        vec![Some(g)]
    }
}

struct Reshape;

impl<T: Scalar> BackwardOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Matmul {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> BackwardOp<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| {
            // dA = G · Bᵀ
            let mut ga = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), grad, n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
            ga
        });
        let gb = b.requires_grad().then(|| {
            // dB = Aᵀ · G
            let mut gb = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, grad, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
            gb
        });
        vec![ga, gb]
    }
}

/// Global spatial reduction used by channel attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

struct GlobalPool {
    kind: PoolKind,
    hw: usize,
    /// Flat input index of the selected element per (b, c), max pooling only.
    argmax: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for GlobalPool {
    fn name(&self) -> &'static str {
        match self.kind {
            PoolKind::Avg => "avg_pool_global",
            PoolKind::Max => "max_pool_global",
        }
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); inputs[0].numel()];
        match self.kind {
            PoolKind::Avg => {
                let scale = T::one() / T::of(self.hw as f64);
                for (bc, &go) in grad.iter().enumerate() {
                    g[bc * self.hw..(bc + 1) * self.hw].fill(go * scale);
                }
            }
            PoolKind::Max => {
                for (&idx, &go) in self.argmax.iter().zip(grad) {
                    g[idx] += go;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Reductions, shape manipulation and the channel softmax.
impl<T: Scalar> Tensor<T> {
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], SumAll)
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sum over one axis. With `keepdim` the axis stays with extent 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = around_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            SumAxis { outer, len, inner },
        ))
    }

    /// Softmax along `axis` (axis 1 is the channel axis of image tensors).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = around_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let mut mx = T::neg_infinity();
                for c in 0..len {
                    mx = mx.max(x[base + c * inner + i]);
                }
                let mut z = T::zero();
                for c in 0..len {
                    let k = base + c * inner + i;
                    let e = (x[k] - mx).exp();
                    y[k] = e;
                    z += e;
                }
                for c in 0..len {
                    y[base + c * inner + i] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Softmax { outer, len, inner },
        ))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, _, inner) = around_axis(first.shape(), axis);
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = axis_sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&axis_sizes) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Concat {
                axis_sizes,
                outer,
                inner,
            },
        ))
    }

    /// The slice `[start, start + count)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, count: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = around_axis(self.shape(), axis);
        if count == 0 || start + count > len {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) outside axis {axis} of extent {len}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let src = (o * len + start) * inner;
            data.extend_from_slice(&self.data()[src..src + count * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = count;
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Narrow {
                outer,
                len,
                inner,
                start,
                count,
            },
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        check_axis(self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape()
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        super::check_shape(self.numel(), shape)?;
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Reshape,
        ))
    }

    /// Matrix product of `m×k` and `k×n` tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (a, b) => return Err(Error::shape(format!("matmul {a:?} x {b:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(), k as isize, 1, rhs.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Matmul { m, k, n },
        ))
    }

    /// Per-channel global pooling, `B×C×H×W → B×C×1×1`.
    ///
    /// Max pooling sends the gradient to the first maximal element in
    /// row-major order.
    pub fn pool_global(&self, kind: PoolKind) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        let hw = h * w;
        let x = self.data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::new();
        for bc in 0..b * c {
            let plane = &x[bc * hw..(bc + 1) * hw];
            match kind {
                PoolKind::Avg => {
                    out.push(plane.iter().copied().sum::<T>() / T::of(hw as f64));
                }
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(bc * hw + best);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, c, 1, 1],
            vec![self.clone()],
            GlobalPool { kind, hw, argmax },
        ))
    }

    /// One-hot encoding of a `B×H×W` label map as a constant `B×C×H×W`
    /// tensor. Pixels carrying `ignore` encode as all-zero.
    pub fn one_hot(labels: &[u8], dims: [usize; 3], classes: usize, ignore: u8) -> Result<Tensor<T>> {
        let [b, h, w] = dims;
        if labels.len() != b * h * w {
            return Err(Error::shape(format!(
                "{} labels for a {b}x{h}x{w} map",
                labels.len()
            )));
        }
        let hw = h * w;
        let mut data = vec![T::zero(); b * classes * hw];
        for bi in 0..b {
            for p in 0..hw {
                let l = labels[bi * hw + p];
                if l == ignore {
                    continue;
                }
                let l = l as usize;
                if l >= classes {
                    return Err(Error::invalid(format!("label {l} outside {classes} classes")));
                }
                data[(bi * classes + l) * hw + p] = T::one();
            }
        }
        Tensor::new(data, &[b, classes, h, w])
    }
}
