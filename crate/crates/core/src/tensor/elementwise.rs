use super::{BackwardOp, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed through `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching flat offsets of both inputs.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

struct BinaryBackward {
    kind: Binary,
    out_shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (av, bv) = (a.data(), b.data());
        let mut ga = a.requires_grad().then(|| vec![T::zero(); a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![T::zero(); b.numel()]);
        let sa = broadcast_strides(a.shape(), &self.out_shape);
        let sb = broadcast_strides(b.shape(), &self.out_shape);
        for_each_broadcast(&self.out_shape, &sa, &sb, |o, ia, ib| {
            let g = grad[o];
            let (da, db) = match self.kind {
                Binary::Add => (g, g),
                Binary::Sub => (g, -g),
                Binary::Mul => (g * bv[ib], g * av[ia]),
                Binary::Div => (g / bv[ib], -g * av[ia] / (bv[ib] * bv[ib])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += db;
            }
        });
        vec![ga, gb]
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    };
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let n = out_shape.iter().product();
        let mut data = vec![T::zero(); n];
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let (av, bv) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(av[ia], bv[ib]));
        data
    };
    Ok(Tensor::from_op(
        data,
        out_shape.clone(),
        vec![a.clone(), b.clone()],
        BinaryBackward { kind, out_shape },
    ))
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Relu,
    Sigmoid,
    Gelu,
    Log,
    Exp,
    Abs,
    Sqrt,
    Pow(T),
    Clamp(T, T),
    AddScalar(T),
    MulScalar(T),
    RsubScalar(T),
}

fn normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2)
        * (-(x * x) * T::of(0.5)).exp()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Unary<T> {
    fn name(&self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Abs => "abs",
            Unary::Sqrt => "sqrt",
            Unary::Pow(_) => "pow",
            Unary::Clamp(..) => "clamp",
            Unary::AddScalar(_) => "add_scalar",
            Unary::MulScalar(_) => "mul_scalar",
            Unary::RsubScalar(_) => "rsub_scalar",
        }
    }

    fn forward(&self, x: T) -> T {
        match *self {
            Unary::Neg => -x,
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => x * normal_cdf(x),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
            Unary::Pow(p) => x.powf(p),
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
            Unary::AddScalar(s) => x + s,
            Unary::MulScalar(s) => x * s,
            Unary::RsubScalar(s) => s - x,
        }
    }

    /// Local derivative from the input `x` and output `y`.
    fn derivative(&self, x: T, y: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match *self {
            Unary::Neg => -one,
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Unary::Log => one / x,
            Unary::Exp => y,
            Unary::Abs => {
                if x > zero {
                    one
                } else if x < zero {
                    -one
                } else {
                    zero
                }
            }
            Unary::Sqrt => T::of(0.5) / y,
            Unary::Pow(p) => p * x.powf(p - one),
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    one
                } else {
                    zero
                }
            }
            Unary::AddScalar(_) => one,
            Unary::MulScalar(s) => s,
            Unary::RsubScalar(_) => -one,
        }
    }
}

struct UnaryBackward<T>(Unary<T>);

impl<T: Scalar> BackwardOp<T> for UnaryBackward<T> {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(&self, inputs: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(out)
            .zip(grad)
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

fn unary<T: Scalar>(x: &Tensor<T>, op: Unary<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| op.forward(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], UnaryBackward(op))
}

/// Elementwise arithmetic and activations.
impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, Binary::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, Binary::Div)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(self, Unary::Neg)
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(self, Unary::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, Unary::Sigmoid)
    }

    /// Exact GELU, `x·Φ(x)` with the error-function CDF.
    pub fn gelu(&self) -> Tensor<T> {
        unary(self, Unary::Gelu)
    }

    pub fn log(&self) -> Tensor<T> {
        unary(self, Unary::Log)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, Unary::Exp)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<T> {
        unary(self, Unary::Abs)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary(self, Unary::Sqrt)
    }

    pub fn powf(&self, p: f64) -> Tensor<T> {
        unary(self, Unary::Pow(T::of(p)))
    }

    /// Clamp to `[lo, hi]`; gradient passes only inside the closed range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        unary(self, Unary::Clamp(T::of(lo), T::of(hi)))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        unary(self, Unary::AddScalar(T::of(s)))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        unary(self, Unary::MulScalar(T::of(s)))
    }

    /// `s - self`.
    pub fn rsub_scalar(&self, s: f64) -> Tensor<T> {
        unary(self, Unary::RsubScalar(T::of(s)))
    }
}
