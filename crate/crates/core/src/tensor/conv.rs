use super::{BackwardOp, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a zero-padded cross-correlation along one axis.
///
/// Follows the usual floor convention, so a stride-2 layer halves even
/// extents: `(in + 2·pad − k) / stride + 1`.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if input + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded extent {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds one `Cin×H×W` image into a `(Cin·kh·kw) × (Ho·Wo)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward<T> {
    geo: Geometry,
    batch: usize,
    cout: usize,
    /// Unfolded input per batch item; empty for pointwise convolutions,
    /// whose columns are the input itself.
    cols: Vec<Vec<T>>,
}

impl<T: Scalar> BackwardOp<T> for Conv2dBackward<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geo;
        let (x, w) = (&inputs[0], &inputs[1]);
        let rows = g.rows();
        let hw_out = g.ho * g.wo;
        let in_plane = g.cin * g.h * g.w;
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
        let mut dcols = if x.requires_grad() && !g.is_pointwise() {
            vec![T::zero(); rows * hw_out]
        } else {
            Vec::new()
        };
        for b in 0..self.batch {
            let go = &grad[b * self.cout * hw_out..(b + 1) * self.cout * hw_out];
            let cols: &[T] = if g.is_pointwise() {
                &x.data()[b * in_plane..(b + 1) * in_plane]
            } else {
                &self.cols[b]
            };
            if let Some(gw) = gw.as_mut() {
                // dW += G_b · cols_bᵀ
                T::gemm(self.cout, hw_out, rows, T::one(), go, hw_out as isize, 1, cols, 1, hw_out as isize, T::one(), gw, rows as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[b * in_plane..(b + 1) * in_plane];
                // dcols = Wᵀ · G_b
                if g.is_pointwise() {
                    T::gemm(rows, self.cout, hw_out, T::one(), w.data(), 1, rows as isize, go, hw_out as isize, 1, T::zero(), dst, hw_out as isize, 1);
                } else {
                    T::gemm(rows, self.cout, hw_out, T::one(), w.data(), 1, rows as isize, go, hw_out as isize, 1, T::zero(), &mut dcols, hw_out as isize, 1);
                    col2im(&dcols, g, dst);
                }
            }
        }
        let mut out = vec![gx, gw];
        if let Some(bias) = inputs.get(2) {
            out.push(bias.requires_grad().then(|| {
                let mut gb = vec![T::zero(); self.cout];
                for b in 0..self.batch {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let s = (b * self.cout + co) * hw_out;
                        *acc += grad[s..s + hw_out].iter().copied().sum::<T>();
                    }
                }
                gb
            }));
        }
        out
    }
}

impl<T: Scalar> Tensor<T> {
    /// Zero-padded 2-D cross-correlation.
    ///
    /// `self` is `B×Cin×H×W`, `weight` is `Cout×Cin×kh×kw` with odd kernel
    /// extents, `bias` has `Cout` entries.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (batch, cin, h, w) = self.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::shape(format!(
                    "conv2d: bias has {} entries for {cout} outputs",
                    b.numel()
                )));
            }
        }
        let geo = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: conv2d_output_extent(h, kh, stride, padding)?,
            wo: conv2d_output_extent(w, kw, stride, padding)?,
        };
        let rows = geo.rows();
        let hw_out = geo.ho * geo.wo;
        let in_plane = cin * h * w;
        let mut out = vec![T::zero(); batch * cout * hw_out];
        let mut saved = Vec::new();
        let keep_cols = self.requires_grad() || weight.requires_grad();
        for b in 0..batch {
            let xb = &self.data()[b * in_plane..(b + 1) * in_plane];
            let dst = &mut out[b * cout * hw_out..(b + 1) * cout * hw_out];
            if geo.is_pointwise() {
                T::gemm(cout, rows, hw_out, T::one(), weight.data(), rows as isize, 1, xb, hw_out as isize, 1, T::zero(), dst, hw_out as isize, 1);
            } else {
                let mut cols = vec![T::zero(); rows * hw_out];
                im2col(xb, &geo, &mut cols);
                T::gemm(cout, rows, hw_out, T::one(), weight.data(), rows as isize, 1, &cols, hw_out as isize, 1, T::zero(), dst, hw_out as isize, 1);
                if keep_cols && super::grad_enabled() {
                    saved.push(cols);
                }
            }
            if let Some(bias) = bias {
                for (co, &bv) in bias.data().iter().enumerate() {
                    dst[co * hw_out..(co + 1) * hw_out]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, geo.ho, geo.wo],
            inputs,
            Conv2dBackward {
                geo,
                batch,
                cout,
                cols: saved,
            },
        ))
    }
}
