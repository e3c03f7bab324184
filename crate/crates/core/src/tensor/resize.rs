use super::{BackwardOp, Scalar, Tensor};
use crate::error::{Error, Result};

/// Source taps along one axis for half-pixel-centred bilinear resampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

struct ResizeBackward {
    dims: (usize, usize, usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl<T: Scalar> BackwardOp<T> for ResizeBackward {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (bc, h, w, wo) = self.dims;
        let ho = self.rows.len();
        let mut g = vec![T::zero(); bc * h * w];
        for p in 0..bc {
            let src = &grad[p * ho * wo..(p + 1) * ho * wo];
            let dst = &mut g[p * h * w..(p + 1) * h * w];
            for (oy, ry) in self.rows.iter().enumerate() {
                let fy = T::of(ry.frac);
                for (ox, rx) in self.cols.iter().enumerate() {
                    let fx = T::of(rx.frac);
                    let go = src[oy * wo + ox];
                    let top = go * (T::one() - fy);
                    let bot = go * fy;
                    dst[ry.lo * w + rx.lo] += top * (T::one() - fx);
                    dst[ry.lo * w + rx.hi] += top * fx;
                    dst[ry.hi * w + rx.lo] += bot * (T::one() - fx);
                    dst[ry.hi * w + rx.hi] += bot * fx;
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Bilinear resampling of `B×C×H×W` to `B×C×out_h×out_w` with
    /// half-pixel centres (`align_corners = false`).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize: target extents must be positive"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let rows = axis_taps(h, out_h);
        let cols = axis_taps(w, out_w);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in 0..b * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for ry in &rows {
                let fy = T::of(ry.frac);
                for rx in &cols {
                    let fx = T::of(rx.frac);
                    let top = plane[ry.lo * w + rx.lo] * (T::one() - fx) + plane[ry.lo * w + rx.hi] * fx;
                    let bot = plane[ry.hi * w + rx.lo] * (T::one() - fx) + plane[ry.hi * w + rx.hi] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, c, out_h, out_w],
            vec![self.clone()],
            ResizeBackward {
                dims: (b * c, h, w, out_w),
                rows,
                cols,
            },
        ))
    }
}
