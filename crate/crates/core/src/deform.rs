//! Modulated deformable convolution and its sampling primitive.
//!
//! For every output location `p0` and kernel tap `k` the input is read at
//! the displaced position `p0 + pk + Δpk` with bilinear interpolation,
//! scaled by the modulation mask `mk`, and contracted with the tap weight:
//!
//! ```text
//! y(p0) = Σ_k w_k · x(p0 + p_k + Δp_k) · m_k
//! ```
//!
//! Offsets are laid out as `(Δrow, Δcol)` pairs per tap, taps in row-major
//! kernel order: channel `2k` is the row offset of tap `k`, channel `2k+1`
//! its column offset. One offset field is shared by all input channels.

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Scalar, Tensor};

/// Bilinear weights of the four grid neighbours of a continuous point and
/// their derivatives with respect to the point's row and column.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    /// Flat in-plane indices; `usize::MAX` marks a neighbour outside the grid.
    idx: [usize; 4],
    w: [T; 4],
    dw_row: [T; 4],
    dw_col: [T; 4],
}

const OUTSIDE: usize = usize::MAX;

impl<T: Scalar> Taps<T> {
    /// Neighbours outside the `h×w` grid read as zero. Points with
    /// `row ≤ −1`, `row ≥ h`, `col ≤ −1` or `col ≥ w` sample exactly zero.
    pub(crate) fn new(row: T, col: T, h: usize, w: usize) -> Self {
        let zero = T::zero();
        let one = T::one();
        let outside = Taps {
            idx: [OUTSIDE; 4],
            w: [zero; 4],
            dw_row: [zero; 4],
            dw_col: [zero; 4],
        };
        if !(row > -one && col > -one && row < T::of(h as f64) && col < T::of(w as f64)) {
            return outside;
        }
        let r0 = row.floor();
        let c0 = col.floor();
        let lr = row - r0;
        let lc = col - c0;
        let (r0, c0) = (r0.to_isize().unwrap(), c0.to_isize().unwrap());
        let corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
        let mut t = Taps {
            idx: [OUTSIDE; 4],
            w: [(one - lr) * (one - lc), (one - lr) * lc, lr * (one - lc), lr * lc],
            dw_row: [-(one - lc), -lc, one - lc, lc],
            dw_col: [-(one - lr), one - lr, -lr, lr],
        };
        for (n, &(r, c)) in corners.iter().enumerate() {
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                t.idx[n] = r as usize * w + c as usize;
            } else {
                t.w[n] = zero;
                t.dw_row[n] = zero;
                t.dw_col[n] = zero;
            }
        }
        t
    }

    #[inline]
    pub(crate) fn sample(&self, plane: &[T]) -> T {
        let mut v = T::zero();
        for n in 0..4 {
            if self.idx[n] != OUTSIDE {
                v += self.w[n] * plane[self.idx[n]];
            }
        }
        v
    }

    /// `(∂v/∂row, ∂v/∂col)` of the sampled value.
    #[inline]
    pub(crate) fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let (mut gr, mut gc) = (T::zero(), T::zero());
        for n in 0..4 {
            if self.idx[n] != OUTSIDE {
                gr += self.dw_row[n] * plane[self.idx[n]];
                gc += self.dw_col[n] * plane[self.idx[n]];
            }
        }
        (gr, gc)
    }

    #[inline]
    pub(crate) fn scatter(&self, plane: &mut [T], g: T) {
        for n in 0..4 {
            if self.idx[n] != OUTSIDE {
                plane[self.idx[n]] += self.w[n] * g;
            }
        }
    }
}

struct SampleBackward<T> {
    dims: (usize, usize, usize, usize),
    taps: Vec<Taps<T>>,
}

impl<T: Scalar> BackwardOp<T> for SampleBackward<T> {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (b, c, hw, n) = self.dims;
        let (feat, points) = (&inputs[0], &inputs[1]);
        let mut gf = feat.requires_grad().then(|| vec![T::zero(); feat.numel()]);
        let mut gp = points.requires_grad().then(|| vec![T::zero(); points.numel()]);
        for bi in 0..b {
            for ci in 0..c {
                let plane = &feat.data()[(bi * c + ci) * hw..][..hw];
                let go = &grad[(bi * c + ci) * n..][..n];
                for (j, t) in self.taps[bi * n..(bi + 1) * n].iter().enumerate() {
                    if let Some(gf) = gf.as_mut() {
                        t.scatter(&mut gf[(bi * c + ci) * hw..][..hw], go[j]);
                    }
                    if let Some(gp) = gp.as_mut() {
                        let (gr, gc) = t.coord_grad(plane);
                        gp[(bi * n + j) * 2] += go[j] * gr;
                        gp[(bi * n + j) * 2 + 1] += go[j] * gc;
                    }
                }
            }
        }
        vec![gf, gp]
    }
}

/// Bilinear reads of `feature` (`B×C×H×W`) at continuous `(row, col)`
/// points (`B×N×2`), giving `B×C×N`. Differentiable in both arguments.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = feature.dims4()?;
    let n = match *points.shape() {
        [pb, n, 2] if pb == b => n,
        ref s => {
            return Err(Error::shape(format!(
                "bilinear_sample: points must be {b}xNx2, got {s:?}"
            )))
        }
    };
    let pts = points.data();
    let taps: Vec<Taps<T>> = (0..b * n)
        .map(|j| Taps::new(pts[2 * j], pts[2 * j + 1], h, w))
        .collect();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * c * n);
    for bi in 0..b {
        for ci in 0..c {
            let plane = &feature.data()[(bi * c + ci) * hw..][..hw];
            out.extend(taps[bi * n..(bi + 1) * n].iter().map(|t| t.sample(plane)));
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![b, c, n],
        vec![feature.clone(), points.clone()],
        SampleBackward {
            dims: (b, c, hw, n),
            taps,
        },
    ))
}

/// Base displacements `p_k` of a `kh×kw` window centred on the output
/// location, in row-major tap order.
pub fn kernel_taps(kh: usize, kw: usize) -> Vec<(isize, isize)> {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    (0..kh as isize)
        .flat_map(|i| (0..kw as isize).map(move |j| (i - ch, j - cw)))
        .collect()
}

/// Offsets and modulation masks for one deformable convolution.
#[derive(Clone, Debug)]
pub struct DeformKernelContext<T: Scalar> {
    pub kernel: (usize, usize),
    /// `B×2K×H×W`, `(Δrow, Δcol)` interleaved per tap.
    pub offsets: Tensor<T>,
    /// `B×K×H×W`, values in `[0, 1]`.
    pub masks: Tensor<T>,
}

impl<T: Scalar> DeformKernelContext<T> {
    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Checks channel counts and spatial extents against a `B×·×H×W` output.
    pub fn validate(&self, batch: usize, h: usize, w: usize) -> Result<()> {
        let k = self.taps();
        if self.offsets.shape() != [batch, 2 * k, h, w] {
            return Err(Error::shape(format!(
                "offsets {:?}, expected {:?}",
                self.offsets.shape(),
                [batch, 2 * k, h, w]
            )));
        }
        if self.masks.shape() != [batch, k, h, w] {
            return Err(Error::shape(format!(
                "masks {:?}, expected {:?}",
                self.masks.shape(),
                [batch, k, h, w]
            )));
        }
        Ok(())
    }
}

/// Predicts offsets and masks with one stride-1 convolution producing `3K`
/// channels: the first `2K` are raw offsets, the last `K` go through a
/// sigmoid to become masks.
pub fn offset_mask_predict<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: (usize, usize),
) -> Result<DeformKernelContext<T>> {
    let k = kernel.0 * kernel.1;
    let (_, _, ph, pw) = weight.dims4()?;
    if weight.shape()[0] != 3 * k {
        return Err(Error::shape(format!(
            "offset predictor emits {} channels, needs {}",
            weight.shape()[0],
            3 * k
        )));
    }
    let raw = x.conv2d(weight, Some(bias), 1, ph / 2)?;
    debug_assert_eq!(pw / 2, ph / 2);
    let offsets = raw.narrow(1, 0, 2 * k)?;
    let masks = raw.narrow(1, 2 * k, k)?.sigmoid();
    Ok(DeformKernelContext {
        kernel,
        offsets,
        masks,
    })
}

struct DeformBackward<T> {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    /// Per batch item: `K×HW` sampling taps.
    taps: Vec<Vec<Taps<T>>>,
    /// Per batch item: unmodulated samples, `(Cin·K)×HW`.
    sampled: Vec<Vec<T>>,
}

impl<T: Scalar> BackwardOp<T> for DeformBackward<T> {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [x, wt, bias, off, mask] = inputs else {
            unreachable!("deform_conv2d has five inputs")
        };
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        let hw = self.h * self.w;
        let rows = cin * k;

        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = wt.requires_grad().then(|| vec![T::zero(); wt.numel()]);
        let mut goff = off.requires_grad().then(|| vec![T::zero(); off.numel()]);
        let mut gmask = mask.requires_grad().then(|| vec![T::zero(); mask.numel()]);
        let need_cols_grad = gx.is_some() || goff.is_some() || gmask.is_some();
        let mut cols = vec![T::zero(); rows * hw];
        let mut dcols = vec![T::zero(); rows * hw];

        for b in 0..self.batch {
            let go = &grad[b * cout * hw..(b + 1) * cout * hw];
            let m = &mask.data()[b * k * hw..(b + 1) * k * hw];
            let sampled = &self.sampled[b];
            if let Some(gw) = gw.as_mut() {
                for r in 0..rows {
                    let mk = &m[(r % k) * hw..][..hw];
                    let src = &sampled[r * hw..][..hw];
                    for ((c, &s), &mv) in cols[r * hw..(r + 1) * hw].iter_mut().zip(src).zip(mk) {
                        *c = s * mv;
                    }
                }
                T::gemm(cout, hw, rows, T::one(), go, hw as isize, 1, &cols, 1, hw as isize, T::one(), gw, rows as isize, 1);
            }
            if !need_cols_grad {
                continue;
            }
            T::gemm(rows, cout, hw, T::one(), wt.data(), 1, rows as isize, go, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);

            if let Some(gmask) = gmask.as_mut() {
                let gm = &mut gmask[b * k * hw..(b + 1) * k * hw];
                for ci in 0..cin {
                    for kk in 0..k {
                        let r = ci * k + kk;
                        let d = &dcols[r * hw..][..hw];
                        let s = &sampled[r * hw..][..hw];
                        for ((g, &dv), &sv) in gm[kk * hw..(kk + 1) * hw].iter_mut().zip(d).zip(s) {
                            *g += dv * sv;
                        }
                    }
                }
            }
            // From here on dcols holds the gradient w.r.t. the unmodulated samples.
            for r in 0..rows {
                let mk = &m[(r % k) * hw..][..hw];
                for (d, &mv) in dcols[r * hw..(r + 1) * hw].iter_mut().zip(mk) {
                    *d *= mv;
                }
            }
            let taps = &self.taps[b];
            let in_plane = cin * hw;
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * in_plane..(b + 1) * in_plane];
                for ci in 0..cin {
                    let plane = &mut gxb[ci * hw..(ci + 1) * hw];
                    for kk in 0..k {
                        let d = &dcols[(ci * k + kk) * hw..][..hw];
                        for (p, &dv) in d.iter().enumerate() {
                            taps[kk * hw + p].scatter(plane, dv);
                        }
                    }
                }
            }
            if let Some(goff) = goff.as_mut() {
                let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                let gob = &mut goff[b * 2 * k * hw..(b + 1) * 2 * k * hw];
                for kk in 0..k {
                    for p in 0..hw {
                        let t = &taps[kk * hw + p];
                        let (mut gr, mut gc) = (T::zero(), T::zero());
                        for ci in 0..cin {
                            let dv = dcols[(ci * k + kk) * hw + p];
                            let (dr, dc) = t.coord_grad(&xb[ci * hw..(ci + 1) * hw]);
                            gr += dv * dr;
                            gc += dv * dc;
                        }
                        gob[(2 * kk) * hw + p] += gr;
                        gob[(2 * kk + 1) * hw + p] += gc;
                    }
                }
            }
        }

        let gb = bias.requires_grad().then(|| {
            let mut gb = vec![T::zero(); cout];
            for b in 0..self.batch {
                for (co, acc) in gb.iter_mut().enumerate() {
                    let s = (b * cout + co) * hw;
                    *acc += grad[s..s + hw].iter().copied().sum::<T>();
                }
            }
            gb
        });
        vec![gx, gw, gb, goff, gmask]
    }
}

/// Modulated deformable convolution, stride 1, zero padding `k/2`.
///
/// `x`: `B×Cin×H×W`; `weight`: `Cout×Cin×kh×kw` (odd extents);
/// `bias`: `Cout`; offsets and masks as in [`DeformKernelContext`].
/// Returns `B×Cout×H×W`. Differentiable in all five inputs.
pub fn deform_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    ctx: &DeformKernelContext<T>,
) -> Result<Tensor<T>> {
    let (batch, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "deform_conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 || (kh, kw) != ctx.kernel {
        return Err(Error::shape(format!(
            "deform_conv2d: weight kernel {kh}x{kw} vs context kernel {:?}",
            ctx.kernel
        )));
    }
    if bias.numel() != cout {
        return Err(Error::shape(format!(
            "deform_conv2d: bias has {} entries for {cout} outputs",
            bias.numel()
        )));
    }
    ctx.validate(batch, h, w)?;

    let k = kh * kw;
    let hw = h * w;
    let rows = cin * k;
    let base = kernel_taps(kh, kw);
    let off = ctx.offsets.data();
    let m = ctx.masks.data();
    let tracking = crate::tensor::grad_enabled()
        && [x, weight, bias, &ctx.offsets, &ctx.masks]
            .iter()
            .any(|t| t.requires_grad());

    let mut out = vec![T::zero(); batch * cout * hw];
    let mut all_taps = Vec::new();
    let mut all_sampled = Vec::new();
    let mut cols = vec![T::zero(); rows * hw];
    for b in 0..batch {
        let ob = &off[b * 2 * k * hw..(b + 1) * 2 * k * hw];
        let mut taps = Vec::with_capacity(k * hw);
        for (kk, &(dr, dc)) in base.iter().enumerate() {
            for p in 0..hw {
                let (oy, ox) = (p / w, p % w);
                let row = T::of((oy as isize + dr) as f64) + ob[(2 * kk) * hw + p];
                let col = T::of((ox as isize + dc) as f64) + ob[(2 * kk + 1) * hw + p];
                taps.push(Taps::new(row, col, h, w));
            }
        }
        let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
        let mut sampled = vec![T::zero(); rows * hw];
        for ci in 0..cin {
            let plane = &xb[ci * hw..(ci + 1) * hw];
            for kk in 0..k {
                let r = ci * k + kk;
                let mk = &m[(b * k + kk) * hw..][..hw];
                for p in 0..hw {
                    let s = taps[kk * hw + p].sample(plane);
                    sampled[r * hw + p] = s;
                    cols[r * hw + p] = s * mk[p];
                }
            }
        }
        let dst = &mut out[b * cout * hw..(b + 1) * cout * hw];
        T::gemm(cout, rows, hw, T::one(), weight.data(), rows as isize, 1, &cols, hw as isize, 1, T::zero(), dst, hw as isize, 1);
        for (co, &bv) in bias.data().iter().enumerate() {
            dst[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
        if tracking {
            all_taps.push(taps);
            all_sampled.push(sampled);
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![batch, cout, h, w],
        vec![
            x.clone(),
            weight.clone(),
            bias.clone(),
            ctx.offsets.clone(),
            ctx.masks.clone(),
        ],
        DeformBackward {
            batch,
            cin,
            cout,
            h,
            w,
            k,
            taps: all_taps,
            sampled: all_sampled,
        },
    ))
}
