//! Central finite-difference gradient checking.
//!
//! The check only ever calls the forward function, so it is independent of
//! the backward rules it verifies. It runs in `f64`.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor on the denominator, so that gradients that
/// are zero up to round-off are compared absolutely against `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the autodiff gradient of the scalar `f(inputs)` against central
/// differences with step `step`, for every input marked in `wrt`.
///
/// At most `max_elements` elements per input are probed (evenly strided);
/// pass `usize::MAX` to probe all of them.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    step: f64,
    max_elements: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    assert_eq!(inputs.len(), wrt.len());
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| {
            if w {
                Tensor::leaf(t.to_vec(), t.shape())
            } else {
                Tensor::new(t.to_vec(), t.shape())
            }
        })
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    let grads = loss.backward()?;

    let mut report = GradCheckReport::default();
    for (i, leaf) in leaves.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic: Vec<f64> = match grads.get(leaf) {
            Some(g) => g.to_vec(),
            None => vec![0.0; leaf.numel()],
        };
        let n = leaf.numel();
        let stride = if max_elements >= n { 1 } else { n.div_ceil(max_elements) };
        for j in (0..n).step_by(stride) {
            let eval = |delta: f64| -> Result<f64> {
                let probe: Vec<Tensor<f64>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == i {
                            let mut d = t.to_vec();
                            d[j] += delta;
                            Tensor::new(d, t.shape())
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(no_grad(|| f(&probe))?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let err = relative_error(analytic[j], numeric, 1e-3);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}
