//! Segmentation losses on `B×C×H×W` logits and `B×H×W` label maps.
//!
//! Each loss has a `*_from_probs` form taking class probabilities directly,
//! so hard (one-hot) predictions can be evaluated exactly. Pixels labelled
//! with the ignore value contribute neither to any sum nor to any gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub mod edt;

/// Weights of focal, Dice, Lovász and surface terms in the total.
pub const LOSS_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

pub const IGNORE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub dice_eps: f64,
    pub ignore: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            dice_eps: 1e-6,
            ignore: IGNORE,
        }
    }
}

/// Clamp applied to the true-class probability before the logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

struct Prepared<T: Scalar> {
    dims: [usize; 4],
    onehot: Tensor<T>,
    /// `B×1×H×W`, 1 on counted pixels.
    valid: Tensor<T>,
    n_valid: usize,
    /// Classes with at least one labelled pixel.
    present: Vec<bool>,
}

fn prepare<T: Scalar>(probs: &Tensor<T>, labels: &[u8], ignore: u8) -> Result<Prepared<T>> {
    let (b, c, h, w) = probs.dims4()?;
    let onehot = Tensor::one_hot(labels, [b, h, w], c, ignore)?;
    let valid: Vec<T> = labels.iter().map(|&l| if l == ignore { T::zero() } else { T::one() }).collect();
    let n_valid = labels.iter().filter(|&&l| l != ignore).count();
    if n_valid == 0 {
        return Err(Error::invalid("every pixel carries the ignore label"));
    }
    let mut present = vec![false; c];
    for &l in labels {
        if l != ignore {
            present[l as usize] = true;
        }
    }
    Ok(Prepared {
        dims: [b, c, h, w],
        onehot,
        valid: Tensor::new(valid, &[b, 1, h, w])?,
        n_valid,
        present,
    })
}

/// Sums `x: B×C×H×W` over batch and space, giving one value per class.
fn per_class_sum<T: Scalar>(x: &Tensor<T>, dims: [usize; 4]) -> Result<Tensor<T>> {
    let [_, c, h, w] = dims;
    x.sum_axis(0, false)?.reshape(&[c, h * w])?.sum_axis(1, false)
}

/// `|p - g|` for one-hot `g`, written as `g + p(1 - 2g)` so it stays smooth
/// in `p`.
fn abs_error<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    g.add(&p.mul(&g.mul_scalar(-2.0).add_scalar(1.0))?)
}

fn class_mean<T: Scalar>(per_class: &Tensor<T>, present: &[bool]) -> Result<Tensor<T>> {
    let n = present.iter().filter(|&&p| p).count();
    let mask: Vec<T> = present.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
    Ok(per_class.mul(&Tensor::new(mask, &[present.len()])?)?.sum().mul_scalar(1.0 / n as f64))
}

pub fn focal_loss_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    let prep = prepare(probs, labels, cfg.ignore)?;
    let pt = probs.mul(&prep.onehot)?.sum_axis(1, true)?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let term = pt.rsub_scalar(1.0).powf(cfg.gamma).mul(&pt.log())?.mul_scalar(-cfg.alpha);
    Ok(term.mul(&prep.valid)?.sum().mul_scalar(1.0 / prep.n_valid as f64))
}

/// `-α (1 - p_t)^γ log p_t` averaged over counted pixels, `p_t` being the
/// softmax probability of the labelled class.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    focal_loss_from_probs(&logits.softmax(1)?, labels, cfg)
}

pub fn dice_loss_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    let prep = prepare(probs, labels, cfg.ignore)?;
    let p = probs.mul(&prep.valid)?;
    let inter = per_class_sum(&p.mul(&prep.onehot)?, prep.dims)?;
    let psum = per_class_sum(&p, prep.dims)?;
    let gsum = per_class_sum(&prep.onehot, prep.dims)?;
    let dice = inter
        .mul_scalar(2.0)
        .add_scalar(cfg.dice_eps)
        .div(&psum.add(&gsum)?.add_scalar(cfg.dice_eps))?;
    Ok(class_mean(&dice, &prep.present)?.rsub_scalar(1.0))
}

/// One minus the soft Dice coefficient, averaged over classes present in
/// the labels, with sums taken over the whole batch.
pub fn dice_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    dice_loss_from_probs(&logits.softmax(1)?, labels, cfg)
}

/// Gradient of the Jaccard loss with respect to the sorted errors, for
/// ground-truth indicators given in that sorted order.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut cum_gt = 0.0;
    let mut cum_neg = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                cum_gt += 1.0;
            } else {
                cum_neg += 1.0;
            }
            let jac = 1.0 - (gts - cum_gt) / (gts + cum_neg);
            let d = jac - prev;
            prev = jac;
            d
        })
        .collect()
}

pub fn lovasz_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    let prep = prepare(probs, labels, cfg.ignore)?;
    let [b, c, h, w] = prep.dims;
    let hw = h * w;
    let errors = abs_error(probs, &prep.onehot)?;
    let e = errors.data();
    let mut weights = vec![T::zero(); e.len()];
    let mut order: Vec<(usize, T)> = Vec::with_capacity(prep.n_valid);
    for class in 0..c {
        if !prep.present[class] {
            continue;
        }
        order.clear();
        for bi in 0..b {
            for p in 0..hw {
                if labels[bi * hw + p] != cfg.ignore {
                    let idx = (bi * c + class) * hw + p;
                    order.push((idx, e[idx]));
                }
            }
        }
        // Stable: equal errors keep pixel order.
        order.sort_by(|a, b| b.1.f64().total_cmp(&a.1.f64()));
        let gt: Vec<bool> = order.iter().map(|&(idx, _)| labels[idx / (c * hw) * hw + idx % hw] == class as u8).collect();
        for (&(idx, _), g) in order.iter().zip(lovasz_grad(&gt)) {
            weights[idx] = T::of(g);
        }
    }
    let n_present = prep.present.iter().filter(|&&p| p).count();
    let weights = Tensor::new(weights, errors.shape())?;
    Ok(errors.mul(&weights)?.sum().mul_scalar(1.0 / n_present as f64))
}

/// Lovász extension of the per-class Jaccard loss, averaged over classes
/// present in the labels. The sort permutation is treated as constant.
pub fn lovasz_softmax<T: Scalar>(logits: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    lovasz_from_probs(&logits.softmax(1)?, labels, cfg)
}

/// Per-image, per-class distance from each pixel to the boundary of the
/// labelled region of that class; zero for absent classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMaps {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl DistanceMaps {
    pub fn from_labels(labels: &[u8], dims: [usize; 4], ignore: u8) -> Result<Self> {
        let [b, c, h, w] = dims;
        if labels.len() != b * h * w {
            return Err(Error::shape(format!("{} labels for a {b}x{h}x{w} map", labels.len())));
        }
        let hw = h * w;
        let mut data = vec![0.0; b * c * hw];
        let mut mask = vec![false; hw];
        for bi in 0..b {
            let img = &labels[bi * hw..(bi + 1) * hw];
            for class in 0..c {
                for (m, &l) in mask.iter_mut().zip(img) {
                    *m = l == class as u8 && l != ignore;
                }
                if mask.iter().any(|&m| m) {
                    let d = edt::distance_transform(&mask, h, w);
                    data[(bi * c + class) * hw..][..hw].copy_from_slice(&d);
                }
            }
        }
        Ok(DistanceMaps { dims, data })
    }
}

pub fn surface_loss_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8], maps: &DistanceMaps, cfg: &LossConfig) -> Result<Tensor<T>> {
    let prep = prepare(probs, labels, cfg.ignore)?;
    if maps.dims != prep.dims {
        return Err(Error::shape(format!("distance maps {:?} vs probabilities {:?}", maps.dims, prep.dims)));
    }
    let d = Tensor::<T>::new(maps.data.iter().map(|&v| T::of(v)).collect(), probs.shape())?.mul(&prep.valid)?;
    let norm = d.sum().item().f64() + 1e-6;
    Ok(abs_error(probs, &prep.onehot)?.mul(&d)?.sum().mul_scalar(1.0 / norm))
}

/// Distance-weighted absolute probability error, normalised by the total
/// distance weight.
pub fn surface_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], maps: &DistanceMaps, cfg: &LossConfig) -> Result<Tensor<T>> {
    surface_loss_from_probs(&logits.softmax(1)?, labels, maps, cfg)
}

#[derive(Clone, Debug)]
pub struct LossBundle<T: Scalar> {
    pub focal: Tensor<T>,
    pub dice: Tensor<T>,
    pub lovasz: Tensor<T>,
    pub surface: Tensor<T>,
    pub total: Tensor<T>,
}

impl<T: Scalar> LossBundle<T> {
    pub fn terms(&self) -> [f64; 4] {
        [&self.focal, &self.dice, &self.lovasz, &self.surface].map(|t| t.item().f64())
    }
}

pub fn composite_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<LossBundle<T>> {
    let (b, c, h, w) = probs.dims4()?;
    let maps = DistanceMaps::from_labels(labels, [b, c, h, w], cfg.ignore)?;
    let focal = focal_loss_from_probs(probs, labels, cfg)?;
    let dice = dice_loss_from_probs(probs, labels, cfg)?;
    let lovasz = lovasz_from_probs(probs, labels, cfg)?;
    let surface = surface_loss_from_probs(probs, labels, &maps, cfg)?;
    let [wf, wd, wl, ws] = LOSS_WEIGHTS;
    let total = focal
        .mul_scalar(wf)
        .add(&dice.mul_scalar(wd))?
        .add(&lovasz.mul_scalar(wl))?
        .add(&surface.mul_scalar(ws))?;
    Ok(LossBundle {
        focal,
        dice,
        lovasz,
        surface,
        total,
    })
}

/// All four terms on one shared softmax, combined with [`LOSS_WEIGHTS`].
pub fn composite_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<LossBundle<T>> {
    composite_from_probs(&logits.softmax(1)?, labels, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard(labels: &[u8], c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::one_hot(labels, [1, h, w], c, IGNORE).unwrap()
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn weights_sum_to_one() {
        assert!((LOSS_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn focal_half_probability() {
        let p = Tensor::<f64>::from_f64(&[0.5, 0.5], &[1, 2, 1, 1]).unwrap();
        let l = focal_loss_from_probs(&p, &[0], &cfg()).unwrap().item();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn dice_hand_example() {
        // Class 1 probabilities [1,1,0,0] against labels [1,0,0,0].
        let p = Tensor::<f64>::from_f64(&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0], &[1, 2, 1, 4]).unwrap();
        let l = dice_loss_from_probs(&p, &[1, 0, 0, 0], &cfg()).unwrap().item();
        assert!((l - (1.0 - (2.0 / 3.0 + 0.8) / 2.0)).abs() < 1e-6);
    }

    #[test]
    fn lovasz_hand_trace() {
        let g = lovasz_grad(&[true, false, true, false]);
        for (a, b) in g.iter().zip([0.5, 1.0 / 6.0, 1.0 / 3.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        // Class 1 mask [1,1,0,0], hard prediction of class 1 at [1,0,0,1].
        let p = hard(&[1, 0, 0, 1], 2, 1, 4);
        let c = LossConfig::default();
        let labels = [1, 1, 0, 0];
        let l = lovasz_from_probs(&p, &labels, &c).unwrap().item();
        // Both classes have IoU 1/3.
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_zeroes_every_term() {
        let labels = [0, 1, 1, 2, 2, 2, 0, 1, 2];
        let b = composite_from_probs(&hard(&labels, 3, 3, 3), &labels, &cfg()).unwrap();
        for v in b.terms() {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn disjoint_prediction_gives_unit_dice() {
        let labels = [0, 0, 1, 1];
        let p = hard(&[1, 1, 0, 0], 2, 2, 2);
        assert!((dice_loss_from_probs(&p, &labels, &cfg()).unwrap().item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let p = hard(&[0, 1], 2, 1, 2);
        let labels = [IGNORE, IGNORE];
        assert!(focal_loss_from_probs(&p, &labels, &cfg()).is_err());
        assert!(dice_loss_from_probs(&p, &labels, &cfg()).is_err());
        assert!(lovasz_from_probs(&p, &labels, &cfg()).is_err());
        let maps = DistanceMaps::from_labels(&labels, [1, 2, 1, 2], IGNORE).unwrap();
        assert!(surface_loss_from_probs(&p, &labels, &maps, &cfg()).is_err());
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let logits = Tensor::<f64>::from_f64(&[0.3, -1.0, 2.0, 0.1, 0.5, 0.5, -0.2, 1.4], &[1, 2, 2, 2]).unwrap();
        let b = composite_loss(&logits, &[0, 1, 1, 0], &cfg()).unwrap();
        let dot: f64 = b.terms().iter().zip(LOSS_WEIGHTS).map(|(t, w)| t * w).sum();
        assert!((b.total.item() - dot).abs() < 1e-7);
    }

    fn logits_from(values: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(values, shape).unwrap()
    }

    #[test]
    fn gamma_zero_is_weighted_cross_entropy() {
        let vals = [0.3, -1.0, 2.0, 0.1, 0.5, 0.5, -0.2, 1.4, 0.9, -0.7, 0.0, 0.25];
        let labels = [2, 0, IGNORE, 1];
        let c = LossConfig { gamma: 0.0, ..cfg() };
        let l = focal_loss(&logits_from(&vals, &[1, 3, 2, 2]), &labels, &c).unwrap().item();
        let mut acc = 0.0;
        for (p, &y) in labels.iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|k| vals[k * 4 + p]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            acc += -0.25 * (z[y as usize] - lse);
        }
        assert!((l - acc / 3.0).abs() < 1e-6);
    }

    #[test]
    fn surface_uniform_prediction_oracle() {
        let (c, h, w) = (3, 5, 6);
        let labels = vec![0u8; h * w];
        let p = Tensor::<f64>::full(1.0 / c as f64, &[1, c, h, w]).unwrap();
        let maps = DistanceMaps::from_labels(&labels, [1, c, h, w], IGNORE).unwrap();
        let l = surface_loss_from_probs(&p, &labels, &maps, &cfg()).unwrap().item();
        // Class 0 fills the image, so its boundary is the border; the other maps are zero.
        let mut dsum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = (0..h)
                    .flat_map(|by| (0..w).map(move |bx| (by, bx)))
                    .filter(|&(by, bx)| by == 0 || bx == 0 || by == h - 1 || bx == w - 1)
                    .map(|(by, bx)| (((by as f64 - y as f64).powi(2) + (bx as f64 - x as f64).powi(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min);
                dsum += d;
            }
        }
        let want = (1.0 - 1.0 / c as f64) * dsum / (dsum + 1e-6);
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn surface_grows_with_distance_from_the_boundary() {
        let (h, w) = (7, 7);
        let labels = vec![0u8; h * w];
        let maps = DistanceMaps::from_labels(&labels, [1, 2, h, w], IGNORE).unwrap();
        let wrong_at = |pix: usize| {
            let mut pred = labels.clone();
            pred[pix] = 1;
            surface_loss_from_probs(&hard(&pred, 2, h, w), &labels, &maps, &cfg()).unwrap().item()
        };
        let losses: Vec<f64> = [7 * 3, 7 * 3 + 1, 7 * 3 + 2, 7 * 3 + 3].iter().map(|&p| wrong_at(p)).collect();
        assert_eq!(losses[0], 0.0);
        assert!(losses.windows(2).all(|v| v[1] > v[0]), "{losses:?}");
    }

    #[test]
    fn ignored_pixels_get_no_gradient() {
        let vals: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let labels = [0, IGNORE, 2, 1, 1, 2, IGNORE, 0];
        let x = Tensor::<f64>::leaf(vals.clone(), &[1, 3, 2, 4]).unwrap();
        let b = composite_loss(&x, &labels, &cfg()).unwrap();
        let g = b.total.backward().unwrap();
        let g = g.get(&x).unwrap();
        for (i, v) in g.iter().enumerate() {
            if labels[i % 8] == IGNORE {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(g.iter().any(|v| *v != 0.0));
        let mut moved = vals;
        for k in 0..3 {
            moved[k * 8 + 1] += 3.0 * (k as f64 - 1.0);
            moved[k * 8 + 6] -= 2.0;
        }
        let again = composite_loss(&logits_from(&moved, &[1, 3, 2, 4]), &labels, &cfg()).unwrap();
        assert_eq!(again.total.item(), b.total.item());
    }

    proptest::proptest! {
        #[test]
        fn every_term_is_non_negative(
            vals in proptest::collection::vec(-4.0f64..4.0, 3 * 12),
            labels in proptest::collection::vec(0u8..4, 12),
        ) {
            let labels: Vec<u8> = labels.iter().map(|&l| if l == 3 { IGNORE } else { l }).collect();
            proptest::prop_assume!(labels.iter().any(|&l| l != IGNORE));
            let b = composite_loss(&logits_from(&vals, &[1, 3, 3, 4]), &labels, &cfg()).unwrap();
            for t in b.terms() {
                proptest::prop_assert!(t >= -1e-7);
            }
        }

        #[test]
        fn lovasz_at_vertices_is_one_minus_iou(
            truth in proptest::collection::vec(0u8..3, 16),
            pred in proptest::collection::vec(0u8..3, 16),
        ) {
            let p = hard(&pred, 3, 4, 4);
            let l = lovasz_from_probs(&p, &truth, &cfg()).unwrap().item();
            let mut acc = 0.0;
            let mut n = 0.0;
            for c in 0..3u8 {
                if !truth.contains(&c) {
                    continue;
                }
                let inter = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
                let union = truth.iter().zip(&pred).filter(|(t, p)| **t == c || **p == c).count() as f64;
                acc += 1.0 - inter / union;
                n += 1.0;
            }
            proptest::prop_assert!((l - acc / n).abs() < 1e-12);
        }
    }
}
