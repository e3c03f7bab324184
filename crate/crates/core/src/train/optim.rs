//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Gradients, Scalar};

/// `base · ½(1 + cos(π·epoch/total))` for a zero-based epoch; no warm-up.
pub fn cosine_lr(epoch: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule over zero epochs"));
    }
    let t = epoch.min(total) as f64 / total as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub backbone_mult: f64,
    pub head_mult: f64,
}

impl AdamWConfig {
    /// Learning-rate multiplier of a group; `None` for frozen parameters.
    pub fn multiplier(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Backbone => Some(self.backbone_mult),
            ParamGroup::Head => Some(self.head_mult),
            ParamGroup::Frozen => None,
        }
    }
}

/// Checks that every trainable parameter falls in exactly one learning-rate
/// group and that the frozen set receives none.
pub fn check_group_coverage<T: Scalar>(store: &ParamStore<T>, cfg: &AdamWConfig) -> Result<()> {
    let mut counted = 0;
    for p in store.iter() {
        match (p.is_trainable(), cfg.multiplier(p.group())) {
            (true, Some(_)) => counted += 1,
            (false, None) => {}
            _ => return Err(Error::invalid(format!("parameter {} has no consistent lr group", p.name()))),
        }
    }
    let trainable = store.iter().filter(|p| p.is_trainable()).count();
    if counted != trainable {
        return Err(Error::invalid("lr groups do not cover the trainable parameters"));
    }
    Ok(())
}

/// Moments are kept in `f64` regardless of the parameter precision.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: AdamWConfig) -> Result<Self> {
        check_group_coverage(store, &cfg)?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor().numel()]).collect();
        Ok(AdamW {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at base rate `lr`. Decay is applied to the weights first,
    /// then the bias-corrected Adam step. Trainable parameters the loss did
    /// not reach are left untouched. A non-finite gradient aborts before
    /// any parameter changes.
    pub fn step<T: Scalar>(&mut self, store: &ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let params: Vec<_> = store.iter().collect();
        if params.len() != self.m.len() {
            return Err(Error::invalid("optimizer built for a different parameter store"));
        }
        let mut updates = Vec::new();
        for (i, p) in params.iter().enumerate() {
            if !p.is_trainable() {
                continue;
            }
            let t = p.tensor();
            let Some(g) = grads.get(&t) else { continue };
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {} at element {bad}", p.name())));
            }
            updates.push((i, t, g));
        }
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, t, g) in updates {
            let rate = lr * self.cfg.multiplier(params[i].group()).expect("trainable");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let next: Vec<T> = t
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(k, (&w, &g))| {
                    let (w, g) = (w.f64(), g.f64());
                    let w = w - rate * self.cfg.weight_decay * w;
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    let (mh, vh) = (m[k] / c1, v[k] / c2);
                    T::of(w - rate * mh / (vh.sqrt() + self.cfg.eps))
                })
                .collect();
            store.set_values(i, next)?;
        }
        Ok(())
    }
}
