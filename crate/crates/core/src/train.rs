//! One joint training step: forward, `L = L_w + L_s + L_c`, backward, and
//! the two-optimizer update split by parameter group.

use crate::error::{Error, Result};
use crate::model::{Batch, MultiTaskModel, Target};
use crate::optim::{Adam, Sgd};
use crate::params::{Gradients, Group, Mode, ParamStore, Session};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub adam_lr: f64,
    pub bn_momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            sgd_lr: 0.005,
            sgd_momentum: 0.9,
            adam_lr: 0.0005,
            bn_momentum: 0.1,
        }
    }
}

/// Loss components of one step; `None` where the variant has no such term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub word: Option<f64>,
    pub speaker: Option<f64>,
    pub ctc: Option<f64>,
}

/// SGD with momentum for the enhancement and speaker networks, Adam for
/// everything else.
#[derive(Debug, Clone)]
pub struct Trainer<R> {
    pub sgd: Sgd<R>,
    pub adam: Adam<R>,
    pub bn_momentum: R,
}

impl<R: Real> Trainer<R> {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            sgd: Sgd::new(R::of(cfg.sgd_lr), R::of(cfg.sgd_momentum)),
            adam: Adam::new(R::of(cfg.adam_lr)),
            bn_momentum: R::of(cfg.bn_momentum),
        }
    }

    pub fn uses_sgd(group: Group) -> bool {
        matches!(group, Group::Enhancement | Group::Speaker)
    }

    /// Applies `grads` to every trainable parameter that received one.
    pub fn apply(&mut self, store: &mut ParamStore<R>, grads: &Gradients<R>) -> Result<()> {
        let ids: alloc::vec::Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let sgd = Self::uses_sgd(p.group);
            let value = store.value_mut(id).data_mut();
            match sgd {
                true => self.sgd.step(id.index(), value, g)?,
                false => self.adam.step(id.index(), value, g)?,
            }
        }
        Ok(())
    }

    pub fn step(
        &mut self,
        model: &MultiTaskModel,
        store: &mut ParamStore<R>,
        batch: &Batch<R>,
        targets: &[Target],
    ) -> Result<StepLosses> {
        let (losses, grads, updates) = {
            let mut s = Session::new(store, Mode::Train);
            let out = model.forward(&mut s, batch)?;
            let terms = model.loss(&mut s, &out, targets)?;
            let value = |v: Option<crate::graph::Var>, s: &Session<'_, R>| v.map(|v| s.g.value(v).data()[0].to_f64_lossy());
            let losses = StepLosses {
                total: s.g.value(terms.total).data()[0].to_f64_lossy(),
                word: value(terms.word, &s),
                speaker: value(terms.speaker, &s),
                ctc: value(terms.ctc, &s),
            };
            if !losses.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            s.backward(terms.total)?;
            let grads = s.gradients();
            if !grads.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            (losses, grads, s.into_parts().1)
        };
        self.apply(store, &grads)?;
        store.apply_bn_updates(&updates, self.bn_momentum);
        Ok(losses)
    }
}
