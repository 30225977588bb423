//! SGD with momentum and Adam, keyed by parameter index.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<R> {
    pub lr: R,
    pub momentum: R,
    velocity: Vec<Option<Vec<R>>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(lr: R, momentum: R) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v = mu * v + g; p -= lr * v`.
    pub fn step(&mut self, index: usize, param: &mut [R], grad: &[R]) -> Result<()> {
        check(param, grad)?;
        let v = slot(&mut self.velocity, index, param.len());
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R> {
    pub lr: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    state: Vec<Option<(u64, Vec<R>, Vec<R>)>>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: R) -> Self {
        Self {
            lr,
            beta1: R::of(0.9),
            beta2: R::of(0.999),
            eps: R::of(1e-8),
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, index: usize, param: &mut [R], grad: &[R]) -> Result<()> {
        check(param, grad)?;
        if self.state.len() <= index {
            self.state.resize(index + 1, None);
        }
        let n = param.len();
        let (t, m, v) = self.state[index].get_or_insert_with(|| (0, alloc::vec![R::zero(); n], alloc::vec![R::zero(); n]));
        *t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = R::one() - b1.powi(*t as i32);
        let c2 = R::one() - b2.powi(*t as i32);
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (R::one() - b1) * g;
            v[i] = b2 * v[i] + (R::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn check<R: Real>(param: &[R], grad: &[R]) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::Shape {
            op: "optimizer step",
            lhs: alloc::vec![param.len()],
            rhs: alloc::vec![grad.len()],
        });
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

fn slot<R: Real>(slots: &mut Vec<Option<Vec<R>>>, index: usize, len: usize) -> &mut Vec<R> {
    if slots.len() <= index {
        slots.resize(index + 1, None);
    }
    slots[index].get_or_insert_with(|| alloc::vec![R::zero(); len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut opt = Sgd::new(0.1f64, 0.9);
        let mut p = [1.0];
        opt.step(0, &mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12);
        // v = 0.9 * 2 + 2 = 3.8
        opt.step(0, &mut p, &[2.0]).unwrap();
        assert!((p[0] - (0.8 - 0.38)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(0.01f64);
        let mut p = [0.5, -0.5];
        opt.step(3, &mut p, &[10.0, -0.001]).unwrap();
        assert!((p[0] - 0.49).abs() < 1e-6);
        assert!((p[1] + 0.49).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut opt = Sgd::new(0.1f64, 0.0);
        let mut p = [0.0; 2];
        assert!(opt.step(0, &mut p, &[1.0]).is_err());
        assert!(opt.step(0, &mut p, &[1.0, f64::NAN]).is_err());
    }
}
