//! Batch normalization over `[B, C, H, W]` maps with per-item valid lengths along `H`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

pub const BN_EPS: f64 = 1e-5;

/// Statistics of one training-mode batch-norm call, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    /// Unbiased variance (biased when only one element is valid).
    pub var: Vec<R>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnSaved<R> {
    pub dims: [usize; 4],
    pub valid_h: Vec<usize>,
    pub xhat: Vec<R>,
    pub inv_std: Vec<R>,
    pub count: usize,
    pub training: bool,
}

impl<R: Real> BnSaved<R> {
    fn for_each_valid(&self, mut f: impl FnMut(usize, usize)) {
        let [b, c, h, w] = self.dims;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for idx in base..base + self.valid_h[bi] * w {
                    f(ci, idx);
                }
            }
        }
    }
}

/// Returns `(output, saved, batch stats)`. With `running` set, normalizes with
/// those statistics (evaluation mode) instead of the batch's.
pub(crate) fn forward<R: Real>(
    x: &[R],
    dims: [usize; 4],
    valid_h: Vec<usize>,
    gamma: &[R],
    beta: &[R],
    running: Option<(&[R], &[R])>,
) -> (Vec<R>, BnSaved<R>, Option<BatchStats<R>>) {
    let c = dims[1];
    let eps = R::of(BN_EPS);
    let count: usize = valid_h.iter().sum::<usize>() * dims[3];
    let mut saved = BnSaved {
        dims,
        valid_h,
        xhat: vec![R::zero(); x.len()],
        inv_std: vec![R::zero(); c],
        count,
        training: running.is_none(),
    };
    let (mean, stats) = match running {
        Some((rm, rv)) => {
            for ci in 0..c {
                saved.inv_std[ci] = R::one() / (rv[ci] + eps).sqrt();
            }
            (rm.to_vec(), None)
        }
        None => {
            let mut mean = vec![R::zero(); c];
            saved.for_each_valid(|ci, i| mean[ci] += x[i]);
            // `count` is the number of valid positions per channel.
            let n_c = R::of(count as f64);
            for m in &mut mean {
                *m /= n_c.max(R::one());
            }
            let mut var = vec![R::zero(); c];
            saved.for_each_valid(|ci, i| {
                let d = x[i] - mean[ci];
                var[ci] += d * d;
            });
            let mut unbiased = var.clone();
            for ci in 0..c {
                var[ci] /= n_c.max(R::one());
                unbiased[ci] /= if count > 1 { R::of((count - 1) as f64) } else { R::one() };
                saved.inv_std[ci] = R::one() / (var[ci] + eps).sqrt();
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, Some(stats))
        }
    };
    let mut out = vec![R::zero(); x.len()];
    let mut xhat = core::mem::take(&mut saved.xhat);
    saved.for_each_valid(|ci, i| {
        let xh = (x[i] - mean[ci]) * saved.inv_std[ci];
        xhat[i] = xh;
        out[i] = gamma[ci] * xh + beta[ci];
    });
    saved.xhat = xhat;
    (out, saved, stats)
}

pub(crate) fn backward<R: Real>(
    saved: &BnSaved<R>,
    gamma: &[R],
    grad_out: &[R],
    grad_x: Option<&mut [R]>,
    grad_gamma: Option<&mut [R]>,
    grad_beta: Option<&mut [R]>,
) {
    let c = saved.dims[1];
    let mut sum_g = vec![R::zero(); c];
    let mut sum_gx = vec![R::zero(); c];
    saved.for_each_valid(|ci, i| {
        sum_g[ci] += grad_out[i];
        sum_gx[ci] += grad_out[i] * saved.xhat[i];
    });
    if let Some(gg) = grad_gamma {
        for ci in 0..c {
            gg[ci] += sum_gx[ci];
        }
    }
    if let Some(gb) = grad_beta {
        for ci in 0..c {
            gb[ci] += sum_g[ci];
        }
    }
    if let Some(gx) = grad_x {
        if saved.training {
            let n = R::of(saved.count.max(1) as f64);
            saved.for_each_valid(|ci, i| {
                let scale = gamma[ci] * saved.inv_std[ci] / n;
                gx[i] += scale * (n * grad_out[i] - sum_g[ci] - saved.xhat[i] * sum_gx[ci]);
            });
        } else {
            saved.for_each_valid(|ci, i| gx[i] += grad_out[i] * gamma[ci] * saved.inv_std[ci]);
        }
    }
}
