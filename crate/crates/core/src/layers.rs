//! Building blocks shared by the sub-networks.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{BnUpdate, Mode, ParamBuilder, ParamId, Session};
use crate::real::Real;
use crate::tensor::Tensor;

/// Affine map over the last axis: `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        pb.scope(name, |pb| Self {
            weight: pb.weight("weight", &[in_dim, out_dim], in_dim, out_dim),
            bias: bias.then(|| pb.constant("bias", &[out_dim], 0.0, true)),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: alloc::vec![self.in_dim, self.out_dim],
            });
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { s.g.reshape(x, &[rows, self.in_dim])? };
        let w = s.param(self.weight);
        let mut y = s.g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = s.param(b);
            y = s.g.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        s.g.reshape(y, &out_shape)
    }
}

/// Batch-norm affine parameters plus running statistics for one channel set.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, channels: usize) -> Self {
        pb.scope(name, |pb| Self {
            gamma: pb.constant("gamma", &[channels], 1.0, true),
            beta: pb.constant("beta", &[channels], 0.0, true),
            running_mean: pb.constant("running_mean", &[channels], 0.0, false),
            running_var: pb.constant("running_var", &[channels], 1.0, false),
        })
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, valid: Option<&[usize]>) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.g.batch_norm(x, gamma, beta, valid, None)?;
                if let Some(stats) = stats {
                    s.record_bn(BnUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                let rm = store.value(self.running_mean).data();
                let rv = store.value(self.running_var).data();
                Ok(s.g.batch_norm(x, gamma, beta, valid, Some((rm, rv)))?.0)
            }
        }
    }
}

/// Convolution followed by batch-norm and (optionally) ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub kernel: ParamId,
    pub bn: BatchNorm,
    pub stride: (usize, usize),
    pub dilation: usize,
    pub relu: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real, G: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, R, G>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: (usize, usize),
        dilation: usize,
        relu: bool,
    ) -> Self {
        pb.scope(name, |pb| Self {
            kernel: pb.weight(
                "kernel",
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            ),
            bn: BatchNorm::new(pb, "bn", out_channels),
            stride,
            dilation,
            relu,
            in_channels,
            out_channels,
        })
    }

    /// `x: [B, C_in, T, F]`; frames past `valid[b]` are zero on output.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, valid: Option<&[usize]>) -> Result<Var> {
        let k = s.param(self.kernel);
        let y = s.g.conv2d(x, k, self.stride, self.dilation)?;
        let y = self.bn.forward(s, y, valid)?;
        Ok(if self.relu { s.g.relu(y) } else { y })
    }
}

/// `1.0` for frames `t < lengths[b]`, `0.0` otherwise, for a tensor whose
/// axis 0 is batch and `time_axis` is time.
pub fn frame_mask<R: Real>(shape: &[usize], time_axis: usize, lengths: &[usize]) -> Tensor<R> {
    let inner: usize = shape[time_axis + 1..].iter().product();
    let per_batch: usize = shape[1..].iter().product();
    let t_len = shape[time_axis];
    Tensor::from_fn(shape, |i| {
        let b = i / per_batch;
        let t = (i / inner) % t_len;
        if t < lengths[b] {
            R::one()
        } else {
            R::zero()
        }
    })
}

/// Zeroes frames beyond each item's length; a no-op when nothing is padded.
pub fn mask_frames<R: Real>(s: &mut Session<'_, R>, x: Var, time_axis: usize, lengths: &[usize]) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    if lengths.iter().all(|&l| l >= shape[time_axis]) {
        return Ok(x);
    }
    let m = s.g.constant(frame_mask(&shape, time_axis, lengths));
    s.g.mul(x, m)
}

/// One direction of an LSTM layer. Gate order in the packed weights is
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state of one LSTM step.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmDirection {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, input: usize, hidden: usize) -> Self {
        pb.scope(name, |pb| Self {
            w_ih: pb.weight("w_ih", &[input, 4 * hidden], input, 4 * hidden),
            w_hh: pb.weight("w_hh", &[hidden, 4 * hidden], hidden, 4 * hidden),
            bias: pb.constant("bias", &[4 * hidden], 0.0, true),
            input,
            hidden,
        })
    }

    /// Applies the gates to pre-activations `[B, 4H]` (input projection plus bias).
    fn step_from_projection<R: Real>(&self, s: &mut Session<'_, R>, x_proj: Var, prev: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let w_hh = s.param(self.w_hh);
        let rec = s.g.matmul(prev.h, w_hh)?;
        let pre = s.g.add(x_proj, rec)?;
        let i = s.g.slice(pre, 1, 0, h)?;
        let f = s.g.slice(pre, 1, h, h)?;
        let gc = s.g.slice(pre, 1, 2 * h, h)?;
        let o = s.g.slice(pre, 1, 3 * h, h)?;
        let i = s.g.sigmoid(i);
        let f = s.g.sigmoid(f);
        let gc = s.g.tanh(gc);
        let o = s.g.sigmoid(o);
        let keep = s.g.mul(f, prev.c)?;
        let write = s.g.mul(i, gc)?;
        let c = s.g.add(keep, write)?;
        let tc = s.g.tanh(c);
        let h = s.g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// One step: `x_t: [B, in]`, state `[B, H]` each.
    pub fn cell<R: Real>(&self, s: &mut Session<'_, R>, x_t: Var, prev: LstmState) -> Result<LstmState> {
        let w_ih = s.param(self.w_ih);
        let b = s.param(self.bias);
        let proj = s.g.matmul(x_t, w_ih)?;
        let proj = s.g.add_bias(proj, b)?;
        self.step_from_projection(s, proj, prev)
    }

    pub fn zero_state<R: Real>(&self, s: &mut Session<'_, R>, batch: usize) -> LstmState {
        let z = Tensor::zeros(&[batch, self.hidden]);
        let h = s.g.constant(z.clone());
        let c = s.g.constant(z);
        LstmState { h, c }
    }

    /// Runs over `x: [B, T, in]`, returning `[B, T, H]`. `reverse` walks time
    /// backwards. States are held at zero on frames past each item's length,
    /// so a reverse pass starts at each item's own last frame.
    pub fn sequence<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize], reverse: bool) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        let (b, t_len) = (shape[0], shape[1]);
        let w_ih = s.param(self.w_ih);
        let bias = s.param(self.bias);
        let flat = s.g.reshape(x, &[b * t_len, self.input])?;
        let proj = s.g.matmul(flat, w_ih)?;
        let proj = s.g.add_bias(proj, bias)?;
        let proj = s.g.reshape(proj, &[b, t_len, 4 * self.hidden])?;
        let padded = lengths.iter().any(|&l| l < t_len);
        let mut state = self.zero_state(s, b);
        let mut outputs: Vec<Var> = Vec::with_capacity(t_len);
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for &t in &order {
            let xt = s.g.slice(proj, 1, t, 1)?;
            let xt = s.g.reshape(xt, &[b, 4 * self.hidden])?;
            let mut next = self.step_from_projection(s, xt, state)?;
            if padded {
                let m = Tensor::from_fn(&[b, self.hidden], |i| {
                    if t < lengths[i / self.hidden] {
                        R::one()
                    } else {
                        R::zero()
                    }
                });
                let m = s.g.constant(m);
                next.h = s.g.mul(next.h, m)?;
                next.c = s.g.mul(next.c, m)?;
            }
            state = next;
            outputs.push(s.g.reshape(state.h, &[b, 1, self.hidden])?);
        }
        if reverse {
            outputs.reverse();
        }
        s.g.concat(&outputs, 1)
    }
}

/// Stacked bidirectional LSTM; each layer outputs `[B, T, 2H]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmDirection, LstmDirection)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, input: usize, hidden: usize, num_layers: usize) -> Self {
        pb.scope(name, |pb| {
            let layers = (0..num_layers)
                .map(|l| {
                    let inp = if l == 0 { input } else { 2 * hidden };
                    pb.scope(&alloc::format!("layer{l}"), |pb| {
                        (LstmDirection::new(pb, "fwd", inp, hidden), LstmDirection::new(pb, "bwd", inp, hidden))
                    })
                })
                .collect();
            Self { layers, hidden }
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize]) -> Result<Var> {
        let mut h = x;
        for (fwd, bwd) in &self.layers {
            let hf = fwd.sequence(s, h, lengths, false)?;
            let hb = bwd.sequence(s, h, lengths, true)?;
            h = s.g.concat(&[hf, hb], 2)?;
        }
        Ok(h)
    }
}
