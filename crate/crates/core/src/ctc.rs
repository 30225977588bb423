//! Connectionist temporal classification.
//!
//! [`ctc_loss_graph`] runs the log-space forward recursion over the
//! blank-interleaved label sequence as ordinary graph operations, so the
//! gradient comes from the autodiff engine. [`ctc_brute_force`] is an
//! independent value-only oracle that enumerates every frame alignment.
//! [`SoftVad`] turns CTC posteriors into per-frame speech weights.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{mask_frames, BiLstm, Linear};
use crate::params::{ParamBuilder, Session};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of the blank symbol.
pub const BLANK: usize = 0;

/// Stand-in for `log(0)` that keeps all arithmetic finite.
pub const LOG_ZERO: f64 = -1e30;

/// Characters `a..=z` map to `1..=26`; blank is 0.
pub fn encode_transcript(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| match c {
            'a'..='z' => Ok(c as usize - 'a' as usize + 1),
            _ => Err(Error::BadLabel(c as usize)),
        })
        .collect()
}

pub fn decode_label(symbol: usize) -> Option<char> {
    (1..=26).contains(&symbol).then(|| (b'a' + (symbol - 1) as u8) as char)
}

/// `blank, y1, blank, y2, ..., yL, blank`.
pub fn expand_labels(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(BLANK);
    for &l in labels {
        out.push(l);
        out.push(BLANK);
    }
    out
}

/// Fewest frames able to emit `labels`: one per symbol plus a separating
/// blank between equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(labels: &[usize], frames: usize, classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyLabel);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::BadLabel(bad));
    }
    let needed = min_frames(labels);
    if frames < needed {
        return Err(Error::CtcInfeasible {
            label_len: labels.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `labels` under `log_probs: [T, |C|]`.
pub fn ctc_loss_graph<R: Real>(g: &mut Graph<R>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "ctc_loss",
            shape,
            reason: "expected [T, classes]",
        });
    }
    let (frames, classes) = (shape[0], shape[1]);
    validate(labels, frames, classes)?;
    let ext = expand_labels(labels);
    let s = ext.len();
    let zero = R::of(LOG_ZERO);

    // Emission log-probabilities for every extended position: [T, S].
    let emit = g.gather(log_probs, &ext)?;
    // Skip transitions s-2 -> s are allowed onto a non-blank that differs
    // from the symbol two positions back.
    let skip_mask = Tensor::from_fn(&[s], |i| {
        if i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2] {
            R::zero()
        } else {
            zero
        }
    });
    let skip_mask = g.constant(skip_mask);
    let pad1 = g.constant(Tensor::full(&[1], zero));
    let pad2 = g.constant(Tensor::full(&[2], zero));
    let start_mask = g.constant(Tensor::from_fn(&[s], |i| if i < 2 { R::zero() } else { zero }));

    let row0 = g.slice(emit, 0, 0, 1)?;
    let row0 = g.reshape(row0, &[s])?;
    let mut alpha = g.add(row0, start_mask)?;
    for t in 1..frames {
        let stay = alpha;
        let head1 = g.slice(alpha, 0, 0, s - 1)?;
        let from_prev = g.concat(&[pad1, head1], 0)?;
        let mut acc = g.log_add_exp(stay, from_prev)?;
        if s > 2 {
            let head2 = g.slice(alpha, 0, 0, s - 2)?;
            let from_skip = g.concat(&[pad2, head2], 0)?;
            let from_skip = g.add(from_skip, skip_mask)?;
            acc = g.log_add_exp(acc, from_skip)?;
        }
        let row = g.slice(emit, 0, t, 1)?;
        let row = g.reshape(row, &[s])?;
        alpha = g.add(acc, row)?;
    }
    let last = g.slice(alpha, 0, s - 1, 1)?;
    let second = g.slice(alpha, 0, s - 2, 1)?;
    let total = g.log_add_exp(last, second)?;
    Ok(g.scale(total, -R::one()))
}

/// Value-only convenience wrapper around [`ctc_loss_graph`].
pub fn ctc_loss<R: Real>(log_probs: &Tensor<R>, labels: &[usize]) -> Result<R> {
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let loss = ctc_loss_graph(&mut g, lp, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Largest number of alignments [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 5e6;

/// Exact `-log P(labels)` by enumerating all `|C|^T` frame paths, collapsing
/// repeats then dropping blanks, and summing the matching path probabilities.
pub fn ctc_brute_force<R: Real>(log_probs: &Tensor<R>, labels: &[usize]) -> Result<f64> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "ctc_brute_force",
            shape: shape.to_vec(),
            reason: "expected [T, classes]",
        });
    }
    let (frames, classes) = (shape[0], shape[1]);
    if labels.is_empty() {
        return Err(Error::EmptyLabel);
    }
    let count = libm::pow(classes as f64, frames as f64);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(count));
    }
    let lp: Vec<f64> = log_probs.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut path = vec![0usize; frames];
    let mut collapsed = Vec::with_capacity(frames);
    let mut total = 0.0;
    loop {
        collapsed.clear();
        let mut prev = None;
        for &p in &path {
            if Some(p) != prev && p != BLANK {
                collapsed.push(p);
            }
            prev = Some(p);
        }
        if collapsed == labels {
            let logp: f64 = path.iter().enumerate().map(|(t, &c)| lp[t * classes + c]).sum();
            total += libm::exp(logp);
        }
        // Odometer increment over the path.
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(-libm::log(total));
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// CTC-based soft VAD: a 1-layer bi-LSTM with `|C|` units per direction over
/// `P_c`, a projection to one value per frame, and a sigmoid.
#[derive(Debug, Clone)]
pub struct SoftVad {
    pub lstm: BiLstm,
    pub proj: Linear,
}

impl SoftVad {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, num_chars: usize) -> Self {
        pb.scope("soft_vad", |pb| Self {
            lstm: BiLstm::new(pb, "lstm_c", num_chars, num_chars, 1),
            proj: Linear::new(pb, "proj", 2 * num_chars, 1, true),
        })
    }

    /// `log_probs: [B, T, |C|]` to posteriors `[B, T]` in (0, 1); padded frames are 0.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, log_probs: Var, lengths: &[usize]) -> Result<Var> {
        let shape = s.g.shape(log_probs).to_vec();
        let h = self.lstm.forward(s, log_probs, lengths)?;
        let logit = self.proj.forward(s, h)?;
        let logit = s.g.reshape(logit, &[shape[0], shape[1]])?;
        let v = s.g.sigmoid(logit);
        mask_frames(s, v, 1, lengths)
    }
}

/// CTC loss over a batch of `[B, T, |C|]` log-probabilities, each item
/// truncated to its own length and divided by its label length, then
/// averaged over the batch.
pub fn batch_ctc_loss<R: Real>(g: &mut Graph<R>, log_probs: Var, lengths: &[usize], labels: &[Vec<usize>]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    let mut losses = Vec::with_capacity(shape[0]);
    for (b, (&len, lab)) in lengths.iter().zip(labels).enumerate() {
        let item = g.slice(log_probs, 0, b, 1)?;
        let item = g.slice(item, 1, 0, len)?;
        let item = g.reshape(item, &[len, shape[2]])?;
        let loss = ctc_loss_graph(g, item, lab)?;
        losses.push(g.scale(loss, R::of(1.0 / lab.len().max(1) as f64)));
    }
    let all = g.concat(&losses, 0)?;
    Ok(g.mean(all))
}
