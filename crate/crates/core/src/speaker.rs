//! Speaker feature extraction: optional phonetic conditioning followed by six
//! ResCNN blocks that halve the frequency axis while keeping time intact.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::ConvBn;
use crate::params::{ParamBuilder, Session};
use crate::real::Real;

/// Entry conv with stride `(1, 2)` and two basic residual blocks.
#[derive(Debug, Clone)]
pub struct ResCnn {
    pub entry: ConvBn,
    pub residual: [(ConvBn, ConvBn); 2],
}

impl ResCnn {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, in_channels: usize, channels: usize) -> Self {
        pb.scope(name, |pb| {
            let entry = ConvBn::new(pb, "entry", in_channels, channels, 3, (1, 2), 1, true);
            let mut block = |i: usize| {
                pb.scope(&alloc::format!("res{i}"), |pb| {
                    (
                        ConvBn::new(pb, "conv_a", channels, channels, 3, (1, 1), 1, true),
                        // ReLU is applied after the skip addition instead.
                        ConvBn::new(pb, "conv_b", channels, channels, 3, (1, 1), 1, false),
                    )
                })
            };
            let residual = [block(0), block(1)];
            Self { entry, residual }
        })
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize]) -> Result<Var> {
        let mut h = self.entry.forward(s, x, Some(lengths))?;
        for (a, b) in &self.residual {
            let inner = a.forward(s, h, Some(lengths))?;
            let inner = b.forward(s, inner, Some(lengths))?;
            let sum = s.g.add(h, inner)?;
            h = s.g.relu(sum);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerNet {
    /// Lifts `Z` to three channels; absent in the unconditioned variant.
    pub condition: Option<ConvBn>,
    pub blocks: Vec<ResCnn>,
    pub freq_bins: usize,
}

#[derive(Debug, Clone)]
pub struct SpeakerOutputs {
    /// `[B, T, C_last]` frame-level speaker features.
    pub h_s: Var,
    /// Output map of every ResCNN block, `[B, C_l, T, F_l]`.
    pub blocks: Vec<Var>,
}

impl SpeakerNet {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, freq_bins: usize, channels: &[usize], conditioned: bool) -> Self {
        pb.scope("speaker", |pb| {
            let condition = conditioned.then(|| ConvBn::new(pb, "condition", 1, 3, 3, (1, 1), 1, true));
            let mut in_ch = if conditioned { 4 } else { 1 };
            let blocks = channels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let blk = ResCnn::new(pb, &alloc::format!("rescnn{}", i + 1), in_ch, c);
                    in_ch = c;
                    blk
                })
                .collect();
            Self {
                condition,
                blocks,
                freq_bins,
            }
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.entry.out_channels)
    }

    pub fn is_conditioned(&self) -> bool {
        self.condition.is_some()
    }

    /// Concatenates `x_hat: [B, 1, T, F]` with the 3-channel lift of
    /// `z: [B, T, F]`, giving `[B, 4, T, F]` with `x_hat` as channel 0.
    pub fn condition<R: Real>(&self, s: &mut Session<'_, R>, x_hat: Var, z: Var, lengths: &[usize]) -> Result<Var> {
        let conv = self
            .condition
            .as_ref()
            .ok_or_else(|| Error::Config("speaker network built without conditioning".into()))?;
        let (sx, sz) = (s.g.shape(x_hat).to_vec(), s.g.shape(z).to_vec());
        if sz.len() != 3 || sx.len() != 4 || sx[0] != sz[0] || sx[2] != sz[1] || sx[3] != sz[2] {
            return Err(Error::Shape {
                op: "condition",
                lhs: sx,
                rhs: sz,
            });
        }
        let z4 = s.g.reshape(z, &[sz[0], 1, sz[1], sz[2]])?;
        let lifted = conv.forward(s, z4, Some(lengths))?;
        s.g.concat(&[x_hat, lifted], 1)
    }

    /// `x: [B, C_in, T, F]` with `C_in` 4 (conditioned) or 1.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize]) -> Result<SpeakerOutputs> {
        let want = if self.is_conditioned() { 4 } else { 1 };
        let shape = s.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != want || shape[3] != self.freq_bins {
            return Err(Error::Shape {
                op: "speaker_forward",
                lhs: shape,
                rhs: alloc::vec![want, self.freq_bins],
            });
        }
        let mut h = x;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            h = blk.forward(s, h, lengths)?;
            blocks.push(h);
        }
        // [B, C, T, F'] -> mean over F' -> [B, C, T] -> [B, T, C]
        let pooled = s.g.mean_axis(h, 3)?;
        let h_s = s.g.transpose(pooled)?;
        Ok(SpeakerOutputs { h_s, blocks })
    }
}
