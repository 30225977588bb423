//! Enhancement network: two cascaded dilated-CNN distortion estimators, each
//! followed by a residual subtraction.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::ConvBn;
use crate::params::{ParamBuilder, Session};
use crate::real::Real;

/// Five 3x3 conv layers: `C` channels at dilation 1, three more at dilation 2,
/// then a single-channel output at dilation 2. Shape `1 x T x F` is preserved.
#[derive(Debug, Clone)]
pub struct DilatedCnn {
    pub layers: Vec<ConvBn>,
}

impl DilatedCnn {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, channels: usize) -> Self {
        pb.scope(name, |pb| {
            let mut layers = Vec::with_capacity(5);
            layers.push(ConvBn::new(pb, "conv0", 1, channels, 3, (1, 1), 1, true));
            for i in 1..4 {
                layers.push(ConvBn::new(pb, &alloc::format!("conv{i}"), channels, channels, 3, (1, 1), 2, true));
            }
            layers.push(ConvBn::new(pb, "conv4", channels, 1, 3, (1, 1), 2, true));
            Self { layers }
        })
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize]) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(s, h, Some(lengths))?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Enhancer {
    pub stages: [DilatedCnn; 2],
    pub freq_bins: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EnhancerOutput {
    pub enhanced: Var,
    /// Distortion estimates of the two stages, each `[B, 1, T, F]`.
    pub distortions: [Var; 2],
}

impl Enhancer {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, freq_bins: usize, channels: usize) -> Self {
        pb.scope("enhancer", |pb| Self {
            stages: [DilatedCnn::new(pb, "dcnn1", channels), DilatedCnn::new(pb, "dcnn2", channels)],
            freq_bins,
        })
    }

    /// `x: [B, 1, T, F]` log-magnitude spectrogram, zero beyond each length.
    /// Returns `y1 = x - D1(x)`, `x_hat = y1 - D2(y1)`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize]) -> Result<EnhancerOutput> {
        let shape = s.g.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[3] != self.freq_bins {
            return Err(Error::Shape {
                op: "enhance",
                lhs: shape.to_vec(),
                rhs: alloc::vec![shape.first().copied().unwrap_or(0), 1, 0, self.freq_bins],
            });
        }
        let d1 = self.stages[0].forward(s, x, lengths)?;
        let y1 = s.g.sub(x, d1)?;
        let d2 = self.stages[1].forward(s, y1, lengths)?;
        let enhanced = s.g.sub(y1, d2)?;
        Ok(EnhancerOutput {
            enhanced,
            distortions: [d1, d2],
        })
    }
}
