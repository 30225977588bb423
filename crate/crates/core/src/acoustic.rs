//! Acoustic feature extraction: two hierarchical 2-layer bi-LSTMs, the
//! phonetic bottleneck `Z = ReLU(Linear(H_c))`, and the CTC log-probability
//! head `P_c = log_softmax(Linear(Z))`.

use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::layers::{mask_frames, BiLstm, Linear};
use crate::params::{ParamBuilder, Session};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct AcousticNet {
    pub lstm_c: BiLstm,
    pub lstm_w: BiLstm,
    /// Bottleneck and CTC head; absent when CTC is ablated.
    pub ctc_head: Option<(Linear, Linear)>,
}

#[derive(Debug, Clone, Copy)]
pub struct AcousticOutputs {
    /// `[B, T, 2H]` output of the first bi-LSTM.
    pub h_c: Var,
    /// `[B, T, 2H]` acoustic features from the second bi-LSTM.
    pub h_w: Var,
    /// `[B, T, F]` phonetic bottleneck (non-negative, zero on padded frames).
    pub z: Option<Var>,
    /// `[B, T, |C|]` log-probabilities.
    pub log_probs: Option<Var>,
}

impl AcousticNet {
    pub fn new<R: Real, G: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, R, G>,
        freq_bins: usize,
        hidden: usize,
        layers: usize,
        num_chars: usize,
        with_ctc: bool,
    ) -> Self {
        pb.scope("acoustic", |pb| {
            let lstm_c = BiLstm::new(pb, "lstm_w1", freq_bins, hidden, layers);
            let lstm_w = BiLstm::new(pb, "lstm_w2", 2 * hidden, hidden, layers);
            let ctc_head = with_ctc.then(|| {
                (
                    Linear::new(pb, "linear_c1", 2 * hidden, freq_bins, true),
                    Linear::new(pb, "linear_c2", freq_bins, num_chars, true),
                )
            });
            Self { lstm_c, lstm_w, ctc_head }
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.lstm_w.output_dim()
    }

    /// `x_hat: [B, T, F]`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x_hat: Var, lengths: &[usize]) -> Result<AcousticOutputs> {
        let h_c = self.lstm_c.forward(s, x_hat, lengths)?;
        let h_w = self.lstm_w.forward(s, h_c, lengths)?;
        let (z, log_probs) = match &self.ctc_head {
            Some((bottleneck, head)) => {
                let z = bottleneck.forward(s, h_c)?;
                let z = s.g.relu(z);
                let z = mask_frames(s, z, 1, lengths)?;
                let logits = head.forward(s, z)?;
                (Some(z), Some(s.g.log_softmax(logits)?))
            }
            None => (None, None),
        };
        Ok(AcousticOutputs { h_c, h_w, z, log_probs })
    }
}
