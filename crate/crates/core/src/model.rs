//! The assembled multi-task network, its configuration, and the joint loss.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::acoustic::{AcousticNet, AcousticOutputs};
use crate::ctc::{batch_ctc_loss, SoftVad};
use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{frame_mask, Linear};
use crate::params::{Group, ParamBuilder, ParamId, ParamStore, Session};
use crate::pooling::{apply_norm_constraint, GlobalQuery, GlobalQueryPooling, SelfAttentionPooling};
use crate::real::Real;
use crate::speaker::SpeakerNet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    GlobalQuery,
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tasks {
    Both,
    Kws,
    Sv,
}

impl Tasks {
    pub fn kws(self) -> bool {
        matches!(self, Tasks::Both | Tasks::Kws)
    }

    pub fn sv(self) -> bool {
        matches!(self, Tasks::Both | Tasks::Sv)
    }
}

/// Component switches. Only the combinations listed by [`Variant`] are valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub enhancement: bool,
    pub conditioning: bool,
    pub pooling: PoolingKind,
    pub ctc: bool,
    pub tasks: Tasks,
}

/// The proposed system, the two single-task baselines, and the four ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Proposed,
    BaselineKws,
    BaselineSv,
    NoEnhancement,
    NoConditioning,
    SelfAttention,
    NoCtc,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Proposed,
        Variant::BaselineKws,
        Variant::BaselineSv,
        Variant::NoEnhancement,
        Variant::NoConditioning,
        Variant::SelfAttention,
        Variant::NoCtc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::BaselineKws => "baseline-kws",
            Variant::BaselineSv => "baseline-sv",
            Variant::NoEnhancement => "no-enhancement",
            Variant::NoConditioning => "no-conditioning",
            Variant::SelfAttention => "self-attention",
            Variant::NoCtc => "no-ctc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn ablation(self) -> Ablation {
        use PoolingKind::*;
        let (enhancement, conditioning, pooling, ctc, tasks) = match self {
            Variant::Proposed => (true, true, GlobalQuery, true, Tasks::Both),
            Variant::BaselineKws => (true, false, SelfAttention, true, Tasks::Kws),
            Variant::BaselineSv => (true, false, SelfAttention, false, Tasks::Sv),
            Variant::NoEnhancement => (false, true, GlobalQuery, true, Tasks::Both),
            Variant::NoConditioning => (true, false, GlobalQuery, true, Tasks::Both),
            Variant::SelfAttention => (true, true, SelfAttention, true, Tasks::Both),
            Variant::NoCtc => (true, false, SelfAttention, false, Tasks::Both),
        };
        Ablation {
            enhancement,
            conditioning,
            pooling,
            ctc,
            tasks,
        }
    }
}

impl Ablation {
    pub fn variant(&self) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.ablation() == *self)
            .ok_or_else(|| Error::Config(alloc::format!("ablation switches {self:?} match no known configuration")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Spectrogram bins `F`; also the bottleneck width of `Z`.
    pub freq_bins: usize,
    /// Alphabet size including blank.
    pub num_chars: usize,
    /// Bi-LSTM units per direction (`d_w = 2 * lstm_hidden`).
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub enhancer_channels: usize,
    /// ResCNN channel counts; the last one is `d_s`.
    pub speaker_channels: Vec<usize>,
    pub heads: usize,
    /// Hidden width of the self-attention pooling projection.
    pub attention_hidden: usize,
    pub word_norm: f64,
    pub speaker_norm: f64,
    pub num_words: usize,
    pub num_speakers: usize,
    /// Divide the VAD weights by their sum before forming the global query.
    pub normalize_vad: bool,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Full-size dimensions: F = 256, 256 LSTM units, ResCNN channels 8..256.
    pub fn paper(num_words: usize, num_speakers: usize) -> Self {
        Self {
            freq_bins: 256,
            num_chars: 27,
            lstm_hidden: 256,
            lstm_layers: 2,
            enhancer_channels: 16,
            speaker_channels: vec![8, 16, 32, 64, 128, 256],
            heads: 4,
            attention_hidden: 128,
            word_norm: 6.0,
            speaker_norm: 12.0,
            num_words,
            num_speakers,
            normalize_vad: false,
            ablation: Variant::Proposed.ablation(),
        }
    }

    /// CPU-sized preset: F and every channel count divided by four, 32 LSTM units.
    pub fn desk(num_words: usize, num_speakers: usize) -> Self {
        Self {
            freq_bins: 64,
            lstm_hidden: 32,
            enhancer_channels: 4,
            speaker_channels: vec![2, 4, 8, 16, 32, 64],
            attention_hidden: 32,
            ..Self::paper(num_words, num_speakers)
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.ablation = v.ablation();
        self
    }

    pub fn word_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn speaker_dim(&self) -> usize {
        self.speaker_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.variant()?;
        let mut problems: Vec<String> = Vec::new();
        if self.freq_bins == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            problems.push("dimensions must be positive".into());
        }
        if self.num_chars < 2 {
            problems.push("alphabet needs at least one symbol besides blank".into());
        }
        if self.speaker_channels.is_empty() || self.speaker_channels.contains(&0) {
            problems.push("speaker channels must be non-empty and positive".into());
        }
        if self.heads == 0 || self.word_dim() % self.heads != 0 || self.speaker_dim() % self.heads != 0 {
            problems.push(alloc::format!(
                "embedding sizes {} and {} must divide into {} heads",
                self.word_dim(),
                self.speaker_dim(),
                self.heads
            ));
        }
        if self.num_words < 2 || self.num_speakers < 2 {
            problems.push("need at least two words and two speakers".into());
        }
        match problems.is_empty() {
            true => Ok(()),
            false => Err(Error::Config(problems.join("; "))),
        }
    }
}

/// A padded batch of spectrograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<R> {
    /// `[B, 1, T_max, F]`, zero beyond each item's length.
    pub features: Tensor<R>,
    pub lengths: Vec<usize>,
}

impl<R: Real> Batch<R> {
    /// Stacks `[T_i, F]` spectrograms, zero-padding to the longest.
    pub fn from_spectrograms(specs: &[&Tensor<R>]) -> Result<Self> {
        let first = specs.first().ok_or(Error::Config("empty batch".into()))?;
        let f = first.shape().get(1).copied().unwrap_or(0);
        for s in specs {
            if s.ndim() != 2 || s.shape()[1] != f || s.shape()[0] == 0 {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: first.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
        }
        let lengths: Vec<usize> = specs.iter().map(|s| s.shape()[0]).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![R::zero(); specs.len() * t_max * f];
        for (b, s) in specs.iter().enumerate() {
            data[b * t_max * f..b * t_max * f + s.numel()].copy_from_slice(s.data());
        }
        Ok(Self {
            features: Tensor::new(vec![specs.len(), 1, t_max, f], data)?,
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Supervision for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub word: usize,
    pub speaker: usize,
    /// Label ids over the alphabet without blank.
    pub transcript: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Pooling {
    GlobalQuery(GlobalQueryPooling),
    SelfAttention {
        word: Option<SelfAttentionPooling>,
        speaker: Option<SelfAttentionPooling>,
    },
}

/// Fixed per-bin standardization `(x - mean) * inv_std` of the log
/// spectrogram. The statistics are buffers (identity until set from the
/// training data) and are never updated by the optimizers.
#[derive(Debug, Clone)]
pub struct InputNorm {
    pub mean: ParamId,
    pub inv_std: ParamId,
}

impl InputNorm {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, freq_bins: usize) -> Self {
        pb.scope("input_norm", |pb| Self {
            mean: pb.constant("mean", &[freq_bins], 0.0, false),
            inv_std: pb.constant("inv_std", &[freq_bins], 1.0, false),
        })
    }

    /// Stores per-bin statistics; standard deviations are floored at `1e-3`.
    pub fn set<R: Real>(&self, store: &mut ParamStore<R>, mean: &[f64], std: &[f64]) -> Result<()> {
        let f = store.value(self.mean).data().len();
        if mean.len() != f || std.len() != f {
            return Err(Error::Shape {
                op: "input_norm",
                lhs: vec![mean.len(), std.len()],
                rhs: vec![f, f],
            });
        }
        if mean.iter().chain(std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input_norm"));
        }
        for (d, &m) in store.value_mut(self.mean).data_mut().iter_mut().zip(mean) {
            *d = R::of(m);
        }
        for (d, &sd) in store.value_mut(self.inv_std).data_mut().iter_mut().zip(std) {
            *d = R::of(1.0 / sd.max(1e-3));
        }
        Ok(())
    }

    /// Standardizes `[B, 1, T, F]`; padded frames stay zero.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var, lengths: &[usize]) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        let store = s.store();
        let (mean, inv_std) = (store.value(self.mean).data(), store.value(self.inv_std).data());
        let mask = frame_mask::<R>(&shape, 2, lengths);
        let f = mean.len();
        let mut gain = Vec::with_capacity(mask.data().len());
        let mut shift = Vec::with_capacity(mask.data().len());
        for (i, &m) in mask.data().iter().enumerate() {
            gain.push(m * inv_std[i % f]);
            shift.push(-m * mean[i % f] * inv_std[i % f]);
        }
        let gain = s.g.constant(Tensor::new(shape.clone(), gain)?);
        let shift = s.g.constant(Tensor::new(shape, shift)?);
        let y = s.g.mul(x, gain)?;
        s.g.add(y, shift)
    }
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    pub config: ModelConfig,
    pub input_norm: InputNorm,
    pub enhancer: Option<Enhancer>,
    pub acoustic: Option<AcousticNet>,
    pub vad: Option<SoftVad>,
    pub speaker: Option<SpeakerNet>,
    pooling: Pooling,
    pub word_head: Option<Linear>,
    pub speaker_head: Option<Linear>,
}

/// Every intermediate a forward pass produces; fields are `None` when the
/// configuration omits the component.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub input: Var,
    /// `[B, 1, T, F]`; equals the standardized input when enhancement is
    /// ablated.
    pub enhanced: Var,
    pub distortions: Option<[Var; 2]>,
    pub acoustic: Option<AcousticOutputs>,
    /// `[B, T]` soft VAD posteriors.
    pub vad: Option<Var>,
    /// `[B, 4, T, F]` conditioned speaker input.
    pub conditioned: Option<Var>,
    /// `[B, T, d_s]`
    pub h_s: Option<Var>,
    pub speaker_blocks: Vec<Var>,
    pub query: Option<GlobalQuery>,
    pub domain_queries: Option<(Var, Var)>,
    /// Norm-constrained `[B, d_w]`.
    pub e_w: Option<Var>,
    /// Norm-constrained `[B, d_s]`.
    pub e_s: Option<Var>,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub word: Option<Var>,
    pub speaker: Option<Var>,
    pub ctc: Option<Var>,
}

impl MultiTaskModel {
    /// Builds the network and registers its freshly initialized parameters.
    pub fn build<R: Real, G: Rng + ?Sized>(config: ModelConfig, rng: &mut G) -> Result<(Self, ParamStore<R>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ab = config.ablation;
        let c = &config;
        let mut pb = ParamBuilder::new(&mut store, rng, Group::Enhancement);
        let input_norm = InputNorm::new(&mut pb, c.freq_bins);
        let enhancer = ab
            .enhancement
            .then(|| Enhancer::new(&mut pb, c.freq_bins, c.enhancer_channels));
        let acoustic = ab.tasks.kws().then(|| {
            pb.with_group(Group::Acoustic, |pb| {
                AcousticNet::new(pb, c.freq_bins, c.lstm_hidden, c.lstm_layers, c.num_chars, ab.ctc)
            })
        });
        let vad = (ab.ctc && ab.pooling == PoolingKind::GlobalQuery)
            .then(|| pb.with_group(Group::Acoustic, |pb| SoftVad::new(pb, c.num_chars)));
        let speaker = ab.tasks.sv().then(|| {
            pb.with_group(Group::Speaker, |pb| {
                SpeakerNet::new(pb, c.freq_bins, &c.speaker_channels, ab.conditioning)
            })
        });
        let pooling = pb.with_group(Group::Pooling, |pb| match ab.pooling {
            PoolingKind::GlobalQuery => Ok::<_, Error>(Pooling::GlobalQuery(GlobalQueryPooling::new(
                pb,
                c.word_dim(),
                c.speaker_dim(),
                c.heads,
                c.normalize_vad,
            )?)),
            PoolingKind::SelfAttention => Ok(Pooling::SelfAttention {
                word: ab
                    .tasks
                    .kws()
                    .then(|| SelfAttentionPooling::new(pb, "self_attention_w", c.word_dim(), c.attention_hidden, c.heads)),
                speaker: ab
                    .tasks
                    .sv()
                    .then(|| SelfAttentionPooling::new(pb, "self_attention_s", c.speaker_dim(), c.attention_hidden, c.heads)),
            }),
        })?;
        let (word_head, speaker_head) = pb.with_group(Group::Classifier, |pb| {
            (
                ab.tasks.kws().then(|| Linear::new(pb, "word_head", c.word_dim(), c.num_words, false)),
                ab.tasks.sv().then(|| Linear::new(pb, "speaker_head", c.speaker_dim(), c.num_speakers, false)),
            )
        });
        let model = Self {
            config,
            input_norm,
            enhancer,
            acoustic,
            vad,
            speaker,
            pooling,
            word_head,
            speaker_head,
        };
        Ok((model, store))
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, batch: &Batch<R>) -> Result<ForwardOutput> {
        let shape = batch.features.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[3] != self.config.freq_bins {
            return Err(Error::Shape {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), 1, 0, self.config.freq_bins],
            });
        }
        let (b, t, f) = (shape[0], shape[2], shape[3]);
        let lengths = batch.lengths.clone();
        let input = s.g.constant(batch.features.clone());
        self.forward_from(s, input, &lengths, (b, t, f))
    }

    /// Forward pass from an existing `[B, 1, T, F]` node (lets callers
    /// differentiate with respect to the input).
    pub fn forward_from<R: Real>(
        &self,
        s: &mut Session<'_, R>,
        input: Var,
        lengths: &[usize],
        (b, t, f): (usize, usize, usize),
    ) -> Result<ForwardOutput> {
        let ab = self.config.ablation;
        let normalized = self.input_norm.forward(s, input, lengths)?;
        let (enhanced, distortions) = match &self.enhancer {
            Some(e) => {
                let out = e.forward(s, normalized, lengths)?;
                (out.enhanced, Some(out.distortions))
            }
            None => (normalized, None),
        };
        let mut out = ForwardOutput {
            input,
            enhanced,
            distortions,
            acoustic: None,
            vad: None,
            conditioned: None,
            h_s: None,
            speaker_blocks: Vec::new(),
            query: None,
            domain_queries: None,
            e_w: None,
            e_s: None,
            lengths: lengths.to_vec(),
        };
        if let Some(net) = &self.acoustic {
            let seq = s.g.reshape(enhanced, &[b, t, f])?;
            let ac = net.forward(s, seq, lengths)?;
            if let (Some(vad), Some(lp)) = (&self.vad, ac.log_probs) {
                out.vad = Some(vad.forward(s, lp, lengths)?);
            }
            out.acoustic = Some(ac);
        }
        if let Some(net) = &self.speaker {
            let x = if ab.conditioning {
                let z = out
                    .acoustic
                    .and_then(|a| a.z)
                    .ok_or_else(|| Error::Config("conditioning requires the CTC bottleneck".into()))?;
                let x = net.condition(s, enhanced, z, lengths)?;
                out.conditioned = Some(x);
                x
            } else {
                enhanced
            };
            let so = net.forward(s, x, lengths)?;
            out.h_s = Some(so.h_s);
            out.speaker_blocks = so.blocks;
        }
        let h_w = out.acoustic.map(|a| a.h_w);
        let (e_w, e_s) = match &self.pooling {
            Pooling::GlobalQuery(gq) => {
                let (h_w, h_s, vad) = match (h_w, out.h_s, out.vad) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(Error::Config("global query needs both feature streams and VAD".into())),
                };
                let pooled = gq.forward(s, h_w, h_s, vad, lengths)?;
                out.query = Some(pooled.query);
                out.domain_queries = Some((pooled.q_w_star, pooled.q_s_star));
                (Some(pooled.word.output), Some(pooled.speaker.output))
            }
            Pooling::SelfAttention { word, speaker } => {
                let e_w = match (word, h_w) {
                    (Some(p), Some(h)) => Some(p.forward(s, h, lengths)?.0),
                    _ => None,
                };
                let e_s = match (speaker, out.h_s) {
                    (Some(p), Some(h)) => Some(p.forward(s, h, lengths)?.0),
                    _ => None,
                };
                (e_w, e_s)
            }
        };
        out.e_w = e_w.map(|e| apply_norm_constraint(s, e, self.config.word_norm)).transpose()?;
        out.e_s = e_s.map(|e| apply_norm_constraint(s, e, self.config.speaker_norm)).transpose()?;
        Ok(out)
    }

    /// `L = L_w + L_s + L_c` with batch-mean terms; terms for absent
    /// components are omitted.
    pub fn loss<R: Real>(&self, s: &mut Session<'_, R>, out: &ForwardOutput, targets: &[Target]) -> Result<LossTerms> {
        let c = &self.config;
        let mut terms = Vec::new();
        let word = match (&self.word_head, out.e_w) {
            (Some(head), Some(e)) => {
                let labels: Vec<usize> = targets.iter().map(|t| t.word).collect();
                Some(classification_loss(s, head, e, &labels, c.num_words)?)
            }
            _ => None,
        };
        let speaker = match (&self.speaker_head, out.e_s) {
            (Some(head), Some(e)) => {
                let labels: Vec<usize> = targets.iter().map(|t| t.speaker).collect();
                Some(classification_loss(s, head, e, &labels, c.num_speakers)?)
            }
            _ => None,
        };
        let ctc = match out.acoustic.and_then(|a| a.log_probs) {
            Some(lp) => {
                let labels: Vec<Vec<usize>> = targets.iter().map(|t| t.transcript.clone()).collect();
                Some(batch_ctc_loss(&mut s.g, lp, &out.lengths, &labels)?)
            }
            None => None,
        };
        terms.extend(word);
        terms.extend(speaker);
        terms.extend(ctc);
        let mut total = *terms.first().ok_or(Error::Config("model has no loss terms".into()))?;
        for &t in &terms[1..] {
            total = s.g.add(total, t)?;
        }
        Ok(LossTerms {
            total,
            word,
            speaker,
            ctc,
        })
    }
}

/// Mean cross-entropy of `softmax(e W)` against integer labels.
pub fn classification_loss<R: Real>(s: &mut Session<'_, R>, head: &Linear, e: Var, labels: &[usize], classes: usize) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let logits = head.forward(s, e)?;
    let logp = s.g.log_softmax(logits)?;
    let n = labels.len();
    let onehot = Tensor::from_fn(&[n, classes], |i| if labels[i / classes] == i % classes { R::one() } else { R::zero() });
    let onehot = s.g.constant(onehot);
    let picked = s.g.mul(logp, onehot)?;
    let total = s.g.sum(picked);
    Ok(s.g.scale(total, -R::one() / R::of(n as f64)))
}
