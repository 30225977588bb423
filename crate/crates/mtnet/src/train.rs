//! The joint training loop with per-epoch noise augmentation.

use std::fmt::Write as _;

use mtnet_core::{Batch, MultiTaskModel, ParamStore, Tensor, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::{mix_at_snr, SpectrogramPlan, Waveform};
use crate::config::Config;
use crate::data::{stream, streams, Dataset, NoiseBank};
use crate::error::{Error, Result};

pub const COMPONENTS: [&str; 3] = ["word", "speaker", "ctc"];

/// Mean loss components of one epoch; `None` for terms the variant lacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub word: Option<f64>,
    pub speaker: Option<f64>,
    pub ctc: Option<f64>,
}

impl EpochLoss {
    pub fn components(&self) -> [Option<f64>; 3] {
        [self.word, self.speaker, self.ctc]
    }

    pub fn total(&self) -> f64 {
        self.components().iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossLog {
    pub epochs: Vec<EpochLoss>,
}

impl LossLog {
    /// One line per epoch and component: `epoch=E component=C loss=V`, with
    /// `loss=none` for absent terms.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (e, l) in self.epochs.iter().enumerate() {
            for (name, v) in COMPONENTS.iter().zip(l.components()) {
                let v = v.map_or("none".to_string(), |v| format!("{v:.9e}"));
                let _ = writeln!(s, "epoch={} component={name} loss={v}", e + 1);
            }
        }
        s
    }
}

pub struct Trained {
    pub model: MultiTaskModel,
    pub store: ParamStore<f32>,
    pub config: Config,
    pub log: LossLog,
}

/// Spectrogram of `w`, mixed with a random noise clip at a random SNR when
/// augmentation is drawn.
pub fn augmented_features(
    plan: &SpectrogramPlan,
    w: &Waveform,
    noise: Option<&NoiseBank>,
    cfg: &Config,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let Some(bank) = noise.filter(|b| !b.clips.is_empty()) else {
        return plan.compute(w);
    };
    if !rng.random_bool(cfg.train.augment_prob) {
        return plan.compute(w);
    }
    let types = bank.types();
    let kind = types[rng.random_range(0..types.len())];
    let snr = cfg.train.snrs[rng.random_range(0..cfg.train.snrs.len())];
    let (clip, offset) = bank.pick(kind, rng)?;
    plan.compute(&mix_at_snr(w, clip, snr, offset)?.mixed)
}

/// Per-bin mean and standard deviation of the clean training spectrograms.
pub fn feature_stats(plan: &SpectrogramPlan, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = plan.bins;
    let (mut sum, mut sq, mut n) = (vec![0.0f64; f], vec![0.0f64; f], 0usize);
    for item in &data.items {
        let spec = plan.compute(&item.waveform)?;
        for row in spec.data().chunks(f) {
            for (k, &v) in row.iter().enumerate() {
                sum[k] += f64::from(v);
                sq[k] += f64::from(v) * f64::from(v);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
    Ok((mean, std))
}

/// Trains a freshly initialized model. `progress` sees each finished epoch.
pub fn train(
    cfg: &Config,
    data: &Dataset,
    noise: Option<&NoiseBank>,
    mut progress: impl FnMut(usize, &EpochLoss),
) -> Result<Trained> {
    if data.is_empty() {
        return Err(mtnet_core::Error::Config("training set is empty".into()).into());
    }
    let mut cfg = cfg.clone();
    cfg.model.num_words = cfg.model.num_words.max(data.num_words());
    cfg.model.num_speakers = cfg.model.num_speakers.max(data.num_speakers());
    let sr = data.sample_rate().expect("non-empty");
    if data.items.iter().any(|i| i.waveform.sample_rate != sr) {
        return Err(mtnet_core::Error::Config("mixed sample rates in training set".into()).into());
    }
    let plan = SpectrogramPlan::new(sr, cfg.model.freq_bins)?;
    let (model, mut store) = MultiTaskModel::build::<f32, _>(cfg.model.clone(), &mut stream(cfg.seed, streams::INIT))?;
    let (mean, std) = feature_stats(&plan, data)?;
    model.input_norm.set(&mut store, &mean, &std)?;
    let mut trainer = Trainer::new(&cfg.optim);
    let mut shuffle = stream(cfg.seed, streams::SHUFFLE);
    let mut augment = stream(cfg.seed, streams::AUGMENT);
    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 3];
        let mut present = [false; 3];
        for (b, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let specs = chunk
                .iter()
                .map(|&i| augmented_features(&plan, &data.items[i].waveform, noise, &cfg, &mut augment))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_spectrograms(&specs.iter().collect::<Vec<_>>())?;
            let targets: Vec<_> = chunk.iter().map(|&i| data.items[i].target.clone()).collect();
            let losses = trainer
                .step(&model, &mut store, &batch, &targets)
                .map_err(|source| Error::Training { epoch, batch: b + 1, source })?;
            for (k, v) in [losses.word, losses.speaker, losses.ctc].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v * chunk.len() as f64;
                    present[k] = true;
                }
            }
        }
        let n = data.len() as f64;
        let mean = |k: usize| present[k].then(|| sums[k] / n);
        let l = EpochLoss {
            word: mean(0),
            speaker: mean(1),
            ctc: mean(2),
        };
        progress(epoch, &l);
        log.epochs.push(l);
    }
    Ok(Trained {
        model,
        store,
        config: cfg,
        log,
    })
}
