//! Embedding extraction, all-pairs trials, and EER reports.

use std::fmt;

use mtnet_core::metrics::{compute_eer, cosine_score};
use mtnet_core::model::Tasks;
use mtnet_core::{Batch, Mode, MultiTaskModel, ParamStore, Session, Tensor};

use crate::audio::{mix_at_snr, SpectrogramPlan};
use crate::data::{stream, streams, Dataset, NoiseBank};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Kws,
    Sv,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Kws => "kws",
            Task::Sv => "sv",
        }
    }

    /// `kws`, `sv`, or `both`.
    pub fn parse_list(s: &str) -> Result<Vec<Task>> {
        match s {
            "kws" => Ok(vec![Task::Kws]),
            "sv" => Ok(vec![Task::Sv]),
            "both" => Ok(vec![Task::Kws, Task::Sv]),
            other => Err(mtnet_core::Error::Config(format!("unknown task `{other}`")).into()),
        }
    }

    pub fn supported(self, tasks: Tasks) -> bool {
        match self {
            Task::Kws => tasks.kws(),
            Task::Sv => tasks.sv(),
        }
    }
}

/// Test environment: clean, or one noise type at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub noise_type: Option<String>,
    pub snr_db: Option<f64>,
}

impl Condition {
    pub fn clean() -> Self {
        Self {
            noise_type: None,
            snr_db: None,
        }
    }

    /// Expands a request: `clean`; `all` (clean plus every type at every
    /// SNR); or a type name with one SNR or, when `snr` is absent, all SNRs.
    pub fn expand(noise_type: &str, snr: Option<f64>, types: &[&str], snrs: &[f64]) -> Result<Vec<Condition>> {
        let noisy = |t: &str, s: f64| Condition {
            noise_type: Some(t.to_string()),
            snr_db: Some(s),
        };
        match noise_type {
            "clean" if snr.is_none() => Ok(vec![Self::clean()]),
            "clean" => Err(Error::UnknownCondition("clean with an SNR".into())),
            "all" => {
                let mut v = vec![Self::clean()];
                for t in types {
                    v.extend(snrs.iter().map(|&s| noisy(t, s)));
                }
                Ok(v)
            }
            t if types.contains(&t) => match snr {
                Some(s) if s.is_finite() => Ok(vec![noisy(t, s)]),
                Some(s) => Err(Error::UnknownCondition(format!("{t} at {s} dB"))),
                None => Ok(snrs.iter().map(|&s| noisy(t, s)).collect()),
            },
            other => Err(Error::UnknownCondition(other.into())),
        }
    }
}

/// All unordered pairs `(i, j)`, `i < j`, with their same-label flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub pairs: Vec<(usize, usize, bool)>,
}

impl TrialSet {
    pub fn all_pairs(labels: &[usize]) -> Self {
        Self::filtered(labels, |_, _| true)
    }

    /// Pairs accepted by `keep(i, j)`.
    pub fn filtered(labels: &[usize], keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut pairs = Vec::new();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if keep(i, j) {
                    pairs.push((i, j, labels[i] == labels[j]));
                }
            }
        }
        Self { pairs }
    }

    pub fn has_both_kinds(&self) -> bool {
        self.pairs.iter().any(|p| p.2) && self.pairs.iter().any(|p| !p.2)
    }
}

/// Cosine-scores every trial and returns the EER.
pub fn run_trials(embeddings: &[Vec<f32>], trials: &TrialSet) -> Result<f64> {
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for &(i, j, s) in &trials.pairs {
        let score = cosine_score(&embeddings[i], &embeddings[j])?;
        match s {
            true => same.push(score),
            false => diff.push(score),
        }
    }
    Ok(compute_eer(&same, &diff)?)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embeddings {
    pub word: Option<Vec<Vec<f32>>>,
    pub speaker: Option<Vec<Vec<f32>>>,
}

/// Embeds `specs` (each `[T, F]`) in evaluation mode, `batch` at a time.
pub fn embed(model: &MultiTaskModel, store: &ParamStore<f32>, specs: &[Tensor<f32>], batch: usize) -> Result<Embeddings> {
    let mut out = Embeddings::default();
    for chunk in specs.chunks(batch.max(1)) {
        let b = Batch::from_spectrograms(&chunk.iter().collect::<Vec<_>>())?;
        let mut s = Session::frozen(store, Mode::Eval);
        let fwd = model.forward(&mut s, &b)?;
        for (slot, e) in [(&mut out.word, fwd.e_w), (&mut out.speaker, fwd.e_s)] {
            if let Some(e) = e {
                let dim = s.g.shape(e)[1];
                slot.get_or_insert_with(Vec::new)
                    .extend(s.g.value(e).data().chunks(dim).map(<[f32]>::to_vec));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// `kws`, `sv`, or `kws-heldout` (trials touching a word unseen in training).
    pub task: String,
    pub noise_type: String,
    pub snr_db: Option<f64>,
    /// Equal error rate as a fraction in `[0, 1]`.
    pub eer: f64,
    pub trials: usize,
}

impl fmt::Display for ReportRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let snr = self.snr_db.map_or(String::new(), |s| s.to_string());
        write!(
            f,
            "task={} noise_type={} snr_db={} eer={:.6} trials={}",
            self.task, self.noise_type, snr, self.eer, self.trials
        )
    }
}

pub struct EvalRequest<'a> {
    pub conditions: &'a [Condition],
    pub tasks: &'a [Task],
    pub noise: Option<&'a NoiseBank>,
    pub seed: u64,
    pub batch: usize,
}

/// Corrupts the test set per condition, embeds it, and scores every task.
pub fn evaluate(model: &MultiTaskModel, store: &ParamStore<f32>, data: &Dataset, req: &EvalRequest<'_>) -> Result<Vec<ReportRow>> {
    let tasks = model.config.ablation.tasks;
    if let Some(t) = req.tasks.iter().find(|t| !t.supported(tasks)) {
        return Err(mtnet_core::Error::Config(format!("variant does not produce {} embeddings", t.name())).into());
    }
    let sr = data.sample_rate().ok_or_else(|| mtnet_core::Error::Config("test set is empty".into()))?;
    let plan = SpectrogramPlan::new(sr, model.config.freq_bins)?;
    let words: Vec<usize> = data.items.iter().map(|i| i.target.word).collect();
    let speakers: Vec<usize> = data.items.iter().map(|i| i.target.speaker).collect();
    let held: Vec<bool> = data.items.iter().map(|i| i.held_out).collect();
    let mut rows = Vec::new();
    for (c, cond) in req.conditions.iter().enumerate() {
        let mut rng = stream(req.seed.wrapping_add(c as u64), streams::EVAL);
        let specs = data
            .items
            .iter()
            .map(|it| match (&cond.noise_type, cond.snr_db) {
                (Some(kind), Some(snr)) => {
                    let bank = req.noise.ok_or_else(|| Error::UnknownCondition(format!("{kind} (no noise bank)")))?;
                    let (clip, offset) = bank.pick(kind, &mut rng)?;
                    plan.compute(&mix_at_snr(&it.waveform, clip, snr, offset)?.mixed)
                }
                _ => plan.compute(&it.waveform),
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = embed(model, store, &specs, req.batch)?;
        let noise_type = cond.noise_type.clone().unwrap_or_else(|| "clean".into());
        let mut push = |task: &str, e: &[Vec<f32>], trials: TrialSet| -> Result<()> {
            rows.push(ReportRow {
                task: task.into(),
                noise_type: noise_type.clone(),
                snr_db: cond.snr_db,
                eer: run_trials(e, &trials)?,
                trials: trials.pairs.len(),
            });
            Ok(())
        };
        for task in req.tasks {
            match task {
                Task::Kws => {
                    let e = emb.word.as_deref().expect("kws supported");
                    push("kws", e, TrialSet::all_pairs(&words))?;
                    let slice = TrialSet::filtered(&words, |i, j| held[i] || held[j]);
                    if slice.has_both_kinds() {
                        push("kws-heldout", e, slice)?;
                    }
                }
                Task::Sv => push("sv", emb.speaker.as_deref().expect("sv supported"), TrialSet::all_pairs(&speakers))?,
            }
        }
    }
    Ok(rows)
}
