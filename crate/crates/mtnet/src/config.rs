//! Flat `key = value` run configuration.
//!
//! `preset` and `variant` are applied first regardless of their position, so
//! individual keys always refine them. `#` starts a comment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use mtnet_core::model::{PoolingKind, Tasks};
use mtnet_core::{ModelConfig, OptimConfig, Variant};

use crate::error::{io, Error, Result};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Disjoint train/test speakers.
    Speakers,
    /// Every word/speaker pair contributes its last utterances to the test set.
    Utterances,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSettings {
    pub synth: SynthConfig,
    pub split: Split,
    pub test_speakers: usize,
    pub test_utts_per_pair: usize,
    pub held_out_words: usize,
    pub noise_clips: usize,
    pub noise_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability that a training utterance is noise-augmented in an epoch.
    pub augment_prob: f64,
    pub snrs: Vec<f64>,
    /// Longest accepted input, in seconds.
    pub max_input_seconds: f64,
    pub eval_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub preset: String,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainSettings,
    pub corpus: CorpusSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset("desk").expect("built-in preset")
    }
}

fn on_off(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{v}`")),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid number `{v}`"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// `desk` (F = 64, CPU-sized) or `paper` (F = 256).
    pub fn preset(name: &str) -> Result<Self> {
        let corpus = CorpusSettings {
            synth: SynthConfig::default(),
            split: Split::Utterances,
            test_speakers: 2,
            test_utts_per_pair: 1,
            held_out_words: 0,
            noise_clips: 3,
            noise_seconds: 1.5,
        };
        let (nw, ns) = (corpus.synth.num_words, corpus.synth.num_speakers);
        let (model, batch_size) = match name {
            // Sum-normalized VAD weights keep the global query bounded at
            // desk scale, where unnormalized sums saturate the attention.
            "desk" => (
                ModelConfig {
                    normalize_vad: true,
                    ..ModelConfig::desk(nw, ns)
                },
                16,
            ),
            "paper" => (ModelConfig::paper(nw, ns), 128),
            other => {
                return Err(Error::Config {
                    line: 0,
                    reason: format!("unknown preset `{other}`"),
                })
            }
        };
        Ok(Self {
            seed: 0,
            preset: name.into(),
            model,
            optim: OptimConfig::default(),
            train: TrainSettings {
                epochs: 100,
                batch_size,
                augment_prob: 0.5,
                snrs: vec![20.0, 10.0, 5.0, 0.0],
                max_input_seconds: 1.0,
                eval_batch: 32,
            },
            corpus,
        })
    }

    pub fn variant(&self) -> Variant {
        self.model.ablation.variant().expect("validated config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io(path))?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config { line: i + 1, reason };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            entries.push((i + 1, k, v));
        }
        let preset = entries.iter().find(|e| e.1 == "preset").map_or("desk", |e| e.2);
        let mut cfg = Self::preset(preset)?;
        if let Some(&(line, _, v)) = entries.iter().find(|e| e.1 == "variant") {
            let variant = Variant::parse(v).ok_or_else(|| Error::Config {
                line,
                reason: format!("unknown variant `{v}`"),
            })?;
            cfg.model.ablation = variant.ablation();
        }
        for &(line, k, v) in &entries {
            cfg.set(k, v).map_err(|reason| Error::Config { line, reason })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let c = &mut self.corpus;
        let t = &mut self.train;
        let o = &mut self.optim;
        match k {
            "preset" | "variant" => {}
            "seed" => self.seed = num(v)?,
            "enhancement" => m.ablation.enhancement = on_off(v)?,
            "conditioning" => m.ablation.conditioning = on_off(v)?,
            "ctc" => m.ablation.ctc = on_off(v)?,
            "pooling" => {
                m.ablation.pooling = match v {
                    "global_query" => PoolingKind::GlobalQuery,
                    "self_attention" => PoolingKind::SelfAttention,
                    _ => return Err(format!("pooling must be global_query or self_attention, got `{v}`")),
                }
            }
            "tasks" => {
                m.ablation.tasks = match v {
                    "both" => Tasks::Both,
                    "kws" => Tasks::Kws,
                    "sv" => Tasks::Sv,
                    _ => return Err(format!("tasks must be both, kws or sv, got `{v}`")),
                }
            }
            "freq_bins" => m.freq_bins = num(v)?,
            "num_chars" => m.num_chars = num(v)?,
            "lstm_hidden" => m.lstm_hidden = num(v)?,
            "lstm_layers" => m.lstm_layers = num(v)?,
            "enhancer_channels" => m.enhancer_channels = num(v)?,
            "speaker_channels" => m.speaker_channels = list(v)?,
            "heads" => m.heads = num(v)?,
            "attention_hidden" => m.attention_hidden = num(v)?,
            "word_norm" => m.word_norm = num(v)?,
            "speaker_norm" => m.speaker_norm = num(v)?,
            "normalize_vad" => m.normalize_vad = on_off(v)?,
            "num_words" => {
                c.synth.num_words = num(v)?;
                m.num_words = c.synth.num_words;
            }
            "num_speakers" => {
                c.synth.num_speakers = num(v)?;
                m.num_speakers = c.synth.num_speakers;
            }
            "utts_per_pair" => c.synth.utts_per_pair = num(v)?,
            "sample_rate" => c.synth.sample_rate = num(v)?,
            "min_duration" => c.synth.min_duration = num(v)?,
            "max_duration" => c.synth.max_duration = num(v)?,
            "split" => {
                c.split = match v {
                    "speakers" => Split::Speakers,
                    "utterances" => Split::Utterances,
                    _ => return Err(format!("split must be speakers or utterances, got `{v}`")),
                }
            }
            "test_speakers" => c.test_speakers = num(v)?,
            "test_utts_per_pair" => c.test_utts_per_pair = num(v)?,
            "held_out_words" => c.held_out_words = num(v)?,
            "noise_clips" => c.noise_clips = num(v)?,
            "noise_seconds" => c.noise_seconds = num(v)?,
            "sgd_lr" => o.sgd_lr = num(v)?,
            "sgd_momentum" => o.sgd_momentum = num(v)?,
            "adam_lr" => o.adam_lr = num(v)?,
            "bn_momentum" => o.bn_momentum = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "augment_prob" => t.augment_prob = num(v)?,
            "snrs" => t.snrs = list(v)?,
            "max_input_seconds" => t.max_input_seconds = num(v)?,
            "eval_batch" => t.eval_batch = num(v)?,
            _ => return Err(format!("unknown key `{k}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Config { line: 0, reason };
        self.model.validate()?;
        let c = &self.corpus;
        if c.held_out_words >= c.synth.num_words {
            return Err(bad("held_out_words must leave at least one training word".into()));
        }
        match c.split {
            Split::Speakers if c.test_speakers == 0 || c.test_speakers >= c.synth.num_speakers => {
                return Err(bad("test_speakers must be between 1 and num_speakers - 1".into()));
            }
            Split::Utterances if c.test_utts_per_pair == 0 || c.test_utts_per_pair >= c.synth.utts_per_pair => {
                return Err(bad("test_utts_per_pair must be between 1 and utts_per_pair - 1".into()));
            }
            _ => {}
        }
        if self.train.batch_size == 0 || self.train.eval_batch == 0 {
            return Err(bad("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.augment_prob) {
            return Err(bad("augment_prob must lie in [0, 1]".into()));
        }
        if self.train.snrs.is_empty() || !self.train.snrs.iter().all(|s| s.is_finite()) {
            return Err(bad("snrs must be a non-empty list of finite values".into()));
        }
        if c.synth.max_duration > self.train.max_input_seconds {
            return Err(bad("max_duration exceeds max_input_seconds".into()));
        }
        Ok(())
    }

    /// Full snapshot; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (m, c, t, o) = (&self.model, &self.corpus, &self.train, &self.optim);
        let ab = m.ablation;
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("preset", self.preset.clone());
        put("seed", self.seed.to_string());
        put("enhancement", onoff(ab.enhancement).into());
        put("conditioning", onoff(ab.conditioning).into());
        put(
            "pooling",
            match ab.pooling {
                PoolingKind::GlobalQuery => "global_query",
                PoolingKind::SelfAttention => "self_attention",
            }
            .into(),
        );
        put("ctc", onoff(ab.ctc).into());
        put(
            "tasks",
            match ab.tasks {
                Tasks::Both => "both",
                Tasks::Kws => "kws",
                Tasks::Sv => "sv",
            }
            .into(),
        );
        put("freq_bins", m.freq_bins.to_string());
        put("num_chars", m.num_chars.to_string());
        put("lstm_hidden", m.lstm_hidden.to_string());
        put("lstm_layers", m.lstm_layers.to_string());
        put("enhancer_channels", m.enhancer_channels.to_string());
        put("speaker_channels", join(&m.speaker_channels));
        put("heads", m.heads.to_string());
        put("attention_hidden", m.attention_hidden.to_string());
        put("word_norm", m.word_norm.to_string());
        put("speaker_norm", m.speaker_norm.to_string());
        put("normalize_vad", onoff(m.normalize_vad).into());
        put("num_words", m.num_words.to_string());
        put("num_speakers", m.num_speakers.to_string());
        put("utts_per_pair", c.synth.utts_per_pair.to_string());
        put("sample_rate", c.synth.sample_rate.to_string());
        put("min_duration", c.synth.min_duration.to_string());
        put("max_duration", c.synth.max_duration.to_string());
        put(
            "split",
            match c.split {
                Split::Speakers => "speakers",
                Split::Utterances => "utterances",
            }
            .into(),
        );
        put("test_speakers", c.test_speakers.to_string());
        put("test_utts_per_pair", c.test_utts_per_pair.to_string());
        put("held_out_words", c.held_out_words.to_string());
        put("noise_clips", c.noise_clips.to_string());
        put("noise_seconds", c.noise_seconds.to_string());
        put("sgd_lr", o.sgd_lr.to_string());
        put("sgd_momentum", o.sgd_momentum.to_string());
        put("adam_lr", o.adam_lr.to_string());
        put("bn_momentum", o.bn_momentum.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("augment_prob", t.augment_prob.to_string());
        put("snrs", join(&t.snrs));
        put("max_input_seconds", t.max_input_seconds.to_string());
        put("eval_batch", t.eval_batch.to_string());
        s
    }
}
