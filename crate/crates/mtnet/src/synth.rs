//! Synthetic keyword/speaker corpus and noise bank.
//!
//! Each letter of the alphabet is a vowel-like sound with its own formant
//! triple; a word is a fixed letter sequence (its transcript). A speaker is a
//! voice: fundamental frequency, vocal-tract scale, spectral tilt, and an
//! extra resonance. Utterances render a word in a voice with per-utterance
//! jitter in pitch, timing, formants, and level.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::Result;

/// Noise categories of the augmentation bank.
pub const NOISE_TYPES: [&str; 3] = ["music", "babble", "others"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_words: usize,
    pub num_speakers: usize,
    pub utts_per_pair: usize,
    pub sample_rate: u32,
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_words: 4,
            num_speakers: 8,
            utts_per_pair: 5,
            sample_rate: crate::audio::SAMPLE_RATE,
            min_duration: 0.5,
            max_duration: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub waveform: Waveform,
    pub word: usize,
    pub speaker: usize,
    /// Lower-case letters `a..z`.
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formant_scale: f64,
    pub tilt_db_per_octave: f64,
    pub resonance_hz: f64,
    pub resonance_gain: f64,
    pub breath: f64,
}

impl Voice {
    pub fn random(rng: &mut impl Rng, f0: f64) -> Self {
        Self {
            f0,
            formant_scale: rng.random_range(0.92..1.1),
            tilt_db_per_octave: rng.random_range(-10.0..-4.0),
            resonance_hz: rng.random_range(2600.0..4200.0),
            resonance_gain: rng.random_range(0.3..1.0),
            breath: rng.random_range(0.0..0.08),
        }
    }
}

/// Formant frequencies (Hz) of letter `1..=26`: a distinct point on a
/// coarse (F1, F2) grid plus a varying F3.
pub fn letter_formants(letter: usize) -> [f64; 3] {
    let i = letter - 1;
    [
        300.0 + 150.0 * (i % 5) as f64,
        900.0 + 300.0 * (i / 5) as f64,
        2400.0 + 150.0 * ((i * 3) % 7) as f64,
    ]
}

/// Distinct letter sequences of length 3 or 4 with no immediate repeats.
pub fn word_templates(count: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut words: Vec<Vec<usize>> = Vec::with_capacity(count);
    while words.len() < count {
        let len = rng.random_range(3..=4);
        let mut w: Vec<usize> = Vec::with_capacity(len);
        while w.len() < len {
            let l = rng.random_range(1..=26);
            if w.last() != Some(&l) {
                w.push(l);
            }
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

pub fn transcript(letters: &[usize]) -> String {
    letters.iter().map(|&l| char::from(b'a' + (l - 1) as u8)).collect()
}

fn bump(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let d = (f - centre) / bandwidth;
    (-0.5 * d * d).exp()
}

/// Renders `letters` in `voice` into `n` samples with random placement and
/// per-utterance jitter.
pub fn render(letters: &[usize], voice: &Voice, n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f32> {
    let sr = f64::from(sample_rate);
    let voiced = ((n as f64) * rng.random_range(0.55..0.8)) as usize;
    let onset = rng.random_range(0..=n - voiced);
    let weights: Vec<f64> = letters.iter().map(|_| rng.random_range(0.8..1.2)).collect();
    let total: f64 = weights.iter().sum();
    let mut bounds = vec![0usize];
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        bounds.push(((acc / total) * voiced as f64) as usize);
    }
    let f0 = voice.f0 * rng.random_range(0.94..1.06);
    let scale = voice.formant_scale * rng.random_range(0.97..1.03);
    let drift = rng.random_range(-0.05..0.05);
    let vibrato_hz = rng.random_range(4.0..6.0);
    let gain = 10f64.powf(rng.random_range(-6.0..0.0) / 20.0);

    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    let block = 64;
    let mut amps: Vec<f64> = Vec::new();
    for i in 0..voiced {
        let t = i as f64 / sr;
        let pitch = f0 * (1.0 + 0.02 * (2.0 * PI * vibrato_hz * t).sin() + drift * i as f64 / voiced as f64);
        if i % block == 0 {
            let seg = bounds.windows(2).position(|b| i < b[1]).unwrap_or(letters.len() - 1);
            let (start, end) = (bounds[seg], bounds[seg + 1]);
            let cur = letter_formants(letters[seg]);
            // Glide from the previous letter over the first quarter.
            let formants = match seg {
                0 => cur,
                _ => {
                    let prev = letter_formants(letters[seg - 1]);
                    let a = ((i - start) as f64 / (0.25 * (end - start) as f64)).min(1.0);
                    [0, 1, 2].map(|k| prev[k] + a * (cur[k] - prev[k]))
                }
            };
            amps.clear();
            let mut h = 1;
            while (h as f64) * pitch < 7000.0 {
                let f = h as f64 * pitch;
                let tilt = 10f64.powf(voice.tilt_db_per_octave * (f / 100.0).log2().max(0.0) / 20.0);
                let env = formants
                    .iter()
                    .zip([1.0, 0.7, 0.35])
                    .map(|(&c, g)| g * bump(f, c * scale, 90.0 * scale))
                    .sum::<f64>()
                    + voice.resonance_gain * 0.3 * bump(f, voice.resonance_hz, 250.0)
                    + 0.03;
                amps.push(tilt * env);
                h += 1;
            }
        }
        phase += 2.0 * PI * pitch / sr;
        let mut v: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum();
        v += voice.breath * rng.random_range(-1.0..1.0);
        // Syllabic dips between letters plus attack/release ramps.
        let ramp = 0.01 * sr;
        let edge = (i as f64 / ramp).min((voiced - i) as f64 / ramp).min(1.0);
        let dip = bounds[1..bounds.len() - 1]
            .iter()
            .map(|&b| 1.0 - 0.4 * bump(i as f64, b as f64, 0.008 * sr))
            .product::<f64>();
        out[onset + i] = v * edge * dip;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let floor = 1e-3;
    out.iter()
        .map(|v| (0.6 * gain * v / peak + floor * rng.random_range(-1.0..1.0)) as f32)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub words: Vec<String>,
    pub voices: Vec<Voice>,
    /// Ordered by word, then speaker, then repetition.
    pub utterances: Vec<Utterance>,
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    if cfg.num_words < 2 || cfg.num_speakers < 2 || cfg.utts_per_pair == 0 {
        return Err(mtnet_core::Error::Config("corpus needs at least 2 words, 2 speakers, 1 utterance per pair".into()).into());
    }
    if !(cfg.min_duration > 0.03 && cfg.min_duration <= cfg.max_duration) {
        return Err(mtnet_core::Error::Config("invalid utterance duration range".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = word_templates(cfg.num_words, &mut rng);
    let ns = cfg.num_speakers;
    let voices: Vec<Voice> = (0..ns)
        .map(|i| {
            let f0 = 95.0 * 2.6f64.powf(i as f64 / (ns - 1) as f64) * rng.random_range(0.97..1.03);
            Voice::random(&mut rng, f0)
        })
        .collect();
    let mut utterances = Vec::with_capacity(cfg.num_words * ns * cfg.utts_per_pair);
    for (w, letters) in words.iter().enumerate() {
        for (s, voice) in voices.iter().enumerate() {
            for _ in 0..cfg.utts_per_pair {
                let secs = rng.random_range(cfg.min_duration..=cfg.max_duration);
                let n = (secs * f64::from(cfg.sample_rate)) as usize;
                let samples = render(letters, voice, n, cfg.sample_rate, &mut rng);
                utterances.push(Utterance {
                    waveform: Waveform::new(samples, cfg.sample_rate)?,
                    word: w,
                    speaker: s,
                    transcript: transcript(letters),
                });
            }
        }
    }
    Ok(Corpus {
        words: words.iter().map(|w| transcript(w)).collect(),
        voices,
        utterances,
    })
}

/// One noise clip of the given category.
pub fn noise_clip(kind: &str, n: usize, sample_rate: u32, rng: &mut impl Rng) -> Result<Waveform> {
    let sr = f64::from(sample_rate);
    let mut out = vec![0.0f64; n];
    match kind {
        "music" => {
            let mut start = 0;
            while start < n {
                let len = (rng.random_range(0.15..0.4) * sr) as usize;
                for _ in 0..rng.random_range(1..=3) {
                    let f = 110.0 * 2f64.powf(rng.random_range(0..36) as f64 / 12.0);
                    for i in start..(start + len).min(n) {
                        let t = (i - start) as f64 / sr;
                        let decay = (-t / 0.3).exp();
                        let v: f64 = (1..=6).map(|h| (2.0 * PI * f * h as f64 * t).sin() / h as f64).sum();
                        out[i] += decay * v;
                    }
                }
                start += len;
            }
        }
        "babble" => {
            for _ in 0..4 {
                let letters: Vec<usize> = (0..rng.random_range(4..=6)).map(|_| rng.random_range(1..=26)).collect();
                let f0 = rng.random_range(90.0..260.0);
                let voice = Voice::random(rng, f0);
                let talk = render(&letters, &voice, n, sample_rate, rng);
                out.iter_mut().zip(&talk).for_each(|(o, &v)| *o += f64::from(v));
            }
        }
        "others" => {
            let a = rng.random_range(-0.9..0.95);
            let rate = rng.random_range(0.5..4.0);
            let mut prev = 0.0;
            for (i, o) in out.iter_mut().enumerate() {
                prev = a * prev + (1.0 - f64::abs(a)) * rng.random_range(-1.0..1.0);
                *o = prev * (1.0 + 0.5 * (2.0 * PI * rate * i as f64 / sr).sin());
            }
        }
        other => return Err(crate::error::Error::UnknownCondition(other.into())),
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    Waveform::new(out.iter().map(|v| (0.5 * v / peak) as f32).collect(), sample_rate)
}

/// `count` clips of every noise type, ordered by type.
pub fn noise_bank(count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<Vec<(&'static str, Waveform)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * f64::from(sample_rate)) as usize;
    let mut bank = Vec::with_capacity(count * NOISE_TYPES.len());
    for kind in NOISE_TYPES {
        for _ in 0..count {
            bank.push((kind, noise_clip(kind, n, sample_rate, &mut rng)?));
        }
    }
    Ok(bank)
}

/// Picks `k` distinct indices out of `0..n`, sorted.
pub fn choose_sorted(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut picked = idx[..k.min(n)].to_vec();
    picked.sort_unstable();
    picked
}
