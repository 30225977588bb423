//! Waveforms, WAV IO, log-magnitude spectrograms, and SNR mixing.

use std::path::Path;
use std::sync::Arc;

use mtnet_core::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_MS: f64 = 25.0;
pub const SHIFT_MS: f64 = 10.0;
/// Floor inside `log(|X| + eps)`.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFiniteSamples);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn check_duration(&self, limit_s: f64) -> Result<()> {
        match self.duration() <= limit_s + 1e-9 {
            true => Ok(()),
            false => Err(Error::TooLong {
                seconds: self.duration(),
                limit: limit_s,
            }),
        }
    }
}

/// Mean-square power.
pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64
}

/// Reads 16-bit PCM mono, scaling samples by `1/32768`.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.into(),
        source,
    })?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedWav {
        path: path.into(),
        reason,
    };
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!("{:?} {}-bit, expected 16-bit PCM", spec.sample_format, spec.bits_per_sample)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Wav {
            path: path.into(),
            source,
        })?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clipped to the representable range.
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.into(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Reusable STFT setup for one `(sample_rate, F)` pair.
///
/// The DFT size is `n_fft = 2(kF - 1)` with the smallest `k` that makes it
/// cover a whole frame; the one-sided spectrum then has `kF` bins, and each
/// output bin averages the magnitudes of `k` adjacent ones. With `k = 1` this
/// is the plain `2(F - 1)` point spectrum. Frames are zero-padded to `n_fft`.
pub struct SpectrogramPlan {
    pub bins: usize,
    /// DFT bins averaged into each output bin.
    pub band: usize,
    pub n_fft: usize,
    pub frame_len: usize,
    pub shift: usize,
    pub sample_rate: u32,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectrogramPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrogramPlan")
            .field("bins", &self.bins)
            .field("n_fft", &self.n_fft)
            .field("frame_len", &self.frame_len)
            .field("shift", &self.shift)
            .finish()
    }
}

impl SpectrogramPlan {
    pub fn new(sample_rate: u32, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(mtnet_core::Error::Config(format!("need at least 2 frequency bins, got {bins}")).into());
        }
        let ms = |v: f64| (v * f64::from(sample_rate) / 1000.0).round() as usize;
        let frame_len = ms(FRAME_MS);
        let band = (frame_len / 2 + 1).div_ceil(bins).max(1);
        let n_fft = 2 * (band * bins - 1);
        // Periodic Hann.
        let window = (0..frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos())
            .collect();
        Ok(Self {
            bins,
            band,
            n_fft,
            frame_len,
            shift: ms(SHIFT_MS),
            sample_rate,
            window,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    /// `1 + floor((n - frame_len) / shift)`, or `None` below one frame.
    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.frame_len).then(|| 1 + (num_samples - self.frame_len) / self.shift)
    }

    /// Centre frequency of output bin `k` in Hz.
    pub fn bin_hz(&self, k: usize) -> f64 {
        ((k * self.band) as f64 + (self.band - 1) as f64 / 2.0) * f64::from(self.sample_rate) / self.n_fft as f64
    }

    /// `[T, F]` matrix of `log(|X| + eps)`.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor<f32>> {
        let t = self.num_frames(w.len()).ok_or(Error::TooShort {
            samples: w.len(),
            frame_len: self.frame_len,
        })?;
        let mut out = Vec::with_capacity(t * self.bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for frame in 0..t {
            buf.fill(Complex::new(0.0, 0.0));
            let start = frame * self.shift;
            for (i, (&s, &h)) in w.samples[start..start + self.frame_len].iter().zip(&self.window).enumerate() {
                buf[i].re = f64::from(s) * h;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let scale = 1.0 / self.band as f64;
            out.extend(
                buf[..self.bins * self.band]
                    .chunks(self.band)
                    .map(|c| (c.iter().map(|v| v.norm()).sum::<f64>() * scale + LOG_EPS).ln() as f32),
            );
        }
        Ok(Tensor::new(vec![t, self.bins], out)?)
    }
}

/// Result of mixing: the clipped mixture and the scaled noise actually added.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixed: Waveform,
    pub noise: Vec<f32>,
    pub scale: f64,
}

/// Adds `noise` (tiled from `offset`, cropped to the speech length) scaled so
/// that `10 log10(P_speech / P_noise) = snr_db`. An infinite SNR returns the
/// speech unchanged.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<Mixture> {
    if snr_db == f64::INFINITY {
        return Ok(Mixture {
            mixed: speech.clone(),
            noise: vec![0.0; speech.len()],
            scale: 0.0,
        });
    }
    if !snr_db.is_finite() {
        return Err(mtnet_core::Error::NonFinite("snr").into());
    }
    if noise.is_empty() {
        return Err(Error::ZeroPower("noise"));
    }
    let segment: Vec<f32> = (0..speech.len()).map(|i| noise.samples[(offset + i) % noise.len()]).collect();
    let (ps, pn) = (power(&speech.samples), power(&segment));
    if ps == 0.0 {
        return Err(Error::ZeroPower("speech"));
    }
    if pn == 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let scale = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noise: Vec<f32> = segment.iter().map(|&n| (f64::from(n) * scale) as f32).collect();
    let mixed = speech
        .samples
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| (s + n).clamp(-1.0, 1.0))
        .collect();
    Ok(Mixture {
        mixed: Waveform::new(mixed, speech.sample_rate)?,
        noise,
        scale,
    })
}

/// Measured `10 log10(P_speech / P_noise)`.
pub fn measured_snr(speech: &[f32], noise: &[f32]) -> f64 {
    10.0 * (power(speech) / power(noise)).log10()
}
