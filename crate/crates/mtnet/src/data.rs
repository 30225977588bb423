//! Loading utterances and noise clips, and materializing the synthetic corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mtnet_core::Target;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{load_wav, save_wav, Waveform};
use crate::config::{Config, Split};
use crate::error::{io, Error, Result};
use crate::manifest::{self, encode_transcript, NoiseRecord, Record};
use crate::synth::{noise_bank, synth_corpus, choose_sorted};

/// Independent random streams derived from one run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const CORPUS: u64 = 5;
    pub const NOISE_TRAIN: u64 = 6;
    pub const NOISE_TEST: u64 = 7;
    pub const EVAL: u64 = 8;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub waveform: Waveform,
    pub target: Target,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn load(path: &Path, max_seconds: f64) -> Result<Self> {
        let records = manifest::read_utterances(path)?;
        let mut items = Vec::with_capacity(records.len());
        for r in &records {
            let waveform = load_wav(&manifest::resolve(path, &r.audio_path))?;
            waveform.check_duration(max_seconds)?;
            items.push(Item {
                waveform,
                target: Target {
                    word: r.word_id,
                    speaker: r.speaker_id,
                    transcript: encode_transcript(&r.transcript).expect("validated transcript"),
                },
                held_out: r.held_out,
            });
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.items.iter().map(|i| i.target.word + 1).max().unwrap_or(0)
    }

    pub fn num_speakers(&self) -> usize {
        self.items.iter().map(|i| i.target.speaker + 1).max().unwrap_or(0)
    }

    pub fn sample_rate(&self) -> Option<u32> {
        self.items.first().map(|i| i.waveform.sample_rate)
    }
}

/// Noise clips grouped by type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseBank {
    pub clips: BTreeMap<String, Vec<Waveform>>,
}

impl NoiseBank {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<NoiseRecord> = manifest::read(path)?;
        let mut bank = Self::default();
        for r in records {
            let w = load_wav(&manifest::resolve(path, &r.audio_path))?;
            bank.clips.entry(r.noise_type).or_default().push(w);
        }
        Ok(bank)
    }

    pub fn from_clips<'a>(clips: impl IntoIterator<Item = (&'a str, Waveform)>) -> Self {
        let mut bank = Self::default();
        for (kind, w) in clips {
            bank.clips.entry(kind.to_string()).or_default().push(w);
        }
        bank
    }

    pub fn types(&self) -> Vec<&str> {
        self.clips.keys().map(String::as_str).collect()
    }

    /// A random clip of `kind` and a random start offset within it.
    pub fn pick(&self, kind: &str, rng: &mut impl Rng) -> Result<(&Waveform, usize)> {
        let clips = self
            .clips
            .get(kind)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::UnknownCondition(kind.into()))?;
        let clip = &clips[rng.random_range(0..clips.len())];
        Ok((clip, rng.random_range(0..clip.len().max(1))))
    }
}

/// Paths written by [`materialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub noise_train: PathBuf,
    pub noise_test: PathBuf,
}

/// Writes the synthetic corpus as WAV files plus train/test manifests and
/// separate train/test noise banks.
pub fn materialize(cfg: &Config, out: &Path) -> Result<SynthPaths> {
    let c = &cfg.corpus;
    let corpus = synth_corpus(&c.synth, stream(cfg.seed, streams::CORPUS).random())?;
    let mut rng = stream(cfg.seed, streams::SPLIT);
    let held_out = choose_sorted(c.synth.num_words, c.held_out_words, &mut rng);
    let test_speakers = match c.split {
        Split::Speakers => choose_sorted(c.synth.num_speakers, c.test_speakers, &mut rng),
        Split::Utterances => Vec::new(),
    };
    for dir in ["wav", "noise"] {
        fs::create_dir_all(out.join(dir)).map_err(io(out.join(dir)))?;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let per_pair = c.synth.utts_per_pair;
    for (i, u) in corpus.utterances.iter().enumerate() {
        let rep = i % per_pair;
        let rel = format!("wav/w{}_s{}_{}.wav", u.word, u.speaker, rep);
        save_wav(&out.join(&rel), &u.waveform)?;
        let is_held = held_out.contains(&u.word);
        let record = Record {
            audio_path: rel,
            word_id: u.word,
            speaker_id: u.speaker,
            transcript: u.transcript.clone(),
            noise_type: "clean".into(),
            snr_db: None,
            held_out: is_held,
        };
        let to_test = match c.split {
            Split::Speakers => test_speakers.contains(&u.speaker),
            Split::Utterances => rep >= per_pair - c.test_utts_per_pair,
        };
        match (to_test, is_held) {
            (true, _) => test.push(record),
            (false, false) => train.push(record),
            (false, true) => {}
        }
    }
    let paths = SynthPaths {
        train: out.join("train.jsonl"),
        test: out.join("test.jsonl"),
        noise_train: out.join("noise_train.jsonl"),
        noise_test: out.join("noise_test.jsonl"),
    };
    manifest::write(&paths.train, &train)?;
    manifest::write(&paths.test, &test)?;
    for (split, id, path) in [
        ("train", streams::NOISE_TRAIN, &paths.noise_train),
        ("test", streams::NOISE_TEST, &paths.noise_test),
    ] {
        let bank = noise_bank(c.noise_clips, c.noise_seconds, c.synth.sample_rate, stream(cfg.seed, id).random())?;
        let mut records = Vec::new();
        for (k, (kind, w)) in bank.iter().enumerate() {
            let rel = format!("noise/{split}_{kind}_{}.wav", k % c.noise_clips);
            save_wav(&out.join(&rel), w)?;
            records.push(NoiseRecord {
                audio_path: rel,
                noise_type: kind.to_string(),
            });
        }
        manifest::write(path, &records)?;
    }
    Ok(paths)
}
