use std::collections::BTreeSet;
use std::fs;

use mtnet::audio::SpectrogramPlan;
use mtnet::checkpoint::{Checkpoint, MAGIC};
use mtnet::config::{Config, Split};
use mtnet::data::{materialize, stream, streams, Dataset, NoiseBank};
use mtnet::manifest::{self, encode_transcript, Record};
use mtnet::synth::{letter_formants, noise_bank, synth_corpus, word_templates, SynthConfig, NOISE_TYPES};
use mtnet::Error;
use mtnet_core::{MultiTaskModel, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn corpus_is_deterministic_and_complete() {
    let cfg = SynthConfig::default();
    let a = synth_corpus(&cfg, 11).unwrap();
    let b = synth_corpus(&cfg, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.utterances.len(), 4 * 8 * 5);
    assert_ne!(a, synth_corpus(&cfg, 12).unwrap());
    for u in &a.utterances {
        let secs = u.waveform.duration();
        assert!((cfg.min_duration - 1e-3..=cfg.max_duration + 1e-3).contains(&secs));
        assert!(u.waveform.samples.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(u.transcript, a.words[u.word]);
        assert!(u.transcript.bytes().all(|c| c.is_ascii_lowercase()));
    }
}

#[test]
fn word_templates_are_distinct_without_repeats() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let words = word_templates(20, &mut r);
    let unique: BTreeSet<_> = words.iter().collect();
    assert_eq!(unique.len(), 20);
    for w in &words {
        assert!((3..=4).contains(&w.len()));
        assert!(w.windows(2).all(|p| p[0] != p[1]));
    }
}

#[test]
fn letters_have_distinct_formants() {
    let all: BTreeSet<[u64; 3]> = (1..=26).map(|l| letter_formants(l).map(|f| f as u64)).collect();
    assert_eq!(all.len(), 26);
}

fn mean_spectrum(plan: &SpectrogramPlan, w: &mtnet::audio::Waveform) -> Vec<f64> {
    let s = plan.compute(w).unwrap();
    let f = plan.bins;
    let t = s.shape()[0] as f64;
    let mut m = vec![0.0; f];
    for row in s.data().chunks(f) {
        for (a, &v) in m.iter_mut().zip(row) {
            *a += f64::from(v) / t;
        }
    }
    m
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma).powi(2);
        bb += (y - mb).powi(2);
    }
    ab / (aa * bb).sqrt()
}

/// The spectrogram resampled to `n` frames by nearest index, flattened.
fn time_normalized(plan: &SpectrogramPlan, w: &mtnet::audio::Waveform, n: usize) -> Vec<f64> {
    let s = plan.compute(w).unwrap();
    let (t, f) = (s.shape()[0], plan.bins);
    (0..n)
        .flat_map(|k| {
            let row = k * t / n;
            s.data()[row * f..(row + 1) * f].iter().map(|&v| f64::from(v)).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn same_word_spectrograms_correlate_more_than_different_words() {
    let corpus = synth_corpus(&SynthConfig::default(), 5).unwrap();
    let plan = SpectrogramPlan::new(16_000, 64).unwrap();
    let specs: Vec<_> = corpus.utterances.iter().map(|u| time_normalized(&plan, &u.waveform, 24)).collect();
    let (mut same, mut diff) = ((0.0, 0), (0.0, 0));
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            let c = corr(&specs[i], &specs[j]);
            let slot = if corpus.utterances[i].word == corpus.utterances[j].word { &mut same } else { &mut diff };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    assert!(same.0 / same.1 as f64 > diff.0 / diff.1 as f64);
}

#[test]
fn same_speaker_spectra_correlate_more_than_different_speakers() {
    let corpus = synth_corpus(&SynthConfig::default(), 5).unwrap();
    let plan = SpectrogramPlan::new(16_000, 64).unwrap();
    let spectra: Vec<_> = corpus.utterances.iter().map(|u| mean_spectrum(&plan, &u.waveform)).collect();
    let (mut same, mut diff) = ((0.0, 0), (0.0, 0));
    for i in 0..spectra.len() {
        for j in i + 1..spectra.len() {
            let c = corr(&spectra[i], &spectra[j]);
            let slot = if corpus.utterances[i].speaker == corpus.utterances[j].speaker { &mut same } else { &mut diff };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    assert!(same.0 / same.1 as f64 > diff.0 / diff.1 as f64);
}

#[test]
fn noise_bank_covers_every_type() {
    let bank = noise_bank(2, 0.5, 16_000, 9).unwrap();
    assert_eq!(bank.len(), 2 * NOISE_TYPES.len());
    for (kind, w) in &bank {
        assert!(NOISE_TYPES.contains(kind));
        assert_eq!(w.len(), 8000);
        assert!(mtnet::audio::power(&w.samples) > 0.0);
    }
    assert_eq!(bank, noise_bank(2, 0.5, 16_000, 9).unwrap());
}

#[test]
fn transcripts_encode_to_letter_indices() {
    assert_eq!(encode_transcript("abz"), Some(vec![1, 2, 26]));
    assert_eq!(encode_transcript("a b"), None);
    assert_eq!(encode_transcript("A"), None);
}

fn small_config(text: &str) -> Config {
    Config::parse(&format!("utts_per_pair = 3\nnoise_clips = 1\nnoise_seconds = 0.5\n{text}")).unwrap()
}

#[test]
fn manifests_are_byte_identical_for_one_seed() {
    let cfg = small_config("seed = 4");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = materialize(&cfg, a.path()).unwrap();
    let pb = materialize(&cfg, b.path()).unwrap();
    for (x, y) in [(pa.train, pb.train), (pa.test, pb.test), (pa.noise_train, pb.noise_train)] {
        assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
    }
    for entry in fs::read_dir(a.path().join("wav")).unwrap() {
        let p = entry.unwrap().path();
        let q = b.path().join("wav").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }
}

#[test]
fn utterance_split_holds_out_the_last_repetitions() {
    let cfg = small_config("split = utterances\ntest_utts_per_pair = 1");
    let dir = tempfile::tempdir().unwrap();
    let p = materialize(&cfg, dir.path()).unwrap();
    let train: Vec<Record> = manifest::read(&p.train).unwrap();
    let test: Vec<Record> = manifest::read(&p.test).unwrap();
    assert_eq!(train.len(), 4 * 8 * 2);
    assert_eq!(test.len(), 4 * 8);
    assert!(test.iter().all(|r| r.audio_path.ends_with("_2.wav")));
    let train_paths: BTreeSet<_> = train.iter().map(|r| &r.audio_path).collect();
    assert!(test.iter().all(|r| !train_paths.contains(&r.audio_path)));
}

#[test]
fn speaker_split_is_disjoint_and_held_out_words_never_train() {
    let cfg = small_config("split = speakers\ntest_speakers = 2\nheld_out_words = 1");
    let dir = tempfile::tempdir().unwrap();
    let p = materialize(&cfg, dir.path()).unwrap();
    let train: Vec<Record> = manifest::read(&p.train).unwrap();
    let test: Vec<Record> = manifest::read(&p.test).unwrap();
    let train_spk: BTreeSet<_> = train.iter().map(|r| r.speaker_id).collect();
    let test_spk: BTreeSet<_> = test.iter().map(|r| r.speaker_id).collect();
    assert_eq!(test_spk.len(), 2);
    assert!(train_spk.is_disjoint(&test_spk));
    let held: BTreeSet<_> = test.iter().filter(|r| r.held_out).map(|r| r.word_id).collect();
    assert_eq!(held.len(), 1);
    assert!(train.iter().all(|r| !held.contains(&r.word_id) && !r.held_out));
    assert!(test.iter().all(|r| r.held_out == held.contains(&r.word_id)));
}

#[test]
fn datasets_and_noise_banks_load_from_manifests() {
    let cfg = small_config("");
    let dir = tempfile::tempdir().unwrap();
    let p = materialize(&cfg, dir.path()).unwrap();
    let data = Dataset::load(&p.train, 1.0).unwrap();
    assert_eq!(data.len(), 64);
    assert_eq!((data.num_words(), data.num_speakers()), (4, 8));
    assert_eq!(data.sample_rate(), Some(16_000));
    let bank = NoiseBank::load(&p.noise_train).unwrap();
    assert_eq!(bank.types(), vec!["babble", "music", "others"]);
    assert!(matches!(Dataset::load(&p.train, 0.3), Err(Error::TooLong { .. })));
}

#[test]
fn malformed_manifest_lines_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    fs::write(&path, "{\"audio_path\":\"a.wav\",\"word_id\":0,\"speaker_id\":0,\"transcript\":\"ab\",\"noise_type\":\"clean\",\"snr_db\":null}\nnot json\n").unwrap();
    match manifest::read::<Record>(&path) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "{\"audio_path\":\"a.wav\",\"word_id\":0,\"speaker_id\":0,\"transcript\":\"A!\",\"noise_type\":\"clean\",\"snr_db\":null}\n").unwrap();
    assert!(matches!(manifest::read_utterances(&path), Err(Error::Manifest { line: 1, .. })));
}

#[test]
fn streams_are_independent_and_reproducible() {
    use rand::Rng;
    let a: u64 = stream(1, streams::INIT).random();
    let b: u64 = stream(1, streams::SHUFFLE).random();
    assert_ne!(a, b);
    assert_eq!(a, stream(1, streams::INIT).random::<u64>());
}

#[test]
fn config_text_round_trips() {
    for text in [
        "",
        "preset = paper",
        "variant = no-ctc\nseed = 9\nsnrs = 3,1.5\nspeaker_channels = 2,4,8,16,32,64",
        "variant = baseline-sv\nsplit = speakers\nheld_out_words = 2\nnormalize_vad = on",
    ] {
        let cfg = Config::parse(text).unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg, "{text}");
    }
}

#[test]
fn every_variant_is_selectable_by_name_and_by_switches() {
    for v in Variant::ALL {
        let cfg = Config::parse(&format!("variant = {}", v.name())).unwrap();
        assert_eq!(cfg.variant(), v);
        let ab = v.ablation();
        let onoff = |b: bool| if b { "on" } else { "off" };
        let text = format!(
            "enhancement = {}\nconditioning = {}\nctc = {}\npooling = {}\ntasks = {}",
            onoff(ab.enhancement),
            onoff(ab.conditioning),
            onoff(ab.ctc),
            match ab.pooling {
                mtnet_core::model::PoolingKind::GlobalQuery => "global_query",
                mtnet_core::model::PoolingKind::SelfAttention => "self_attention",
            },
            match ab.tasks {
                mtnet_core::model::Tasks::Both => "both",
                mtnet_core::model::Tasks::Kws => "kws",
                mtnet_core::model::Tasks::Sv => "sv",
            }
        );
        assert_eq!(Config::parse(&text).unwrap().variant(), v);
    }
}

#[test]
fn config_errors_carry_line_numbers() {
    let cases = [
        ("seed = 1\nseed = 2", 2),
        ("# c\nbogus = 1", 2),
        ("epochs = many", 1),
        ("\n\nvariant = nope", 3),
        ("no equals sign", 1),
        ("ctc = off", 0),
        ("held_out_words = 4", 0),
        ("split = speakers\ntest_speakers = 8", 0),
    ];
    for (text, want) in cases {
        match Config::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text}"),
            Err(Error::Core(_)) => assert_eq!(want, 0, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(Config::parse("preset = huge").is_err());
}

#[test]
fn defaults_match_the_desk_preset() {
    let cfg = Config::default();
    assert_eq!(cfg.model.freq_bins, 64);
    assert_eq!(cfg.train.batch_size, 16);
    assert_eq!(cfg.train.epochs, 100);
    assert_eq!(cfg.corpus.split, Split::Utterances);
    assert_eq!(cfg.variant(), Variant::Proposed);
    let paper = Config::preset("paper").unwrap();
    assert_eq!((paper.model.freq_bins, paper.train.batch_size), (256, 128));
}

fn trained_like_checkpoint() -> Checkpoint {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, store) = MultiTaskModel::build::<f32, _>(cfg.model.clone(), &mut rng).unwrap();
    Checkpoint::from_store(&cfg, &store)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let ckpt = trained_like_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
    let (_, store) = back.restore().unwrap();
    for ((name, t), (_, p)) in ckpt.records.iter().zip(store.iter()) {
        assert_eq!(name, &p.name);
        let bits = |t: &mtnet_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(&p.value));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = trained_like_checkpoint().to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    let mut trailing = bytes.clone();
    trailing.push(0);
    for bad in [wrong_version, wrong_magic, bytes[..bytes.len() - 3].to_vec(), trailing] {
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}

#[test]
fn checkpoint_for_another_model_fails_to_restore() {
    let mut ckpt = trained_like_checkpoint();
    ckpt.records.pop();
    assert!(ckpt.restore().is_err());
}
