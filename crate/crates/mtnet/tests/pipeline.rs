use std::fs;
use std::path::Path;
use std::process::Command;

use mtnet::commands::{self, cmd_embed, cmd_eval, cmd_score, cmd_synth, cmd_train, read_array, EmbedKind, EvalArgs};
use mtnet::data::SynthPaths;
use mtnet::eval::{run_trials, Condition, TrialSet};
use mtnet::train::{LossLog, COMPONENTS};
use mtnet::{Checkpoint, Config};
use mtnet_core::MultiTaskModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two words, three speakers, short clips: 12 utterances, 6 for training.
const TINY: &str = "num_words = 2\nnum_speakers = 3\nutts_per_pair = 2\nmin_duration = 0.3\nmax_duration = 0.4\n\
                    noise_clips = 1\nnoise_seconds = 0.5\nepochs = 2\nbatch_size = 4\nseed = 5\n";

/// The tiny config with `extra` lines replacing same-key defaults.
fn tiny(extra: &str) -> Config {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: String = TINY.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    Config::parse(&format!("{base}{extra}")).unwrap()
}

fn corpus(dir: &Path) -> SynthPaths {
    cmd_synth(&tiny(""), dir).unwrap()
}

fn eval_args<'a>(ckpt: &'a Path, p: &'a SynthPaths, task: &'a str, noise_type: &'a str, snr: Option<f64>) -> EvalArgs<'a> {
    EvalArgs {
        checkpoint: ckpt,
        manifest: &p.test,
        noise: Some(&p.noise_test),
        task,
        noise_type,
        snr_db: snr,
        seed: 3,
        config: None,
    }
}

#[test]
fn train_writes_a_loadable_checkpoint_and_a_complete_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let out = dir.path().join("run");
    let mut seen = Vec::new();
    let t = cmd_train(&tiny(""), &p.train, Some(&p.noise_train), &out, |e, _| seen.push(e)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(t.checkpoint, out.join(commands::CHECKPOINT_FILE));
    let (model, _) = Checkpoint::load(&t.checkpoint).unwrap().restore().unwrap();
    assert_eq!((model.config.num_words, model.config.num_speakers), (2, 3));
    let text = fs::read_to_string(&t.loss_log).unwrap();
    assert_eq!(text, t.log.to_text());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 * COMPONENTS.len());
    for (i, line) in lines.iter().enumerate() {
        let want = format!("epoch={} component={} loss=", i / 3 + 1, COMPONENTS[i % 3]);
        assert!(line.starts_with(&want), "{line}");
        let v: f64 = line[want.len()..].parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}

#[test]
fn loss_log_marks_absent_terms() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let t = cmd_train(&tiny("variant = baseline-sv\nepochs = 1"), &p.train, None, &dir.path().join("r"), |_, _| {}).unwrap();
    let text = t.log.to_text();
    assert!(text.contains("component=word loss=none"));
    assert!(text.contains("component=ctc loss=none"));
    assert!(!text.contains("component=speaker loss=none"));
    assert_eq!(LossLog::default().to_text(), "");
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let cfg = tiny("epochs = 1");
    let a = cmd_train(&cfg, &p.train, Some(&p.noise_train), &dir.path().join("a"), |_, _| {}).unwrap();
    let b = cmd_train(&cfg, &p.train, Some(&p.noise_train), &dir.path().join("b"), |_, _| {}).unwrap();
    assert_eq!(fs::read(&a.loss_log).unwrap(), fs::read(&b.loss_log).unwrap());
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    let c = cmd_train(&tiny("epochs = 1\nseed = 6"), &p.train, Some(&p.noise_train), &dir.path().join("c"), |_, _| {}).unwrap();
    assert_ne!(fs::read(&a.loss_log).unwrap(), fs::read(&c.loss_log).unwrap());
}

#[test]
fn eval_reports_one_row_per_task_and_condition() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let t = cmd_train(&tiny("epochs = 1"), &p.train, None, &dir.path().join("r"), |_, _| {}).unwrap();
    let rows = cmd_eval(&eval_args(&t.checkpoint, &p, "both", "clean", None)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].task.as_str(), rows[1].task.as_str()), ("kws", "sv"));
    let n = 2 * 3;
    for r in &rows {
        assert_eq!(r.trials, n * (n - 1) / 2);
        assert!((0.0..=1.0).contains(&r.eer));
        let line = r.to_string();
        assert!(line.starts_with(&format!("task={} noise_type=clean snr_db= eer=", r.task)), "{line}");
    }
    let rows = cmd_eval(&eval_args(&t.checkpoint, &p, "sv", "all", None)).unwrap();
    assert_eq!(rows.len(), 1 + 3 * 4);
    assert!(rows[1..].iter().all(|r| r.snr_db.is_some() && r.noise_type != "clean"));
    let rows = cmd_eval(&eval_args(&t.checkpoint, &p, "kws", "music", Some(5.0))).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].to_string().contains("noise_type=music snr_db=5 "));
    let again = cmd_eval(&eval_args(&t.checkpoint, &p, "kws", "music", Some(5.0))).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn eval_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let t = cmd_train(&tiny("variant = baseline-sv\nepochs = 1"), &p.train, None, &dir.path().join("r"), |_, _| {}).unwrap();
    // `both` narrows to the tasks the variant supports.
    assert_eq!(cmd_eval(&eval_args(&t.checkpoint, &p, "both", "clean", None)).unwrap().len(), 1);
    assert!(cmd_eval(&eval_args(&t.checkpoint, &p, "kws", "clean", None)).is_err());
    assert!(cmd_eval(&eval_args(&t.checkpoint, &p, "sv", "traffic", None)).is_err());
    assert!(cmd_eval(&eval_args(&t.checkpoint, &p, "sv", "clean", Some(5.0))).is_err());
    assert!(cmd_eval(&eval_args(&t.checkpoint, &p, "all-of-it", "clean", None)).is_err());
}

#[test]
fn condition_expansion() {
    let types = ["music", "babble"];
    let snrs = [20.0, 0.0];
    assert_eq!(Condition::expand("clean", None, &types, &snrs).unwrap(), vec![Condition::clean()]);
    assert_eq!(Condition::expand("all", None, &types, &snrs).unwrap().len(), 5);
    assert_eq!(Condition::expand("music", None, &types, &snrs).unwrap().len(), 2);
    assert!(Condition::expand("music", Some(f64::INFINITY), &types, &snrs).is_err());
}

#[test]
fn trials_cover_every_unordered_pair() {
    let labels = [0, 0, 1, 2, 1];
    let t = TrialSet::all_pairs(&labels);
    assert_eq!(t.pairs.len(), 10);
    assert_eq!(t.pairs.iter().filter(|p| p.2).count(), 2);
    assert!(t.has_both_kinds());
    assert!(!TrialSet::all_pairs(&[1, 1, 1]).has_both_kinds());
}

#[test]
fn random_embeddings_score_near_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
    let emb: Vec<Vec<f32>> = labels.iter().map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let eer = run_trials(&emb, &TrialSet::all_pairs(&labels)).unwrap();
    assert!((0.45..=0.55).contains(&eer), "{eer}");
}

#[test]
fn embed_dumps_each_array_with_its_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let t = cmd_train(&tiny("epochs = 1"), &p.train, None, &dir.path().join("r"), |_, _| {}).unwrap();
    let wav = dir.path().join("wav/w0_s0_0.wav");
    let frames = 1 + (mtnet::audio::load_wav(&wav).unwrap().len() - 400) / 160;
    let out = dir.path().join("e.txt");
    let cfg = tiny("");
    for (kind, rows, cols) in [
        (EmbedKind::Word, 1, 2 * cfg.model.lstm_hidden),
        (EmbedKind::Speaker, 1, *cfg.model.speaker_channels.last().unwrap()),
        (EmbedKind::Vad, 1, frames),
        (EmbedKind::Enhanced, frames, cfg.model.freq_bins),
    ] {
        let got = cmd_embed(&t.checkpoint, &wav, kind, &out).unwrap();
        assert_eq!(got.len(), rows, "{kind:?}");
        assert!(got.iter().all(|r| r.len() == cols), "{kind:?}");
        let back = read_array(&out).unwrap();
        for (a, b) in got.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }
    let e = cmd_embed(&t.checkpoint, &wav, EmbedKind::Word, &out).unwrap();
    let norm: f32 = e[0].iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 6.0).abs() < 1e-4);
    assert!(EmbedKind::parse("spectrum").is_err());
}

#[test]
fn paper_preset_embeddings_have_paper_sizes() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let cfg = Config::parse("preset = paper\nnum_words = 2\nnum_speakers = 3").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, store) = MultiTaskModel::build::<f32, _>(cfg.model.clone(), &mut rng).unwrap();
    let ckpt = dir.path().join("paper.ckpt");
    Checkpoint::from_store(&cfg, &store).save(&ckpt).unwrap();
    let wav = dir.path().join("wav/w1_s2_1.wav");
    let out = dir.path().join("e.txt");
    assert_eq!(cmd_embed(&ckpt, &wav, EmbedKind::Word, &out).unwrap()[0].len(), 512);
    assert_eq!(cmd_embed(&ckpt, &wav, EmbedKind::Speaker, &out).unwrap()[0].len(), 256);
}

#[test]
fn identical_audio_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = corpus(dir.path());
    let t = cmd_train(&tiny("epochs = 1"), &p.train, None, &dir.path().join("r"), |_, _| {}).unwrap();
    let a = dir.path().join("wav/w0_s1_0.wav");
    let b = dir.path().join("wav/w1_s2_0.wav");
    for task in ["kws", "sv"] {
        assert!((cmd_score(&t.checkpoint, &a, &a, task).unwrap() - 1.0).abs() < 1e-5);
        let s = cmd_score(&t.checkpoint, &a, &b, task).unwrap();
        assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&s));
    }
    assert!(cmd_score(&t.checkpoint, &a, &b, "both").is_err());
}

fn mtnet(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mtnet")).args(args).output().unwrap()
}

#[test]
fn cli_runs_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    fs::write(d("tiny.cfg"), tiny("epochs = 1").to_text()).unwrap();
    let cfg = d("tiny.cfg");
    let ok = |o: std::process::Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(mtnet(&["synth", "--config", &cfg, "--out", &d("corpus")]));
    ok(mtnet(&[
        "train", "--config", &cfg, "--out", &d("run"), "--manifest", &d("corpus/train.jsonl"), "--noise",
        &d("corpus/noise_train.jsonl"),
    ]));
    assert!(fs::read_to_string(d("run/loss_log.txt")).unwrap().lines().count() == 3);
    let report = ok(mtnet(&[
        "eval", "--ckpt", &d("run/model.ckpt"), "--manifest", &d("corpus/test.jsonl"), "--out", &d("report.txt"),
    ]));
    assert_eq!(report, fs::read_to_string(d("report.txt")).unwrap());
    assert_eq!(report.lines().count(), 2);
    ok(mtnet(&[
        "embed", "--ckpt", &d("run/model.ckpt"), "--wav", &d("corpus/wav/w0_s0_0.wav"), "--which", "speaker", "--out",
        &d("e.txt"),
    ]));
    assert_eq!(read_array(Path::new(&d("e.txt"))).unwrap()[0].len(), 64);
    let score = ok(mtnet(&[
        "score", "--ckpt", &d("run/model.ckpt"), "--enroll", &d("corpus/wav/w0_s0_0.wav"), "--test",
        &d("corpus/wav/w0_s0_0.wav"), "--out", &d("s.txt"),
    ]));
    assert!((score.trim().parse::<f64>().unwrap() - 1.0).abs() < 1e-5);
}

#[test]
fn cli_failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").to_str().unwrap().to_string();
    for args in [
        vec!["train", "--out", &out, "--manifest", "/nonexistent.jsonl"],
        vec!["synth", "--config", "/nonexistent.cfg", "--out", &out],
        vec!["eval", "--ckpt", "/nonexistent.ckpt", "--manifest", "/x", "--out", &out],
        vec!["frobnicate"],
    ] {
        let o = mtnet(&args);
        assert!(!o.status.success(), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
}
