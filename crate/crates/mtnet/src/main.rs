use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mtnet::commands::{self, EmbedKind, EvalArgs};
use mtnet::Config;

#[derive(Parser)]
#[command(name = "mtnet", version, about = "Multi-task keyword spotting and speaker verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; built-in desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Option<Config>> {
        let Some(path) = &self.config else { return Ok(None) };
        let mut cfg = Config::load(path).with_context(|| format!("loading config {}", path.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(Some(cfg))
    }

    fn load_or_default(&self) -> Result<Config> {
        let mut cfg = self.load()?.unwrap_or_default();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus: WAVs, train/test manifests, noise banks.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train from a manifest; writes model.ckpt and loss_log.txt to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Noise manifest for per-epoch augmentation.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// EER report for a checkpoint on a test manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        noise: Option<PathBuf>,
        /// kws, sv, or both.
        #[arg(long, default_value = "both")]
        task: String,
        /// clean, all, or a noise type.
        #[arg(long, default_value = "clean")]
        noise_type: String,
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Dump e_w, e_s, v_c, or the enhanced spectrogram of one WAV as text.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// word, speaker, vad, or enhanced.
        #[arg(long)]
        which: String,
    },
    /// Cosine score between an enrollment and a test utterance.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// kws or sv.
        #[arg(long, default_value = "sv")]
        task: String,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { common } => {
            let cfg = common.load_or_default()?;
            let paths = commands::cmd_synth(&cfg, &common.out)?;
            println!("train manifest: {}", paths.train.display());
            println!("test manifest: {}", paths.test.display());
            println!("noise manifests: {} {}", paths.noise_train.display(), paths.noise_test.display());
        }
        Command::Train { common, manifest, noise } => {
            let cfg = common.load_or_default()?;
            let out = commands::cmd_train(&cfg, &manifest, noise.as_deref(), &common.out, |epoch, l| {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!(
                    "epoch {epoch}: L_w {} L_s {} L_c {} total {:.4}",
                    fmt(l.word),
                    fmt(l.speaker),
                    fmt(l.ctc),
                    l.total()
                );
            })?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("loss log: {}", out.loss_log.display());
        }
        Command::Eval {
            common,
            ckpt,
            manifest,
            noise,
            task,
            noise_type,
            snr,
        } => {
            let cfg = common.load()?;
            let rows = commands::cmd_eval(&EvalArgs {
                checkpoint: &ckpt,
                manifest: &manifest,
                noise: noise.as_deref(),
                task: &task,
                noise_type: &noise_type,
                snr_db: snr,
                seed: common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
                config: cfg.as_ref(),
            })?;
            let text = commands::report_text(&rows);
            print!("{text}");
            write(&common.out, &text)?;
        }
        Command::Embed { common, ckpt, wav, which } => {
            let rows = commands::cmd_embed(&ckpt, &wav, EmbedKind::parse(&which)?, &common.out)?;
            let n: usize = rows.iter().map(Vec::len).sum();
            println!("wrote {n} values to {}", common.out.display());
        }
        Command::Score {
            common,
            ckpt,
            enroll,
            test,
            task,
        } => {
            let score = commands::cmd_score(&ckpt, &enroll, &test, &task)?;
            println!("{score}");
            write(&common.out, &format!("{score}\n"))?;
        }
    }
    Ok(())
}
