//! The command implementations behind the `mtnet` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mtnet_core::metrics::cosine_score;
use mtnet_core::{Batch, Mode, Session};

use crate::audio::{load_wav, SpectrogramPlan};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{materialize, Dataset, NoiseBank, SynthPaths};
use crate::error::{io, Error, Result};
use crate::eval::{evaluate, Condition, EvalRequest, ReportRow, Task};
use crate::train::{train, EpochLoss, LossLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.txt";

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<SynthPaths> {
    fs::create_dir_all(out).map_err(io(out))?;
    materialize(cfg, out)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub log: LossLog,
}

pub fn cmd_train(
    cfg: &Config,
    manifest: &Path,
    noise: Option<&Path>,
    out: &Path,
    progress: impl FnMut(usize, &EpochLoss),
) -> Result<TrainOutput> {
    let data = Dataset::load(manifest, cfg.train.max_input_seconds)?;
    let bank = noise.map(NoiseBank::load).transpose()?;
    let trained = train(cfg, &data, bank.as_ref(), progress)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&trained.config, &trained.store).save(&checkpoint)?;
    let loss_log = out.join(LOSS_LOG_FILE);
    fs::write(&loss_log, trained.log.to_text()).map_err(io(&loss_log))?;
    Ok(TrainOutput {
        checkpoint,
        loss_log,
        log: trained.log,
    })
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub noise: Option<&'a Path>,
    pub task: &'a str,
    pub noise_type: &'a str,
    pub snr_db: Option<f64>,
    pub seed: u64,
    /// Overrides the evaluation settings stored in the checkpoint.
    pub config: Option<&'a Config>,
}

pub fn cmd_eval(args: &EvalArgs<'_>) -> Result<Vec<ReportRow>> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let settings = args.config.unwrap_or(&ckpt.config);
    let (model, store) = ckpt.restore()?;
    let data = Dataset::load(args.manifest, settings.train.max_input_seconds)?;
    let bank = args.noise.map(NoiseBank::load).transpose()?;
    let types = bank.as_ref().map(NoiseBank::types).unwrap_or_default();
    let conditions = Condition::expand(args.noise_type, args.snr_db, &types, &settings.train.snrs)?;
    let requested = Task::parse_list(args.task)?;
    // `both` means every task the variant supports.
    let tasks: Vec<Task> = match args.task {
        "both" => requested.into_iter().filter(|t| t.supported(model.config.ablation.tasks)).collect(),
        _ => requested,
    };
    evaluate(
        &model,
        &store,
        &data,
        &EvalRequest {
            conditions: &conditions,
            tasks: &tasks,
            noise: bank.as_ref(),
            seed: args.seed,
            batch: settings.train.eval_batch,
        },
    )
}

pub fn report_text(rows: &[ReportRow]) -> String {
    rows.iter().fold(String::new(), |mut s, r| {
        let _ = writeln!(s, "{r}");
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedKind {
    Word,
    Speaker,
    Vad,
    Enhanced,
}

impl EmbedKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "speaker" => Ok(Self::Speaker),
            "vad" => Ok(Self::Vad),
            "enhanced" => Ok(Self::Enhanced),
            other => Err(mtnet_core::Error::Config(format!("unknown array `{other}`")).into()),
        }
    }
}

/// Rows of one forward pass on a single WAV: one row for embeddings and
/// VAD posteriors, `T` rows of `F` values for the enhanced spectrogram.
pub fn extract(ckpt: &Checkpoint, wav: &Path, which: EmbedKind) -> Result<Vec<Vec<f32>>> {
    let (model, store) = ckpt.restore()?;
    let w = load_wav(wav)?;
    w.check_duration(ckpt.config.train.max_input_seconds)?;
    let spec = SpectrogramPlan::new(w.sample_rate, model.config.freq_bins)?.compute(&w)?;
    let (t, f) = (spec.shape()[0], spec.shape()[1]);
    let batch = Batch::from_spectrograms(&[&spec])?;
    let mut s = Session::frozen(&store, Mode::Eval);
    let out = model.forward(&mut s, &batch)?;
    let missing = |what: &str| Error::from(mtnet_core::Error::Config(format!("variant has no {what} output")));
    let (node, cols) = match which {
        EmbedKind::Word => (out.e_w.ok_or_else(|| missing("word embedding"))?, None),
        EmbedKind::Speaker => (out.e_s.ok_or_else(|| missing("speaker embedding"))?, None),
        EmbedKind::Vad => (out.vad.ok_or_else(|| missing("VAD"))?, None),
        EmbedKind::Enhanced => (out.enhanced, Some(f)),
    };
    let data = s.g.value(node).data();
    Ok(match cols {
        Some(f) => data[..t * f].chunks(f).map(<[f32]>::to_vec).collect(),
        None => vec![data.to_vec()],
    })
}

/// Whitespace-separated values, one row per line, at full `f32` precision.
pub fn write_array(path: &Path, rows: &[Vec<f32>]) -> Result<()> {
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(io(path))
}

pub fn read_array(path: &Path) -> Result<Vec<Vec<f32>>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|v| {
                    v.parse().map_err(|_| Error::Manifest {
                        path: path.into(),
                        line: i + 1,
                        reason: format!("invalid number `{v}`"),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn cmd_embed(checkpoint: &Path, wav: &Path, which: EmbedKind, out: &Path) -> Result<Vec<Vec<f32>>> {
    let rows = extract(&Checkpoint::load(checkpoint)?, wav, which)?;
    write_array(out, &rows)?;
    Ok(rows)
}

/// Cosine score between the embeddings of two utterances.
pub fn cmd_score(checkpoint: &Path, enroll: &Path, test: &Path, task: &str) -> Result<f64> {
    let kind = match Task::parse_list(task)?.as_slice() {
        [Task::Kws] => EmbedKind::Word,
        [Task::Sv] => EmbedKind::Speaker,
        _ => return Err(mtnet_core::Error::Config("score needs task kws or sv".into()).into()),
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let a = extract(&ckpt, enroll, kind)?;
    let b = extract(&ckpt, test, kind)?;
    Ok(cosine_score(&a[0], &b[0])?)
}
