use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported WAV ({reason})")]
    UnsupportedWav { path: PathBuf, reason: String },
    #[error("waveform has {samples} samples, shorter than one {frame_len}-sample frame")]
    TooShort { samples: usize, frame_len: usize },
    #[error("waveform lasts {seconds:.3} s, longer than the {limit} s limit")]
    TooLong { seconds: f64, limit: f64 },
    #[error("waveform contains non-finite samples")]
    NonFiniteSamples,
    #[error("{0} signal has zero power")]
    ZeroPower(&'static str),
    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown noise condition `{0}`")]
    UnknownCondition(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: mtnet_core::Error,
    },
    #[error(transparent)]
    Core(#[from] mtnet_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
