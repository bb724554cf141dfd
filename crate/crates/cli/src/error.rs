use std::io;
use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] augsens_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("stage `{stage}` needs the output of `{needs}` for this config; run `augsens {needs}` first")]
    MissingStage { stage: &'static str, needs: &'static str },

    #[error("corrupt artifact {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("class sensitivity needs maps at the classifying checkpoint `{0}`; add it to `checkpoints` and rerun `augsens estimate`")]
    MissingClassifyingMap(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| CliError::Io { path: path.into(), source })
    }
}
