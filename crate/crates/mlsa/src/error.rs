use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint {}: {msg} at byte {offset}", path.display())]
    Checkpoint { path: PathBuf, offset: usize, msg: String },
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error(transparent)]
    Core(#[from] mlsa_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}
