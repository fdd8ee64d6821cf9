use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flowdistill::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run directory {0} is locked by another command")]
    Locked(PathBuf),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("invalid argument: {0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category printed with every error.
    pub fn kind(&self) -> &'static str {
        use flowdistill::Error as E;
        match self {
            CliError::Core(E::Config { .. }) => "config",
            CliError::Core(E::Checkpoint { .. }) => "checkpoint",
            CliError::Core(E::Stage(_)) | CliError::Prerequisite(_) => "prerequisite",
            CliError::Core(E::Diverged { .. }) => "diverged",
            CliError::Core(E::Io(_)) | CliError::Io { .. } => "io",
            CliError::Core(_) | CliError::Usage(_) => "invalid",
            CliError::Locked(_) => "locked",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "config" => 3,
            "checkpoint" => 4,
            "prerequisite" => 5,
            "locked" => 6,
            _ => 1,
        }
    }
}
