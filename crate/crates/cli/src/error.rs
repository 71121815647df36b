use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] augdiff::Error),

    #[error("{0}")]
    Argument(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Argument(_) => "argument",
            CliError::Io { .. } => "io",
        }
    }

    /// `error[<category>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.category())
    }

    /// Process exit code per category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "argument" | "config" => 2,
            "io" | "format" => 3,
            "dataset" => 4,
            "digest" => 5,
            "numeric" => 6,
            _ => 1,
        }
    }
}
