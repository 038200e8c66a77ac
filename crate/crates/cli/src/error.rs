use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 1.
    #[error("config error{}: {message}", if key.is_empty() { String::new() } else { format!(" at `{key}`") })]
    Config { key: String, message: String },

    /// Failure while running or reporting; exit code 2.
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: ttacil_core::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Results(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            _ => 2,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn core(context: impl Into<String>) -> impl FnOnce(ttacil_core::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context, source }
    }
}
