use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error{}{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default(), key.as_ref().map(|k| format!(" (key `{k}`)")).unwrap_or_default())]
    Parse { line: Option<usize>, key: Option<String>, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: dmcr_core::Error,
    },

    #[error("io error: {0}")]
    Io(String),

    #[error("checks failed: {}", .0.join("; "))]
    CheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } | CliError::Config(_) => 2,
            CliError::Stage { .. } | CliError::Io(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }

    pub(crate) fn from_toml(text: &str, err: &toml::de::Error) -> Self {
        let line = err.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        let message = err.message().to_string();
        let key = message
            .split('`')
            .nth(1)
            .filter(|_| message.starts_with("unknown field") || message.starts_with("missing field"))
            .map(str::to_string);
        CliError::Parse { line, key, message }
    }

    pub(crate) fn stage(stage: &str) -> impl FnOnce(dmcr_core::Error) -> CliError + '_ {
        move |source| CliError::Stage { stage: stage.to_string(), source }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
