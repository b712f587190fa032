use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const PRESETS: &[(&str, &str)] = &[
    ("synthetic-desk-iid", include_str!("../presets/synthetic-desk-iid.toml")),
    ("synthetic-desk-noniid", include_str!("../presets/synthetic-desk-noniid.toml")),
    ("mnist-iid-desk", include_str!("../presets/mnist-iid-desk.toml")),
    ("mnist-iid-full", include_str!("../presets/mnist-iid-full.toml")),
    ("mnist-noniid-4", include_str!("../presets/mnist-noniid-4.toml")),
    ("noniid-5-replicated", include_str!("../presets/noniid-5-replicated.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Directory preset data paths are relative to: the working directory when it
/// has a `data/` folder, otherwise the source checkout.
fn data_root() -> PathBuf {
    if Path::new("data").is_dir() {
        PathBuf::from(".")
    } else {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
    }
}

pub fn load(name: &str) -> Result<ExperimentConfig, CliError> {
    let text = text(name).ok_or_else(|| {
        CliError::Config(format!("no preset named {name:?} (available: {})", names().collect::<Vec<_>>().join(", ")))
    })?;
    let mut config = ExperimentConfig::parse(text)?;
    config.resolve_paths(&data_root());
    Ok(config)
}

/// A config file path, or a preset name when no such file exists.
pub fn resolve(arg: &str) -> Result<ExperimentConfig, CliError> {
    let path = Path::new(arg);
    if path.is_file() {
        ExperimentConfig::load(path)
    } else if text(arg).is_some() {
        load(arg)
    } else {
        Err(CliError::Config(format!("{arg}: neither a config file nor a preset name")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in names() {
            load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
